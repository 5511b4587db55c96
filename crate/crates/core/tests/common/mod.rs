//! Plain-f64 reference implementations and random instance generators shared
//! by the loss tests and the acceptance suite. Nothing here touches the
//! autodiff graph; everything is loops over `Vec<f64>`.

#![allow(dead_code)]

pub mod fixtures;

use mango::autodiff::{Graph, Var};
use mango::losses::{gan_loss, nce_loss, patchnce_loss, segnce_loss, Scoring, COSINE_EPS, LOG_EPS};
use mango::nets::IdentityProjector;
use mango::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rows = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// `‖a - b‖ / max(‖a‖, ‖b‖)`, 0 when both vanish.
pub fn vec_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

// ---- reference definitions ----

pub fn oracle_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / ((na + COSINE_EPS) * (nb + COSINE_EPS))
}

/// Piecewise rescaling written out case by case.
pub fn oracle_rho(score: f64, positive: bool, scoring: Scoring) -> f64 {
    match scoring {
        Scoring::Original => score,
        Scoring::Modified { alpha, theta } => {
            if positive {
                score
            } else if score > theta {
                alpha * score
            } else {
                score
            }
        }
    }
}

/// `-log(exp(l_t) / sum_k exp(l_k))` over the candidates in `keep`, written
/// as `ln(1 + sum_{k != t} exp(l_k - l_t))` so tiny losses stay accurate.
fn neg_log_prob(logits: &[f64], target: usize, keep: &[usize]) -> f64 {
    let others: f64 = keep.iter().filter(|&&k| k != target).map(|&k| (logits[k] - logits[target]).exp()).sum();
    others.ln_1p()
}

pub fn oracle_nce(query: &[f64], candidates: &Rows, target: usize, scoring: Scoring, tau: f64) -> f64 {
    let logits: Vec<f64> = candidates
        .iter()
        .enumerate()
        .map(|(j, c)| oracle_rho(oracle_cos(query, c), j == target, scoring) / tau)
        .collect();
    let all: Vec<usize> = (0..candidates.len()).collect();
    neg_log_prob(&logits, target, &all)
}

pub fn oracle_patchnce(zin: &[Rows], zout: &[Rows], scoring: Scoring, tau: f64) -> f64 {
    let mut total = 0.0;
    for (a, b) in zin.iter().zip(zout) {
        for (i, q) in a.iter().enumerate() {
            total += oracle_nce(q, b, i, scoring, tau);
        }
    }
    total
}

pub fn oracle_segnce(features: &[Rows], labels: &[Vec<u8>], tau: f64, include_self: bool) -> f64 {
    let mut total = 0.0;
    for (z, y) in features.iter().zip(labels) {
        let n = z.len();
        let mut layer_sum = 0.0;
        let mut active = 0usize;
        for i in 0..n {
            let partners: Vec<usize> = (0..n).filter(|&j| j != i && y[j] == y[i]).collect();
            if partners.is_empty() {
                continue;
            }
            active += 1;
            let logits: Vec<f64> = (0..n).map(|k| oracle_cos(&z[i], &z[k]) / tau).collect();
            let keep: Vec<usize> = (0..n).filter(|&k| include_self || k != i).collect();
            let per: f64 = partners.iter().map(|&j| neg_log_prob(&logits, j, &keep)).sum();
            layer_sum += per / partners.len() as f64;
        }
        if active > 0 {
            total += layer_sum / active as f64;
        }
    }
    total
}

pub fn oracle_gan(real: &[f64], fake: &[f64]) -> f64 {
    let clamp = |p: f64| p.clamp(LOG_EPS, 1.0 - LOG_EPS);
    let r: f64 = real.iter().map(|&p| clamp(p).ln()).sum::<f64>() / real.len() as f64;
    let f: f64 = fake.iter().map(|&p| (1.0 - clamp(p)).ln()).sum::<f64>() / fake.len() as f64;
    r + f
}

// ---- random instances ----

pub fn normal_rows(rng: &mut impl Rng, n: usize, d: usize) -> Rows {
    (0..n).map(|_| (0..d).map(|_| StandardNormal.sample(rng)).collect()).collect()
}

pub fn random_scoring(rng: &mut impl Rng) -> Scoring {
    if rng.random_bool(0.3) {
        Scoring::Original
    } else {
        Scoring::Modified { alpha: rng.random_range(0.0..1.0), theta: rng.random_range(-0.8..0.99) }
    }
}

pub fn random_tau(rng: &mut impl Rng) -> f64 {
    [0.07, 0.1, 0.5, 1.0][rng.random_range(0..4)]
}

pub struct LayerSet {
    pub zin: Vec<Rows>,
    pub zout: Vec<Rows>,
}

/// 1..=3 layers of `n` rows each (`n` shared across layers, dim per layer).
pub fn random_layers(rng: &mut impl Rng, n: usize) -> LayerSet {
    let layers = rng.random_range(1..=3);
    let mut zin = Vec::new();
    let mut zout = Vec::new();
    for _ in 0..layers {
        let d = rng.random_range(1..=4);
        zin.push(normal_rows(rng, n, d));
        zout.push(normal_rows(rng, n, d));
    }
    LayerSet { zin, zout }
}

pub fn random_labels(rng: &mut impl Rng, n: usize) -> Vec<u8> {
    let classes = rng.random_range(1..=n.min(4) as u8);
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

pub fn random_probs(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.01..0.99)).collect()
}

// ---- library wrappers on an f64 graph ----

pub fn rows_var<'g>(g: &'g Graph<f64>, rows: &Rows) -> Var<'g, f64> {
    let d = rows[0].len();
    g.input(Tensor::from_f64(&[rows.len(), d], &rows.concat()))
}

pub fn vec_var<'g>(g: &'g Graph<f64>, v: &[f64]) -> Var<'g, f64> {
    g.input(Tensor::from_f64(&[v.len()], v))
}

/// Value and gradient with respect to every input, flattened in input order.
pub type ValueGrad = (f64, Vec<f64>);

fn grads_of(g: &Graph<f64>, loss: Var<'_, f64>, inputs: &[Var<'_, f64>]) -> ValueGrad {
    let grads = g.backward(loss);
    let flat = inputs.iter().flat_map(|&v| grads.get_or_zeros(v).into_data()).collect();
    (loss.item(), flat)
}

pub fn lib_nce(query: &[f64], candidates: &Rows, target: usize, scoring: Scoring, tau: f64) -> ValueGrad {
    let g = Graph::new();
    let q = vec_var(&g, query);
    let c = rows_var(&g, candidates);
    let loss = nce_loss(q, c, target, scoring, tau).unwrap();
    grads_of(&g, loss, &[q, c])
}

pub fn lib_patchnce(zin: &[Rows], zout: &[Rows], scoring: Scoring, tau: f64) -> ValueGrad {
    let g = Graph::new();
    let a: Vec<_> = zin.iter().map(|r| rows_var(&g, r)).collect();
    let b: Vec<_> = zout.iter().map(|r| rows_var(&g, r)).collect();
    let id = IdentityProjector { layers: a.len() };
    let loss = patchnce_loss(&id, &a, &b, scoring, tau).unwrap();
    let inputs: Vec<_> = a.iter().chain(&b).copied().collect();
    grads_of(&g, loss, &inputs)
}

pub fn lib_segnce(features: &[Rows], labels: &[Vec<u8>], tau: f64, include_self: bool) -> ValueGrad {
    let g = Graph::new();
    let z: Vec<_> = features.iter().map(|r| rows_var(&g, r)).collect();
    let id = IdentityProjector { layers: z.len() };
    let loss = segnce_loss(&id, &z, labels, tau, include_self).unwrap().loss;
    grads_of(&g, loss, &z)
}

pub fn lib_gan(real: &[f64], fake: &[f64]) -> ValueGrad {
    let g = Graph::new();
    let (r, f) = (vec_var(&g, real), vec_var(&g, fake));
    grads_of(&g, gan_loss(r, f), &[r, f])
}

/// Central differences of `f` at `x` with step `h`.
pub fn finite_diff(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[i] += h;
            m[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

/// Split a flat vector back into row blocks shaped like `like`.
pub fn unflatten(flat: &[f64], like: &[Rows]) -> Vec<Rows> {
    let mut at = 0;
    like.iter()
        .map(|layer| {
            layer
                .iter()
                .map(|row| {
                    let r = flat[at..at + row.len()].to_vec();
                    at += row.len();
                    r
                })
                .collect()
        })
        .collect()
}

pub fn flatten(layers: &[Rows]) -> Vec<f64> {
    layers.iter().flat_map(|l| l.iter().flatten().copied()).collect()
}

/// Smallest distance between any pairwise cosine in `a` x `b` and `theta`,
/// used to keep finite differences away from the threshold kink.
pub fn threshold_margin(a: &Rows, b: &Rows, scoring: Scoring) -> f64 {
    match scoring {
        Scoring::Original => f64::INFINITY,
        Scoring::Modified { theta, .. } => a
            .iter()
            .flat_map(|x| b.iter().map(move |y| (oracle_cos(x, y) - theta).abs()))
            .fold(f64::INFINITY, f64::min),
    }
}
