//! Loss functions: GAN objective, cosine and thresholded scoring, InfoNCE,
//! PatchNCE, segmentation-conditioned NCE and the composite objectives.
//!
//! Every function operates on autodiff [`Var`]s so the same code serves
//! training (f32) and gradient checks (f64).

use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Var;
use crate::config::{ExperimentConfig, LossWeights};
use crate::nets::{NetError, Projector};
use crate::tensor::{Float, Tensor};

/// Added to embedding norms before dividing.
pub const COSINE_EPS: f64 = 1e-8;
/// Probabilities are clamped to `[LOG_EPS, 1 - LOG_EPS]` before the log.
pub const LOG_EPS: f64 = 1e-7;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("need at least 2 candidates, got {0}")]
    TooFewCandidates(usize),
    #[error("target index {target} out of range for {candidates} candidates")]
    TargetOutOfRange { target: usize, candidates: usize },
    #[error("feature mismatch: {0}")]
    Mismatch(String),
    #[error("loss component {component} is not finite ({value})")]
    NonFinite { component: &'static str, value: f64 },
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Which pairwise score the NCE softmax uses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Scoring {
    /// Plain cosine similarity.
    Original,
    /// Negatives whose cosine exceeds `theta` are scaled by `alpha`.
    Modified { alpha: f64, theta: f64 },
}

impl Scoring {
    pub fn modified(cfg: &ExperimentConfig) -> Self {
        Scoring::Modified { alpha: cfg.alpha, theta: cfg.theta }
    }

    fn factor(self, score: f64, is_positive: bool) -> f64 {
        match self {
            Scoring::Original => 1.0,
            Scoring::Modified { alpha, theta } => {
                if score > theta && !is_positive {
                    alpha
                } else {
                    1.0
                }
            }
        }
    }
}

/// Thresholded rescaling of a single cosine score.
pub fn modified_score(score: f64, is_positive: bool, alpha: f64, theta: f64) -> f64 {
    Scoring::Modified { alpha, theta }.factor(score, is_positive) * score
}

fn as_rows<'g, T: Float>(v: Var<'g, T>) -> Var<'g, T> {
    match v.shape().as_slice() {
        [d] => v.reshape(&[1, *d]),
        _ => v,
    }
}

/// Cosine similarity of `H_l(z_i)` and `H_l(z_j)`.
pub fn cosine_score<'g, T: Float, P: Projector<'g, T>>(
    proj: &P,
    layer: usize,
    z_i: Var<'g, T>,
    z_j: Var<'g, T>,
) -> Result<Var<'g, T>, LossError> {
    let a = proj.project(layer, as_rows(z_i))?.normalize_rows(COSINE_EPS);
    let b = proj.project(layer, as_rows(z_j))?.normalize_rows(COSINE_EPS);
    if a.shape() != b.shape() || a.shape()[0] != 1 {
        return Err(LossError::Mismatch(format!("cosine_score needs two vectors, got {:?} and {:?}", a.shape(), b.shape())));
    }
    Ok(a.mul(b).sum())
}

/// `[n, m]` matrix of scores between already projected query and candidate
/// rows. `positive[r]` is the candidate exempt from the threshold in row `r`.
pub fn score_matrix<'g, T: Float>(
    queries: Var<'g, T>,
    candidates: Var<'g, T>,
    positive: &[usize],
    scoring: Scoring,
) -> Var<'g, T> {
    let q = queries.normalize_rows(COSINE_EPS);
    let c = candidates.normalize_rows(COSINE_EPS);
    let s = q.matmul_t(c);
    if scoring == Scoring::Original {
        return s;
    }
    let values = s.value();
    let m = values.dim(1);
    let factors: Vec<T> = values
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| T::of(scoring.factor(v.to_f64_lossy(), positive[k / m] == k % m)))
        .collect();
    s.mul(s.graph().constant(Tensor::from_vec(values.shape(), factors)))
}

/// `-sum(w * log_softmax(scores / tau))` with rows restricted to `mask`.
fn weighted_cross_entropy<'g, T: Float>(
    scores: Var<'g, T>,
    tau: f64,
    mask: Option<Rc<Vec<bool>>>,
    weights: Tensor<T>,
) -> Var<'g, T> {
    let logp = scores.scale(T::of(1.0 / tau)).log_softmax_rows(mask);
    logp.mul(scores.graph().constant(weights)).sum().neg()
}

fn check_pair<T: Float>(a: &Var<'_, T>, b: &Var<'_, T>, what: &str) -> Result<(), LossError> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sa != sb {
        return Err(LossError::Mismatch(format!("{what}: shapes {sa:?} and {sb:?}")));
    }
    Ok(())
}

/// InfoNCE for one query against a candidate set, positive at `target`.
/// Inputs are already projected embeddings.
pub fn nce_loss<'g, T: Float>(
    query: Var<'g, T>,
    candidates: Var<'g, T>,
    target: usize,
    scoring: Scoring,
    tau: f64,
) -> Result<Var<'g, T>, LossError> {
    let query = as_rows(query);
    let shape = candidates.shape();
    let m = if shape.len() == 2 { shape[0] } else { 0 };
    if m < 2 {
        return Err(LossError::TooFewCandidates(m));
    }
    if target >= m {
        return Err(LossError::TargetOutOfRange { target, candidates: m });
    }
    if query.shape() != [1, shape[1]] {
        return Err(LossError::Mismatch(format!("query {:?} vs candidates {shape:?}", query.shape())));
    }
    let scores = score_matrix(query, candidates, &[target], scoring);
    let mut w = Tensor::zeros(&[1, m]);
    w.data_mut()[target] = T::one();
    Ok(weighted_cross_entropy(scores, tau, None, w))
}

/// Sum over layers and feature indices of the NCE loss pairing input feature
/// `i` with output feature `i`. `features_in[l]` and `features_out[l]` are
/// `[N, C_l]` rows taken at the same spatial indices.
pub fn patchnce_loss<'g, T: Float, P: Projector<'g, T>>(
    proj: &P,
    features_in: &[Var<'g, T>],
    features_out: &[Var<'g, T>],
    scoring: Scoring,
    tau: f64,
) -> Result<Var<'g, T>, LossError> {
    if features_in.len() != features_out.len() || features_in.is_empty() {
        return Err(LossError::Mismatch(format!(
            "{} input layers vs {} output layers",
            features_in.len(),
            features_out.len()
        )));
    }
    let mut total: Option<Var<'g, T>> = None;
    for (l, (&zin, &zout)) in features_in.iter().zip(features_out).enumerate() {
        check_pair(&zin, &zout, &format!("layer {l}"))?;
        let n = zin.shape()[0];
        if n < 2 {
            return Err(LossError::TooFewCandidates(n));
        }
        let q = proj.project(l, zin)?;
        let c = proj.project(l, zout)?;
        let diag: Vec<usize> = (0..n).collect();
        let scores = score_matrix(q, c, &diag, scoring);
        let mut w = Tensor::zeros(&[n, n]);
        for i in 0..n {
            w.data_mut()[i * n + i] = T::one();
        }
        let term = weighted_cross_entropy(scores, tau, None, w);
        total = Some(match total {
            Some(t) => t.add(term),
            None => term,
        });
    }
    Ok(total.expect("at least one layer"))
}

fn partners(labels: &[u8], i: usize) -> Vec<usize> {
    (0..labels.len()).filter(|&j| j != i && labels[j] == labels[i]).collect()
}

fn self_mask(n: usize, include_self: bool) -> Option<Rc<Vec<bool>>> {
    (!include_self).then(|| Rc::new((0..n * n).map(|k| k / n != k % n).collect()))
}

/// Multi-positive NCE for query `i` of layer `layer`: the mean over every
/// same-label partner `j != i` of the NCE loss with target `j`, candidates
/// being the whole set. `None` when `i` has no partner.
#[allow(clippy::too_many_arguments)]
pub fn segnce_query_loss<'g, T: Float, P: Projector<'g, T>>(
    proj: &P,
    layer: usize,
    features: Var<'g, T>,
    i: usize,
    labels: &[u8],
    tau: f64,
    include_self: bool,
) -> Result<Option<Var<'g, T>>, LossError> {
    let n = check_labels(&features, labels)?;
    if i >= n {
        return Err(LossError::TargetOutOfRange { target: i, candidates: n });
    }
    let pos = partners(labels, i);
    if pos.is_empty() {
        return Ok(None);
    }
    let z = proj.project(layer, features)?;
    let q = z.select_rows(&[i]);
    let scores = score_matrix(q, z, &[i], Scoring::Original);
    let mask = self_mask(n, include_self).map(|m| Rc::new(m[i * n..(i + 1) * n].to_vec()));
    let mut w = Tensor::zeros(&[1, n]);
    for &j in &pos {
        w.data_mut()[j] = T::of(1.0 / pos.len() as f64);
    }
    Ok(Some(weighted_cross_entropy(scores, tau, mask, w)))
}

fn check_labels<T: Float>(features: &Var<'_, T>, labels: &[u8]) -> Result<usize, LossError> {
    let shape = features.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(LossError::Mismatch(format!("{} labels for features {shape:?}", labels.len())));
    }
    if shape[0] < 2 {
        return Err(LossError::TooFewCandidates(shape[0]));
    }
    Ok(shape[0])
}

/// SegNCE value plus the layers where every query was skipped.
pub struct SegNce<'g, T: Float> {
    pub loss: Var<'g, T>,
    pub empty_layers: Vec<usize>,
}

/// Per layer, the mean of the query losses over queries that have a partner;
/// summed over layers. A layer without any partner contributes 0.
pub fn segnce_loss<'g, T: Float, P: Projector<'g, T>>(
    proj: &P,
    features: &[Var<'g, T>],
    labels: &[Vec<u8>],
    tau: f64,
    include_self: bool,
) -> Result<SegNce<'g, T>, LossError> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(LossError::Mismatch(format!("{} feature layers vs {} label layers", features.len(), labels.len())));
    }
    let mut total: Option<Var<'g, T>> = None;
    let mut empty_layers = Vec::new();
    for (l, (&z, y)) in features.iter().zip(labels).enumerate() {
        let n = match check_labels(&z, y) {
            Err(LossError::TooFewCandidates(n)) => n,
            other => other?,
        };
        let rows: Vec<Vec<usize>> = (0..n).map(|i| partners(y, i)).collect();
        let active = rows.iter().filter(|p| !p.is_empty()).count();
        if active == 0 {
            log::warn!("segnce: every query at layer {l} lacks a same-class partner; layer contributes 0");
            empty_layers.push(l);
            continue;
        }
        let zp = proj.project(l, z)?;
        let diag: Vec<usize> = (0..n).collect();
        let scores = score_matrix(zp, zp, &diag, Scoring::Original);
        let mut w = Tensor::zeros(&[n, n]);
        for (i, pos) in rows.iter().enumerate() {
            for &j in pos {
                w.data_mut()[i * n + j] = T::of(1.0 / (pos.len() * active) as f64);
            }
        }
        let term = weighted_cross_entropy(scores, tau, self_mask(n, include_self), w);
        total = Some(match total {
            Some(t) => t.add(term),
            None => term,
        });
    }
    let loss = match total {
        Some(t) => t,
        None => features[0].graph().constant(Tensor::scalar(T::zero())),
    };
    Ok(SegNce { loss, empty_layers })
}

/// `mean log D(real) + mean log(1 - D(fake))` on clamped probabilities.
pub fn gan_loss<'g, T: Float>(real: Var<'g, T>, fake: Var<'g, T>) -> Var<'g, T> {
    let (lo, hi) = (T::of(LOG_EPS), T::of(1.0 - LOG_EPS));
    let real_term = real.clamp(lo, hi).ln().mean();
    let fake_term = fake.clamp(lo, hi).neg().add_scalar(T::one()).ln().mean();
    real_term.add(fake_term)
}

/// Scalar loss values before weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub gan: f64,
    pub patchnce_a: f64,
    pub patchnce_idb: f64,
    pub segnce: f64,
}

#[allow(non_snake_case)]
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub gan_G: f64,
    pub gan_D: f64,
    pub patchnce_A: f64,
    pub patchnce_idB: f64,
    pub segnce: f64,
    pub total_G: f64,
    pub total_D: f64,
}

fn finite(component: &'static str, value: f64) -> Result<f64, LossError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(LossError::NonFinite { component, value })
    }
}

/// Weighted generator objective and the discriminator objective.
pub fn total_losses(c: &LossComponents, w: &LossWeights) -> Result<LossReport, LossError> {
    let gan = finite("gan", c.gan)?;
    let pa = finite("patchnce_A", c.patchnce_a)?;
    let pb = finite("patchnce_idB", c.patchnce_idb)?;
    let seg = finite("segnce", c.segnce)?;
    Ok(LossReport {
        gan_G: gan,
        gan_D: -gan,
        patchnce_A: pa,
        patchnce_idB: pb,
        segnce: seg,
        total_G: w.patchnce_a * pa + w.patchnce_idb * pb + w.segnce * seg + w.gan * gan,
        total_D: -gan,
    })
}
