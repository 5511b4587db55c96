//! Loss report from serialized feature dumps, for comparing loss values
//! across implementations without running the networks.
//!
//! The manifest is JSON; feature paths are relative to the manifest file and
//! use the feature-file format of [`crate::eval::write_features`]. Features
//! are taken as already projected embeddings.
//!
//! ```json
//! {
//!   "tau": 0.07, "alpha": 0.5, "theta": 0.9, "include_self": true,
//!   "patchnce_a":   {"in": ["a_in_0.bin"], "out": ["a_out_0.bin"]},
//!   "patchnce_idb": {"in": ["b_in_0.bin"], "out": ["b_out_0.bin"]},
//!   "segnce": {"features": ["seg_0.bin"], "labels": [[0, 0, 1, 1]]},
//!   "gan": {"real": "real.bin", "fake": "fake.bin"},
//!   "weights": {"patchnce_a": 1, "patchnce_idb": 1, "segnce": 1, "gan": 1}
//! }
//! ```

use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::autodiff::{Graph, Var};
use crate::config::LossWeights;
use crate::eval::{read_features, EvalError};
use crate::losses::{gan_loss, patchnce_loss, segnce_loss, total_losses, LossComponents, LossError, LossReport, Scoring};
use crate::nets::IdentityProjector;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DiagnosticError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: invalid manifest: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error(transparent)]
    Features(#[from] EvalError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PairDump {
    #[serde(rename = "in")]
    input: Vec<PathBuf>,
    out: Vec<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SegDump {
    features: Vec<PathBuf>,
    labels: Vec<Vec<u8>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GanDump {
    real: PathBuf,
    fake: PathBuf,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsDump {
    patchnce_a: f64,
    patchnce_idb: f64,
    segnce: f64,
    gan: f64,
}

fn default_tau() -> f64 {
    0.07
}
fn default_alpha() -> f64 {
    0.5
}
fn default_theta() -> f64 {
    0.9
}
fn default_true() -> bool {
    true
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    #[serde(default = "default_tau")]
    tau: f64,
    #[serde(default = "default_alpha")]
    alpha: f64,
    #[serde(default = "default_theta")]
    theta: f64,
    #[serde(default = "default_true")]
    include_self: bool,
    patchnce_a: PairDump,
    patchnce_idb: PairDump,
    segnce: SegDump,
    gan: GanDump,
    weights: Option<WeightsDump>,
}

fn load_rows<'g>(g: &'g Graph<f64>, base: &Path, file: &Path) -> Result<Var<'g, f64>, DiagnosticError> {
    let rows = read_features(&base.join(file))?;
    let dim = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.concat();
    Ok(g.constant(Tensor::from_vec(&[rows.len(), dim], flat)))
}

fn load_layers<'g>(g: &'g Graph<f64>, base: &Path, files: &[PathBuf]) -> Result<Vec<Var<'g, f64>>, DiagnosticError> {
    files.iter().map(|f| load_rows(g, base, f)).collect()
}

fn load_scores<'g>(g: &'g Graph<f64>, base: &Path, file: &Path) -> Result<Var<'g, f64>, DiagnosticError> {
    let v = load_rows(g, base, file)?;
    let n = v.value().len();
    Ok(v.reshape(&[n]))
}

/// Evaluate every loss component described by the manifest at `path`.
pub fn loss_report_from_manifest(path: &Path) -> Result<LossReport, DiagnosticError> {
    let text = std::fs::read_to_string(path).map_err(|source| DiagnosticError::Io { path: path.into(), source })?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| DiagnosticError::Manifest { path: path.into(), reason: e.to_string() })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let g = Graph::<f64>::inference();
    let scoring = Scoring::Modified { alpha: m.alpha, theta: m.theta };

    let pa_in = load_layers(&g, base, &m.patchnce_a.input)?;
    let pa_out = load_layers(&g, base, &m.patchnce_a.out)?;
    let pb_in = load_layers(&g, base, &m.patchnce_idb.input)?;
    let pb_out = load_layers(&g, base, &m.patchnce_idb.out)?;
    let seg = load_layers(&g, base, &m.segnce.features)?;
    let layers = pa_in.len().max(pb_in.len()).max(seg.len());
    let id = IdentityProjector { layers };

    let components = LossComponents {
        patchnce_a: patchnce_loss(&id, &pa_in, &pa_out, scoring, m.tau)?.item(),
        patchnce_idb: patchnce_loss(&id, &pb_in, &pb_out, scoring, m.tau)?.item(),
        segnce: segnce_loss(&id, &seg, &m.segnce.labels, m.tau, m.include_self)?.loss.item(),
        gan: gan_loss(load_scores(&g, base, &m.gan.real)?, load_scores(&g, base, &m.gan.fake)?).item(),
    };
    let weights = m.weights.map_or(
        LossWeights { patchnce_a: 1.0, patchnce_idb: 1.0, segnce: 1.0, gan: 1.0 },
        |w| LossWeights { patchnce_a: w.patchnce_a, patchnce_idb: w.patchnce_idb, segnce: w.segnce, gan: w.gan },
    );
    Ok(total_losses(&components, &weights)?)
}
