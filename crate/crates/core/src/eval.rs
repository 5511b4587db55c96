//! Dataset translation, Fréchet distance between feature sets and average
//! pairwise distance, with pluggable embedders and distance oracles.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{write_atomic, CheckpointError};
use crate::data::{image_files, DataError};
use crate::image::{Image, ImageError};
use crate::nets::NetError;
use crate::trainer::{TrainError, TrainState};

/// Added to both covariances when either is close to singular.
pub const FID_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("feature dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("{image}: expected {expected}x{expected} (checkpoint image size), got {width}x{height}")]
    SizeMismatch { image: String, expected: usize, width: usize, height: usize },
    #[error("{image}: {reason}")]
    Embed { image: String, reason: String },
    #[error("unknown {kind} '{name}'")]
    UnknownName { kind: &'static str, name: String },
    #[error("{path}: {reason}")]
    FeatureFile { path: String, reason: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io { path: path.to_path_buf(), source }
}

/// Maps an image to a fixed-length feature vector.
pub trait Embedder {
    /// Identity tag recorded in reports.
    fn name(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&self, image: &Image) -> Result<Vec<f64>, String>;
}

/// The resampler clamps float pixels to `[0, 1]`, so work in that range.
fn resize_bicubic(image: &Image, side: usize) -> Image {
    let (h, w) = (image.height(), image.width());
    let buf: ImageBuffer<Rgb<f32>, Vec<f32>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Rgb(image.pixel(y as usize, x as usize).map(|v| (v + 1.0) * 0.5))
    });
    let small = image::imageops::resize(&buf, side as u32, side as u32, FilterType::CatmullRom);
    let mut out = Image::filled(side, side, [0.0; 3]);
    for (x, y, p) in small.enumerate_pixels() {
        out.set_pixel(y as usize, x as usize, p.0.map(|v| v * 2.0 - 1.0));
    }
    out
}

/// Bicubic downsample to `side x side`, then flatten (CHW order).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DownsampleEmbedder {
    pub side: usize,
}

impl Default for DownsampleEmbedder {
    fn default() -> Self {
        DownsampleEmbedder { side: 8 }
    }
}

impl Embedder for DownsampleEmbedder {
    fn name(&self) -> String {
        format!("downsample:{}", self.side)
    }

    fn dim(&self) -> usize {
        3 * self.side * self.side
    }

    fn embed(&self, image: &Image) -> Result<Vec<f64>, String> {
        if image.height() < self.side || image.width() < self.side {
            return Err(format!("image smaller than {}x{}", self.side, self.side));
        }
        Ok(resize_bicubic(image, self.side).data().iter().map(|&v| v as f64).collect())
    }
}

/// Fixed Gaussian random projection of the flattened `input_side` image.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomProjectionEmbedder {
    pub dim: usize,
    pub seed: u64,
    pub input_side: usize,
    matrix: Vec<f64>,
}

impl RandomProjectionEmbedder {
    pub fn new(dim: usize, seed: u64, input_side: usize) -> Self {
        let rows = 3 * input_side * input_side;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (rows as f64).sqrt();
        let matrix = (0..rows * dim).map(|_| Distribution::<f64>::sample(&StandardNormal, &mut rng) * scale).collect::<Vec<f64>>();
        RandomProjectionEmbedder { dim, seed, input_side, matrix }
    }
}

impl Embedder for RandomProjectionEmbedder {
    fn name(&self) -> String {
        format!("random:{}:{}:{}", self.dim, self.seed, self.input_side)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, image: &Image) -> Result<Vec<f64>, String> {
        let flat = DownsampleEmbedder { side: self.input_side }.embed(image)?;
        let mut out = vec![0.0; self.dim];
        for (r, &x) in flat.iter().enumerate() {
            let row = &self.matrix[r * self.dim..(r + 1) * self.dim];
            out.iter_mut().zip(row).for_each(|(o, &m)| *o += x * m);
        }
        Ok(out)
    }
}

/// `downsample`, `downsample:S`, `random`, `random:DIM`, `random:DIM:SEED`
/// or `random:DIM:SEED:SIDE`.
pub fn embedder_from_name(name: &str) -> Result<Box<dyn Embedder>, EvalError> {
    let unknown = || EvalError::UnknownName { kind: "embedder", name: name.to_string() };
    let mut parts = name.split(':');
    let kind = parts.next().unwrap_or_default();
    let nums: Vec<usize> = parts.map(usize::from_str).collect::<Result<_, _>>().map_err(|_| unknown())?;
    match (kind, nums.as_slice()) {
        ("downsample", []) => Ok(Box::new(DownsampleEmbedder::default())),
        ("downsample", [s]) if *s > 0 => Ok(Box::new(DownsampleEmbedder { side: *s })),
        ("random", rest) if rest.len() <= 3 => {
            let dim = rest.first().copied().unwrap_or(64);
            let seed = rest.get(1).copied().unwrap_or(0) as u64;
            let side = rest.get(2).copied().unwrap_or(16);
            if dim == 0 || side == 0 {
                return Err(unknown());
            }
            Ok(Box::new(RandomProjectionEmbedder::new(dim, seed, side)))
        }
        _ => Err(unknown()),
    }
}

/// Load every PNG of `dir` (or `dir/images`) in name order.
pub fn load_images(dir: &Path) -> Result<Vec<(String, Image)>, EvalError> {
    image_files(dir)?
        .into_iter()
        .map(|p| {
            let name = p.file_name().expect("listed file").to_string_lossy().into_owned();
            Ok((name, Image::load_png(&p)?))
        })
        .collect()
}

/// One feature vector per image, in input order.
pub fn embed_dataset(images: &[(String, Image)], embedder: &dyn Embedder) -> Result<Vec<Vec<f64>>, EvalError> {
    images
        .iter()
        .map(|(name, img)| {
            let v = embedder.embed(img).map_err(|reason| EvalError::Embed { image: name.clone(), reason })?;
            if v.len() != embedder.dim() {
                return Err(EvalError::Embed {
                    image: name.clone(),
                    reason: format!("embedder returned {} values, expected {}", v.len(), embedder.dim()),
                });
            }
            Ok(v)
        })
        .collect()
}

/// Sample mean and unbiased covariance.
pub fn moments(samples: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>), EvalError> {
    let n = samples.len();
    if n < 2 {
        return Err(EvalError::TooFewSamples(n));
    }
    let d = samples[0].len();
    if let Some(bad) = samples.iter().find(|s| s.len() != d) {
        return Err(EvalError::DimensionMismatch(d, bad.len()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| samples[i][j]);
    let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
    let mut centered = x;
    for j in 0..d {
        let mu = mean[j];
        centered.column_mut(j).iter_mut().for_each(|v| *v -= mu);
    }
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
    Ok((mean, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new((m + m.transpose()) * 0.5).eigenvalues.min()
}

/// Fréchet distance between two Gaussians given by their moments.
pub fn fid_from_moments(
    mu_x: &DVector<f64>,
    sigma_x: &DMatrix<f64>,
    mu_y: &DVector<f64>,
    sigma_y: &DMatrix<f64>,
) -> Result<f64, EvalError> {
    if mu_x.len() != mu_y.len() {
        return Err(EvalError::DimensionMismatch(mu_x.len(), mu_y.len()));
    }
    let d = mu_x.len();
    let (mut sx, mut sy) = (sigma_x.clone(), sigma_y.clone());
    if min_eigenvalue(&sx) < FID_EPS || min_eigenvalue(&sy) < FID_EPS {
        let offset = DMatrix::<f64>::identity(d, d) * FID_EPS;
        sx += &offset;
        sy += &offset;
    }
    // tr((Sx Sy)^1/2) = tr((Sx^1/2 Sy Sx^1/2)^1/2), the latter symmetric.
    let root_x = sym_sqrt(&sx);
    let covmean = sym_sqrt(&(&root_x * &sy * &root_x));
    let diff = mu_x - mu_y;
    let fid = diff.dot(&diff) + sx.trace() + sy.trace() - 2.0 * covmean.trace();
    Ok(fid.max(0.0))
}

pub fn compute_fid(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64, EvalError> {
    let (mx, sx) = moments(x)?;
    let (my, sy) = moments(y)?;
    fid_from_moments(&mx, &sx, &my, &sy)
}

/// Symmetric, nonnegative distance between two images.
pub trait DistanceOracle {
    fn name(&self) -> String;
    fn distance(&self, a: &Image, b: &Image) -> f64;
}

/// Always returns the same value; for testing the averaging.
#[derive(Clone, Copy, Debug)]
pub struct ConstantOracle(pub f64);

impl DistanceOracle for ConstantOracle {
    fn name(&self) -> String {
        format!("constant:{}", self.0)
    }

    fn distance(&self, _: &Image, _: &Image) -> f64 {
        self.0
    }
}

/// Root-mean-square pixel difference.
#[derive(Clone, Copy, Debug)]
pub struct PixelRmsOracle;

impl DistanceOracle for PixelRmsOracle {
    fn name(&self) -> String {
        "pixel-rms".into()
    }

    fn distance(&self, a: &Image, b: &Image) -> f64 {
        let n = a.data().len().max(1) as f64;
        let ss: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum();
        (ss / n).sqrt()
    }
}

/// Euclidean distance between embeddings.
pub struct EmbeddingOracle(pub Box<dyn Embedder>);

impl DistanceOracle for EmbeddingOracle {
    fn name(&self) -> String {
        format!("embedding-l2:{}", self.0.name())
    }

    fn distance(&self, a: &Image, b: &Image) -> f64 {
        match (self.0.embed(a), self.0.embed(b)) {
            (Ok(x), Ok(y)) => x.iter().zip(&y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt(),
            _ => f64::NAN,
        }
    }
}

/// `pixel-rms`, `constant:C` or `embedding-l2:<embedder name>`.
pub fn oracle_from_name(name: &str) -> Result<Box<dyn DistanceOracle>, EvalError> {
    let unknown = || EvalError::UnknownName { kind: "distance oracle", name: name.to_string() };
    if name == "pixel-rms" {
        return Ok(Box::new(PixelRmsOracle));
    }
    if let Some(c) = name.strip_prefix("constant:") {
        let c: f64 = c.parse().map_err(|_| unknown())?;
        if !(c >= 0.0 && c.is_finite()) {
            return Err(unknown());
        }
        return Ok(Box::new(ConstantOracle(c)));
    }
    if let Some(e) = name.strip_prefix("embedding-l2:") {
        return Ok(Box::new(EmbeddingOracle(embedder_from_name(e)?)));
    }
    if name == "embedding-l2" {
        return Ok(Box::new(EmbeddingOracle(Box::new(DownsampleEmbedder::default()))));
    }
    Err(unknown())
}

/// Unordered pair `(i, j)`, `i < j`, for a linear index over all pairs.
fn pair_at(k: usize, n: usize) -> (usize, usize) {
    let mut i = 0;
    let mut rem = k;
    while rem >= n - 1 - i {
        rem -= n - 1 - i;
        i += 1;
    }
    (i, i + 1 + rem)
}

/// Mean oracle distance over all unordered pairs, or over `max_pairs`
/// distinct pairs drawn uniformly with `seed` when there are more.
pub fn average_pairwise_distance(
    images: &[Image],
    oracle: &dyn DistanceOracle,
    max_pairs: Option<usize>,
    seed: u64,
) -> Result<(f64, usize), EvalError> {
    let n = images.len();
    if n < 2 {
        return Err(EvalError::TooFewSamples(n));
    }
    let total = n * (n - 1) / 2;
    let pairs: Vec<usize> = match max_pairs {
        Some(m) if m < total => index::sample(&mut ChaCha8Rng::seed_from_u64(seed), total, m.max(1)).into_vec(),
        _ => (0..total).collect(),
    };
    let sum: f64 = pairs
        .iter()
        .map(|&k| {
            let (i, j) = pair_at(k, n);
            oracle.distance(&images[i], &images[j])
        })
        .sum();
    Ok((sum / pairs.len() as f64, pairs.len()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub value: f64,
    /// Embedder or oracle tag.
    pub embedder: String,
    pub datasets: Vec<String>,
    pub samples: Vec<usize>,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        write_atomic(path, text.as_bytes())?;
        Ok(())
    }
}

pub const FEATURE_MAGIC: &[u8; 8] = b"MANGOFEA";
pub const FEATURE_VERSION: u32 = 1;

/// Header (magic, version, count, dimension) followed by row-major
/// little-endian f32 values.
pub fn write_features(path: &Path, rows: &[Vec<f64>]) -> Result<(), EvalError> {
    let dim = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
        return Err(EvalError::DimensionMismatch(dim, bad.len()));
    }
    let mut out = Vec::with_capacity(28 + rows.len() * dim * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(rows.len() as u64).to_le_bytes());
    out.extend_from_slice(&(dim as u64).to_le_bytes());
    for v in rows.iter().flatten() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    write_atomic(path, &out)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Vec<Vec<f64>>, EvalError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let bad = |reason: &str| EvalError::FeatureFile { path: path.display().to_string(), reason: reason.to_string() };
    if bytes.len() < 28 || &bytes[..8] != FEATURE_MAGIC {
        return Err(bad("not a feature file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FEATURE_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let dim = u64::from_le_bytes(bytes[20..28].try_into().unwrap()) as usize;
    let body = &bytes[28..];
    if count.checked_mul(dim).and_then(|n| n.checked_mul(4)) != Some(body.len()) {
        return Err(bad(&format!("expected {count}x{dim} floats, found {} bytes", body.len())));
    }
    let values: Vec<f64> = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    Ok(if dim == 0 { vec![Vec::new(); count] } else { values.chunks(dim).map(<[f64]>::to_vec).collect() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslationManifest {
    pub checkpoint: String,
    pub source: String,
    pub step: u64,
    pub image_size: usize,
    pub images: Vec<String>,
}

impl TranslationManifest {
    pub const FILE: &'static str = "translation.json";
}

/// Translate every image of `input` with the generator in `checkpoint` and
/// write `out_dir/images/<same name>.png`.
pub fn translate_dataset(checkpoint: &Path, input: &Path, out_dir: &Path) -> Result<TranslationManifest, EvalError> {
    let (cfg, state) = TrainState::load(checkpoint)?;
    let files = image_files(input)?;
    if files.is_empty() {
        return Err(EvalError::TooFewSamples(0));
    }
    let images_out = out_dir.join("images");
    fs::create_dir_all(&images_out).map_err(io_err(&images_out))?;
    let mut names = Vec::with_capacity(files.len());
    for chunk in files.chunks(8) {
        let mut batch = Vec::with_capacity(chunk.len());
        for path in chunk {
            let img = Image::load_png(path)?;
            if img.height() != cfg.image_size || img.width() != cfg.image_size {
                return Err(EvalError::SizeMismatch {
                    image: path.display().to_string(),
                    expected: cfg.image_size,
                    width: img.width(),
                    height: img.height(),
                });
            }
            batch.push(img);
        }
        let refs: Vec<&Image> = batch.iter().collect();
        let translated = state.nets.generator.translate(&state.nets.g_params, &refs)?;
        for (path, out) in chunk.iter().zip(translated) {
            let name = path.file_name().expect("listed file").to_string_lossy().into_owned();
            out.save_png(&images_out.join(&name))?;
            names.push(name);
        }
    }
    let manifest = TranslationManifest {
        checkpoint: checkpoint.display().to_string(),
        source: input.display().to_string(),
        step: state.step,
        image_size: cfg.image_size,
        images: names,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&out_dir.join(TranslationManifest::FILE), text.as_bytes())?;
    Ok(manifest)
}
