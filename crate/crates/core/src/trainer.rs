//! Alternating discriminator / generator training with deterministic seeding,
//! resumable checkpoints and a JSON-lines metric log.

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::autodiff::{Graph, Var};
use crate::checkpoint::{write_atomic, Archive, CheckpointError};
use crate::config::{ConfigError, ExperimentConfig};
use crate::data::{
    downsample_segmentation, sample_feature_indices, sample_patch_layout, sample_unpaired_batch, DataError,
    DomainDataset, UnpairedBatch,
};
use crate::image::Image;
use crate::losses::{
    gan_loss, patchnce_loss, segnce_loss, total_losses, LossComponents, LossError, LossReport, Scoring,
};
use crate::nets::{BoundHeads, FeatureStack, NetError, Networks, Patches};
use crate::optim::{learning_rate, Adam};
use crate::tensor::{Float, Tensor};

/// Stream of the training RNG; streams 1-3 seed the network initializers.
const TRAIN_STREAM: u64 = 4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("step {step}: loss component {component} is not finite ({value}); diagnostics in {}", dump.as_ref().map_or("<not written>".into(), |p| p.display().to_string()))]
    NonFinite { step: u64, component: String, value: f64, components: LossComponents, dump: Option<PathBuf> },
    #[error("incompatible input: {0}")]
    Incompatible(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone)]
pub struct TrainState {
    pub step: u64,
    pub nets: Networks<f32>,
    pub opt_g: Adam<f32>,
    pub opt_h: Adam<f32>,
    pub opt_d: Adam<f32>,
    pub rng: ChaCha8Rng,
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    #[serde(flatten)]
    pub losses: LossReport,
    /// Mean discriminator probability on real-B patches in the D update.
    pub d_real: f64,
    /// Mean discriminator probability on translated-A patches in the D update.
    pub d_fake: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

impl TrainState {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        let nets = Networks::new(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(TRAIN_STREAM);
        TrainState {
            step: 0,
            opt_g: Adam::new(&nets.g_params, cfg.beta1, cfg.beta2),
            opt_h: Adam::new(&nets.h_params, cfg.beta1, cfg.beta2),
            opt_d: Adam::new(&nets.d_params, cfg.beta1, cfg.beta2),
            nets,
            rng,
        }
    }

    pub fn to_archive(&self, cfg: &ExperimentConfig) -> Archive {
        let seed: String = self.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        let mut archive = Archive::new(json!({
            "config": serde_json::to_value(cfg).expect("config serializes"),
            "step": self.step,
            "rng": {
                "seed": seed,
                "stream": self.rng.get_stream(),
                "word_pos": self.rng.get_word_pos().to_string(),
            },
            "adam_steps": [self.opt_g.steps(), self.opt_h.steps(), self.opt_d.steps()],
        }));
        let nets = [
            ("g", &self.nets.g_params, &self.opt_g),
            ("h", &self.nets.h_params, &self.opt_h),
            ("d", &self.nets.d_params, &self.opt_d),
        ];
        for (prefix, store, opt) in nets {
            let (m, v) = opt.moments();
            for (k, (name, t)) in store.iter().enumerate() {
                archive.push(format!("{prefix}/{name}"), t.clone());
                archive.push(format!("adam_{prefix}_m/{name}"), m[k].clone());
                archive.push(format!("adam_{prefix}_v/{name}"), v[k].clone());
            }
        }
        archive
    }

    /// Rebuild the training state and the config it was trained with.
    pub fn from_archive(archive: &Archive) -> Result<(ExperimentConfig, Self), TrainError> {
        let bad = |what: &str| TrainError::Checkpoint(CheckpointError::Invalid(what.to_string()));
        let meta = &archive.meta;
        let cfg_value = meta.get("config").ok_or_else(|| bad("no config"))?;
        let cfg: ExperimentConfig = match cfg_value {
            Value::Object(map) => ExperimentConfig::from_map(map.clone())?,
            _ => return Err(bad("config is not an object")),
        };
        let step = meta.get("step").and_then(Value::as_u64).ok_or_else(|| bad("no step"))?;
        let rng_meta = meta.get("rng").ok_or_else(|| bad("no rng state"))?;
        let seed_hex = rng_meta.get("seed").and_then(Value::as_str).ok_or_else(|| bad("rng seed"))?;
        if seed_hex.len() != 64 {
            return Err(bad("rng seed"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16).map_err(|_| bad("rng seed"))?;
        }
        let stream = rng_meta.get("stream").and_then(Value::as_u64).ok_or_else(|| bad("rng stream"))?;
        let word_pos: u128 = rng_meta
            .get("word_pos")
            .and_then(Value::as_str)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("rng word_pos"))?;
        let adam_steps: Vec<u64> = meta
            .get("adam_steps")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(Value::as_u64).collect())
            .filter(|v: &Vec<u64>| v.len() == 3)
            .ok_or_else(|| bad("adam_steps"))?;

        let mut nets = Networks::<f32>::new(&cfg);
        let mut opts = Vec::new();
        for (k, (prefix, store)) in
            [("g", &mut nets.g_params), ("h", &mut nets.h_params), ("d", &mut nets.d_params)].into_iter().enumerate()
        {
            let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
            let mut m = Vec::new();
            let mut v = Vec::new();
            for name in &names {
                store.set(name, archive.get(&format!("{prefix}/{name}"))?.clone()).map_err(|e| bad(&e))?;
                m.push(archive.get(&format!("adam_{prefix}_m/{name}"))?.clone());
                v.push(archive.get(&format!("adam_{prefix}_v/{name}"))?.clone());
            }
            opts.push(Adam::restore(store, cfg.beta1, cfg.beta2, adam_steps[k], m, v).map_err(|e| bad(&e))?);
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        let opt_d = opts.pop().expect("three optimizers");
        let opt_h = opts.pop().expect("three optimizers");
        let opt_g = opts.pop().expect("three optimizers");
        Ok((cfg, TrainState { step, nets, opt_g, opt_h, opt_d, rng }))
    }

    pub fn save(&self, cfg: &ExperimentConfig, path: &Path) -> Result<(), TrainError> {
        Ok(self.to_archive(cfg).save(path)?)
    }

    pub fn load(path: &Path) -> Result<(ExperimentConfig, Self), TrainError> {
        Self::from_archive(&Archive::load(path)?)
    }
}

fn mean_of<T: Float>(v: Var<'_, T>) -> f64 {
    let t = v.value();
    t.data().iter().map(|x| x.to_f64_lossy()).sum::<f64>() / t.len() as f64
}

fn sum_vars<'g, T: Float>(terms: impl IntoIterator<Item = Var<'g, T>>) -> Option<Var<'g, T>> {
    terms.into_iter().reduce(|a, b| a.add(b))
}

fn batch_tensor(images: &[Image]) -> Tensor<f32> {
    let refs: Vec<&Image> = images.iter().collect();
    Image::batch(&refs)
}

fn sample_patches<'g>(
    cfg: &ExperimentConfig,
    images: Var<'g, f32>,
    rng: &mut ChaCha8Rng,
) -> Result<Patches<'g, f32>, TrainError> {
    let shape = images.shape();
    let layout = sample_patch_layout(
        shape[0],
        shape[2],
        shape[3],
        cfg.patch_size,
        cfg.patches_per_image,
        &cfg.rotation_set,
        rng,
    )?;
    Ok(Patches::extract(images, &layout)?)
}

/// PatchNCE between `input` and `output` taps, averaged over the batch, with
/// fresh feature indices per image and layer shared by both sides.
fn batch_patchnce<'g>(
    cfg: &ExperimentConfig,
    heads: &BoundHeads<'_, 'g, f32>,
    input: &FeatureStack<'g, f32>,
    output: &FeatureStack<'g, f32>,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Var<'g, f32>, TrainError> {
    let mut per_image = Vec::with_capacity(batch);
    for b in 0..batch {
        let mut zin = Vec::with_capacity(input.len());
        let mut zout = Vec::with_capacity(input.len());
        for ((_, fin), (_, fout)) in input.layers.iter().zip(&output.layers) {
            let side = fin.shape()[2];
            let idx = sample_feature_indices((side, side), cfg.num_features_per_layer, rng)?;
            zin.push(fin.select_positions(b, &idx));
            zout.push(fout.select_positions(b, &idx));
        }
        per_image.push(patchnce_loss(heads, &zin, &zout, Scoring::modified(cfg), cfg.tau)?);
    }
    Ok(sum_vars(per_image).expect("batch is non-empty").scale(1.0 / batch as f32))
}

fn batch_segnce<'g>(
    cfg: &ExperimentConfig,
    heads: &BoundHeads<'_, 'g, f32>,
    input: &FeatureStack<'g, f32>,
    batch: &UnpairedBatch,
    rng: &mut ChaCha8Rng,
) -> Result<Var<'g, f32>, TrainError> {
    let n = batch.images_a.len();
    let mut per_image = Vec::with_capacity(n);
    for (b, seg) in batch.segs_a.iter().enumerate() {
        let mut feats = Vec::with_capacity(input.len());
        let mut labels = Vec::with_capacity(input.len());
        for (_, f) in &input.layers {
            let side = f.shape()[2];
            let down = downsample_segmentation(seg, (side, side))?;
            let idx = sample_feature_indices((side, side), cfg.segnce_features_per_layer, rng)?;
            labels.push(idx.iter().map(|&i| down.labels()[i]).collect());
            feats.push(f.select_positions(b, &idx));
        }
        let out = segnce_loss(heads, &feats, &labels, cfg.tau, cfg.include_self_in_segnce_denominator)?;
        per_image.push(out.loss);
    }
    Ok(sum_vars(per_image).expect("batch is non-empty").scale(1.0 / n as f32))
}

fn d_update(
    cfg: &ExperimentConfig,
    state: &mut TrainState,
    xa: &Tensor<f32>,
    xb: &Tensor<f32>,
    lr: f64,
) -> Result<(f64, f64), TrainError> {
    let g = Graph::new();
    let gp = state.nets.g_params.bind(&g, false);
    let dp = state.nets.d_params.bind(&g, true);
    let fake = state.nets.generator.generate(&gp, g.constant(xa.clone()))?.detach();
    let real = g.constant(xb.clone());
    let real_scores = state.nets.discriminator.discriminate(&dp, sample_patches(cfg, real, &mut state.rng)?)?;
    let fake_scores = state.nets.discriminator.discriminate(&dp, sample_patches(cfg, fake, &mut state.rng)?)?;
    let objective = gan_loss(real_scores, fake_scores);
    let value = objective.item().to_f64_lossy();
    if !value.is_finite() {
        return Err(TrainError::NonFinite {
            step: state.step + 1,
            component: "gan_D".into(),
            value,
            components: LossComponents { gan: value, ..Default::default() },
            dump: None,
        });
    }
    let grads = g.backward(objective.neg());
    let d_grads = dp.grads(&grads);
    state.opt_d.step(&mut state.nets.d_params, &d_grads, lr);
    Ok((mean_of(real_scores), mean_of(fake_scores)))
}

fn g_update(
    cfg: &ExperimentConfig,
    state: &mut TrainState,
    batch: &UnpairedBatch,
    xa: &Tensor<f32>,
    xb: &Tensor<f32>,
    lr: f64,
) -> Result<LossReport, TrainError> {
    let nets = &state.nets;
    let rng = &mut state.rng;
    let n = batch.images_a.len();
    let g = Graph::new();
    let gp = nets.g_params.bind(&g, true);
    let heads = nets.heads.bind(nets.h_params.bind(&g, true));
    let dp = nets.d_params.bind(&g, false);
    let taps = nets.generator.taps();

    let xa = g.constant(xa.clone());
    let xb = g.constant(xb.clone());
    let (ya, feats_a) = nets.generator.forward(&gp, xa)?;
    let feats_ya = nets.generator.encode(&gp, ya, taps)?;
    let patchnce_a = batch_patchnce(cfg, &heads, &feats_a, &feats_ya, n, rng)?;

    let (yb, feats_b) = nets.generator.forward(&gp, xb)?;
    let feats_yb = nets.generator.encode(&gp, yb, taps)?;
    let patchnce_idb = batch_patchnce(cfg, &heads, &feats_b, &feats_yb, n, rng)?;

    let segnce = batch_segnce(cfg, &heads, &feats_a, batch, rng)?;

    let real_scores = nets.discriminator.discriminate(&dp, sample_patches(cfg, xb, rng)?)?;
    let fake_scores = nets.discriminator.discriminate(&dp, sample_patches(cfg, ya, rng)?)?;
    let gan = gan_loss(real_scores, fake_scores);

    let components = LossComponents {
        gan: gan.item().to_f64_lossy(),
        patchnce_a: patchnce_a.item().to_f64_lossy(),
        patchnce_idb: patchnce_idb.item().to_f64_lossy(),
        segnce: segnce.item().to_f64_lossy(),
    };
    let w = cfg.loss_weights();
    let report = total_losses(&components, &w).map_err(|e| match e {
        LossError::NonFinite { component, value } => TrainError::NonFinite {
            step: state.step + 1,
            component: component.to_string(),
            value,
            components,
            dump: None,
        },
        other => other.into(),
    })?;

    // Zero-weight terms stay out of the graph that is differentiated.
    let weighted = [(w.patchnce_a, patchnce_a), (w.patchnce_idb, patchnce_idb), (w.segnce, segnce), (w.gan, gan)]
        .into_iter()
        .filter(|(wt, _)| *wt != 0.0)
        .map(|(wt, v)| v.scale(wt as f32));
    if let Some(total) = sum_vars(weighted) {
        let grads = g.backward(total);
        let g_grads = gp.grads(&grads);
        let h_grads = heads.params().grads(&grads);
        state.opt_g.step(&mut state.nets.g_params, &g_grads, lr);
        state.opt_h.step(&mut state.nets.h_params, &h_grads, lr);
    }
    Ok(report)
}

/// One discriminator update (repeated `d_steps_per_g_step` times) followed by
/// one generator + heads update on the same batch.
pub fn train_step(
    cfg: &ExperimentConfig,
    state: &mut TrainState,
    batch: &UnpairedBatch,
) -> Result<StepMetrics, TrainError> {
    let start = Instant::now();
    let lr = learning_rate(cfg.lr, state.step, cfg.total_steps, cfg.lr_decay);
    let xa = batch_tensor(&batch.images_a);
    let xb = batch_tensor(&batch.images_b);
    let mut d_scores = (0.0, 0.0);
    for _ in 0..cfg.d_steps_per_g_step {
        d_scores = d_update(cfg, state, &xa, &xb, lr)?;
    }
    let losses = g_update(cfg, state, batch, &xa, &xb, lr)?;
    state.step += 1;
    Ok(StepMetrics {
        step: state.step,
        losses,
        d_real: d_scores.0,
        d_fake: d_scores.1,
        lr,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint instead of a fresh initialization.
    pub resume: Option<PathBuf>,
    /// Stop after this many total steps (for interrupting runs in tests).
    pub stop_after: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub steps: u64,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.json";

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step_{step:08}.ckpt"))
}

/// Metric log lines with the wall-clock field removed, for comparing runs.
pub fn deterministic_log_lines(path: &Path) -> Result<Vec<String>, TrainError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .map(|line| {
            let mut v: Value = serde_json::from_str(line)
                .map_err(|e| TrainError::Incompatible(format!("{}: bad metric line: {e}", path.display())))?;
            if let Some(obj) = v.as_object_mut() {
                obj.remove("wall_ms");
            }
            Ok(v.to_string())
        })
        .collect()
}

fn check_datasets(cfg: &ExperimentConfig, ds_a: &DomainDataset, ds_b: &DomainDataset) -> Result<(), TrainError> {
    for ds in [ds_a, ds_b] {
        if ds.image_size() != cfg.image_size {
            return Err(TrainError::Incompatible(format!(
                "{} was loaded at {}px but the config trains at {}px",
                ds.root().display(),
                ds.image_size(),
                cfg.image_size
            )));
        }
    }
    if ds_a.records().iter().any(|r| r.segmentation.is_none()) {
        return Err(TrainError::Incompatible(format!("{} has images without segmentations", ds_a.root().display())));
    }
    Ok(())
}

/// Keep the first `steps` lines of an existing log so a resumed run appends
/// exactly where the checkpoint left off.
fn truncate_log(path: &Path, steps: u64) -> Result<(), TrainError> {
    let mut kept = String::new();
    if path.exists() {
        let f = fs::File::open(path).map_err(io_err(path))?;
        for line in BufReader::new(f).lines().take(steps as usize) {
            kept.push_str(&line.map_err(io_err(path))?);
            kept.push('\n');
        }
    }
    write_atomic(path, kept.as_bytes())?;
    Ok(())
}

fn write_dump(out_dir: &Path, err: TrainError) -> TrainError {
    match err {
        TrainError::NonFinite { step, component, value, components, .. } => {
            let path = out_dir.join(format!("nonfinite_step_{step:08}.json"));
            let body = json!({"step": step, "component": component, "value": value.to_string(), "components": {
                "gan": components.gan.to_string(),
                "patchnce_A": components.patchnce_a.to_string(),
                "patchnce_idB": components.patchnce_idb.to_string(),
                "segnce": components.segnce.to_string(),
            }});
            let dump = fs::write(&path, serde_json::to_string_pretty(&body).expect("json")).ok().map(|_| path);
            TrainError::NonFinite { step, component, value, components, dump }
        }
        other => other,
    }
}

/// Run training to `cfg.total_steps`, writing `config.json`, `metrics.jsonl`
/// and `checkpoints/step_XXXXXXXX.ckpt` under `out_dir`.
pub fn train(
    cfg: &ExperimentConfig,
    ds_a: &DomainDataset,
    ds_b: &DomainDataset,
    out_dir: &Path,
    opts: &TrainOptions,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    check_datasets(cfg, ds_a, ds_b)?;
    fs::create_dir_all(out_dir.join("checkpoints")).map_err(io_err(out_dir))?;
    let metrics = out_dir.join(METRICS_FILE);

    let mut state = match &opts.resume {
        Some(path) => {
            let (saved, state) = TrainState::load(path)?;
            let comparable = |c: &ExperimentConfig| ExperimentConfig { total_steps: 0, checkpoint_every: 0, ..c.clone() };
            if comparable(&saved) != comparable(cfg) {
                return Err(TrainError::Incompatible(format!(
                    "{} was trained with a different configuration",
                    path.display()
                )));
            }
            truncate_log(&metrics, state.step)?;
            log::info!("resuming from step {}", state.step);
            state
        }
        None => {
            truncate_log(&metrics, 0)?;
            TrainState::new(cfg)
        }
    };
    let snapshot = out_dir.join(CONFIG_FILE);
    cfg.save(&snapshot)?;

    let mut log = OpenOptions::new().append(true).open(&metrics).map_err(io_err(&metrics))?;
    let stop = opts.stop_after.unwrap_or(cfg.total_steps).min(cfg.total_steps);
    let mut last = None;
    while state.step < stop {
        let batch = sample_unpaired_batch(ds_a, ds_b, cfg.batch_size, &mut state.rng)?;
        let m = train_step(cfg, &mut state, &batch).map_err(|e| write_dump(out_dir, e))?;
        let line = serde_json::to_string(&m).expect("metrics serialize");
        writeln!(log, "{line}").map_err(io_err(&metrics))?;
        log.flush().map_err(io_err(&metrics))?;
        if state.step % 50 == 0 || state.step == stop {
            log::info!(
                "step {} total_G={:.4} total_D={:.4} D(real)={:.3} D(fake)={:.3}",
                m.step,
                m.losses.total_G,
                m.losses.total_D,
                m.d_real,
                m.d_fake
            );
        }
        if state.step % cfg.checkpoint_every == 0 || state.step == stop {
            let path = checkpoint_path(out_dir, state.step);
            state.save(cfg, &path)?;
            last = Some(path);
        }
    }
    let final_checkpoint = match last {
        Some(p) => p,
        None => {
            let p = checkpoint_path(out_dir, state.step);
            state.save(cfg, &p)?;
            p
        }
    };
    Ok(TrainOutcome { final_checkpoint, metrics, steps: state.step })
}
