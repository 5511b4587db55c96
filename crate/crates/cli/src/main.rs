//! `mango`: toy-data generation, training, translation and evaluation.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 runtime error. The
//! last line on stdout is always a `key=value` summary.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use mango::config::{parse_override, ExperimentConfig};
use mango::data::{Domain, DomainDataset};
use mango::diagnostic::loss_report_from_manifest;
use mango::eval::{
    average_pairwise_distance, compute_fid, embed_dataset, embedder_from_name, load_images, oracle_from_name,
    read_features, translate_dataset, write_features, EvalError, EvalReport,
};
use mango::synthgen::{generate_domain, DomainSpec, Style, SynthError, ViewRange};
use mango::trainer::{train, TrainOptions};

#[derive(Parser)]
#[command(name = "mango", version, about = "Unpaired sim-to-real image translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic tabletop dataset.
    GenData(GenDataArgs),
    /// Train generator, projection heads and discriminator.
    Train(TrainArgs),
    /// Translate a directory of images with a trained generator.
    Translate(TranslateArgs),
    /// Evaluate image sets.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Compute a loss report from serialized feature dumps.
    LossReport(LossReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n: usize,
    /// `sim` (flat shading, with segmentations) or `real` (textured).
    #[arg(long)]
    style: Style,
    /// `AZ,EL,DIST`, each a value or `lo:hi`.
    #[arg(long, default_value = "-45:45,40:80,1:1.5")]
    view_range: ViewRange,
    #[arg(long, env = "MANGO_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 5)]
    num_classes: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config file.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    domain_a: PathBuf,
    #[arg(long)]
    domain_b: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Override a config field, e.g. `--set w_segnce=0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed override; falls back to the config file's seed.
    #[arg(long, env = "MANGO_SEED")]
    seed: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Fréchet distance between two image sets or two feature files.
    Fid(FidArgs),
    /// Average pairwise distance within an image set.
    Diversity(DiversityArgs),
}

#[derive(Args)]
struct FidArgs {
    #[arg(long, requires = "y", conflicts_with_all = ["features_x", "features_y"])]
    x: Option<PathBuf>,
    #[arg(long, requires = "x")]
    y: Option<PathBuf>,
    /// `downsample[:SIDE]` or `random[:DIM[:SEED[:SIDE]]]`.
    #[arg(long, default_value = "downsample")]
    embedder: String,
    #[arg(long, requires = "features_y", required_unless_present = "x")]
    features_x: Option<PathBuf>,
    #[arg(long, requires = "features_x")]
    features_y: Option<PathBuf>,
    /// Also write the embedded features of `--x` / `--y` into this directory.
    #[arg(long, requires = "x")]
    dump_features: Option<PathBuf>,
    #[arg(long, default_value = "eval_report.json")]
    report: PathBuf,
}

#[derive(Args)]
struct DiversityArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// `pixel-rms`, `constant:C` or `embedding-l2[:EMBEDDER]`.
    #[arg(long, default_value = "pixel-rms")]
    oracle: String,
    #[arg(long)]
    max_pairs: Option<usize>,
    #[arg(long, env = "MANGO_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "eval_report.json")]
    report: PathBuf,
}

#[derive(Args)]
struct LossReportArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Write the report here as JSON as well as printing it.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

type CmdResult = Result<String, Failure>;

fn usage<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Usage(e.into())
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

fn gen_data(a: GenDataArgs) -> CmdResult {
    if a.n == 0 {
        return Err(usage(anyhow!("--n must be at least 1")));
    }
    let spec = DomainSpec {
        n_images: a.n,
        style: a.style,
        view_range: a.view_range,
        seed: a.seed,
        image_size: a.size,
        num_classes: a.num_classes,
    };
    let manifest = generate_domain(&a.out, &spec).map_err(|e| match e {
        SynthError::Io { .. } | SynthError::Image(_) => runtime(e),
        other => usage(other),
    })?;
    Ok(format!("status=ok images={} style={} out={}", manifest.entries.len(), a.style, a.out.display()))
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let mut overrides = a.overrides.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>, _>>().map_err(usage)?;
    if let Some(seed) = a.seed {
        overrides.push(("seed".into(), seed.into()));
    }
    let cfg = ExperimentConfig::load(&a.config, &overrides).map_err(usage)?;
    let load = |dir: &Path, domain| {
        let mut ds = DomainDataset::load(dir, domain, &cfg).with_context(|| format!("loading domain {domain}"))?;
        ds.preload()?;
        Ok::<_, anyhow::Error>(ds)
    };
    let ds_a = load(&a.domain_a, Domain::A).map_err(usage)?;
    let ds_b = load(&a.domain_b, Domain::B).map_err(usage)?;
    let opts = TrainOptions { resume: a.resume, stop_after: None };
    let outcome = train(&cfg, &ds_a, &ds_b, &a.out, &opts).map_err(runtime)?;
    Ok(format!(
        "status=ok steps={} checkpoint={} metrics={}",
        outcome.steps,
        outcome.final_checkpoint.display(),
        outcome.metrics.display()
    ))
}

fn cmd_translate(a: TranslateArgs) -> CmdResult {
    let manifest = translate_dataset(&a.checkpoint, &a.input, &a.out).map_err(runtime)?;
    Ok(format!("status=ok images={} out={}", manifest.images.len(), a.out.display()))
}

fn too_few(e: EvalError) -> Failure {
    match e {
        EvalError::TooFewSamples(_) | EvalError::UnknownName { .. } => usage(e),
        other => runtime(other),
    }
}

fn cmd_fid(a: FidArgs) -> CmdResult {
    let (fx, fy, tag, names) = match (&a.x, &a.y, &a.features_x, &a.features_y) {
        (Some(x), Some(y), _, _) => {
            let embedder = embedder_from_name(&a.embedder).map_err(usage)?;
            let embed = |dir: &Path| -> Result<Vec<Vec<f64>>, Failure> {
                let images = load_images(dir).map_err(runtime)?;
                if images.len() < 2 {
                    return Err(usage(anyhow!("{}: need at least 2 images, found {}", dir.display(), images.len())));
                }
                embed_dataset(&images, embedder.as_ref()).map_err(runtime)
            };
            let (fx, fy) = (embed(x)?, embed(y)?);
            if let Some(dir) = &a.dump_features {
                std::fs::create_dir_all(dir).map_err(runtime)?;
                write_features(&dir.join("x.feat"), &fx).map_err(runtime)?;
                write_features(&dir.join("y.feat"), &fy).map_err(runtime)?;
            }
            (fx, fy, embedder.name(), [x.display().to_string(), y.display().to_string()])
        }
        (_, _, Some(x), Some(y)) => (
            read_features(x).map_err(runtime)?,
            read_features(y).map_err(runtime)?,
            "external".to_string(),
            [x.display().to_string(), y.display().to_string()],
        ),
        _ => return Err(usage(anyhow!("give --x and --y, or --features-x and --features-y"))),
    };
    let value = compute_fid(&fx, &fy).map_err(too_few)?;
    let report = EvalReport {
        metric: "fid".into(),
        value,
        embedder: tag.clone(),
        datasets: names.to_vec(),
        samples: vec![fx.len(), fy.len()],
    };
    report.save(&a.report).map_err(runtime)?;
    Ok(format!("metric=fid value={value} embedder={tag} n_x={} n_y={}", fx.len(), fy.len()))
}

fn cmd_diversity(a: DiversityArgs) -> CmdResult {
    let oracle = oracle_from_name(&a.oracle).map_err(usage)?;
    let images: Vec<_> = load_images(&a.input).map_err(runtime)?.into_iter().map(|(_, img)| img).collect();
    let (value, pairs) = average_pairwise_distance(&images, oracle.as_ref(), a.max_pairs, a.seed).map_err(too_few)?;
    let report = EvalReport {
        metric: "diversity".into(),
        value,
        embedder: oracle.name(),
        datasets: vec![a.input.display().to_string()],
        samples: vec![images.len(), pairs],
    };
    report.save(&a.report).map_err(runtime)?;
    Ok(format!("metric=diversity value={value} oracle={} n={} pairs={pairs}", oracle.name(), images.len()))
}

fn cmd_loss_report(a: LossReportArgs) -> CmdResult {
    let r = loss_report_from_manifest(&a.manifest).map_err(runtime)?;
    let json = serde_json::to_string_pretty(&r).map_err(runtime)?;
    if let Some(out) = &a.out {
        std::fs::write(out, &json).with_context(|| out.display().to_string()).map_err(runtime)?;
    }
    println!("{json}");
    Ok(format!(
        "gan_G={} gan_D={} patchnce_A={} patchnce_idB={} segnce={} total_G={} total_D={}",
        r.gan_G, r.gan_D, r.patchnce_A, r.patchnce_idB, r.segnce, r.total_G, r.total_D
    ))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            if code != 0 {
                println!("status=error code=1");
            }
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Translate(a) => cmd_translate(a),
        Command::Eval(EvalCommand::Fid(a)) => cmd_fid(a),
        Command::Eval(EvalCommand::Diversity(a)) => cmd_diversity(a),
        Command::LossReport(a) => cmd_loss_report(a),
    };
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            println!("status=error code=1");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            println!("status=error code=2");
            ExitCode::from(2)
        }
    }
}
