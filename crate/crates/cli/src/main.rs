//! `haad`: synthesize data, train one-class models, score and sweep.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use haad::encoder::Streams;
use haad::motion::{self, load_manifest, ClipDescriptor, DatasetManifest, MotionClip};
use haad::scoring::{self, save_roc_csv, save_scores_csv, score_dataset, Scheme, ScoreReport};
use haad::synth::{self, SynthConfig};
use haad::trainer::{self, load_model, TrainConfig, TrainedModel};
use ndarray::Array3;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "haad", version, about = "One-class human action anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic wave/kick/jump dataset.
    Synth(SynthArgs),
    /// Train a model on one normal class.
    Train(TrainArgs),
    /// Score a test manifest and compute ROC/AUC.
    Eval(EvalArgs),
    /// Retrain or rescore across settings and report AUC per setting.
    Sweep(SweepArgs),
    /// Turn a CSV dump (one frame per row) into a clip file.
    Convert(ConvertArgs),
}

#[derive(clap::Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 30, value_parser = clap::value_parser!(u64).range(1..))]
    per_class: u64,
    /// Per-coordinate Gaussian jitter.
    #[arg(long, default_value_t = 0.01)]
    sigma: f64,
    #[arg(long, default_value_t = 40)]
    min_frames: usize,
    #[arg(long, default_value_t = 60)]
    max_frames: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Flags shared by every command that trains.
#[derive(clap::Args)]
struct TrainFlags {
    /// JSON run config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training manifest.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    normal: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// DCT coefficients kept per trajectory.
    #[arg(long = "m")]
    m: Option<usize>,
    #[arg(long)]
    lr_start: Option<f64>,
    #[arg(long)]
    lr_end: Option<f64>,
    #[arg(long, value_enum)]
    streams: Option<StreamSet>,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Test manifest.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SchemeArg::Knn)]
    scheme: SchemeArg,
    #[arg(long, default_value_t = scoring::DEFAULT_K)]
    k: usize,
    /// Score CSV (`clip_id,label,is_normal,score`).
    #[arg(long)]
    scores: Option<PathBuf>,
    /// ROC CSV (`threshold,fpr,tpr`).
    #[arg(long)]
    roc: Option<PathBuf>,
}

#[derive(clap::Args)]
struct SweepArgs {
    #[arg(long, value_enum)]
    kind: SweepKind,
    #[command(flatten)]
    flags: TrainFlags,
    /// Test manifest.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Comma-separated DCT sizes for `--kind dct-m`.
    #[arg(long, value_delimiter = ',')]
    values: Vec<usize>,
    #[arg(long)]
    k: Option<usize>,
    /// Where to write `setting,auc`; standard output always gets a copy.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct ConvertArgs {
    /// CSV with one frame per row and joints x channels values per row.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    id: String,
    #[arg(long)]
    label: String,
    #[arg(long)]
    joints: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    /// Existing manifest to register the clip in.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Knn,
    Nll,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SweepKind {
    #[value(name = "dct_m", alias = "dct-m")]
    DctM,
    Scoring,
    Parts,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StreamSet {
    #[value(name = "full")]
    Full,
    #[value(name = "full+up")]
    FullUp,
    #[value(name = "full+low")]
    FullLow,
    #[value(name = "full+up+low")]
    FullUpLow,
}

impl StreamSet {
    const ALL: [StreamSet; 4] = [Self::Full, Self::FullUp, Self::FullLow, Self::FullUpLow];

    fn streams(self) -> Streams {
        let (upper, lower) = match self {
            Self::Full => (false, false),
            Self::FullUp => (true, false),
            Self::FullLow => (false, true),
            Self::FullUpLow => (true, true),
        };
        Streams { upper, lower }
    }

    fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::FullUp => "full+up",
            Self::FullLow => "full+low",
            Self::FullUpLow => "full+up+low",
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Convert(a) => cmd_convert(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        seed: a.seed,
        clips_per_class: a.per_class as usize,
        frames: (a.min_frames, a.max_frames),
        jitter_sigma: a.sigma,
    };
    synth::synth_dataset(&a.out, &cfg).with_context(|| format!("writing dataset to {}", a.out.display()))?;
    println!("{}", a.out.join(synth::MANIFEST_FILE).display());
    Ok(())
}

/// Config file first, then flags.
fn resolve(flags: &TrainFlags) -> Result<(RunConfig, TrainConfig)> {
    let run = RunConfig::load(flags.config.as_deref())?;
    let mut t = run.train.clone();
    if let Some(n) = &flags.normal {
        t.normal_label = n.clone();
    }
    if let Some(s) = flags.seed {
        t.seed = s;
    }
    if let Some(e) = flags.epochs {
        t.epochs = e;
    }
    if let Some(b) = flags.batch_size {
        t.batch_size = b;
    }
    if let Some(m) = flags.m {
        t.encoder.dct_coeffs = m;
    }
    if let Some(l) = flags.lr_start {
        t.lr_start = l;
    }
    if let Some(l) = flags.lr_end {
        t.lr_end = l;
    }
    if let Some(s) = flags.streams {
        t.encoder.streams = s.streams();
    }
    if t.normal_label.is_empty() {
        bail!("no normal label: pass --normal or set train.normal_label");
    }
    t.validate()?;
    Ok((run, t))
}

fn manifest_arg(flag: Option<&Path>, fallback: Option<&Path>, what: &str) -> Result<DatasetManifest> {
    let path = flag
        .or(fallback)
        .with_context(|| format!("no {what} manifest: pass it by flag or in the config"))?;
    Ok(load_manifest(path).with_context(|| format!("loading {}", path.display()))?)
}

fn run_training(manifest: &DatasetManifest, cfg: &TrainConfig, echo: bool) -> Result<TrainedModel> {
    let stdout = std::io::stdout();
    let model = trainer::train_with(manifest, cfg, |s| {
        if echo {
            let _ = writeln!(stdout.lock(), "epoch={} nll={}", s.epoch, s.train_nll);
        }
    })?;
    Ok(model)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let (run, cfg) = resolve(&a.flags)?;
    let manifest = manifest_arg(a.flags.data.as_deref(), run.data.as_deref(), "training")?;
    let model = run_training(&manifest, &cfg, true)?;
    model.save(&a.out)?;
    log::info!("wrote {}", a.out.display());
    Ok(())
}

fn scheme(arg: SchemeArg, k: usize) -> Scheme {
    match arg {
        SchemeArg::Knn => Scheme::Knn { k },
        SchemeArg::Nll => Scheme::Nll,
    }
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.model).with_context(|| format!("loading model {}", a.model.display()))?;
    let manifest = load_manifest(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    let records = score_dataset(&manifest, &model, scheme(a.scheme, a.k))?;
    if let Some(p) = &a.scores {
        save_scores_csv(p, &records)?;
    }
    let report = ScoreReport::from_records(records)?;
    if let Some(p) = &a.roc {
        save_roc_csv(p, &report.roc)?;
    }
    println!("auc={:.6}", report.auc);
    Ok(())
}

fn evaluate(model: &TrainedModel, test: &DatasetManifest, scheme: Scheme) -> Result<f64> {
    Ok(scoring::auc(&score_dataset(test, model, scheme)?)?)
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let (run, base) = resolve(&a.flags)?;
    let train = manifest_arg(a.flags.data.as_deref(), run.data.as_deref(), "training")?;
    let test = manifest_arg(a.test.as_deref(), run.test.as_deref(), "test")?;
    let k = a.k.unwrap_or(run.k);
    let knn = Scheme::Knn { k };
    let default_scheme: Scheme = run.scheme.parse()?;
    let default_scheme = match default_scheme {
        Scheme::Knn { .. } => knn,
        s => s,
    };

    let mut rows: Vec<(String, f64)> = Vec::new();
    match a.kind {
        SweepKind::Scoring => {
            let model = run_training(&train, &base, false)?;
            rows.push(("knn".into(), evaluate(&model, &test, knn)?));
            rows.push(("nll".into(), evaluate(&model, &test, Scheme::Nll)?));
        }
        SweepKind::DctM => {
            if a.values.is_empty() {
                bail!("--kind dct_m needs --values, e.g. --values 2,5,10");
            }
            for &m in &a.values {
                let mut cfg = base.clone();
                cfg.encoder.dct_coeffs = m;
                let model = run_training(&train, &cfg, false)?;
                rows.push((m.to_string(), evaluate(&model, &test, default_scheme)?));
            }
        }
        SweepKind::Parts => {
            for set in StreamSet::ALL {
                let mut cfg = base.clone();
                cfg.encoder.streams = set.streams();
                let model = run_training(&train, &cfg, false)?;
                rows.push((set.name().into(), evaluate(&model, &test, default_scheme)?));
            }
        }
    }

    let mut csv = String::from("setting,auc\n");
    for (setting, auc) in &rows {
        csv.push_str(&format!("{setting},{auc:.6}\n"));
    }
    print!("{csv}");
    if let Some(p) = &a.out {
        fs::write(p, &csv).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn cmd_convert(a: ConvertArgs) -> Result<()> {
    let text = fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let width = a.joints * a.channels;
    let mut values = Vec::new();
    let mut frames = 0;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row: Vec<f32> = match line.split(',').map(|v| v.trim().parse::<f32>()).collect() {
            Ok(r) => r,
            // A non-numeric first row is a header.
            Err(_) if frames == 0 && values.is_empty() => continue,
            Err(e) => bail!("line {}: {e}", n + 1),
        };
        if row.len() != width {
            bail!("line {}: expected {width} values ({} joints x {} channels), got {}", n + 1, a.joints, a.channels, row.len());
        }
        values.extend(row);
        frames += 1;
    }
    let data = Array3::from_shape_vec((frames, a.joints, a.channels), values)?;
    let clip = MotionClip::new(a.id.clone(), a.label.clone(), data)?;
    motion::write_clip(&a.out, &clip)?;

    if let Some(mpath) = &a.manifest {
        let mut m = load_manifest(mpath).with_context(|| format!("loading {}", mpath.display()))?;
        let path = a
            .out
            .strip_prefix(&m.base_dir)
            .map(Path::to_path_buf)
            .unwrap_or_else(|_| fs::canonicalize(&a.out).unwrap_or_else(|_| a.out.clone()));
        m.clips.push(ClipDescriptor {
            id: clip.id.clone(),
            label: clip.label.clone(),
            path,
            frames: clip.frames(),
            joints: clip.joints(),
            channels: clip.channels(),
        });
        m.validate()?;
        m.save(mpath)?;
    }
    println!("{}", a.out.display());
    Ok(())
}
