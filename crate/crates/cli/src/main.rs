//! `softcon` command-line front end.
//!
//! Exit status: 0 on success, 1 on usage or validation errors, 2 on I/O
//! errors. Every file written gets a `<file>.config` sidecar holding the
//! effective configuration; checkpoints also carry it in their metadata.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use softcon::checkpoint::Checkpoint;
use softcon::config::RunConfig;
use softcon::datasynth::{self, Dataset};
use softcon::encoder::{encoder_from_checkpoint, init_continual};
use softcon::evalkit::{self, AblationPlan, InitMode};
use softcon::losses::grad_check_suite;
use softcon::rng::{purpose, stream};
use softcon::trainkit::{self, Variant};
use softcon::{Error, Result};

const GRADCHECK_TOL: f64 = 1e-6;

#[derive(Parser)]
#[command(name = "softcon", version, about = "Multi-label soft contrastive pretraining laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its manifest
    Synth(SynthArgs),
    /// Pretrain an encoder and write a checkpoint
    Pretrain(PretrainArgs),
    /// Linear-probe a checkpoint's frozen encoder
    Probe(ProbeArgs),
    /// Run a pretrain-then-probe grid and write the ablation CSV
    Ablate(AblateArgs),
    /// Print dataset statistics
    Stats(StatsArgs),
    /// Check loss gradients against finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` override, repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long)]
    variant: Option<String>,
}

impl ConfigArgs {
    /// File, then `--set`, then the named flags. `seed_keys` lists the keys
    /// `--seed` writes to.
    fn resolve(&self, seed_keys: &[&str]) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(p) = &self.config {
            let text = std::fs::read_to_string(p).map_err(|e| io_error(p, e))?;
            cfg.apply(&text)?;
        }
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got `{o}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(s) = self.seed {
            for k in seed_keys {
                cfg.set(k, &s.to_string())?;
            }
        }
        let named = [
            ("train.epochs", self.epochs.map(|v| v.to_string())),
            ("train.lambda", self.lambda.map(|v| v.to_string())),
            ("train.temperature", self.temperature.map(|v| v.to_string())),
            ("train.mask_ratio", self.mask_ratio.map(|v| v.to_string())),
            ("train.variant", self.variant.clone()),
        ];
        for (k, v) in named {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct DataArgs {
    /// Dataset file; generated in memory from the data.* keys when absent
    #[arg(long)]
    data: Option<PathBuf>,
}

impl DataArgs {
    fn load(&self, cfg: &RunConfig) -> Result<Dataset> {
        let ds = match &self.data {
            Some(p) => datasynth::read_dataset(p)?,
            None => datasynth::generate(&cfg.data)?,
        };
        Ok(ds)
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Manifest CSV path; defaults to `<out>.manifest.csv`
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    scenes: Option<usize>,
    /// Channel count for both the data and the encoder
    #[arg(long)]
    channels: Option<usize>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    /// Metrics CSV path; defaults to `<out>.metrics.csv`
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Continual pretraining from this checkpoint's encoder
    #[arg(long)]
    init_from: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Per-class AP CSV
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "contrast-only,contrast+supcon,contrast+softcon")]
    variants: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0.1")]
    lambdas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.2")]
    mask_ratios: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "scratch")]
    inits: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Source checkpoint for continual runs
    #[arg(long)]
    source: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct StatsArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| io_error(path, e))
}

fn write_sidecar(path: &Path, cfg: &RunConfig) -> Result<()> {
    write_file(&with_suffix(path, ".config"), cfg.to_text().as_bytes())
}

fn check_channels(ds: &Dataset, cfg: &RunConfig) -> Result<()> {
    if ds.channels != cfg.train.encoder.channels {
        return Err(Error::Invalid(format!(
            "dataset has {} channels but encoder.channels = {}",
            ds.channels, cfg.train.encoder.channels
        )));
    }
    Ok(())
}

fn synth(a: &SynthArgs) -> Result<()> {
    let mut cfg = a.config.resolve(&["data.seed"])?;
    if let Some(n) = a.scenes {
        cfg.set("data.num_scenes", &n.to_string())?;
    }
    if let Some(c) = a.channels {
        cfg.set("data.channels", &c.to_string())?;
        cfg.set("encoder.channels", &c.to_string())?;
    }
    cfg.validate()?;
    let manifest = a.manifest.clone().unwrap_or_else(|| with_suffix(&a.out, ".manifest.csv"));
    let ds = datasynth::generate_dataset(&cfg.data, &a.out, &manifest)?;
    write_sidecar(&a.out, &cfg)?;
    println!("wrote {} scenes to {}", ds.scenes.len(), a.out.display());
    Ok(())
}

fn pretrain(a: &PretrainArgs) -> Result<()> {
    let cfg = a.config.resolve(&["train.seed"])?;
    let ds = a.data.load(&cfg)?;
    check_channels(&ds, &cfg)?;
    let init = match &a.init_from {
        Some(p) => {
            let source = Checkpoint::load(p)?;
            let mut rng = stream(cfg.train.seed, &[purpose::CONTINUAL]);
            Some(init_continual(&source, ds.channels, &mut rng)?)
        }
        None => None,
    };
    let metrics_path = a.metrics.clone().unwrap_or_else(|| with_suffix(&a.out, ".metrics.csv"));
    let file = File::create(&metrics_path).map_err(|e| io_error(&metrics_path, e))?;
    let mut w = BufWriter::new(file);
    let mut echo = cfg.echo();
    if let Some(p) = &a.init_from {
        echo.insert("init_from".into(), p.display().to_string());
    }
    let out = trainkit::pretrain(&ds, &cfg.train, init, &echo, Some(&mut w))?;
    w.flush().map_err(|e| io_error(&metrics_path, e))?;
    let bytes = out.checkpoint.save(&a.out)?;
    write_sidecar(&metrics_path, &cfg)?;
    if let Some(last) = out.history.last() {
        println!(
            "step {} loss {:.4} (contrast {:.4}, soft {:.4})",
            last.step, last.total, last.contrast, last.softcon
        );
    }
    println!("wrote {bytes} bytes to {}", a.out.display());
    Ok(())
}

fn probe(a: &ProbeArgs) -> Result<()> {
    let cfg = a.config.resolve(&["probe.seed"])?;
    let ds = a.data.load(&cfg)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let enc = encoder_from_checkpoint(&ckpt)?;
    let report = evalkit::probe_encoder(&enc, &ds, &cfg.probe)?;
    println!("micro_map {:.6}", report.micro_map);
    println!("macro_map {:.6}", report.macro_map);
    let mut csv = String::from("class,ap\n");
    for (c, ap) in report.per_class.iter().enumerate() {
        let ap = ap.map_or("undefined".to_string(), |v| format!("{v:.6}"));
        println!("class {c} ap {ap}");
        csv.push_str(&format!("{c},{ap}\n"));
    }
    csv.push_str(&format!("micro,{:.6}\nmacro,{:.6}\n", report.micro_map, report.macro_map));
    if let Some(p) = &a.out {
        write_file(p, csv.as_bytes())?;
        write_sidecar(p, &cfg)?;
    }
    Ok(())
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let cfg = a.config.resolve(&[])?;
    let ds = a.data.load(&cfg)?;
    check_channels(&ds, &cfg)?;
    let plan = AblationPlan {
        variants: a.variants.iter().map(|v| Variant::parse(v)).collect::<Result<_>>()?,
        lambdas: a.lambdas.clone(),
        mask_ratios: a.mask_ratios.clone(),
        inits: a.inits.iter().map(|v| InitMode::parse(v)).collect::<Result<_>>()?,
        seeds: a.seeds.clone(),
    };
    let source = a.source.as_ref().map(Checkpoint::load).transpose()?;
    let mut rows = Vec::new();
    for run in plan.runs() {
        let row = evalkit::run_ablation(&run, &ds, &cfg.train, &cfg.probe, source.as_ref())?;
        println!(
            "{} λ={} r={} {} seed {}: micro {:.4} macro {:.4}",
            run.variant.as_str(),
            run.lambda,
            run.mask_ratio,
            run.init.as_str(),
            run.seed,
            row.micro_map,
            row.macro_map
        );
        rows.push(row);
    }
    write_file(&a.out, evalkit::ablation_csv(&rows).as_bytes())?;
    write_sidecar(&a.out, &cfg)?;
    Ok(())
}

fn stats(a: &StatsArgs) -> Result<()> {
    let cfg = a.config.resolve(&["data.seed"])?;
    let ds = a.data.load(&cfg)?;
    let s = datasynth::dataset_stats(&ds)?;
    println!("scenes {} (train {}, test {})", s.num_scenes, s.train, s.test);
    for (k, f) in s.label_counts.iter().enumerate() {
        println!("labels {} {:.4}", k + 1, f);
    }
    println!("labels>=4 {:.4}", s.at_least_labels(4));
    for (k, f) in s.season_counts.iter().enumerate() {
        println!("seasons {} {:.4}", k + 1, f);
    }
    println!("seasons>=2 {:.4}", s.at_least_seasons(2));
    for (c, f) in s.class_frequency.iter().enumerate() {
        println!("class {c} {f:.4}");
    }
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let results = grad_check_suite(a.instances, a.batch, a.dim, a.epsilon, a.seed)?;
    let mut failed = Vec::new();
    for (name, err) in &results {
        println!("{name} max_rel_err {err:.3e}");
        if *err > GRADCHECK_TOL {
            failed.push(*name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Invalid(format!(
            "gradient check above {GRADCHECK_TOL:e} for {}",
            failed.join(", ")
        )))
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Probe(a) => probe(a),
        Command::Ablate(a) => ablate(a),
        Command::Stats(a) => stats(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
