use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pacbayes::bayes::PriorKind;
use pacbayes::certify::evaluate_bound;
use pacbayes::config::{RunConfig, Splits};
use pacbayes::data::{self, Dataset};
use pacbayes::kbound::KCurve;
use pacbayes::trainer::{self, BaselineGrid, Checkpoint, RunPaths};
use pacbayes::{Error, Result};

#[derive(Parser)]
#[command(name = "pacbayes", version, about = "Tuning-free PAC-Bayes training with trainable priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the exponential-moment curve K(lambda) and write it to a file.
    EstimateK {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        prior: Option<PriorKind>,
    },
    /// Run both training stages and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory; defaults to `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        kcurve: Option<PathBuf>,
        #[arg(long)]
        prior: Option<PriorKind>,
    },
    /// Recompute the certificate of a run from its Stage-1 checkpoint.
    Certify {
        #[arg(long)]
        run: PathBuf,
        /// Compare against held-out loss: the run's held-out split when
        /// given without a value, otherwise a dataset (see `evaluate --data`).
        #[arg(long, num_args = 0..=1, default_missing_value = "heldout")]
        heldout: Option<String>,
    },
    /// Accuracy and loss of a trained run on a dataset.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        /// `train`, `heldout`, `test`, a CSV file, or `IMAGES.idx,LABELS.idx`.
        #[arg(long)]
        data: String,
        #[arg(long, default_value_t = 30)]
        draws: usize,
        #[arg(long)]
        json: bool,
    },
    /// Train the baseline hyper-parameter grid.
    BaselineGrid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(p).map_err(|e| Error::io(p, e))
}

fn load_config(path: &Path, prior: Option<PriorKind>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&absolute(path)?)?;
    if let Some(p) = prior {
        cfg.prior = p;
    }
    Ok(cfg)
}

fn run_config(run: &Path) -> Result<RunConfig> {
    RunConfig::load(&run.join(RunPaths::CONFIG))
}

fn dataset_arg(spec: &str, splits: impl FnOnce() -> Result<Splits>) -> Result<Dataset> {
    let named = |s: Splits| match spec {
        "train" => s.train,
        "heldout" => s.heldout,
        _ => s.test,
    };
    let d = match spec {
        "train" | "heldout" | "test" => named(splits()?),
        _ => match spec.split_once(',') {
            Some((images, labels)) => data::load_idx(Path::new(images), Path::new(labels))?,
            None => data::load_csv(Path::new(spec))?,
        },
    };
    if d.is_empty() {
        return Err(Error::Invalid(format!("dataset `{spec}` is empty")));
    }
    Ok(d)
}

fn estimate_k(config: &Path, out: &Path, prior: Option<PriorKind>) -> Result<()> {
    let cfg = load_config(config, prior)?;
    let splits = cfg.load_splits()?;
    let model = cfg.model_for(&splits.train)?;
    let curve = trainer::estimate_curve(&cfg.pacbayes, cfg.prior, &model, &splits.train)?;
    curve.save(out)?;
    println!("wrote {} knots to {}", curve.knots.len(), out.display());
    for k in &curve.knots {
        println!("  lambda {:.6e}  K {:.6}", k.query, k.k);
    }
    Ok(())
}

fn train(config: &Path, out: Option<&Path>, kcurve: Option<&Path>, prior: Option<PriorKind>) -> Result<()> {
    let cfg = load_config(config, prior)?;
    let out = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::config("output_dir", "no --out given and no output_dir in the config"))?;
    let splits = cfg.load_splits()?;
    let (run, summary) = trainer::train(&cfg, &splits, &out, kcurve)?;
    println!(
        "{} prior: {} stage-1 epochs, {} stage-2 epochs (stop: {:?}), K curve {}",
        summary.prior,
        summary.stage1_epochs,
        summary.stage2_epochs,
        summary.stop,
        if summary.kcurve_reused { "reused" } else { "estimated" }
    );
    println!("train accuracy {:.4}", summary.train_accuracy);
    if let Some(a) = summary.test_accuracy {
        println!("test accuracy  {a:.4}");
    }
    print!("{}", run.certificate.summary());
    println!("run directory {}", out.display());
    Ok(())
}

fn certify(run: &Path, heldout: Option<&str>) -> Result<()> {
    let stage1 = run.join(RunPaths::STAGE1);
    if !stage1.exists() {
        return Err(Error::Missing(stage1));
    }
    let ckpt = Checkpoint::load(&stage1)?;
    let curve = KCurve::load(&run.join(RunPaths::KCURVE))?;
    let cfg = run_config(run)?;
    let splits = cfg.load_splits()?;
    let held = heldout.map(|spec| dataset_arg(spec, || Ok(splits.clone()))).transpose()?;
    let model = ckpt.model()?;
    let cert = evaluate_bound(&model, &ckpt.posterior, &ckpt.prior, Some(&curve), &cfg.pacbayes, &splits.train, held.as_ref())?;
    cert.save(&run.join(RunPaths::CERTIFICATE))?;
    print!("{}", cert.summary());
    Ok(())
}

fn evaluate(run: &Path, spec: &str, draws: usize, json: bool) -> Result<()> {
    let ckpt = Checkpoint::load(&run.join(RunPaths::FINAL))?;
    let cfg = run_config(run)?;
    let data = dataset_arg(spec, || cfg.load_splits())?;
    let model = ckpt.model()?;
    if data.width() != model.input_dim() {
        return Err(Error::Invalid(format!("dataset has {} features, model expects {}", data.width(), model.input_dim())));
    }
    let rep = trainer::evaluate(&model, &ckpt.posterior, &data, draws, cfg.pacbayes.label_smoothing, cfg.pacbayes.seed)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&rep).map_err(|e| Error::format("report", e.to_string()))?);
    } else {
        println!("examples          {}", rep.examples);
        println!("mean-model acc    {:.4}", rep.mean_accuracy);
        println!("mean-model loss   {:.6}", rep.mean_loss);
        println!("sampled acc       {:.4} ({} draws)", rep.sampled_accuracy, rep.draws);
        println!("sampled loss      {:.6}", rep.sampled_loss);
    }
    Ok(())
}

fn baseline_grid(config: &Path, grid: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config, None)?;
    let text = std::fs::read_to_string(grid).map_err(|e| Error::io(grid, e))?;
    let grid = BaselineGrid::from_toml(&text, &grid.display().to_string())?;
    let splits = cfg.load_splits()?;
    let model = cfg.model_for(&splits.train)?;
    let table = trainer::train_baseline(&model, &grid, &splits, cfg.pacbayes.seed, Some(out))?;
    let csv = out.join("table.csv");
    std::fs::write(&csv, table.to_csv()).map_err(|e| Error::io(&csv, e))?;
    if let Some(best) = table.best() {
        let p = out.join("best.json");
        let text = serde_json::to_string_pretty(best).map_err(|e| Error::format("best", e.to_string()))?;
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    print!("{}", table.to_csv());
    Ok(())
}

fn threads() -> Result<Option<usize>> {
    match std::env::var("PACBAYES_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| Error::config("PACBAYES_THREADS", format!("expected a positive integer, got `{v}`"))),
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    if let Some(n) = threads()? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config("PACBAYES_THREADS", e.to_string()))?;
    }
    match cli.command {
        Command::EstimateK { config, out, prior } => estimate_k(&config, &out, prior),
        Command::Train { config, out, kcurve, prior } => train(&config, out.as_deref(), kcurve.as_deref(), prior),
        Command::Certify { run, heldout } => certify(&run, heldout.as_deref()),
        Command::Evaluate { run, data, draws, json } => evaluate(&run, &data, draws, json),
        Command::BaselineGrid { config, grid, out } => baseline_grid(&config, &grid, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
