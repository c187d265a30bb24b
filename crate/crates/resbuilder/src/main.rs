use clap::{Parser, Subcommand};
use resbuilder::arch::ParamStore;
use resbuilder::config::{DatasetSpec, RunConfig};
use resbuilder::data::{self, Dataset, GlyphStyle};
use resbuilder::dot::to_dot;
use resbuilder::error::Error;
use resbuilder::rng::rng_from;
use resbuilder::runlog::summary_csv;
use resbuilder::search::{regularization_sweep, run_resbuilder, select_best, InitialArch};
use resbuilder::serialize::{load_arch, load_weights, save_weights};
use resbuilder::train::{train_phase, TrainingVariant};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "resbuilder",
    about = "FLOP-budgeted architecture search over ResNet-style classifiers",
    version
)]
struct Cli {
    /// Worker threads for batch parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a full search and write history, per-step artifacts and summary.
    Search {
        #[arg(long)]
        config: PathBuf,
        /// Dataset root overriding the config's IDX directory.
        #[arg(long)]
        data: Option<PathBuf>,
        /// minimal | resnet18 | path to an architecture JSON.
        #[arg(long, default_value = "minimal")]
        init: String,
        /// Overrides the config's rng_seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a single architecture with one variant and write metrics JSON.
    Train {
        arch: PathBuf,
        /// with_reg | noreg_ri | noreg_wi.
        #[arg(long)]
        variant: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint to warm-start from (required for noreg_wi).
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Where the trained weights go, if wanted.
        #[arg(long)]
        weights_out: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// One search per regularization strength; writes sweep.csv.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated strengths, at least two.
        #[arg(long)]
        strengths: String,
        #[arg(long, default_value = "minimal")]
        init: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render an architecture file (or every step of a run directory) as DOT.
    ExportDot {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

enum CliError {
    Usage(String),
    Runtime(Error, Option<PathBuf>),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e, None)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().ok();
    }
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e, out)) => {
            let record = serde_json::json!({
                "error": e.to_string(),
                "kind": error_kind(&e),
            });
            eprintln!("{record}");
            if let Some(dir) = out {
                let _ = std::fs::create_dir_all(&dir);
                let _ = std::fs::write(dir.join("error.json"), format!("{record}\n"));
            }
            ExitCode::FAILURE
        }
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Shape { .. } => "shape",
        Error::NonFinite { .. } => "divergence",
        Error::BudgetInfeasible { .. } => "budget_infeasible",
        Error::LabelOutOfRange { .. } => "label",
        Error::Parse { .. } => "parse",
        Error::Config(_) => "config",
        Error::Dataset(_) => "dataset",
        Error::Invalid(_) => "invalid",
        Error::Io { .. } => "io",
    }
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Search { config, data, init, seed, out } => cmd_search(&config, data.as_deref(), &init, seed, &out),
        Cmd::Train { arch, variant, config, data, weights, weights_out, out } => {
            cmd_train(&arch, &variant, &config, data.as_deref(), weights.as_deref(), weights_out.as_deref(), &out)
        }
        Cmd::Sweep { config, data, strengths, init, out } => {
            cmd_sweep(&config, data.as_deref(), &strengths, &init, &out)
        }
        Cmd::ExportDot { input, out } => cmd_export_dot(&input, &out),
    }
}

/// Resolve an IDX directory: absolute as-is, otherwise against --data, then
/// RESBUILDER_DATA_DIR, then the working directory.
fn resolve_data_dir(dir: &str, cli_data: Option<&Path>) -> PathBuf {
    let p = Path::new(dir);
    if p.is_absolute() {
        return p.to_path_buf();
    }
    if let Some(root) = cli_data {
        return root.join(p);
    }
    if let Ok(root) = std::env::var("RESBUILDER_DATA_DIR") {
        return Path::new(&root).join(p);
    }
    p.to_path_buf()
}

fn load_dataset(cfg: &RunConfig, cli_data: Option<&Path>) -> Result<Dataset, CliError> {
    let mut ds = match &cfg.dataset {
        DatasetSpec::IdxScale01 { dir } | DatasetSpec::IdxMeanStd { dir } => {
            let root = resolve_data_dir(dir, cli_data);
            if !root.is_dir() {
                return Err(CliError::Usage(format!("dataset not found: {}", root.display())));
            }
            let raw = data::load_idx_dir(&root)?;
            match cfg.dataset {
                DatasetSpec::IdxScale01 { .. } => data::scale01(raw)?,
                _ => data::normalize_meanstd(raw)?,
            }
        }
        DatasetSpec::Blobs { classes, per_class, size } => {
            let mut rng = rng_from(cfg.train.rng_seed, "blobs", 0);
            data::synthetic_blobs(*classes, *per_class, *size, &mut rng)
        }
        spec @ (DatasetSpec::Glyphs { n_train, n_test } | DatasetSpec::Shapes { n_train, n_test }) => {
            let style = match spec {
                DatasetSpec::Glyphs { .. } => GlyphStyle::Digits,
                _ => GlyphStyle::Shapes,
            };
            let tag = format!(
                "resbuilder-{}-{n_train}-{n_test}-{}",
                if style == GlyphStyle::Digits { "glyphs" } else { "shapes" },
                cfg.train.rng_seed
            );
            let dir = std::env::temp_dir().join(tag);
            if !dir.join("train-images-idx3-ubyte").exists() {
                data::generate_glyph_idx(&dir, style, *n_train, *n_test, cfg.train.rng_seed)?;
            }
            data::scale01(data::load_idx_dir(&dir)?)?
        }
    };
    if cfg.train_limit.is_some() || cfg.test_limit.is_some() {
        ds.truncate(cfg.train_limit.unwrap_or(usize::MAX), cfg.test_limit.unwrap_or(usize::MAX));
    }
    ds.validate()?;
    Ok(ds)
}

fn parse_init(init: &str) -> Result<InitialArch, CliError> {
    match init {
        "minimal" => Ok(InitialArch::Minimal),
        "resnet18" => Ok(InitialArch::ResNet18),
        path => {
            let p = Path::new(path);
            if !p.is_file() {
                return Err(CliError::Usage(format!(
                    "--init must be minimal, resnet18 or an architecture file; `{path}` not found"
                )));
            }
            Ok(InitialArch::Loaded(load_arch(p)?))
        }
    }
}

fn cmd_search(
    config_path: &Path,
    data: Option<&Path>,
    init: &str,
    seed: Option<u64>,
    out: &Path,
) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(s) = seed {
        cfg.train.rng_seed = s;
    }
    let dataset = load_dataset(&cfg, data)?;
    let initial = parse_init(init)?;
    if out.join("history.csv").exists() {
        return Err(CliError::Usage(format!(
            "output directory {} already holds a run",
            out.display()
        )));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;

    let manifest = serde_json::json!({
        "run_name": out.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        "config_hash": cfg.hash(),
        "dataset": cfg.dataset_id(),
        "init": init,
        "rng_seed": cfg.train.rng_seed,
    });
    std::fs::write(out.join("manifest.json"), format!("{manifest:#}\n"))
        .map_err(|e| Error::io(out.display().to_string(), e))?;
    std::fs::write(out.join("config.txt"), cfg.canonical())
        .map_err(|e| Error::io(out.display().to_string(), e))?;

    let outcome = run_resbuilder(initial, &dataset, &cfg.train, Some(out))
        .map_err(|e| CliError::Runtime(e, Some(out.to_path_buf())))?;
    std::fs::write(out.join("summary.csv"), summary_csv(&outcome.history, &cfg.dataset_id(), init))
        .map_err(|e| Error::io(out.display().to_string(), e))?;
    if let Ok((step, record)) = select_best(&outcome.history) {
        let best = serde_json::json!({
            "step": step,
            "arch": format!("step_{step:04}/arch.json"),
            "accuracy": outcome.history.best_noreg(record),
            "flops": record.flops,
        });
        std::fs::write(out.join("best.json"), format!("{best:#}\n"))
            .map_err(|e| Error::io(out.display().to_string(), e))?;
    }
    if let Some(reason) = &outcome.history.terminal {
        return Err(CliError::Runtime(
            Error::Invalid(format!("search terminated early: {reason}")),
            Some(out.to_path_buf()),
        ));
    }
    println!("search complete: {} steps, benchmark {:.4}", outcome.history.steps.len(), outcome.history.benchmark_accuracy);
    Ok(())
}

fn cmd_train(
    arch_path: &Path,
    variant: &str,
    config_path: &Path,
    data: Option<&Path>,
    weights: Option<&Path>,
    weights_out: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let variant = match variant {
        "with_reg" => TrainingVariant::WithReg,
        "noreg_ri" => TrainingVariant::NoRegRi,
        "noreg_wi" => TrainingVariant::NoRegWi,
        other => {
            return Err(CliError::Usage(format!(
                "--variant must be with_reg, noreg_ri or noreg_wi, got `{other}`"
            )))
        }
    };
    if variant == TrainingVariant::NoRegWi && weights.is_none() {
        return Err(CliError::Usage("noreg_wi needs --weights <checkpoint>".into()));
    }
    let cfg = RunConfig::load(config_path)?;
    let dataset = load_dataset(&cfg, data)?;
    let arch = load_arch(arch_path)?;
    let mut params = match weights {
        Some(p) => load_weights(p, &arch)?,
        // Same derivation as a search's benchmark phase, so a standalone
        // train of the start net reproduces the benchmark value exactly.
        None => ParamStore::init(&arch, &mut rng_from(cfg.train.rng_seed, "ri_init", 0)),
    };
    let start_accuracy = resbuilder::train::evaluate_accuracy(
        &arch,
        &params,
        &dataset.test_images,
        &dataset.test_labels,
        cfg.train.batch_size,
    )?;
    let metrics = train_phase(&arch, &mut params, variant, &dataset, &cfg.train, 1, cfg.train.epochs_per_phase)?;
    if let Some(p) = weights_out {
        save_weights(&params, p)?;
    }
    let json = serde_json::json!({
        "variant": variant.tag(),
        "epochs": metrics.epochs,
        "start_test_accuracy": start_accuracy,
        "test_accuracy": metrics.test_accuracy,
        "train_loss_per_epoch": metrics.train_loss_per_epoch,
    });
    std::fs::write(out, format!("{json:#}\n")).map_err(|e| Error::io(out.display().to_string(), e))?;
    println!("{} accuracy {:.4}", variant.tag(), metrics.test_accuracy);
    Ok(())
}

fn cmd_sweep(
    config_path: &Path,
    data: Option<&Path>,
    strengths: &str,
    init: &str,
    out: &Path,
) -> Result<(), CliError> {
    let values: Result<Vec<f64>, _> = strengths.split(',').map(str::trim).map(str::parse::<f64>).collect();
    let values = values.map_err(|_| CliError::Usage(format!("bad --strengths list `{strengths}`")))?;
    if values.len() < 2 {
        return Err(CliError::Usage("sweep needs at least 2 strengths".into()));
    }
    let cfg = RunConfig::load(config_path)?;
    let dataset = load_dataset(&cfg, data)?;
    let initial = parse_init(init)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let rows = regularization_sweep(&values, initial, &dataset, &cfg.train, Some(out))
        .map_err(|e| CliError::Runtime(e, Some(out.to_path_buf())))?;
    let mut csv = String::from("strength,final_flops,with_reg_accuracy,collapsed\n");
    for r in &rows {
        csv.push_str(&format!(
            "{:e},{},{:.6},{}\n",
            r.strength, r.final_flops, r.with_reg_accuracy, r.collapsed
        ));
    }
    std::fs::write(out.join("sweep.csv"), csv).map_err(|e| Error::io(out.display().to_string(), e))?;
    println!("sweep complete: {} rows", rows.len());
    Ok(())
}

fn cmd_export_dot(input: &Path, out: &Path) -> Result<(), CliError> {
    if input.is_dir() {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
        let mut steps: Vec<(u64, PathBuf)> = Vec::new();
        let entries = std::fs::read_dir(input).map_err(|e| Error::io(input.display().to_string(), e))?;
        for entry in entries.flatten() {
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(num) = name.strip_prefix("step_") {
                if let Ok(step) = num.parse::<u64>() {
                    let arch_file = entry.path().join("arch.json");
                    if arch_file.is_file() {
                        steps.push((step, arch_file));
                    }
                }
            }
        }
        if steps.is_empty() {
            return Err(CliError::Usage(format!(
                "{} has no step_*/arch.json entries",
                input.display()
            )));
        }
        steps.sort();
        for (step, path) in steps {
            let arch = load_arch(&path)?;
            let dot = to_dot(&arch, Some(step));
            let target = out.join(format!("step_{step:04}.dot"));
            std::fs::write(&target, dot).map_err(|e| Error::io(target.display().to_string(), e))?;
        }
    } else {
        let arch = load_arch(input)?;
        if let Some(parent) = out.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
            }
        }
        std::fs::write(out, to_dot(&arch, None)).map_err(|e| Error::io(out.display().to_string(), e))?;
    }
    Ok(())
}
