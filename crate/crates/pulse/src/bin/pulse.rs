//! Command-line driver: dataset generation, pretraining (including the
//! oracle and ablation variants), probe evaluation, the identifiability
//! check, seed/variant sweeps, and result-table assembly.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime failure,
//! 3 acceptance-check failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use pulse::checkpoint;
use pulse::config::RunConfig;
use pulse::dataset::WindowDataset;
use pulse::eval::{embed, linear_probe, semi_supervised, ProbeReport};
use pulse::graph::verify_theorem1;
use pulse::model::PulseModel;
use pulse::rng;
use pulse::train::{train_from, Variant};
use pulse::{PulseError, Result};

#[derive(Parser)]
#[command(name = "pulse", version, about = "Self-supervised time-series pretraining lab")]
struct Cli {
    /// TOML run configuration; omitted sections take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root (overrides the PULSE_OUT environment variable).
    #[arg(long, global = true)]
    out_root: Option<PathBuf>,
    /// Overwrite artifacts that already exist.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build and store the windowed SDE dataset for a configuration.
    Generate {
        #[arg(long)]
        family: Option<String>,
        #[arg(long, allow_hyphen_values = true)]
        sigma: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        /// Also export per-split CSV files next to the container.
        #[arg(long)]
        csv: bool,
    },
    /// Pretrain on an existing dataset (run `generate` first).
    Train {
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from this checkpoint instead of initializing fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Probe the trained encoder's embeddings on the test split.
    Eval {
        /// Label fractions for label-scarce probes (repeatable); defaults
        /// to the config's eval.semi_fractions.
        #[arg(long)]
        semi: Vec<f64>,
        #[arg(long)]
        subsets: Option<usize>,
        /// Additionally probe a randomly initialized (untrained) encoder.
        #[arg(long)]
        untrained: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Exhaustively check the shared-latent identifiability statement.
    VerifyTheorem {
        #[arg(long)]
        w_max: usize,
    },
    /// Run generate + train + eval across seeds and variants.
    Sweep {
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', required = true)]
        variants: Vec<String>,
    },
    /// Aggregate eval CSV rows across runs into a summary table.
    Table,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                PulseError::Config(_) | PulseError::Parameter(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn out_root(cli: &Cli) -> PathBuf {
    cli.out_root
        .clone()
        .or_else(|| std::env::var_os("PULSE_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("pulse-out"))
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    match &cli.config {
        Some(path) => RunConfig::load(path),
        None => Ok(RunConfig::default()),
    }
}

fn run_dir(root: &Path, cfg: &RunConfig) -> PathBuf {
    root.join("runs").join(cfg.hash())
}

/// Datasets are shared across variants: they are keyed by the hash of the
/// resolved dataset configuration alone, and runs reference them.
fn dataset_dir(root: &Path, cfg: &RunConfig) -> PathBuf {
    root.join("datasets")
        .join(pulse::dataset::config_hash(&cfg.to_dataset_config()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| PulseError::Format(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

fn guard_overwrite(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(PulseError::Config(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct RunRecord<'a> {
    config_hash: String,
    config: &'a RunConfig,
}

fn stamp_run(dir: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_json(
        &dir.join("run_config.json"),
        &RunRecord {
            config_hash: cfg.hash(),
            config: cfg,
        },
    )
}

fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.cmd {
        Cmd::Generate {
            family,
            sigma,
            seed,
            classes,
            window,
            trials,
            steps,
            csv,
        } => {
            let mut cfg = load_config(cli)?;
            if let Some(f) = family {
                cfg.dataset.family = f.clone();
            }
            if let Some(s) = sigma {
                cfg.dataset.sigma = *s;
            }
            if let Some(s) = seed {
                cfg.seed = *s;
            }
            if let Some(c) = classes {
                cfg.dataset.n_classes = *c;
            }
            if let Some(w) = window {
                cfg.dataset.window = *w;
            }
            if let Some(t) = trials {
                cfg.dataset.trials_per_class = *t;
            }
            if let Some(s) = steps {
                cfg.dataset.steps_per_trial = *s;
            }
            cfg.validate()?;
            cmd_generate(&cfg, &out_root(cli), cli.force, *csv)
        }
        Cmd::Train {
            variant,
            seed,
            epochs,
            resume,
        } => {
            let mut cfg = load_config(cli)?;
            if let Some(v) = variant {
                cfg.train.variant = v.clone();
            }
            if let Some(s) = seed {
                cfg.seed = *s;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            cfg.validate()?;
            cmd_train(&cfg, &out_root(cli), cli.force, resume.as_deref())
        }
        Cmd::Eval {
            semi,
            subsets,
            untrained,
            seed,
        } => {
            let mut cfg = load_config(cli)?;
            if !semi.is_empty() {
                cfg.eval.semi_fractions = semi.clone();
            }
            if let Some(s) = subsets {
                cfg.eval.subsets = *s;
            }
            if let Some(s) = seed {
                cfg.seed = *s;
            }
            cfg.validate()?;
            cmd_eval(&cfg, &out_root(cli), cli.force, *untrained)
        }
        Cmd::VerifyTheorem { w_max } => cmd_verify_theorem(*w_max, &out_root(cli)),
        Cmd::Sweep { seeds, variants } => {
            let cfg = load_config(cli)?;
            cfg.validate()?;
            cmd_sweep(&cfg, seeds, variants, &out_root(cli), cli.force)
        }
        Cmd::Table => cmd_table(&out_root(cli)),
    }
}

#[derive(Serialize)]
struct DatasetSummary {
    config_hash: String,
    family: String,
    sigma: f64,
    n_classes: usize,
    class_params: Vec<f64>,
    windows_total: usize,
    windows_train: usize,
    windows_val: usize,
    windows_test: usize,
}

fn cmd_generate(cfg: &RunConfig, root: &Path, force: bool, csv: bool) -> Result<ExitCode> {
    let dir = dataset_dir(root, cfg);
    let ds_path = dir.join("dataset.bin");
    guard_overwrite(&ds_path, force)?;
    std::fs::create_dir_all(&dir)?;
    let ds = pulse::dataset::build_dataset(&cfg.to_dataset_config())?;
    ds.save(&ds_path)?;
    let count = |s| ds.split_indices(s).len();
    let summary = DatasetSummary {
        config_hash: pulse::dataset::config_hash(&cfg.to_dataset_config()),
        family: ds.config.family.clone(),
        sigma: ds.config.sigma,
        n_classes: ds.class_params.len(),
        class_params: ds.class_params.clone(),
        windows_total: ds.n,
        windows_train: count(pulse::dataset::Split::Train),
        windows_val: count(pulse::dataset::Split::Val),
        windows_test: count(pulse::dataset::Split::Test),
    };
    write_json(&dir.join("dataset_summary.json"), &summary)?;
    if csv {
        ds.export_csv(&dir.join("csv"))?;
    }
    println!(
        "wrote {} ({} windows, {} classes: {:?})",
        ds_path.display(),
        ds.n,
        ds.class_params.len(),
        ds.class_params
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct TrainSummary {
    config_hash: String,
    variant: String,
    epochs_run: usize,
    steps: u64,
    best_epoch: usize,
    best_val_loss: f64,
    events: usize,
}

fn cmd_train(
    cfg: &RunConfig,
    root: &Path,
    force: bool,
    resume: Option<&Path>,
) -> Result<ExitCode> {
    let dir = run_dir(root, cfg);
    let ds_path = dataset_dir(root, cfg).join("dataset.bin");
    if !ds_path.exists() {
        return Err(PulseError::Contract(format!(
            "dataset not found at {}; run `pulse generate` with this config first",
            ds_path.display()
        )));
    }
    let metrics = dir.join("metrics.jsonl");
    if resume.is_none() {
        guard_overwrite(&metrics, force)?;
        if force && metrics.exists() {
            std::fs::remove_file(&metrics)?;
        }
    }
    stamp_run(&dir, cfg)?;
    write_json(
        &dir.join("dataset_ref.json"),
        &serde_json::json!({ "path": ds_path.to_string_lossy() }),
    )?;
    let ds = WindowDataset::load(&ds_path)?;
    let state = train_from(
        &ds,
        &cfg.to_model_config()?,
        &cfg.to_train_config()?,
        Some(&dir),
        resume,
    )?;
    std::fs::write(&dir.join("events.log"), state.events.join("\n") + "\n")?;
    let summary = TrainSummary {
        config_hash: cfg.hash(),
        variant: cfg.train.variant.clone(),
        epochs_run: state.history.len(),
        steps: state.step,
        best_epoch: state.best_epoch,
        best_val_loss: state.best_val,
        events: state.events.len(),
    };
    write_json(&dir.join("train_summary.json"), &summary)?;
    println!(
        "trained {} for {} epochs; best val loss {:.6} at epoch {} ({})",
        cfg.train.variant,
        state.history.len(),
        state.best_val,
        state.best_epoch,
        dir.join("best.ckpt").display()
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct SemiSummary {
    fraction: f64,
    reports: Vec<ProbeReport>,
    mean_accuracy: f64,
    mean_auroc: f64,
    mean_auprc: f64,
}

fn csv_row(
    out: &mut String,
    variant: &str,
    seed: u64,
    sigma: f64,
    fraction: f64,
    subset: usize,
    r: &ProbeReport,
) {
    out.push_str(&format!(
        "{variant},{seed},{sigma},{fraction},{subset},{:.6},{:.6},{:.6}\n",
        r.metrics.accuracy, r.metrics.auroc_macro, r.metrics.auprc_macro
    ));
}

fn cmd_eval(cfg: &RunConfig, root: &Path, force: bool, untrained: bool) -> Result<ExitCode> {
    let dir = run_dir(root, cfg);
    let ckpt = dir.join("best.ckpt");
    if !ckpt.exists() {
        return Err(PulseError::Contract(format!(
            "checkpoint not found at {}; run `pulse train` with this config first",
            ckpt.display()
        )));
    }
    let probe_path = dir.join("eval_probe.json");
    guard_overwrite(&probe_path, force)?;
    let ds = WindowDataset::load(&dataset_dir(root, cfg).join("dataset.bin"))?;
    let (model, _, _) = checkpoint::load(&ckpt)?;
    let mut emb = embed(&model, &ds)?;
    emb.standardize();
    let mut csv = String::from("variant,seed,sigma,fraction,subset,accuracy,auroc,auprc\n");
    let variant = cfg.train.variant.as_str();
    let sigma = cfg.dataset.sigma;

    let probe = linear_probe(&emb)?;
    println!(
        "linear probe [{variant}]: accuracy {:.4}, AUROC {:.4}, AUPRC {:.4}",
        probe.metrics.accuracy, probe.metrics.auroc_macro, probe.metrics.auprc_macro
    );
    for w in &probe.metrics.warnings {
        eprintln!("warning: {w}");
    }
    csv_row(&mut csv, variant, cfg.seed, sigma, 1.0, 0, &probe);
    write_json(&probe_path, &probe)?;

    for &fraction in &cfg.eval.semi_fractions {
        let mut reports = Vec::new();
        for subset in 0..cfg.eval.subsets {
            let seed = rng::derive_seed(cfg.eval_seed(), &format!("semi/{fraction}/{subset}"));
            let r = semi_supervised(&emb, fraction, seed, cfg.eval.resample)?;
            csv_row(&mut csv, variant, cfg.seed, sigma, fraction, subset, &r);
            reports.push(r);
        }
        let mean = |f: fn(&ProbeReport) -> f64| {
            reports.iter().map(f).sum::<f64>() / reports.len() as f64
        };
        let summary = SemiSummary {
            fraction,
            mean_accuracy: mean(|r| r.metrics.accuracy),
            mean_auroc: mean(|r| r.metrics.auroc_macro),
            mean_auprc: mean(|r| r.metrics.auprc_macro),
            reports,
        };
        println!(
            "label fraction {fraction} [{variant}]: mean accuracy {:.4} over {} subsets",
            summary.mean_accuracy, cfg.eval.subsets
        );
        write_json(&dir.join(format!("eval_semi_{fraction}.json")), &summary)?;
    }

    if untrained {
        let mut mc = cfg.to_model_config()?;
        mc.seed = rng::derive_seed(cfg.eval_seed(), "untrained-init");
        let fresh = PulseModel::new(mc)?;
        let mut emb_u = embed(&fresh, &ds)?;
        emb_u.standardize();
        let r = linear_probe(&emb_u)?;
        println!(
            "untrained-encoder probe: accuracy {:.4} (trained: {:.4})",
            r.metrics.accuracy, probe.metrics.accuracy
        );
        csv_row(&mut csv, "untrained", cfg.seed, sigma, 1.0, 0, &r);
        write_json(&dir.join("eval_untrained.json"), &r)?;
    }

    std::fs::write(dir.join("eval.csv"), csv)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify_theorem(w_max: usize, root: &Path) -> Result<ExitCode> {
    let report = verify_theorem1(w_max)?;
    print!("{report}");
    std::fs::create_dir_all(root)?;
    write_json(&root.join(format!("theorem_w{w_max}.json")), &report)?;
    if report.passed {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(3))
    }
}

fn cmd_sweep(
    base: &RunConfig,
    seeds: &[u64],
    variants: &[String],
    root: &Path,
    force: bool,
) -> Result<ExitCode> {
    for v in variants {
        v.parse::<Variant>()?;
    }
    let mut hashes = Vec::new();
    for &seed in seeds {
        for variant in variants {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.train.variant = variant.clone();
            let dir = run_dir(root, &cfg);
            println!("== sweep: seed {seed}, variant {variant} -> {}", dir.display());
            if !dataset_dir(root, &cfg).join("dataset.bin").exists() || force {
                cmd_generate(&cfg, root, force, false)?;
            }
            cmd_train(&cfg, root, force, None)?;
            cmd_eval(&cfg, root, force, false)?;
            hashes.push(cfg.hash());
        }
    }
    write_json(&root.join("sweep_summary.json"), &hashes)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_table(root: &Path) -> Result<ExitCode> {
    let runs = root.join("runs");
    let mut all_rows = String::from("variant,seed,sigma,fraction,subset,accuracy,auroc,auprc\n");
    // (variant, sigma, fraction) -> accuracies
    let mut groups: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    let entries = std::fs::read_dir(&runs).map_err(|e| {
        PulseError::Contract(format!("no runs under {}: {e}", runs.display()))
    })?;
    for entry in entries {
        let path = entry?.path().join("eval.csv");
        if !path.exists() {
            continue;
        }
        let text = std::fs::read_to_string(&path)?;
        for line in text.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 8 {
                continue;
            }
            all_rows.push_str(line);
            all_rows.push('\n');
            let key = (cols[0].to_string(), cols[2].to_string(), cols[3].to_string());
            let acc: f64 = cols[5].parse().map_err(|_| {
                PulseError::Format(format!("bad accuracy in {}: {line}", path.display()))
            })?;
            groups.entry(key).or_default().push(acc);
        }
    }
    if groups.is_empty() {
        return Err(PulseError::Contract(format!(
            "no eval.csv rows found under {}",
            runs.display()
        )));
    }
    std::fs::write(root.join("table.csv"), &all_rows)?;
    println!(
        "{:<24} {:>6} {:>9} {:>5} {:>9} {:>9}",
        "variant", "sigma", "fraction", "n", "mean acc", "std"
    );
    for ((variant, sigma, fraction), accs) in &groups {
        let n = accs.len() as f64;
        let mean = accs.iter().sum::<f64>() / n;
        let std = (accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n).sqrt();
        println!("{variant:<24} {sigma:>6} {fraction:>9} {:>5} {mean:>9.4} {std:>9.4}", accs.len());
    }
    println!("full rows written to {}", root.join("table.csv").display());
    Ok(ExitCode::SUCCESS)
}
