//! `phiml`: generate datasets, train surrogates, evaluate them on the test
//! paths, and run the gradient checks.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use phiml_core::datagen::{generate_dataset, Dataset, Split};
use phiml_core::eval::{evaluate, EvalContext, OracleModel, Surrogate};
use phiml_core::gradcheck;
use phiml_core::hash::bytes_hash;
use phiml_core::models::{Checkpoint, NaiveStressModel, PhiMlModel, TrainedModel, CHECKPOINT_SCHEMA_VERSION};
use phiml_core::training::{train, TrainReport};
use phiml_core::{Error, Result};
use serde::Serialize;

use config::{ExperimentConfig, ModelKind};

#[derive(Parser)]
#[command(name = "phiml", version, about = "Phase-field fracture surrogate experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set train.max_epochs=100`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate all load paths and write dataset.csv + dataset.meta.json.
    Generate(ConfigArgs),
    /// Train the configured model and write a checkpoint and loss curves.
    Train(ConfigArgs),
    /// Roll the model out on the test paths and write report.json and
    /// prediction CSVs.
    Evaluate(ConfigArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(ConfigArgs),
}

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::PoisonedGradient { .. } | Error::Divergence { .. } => EXIT_NUMERICAL,
        _ => EXIT_CONFIG,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (args, run): (&ConfigArgs, fn(&ExperimentConfig) -> Result<bool>) = match &cli.command {
        Command::Generate(a) => (a, cmd_generate),
        Command::Train(a) => (a, cmd_train),
        Command::Evaluate(a) => (a, cmd_evaluate),
        Command::Gradcheck(a) => (a, cmd_gradcheck),
    };
    let outcome = ExperimentConfig::load(args.config.as_deref(), &args.overrides).and_then(|cfg| run(&cfg));
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_NUMERICAL),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let ds = Dataset::read(&cfg.paths.dataset_dir).map_err(|e| match e {
        Error::Io(io) => Error::InvalidArgument(format!(
            "cannot read dataset in {}: {io}",
            cfg.paths.dataset_dir.display()
        )),
        other => other,
    })?;
    if ds.mode != cfg.mode || ds.variant != cfg.variant {
        return Err(Error::SchemaMismatch(format!(
            "dataset is {:?}/{:?} but the config asks for {:?}/{:?}",
            ds.mode, ds.variant, cfg.mode, cfg.variant
        )));
    }
    Ok(ds)
}

fn cmd_generate(cfg: &ExperimentConfig) -> Result<bool> {
    let ds = generate_dataset(&cfg.generation, cfg.variant)?;
    ds.write(&cfg.paths.dataset_dir)?;
    for q in ds.norm.warnings() {
        eprintln!("warning: degenerate range for {q:?}; identity scale used");
    }
    println!("{} paths, {} rows", ds.paths.len(), ds.rows.len());
    Ok(true)
}

/// `train_report.json`: the optimizer history plus provenance.
#[derive(Serialize)]
struct TrainArtifact<'a> {
    schema_version: u32,
    config_hash: String,
    seed: u64,
    dataset_hash: String,
    model: &'static str,
    loss_curves_sha256: String,
    diverged_at: Option<usize>,
    report: &'a TrainReport,
}

fn cmd_train(cfg: &ExperimentConfig) -> Result<bool> {
    let ds = load_dataset(cfg)?;
    let train_rows = ds.rows_in(Split::Train);
    let val_rows = ds.rows_in(Split::Val);
    let seed = cfg.seeds.model;
    let (outcome, model) = match cfg.model {
        ModelKind::Naive => {
            let mut m = NaiveStressModel::new(ds.norm, ds.mode, seed)?;
            (train(&mut m, &train_rows, &val_rows, &cfg.train), TrainedModel::Naive(m))
        }
        ModelKind::Phiml => {
            let mut m = PhiMlModel::new(ds.norm, ds.mode, seed)?;
            (train(&mut m, &train_rows, &val_rows, &cfg.train), TrainedModel::Phiml(m))
        }
        ModelKind::Oracle => {
            return Err(Error::InvalidArgument("the oracle model has nothing to train".into()));
        }
    };
    let (report, diverged_at) = match outcome {
        Ok(r) => (r, None),
        Err(Error::Divergence { epoch, report }) => (*report, Some(epoch)),
        Err(e) => return Err(e),
    };

    let curves = report.curves_csv()?;
    let dir = &cfg.paths.report_dir;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("loss_curves.csv"), &curves)?;
    let artifact = TrainArtifact {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        config_hash: cfg.hash(),
        seed,
        dataset_hash: ds.config_hash(),
        model: model.kind_name(),
        loss_curves_sha256: bytes_hash(&curves),
        diverged_at,
        report: &report,
    };
    write_json(&dir.join("train_report.json"), &artifact)?;
    if let Some(epoch) = diverged_at {
        eprintln!("error: training diverged at epoch {epoch}; partial report written");
        return Ok(false);
    }

    let ckpt = Checkpoint {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        seed,
        config_hash: cfg.hash(),
        dataset_hash: ds.config_hash(),
        model,
    };
    if let Some(parent) = cfg.paths.checkpoint.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&cfg.paths.checkpoint, ckpt.to_json()?)?;
    println!(
        "trained {} for {} epochs (best {} with validation loss {:.4e}) in {:.1} s",
        ckpt.model.kind_name(),
        report.epochs.len(),
        report.best_epoch,
        report.best_val,
        report.wall_time_s
    );
    Ok(true)
}

fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<bool> {
    let ds = load_dataset(cfg)?;
    let ctx = EvalContext {
        model: format!("{:?}", cfg.model).to_lowercase(),
        seed: cfg.seeds.model,
        config_hash: cfg.hash(),
    };
    let trained;
    let model: &dyn Surrogate = match cfg.model {
        ModelKind::Oracle => &OracleModel,
        kind => {
            let text = fs::read_to_string(&cfg.paths.checkpoint).map_err(|e| {
                Error::InvalidArgument(format!("cannot read checkpoint {}: {e}", cfg.paths.checkpoint.display()))
            })?;
            let ckpt = Checkpoint::from_json(&text)?;
            let kind_matches = matches!(
                (kind, &ckpt.model),
                (ModelKind::Naive, TrainedModel::Naive(_)) | (ModelKind::Phiml, TrainedModel::Phiml(_))
            );
            if !kind_matches {
                return Err(Error::SchemaMismatch(format!(
                    "checkpoint holds a {} model, config asks for {:?}",
                    ckpt.model.kind_name(),
                    kind
                )));
            }
            if ckpt.model.mode() != ds.mode || *ckpt.model.norm() != ds.norm {
                return Err(Error::SchemaMismatch(
                    "checkpoint was trained on a different dataset (mode or normalization differ)".into(),
                ));
            }
            trained = ckpt.model;
            &trained
        }
    };

    let (report, predictions) = evaluate(model, &ds, &cfg.eval.modes, &ctx)?;
    let dir = &cfg.paths.report_dir;
    fs::create_dir_all(dir)?;
    let mut files = BTreeMap::new();
    for p in &predictions {
        let name = format!("predictions_{}.csv", p.scenario.name());
        let bytes = p.csv_bytes()?;
        files.insert(name.clone(), bytes_hash(&bytes));
        fs::write(dir.join(name), bytes)?;
    }

    #[derive(Serialize)]
    struct ReportFile<'a> {
        #[serde(flatten)]
        report: &'a phiml_core::eval::EvalReport,
        prediction_files_sha256: BTreeMap<String, String>,
    }
    write_json(
        &dir.join("report.json"),
        &ReportFile {
            report: &report,
            prediction_files_sha256: files,
        },
    )?;
    for e in report.entries.iter().filter(|e| e.window == phiml_core::eval::Window::Full) {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into());
        println!(
            "{:<7} {:<15} {:<12} R2 {:>9}  MAPE {:>9}%",
            e.scenario.name(),
            format!("{:?}", e.rollout),
            e.target.name(),
            fmt(e.r2),
            fmt(e.mape)
        );
    }
    Ok(true)
}

fn cmd_gradcheck(cfg: &ExperimentConfig) -> Result<bool> {
    let mut all = true;
    let mut reports = Vec::new();
    for &seed in &cfg.gradcheck.seeds {
        let report = gradcheck::run_suite_with(seed, cfg.gradcheck.inject_mutant)?;
        for c in &report.checks {
            println!(
                "[{}] seed {seed}: {} max rel error {:.3e} (tolerance {:.0e})",
                if c.passed { "pass" } else { "FAIL" },
                c.name,
                c.max_rel_error,
                c.tolerance
            );
        }
        all &= report.all_passed();
        reports.push(report);
    }
    #[derive(Serialize)]
    struct GradcheckFile {
        config_hash: String,
        seeds: Vec<u64>,
        passed: bool,
        reports: Vec<gradcheck::GradcheckReport>,
    }
    write_json(
        &cfg.paths.report_dir.join("gradcheck.json"),
        &GradcheckFile {
            config_hash: cfg.hash(),
            seeds: cfg.gradcheck.seeds.clone(),
            passed: all,
            reports,
        },
    )?;
    println!("{}", if all { "all gradient checks passed" } else { "gradient checks FAILED" });
    Ok(all)
}
