//! `scida` command-line entry point.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 for everything
//! that goes wrong at run time (I/O, loading, divergence).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use scida_core::checkpoint;
use scida_core::config::{DataSpec, Mode, RunConfig};
use scida_core::datasets::{generate_synthetic_pair, load_mai, write_mai, Split};
use scida_core::report::{emit_ablation, emit_report, RunSummary};
use scida_core::trainer::{ablate_delta, evaluate_run, TrainData, Trainer};
use scida_core::ScidaError;

#[derive(Parser)]
#[command(name = "scida", version, about = "Single- to multi-label domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic source/target pair of a run config in MAI layout.
    GenSynth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoints, run.json and a report under --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the mode in the config file.
        #[arg(long)]
        mode: Option<Mode>,
        /// Continue from a checkpoint written by the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a labeled MAI directory; prints JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train once per delta and write a comparison table.
    AblateDelta {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        deltas: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Regenerate the report of a finished run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

/// Errors surfaced to the user, tagged with their exit code.
enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ScidaError> for Failure {
    fn from(e: ScidaError) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn read_config(path: &Path) -> CliResult<RunConfig> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
    Ok(RunConfig::from_json_str(&text)?)
}

fn gen_synth(config: &Path, out: &Path) -> CliResult {
    let cfg = read_config(config)?;
    let DataSpec::Synthetic { config: synth, seed } = &cfg.data else {
        return Err(Failure::Config("gen-synth needs a config with synthetic data".into()));
    };
    let pair = generate_synthetic_pair(synth, *seed)?;
    write_mai(&pair.source, &out.join("source"))?;
    write_mai(&pair.target, &out.join("target"))?;
    println!(
        "wrote {} source and {} target images to {}",
        pair.source.len(),
        pair.target.len(),
        out.display()
    );
    Ok(())
}

fn train(config: &Path, out: &Path, mode: Option<Mode>, resume: Option<&Path>) -> CliResult {
    let mut cfg = read_config(config)?;
    if let Some(m) = mode {
        cfg.mode = m;
    }
    let data = TrainData::load(&cfg)?;
    let mut trainer = match resume {
        Some(path) => Trainer::resume(&cfg, &data, path)?,
        None => Trainer::new(&cfg, &data)?,
    };
    let ckpt_dir = out.join("checkpoints");
    std::fs::create_dir_all(out).map_err(|e| ScidaError::io(out, e))?;
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg).expect("config serializes"))
        .map_err(|e| ScidaError::io(out.join("config.json"), e))?;
    while !trainer.finished() {
        let r = trainer.run_epoch()?;
        eprintln!(
            "epoch {:3}  wfl {:.4}  dis {}  selfcorr {}  churn {:.4}  of1 {}",
            r.epoch,
            r.wfl,
            r.dis.map_or("-".into(), |v| format!("{v:.4}")),
            r.selfcorr.map_or("-".into(), |v| format!("{v:.4}")),
            r.churn,
            r.all.as_ref().map_or("-".into(), |m| format!("{:.4}", m.of1)),
        );
        checkpoint::save_epoch(&ckpt_dir, &cfg, &trainer.state)?;
    }
    let state = trainer.state;
    let summary = RunSummary {
        config: cfg,
        categories: data.source.categories.clone(),
        log: state.log,
        correlation: state.correlation,
    };
    summary.save(&out.join("run.json"))?;
    emit_report(&summary, &out.join("report"))?;
    println!("{}", serde_json::to_string_pretty(&summary.log.last()).expect("record serializes"));
    Ok(())
}

fn eval(ckpt: &Path, data: &Path) -> CliResult {
    let (cfg, state) = checkpoint::load(ckpt)?;
    let dataset = load_mai(data, Split::Multi, cfg.side)?;
    if dataset.num_classes() != cfg.num_classes {
        return Err(Failure::Config(format!(
            "data has {} categories, checkpoint expects {}",
            dataset.num_classes(),
            cfg.num_classes
        )));
    }
    let [all, top3] = evaluate_run(&state.model, &dataset, cfg.eval_threshold)?;
    let v = serde_json::json!({ "all": all, "top3": top3 });
    println!("{}", serde_json::to_string_pretty(&v).expect("report serializes"));
    Ok(())
}

fn ablate(config: &Path, deltas: &[f64], out: &Path) -> CliResult {
    let cfg = read_config(config)?;
    let data = TrainData::load(&cfg)?;
    let table = ablate_delta(&cfg, deltas, &data);
    emit_ablation(&table, out)?;
    print!("{}", table.to_csv());
    Ok(())
}

fn report(run: &Path) -> CliResult {
    let summary = RunSummary::load(&run.join("run.json"))?;
    emit_report(&summary, &run.join("report"))?;
    println!("report written to {}", run.join("report").display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenSynth { config, out } => gen_synth(config, out),
        Command::Train {
            config,
            out,
            mode,
            resume,
        } => train(config, out, *mode, resume.as_deref()),
        Command::Eval { ckpt, data } => eval(ckpt, data),
        Command::AblateDelta { config, deltas, out } => ablate(config, deltas, out),
        Command::Report { run } => report(run),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
