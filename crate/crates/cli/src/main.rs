use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flexcoupler::experiments::{run_scheme, run_sweep_to, ExperimentConfig, Scale, Scheme};
use flexcoupler::posopt::{adapt, agent_labels, pretrain, run_agent, AgentRun};
use flexcoupler::scenario::generate_scenario;
use flexcoupler::rng;
use flexcoupler::surrogate::{holdout_check, read_model, write_model, LabeledDataset, Provenance};
use flexcoupler::Error;
use serde_json::json;

#[derive(Parser)]
#[command(name = "flexcoupler", version, about = "Flexible-coupler array simulation and optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (TOML). Defaults to the preset chosen by --scale.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the configured scheme.
    #[arg(long)]
    scheme: Option<Scheme>,
    /// Preset used when no configuration file is given.
    #[arg(long, default_value = "desk")]
    scale: Scale,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scheme on one seed.
    Run(Common),
    /// Run the configured sweep and write a CSV.
    Sweep(Common),
    /// Generate a labeled dataset.
    Labelgen {
        #[command(flatten)]
        common: Common,
        /// Collect the fine-tuning set in the operating (drifted) scenario.
        #[arg(long)]
        finetune: bool,
    },
    /// Pretrain a surrogate on a labeled dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Also train on this leading share of the rows and report holdout error on the rest.
        #[arg(long)]
        holdout: Option<f64>,
    },
    /// Fine-tune a pretrained surrogate.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the two-timescale agent and write its report.
    Report {
        #[command(flatten)]
        common: Common,
        /// Start from this pretrained surrogate instead of pretraining.
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &c.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::preset(c.scale),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(scheme) = c.scheme {
        cfg.scheme = scheme;
    }
    cfg.validate()?;
    // Record the resolved configuration next to the outputs.
    let (mut w, _) = create(&c.out, "config.toml")?;
    w.write_all(cfg.to_toml_string()?.as_bytes())?;
    w.flush()?;
    Ok(cfg)
}

fn create(dir: &Path, name: &str) -> Result<(BufWriter<File>, PathBuf), Error> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    Ok((BufWriter::new(File::create(&path)?), path))
}

fn read_dataset(path: &Path) -> Result<LabeledDataset, Error> {
    LabeledDataset::read(BufReader::new(File::open(path)?))
}

fn execute(cli: Cli) -> Result<serde_json::Value, Error> {
    match cli.command {
        Command::Run(c) => {
            let cfg = load_config(&c)?;
            let o = run_scheme(&cfg, cfg.seed)?;
            let record = json!({
                "scheme": o.scheme.name(),
                "seed": o.seed,
                "rate": o.rate,
                "positions": o.positions,
                "patterns": o.choices,
                "online_calls": o.calls,
                "online_seconds": o.seconds,
            });
            let (mut w, path) = create(&c.out, &format!("run_{}_{}.json", o.scheme.name(), o.seed))?;
            writeln!(w, "{}", serde_json::to_string_pretty(&record).expect("serializable record"))?;
            w.flush()?;
            Ok(json!({ "status": "ok", "output": path, "result": record }))
        }
        Command::Sweep(c) => {
            let cfg = load_config(&c)?;
            let (rows, path) = run_sweep_to(&cfg, &c.out)?;
            Ok(json!({ "status": "ok", "output": path, "rows": rows.len() }))
        }
        Command::Labelgen { common: c, finetune } => {
            let cfg = load_config(&c)?;
            let (scenario, phase, name) = if finetune {
                (cfg.online_scenario(cfg.seed)?, Provenance::Finetune, "labels_finetune.txt")
            } else {
                (generate_scenario(&cfg.scenario, cfg.seed)?, Provenance::Pretrain, "labels_pretrain.txt")
            };
            let optimizer = cfg.pattern_optimizer()?;
            let data = agent_labels(&cfg, &scenario, &optimizer, phase, cfg.seed)?;
            let (mut w, path) = create(&c.out, name)?;
            data.write(&mut w)?;
            w.flush()?;
            Ok(json!({ "status": "ok", "output": path, "rows": data.len(), "solver_calls": optimizer.calls() }))
        }
        Command::Train { common: c, data, holdout } => {
            let cfg = load_config(&c)?;
            let data = read_dataset(&data)?;
            let out = pretrain(&cfg, &data, cfg.seed)?;
            let (mut w, path) = create(&c.out, "model.bin")?;
            write_model(&out.model, &mut w)?;
            w.flush()?;
            let mut record = json!({
                "status": "ok",
                "output": path,
                "final_loss": out.losses.last(),
                "mse": out.model.mse(&data)?,
            });
            if let Some(fraction) = holdout {
                let r = holdout_check(&data, &cfg.training, fraction, rng::derive(cfg.seed, 2))?;
                record["holdout"] = json!({
                    "train_mse": r.train_mse,
                    "holdout_mse": r.holdout_mse,
                    "mean_predictor_mse": r.baseline_mse,
                    "ratio": r.ratio,
                    "limit": r.limit,
                    "within_limit": r.within_limit,
                });
            }
            Ok(record)
        }
        Command::Finetune { common: c, model, data } => {
            let cfg = load_config(&c)?;
            let model = read_model(BufReader::new(File::open(&model)?))?;
            let data = read_dataset(&data)?;
            let stale = model.mse(&data)?;
            let out = adapt(&cfg, &model, &data, cfg.seed)?;
            let (mut w, path) = create(&c.out, "model_finetuned.bin")?;
            write_model(&out.model, &mut w)?;
            w.flush()?;
            Ok(json!({ "status": "ok", "output": path, "mse_before": stale, "mse_after": out.model.mse(&data)? }))
        }
        Command::Report { common: c, model } => {
            let cfg = load_config(&c)?;
            let pretrained = match &model {
                Some(p) => Some(read_model(BufReader::new(File::open(p)?))?),
                None => None,
            };
            let base = generate_scenario(&cfg.scenario, cfg.seed)?;
            let online = cfg.online_scenario(cfg.seed)?;
            let run = AgentRun {
                pretrain: &base,
                online: &online,
                fine_tune: cfg.sampling.finetune_rows > 0,
                pretrained: pretrained.as_ref(),
            };
            let out = run_agent(&cfg, run, cfg.seed)?;
            let (mut w, path) = create(&c.out, &format!("report_{}.txt", cfg.seed))?;
            w.write_all(out.report.to_text().as_bytes())?;
            w.flush()?;
            Ok(json!({ "status": "ok", "output": path, "rate": out.report.rate }))
        }
    }
}

fn error_record(kind: &str, message: &str) -> String {
    json!({ "status": "error", "kind": kind, "message": message }).to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            eprintln!("{}", error_record("usage", &e.to_string()));
            return ExitCode::from(2);
        }
    };
    match execute(cli) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_record(e.kind(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
