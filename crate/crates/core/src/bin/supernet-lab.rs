use std::fs;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use supernet_lab::arch_space::ArchSpec;
use supernet_lab::evaluator::{consistency_report, read_records, train_standalone, RecordField};
use supernet_lab::harness::{emit_plots, ingest_dataset, output_root, run_experiment, ExperimentConfig};
use supernet_lab::proxies::{score_proxy, ProxyKind, ZenConfig};
use supernet_lab::supernet::SupernetConfig;
use supernet_lab::trainer::train_supernet;
use supernet_lab::{Error, Result};

/// Weight-sharing supernet lab: training, proxies and ranking consistency.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one supernet as described by an experiment config.
    TrainSupernet {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the first seed of the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one architecture from scratch and print its record as JSON.
    TrainStandalone {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        arch: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to the config's stand-alone epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Print one proxy score per architecture.
    ScoreProxy {
        #[arg(long)]
        kind: ProxyKind,
        #[arg(long, required = true, num_args = 1..)]
        arch: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Supernet of this experiment config; the toy space otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Correlate two fields of a JSON-lines record file.
    EvalConsistency {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        x: RecordField,
        #[arg(long)]
        y: RecordField,
    },
    /// Run a sweep; exits non-zero if any cell fails.
    RunExperiment {
        #[arg(long)]
        config: PathBuf,
    },
    /// Scatter plots for a record file.
    Plot {
        #[arg(long)]
        records: PathBuf,
        /// Defaults to `plots/` next to the record file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::TrainSupernet { config, seed } => {
            let cfg = ExperimentConfig::load(&config)?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let data = ingest_dataset(&cfg.dataset)?;
            let dir = cfg.resolve_output(&output_root()).join(format!("supernet-seed{seed}"));
            fs::create_dir_all(&dir).map_err(|e| Error::Io {
                path: dir.clone(),
                source: e,
            })?;
            let log_path = dir.join("train_log.jsonl");
            let mut log = BufWriter::new(fs::File::create(&log_path).map_err(|e| Error::Io {
                path: log_path.clone(),
                source: e,
            })?);
            let train = supernet_lab::trainer::TrainConfig { seed, ..cfg.train.clone() };
            let ckpt = dir.join("supernet.ckpt");
            let out = train_supernet(&train, &cfg.supernet, &data.train, Some(&mut log), Some(&ckpt))?;
            for e in &out.epochs {
                eprintln!(
                    "epoch {:>3}  lr {:.5}  lambda {:.3}  loss {:.4}  aborted {}",
                    e.epoch, e.lr, e.lambda, e.label_loss, e.aborted_steps
                );
            }
            println!("{}", ckpt.display());
            Ok(out.epochs.iter().all(|e| e.aborted_steps == 0))
        }
        Command::TrainStandalone {
            config,
            arch,
            seed,
            epochs,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let arch = ArchSpec::decode(&arch, &cfg.supernet.space)?;
            let data = ingest_dataset(&cfg.dataset)?;
            let epochs = epochs.unwrap_or(cfg.evaluation.standalone_epochs);
            let r = train_standalone(&arch, &cfg.train, epochs, &cfg.supernet, &data.train, &data.val, seed)?;
            println!("{}", serde_json::to_string(&r)?);
            Ok(r.failed.is_none())
        }
        Command::ScoreProxy {
            kind,
            arch,
            seed,
            config,
        } => {
            let (net, zen): (SupernetConfig, ZenConfig) = match config {
                Some(p) => {
                    let cfg = ExperimentConfig::load(&p)?;
                    (cfg.supernet, cfg.evaluation.zen)
                }
                None => (
                    SupernetConfig::new(supernet_lab::arch_space::SpaceConfig::toy()),
                    ZenConfig::default(),
                ),
            };
            let mut ok = true;
            for a in arch {
                let spec = ArchSpec::decode(&a, &net.space)?;
                let score = score_proxy(kind, &spec, &net, seed, &zen)?;
                match &score.diagnostic {
                    Some(d) => {
                        ok = false;
                        println!("{a}\t{kind}\t{}\t# {d}", score.value);
                    }
                    None => println!("{a}\t{kind}\t{}", score.value),
                }
            }
            Ok(ok)
        }
        Command::EvalConsistency { records, x, y } => {
            let recs = read_records(&records)?;
            let report = consistency_report(&recs, x, y)?;
            println!("{report}");
            Ok(true)
        }
        Command::RunExperiment { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = cfg.resolve_output(&output_root());
            let result = run_experiment(&cfg, &dir, &mut |m| eprintln!("{m}"))?;
            for c in &result.manifest.cells {
                match (&c.error, c.headline_pearson) {
                    (Some(e), _) => println!("{}\tFAILED\t{e}", c.cell),
                    (None, Some(p)) => println!("{}\t{p:.2}", c.cell),
                    (None, None) => println!("{}\tundefined", c.cell),
                }
            }
            println!("{}", dir.join("manifest.json").display());
            Ok(result.manifest.all_ok())
        }
        Command::Plot { records, out } => {
            let recs = read_records(&records)?;
            let out = out.unwrap_or_else(|| {
                records
                    .parent()
                    .map(|p| p.join("plots"))
                    .unwrap_or_else(|| PathBuf::from("plots"))
            });
            let summary = emit_plots(&recs, &out)?;
            for p in &summary.written {
                println!("{}", p.display());
            }
            for s in &summary.skipped {
                eprintln!("skipped: {s}");
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
