use std::fs;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use lgc_sed::dataset::{generate_corpus, CorpusParams};
use lgc_sed::train::{prepare_data, Checkpoint, MetricsLog, RunConfig, Trainer};
use lgc_sed::{Error, Result};

/// Semi-supervised sound event detection. Set LGC_LOG (error, warn, info,
/// debug) to control log output.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `out_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint's teacher on the validation split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// Also append the scores as one JSON line to this file.
        #[arg(long)]
        jsonl: Option<PathBuf>,
    },
    /// Write a synthetic corpus: WAV files, manifest, ground truth and
    /// DESED-style TSV metadata.
    GenerateCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        strong: usize,
        #[arg(long, default_value_t = 40)]
        weak: usize,
        #[arg(long, default_value_t = 120)]
        unlabeled: usize,
        #[arg(long, default_value_t = 60)]
        validation: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10.0)]
        clip_len: f64,
    },
    /// Write per-frame teacher outputs on the validation split as JSONL.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_trainer(path: &PathBuf) -> Result<Trainer> {
    let ckpt = Checkpoint::load(path)?;
    let data = prepare_data(&ckpt.config, Some(ckpt.normalizer.clone()))?;
    Trainer::resume(ckpt, Arc::new(data))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out, resume } => {
            let (mut trainer, out_dir) = match resume {
                Some(ckpt_path) => {
                    let mut ckpt = Checkpoint::load(&ckpt_path)?;
                    if let Some(out) = out {
                        ckpt.config.out_dir = Some(out);
                    }
                    let out_dir = ckpt.config.out_dir.clone();
                    let data = prepare_data(&ckpt.config, Some(ckpt.normalizer.clone()))?;
                    (Trainer::resume(ckpt, Arc::new(data))?, out_dir)
                }
                None => {
                    let mut cfg = RunConfig::load(&config)?;
                    if let Some(out) = out {
                        cfg.out_dir = Some(out);
                    }
                    let out_dir = cfg.out_dir.clone();
                    if let Some(dir) = &out_dir {
                        fs::create_dir_all(dir)?;
                        fs::write(dir.join("config.toml"), cfg.to_toml_string()?)?;
                    }
                    let data = prepare_data(&cfg, None)?;
                    (Trainer::new(cfg, Arc::new(data))?, out_dir)
                }
            };
            let mut log = match &out_dir {
                Some(dir) => MetricsLog::to_file(dir.join("metrics.jsonl"))?,
                None => MetricsLog::in_memory(),
            };
            let summary = trainer.run(&mut log)?;
            print!("{}", summary.final_scores);
            println!("best event macro F1 {:.4} at epoch {}", summary.best_event_f1, summary.best_epoch);
            if let Some(dir) = &out_dir {
                fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
            }
        }
        Command::Evaluate { checkpoint, split, jsonl } => {
            if split != "val" {
                return Err(Error::InvalidArgument(format!("unknown split {split:?}; only \"val\" is scored")));
            }
            let trainer = load_trainer(&checkpoint)?;
            let scores = trainer.evaluate()?;
            print!("{scores}");
            if let Some(path) = jsonl {
                let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
                let rec = serde_json::json!({
                    "checkpoint": checkpoint,
                    "split": split,
                    "step": trainer.state().step,
                    "frame_f1": scores.frame_f1,
                    "event_f1": scores.event_f1,
                    "frame_counts": scores.frame_counts,
                    "event_counts": scores.event_counts,
                });
                writeln!(f, "{rec}")?;
            }
        }
        Command::GenerateCorpus { out, strong, weak, unlabeled, validation, classes, seed, clip_len } => {
            let params = CorpusParams {
                n_strong: strong,
                n_weak: weak,
                n_unlabeled: unlabeled,
                n_validation: validation,
                n_classes: classes,
                seed,
                clip_len_s: clip_len,
                ..CorpusParams::default()
            };
            let corpus = generate_corpus(&params)?;
            corpus.write_to_dir(&out)?;
            corpus.write_desed_tsv(&out)?;
            println!("wrote {} clips to {}", corpus.clips.len(), out.display());
        }
        Command::ExportEmbeddings { checkpoint, out } => {
            let trainer = load_trainer(&checkpoint)?;
            let rows = trainer.export_embeddings()?;
            let mut w = BufWriter::new(fs::File::create(&out)?);
            for r in &rows {
                writeln!(w, "{}", serde_json::to_string(r)?)?;
            }
            w.flush()?;
            println!("wrote {} frames to {}", rows.len(), out.display());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LGC_LOG", "info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
