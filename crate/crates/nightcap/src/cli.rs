//! `nightcap` command line.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use nightcap_core::attention::AttentionMode;
use nightcap_core::checkpoint::{load_checkpoint, save_checkpoint};
use nightcap_core::dataset::{export_corpus, load_coco_style, load_image, make_corpus, make_noisy_corpus, Darkness, DEFAULT_DARK_FACTOR};
use nightcap_core::gradcheck;
use nightcap_core::inference::{caption_auto, caption_interactive, write_trace};
use nightcap_core::model::ModelConfig;
use nightcap_core::trainer::{compare_environments, parse_template_caption, train, EnvironmentCorpora, TrainConfig};

use crate::service::{self, AppState};

#[derive(Debug, Parser)]
#[command(name = "nightcap", version, about = "Interactive captioning of low-light images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DarknessArg {
    Bright,
    Dark,
    Mixed,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Bahdanau,
    Dot,
}

impl From<ModeArg> for AttentionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Bahdanau => AttentionMode::Bahdanau,
            ModeArg::Dot => AttentionMode::Dot,
        }
    }
}

#[derive(Debug, Clone, clap::Args)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 5.0)]
    pub clip: f64,
    #[arg(long, value_enum, default_value = "bahdanau")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Share of training samples that carry a guide word.
    #[arg(long, default_value_t = 0.5)]
    pub guided_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    pub heldout: f64,
}

impl OptimArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            grad_clip_norm: self.clip,
            seed: self.seed,
            model: ModelConfig {
                attention_mode: self.mode.into(),
                ..ModelConfig::default()
            },
            guided_step_fraction: self.guided_fraction,
            heldout_fraction: self.heldout,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic two-object corpus as PNGs plus a manifest.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, value_enum, default_value = "bright")]
        darkness: DarknessArg,
        #[arg(long, default_value_t = DEFAULT_DARK_FACTOR)]
        factor: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Add Gaussian sensor noise (σ = 0.01) to darkened scenes.
        #[arg(long)]
        noise: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a JSON-lines manifest; writes a checkpoint and a loss-curve CSV.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss-curve CSV path (default: the checkpoint path with a .csv extension).
        #[arg(long)]
        curve: Option<PathBuf>,
        /// Minimum word count for the vocabulary (default: 1 for template captions, 5 otherwise).
        #[arg(long)]
        min_count: Option<usize>,
        #[command(flatten)]
        optim: OptimArgs,
    },
    /// Train on bright, dark and mixed corpora and report the loss gaps.
    Compare {
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = DEFAULT_DARK_FACTOR)]
        factor: f64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        optim: OptimArgs,
    },
    /// Caption one image, optionally completing a sentence from a guide word.
    Caption {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        guide: Option<String>,
        /// Directory for trace.json and per-token overlay PNGs.
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Finite-difference check of every operation and the full model loss.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Serve the HTTP API for one checkpoint.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
    },
}

fn darkness(arg: DarknessArg, factor: f64) -> Darkness {
    match arg {
        DarknessArg::Bright => Darkness::Bright,
        DarknessArg::Dark => Darkness::Dark(factor),
        DarknessArg::Mixed => Darkness::Mixed(factor),
    }
}

fn default_curve_path(out: &Path) -> PathBuf {
    out.with_extension("csv")
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            n,
            darkness: d,
            factor,
            seed,
            noise,
            out,
        } => {
            let regime = darkness(d, factor);
            let corpus = if noise {
                make_noisy_corpus(n, regime, seed, 0.01)?
            } else {
                make_corpus(n, regime, seed)?
            };
            export_corpus(&corpus, &out)?;
            println!("wrote {n} {} scenes to {}", regime.label(), out.display());
        }
        Command::Train {
            manifest,
            out,
            curve,
            min_count,
            optim,
        } => {
            let corpus = load_coco_style(&manifest)?;
            let templated = corpus
                .iter()
                .flat_map(|c| &c.captions)
                .all(|c| parse_template_caption(c).is_some());
            let config = TrainConfig {
                min_count: min_count.unwrap_or(if templated { 1 } else { 5 }),
                ..optim.config()
            };
            info!("training on {} images from {}", corpus.len(), manifest.display());
            let outcome = train(&config, &corpus)?;
            let id = save_checkpoint(&outcome.model, &out)?;
            let curve_path = curve.unwrap_or_else(|| default_curve_path(&out));
            outcome.curve.write_csv(&curve_path)?;
            println!(
                "model {id}: final train loss {:.4}{}",
                outcome.curve.final_train(),
                outcome
                    .curve
                    .final_heldout()
                    .map(|h| format!(", held-out {h:.4}"))
                    .unwrap_or_default()
            );
            println!("checkpoint {} curve {}", out.display(), curve_path.display());
        }
        Command::Compare { n, factor, out, optim } => {
            let seed = optim.seed;
            let bright = make_corpus(n, Darkness::Bright, seed)?;
            let dark = make_corpus(n, Darkness::Dark(factor), seed)?;
            let mixed = make_corpus(n, Darkness::Mixed(factor), seed)?;
            let cmp = compare_environments(
                &optim.config(),
                &EnvironmentCorpora {
                    bright: &bright,
                    dark: &dark,
                    mixed: &mixed,
                },
            )?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for run in &cmp.report.runs {
                run.curve.write_csv(&out.join(format!("{}.csv", run.environment)))?;
            }
            let report = out.join("report.json");
            std::fs::write(&report, serde_json::to_string_pretty(&cmp.report)?)
                .with_context(|| format!("writing {}", report.display()))?;
            for run in &cmp.report.runs {
                println!(
                    "{:<7} train {:.4} held-out {}",
                    run.environment,
                    run.final_train_loss,
                    run.final_heldout_loss.map(|h| format!("{h:.4}")).unwrap_or_else(|| "-".into())
                );
            }
            for g in &cmp.report.gaps {
                println!("gap {} vs {}: {:.4} (train {:.4})", g.environment, g.reference, g.relative_gap, g.train_relative_gap);
            }
        }
        Command::Caption {
            checkpoint,
            image,
            guide,
            trace_out,
        } => {
            let loaded = load_checkpoint(&checkpoint)?;
            let pixels = load_image(&image)?;
            let result = match guide.as_deref() {
                Some(g) => caption_interactive(&loaded.model, &pixels, g)?,
                None => caption_auto(&loaded.model, &pixels)?,
            };
            if result.degraded_guide {
                warn!("guide word is not in the vocabulary; decoded with <unk>");
            }
            println!("{}", result.caption);
            if let Some(dir) = trace_out {
                write_trace(&result.trace, &pixels, &dir)?;
            }
        }
        Command::Gradcheck { seed } => {
            let start = std::time::Instant::now();
            let report = gradcheck::run(seed)?;
            for c in report.failures() {
                eprintln!("FAIL {} ({} entries): max relative error {:.3e}", c.name, c.entries_checked, c.max_relative_error);
            }
            println!(
                "{} cases, worst relative error {:.3e} (tolerance {:.0e}), {:.1}s",
                report.cases.len(),
                report.worst(),
                report.tolerance,
                start.elapsed().as_secs_f64()
            );
            if !report.passed() {
                bail!("gradient check failed");
            }
        }
        Command::Serve { checkpoint, bind } => {
            let loaded = load_checkpoint(&checkpoint)?;
            let state = Arc::new(AppState {
                model: loaded.model,
                model_id: loaded.model_id,
            });
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(service::serve(state, bind))?;
        }
    }
    Ok(())
}
