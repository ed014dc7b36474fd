use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use ifam_core::databench::{flops_estimate, generate, DatasetSpec, Split};
use ifam_core::interventions::InterventionPlan;
use ifam_core::trainer::{fit_with, TrainConfig};
use ifam_core::vit::ModelConfig;
use log::info;
use serde::Serialize;

use crate::checkpoint::{self, Dtype};
use crate::error::{CliError, Result};
use crate::pipeline::{self, read_json, Metric};
use crate::{dataset_io, pngio, service};

#[derive(Debug, Parser)]
#[command(name = "ifam", version, about = "Two-stage masked ViT: data, training, evaluation and interventions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark from a dataset spec.
    Gen {
        /// Dataset spec JSON; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint plus a JSON-lines epoch log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Epoch log path; defaults to `<out>.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = DtypeArg::F64)]
        dtype: DtypeArg,
    },
    /// Evaluate a checkpoint on one split and print the metrics report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test-iid")]
        split: String,
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Accepted for uniformity; evaluation is deterministic.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-sample predictions as JSON lines.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Build an intervention plan by leave-one-out part removal and/or token removal.
    Intervene {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Split scored by leave-one-out and by the final report.
        #[arg(long, default_value = "val")]
        split: String,
        /// Run leave-one-out part removal.
        #[arg(long)]
        loo: bool,
        /// Keep dropping parts while the metric improves.
        #[arg(long)]
        repeated: bool,
        /// Token-removal percentile, calibrated on the training split.
        #[arg(long)]
        q: Option<f64>,
        #[arg(long, value_enum, default_value_t = Metric::Wga)]
        metric: Metric,
        /// Base plan to extend.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Where to write the plan JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write indexed-colour part maps, one PNG per image.
    ExportMasks {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test-iid")]
        split: String,
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Analytic compute estimate of one transformer forward pass.
    Flops {
        #[arg(long, value_enum, conflicts_with = "config")]
        preset: Option<Preset>,
        /// Model config JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Live patch tokens plus the class token; defaults to every patch.
        #[arg(long)]
        tokens: Option<usize>,
    },
    /// Serve the HTTP API over a checkpoint and dataset.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = service::DEFAULT_PORT)]
        port: u16,
        /// Directory of static files served at `/`.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
        /// Directory persisting named plans.
        #[arg(long)]
        plans: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DtypeArg {
    F64,
    F32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// ViT-B/16 at 224 px.
    Vitb,
}

fn parse_split(s: &str) -> Result<Split> {
    s.parse().map_err(|e: ifam_core::Error| CliError::Usage(e.to_string()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

fn print_json(out: &mut dyn Write, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    writeln!(out, "{text}").map_err(|e| CliError::io("writing stdout", e))
}

fn load_plan(path: Option<&Path>) -> Result<InterventionPlan> {
    path.map_or_else(|| Ok(InterventionPlan::empty()), pipeline::read_plan)
}

#[derive(Serialize)]
struct InterventionOutput {
    plan: InterventionPlan,
    #[serde(skip_serializing_if = "Option::is_none")]
    thresholds: Option<ifam_core::interventions::ThresholdTable>,
    #[serde(skip_serializing_if = "Option::is_none")]
    loo: Option<ifam_core::interventions::LooReport>,
    split: Split,
    before: ifam_core::databench::MetricsReport,
    after: ifam_core::databench::MetricsReport,
}

/// Executes one parsed command, writing its primary output to `out`.
pub fn execute(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Gen { config, seed, out: dir } => {
            let mut spec: DatasetSpec = match config {
                Some(p) => read_json(&p, "dataset spec")?,
                None => DatasetSpec::default(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            let data = generate(&spec)?;
            dataset_io::save(&data, &dir)?;
            info!("wrote {} training samples to {}", data.train.len(), dir.display());
        }
        Command::Train { config, data, seed, out: path, log, dtype } => {
            let mut cfg: TrainConfig = match config {
                Some(p) => read_json(&p, "training config")?,
                None => TrainConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let dataset = dataset_io::load(&data)?;
            let m = &cfg.model.model;
            if m.n_classes != dataset.spec.n_classes || m.image_size != dataset.spec.image_size {
                return Err(CliError::Usage(format!(
                    "model expects {} classes at {} px, dataset has {} at {} px",
                    m.n_classes, m.image_size, dataset.spec.n_classes, dataset.spec.image_size
                )));
            }
            let result = fit_with(&dataset, &cfg, |r| {
                info!("epoch {} val aa {:.4} wga {:.4}", r.epoch, r.val.aa, r.val.wga)
            })?;
            let dtype = match dtype {
                DtypeArg::F64 => Dtype::F64,
                DtypeArg::F32 => Dtype::F32,
            };
            checkpoint::save(&result.model, &path, dtype)?;
            let log_path = log.unwrap_or_else(|| {
                let mut p = path.clone().into_os_string();
                p.push(".log.jsonl");
                p.into()
            });
            std::fs::write(&log_path, result.log_jsonl()).map_err(|e| CliError::io(format!("writing {}", log_path.display()), e))?;
        }
        Command::Eval { checkpoint: ckpt, data, split, plan, seed: _, out: dest, predictions } => {
            let split = parse_split(&split)?;
            let model = checkpoint::load(&ckpt)?;
            let dataset = dataset_io::load(&data)?;
            let plan = load_plan(plan.as_deref())?;
            let report = pipeline::evaluate(&model, &dataset, split, &plan)?;
            if let Some(p) = predictions {
                let mut lines = String::new();
                for pred in model.predict_all(dataset.split(split), &plan)? {
                    lines.push_str(&serde_json::to_string(&pred).expect("serializable"));
                    lines.push('\n');
                }
                std::fs::write(&p, lines).map_err(|e| CliError::io(format!("writing {}", p.display()), e))?;
            }
            if let Some(p) = dest {
                write_json(&p, &report)?;
            }
            print_json(out, &report)?;
        }
        Command::Intervene { checkpoint: ckpt, data, split, loo, repeated, q, metric, plan, seed: _, out: dest } => {
            if !loo && q.is_none() {
                return Err(CliError::Usage("intervene needs --loo and/or --q".into()));
            }
            let split = parse_split(&split)?;
            let model = checkpoint::load(&ckpt)?;
            let dataset = dataset_io::load(&data)?;
            let base = load_plan(plan.as_deref())?;
            let mut current = base.clone();
            let thresholds = match q {
                Some(q) => {
                    let t = pipeline::calibrate(&model, &dataset, Split::Train, q)?;
                    current = current.with_table(&t);
                    Some(t)
                }
                None => None,
            };
            let loo = if loo {
                let r = pipeline::loo(&model, &dataset, split, metric, &current, repeated)?;
                current = r.plan.clone();
                Some(r)
            } else {
                None
            };
            let output = InterventionOutput {
                before: pipeline::evaluate(&model, &dataset, split, &base)?,
                after: pipeline::evaluate(&model, &dataset, split, &current)?,
                plan: current,
                thresholds,
                loo,
                split,
            };
            if let Some(p) = dest {
                write_json(&p, &output.plan)?;
            }
            print_json(out, &output)?;
        }
        Command::ExportMasks { checkpoint: ckpt, data, split, plan, out: dir } => {
            let split = parse_split(&split)?;
            let model = checkpoint::load(&ckpt)?;
            let dataset = dataset_io::load(&data)?;
            let plan = load_plan(plan.as_deref())?;
            let cfg = model.model_config();
            std::fs::create_dir_all(&dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
            for s in dataset.split(split) {
                let pred = model.predict(&s.image, &plan)?;
                let parts = final_parts(&pred).ok_or_else(|| CliError::Usage("the dense baseline has no part maps".into()))?;
                let path = dir.join(format!("{:05}_parts.png", s.id));
                std::fs::write(&path, pngio::encode_part_map(&parts, cfg.grid(), cfg.patch_size))
                    .map_err(|e| CliError::io(format!("writing {}", path.display()), e))?;
            }
        }
        Command::Flops { preset, config, tokens } => {
            let cfg: ModelConfig = match (preset, config) {
                (Some(Preset::Vitb), _) => ModelConfig::vit_b(),
                (None, Some(p)) => read_json(&p, "model config")?,
                (None, None) => return Err(CliError::Usage("flops needs --preset or --config".into())),
            };
            let live = match tokens {
                Some(0) => return Err(CliError::Usage("--tokens counts the class token and must be positive".into())),
                Some(t) => t - 1,
                None => cfg.n_patches(),
            };
            print_json(out, &flops_estimate(&cfg, live))?;
        }
        Command::Serve { checkpoint: ckpt, data, port, static_dir, plans } => {
            let model = checkpoint::load(&ckpt)?;
            let dataset = dataset_io::load(&data)?;
            let state = service::AppState::new(model, dataset, plans)?;
            let runtime = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .map_err(|e| CliError::io("starting runtime", e))?;
            runtime.block_on(service::serve(state, port, static_dir))?;
        }
    }
    Ok(())
}

/// Part index per token after token removal (removed tokens become background).
pub fn final_parts(pred: &ifam_core::model::Prediction) -> Option<Vec<usize>> {
    let mut parts = pred.parts.clone()?;
    for &i in &pred.removed_tokens {
        parts[i] = 0;
    }
    Some(parts)
}
