//! Command-line driver. Exit codes: 0 success, 1 configuration error,
//! 2 dataset or checkpoint error, 3 numeric failure.

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;
use vtadl_core::checkpoint::Checkpoint;
use vtadl_core::data::{pnm, DatasetSpec, Sample};
use vtadl_core::error::Error;
use vtadl_core::eval;
use vtadl_core::metrics::{self, BinaryMask, ProCurve};
use vtadl_core::model::{Model, ModelConfig};
use vtadl_core::trainer::{self, Adam, TrainConfig};

#[derive(Parser)]
#[command(name = "vtadl", version, about = "Patch-transformer anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON run configuration.
    Train {
        /// Run configuration (model, trainer, dataset).
        #[arg(long)]
        config: PathBuf,
        /// Output directory for checkpoint, loss log, and summary.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the configuration.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a dataset and write metrics.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset specification (JSON document).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Restrict to one metric; all applicable metrics by default.
        #[arg(long)]
        metric: Option<MetricKind>,
    },
    /// Write the anomaly heatmap for one image and print its global score.
    Heatmap {
        #[arg(long)]
        ckpt: PathBuf,
        /// Input image (binary PGM or PPM).
        #[arg(long)]
        image: PathBuf,
        /// Output heatmap path; the raw grid and JSON sidecar are written
        /// next to it with .raw and .json extensions.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MetricKind {
    Pro,
    Auc,
    Prauc,
}

/// Full run configuration. Unknown keys are rejected; absent sections fall
/// back to the built-in defaults.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    #[serde(default)]
    model: ModelConfig,
    #[serde(default)]
    train: TrainConfig,
    dataset: DatasetSpec,
}

#[derive(Serialize)]
struct TrainSummary {
    final_loss: f64,
    epochs: usize,
    wall_time_s: f64,
}

#[derive(Serialize)]
struct MetricsOut {
    #[serde(skip_serializing_if = "Option::is_none")]
    pro_capped_auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    roc_auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pr_auc: Option<f64>,
    n_images: usize,
}

struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        let code = match err {
            Error::Config(_) | Error::Json(_) => 1,
            Error::Numeric(_) | Error::NonFiniteLoss { .. } => 3,
            _ => 2,
        };
        Failure {
            code,
            message: err.to_string(),
        }
    }
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train { config, out, seed } => cmd_train(&config, &out, seed),
        Command::Eval {
            ckpt,
            data,
            out,
            metric,
        } => cmd_eval(&ckpt, &data, &out, metric),
        Command::Heatmap { ckpt, image, out } => cmd_heatmap(&ckpt, &image, &out),
    };
    if let Err(failure) = outcome {
        eprintln!("error: {}", failure.message);
        std::process::exit(failure.code);
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

fn write_out(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    std::fs::write(path, bytes).map_err(|e| Failure {
        code: 2,
        message: format!("{}: {e}", path.display()),
    })
}

fn cmd_train(config_path: &Path, out_dir: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let start = Instant::now();
    let mut run: RunConfig = read_json(config_path)?;
    if let Some(seed) = seed {
        run.train.seed = seed;
    }
    run.model.validate().map_err(Failure::from)?;
    let dataset = run.dataset.load().map_err(Failure::from)?;

    std::fs::create_dir_all(out_dir).map_err(|e| Failure {
        code: 2,
        message: format!("{}: {e}", out_dir.display()),
    })?;

    let mut model = Model::<f32>::new(run.model.clone(), run.train.seed).map_err(Failure::from)?;
    let mut opt = Adam::new(&run.train, &trainer::param_sizes(&model));
    let (train_split, val_split) = trainer::split_validation(&dataset.train, run.train.val_fraction);
    let log = trainer::train(&mut model, &mut opt, train_split, &run.train, 0)
        .map_err(Failure::from)?;

    let norm_stats = if val_split.is_empty() {
        None
    } else {
        Some(eval::compute_norm_stats(&model, val_split).map_err(Failure::from)?)
    };
    let ckpt = Checkpoint::capture(&model, &opt, &run.train, run.train.epochs, norm_stats);
    ckpt.save(&out_dir.join("ckpt.vtadl")).map_err(Failure::from)?;
    write_out(
        &out_dir.join("loss.csv"),
        trainer::loss_log_csv(&log).as_bytes(),
    )?;
    let summary = TrainSummary {
        final_loss: log.last().map(|l| l.loss.total).unwrap_or(f64::NAN),
        epochs: run.train.epochs,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    write_out(
        &out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)
            .map_err(|e| Failure::config(e.to_string()))?
            .as_bytes(),
    )?;
    Ok(())
}

fn all_false_mask(sample: &Sample) -> BinaryMask {
    let s = sample.image.shape();
    BinaryMask::new(s[0], s[1], vec![false; s[0] * s[1]]).unwrap()
}

fn pro_curve_csv(curve: &ProCurve) -> String {
    let mut out = String::from("fpr,overlap\n");
    for (fpr, overlap) in &curve.points {
        out.push_str(&format!("{fpr:.9},{overlap:.9}\n"));
    }
    out
}

fn cmd_eval(
    ckpt_path: &Path,
    data_path: &Path,
    out_dir: &Path,
    metric: Option<MetricKind>,
) -> Result<(), Failure> {
    let ckpt = Checkpoint::load(ckpt_path).map_err(Failure::from)?;
    let (model, _) = ckpt.restore().map_err(Failure::from)?;
    let spec: DatasetSpec = read_json(data_path)?;
    let dataset = spec.load().map_err(Failure::from)?;
    let test = &dataset.test;
    if test.is_empty() {
        return Err(Failure {
            code: 2,
            message: "dataset has an empty test split".into(),
        });
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Failure {
        code: 2,
        message: format!("{}: {e}", out_dir.display()),
    })?;

    let want = |k: MetricKind| -> bool {
        metric.map_or(true, |m| matches!((m, k),
            (MetricKind::Pro, MetricKind::Pro)
                | (MetricKind::Auc, MetricKind::Auc)
                | (MetricKind::Prauc, MetricKind::Prauc)))
    };
    let both_classes = test.iter().any(|s| s.is_anomalous()) && test.iter().any(|s| !s.is_anomalous());
    let has_masks = test.iter().any(|s| s.mask.as_ref().is_some_and(|m| m.any()));

    let mut out = MetricsOut {
        pro_capped_auc: None,
        roc_auc: None,
        pr_auc: None,
        n_images: test.len(),
    };

    if want(MetricKind::Auc) || want(MetricKind::Prauc) {
        if both_classes {
            let stats = ckpt.norm_stats.ok_or(Error::MissingNormStats).map_err(Failure::from)?;
            let scored = eval::evaluate_dataset(&model, test, &stats).map_err(Failure::from)?;
            if want(MetricKind::Auc) {
                out.roc_auc = Some(metrics::roc_auc(&scored.scores, &scored.labels).map_err(Failure::from)?);
            }
            if want(MetricKind::Prauc) {
                out.pr_auc = Some(metrics::pr_auc(&scored.scores, &scored.labels).map_err(Failure::from)?);
            }
        } else if metric.is_some() {
            return Err(Failure {
                code: 2,
                message: "ranking metrics need both classes in the test split".into(),
            });
        }
    }

    if want(MetricKind::Pro) {
        if has_masks {
            let mut heatmaps = Vec::with_capacity(test.len());
            let mut masks = Vec::with_capacity(test.len());
            for s in test {
                heatmaps.push(eval::heatmap_for_image(&model, &s.image).map_err(Failure::from)?);
                masks.push(s.mask.clone().unwrap_or_else(|| all_false_mask(s)));
            }
            let curve = metrics::pro_score(&heatmaps, &masks, 0.3, 256).map_err(Failure::from)?;
            write_out(&out_dir.join("pro_curve.csv"), pro_curve_csv(&curve).as_bytes())?;
            out.pro_capped_auc = Some(curve.capped_auc);
        } else if metric.is_some() {
            return Err(Failure {
                code: 2,
                message: "pro metric needs ground-truth masks".into(),
            });
        }
    }

    write_out(
        &out_dir.join("metrics.json"),
        serde_json::to_string_pretty(&out)
            .map_err(|e| Failure::config(e.to_string()))?
            .as_bytes(),
    )
}

fn cmd_heatmap(ckpt_path: &Path, image_path: &Path, out_path: &Path) -> Result<(), Failure> {
    let ckpt = Checkpoint::load(ckpt_path).map_err(Failure::from)?;
    let (model, _) = ckpt.restore().map_err(Failure::from)?;
    let image = pnm::read_pnm(image_path).map_err(Failure::from)?;
    let cfg = model.config();
    let expect = [cfg.image_height, cfg.image_width, cfg.channels];
    if image.shape() != expect {
        return Err(Failure {
            code: 2,
            message: format!(
                "image {:?} does not match checkpoint {:?}",
                image.shape(),
                expect
            ),
        });
    }
    let evaluation = eval::evaluate_image(&model, &image).map_err(Failure::from)?;
    let heatmap = eval::heatmap_for_image(&model, &image).map_err(Failure::from)?;
    if let Some(dir) = out_path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Failure {
                code: 2,
                message: format!("{}: {e}", dir.display()),
            })?;
        }
    }
    metrics::write_heatmap_pgm(&heatmap, out_path).map_err(Failure::from)?;
    let raw = out_path.with_extension("raw");
    let sidecar = out_path.with_extension("json");
    metrics::write_heatmap_raw(&heatmap, &raw, &sidecar).map_err(Failure::from)?;
    let score = metrics::global_score(&evaluation.score_parts(), ckpt.norm_stats.as_ref())
        .map_err(Failure::from)?;
    println!("{score:.9}");
    Ok(())
}
