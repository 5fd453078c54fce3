//! Evaluation pipeline over a frozen model: per-image reconstruction
//! terms, per-patch NLL, heatmaps, and the normalized global score.

use crate::data::Sample;
use crate::error::Result;
use crate::losses::{mse, ssim, DEFAULT_DYNAMIC_RANGE};
use crate::mdn::nll;
use crate::metrics::{
    fit_norm_stats, global_score, heatmap_from_patch_scores, Heatmap, NormStats, ScoreParts,
};
use crate::model::Model;
use crate::tensor::Tensor;

/// Raw evaluation of one image.
#[derive(Clone, Debug)]
pub struct ImageEvaluation {
    pub mse: f64,
    pub ssim_value: f64,
    pub max_nll: f64,
    pub per_patch_nll: Vec<f64>,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl ImageEvaluation {
    pub fn score_parts(&self) -> ScoreParts {
        ScoreParts {
            mse: self.mse,
            ssim_value: self.ssim_value,
            max_nll: self.max_nll,
        }
    }
}

/// Runs the frozen model on one image: reconstruction losses plus the
/// mixture NLL of every encoded patch (no feature noise at evaluation).
pub fn evaluate_image(model: &Model<f32>, image: &Tensor<f32>) -> Result<ImageEvaluation> {
    let out = model.forward(image)?;
    let params = model.mdn.predict_params(&out.encoded)?;
    // the density target passes through the same head preprocessing
    // (normalization plus optional reduction) as the conditioning input
    let target = {
        let mut tape = crate::tape::Tape::new();
        let feats = tape.constant(out.encoded.features.clone());
        let bound = model.mdn.bind(&mut tape, false);
        let modeled = model.mdn.project_on_tape(&mut tape, &bound, feats)?;
        tape.value(modeled).clone()
    };
    let (per_patch, _) = nll(&params, &target)?;
    let per_patch: Vec<f64> = per_patch.data().iter().map(|&v| v as f64).collect();
    let max_nll = per_patch.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let cfg = model.config();
    Ok(ImageEvaluation {
        mse: mse(image, &out.reconstruction)?,
        ssim_value: ssim(
            image,
            &out.reconstruction,
            cfg.ssim_window,
            DEFAULT_DYNAMIC_RANGE,
        )?,
        max_nll,
        per_patch_nll: per_patch,
        grid_rows: out.encoded.grid_rows,
        grid_cols: out.encoded.grid_cols,
    })
}

/// Localization heatmap: per-patch NLL bilinearly upsampled to image size.
pub fn heatmap_for_image(model: &Model<f32>, image: &Tensor<f32>) -> Result<Heatmap> {
    let eval = evaluate_image(model, image)?;
    let cfg = model.config();
    heatmap_from_patch_scores(
        &eval.per_patch_nll,
        (eval.grid_rows, eval.grid_cols),
        (cfg.image_height, cfg.image_width),
    )
}

/// Fits global-score normalization statistics on held-out normal samples.
pub fn compute_norm_stats(model: &Model<f32>, validation: &[Sample]) -> Result<NormStats> {
    let mut parts = Vec::with_capacity(validation.len());
    for s in validation {
        parts.push(evaluate_image(model, &s.image)?.score_parts());
    }
    fit_norm_stats(&parts)
}

/// Dataset-level evaluation results.
pub struct DatasetEvaluation {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    pub evaluations: Vec<ImageEvaluation>,
}

/// Global score per sample, in dataset order.
pub fn evaluate_dataset(
    model: &Model<f32>,
    samples: &[Sample],
    stats: &NormStats,
) -> Result<DatasetEvaluation> {
    let mut scores = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    let mut evaluations = Vec::with_capacity(samples.len());
    for s in samples {
        let eval = evaluate_image(model, &s.image)?;
        scores.push(global_score(&eval.score_parts(), Some(stats))?);
        labels.push(s.is_anomalous());
        evaluations.push(eval);
    }
    Ok(DatasetEvaluation {
        scores,
        labels,
        evaluations,
    })
}
