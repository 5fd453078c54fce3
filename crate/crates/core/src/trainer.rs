//! Adam optimization of the composite objective over seeded mini-batches,
//! with per-epoch loss logging.
//!
//! All per-epoch randomness (shuffle order, feature noise) derives from
//! counter-based streams keyed by (seed, purpose, epoch [, batch]), so a
//! run is fully determined by (seed, config, dataset) and training resumed
//! from an epoch boundary continues the uninterrupted trajectory exactly.

use crate::data::synthetic::stream;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::losses::{
    mse_on_tape, ssim_on_tape, total_on_tape, LossBreakdown, DEFAULT_DYNAMIC_RANGE,
};
use crate::mdn::{gaussian_noise, nll_on_tape};
use crate::model::{hwc_to_chw, Model};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Fraction of the train split held out for score normalization.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 8,
            epochs: 400,
            seed: 0,
            val_fraction: 0.1,
        }
    }
}

/// Adam with decoupled weight decay. Moment arrays mirror the parameter
/// list they were built for.
#[derive(Clone, Debug)]
pub struct Adam<E> {
    pub lr: E,
    pub weight_decay: E,
    pub beta1: E,
    pub beta2: E,
    pub eps: E,
    pub t: u64,
    pub m: Vec<Vec<E>>,
    pub v: Vec<Vec<E>>,
}

impl<E: Element> Adam<E> {
    pub fn new(cfg: &TrainConfig, param_sizes: &[usize]) -> Self {
        Adam {
            lr: E::from_f64(cfg.learning_rate),
            weight_decay: E::from_f64(cfg.weight_decay),
            beta1: E::from_f64(cfg.beta1),
            beta2: E::from_f64(cfg.beta2),
            eps: E::from_f64(cfg.eps),
            t: 0,
            m: param_sizes.iter().map(|&n| vec![E::zero(); n]).collect(),
            v: param_sizes.iter().map(|&n| vec![E::zero(); n]).collect(),
        }
    }

    /// One bias-corrected update across every parameter tensor. Decay is
    /// decoupled: params shrink by lr * wd * param after the Adam step.
    pub fn step(&mut self, params: &mut [&mut Tensor<E>], grads: &[Vec<E>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                expected: format!("{} parameter tensors", self.m.len()),
                got: format!("{} params, {} grads", params.len(), grads.len()),
            });
        }
        self.t += 1;
        let one = E::one();
        let bc1 = one - self.beta1.powi(self.t as i32);
        let bc2 = one - self.beta2.powi(self.t as i32);
        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if param.numel() != grad.len() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    expected: format!("{} gradient entries", param.numel()),
                    got: format!("{}", grad.len()),
                });
            }
            for ((p, &g), (mi, vi)) in param
                .data_mut()
                .iter_mut()
                .zip(grad)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.beta1 * *mi + (one - self.beta1) * g;
                *vi = self.beta2 * *vi + (one - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p = *p - self.lr * m_hat / (v_hat.sqrt() + self.eps);
                *p = *p - self.lr * self.weight_decay * *p;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
}

/// Renders the loss log in the on-disk CSV layout.
pub fn loss_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,nll,mse,ssim,total\n");
    for row in log {
        out.push_str(&format!(
            "{},{:.9},{:.9},{:.9},{:.9}\n",
            row.epoch, row.loss.nll, row.loss.mse, row.loss.ssim_value, row.loss.total
        ));
    }
    out
}

/// Splits off the normalization validation tail. The split is a pure
/// function of the sample order and fraction.
pub fn split_validation(samples: &[Sample], val_fraction: f64) -> (&[Sample], &[Sample]) {
    let n = samples.len();
    if n < 2 || val_fraction <= 0.0 {
        return (samples, &[]);
    }
    let val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    samples.split_at(n - val)
}

const PURPOSE_SHUFFLE: u64 = 101;
const PURPOSE_NOISE: u64 = 102;

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream(seed, PURPOSE_SHUFFLE, epoch as u64);
    order.shuffle(&mut rng);
    order
}

/// Tape handles of one training objective evaluation.
pub struct StepLoss {
    pub total: Var,
    pub nll: Var,
    pub mse: Var,
    pub ssim: Var,
    pub leaves: Vec<Var>,
}

/// How the density target is supplied to one objective evaluation.
///
/// The mixture is fitted by maximum likelihood to feature samples: the
/// target enters the loss as data, never as a gradient path. `Snapshot`
/// freezes the current modeled features (plus optional noise) in place;
/// `Explicit` supplies the same matrix from outside, which is what the
/// finite-difference verification uses so that the checked loss is a pure
/// function of parameters and fixed inputs.
///
/// Letting gradients flow through the target instead lets the encoder
/// degrade the target distribution itself (scale shrink, low-rank
/// collapse); the likelihood keeps improving while the localization
/// signal decays.
pub enum DensityTarget<'a, E> {
    Snapshot(Option<&'a Tensor<E>>),
    Explicit(&'a Tensor<E>),
}

/// Builds the composite objective for one mini-batch on a tape.
///
/// The mixture head conditions on the noise-perturbed modeled features
/// (gradient flows through the conditioning path, keeping training end to
/// end); the density target is data per `DensityTarget`. The conditioning
/// noise pushes the mean heads toward denoising onto the normal-feature
/// manifold, which is what separates defective patches at evaluation.
pub fn training_loss_on_tape<'a, E: Element>(
    model: &mut Model<E>,
    tape: &mut Tape<E>,
    images: &[&Tensor<E>],
    input_noise: Option<&Tensor<E>>,
    target: DensityTarget<'a, E>,
) -> Result<StepLoss> {
    let cfg = model.config().clone();
    let pass = model.forward_batch(tape, images, true)?;
    let b = pass.vars.batch;

    let modeled_clean = model.mdn.project_on_tape(tape, &pass.mdn, pass.vars.features)?;
    let conditioned = match input_noise {
        Some(noise) => {
            let ni = tape.constant(noise.clone());
            tape.add(modeled_clean, ni)?
        }
        None => modeled_clean,
    };
    let target_tensor: Tensor<E> = match target {
        DensityTarget::Snapshot(noise) => {
            let snapshot = tape.value(modeled_clean).clone();
            match noise {
                Some(n) => {
                    let data: Vec<E> = snapshot
                        .data()
                        .iter()
                        .zip(n.data())
                        .map(|(&a, &b)| a + b)
                        .collect();
                    Tensor::new(snapshot.shape().to_vec(), data)?
                }
                None => snapshot,
            }
        }
        DensityTarget::Explicit(t) => t.clone(),
    };
    let target_var = tape.constant(target_tensor);
    let mixture = model.mdn.predict_on_tape(tape, &pass.mdn, conditioned)?;
    let (_, nll_total) = nll_on_tape(tape, &mixture, target_var)?;

    // reconstruction targets as one [b, c, h, w] constant
    let mut target = Vec::with_capacity(b * cfg.channels * cfg.image_height * cfg.image_width);
    for image in images {
        target.extend_from_slice(hwc_to_chw(image).data());
    }
    let target = tape.constant(Tensor::new(
        vec![b, cfg.channels, cfg.image_height, cfg.image_width],
        target,
    )?);
    let mse = mse_on_tape(tape, pass.vars.recon_bchw, target)?;
    let ssim = ssim_on_tape(
        tape,
        pass.vars.recon_bchw,
        target,
        cfg.ssim_window,
        DEFAULT_DYNAMIC_RANGE,
    )?;
    let total = total_on_tape(tape, nll_total, mse, ssim, cfg.lambda1, cfg.lambda2)?;
    Ok(StepLoss {
        total,
        nll: nll_total,
        mse,
        ssim,
        leaves: pass.leaves,
    })
}

/// One optimization step over a mini-batch. Returns the loss parts.
pub fn train_step(
    model: &mut Model<f32>,
    opt: &mut Adam<f32>,
    batch: &[&Sample],
    seed: u64,
    epoch: usize,
    batch_index: usize,
) -> Result<LossBreakdown> {
    let cfg = model.config().clone();
    let mut tape = Tape::new();
    let images: Vec<&Tensor<f32>> = batch.iter().map(|s| &s.image).collect();

    // feature noise, fixed per (seed, epoch, batch)
    let (input_noise, target_noise): (Option<Tensor<f32>>, Option<Tensor<f32>>) =
        if cfg.noise_std > 0.0 {
            let mut rng = stream(seed, PURPOSE_NOISE, (epoch as u64) << 32 | batch_index as u64);
            let shape = vec![images.len() * cfg.num_patches(), cfg.mdn_dim()];
            (
                Some(gaussian_noise(shape.clone(), cfg.noise_std, &mut rng)),
                Some(gaussian_noise(shape, cfg.noise_std, &mut rng)),
            )
        } else {
            (None, None)
        };
    let step = training_loss_on_tape(
        model,
        &mut tape,
        &images,
        input_noise.as_ref(),
        DensityTarget::Snapshot(target_noise.as_ref()),
    )?;

    let breakdown = LossBreakdown {
        nll: tape.value(step.nll).item() as f64,
        mse: tape.value(step.mse).item() as f64,
        ssim_value: tape.value(step.ssim).item() as f64,
        total: tape.value(step.total).item() as f64,
    };
    if !breakdown.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch,
            batch: batch_index,
        });
    }

    tape.backward(step.total)?;
    let grads: Vec<Vec<f32>> = step.leaves.iter().map(|&v| tape.grad_or_zeros(v)).collect();
    drop(tape);
    let mut params: Vec<&mut Tensor<f32>> = model
        .named_params_mut()
        .into_iter()
        .map(|(_, t)| t)
        .collect();
    opt.step(&mut params, &grads)?;
    Ok(breakdown)
}

/// Trains from `start_epoch` (exclusive of epochs already done) up to
/// `cfg.epochs`, returning one loss row per completed epoch.
pub fn train(
    model: &mut Model<f32>,
    opt: &mut Adam<f32>,
    train_samples: &[Sample],
    cfg: &TrainConfig,
    start_epoch: usize,
) -> Result<Vec<EpochLog>> {
    if train_samples.is_empty() {
        return Err(Error::Data("empty train split".into()));
    }
    for s in train_samples {
        if s.is_anomalous() {
            return Err(Error::Data(
                "train split must contain only normal samples".into(),
            ));
        }
    }
    let mut log = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let order = epoch_order(train_samples.len(), cfg.seed, epoch);
        let mut weighted = LossBreakdown {
            nll: 0.0,
            mse: 0.0,
            ssim_value: 0.0,
            total: 0.0,
        };
        let mut seen = 0usize;
        for (batch_index, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_samples[i]).collect();
            let parts = train_step(model, opt, &batch, cfg.seed, epoch, batch_index)?;
            let w = batch.len() as f64;
            weighted.nll += parts.nll * w;
            weighted.mse += parts.mse * w;
            weighted.ssim_value += parts.ssim_value * w;
            weighted.total += parts.total * w;
            seen += batch.len();
        }
        let n = seen as f64;
        let loss = LossBreakdown {
            nll: weighted.nll / n,
            mse: weighted.mse / n,
            ssim_value: weighted.ssim_value / n,
            total: weighted.total / n,
        };
        for (name, t) in model.named_params() {
            if !t.all_finite() {
                return Err(Error::Numeric(format!(
                    "parameter {name} became non-finite after epoch {epoch}"
                )));
            }
        }
        log.push(EpochLog { epoch, loss });
    }
    Ok(log)
}

/// Convenience: parameter element counts in canonical order.
pub fn param_sizes(model: &Model<f32>) -> Vec<usize> {
    model.named_params().iter().map(|(_, t)| t.numel()).collect()
}

/// Modeled feature matrix (normalization plus optional reduction applied)
/// for a batch at the current parameters, as plain values.
pub fn modeled_features<E: Element>(
    model: &Model<E>,
    images: &[&Tensor<E>],
) -> Result<Tensor<E>> {
    let mut scratch = model.clone();
    let mut tape = Tape::new();
    let pass = scratch.forward_batch(&mut tape, images, false)?;
    let bound = &pass.mdn;
    let modeled = scratch.mdn.project_on_tape(&mut tape, bound, pass.vars.features)?;
    Ok(tape.value(modeled).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_synthetic, SyntheticConfig};
    use crate::model::ModelConfig;

    fn scalar_adam(lr: f64, wd: f64) -> Adam<f64> {
        let cfg = TrainConfig {
            learning_rate: lr,
            weight_decay: wd,
            ..Default::default()
        };
        Adam::new(&cfg, &[1])
    }

    #[test]
    fn zero_gradient_zero_decay_is_fixed_point() {
        let mut opt = scalar_adam(1e-3, 0.0);
        let mut p = Tensor::scalar(1.5f64);
        opt.step(&mut [&mut p], &[vec![0.0]]).unwrap();
        assert_eq!(p.item(), 1.5);
    }

    #[test]
    fn first_step_moves_by_lr_sign() {
        let mut opt = scalar_adam(1e-4, 0.0);
        let mut p = Tensor::scalar(1.0f64);
        opt.step(&mut [&mut p], &[vec![0.37]]).unwrap();
        // first-step bias correction gives m_hat = g, v_hat = g^2
        assert!((p.item() - 0.9999).abs() < 1e-7, "{}", p.item());
    }

    #[test]
    fn quadratic_converges() {
        let mut opt = scalar_adam(0.1, 0.0);
        let mut p = Tensor::scalar(1.0f64);
        for _ in 0..200 {
            let g = 2.0 * p.item();
            opt.step(&mut [&mut p], &[vec![g]]).unwrap();
        }
        assert!(p.item().abs() < 1e-2, "{}", p.item());
    }

    #[test]
    fn decay_difference_is_exactly_lr_wd_param() {
        let p0 = 0.8f64;
        let mut with = scalar_adam(1e-3, 0.01);
        let mut without = scalar_adam(1e-3, 0.0);
        let mut pa = Tensor::scalar(p0);
        let mut pb = Tensor::scalar(p0);
        with.step(&mut [&mut pa], &[vec![0.0]]).unwrap();
        without.step(&mut [&mut pb], &[vec![0.0]]).unwrap();
        let expected = 1e-3 * 0.01 * p0;
        assert!(((pb.item() - pa.item()) - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_rejects_mismatched_grads() {
        let mut opt = scalar_adam(1e-3, 0.0);
        let mut p = Tensor::scalar(1.0f64);
        assert!(opt.step(&mut [&mut p], &[vec![0.0, 1.0]]).is_err());
    }

    fn smoke_setup() -> (Model<f32>, Adam<f32>, Vec<Sample>, TrainConfig) {
        let mut mc = ModelConfig::desk(32, 32, 1, 8);
        mc.embed_dim = 16;
        mc.depth = 1;
        mc.num_heads = 2;
        mc.mixture_components = 2;
        mc.recon_dim = 64;
        mc.ssim_window = 7;
        let model = Model::new(mc, 3).unwrap();
        let tc = TrainConfig {
            learning_rate: 1e-3,
            epochs: 4,
            batch_size: 4,
            seed: 5,
            ..Default::default()
        };
        let ds = generate_synthetic(
            &SyntheticConfig {
                height: 32,
                width: 32,
                n_train: 8,
                n_test_normal: 2,
                n_test_anomalous: 2,
                ..Default::default()
            },
            5,
        )
        .unwrap();
        let opt = Adam::new(&tc, &param_sizes(&model));
        (model, opt, ds.train, tc)
    }

    #[test]
    fn loss_decreases_and_runs_are_reproducible() {
        let (mut model, mut opt, samples, tc) = smoke_setup();
        let log = train(&mut model, &mut opt, &samples, &tc, 0).unwrap();
        assert!(log.last().unwrap().loss.total < log[0].loss.total);

        let (mut model2, mut opt2, samples2, _) = smoke_setup();
        let log2 = train(&mut model2, &mut opt2, &samples2, &tc, 0).unwrap();
        assert_eq!(log[0].loss.total, log2[0].loss.total);
    }

    #[test]
    fn train_rejects_anomalous_samples() {
        let (mut model, mut opt, mut samples, tc) = smoke_setup();
        samples[0].label = crate::data::Label::Anomalous;
        assert!(train(&mut model, &mut opt, &samples, &tc, 0).is_err());
    }

    #[test]
    fn validation_split_is_deterministic_tail() {
        let (_, _, samples, _) = smoke_setup();
        let (train_part, val_part) = split_validation(&samples, 0.25);
        assert_eq!(train_part.len(), 6);
        assert_eq!(val_part.len(), 2);
        let (all, none) = split_validation(&samples, 0.0);
        assert_eq!(all.len(), samples.len());
        assert!(none.is_empty());
    }
}
