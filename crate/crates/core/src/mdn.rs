//! Mixture density head: three linear maps over encoded patch features
//! produce per-patch mixture weights (softmax), means (raw) and scales
//! (softplus with a small positive floor). The negative log-likelihood of
//! the features under the predicted mixture is both a training loss and
//! the localization score.

use crate::error::{Error, Result};
use crate::model::{EncodedPatches, ModelConfig};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Scales stay at least this far above zero so a collapsing component
/// cannot blow up the likelihood.
pub const SIGMA_FLOOR: f64 = 1e-4;

/// Per-patch mixture parameters. Weight rows sum to one, scales are
/// strictly positive; both hold by construction.
#[derive(Clone, Debug)]
pub struct MixtureParams<E> {
    /// [n x k]
    pub weights: Tensor<E>,
    /// [n x k x d]
    pub means: Tensor<E>,
    /// [n x k x d]
    pub sigmas: Tensor<E>,
}

impl<E: Element> MixtureParams<E> {
    pub fn num_components(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn feature_dim(&self) -> usize {
        self.means.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_components();
        for row in self.weights.data().chunks(k) {
            let sum: f64 = row.iter().map(|v| v.as_f64()).sum();
            if (sum - 1.0).abs() > 1e-6 || row.iter().any(|v| v.as_f64() < 0.0) {
                return Err(Error::Numeric(
                    "mixture weights must be nonnegative and sum to 1".into(),
                ));
            }
        }
        if self.sigmas.data().iter().any(|&s| s <= E::zero()) {
            return Err(Error::Numeric("mixture sigmas must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MdnHead<E> {
    pub k: usize,
    /// Modeled feature dimension (embed dim unless a learned reduction is
    /// configured).
    pub dim: usize,
    pub reduce_w: Option<Tensor<E>>,
    pub reduce_b: Option<Tensor<E>>,
    pub weight_w: Tensor<E>,
    pub weight_b: Tensor<E>,
    pub mean_w: Tensor<E>,
    pub mean_b: Tensor<E>,
    pub sigma_w: Tensor<E>,
    pub sigma_b: Tensor<E>,
}

/// Tape handles for the head parameters.
pub struct BoundMdn {
    pub reduce_w: Option<Var>,
    pub reduce_b: Option<Var>,
    pub weight_w: Var,
    pub weight_b: Var,
    pub mean_w: Var,
    pub mean_b: Var,
    pub sigma_w: Var,
    pub sigma_b: Var,
}

impl BoundMdn {
    pub fn leaves(&self) -> Vec<Var> {
        let mut out = Vec::new();
        if let Some(v) = self.reduce_w {
            out.push(v);
        }
        if let Some(v) = self.reduce_b {
            out.push(v);
        }
        out.extend_from_slice(&[
            self.weight_w,
            self.weight_b,
            self.mean_w,
            self.mean_b,
            self.sigma_w,
            self.sigma_b,
        ]);
        out
    }
}

/// Mixture parameter handles produced on a tape.
pub struct MixtureVars {
    pub weights: Var,
    pub means: Var,
    pub sigmas: Var,
    pub rows: usize,
    pub k: usize,
    pub dim: usize,
}

impl<E: Element> MdnHead<E> {
    pub fn new(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let k = config.mixture_components;
        let dim = config.mdn_dim();
        let embed = config.embed_dim;
        let (reduce_w, reduce_b) = match config.mdn_reduced_dim {
            Some(d) => (
                Some(uniform_fan_in(rng, vec![embed, d], embed)),
                Some(Tensor::zeros(vec![d])),
            ),
            None => (None, None),
        };
        MdnHead {
            k,
            dim,
            reduce_w,
            reduce_b,
            weight_w: uniform_fan_in(rng, vec![dim, k], dim),
            weight_b: Tensor::zeros(vec![k]),
            mean_w: uniform_fan_in(rng, vec![dim, k * dim], dim),
            mean_b: Tensor::zeros(vec![k * dim]),
            sigma_w: uniform_fan_in(rng, vec![dim, k * dim], dim),
            sigma_b: Tensor::zeros(vec![k * dim]),
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<E>)> {
        let mut out = Vec::new();
        if let Some(w) = &self.reduce_w {
            out.push(("reduce_w".to_string(), w));
        }
        if let Some(b) = &self.reduce_b {
            out.push(("reduce_b".to_string(), b));
        }
        out.push(("weight_w".to_string(), &self.weight_w));
        out.push(("weight_b".to_string(), &self.weight_b));
        out.push(("mean_w".to_string(), &self.mean_w));
        out.push(("mean_b".to_string(), &self.mean_b));
        out.push(("sigma_w".to_string(), &self.sigma_w));
        out.push(("sigma_b".to_string(), &self.sigma_b));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<E>)> {
        let mut out = Vec::new();
        if let Some(w) = &mut self.reduce_w {
            out.push(("reduce_w".to_string(), w));
        }
        if let Some(b) = &mut self.reduce_b {
            out.push(("reduce_b".to_string(), b));
        }
        out.push(("weight_w".to_string(), &mut self.weight_w));
        out.push(("weight_b".to_string(), &mut self.weight_b));
        out.push(("mean_w".to_string(), &mut self.mean_w));
        out.push(("mean_b".to_string(), &mut self.mean_b));
        out.push(("sigma_w".to_string(), &mut self.sigma_w));
        out.push(("sigma_b".to_string(), &mut self.sigma_b));
        out
    }

    pub fn bind(&self, tape: &mut Tape<E>, grad: bool) -> BoundMdn {
        BoundMdn {
            reduce_w: self.reduce_w.as_ref().map(|t| tape.leaf(t.clone(), grad)),
            reduce_b: self.reduce_b.as_ref().map(|t| tape.leaf(t.clone(), grad)),
            weight_w: tape.leaf(self.weight_w.clone(), grad),
            weight_b: tape.leaf(self.weight_b.clone(), grad),
            mean_w: tape.leaf(self.mean_w.clone(), grad),
            mean_b: tape.leaf(self.mean_b.clone(), grad),
            sigma_w: tape.leaf(self.sigma_w.clone(), grad),
            sigma_b: tape.leaf(self.sigma_b.clone(), grad),
        }
    }

    /// Maps raw encoder features to the space the mixture models: a
    /// per-vector normalization (no learned affine) followed by the
    /// optional learned reduction.
    ///
    /// The normalization pins the feature scale. Without it the encoder
    /// can shrink or inflate its output magnitude to defeat the fixed
    /// noise level, collapsing the predicted scales and with them the
    /// localization signal.
    pub fn project_on_tape(
        &self,
        tape: &mut Tape<E>,
        bound: &BoundMdn,
        features: Var,
    ) -> Result<Var> {
        let cols = *tape.shape(features).last().unwrap();
        let ones = tape.constant(Tensor::filled(vec![cols], E::one()));
        let zeros = tape.constant(Tensor::zeros(vec![cols]));
        let normalized = tape.layer_norm(features, ones, zeros, E::from_f64(1e-5))?;
        match (bound.reduce_w, bound.reduce_b) {
            (Some(w), Some(b)) => {
                let reduced = tape.matmul(normalized, w)?;
                tape.add_row(reduced, b)
            }
            _ => Ok(normalized),
        }
    }

    /// Predicts mixture parameters for every feature row. The same head
    /// parameters apply at every patch position.
    pub fn predict_on_tape(
        &self,
        tape: &mut Tape<E>,
        bound: &BoundMdn,
        modeled: Var,
    ) -> Result<MixtureVars> {
        let rows = tape.shape(modeled)[0];
        let logits = tape.matmul(modeled, bound.weight_w)?;
        let logits = tape.add_row(logits, bound.weight_b)?;
        let weights = tape.softmax(logits)?;
        let means = tape.matmul(modeled, bound.mean_w)?;
        let means = tape.add_row(means, bound.mean_b)?;
        let pre = tape.matmul(modeled, bound.sigma_w)?;
        let pre = tape.add_row(pre, bound.sigma_b)?;
        let soft = tape.softplus(pre, E::one())?;
        let sigmas = tape.add_scalar(soft, E::from_f64(SIGMA_FLOOR));
        Ok(MixtureVars {
            weights,
            means,
            sigmas,
            rows,
            k: self.k,
            dim: self.dim,
        })
    }

    /// Value-level prediction for one image's encoded patches.
    pub fn predict_params(&self, encoded: &EncodedPatches<E>) -> Result<MixtureParams<E>> {
        let mut tape = Tape::new();
        let feats = tape.constant(encoded.features.clone());
        let bound = self.bind(&mut tape, false);
        let modeled = self.project_on_tape(&mut tape, &bound, feats)?;
        let vars = self.predict_on_tape(&mut tape, &bound, modeled)?;
        let n = vars.rows;
        Ok(MixtureParams {
            weights: tape.value(vars.weights).reshaped(vec![n, self.k])?,
            means: tape.value(vars.means).reshaped(vec![n, self.k, self.dim])?,
            sigmas: tape.value(vars.sigmas).reshaped(vec![n, self.k, self.dim])?,
        })
    }
}

/// Per-row mixture NLL plus its mean, on the tape.
pub fn nll_on_tape<E: Element>(
    tape: &mut Tape<E>,
    params: &MixtureVars,
    targets: Var,
) -> Result<(Var, Var)> {
    let per_row = tape.mixture_nll(
        params.weights,
        params.means,
        params.sigmas,
        targets,
        params.k,
        params.dim,
    )?;
    let total = tape.mean(per_row);
    Ok((per_row, total))
}

/// Value-level NLL of targets y [n x d] under per-row mixture parameters.
/// Returns the per-row scores and their mean.
pub fn nll<E: Element>(
    params: &MixtureParams<E>,
    y: &Tensor<E>,
) -> Result<(Tensor<E>, E)> {
    params.validate()?;
    let n = params.weights.shape()[0];
    let k = params.num_components();
    let d = params.feature_dim();
    let mut tape = Tape::new();
    let w = tape.constant(params.weights.clone());
    let mu = tape.constant(params.means.reshaped(vec![n, k * d])?);
    let sg = tape.constant(params.sigmas.reshaped(vec![n, k * d])?);
    let yv = tape.constant(y.clone());
    let per_row = tape.mixture_nll(w, mu, sg, yv, k, d)?;
    let total = tape.mean(per_row);
    let total_val = tape.value(total).item();
    Ok((tape.value(per_row).clone(), total_val))
}

/// Draws one Gaussian-noise tensor. Same seed, same noise.
pub fn gaussian_noise<E: Element>(
    shape: Vec<usize>,
    std: f64,
    rng: &mut ChaCha8Rng,
) -> Tensor<E> {
    if std == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Normal::new(0.0, std).unwrap();
    Tensor::from_fn(shape, |_| E::from_f64(dist.sample(rng)))
}

/// Adds i.i.d. zero-mean Gaussian noise to every feature entry. With
/// `noise_std == 0` the output is identical to the input; evaluation paths
/// simply never call this.
pub fn perturb_features<E: Element>(
    encoded: &EncodedPatches<E>,
    noise_std: f64,
    rng: &mut ChaCha8Rng,
) -> EncodedPatches<E> {
    if noise_std == 0.0 {
        return encoded.clone();
    }
    let noise: Tensor<E> = gaussian_noise(encoded.features.shape().to_vec(), noise_std, rng);
    let data: Vec<E> = encoded
        .features
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&f, &n)| f + n)
        .collect();
    EncodedPatches {
        features: Tensor::new(encoded.features.shape().to_vec(), data).unwrap(),
        grid_rows: encoded.grid_rows,
        grid_cols: encoded.grid_cols,
    }
}

fn uniform_fan_in<E: Element>(
    rng: &mut ChaCha8Rng,
    shape: Vec<usize>,
    fan_in: usize,
) -> Tensor<E> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| E::from_f64(rng.gen_range(-bound..bound)))
}
