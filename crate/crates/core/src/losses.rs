//! Training losses: pixel MSE, windowed structural similarity, and the
//! weighted composite objective over them plus the mixture NLL.
//!
//! The composite uses the dissimilarity form of the similarity term,
//! total = nll + lambda1 * mse + lambda2 * (1 - ssim), so that minimizing
//! the total drives the reconstruction toward the input.

use crate::error::{Error, Result};
use crate::model::hwc_to_chw;
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

/// Pixel data lives in [-1, 1], so the dynamic range is 2.
pub const DEFAULT_DYNAMIC_RANGE: f64 = 2.0;
pub const SSIM_GAUSSIAN_STD: f64 = 1.5;

/// Scalar summary of one objective evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub nll: f64,
    pub mse: f64,
    pub ssim_value: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(nll: f64, mse: f64, ssim_value: f64, lambda1: f64, lambda2: f64) -> Self {
        LossBreakdown {
            nll,
            mse,
            ssim_value,
            total: nll + lambda1 * mse + lambda2 * (1.0 - ssim_value),
        }
    }
}

/// Normalized Gaussian window, row-major [size x size].
pub fn gaussian_window<E: Element>(size: usize, std: f64) -> Vec<E> {
    let half = (size as f64 - 1.0) / 2.0;
    let mut win = vec![0.0f64; size * size];
    let mut total = 0.0;
    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 - half;
            let dx = x as f64 - half;
            let v = (-(dy * dy + dx * dx) / (2.0 * std * std)).exp();
            win[y * size + x] = v;
            total += v;
        }
    }
    win.iter().map(|&v| E::from_f64(v / total)).collect()
}

/// Mean squared error between two same-shape values on the tape.
pub fn mse_on_tape<E: Element>(tape: &mut Tape<E>, pred: Var, target: Var) -> Result<Var> {
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// Mean SSIM between two [b, c, h, w] values on the tape, Gaussian-weighted
/// local statistics over valid window positions, channels averaged.
pub fn ssim_on_tape<E: Element>(
    tape: &mut Tape<E>,
    x: Var,
    y: Var,
    window: usize,
    dynamic_range: f64,
) -> Result<Var> {
    if window % 2 == 0 {
        return Err(Error::Config(format!("ssim window {window} must be odd")));
    }
    let win: Vec<E> = gaussian_window(window, SSIM_GAUSSIAN_STD);
    let c1 = E::from_f64((0.01 * dynamic_range) * (0.01 * dynamic_range));
    let c2 = E::from_f64((0.03 * dynamic_range) * (0.03 * dynamic_range));
    let two = E::from_f64(2.0);

    let mu_x = tape.window_blur(x, &win, window)?;
    let mu_y = tape.window_blur(y, &win, window)?;
    let xx = tape.mul(x, x)?;
    let yy = tape.mul(y, y)?;
    let xy = tape.mul(x, y)?;
    let e_xx = tape.window_blur(xx, &win, window)?;
    let e_yy = tape.window_blur(yy, &win, window)?;
    let e_xy = tape.window_blur(xy, &win, window)?;
    let mu_xx = tape.mul(mu_x, mu_x)?;
    let mu_yy = tape.mul(mu_y, mu_y)?;
    let mu_xy = tape.mul(mu_x, mu_y)?;
    let var_x = tape.sub(e_xx, mu_xx)?;
    let var_y = tape.sub(e_yy, mu_yy)?;
    let cov = tape.sub(e_xy, mu_xy)?;

    let lum_num = tape.scale(mu_xy, two);
    let lum_num = tape.add_scalar(lum_num, c1);
    let lum_den = tape.add(mu_xx, mu_yy)?;
    let lum_den = tape.add_scalar(lum_den, c1);
    let str_num = tape.scale(cov, two);
    let str_num = tape.add_scalar(str_num, c2);
    let str_den = tape.add(var_x, var_y)?;
    let str_den = tape.add_scalar(str_den, c2);

    let num = tape.mul(lum_num, str_num)?;
    let den = tape.mul(lum_den, str_den)?;
    let map = tape.div(num, den)?;
    Ok(tape.mean(map))
}

/// Composite objective on the tape.
pub fn total_on_tape<E: Element>(
    tape: &mut Tape<E>,
    nll: Var,
    mse: Var,
    ssim: Var,
    lambda1: f64,
    lambda2: f64,
) -> Result<Var> {
    let weighted_mse = tape.scale(mse, E::from_f64(lambda1));
    let neg_ssim = tape.scale(ssim, E::from_f64(-1.0));
    let dissim = tape.add_scalar(neg_ssim, E::one());
    let weighted_dissim = tape.scale(dissim, E::from_f64(lambda2));
    let partial = tape.add(nll, weighted_mse)?;
    tape.add(partial, weighted_dissim)
}

fn as_bchw<E: Element>(image: &Tensor<E>) -> Result<Tensor<E>> {
    match image.shape().len() {
        2 => {
            let (h, w) = (image.shape()[0], image.shape()[1]);
            image.reshaped(vec![1, 1, h, w])
        }
        3 => {
            let chw = hwc_to_chw(image);
            let s = chw.shape().to_vec();
            chw.reshaped(vec![1, s[0], s[1], s[2]])
        }
        _ => Err(Error::ShapeMismatch {
            op: "ssim",
            expected: "[h, w] or [h, w, c]".into(),
            got: format!("{:?}", image.shape()),
        }),
    }
}

/// Per-pixel-per-channel mean squared difference of two images.
pub fn mse<E: Element>(x: &Tensor<E>, xhat: &Tensor<E>) -> Result<f64> {
    if x.shape() != xhat.shape() {
        return Err(Error::ShapeMismatch {
            op: "mse",
            expected: format!("{:?}", x.shape()),
            got: format!("{:?}", xhat.shape()),
        });
    }
    let n = x.numel() as f64;
    let sum: f64 = x
        .data()
        .iter()
        .zip(xhat.data())
        .map(|(&a, &b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum();
    Ok(sum / n)
}

/// Mean SSIM of two images given as [h, w] or [h, w, c].
pub fn ssim<E: Element>(
    x: &Tensor<E>,
    y: &Tensor<E>,
    window: usize,
    dynamic_range: f64,
) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            expected: format!("{:?}", x.shape()),
            got: format!("{:?}", y.shape()),
        });
    }
    let xb = as_bchw(x)?;
    let yb = as_bchw(y)?;
    let mut tape = Tape::new();
    let xv = tape.constant(xb);
    let yv = tape.constant(yb);
    let s = ssim_on_tape(&mut tape, xv, yv, window, dynamic_range)?;
    Ok(tape.value(s).item().as_f64())
}

/// Composite objective from precomputed parts.
pub fn total_loss<E: Element>(
    x: &Tensor<E>,
    xhat: &Tensor<E>,
    mdn_nll: f64,
    lambda1: f64,
    lambda2: f64,
    window: usize,
) -> Result<LossBreakdown> {
    if lambda1 < 0.0 || lambda2 < 0.0 {
        return Err(Error::Config("loss weights must be nonnegative".into()));
    }
    let mse_value = mse(x, xhat)?;
    let ssim_value = ssim(x, xhat, window, DEFAULT_DYNAMIC_RANGE)?;
    Ok(LossBreakdown::compose(
        mdn_nll, mse_value, ssim_value, lambda1, lambda2,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![h, w], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn mse_identity_is_zero() {
        let x = random_image(6, 6, 1);
        assert_eq!(mse(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn mse_constant_case() {
        let ones = Tensor::<f64>::filled(vec![4, 4, 1], 1.0);
        let zeros = Tensor::<f64>::zeros(vec![4, 4, 1]);
        assert!((mse(&ones, &zeros).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mse_matches_elementwise_loop() {
        let x = random_image(5, 7, 2);
        let y = random_image(5, 7, 3);
        let mut acc = 0.0;
        for (a, b) in x.data().iter().zip(y.data()) {
            acc += (a - b) * (a - b);
        }
        acc /= x.numel() as f64;
        assert!((mse(&x, &y).unwrap() - acc).abs() < 1e-10);
    }

    #[test]
    fn mse_rejects_shape_mismatch() {
        let x = Tensor::<f64>::zeros(vec![4, 4]);
        let y = Tensor::<f64>::zeros(vec![4, 5]);
        assert!(mse(&x, &y).is_err());
    }

    #[test]
    fn ssim_self_is_one() {
        let x = random_image(16, 16, 4);
        let s = ssim(&x, &x, 11, DEFAULT_DYNAMIC_RANGE).unwrap();
        assert!((s - 1.0).abs() < 1e-9, "ssim(x,x) = {s}");
    }

    #[test]
    fn ssim_is_symmetric() {
        let x = random_image(14, 14, 5);
        let y = random_image(14, 14, 6);
        let a = ssim(&x, &y, 7, DEFAULT_DYNAMIC_RANGE).unwrap();
        let b = ssim(&y, &x, 7, DEFAULT_DYNAMIC_RANGE).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let a = 0.5f64;
        let b = -0.5f64;
        let x = Tensor::<f64>::filled(vec![12, 12], a);
        let y = Tensor::<f64>::filled(vec![12, 12], b);
        let c1 = (0.01f64 * 2.0).powi(2);
        let c2 = (0.03f64 * 2.0).powi(2);
        // all windowed variances vanish for constants
        let expected = ((2.0 * a * b + c1) * c2) / ((a * a + b * b + c1) * c2);
        let got = ssim(&x, &y, 11, 2.0).unwrap();
        assert!((got - expected).abs() < 1e-9, "got {got} want {expected}");
    }

    #[test]
    fn ssim_window_must_fit() {
        let x = Tensor::<f64>::zeros(vec![8, 8]);
        assert!(ssim(&x, &x, 11, 2.0).is_err());
        assert!(ssim(&x, &x, 7, 2.0).is_ok());
    }

    #[test]
    fn ssim_bounded_by_one_magnitude() {
        for seed in 0..8 {
            let x = random_image(13, 13, 100 + seed);
            let y = random_image(13, 13, 200 + seed);
            let s = ssim(&x, &y, 9, 2.0).unwrap();
            assert!((-1.0..=1.0).contains(&s), "ssim {s}");
        }
    }

    #[test]
    fn total_reduces_to_nll_for_perfect_reconstruction() {
        let x = random_image(12, 12, 7);
        let b = total_loss(&x, &x, 3.25, 5.0, 0.5, 7).unwrap();
        assert!((b.total - 3.25).abs() < 1e-9);
    }

    #[test]
    fn total_composition_arithmetic() {
        let b = LossBreakdown::compose(2.0, 0.1, 0.8, 5.0, 0.5);
        assert!((b.total - 2.6).abs() < 1e-12);
    }

    #[test]
    fn total_is_monotone_in_parts() {
        let base = LossBreakdown::compose(1.0, 0.2, 0.5, 5.0, 0.5);
        assert!(LossBreakdown::compose(1.1, 0.2, 0.5, 5.0, 0.5).total > base.total);
        assert!(LossBreakdown::compose(1.0, 0.3, 0.5, 5.0, 0.5).total > base.total);
        assert!(LossBreakdown::compose(1.0, 0.2, 0.6, 5.0, 0.5).total < base.total);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        use crate::gradcheck;
        let h = 12;
        let w = 12;
        let window = 5;
        let target = random_image(h, w, 8);
        let x0 = random_image(h, w, 9);

        let loss_of = |p: &[f64]| {
            let xt = Tensor::new(vec![1, 1, h, w], p.to_vec()).unwrap();
            let tt = Tensor::new(vec![1, 1, h, w], target.data().to_vec()).unwrap();
            let mut tape = Tape::new();
            let xv = tape.leaf(xt, false);
            let tv = tape.constant(tt);
            let m = mse_on_tape(&mut tape, xv, tv).unwrap();
            let s = ssim_on_tape(&mut tape, xv, tv, window, 2.0).unwrap();
            let zero = tape.constant(Tensor::scalar(0.0));
            let total = total_on_tape(&mut tape, zero, m, s, 5.0, 0.5).unwrap();
            tape.value(total).item()
        };

        // analytic gradient through the tape
        let xt = Tensor::new(vec![1, 1, h, w], x0.data().to_vec()).unwrap();
        let tt = Tensor::new(vec![1, 1, h, w], target.data().to_vec()).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(xt, true);
        let tv = tape.constant(tt);
        let m = mse_on_tape(&mut tape, xv, tv).unwrap();
        let s = ssim_on_tape(&mut tape, xv, tv, window, 2.0).unwrap();
        let zero = tape.constant(Tensor::scalar(0.0));
        let total = total_on_tape(&mut tape, zero, m, s, 5.0, 0.5).unwrap();
        tape.backward(total).unwrap();
        let analytic = tape.grad(xv).unwrap().to_vec();

        // probe a subset of pixels
        let indices: Vec<usize> = (0..x0.numel()).step_by(11).collect();
        let worst = gradcheck::max_grad_error_at(x0.data(), &analytic, &indices, 1e-5, loss_of);
        assert!(worst < 1e-4, "max rel err {worst}");
    }
}
