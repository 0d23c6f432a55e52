//! The composite restoration loss — MSE plus a log-scaled SSIM term — and
//! the evaluation metrics PSNR and SSIM.
//!
//! SSIM runs on unit-normalized images with the common constants (11×11
//! Gaussian window at σ = 1.5, K₁ = 0.01, K₂ = 0.03) and "valid" windowing:
//! no padding, so border pixels never contribute biased statistics. The same
//! differentiable implementation serves both the loss term and evaluation.
//!
//! Strongly anti-correlated inputs can drive the mean SSIM to zero or below
//! (the covariance term is signed); the log transform is undefined there, so
//! [`l_ssim`] reports [`NumericError::NonPositiveSsim`] instead of returning
//! a non-finite loss.

use crate::error::{HinasError, NumericError, TensorError};
use crate::scalar::Scalar;
use crate::tensor::ops::{add, affine, conv2d, ln, mean_all, mse, mul, ConvSpec};
use crate::tensor::{Shape, Tape, Tensor};

/// SSIM constants; the defaults match the reference formulation on
/// unit-range images.
#[derive(Clone, Copy, Debug)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub l_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, l_range: 1.0 }
    }
}

impl SsimConfig {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.l_range) * (self.k1 * self.l_range)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.l_range) * (self.k2 * self.l_range)
    }

    /// The normalized 2-d Gaussian window, row-major.
    pub fn window_values(&self) -> Vec<f64> {
        let k = self.window;
        let mid = (k as f64 - 1.0) / 2.0;
        let mut w = vec![0.0; k * k];
        let mut total = 0.0;
        for (i, row) in w.chunks_mut(k).enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let di = i as f64 - mid;
                let dj = j as f64 - mid;
                *v = (-(di * di + dj * dj) / (2.0 * self.sigma * self.sigma)).exp();
                total += *v;
            }
        }
        for v in &mut w {
            *v /= total;
        }
        w
    }
}

/// Weights and losses for search and training.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_use_ssim")]
    pub use_ssim_term: bool,
}

fn default_lambda() -> f64 {
    0.6
}

fn default_use_ssim() -> bool {
    true
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda: default_lambda(), use_ssim_term: default_use_ssim() }
    }
}

/// Blurs every channel with the Gaussian window via an untracked depthwise
/// convolution (valid positions only).
fn window_filter<F: Scalar>(
    tape: &mut Tape<F>,
    x: &Tensor<F>,
    window: &[f64],
    k: usize,
) -> Result<Tensor<F>, TensorError> {
    let c = x.shape().c;
    let mut wdata = Vec::with_capacity(c * k * k);
    for _ in 0..c {
        wdata.extend(window.iter().map(|&v| F::from_f64(v)));
    }
    let weight = tape.constant(wdata, Shape::new(c, 1, k, k));
    let spec = ConvSpec { kernel: k, padding: 0, dilation: 1, groups: c };
    conv2d(tape, x, &weight, None, spec)
}

/// Mean structural similarity between two same-shaped images, averaged over
/// every valid window position in every channel. Differentiable in both
/// inputs.
pub fn ssim<F: Scalar>(
    tape: &mut Tape<F>,
    x: &Tensor<F>,
    y: &Tensor<F>,
    cfg: &SsimConfig,
) -> Result<Tensor<F>, TensorError> {
    let s = x.shape();
    if s != y.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "ssim",
            detail: format!("{} vs {}", s, y.shape()),
        });
    }
    if s.h < cfg.window || s.w < cfg.window {
        return Err(TensorError::ShapeMismatch {
            op: "ssim",
            detail: format!("{}x{} image smaller than {0}x{0} window", cfg.window, s.h),
        });
    }
    let win = cfg.window_values();
    let k = cfg.window;
    let mu_x = window_filter(tape, x, &win, k)?;
    let mu_y = window_filter(tape, y, &win, k)?;
    let xx = mul(tape, x, x);
    let yy = mul(tape, y, y);
    let xy = mul(tape, x, y);
    let exx = window_filter(tape, &xx, &win, k)?;
    let eyy = window_filter(tape, &yy, &win, k)?;
    let exy = window_filter(tape, &xy, &win, k)?;
    let mu_xx = mul(tape, &mu_x, &mu_x);
    let mu_yy = mul(tape, &mu_y, &mu_y);
    let mu_xy = mul(tape, &mu_x, &mu_y);
    let var_x = crate::tensor::ops::sub(tape, &exx, &mu_xx);
    let var_y = crate::tensor::ops::sub(tape, &eyy, &mu_yy);
    let cov = crate::tensor::ops::sub(tape, &exy, &mu_xy);

    let lum = affine(tape, &mu_xy, 2.0, cfg.c1());
    let st = affine(tape, &cov, 2.0, cfg.c2());
    let num = mul(tape, &lum, &st);
    let mu_sum = add(tape, &mu_xx, &mu_yy);
    let lum_d = affine(tape, &mu_sum, 1.0, cfg.c1());
    let var_sum = add(tape, &var_x, &var_y);
    let st_d = affine(tape, &var_sum, 1.0, cfg.c2());
    let den = mul(tape, &lum_d, &st_d);
    let map = crate::tensor::ops::div(tape, &num, &den);
    Ok(mean_all(tape, &map))
}

/// `log10(1 / s)` on a positive scalar: zero at `s = 1`, growing as `s`
/// falls.
fn log10_reciprocal<F: Scalar>(tape: &mut Tape<F>, s: &Tensor<F>) -> Tensor<F> {
    let l = ln(tape, s);
    affine(tape, &l, -1.0 / std::f64::consts::LN_10, 0.0)
}

/// The structure term of the loss: `log10(1 / ssim(x, y))`.
pub fn l_ssim<F: Scalar>(
    tape: &mut Tape<F>,
    x: &Tensor<F>,
    y: &Tensor<F>,
    cfg: &SsimConfig,
) -> Result<Tensor<F>, HinasError> {
    let s = ssim(tape, x, y, cfg)?;
    let value = Scalar::to_f64(s.item());
    if value <= 0.0 {
        return Err(NumericError::NonPositiveSsim(value).into());
    }
    Ok(log10_reciprocal(tape, &s))
}

/// Training objective: mean squared error, plus `lambda` times the log-SSIM
/// term. The SSIM branch is skipped entirely when disabled or weighted zero,
/// so those configurations reduce to the exact MSE loss.
pub fn restoration_loss<F: Scalar>(
    tape: &mut Tape<F>,
    pred: &Tensor<F>,
    target: &Tensor<F>,
    loss_cfg: &LossConfig,
    ssim_cfg: &SsimConfig,
) -> Result<Tensor<F>, HinasError> {
    assert!(loss_cfg.lambda >= 0.0, "negative SSIM weight");
    let err = mse(tape, pred, target);
    if !loss_cfg.use_ssim_term || loss_cfg.lambda == 0.0 {
        return Ok(err);
    }
    let structure = l_ssim(tape, pred, target, ssim_cfg)?;
    let weighted = affine(tape, &structure, loss_cfg.lambda, 0.0);
    Ok(add(tape, &err, &weighted))
}

/// Training-loop variant of [`restoration_loss`]: identical wherever the
/// objective is defined, but when the batch SSIM is non-positive — which a
/// freshly initialized network can produce — the log term has no value, so
/// it drops out for that batch instead of erroring and the squared error
/// alone pulls the model back into the term's domain.
pub fn guarded_restoration_loss<F: Scalar>(
    tape: &mut Tape<F>,
    pred: &Tensor<F>,
    target: &Tensor<F>,
    loss_cfg: &LossConfig,
    ssim_cfg: &SsimConfig,
) -> Result<Tensor<F>, TensorError> {
    assert!(loss_cfg.lambda >= 0.0, "negative SSIM weight");
    let err = mse(tape, pred, target);
    if !loss_cfg.use_ssim_term || loss_cfg.lambda == 0.0 {
        return Ok(err);
    }
    let s = ssim(tape, pred, target, ssim_cfg)?;
    if Scalar::to_f64(s.item()) <= 0.0 {
        return Ok(err);
    }
    let structure = log10_reciprocal(tape, &s);
    let weighted = affine(tape, &structure, loss_cfg.lambda, 0.0);
    Ok(add(tape, &err, &weighted))
}

/// Peak signal-to-noise ratio in dB over flattened images, capped at 100.
pub fn psnr<F: Scalar>(x: &[F], y: &[F], peak: f64) -> f64 {
    assert_eq!(x.len(), y.len(), "psnr on mismatched buffers");
    assert!(peak > 0.0, "psnr needs a positive peak");
    let mse: f64 = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| {
            let d = Scalar::to_f64(a) - Scalar::to_f64(b);
            d * d
        })
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return 100.0;
    }
    (10.0 * (peak * peak / mse).log10()).min(100.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::tensor::Param;

    fn rand_img(shape: Shape, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..shape.numel()).map(|_| rng.gen_range(0.0..1.0)).collect()
    }

    /// Straight-line SSIM written independently of the tensor machinery:
    /// explicit window loops, single channel at a time.
    fn reference_ssim(x: &[f64], y: &[f64], c: usize, h: usize, w: usize, cfg: &SsimConfig) -> f64 {
        let k = cfg.window;
        let mid = (k as f64 - 1.0) / 2.0;
        let mut win = vec![0.0; k * k];
        let mut wsum = 0.0;
        for i in 0..k {
            for j in 0..k {
                let v = (-((i as f64 - mid).powi(2) + (j as f64 - mid).powi(2))
                    / (2.0 * cfg.sigma * cfg.sigma))
                    .exp();
                win[i * k + j] = v;
                wsum += v;
            }
        }
        for v in &mut win {
            *v /= wsum;
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for ch in 0..c {
            let xc = &x[ch * h * w..][..h * w];
            let yc = &y[ch * h * w..][..h * w];
            for i0 in 0..=h - k {
                for j0 in 0..=w - k {
                    let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..k {
                        for j in 0..k {
                            let wv = win[i * k + j];
                            let xv = xc[(i0 + i) * w + j0 + j];
                            let yv = yc[(i0 + i) * w + j0 + j];
                            mx += wv * xv;
                            my += wv * yv;
                            mxx += wv * xv * xv;
                            myy += wv * yv * yv;
                            mxy += wv * xv * yv;
                        }
                    }
                    let vx = mxx - mx * mx;
                    let vy = myy - my * my;
                    let cov = mxy - mx * my;
                    total += ((2.0 * mx * my + cfg.c1()) * (2.0 * cov + cfg.c2()))
                        / ((mx * mx + my * my + cfg.c1()) * (vx + vy + cfg.c2()));
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_of_identical_images_is_exactly_one() {
        let shape = Shape::new(1, 3, 16, 16);
        let img = rand_img(shape, 0);
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(img.clone(), shape);
        let y = tape.constant(img, shape);
        let s = ssim(&mut tape, &x, &y, &SsimConfig::default()).unwrap();
        assert_eq!(s.item(), 1.0);
    }

    #[test]
    fn ssim_matches_the_reference_on_random_pairs() {
        let cfg = SsimConfig::default();
        for seed in 0..20 {
            let shape = Shape::new(1, 3, 14, 15);
            let a = rand_img(shape, 100 + seed);
            let b = rand_img(shape, 200 + seed);
            let mut tape = Tape::<f64>::inference();
            let x = tape.constant(a.clone(), shape);
            let y = tape.constant(b.clone(), shape);
            let got = ssim(&mut tape, &x, &y, &cfg).unwrap().item();
            let expect = reference_ssim(&a, &b, 3, 14, 15, &cfg);
            assert!((got - expect).abs() < 1e-6, "seed {seed}: {got} vs {expect}");
        }
    }

    #[test]
    fn anticorrelated_checkerboard_goes_negative_and_matches_reference() {
        let cfg = SsimConfig::default();
        let (h, w) = (16, 16);
        let shape = Shape::new(1, 1, h, w);
        let board: Vec<f64> =
            (0..h * w).map(|i| (((i / w) + (i % w)) % 2) as f64).collect();
        let inverse: Vec<f64> = board.iter().map(|v| 1.0 - v).collect();
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(board.clone(), shape);
        let y = tape.constant(inverse.clone(), shape);
        let got = ssim(&mut tape, &x, &y, &cfg).unwrap().item();
        let expect = reference_ssim(&board, &inverse, 1, h, w, &cfg);
        assert!((got - expect).abs() < 1e-6, "{got} vs {expect}");
        assert!(got < 0.0, "anticorrelated SSIM should be negative, got {got}");
    }

    #[test]
    fn ssim_is_symmetric() {
        let shape = Shape::new(1, 3, 13, 13);
        let a = rand_img(shape, 7);
        let b = rand_img(shape, 8);
        let cfg = SsimConfig::default();
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(a, shape);
        let y = tape.constant(b, shape);
        let xy = ssim(&mut tape, &x, &y, &cfg).unwrap().item();
        let yx = ssim(&mut tape, &y, &x, &cfg).unwrap().item();
        assert!((xy - yx).abs() < 1e-9);
    }

    #[test]
    fn ssim_rejects_shape_mismatch_and_small_images() {
        let mut tape = Tape::<f64>::inference();
        let a = tape.constant(vec![0.5; 3 * 16 * 16], Shape::new(1, 3, 16, 16));
        let b = tape.constant(vec![0.5; 3 * 16 * 15], Shape::new(1, 3, 16, 15));
        assert!(ssim(&mut tape, &a, &b, &SsimConfig::default()).is_err());
        let small = tape.constant(vec![0.5; 3 * 100], Shape::new(1, 3, 10, 10));
        assert!(ssim(&mut tape, &small, &small, &SsimConfig::default()).is_err());
    }

    #[test]
    fn ssim_gradients_match_finite_differences() {
        use crate::tensor::gradcheck::grad_check;
        let shape = Shape::new(1, 2, 12, 12);
        let a = Param::new("a", shape, rand_img(shape, 9));
        let b = Param::new("b", shape, rand_img(shape, 10));
        let cfg = SsimConfig::default();
        let check = grad_check(&[a.clone(), b.clone()], 1e-5, Some(12), 11, |tape| {
            let x = a.leaf(tape);
            let y = b.leaf(tape);
            ssim(tape, &x, &y, &cfg).unwrap()
        });
        check.assert_below(1e-4);
    }

    #[test]
    fn log_map_sends_point_one_to_one() {
        let mut tape = Tape::<f64>::inference();
        let s = tape.constant(vec![0.1], Shape::scalar());
        let v = log10_reciprocal(&mut tape, &s).item();
        assert!((v - 1.0).abs() < 1e-12);
        let one = tape.constant(vec![1.0], Shape::scalar());
        assert_eq!(log10_reciprocal(&mut tape, &one).item(), 0.0);
    }

    #[test]
    fn l_ssim_is_zero_on_identical_images() {
        let shape = Shape::new(1, 3, 12, 12);
        let img = rand_img(shape, 12);
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(img.clone(), shape);
        let y = tape.constant(img, shape);
        let v = l_ssim(&mut tape, &x, &y, &SsimConfig::default()).unwrap();
        assert_eq!(v.item(), 0.0);
    }

    #[test]
    fn l_ssim_reports_nonpositive_similarity() {
        let (h, w) = (16, 16);
        let shape = Shape::new(1, 1, h, w);
        let board: Vec<f64> =
            (0..h * w).map(|i| (((i / w) + (i % w)) % 2) as f64).collect();
        let inverse: Vec<f64> = board.iter().map(|v| 1.0 - v).collect();
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(board, shape);
        let y = tape.constant(inverse, shape);
        let err = l_ssim(&mut tape, &x, &y, &SsimConfig::default());
        assert!(matches!(
            err,
            Err(HinasError::Numeric(NumericError::NonPositiveSsim(_)))
        ));
    }

    #[test]
    fn l_ssim_grows_with_noise() {
        let shape = Shape::new(1, 1, 16, 16);
        let clean = rand_img(shape, 13);
        let noise = rand_img(shape, 14);
        let cfg = SsimConfig::default();
        let mut last = -1.0;
        for step in 0..10 {
            let amp = 0.04 * step as f64;
            let noisy: Vec<f64> =
                clean.iter().zip(&noise).map(|(c, n)| c + amp * (n - 0.5)).collect();
            let mut tape = Tape::<f64>::inference();
            let x = tape.constant(noisy, shape);
            let y = tape.constant(clean.clone(), shape);
            let v = l_ssim(&mut tape, &x, &y, &cfg).unwrap().item();
            assert!(v >= last, "step {step}: {v} < {last}");
            last = v;
        }
    }

    #[test]
    fn loss_is_zero_only_at_the_target() {
        let shape = Shape::new(1, 3, 12, 12);
        let img = rand_img(shape, 15);
        let cfg = LossConfig::default();
        let scfg = SsimConfig::default();
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(img.clone(), shape);
        let y = tape.constant(img.clone(), shape);
        assert_eq!(restoration_loss(&mut tape, &x, &y, &cfg, &scfg).unwrap().item(), 0.0);
        let other = tape.constant(rand_img(shape, 16), shape);
        let v = restoration_loss(&mut tape, &x, &other, &cfg, &scfg).unwrap().item();
        assert!(v > 0.0);
    }

    #[test]
    fn zero_lambda_reduces_to_mse() {
        let shape = Shape::new(1, 3, 12, 12);
        let a = rand_img(shape, 17);
        let b = rand_img(shape, 18);
        let cfg = LossConfig { lambda: 0.0, ..LossConfig::default() };
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(a, shape);
        let y = tape.constant(b, shape);
        let loss = restoration_loss(&mut tape, &x, &y, &cfg, &SsimConfig::default()).unwrap();
        let plain = mse(&mut tape, &x, &y);
        assert_eq!(loss.item(), plain.item());
    }

    #[test]
    fn composite_recomposes_from_parts() {
        let shape = Shape::new(1, 3, 14, 14);
        let a = rand_img(shape, 19);
        let b: Vec<f64> =
            a.iter().zip(rand_img(shape, 20)).map(|(v, n)| v + 0.1 * (n - 0.5)).collect();
        let lcfg = LossConfig::default();
        let scfg = SsimConfig::default();
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(a, shape);
        let y = tape.constant(b, shape);
        let loss = restoration_loss(&mut tape, &x, &y, &lcfg, &scfg).unwrap().item();
        let part_mse = mse(&mut tape, &x, &y).item();
        let part_ssim = l_ssim(&mut tape, &x, &y, &scfg).unwrap().item();
        assert!((loss - (part_mse + 0.6 * part_ssim)).abs() < 1e-7);
    }

    #[test]
    fn guarded_loss_agrees_inside_the_domain() {
        let shape = Shape::new(1, 3, 14, 14);
        let a = rand_img(shape, 29);
        let b: Vec<f64> =
            a.iter().zip(rand_img(shape, 30)).map(|(v, n)| v + 0.1 * (n - 0.5)).collect();
        let lcfg = LossConfig::default();
        let scfg = SsimConfig::default();
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(a, shape);
        let y = tape.constant(b, shape);
        let strict = restoration_loss(&mut tape, &x, &y, &lcfg, &scfg).unwrap();
        let guarded = guarded_restoration_loss(&mut tape, &x, &y, &lcfg, &scfg).unwrap();
        assert_eq!(strict.item(), guarded.item());
    }

    #[test]
    fn guarded_loss_falls_back_to_mse_outside_the_domain() {
        // An anticorrelated pair drives SSIM negative: the strict loss
        // refuses it, the guarded one reduces to the squared error.
        let (h, w) = (16, 16);
        let shape = Shape::new(1, 1, h, w);
        let board: Vec<f64> = (0..h * w).map(|i| (((i / w) + (i % w)) % 2) as f64).collect();
        let inverse: Vec<f64> = board.iter().map(|v| 1.0 - v).collect();
        let lcfg = LossConfig::default();
        let scfg = SsimConfig::default();
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(board, shape);
        let y = tape.constant(inverse, shape);
        assert!(restoration_loss(&mut tape, &x, &y, &lcfg, &scfg).is_err());
        let guarded = guarded_restoration_loss(&mut tape, &x, &y, &lcfg, &scfg).unwrap();
        let plain = mse(&mut tape, &x, &y);
        assert_eq!(guarded.item(), plain.item());
    }

    #[test]
    fn disabled_ssim_term_matches_mse_gradients() {
        let shape = Shape::new(1, 3, 12, 12);
        let img = rand_img(shape, 21);
        let target = rand_img(shape, 22);
        let p = Param::new("pred", shape, img);
        let cfg = LossConfig { use_ssim_term: false, ..LossConfig::default() };
        let grad_of = |loss_fn: &dyn Fn(&mut Tape<f64>, &Tensor<f64>, &Tensor<f64>) -> Tensor<f64>| {
            p.zero_grad();
            let mut tape = Tape::new();
            let x = p.leaf(&mut tape);
            let t = tape.constant(target.clone(), shape);
            let loss = loss_fn(&mut tape, &x, &t);
            tape.backward(&loss).unwrap();
            p.grad()
        };
        let composite = grad_of(&|tape, x, t| {
            restoration_loss(tape, x, t, &cfg, &SsimConfig::default()).unwrap()
        });
        let plain = grad_of(&|tape, x, t| mse(tape, x, t));
        assert_eq!(composite, plain);
    }

    #[test]
    fn psnr_examples() {
        let a = vec![0.5f64; 100];
        assert_eq!(psnr(&a, &a, 1.0), 100.0);
        let zeros = vec![0.0f64; 64];
        let ones = vec![1.0f64; 64];
        assert!((psnr(&zeros, &ones, 1.0) - 0.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_matches_scalar_recomputation() {
        let shape = Shape::new(1, 3, 9, 9);
        let a = rand_img(shape, 23);
        let b = rand_img(shape, 24);
        let got = psnr(&a, &b, 1.0);
        let mse: f64 =
            a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
        let expect = 10.0 * (1.0 / mse).log10();
        assert!((got - expect).abs() < 1e-9);
    }
}
