//! Parameter-owning layers: convolutions and batch normalization.
//!
//! Layers hold [`Param`] handles (named, shared, gradient-accumulating) and
//! run their forward pass on an explicit [`Tape`]. Weight initialization is
//! He-normal with the LeakyReLU gain, seeded by the caller's RNG so that
//! construction order fully determines the initial state.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::ops::{batch_norm, conv2d, separable_conv, BnCfg, BnStats, ConvSpec};
use crate::tensor::{Param, Shape, Tape, Tensor};

/// Negative slope shared by every activation in the network.
pub const LEAKY_SLOPE: f64 = 0.2;

/// He-normal standard deviation for a fan-in with the LeakyReLU gain.
fn he_std(fan_in: usize) -> f64 {
    (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE) / fan_in as f64).sqrt()
}

fn normal_init<F: Scalar>(n: usize, std: f64, rng: &mut impl Rng) -> Vec<F> {
    let dist = Normal::new(0.0, std).expect("std must be finite");
    (0..n).map(|_| F::from_f64(dist.sample(rng))).collect()
}

/// Plain 2-d convolution layer.
pub struct Conv2d<F: Scalar> {
    pub weight: Param<F>,
    pub bias: Option<Param<F>>,
    pub spec: ConvSpec,
}

impl<F: Scalar> Conv2d<F> {
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        spec: ConvSpec,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (c_in / spec.groups) * spec.kernel * spec.kernel;
        let wshape = Shape::new(c_out, c_in / spec.groups, spec.kernel, spec.kernel);
        let weight = Param::new(
            &format!("{name}.weight"),
            wshape,
            normal_init(wshape.numel(), he_std(fan_in), rng),
        );
        let bias = bias.then(|| {
            Param::new(&format!("{name}.bias"), Shape::vec(c_out), vec![F::zero(); c_out])
        });
        Conv2d { weight, bias, spec }
    }

    pub fn forward(&self, tape: &mut Tape<F>, x: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        let w = self.weight.leaf(tape);
        let b = self.bias.as_ref().map(|b| b.leaf(tape));
        conv2d(tape, x, &w, b.as_ref(), self.spec)
    }

    pub fn params(&self, out: &mut Vec<Param<F>>) {
        out.push(self.weight.clone());
        if let Some(b) = &self.bias {
            out.push(b.clone());
        }
    }
}

/// Depthwise-separable convolution layer ('same'-padded, odd kernel).
pub struct SepConv2d<F: Scalar> {
    pub depth: Param<F>,
    pub point: Param<F>,
    pub kernel: usize,
    pub dilation: usize,
}

impl<F: Scalar> SepConv2d<F> {
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let dshape = Shape::new(c_in, 1, kernel, kernel);
        let pshape = Shape::new(c_out, c_in, 1, 1);
        let depth = Param::new(
            &format!("{name}.depth"),
            dshape,
            normal_init(dshape.numel(), he_std(kernel * kernel), rng),
        );
        let point = Param::new(
            &format!("{name}.point"),
            pshape,
            normal_init(pshape.numel(), he_std(c_in), rng),
        );
        SepConv2d { depth, point, kernel, dilation }
    }

    pub fn forward(&self, tape: &mut Tape<F>, x: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        let d = self.depth.leaf(tape);
        let p = self.point.leaf(tape);
        separable_conv(tape, x, &d, &p, None, self.kernel, self.dilation)
    }

    pub fn params(&self, out: &mut Vec<Param<F>>) {
        out.push(self.depth.clone());
        out.push(self.point.clone());
    }
}

/// Batch normalization layer; affine scale/shift is optional.
pub struct BatchNorm<F: Scalar> {
    name: String,
    pub gamma: Option<Param<F>>,
    pub beta: Option<Param<F>>,
    pub stats: BnStats<F>,
    pub cfg: BnCfg,
}

impl<F: Scalar> BatchNorm<F> {
    pub fn new(name: &str, channels: usize, affine: bool) -> Self {
        let gamma = affine.then(|| {
            Param::new(&format!("{name}.gamma"), Shape::vec(channels), vec![F::one(); channels])
        });
        let beta = affine.then(|| {
            Param::new(&format!("{name}.beta"), Shape::vec(channels), vec![F::zero(); channels])
        });
        BatchNorm { name: name.to_string(), gamma, beta, stats: BnStats::new(channels), cfg: BnCfg::default() }
    }

    pub fn forward(&mut self, tape: &mut Tape<F>, x: &Tensor<F>, training: bool) -> Tensor<F> {
        let g = self.gamma.as_ref().map(|p| p.leaf(tape));
        let b = self.beta.as_ref().map(|p| p.leaf(tape));
        batch_norm(tape, x, g.as_ref(), b.as_ref(), &mut self.stats, self.cfg, training)
    }

    pub fn params(&self, out: &mut Vec<Param<F>>) {
        if let Some(g) = &self.gamma {
            out.push(g.clone());
        }
        if let Some(b) = &self.beta {
            out.push(b.clone());
        }
    }

    /// Named running-stat buffers, for checkpointing.
    pub fn buffers(&mut self) -> [(String, &mut Vec<F>); 2] {
        [
            (format!("{}.running_mean", self.name), &mut self.stats.mean),
            (format!("{}.running_var", self.name), &mut self.stats.var),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_layer_shapes_and_param_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::<f32>::new("stem.0", 3, 8, ConvSpec::same(3, 1).unwrap(), true, &mut rng);
        let mut tape = Tape::inference();
        let x = tape.constant(vec![0.5; 3 * 16 * 16], Shape::new(1, 3, 16, 16));
        let y = conv.forward(&mut tape, &x).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 8, 16, 16));
        let mut params = Vec::new();
        conv.params(&mut params);
        let names: Vec<String> = params.iter().map(|p| p.name()).collect();
        assert_eq!(names, ["stem.0.weight", "stem.0.bias"]);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            Conv2d::<f64>::new("c", 4, 4, ConvSpec::same(3, 1).unwrap(), false, &mut rng)
        };
        assert_eq!(build().weight.value(), build().weight.value());
    }

    #[test]
    fn init_scale_tracks_fan_in() {
        // Empirical std over a large weight should be close to he_std(fan_in).
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = Conv2d::<f64>::new("c", 64, 64, ConvSpec::same(3, 1).unwrap(), false, &mut rng);
        let v = conv.weight.value();
        let n = v.len() as f64;
        let mean: f64 = v.iter().sum::<f64>() / n;
        let var: f64 = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let expect = he_std(64 * 9);
        assert!((var.sqrt() - expect).abs() / expect < 0.05);
    }

    #[test]
    fn batch_norm_layer_round_trips_buffers() {
        let mut bn = BatchNorm::<f32>::new("b", 4, true);
        let [(mname, mean), (vname, _)] = bn.buffers();
        assert_eq!(mname, "b.running_mean");
        assert_eq!(vname, "b.running_var");
        mean[0] = 7.0;
        assert_eq!(bn.stats.mean[0], 7.0);
    }
}
