//! The outer search space: stem, `L` layers of width-leveled supercells wired
//! by β-weighted transitions, tail, and the residual task framing.
//!
//! Layer 0 carries two cells (width levels 0 and 1); every later layer
//! carries three (levels 0, 1, 2), where level `i` works at node width
//! `2^i · W`. A cell at layer `l`, level `i` draws on the previous layer's
//! levels `i−1`, `i`, `i+1`; slots that fall outside the previous layer's
//! range contribute zero features. The softmaxed β logits weight those three
//! slots, and layer 0's single β vector weights the stem's entry into its two
//! levels — together they score every width path for the decoder.
//!
//! Two execution modes share one set of weights: [`SharingMode::Shared`] runs
//! each cell once on the β-weighted source mixture, while
//! [`SharingMode::Unshared`] runs the cell once per slot and mixes the
//! outputs. Both produce identical shapes; the shared mode is what search
//! uses, the unshared mode exists as the memory-hungry reference point.

use rand::Rng;

use crate::cells::{AlphaSet, SuperCell};
use crate::error::TensorError;
use crate::nn::{Conv2d, LEAKY_SLOPE};
use crate::scalar::Scalar;
use crate::tensor::ops::{
    add, bicubic_resize, concat_channels, leaky_relu, pixel_shuffle, slice_channels, softmax_vec,
    weighted_sum, zeros, ConvSpec,
};
use crate::tensor::{Param, Shape, Tape, Tensor};

/// What the network restores, and whether the long skip connection is active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RestorationTask {
    /// Output matches the input size; skip path adds the noisy input back.
    Denoise { residual: bool },
    /// Output is `upscale`× the input size; skip path adds the bicubic
    /// upscale of the input.
    SuperResolve { upscale: usize, residual: bool },
}

impl RestorationTask {
    /// Channels the tail must emit before task framing.
    pub fn tail_channels(&self) -> usize {
        match *self {
            RestorationTask::Denoise { .. } => 3,
            RestorationTask::SuperResolve { upscale, .. } => 3 * upscale * upscale,
        }
    }

    pub fn residual(&self) -> bool {
        match *self {
            RestorationTask::Denoise { residual } => residual,
            RestorationTask::SuperResolve { residual, .. } => residual,
        }
    }

    /// Output spatial size for an input of `h × w`.
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        match *self {
            RestorationTask::Denoise { .. } => (h, w),
            RestorationTask::SuperResolve { upscale, .. } => (h * upscale, w * upscale),
        }
    }
}

/// Whether a layer runs its cells on the mixed sources (one invocation per
/// cell) or once per source slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SharingMode {
    Shared,
    Unshared,
}

/// Width levels available at a layer: layer 0 hosts levels {0, 1}, every
/// later layer {0, 1, 2}.
pub fn levels_at(layer: usize) -> usize {
    if layer == 0 {
        2
    } else {
        3
    }
}

/// Node width at a level: `2^level · w`.
pub fn level_width(w: usize, level: usize) -> usize {
    (1 << level) * w
}

struct Stem<F: Scalar> {
    conv0: Conv2d<F>,
    conv1: Conv2d<F>,
}

struct Tail<F: Scalar> {
    conv0: Conv2d<F>,
    conv1: Conv2d<F>,
}

/// The searchable network.
pub struct SuperNet<F: Scalar> {
    pub w: usize,
    pub n: usize,
    pub l: usize,
    pub task: RestorationTask,
    /// One α set per layer when layer-wise sharing is on, a single global set
    /// otherwise.
    pub lwas: bool,
    alphas: Vec<AlphaSet<F>>,
    /// `beta[0]` is one vector over layer 0's two levels; `beta[l][i]` for
    /// `l ≥ 1` is the three-slot vector over source levels `i−1, i, i+1`.
    betas: Vec<Vec<Param<F>>>,
    cells: Vec<Vec<SuperCell<F>>>,
    /// `in1_projs[l][i][slot]`: 1×1 conv from the slot's source width to
    /// level `i`'s node width; `None` marks a dead slot. Layer 0 has a single
    /// stem slot per level.
    in1_projs: Vec<Vec<Vec<Option<Conv2d<F>>>>>,
    /// `in2_projs[l][i]`: 1×1 conv for the two-layers-back input (the stem
    /// stands in when that feature does not exist).
    in2_projs: Vec<Vec<Conv2d<F>>>,
    stem: Stem<F>,
    tail: Tail<F>,
}

impl<F: Scalar> SuperNet<F> {
    /// Builds the supernet; `rng` drives every weight initialization, so a
    /// fixed seed reproduces the network exactly. BN affine transforms stay
    /// off — the supernet only ranks architectures.
    pub fn new(
        w: usize,
        n: usize,
        l: usize,
        task: RestorationTask,
        lwas: bool,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(w > 0 && n > 0 && l > 0, "degenerate supernet config");
        let k3 = ConvSpec::same(3, 1).expect("odd kernel");
        let k1 = ConvSpec::pointwise();

        let stem = Stem {
            conv0: Conv2d::new("stem.0", 3, w, k3, true, rng),
            conv1: Conv2d::new("stem.1", w, w, k3, true, rng),
        };

        let alphas = if lwas {
            (0..l).map(|layer| AlphaSet::new(&format!("alpha.{layer}"), n)).collect()
        } else {
            vec![AlphaSet::new("alpha", n)]
        };

        let mut betas = Vec::with_capacity(l);
        betas.push(vec![Param::new("beta.0", Shape::vec(2), vec![F::zero(); 2])]);
        for layer in 1..l {
            betas.push(
                (0..levels_at(layer))
                    .map(|i| {
                        Param::new(&format!("beta.{layer}.{i}"), Shape::vec(3), vec![F::zero(); 3])
                    })
                    .collect(),
            );
        }

        let mut cells = Vec::with_capacity(l);
        let mut in1_projs = Vec::with_capacity(l);
        let mut in2_projs = Vec::with_capacity(l);
        for layer in 0..l {
            let alpha = if lwas { &alphas[layer] } else { &alphas[0] };
            let mut layer_cells = Vec::new();
            let mut layer_in1 = Vec::new();
            let mut layer_in2 = Vec::new();
            for i in 0..levels_at(layer) {
                let width = level_width(w, i);
                layer_cells.push(SuperCell::new(
                    &format!("cells.{layer}.{i}"),
                    alpha,
                    n,
                    width,
                    i,
                    false,
                    rng,
                ));
                let slots: Vec<Option<Conv2d<F>>> = if layer == 0 {
                    vec![Some(Conv2d::new(
                        &format!("proj1.{layer}.{i}.0"),
                        w,
                        width,
                        k1,
                        true,
                        rng,
                    ))]
                } else {
                    (0..3)
                        .map(|slot| {
                            let src = i as isize - 1 + slot as isize;
                            if src < 0 || src as usize >= levels_at(layer - 1) {
                                return None;
                            }
                            let src_width = n * level_width(w, src as usize);
                            Some(Conv2d::new(
                                &format!("proj1.{layer}.{i}.{slot}"),
                                src_width,
                                width,
                                k1,
                                true,
                                rng,
                            ))
                        })
                        .collect()
                };
                layer_in1.push(slots);
                let in2_width = if layer >= 2 && i < levels_at(layer - 2) {
                    n * level_width(w, i)
                } else {
                    w
                };
                layer_in2.push(Conv2d::new(
                    &format!("proj2.{layer}.{i}"),
                    in2_width,
                    width,
                    k1,
                    true,
                    rng,
                ));
            }
            cells.push(layer_cells);
            in1_projs.push(layer_in1);
            in2_projs.push(layer_in2);
        }

        let tail_in: usize = (0..levels_at(l - 1)).map(|i| n * level_width(w, i)).sum();
        let tail = Tail {
            conv0: Conv2d::new("tail.0", tail_in, n * w, k3, true, rng),
            conv1: Conv2d::new("tail.1", n * w, task.tail_channels(), k3, true, rng),
        };

        SuperNet { w, n, l, task, lwas, alphas, betas, cells, in1_projs, in2_projs, stem, tail }
    }

    pub fn cell(&self, layer: usize, level: usize) -> &SuperCell<F> {
        &self.cells[layer][level]
    }

    pub fn alpha(&self, layer: usize) -> &AlphaSet<F> {
        if self.lwas {
            &self.alphas[layer]
        } else {
            &self.alphas[0]
        }
    }

    /// β logits for the decoder: `[0]` holds the single layer-0 vector,
    /// `[l ≥ 1]` one three-slot vector per target level.
    pub fn beta_logits(&self) -> Vec<Vec<Vec<F>>> {
        self.betas
            .iter()
            .map(|layer| layer.iter().map(|p| p.value()).collect())
            .collect()
    }

    pub fn beta_param(&self, layer: usize, target: usize) -> &Param<F> {
        if layer == 0 {
            &self.betas[0][0]
        } else {
            &self.betas[layer][target]
        }
    }

    /// Every convolution weight in the network (stem, cells, projections,
    /// tail) — the set trained on the W split.
    pub fn kernel_params(&self) -> Vec<Param<F>> {
        let mut out = Vec::new();
        self.stem.conv0.params(&mut out);
        self.stem.conv1.params(&mut out);
        for layer_cells in &self.cells {
            for cell in layer_cells {
                cell.params(&mut out);
            }
        }
        for layer in &self.in1_projs {
            for level in layer {
                for proj in level.iter().flatten() {
                    proj.params(&mut out);
                }
            }
        }
        for layer in &self.in2_projs {
            for proj in layer {
                proj.params(&mut out);
            }
        }
        self.tail.conv0.params(&mut out);
        self.tail.conv1.params(&mut out);
        out
    }

    /// The architecture logits (α and β) — the set trained on the A split.
    pub fn arch_params(&self) -> Vec<Param<F>> {
        let mut out = Vec::new();
        for alpha in &self.alphas {
            alpha.params(&mut out);
        }
        for layer in &self.betas {
            out.extend(layer.iter().cloned());
        }
        out
    }

    /// Calls `f` for every running-stat buffer in the network.
    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Vec<F>)) {
        for layer_cells in &mut self.cells {
            for cell in layer_cells {
                cell.visit_buffers(f);
            }
        }
    }

    /// Two 3×3 convs with a LeakyReLU between: 3 input channels to `W`.
    pub fn stem_forward(
        &self,
        tape: &mut Tape<F>,
        x: &Tensor<F>,
    ) -> Result<Tensor<F>, TensorError> {
        let a = self.stem.conv0.forward(tape, x)?;
        let a = leaky_relu(tape, &a, LEAKY_SLOPE);
        self.stem.conv1.forward(tape, &a)
    }

    /// Runs layer 0: each level's cell reads the stem through its projection,
    /// scaled by that level's share of softmax(β₀).
    fn layer0_forward(
        &mut self,
        tape: &mut Tape<F>,
        stem: &Tensor<F>,
        training: bool,
    ) -> Result<Vec<Tensor<F>>, TensorError> {
        let logits = self.betas[0][0].leaf(tape);
        let sig = softmax_vec(tape, &logits);
        let mut out = Vec::with_capacity(2);
        for i in 0..levels_at(0) {
            let proj = self.in1_projs[0][i][0].as_ref().expect("layer 0 stem slot");
            let p = proj.forward(tape, stem)?;
            let wi = slice_channels(tape, &sig, i, i + 1);
            let in1 = weighted_sum(tape, &[&p], &wi);
            let in2 = self.in2_projs[0][i].forward(tape, stem)?;
            out.push(self.cells[0][i].forward(tape, &in1, &in2, training)?);
        }
        Ok(out)
    }

    /// Runs layer `l ≥ 1` on the previous layer's per-level features.
    /// `prev2` is the layer-before-that feature set (`None` while the stem
    /// stands in).
    fn layer_forward(
        &mut self,
        tape: &mut Tape<F>,
        layer: usize,
        stem: &Tensor<F>,
        prev: &[Tensor<F>],
        prev2: Option<&[Tensor<F>]>,
        mode: SharingMode,
        training: bool,
    ) -> Result<Vec<Tensor<F>>, TensorError> {
        debug_assert!(layer >= 1);
        if prev.len() != levels_at(layer - 1) {
            return Err(TensorError::ShapeMismatch {
                op: "layer_forward",
                detail: format!(
                    "layer {layer} expected {} source levels, got {}",
                    levels_at(layer - 1),
                    prev.len()
                ),
            });
        }
        let spatial = prev[0].shape();
        let mut out = Vec::with_capacity(levels_at(layer));
        for i in 0..levels_at(layer) {
            let width = level_width(self.w, i);
            let logits = self.betas[layer][i].leaf(tape);
            let sig = softmax_vec(tape, &logits);
            let in2_src = match prev2 {
                Some(h2) if i < h2.len() => &h2[i],
                _ => stem,
            };
            let in2 = self.in2_projs[layer][i].forward(tape, in2_src)?;
            // Project each live slot's source to this level's width; dead
            // slots enter as zero features.
            let mut slot_feats = Vec::with_capacity(3);
            for slot in 0..3 {
                let src = i as isize - 1 + slot as isize;
                let feat = match &self.in1_projs[layer][i][slot] {
                    Some(proj) => {
                        debug_assert!(src >= 0 && (src as usize) < prev.len());
                        proj.forward(tape, &prev[src as usize])?
                    }
                    None => zeros(tape, Shape::new(spatial.n, width, spatial.h, spatial.w)),
                };
                slot_feats.push(feat);
            }
            let h = match mode {
                SharingMode::Shared => {
                    let refs: Vec<&Tensor<F>> = slot_feats.iter().collect();
                    let in1 = weighted_sum(tape, &refs, &sig);
                    self.cells[layer][i].forward(tape, &in1, &in2, training)?
                }
                SharingMode::Unshared => {
                    let mut slot_outs = Vec::with_capacity(3);
                    for feat in &slot_feats {
                        slot_outs.push(self.cells[layer][i].forward(tape, feat, &in2, training)?);
                    }
                    let refs: Vec<&Tensor<F>> = slot_outs.iter().collect();
                    weighted_sum(tape, &refs, &sig)
                }
            };
            out.push(h);
        }
        Ok(out)
    }

    /// Full forward pass: stem, all layers, tail over the concatenated last
    /// layer, and the task's skip framing.
    pub fn forward(
        &mut self,
        tape: &mut Tape<F>,
        x: &Tensor<F>,
        mode: SharingMode,
        training: bool,
    ) -> Result<Tensor<F>, TensorError> {
        let stem = self.stem_forward(tape, x)?;
        let mut prev = self.layer0_forward(tape, &stem, training)?;
        let mut prev2: Option<Vec<Tensor<F>>> = None;
        for layer in 1..self.l {
            let next = self.layer_forward(
                tape,
                layer,
                &stem,
                &prev,
                prev2.as_deref(),
                mode,
                training,
            )?;
            prev2 = Some(std::mem::replace(&mut prev, next));
        }
        let refs: Vec<&Tensor<F>> = prev.iter().collect();
        let cat = concat_channels(tape, &refs)?;
        let t = self.tail.conv0.forward(tape, &cat)?;
        let t = leaky_relu(tape, &t, LEAKY_SLOPE);
        let head = self.tail.conv1.forward(tape, &t)?;
        self.frame_output(tape, &head, x)
    }

    /// Applies the task framing to the tail output.
    fn frame_output(
        &self,
        tape: &mut Tape<F>,
        head: &Tensor<F>,
        x: &Tensor<F>,
    ) -> Result<Tensor<F>, TensorError> {
        match self.task {
            RestorationTask::Denoise { residual } => {
                Ok(if residual { add(tape, head, x) } else { head.clone() })
            }
            RestorationTask::SuperResolve { upscale, residual } => {
                let up = pixel_shuffle(tape, head, upscale)?;
                if residual {
                    let s = x.shape();
                    let skip = bicubic_resize(tape, x, s.h * upscale, s.w * upscale);
                    Ok(add(tape, &up, &skip))
                } else {
                    Ok(up)
                }
            }
        }
    }
}
