//! The inner search space: candidate operators, mixed edges weighted by
//! softmaxed architecture logits, and the supercell DAG.
//!
//! A supercell holds `N` nodes; node `i` receives one mixed edge from each of
//! its `2 + i` inputs (the two cell inputs plus every earlier node) and sums
//! them. The cell output concatenates all node outputs, so a cell at node
//! width `C` emits `N * C` channels. The α logits live outside the cells (see
//! [`AlphaSet`]) so that cells across width levels — and, when layer-wise
//! sharing is off, across layers — can weight their edges identically.

use std::cell::Cell as StdCell;

use rand::Rng;

use crate::error::TensorError;
use crate::nn::{BatchNorm, Conv2d, SepConv2d, LEAKY_SLOPE};
use crate::scalar::Scalar;
use crate::tensor::ops::{
    add, concat_channels, leaky_relu, softmax_vec, weighted_sum, zeros, ConvSpec,
};
use crate::tensor::{Param, Shape, Tape, Tensor};

/// The seven candidate operators, in frozen ordinal order (serialization and
/// tie-breaking depend on it).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpKind {
    Conv3,
    Sep3,
    Sep5,
    Dil3,
    Dil5,
    Skip,
    None,
}

pub const OP_COUNT: usize = 7;

impl OpKind {
    pub const ALL: [OpKind; OP_COUNT] = [
        OpKind::Conv3,
        OpKind::Sep3,
        OpKind::Sep5,
        OpKind::Dil3,
        OpKind::Dil5,
        OpKind::Skip,
        OpKind::None,
    ];

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn from_ordinal(ord: usize) -> Option<OpKind> {
        OpKind::ALL.get(ord).copied()
    }

    /// Stable lowercase name, used in DOT exports and logs.
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv3 => "conv_3x3",
            OpKind::Sep3 => "sep_3x3",
            OpKind::Sep5 => "sep_5x5",
            OpKind::Dil3 => "dil_3x3",
            OpKind::Dil5 => "dil_5x5",
            OpKind::Skip => "skip",
            OpKind::None => "none",
        }
    }
}

enum OpBody<F: Scalar> {
    Dense(Conv2d<F>),
    Separable(SepConv2d<F>),
    Skip,
    Zero,
}

/// One instantiated candidate operator at a fixed channel width.
///
/// Convolutional kinds run LeakyReLU → conv → BN; `Skip` is the identity and
/// `None` maps everything to zeros (blocking gradients entirely).
pub struct CandidateOp<F: Scalar> {
    pub kind: OpKind,
    body: OpBody<F>,
    bn: Option<BatchNorm<F>>,
}

impl<F: Scalar> CandidateOp<F> {
    pub fn new(
        name: &str,
        kind: OpKind,
        channels: usize,
        bn_affine: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let body = match kind {
            OpKind::Conv3 => OpBody::Dense(Conv2d::new(
                &format!("{name}.conv"),
                channels,
                channels,
                ConvSpec::same(3, 1).expect("odd kernel"),
                false,
                rng,
            )),
            OpKind::Dil3 => OpBody::Dense(Conv2d::new(
                &format!("{name}.conv"),
                channels,
                channels,
                ConvSpec::same(3, 2).expect("odd kernel"),
                false,
                rng,
            )),
            OpKind::Dil5 => OpBody::Dense(Conv2d::new(
                &format!("{name}.conv"),
                channels,
                channels,
                ConvSpec::same(5, 2).expect("odd kernel"),
                false,
                rng,
            )),
            OpKind::Sep3 => {
                OpBody::Separable(SepConv2d::new(&format!("{name}.conv"), channels, channels, 3, 1, rng))
            }
            OpKind::Sep5 => {
                OpBody::Separable(SepConv2d::new(&format!("{name}.conv"), channels, channels, 5, 1, rng))
            }
            OpKind::Skip => OpBody::Skip,
            OpKind::None => OpBody::Zero,
        };
        let bn = match body {
            OpBody::Dense(_) | OpBody::Separable(_) => {
                Some(BatchNorm::new(&format!("{name}.bn"), channels, bn_affine))
            }
            _ => None,
        };
        CandidateOp { kind, body, bn }
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape<F>,
        x: &Tensor<F>,
        training: bool,
    ) -> Result<Tensor<F>, TensorError> {
        match &self.body {
            OpBody::Skip => Ok(x.clone()),
            OpBody::Zero => Ok(zeros(tape, x.shape())),
            OpBody::Dense(conv) => {
                let a = leaky_relu(tape, x, LEAKY_SLOPE);
                let c = conv.forward(tape, &a)?;
                Ok(self.bn.as_mut().expect("conv op has bn").forward(tape, &c, training))
            }
            OpBody::Separable(conv) => {
                let a = leaky_relu(tape, x, LEAKY_SLOPE);
                let c = conv.forward(tape, &a)?;
                Ok(self.bn.as_mut().expect("conv op has bn").forward(tape, &c, training))
            }
        }
    }

    pub fn params(&self, out: &mut Vec<Param<F>>) {
        match &self.body {
            OpBody::Dense(c) => c.params(out),
            OpBody::Separable(c) => c.params(out),
            _ => {}
        }
        if let Some(bn) = &self.bn {
            bn.params(out);
        }
    }

    /// Calls `f` once per running-stat buffer (name, contents).
    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Vec<F>)) {
        if let Some(bn) = self.bn.as_mut() {
            for (name, buf) in bn.buffers() {
                f(&name, buf);
            }
        }
    }
}

/// The α logits for one cell topology: one length-7 parameter per edge
/// position, in edge order (node 0 edges first).
///
/// Cells reference these by handle, so any number of cells can share one set.
#[derive(Clone)]
pub struct AlphaSet<F: Scalar> {
    pub edges: Vec<Param<F>>,
    pub n_nodes: usize,
}

impl<F: Scalar> AlphaSet<F> {
    /// All logits start at zero: a uniform 1/7 mixture after softmax.
    pub fn new(name: &str, n_nodes: usize) -> Self {
        let mut edges = Vec::new();
        for node in 0..n_nodes {
            for input in 0..2 + node {
                edges.push(Param::new(
                    &format!("{name}.n{node}.e{input}"),
                    Shape::vec(OP_COUNT),
                    vec![F::zero(); OP_COUNT],
                ));
            }
        }
        AlphaSet { edges, n_nodes }
    }

    pub fn edge(&self, node: usize, input: usize) -> &Param<F> {
        debug_assert!(input < 2 + node);
        let base: usize = (0..node).map(|n| 2 + n).sum();
        &self.edges[base + input]
    }

    /// Current logits per edge, for decoding.
    pub fn logits(&self) -> Vec<Vec<F>> {
        self.edges.iter().map(|p| p.value()).collect()
    }

    pub fn params(&self, out: &mut Vec<Param<F>>) {
        out.extend(self.edges.iter().cloned());
    }
}

/// One mixed edge: all seven candidate ops at the same width, combined by
/// softmax(α).
pub struct MixedEdge<F: Scalar> {
    pub alpha: Param<F>,
    ops: Vec<CandidateOp<F>>,
}

impl<F: Scalar> MixedEdge<F> {
    pub fn new(
        name: &str,
        alpha: Param<F>,
        channels: usize,
        bn_affine: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let ops = OpKind::ALL
            .iter()
            .map(|&kind| {
                CandidateOp::new(&format!("{name}.op{}", kind.ordinal()), kind, channels, bn_affine, rng)
            })
            .collect();
        MixedEdge { alpha, ops }
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape<F>,
        x: &Tensor<F>,
        training: bool,
    ) -> Result<Tensor<F>, TensorError> {
        let logits = self.alpha.leaf(tape);
        let weights = softmax_vec(tape, &logits);
        let mut outs = Vec::with_capacity(OP_COUNT);
        for op in &mut self.ops {
            outs.push(op.forward(tape, x, training)?);
        }
        let refs: Vec<&Tensor<F>> = outs.iter().collect();
        Ok(weighted_sum(tape, &refs, &weights))
    }

    pub fn params(&self, out: &mut Vec<Param<F>>) {
        for op in &self.ops {
            op.params(out);
        }
    }

    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Vec<F>)) {
        for op in &mut self.ops {
            op.visit_buffers(f);
        }
    }
}

/// The supercell: a DAG of `N` nodes over mixed edges at one width level.
pub struct SuperCell<F: Scalar> {
    pub n_nodes: usize,
    pub node_width: usize,
    pub level: usize,
    /// Edges in node order: node 0's `2` edges, then node 1's `3`, and so on.
    edges: Vec<MixedEdge<F>>,
    forward_count: StdCell<u64>,
}

impl<F: Scalar> SuperCell<F> {
    pub fn new(
        name: &str,
        alpha: &AlphaSet<F>,
        n_nodes: usize,
        node_width: usize,
        level: usize,
        bn_affine: bool,
        rng: &mut impl Rng,
    ) -> Self {
        assert_eq!(alpha.n_nodes, n_nodes, "alpha set topology mismatch");
        let mut edges = Vec::new();
        for node in 0..n_nodes {
            for input in 0..2 + node {
                edges.push(MixedEdge::new(
                    &format!("{name}.n{node}.e{input}"),
                    alpha.edge(node, input).clone(),
                    node_width,
                    bn_affine,
                    rng,
                ));
            }
        }
        SuperCell { n_nodes, node_width, level, edges, forward_count: StdCell::new(0) }
    }

    /// How many times this cell has run; the sharing contract is tested
    /// against this counter.
    pub fn forward_count(&self) -> u64 {
        self.forward_count.get()
    }

    /// Runs the cell on its two inputs, both at `node_width` channels.
    pub fn forward(
        &mut self,
        tape: &mut Tape<F>,
        in1: &Tensor<F>,
        in2: &Tensor<F>,
        training: bool,
    ) -> Result<Tensor<F>, TensorError> {
        for (label, t) in [("first", in1), ("second", in2)] {
            if t.shape().c != self.node_width {
                return Err(TensorError::ShapeMismatch {
                    op: "supercell",
                    detail: format!(
                        "{label} input has {} channels, cell width is {}",
                        t.shape().c,
                        self.node_width
                    ),
                });
            }
        }
        self.forward_count.set(self.forward_count.get() + 1);
        let mut inputs: Vec<Tensor<F>> = vec![in1.clone(), in2.clone()];
        let mut edge_iter = self.edges.iter_mut();
        let mut nodes: Vec<Tensor<F>> = Vec::with_capacity(self.n_nodes);
        for node in 0..self.n_nodes {
            let mut acc: Option<Tensor<F>> = None;
            for input in 0..2 + node {
                let edge = edge_iter.next().expect("edge layout matches topology");
                let contribution = edge.forward(tape, &inputs[input], training)?;
                acc = Some(match acc {
                    Option::None => contribution,
                    Some(prev) => add(tape, &prev, &contribution),
                });
            }
            let out = acc.expect("every node has at least two inputs");
            inputs.push(out.clone());
            nodes.push(out);
        }
        let refs: Vec<&Tensor<F>> = nodes.iter().collect();
        concat_channels(tape, &refs)
    }

    /// Kernel parameters only (α lives in the shared [`AlphaSet`]).
    pub fn params(&self, out: &mut Vec<Param<F>>) {
        for edge in &self.edges {
            edge.params(out);
        }
    }

    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Vec<F>)) {
        for edge in &mut self.edges {
            edge.visit_buffers(f);
        }
    }
}
