//! The discrete network built from a decoded architecture: fixed cells (two
//! picked edges per node), one width per layer, trained from scratch with BN
//! affine transforms enabled.

use std::collections::HashMap;

use rand::Rng;

use crate::cells::CandidateOp;
use crate::error::{DecodeError, TensorError};
use crate::genotype::{CellGenotype, WidthPath};
use crate::nn::{Conv2d, LEAKY_SLOPE};
use crate::scalar::Scalar;
use crate::supernet::{level_width, RestorationTask};
use crate::tensor::ops::{
    add, bicubic_resize, concat_channels, leaky_relu, pixel_shuffle, ConvSpec,
};
use crate::tensor::{Param, Tape, Tensor};

/// Per-layer node widths: either derived from a decoded level path
/// (`2^level · W`) or given directly (the manual-width ablations).
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WidthSpec {
    Path(WidthPath),
    Manual(Vec<usize>),
}

impl WidthSpec {
    fn node_widths(&self, w: usize) -> Result<Vec<usize>, DecodeError> {
        match self {
            WidthSpec::Path(path) => {
                path.validate()?;
                Ok(path.levels.iter().map(|&level| level_width(w, level)).collect())
            }
            WidthSpec::Manual(widths) => {
                if widths.is_empty() || widths.iter().any(|&w| w == 0) {
                    return Err(DecodeError::InvalidPath(
                        "manual widths must be nonempty and positive".into(),
                    ));
                }
                Ok(widths.clone())
            }
        }
    }
}

struct DiscreteEdge<F: Scalar> {
    input: usize,
    op: CandidateOp<F>,
}

/// One fixed cell: each node sums its two picked edges; the output
/// concatenates every node.
struct DiscreteCell<F: Scalar> {
    edges: Vec<[DiscreteEdge<F>; 2]>,
}

impl<F: Scalar> DiscreteCell<F> {
    fn new(
        name: &str,
        genotype: &CellGenotype,
        width: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let edges = genotype
            .picks
            .iter()
            .enumerate()
            .map(|(node, pair)| {
                pair.map(|pick| DiscreteEdge {
                    input: pick.input,
                    op: CandidateOp::new(
                        &format!("{name}.n{node}.i{}", pick.input),
                        pick.op,
                        width,
                        true,
                        rng,
                    ),
                })
            })
            .collect();
        DiscreteCell { edges }
    }

    fn forward(
        &mut self,
        tape: &mut Tape<F>,
        in1: &Tensor<F>,
        in2: &Tensor<F>,
        training: bool,
    ) -> Result<Tensor<F>, TensorError> {
        let mut inputs: Vec<Tensor<F>> = vec![in1.clone(), in2.clone()];
        let mut nodes: Vec<Tensor<F>> = Vec::with_capacity(self.edges.len());
        for pair in &mut self.edges {
            let mut acc: Option<Tensor<F>> = None;
            for edge in pair {
                let y = edge.op.forward(tape, &inputs[edge.input], training)?;
                acc = Some(match acc {
                    None => y,
                    Some(prev) => add(tape, &prev, &y),
                });
            }
            let out = acc.expect("two picks per node");
            inputs.push(out.clone());
            nodes.push(out);
        }
        let refs: Vec<&Tensor<F>> = nodes.iter().collect();
        concat_channels(tape, &refs)
    }

    fn params(&self, out: &mut Vec<Param<F>>) {
        for pair in &self.edges {
            for edge in pair {
                edge.op.params(out);
            }
        }
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Vec<F>)) {
        for pair in &mut self.edges {
            for edge in pair {
                edge.op.visit_buffers(f);
            }
        }
    }
}

/// The derived restoration network.
pub struct CompactNet<F: Scalar> {
    pub w: usize,
    pub n: usize,
    pub task: RestorationTask,
    widths: Vec<usize>,
    stem: (Conv2d<F>, Conv2d<F>),
    cells: Vec<DiscreteCell<F>>,
    in1_projs: Vec<Conv2d<F>>,
    in2_projs: Vec<Conv2d<F>>,
    tail: (Conv2d<F>, Conv2d<F>),
}

/// Builds the compact network. `genotypes` holds one cell per layer, or a
/// single cell replicated everywhere; every weight draws from `rng`.
pub fn build_compact_net<F: Scalar>(
    genotypes: &[CellGenotype],
    widths: &WidthSpec,
    w: usize,
    n: usize,
    task: RestorationTask,
    rng: &mut impl Rng,
) -> Result<CompactNet<F>, DecodeError> {
    let node_widths = widths.node_widths(w)?;
    let l = node_widths.len();
    if genotypes.is_empty() || (genotypes.len() != 1 && genotypes.len() != l) {
        return Err(DecodeError::InvalidGenotype(format!(
            "{} genotypes for {} layers",
            genotypes.len(),
            l
        )));
    }
    for g in genotypes {
        g.validate()?;
        if g.n != n {
            return Err(DecodeError::InvalidGenotype(format!(
                "genotype has {} nodes, network expects {n}",
                g.n
            )));
        }
    }
    let k3 = ConvSpec::same(3, 1).expect("odd kernel");
    let k1 = ConvSpec::pointwise();
    let stem = (
        Conv2d::new("stem.0", 3, w, k3, true, rng),
        Conv2d::new("stem.1", w, w, k3, true, rng),
    );
    let mut cells = Vec::with_capacity(l);
    let mut in1_projs = Vec::with_capacity(l);
    let mut in2_projs = Vec::with_capacity(l);
    for layer in 0..l {
        let width = node_widths[layer];
        let genotype = if genotypes.len() == 1 { &genotypes[0] } else { &genotypes[layer] };
        cells.push(DiscreteCell::new(&format!("cells.{layer}"), genotype, width, rng));
        let in1_src = if layer == 0 { w } else { n * node_widths[layer - 1] };
        in1_projs.push(Conv2d::new(&format!("proj1.{layer}"), in1_src, width, k1, true, rng));
        let in2_src = if layer >= 2 { n * node_widths[layer - 2] } else { w };
        in2_projs.push(Conv2d::new(&format!("proj2.{layer}"), in2_src, width, k1, true, rng));
    }
    let tail = (
        Conv2d::new("tail.0", n * node_widths[l - 1], n * w, k3, true, rng),
        Conv2d::new("tail.1", n * w, task.tail_channels(), k3, true, rng),
    );
    Ok(CompactNet { w, n, task, widths: node_widths, stem, cells, in1_projs, in2_projs, tail })
}

impl<F: Scalar> CompactNet<F> {
    /// Per-layer node widths actually built.
    pub fn node_widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape<F>,
        x: &Tensor<F>,
        training: bool,
    ) -> Result<Tensor<F>, TensorError> {
        let s = self.stem.0.forward(tape, x)?;
        let s = leaky_relu(tape, &s, LEAKY_SLOPE);
        let stem = self.stem.1.forward(tape, &s)?;
        let mut prev = stem.clone();
        let mut prev2 = stem.clone();
        for layer in 0..self.cells.len() {
            let in1 = self.in1_projs[layer].forward(tape, &prev)?;
            let in2 = self.in2_projs[layer].forward(tape, &prev2)?;
            let h = self.cells[layer].forward(tape, &in1, &in2, training)?;
            prev2 = std::mem::replace(&mut prev, h);
        }
        let t = self.tail.0.forward(tape, &prev)?;
        let t = leaky_relu(tape, &t, LEAKY_SLOPE);
        let head = self.tail.1.forward(tape, &t)?;
        match self.task {
            RestorationTask::Denoise { residual } => {
                Ok(if residual { add(tape, &head, x) } else { head })
            }
            RestorationTask::SuperResolve { upscale, residual } => {
                let up = pixel_shuffle(tape, &head, upscale)?;
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

    pub fn params(&self) -> Vec<Param<F>> {
        let mut out = Vec::new();
        self.stem.0.params(&mut out);
        self.stem.1.params(&mut out);
        for (cell, (p1, p2)) in
            self.cells.iter().zip(self.in1_projs.iter().zip(&self.in2_projs))
        {
            p1.params(&mut out);
            p2.params(&mut out);
            cell.params(&mut out);
        }
        self.tail.0.params(&mut out);
        self.tail.1.params(&mut out);
        out
    }

    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Vec<F>)) {
        for cell in &mut self.cells {
            cell.visit_buffers(f);
        }
    }
}

/// Exact number of trainable scalars in the network, including BN affine
/// vectors.
pub fn count_params<F: Scalar>(net: &CompactNet<F>) -> usize {
    net.params().iter().map(|p| p.numel()).sum()
}

/// Independent recount: walks the serialized name → buffer map (what a
/// checkpoint stores) and sums buffer lengths, failing on any duplicated
/// name.
pub fn count_params_via_buffers<F: Scalar>(net: &CompactNet<F>) -> usize {
    let mut table: HashMap<String, usize> = HashMap::new();
    for p in net.params() {
        let prior = table.insert(p.name(), p.value().len());
        assert!(prior.is_none(), "duplicate parameter name {}", p.name());
    }
    table.values().sum()
}
