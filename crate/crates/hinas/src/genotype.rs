//! Discrete architecture descriptions: cell genotypes and width paths, their
//! JSON wire format, validation, perturbation edits, and DOT export.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cells::OpKind;
use crate::error::DecodeError;
use crate::supernet::levels_at;

/// One kept edge: which cell input (or earlier node) feeds the node, and with
/// which operator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pick {
    pub input: usize,
    pub op: OpKind,
}

/// A discretized cell: per node, exactly two input picks. Width-agnostic —
/// the layer's level sets the channel count at build time.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "GenotypeDoc", try_from = "GenotypeDoc")]
pub struct CellGenotype {
    pub n: usize,
    pub picks: Vec<[Pick; 2]>,
}

#[derive(Clone, Serialize, Deserialize)]
struct GenotypeDoc {
    version: u32,
    #[serde(rename = "N")]
    n: usize,
    picks: Vec<[[usize; 2]; 2]>,
}

impl From<CellGenotype> for GenotypeDoc {
    fn from(g: CellGenotype) -> GenotypeDoc {
        GenotypeDoc {
            version: 1,
            n: g.n,
            picks: g
                .picks
                .iter()
                .map(|pair| {
                    [
                        [pair[0].input, pair[0].op.ordinal()],
                        [pair[1].input, pair[1].op.ordinal()],
                    ]
                })
                .collect(),
        }
    }
}

impl TryFrom<GenotypeDoc> for CellGenotype {
    type Error = DecodeError;

    fn try_from(doc: GenotypeDoc) -> Result<CellGenotype, DecodeError> {
        if doc.version != 1 {
            return Err(DecodeError::InvalidGenotype(format!(
                "unsupported genotype version {}",
                doc.version
            )));
        }
        let picks = doc
            .picks
            .iter()
            .map(|pair| {
                let mk = |raw: [usize; 2]| -> Result<Pick, DecodeError> {
                    let [input, ord] = raw;
                    let op = OpKind::from_ordinal(ord).ok_or_else(|| {
                        DecodeError::InvalidGenotype(format!("unknown op ordinal {ord}"))
                    })?;
                    Ok(Pick { input, op })
                };
                Ok([mk(pair[0])?, mk(pair[1])?])
            })
            .collect::<Result<Vec<_>, DecodeError>>()?;
        let g = CellGenotype { n: doc.n, picks };
        g.validate()?;
        Ok(g)
    }
}

impl CellGenotype {
    /// Checks every structural invariant: one pick pair per node, indices in
    /// range and distinct, no `None` operators.
    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.picks.len() != self.n {
            return Err(DecodeError::InvalidGenotype(format!(
                "{} pick pairs for {} nodes",
                self.picks.len(),
                self.n
            )));
        }
        for (node, picks) in self.picks.iter().enumerate() {
            for p in picks {
                if p.input >= 2 + node {
                    return Err(DecodeError::InvalidGenotype(format!(
                        "node {node} pick references input {} of {}",
                        p.input,
                        2 + node
                    )));
                }
                if p.op == OpKind::None {
                    return Err(DecodeError::InvalidGenotype(format!(
                        "node {node} picks the none operator"
                    )));
                }
            }
            if picks[0].input == picks[1].input {
                return Err(DecodeError::InvalidGenotype(format!(
                    "node {node} picks input {} twice",
                    picks[0].input
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("genotype serializes")
    }

    pub fn from_json(text: &str) -> Result<CellGenotype, DecodeError> {
        serde_json::from_str(text).map_err(|e| DecodeError::InvalidGenotype(e.to_string()))
    }

    /// Graphviz rendering: cell inputs, nodes, picked edges labeled by
    /// operator, and the concat output.
    pub fn to_dot(&self, name: &str) -> String {
        let mut out = String::new();
        out.push_str(&format!("digraph \"{name}\" {{\n  rankdir=LR;\n"));
        out.push_str("  in0 [label=\"input 1\", shape=box];\n");
        out.push_str("  in1 [label=\"input 2\", shape=box];\n");
        for node in 0..self.n {
            out.push_str(&format!("  n{node} [label=\"node {node}\"];\n"));
        }
        out.push_str("  out [label=\"concat\", shape=box];\n");
        for (node, picks) in self.picks.iter().enumerate() {
            for p in picks {
                let src = if p.input < 2 {
                    format!("in{}", p.input)
                } else {
                    format!("n{}", p.input - 2)
                };
                out.push_str(&format!("  {src} -> n{node} [label=\"{}\"];\n", p.op.name()));
            }
        }
        for node in 0..self.n {
            out.push_str(&format!("  n{node} -> out;\n"));
        }
        out.push_str("}\n");
        out
    }
}

/// An edit for architecture-sensitivity experiments: swap a pick's operator
/// or its input wire.
#[derive(Clone, Copy, Debug)]
pub enum GenotypeEdit {
    ReplaceOp { node: usize, pick: usize, op: OpKind },
    RewireInput { node: usize, pick: usize, input: usize },
}

/// Applies one edit and re-validates; the original is untouched.
pub fn perturb_genotype(g: &CellGenotype, edit: GenotypeEdit) -> Result<CellGenotype, DecodeError> {
    let mut out = g.clone();
    match edit {
        GenotypeEdit::ReplaceOp { node, pick, op } => {
            let slot = out
                .picks
                .get_mut(node)
                .and_then(|pair| pair.get_mut(pick))
                .ok_or_else(|| DecodeError::InvalidGenotype(format!("no pick {pick} at node {node}")))?;
            slot.op = op;
        }
        GenotypeEdit::RewireInput { node, pick, input } => {
            let slot = out
                .picks
                .get_mut(node)
                .and_then(|pair| pair.get_mut(pick))
                .ok_or_else(|| DecodeError::InvalidGenotype(format!("no pick {pick} at node {node}")))?;
            slot.input = input;
        }
    }
    out.validate()?;
    Ok(out)
}

/// The level chosen at each layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WidthPath {
    pub levels: Vec<usize>,
}

impl WidthPath {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.levels.is_empty() {
            return Err(DecodeError::InvalidPath("empty path".into()));
        }
        for (layer, &level) in self.levels.iter().enumerate() {
            if level >= levels_at(layer) {
                return Err(DecodeError::InvalidPath(format!(
                    "layer {layer} has no level {level}"
                )));
            }
            if layer > 0 {
                let prev = self.levels[layer - 1];
                if level.abs_diff(prev) > 1 {
                    return Err(DecodeError::InvalidPath(format!(
                        "layer {layer} jumps from level {prev} to {level}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("path serializes")
    }

    pub fn from_json(text: &str) -> Result<WidthPath, DecodeError> {
        let path: WidthPath =
            serde_json::from_str(text).map_err(|e| DecodeError::InvalidPath(e.to_string()))?;
        path.validate()?;
        Ok(path)
    }
}

/// Samples an architecture uniformly: per cell, each node draws a distinct
/// input pair and two operators; the width path is drawn uniformly over all
/// availability-respecting paths (counted by dynamic programming). One
/// genotype per layer when `lwas` is set, a single shared one otherwise.
pub fn random_genotype(
    n: usize,
    l: usize,
    lwas: bool,
    seed: u64,
) -> (Vec<CellGenotype>, WidthPath) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = if lwas { l } else { 1 };
    let genotypes = (0..count).map(|_| random_cell(n, &mut rng)).collect();
    let path = random_path(l, &mut rng);
    (genotypes, path)
}

fn random_cell(n: usize, rng: &mut impl Rng) -> CellGenotype {
    let picks = (0..n)
        .map(|node| {
            let inputs = 2 + node;
            // Unrank a uniform draw over the C(inputs, 2) unordered pairs.
            let pairs = inputs * (inputs - 1) / 2;
            let mut idx = rng.gen_range(0..pairs);
            let mut a = 0;
            while idx >= inputs - 1 - a {
                idx -= inputs - 1 - a;
                a += 1;
            }
            let b = a + 1 + idx;
            let mut op = || {
                OpKind::from_ordinal(rng.gen_range(0..OpKind::None.ordinal()))
                    .expect("ordinal below none")
            };
            [Pick { input: a, op: op() }, Pick { input: b, op: op() }]
        })
        .collect();
    let g = CellGenotype { n, picks };
    debug_assert!(g.validate().is_ok());
    g
}

fn random_path(l: usize, rng: &mut impl Rng) -> WidthPath {
    // suffix[layer][level] = number of valid completions from that state.
    let mut suffix = vec![vec![0u64; 3]; l];
    for level in 0..levels_at(l - 1) {
        suffix[l - 1][level] = 1;
    }
    for layer in (0..l.saturating_sub(1)).rev() {
        for level in 0..levels_at(layer) {
            let mut total = 0;
            for next in 0..levels_at(layer + 1) {
                if next.abs_diff(level) <= 1 {
                    total += suffix[layer + 1][next];
                }
            }
            suffix[layer][level] = total;
        }
    }
    let total: u64 = (0..levels_at(0)).map(|level| suffix[0][level]).sum();
    let mut rank = rng.gen_range(0..total);
    let mut levels = Vec::with_capacity(l);
    for layer in 0..l {
        for level in 0..levels_at(layer) {
            let reachable = layer == 0
                || level.abs_diff(*levels.last().expect("previous level")) <= 1;
            if !reachable {
                continue;
            }
            if rank < suffix[layer][level] {
                levels.push(level);
                break;
            }
            rank -= suffix[layer][level];
        }
    }
    let path = WidthPath { levels };
    debug_assert!(path.validate().is_ok());
    path
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> CellGenotype {
        CellGenotype {
            n: 2,
            picks: vec![
                [
                    Pick { input: 0, op: OpKind::Conv3 },
                    Pick { input: 1, op: OpKind::Skip },
                ],
                [
                    Pick { input: 1, op: OpKind::Sep5 },
                    Pick { input: 2, op: OpKind::Dil3 },
                ],
            ],
        }
    }

    #[test]
    fn json_schema_is_stable() {
        let g = sample();
        let text = g.to_json();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(value["version"], 1);
        assert_eq!(value["N"], 2);
        assert_eq!(value["picks"][0][0][0], 0);
        assert_eq!(value["picks"][0][0][1], 0);
        assert_eq!(value["picks"][0][1][1], 5);
        assert_eq!(CellGenotype::from_json(&text).unwrap(), g);
    }

    #[test]
    fn validation_rejects_structural_breaks() {
        let mut g = sample();
        g.picks[1][1].input = 9;
        assert!(g.validate().is_err());
        let mut g = sample();
        g.picks[0][0].op = OpKind::None;
        assert!(g.validate().is_err());
        let mut g = sample();
        g.picks[1][0].input = 2;
        assert!(g.validate().is_err(), "duplicate input must fail");
        let mut g = sample();
        g.picks.pop();
        assert!(g.validate().is_err());
    }

    #[test]
    fn replace_op_changes_exactly_one_pick() {
        let g = sample();
        let edited = perturb_genotype(
            &g,
            GenotypeEdit::ReplaceOp { node: 1, pick: 0, op: OpKind::Sep3 },
        )
        .unwrap();
        assert_eq!(edited.picks[1][0].op, OpKind::Sep3);
        let mut diff = 0;
        for (a, b) in g.picks.iter().flatten().zip(edited.picks.iter().flatten()) {
            if a != b {
                diff += 1;
            }
        }
        assert_eq!(diff, 1);
    }

    #[test]
    fn rewire_to_invalid_input_fails() {
        let g = sample();
        assert!(perturb_genotype(
            &g,
            GenotypeEdit::RewireInput { node: 0, pick: 0, input: 5 },
        )
        .is_err());
        // Rewiring onto the sibling pick's input breaks distinctness.
        assert!(perturb_genotype(
            &g,
            GenotypeEdit::RewireInput { node: 0, pick: 0, input: 1 },
        )
        .is_err());
    }

    #[test]
    fn edited_genotype_round_trips_through_json() {
        let g = sample();
        let edited = perturb_genotype(
            &g,
            GenotypeEdit::ReplaceOp { node: 0, pick: 1, op: OpKind::Dil5 },
        )
        .unwrap();
        assert_eq!(CellGenotype::from_json(&edited.to_json()).unwrap(), edited);
    }

    #[test]
    fn width_path_validation() {
        assert!(WidthPath { levels: vec![0, 1, 2] }.validate().is_ok());
        assert!(WidthPath { levels: vec![2, 1, 0] }.validate().is_err(), "layer 0 lacks level 2");
        assert!(WidthPath { levels: vec![0, 2] }.validate().is_err(), "step of 2");
        assert!(WidthPath { levels: vec![] }.validate().is_err());
        let p = WidthPath { levels: vec![1, 2, 2] };
        assert_eq!(WidthPath::from_json(&p.to_json()).unwrap(), p);
    }

    #[test]
    fn random_genotypes_are_reproducible_and_valid() {
        let (ga, pa) = random_genotype(4, 3, true, 77);
        let (gb, pb) = random_genotype(4, 3, true, 77);
        assert_eq!(ga, gb);
        assert_eq!(pa, pb);
        assert_eq!(ga.len(), 3);
        let (gs, _) = random_genotype(4, 3, false, 77);
        assert_eq!(gs.len(), 1);
        for seed in 0..1000 {
            let (gs, path) = random_genotype(3, 4, true, seed);
            for g in &gs {
                g.validate().unwrap();
                for pair in &g.picks {
                    assert!(pair.iter().all(|p| p.op != OpKind::None));
                }
            }
            path.validate().unwrap();
        }
    }

    #[test]
    fn random_paths_cover_the_space_uniformly() {
        // All 2·(3+2+2)… valid L=2 paths: from 0 → {0,1}; from 1 → {0,1,2};
        // five in total. A uniform sampler should hit each about 1/5 of the
        // time.
        let mut counts = std::collections::HashMap::new();
        for seed in 0..5000 {
            let (_, p) = random_genotype(1, 2, false, seed);
            *counts.entry(p.levels.clone()).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 5);
        for (&ref path, &c) in &counts {
            let frac = c as f64 / 5000.0;
            assert!((frac - 0.2).abs() < 0.03, "{path:?} drawn {frac}");
        }
    }

    #[test]
    fn dot_export_lists_each_pick_once() {
        let g = sample();
        let dot = g.to_dot("cell");
        assert!(dot.contains("in0 -> n0 [label=\"conv_3x3\"]"));
        assert!(dot.contains("in1 -> n0 [label=\"skip\"]"));
        assert!(dot.contains("n0 -> n1 [label=\"dil_3x3\"]"));
        assert!(dot.contains("n1 -> out"));
        assert_eq!(dot.matches("-> n1 ").count(), 2);
    }
}
