//! Architecture extraction from trained logits: top-2 edge selection per
//! node (α) and maximum-probability width-path decoding (β), with an
//! exhaustive oracle for the latter.

use crate::cells::{AlphaSet, OpKind, OP_COUNT};
use crate::error::DecodeError;
use crate::genotype::{CellGenotype, Pick, WidthPath};
use crate::scalar::Scalar;
use crate::supernet::levels_at;

fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn log_softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - lse).collect()
}

/// Discretizes one α set: every node keeps its two highest-scoring incoming
/// edges, where an edge scores the maximum softmax probability over its
/// non-`None` operators and carries that arg-max operator. Ties fall to the
/// lower input index, then the lower operator ordinal.
pub fn derive_cell<F: Scalar>(alpha: &AlphaSet<F>) -> CellGenotype {
    let logits: Vec<Vec<f64>> = alpha
        .logits()
        .iter()
        .map(|v| v.iter().map(|&x| Scalar::to_f64(x)).collect())
        .collect();
    derive_from_logits(alpha.n_nodes, &logits)
}

/// The same discretization on raw per-edge logit rows (node 0's edges first).
pub fn derive_from_logits(n_nodes: usize, logits: &[Vec<f64>]) -> CellGenotype {
    let mut rows = logits.iter();
    let picks = (0..n_nodes)
        .map(|node| {
            let scored: Vec<(usize, f64, OpKind)> = (0..2 + node)
                .map(|input| {
                    let row = rows.next().expect("one logit row per edge");
                    assert_eq!(row.len(), OP_COUNT, "malformed α row");
                    assert!(row.iter().all(|x| x.is_finite()), "non-finite α");
                    let probs = softmax(row);
                    let mut best_op = OpKind::Conv3;
                    let mut best_p = f64::NEG_INFINITY;
                    for kind in OpKind::ALL {
                        if kind == OpKind::None {
                            continue;
                        }
                        let p = probs[kind.ordinal()];
                        if p > best_p {
                            best_p = p;
                            best_op = kind;
                        }
                    }
                    (input, best_p, best_op)
                })
                .collect();
            // Two best edges; ascending input order breaks score ties.
            let mut order: Vec<usize> = (0..scored.len()).collect();
            order.sort_by(|&a, &b| {
                scored[b].1.partial_cmp(&scored[a].1).expect("finite scores").then(a.cmp(&b))
            });
            let mut kept = [order[0], order[1]];
            kept.sort_unstable();
            kept.map(|i| Pick { input: scored[i].0, op: scored[i].2 })
        })
        .collect();
    let g = CellGenotype { n: n_nodes, picks };
    g.validate().expect("derived genotype is structurally valid");
    g
}

/// Per-layer log-probability tables from raw β logits, as produced by
/// `SuperNet::beta_logits`: layer 0 is one two-level vector, later layers one
/// three-slot vector per target level.
fn log_tables<F: Scalar>(betas: &[Vec<Vec<F>>]) -> Vec<Vec<Vec<f64>>> {
    betas
        .iter()
        .map(|layer| {
            layer
                .iter()
                .map(|v| {
                    log_softmax(&v.iter().map(|&x| Scalar::to_f64(x)).collect::<Vec<f64>>())
                })
                .collect()
        })
        .collect()
}

/// The source-level slot a transition occupies in the target's β vector, if
/// the step is admissible.
fn slot(source: usize, target: usize) -> Option<usize> {
    (source + 1).checked_sub(target).filter(|&s| s < 3)
}

/// Maximum-probability width path by dynamic programming over log
/// probabilities. Ties prefer the lower level, both at each step and at the
/// final layer, so decoding is deterministic.
pub fn viterbi_widths<F: Scalar>(betas: &[Vec<Vec<F>>]) -> WidthPath {
    let tables = log_tables(betas);
    let l = tables.len();
    assert!(l >= 1, "no layers to decode");
    let mut score = vec![f64::NEG_INFINITY; 3];
    score[..2].copy_from_slice(&tables[0][0][..2]);
    let mut back: Vec<[usize; 3]> = Vec::with_capacity(l);
    for layer in 1..l {
        let mut next = vec![f64::NEG_INFINITY; 3];
        let mut pointers = [usize::MAX; 3];
        for target in 0..levels_at(layer) {
            for source in 0..levels_at(layer - 1) {
                let Some(s) = slot(source, target) else { continue };
                let cand = score[source] + tables[layer][target][s];
                if cand > next[target] {
                    next[target] = cand;
                    pointers[target] = source;
                }
            }
        }
        score = next;
        back.push(pointers);
    }
    let mut best = 0;
    for level in 1..3 {
        if score[level] > score[best] {
            best = level;
        }
    }
    let mut levels = vec![best];
    for pointers in back.iter().rev() {
        best = pointers[best];
        levels.push(best);
    }
    levels.reverse();
    let path = WidthPath { levels };
    debug_assert!(path.validate().is_ok());
    path
}

const ENUM_MAX_LAYERS: usize = 12;

/// Exhaustive reference for [`viterbi_widths`]: scores every valid path and
/// applies the identical tie-break (among maximal paths, the smallest when
/// read back-to-front).
pub fn brute_force_widths<F: Scalar>(betas: &[Vec<Vec<F>>]) -> Result<WidthPath, DecodeError> {
    let l = betas.len();
    if l > ENUM_MAX_LAYERS {
        return Err(DecodeError::TooManyLayers { max: ENUM_MAX_LAYERS, got: l });
    }
    let tables = log_tables(betas);
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut stack = vec![Vec::with_capacity(l)];
    while let Some(prefix) = stack.pop() {
        if prefix.len() == l {
            // Left-to-right summation mirrors the DP's association order, so
            // equal-score paths compare bit-identically.
            let mut total = tables[0][0][prefix[0]];
            for layer in 1..l {
                let s = slot(prefix[layer - 1], prefix[layer]).expect("valid step");
                total += tables[layer][prefix[layer]][s];
            }
            let wins = match &best {
                None => true,
                Some((score, path)) => {
                    total > *score
                        || (total == *score
                            && prefix.iter().rev().lt(path.iter().rev()))
                }
            };
            if wins {
                best = Some((total, prefix));
            }
            continue;
        }
        let layer = prefix.len();
        for level in 0..levels_at(layer) {
            if layer > 0 && level.abs_diff(prefix[layer - 1]) > 1 {
                continue;
            }
            let mut next = prefix.clone();
            next.push(level);
            stack.push(next);
        }
    }
    let (_, levels) = best.expect("at least one valid path");
    Ok(WidthPath { levels })
}
