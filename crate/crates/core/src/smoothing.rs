//! Heat-diffusion smoothing over the graph of group elements.
//!
//! A mask that is a convex combination `Σ w_g M_g` of action masks can be
//! smoothed either on the weights (diffusion over the group graph) or
//! directly on the mask: left-multiplying by a generator mask `E` moves the
//! weight of `g` onto `e ∘ g`, so averaging `E · M` over a symmetric
//! generator set is one diffusion step.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::experts::ExpertFamily;
use crate::lattice::{LatticeAction, LatticeShape};
use crate::mask::{action_mask, AttentionMask};
use crate::matrix::DenseMatrix;

pub const DEFAULT_LAMBDA: f64 = 0.5;
pub const DEFAULT_STEPS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothingConfig {
    pub enabled: bool,
    pub lambda: f64,
    pub steps: usize,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            lambda: DEFAULT_LAMBDA,
            steps: DEFAULT_STEPS,
        }
    }
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "smoothing lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Group elements of one family with the edges `g → e ∘ g` for primitive `e`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupGraph {
    nodes: Vec<LatticeAction>,
    neighbors: Vec<Vec<usize>>,
}

impl GroupGraph {
    fn from_edges(nodes: Vec<LatticeAction>, edges: &[(usize, usize)]) -> Self {
        let mut neighbors = vec![Vec::new(); nodes.len()];
        for &(a, b) in edges {
            if a != b && !neighbors[a].contains(&b) {
                neighbors[a].push(b);
                neighbors[b].push(a);
            }
        }
        Self { nodes, neighbors }
    }

    /// Path over scale factors in the given order; factor 1 is the identity.
    pub fn scale_path(factors: &[usize]) -> Self {
        let nodes = factors
            .iter()
            .map(|&h| {
                if h == 1 {
                    LatticeAction::Identity
                } else {
                    LatticeAction::scale_up([h])
                }
            })
            .collect();
        let edges: Vec<(usize, usize)> = (1..factors.len()).map(|i| (i - 1, i)).collect();
        Self::from_edges(nodes, &edges)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[LatticeAction] {
        &self.nodes
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.neighbors[node].len()
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn is_connected(&self) -> bool {
        if self.nodes.is_empty() {
            return true;
        }
        let mut seen = vec![false; self.len()];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &u in &self.neighbors[v] {
                if !seen[u] {
                    seen[u] = true;
                    stack.push(u);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

pub fn group_graph(family: ExpertFamily, shape: &LatticeShape) -> Result<GroupGraph> {
    match family {
        ExpertFamily::Translate => {
            let dims = shape.dims();
            let nodes = (0..shape.n())
                .map(|k| {
                    let delta: Vec<i64> = shape.multi_index(k).iter().map(|&i| i as i64).collect();
                    LatticeAction::translate(delta)
                })
                .collect();
            let mut edges = Vec::new();
            for k in 0..shape.n() {
                let idx = shape.multi_index(k);
                for (d, &l) in dims.iter().enumerate() {
                    let mut next = idx.clone();
                    next[d] = (idx[d] + 1) % l;
                    edges.push((k, shape.flat_index(&next)));
                }
            }
            Ok(GroupGraph::from_edges(nodes, &edges))
        }
        ExpertFamily::Rotate => {
            LatticeAction::rotate(1).validate(shape)?;
            let nodes = (0..4u8)
                .map(|k| {
                    if k == 0 {
                        LatticeAction::Identity
                    } else {
                        LatticeAction::rotate(k)
                    }
                })
                .collect();
            Ok(GroupGraph::from_edges(nodes, &[(0, 1), (1, 2), (2, 3), (3, 0)]))
        }
        ExpertFamily::Reflect => {
            if shape.rank() != 2 {
                return Err(Error::InvalidShape(format!(
                    "the reflection graph is defined on 2-D lattices, got {shape}"
                )));
            }
            let nodes = vec![
                LatticeAction::Identity,
                LatticeAction::flip([0]),
                LatticeAction::flip([0, 1]),
                LatticeAction::flip([1]),
            ];
            Ok(GroupGraph::from_edges(nodes, &[(0, 1), (1, 2), (2, 3), (3, 0)]))
        }
        ExpertFamily::Scale => {
            let max = shape.dims().iter().copied().min().unwrap_or(1).max(1);
            let factors: Vec<usize> = (1..=max).collect();
            Ok(GroupGraph::scale_path(&factors))
        }
    }
}

/// One step `w_i ← (1 − λ) w_i + λ Σ_{j ~ i} w_j / deg(j)`; on regular graphs
/// this is plain neighbourhood averaging.
pub fn heat_step(graph: &GroupGraph, weights: &[f64], lambda: f64) -> Vec<f64> {
    let mut out: Vec<f64> = weights.iter().map(|w| (1.0 - lambda) * w).collect();
    for (j, &w) in weights.iter().enumerate() {
        let deg = graph.degree(j);
        if deg == 0 {
            out[j] += lambda * w;
            continue;
        }
        let share = lambda * w / deg as f64;
        for &i in graph.neighbors(j) {
            out[i] += share;
        }
    }
    out
}

pub fn heat_smooth(graph: &GroupGraph, weights: &[f64], steps: usize, lambda: f64) -> Result<Vec<f64>> {
    if weights.len() != graph.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} weights for {} graph nodes",
            weights.len(),
            graph.len()
        )));
    }
    if weights.iter().any(|&w| !(w >= 0.0)) {
        return Err(Error::Validation {
            location: "heat_smooth".into(),
            message: "weights must be nonnegative".into(),
        });
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Validation {
            location: "heat_smooth".into(),
            message: format!("weights sum to {total}, not 1"),
        });
    }
    let mut w = weights.to_vec();
    for _ in 0..steps {
        w = heat_step(graph, &w, lambda);
    }
    Ok(w)
}

/// The linear map of `steps` diffusion steps: `smoothed = H · weights`.
pub fn heat_matrix(graph: &GroupGraph, steps: usize, lambda: f64) -> DenseMatrix {
    let p = graph.len();
    let mut h = DenseMatrix::zeros(p, p);
    for j in 0..p {
        let mut basis = vec![0.0; p];
        basis[j] = 1.0;
        for _ in 0..steps {
            basis = heat_step(graph, &basis, lambda);
        }
        for (i, v) in basis.into_iter().enumerate() {
            h.set(i, j, v);
        }
    }
    h
}

/// `Σ_g w_g M_g` over the graph's nodes.
pub fn weighted_mask(graph: &GroupGraph, weights: &[f64], shape: &LatticeShape) -> Result<AttentionMask> {
    let n = shape.n();
    let mut acc = DenseMatrix::zeros(n, n);
    for (action, &w) in graph.nodes().iter().zip(weights) {
        if w != 0.0 {
            acc.add_scaled_in_place(action_mask(action, shape)?.matrix(), w);
        }
    }
    AttentionMask::new(acc)
}

/// Row maps of the symmetric generator set used for mask-level smoothing.
pub fn generator_maps(family: ExpertFamily, shape: &LatticeShape) -> Result<Vec<Rc<Vec<usize>>>> {
    let actions: Vec<LatticeAction> = match family {
        ExpertFamily::Translate => (0..shape.rank())
            .flat_map(|d| {
                [1i64, -1].into_iter().map(move |s| {
                    let mut delta = vec![0i64; shape.rank()];
                    delta[d] = s;
                    LatticeAction::translate(delta)
                })
            })
            .collect(),
        ExpertFamily::Rotate => vec![LatticeAction::rotate(1), LatticeAction::rotate(3)],
        ExpertFamily::Reflect => (0..shape.rank()).map(|d| LatticeAction::flip([d])).collect(),
        ExpertFamily::Scale => {
            return Err(Error::InvalidAction(
                "scaling is smoothed on its factor distribution".into(),
            ))
        }
    };
    actions
        .iter()
        .map(|a| a.source_map(shape).map(Rc::new))
        .collect()
}

/// `M ← (1 − λ) M + λ · mean_e (E · M)`, `steps` times.
pub fn smooth_mask(mask: &DenseMatrix, maps: &[Rc<Vec<usize>>], steps: usize, lambda: f64) -> DenseMatrix {
    let mut m = mask.clone();
    for _ in 0..steps {
        let mut next = m.scale(1.0 - lambda);
        for map in maps {
            next.add_scaled_in_place(&m.gather_rows(map), lambda / maps.len() as f64);
        }
        m = next;
    }
    m
}

/// Tape version of [`smooth_mask`].
pub fn smooth_mask_on_tape(
    tape: &mut Tape,
    mask: Var,
    maps: &[Rc<Vec<usize>>],
    config: &SmoothingConfig,
) -> Result<Var> {
    let mut m = mask;
    for _ in 0..config.steps {
        let mut acc: Option<Var> = None;
        for map in maps {
            let moved = tape.gather_rows(m, map.clone())?;
            acc = Some(match acc {
                None => moved,
                Some(a) => tape.add(a, moved)?,
            });
        }
        let Some(acc) = acc else { break };
        let avg = tape.scale(acc, config.lambda / maps.len() as f64);
        let keep = tape.scale(m, 1.0 - config.lambda);
        m = tape.add(keep, avg)?;
    }
    Ok(m)
}

/// Mean cross-entropy of per-cell logits against categorical targets.
pub fn cross_entropy(logits: &DenseMatrix, targets: &[usize]) -> Result<f64> {
    if logits.rows() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logit rows for {} targets",
            logits.rows(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (k, &t) in targets.iter().enumerate() {
        let row = logits.row(k);
        if t >= row.len() {
            return Err(Error::ShapeMismatch(format!(
                "target {t} for {} classes",
                row.len()
            )));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    Ok(total / targets.len() as f64)
}

/// Sum of the mean cross-entropies of the plain and smoothed heads.
pub fn dual_loss(plain: &DenseMatrix, smooth: &DenseMatrix, targets: &[usize]) -> Result<f64> {
    if plain.shape() != smooth.shape() {
        return Err(Error::ShapeMismatch(format!(
            "plain logits {:?} and smoothed logits {:?}",
            plain.shape(),
            smooth.shape()
        )));
    }
    Ok(cross_entropy(plain, targets)? + cross_entropy(smooth, targets)?)
}
