//! Gated convolutional mask experts.
//!
//! Every expert starts from the identity and applies a chain of gated
//! layers `M ← M + α (K ⋆ M − M)`, where `K ⋆ M` is the frozen layer kernel
//! applied to the rows of `M`. Layers acting on a single lattice dimension
//! run on that dimension's small mask and the per-dimension results are
//! joined with a Kronecker product; layers acting on the whole lattice
//! (rotation, diagonal reflection) run on the joined mask.
//!
//! For translation, rotation and reflection every binary gate pattern lands on
//! a group element, so the chain is also tracked as a distribution over the
//! elements reachable from the identity. The model builds masks from that
//! distribution, which is equal to the layer-by-layer chain and much cheaper
//! on large lattices.

use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tape, Var};
use crate::error::{Error, Result};
use crate::lattice::{LatticeAction, LatticeShape, ScaleDirection};
use crate::mask::{conv_kernels_for, AttentionMask, KernelFamily};
use crate::matrix::DenseMatrix;
use crate::smoothing::{self, GroupGraph, SmoothingConfig};

pub const GATE_HIDDEN: usize = 64;
pub const DEFAULT_SCALE_FACTORS: [usize; 4] = [2, 3, 4, 5];
pub const DEFAULT_ROTATION_TURNS: [u8; 2] = [1, 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertFamily {
    Translate,
    Rotate,
    Reflect,
    Scale,
}

impl ExpertFamily {
    pub const ALL: [ExpertFamily; 4] = [Self::Translate, Self::Rotate, Self::Reflect, Self::Scale];

    pub fn name(self) -> &'static str {
        match self {
            Self::Translate => "translate",
            Self::Rotate => "rotate",
            Self::Reflect => "reflect",
            Self::Scale => "scale",
        }
    }
}

impl fmt::Display for ExpertFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExpertFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown expert family `{s}`")))
    }
}

/// Gate values, one per gated layer (plus the transpose gate for scaling).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateVector(pub Vec<f64>);

impl GateVector {
    pub fn constant(len: usize, value: f64) -> Self {
        Self(vec![value; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    fn to_row(&self) -> DenseMatrix {
        DenseMatrix::from_vec(1, self.0.len(), self.0.clone()).expect("length matches")
    }
}

/// Thresholds gates at 0.5; a tie goes to 1.
pub fn discretize_gates(gates: &GateVector) -> GateVector {
    GateVector(
        gates
            .0
            .iter()
            .map(|&g| if g >= 0.5 { 1.0 } else { 0.0 })
            .collect(),
    )
}

/// Layer-count and kernel choices for the expert stacks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertOptions {
    /// Translation layers per dimension; `None` uses `⌈log2 l⌉`.
    pub translate_levels: Option<u32>,
    /// Up-scaling factor of each scale layer, applied to every dimension.
    pub scale_factors: Vec<usize>,
    /// Quarter turns of each rotation layer.
    pub rotation_turns: Vec<u8>,
}

impl Default for ExpertOptions {
    fn default() -> Self {
        Self {
            translate_levels: None,
            scale_factors: DEFAULT_SCALE_FACTORS.to_vec(),
            rotation_turns: DEFAULT_ROTATION_TURNS.to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Target {
    Dim(usize),
    Full,
}

#[derive(Clone, Debug)]
struct GatedLayer {
    target: Target,
    index: Rc<Vec<usize>>,
    /// Row map of the down-scaling partner layer.
    down: Option<Rc<Vec<usize>>>,
    factor: usize,
}

/// Group elements reachable from the identity, with the moves each layer
/// and each smoothing generator induces on them.
#[derive(Debug)]
struct Elements {
    /// Row source map of every element; element 0 is the identity.
    maps: Rc<Vec<Vec<usize>>>,
    /// Per layer: `from[h]` is the element that the layer sends to `h`.
    layer_from: Vec<Rc<Vec<usize>>>,
    /// Per generator, in the same convention.
    generator_from: Vec<Rc<Vec<usize>>>,
}

/// Full-lattice row map of a per-dimension index.
fn lift(shape: &LatticeShape, d: usize, index: &[usize]) -> Vec<usize> {
    (0..shape.n())
        .map(|k| {
            let mut m = shape.multi_index(k);
            m[d] = index[m[d]];
            shape.flat_index(&m)
        })
        .collect()
}

impl Elements {
    fn build(shape: &LatticeShape, layers: &[Vec<usize>], generators: &[Rc<Vec<usize>>]) -> Self {
        let actions: Vec<&[usize]> = layers
            .iter()
            .map(Vec::as_slice)
            .chain(generators.iter().map(|g| g.as_slice()))
            .collect();
        let mut maps: Vec<Vec<usize>> = vec![(0..shape.n()).collect()];
        let mut lookup: HashMap<Vec<usize>, usize> = HashMap::from([(maps[0].clone(), 0)]);
        let mut to: Vec<Vec<usize>> = vec![Vec::new(); actions.len()];
        let mut next = 0;
        while next < maps.len() {
            for (a, action) in actions.iter().enumerate() {
                let composed: Vec<usize> = action.iter().map(|&k| maps[next][k]).collect();
                let id = match lookup.get(&composed) {
                    Some(&id) => id,
                    None => {
                        maps.push(composed.clone());
                        lookup.insert(composed, maps.len() - 1);
                        maps.len() - 1
                    }
                };
                to[a].push(id);
            }
            next += 1;
        }
        let invert = |fwd: &Vec<usize>| {
            let mut from = vec![0; fwd.len()];
            for (g, &h) in fwd.iter().enumerate() {
                from[h] = g;
            }
            Rc::new(from)
        };
        let mut from: Vec<Rc<Vec<usize>>> = to.iter().map(invert).collect();
        let generator_from = from.split_off(layers.len());
        Self {
            maps: Rc::new(maps),
            layer_from: from,
            generator_from,
        }
    }
}

/// A family's frozen layer chain on one lattice shape.
#[derive(Clone, Debug)]
pub struct ExpertStack {
    family: ExpertFamily,
    shape: LatticeShape,
    layers: Vec<GatedLayer>,
    transpose_gate: bool,
    elements: Option<Rc<Elements>>,
}

fn layer_index(family: KernelFamily, n: usize) -> Result<Rc<Vec<usize>>> {
    Ok(Rc::new(conv_kernels_for(family, n)?.gather_index()?))
}

fn square_side(shape: &LatticeShape, what: &str) -> Result<usize> {
    if shape.rank() == 2 && shape.is_square() {
        Ok(shape.dims()[0])
    } else {
        Err(Error::InvalidShape(format!(
            "{what} needs a square 2-D lattice, got {shape}"
        )))
    }
}

impl ExpertStack {
    pub fn new(family: ExpertFamily, shape: &LatticeShape) -> Result<Self> {
        Self::with_options(family, shape, &ExpertOptions::default())
    }

    pub fn with_options(
        family: ExpertFamily,
        shape: &LatticeShape,
        options: &ExpertOptions,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let mut transpose_gate = false;
        let per_dim = |target: usize, kernel: KernelFamily| -> Result<GatedLayer> {
            Ok(GatedLayer {
                target: Target::Dim(target),
                index: layer_index(kernel, shape.dims()[target])?,
                down: None,
                factor: 1,
            })
        };
        match family {
            ExpertFamily::Translate => {
                for (d, &l) in shape.dims().iter().enumerate() {
                    let levels = options
                        .translate_levels
                        .unwrap_or_else(|| l.next_power_of_two().trailing_zeros());
                    for level in 0..levels {
                        layers.push(per_dim(d, KernelFamily::translate_level(level))?);
                    }
                }
            }
            ExpertFamily::Rotate => {
                let side = square_side(shape, "rotation expert")?;
                for &quarter_turns in &options.rotation_turns {
                    LatticeAction::rotate(quarter_turns).validate(shape)?;
                    layers.push(GatedLayer {
                        target: Target::Full,
                        index: layer_index(
                            KernelFamily::Rotate {
                                side,
                                quarter_turns,
                            },
                            shape.n(),
                        )?,
                        down: None,
                        factor: 1,
                    });
                }
            }
            ExpertFamily::Reflect => {
                for d in 0..shape.rank() {
                    layers.push(per_dim(d, KernelFamily::Reflect)?);
                }
                if shape.rank() == 2 && shape.is_square() {
                    layers.push(GatedLayer {
                        target: Target::Full,
                        index: layer_index(
                            KernelFamily::Diagonal {
                                side: shape.dims()[0],
                            },
                            shape.n(),
                        )?,
                        down: None,
                        factor: 1,
                    });
                }
            }
            ExpertFamily::Scale => {
                if options.scale_factors.is_empty() {
                    return Err(Error::Config("scale expert needs at least one factor".into()));
                }
                for d in 0..shape.rank() {
                    for &factor in &options.scale_factors {
                        if factor < 2 {
                            return Err(Error::InvalidFactor(factor));
                        }
                        let l = shape.dims()[d];
                        let kernel = |direction| KernelFamily::Scale { factor, direction };
                        layers.push(GatedLayer {
                            target: Target::Dim(d),
                            index: layer_index(kernel(ScaleDirection::Up), l)?,
                            down: Some(layer_index(kernel(ScaleDirection::Down), l)?),
                            factor,
                        });
                    }
                }
                transpose_gate = true;
            }
        }
        let elements = if family == ExpertFamily::Scale {
            None
        } else {
            let lifted: Vec<Vec<usize>> = layers
                .iter()
                .map(|layer| match layer.target {
                    Target::Dim(d) => lift(shape, d, &layer.index),
                    Target::Full => layer.index.to_vec(),
                })
                .collect();
            let generators = smoothing::generator_maps(family, shape)?;
            Some(Rc::new(Elements::build(shape, &lifted, &generators)))
        };
        Ok(Self {
            family,
            shape: shape.clone(),
            layers,
            transpose_gate,
            elements,
        })
    }

    pub fn family(&self) -> ExpertFamily {
        self.family
    }

    pub fn shape(&self) -> &LatticeShape {
        &self.shape
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn gate_count(&self) -> usize {
        self.layers.len() + usize::from(self.transpose_gate)
    }

    pub fn has_transpose_gate(&self) -> bool {
        self.transpose_gate
    }

    fn check_gates(&self, tape: &Tape, gates: Var) -> Result<()> {
        let shape = tape.value(gates).shape();
        if shape != (1, self.gate_count()) {
            return Err(Error::ShapeMismatch(format!(
                "{} expert has {} gates, got {shape:?}",
                self.family,
                self.gate_count()
            )));
        }
        Ok(())
    }

    fn gated(
        tape: &mut Tape,
        m: Var,
        index: &Rc<Vec<usize>>,
        gate: Var,
    ) -> Result<Var> {
        let moved = tape.gather_rows(m, index.clone())?;
        let step = tape.sub(moved, m)?;
        let step = tape.scalar_mul(gate, step)?;
        tape.add(m, step)
    }

    /// Runs the chain for one branch (`down = false` for the forward
    /// kernels, `true` for the scale expert's down-scaling partners).
    fn chain(&self, tape: &mut Tape, gates: Var, down: bool) -> Result<Var> {
        let dims = self.shape.dims();
        let mut per_dim: Vec<Var> = dims
            .iter()
            .map(|&l| tape.constant(DenseMatrix::identity(l)))
            .collect();
        let order: Vec<usize> = if down {
            (0..self.layers.len()).rev().collect()
        } else {
            (0..self.layers.len()).collect()
        };
        for &i in &order {
            let layer = &self.layers[i];
            if let Target::Dim(d) = layer.target {
                let index = if down {
                    layer.down.as_ref().expect("scale layers carry a partner")
                } else {
                    &layer.index
                };
                let gate = tape.element(gates, 0, i);
                per_dim[d] = Self::gated(tape, per_dim[d], index, gate)?;
            }
        }
        let mut mask = per_dim[0];
        for &next in &per_dim[1..] {
            mask = tape.kron(mask, next);
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.target == Target::Full {
                let gate = tape.element(gates, 0, i);
                mask = Self::gated(tape, mask, &layer.index, gate)?;
            }
        }
        Ok(mask)
    }

    /// The soft mask for a `1 × gate_count` gate node.
    pub fn build(&self, tape: &mut Tape, gates: Var) -> Result<Var> {
        self.check_gates(tape, gates)?;
        match &self.elements {
            Some(elements) => {
                let dist = self.element_distribution(tape, gates, elements)?;
                tape.mix_maps(dist, elements.maps.clone(), self.shape.n())
            }
            None => self.build_layerwise(tape, gates),
        }
    }

    /// Number of group elements the chain can reach, if tracked.
    pub fn element_count(&self) -> Option<usize> {
        self.elements.as_ref().map(|e| e.maps.len())
    }

    /// `J × 1` distribution over elements after the gated chain.
    fn element_distribution(&self, tape: &mut Tape, gates: Var, elements: &Elements) -> Result<Var> {
        let mut start = DenseMatrix::zeros(elements.maps.len(), 1);
        start.set(0, 0, 1.0);
        let mut p = tape.constant(start);
        let order = (0..self.layers.len())
            .filter(|&i| self.layers[i].target != Target::Full)
            .chain((0..self.layers.len()).filter(|&i| self.layers[i].target == Target::Full));
        for i in order {
            let gate = tape.element(gates, 0, i);
            p = Self::gated(tape, p, &elements.layer_from[i], gate)?;
        }
        Ok(p)
    }

    /// The soft mask computed layer by layer on full masks.
    pub fn build_layerwise(&self, tape: &mut Tape, gates: Var) -> Result<Var> {
        self.check_gates(tape, gates)?;
        let up = self.chain(tape, gates, false)?;
        if !self.transpose_gate {
            return Ok(up);
        }
        let down = self.chain(tape, gates, true)?;
        let sigma = tape.element(gates, 0, self.layers.len());
        self.mix_directions(tape, sigma, up, down)
    }

    fn mix_directions(&self, tape: &mut Tape, sigma: Var, up: Var, down: Var) -> Result<Var> {
        let rest = tape.affine(sigma, -1.0, 1.0);
        let up = tape.scalar_mul(sigma, up)?;
        let down = tape.scalar_mul(rest, down)?;
        tape.add(up, down)
    }

    /// The heat-smoothed counterpart of [`ExpertStack::build`].
    pub fn build_smoothed(
        &self,
        tape: &mut Tape,
        gates: Var,
        config: &SmoothingConfig,
    ) -> Result<Var> {
        self.check_gates(tape, gates)?;
        match &self.elements {
            None => self.smoothed_scale(tape, gates, config),
            Some(elements) => {
                let dist = self.element_distribution(tape, gates, elements)?;
                let dist =
                    smoothing::smooth_mask_on_tape(tape, dist, &elements.generator_from, config)?;
                tape.mix_maps(dist, elements.maps.clone(), self.shape.n())
            }
        }
    }

    /// Scaling is smoothed on the distribution over achievable factors: each
    /// gate pattern of a dimension selects the product of its factors.
    fn smoothed_scale(
        &self,
        tape: &mut Tape,
        gates: Var,
        config: &SmoothingConfig,
    ) -> Result<Var> {
        let dims = self.shape.dims();
        let mut up_masks = Vec::with_capacity(dims.len());
        let mut down_masks = Vec::with_capacity(dims.len());
        for (d, &l) in dims.iter().enumerate() {
            let members: Vec<usize> = (0..self.layers.len())
                .filter(|&i| self.layers[i].target == Target::Dim(d))
                .collect();
            let products: Vec<usize> = (0..1usize << members.len())
                .map(|pattern| {
                    members
                        .iter()
                        .enumerate()
                        .filter(|(bit, _)| pattern >> bit & 1 == 1)
                        .map(|(_, &i)| self.layers[i].factor)
                        .product()
                })
                .collect();
            let mut factors = products.clone();
            factors.sort_unstable();
            factors.dedup();
            let graph = GroupGraph::scale_path(&factors);
            let heat = smoothing::heat_matrix(&graph, config.steps, config.lambda);

            // distribution over factors as a 1 × P row
            let mut dist: Option<Var> = None;
            for (pattern, product) in products.iter().enumerate() {
                let mut prob: Option<Var> = None;
                for (bit, &i) in members.iter().enumerate() {
                    let g = tape.element(gates, 0, i);
                    let term = if pattern >> bit & 1 == 1 {
                        g
                    } else {
                        tape.affine(g, -1.0, 1.0)
                    };
                    prob = Some(match prob {
                        None => term,
                        Some(p) => tape.hadamard(p, term)?,
                    });
                }
                let node = factors.binary_search(product).expect("factor listed");
                let mut onehot = DenseMatrix::zeros(1, factors.len());
                onehot.set(0, node, 1.0);
                let onehot = tape.constant(onehot);
                let term = match prob {
                    Some(p) => tape.scalar_mul(p, onehot)?,
                    None => onehot,
                };
                dist = Some(match dist {
                    None => term,
                    Some(acc) => tape.add(acc, term)?,
                });
            }
            let dist = dist.expect("at least the empty pattern");
            let heat_t = tape.constant(heat.transpose());
            let smooth = tape.matmul(dist, heat_t)?;
            let mut up: Option<Var> = None;
            let mut down: Option<Var> = None;
            for (node, &factor) in factors.iter().enumerate() {
                let weight = tape.element(smooth, 0, node);
                let (u, dn) = scale_pair(l, factor);
                let u = tape.constant(u);
                let dn = tape.constant(dn);
                let u = tape.scalar_mul(weight, u)?;
                let dn = tape.scalar_mul(weight, dn)?;
                up = Some(match up {
                    None => u,
                    Some(acc) => tape.add(acc, u)?,
                });
                down = Some(match down {
                    None => dn,
                    Some(acc) => tape.add(acc, dn)?,
                });
            }
            up_masks.push(up.expect("nonempty factor set"));
            down_masks.push(down.expect("nonempty factor set"));
        }
        let join = |tape: &mut Tape, parts: &[Var]| {
            let mut m = parts[0];
            for &p in &parts[1..] {
                m = tape.kron(m, p);
            }
            m
        };
        let up = join(tape, &up_masks);
        let down = join(tape, &down_masks);
        let sigma = tape.element(gates, 0, self.layers.len());
        self.mix_directions(tape, sigma, up, down)
    }

    /// Gate values that make the discretized stack realize `action`, if any.
    pub fn gates_for(&self, action: &LatticeAction) -> Option<GateVector> {
        let target = crate::mask::action_mask(action, &self.shape).ok()?;
        let candidate = match (self.family, action) {
            (ExpertFamily::Translate, LatticeAction::Translate { delta }) => {
                Some(self.digit_gates(|d, l| {
                    let shift = delta.get(d).copied().unwrap_or(0).rem_euclid(l as i64) as u64;
                    Some((0..64).map(|b| (shift >> b & 1) as f64).collect())
                })?)
            }
            (ExpertFamily::Scale, LatticeAction::Scale { factors, direction }) => {
                let mut gates = self.digit_gates(|d, _| {
                    let want = factors.get(d).copied().unwrap_or(1);
                    let own: Vec<usize> = self
                        .layers
                        .iter()
                        .filter(|layer| layer.target == Target::Dim(d))
                        .map(|layer| layer.factor)
                        .collect();
                    (0..1usize << own.len())
                        .find(|&p| {
                            own.iter()
                                .enumerate()
                                .filter(|(b, _)| p >> b & 1 == 1)
                                .map(|(_, &f)| f)
                                .product::<usize>()
                                == want
                        })
                        .map(|p| (0..own.len()).map(|b| (p >> b & 1) as f64).collect())
                })?;
                gates
                    .0
                    .push(if *direction == ScaleDirection::Up { 1.0 } else { 0.0 });
                Some(gates)
            }
            _ => None,
        };
        if let Some(gates) = candidate {
            return (expert_forward(self, &gates).ok()? == target).then_some(gates);
        }
        let g = self.gate_count();
        (0..1u64 << g).find_map(|pattern| {
            let gates = GateVector((0..g).map(|b| (pattern >> b & 1) as f64).collect());
            (expert_forward(self, &gates).ok()? == target).then_some(gates)
        })
    }

    /// Concatenates per-dimension gate digits in layer order.
    fn digit_gates(
        &self,
        digits: impl Fn(usize, usize) -> Option<Vec<f64>>,
    ) -> Option<GateVector> {
        let mut gates = Vec::with_capacity(self.gate_count());
        for (d, &l) in self.shape.dims().iter().enumerate() {
            let count = self
                .layers
                .iter()
                .filter(|layer| layer.target == Target::Dim(d))
                .count();
            let own = digits(d, l)?;
            gates.extend((0..count).map(|b| own.get(b).copied().unwrap_or(0.0)));
        }
        Some(GateVector(gates))
    }
}

fn scale_pair(l: usize, factor: usize) -> (DenseMatrix, DenseMatrix) {
    let build = |direction| {
        if factor == 1 {
            return DenseMatrix::identity(l);
        }
        let action = LatticeAction::Scale {
            factors: vec![factor],
            direction,
        };
        let shape = LatticeShape::line(l).expect("positive length");
        crate::mask::action_mask(&action, &shape)
            .expect("scale factor ≥ 2")
            .into_matrix()
    };
    (build(ScaleDirection::Up), build(ScaleDirection::Down))
}

/// Evaluates an expert stack for fixed gate values.
pub fn expert_forward(stack: &ExpertStack, gates: &GateVector) -> Result<AttentionMask> {
    if gates.len() != stack.gate_count() {
        return Err(Error::ShapeMismatch(format!(
            "{} expert has {} gates, got {}",
            stack.family,
            stack.gate_count(),
            gates.len()
        )));
    }
    let mut tape = Tape::new();
    let g = tape.constant(gates.to_row());
    let mask = stack.build(&mut tape, g)?;
    AttentionMask::new(tape.value(mask).clone())
}

/// Smoothed mask for fixed gate values.
pub fn expert_forward_smoothed(
    stack: &ExpertStack,
    gates: &GateVector,
    config: &SmoothingConfig,
) -> Result<AttentionMask> {
    let mut tape = Tape::new();
    let g = tape.constant(gates.to_row());
    let mask = stack.build_smoothed(&mut tape, g, config)?;
    AttentionMask::new(tape.value(mask).clone())
}

/// Left-to-right product of masks, clamped to `[0, 1]`.
pub fn product_of_experts(masks: &[AttentionMask]) -> Result<AttentionMask> {
    let (first, rest) = masks
        .split_first()
        .ok_or_else(|| Error::ShapeMismatch("product of no masks".into()))?;
    let mut acc = first.matrix().clone();
    for m in rest {
        acc = acc.matmul(m.matrix())?;
    }
    AttentionMask::new(acc.map(|v| v.clamp(0.0, 1.0)))
}

/// Parameters of one gate network: pooled features → tanh hidden → sigmoid gates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub w1: DenseMatrix,
    pub b1: DenseMatrix,
    pub w2: DenseMatrix,
    pub b2: DenseMatrix,
}

impl GateParams {
    pub fn zeros(features: usize, gates: usize) -> Self {
        Self {
            w1: DenseMatrix::zeros(features, GATE_HIDDEN),
            b1: DenseMatrix::zeros(1, GATE_HIDDEN),
            w2: DenseMatrix::zeros(GATE_HIDDEN, gates),
            b2: DenseMatrix::zeros(1, gates),
        }
    }

    pub fn gate_count(&self) -> usize {
        self.w2.cols()
    }
}

/// Tape handles for a [`GateParams`].
#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl GateVars {
    /// `sigmoid(tanh(f W1 + b1) W2 + b2)` for a `1 × d` feature node.
    pub fn build(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let h = tape.matmul(features, self.w1)?;
        let h = tape.add_row(h, self.b1)?;
        let h = tape.tanh(h);
        let z = tape.matmul(h, self.w2)?;
        let z = tape.add_row(z, self.b2)?;
        Ok(tape.sigmoid(z))
    }
}

pub fn gate_network(features: &[f64], params: &GateParams) -> Result<GateVector> {
    let f = DenseMatrix::from_vec(1, features.len(), features.to_vec())?;
    let h = f.matmul(&params.w1)?.add(&params.b1)?.map(f64::tanh);
    let z = h.matmul(&params.w2)?.add(&params.b2)?;
    Ok(GateVector(z.row(0).iter().map(|&v| sigmoid(v)).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::apply_action;
    use crate::mask::{action_mask, mask_from_shift, shift_vector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line(n: usize) -> LatticeShape {
        LatticeShape::line(n).unwrap()
    }

    #[test]
    fn closed_gates_give_identity() {
        for family in ExpertFamily::ALL {
            let shape = LatticeShape::grid(4, 4).unwrap();
            let stack = ExpertStack::new(family, &shape).unwrap();
            let mut gates = GateVector::constant(stack.gate_count(), 0.0);
            if stack.has_transpose_gate() {
                *gates.0.last_mut().unwrap() = 1.0;
            }
            assert_eq!(
                expert_forward(&stack, &gates).unwrap(),
                AttentionMask::identity(16),
                "{family}"
            );
        }
    }

    #[test]
    fn binary_gates_select_translation() {
        let stack = ExpertStack::new(ExpertFamily::Translate, &line(32)).unwrap();
        assert_eq!(stack.gate_count(), 5);
        // 13 = 0b01101, least significant layer first
        let gates = GateVector(vec![1.0, 0.0, 1.0, 1.0, 0.0]);
        let expected = mask_from_shift(
            &shift_vector(&LatticeAction::translate([13]), &line(32)).unwrap(),
            32,
        )
        .unwrap();
        assert_eq!(expert_forward(&stack, &gates).unwrap(), expected);
    }

    #[test]
    fn single_rotation_layer() {
        let shape = LatticeShape::grid(3, 3).unwrap();
        let stack = ExpertStack::new(ExpertFamily::Rotate, &shape).unwrap();
        let gates = GateVector(vec![1.0, 0.0]);
        let expected = mask_from_shift(
            &shift_vector(&LatticeAction::rotate(1), &shape).unwrap(),
            9,
        )
        .unwrap();
        assert_eq!(expert_forward(&stack, &gates).unwrap(), expected);
        let both = GateVector(vec![1.0, 1.0]);
        assert_eq!(
            expert_forward(&stack, &both).unwrap(),
            action_mask(&LatticeAction::rotate(3), &shape).unwrap()
        );
    }

    #[test]
    fn reflection_expert_covers_the_dihedral_group() {
        let shape = LatticeShape::grid(3, 3).unwrap();
        let rot = ExpertStack::new(ExpertFamily::Rotate, &shape).unwrap();
        let refl = ExpertStack::new(ExpertFamily::Reflect, &shape).unwrap();
        let mut masks = Vec::new();
        for pattern in 0..8u32 {
            let gates = GateVector((0..3).map(|b| f64::from(pattern >> b & 1)).collect());
            masks.push(expert_forward(&refl, &gates).unwrap());
        }
        for a in 0..masks.len() {
            for b in a + 1..masks.len() {
                assert_ne!(masks[a], masks[b]);
            }
        }
        for action in [
            LatticeAction::flip([0]),
            LatticeAction::flip([1]),
            LatticeAction::diagonal(),
            LatticeAction::rotate(2),
        ] {
            assert!(refl.gates_for(&action).is_some(), "{action}");
        }
        assert!(rot.gates_for(&LatticeAction::diagonal()).is_none());
    }

    #[test]
    fn scale_expert_up_and_down() {
        let shape = LatticeShape::grid(12, 12).unwrap();
        let stack = ExpertStack::new(ExpertFamily::Scale, &shape).unwrap();
        assert_eq!(stack.gate_count(), 9);
        for (h0, h1) in [(2, 3), (4, 5), (3, 3)] {
            for up in [true, false] {
                let action = if up {
                    LatticeAction::scale_up([h0, h1])
                } else {
                    LatticeAction::scale_down([h0, h1])
                };
                let mut gates = vec![0.0; 9];
                gates[DEFAULT_SCALE_FACTORS.iter().position(|&f| f == h0).unwrap()] = 1.0;
                gates[4 + DEFAULT_SCALE_FACTORS.iter().position(|&f| f == h1).unwrap()] = 1.0;
                gates[8] = if up { 1.0 } else { 0.0 };
                assert_eq!(
                    expert_forward(&stack, &GateVector(gates)).unwrap(),
                    action_mask(&action, &shape).unwrap(),
                    "{action}"
                );
            }
        }
    }

    #[test]
    fn discretization() {
        assert_eq!(
            discretize_gates(&GateVector(vec![0.9, 0.1])),
            GateVector(vec![1.0, 0.0])
        );
        assert_eq!(discretize_gates(&GateVector(vec![0.5])), GateVector(vec![1.0]));
    }

    #[test]
    fn every_discrete_translation_pattern_is_a_selection() {
        let stack = ExpertStack::new(ExpertFamily::Translate, &line(16)).unwrap();
        assert_eq!(stack.gate_count(), 4);
        for pattern in 0..16u32 {
            let gates = GateVector((0..4).map(|b| f64::from(pattern >> b & 1)).collect());
            let mask = expert_forward(&stack, &gates).unwrap();
            assert!(mask.is_permutation());
            assert_eq!(
                mask,
                action_mask(&LatticeAction::translate([i64::from(pattern)]), &line(16)).unwrap()
            );
        }
    }

    #[test]
    fn soft_masks_are_row_stochastic_and_continuous() {
        let shape = LatticeShape::grid(4, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for family in ExpertFamily::ALL {
            let stack = ExpertStack::new(family, &shape).unwrap();
            let gates = GateVector((0..stack.gate_count()).map(|_| rng.gen()).collect());
            let mask = expert_forward(&stack, &gates).unwrap();
            for s in mask.matrix().row_sums() {
                assert!(s > 0.0 && s <= 1.0 + 1e-12, "{family}: {s}");
            }
            let eps = 1e-3;
            for i in 0..gates.len() {
                let mut moved = gates.clone();
                moved.0[i] = (moved.0[i] + eps).min(1.0);
                let delta = (moved.0[i] - gates.0[i]).abs();
                let other = expert_forward(&stack, &moved).unwrap();
                assert!(other.matrix().max_abs_diff(mask.matrix()) <= 2.0 * delta + 1e-12);
            }
        }
    }

    #[test]
    fn product_of_experts_cases() {
        let shape = LatticeShape::grid(3, 3).unwrap();
        let t = action_mask(&LatticeAction::translate([1, 0]), &shape).unwrap();
        let f = action_mask(&LatticeAction::flip([1]), &shape).unwrap();
        assert_eq!(product_of_experts(&[AttentionMask::identity(9), t.clone()]).unwrap(), t);
        // rows of F·T read T's source through F: flip applied after translate
        let composed = product_of_experts(&[f.clone(), t.clone()]).unwrap();
        let x = DenseMatrix::from_fn(9, 2, |i, j| (i * 2 + j) as f64);
        let oracle = apply_action(
            &LatticeAction::translate([1, 0]).then(LatticeAction::flip([1])),
            &shape,
            &x,
        )
        .unwrap();
        assert_eq!(composed.matrix().matmul(&x).unwrap(), oracle);
        let stack = ExpertStack::new(ExpertFamily::Translate, &shape).unwrap();
        let soft = expert_forward(&stack, &GateVector::constant(4, 0.3)).unwrap();
        let p = product_of_experts(&[soft.clone(), soft]).unwrap();
        assert!(p.matrix().as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn gate_network_saturation() {
        let params = GateParams::zeros(3, 4);
        let gates = gate_network(&[0.3, -1.0, 2.0], &params).unwrap();
        assert_eq!(gates, GateVector::constant(4, 0.5));
        let mut neg = params.clone();
        neg.b2 = DenseMatrix::filled(1, 4, -40.0);
        let gates = gate_network(&[0.3, -1.0, 2.0], &neg).unwrap();
        assert!(gates.as_slice().iter().all(|&g| g < 1e-15));
    }

    #[test]
    fn smoothing_with_zero_rate_is_the_plain_mask() {
        let shape = LatticeShape::grid(6, 6).unwrap();
        let config = SmoothingConfig {
            enabled: true,
            lambda: 0.0,
            steps: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for family in ExpertFamily::ALL {
            let stack = ExpertStack::new(family, &shape).unwrap();
            let gates = GateVector((0..stack.gate_count()).map(|_| rng.gen()).collect());
            let plain = expert_forward(&stack, &gates).unwrap();
            let smooth = expert_forward_smoothed(&stack, &gates, &config).unwrap();
            assert!(plain.matrix().max_abs_diff(smooth.matrix()) < 1e-12, "{family}");
        }
    }

    #[test]
    fn element_route_matches_layerwise_chain() {
        let config = SmoothingConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for (family, shape, count) in [
            (ExpertFamily::Translate, LatticeShape::grid(4, 6).unwrap(), 24),
            (ExpertFamily::Translate, line(7), 7),
            (ExpertFamily::Rotate, LatticeShape::grid(4, 4).unwrap(), 4),
            (ExpertFamily::Reflect, LatticeShape::grid(3, 3).unwrap(), 8),
            (ExpertFamily::Reflect, LatticeShape::grid(3, 5).unwrap(), 4),
        ] {
            let stack = ExpertStack::new(family, &shape).unwrap();
            assert_eq!(stack.element_count(), Some(count), "{family} {shape}");
            let gates = GateVector((0..stack.gate_count()).map(|_| rng.gen()).collect());
            let mut tape = Tape::new();
            let g = tape.constant(gates.to_row());
            let fast = stack.build(&mut tape, g).unwrap();
            let slow = stack.build_layerwise(&mut tape, g).unwrap();
            assert!(tape.value(fast).max_abs_diff(tape.value(slow)) < 1e-12, "{family}");
            let maps = smoothing::generator_maps(family, &shape).unwrap();
            let eager = smoothing::smooth_mask(tape.value(slow), &maps, config.steps, config.lambda);
            let smooth = stack.build_smoothed(&mut tape, g, &config).unwrap();
            assert!(tape.value(smooth).max_abs_diff(&eager) < 1e-12, "{family}");
        }
        assert_eq!(
            ExpertStack::new(ExpertFamily::Scale, &line(6)).unwrap().element_count(),
            None
        );
    }

    #[test]
    fn family_names_round_trip() {
        for family in ExpertFamily::ALL {
            assert_eq!(family.to_string().parse::<ExpertFamily>().unwrap(), family);
        }
        assert!("shear".parse::<ExpertFamily>().is_err());
    }
}
