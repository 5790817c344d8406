//! One LatFormer layer: noisy colour embedding, masked self-attention with an
//! expert mask, and a per-cell colour readout.
//!
//! Queries and keys see the embedding plus a learned absolute position
//! embedding; values are the embedding itself, so a selection mask copies
//! embeddings unchanged. The readout scores each colour by the negative
//! squared distance to its (clean) embedding plus a tanh feed-forward
//! correction whose output layer starts near zero.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::experts::{discretize_gates, ExpertFamily, ExpertOptions, ExpertStack, GateParams, GateVars, GateVector};
use crate::lattice::LatticeShape;
use crate::matrix::DenseMatrix;
use crate::smoothing::SmoothingConfig;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Latformer,
    LatformerNosmooth,
    AttentionBaseline,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Self::Latformer, Self::LatformerNosmooth, Self::AttentionBaseline];

    pub fn name(self) -> &'static str {
        match self {
            Self::Latformer => "latformer",
            Self::LatformerNosmooth => "latformer_nosmooth",
            Self::AttentionBaseline => "attention_baseline",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub shape: LatticeShape,
    pub colors: usize,
    pub dim: usize,
    pub ffn_hidden: usize,
    pub variant: Variant,
    /// Expert stacks, multiplied left to right when there are several.
    pub experts: Vec<ExpertFamily>,
    pub expert_options: ExpertOptions,
    pub smoothing: SmoothingConfig,
    /// Embedding noise level `w`.
    pub noise: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            shape: LatticeShape::grid(30, 30).expect("nonzero"),
            colors: 10,
            dim: 32,
            ffn_hidden: 128,
            variant: Variant::Latformer,
            experts: vec![ExpertFamily::Translate],
            expert_options: ExpertOptions::default(),
            smoothing: SmoothingConfig::default(),
            noise: 0.0,
        }
    }
}

/// Order used when several experts are stacked.
pub fn canonical_expert_order(families: &[ExpertFamily]) -> Vec<ExpertFamily> {
    let mut out = families.to_vec();
    out.sort();
    out.dedup();
    out
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.colors < 2 || self.dim == 0 || self.ffn_hidden == 0 {
            return Err(Error::Config("colors ≥ 2, dim ≥ 1 and ffn_hidden ≥ 1 required".into()));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config(format!("noise level {} outside [0, 1]", self.noise)));
        }
        if self.variant != Variant::AttentionBaseline && self.experts.is_empty() {
            return Err(Error::Config("a masked variant needs at least one expert".into()));
        }
        self.smoothing.validate()
    }

    pub fn uses_experts(&self) -> bool {
        self.variant != Variant::AttentionBaseline
    }

    pub fn uses_smoothing(&self) -> bool {
        self.variant == Variant::Latformer && self.smoothing.enabled
    }

    pub fn stacks(&self) -> Result<Vec<ExpertStack>> {
        if !self.uses_experts() {
            return Ok(Vec::new());
        }
        canonical_expert_order(&self.experts)
            .into_iter()
            .map(|f| ExpertStack::with_options(f, &self.shape, &self.expert_options))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub embed: DenseMatrix,
    pub pos: DenseMatrix,
    pub wq: DenseMatrix,
    pub wk: DenseMatrix,
    pub ffn_w1: DenseMatrix,
    pub ffn_b1: DenseMatrix,
    pub ffn_w2: DenseMatrix,
    pub ffn_b2: DenseMatrix,
    pub gates: Vec<GateParams>,
}

fn normal(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let dist = Normal::new(0.0, std).expect("positive std");
    DenseMatrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}

impl ModelParams {
    /// Embedding rows of squared norm about 4, near-uniform attention, a
    /// near-zero feed-forward correction and all gates at 0.5.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let inv = 1.0 / (d as f64).sqrt();
        let stacks = config.stacks()?;
        Ok(Self {
            embed: normal(config.colors, d, 2.0 * inv, &mut rng),
            pos: normal(config.shape.n(), d, 0.1, &mut rng),
            wq: normal(d, d, inv, &mut rng),
            wk: normal(d, d, inv, &mut rng),
            ffn_w1: normal(d, config.ffn_hidden, inv, &mut rng),
            ffn_b1: DenseMatrix::zeros(1, config.ffn_hidden),
            ffn_w2: normal(config.ffn_hidden, config.colors, 1e-3, &mut rng),
            ffn_b2: DenseMatrix::zeros(1, config.colors),
            gates: stacks
                .iter()
                .map(|s| {
                    let mut g = GateParams::zeros(d, s.gate_count());
                    g.w1 = normal(d, crate::experts::GATE_HIDDEN, inv, &mut rng);
                    g
                })
                .collect(),
        })
    }

    pub fn tensors(&self) -> Vec<(String, &DenseMatrix)> {
        let mut out: Vec<(String, &DenseMatrix)> = vec![
            ("embed".into(), &self.embed),
            ("pos".into(), &self.pos),
            ("wq".into(), &self.wq),
            ("wk".into(), &self.wk),
            ("ffn_w1".into(), &self.ffn_w1),
            ("ffn_b1".into(), &self.ffn_b1),
            ("ffn_w2".into(), &self.ffn_w2),
            ("ffn_b2".into(), &self.ffn_b2),
        ];
        for (i, g) in self.gates.iter().enumerate() {
            out.push((format!("gate{i}_w1"), &g.w1));
            out.push((format!("gate{i}_b1"), &g.b1));
            out.push((format!("gate{i}_w2"), &g.w2));
            out.push((format!("gate{i}_b2"), &g.b2));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix> {
        let mut out = vec![
            &mut self.embed,
            &mut self.pos,
            &mut self.wq,
            &mut self.wk,
            &mut self.ffn_w1,
            &mut self.ffn_b1,
            &mut self.ffn_w2,
            &mut self.ffn_b2,
        ];
        for g in &mut self.gates {
            out.extend([&mut g.w1, &mut g.b1, &mut g.w2, &mut g.b2]);
        }
        out
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &DenseMatrix| DenseMatrix::zeros(m.rows(), m.cols());
        Self {
            embed: z(&self.embed),
            pos: z(&self.pos),
            wq: z(&self.wq),
            wk: z(&self.wk),
            ffn_w1: z(&self.ffn_w1),
            ffn_b1: z(&self.ffn_b1),
            ffn_w2: z(&self.ffn_w2),
            ffn_b2: z(&self.ffn_b2),
            gates: self
                .gates
                .iter()
                .map(|g| GateParams {
                    w1: z(&g.w1),
                    b1: z(&g.b1),
                    w2: z(&g.w2),
                    b2: z(&g.b2),
                })
                .collect(),
        }
    }

    /// Parameter count without the gate networks.
    pub fn core_parameter_count(&self) -> usize {
        self.tensors()
            .iter()
            .filter(|(name, _)| !name.starts_with("gate"))
            .map(|(_, m)| m.rows() * m.cols())
            .sum()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.rows() * m.cols()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    /// `self += factor · other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, factor: f64) {
        let others: Vec<&DenseMatrix> = other.tensors().into_iter().map(|(_, m)| m).collect();
        for (mine, theirs) in self.tensors_mut().into_iter().zip(others) {
            mine.add_scaled_in_place(theirs, factor);
        }
    }
}

/// Tape handles for every parameter tensor.
#[derive(Clone, Debug)]
struct ParamVars {
    embed: Var,
    pos: Var,
    wq: Var,
    wk: Var,
    ffn_w1: Var,
    ffn_b1: Var,
    ffn_w2: Var,
    ffn_b2: Var,
    gates: Vec<GateVars>,
}

impl ParamVars {
    fn record(tape: &mut Tape, params: &ModelParams, track: bool) -> Self {
        let mut put = |m: &DenseMatrix| {
            if track {
                tape.variable(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        let embed = put(&params.embed);
        let pos = put(&params.pos);
        let wq = put(&params.wq);
        let wk = put(&params.wk);
        let ffn_w1 = put(&params.ffn_w1);
        let ffn_b1 = put(&params.ffn_b1);
        let ffn_w2 = put(&params.ffn_w2);
        let ffn_b2 = put(&params.ffn_b2);
        let gates = params
            .gates
            .iter()
            .map(|g| GateVars {
                w1: put(&g.w1),
                b1: put(&g.b1),
                w2: put(&g.w2),
                b2: put(&g.b2),
            })
            .collect();
        Self {
            embed,
            pos,
            wq,
            wk,
            ffn_w1,
            ffn_b1,
            ffn_w2,
            ffn_b2,
            gates,
        }
    }

    fn gradients(&self, tape: &Tape, grads: &Gradients) -> ModelParams {
        let g = |v: Var| grads.get_or_zeros(tape, v);
        ModelParams {
            embed: g(self.embed),
            pos: g(self.pos),
            wq: g(self.wq),
            wk: g(self.wk),
            ffn_w1: g(self.ffn_w1),
            ffn_b1: g(self.ffn_b1),
            ffn_w2: g(self.ffn_w2),
            ffn_b2: g(self.ffn_b2),
            gates: self
                .gates
                .iter()
                .map(|gv| GateParams {
                    w1: g(gv.w1),
                    b1: g(gv.b1),
                    w2: g(gv.w2),
                    b2: g(gv.b2),
                })
                .collect(),
        }
    }
}

/// How the gate values of the experts are obtained.
#[derive(Clone, Debug, PartialEq)]
pub enum GateMode {
    /// Sigmoid outputs of the gate networks.
    Soft,
    /// Gate-network outputs thresholded at 0.5.
    Discrete,
    /// Caller-supplied values, one vector per expert stack.
    Fixed(Vec<GateVector>),
}

/// A recorded forward pass.
pub struct Forward {
    tape: Tape,
    vars: ParamVars,
    pub logits_plain: Var,
    pub logits_smooth: Option<Var>,
    pub mask: Var,
    embedding: Var,
    gates: Vec<Var>,
}

impl Forward {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn plain_logits(&self) -> &DenseMatrix {
        self.tape.value(self.logits_plain)
    }

    pub fn smooth_logits(&self) -> Option<&DenseMatrix> {
        self.logits_smooth.map(|v| self.tape.value(v))
    }

    pub fn gate_values(&self) -> Vec<GateVector> {
        self.gates
            .iter()
            .map(|&g| GateVector(self.tape.value(g).row(0).to_vec()))
            .collect()
    }

    /// The (noisy) cell embeddings fed to attention.
    pub fn embedding(&self) -> &DenseMatrix {
        self.tape.value(self.embedding)
    }

    pub fn mask_matrix(&self) -> &DenseMatrix {
        self.tape.value(self.mask)
    }
}

/// Per-row argmax.
pub fn argmax_rows(m: &DenseMatrix) -> Vec<usize> {
    (0..m.rows())
        .map(|i| {
            let row = m.row(i);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// The layer model: configuration plus its expert stacks.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    stacks: Vec<ExpertStack>,
}

fn readout(tape: &mut Tape, vars: &ParamVars, out: Var) -> Result<Var> {
    let dist = tape.neg_sq_dist(out, vars.embed)?;
    let h = tape.matmul(out, vars.ffn_w1)?;
    let h = tape.add_row(h, vars.ffn_b1)?;
    let h = tape.tanh(h);
    let z = tape.matmul(h, vars.ffn_w2)?;
    let z = tape.add_row(z, vars.ffn_b2)?;
    tape.add(dist, z)
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let stacks = config.stacks()?;
        Ok(Self { config, stacks })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn stacks(&self) -> &[ExpertStack] {
        &self.stacks
    }

    pub fn init_params(&self, seed: u64) -> Result<ModelParams> {
        ModelParams::init(&self.config, seed)
    }

    fn check(&self, params: &ModelParams, cells: &[usize]) -> Result<()> {
        let n = self.config.shape.n();
        if cells.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} cells for a lattice of {n}",
                cells.len()
            )));
        }
        if params.gates.len() != self.stacks.len()
            || params
                .gates
                .iter()
                .zip(&self.stacks)
                .any(|(g, s)| g.gate_count() != s.gate_count())
            || params.embed.shape() != (self.config.colors, self.config.dim)
            || params.pos.shape() != (n, self.config.dim)
        {
            return Err(Error::ShapeMismatch(
                "parameters do not match the model configuration".into(),
            ));
        }
        Ok(())
    }

    /// Records the forward pass for one grid given as row-major class indices.
    /// With `track` the parameters are variables and the smoothed head, when
    /// configured, is recorded as well.
    pub fn forward(
        &self,
        params: &ModelParams,
        cells: &[usize],
        mode: &GateMode,
        track: bool,
    ) -> Result<Forward> {
        self.check(params, cells)?;
        let mut tape = Tape::new();
        let vars = ParamVars::record(&mut tape, params, track);
        let x = tape.embed(vars.embed, Rc::new(cells.to_vec()), self.config.noise)?;
        let n = self.config.shape.n();

        let smoothing = track && self.config.uses_smoothing();
        let mut gates = Vec::with_capacity(self.stacks.len());
        let mut plain_masks = Vec::new();
        let mut smooth_masks = Vec::new();
        let pooled = if self.stacks.is_empty() {
            None
        } else {
            Some(tape.mean_rows(x))
        };
        for (i, stack) in self.stacks.iter().enumerate() {
            let g = match mode {
                GateMode::Soft => vars.gates[i].build(&mut tape, pooled.expect("experts present"))?,
                GateMode::Discrete => {
                    let soft = vars.gates[i].build(&mut tape, pooled.expect("experts present"))?;
                    let hard = discretize_gates(&GateVector(tape.value(soft).row(0).to_vec()));
                    tape.constant(DenseMatrix::from_vec(1, hard.len(), hard.0)?)
                }
                GateMode::Fixed(values) => {
                    let v = values.get(i).ok_or_else(|| {
                        Error::ShapeMismatch(format!("no fixed gates for expert {i}"))
                    })?;
                    if v.len() != stack.gate_count() {
                        return Err(Error::ShapeMismatch(format!(
                            "{} fixed gates for a stack of {}",
                            v.len(),
                            stack.gate_count()
                        )));
                    }
                    tape.constant(DenseMatrix::from_vec(1, v.len(), v.0.clone())?)
                }
            };
            gates.push(g);
            plain_masks.push(stack.build(&mut tape, g)?);
            if smoothing {
                smooth_masks.push(stack.build_smoothed(&mut tape, g, &self.config.smoothing)?);
            }
        }
        let combine = |tape: &mut Tape, masks: &[Var]| -> Result<Var> {
            match masks {
                [] => Ok(tape.constant(DenseMatrix::filled(n, n, 1.0))),
                [one] => Ok(*one),
                [first, rest @ ..] => {
                    let mut acc = *first;
                    for &m in rest {
                        acc = tape.matmul(acc, m)?;
                    }
                    Ok(tape.clamp01(acc))
                }
            }
        };
        let mask = combine(&mut tape, &plain_masks)?;
        let smooth_mask = if smoothing {
            Some(combine(&mut tape, &smooth_masks)?)
        } else {
            None
        };

        let xp = tape.add(x, vars.pos)?;
        let q = tape.matmul(xp, vars.wq)?;
        let k = tape.matmul(xp, vars.wk)?;
        let scores = tape.matmul_bt(q, k)?;
        let factor = 1.0 / (self.config.dim as f64).sqrt();
        let head = |tape: &mut Tape, m: Option<Var>| -> Result<Var> {
            let weights = tape.masked_softmax(scores, m, factor)?;
            let out = tape.matmul(weights, x)?;
            readout(tape, &vars, out)
        };
        let masked = !self.stacks.is_empty();
        let logits_plain = head(&mut tape, masked.then_some(mask))?;
        let logits_smooth = match smooth_mask {
            Some(m) => Some(head(&mut tape, Some(m))?),
            None => None,
        };
        Ok(Forward {
            tape,
            vars,
            logits_plain,
            logits_smooth,
            mask,
            embedding: x,
            gates,
        })
    }

    /// Argmax colours with discretized gates.
    pub fn predict(&self, params: &ModelParams, cells: &[usize]) -> Result<Vec<usize>> {
        let fwd = self.forward(params, cells, &GateMode::Discrete, false)?;
        Ok(argmax_rows(fwd.plain_logits()))
    }

    pub fn predict_with(&self, params: &ModelParams, cells: &[usize], mode: &GateMode) -> Result<Vec<usize>> {
        let fwd = self.forward(params, cells, mode, false)?;
        Ok(argmax_rows(fwd.plain_logits()))
    }

    /// Discretized gate values the model would use on this input.
    pub fn inferred_gates(&self, params: &ModelParams, cells: &[usize]) -> Result<Vec<GateVector>> {
        let fwd = self.forward(params, cells, &GateMode::Soft, false)?;
        Ok(fwd.gate_values().iter().map(discretize_gates).collect())
    }

    /// Loss of one example and its gradients.
    pub fn example_loss(
        &self,
        params: &ModelParams,
        input: &[usize],
        target: &[usize],
    ) -> Result<(ExampleLoss, ModelParams)> {
        let mut fwd = self.forward(params, input, &GateMode::Soft, true)?;
        let targets = Rc::new(target.to_vec());
        let plain = fwd.tape.cross_entropy(fwd.logits_plain, targets.clone())?;
        let (total, smooth) = match fwd.logits_smooth {
            Some(ls) => {
                let s = fwd.tape.cross_entropy(ls, targets)?;
                (fwd.tape.add(plain, s)?, Some(s))
            }
            None => (plain, None),
        };
        let loss = ExampleLoss {
            plain: fwd.tape.scalar(plain),
            smooth: smooth.map(|s| fwd.tape.scalar(s)),
            correct: argmax_rows(fwd.plain_logits()) == target,
        };
        let total_value = fwd.tape.scalar(total);
        if !total_value.is_finite() {
            return Err(Error::NonFinite(format!("loss {total_value}")));
        }
        let grads = fwd.tape.backward(total)?;
        Ok((loss, fwd.vars.gradients(&fwd.tape, &grads)))
    }

    /// Mean dual loss over a batch and the mean gradients.
    pub fn loss_and_grads(
        &self,
        params: &ModelParams,
        batch: &[(Vec<usize>, Vec<usize>)],
    ) -> Result<(BatchLoss, ModelParams)> {
        if batch.is_empty() {
            return Err(Error::ShapeMismatch("empty batch".into()));
        }
        let mut grads = params.zeros_like();
        let mut summary = BatchLoss::default();
        let scale = 1.0 / batch.len() as f64;
        for (input, target) in batch {
            let (loss, g) = self.example_loss(params, input, target)?;
            grads.add_scaled(&g, scale);
            summary.plain += loss.plain * scale;
            summary.smooth += loss.smooth.unwrap_or(0.0) * scale;
            summary.correct += usize::from(loss.correct);
        }
        summary.count = batch.len();
        summary.total = summary.plain + summary.smooth;
        Ok((summary, grads))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExampleLoss {
    pub plain: f64,
    pub smooth: Option<f64>,
    /// Whether the soft-gate plain prediction matched every cell.
    pub correct: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub plain: f64,
    pub smooth: f64,
    pub correct: usize,
    pub count: usize,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    config: ModelConfig,
    tensors: Vec<TensorRecord>,
}

/// Serializes parameters as versioned JSON with shapes and flat arrays.
pub fn checkpoint_json(config: &ModelConfig, params: &ModelParams) -> String {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        config: config.clone(),
        tensors: params
            .tensors()
            .into_iter()
            .map(|(name, m)| TensorRecord {
                name,
                shape: [m.rows(), m.cols()],
                data: m.as_slice().to_vec(),
            })
            .collect(),
    };
    serde_json::to_string(&file).expect("checkpoints serialize")
}

pub fn load_checkpoint(text: &str) -> Result<(ModelConfig, ModelParams)> {
    let file: CheckpointFile =
        serde_json::from_str(text).map_err(|e| Error::Config(format!("checkpoint: {e}")))?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!(
            "checkpoint version {} is not {CHECKPOINT_VERSION}",
            file.version
        )));
    }
    let mut params = ModelParams::init(&file.config, 0)?;
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    if names.len() != file.tensors.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} tensors, the configuration needs {}",
            file.tensors.len(),
            names.len()
        )));
    }
    for ((slot, name), record) in params.tensors_mut().into_iter().zip(&names).zip(file.tensors) {
        if &record.name != name || [slot.rows(), slot.cols()] != record.shape {
            return Err(Error::Config(format!(
                "checkpoint tensor `{}` {:?} does not match `{name}` {:?}",
                record.name,
                record.shape,
                slot.shape()
            )));
        }
        *slot = DenseMatrix::from_vec(record.shape[0], record.shape[1], record.data)?;
    }
    Ok((file.config, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::LatticeAction;
    use crate::taskgen::{generate_task, suite_specs, GridPool};
    use rand::Rng;

    fn small(variant: Variant, experts: Vec<ExpertFamily>) -> ModelConfig {
        ModelConfig {
            shape: LatticeShape::grid(4, 4).unwrap(),
            dim: 6,
            ffn_hidden: 5,
            variant,
            experts,
            ..ModelConfig::default()
        }
    }

    fn random_cells(n: usize, seed: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(0..10)).collect()
    }

    #[test]
    fn noise_extremes() {
        let config = ModelConfig {
            noise: 1.0,
            ..small(Variant::AttentionBaseline, vec![])
        };
        let model = Model::new(config).unwrap();
        let params = model.init_params(1).unwrap();
        let fwd = model.forward(&params, &random_cells(16, 2), &GateMode::Soft, false).unwrap();
        let x = fwd.embedding();
        for r in 1..16 {
            assert!(x.row(r).iter().zip(x.row(0)).all(|(a, b)| (a - b).abs() < 1e-12));
        }
        let clean = Model::new(small(Variant::AttentionBaseline, vec![])).unwrap();
        let cells = random_cells(16, 3);
        let fwd = clean.forward(&params, &cells, &GateMode::Soft, false).unwrap();
        let x = fwd.embedding();
        for (r, &c) in cells.iter().enumerate() {
            assert_eq!(x.row(r), params.embed.row(c));
        }
    }

    #[test]
    fn frozen_correct_gates_reproduce_the_action() {
        let model = Model::new(ModelConfig {
            smoothing: SmoothingConfig {
                enabled: true,
                ..SmoothingConfig::default()
            },
            ..ModelConfig::default()
        })
        .unwrap();
        let params = model.init_params(5).unwrap();
        let action = LatticeAction::translate([2, 0]);
        let gates = model.stacks()[0].gates_for(&action).unwrap();
        let spec = crate::taskgen::TaskSpec {
            name: "t".into(),
            category: ExpertFamily::Translate,
            action: action.clone(),
            seed: 9,
        };
        let task = generate_task(&spec, 3, 0, &GridPool::Procedural).unwrap();
        for pair in &task.train {
            let pred = model
                .predict_with(&params, &pair.input.class_indices(), &GateMode::Fixed(vec![gates.clone()]))
                .unwrap();
            assert_eq!(pred, pair.output.class_indices());
        }
    }

    #[test]
    fn identity_gates_return_the_input() {
        let model = Model::new(small(Variant::Latformer, vec![ExpertFamily::Translate])).unwrap();
        let params = model.init_params(3).unwrap();
        let cells = random_cells(16, 4);
        let zeros = GateVector::constant(model.stacks()[0].gate_count(), 0.0);
        assert_eq!(
            model.predict_with(&params, &cells, &GateMode::Fixed(vec![zeros])).unwrap(),
            cells
        );
    }

    #[test]
    fn duplicated_examples_average_to_the_same_gradient() {
        let model = Model::new(small(Variant::Latformer, vec![ExpertFamily::Reflect])).unwrap();
        let params = model.init_params(6).unwrap();
        let ex = (random_cells(16, 7), random_cells(16, 8));
        let (l1, g1) = model.loss_and_grads(&params, std::slice::from_ref(&ex)).unwrap();
        let (l2, g2) = model.loss_and_grads(&params, &[ex.clone(), ex]).unwrap();
        assert!((l1.total - l2.total).abs() < 1e-12);
        for ((_, a), (_, b)) in g1.tensors().iter().zip(g2.tensors()) {
            assert!(a.max_abs_diff(b) < 1e-12);
        }
    }

    #[test]
    fn baseline_and_latformer_share_the_core_parameter_budget() {
        let base = ModelParams::init(&ModelConfig {
            variant: Variant::AttentionBaseline,
            ..ModelConfig::default()
        }, 1)
        .unwrap();
        let lat = ModelParams::init(&ModelConfig::default(), 1).unwrap();
        assert_eq!(base.core_parameter_count(), lat.core_parameter_count());
        assert!(base.gates.is_empty() && lat.gates.len() == 1);
    }

    #[test]
    fn checkpoint_round_trip() {
        let config = small(Variant::Latformer, vec![ExpertFamily::Scale, ExpertFamily::Translate]);
        let params = ModelParams::init(&config, 11).unwrap();
        let text = checkpoint_json(&config, &params);
        let (c2, p2) = load_checkpoint(&text).unwrap();
        assert_eq!((c2, p2), (config, params));
        assert!(load_checkpoint(&text.replace("\"version\":1", "\"version\":2")).is_err());
    }

    #[test]
    fn stacked_experts_run() {
        let config = small(Variant::Latformer, ExpertFamily::ALL.to_vec());
        let model = Model::new(config).unwrap();
        let params = model.init_params(2).unwrap();
        let fwd = model.forward(&params, &random_cells(16, 1), &GateMode::Soft, true).unwrap();
        for s in fwd.mask_matrix().row_sums() {
            assert!(s > 0.0 && s <= 1.0 + 1e-12);
        }
        assert!(fwd.smooth_logits().is_some());
        let _ = suite_specs(0);
    }
}
