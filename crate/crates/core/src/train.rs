//! Adam training with per-epoch colour augmentation, and exact-match evaluation.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelParams};
use crate::taskgen::{ColorPermutation, Pair};

pub const DEFAULT_LR: f64 = 1e-3;
pub const DEFAULT_AUGMENTATIONS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    /// Colour-permuted copies of the train set drawn each epoch, in addition
    /// to the original pairs.
    pub augmentations: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: DEFAULT_LR,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 8,
            augmentations: DEFAULT_AUGMENTATIONS,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("Adam eps must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        Ok(())
    }
}

/// Adam moment estimates shaped like the parameters.
pub struct Adam {
    m: ModelParams,
    v: ModelParams,
    step: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &ModelParams, config: &TrainConfig) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            lr: config.lr,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
        }
    }

    pub fn update(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let gs: Vec<_> = grads.tensors().into_iter().map(|(_, g)| g).collect();
        let ps = params.tensors_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((p, g), m), v) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
            let p = p.as_mut_slice();
            let m = m.as_mut_slice();
            let v = v.as_mut_slice();
            for (i, &gi) in g.as_slice().iter().enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

/// Mean losses and soft-gate train accuracy of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_plain: f64,
    pub loss_smooth: f64,
    pub train_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss_plain,loss_smooth,train_acc\n");
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                r.epoch, r.loss_plain, r.loss_smooth, r.train_acc
            );
        }
        out
    }
}

/// A failed run with the history recorded before the failure.
#[derive(Debug)]
pub struct TrainError {
    pub error: Error,
    pub history: History,
}

impl std::fmt::Display for TrainError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} after {} completed epochs",
            self.error,
            self.history.epochs.len()
        )
    }
}

impl std::error::Error for TrainError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

fn as_example(pair: &Pair) -> (Vec<usize>, Vec<usize>) {
    (pair.input.class_indices(), pair.output.class_indices())
}

/// Trains `params` in place on `pairs`.
pub fn train(
    model: &Model,
    params: &mut ModelParams,
    pairs: &[Pair],
    config: &TrainConfig,
) -> std::result::Result<History, TrainError> {
    let fail = |error, history: &History| TrainError {
        error,
        history: history.clone(),
    };
    let mut history = History::default();
    config.validate().map_err(|e| fail(e, &history))?;
    if pairs.is_empty() {
        return Err(fail(Error::Config("no train pairs".into()), &history));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(params, config);
    for epoch in 0..config.epochs {
        let mut examples: Vec<(Vec<usize>, Vec<usize>)> = pairs.iter().map(as_example).collect();
        for _ in 0..config.augmentations {
            let perm = ColorPermutation::random(&mut rng);
            examples.extend(pairs.iter().map(|p| as_example(&p.permuted(&perm))));
        }
        examples.shuffle(&mut rng);
        let (mut plain, mut smooth, mut correct) = (0.0, 0.0, 0usize);
        for batch in examples.chunks(config.batch_size) {
            let (loss, grads) = model
                .loss_and_grads(params, batch)
                .map_err(|e| fail(e, &history))?;
            adam.update(params, &grads);
            if !params.is_finite() {
                return Err(fail(
                    Error::NonFinite(format!("parameters after epoch {epoch}")),
                    &history,
                ));
            }
            plain += loss.plain * loss.count as f64;
            smooth += loss.smooth * loss.count as f64;
            correct += loss.correct;
        }
        let total = examples.len() as f64;
        history.epochs.push(EpochRecord {
            epoch,
            loss_plain: plain / total,
            loss_smooth: smooth / total,
            train_acc: correct as f64 / total,
        });
    }
    Ok(history)
}

/// Exact-match results on a set of pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub correct: usize,
    pub total: usize,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    /// Every pair exactly right.
    pub fn solved(&self) -> bool {
        self.total > 0 && self.correct == self.total
    }
}

pub fn evaluate(model: &Model, params: &ModelParams, pairs: &[Pair]) -> Result<Evaluation> {
    let mut correct = 0;
    for pair in pairs {
        let (input, target) = as_example(pair);
        if model.predict(params, &input)? == target {
            correct += 1;
        }
    }
    Ok(Evaluation {
        correct,
        total: pairs.len(),
    })
}
