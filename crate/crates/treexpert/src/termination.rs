//! Sluggish termination: two per-task step predictors (a stability
//! seeking damper and a search-performing explorer) that only move when
//! the other is confident. The damper's argmax selects the output step.
//!
//! Labels: the damper copies the explorer once the explorer is
//! confident, otherwise it labels itself. The explorer, once both agree
//! confidently, searches the local candidate set for the best penalized
//! loss; the multiplicative step discount is applied as an additive
//! `-ln(discount) * idx` penalty on the loss, which favors earlier
//! termination when later steps bring no significant improvement.

use std::collections::BTreeMap;

use rand_chacha::ChaCha12Rng;

use crate::diffmath::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::normal_vec;

pub const DEFAULT_SCALE: f64 = 10.0;
pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.8;
pub const DEFAULT_OFFSETS: [i64; 3] = [-4, 0, 5];
pub const DEFAULT_DISCOUNT: f64 = 0.9;
pub const DEFAULT_RESIDUAL_WEIGHT: f64 = 0.1;
pub const INIT_STD: f64 = 0.01;

/// One predictor: a raw parameter per step, scaled before softmax so
/// gradient updates on the individual values stay large.
pub struct TermPredictor {
    raw: ParamId,
    pub max_steps: usize,
    pub scale: f64,
}

impl TermPredictor {
    fn new(
        store: &mut ParamStore,
        name: &str,
        max_steps: usize,
        scale: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        let raw = store.add(name, normal_vec(rng, max_steps, INIT_STD), true)?;
        Ok(TermPredictor {
            raw,
            max_steps,
            scale,
        })
    }

    pub fn probs(&self, store: &ParamStore) -> Vec<f64> {
        let raw = store.get(self.raw);
        let scaled: Vec<f64> = raw.data().iter().map(|x| x * self.scale).collect();
        let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scaled.iter().map(|x| (x - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / sum).collect()
    }

    /// Argmax step and its probability; ties break toward the lower
    /// step index.
    pub fn peak(&self, store: &ParamStore) -> (usize, f64) {
        let p = self.probs(store);
        let mut best = 0;
        for (i, v) in p.iter().enumerate() {
            if *v > p[best] {
                best = i;
            }
        }
        (best, p[best])
    }

    /// Cross-entropy of the scaled softmax against a label step.
    pub fn ce_loss(&self, store: &ParamStore, tape: &Tape, label: usize) -> Result<Var> {
        store
            .var(tape, self.raw)
            .scale(self.scale)
            .cross_entropy_logits(label)
    }
}

pub struct TermState {
    pub damper: TermPredictor,
    pub explorer: TermPredictor,
    pub confidence_threshold: f64,
    pub offsets: [i64; 3],
    pub discount: f64,
    pub residual_weight: f64,
}

impl TermState {
    pub fn new(store: &mut ParamStore, max_steps: usize, rng: &mut ChaCha12Rng) -> Result<Self> {
        Ok(TermState {
            damper: TermPredictor::new(store, "term.damper.raw", max_steps, DEFAULT_SCALE, rng)?,
            explorer: TermPredictor::new(
                store,
                "term.explorer.raw",
                max_steps,
                DEFAULT_SCALE,
                rng,
            )?,
            confidence_threshold: DEFAULT_CONFIDENCE_THRESHOLD,
            offsets: DEFAULT_OFFSETS,
            discount: DEFAULT_DISCOUNT,
            residual_weight: DEFAULT_RESIDUAL_WEIGHT,
        })
    }

    /// Rebind to predictors already present in a restored store.
    pub fn from_store(store: &ParamStore, max_steps: usize) -> Result<Self> {
        let damper = store
            .id_of("term.damper.raw")
            .ok_or_else(|| Error::CheckpointFormat("missing term.damper.raw".into()))?;
        let explorer = store
            .id_of("term.explorer.raw")
            .ok_or_else(|| Error::CheckpointFormat("missing term.explorer.raw".into()))?;
        Ok(TermState {
            damper: TermPredictor {
                raw: damper,
                max_steps,
                scale: DEFAULT_SCALE,
            },
            explorer: TermPredictor {
                raw: explorer,
                max_steps,
                scale: DEFAULT_SCALE,
            },
            confidence_threshold: DEFAULT_CONFIDENCE_THRESHOLD,
            offsets: DEFAULT_OFFSETS,
            discount: DEFAULT_DISCOUNT,
            residual_weight: DEFAULT_RESIDUAL_WEIGHT,
        })
    }

    pub fn i_damp(&self, store: &ParamStore) -> usize {
        self.damper.peak(store).0
    }

    pub fn i_expl(&self, store: &ParamStore) -> usize {
        self.explorer.peak(store).0
    }

    /// The step whose tree is the model's answer at evaluation time.
    pub fn terminated_step(&self, store: &ParamStore) -> usize {
        self.i_damp(store)
    }

    /// Damper label: follow the explorer when it is confident, else stay.
    pub fn damper_label(&self, store: &ParamStore) -> usize {
        let (i_expl, p_expl) = self.explorer.peak(store);
        if p_expl >= self.confidence_threshold {
            i_expl
        } else {
            self.damper.peak(store).0
        }
    }

    /// Explorer label: when both predictors agree confidently, pick the
    /// candidate with the best penalized loss; otherwise stay.
    pub fn explorer_label(
        &self,
        store: &ParamStore,
        candidate_losses: &BTreeMap<usize, f64>,
    ) -> Result<usize> {
        let (i_damp, p_damp) = self.damper.peak(store);
        let (i_expl, _) = self.explorer.peak(store);
        if p_damp >= self.confidence_threshold && i_damp == i_expl {
            let kappa = -self.discount.ln();
            let candidates = candidate_set_with(i_damp, self.damper.max_steps, &self.offsets);
            let mut best: Option<(usize, f64)> = None;
            for (step, idx) in candidates {
                let loss = candidate_losses.get(&step).ok_or_else(|| {
                    Error::config(format!("missing candidate loss at step {step}"))
                })?;
                let penalized = loss + kappa * idx as f64;
                match best {
                    Some((_, b)) if penalized >= b => {}
                    _ => best = Some((step, penalized)),
                }
            }
            Ok(best.unwrap().0)
        } else {
            Ok(i_expl)
        }
    }
}

/// The local candidate set around the current termination: offsets
/// applied then clamped to [0, max_steps); duplicates after clamping
/// collapse onto the smallest idx.
pub fn candidate_set(i_damp: usize, max_steps: usize) -> Vec<(usize, usize)> {
    candidate_set_with(i_damp, max_steps, &DEFAULT_OFFSETS)
}

fn candidate_set_with(i_damp: usize, max_steps: usize, offsets: &[i64; 3]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::with_capacity(3);
    for (idx, off) in offsets.iter().enumerate() {
        let step = (i_damp as i64 + off).clamp(0, max_steps as i64 - 1) as usize;
        if !out.iter().any(|(s, _)| *s == step) {
            out.push((step, idx));
        }
    }
    out
}

/// Everything one training round needs from the termination mechanism.
pub struct TermRound {
    pub y_damp: usize,
    pub y_expl: usize,
    /// Step carrying the main model loss (the current termination).
    pub main_step: usize,
    /// Candidate steps carrying small residual model losses.
    pub residual_steps: Vec<usize>,
    pub loss_damp: Var,
    pub loss_expl: Var,
}

/// Compute labels from the current predictor state plus candidate model
/// losses, and build the two cross-entropy losses on the tape.
pub fn termination_losses(
    state: &TermState,
    store: &ParamStore,
    tape: &Tape,
    candidate_losses: &BTreeMap<usize, f64>,
) -> Result<TermRound> {
    let i_damp = state.i_damp(store);
    let y_damp = state.damper_label(store);
    let y_expl = state.explorer_label(store, candidate_losses)?;
    let candidates = candidate_set_with(i_damp, state.damper.max_steps, &state.offsets);
    let residual_steps: Vec<usize> = candidates
        .iter()
        .map(|(s, _)| *s)
        .filter(|s| *s != i_damp)
        .collect();
    Ok(TermRound {
        y_damp,
        y_expl,
        main_step: i_damp,
        residual_steps,
        loss_damp: state.damper.ce_loss(store, tape, y_damp)?,
        loss_expl: state.explorer.ce_loss(store, tape, y_expl)?,
    })
}
