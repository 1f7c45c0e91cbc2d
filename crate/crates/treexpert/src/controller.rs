//! The step controller: maps the list of trees produced so far to a
//! weighted choice of Lisp operation, argument blends, and a new root
//! filler. Either a single step-conditioned mixture-of-experts shared
//! across steps, or one dedicated layer per step.

use rand_chacha::ChaCha12Rng;

use crate::diffmath::{lincomb, stack_rows, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{glorot, linear, normal_vec, sinusoid, EncoderLayer};

pub const NUM_OPS: usize = 3;
pub const NUM_ARG_SLOTS: usize = 4;
pub const DEFAULT_N_EXPERTS: usize = 16;
pub const DEFAULT_N_HEADS: usize = 4;
pub const SPARSE_TOP_K: usize = 4;

#[derive(Debug, Clone)]
pub struct ControllerConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_f: usize,
    pub num_roles: usize,
    pub n_experts: usize,
    /// `None` mixes all experts densely; `Some(k)` activates the top k.
    pub top_k: Option<usize>,
}

impl ControllerConfig {
    pub fn flat_dim(&self) -> usize {
        self.d_f * self.num_roles
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(k) = self.top_k {
            if k == 0 || k > self.n_experts {
                return Err(Error::config(format!(
                    "top_k {k} outside 1..={}",
                    self.n_experts
                )));
            }
        }
        if self.n_experts == 0 {
            return Err(Error::config("n_experts must be positive"));
        }
        Ok(())
    }
}

/// Learned linear map from flattened tree tensors to controller tokens,
/// plus the two classification-token embeddings (operation and root).
pub struct TreeTokenizer {
    w: ParamId,
    b: ParamId,
    cls_op: ParamId,
    cls_root: ParamId,
    d_model: usize,
    flat_dim: usize,
}

impl TreeTokenizer {
    pub fn new(
        store: &mut ParamStore,
        cfg: &ControllerConfig,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        let flat = cfg.flat_dim();
        Ok(TreeTokenizer {
            w: store.add("tokenizer.w", glorot(rng, flat, cfg.d_model), true)?,
            b: store.add(
                "tokenizer.b",
                crate::diffmath::Tensor::zeros(&[cfg.d_model]),
                true,
            )?,
            cls_op: store.add("tokenizer.cls_op", normal_vec(rng, cfg.d_model, 0.02), true)?,
            cls_root: store.add(
                "tokenizer.cls_root",
                normal_vec(rng, cfg.d_model, 0.02),
                true,
            )?,
            d_model: cfg.d_model,
            flat_dim: flat,
        })
    }

    /// Token for a single tree tensor (num_roles x d_f).
    pub fn tokenize_one(&self, store: &ParamStore, tape: &Tape, tree: &Var) -> Result<Var> {
        let flat = tree.reshape(&[1, self.flat_dim])?;
        linear(store, tape, &flat, self.w, self.b)?.reshape(&[self.d_model])
    }

    /// Full token sequence: tree tokens in production order, then the
    /// operation and root classification tokens.
    pub fn token_matrix(&self, store: &ParamStore, tape: &Tape, tree_tokens: &[Var]) -> Result<Var> {
        if tree_tokens.is_empty() {
            return Err(Error::shape("tokenize", "no trees".to_string()));
        }
        let mut rows = tree_tokens.to_vec();
        rows.push(store.var(tape, self.cls_op));
        rows.push(store.var(tape, self.cls_root));
        stack_rows(&rows)
    }
}

/// One controller decision: weights over the three operations, per-slot
/// attention over past trees, and the predicted root filler for cons.
pub struct StepDecision {
    pub op_weights: Var,
    pub arg_weights: [Var; NUM_ARG_SLOTS],
    pub root_filler: Var,
}

/// A single expert: one encoder layer plus read-out heads.
pub struct ExpertHeads {
    layer: EncoderLayer,
    w_op: ParamId,
    b_op: ParamId,
    w_root: ParamId,
    b_root: ParamId,
    w_arg: ParamId,
    b_arg: ParamId,
}

impl ExpertHeads {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &ControllerConfig,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        let layer = EncoderLayer::new(store, &format!("{prefix}.layer"), cfg.d_model, cfg.n_heads, rng)?;
        Ok(ExpertHeads {
            layer,
            w_op: store.add(
                &format!("{prefix}.w_op"),
                glorot(rng, cfg.d_model, NUM_OPS),
                true,
            )?,
            b_op: store.add(
                &format!("{prefix}.b_op"),
                crate::diffmath::Tensor::zeros(&[NUM_OPS]),
                true,
            )?,
            w_root: store.add(
                &format!("{prefix}.w_root"),
                glorot(rng, cfg.d_model, cfg.d_f),
                true,
            )?,
            b_root: store.add(
                &format!("{prefix}.b_root"),
                crate::diffmath::Tensor::zeros(&[cfg.d_f]),
                true,
            )?,
            w_arg: store.add(
                &format!("{prefix}.w_arg"),
                glorot(rng, cfg.d_model, NUM_ARG_SLOTS),
                true,
            )?,
            b_arg: store.add(
                &format!("{prefix}.b_arg"),
                crate::diffmath::Tensor::zeros(&[NUM_ARG_SLOTS]),
                true,
            )?,
        })
    }

    /// Run the expert over the token matrix; `n_trees` rows are tree
    /// tokens, the last two are the classification tokens.
    pub fn forward(
        &self,
        store: &ParamStore,
        tape: &Tape,
        tokens: &Var,
        n_trees: usize,
    ) -> Result<StepDecision> {
        let out = self.layer.forward(store, tape, tokens)?;
        let cls_op = out.row(n_trees)?;
        let cls_root = out.row(n_trees + 1)?;
        let op_logits = cls_op
            .reshape(&[1, self.layer.d_model])?
            .matmul(&store.var(tape, self.w_op))?
            .reshape(&[NUM_OPS])?
            .add(&store.var(tape, self.b_op))?;
        let op_weights = op_logits.softmax_1d()?;
        let root_filler = cls_root
            .reshape(&[1, self.layer.d_model])?
            .matmul(&store.var(tape, self.w_root))?
            .reshape(&[store.get(self.b_root).numel()])?
            .add(&store.var(tape, self.b_root))?;
        // Per-tree argument logits: one column per slot.
        let tree_out = out.slice_rows(0, n_trees)?;
        let arg_logits = linear(store, tape, &tree_out, self.w_arg, self.b_arg)?;
        let mut arg_weights = Vec::with_capacity(NUM_ARG_SLOTS);
        for slot in 0..NUM_ARG_SLOTS {
            let col = arg_logits.slice_cols(slot, 1)?.reshape(&[n_trees])?;
            arg_weights.push(col.softmax_1d()?);
        }
        let arg_weights: [Var; NUM_ARG_SLOTS] = arg_weights
            .try_into()
            .map_err(|_| Error::shape("expert_forward", "arg slot count".to_string()))?;
        Ok(StepDecision {
            op_weights,
            arg_weights,
            root_filler,
        })
    }
}

/// Router: encoder layer over the tokens, mean-pooled, concatenated with
/// the sinusoidal step encoding, then a linear map to expert logits.
pub struct Router {
    layer: EncoderLayer,
    w: ParamId,
    b: ParamId,
    pub n_experts: usize,
    pub top_k: Option<usize>,
}

pub struct RouterChoice {
    /// Post-softmax weights over the selected experts.
    pub weights: Var,
    /// Expert indices in ascending order, aligned with `weights`.
    pub experts: Vec<usize>,
}

impl Router {
    pub fn new(
        store: &mut ParamStore,
        cfg: &ControllerConfig,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        let layer = EncoderLayer::new(store, "router.layer", cfg.d_model, cfg.n_heads, rng)?;
        Ok(Router {
            layer,
            w: store.add(
                "router.w",
                glorot(rng, 2 * cfg.d_model, cfg.n_experts),
                true,
            )?,
            b: store.add(
                "router.b",
                crate::diffmath::Tensor::zeros(&[cfg.n_experts]),
                true,
            )?,
            n_experts: cfg.n_experts,
            top_k: cfg.top_k,
        })
    }

    pub fn route(
        &self,
        store: &ParamStore,
        tape: &Tape,
        tokens: &Var,
        step: usize,
    ) -> Result<RouterChoice> {
        let out = self.layer.forward(store, tape, tokens)?;
        let pooled = out.mean_rows()?;
        let step_enc = tape.constant(sinusoid(step, self.layer.d_model)?);
        let joint = pooled.concat(&step_enc, 0)?;
        let logits = joint
            .reshape(&[1, 2 * self.layer.d_model])?
            .matmul(&store.var(tape, self.w))?
            .reshape(&[self.n_experts])?
            .add(&store.var(tape, self.b))?;
        match self.top_k {
            None => Ok(RouterChoice {
                weights: logits.softmax_1d()?,
                experts: (0..self.n_experts).collect(),
            }),
            Some(k) => {
                // Top-k by logit value, ties broken toward the lower
                // expert index, then re-sorted ascending for determinism.
                let values = logits.value();
                let mut order: Vec<usize> = (0..self.n_experts).collect();
                order.sort_by(|&a, &b| {
                    values.data()[b]
                        .partial_cmp(&values.data()[a])
                        .unwrap()
                        .then(a.cmp(&b))
                });
                let mut selected: Vec<usize> = order.into_iter().take(k).collect();
                selected.sort_unstable();
                let gathered = logits.gather_1d(&selected)?;
                Ok(RouterChoice {
                    weights: gathered.softmax_1d()?,
                    experts: selected,
                })
            }
        }
    }
}

/// The step controller: one shared mixture-of-experts, or one dedicated
/// layer per step.
pub enum Controller {
    Moe {
        tokenizer: TreeTokenizer,
        router: Router,
        experts: Vec<ExpertHeads>,
    },
    PerStep {
        tokenizer: TreeTokenizer,
        layers: Vec<ExpertHeads>,
    },
}

impl Controller {
    pub fn new_moe(
        store: &mut ParamStore,
        cfg: &ControllerConfig,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let tokenizer = TreeTokenizer::new(store, cfg, rng)?;
        let router = Router::new(store, cfg, rng)?;
        let experts = (0..cfg.n_experts)
            .map(|i| ExpertHeads::new(store, &format!("expert.{i}"), cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Controller::Moe {
            tokenizer,
            router,
            experts,
        })
    }

    pub fn new_per_step(
        store: &mut ParamStore,
        cfg: &ControllerConfig,
        max_steps: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        let tokenizer = TreeTokenizer::new(store, cfg, rng)?;
        let layers = (0..max_steps)
            .map(|t| ExpertHeads::new(store, &format!("dtm.layer.{t}"), cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Controller::PerStep { tokenizer, layers })
    }

    pub fn tokenizer(&self) -> &TreeTokenizer {
        match self {
            Controller::Moe { tokenizer, .. } => tokenizer,
            Controller::PerStep { tokenizer, .. } => tokenizer,
        }
    }

    /// Decide the next step from the cached tree tokens.
    pub fn decide(
        &self,
        store: &ParamStore,
        tape: &Tape,
        tree_tokens: &[Var],
        step: usize,
    ) -> Result<StepDecision> {
        let n_trees = tree_tokens.len();
        match self {
            Controller::Moe {
                tokenizer,
                router,
                experts,
            } => {
                let tokens = tokenizer.token_matrix(store, tape, tree_tokens)?;
                let choice = router.route(store, tape, &tokens, step)?;
                let decisions: Vec<StepDecision> = choice
                    .experts
                    .iter()
                    .map(|&e| experts[e].forward(store, tape, &tokens, n_trees))
                    .collect::<Result<Vec<_>>>()?;
                mix_decisions(&choice.weights, &decisions)
            }
            Controller::PerStep { tokenizer, layers } => {
                let layer = layers.get(step).ok_or_else(|| {
                    Error::config(format!(
                        "step {step} out of range for {} per-step layers",
                        layers.len()
                    ))
                })?;
                let tokens = tokenizer.token_matrix(store, tape, tree_tokens)?;
                layer.forward(store, tape, &tokens, n_trees)
            }
        }
    }

    /// Scalar parameter count of the controller (tokenizer, router,
    /// experts or per-step layers). Termination predictors and frozen
    /// filler embeddings are not controller parameters.
    pub fn param_count(&self, store: &ParamStore) -> usize {
        store.count_with_prefixes(&["tokenizer.", "router.", "expert.", "dtm."])
    }
}

/// Convex mixture of expert decisions at the prediction level. Mixing
/// simplexes with simplex router weights keeps every weight group a
/// simplex.
pub fn mix_decisions(weights: &Var, decisions: &[StepDecision]) -> Result<StepDecision> {
    if decisions.is_empty() {
        return Err(Error::config("no expert decisions to mix"));
    }
    if decisions.len() == 1 {
        // Degenerate mixture: still multiply by the single weight so
        // gradients reach the router.
        let w = weights.slice_1d(0, 1)?;
        let d = &decisions[0];
        return Ok(StepDecision {
            op_weights: d.op_weights.mul_scalar_var(&w)?,
            arg_weights: [
                d.arg_weights[0].mul_scalar_var(&w)?,
                d.arg_weights[1].mul_scalar_var(&w)?,
                d.arg_weights[2].mul_scalar_var(&w)?,
                d.arg_weights[3].mul_scalar_var(&w)?,
            ],
            root_filler: d.root_filler.mul_scalar_var(&w)?,
        });
    }
    let ops: Vec<Var> = decisions.iter().map(|d| d.op_weights.clone()).collect();
    let roots: Vec<Var> = decisions.iter().map(|d| d.root_filler.clone()).collect();
    let op_weights = lincomb(weights, &ops)?;
    let root_filler = lincomb(weights, &roots)?;
    let mut slots = Vec::with_capacity(NUM_ARG_SLOTS);
    for s in 0..NUM_ARG_SLOTS {
        let terms: Vec<Var> = decisions.iter().map(|d| d.arg_weights[s].clone()).collect();
        slots.push(lincomb(weights, &terms)?);
    }
    let arg_weights: [Var; NUM_ARG_SLOTS] = slots
        .try_into()
        .map_err(|_| Error::shape("mix_decisions", "arg slot count".to_string()))?;
    Ok(StepDecision {
        op_weights,
        arg_weights,
        root_filler,
    })
}
