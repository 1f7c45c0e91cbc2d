//! Minimal dense-tensor library with reverse-mode automatic
//! differentiation: the numerical substrate for the controller,
//! interpreter loop, and termination predictors. Double precision
//! throughout.

mod params;
mod tape;
mod tensor;

pub use params::{AdamConfig, AdamState, GradAccumulator, ParamId, ParamStore};
pub use tape::{lincomb, stack_rows, Tape, Var};
pub use tensor::{matmul, matmul_abt, matmul_atb, Tensor};

/// Central finite differences of `f` at `inputs`, compared against the
/// tape gradient. Returns the maximum relative error over all input
/// coordinates. Also used by the acceptance suite for composite graphs.
pub fn finite_diff_max_rel_err(
    inputs: &[Tensor],
    f: &dyn Fn(&Tape, &[Var]) -> Var,
    eps: f64,
) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars);
    assert_eq!(loss.shape(), Vec::<usize>::new(), "loss must be scalar");
    tape.backward(&loss).expect("backward");
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone())).collect();
        f(&tape, &vars).scalar_value()
    };

    let mut max_rel = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += eps;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= eps;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic[i].data()[j];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
            max_rel = max_rel.max(rel);
        }
    }
    max_rel
}

/// Finite-difference check of gradients flowing into stored parameters.
/// `names` limits the sweep to those parameters (empty = all trainable).
/// Returns the maximum relative error over swept coordinates.
pub fn finite_diff_params_max_rel_err(
    store: &mut ParamStore,
    names: &[&str],
    f: &dyn Fn(&ParamStore, &Tape) -> Var,
    eps: f64,
) -> f64 {
    let tape = Tape::new();
    let loss = f(store, &tape);
    tape.backward(&loss).expect("backward");
    let mut analytic: Vec<Option<Tensor>> = (0..store.len()).map(|_| None).collect();
    for (id, g) in tape.param_grads() {
        match &mut analytic[id.index()] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    let targets: Vec<ParamId> = if names.is_empty() {
        (0..store.len())
            .map(ParamId)
            .filter(|id| store.is_trainable(*id))
            .collect()
    } else {
        names
            .iter()
            .map(|n| store.id_of(n).unwrap_or_else(|| panic!("no param {n}")))
            .collect()
    };

    let mut max_rel = 0.0f64;
    for id in targets {
        let base = store.get(id).clone();
        for j in 0..base.numel() {
            let mut plus = base.clone();
            plus.data_mut()[j] += eps;
            store.set(id, plus);
            let fp = f(store, &Tape::new()).scalar_value();
            let mut minus = base.clone();
            minus.data_mut()[j] -= eps;
            store.set(id, minus);
            let fm = f(store, &Tape::new()).scalar_value();
            store.set(id, base.clone());
            let fd = (fp - fm) / (2.0 * eps);
            let a = analytic[id.index()]
                .as_ref()
                .map(|t| t.data()[j])
                .unwrap_or(0.0);
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
            max_rel = max_rel.max(rel);
        }
    }
    max_rel
}
