//! The differentiable interpreter loop: apply controller decisions to
//! the growing list of tree tensors, one superposed step at a time.

use std::rc::Rc;

use crate::controller::{Controller, StepDecision, NUM_OPS};
use crate::diffmath::{lincomb, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::symbolic::{Instr, LispProgram, SymTree};
use crate::tpr::{encode_tree, FillerTable, Operators, RoleBasis};

/// Role-shift maps shared by every step of a run.
pub struct MachineOps {
    pub num_roles: usize,
    pub d_f: usize,
    car: Rc<Vec<Option<usize>>>,
    cdr: Rc<Vec<Option<usize>>>,
    cons0: Rc<Vec<Option<usize>>>,
    cons1: Rc<Vec<Option<usize>>>,
    root_index: usize,
    deepest: Vec<usize>,
}

impl MachineOps {
    pub fn new(basis: &RoleBasis, fillers: &FillerTable, ops: &Operators) -> Self {
        MachineOps {
            num_roles: basis.num_roles(),
            d_f: fillers.filler_dim(),
            car: Rc::new(ops.car_map().to_vec()),
            cdr: Rc::new(ops.cdr_map().to_vec()),
            cons0: Rc::new(ops.cons0_map().to_vec()),
            cons1: Rc::new(ops.cons1_map().to_vec()),
            root_index: ops.root_index(),
            deepest: (0..basis.num_roles())
                .filter(|&r| basis.depth_of(r) == basis.max_depth())
                .collect(),
        }
    }
}

/// Trees produced so far. Index 0 is the encoded source; the tree at
/// index t is the output of step t-1, so "the tree at step s" during
/// termination selection is `trees[s]` (s = number of executed steps).
pub struct MachineState {
    pub trees: Vec<Var>,
    pub step: usize,
    pub norm_lost: f64,
}

impl MachineState {
    pub fn new(input: Var) -> Self {
        MachineState {
            trees: vec![input],
            step: 0,
            norm_lost: 0.0,
        }
    }

    pub fn last(&self) -> &Var {
        self.trees.last().unwrap()
    }
}

/// Weighted sum of all past trees.
pub fn blend_argument(state: &MachineState, slot_weights: &Var) -> Result<Var> {
    let n = slot_weights.with_value(|t| t.numel());
    if n != state.trees.len() {
        return Err(Error::shape(
            "blend_argument",
            format!("{n} weights for {} trees", state.trees.len()),
        ));
    }
    lincomb(slot_weights, &state.trees)
}

/// One superposed step: blend the four argument slots, apply the three
/// operations, mix by the operation weights, append the result.
pub fn execute_step(
    state: &mut MachineState,
    decision: &StepDecision,
    mops: &MachineOps,
) -> Result<()> {
    debug_assert_eq!(decision.op_weights.shape(), vec![NUM_OPS]);
    let t_car = blend_argument(state, &decision.arg_weights[0])?;
    let t_cdr = blend_argument(state, &decision.arg_weights[1])?;
    let t_cons0 = blend_argument(state, &decision.arg_weights[2])?;
    let t_cons1 = blend_argument(state, &decision.arg_weights[3])?;

    let car_out = t_car.role_shift(mops.car.clone())?;
    let cdr_out = t_cdr.role_shift(mops.cdr.clone())?;
    let cons_out = t_cons0
        .role_shift(mops.cons0.clone())?
        .add(&t_cons1.role_shift(mops.cons1.clone())?)?
        .add(&decision.root_filler.place_row(mops.root_index, mops.num_roles)?)?;

    // Truncation diagnostic: squared norm cons drops from its blended
    // arguments, weighted by how much cons contributes to the output.
    let w_cons = decision.op_weights.with_value(|t| t.data()[2]);
    if w_cons != 0.0 {
        let lost = [&t_cons0, &t_cons1]
            .iter()
            .map(|t| {
                t.with_value(|v| {
                    mops.deepest
                        .iter()
                        .map(|&r| v.row(r).iter().map(|x| x * x).sum::<f64>())
                        .sum::<f64>()
                })
            })
            .sum::<f64>();
        state.norm_lost += w_cons * lost;
    }

    let next = lincomb(&decision.op_weights, &[car_out, cdr_out, cons_out])?;
    state.trees.push(next);
    state.step += 1;
    Ok(())
}

/// Unroll the controller for exactly `max_steps` steps from an encoded
/// source tree. Returns the full state; callers pick the output tree
/// (the last for fixed-step models, the terminated step otherwise).
pub fn run(
    source: &SymTree,
    controller: &Controller,
    store: &ParamStore,
    tape: &Tape,
    basis: &RoleBasis,
    fillers: &FillerTable,
    mops: &MachineOps,
    max_steps: usize,
) -> Result<MachineState> {
    if max_steps == 0 {
        return Err(Error::config("max_steps must be at least 1"));
    }
    let encoded = encode_tree(source, basis, fillers)?;
    let input = tape.constant(
        Tensor::from_vec(&[basis.num_roles(), fillers.filler_dim()], encoded.data().to_vec())
            .unwrap(),
    );
    let mut state = MachineState::new(input);
    let mut tokens: Vec<Var> = vec![controller
        .tokenizer()
        .tokenize_one(store, tape, &state.trees[0])?];
    for step in 0..max_steps {
        let decision = controller.decide(store, tape, &tokens, step)?;
        execute_step(&mut state, &decision, mops)?;
        tokens.push(
            controller
                .tokenizer()
                .tokenize_one(store, tape, state.last())?,
        );
    }
    Ok(state)
}

/// One-hot decision for a discrete instruction. Unused slots point at
/// tree 0; an absent cons root label is the zero filler.
pub fn hard_decision(
    tape: &Tape,
    instr: &Instr,
    n_trees: usize,
    fillers: &FillerTable,
) -> Result<StepDecision> {
    let onehot = |i: usize, n: usize| {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        Tensor::from_vec(&[n], v).unwrap()
    };
    let (op_idx, slots, root) = match instr {
        Instr::Car { arg } => (0usize, [*arg, 0, 0, 0], None),
        Instr::Cdr { arg } => (1, [0, *arg, 0, 0], None),
        Instr::Cons { arg0, arg1, root } => (2, [0, 0, *arg0, *arg1], root.as_deref()),
    };
    for s in slots {
        if s >= n_trees {
            return Err(Error::InvalidProgram(format!(
                "argument index {s} out of range (have {n_trees} trees)"
            )));
        }
    }
    let root_filler = match root {
        Some(label) => Tensor::from_vec(&[fillers.filler_dim()], fillers.embedding(label)?.to_vec())
            .unwrap(),
        None => Tensor::zeros(&[fillers.filler_dim()]),
    };
    Ok(StepDecision {
        op_weights: tape.constant(onehot(op_idx, NUM_OPS)),
        arg_weights: [
            tape.constant(onehot(slots[0], n_trees)),
            tape.constant(onehot(slots[1], n_trees)),
            tape.constant(onehot(slots[2], n_trees)),
            tape.constant(onehot(slots[3], n_trees)),
        ],
        root_filler: tape.constant(root_filler),
    })
}

/// Execute a discrete program on the machine with one-hot decisions.
pub fn run_hard_program(
    program: &LispProgram,
    source: &SymTree,
    tape: &Tape,
    basis: &RoleBasis,
    fillers: &FillerTable,
    mops: &MachineOps,
) -> Result<MachineState> {
    let encoded = encode_tree(source, basis, fillers)?;
    let input = tape.constant(
        Tensor::from_vec(&[basis.num_roles(), fillers.filler_dim()], encoded.data().to_vec())
            .unwrap(),
    );
    let mut state = MachineState::new(input);
    for instr in &program.0 {
        let decision = hard_decision(tape, instr, state.trees.len(), fillers)?;
        execute_step(&mut state, &decision, mops)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::ControllerConfig;
    use crate::symbolic::{run_program_trace, sym_car};
    use crate::tpr::{build_role_basis, decode_tree, TprTensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn setup(depth: usize) -> (RoleBasis, FillerTable, MachineOps) {
        let basis = build_role_basis(depth).unwrap();
        let vocab: Vec<String> = ["some", "sad", "sheep", "a", "b", "c", "R", "S", "end", "x0", "x1", "x2"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let fillers = FillerTable::new(&vocab, 8, 5).unwrap();
        let ops = Operators::new(&basis);
        let mops = MachineOps::new(&basis, &fillers, &ops);
        (basis, fillers, mops)
    }

    fn as_tpr(v: &Var, basis: &RoleBasis, fillers: &FillerTable) -> TprTensor {
        TprTensor::from_data(
            basis.num_roles(),
            fillers.filler_dim(),
            v.value().into_data(),
        )
        .unwrap()
    }

    #[test]
    fn blend_argument_examples() {
        let (basis, fillers, _) = setup(3);
        let tape = Tape::new();
        let a = encode_tree(&"(R a b)".parse().unwrap(), &basis, &fillers).unwrap();
        let b = encode_tree(&"(S c a)".parse().unwrap(), &basis, &fillers).unwrap();
        let va = tape.constant(
            Tensor::from_vec(&[basis.num_roles(), 8], a.data().to_vec()).unwrap(),
        );
        let vb = tape.constant(
            Tensor::from_vec(&[basis.num_roles(), 8], b.data().to_vec()).unwrap(),
        );
        let mut state = MachineState::new(va.clone());
        state.trees.push(vb);

        // One-hot picks a tree exactly.
        let w = tape.constant(Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap());
        let picked = blend_argument(&state, &w).unwrap();
        assert_eq!(picked.value().data(), &b.data().to_vec()[..]);

        // Even blend averages entries.
        let w = tape.constant(Tensor::from_vec(&[2], vec![0.5, 0.5]).unwrap());
        let blended = blend_argument(&state, &w).unwrap();
        for (i, v) in blended.value().data().iter().enumerate() {
            assert!((v - 0.5 * (a.data()[i] + b.data()[i])).abs() < 1e-15);
        }

        // Uniform over two copies of the same tree reproduces it.
        let mut dup = MachineState::new(va.clone());
        dup.trees.push(va);
        let w = tape.constant(Tensor::from_vec(&[2], vec![0.5, 0.5]).unwrap());
        let same = blend_argument(&dup, &w).unwrap();
        assert_eq!(same.value().data(), &a.data().to_vec()[..]);

        let bad = tape.constant(Tensor::from_vec(&[3], vec![0.3, 0.3, 0.4]).unwrap());
        assert!(blend_argument(&dup, &bad).is_err());
    }

    #[test]
    fn hard_cons_of_zeros_is_pure_root_binding() {
        let (basis, fillers, mops) = setup(3);
        let tape = Tape::new();
        let zero = tape.constant(Tensor::zeros(&[basis.num_roles(), 8]));
        let mut state = MachineState::new(zero);
        let decision = hard_decision(
            &tape,
            &Instr::Cons {
                arg0: 0,
                arg1: 0,
                root: Some("sheep".into()),
            },
            1,
            &fillers,
        )
        .unwrap();
        execute_step(&mut state, &decision, &mops).unwrap();
        let out = as_tpr(state.last(), &basis, &fillers);
        let mut expected = TprTensor::zeros(&basis, &fillers);
        expected
            .bind("", fillers.embedding("sheep").unwrap(), &basis)
            .unwrap();
        assert_eq!(out.max_abs_diff(&expected), 0.0);
    }

    #[test]
    fn hard_program_matches_symbolic_trace() {
        let (basis, fillers, mops) = setup(5);
        let tree: SymTree = "((some x0) ((sad x1) ((sheep x2) end)))".parse().unwrap();
        let prog = LispProgram(vec![
            Instr::Cdr { arg: 0 },
            Instr::Cdr { arg: 1 },
            Instr::Car { arg: 2 },
        ]);
        let tape = Tape::new();
        let state = run_hard_program(&prog, &tree, &tape, &basis, &fillers, &mops).unwrap();
        let trace = run_program_trace(&prog, &tree).unwrap();
        assert_eq!(state.trees.len(), trace.len());
        for (var, sym) in state.trees.iter().zip(&trace) {
            let enc = encode_tree(sym, &basis, &fillers).unwrap();
            assert_eq!(as_tpr(var, &basis, &fillers).max_abs_diff(&enc), 0.0);
        }
        // Final tree decodes to the symbolic result: (sheep x2).
        let decoded = decode_tree(&as_tpr(state.last(), &basis, &fillers), &basis, &fillers)
            .unwrap()
            .unwrap();
        assert_eq!(decoded, sym_car(&trace[2]).unwrap());
        assert_eq!(state.norm_lost, 0.0);
    }

    #[test]
    fn identity_cons_keeps_tree_fixed() {
        let (basis, fillers, mops) = setup(4);
        let tree: SymTree = "(R (S a b) c)".parse().unwrap();
        let enc = encode_tree(&tree, &basis, &fillers).unwrap();
        let tape = Tape::new();
        let input = tape.constant(
            Tensor::from_vec(&[basis.num_roles(), 8], enc.data().to_vec()).unwrap(),
        );
        let mut state = MachineState::new(input);
        // car t, cdr t, cons(car, cdr, root filler) repeatedly.
        for round in 0..3 {
            let n = state.trees.len();
            let t_idx = n - 1;
            let d_car = hard_decision(&tape, &Instr::Car { arg: t_idx }, n, &fillers).unwrap();
            execute_step(&mut state, &d_car, &mops).unwrap();
            let d_cdr =
                hard_decision(&tape, &Instr::Cdr { arg: t_idx }, state.trees.len(), &fillers)
                    .unwrap();
            execute_step(&mut state, &d_cdr, &mops).unwrap();
            let d_cons = hard_decision(
                &tape,
                &Instr::Cons {
                    arg0: t_idx + 1,
                    arg1: t_idx + 2,
                    root: Some("R".into()),
                },
                state.trees.len(),
                &fillers,
            )
            .unwrap();
            execute_step(&mut state, &d_cons, &mops).unwrap();
            let now = as_tpr(state.last(), &basis, &fillers);
            assert_eq!(now.max_abs_diff(&enc), 0.0, "round {round}");
        }
    }

    #[test]
    fn soft_steps_stay_convex_bounded() {
        let (basis, fillers, mops) = setup(3);
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let tape = Tape::new();
        let enc = encode_tree(&"(R (S a b) c)".parse().unwrap(), &basis, &fillers).unwrap();
        let input = tape.constant(
            Tensor::from_vec(&[basis.num_roles(), 8], enc.data().to_vec()).unwrap(),
        );
        let mut state = MachineState::new(input);
        let simplex = |rng: &mut ChaCha12Rng, n: usize| {
            let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            Tensor::from_vec(&[n], raw.into_iter().map(|x| x / s).collect()).unwrap()
        };
        for _ in 0..5 {
            let n = state.trees.len();
            let decision = StepDecision {
                op_weights: tape.constant(simplex(&mut rng, 3)),
                arg_weights: [
                    tape.constant(simplex(&mut rng, n)),
                    tape.constant(simplex(&mut rng, n)),
                    tape.constant(simplex(&mut rng, n)),
                    tape.constant(simplex(&mut rng, n)),
                ],
                root_filler: tape.constant(Tensor::zeros(&[8])),
            };
            // Bound the output by the max over the three operations'
            // outputs, recomputed exactly.
            let t_car = blend_argument(&state, &decision.arg_weights[0]).unwrap();
            let t_cdr = blend_argument(&state, &decision.arg_weights[1]).unwrap();
            let t_c0 = blend_argument(&state, &decision.arg_weights[2]).unwrap();
            let t_c1 = blend_argument(&state, &decision.arg_weights[3]).unwrap();
            let car_v = t_car.role_shift(mops.car.clone()).unwrap().value();
            let cdr_v = t_cdr.role_shift(mops.cdr.clone()).unwrap().value();
            let cons_v = t_c0
                .role_shift(mops.cons0.clone())
                .unwrap()
                .add(&t_c1.role_shift(mops.cons1.clone()).unwrap())
                .unwrap()
                .value();
            execute_step(&mut state, &decision, &mops).unwrap();
            let out = state.last().value();
            for i in 0..out.numel() {
                let bound = car_v.data()[i]
                    .abs()
                    .max(cdr_v.data()[i].abs())
                    .max(cons_v.data()[i].abs());
                assert!(out.data()[i].abs() <= bound + 1e-12);
            }
        }
    }

    #[test]
    fn machine_gradients_match_finite_differences() {
        let (basis, fillers, mops) = setup(3);
        let enc = encode_tree(&"(R (S a b) c)".parse().unwrap(), &basis, &fillers).unwrap();
        let target = encode_tree(&"(S a b)".parse().unwrap(), &basis, &fillers).unwrap();
        let input = Tensor::from_vec(&[basis.num_roles(), 8], enc.data().to_vec()).unwrap();
        let target_t = Tensor::from_vec(&[basis.num_roles(), 8], target.data().to_vec()).unwrap();
        // Differentiate a 2-step run wrt decision weights and the root
        // filler of step 2.
        let op1 = Tensor::from_vec(&[3], vec![0.6, 0.3, 0.1]).unwrap();
        let arg1 = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let op2 = Tensor::from_vec(&[3], vec![0.2, 0.3, 0.5]).unwrap();
        let arg2 = Tensor::from_vec(&[2], vec![0.7, 0.3]).unwrap();
        let root = Tensor::from_vec(&[8], vec![0.1; 8]).unwrap();
        let err = crate::diffmath::finite_diff_max_rel_err(
            &[op1, arg1, op2, arg2, root],
            &|tape, v| {
                let mut state = MachineState::new(tape.constant(input.clone()));
                let d1 = StepDecision {
                    op_weights: v[0].clone(),
                    arg_weights: [v[1].clone(), v[1].clone(), v[1].clone(), v[1].clone()],
                    root_filler: tape.constant(Tensor::zeros(&[8])),
                };
                execute_step(&mut state, &d1, &mops).unwrap();
                let d2 = StepDecision {
                    op_weights: v[2].clone(),
                    arg_weights: [v[3].clone(), v[3].clone(), v[3].clone(), v[3].clone()],
                    root_filler: v[4].clone(),
                };
                execute_step(&mut state, &d2, &mops).unwrap();
                state
                    .last()
                    .mse_loss(&tape.constant(target_t.clone()))
                    .unwrap()
            },
            1e-5,
        );
        assert!(err < 1e-4, "machine gradient error {err}");
    }

    #[test]
    fn full_run_with_controller_shapes() {
        let (basis, fillers, mops) = setup(3);
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let cfg = ControllerConfig {
            d_model: 8,
            n_heads: 2,
            d_f: 8,
            num_roles: basis.num_roles(),
            n_experts: 2,
            top_k: None,
        };
        let controller = Controller::new_moe(&mut store, &cfg, &mut rng).unwrap();
        let tape = Tape::new();
        let state = run(
            &"(R a b)".parse().unwrap(),
            &controller,
            &store,
            &tape,
            &basis,
            &fillers,
            &mops,
            4,
        )
        .unwrap();
        assert_eq!(state.trees.len(), 5);
        assert_eq!(state.step, 4);
        tape.health().unwrap();
    }
}
