//! Rough per-sample cost of a full unrolled run, forward and backward.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use treexpert::controller::{Controller, ControllerConfig};
use treexpert::diffmath::{GradAccumulator, ParamStore, Tape, Tensor};
use treexpert::machine::{run, MachineOps};
use treexpert::tpr::{build_role_basis, encode_tree, FillerTable, Operators};

fn main() {
    let basis = build_role_basis(6).unwrap();
    let vocab: Vec<String> = (0..84).map(|i| format!("w{i}")).collect();
    let fillers = FillerTable::new(&vocab, 32, 0).unwrap();
    let ops = Operators::new(&basis);
    let mops = MachineOps::new(&basis, &fillers, &ops);
    let mut store = ParamStore::new();
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let cfg = ControllerConfig {
        d_model: 64,
        n_heads: 4,
        d_f: 32,
        num_roles: basis.num_roles(),
        n_experts: 16,
        top_k: None,
    };
    let controller = Controller::new_moe(&mut store, &cfg, &mut rng).unwrap();
    println!("controller params: {}", controller.param_count(&store));

    let source: treexpert::symbolic::SymTree =
        "(w1 (w2 w3 (w4 w5 w6)) (w7 w8 (w9 w10 w11)))".parse().unwrap();
    let target = encode_tree(&source, &basis, &fillers).unwrap();
    let target_t = Tensor::from_vec(&[basis.num_roles(), 32], target.data().to_vec()).unwrap();

    // Warm up then measure.
    for phase in ["warmup", "fwd", "fwd+bwd"] {
        let iters = if phase == "warmup" { 2 } else { 8 };
        let t0 = Instant::now();
        for _ in 0..iters {
            let tape = Tape::new();
            let state = run(
                &source, &controller, &store, &tape, &basis, &fillers, &mops, 12,
            )
            .unwrap();
            let loss = state
                .last()
                .mse_loss(&tape.constant(target_t.clone()))
                .unwrap();
            if phase != "fwd" {
                tape.backward(&loss).unwrap();
                let mut acc = GradAccumulator::new(&store);
                acc.absorb(&tape);
            }
            std::hint::black_box(loss.scalar_value());
        }
        if phase != "warmup" {
            println!(
                "{phase}: {:.1} ms/sample",
                t0.elapsed().as_secs_f64() * 1000.0 / iters as f64
            );
        }
    }
}
