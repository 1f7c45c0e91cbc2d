use std::time::Instant;
use treexpert::diffmath::{matmul, matmul_abt, matmul_atb, Tensor};

fn bench(name: &str, m: usize, k: usize, n: usize, f: impl Fn(&Tensor, &Tensor) -> Tensor) {
    let a = Tensor::filled(&[m, k], 0.5);
    let b = Tensor::filled(&[k, n], 0.25);
    let iters = 200_000_000 / (2 * m * k * n) + 1;
    let t0 = Instant::now();
    for _ in 0..iters {
        std::hint::black_box(f(std::hint::black_box(&a), std::hint::black_box(&b)));
    }
    let secs = t0.elapsed().as_secs_f64();
    let gflops = (2.0 * (m * k * n * iters) as f64) / secs / 1e9;
    println!("{name} {m}x{k}x{n}: {gflops:.2} GFLOPS");
}

fn main() {
    for (m, k, n) in [(8, 64, 256), (8, 64, 64), (14, 64, 64), (1, 4064, 64), (64, 8, 256), (64, 64, 64)] {
        bench("matmul", m, k, n, matmul);
    }
    let a = Tensor::filled(&[8, 256], 0.5);
    let b = Tensor::filled(&[64, 256], 0.25);
    let t0 = Instant::now();
    for _ in 0..60000 {
        std::hint::black_box(matmul_abt(std::hint::black_box(&a), std::hint::black_box(&b)));
    }
    println!(
        "matmul_abt 8x256 . (64x256)^T: {:.2} GFLOPS",
        (2.0 * (8u64 * 256 * 64 * 60000) as f64) / t0.elapsed().as_secs_f64() / 1e9
    );
    let a = Tensor::filled(&[8, 64], 0.5);
    let b = Tensor::filled(&[8, 256], 0.25);
    let t0 = Instant::now();
    for _ in 0..60000 {
        std::hint::black_box(matmul_atb(std::hint::black_box(&a), std::hint::black_box(&b)));
    }
    println!(
        "matmul_atb (8x64)^T . 8x256: {:.2} GFLOPS",
        (2.0 * (8u64 * 256 * 64 * 60000) as f64) / t0.elapsed().as_secs_f64() / 1e9
    );
}
