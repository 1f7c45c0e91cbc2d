//! Shared neural building blocks: a post-norm transformer encoder layer
//! and sinusoidal step encodings.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::diffmath::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const FFN_MULT: usize = 4;

/// Glorot-uniform weight matrix.
pub fn glorot(rng: &mut ChaCha12Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_vec(
        &[fan_in, fan_out],
        (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-limit..limit))
            .collect(),
    )
    .unwrap()
}

pub fn normal_vec(rng: &mut ChaCha12Rng, dim: usize, std: f64) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    Tensor::from_vec(
        &[dim],
        (0..dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect(),
    )
    .unwrap()
}

/// One linear map: y = x . w + b.
pub fn linear(store: &ParamStore, tape: &Tape, x: &Var, w: ParamId, b: ParamId) -> Result<Var> {
    x.matmul(&store.var(tape, w))?.add_row(&store.var(tape, b))
}

/// Parameters of a single post-norm transformer encoder layer with GELU
/// feed-forward. Attention is full bidirectional: no causal mask.
pub struct EncoderLayer {
    pub d_model: usize,
    pub n_heads: usize,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ff1: ParamId,
    bf1: ParamId,
    ff2: ParamId,
    bf2: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        n_heads: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        if d_model % n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {d_model} not divisible by n_heads {n_heads}"
            )));
        }
        let d_ff = FFN_MULT * d_model;
        let mat = |store: &mut ParamStore,
                       name: &str,
                       fi: usize,
                       fo: usize,
                       rng: &mut ChaCha12Rng| {
            store.add(&format!("{prefix}.{name}"), glorot(rng, fi, fo), true)
        };
        let wq = mat(store, "wq", d_model, d_model, rng)?;
        let wk = mat(store, "wk", d_model, d_model, rng)?;
        let wv = mat(store, "wv", d_model, d_model, rng)?;
        let wo = mat(store, "wo", d_model, d_model, rng)?;
        let ff1 = mat(store, "ff1", d_model, d_ff, rng)?;
        let ff2 = mat(store, "ff2", d_ff, d_model, rng)?;
        let vecp = |store: &mut ParamStore, name: &str, dim: usize, fill: f64| {
            store.add(&format!("{prefix}.{name}"), Tensor::filled(&[dim], fill), true)
        };
        let bq = vecp(store, "bq", d_model, 0.0)?;
        let bk = vecp(store, "bk", d_model, 0.0)?;
        let bv = vecp(store, "bv", d_model, 0.0)?;
        let bo = vecp(store, "bo", d_model, 0.0)?;
        let bf1 = vecp(store, "bf1", d_ff, 0.0)?;
        let bf2 = vecp(store, "bf2", d_model, 0.0)?;
        let ln1_g = vecp(store, "ln1_g", d_model, 1.0)?;
        let ln1_b = vecp(store, "ln1_b", d_model, 0.0)?;
        let ln2_g = vecp(store, "ln2_g", d_model, 1.0)?;
        let ln2_b = vecp(store, "ln2_b", d_model, 0.0)?;
        Ok(EncoderLayer {
            d_model,
            n_heads,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ff1,
            bf1,
            ff2,
            bf2,
            ln1_g,
            ln1_b,
            ln2_g,
            ln2_b,
        })
    }

    /// tokens (seq x d_model) -> (seq x d_model).
    pub fn forward(&self, store: &ParamStore, tape: &Tape, tokens: &Var) -> Result<Var> {
        let d = self.d_model;
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let q = linear(store, tape, tokens, self.wq, self.bq)?;
        let k = linear(store, tape, tokens, self.wk, self.bk)?;
        let v = linear(store, tape, tokens, self.wv, self.bv)?;

        let mut ctx: Option<Var> = None;
        for h in 0..self.n_heads {
            let qh = q.slice_cols(h * dh, dh)?;
            let kh = k.slice_cols(h * dh, dh)?;
            let vh = v.slice_cols(h * dh, dh)?;
            let scores = qh.matmul(&kh.transpose()?)?.scale(scale);
            let attn = scores.softmax_rows()?;
            let ctx_h = attn.matmul(&vh)?;
            ctx = Some(match ctx {
                Some(c) => c.concat(&ctx_h, 1)?,
                None => ctx_h,
            });
        }
        let attn_out = linear(store, tape, &ctx.unwrap(), self.wo, self.bo)?;
        let x1 = tokens.add(&attn_out)?.layer_norm(
            &store.var(tape, self.ln1_g),
            &store.var(tape, self.ln1_b),
            LAYER_NORM_EPS,
        )?;
        let hidden = linear(store, tape, &x1, self.ff1, self.bf1)?.gelu();
        let ff_out = linear(store, tape, &hidden, self.ff2, self.bf2)?;
        x1.add(&ff_out)?.layer_norm(
            &store.var(tape, self.ln2_g),
            &store.var(tape, self.ln2_b),
            LAYER_NORM_EPS,
        )
    }
}

/// Standard alternating sin/cos positional encoding of a step index.
pub fn sinusoid(step: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::config(format!(
            "sinusoid dimension must be even and positive, got {dim}"
        )));
    }
    let mut out = vec![0.0; dim];
    for i in 0..dim / 2 {
        let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        let angle = step as f64 * freq;
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    Tensor::from_vec(&[dim], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn layer_norm_ref(row: &[f64]) -> Vec<f64> {
        let d = row.len() as f64;
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row.iter().map(|v| (v - mean) * rstd).collect()
    }

    #[test]
    fn zeroed_projections_reduce_to_double_layer_norm() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let layer = EncoderLayer::new(&mut store, "l", 8, 2, &mut rng).unwrap();
        // Zero the attention output and FFN down projections.
        for name in ["l.wo", "l.ff2"] {
            let id = store.id_of(name).unwrap();
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape));
        }
        let token: Vec<f64> = (0..8).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let tape = Tape::new();
        let t = tape.constant(Tensor::from_vec(&[1, 8], token.clone()).unwrap());
        let out = layer.forward(&store, &tape, &t).unwrap();
        let expected = layer_norm_ref(&layer_norm_ref(&token));
        let got = out.value();
        for (a, b) in got.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let layer = EncoderLayer::new(&mut store, "l", 8, 4, &mut rng).unwrap();
        let data: Vec<f64> = (0..4 * 8)
            .map(|i| ((i * 7 % 13) as f64) * 0.21 - 1.1)
            .collect();
        let tokens = Tensor::from_vec(&[4, 8], data.clone()).unwrap();
        let perm = [2usize, 0, 3, 1];
        let mut permuted = vec![0.0; data.len()];
        for (dst, &src) in perm.iter().enumerate() {
            permuted[dst * 8..(dst + 1) * 8].copy_from_slice(tokens.row(src));
        }
        let permuted = Tensor::from_vec(&[4, 8], permuted).unwrap();

        let tape = Tape::new();
        let out = layer
            .forward(&store, &tape, &tape.constant(tokens))
            .unwrap()
            .value();
        let tape2 = Tape::new();
        let out_p = layer
            .forward(&store, &tape2, &tape2.constant(permuted))
            .unwrap()
            .value();
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..8 {
                assert!((out_p.get2(dst, j) - out.get2(src, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encoder_layer_gradient_check() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let layer = EncoderLayer::new(&mut store, "l", 8, 2, &mut rng).unwrap();
        let tokens = Tensor::from_vec(
            &[3, 8],
            (0..24).map(|i| ((i * 5 % 11) as f64) * 0.2 - 1.0).collect(),
        )
        .unwrap();
        let target = Tensor::from_vec(
            &[3, 8],
            (0..24).map(|i| ((i * 3 % 7) as f64) * 0.25 - 0.8).collect(),
        )
        .unwrap();
        let err = crate::diffmath::finite_diff_params_max_rel_err(
            &mut store,
            &[],
            &|store, tape| {
                let t = tape.constant(tokens.clone());
                let out = layer.forward(store, tape, &t).unwrap();
                out.mse_loss(&tape.constant(target.clone())).unwrap()
            },
            1e-5,
        );
        assert!(err < 1e-4, "encoder layer gradient error {err}");
    }

    #[test]
    fn encoder_layer_input_gradient_check() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let layer = EncoderLayer::new(&mut store, "l", 8, 2, &mut rng).unwrap();
        let tokens = Tensor::from_vec(
            &[2, 8],
            (0..16).map(|i| ((i * 5 % 9) as f64) * 0.22 - 0.9).collect(),
        )
        .unwrap();
        let err = crate::diffmath::finite_diff_max_rel_err(
            &[tokens],
            &|tape, vars| {
                let out = layer.forward(&store, tape, &vars[0]).unwrap();
                out.mul(&out).unwrap().sum_all()
            },
            1e-5,
        );
        assert!(err < 1e-4, "input gradient error {err}");
    }

    #[test]
    fn outputs_finite_for_bounded_inputs() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let layer = EncoderLayer::new(&mut store, "l", 16, 4, &mut rng).unwrap();
        let tokens = Tensor::from_vec(
            &[5, 16],
            (0..80)
                .map(|i| if i % 2 == 0 { 10.0 } else { -10.0 })
                .collect(),
        )
        .unwrap();
        let tape = Tape::new();
        let out = layer
            .forward(&store, &tape, &tape.constant(tokens))
            .unwrap();
        assert!(out.value().all_finite());
        tape.health().unwrap();
    }

    #[test]
    fn sinusoid_examples() {
        let s0 = sinusoid(0, 8).unwrap();
        assert_eq!(s0.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        for step in [0usize, 1, 17, 100, 10000] {
            for v in sinusoid(step, 12).unwrap().data() {
                assert!((-1.0..=1.0).contains(v));
            }
        }
        // Distinct steps give distinct encodings.
        let encs: Vec<Tensor> = (0..=56).map(|s| sinusoid(s, 16).unwrap()).collect();
        for i in 0..encs.len() {
            for j in 0..i {
                let d2: f64 = encs[i]
                    .data()
                    .iter()
                    .zip(encs[j].data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                assert!(d2 > 0.0, "steps {i} and {j} collide");
            }
        }
        assert!(sinusoid(0, 7).is_err());
        assert!(sinusoid(0, 0).is_err());
    }
}
