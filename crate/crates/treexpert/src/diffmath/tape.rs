//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records primitive operations as they execute; calling
//! [`Tape::backward`] on a scalar walks the record once in reverse,
//! accumulating gradients additively across fan-out. Tapes are
//! single-threaded; independent samples run on independent tapes.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

use super::params::ParamId;
use super::tensor::{matmul, matmul_abt, matmul_atb, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulScalarVar(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    Transpose(usize),
    Reshape(usize),
    StackRows(Vec<usize>),
    Concat(usize, usize, usize),
    Slice {
        src: usize,
        axis: usize,
        start: usize,
    },
    Gather1d(usize, Rc<Vec<usize>>),
    Softmax1d(usize),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
    Gelu(usize),
    MseLoss(usize, usize),
    CrossEntropyLogits {
        logits: usize,
        target: usize,
    },
    EmbeddingLookup {
        table: usize,
        index: usize,
    },
    SumAll(usize),
    MeanRows(usize),
    LinComb {
        coeffs: usize,
        terms: Vec<usize>,
    },
    RoleShift {
        src: usize,
        map: Rc<Vec<Option<usize>>>,
    },
    PlaceRow {
        src: usize,
        row: usize,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    needs_grad: bool,
    param: Option<ParamId>,
    op: Op,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    consumed: bool,
    health: Option<String>,
    /// First lease of each parameter on this tape, so repeated uses
    /// share one leaf (and one gradient accumulation buffer).
    param_cache: std::collections::HashMap<usize, usize>,
}

#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to a value recorded on a tape.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    idx: usize,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.with_value(|t| f.debug_struct("Var").field("shape", &t.shape()).finish())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First numeric-health violation observed (debug builds scan every
    /// op output for NaN/Inf).
    pub fn health(&self) -> Result<()> {
        match &self.inner.borrow().health {
            Some(msg) => Err(Error::NumericHealth(msg.clone())),
            None => Ok(()),
        }
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool, param: Option<ParamId>) -> Var {
        let mut inner = self.inner.borrow_mut();
        // Debug-mode numeric health: scan outputs of the ops that can
        // produce non-finite values from finite inputs (data-movement
        // ops are skipped; anything they forward was already scanned).
        let scan = matches!(
            op,
            Op::MatMul(..)
                | Op::Mul(..)
                | Op::MulScalarVar(..)
                | Op::Softmax1d(..)
                | Op::SoftmaxRows(..)
                | Op::LayerNorm { .. }
                | Op::Gelu(..)
                | Op::MseLoss(..)
                | Op::CrossEntropyLogits { .. }
                | Op::LinComb { .. }
        );
        if cfg!(debug_assertions) && scan && inner.health.is_none() && !value.all_finite() {
            inner.health = Some(format!("non-finite output of {op:?}"));
        }
        let idx = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            param,
            op,
        });
        Var {
            tape: self.clone(),
            idx,
        }
    }

    /// A leaf that participates in gradient computation.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true, None)
    }

    /// A leaf excluded from gradient computation.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false, None)
    }

    pub(super) fn param_leaf(&self, value: &Tensor, trainable: bool, id: ParamId) -> Var {
        if let Some(&idx) = self.inner.borrow().param_cache.get(&id.0) {
            return Var {
                tape: self.clone(),
                idx,
            };
        }
        let var = self.push(value.clone(), Op::Leaf, trainable, Some(id));
        self.inner.borrow_mut().param_cache.insert(id.0, var.idx);
        var
    }

    /// Reverse pass from a scalar loss. Consumes the tape: a second call
    /// is an error.
    pub fn backward(&self, loss: &Var) -> Result<()> {
        if !Rc::ptr_eq(&self.inner, &loss.tape.inner) {
            return Err(Error::config("backward: loss lives on another tape"));
        }
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::TapeConsumed);
        }
        inner.consumed = true;
        if inner.nodes[loss.idx].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!(
                    "loss must be scalar, got shape {:?}",
                    inner.nodes[loss.idx].value.shape()
                ),
            ));
        }

        let n = inner.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.idx] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.idx).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if !inner.nodes[idx].needs_grad {
                continue;
            }
            let op = inner.nodes[idx].op.clone();
            if matches!(op, Op::Leaf) {
                // Leaf gradients are the results callers read back;
                // interior gradients are dropped once consumed.
                inner.nodes[idx].grad = Some(g);
                continue;
            }
            let nodes = &inner.nodes;
            let send = |grads: &mut Vec<Option<Tensor>>, target: usize, contrib: Tensor| {
                if !nodes[target].needs_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(existing) => existing.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = matmul_abt(&g, &nodes[*b].value);
                    let gb = matmul_atb(&nodes[*a].value, &g);
                    send(&mut grads, *a, ga);
                    send(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    send(&mut grads, *a, g.clone());
                    send(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    let mut neg = g.clone();
                    neg.scale_assign(-1.0);
                    send(&mut grads, *a, g);
                    send(&mut grads, *b, neg);
                }
                Op::Mul(a, b) => {
                    let bv = &nodes[*b].value;
                    let av = &nodes[*a].value;
                    let ga = Tensor::from_vec(
                        av.shape(),
                        g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect(),
                    )
                    .unwrap();
                    let gb = Tensor::from_vec(
                        bv.shape(),
                        g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect(),
                    )
                    .unwrap();
                    send(&mut grads, *a, ga);
                    send(&mut grads, *b, gb);
                }
                Op::MulScalarVar(a, s) => {
                    let sv = nodes[*s].value.scalar_value();
                    let av = &nodes[*a].value;
                    let mut ga = g.clone();
                    ga.scale_assign(sv);
                    let gs: f64 = g.data().iter().zip(av.data()).map(|(x, y)| x * y).sum();
                    send(&mut grads, *a, ga);
                    send(&mut grads, *s, Tensor::scalar(gs));
                }
                Op::Scale(a, c) => {
                    let mut ga = g;
                    ga.scale_assign(*c);
                    send(&mut grads, *a, ga);
                }
                Op::AddRow(a, bias) => {
                    let d = nodes[*bias].value.numel();
                    let mut gb = vec![0.0; d];
                    for row in g.data().chunks(d) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    send(&mut grads, *a, g);
                    send(
                        &mut grads,
                        *bias,
                        Tensor::from_vec(nodes[*bias].value.shape(), gb).unwrap(),
                    );
                }
                Op::Transpose(a) => {
                    send(&mut grads, *a, g.transposed());
                }
                Op::Reshape(a) => {
                    let ga = Tensor::from_vec(nodes[*a].value.shape(), g.into_data()).unwrap();
                    send(&mut grads, *a, ga);
                }
                Op::StackRows(rows) => {
                    let d = g.dim1();
                    for (k, &src) in rows.iter().enumerate() {
                        let slice = g.data()[k * d..(k + 1) * d].to_vec();
                        let ga = Tensor::from_vec(nodes[src].value.shape(), slice).unwrap();
                        send(&mut grads, src, ga);
                    }
                }
                Op::Concat(a, b, axis) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let (ga, gb) = split_concat_grad(&g, av, bv, *axis);
                    send(&mut grads, *a, ga);
                    send(&mut grads, *b, gb);
                }
                Op::Slice { src, axis, start } => {
                    let sv = &nodes[*src].value;
                    let mut ga = Tensor::zeros(sv.shape());
                    scatter_slice_grad(&mut ga, &g, *axis, *start);
                    send(&mut grads, *src, ga);
                }
                Op::Gather1d(src, indices) => {
                    let mut ga = Tensor::zeros(nodes[*src].value.shape());
                    for (k, &i) in indices.iter().enumerate() {
                        ga.data_mut()[i] += g.data()[k];
                    }
                    send(&mut grads, *src, ga);
                }
                Op::Softmax1d(a) => {
                    let y = &inner.nodes[idx].value;
                    let dot: f64 = g.data().iter().zip(y.data()).map(|(x, v)| x * v).sum();
                    let ga = Tensor::from_vec(
                        y.shape(),
                        y.data()
                            .iter()
                            .zip(g.data())
                            .map(|(v, x)| v * (x - dot))
                            .collect(),
                    )
                    .unwrap();
                    send(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &inner.nodes[idx].value;
                    let d = y.dim1();
                    let mut ga = vec![0.0; y.numel()];
                    for (r, (yrow, grow)) in
                        y.data().chunks(d).zip(g.data().chunks(d)).enumerate()
                    {
                        let dot: f64 = yrow.iter().zip(grow).map(|(v, x)| v * x).sum();
                        for j in 0..d {
                            ga[r * d + j] = yrow[j] * (grow[j] - dot);
                        }
                    }
                    send(
                        &mut grads,
                        *a,
                        Tensor::from_vec(y.shape(), ga).unwrap(),
                    );
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let xv = &nodes[*x].value;
                    let gam = &nodes[*gamma].value;
                    let d = xv.dim1();
                    let rows = xv.dim0();
                    let mut gx = vec![0.0; xv.numel()];
                    let mut ggamma = vec![0.0; d];
                    let mut gbeta = vec![0.0; d];
                    for r in 0..rows {
                        let xr = xv.row(r);
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let mean = xr.iter().sum::<f64>() / d as f64;
                        let var =
                            xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let rstd = 1.0 / (var + eps).sqrt();
                        // xhat_j = (x_j - mean) * rstd
                        let mut sum_gg = 0.0; // sum of gamma*g
                        let mut sum_ggx = 0.0; // sum of gamma*g*xhat
                        for j in 0..d {
                            let xhat = (xr[j] - mean) * rstd;
                            let gg = gam.data()[j] * gr[j];
                            sum_gg += gg;
                            sum_ggx += gg * xhat;
                            ggamma[j] += gr[j] * xhat;
                            gbeta[j] += gr[j];
                        }
                        let inv_d = 1.0 / d as f64;
                        for j in 0..d {
                            let xhat = (xr[j] - mean) * rstd;
                            let gg = gam.data()[j] * gr[j];
                            gx[r * d + j] =
                                rstd * (gg - inv_d * sum_gg - xhat * inv_d * sum_ggx);
                        }
                    }
                    send(&mut grads, *x, Tensor::from_vec(xv.shape(), gx).unwrap());
                    send(
                        &mut grads,
                        *gamma,
                        Tensor::from_vec(gam.shape(), ggamma).unwrap(),
                    );
                    send(
                        &mut grads,
                        *beta,
                        Tensor::from_vec(nodes[*beta].value.shape(), gbeta).unwrap(),
                    );
                }
                Op::Gelu(a) => {
                    let xv = &nodes[*a].value;
                    let ga = Tensor::from_vec(
                        xv.shape(),
                        xv.data()
                            .iter()
                            .zip(g.data())
                            .map(|(x, gv)| gv * gelu_grad(*x))
                            .collect(),
                    )
                    .unwrap();
                    send(&mut grads, *a, ga);
                }
                Op::MseLoss(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let n = av.numel() as f64;
                    let gs = g.scalar_value();
                    let diff: Vec<f64> = av
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(x, y)| gs * 2.0 * (x - y) / n)
                        .collect();
                    let ga = Tensor::from_vec(av.shape(), diff.clone()).unwrap();
                    let mut gb = Tensor::from_vec(bv.shape(), diff).unwrap();
                    gb.scale_assign(-1.0);
                    send(&mut grads, *a, ga);
                    send(&mut grads, *b, gb);
                }
                Op::CrossEntropyLogits { logits, target } => {
                    let lv = &nodes[*logits].value;
                    let probs = softmax_slice(lv.data());
                    let gs = g.scalar_value();
                    let mut gl: Vec<f64> = probs.iter().map(|p| gs * p).collect();
                    gl[*target] -= gs;
                    send(
                        &mut grads,
                        *logits,
                        Tensor::from_vec(lv.shape(), gl).unwrap(),
                    );
                }
                Op::EmbeddingLookup { table, index } => {
                    let tv = &nodes[*table].value;
                    let d = tv.dim1();
                    let mut gt = Tensor::zeros(tv.shape());
                    gt.data_mut()[index * d..(index + 1) * d].copy_from_slice(g.data());
                    send(&mut grads, *table, gt);
                }
                Op::SumAll(a) => {
                    let gs = g.scalar_value();
                    send(
                        &mut grads,
                        *a,
                        Tensor::filled(nodes[*a].value.shape(), gs),
                    );
                }
                Op::MeanRows(a) => {
                    let av = &nodes[*a].value;
                    let rows = av.dim0() as f64;
                    let d = av.dim1();
                    let mut ga = vec![0.0; av.numel()];
                    for r in 0..av.dim0() {
                        for j in 0..d {
                            ga[r * d + j] = g.data()[j] / rows;
                        }
                    }
                    send(&mut grads, *a, Tensor::from_vec(av.shape(), ga).unwrap());
                }
                Op::LinComb { coeffs, terms } => {
                    let cv = nodes[*coeffs].value.data().to_vec();
                    let mut gc = vec![0.0; cv.len()];
                    for (k, &term) in terms.iter().enumerate() {
                        let tv = &nodes[term].value;
                        gc[k] = g.data().iter().zip(tv.data()).map(|(x, y)| x * y).sum();
                        if nodes[term].needs_grad {
                            let mut gt = g.clone();
                            gt.scale_assign(cv[k]);
                            send(&mut grads, term, gt);
                        }
                    }
                    send(
                        &mut grads,
                        *coeffs,
                        Tensor::from_vec(nodes[*coeffs].value.shape(), gc).unwrap(),
                    );
                }
                Op::RoleShift { src, map } => {
                    let sv = &nodes[*src].value;
                    let d = sv.dim1();
                    let mut ga = Tensor::zeros(sv.shape());
                    for (target, s) in map.iter().enumerate() {
                        if let Some(s) = s {
                            let grow = &g.data()[target * d..(target + 1) * d];
                            let dst = &mut ga.data_mut()[s * d..(s + 1) * d];
                            for (x, y) in dst.iter_mut().zip(grow) {
                                *x += y;
                            }
                        }
                    }
                    send(&mut grads, *src, ga);
                }
                Op::PlaceRow { src, row } => {
                    let d = nodes[*src].value.numel();
                    let slice = g.data()[row * d..(row + 1) * d].to_vec();
                    send(
                        &mut grads,
                        *src,
                        Tensor::from_vec(nodes[*src].value.shape(), slice).unwrap(),
                    );
                }
            }
        }

        Ok(())
    }

    /// Gradients of parameter leaves, in leaf order.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let inner = self.inner.borrow();
        inner
            .nodes
            .iter()
            .filter_map(|n| match (n.param, &n.grad) {
                (Some(id), Some(g)) => Some((id, g.clone())),
                _ => None,
            })
            .collect()
    }
}

fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn gelu_value(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn split_concat_grad(g: &Tensor, a: &Tensor, b: &Tensor, axis: usize) -> (Tensor, Tensor) {
    if axis == 0 {
        let na = a.numel();
        let ga = Tensor::from_vec(a.shape(), g.data()[..na].to_vec()).unwrap();
        let gb = Tensor::from_vec(b.shape(), g.data()[na..].to_vec()).unwrap();
        (ga, gb)
    } else {
        let (da, db) = (a.dim1(), b.dim1());
        let rows = a.dim0();
        let mut gad = vec![0.0; a.numel()];
        let mut gbd = vec![0.0; b.numel()];
        for r in 0..rows {
            let grow = &g.data()[r * (da + db)..(r + 1) * (da + db)];
            gad[r * da..(r + 1) * da].copy_from_slice(&grow[..da]);
            gbd[r * db..(r + 1) * db].copy_from_slice(&grow[da..]);
        }
        (
            Tensor::from_vec(a.shape(), gad).unwrap(),
            Tensor::from_vec(b.shape(), gbd).unwrap(),
        )
    }
}

fn scatter_slice_grad(ga: &mut Tensor, g: &Tensor, axis: usize, start: usize) {
    match (ga.rank(), axis) {
        (1, _) => {
            let dst = &mut ga.data_mut()[start..start + g.numel()];
            for (x, y) in dst.iter_mut().zip(g.data()) {
                *x += y;
            }
        }
        (2, 0) => {
            let d = ga.dim1();
            let dst = &mut ga.data_mut()[start * d..start * d + g.numel()];
            for (x, y) in dst.iter_mut().zip(g.data()) {
                *x += y;
            }
        }
        (2, 1) => {
            let d = ga.dim1();
            let w = g.dim1();
            let rows = g.dim0();
            for r in 0..rows {
                let grow = &g.data()[r * w..(r + 1) * w];
                let dst = &mut ga.data_mut()[r * d + start..r * d + start + w];
                for (x, y) in dst.iter_mut().zip(grow) {
                    *x += y;
                }
            }
        }
        _ => unreachable!("slice grad on unsupported rank/axis"),
    }
}

impl Var {
    pub fn index(&self) -> usize {
        self.idx
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.inner.borrow().nodes[self.idx].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.inner.borrow().nodes[self.idx].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn scalar_value(&self) -> f64 {
        self.with_value(|t| t.scalar_value())
    }

    pub fn needs_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.idx].needs_grad
    }

    /// Gradient after backward. Retained on leaves only; interior node
    /// gradients are freed once propagated.
    pub fn grad(&self) -> Option<Tensor> {
        self.tape.inner.borrow().nodes[self.idx].grad.clone()
    }

    fn same_tape(&self, other: &Var) -> Result<()> {
        if Rc::ptr_eq(&self.tape.inner, &other.tape.inner) {
            Ok(())
        } else {
            Err(Error::config("operands live on different tapes"))
        }
    }

    fn binary_needs(&self, other: &Var) -> bool {
        let inner = self.tape.inner.borrow();
        inner.nodes[self.idx].needs_grad || inner.nodes[other.idx].needs_grad
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.same_tape(other)?;
        let value = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.idx].value;
            let b = &inner.nodes[other.idx].value;
            if a.rank() != 2 || b.rank() != 2 || a.dim1() != b.dim0() {
                return Err(Error::shape(
                    "matmul",
                    format!("{:?} x {:?}", a.shape(), b.shape()),
                ));
            }
            matmul(a, b)
        };
        let needs = self.binary_needs(other);
        Ok(self
            .tape
            .push(value, Op::MatMul(self.idx, other.idx), needs, None))
    }

    fn elementwise(&self, other: &Var, op_name: &'static str) -> Result<()> {
        self.same_tape(other)?;
        let inner = self.tape.inner.borrow();
        let a = &inner.nodes[self.idx].value;
        let b = &inner.nodes[other.idx].value;
        if a.shape() != b.shape() {
            return Err(Error::shape(
                op_name,
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.elementwise(other, "add")?;
        let value = {
            let inner = self.tape.inner.borrow();
            let mut v = inner.nodes[self.idx].value.clone();
            v.add_assign(&inner.nodes[other.idx].value);
            v
        };
        let needs = self.binary_needs(other);
        Ok(self
            .tape
            .push(value, Op::Add(self.idx, other.idx), needs, None))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.elementwise(other, "sub")?;
        let value = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.idx].value;
            let b = &inner.nodes[other.idx].value;
            Tensor::from_vec(
                a.shape(),
                a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect(),
            )
            .unwrap()
        };
        let needs = self.binary_needs(other);
        Ok(self
            .tape
            .push(value, Op::Sub(self.idx, other.idx), needs, None))
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.elementwise(other, "mul")?;
        let value = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.idx].value;
            let b = &inner.nodes[other.idx].value;
            Tensor::from_vec(
                a.shape(),
                a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect(),
            )
            .unwrap()
        };
        let needs = self.binary_needs(other);
        Ok(self
            .tape
            .push(value, Op::Mul(self.idx, other.idx), needs, None))
    }

    /// Multiply by a scalar variable (broadcast).
    pub fn mul_scalar_var(&self, s: &Var) -> Result<Var> {
        self.same_tape(s)?;
        let value = {
            let inner = self.tape.inner.borrow();
            let sv = &inner.nodes[s.idx].value;
            if sv.numel() != 1 {
                return Err(Error::shape(
                    "mul_scalar_var",
                    format!("scalar operand has shape {:?}", sv.shape()),
                ));
            }
            let c = sv.scalar_value();
            let mut v = inner.nodes[self.idx].value.clone();
            v.scale_assign(c);
            v
        };
        let needs = self.binary_needs(s);
        Ok(self
            .tape
            .push(value, Op::MulScalarVar(self.idx, s.idx), needs, None))
    }

    pub fn scale(&self, c: f64) -> Var {
        let mut value = self.value();
        value.scale_assign(c);
        let needs = self.needs_grad();
        self.tape.push(value, Op::Scale(self.idx, c), needs, None)
    }

    /// Add a row vector to every row of a matrix.
    pub fn add_row(&self, bias: &Var) -> Result<Var> {
        self.same_tape(bias)?;
        let value = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.idx].value;
            let b = &inner.nodes[bias.idx].value;
            if a.rank() != 2 || b.numel() != a.dim1() {
                return Err(Error::shape(
                    "add_row",
                    format!("{:?} + row {:?}", a.shape(), b.shape()),
                ));
            }
            let d = a.dim1();
            let mut v = a.clone();
            for row in v.data_mut().chunks_mut(d) {
                for (x, y) in row.iter_mut().zip(b.data()) {
                    *x += y;
                }
            }
            v
        };
        let needs = self.binary_needs(bias);
        Ok(self
            .tape
            .push(value, Op::AddRow(self.idx, bias.idx), needs, None))
    }

    pub fn transpose(&self) -> Result<Var> {
        let value = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.idx].value;
            if a.rank() != 2 {
                return Err(Error::shape(
                    "transpose",
                    format!("rank-2 required, got {:?}", a.shape()),
                ));
            }
            a.transposed()
        };
        let needs = self.needs_grad();
        Ok(self.tape.push(value, Op::Transpose(self.idx), needs, None))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let value = self.with_value(|t| t.reshaped(shape))?;
        let needs = self.needs_grad();
        Ok(self.tape.push(value, Op::Reshape(self.idx), needs, None))
    }

    pub fn concat(&self, other: &Var, axis: usize) -> Result<Var> {
        self.same_tape(other)?;
        let value = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.idx].value;
            let b = &inner.nodes[other.idx].value;
            match (a.rank(), b.rank(), axis) {
                (1, 1, 0) => {
                    let mut d = a.data().to_vec();
                    d.extend_from_slice(b.data());
                    Tensor::from_vec(&[a.numel() + b.numel()], d).unwrap()
                }
                (2, 2, 0) if a.dim1() == b.dim1() => {
                    let mut d = a.data().to_vec();
                    d.extend_from_slice(b.data());
                    Tensor::from_vec(&[a.dim0() + b.dim0(), a.dim1()], d).unwrap()
                }
                (2, 2, 1) if a.dim0() == b.dim0() => {
                    let (da, db) = (a.dim1(), b.dim1());
                    let mut d = Vec::with_capacity(a.numel() + b.numel());
                    for r in 0..a.dim0() {
                        d.extend_from_slice(a.row(r));
                        d.extend_from_slice(&b.data()[r * db..(r + 1) * db]);
                    }
                    Tensor::from_vec(&[a.dim0(), da + db], d).unwrap()
                }
                _ => {
                    return Err(Error::shape(
                        "concat",
                        format!("{:?} ++ {:?} on axis {axis}", a.shape(), b.shape()),
                    ))
                }
            }
        };
        let needs = self.binary_needs(other);
        Ok(self
            .tape
            .push(value, Op::Concat(self.idx, other.idx, axis), needs, None))
    }

    fn slice_impl(&self, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.idx].value;
            match (a.rank(), axis) {
                (1, 0) if start + len <= a.numel() => {
                    Tensor::from_vec(&[len], a.data()[start..start + len].to_vec()).unwrap()
                }
                (2, 0) if start + len <= a.dim0() => {
                    let d = a.dim1();
                    Tensor::from_vec(
                        &[len, d],
                        a.data()[start * d..(start + len) * d].to_vec(),
                    )
                    .unwrap()
                }
                (2, 1) if start + len <= a.dim1() => {
                    let d = a.dim1();
                    let mut out = Vec::with_capacity(a.dim0() * len);
                    for r in 0..a.dim0() {
                        out.extend_from_slice(&a.data()[r * d + start..r * d + start + len]);
                    }
                    Tensor::from_vec(&[a.dim0(), len], out).unwrap()
                }
                _ => {
                    return Err(Error::shape(
                        "slice",
                        format!(
                            "range {start}..{} on axis {axis} of {:?}",
                            start + len,
                            a.shape()
                        ),
                    ))
                }
            }
        };
        let needs = self.needs_grad();
        Ok(self.tape.push(
            value,
            Op::Slice {
                src: self.idx,
                axis,
                start,
            },
            needs,
            None,
        ))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var> {
        self.slice_impl(0, start, len)
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var> {
        self.slice_impl(1, start, len)
    }

    pub fn slice_1d(&self, start: usize, len: usize) -> Result<Var> {
        self.slice_impl(0, start, len)
    }

    /// One matrix row as a vector.
    pub fn row(&self, r: usize) -> Result<Var> {
        let d = self.with_value(|t| t.dim1());
        self.slice_rows(r, 1)?.reshape(&[d])
    }

    pub fn gather_1d(&self, indices: &[usize]) -> Result<Var> {
        let value = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.idx].value;
            if a.rank() != 1 {
                return Err(Error::shape(
                    "gather_1d",
                    format!("rank-1 required, got {:?}", a.shape()),
                ));
            }
            if let Some(&bad) = indices.iter().find(|&&i| i >= a.numel()) {
                return Err(Error::shape(
                    "gather_1d",
                    format!("index {bad} out of range 0..{}", a.numel()),
                ));
            }
            Tensor::from_vec(
                &[indices.len()],
                indices.iter().map(|&i| a.data()[i]).collect(),
            )
            .unwrap()
        };
        let needs = self.needs_grad();
        Ok(self.tape.push(
            value,
            Op::Gather1d(self.idx, Rc::new(indices.to_vec())),
            needs,
            None,
        ))
    }

    pub fn softmax_1d(&self) -> Result<Var> {
        let value = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.idx].value;
            if a.rank() != 1 {
                return Err(Error::shape(
                    "softmax_1d",
                    format!("rank-1 required, got {:?}", a.shape()),
                ));
            }
            Tensor::from_vec(a.shape(), softmax_slice(a.data())).unwrap()
        };
        let needs = self.needs_grad();
        Ok(self.tape.push(value, Op::Softmax1d(self.idx), needs, None))
    }

    /// Softmax along axis 1 of a matrix, independently per row.
    pub fn softmax_rows(&self) -> Result<Var> {
        let value = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.idx].value;
            if a.rank() != 2 {
                return Err(Error::shape(
                    "softmax_rows",
                    format!("rank-2 required, got {:?}", a.shape()),
                ));
            }
            let d = a.dim1();
            let mut out = Vec::with_capacity(a.numel());
            for row in a.data().chunks(d) {
                out.extend(softmax_slice(row));
            }
            Tensor::from_vec(a.shape(), out).unwrap()
        };
        let needs = self.needs_grad();
        Ok(self
            .tape
            .push(value, Op::SoftmaxRows(self.idx), needs, None))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&self, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        self.same_tape(gamma)?;
        self.same_tape(beta)?;
        let value = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.idx].value;
            let gam = &inner.nodes[gamma.idx].value;
            let bet = &inner.nodes[beta.idx].value;
            if x.rank() != 2 || gam.numel() != x.dim1() || bet.numel() != x.dim1() {
                return Err(Error::shape(
                    "layer_norm",
                    format!(
                        "x {:?}, gamma {:?}, beta {:?}",
                        x.shape(),
                        gam.shape(),
                        bet.shape()
                    ),
                ));
            }
            let d = x.dim1();
            let mut out = Vec::with_capacity(x.numel());
            for row in x.data().chunks(d) {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let rstd = 1.0 / (var + eps).sqrt();
                for j in 0..d {
                    out.push((row[j] - mean) * rstd * gam.data()[j] + bet.data()[j]);
                }
            }
            Tensor::from_vec(x.shape(), out).unwrap()
        };
        let needs = {
            let inner = self.tape.inner.borrow();
            inner.nodes[self.idx].needs_grad
                || inner.nodes[gamma.idx].needs_grad
                || inner.nodes[beta.idx].needs_grad
        };
        Ok(self.tape.push(
            value,
            Op::LayerNorm {
                x: self.idx,
                gamma: gamma.idx,
                beta: beta.idx,
                eps,
            },
            needs,
            None,
        ))
    }

    pub fn gelu(&self) -> Var {
        let value = self.with_value(|t| {
            Tensor::from_vec(t.shape(), t.data().iter().map(|x| gelu_value(*x)).collect())
                .unwrap()
        });
        let needs = self.needs_grad();
        self.tape.push(value, Op::Gelu(self.idx), needs, None)
    }

    /// Mean squared error over all entries.
    pub fn mse_loss(&self, target: &Var) -> Result<Var> {
        self.elementwise(target, "mse_loss")?;
        let value = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.idx].value;
            let b = &inner.nodes[target.idx].value;
            let n = a.numel() as f64;
            let s: f64 = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            Tensor::scalar(s / n)
        };
        let needs = self.binary_needs(target);
        Ok(self
            .tape
            .push(value, Op::MseLoss(self.idx, target.idx), needs, None))
    }

    /// Cross entropy of a logit vector against a class index.
    pub fn cross_entropy_logits(&self, target: usize) -> Result<Var> {
        let value = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.idx].value;
            if a.rank() != 1 || target >= a.numel() {
                return Err(Error::shape(
                    "cross_entropy_logits",
                    format!("logits {:?}, target {target}", a.shape()),
                ));
            }
            let max = a.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max
                + a.data()
                    .iter()
                    .map(|v| (v - max).exp())
                    .sum::<f64>()
                    .ln();
            Tensor::scalar(lse - a.data()[target])
        };
        let needs = self.needs_grad();
        Ok(self.tape.push(
            value,
            Op::CrossEntropyLogits {
                logits: self.idx,
                target,
            },
            needs,
            None,
        ))
    }

    /// Row `index` of an embedding table.
    pub fn embedding_lookup(&self, index: usize) -> Result<Var> {
        let value = {
            let inner = self.tape.inner.borrow();
            let t = &inner.nodes[self.idx].value;
            if t.rank() != 2 || index >= t.dim0() {
                return Err(Error::shape(
                    "embedding_lookup",
                    format!("table {:?}, index {index}", t.shape()),
                ));
            }
            Tensor::from_vec(&[t.dim1()], t.row(index).to_vec()).unwrap()
        };
        let needs = self.needs_grad();
        Ok(self.tape.push(
            value,
            Op::EmbeddingLookup {
                table: self.idx,
                index,
            },
            needs,
            None,
        ))
    }

    pub fn sum_all(&self) -> Var {
        let value = self.with_value(|t| Tensor::scalar(t.data().iter().sum()));
        let needs = self.needs_grad();
        self.tape.push(value, Op::SumAll(self.idx), needs, None)
    }

    /// Mean over rows of a matrix, producing a row vector.
    pub fn mean_rows(&self) -> Result<Var> {
        let value = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.idx].value;
            if a.rank() != 2 || a.dim0() == 0 {
                return Err(Error::shape(
                    "mean_rows",
                    format!("nonempty rank-2 required, got {:?}", a.shape()),
                ));
            }
            let d = a.dim1();
            let mut out = vec![0.0; d];
            for row in a.data().chunks(d) {
                for (acc, v) in out.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            let inv = 1.0 / a.dim0() as f64;
            for v in out.iter_mut() {
                *v *= inv;
            }
            Tensor::from_vec(&[d], out).unwrap()
        };
        let needs = self.needs_grad();
        Ok(self.tape.push(value, Op::MeanRows(self.idx), needs, None))
    }

    /// Re-index rows: `out[target] = self[map[target]]`, zero where the
    /// map is empty. This is the role-axis application of the tree shift
    /// operators.
    pub fn role_shift(&self, map: Rc<Vec<Option<usize>>>) -> Result<Var> {
        let value = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.idx].value;
            if a.rank() != 2 || a.dim0() != map.len() {
                return Err(Error::shape(
                    "role_shift",
                    format!("tensor {:?} vs map of {}", a.shape(), map.len()),
                ));
            }
            let d = a.dim1();
            let mut out = vec![0.0; a.numel()];
            for (target, src) in map.iter().enumerate() {
                if let Some(s) = src {
                    out[target * d..(target + 1) * d].copy_from_slice(a.row(*s));
                }
            }
            Tensor::from_vec(a.shape(), out).unwrap()
        };
        let needs = self.needs_grad();
        Ok(self.tape.push(
            value,
            Op::RoleShift {
                src: self.idx,
                map,
            },
            needs,
            None,
        ))
    }

    /// Embed a vector as row `row` of an otherwise zero (rows x len)
    /// matrix.
    pub fn place_row(&self, row: usize, rows: usize) -> Result<Var> {
        let value = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.idx].value;
            if a.rank() != 1 || row >= rows {
                return Err(Error::shape(
                    "place_row",
                    format!("vector {:?} into row {row} of {rows}", a.shape()),
                ));
            }
            let d = a.numel();
            let mut out = vec![0.0; rows * d];
            out[row * d..(row + 1) * d].copy_from_slice(a.data());
            Tensor::from_vec(&[rows, d], out).unwrap()
        };
        let needs = self.needs_grad();
        Ok(self.tape.push(
            value,
            Op::PlaceRow {
                src: self.idx,
                row,
            },
            needs,
            None,
        ))
    }
}

/// Stack vectors (or single rows) into a matrix.
pub fn stack_rows(rows: &[Var]) -> Result<Var> {
    let first = rows
        .first()
        .ok_or_else(|| Error::shape("stack_rows", "no rows given".to_string()))?;
    let tape = first.tape.clone();
    let d = first.with_value(|t| t.numel());
    let mut data = Vec::with_capacity(rows.len() * d);
    let mut needs = false;
    let mut idxs = Vec::with_capacity(rows.len());
    for r in rows {
        r.same_tape(first)?;
        let ok = r.with_value(|t| {
            if t.numel() != d {
                return false;
            }
            data.extend_from_slice(t.data());
            true
        });
        if !ok {
            return Err(Error::shape(
                "stack_rows",
                format!("inconsistent row widths ({d} expected)"),
            ));
        }
        needs |= r.needs_grad();
        idxs.push(r.idx);
    }
    let value = Tensor::from_vec(&[rows.len(), d], data).unwrap();
    Ok(tape.push(value, Op::StackRows(idxs), needs, None))
}

/// Weighted sum of same-shaped tensors: `out = sum_i coeffs[i] * terms[i]`.
pub fn lincomb(coeffs: &Var, terms: &[Var]) -> Result<Var> {
    let tape = coeffs.tape.clone();
    let n = coeffs.with_value(|t| t.numel());
    if n != terms.len() || terms.is_empty() {
        return Err(Error::shape(
            "lincomb",
            format!("{n} coefficients for {} terms", terms.len()),
        ));
    }
    let shape = terms[0].shape();
    let mut needs = coeffs.needs_grad();
    let mut idxs = Vec::with_capacity(terms.len());
    let cv = coeffs.value();
    let mut out = Tensor::zeros(&shape);
    for (k, term) in terms.iter().enumerate() {
        term.same_tape(coeffs)?;
        let ok = term.with_value(|t| {
            if t.shape() != shape.as_slice() {
                return false;
            }
            let c = cv.data()[k];
            for (acc, v) in out.data_mut().iter_mut().zip(t.data()) {
                *acc += c * v;
            }
            true
        });
        if !ok {
            return Err(Error::shape(
                "lincomb",
                format!("term {k} shape differs from {shape:?}"),
            ));
        }
        needs |= term.needs_grad();
        idxs.push(term.idx);
    }
    Ok(tape.push(
        out,
        Op::LinComb {
            coeffs: coeffs.idx,
            terms: idxs,
        },
        needs,
        None,
    ))
}
