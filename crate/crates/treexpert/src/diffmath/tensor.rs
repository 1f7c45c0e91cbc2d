//! Dense double-precision tensors (rank 0-2 in practice).

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {shape:?} wants {numel} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    /// Rows of a matrix (or length of a vector).
    pub fn dim0(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Columns of a matrix.
    pub fn dim1(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim1();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim1() + j]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::from_vec(shape, self.data.clone())
    }

    pub fn transposed(&self) -> Tensor {
        let (m, n) = (self.dim0(), self.dim1());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor {
            shape: vec![n, m],
            data: out,
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, c: f64) {
        for a in self.data.iter_mut() {
            *a *= c;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// c = a (m x k) . b (k x n)
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.dim0(), a.dim1());
    let n = b.dim1();
    debug_assert_eq!(k, b.dim0());
    let mut c = vec![0.0; m * n];
    let ad = &a.data;
    let bd = &b.data;
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = ad[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &bd[kk * n..(kk + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
    Tensor {
        shape: vec![m, n],
        data: c,
    }
}

/// c = a (m x n) . b^T, with b (k x n): used for grad wrt the left
/// matmul operand without materializing a transpose.
pub fn matmul_abt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, n) = (a.dim0(), a.dim1());
    let k = b.dim0();
    debug_assert_eq!(n, b.dim1());
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = a.row(i);
        for kk in 0..k {
            let brow = b.row(kk);
            // Lane-wise accumulation so the reduction vectorizes.
            let mut acc = [0.0f64; 8];
            let mut chunks_a = arow.chunks_exact(8);
            let mut chunks_b = brow.chunks_exact(8);
            for (ca, cb) in (&mut chunks_a).zip(&mut chunks_b) {
                for l in 0..8 {
                    acc[l] += ca[l] * cb[l];
                }
            }
            let mut s: f64 = acc.iter().sum();
            for (av, bv) in chunks_a.remainder().iter().zip(chunks_b.remainder()) {
                s += av * bv;
            }
            c[i * k + kk] = s;
        }
    }
    Tensor {
        shape: vec![m, k],
        data: c,
    }
}

/// c = a^T . b, with a (m x k), b (m x n): grad wrt the right matmul
/// operand.
pub fn matmul_atb(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.dim0(), a.dim1());
    let n = b.dim1();
    debug_assert_eq!(m, b.dim0());
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let arow = a.row(i);
        let brow = b.row(i);
        for (kk, av) in arow.iter().enumerate() {
            if *av == 0.0 {
                continue;
            }
            let crow = &mut c[kk * n..(kk + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    Tensor {
        shape: vec![k, n],
        data: c,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::from_vec(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = matmul(&a, &b);
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 5.0, -6.0]).unwrap();
        let b = Tensor::from_vec(&[4, 3], vec![7.0, 8.0, 1.0, 9.0, -1.0, 2.0, 0.0, 3.0, 4.0, 1.0, 1.0, 1.0]).unwrap();
        // a . b^T via matmul_abt == matmul(a, b.transposed())
        let r1 = matmul_abt(&a, &b);
        let r2 = matmul(&a, &b.transposed());
        assert_eq!(r1, r2);
        // a^T . c via matmul_atb
        let c = Tensor::from_vec(&[2, 4], vec![1.0, 0.0, 2.0, -1.0, 3.0, 1.0, 0.5, 2.0]).unwrap();
        let r3 = matmul_atb(&a, &c);
        let r4 = matmul(&a.transposed(), &c);
        assert_eq!(r3, r4);
    }

    #[test]
    fn from_vec_validates() {
        assert!(Tensor::from_vec(&[2, 2], vec![1.0]).is_err());
    }
}
