//! Dense row-major `f64` tensors and the raw kernels the autograd graph uses.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for kernels that already know the sizes agree.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self::from_parts(vec![data.len()], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::from_parts(self.shape.clone(), data)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Trailing-dimension broadcast of two shapes.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Shape {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside the broadcast `out` shape (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

pub(crate) fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        return Ok(a.zip_map(b, f));
    }
    let out_shape = broadcast_shape(op, &a.shape, &b.shape)?;
    let n: usize = out_shape.iter().product();
    let mut data = Vec::with_capacity(n);
    if b.numel() == 1 {
        let y = b.data[0];
        data.extend(a.data.iter().map(|&x| f(x, y)));
    } else if a.numel() == 1 {
        let x = a.data[0];
        data.extend(b.data.iter().map(|&y| f(x, y)));
    } else if out_shape == a.shape && is_suffix(&b.shape, &a.shape) {
        for chunk in a.data.chunks(b.numel()) {
            data.extend(chunk.iter().zip(&b.data).map(|(&x, &y)| f(x, y)));
        }
    } else if out_shape == b.shape && is_suffix(&a.shape, &b.shape) {
        for chunk in b.data.chunks(a.numel()) {
            data.extend(a.data.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
        }
    } else {
        let sa = broadcast_strides(&a.shape, &out_shape);
        let sb = broadcast_strides(&b.shape, &out_shape);
        let mut idx = vec![0usize; out_shape.len()];
        let (mut ia, mut ib) = (0usize, 0usize);
        for _ in 0..n {
            data.push(f(a.data[ia], b.data[ib]));
            for d in (0..out_shape.len()).rev() {
                idx[d] += 1;
                ia += sa[d];
                ib += sb[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                ia -= sa[d] * out_shape[d];
                ib -= sb[d] * out_shape[d];
                idx[d] = 0;
            }
        }
    }
    Ok(Tensor::from_parts(out_shape, data))
}

/// Sum `grad` down to `target` shape, undoing a trailing-dimension broadcast.
pub(crate) fn reduce_to_shape(grad: &Tensor, target: &[usize]) -> Tensor {
    if grad.shape == target {
        return grad.clone();
    }
    let n_target: usize = target.iter().product();
    let mut out = vec![0.0; n_target];
    if is_suffix(target, &grad.shape) {
        for chunk in grad.data.chunks(n_target) {
            for (o, g) in out.iter_mut().zip(chunk) {
                *o += g;
            }
        }
    } else {
        let st = broadcast_strides(target, &grad.shape);
        let mut idx = vec![0usize; grad.shape.len()];
        let mut it = 0usize;
        for &g in &grad.data {
            out[it] += g;
            for d in (0..grad.shape.len()).rev() {
                idx[d] += 1;
                it += st[d];
                if idx[d] < grad.shape[d] {
                    break;
                }
                it -= st[d] * grad.shape[d];
                idx[d] = 0;
            }
        }
    }
    Tensor::from_parts(target.to_vec(), out)
}

/// General axis permutation: `out.shape[i] = x.shape[axes[i]]`.
pub(crate) fn permute(x: &Tensor, axes: &[usize]) -> Tensor {
    let rank = x.rank();
    let in_strides = strides(&x.shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.numel();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    // innermost loop is contiguous in the output
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    for _ in 0..n / inner {
        let mut s = src;
        for _ in 0..inner {
            data.push(x.data[s]);
            s += inner_stride;
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::from_parts(out_shape, data)
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// `c[m,n] += a[m,k] * b[k,n]` on raw slices.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,k] += a[m,n] * b[k,n]^T`.
pub(crate) fn gemm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * k + p] += acc;
        }
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`.
pub(crate) fn gemm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Matrix-product geometry of a (possibly batched) matmul.
#[derive(Debug, Clone, Copy)]
pub(crate) struct MatmulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub a_batched: bool,
    pub b_batched: bool,
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatmulDims> {
    let err = || Error::Shape {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    let (ab, m, k) = match *a {
        [m, k] => (None, m, k),
        [bt, m, k] => (Some(bt), m, k),
        _ => return Err(err()),
    };
    let (bb, k2, n) = match *b {
        [k2, n] => (None, k2, n),
        [bt, k2, n] => (Some(bt), k2, n),
        _ => return Err(err()),
    };
    if k != k2 {
        return Err(err());
    }
    let batch = match (ab, bb) {
        (Some(x), Some(y)) if x != y => return Err(err()),
        (Some(x), _) | (None, Some(x)) => x,
        (None, None) => 1,
    };
    Ok(MatmulDims {
        batch,
        m,
        k,
        n,
        a_batched: ab.is_some(),
        b_batched: bb.is_some(),
    })
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = matmul_dims(&a.shape, &b.shape)?;
    let mut out = vec![0.0; d.batch * d.m * d.n];
    for bi in 0..d.batch {
        let ao = if d.a_batched { bi * d.m * d.k } else { 0 };
        let bo = if d.b_batched { bi * d.k * d.n } else { 0 };
        gemm_acc(
            &a.data[ao..ao + d.m * d.k],
            &b.data[bo..bo + d.k * d.n],
            &mut out[bi * d.m * d.n..(bi + 1) * d.m * d.n],
            d.m,
            d.k,
            d.n,
        );
    }
    let shape = if d.a_batched || d.b_batched {
        vec![d.batch, d.m, d.n]
    } else {
        vec![d.m, d.n]
    };
    Ok(Tensor::from_parts(shape, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_general_path_matches_manual() {
        let a = Tensor::new(vec![2, 1, 3], (0..6).map(f64::from).collect()).unwrap();
        let b = Tensor::new(vec![4, 1], vec![10.0, 20.0, 30.0, 40.0]).unwrap();
        let c = broadcast_binary("add", &a, &b, |x, y| x + y).unwrap();
        assert_eq!(c.shape(), &[2, 4, 3]);
        assert_eq!(c.data()[0], 10.0);
        assert_eq!(c.data()[5], 22.0);
        assert_eq!(c.data()[12], 13.0);
        let back = reduce_to_shape(&c, &[4, 1]);
        // each b entry appears 2*3 times, plus the a contributions
        assert_eq!(back.data()[0], 6.0 * 10.0 + 15.0);
    }

    #[test]
    fn permute_roundtrip() {
        let x = Tensor::new(vec![2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        let axes = [2, 0, 1];
        let y = permute(&x, &axes);
        assert_eq!(y.shape(), &[4, 2, 3]);
        // y[i,j,k] = x[j,k,i]
        assert_eq!(y.data()[1 * 6 + 1 * 3 + 2], x.data()[1 * 12 + 2 * 4 + 1]);
        let z = permute(&y, &inverse_permutation(&axes));
        assert_eq!(z, x);
    }

    #[test]
    fn rejects_zero_extent() {
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }
}
