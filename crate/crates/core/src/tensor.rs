//! Dense row-major `f64` tensors, a seeded generator, and the `TNSR` binary
//! encoding shared by checkpoints.
//!
//! Tensors are plain values: every operation returns a fresh tensor and the
//! elementwise ops reject results containing NaN or infinity. Layers that need
//! to run tight loops borrow the backing slice through [`Tensor::data`] and
//! [`Tensor::data_mut`] and do their own shape bookkeeping.

use std::fmt;
use std::io::{Read, Write};

use rand::{Rng as _, RngExt, SeedableRng};
use rand_xoshiro::SplitMix64;

use crate::error::{Error, Result};

const TENSOR_MAGIC: &[u8; 4] = b"TNSR";

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= PREVIEW {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " {:?}..", &self.data[..PREVIEW])
        }
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Precondition(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("Tensor::new", &[expected], &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&e| e > 0), "zero extent in {shape:?}");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        assert!(shape.iter().all(|&e| e > 0), "zero extent in {shape:?}");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(&other.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", shape, &self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (&[m, k], &[k2, n]) = (self.shape.as_slice(), other.shape.as_slice()) else {
            return Err(Error::shape("matmul", &[0, 0], &self.shape));
        };
        if k != k2 {
            return Err(Error::shape("matmul", &[k, n], &other.shape));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, &self.data, false, &other.data, false, 0.0, &mut out);
        Tensor::new(&[m, n], out)?.ensure_finite("matmul")
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
        .ensure_finite("map")
    }

    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape("zip_with", &self.shape, &other.shape));
        }
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
        .ensure_finite("zip_with")
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn add_scalar(&self, s: f64) -> Result<Tensor> {
        self.map(|v| v + s)
    }

    pub fn scale(&self, s: f64) -> Result<Tensor> {
        self.map(|v| v * s)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.map(sigmoid)
    }

    pub fn tanh(&self) -> Result<Tensor> {
        self.map(f64::tanh)
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.map(|v| v.max(0.0))
    }

    /// `self += alpha * x`, in place.
    pub fn axpy(&mut self, alpha: f64, x: &Tensor) {
        assert_eq!(self.shape, x.shape, "axpy shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&x.data) {
            *a += alpha * b;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// Little-endian `TNSR` encoding: magic, `u32` rank, `u64` extents, raw `f64` payload.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &e in &self.shape {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::format(format!("bad tensor magic {magic:?}")));
        }
        let rank = read_u32_le(r)? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::format(format!("unsupported tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64_le(r)? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .filter(|&n| n > 0 && n < (1 << 34))
            .ok_or_else(|| Error::format(format!("implausible tensor shape {shape:?}")))?;
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes).map_err(truncated)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(&shape, data)
    }
}

pub(crate) fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::format("unexpected end of data")
    } else {
        Error::Io(e)
    }
}

pub(crate) fn read_u32_le<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64_le<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` over row-major buffers, where `op(a)`
/// is `m x k` and `op(b)` is `k x n`. A transposed operand is stored in its
/// untransposed row-major layout (`k x m` for `a`, `n x k` for `b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Seeded SplitMix64 stream. One generator per consumer; workers derive
/// independent streams with [`Rng::child_seed`].
#[derive(Clone, Debug)]
pub struct Rng(SplitMix64);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng(SplitMix64::seed_from_u64(seed))
    }

    /// Seed for the `index`-th child stream of `master`. Depends only on the
    /// pair, so work can be scheduled in any order.
    pub fn child_seed(master: u64, index: u64) -> u64 {
        let mut g = SplitMix64::seed_from_u64(master ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03));
        g.next_u64()
    }

    pub fn child(master: u64, index: u64) -> Self {
        Self::new(Self::child_seed(master, index))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        self.0.random::<f64>()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        self.0.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.unit() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Uniform draws in `±sqrt(6 / (fan_in + fan_out))`.
pub fn init_fan_scaled(rng: &mut Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    assert!(fan_in > 0 && fan_out > 0, "fan sizes must be positive");
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.uniform(-bound, bound))
}
