//! Dense row-major tensors over f32/f64.
//!
//! Inference and training run in f32; the same generic code paths are
//! instantiated in f64 by the gradient-check and oracle tests. There is no
//! general broadcasting: shapes must match exactly except for the
//! trailing-axis vector ops that say otherwise.

pub mod nn;
pub mod tape;

use crate::error::{Error, Result};
use crate::rng::CounterRng;

/// Element type for tensors. Implemented for `f32` and `f64` only.
pub trait Scalar:
    num_traits::Float + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
    const DTYPE: &'static str;
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    /// C[m,n] += A[m,k] * B[k,n] with explicit strides (alpha=1, beta accumul.).
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Contiguous row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    /// Normal(0, std^2) init from the counter RNG.
    pub fn randn(shape: &[usize], std: f64, rng: &mut CounterRng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(rng.normal() * std)).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> T {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Rows of a 2D tensor, or product of leading dims for ND viewed as 2D.
    pub fn rows_2d(&self) -> usize {
        debug_assert!(!self.shape.is_empty());
        self.numel() / self.shape[self.shape.len() - 1]
    }

    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} ({} elems) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "elementwise op on mismatched shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|x| x * c)
    }

    /// Accumulate `other` into self elementwise.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "add_assign on mismatched shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
        Ok(())
    }

    pub fn transpose2d(&self) -> Result<Self> {
        if self.ndim() != 2 {
            return Err(Error::Dimension(format!("transpose needs 2D, got {:?}", self.shape)));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor { shape: vec![c, r], data: out })
    }

    /// Slice `len` indices starting at `start` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.ndim() {
            return Err(Error::Dimension(format!("axis {} out of range for {:?}", axis, self.shape)));
        }
        if start + len > self.shape[axis] {
            return Err(Error::Dimension(format!(
                "slice [{start}, {}) exceeds axis {} of size {}",
                start + len,
                axis,
                self.shape[axis]
            )));
        }
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let src_stride = self.shape[axis] * inner;
        let dst_stride = len * inner;
        let mut shape = self.shape.clone();
        shape[axis] = len;
        let mut data = vec![T::zero(); outer * dst_stride];
        for o in 0..outer {
            let src = o * src_stride + start * inner;
            let dst = o * dst_stride;
            data[dst..dst + dst_stride].copy_from_slice(&self.data[src..src + dst_stride]);
        }
        Ok(Tensor { shape, data })
    }

    /// Concatenate along `axis`; all other dimensions must match.
    pub fn concat_axis(parts: &[&Tensor<T>], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        if axis >= first.ndim() {
            return Err(Error::Dimension(format!("axis {} out of range for {:?}", axis, first.shape)));
        }
        let mut axis_total = 0;
        for p in parts {
            if p.ndim() != first.ndim() {
                return Err(Error::Dimension("concat rank mismatch".into()));
            }
            for (d, (&a, &b)) in p.shape.iter().zip(&first.shape).enumerate() {
                if d != axis && a != b {
                    return Err(Error::Dimension(format!(
                        "concat shape mismatch at dim {d}: {:?} vs {:?}",
                        p.shape, first.shape
                    )));
                }
            }
            axis_total += p.shape[axis];
        }
        let inner: usize = first.shape[axis + 1..].iter().product();
        let outer: usize = first.shape[..axis].iter().product();
        let mut shape = first.shape.clone();
        shape[axis] = axis_total;
        let mut data = vec![T::zero(); outer * axis_total * inner];
        let dst_stride = axis_total * inner;
        for o in 0..outer {
            let mut at = 0;
            for p in parts {
                let plen = p.shape[axis] * inner;
                let src = o * plen;
                let dst = o * dst_stride + at;
                data[dst..dst + plen].copy_from_slice(&p.data[src..src + plen]);
                at += plen;
            }
        }
        Ok(Tensor { shape, data })
    }

    /// Select rows of a 2D tensor in the given index order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        if self.ndim() != 2 {
            return Err(Error::Dimension("select_rows needs 2D".into()));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::Dimension(format!("row {i} out of range {r}")));
            }
            data.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Ok(Tensor { shape: vec![idx.len(), c], data })
    }

    /// Select columns of a 2D tensor in the given index order.
    pub fn select_cols(&self, idx: &[usize]) -> Result<Self> {
        if self.ndim() != 2 {
            return Err(Error::Dimension("select_cols needs 2D".into()));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut data = Vec::with_capacity(idx.len() * r);
        for i in 0..r {
            for &j in idx {
                if j >= c {
                    return Err(Error::Dimension(format!("col {j} out of range {c}")));
                }
                data.push(self.data[i * c + j]);
            }
        }
        Ok(Tensor { shape: vec![r, idx.len()], data })
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |s, &x| s + x)
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_f64(self.numel() as f64)
    }

    pub fn l1(&self) -> T {
        self.data.iter().fold(T::zero(), |s, &x| s + x.abs())
    }

    pub fn l2(&self) -> T {
        self.data.iter().fold(T::zero(), |s, &x| s + x * x).sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Lossless elementwise conversion (f32 -> f64 is exact).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.as_f64())).collect(),
        }
    }

    /// `a @ b` with optional transposes, as 2D matrices.
    pub fn matmul(a: &Tensor<T>, ta: bool, b: &Tensor<T>, tb: bool) -> Result<Tensor<T>> {
        if a.ndim() != 2 || b.ndim() != 2 {
            return Err(Error::Dimension(format!(
                "matmul needs 2D operands, got {:?} and {:?}",
                a.shape, b.shape
            )));
        }
        let (m, ka) = if ta { (a.shape[1], a.shape[0]) } else { (a.shape[0], a.shape[1]) };
        let (kb, n) = if tb { (b.shape[1], b.shape[0]) } else { (b.shape[0], b.shape[1]) };
        if ka != kb {
            return Err(Error::Dimension(format!(
                "matmul inner dims differ: {:?}{} x {:?}{}",
                a.shape,
                if ta { "^T" } else { "" },
                b.shape,
                if tb { "^T" } else { "" }
            )));
        }
        let mut out = Tensor::zeros(&[m, n]);
        let (rsa, csa) = if ta { (1, a.shape[1] as isize) } else { (a.shape[1] as isize, 1) };
        let (rsb, csb) = if tb { (1, b.shape[1] as isize) } else { (b.shape[1] as isize, 1) };
        unsafe {
            T::gemm(
                m,
                ka,
                n,
                a.data.as_ptr(),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                T::zero(),
                out.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t64(shape: &[usize], vals: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), vals.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let eye = t64(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let b = t64(&[3, 2], &[1., 2., 3., 4., 5., 6.]);
        let c = Tensor::matmul(&eye, false, &b, false).unwrap();
        assert_eq!(c, b);
    }

    #[test]
    fn matmul_hand_case() {
        let a = t64(&[1, 2], &[1., 2.]);
        let b = t64(&[2, 1], &[3., 4.]);
        let c = Tensor::matmul(&a, false, &b, false).unwrap();
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_transpose_flags_agree_with_explicit_transpose() {
        let mut rng = CounterRng::new(11);
        let a = Tensor::<f64>::randn(&[4, 5], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng);
        let via_flag = Tensor::matmul(&a, true, &b, false).unwrap();
        let explicit = Tensor::matmul(&a.transpose2d().unwrap(), false, &b, false).unwrap();
        for (x, y) in via_flag.data().iter().zip(explicit.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 2]);
        assert!(Tensor::matmul(&a, false, &b, false).is_err());
    }

    #[test]
    fn slice_and_select() {
        let a = t64(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let s = a.slice_axis(1, 1, 2).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[2., 3., 5., 6.]);
        let r = a.select_rows(&[1]).unwrap();
        assert_eq!(r.data(), &[4., 5., 6.]);
        let c = a.select_cols(&[2, 0]).unwrap();
        assert_eq!(c.data(), &[3., 1., 6., 4.]);
    }

    proptest! {
        // Concat followed by complementary slices reproduces the originals bit-exactly.
        #[test]
        fn concat_slice_roundtrip(
            seed in 0u64..1000,
            axis in 0usize..3,
            la in 1usize..4,
            lb in 1usize..4,
        ) {
            let mut rng = CounterRng::new(seed);
            let mut sa = vec![2usize, 3, 2];
            let mut sb = sa.clone();
            sa[axis] = la;
            sb[axis] = lb;
            let a = Tensor::<f64>::randn(&sa, 1.0, &mut rng);
            let b = Tensor::<f64>::randn(&sb, 1.0, &mut rng);
            let cat = Tensor::concat_axis(&[&a, &b], axis).unwrap();
            let back_a = cat.slice_axis(axis, 0, la).unwrap();
            let back_b = cat.slice_axis(axis, la, lb).unwrap();
            prop_assert_eq!(back_a, a);
            prop_assert_eq!(back_b, b);
        }

        #[test]
        fn reshape_preserves_data(seed in 0u64..1000) {
            let mut rng = CounterRng::new(seed);
            let a = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
            let b = a.reshape(&[2, 6]).unwrap();
            prop_assert_eq!(a.data(), b.data());
        }
    }
}
