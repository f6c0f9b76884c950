//! Dense row-major float arrays, forward kernels and a reverse-mode tape.
//!
//! Training runs in `f32`; the same code paths are instantiated for `f64`
//! when checking gradients against finite differences.

mod gradcheck;
pub mod ops;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;

pub use gradcheck::{check_gradients, numeric_gradient, relative_error, GradCheckReport};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

/// Scalar type the tensor engine is instantiated for (`f32` and `f64`).
pub trait Float:
    num_traits::Float
    + num_traits::NumAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + 'static
{
    fn lit(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
    fn erf(self) -> Self;

    /// In-place `exp` over a slice; the `f32` path uses a vectorizable polynomial.
    fn exp_slice(xs: &mut [Self]) {
        for v in xs {
            *v = v.exp();
        }
    }

    /// `c = a·b + beta·c` over strided views; `c` is row-major with row stride `rsc`.
    #[allow(clippy::too_many_arguments)]
    #[doc(hidden)]
    unsafe fn gemm_raw(
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
    );
}

impl Float for f32 {
    fn lit(v: f64) -> Self {
        v as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
    fn erf(self) -> Self {
        libm::erff(self)
    }
    fn exp_slice(xs: &mut [f32]) {
        for v in xs {
            *v = exp_f32(*v);
        }
    }
    unsafe fn gemm_raw(
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
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, 1);
    }
}

impl Float for f64 {
    fn lit(v: f64) -> Self {
        v
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
    unsafe fn gemm_raw(
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
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, 1);
    }
}

/// `exp` for `f32` with ≤ 2 ulp error on the finite range, written so the
/// loop in [`Float::exp_slice`] auto-vectorizes (no libm call, no branches).
#[inline(always)]
fn exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    const ROUND: f32 = 12_582_912.0; // 1.5·2^23: adding it rounds to an integer
    let x = if x < -87.0 { -87.0 } else { x };
    let x = if x > 88.0 { 88.0 } else { x };
    let shifted = x * LOG2E + ROUND;
    let n = shifted - ROUND;
    // integer n sits in the low mantissa bits of `shifted`
    let ni = shifted.to_bits() as i32 - ROUND.to_bits() as i32;
    let r = x - n * LN2_HI - n * LN2_LO;
    let p = 1.987_569_1e-4f32;
    let p = p * r + 1.398_199_9e-3;
    let p = p * r + 8.333_452e-3;
    let p = p * r + 4.166_579_6e-2;
    let p = p * r + 1.666_666_5e-1;
    let p = p * r + 0.5;
    let y = p * r * r + r + 1.0;
    y * f32::from_bits(((ni + 127) as u32) << 23)
}

/// A strided read-only matrix view used to feed [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct MatView<'a, F> {
    pub data: &'a [F],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, F> MatView<'a, F> {
    /// Row-major `rows × cols` block starting at the front of `data`.
    pub fn new(data: &'a [F], rows: usize, cols: usize) -> Self {
        MatView { data, rows, cols, rs: cols, cs: 1 }
    }

    pub fn strided(data: &'a [F], rows: usize, cols: usize, rs: usize) -> Self {
        MatView { data, rows, cols, rs, cs: 1 }
    }

    pub fn t(self) -> Self {
        MatView { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

/// `out = a·b + beta·out`, `out` row-major with row stride `rs_out`.
///
/// The summation order depends only on the extents, so results are
/// bit-reproducible for identical inputs.
pub(crate) fn gemm<F: Float>(a: MatView<'_, F>, b: MatView<'_, F>, beta: F, out: &mut [F], rs_out: usize) {
    assert_eq!(a.cols, b.rows, "gemm inner extents");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.span() <= a.data.len() && b.span() <= b.data.len(), "gemm operand out of bounds");
    assert!((m - 1) * rs_out + n <= out.len(), "gemm output out of bounds");
    if k == 0 {
        for i in 0..m {
            for v in &mut out[i * rs_out..i * rs_out + n] {
                *v *= beta;
            }
        }
        return;
    }
    // SAFETY: every index touched by the kernel lies inside the spans checked above.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            out.as_mut_ptr(),
            rs_out as isize,
        );
    }
}

/// Dense N-dimensional array in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
}

pub(crate) fn shape_numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Float> Tensor<F> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<F>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        if shape_numel(&shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {} values, got {}",
                shape_numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, F::one())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: F) -> Self {
        let shape = shape.into();
        let n = shape_numel(&shape);
        Tensor { shape, data: vec![value; n] }
    }

    pub fn scalar(value: F) -> Self {
        Tensor { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> F) -> Self {
        let shape = shape.into();
        let data = (0..shape_numel(&shape)).map(&mut f).collect();
        Tensor { shape, data }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<F>) -> Self {
        debug_assert_eq!(shape_numel(&shape), data.len());
        Tensor { shape, data }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn([n, n], |i| if i / n == i % n { F::one() } else { F::zero() })
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

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape_numel(&shape) != self.data.len() {
            return Err(Error::shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        Ok(Tensor { shape, data: self.data })
    }

    pub fn cast<G: Float>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| G::lit(v.to_f64_lossy())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &Self) -> Option<F> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .fold(F::zero(), |m, (&a, &b)| m.max((a - b).abs())),
        )
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

impl<F: Float> std::ops::Index<&[usize]> for Tensor<F> {
    type Output = F;
    fn index(&self, idx: &[usize]) -> &F {
        assert_eq!(idx.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (&i, &d) in idx.iter().zip(&self.shape) {
            assert!(i < d, "index {idx:?} out of bounds for {:?}", self.shape);
            flat = flat * d + i;
        }
        &self.data[flat]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_data_length() {
        assert!(Tensor::<f32>::new([2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new([2, 0], vec![]).is_err());
        let t = Tensor::<f32>::new([2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn gemm_matches_loops_with_transposed_views() {
        let a: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..15).map(|i| (i as f64).sin()).collect();
        // a viewed as 4×3, b as 5×3 transposed to 3×5
        let mut out = vec![0.0; 20];
        gemm(MatView::new(&a, 4, 3), MatView::new(&b, 5, 3).t(), 0.0, &mut out, 5);
        for i in 0..4 {
            for j in 0..5 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[j * 3 + p]).sum();
                assert!((out[i * 5 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fast_exp_tracks_libm() {
        let mut xs: Vec<f32> = (-8000..=800).map(|i| i as f32 * 0.01).collect();
        let want: Vec<f32> = xs.iter().map(|v| v.exp()).collect();
        f32::exp_slice(&mut xs);
        for (got, want) in xs.iter().zip(&want) {
            assert!(((got - want) / want).abs() < 5e-7, "{got} vs {want}");
        }
    }

    #[test]
    fn index_is_row_major() {
        let t = Tensor::<f32>::from_fn([2, 3, 4], |i| i as f32);
        assert_eq!(t[&[1, 2, 3][..]], 23.0);
    }
}
