use std::fmt::Debug;
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of a model: `f32` for training, `f64` for
/// gradient checks.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + AddAssign + Sum + Default + Debug + Send + Sync + 'static
{
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing matrices of
    /// the given sizes.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
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

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("representable")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// A strided view: element `(i, j)` lives at `i * rs + j * cs`.
#[derive(Clone, Copy)]
pub struct View<'a, F> {
    pub data: &'a [F],
    pub rs: usize,
    pub cs: usize,
}

impl<'a, F> View<'a, F> {
    /// Row-major `rows × cols`.
    pub fn rm(data: &'a [F], cols: usize) -> Self {
        Self { data, rs: cols, cs: 1 }
    }

    /// Transpose of a row-major matrix with `cols` columns.
    pub fn tr(data: &'a [F], cols: usize) -> Self {
        Self { data, rs: 1, cs: cols }
    }

    fn fits(&self, rows: usize, cols: usize) -> bool {
        rows == 0 || cols == 0 || (rows - 1) * self.rs + (cols - 1) * self.cs < self.data.len()
    }
}

/// `c = a·b` (or `c += a·b` when `accumulate`), `a: m×k`, `b: k×n`, and `c`
/// an `m×n` block with row stride `ldc`.
pub fn gemm<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: View<'_, F>,
    b: View<'_, F>,
    c: &mut [F],
    ldc: usize,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.fits(m, k) && b.fits(k, n), "gemm operand out of bounds");
    assert!((m - 1) * ldc + n <= c.len(), "gemm output out of bounds");
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                c[i * ldc..i * ldc + n].fill(F::zero());
            }
        }
        return;
    }
    let beta = if accumulate { F::one() } else { F::zero() };
    // SAFETY: bounds asserted above; `c` is uniquely borrowed.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            F::one(),
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        )
    }
}

/// `out[m×n] (+)= x[m×k] · w^T`, with `w` stored row-major `n×k`.
pub fn linear<F: Scalar>(m: usize, k: usize, n: usize, x: &[F], w: &[F], out: &mut [F], accumulate: bool) {
    gemm(m, k, n, View::rm(x, k), View::tr(w, k), out, n, accumulate);
}

/// `dx[m×k] (+)= dy[m×n] · w`, with `w` stored row-major `n×k`.
pub fn linear_back_input<F: Scalar>(m: usize, k: usize, n: usize, dy: &[F], w: &[F], dx: &mut [F], accumulate: bool) {
    gemm(m, n, k, View::rm(dy, n), View::rm(w, k), dx, k, accumulate);
}

/// `dw[n×k] += dy[m×n]^T · x[m×k]`.
pub fn linear_back_weight<F: Scalar>(m: usize, k: usize, n: usize, dy: &[F], x: &[F], dw: &mut [F]) {
    gemm(n, m, k, View::tr(dy, n), View::rm(x, k), dw, k, true);
}

pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
