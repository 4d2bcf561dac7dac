//! Layer kernels with hand-written backward passes.
//!
//! Layers cache what they need for the backward pass in the last recorded
//! forward call, so a network instance must be driven by a single loop.

mod conv;
mod norm;
mod ops;

pub use conv::{Conv2d, ConvTranspose2x2};
pub use norm::{bn_forward, BatchNorm2d, BnMode, BnState, DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM};
pub use ops::{MaxPool2x2, Relu};

/// Role of a learnable tensor, used to select parameter subsets for update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    BnGamma,
    BnBeta,
}

impl ParamKind {
    pub fn is_bn_affine(self) -> bool {
        matches!(self, ParamKind::BnGamma | ParamKind::BnBeta)
    }
}

/// Mutable view of one named parameter and its accumulated gradient.
pub struct ParamMut<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub value: &'a mut [f64],
    pub grad: &'a mut [f64],
}

/// Which parameter gradients a backward pass accumulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScope {
    /// Every learnable tensor.
    All,
    /// Only BN scale and bias; convolution weight gradients are skipped.
    BnAffine,
}

impl GradScope {
    #[inline]
    pub(crate) fn conv(self) -> bool {
        matches!(self, GradScope::All)
    }
}

/// Row-major GEMM `c = a·b + beta·c` with optional operand transposes.
///
/// `a` is `m×k` (or stored `k×m` when `ta`), `b` is `k×n` (or stored `n×k`
/// when `tb`), `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover the strided extents checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
