//! Minimal dense-tensor core with a Wengert tape for reverse-mode
//! differentiation.
//!
//! Values are row-major `Vec<F>` buffers where `F` is `f32` for training or
//! `f64` for gradient checking. Models keep their parameters in a
//! [`ParamStore`]; every forward pass records onto a fresh [`Tape`], and
//! [`Tape::backward`] returns a [`Gradients`] map that is accumulated back
//! into the store before an optimizer step.

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod kernels;
pub mod optim;
mod params;
mod tape;
mod tensor;

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::sync::atomic::{AtomicBool, Ordering};

pub use checkpoint::{Checkpoint, DType, NamedTensor, TensorData};
pub use error::{Result, TensorError};
pub use kernels::{gemm, MatRef};
pub use optim::{clip_grad_norm, AdamW, LrSchedule, ScheduleKind};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

static DETERMINISTIC: AtomicBool = AtomicBool::new(false);

/// Force serial numeric kernels. Parallel kernels only split work over
/// independent output blocks, so results are bitwise identical either way;
/// this switch removes the thread pool from the picture entirely.
pub fn set_deterministic(on: bool) {
    DETERMINISTIC.store(on, Ordering::SeqCst);
}

pub fn is_deterministic() -> bool {
    DETERMINISTIC.load(Ordering::SeqCst)
}

/// Reads `BCG_DETERMINISTIC` once and applies it.
pub fn deterministic_from_env() -> bool {
    let on = std::env::var("BCG_DETERMINISTIC")
        .map(|v| v == "1" || v.eq_ignore_ascii_case("true"))
        .unwrap_or(false);
    if on {
        set_deterministic(true);
    }
    on
}

/// Scalar element type of a tensor.
pub trait Float:
    num_traits::Float
    + Default
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const DTYPE: DType;

    fn cast(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `exp` used by the hot kernels. The `f32` version is a branch-free
    /// polynomial that vectorizes; `f64` keeps the libm result so gradient
    /// checks see the exact function.
    fn exp_fast(self) -> Self;

    /// `c <- alpha * a @ b + beta * c` on strided row/column layouts.
    ///
    /// # Safety
    /// All pointers must be valid for every index reachable through the
    /// given dimensions and strides.
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
}

impl Float for f32 {
    const DTYPE: DType = DType::F32;

    fn cast(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn exp_fast(self) -> Self {
        kernels::expf(self)
    }

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
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Float for f64 {
    const DTYPE: DType = DType::F64;

    fn cast(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    #[inline]
    fn exp_fast(self) -> Self {
        self.exp()
    }

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
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}
