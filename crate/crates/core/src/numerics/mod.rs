//! Dense arrays, differentiable primitives and reverse-mode gradients.

mod array;
mod ops;
mod params;
mod tape;

pub use array::{precision, set_precision, with_precision, DenseArray, Precision, MAX_RANK};
pub use ops::{avgpool_axis, gelu, layernorm, log_softmax_lastaxis, matmul, permute, softmax_lastaxis, LAYERNORM_EPS};
pub use params::{
    grad, gradcheck, value_and_grad, Bound, CoordCheck, GradCheckOptions, GradCheckReport, ParamStore,
};
pub use tape::{Gradients, Mode, Tape, Var};

pub(crate) use ops::{gemm, matmul_general};

/// Keeps large tape buffers on the heap instead of fresh zeroed pages.
///
/// glibc returns blocks above its mmap threshold to the kernel on free,
/// so every step would page-fault its activations back in. Idempotent.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        static ONCE: std::sync::Once = std::sync::Once::new();
        ONCE.call_once(|| unsafe {
            // SAFETY: mallopt only adjusts allocator tunables.
            libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        });
    }
}
