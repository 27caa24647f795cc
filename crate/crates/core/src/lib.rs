//! Depth autoregression: coarse-to-fine monocular depth estimation.
//!
//! The model predicts a depth map as a short autoregressive sequence of
//! token maps at growing resolutions. At each step it simultaneously
//! sharpens *where* (resolution doubles) and *how precisely* (each pixel's
//! candidate depth range contracts through multiway tree-bin refinement).
//! A transformer with a patch-wise causal mask conditions every step on all
//! earlier steps and on encoded image features; refined bin centers are
//! injected back into the features through a convolutional GRU so granularity
//! information steers the next step.
//!
//! Crate layout:
//! - [`numerics`]: dense tensors, kernels, reverse-mode autodiff, FD checks
//! - [`mtbin`]: per-pixel multiway tree-bin refinement
//! - [`attention`]: patch-causal masked attention blocks
//! - [`injection`]: bin-center projection + ConvGRU fusion
//! - [`pipeline`]: end-to-end model, loss, optimizer, checkpoints
//! - [`evalio`]: metrics, depth-image IO, synthetic scenes

pub mod attention;
pub mod error;
pub mod evalio;
pub mod injection;
pub mod mtbin;
pub mod par;
pub mod pipeline;

pub mod numerics;

pub use error::{Error, Result};

/// Tune the process allocator for repeated large transient buffers.
///
/// Training allocates and frees multi-megabyte attention tensors every
/// iteration. With glibc defaults those blocks are returned to the kernel on
/// free (mmap/trim), so every iteration pays the page-fault cost of touching
/// them again. Raising the mmap and trim thresholds keeps the blocks cached
/// in the heap; measured on a single core this removes most of the system
/// time of a training step. No-op on non-Linux hosts and safe to call more
/// than once.
pub fn tune_allocator_for_large_buffers() {
    #[cfg(target_os = "linux")]
    // SAFETY: mallopt only adjusts glibc tuning parameters; it does not
    // touch memory and is safe at any point in the program.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TOP_PAD, 256 << 20);
    }
}
