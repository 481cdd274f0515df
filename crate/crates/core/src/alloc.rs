//! Training allocates and frees many multi-megabyte buffers per step. With
//! glibc's defaults each of them is a fresh `mmap`, and page faults end up
//! dominating small-CNN step time. Raising the mmap and trim thresholds keeps
//! those buffers in the heap.

use std::sync::Once;

static TUNE: Once = Once::new();

/// Idempotent; a no-op off glibc.
pub fn retain_large_buffers() {
    TUNE.call_once(|| {
        #[cfg(all(target_os = "linux", target_env = "gnu"))]
        // SAFETY: mallopt only adjusts allocator tunables.
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
            libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
        }
    });
}
