pub mod commands;
pub mod config;
pub mod dataset;
pub mod formats;
pub mod pipeline;
pub mod selftest;

/// Keeps freed activation buffers in the heap instead of returning them to
/// the kernel, which otherwise re-faults every large tensor on each step.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
        libc::mallopt(libc::M_TOP_PAD, 256 << 20);
    }
}
