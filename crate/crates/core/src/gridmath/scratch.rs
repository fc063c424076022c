//! Reusable f32 buffers for convolution scratch space.
//!
//! Convolutions lease large im2col buffers every call; pooling them keeps
//! the training loop free of per-step heap churn. Single-threaded by
//! design, so a thread-local stack is all that is needed.

use std::cell::RefCell;

thread_local! {
    static POOL: RefCell<Vec<Vec<f32>>> = const { RefCell::new(Vec::new()) };
}

/// Lease a zero-filled buffer of `len` floats.
pub fn take(len: usize) -> Vec<f32> {
    let mut buf = POOL.with(|p| p.borrow_mut().pop()).unwrap_or_default();
    buf.clear();
    buf.resize(len, 0.0);
    buf
}

/// Return a buffer to the pool for reuse.
pub fn give(buf: Vec<f32>) {
    POOL.with(|p| {
        let mut pool = p.borrow_mut();
        if pool.len() < 8 {
            pool.push(buf);
        }
    });
}
