//! Optional data parallelism for the heavy kernels.
//!
//! Parallel kernels split work by output slice only, so every output value is
//! produced by the same sequential loop either way; results are bitwise
//! identical to single-threaded mode. The default is one thread.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

use rayon::ThreadPool;

static THREADS: AtomicUsize = AtomicUsize::new(1);
static POOL: OnceLock<Option<ThreadPool>> = OnceLock::new();

/// Environment variable that caps kernel parallelism (0 or 1 = single-threaded).
pub const THREADS_ENV: &str = "SEGTRANSVAE_THREADS";

/// Sets the kernel thread cap. Only the first value above one sizes the pool.
pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::SeqCst);
}

/// Reads [`THREADS_ENV`] and applies it; unset or unparsable means one thread.
pub fn init_from_env() -> usize {
    let n = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()).unwrap_or(1);
    set_threads(n);
    threads()
}

pub fn threads() -> usize {
    THREADS.load(Ordering::SeqCst)
}

/// Runs `f` inside the kernel pool when parallelism is enabled, otherwise
/// returns `None` so the caller takes its sequential path.
pub(crate) fn with_pool<R: Send>(f: impl FnOnce() -> R + Send) -> Option<R> {
    let n = threads();
    if n <= 1 {
        return None;
    }
    let pool = POOL.get_or_init(|| rayon::ThreadPoolBuilder::new().num_threads(n).build().ok());
    pool.as_ref().map(|p| p.install(f))
}
