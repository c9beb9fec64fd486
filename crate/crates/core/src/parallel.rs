//! Worker-count control for per-tensor parallel work.

use crate::error::{Error, Result};

/// Environment variable consulted for the default worker count.
pub const THREADS_ENV: &str = "VECFORGE_THREADS";

/// Runs `f` on a dedicated pool of `threads` workers (all cores when `None`).
/// Results never depend on the worker count.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::InvalidArgument(
                "thread count must be at least 1".into(),
            ));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Reads [`THREADS_ENV`], ignoring unparsable values.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()?
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
}
