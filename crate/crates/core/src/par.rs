//! Order-preserving data-parallel map. With the `rayon` feature the
//! [`Exec::Parallel`] and [`Exec::Auto`] modes fan out over the rayon pool;
//! without it every mode runs sequentially. Results are always returned in
//! input order, so reductions over them are schedule independent.

/// Execution strategy for batch work.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
    /// Parallel when compiled with rayon.
    #[default]
    Auto,
}

impl Exec {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "rayon") && self != Exec::Sequential
    }
}

pub fn map<T, R, F>(exec: Exec, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "rayon")]
    if exec.is_parallel() && items.len() > 1 {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}
