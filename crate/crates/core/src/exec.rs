//! Order-preserving map over independent work items. With the `parallel`
//! feature the default path fans out over rayon; output order always matches
//! input order so downstream aggregation is bitwise deterministic.

#[cfg(feature = "parallel")]
pub fn map_ordered<T, O, F>(items: Vec<T>, f: F) -> Vec<O>
where
    T: Send,
    O: Send,
    F: Fn(T) -> O + Sync + Send,
{
    use rayon::prelude::*;
    items.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_ordered<T, O, F>(items: Vec<T>, f: F) -> Vec<O>
where
    F: Fn(T) -> O,
{
    items.into_iter().map(f).collect()
}

/// Always-sequential variant, kept for benchmarking against the parallel path.
pub fn map_ordered_seq<T, O, F>(items: Vec<T>, f: F) -> Vec<O>
where
    F: Fn(T) -> O,
{
    items.into_iter().map(f).collect()
}

/// Caps rayon's global pool from the ELITE_THREADS environment variable.
/// No-op without the `parallel` feature or when the pool is already built.
pub fn init_thread_cap() {
    #[cfg(feature = "parallel")]
    {
        if let Ok(v) = std::env::var("ELITE_THREADS") {
            if let Ok(n) = v.parse::<usize>() {
                if n >= 1 {
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                }
            }
        }
    }
}
