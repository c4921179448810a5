//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) these dispatch to rayon when the
//! caller asks for [`Exec::Parallel`]. Without it every call runs on the
//! current thread and `Exec::Parallel` degrades to sequential execution.

/// How a batch of independent work items is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    /// Use the global pool.
    #[default]
    Parallel,
    /// Use a dedicated pool with this many threads.
    Threads(usize),
}

impl Exec {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && !matches!(self, Exec::Sequential | Exec::Threads(0 | 1))
    }
}

/// Map `f` over `items`, preserving input order in the output.
pub fn map_ordered<T, R, F>(items: Vec<T>, exec: Exec, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        match exec {
            Exec::Parallel => return items.into_par_iter().map(f).collect(),
            Exec::Threads(n) if n > 1 => {
                // fall through to sequential if the pool can't be built
                if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(n).build() {
                    return pool.install(|| items.into_par_iter().map(f).collect());
                }
            }
            _ => {}
        }
    }
    let _ = exec;
    items.into_iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved_in_every_mode() {
        let input: Vec<u32> = (0..500).collect();
        let expected: Vec<u32> = input.iter().map(|x| x * 3).collect();
        for exec in [Exec::Sequential, Exec::Parallel, Exec::Threads(4), Exec::Threads(1)] {
            assert_eq!(map_ordered(input.clone(), exec, |x| x * 3), expected);
        }
    }
}
