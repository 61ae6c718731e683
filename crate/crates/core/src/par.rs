//! Data-parallel helpers.
//!
//! With the `parallel` feature the helpers fan out over the rayon pool;
//! without it (or after `set_mode(Mode::Sequential)`) they run in order on
//! the calling thread. Results are always returned in index order, so the
//! two paths produce identical output.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Sequential,
    Parallel,
}

static MODE: AtomicU8 = AtomicU8::new(1);

pub fn set_mode(mode: Mode) {
    MODE.store(matches!(mode, Mode::Parallel) as u8, Ordering::SeqCst);
}

/// The effective mode: `Parallel` only when the feature is compiled in.
pub fn mode() -> Mode {
    if cfg!(feature = "parallel") && MODE.load(Ordering::SeqCst) == 1 {
        Mode::Parallel
    } else {
        Mode::Sequential
    }
}

/// `(0..n).map(f).collect()`, possibly in parallel.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if mode() == Mode::Parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// `items.iter().map(f).collect()`, possibly in parallel.
pub fn map_slice<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if mode() == Mode::Parallel {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}

/// Fallible variant of [`map_range`]; the first error in index order wins.
pub fn try_map_range<R, E, F>(n: usize, f: F) -> Result<Vec<R>, E>
where
    R: Send,
    E: Send,
    F: Fn(usize) -> Result<R, E> + Send + Sync,
{
    map_range(n, f).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_agree() {
        let seq = {
            set_mode(Mode::Sequential);
            map_range(1000, |i| (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        };
        set_mode(Mode::Parallel);
        let par = map_range(1000, |i| (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        assert_eq!(seq, par);
    }

    #[test]
    fn first_error_in_index_order() {
        let r: Result<Vec<usize>, usize> =
            try_map_range(100, |i| if i % 7 == 3 { Err(i) } else { Ok(i) });
        assert_eq!(r, Err(3));
    }
}
