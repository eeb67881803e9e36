//! Data-parallel mapping helpers.
//!
//! Clients within a round and instances within a batch are independent, so
//! they can be mapped in parallel. Results are always collected in input
//! order and any floating-point reduction happens outside these helpers in a
//! fixed order, so the parallel and sequential paths produce bit-identical
//! output.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, in parallel when the `parallel` feature is enabled.
pub fn map_ref<T: Sync, R: Send>(items: &[T], f: impl Fn(usize, &T) -> R + Sync) -> Vec<R> {
    #[cfg(feature = "parallel")]
    {
        map_ref_par(items, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_ref_seq(items, f)
    }
}

pub fn map_ref_seq<T, R>(items: &[T], f: impl Fn(usize, &T) -> R) -> Vec<R> {
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

#[cfg(feature = "parallel")]
pub fn map_ref_par<T: Sync, R: Send>(items: &[T], f: impl Fn(usize, &T) -> R + Sync) -> Vec<R> {
    items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

/// Mutable variant used for per-client local training.
pub fn map_mut<T: Send, R: Send>(items: &mut [T], f: impl Fn(usize, &mut T) -> R + Sync) -> Vec<R> {
    #[cfg(feature = "parallel")]
    {
        map_mut_par(items, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_mut_seq(items, f)
    }
}

pub fn map_mut_seq<T, R>(items: &mut [T], f: impl Fn(usize, &mut T) -> R) -> Vec<R> {
    items.iter_mut().enumerate().map(|(i, t)| f(i, t)).collect()
}

#[cfg(feature = "parallel")]
pub fn map_mut_par<T: Send, R: Send>(
    items: &mut [T],
    f: impl Fn(usize, &mut T) -> R + Sync,
) -> Vec<R> {
    items.par_iter_mut().enumerate().map(|(i, t)| f(i, t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_ref_preserves_order() {
        let items: Vec<usize> = (0..100).collect();
        let out = map_ref(&items, |i, &x| i * 1000 + x);
        for (i, &v) in out.iter().enumerate() {
            assert_eq!(v, i * 1000 + i);
        }
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_and_sequential_agree() {
        let items: Vec<f64> = (0..64).map(|i| i as f64 * 0.37).collect();
        let f = |_: usize, x: &f64| x.sin() * x.cos();
        assert_eq!(map_ref_seq(&items, f), map_ref_par(&items, f));
    }
}
