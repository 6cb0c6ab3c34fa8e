//! Order-preserving map helpers that run on rayon when the `parallel`
//! feature is enabled and fall back to plain iteration otherwise.
//!
//! Every call site maps independent work items (states, utterances) and
//! collects in input order, so the two builds produce bit-identical output.

#[cfg(feature = "parallel")]
pub(crate) fn try_map_slice<T, U, F>(items: &[T], f: F) -> crate::Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> crate::Result<U> + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn try_map_slice<T, U, F>(items: &[T], f: F) -> crate::Result<Vec<U>>
where
    F: Fn(&T) -> crate::Result<U>,
{
    items.iter().map(f).collect()
}
