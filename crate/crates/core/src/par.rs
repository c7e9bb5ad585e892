//! Data-parallel helpers. With the `parallel` feature the maps run on the
//! rayon pool; without it every call degrades to a sequential iterator.
//! Outputs are always collected in input order so downstream reductions
//! see the same sequence regardless of scheduling.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Runtime choice between the sequential and the rayon-backed path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// True when work will actually be spread over threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

pub fn map<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if exec.is_parallel() {
            let mut out = Vec::with_capacity(items.len());
            items
                .par_iter()
                .enumerate()
                .map(|(i, t)| f(i, t))
                .collect_into_vec(&mut out);
            return out;
        }
    }
    let _ = exec;
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

pub fn map_mut<T, R, F>(exec: Execution, items: &mut [T], f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(usize, &mut T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if exec.is_parallel() {
            let mut out = Vec::with_capacity(items.len());
            items
                .par_iter_mut()
                .enumerate()
                .map(|(i, t)| f(i, t))
                .collect_into_vec(&mut out);
            return out;
        }
    }
    let _ = exec;
    items.iter_mut().enumerate().map(|(i, t)| f(i, t)).collect()
}

/// Fallible map; the first error in index order is returned.
pub fn try_map<T, R, E, F>(exec: Execution, items: &[T], f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(usize, &T) -> Result<R, E> + Sync + Send,
{
    map(exec, items, f).into_iter().collect()
}

pub fn try_map_mut<T, R, E, F>(exec: Execution, items: &mut [T], f: F) -> Result<Vec<R>, E>
where
    T: Send,
    R: Send,
    E: Send,
    F: Fn(usize, &mut T) -> Result<R, E> + Sync + Send,
{
    map_mut(exec, items, f).into_iter().collect()
}
