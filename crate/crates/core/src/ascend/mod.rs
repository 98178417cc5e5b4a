//! Layered remote invocation: a node calls every worker in the tier below
//! (`distribute`), waits for all of them (`synchronize`), or both (`step`),
//! optionally splitting sequence arguments across the workers. The training
//! stack built on it lives in [`stack`].

mod envelope;
mod node;
pub mod stack;
mod transport;

use std::collections::BTreeSet;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use envelope::{Envelope, Verb, HEADER_LEN, MAX_PAYLOAD};
pub use node::{serve, AsyncHandle, LayerNode, NodeOptions, Role, SentHeader};
pub use transport::{bind_address, inproc_pair, FrameRx, FrameTx, Link};

#[derive(Debug, Clone, thiserror::Error)]
pub enum AscendError {
    #[error("malformed frame: {0}")]
    Frame(String),
    #[error("peer disconnected")]
    Disconnected,
    #[error("transport: {0}")]
    Transport(String),
    #[error("timed out after {0:?}")]
    Timeout(Duration),
    #[error("worker error: {0}")]
    Remote(String),
    #[error("layer violation: {0}")]
    Layer(String),
    #[error("handle: {0}")]
    Handle(String),
    #[error("cannot shard argument {0}: not a sequence")]
    NotSequence(usize),
    #[error("codec: {0}")]
    Codec(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for AscendError {
    fn from(e: std::io::Error) -> Self {
        AscendError::Io(e.to_string())
    }
}

/// A call argument: a single value or a sequence that may be split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arg<T> {
    One(T),
    Seq(Vec<T>),
}

/// Argument positions to split across workers; the rest are replicated.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ShardSpec {
    pub positions: BTreeSet<usize>,
}

impl ShardSpec {
    pub fn at(positions: impl IntoIterator<Item = usize>) -> Self {
        Self { positions: positions.into_iter().collect() }
    }
}

/// Bounds of chunk `i` when `len` items go to `n` workers: contiguous, the
/// first `len % n` chunks one longer.
pub fn chunk_range(len: usize, n: usize, i: usize) -> std::ops::Range<usize> {
    let (q, r) = (len / n, len % n);
    let start = i * q + i.min(r);
    start..start + q + usize::from(i < r)
}

/// Splits `args` into one argument list per worker. Unsharded values are
/// cloned, so pass cheaply clonable handles (such as `Bytes`) to share them.
pub fn shard<T: Clone>(args: &[Arg<T>], spec: Option<&ShardSpec>, n_workers: usize) -> Result<Vec<Vec<Arg<T>>>, AscendError> {
    if n_workers == 0 {
        return Err(AscendError::Handle("shard over zero workers".into()));
    }
    let split = |pos: usize| spec.is_some_and(|s| s.positions.contains(&pos));
    if let Some(s) = spec {
        for &p in &s.positions {
            match args.get(p) {
                Some(Arg::Seq(_)) => {}
                _ => return Err(AscendError::NotSequence(p)),
            }
        }
    }
    Ok((0..n_workers)
        .map(|w| {
            args.iter()
                .enumerate()
                .map(|(p, a)| match a {
                    Arg::Seq(v) if split(p) => Arg::Seq(v[chunk_range(v.len(), n_workers, w)].to_vec()),
                    other => other.clone(),
                })
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let args = vec![Arg::One(0), Arg::Seq(vec![1, 2, 3, 4])];
        let s = shard(&args, Some(&ShardSpec::at([1])), 2).unwrap();
        assert_eq!(s[0], vec![Arg::One(0), Arg::Seq(vec![1, 2])]);
        assert_eq!(s[1], vec![Arg::One(0), Arg::Seq(vec![3, 4])]);

        let args = vec![Arg::One(0), Arg::Seq(vec![1, 2, 3])];
        let s = shard(&args, Some(&ShardSpec::at([1])), 2).unwrap();
        assert_eq!(s[0][1], Arg::Seq(vec![1, 2]));
        assert_eq!(s[1][1], Arg::Seq(vec![3]));

        let s = shard(&args, None, 3).unwrap();
        assert!(s.iter().all(|w| *w == args));
        assert!(matches!(shard(&args, Some(&ShardSpec::at([0])), 2), Err(AscendError::NotSequence(0))));
        assert!(matches!(shard(&args, Some(&ShardSpec::at([5])), 2), Err(AscendError::NotSequence(5))));
    }

    proptest! {
        #[test]
        fn chunks_reassemble(len in 0usize..200, n in 1usize..12) {
            let v: Vec<usize> = (0..len).collect();
            let s = shard(&[Arg::Seq(v.clone())], Some(&ShardSpec::at([0])), n).unwrap();
            let mut joined = Vec::new();
            let mut sizes = Vec::new();
            for w in s {
                match &w[0] {
                    Arg::Seq(c) => { sizes.push(c.len()); joined.extend(c.iter().copied()); }
                    Arg::One(_) => prop_assert!(false),
                }
            }
            prop_assert_eq!(joined, v);
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            prop_assert!(sizes.windows(2).all(|p| p[0] >= p[1]));
        }
    }
}
