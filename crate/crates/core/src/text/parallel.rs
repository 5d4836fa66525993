//! Chunked worker pool whose output keeps input order.

use std::collections::BTreeMap;
use std::ops::Range;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use crate::error::{Error, Result};

pub const DEFAULT_CHUNK_LINES: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChunkPlan {
    pub chunk_size: usize,
    pub workers: usize,
}

impl Default for ChunkPlan {
    fn default() -> Self {
        Self {
            chunk_size: DEFAULT_CHUNK_LINES,
            workers: 1,
        }
    }
}

impl ChunkPlan {
    pub fn new(chunk_size: usize, workers: usize) -> Result<Self> {
        if chunk_size == 0 || workers == 0 {
            return Err(Error::Config("chunk size and worker count must be positive".into()));
        }
        Ok(Self { chunk_size, workers })
    }

    /// Consecutive ranges covering `0..n`.
    pub fn chunks(&self, n: usize) -> Vec<Range<usize>> {
        (0..n)
            .step_by(self.chunk_size.max(1))
            .map(|s| s..(s + self.chunk_size).min(n))
            .collect()
    }
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "worker panicked".into())
}

/// Runs `stage` over each chunk of `items` on `plan.workers` threads and hands
/// chunk outputs to `sink` strictly in chunk order as soon as they are ready.
/// The first failing chunk (by index) aborts the run.
pub fn run_parallel_with<I, O, F, S>(items: &[I], plan: &ChunkPlan, stage: F, mut sink: S) -> Result<()>
where
    I: Sync,
    O: Send,
    F: Fn(&[I]) -> Result<Vec<O>> + Sync,
    S: FnMut(Vec<O>) -> Result<()>,
{
    let chunks = plan.chunks(items.len());
    let run_chunk = |idx: usize| -> Result<Vec<O>> {
        let out = catch_unwind(AssertUnwindSafe(|| stage(&items[chunks[idx].clone()])))
            .unwrap_or_else(|p| Err(Error::Integrity(panic_message(p))));
        out.map_err(|e| Error::Worker {
            chunk: idx,
            message: e.to_string(),
        })
    };
    if plan.workers <= 1 || chunks.len() <= 1 {
        for idx in 0..chunks.len() {
            sink(run_chunk(idx)?)?;
        }
        return Ok(());
    }

    let next = AtomicUsize::new(0);
    let failed = std::sync::atomic::AtomicBool::new(false);
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<(usize, Result<Vec<O>>)>();
        for _ in 0..plan.workers.min(chunks.len()) {
            let tx = tx.clone();
            let (next, failed, run_chunk, n_chunks) = (&next, &failed, &run_chunk, chunks.len());
            scope.spawn(move || loop {
                if failed.load(Ordering::Relaxed) {
                    break;
                }
                let idx = next.fetch_add(1, Ordering::Relaxed);
                if idx >= n_chunks {
                    break;
                }
                let r = run_chunk(idx);
                if r.is_err() {
                    failed.store(true, Ordering::Relaxed);
                }
                if tx.send((idx, r)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut pending = BTreeMap::new();
        let mut expected = 0;
        let mut first_err: Option<(usize, Error)> = None;
        for (idx, r) in rx {
            match r {
                Ok(out) => {
                    pending.insert(idx, out);
                }
                Err(e) => {
                    if first_err.as_ref().is_none_or(|(i, _)| idx < *i) {
                        first_err = Some((idx, e));
                    }
                }
            }
            while first_err.as_ref().is_none_or(|(i, _)| expected < *i) {
                let Some(out) = pending.remove(&expected) else { break };
                if let Err(e) = sink(out) {
                    failed.store(true, Ordering::Relaxed);
                    first_err = Some((expected, e));
                    break;
                }
                expected += 1;
            }
        }
        match first_err {
            Some((_, e)) => Err(e),
            None => Ok(()),
        }
    })
}

/// Collecting form of [`run_parallel_with`].
pub fn run_parallel<I, O, F>(items: &[I], plan: &ChunkPlan, stage: F) -> Result<Vec<O>>
where
    I: Sync,
    O: Send,
    F: Fn(&[I]) -> Result<Vec<O>> + Sync,
{
    let mut out = Vec::with_capacity(items.len());
    run_parallel_with(items, plan, stage, |chunk| {
        out.extend(chunk);
        Ok(())
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn upper(chunk: &[String]) -> Result<Vec<String>> {
        Ok(chunk.iter().map(|s| s.to_uppercase()).collect())
    }

    #[test]
    fn chunk_boundaries() {
        let p = ChunkPlan::new(3, 2).unwrap();
        assert_eq!(p.chunks(7), vec![0..3, 3..6, 6..7]);
        assert!(p.chunks(0).is_empty());
        assert_eq!(ChunkPlan::new(100, 1).unwrap().chunks(5), vec![0..5]);
        assert!(ChunkPlan::new(0, 1).is_err());
    }

    #[test]
    fn ordered_under_uneven_work() {
        let lines: Vec<String> = (0..500).map(|i| format!("line {i}")).collect();
        let plan = ChunkPlan::new(7, 6).unwrap();
        let out = run_parallel(&lines, &plan, |chunk: &[String]| {
            let n: usize = chunk[0][5..].parse().unwrap();
            std::thread::sleep(std::time::Duration::from_micros(((n * 7919) % 13) as u64 * 100));
            upper(chunk)
        })
        .unwrap();
        assert_eq!(out, upper(&lines).unwrap());
    }

    #[test]
    fn failure_reports_chunk() {
        let lines: Vec<u32> = (0..100).collect();
        let plan = ChunkPlan::new(10, 4).unwrap();
        let err = run_parallel(&lines, &plan, |c: &[u32]| {
            if c.contains(&42) {
                Err(Error::Integrity("boom".into()))
            } else {
                Ok(c.to_vec())
            }
        })
        .unwrap_err();
        assert!(matches!(err, Error::Worker { chunk: 4, .. }), "{err}");
        let err = run_parallel(&lines, &ChunkPlan::new(10, 1).unwrap(), |c: &[u32]| -> Result<Vec<u32>> {
            assert!(!c.contains(&73), "bad line");
            Ok(c.to_vec())
        })
        .unwrap_err();
        assert!(matches!(err, Error::Worker { chunk: 7, ref message } if message.contains("bad line")));
    }
}
