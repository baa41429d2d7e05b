//! Collective-communication interface used by the parallel forward/backward
//! paths. Concrete transports live in [`crate::parallel::fabric`]; the tape
//! only needs this trait so that backward can issue its mirrored all-reduces.

use crate::tensor::scalar::Scalar;
use crate::Result;

/// Kinds of collective operations, as logged in the trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CollectiveKind {
    AllReduce,
    Broadcast,
    AllGather,
    Barrier,
}

impl CollectiveKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CollectiveKind::AllReduce => "all_reduce",
            CollectiveKind::Broadcast => "broadcast",
            CollectiveKind::AllGather => "all_gather",
            CollectiveKind::Barrier => "barrier",
        }
    }
}

/// One logged collective, from this worker's point of view.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub step: u64,
    pub tag: String,
    pub kind: CollectiveKind,
    pub bytes: usize,
}

/// A group of workers executing collectives in lockstep. All workers of a
/// group must call the same sequence of collectives with equal buffer sizes;
/// reduction order is fixed by rank so results are reproducible.
pub trait Collective<T: Scalar> {
    fn rank(&self) -> usize;
    fn world_size(&self) -> usize;

    /// Element-wise sum across the group; every worker ends with the total.
    fn all_reduce_sum(&mut self, buf: &mut [T], tag: &str) -> Result<()>;

    /// Copies `buf` from `root` to every worker.
    fn broadcast(&mut self, root: usize, buf: &mut [T], tag: &str) -> Result<()>;

    /// Concatenation of every worker's `buf` in rank order.
    fn all_gather(&mut self, buf: &[T], tag: &str) -> Result<Vec<T>>;

    fn barrier(&mut self, tag: &str) -> Result<()>;

    /// Advances the step counter recorded in trace entries.
    fn set_step(&mut self, step: u64);

    /// Collectives issued so far, in order.
    fn trace(&self) -> &[TraceEntry];
}

/// Single-worker group: every collective is a no-op that still lands in the
/// trace, so the P = 1 schedule can be compared against P > 1.
pub struct NullCollective {
    step: u64,
    trace: Vec<TraceEntry>,
}

impl NullCollective {
    pub fn new() -> Self {
        Self {
            step: 0,
            trace: Vec::new(),
        }
    }
}

impl Default for NullCollective {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Collective<T> for NullCollective {
    fn rank(&self) -> usize {
        0
    }
    fn world_size(&self) -> usize {
        1
    }
    fn all_reduce_sum(&mut self, buf: &mut [T], tag: &str) -> Result<()> {
        self.trace.push(TraceEntry {
            step: self.step,
            tag: tag.to_string(),
            kind: CollectiveKind::AllReduce,
            bytes: buf.len() * T::WIDTH,
        });
        Ok(())
    }
    fn broadcast(&mut self, _root: usize, buf: &mut [T], tag: &str) -> Result<()> {
        self.trace.push(TraceEntry {
            step: self.step,
            tag: tag.to_string(),
            kind: CollectiveKind::Broadcast,
            bytes: buf.len() * T::WIDTH,
        });
        Ok(())
    }
    fn all_gather(&mut self, buf: &[T], tag: &str) -> Result<Vec<T>> {
        self.trace.push(TraceEntry {
            step: self.step,
            tag: tag.to_string(),
            kind: CollectiveKind::AllGather,
            bytes: buf.len() * T::WIDTH,
        });
        Ok(buf.to_vec())
    }
    fn barrier(&mut self, tag: &str) -> Result<()> {
        self.trace.push(TraceEntry {
            step: self.step,
            tag: tag.to_string(),
            kind: CollectiveKind::Barrier,
            bytes: 0,
        });
        Ok(())
    }
    fn set_step(&mut self, step: u64) {
        self.step = step;
    }
    fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }
}
