use std::fmt;
use std::str::FromStr;

use super::END_ID;
use crate::error::{Error, Result};
use crate::numerics::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchMode {
    /// Parallel contiguous streams; hidden state carries across batches.
    Successive,
    /// Shuffled fixed-length windows; hidden state starts at zero.
    Random,
}

impl fmt::Display for BatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BatchMode::Successive => "successive",
            BatchMode::Random => "random",
        })
    }
}

impl FromStr for BatchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "successive" => Ok(BatchMode::Successive),
            "random" => Ok(BatchMode::Random),
            other => Err(Error::invalid(format!("unknown batching mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub mode: BatchMode,
    pub batch_size: usize,
    pub unroll: usize,
}

impl BatchPlan {
    fn check(&self) -> Result<()> {
        if self.batch_size == 0 || self.unroll == 0 {
            return Err(Error::invalid("batch size and unroll length must be at least 1"));
        }
        Ok(())
    }
}

/// One minibatch in time-major layout (`t·batch + b`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub steps: usize,
    pub batch: usize,
    /// Start from zero state instead of the previous batch's final state.
    pub reset_state: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuccessivePlan {
    pub batches: Vec<Batch>,
    /// Tokens after the last full `batch·unroll` block.
    pub dropped: usize,
    pub stream_len: usize,
}

fn target_at(ids: &[usize], i: usize) -> usize {
    ids.get(i + 1).copied().unwrap_or(END_ID)
}

/// Splits `ids` into `batch_size` contiguous streams of equal length (a
/// multiple of `unroll`). Batch `k` holds columns `[k·unroll, (k+1)·unroll)`
/// of every stream: step `j` of stream `b` is `ids[b·L + k·unroll + j]`.
pub fn plan_successive(ids: &[usize], plan: &BatchPlan) -> Result<SuccessivePlan> {
    plan.check()?;
    let (bsz, u) = (plan.batch_size, plan.unroll);
    let stream_len = ids.len() / (bsz * u) * u;
    if stream_len == 0 {
        return Err(Error::invalid(format!(
            "corpus of {} tokens is shorter than one batch of {bsz}x{u}",
            ids.len()
        )));
    }
    let batches = (0..stream_len / u)
        .map(|k| {
            let mut inputs = Vec::with_capacity(bsz * u);
            let mut targets = Vec::with_capacity(bsz * u);
            for j in 0..u {
                for b in 0..bsz {
                    let i = b * stream_len + k * u + j;
                    inputs.push(ids[i]);
                    targets.push(target_at(ids, i));
                }
            }
            Batch {
                inputs,
                targets,
                steps: u,
                batch: bsz,
                reset_state: k == 0,
            }
        })
        .collect();
    Ok(SuccessivePlan {
        batches,
        dropped: ids.len() - bsz * stream_len,
        stream_len,
    })
}

/// Non-overlapping windows of `unroll` tokens in a fresh random order; the
/// final batch may be smaller. Tokens after the last full window are unused.
pub fn plan_random(ids: &[usize], plan: &BatchPlan, rng: &mut SeededRng) -> Result<Vec<Batch>> {
    plan.check()?;
    let u = plan.unroll;
    let windows = ids.len() / u;
    if windows == 0 {
        return Err(Error::invalid(format!("corpus of {} tokens is shorter than one window of {u}", ids.len())));
    }
    let mut order: Vec<usize> = (0..windows).collect();
    rng.shuffle(&mut order);
    Ok(order
        .chunks(plan.batch_size)
        .map(|chunk| {
            let bsz = chunk.len();
            let mut inputs = Vec::with_capacity(bsz * u);
            let mut targets = Vec::with_capacity(bsz * u);
            for j in 0..u {
                for &w in chunk {
                    let i = w * u + j;
                    inputs.push(ids[i]);
                    targets.push(target_at(ids, i));
                }
            }
            Batch {
                inputs,
                targets,
                steps: u,
                batch: bsz,
                reset_state: true,
            }
        })
        .collect())
}
