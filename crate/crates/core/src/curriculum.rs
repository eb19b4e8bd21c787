//! Per-epoch example allocations across the tasks of an episode, and their
//! division into batches of matched composition.
//!
//! Task positions are 0-based in code (`counts[0]` is the oldest task) and
//! 1-based in CSV output.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum CurriculumKind {
    Balanced,
    Ratio { kappa: f64 },
    Power { alpha: f64 },
}

impl CurriculumKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            CurriculumKind::Balanced => Ok(()),
            CurriculumKind::Ratio { kappa } if kappa.is_finite() && kappa >= 1.0 => Ok(()),
            CurriculumKind::Ratio { kappa } => Err(Error::Config(format!("kappa must be >= 1, got {kappa}"))),
            CurriculumKind::Power { alpha } if alpha.is_finite() && alpha > 0.0 => Ok(()),
            CurriculumKind::Power { alpha } => Err(Error::Config(format!("alpha must be > 0, got {alpha}"))),
        }
    }

    /// Real-valued shares before rounding; they sum to `epoch_size`.
    pub fn shares(&self, episode: usize, epoch_size: u64) -> Result<Vec<f64>> {
        self.validate()?;
        if episode == 0 {
            return Err(Error::Config("episodes are numbered from 1".into()));
        }
        let total = epoch_size as f64;
        if episode == 1 {
            return Ok(vec![total]);
        }
        let k = episode;
        Ok(match *self {
            CurriculumKind::Balanced => half_and_rest(k, total, |_| 1.0),
            CurriculumKind::Ratio { kappa } => half_and_rest(k, total, |t| kappa.powi(t as i32)),
            CurriculumKind::Power { alpha } => {
                let rho: Vec<f64> = (0..k).map(|t| ((k - t) as f64).powf(-alpha)).collect();
                let sum: f64 = rho.iter().sum();
                rho.iter().map(|r| total * r / sum).collect()
            }
        })
    }

    pub fn allocate(&self, episode: usize, epoch_size: u64) -> Result<EpisodeAllocation> {
        if episode as u64 > epoch_size {
            return Err(Error::Infeasible(format!(
                "epoch of {epoch_size} examples cannot cover {episode} tasks"
            )));
        }
        let counts = largest_remainder(&self.shares(episode, epoch_size)?, epoch_size);
        if let Some(t) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Infeasible(format!(
                "task {} of episode {episode} rounds to zero examples",
                t + 1
            )));
        }
        Ok(EpisodeAllocation {
            episode,
            counts,
            epoch_size,
        })
    }
}

// newest task takes half; older task t gets weight(t) of the other half
fn half_and_rest(k: usize, total: f64, weight: impl Fn(usize) -> f64) -> Vec<f64> {
    let half = total / 2.0;
    let w: Vec<f64> = (0..k - 1).map(weight).collect();
    let sum: f64 = w.iter().sum();
    let mut out: Vec<f64> = w.iter().map(|x| half * x / sum).collect();
    out.push(half);
    out
}

/// Hamilton rounding: floors, then the leftover units go to the largest
/// fractional parts, ties to the lower index.
pub fn largest_remainder(shares: &[f64], total: u64) -> Vec<u64> {
    let mut counts: Vec<u64> = shares.iter().map(|s| s.max(0.0).floor() as u64).collect();
    let assigned: u64 = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (shares[a] - shares[a].floor(), shares[b] - shares[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let left = total.saturating_sub(assigned) as usize;
    for &i in order.iter().cycle().take(left) {
        counts[i] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeAllocation {
    pub episode: usize,
    pub counts: Vec<u64>,
    pub epoch_size: u64,
}

pub fn balanced_allocation(episode: usize, epoch_size: u64) -> Result<EpisodeAllocation> {
    CurriculumKind::Balanced.allocate(episode, epoch_size)
}

pub fn ratio_allocation(episode: usize, kappa: f64, epoch_size: u64) -> Result<EpisodeAllocation> {
    CurriculumKind::Ratio { kappa }.allocate(episode, epoch_size)
}

pub fn power_allocation(episode: usize, alpha: f64, epoch_size: u64) -> Result<EpisodeAllocation> {
    CurriculumKind::Power { alpha }.allocate(episode, epoch_size)
}

/// Per-batch task counts; `counts[b][t]` examples of task `t` in batch `b`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub episode: usize,
    pub n_batches: usize,
    pub batch_size: u64,
    pub counts: Vec<Vec<u64>>,
}

/// Spreads every task evenly over the batches. A task with `q * n + r`
/// examples gets `q` per batch plus one extra in `r` consecutive batches;
/// extras continue cyclically from where the previous task's stopped, which
/// keeps every batch at exactly `batch_size`.
pub fn make_batch_plan(alloc: &EpisodeAllocation, n_batches: usize, batch_size: u64) -> Result<BatchPlan> {
    if n_batches == 0 || n_batches as u64 * batch_size != alloc.epoch_size {
        return Err(Error::Config(format!(
            "{n_batches} batches of {batch_size} do not make an epoch of {}",
            alloc.epoch_size
        )));
    }
    if alloc.counts.iter().sum::<u64>() != alloc.epoch_size {
        return Err(Error::Config("allocation does not sum to the epoch size".into()));
    }
    let n = n_batches as u64;
    let mut counts = vec![vec![0u64; alloc.counts.len()]; n_batches];
    let mut cursor = 0usize;
    for (t, &c) in alloc.counts.iter().enumerate() {
        let (q, r) = (c / n, (c % n) as usize);
        for row in counts.iter_mut() {
            row[t] = q;
        }
        for j in 0..r {
            counts[(cursor + j) % n_batches][t] += 1;
        }
        cursor = (cursor + r) % n_batches;
    }
    Ok(BatchPlan {
        episode: alloc.episode,
        n_batches,
        batch_size,
        counts,
    })
}

impl BatchPlan {
    pub fn totals(&self) -> Vec<u64> {
        let k = self.counts.first().map_or(0, Vec::len);
        (0..k).map(|t| self.counts.iter().map(|row| row[t]).sum()).collect()
    }
}

#[derive(Serialize)]
struct AllocRow {
    episode: usize,
    task: usize,
    count: u64,
}

#[derive(Serialize)]
struct PlanRow {
    episode: usize,
    batch: usize,
    task: usize,
    count: u64,
}

pub fn write_allocations_csv<W: Write>(out: W, allocations: &[EpisodeAllocation]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for a in allocations {
        for (t, &count) in a.counts.iter().enumerate() {
            w.serialize(AllocRow {
                episode: a.episode,
                task: t + 1,
                count,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_batch_plans_csv<W: Write>(out: W, plans: &[BatchPlan]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in plans {
        for (b, row) in p.counts.iter().enumerate() {
            for (t, &count) in row.iter().enumerate() {
                w.serialize(PlanRow {
                    episode: p.episode,
                    batch: b + 1,
                    task: t + 1,
                    count,
                })?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Allocations for episodes `1..=n_episodes` written to `path`.
pub fn export_allocations(path: &Path, kind: CurriculumKind, n_episodes: usize, epoch_size: u64) -> Result<()> {
    let allocs = (1..=n_episodes)
        .map(|k| kind.allocate(k, epoch_size))
        .collect::<Result<Vec<_>>>()?;
    write_allocations_csv(std::fs::File::create(path)?, &allocs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_examples() {
        assert_eq!(balanced_allocation(1, 45000).unwrap().counts, [45000]);
        assert_eq!(balanced_allocation(3, 45000).unwrap().counts, [11250, 11250, 22500]);
        assert_eq!(balanced_allocation(6, 45000).unwrap().counts, [4500; 5].iter().copied().chain([22500]).collect::<Vec<_>>());
    }

    #[test]
    fn too_many_tasks_for_epoch() {
        assert!(matches!(balanced_allocation(5, 4), Err(Error::Infeasible(_))));
        assert!(matches!(balanced_allocation(0, 10), Err(Error::Config(_))));
    }

    #[test]
    fn bad_parameters() {
        assert!(ratio_allocation(3, 0.9, 100).is_err());
        assert!(power_allocation(3, 0.0, 100).is_err());
        assert!(power_allocation(3, f64::NAN, 100).is_err());
    }

    #[test]
    fn remainder_ties_go_to_lower_index() {
        assert_eq!(largest_remainder(&[1.5, 1.5, 1.0], 4), [2, 1, 1]);
        assert_eq!(largest_remainder(&[0.4, 0.3, 0.3], 1), [1, 0, 0]);
        assert_eq!(largest_remainder(&[1.2, 1.7, 1.1], 4), [1, 2, 1]);
    }

    #[test]
    fn single_batch_is_the_allocation() {
        let a = ratio_allocation(6, 1.25, 45000).unwrap();
        let p = make_batch_plan(&a, 1, 45000).unwrap();
        assert_eq!(p.counts, vec![a.counts.clone()]);
    }

    #[test]
    fn indivisible_epoch_rejected() {
        let a = balanced_allocation(3, 45000).unwrap();
        assert!(make_batch_plan(&a, 7, 6000).is_err());
    }

    #[test]
    fn csv_layout() {
        let a = balanced_allocation(2, 10).unwrap();
        let mut buf = Vec::new();
        write_allocations_csv(&mut buf, &[a]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "episode,task,count\n2,1,5\n2,2,5\n");
    }
}
