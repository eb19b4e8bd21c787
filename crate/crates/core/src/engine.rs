//! Continual-learning runs: episodes trained to a holdout criterion, forgetting
//! probes on cloned snapshots, first-order MAML micro-episodes, and
//! simultaneous training on a fixed task set.
//!
//! Trials are example presentations. Every random choice is drawn from a
//! stream derived from the run seed and the (episode, epoch) position, so a
//! run resumed from an episode-boundary checkpoint replays exactly.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{FailurePolicy, RunConfig};
use crate::curriculum::{make_batch_plan, EpisodeAllocation};
use crate::design::RunSpec;
use crate::nnet::{
    adam_step, evaluate_accuracy, loss_and_grad, loss_and_pooled_grad, read_weights, write_weights, Example,
    OptimState, WeightSnapshot,
};
use crate::rng::{derive_seed, derived_rng, tag};
use crate::scenegen::{assign_epoch_tasks, build_dataset, Dataset, FeatureCatalog, Split, TaskSpec};
use crate::{Error, Result};

/// One holdout evaluation of one task at the end of an epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub run_id: String,
    pub episode: usize,
    pub task: usize,
    pub epoch: usize,
    pub cumulative_task_trials: u64,
    pub holdout_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub run_id: String,
    pub probe_episode: usize,
    pub old_task: usize,
    pub batches_elapsed: usize,
    pub accuracy: f64,
}

/// Learning outcome of one task in one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub task: usize,
    /// 1-based position of the task in the run's order.
    pub position: usize,
    pub episode: usize,
    /// Episodes in which the task has been trained, this one included.
    pub times_trained: usize,
    /// Within-episode trials at the first evaluation at or above criterion.
    pub trials_to_criterion: Option<u64>,
    /// Accuracy at the first evaluation with at least `trial_budget`
    /// within-episode trials, or the episode's final accuracy when the
    /// episode ended sooner.
    pub accuracy_at_budget: f64,
    pub budget_reached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode: usize,
    pub epochs: usize,
    pub converged: bool,
    /// Epochs completed by the run when this episode ended.
    pub end_epoch: usize,
    pub final_accuracy: Vec<f64>,
    /// Lowest and highest per-task positive fraction seen in the episode.
    pub positive_fraction: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialLog {
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub order: Vec<usize>,
    pub status: RunStatus,
    pub episodes: Vec<EpisodeSummary>,
    pub cells: Vec<CellRecord>,
    pub records: Vec<EvalRecord>,
}

impl TrialLog {
    pub fn cell(&self, task: usize, episode: usize) -> Option<&CellRecord> {
        self.cells.iter().find(|c| c.task == task && c.episode == episode)
    }

    pub fn converged(&self) -> bool {
        self.status == RunStatus::Completed && self.episodes.iter().all(|e| e.converged)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub log: TrialLog,
    pub probes: Vec<ProbeRecord>,
}

/// Datasets whose pixels exceed this many bytes are rendered on demand.
pub const MATERIALIZE_LIMIT: usize = 1 << 31;

/// Dataset, catalog and per-task holdout subsets shared by every run of a config.
pub struct Workspace {
    pub config: RunConfig,
    pub catalog: FeatureCatalog,
    pub dataset: Dataset,
    eval_sets: Vec<Vec<usize>>,
}

impl Workspace {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut dataset = build_dataset(config.epoch_size as usize, config.holdout_size, config.seed, &config.generator)?;
        let bytes = (config.epoch_size as usize + config.holdout_size) * dataset.image_len() * 4;
        if bytes <= MATERIALIZE_LIMIT {
            dataset.materialize();
        }
        Self::with_dataset(config, dataset)
    }

    pub fn with_dataset(config: RunConfig, dataset: Dataset) -> Result<Self> {
        config.validate()?;
        if dataset.config != config.generator {
            return Err(Error::MixedConfig("dataset was generated with a different generator config".into()));
        }
        if dataset.len(Split::Train) as u64 != config.epoch_size {
            return Err(Error::Config(format!(
                "training split has {} images, epoch_size is {}",
                dataset.len(Split::Train),
                config.epoch_size
            )));
        }
        let catalog = config.generator.catalog()?;
        let eval_sets = catalog
            .all_tasks()
            .iter()
            .map(|t| dataset.holdout_eval_set(t, config.balanced_eval, config.seed))
            .collect();
        Ok(Self {
            config,
            catalog,
            dataset,
            eval_sets,
        })
    }

    pub fn eval_set(&self, task: usize) -> &[usize] {
        &self.eval_sets[task]
    }

    fn task(&self, id: usize) -> Result<TaskSpec> {
        self.catalog.task_by_id(id)
    }

    fn holdout_examples<'a>(&'a self, task: &TaskSpec, images: &'a [std::borrow::Cow<'a, [f32]>]) -> Vec<Example<'a, f32>> {
        self.eval_sets[task.global_id]
            .iter()
            .zip(images)
            .map(|(&i, im)| Example {
                image: im,
                task: task.global_id,
                label: self.dataset.label(Split::Holdout, i, task),
            })
            .collect()
    }

    /// Holdout accuracy of `weights` on `task`.
    pub fn evaluate(&self, weights: &WeightSnapshot<f32>, task: &TaskSpec) -> f64 {
        let images: Vec<_> = self.eval_sets[task.global_id]
            .iter()
            .map(|&i| self.dataset.image(Split::Holdout, i))
            .collect();
        evaluate_accuracy(weights, &self.holdout_examples(task, &images))
    }
}

/// Model parameters plus optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Learner {
    pub weights: WeightSnapshot<f32>,
    pub optim: OptimState<f32>,
    decay_mask: Vec<bool>,
}

impl Learner {
    pub fn new(config: &RunConfig, seed: u64) -> Result<Self> {
        let weights = WeightSnapshot::init(&config.model, seed)?;
        let lr = if config.maml.enabled { config.maml.outer_lr } else { config.learning_rate };
        Ok(Self::from_parts(
            weights.clone(),
            OptimState::new(weights.params.len(), lr, config.weight_decay),
        ))
    }

    pub fn from_parts(weights: WeightSnapshot<f32>, optim: OptimState<f32>) -> Self {
        let decay_mask = weights.layout().decay_mask();
        Self {
            weights,
            optim,
            decay_mask,
        }
    }

    /// One Adam step on the mean loss of `batch`.
    pub fn base_step(&mut self, batch: &[Example<'_, f32>], bn_momentum: f64) -> Result<f32> {
        let lg = loss_and_grad(&self.weights, batch)?;
        adam_step(&mut self.weights.params, &lg.grad, &self.decay_mask, &mut self.optim)?;
        self.weights.update_running_stats(&lg.stats, bn_momentum);
        Ok(lg.loss)
    }

    /// First-order MAML micro-episode. For every task slot, one SGD step on
    /// that task's examples in `adapt` gives adapted weights; the outer loss
    /// is the mean over `query` of each example's loss under its task's
    /// adapted weights, with batchnorm statistics pooled over `query`. The
    /// summed gradient is applied to the base weights by Adam.
    pub fn maml_step(
        &mut self,
        adapt: &[Example<'_, f32>],
        query: &[Example<'_, f32>],
        inner_lr: f64,
        bn_momentum: f64,
    ) -> Result<f32> {
        let mut slots: Vec<usize> = adapt.iter().chain(query).map(|e| e.task).collect();
        slots.sort_unstable();
        slots.dedup();
        let adapted = slots
            .iter()
            .map(|&t| {
                let own: Vec<Example<'_, f32>> = adapt.iter().filter(|e| e.task == t).copied().collect();
                let mut w = self.weights.clone();
                if !own.is_empty() && inner_lr != 0.0 {
                    let g = loss_and_grad(&self.weights, &own)?.grad;
                    let lr = inner_lr as f32;
                    for (p, d) in w.params.iter_mut().zip(&g) {
                        *p -= lr * d;
                    }
                }
                Ok(w)
            })
            .collect::<Result<Vec<_>>>()?;
        let sets: Vec<&WeightSnapshot<f32>> = adapted.iter().collect();
        let groups: Vec<usize> = query
            .iter()
            .map(|e| slots.binary_search(&e.task).expect("slot listed"))
            .collect();
        let out = loss_and_pooled_grad(&sets, &groups, query)?;
        adam_step(&mut self.weights.params, &out.grad, &self.decay_mask, &mut self.optim)?;
        self.weights.update_running_stats(&out.stats, bn_momentum);
        Ok(out.loss)
    }
}

/// Splits a batch into adaptation and query halves that both follow the
/// batch's task composition: each task's examples alternate between halves,
/// the first going to the adaptation half.
pub fn split_halves<'a>(batch: &[Example<'a, f32>]) -> (Vec<Example<'a, f32>>, Vec<Example<'a, f32>>) {
    let mut seen = std::collections::HashMap::new();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for e in batch {
        let k = seen.entry(e.task).or_insert(0usize);
        if *k % 2 == 0 { a.push(*e) } else { b.push(*e) }
        *k += 1;
    }
    (a, b)
}

/// Holdout accuracy for MAML-trained weights. With `adapt`, one inner SGD
/// step on `adaptation` (examples of `task` from the training split) precedes
/// evaluation; the base weights are left untouched either way.
pub fn meta_test_evaluate(
    ws: &Workspace,
    weights: &WeightSnapshot<f32>,
    task: &TaskSpec,
    adaptation: &[Example<'_, f32>],
    inner_lr: f64,
    adapt: bool,
) -> Result<f64> {
    if !adapt || adaptation.is_empty() || inner_lr == 0.0 {
        return Ok(ws.evaluate(weights, task));
    }
    let g = loss_and_grad(weights, adaptation)?.grad;
    let mut w = weights.clone();
    let lr = inner_lr as f32;
    for (p, d) in w.params.iter_mut().zip(&g) {
        *p -= lr * d;
    }
    Ok(ws.evaluate(&w, task))
}

/// Where a run keeps its files, and how far it may go.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Directory for logs and checkpoints; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Continue from the latest checkpoint in `out_dir`.
    pub resume: bool,
    /// Stop (as if interrupted) after this many episodes.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    config_hash: String,
    run_id: String,
    episode: usize,
    trials: Vec<u64>,
    log: TrialLog,
    probes: Vec<ProbeRecord>,
}

pub const RUN_LOG: &str = "runs.jsonl";
pub const PROBE_LOG: &str = "probes.jsonl";
pub const TRIAL_LOG: &str = "trial_log.json";

struct RunCtx<'a> {
    ws: &'a Workspace,
    run_id: &'a str,
    seed: u64,
}

struct EpisodeResult {
    summary: EpisodeSummary,
    cells: Vec<CellRecord>,
    records: Vec<EvalRecord>,
}

impl RunCtx<'_> {
    fn cfg(&self) -> &RunConfig {
        &self.ws.config
    }

    fn training_examples<'b>(
        &self,
        tasks: &[TaskSpec],
        pairs: &[(usize, usize)],
        images: &'b [std::borrow::Cow<'b, [f32]>],
    ) -> Vec<Example<'b, f32>> {
        pairs
            .iter()
            .zip(images)
            .map(|(&(i, slot), im)| Example {
                image: im,
                task: tasks[slot].global_id,
                label: self.ws.dataset.label(Split::Train, i, &tasks[slot]),
            })
            .collect()
    }

    /// One epoch: assignment, batch plan, one optimizer step per batch.
    fn train_epoch(&self, learner: &mut Learner, tasks: &[TaskSpec], alloc: &EpisodeAllocation, epoch: usize) -> Result<Vec<f64>> {
        let cfg = self.cfg();
        let counts: Vec<usize> = alloc.counts.iter().map(|&c| c as usize).collect();
        let seed = derive_seed(self.seed, &[tag::ASSIGN, alloc.episode as u64, epoch as u64]);
        let assignment = assign_epoch_tasks(&self.ws.dataset, tasks, &counts, seed)?;
        let plan = make_batch_plan(alloc, cfg.n_batches, cfg.batch_size)?;
        let mut queues: Vec<std::vec::IntoIter<usize>> =
            (0..tasks.len()).map(|t| assignment.images_for(t).into_iter()).collect();
        for row in &plan.counts {
            let mut pairs = Vec::with_capacity(cfg.batch_size as usize);
            for (t, &c) in row.iter().enumerate() {
                pairs.extend(queues[t].by_ref().take(c as usize).map(|i| (i, t)));
            }
            let images: Vec<_> = pairs.iter().map(|&(i, _)| self.ws.dataset.image(Split::Train, i)).collect();
            let batch = self.training_examples(tasks, &pairs, &images);
            if cfg.maml.enabled {
                let (a, b) = split_halves(&batch);
                learner.maml_step(&a, &b, cfg.maml.inner_lr, cfg.bn_momentum)?;
            } else {
                learner.base_step(&batch, cfg.bn_momentum)?;
            }
        }
        Ok(assignment.positive_fraction)
    }

    fn adaptation_batch(&self, task: &TaskSpec, episode: usize, epoch: usize) -> Vec<usize> {
        let n = self.ws.dataset.len(Split::Train);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut derived_rng(
            self.seed,
            &[tag::ADAPT, episode as u64, epoch as u64, task.global_id as u64],
        ));
        idx.truncate((self.cfg().batch_size as usize / 2).max(1));
        idx
    }

    fn evaluate(&self, learner: &Learner, task: &TaskSpec, episode: usize, epoch: usize) -> Result<f64> {
        let cfg = self.cfg();
        if cfg.maml.enabled && cfg.maml.adapt_at_test {
            let idx = self.adaptation_batch(task, episode, epoch);
            let images: Vec<_> = idx.iter().map(|&i| self.ws.dataset.image(Split::Train, i)).collect();
            let ex: Vec<Example<'_, f32>> = idx
                .iter()
                .zip(&images)
                .map(|(&i, im)| Example {
                    image: im,
                    task: task.global_id,
                    label: self.ws.dataset.label(Split::Train, i, task),
                })
                .collect();
            meta_test_evaluate(self.ws, &learner.weights, task, &ex, cfg.maml.inner_lr, true)
        } else {
            Ok(self.ws.evaluate(&learner.weights, task))
        }
    }

    /// Trains `tasks` with per-epoch `alloc` until every task reaches the
    /// criterion at an end-of-epoch evaluation, or `max_epochs` pass.
    /// `trials` holds run-cumulative trials per task and is advanced.
    fn run_episode(
        &self,
        learner: &mut Learner,
        tasks: &[TaskSpec],
        alloc: &EpisodeAllocation,
        trials: &mut [u64],
        epoch_offset: usize,
        times_trained: impl Fn(usize) -> usize,
    ) -> Result<EpisodeResult> {
        let cfg = self.cfg();
        let k = tasks.len();
        let mut records = Vec::new();
        let mut first_cross: Vec<Option<u64>> = vec![None; k];
        let mut at_budget: Vec<Option<f64>> = vec![None; k];
        let mut acc = vec![0.0; k];
        let mut band = [f64::INFINITY, f64::NEG_INFINITY];
        let mut epochs = 0;
        let mut converged = false;
        while epochs < cfg.max_epochs {
            let fractions = self.train_epoch(learner, tasks, alloc, epochs)?;
            for f in fractions {
                band = [band[0].min(f), band[1].max(f)];
            }
            epochs += 1;
            for (t, task) in tasks.iter().enumerate() {
                trials[t] += alloc.counts[t];
                let within = alloc.counts[t] * epochs as u64;
                acc[t] = self.evaluate(learner, task, alloc.episode, epochs)?;
                if first_cross[t].is_none() && acc[t] >= cfg.criterion {
                    first_cross[t] = Some(within);
                }
                if at_budget[t].is_none() && within >= cfg.trial_budget {
                    at_budget[t] = Some(acc[t]);
                }
                records.push(EvalRecord {
                    run_id: self.run_id.to_owned(),
                    episode: alloc.episode,
                    task: task.global_id,
                    epoch: epoch_offset + epochs,
                    cumulative_task_trials: trials[t],
                    holdout_accuracy: acc[t],
                });
            }
            if acc.iter().all(|&a| a >= cfg.criterion) {
                converged = true;
                break;
            }
        }
        let cells = tasks
            .iter()
            .enumerate()
            .map(|(t, task)| CellRecord {
                task: task.global_id,
                position: t + 1,
                episode: alloc.episode,
                times_trained: times_trained(t),
                trials_to_criterion: first_cross[t],
                accuracy_at_budget: at_budget[t].unwrap_or(acc[t]),
                budget_reached: at_budget[t].is_some(),
            })
            .collect();
        Ok(EpisodeResult {
            summary: EpisodeSummary {
                episode: alloc.episode,
                epochs,
                converged,
                end_epoch: epoch_offset + epochs,
                final_accuracy: acc,
                positive_fraction: band,
            },
            cells,
            records,
        })
    }

    /// Trains a clone exclusively on `new_task`, evaluating `old` every
    /// `interval` batches from 0 through `duration`.
    fn forgetting_probe(&self, start: &Learner, new_task: &TaskSpec, old: &[TaskSpec], episode: usize) -> Result<Vec<ProbeRecord>> {
        let cfg = self.cfg();
        let mut learner = start.clone();
        let n = self.ws.dataset.len(Split::Train);
        let bs = cfg.batch_size as usize;
        let mut order: Vec<usize> = Vec::new();
        let mut pass = 0u64;
        let mut out = Vec::new();
        let record = |learner: &Learner, b: usize, out: &mut Vec<ProbeRecord>| {
            for t in old {
                out.push(ProbeRecord {
                    run_id: self.run_id.to_owned(),
                    probe_episode: episode,
                    old_task: t.global_id,
                    batches_elapsed: b,
                    accuracy: self.ws.evaluate(&learner.weights, t),
                });
            }
        };
        record(&learner, 0, &mut out);
        let duration = cfg.probe_duration();
        for b in 1..=duration {
            if order.len() < bs {
                let mut more: Vec<usize> = (0..n).collect();
                more.shuffle(&mut derived_rng(self.seed, &[tag::PROBE, episode as u64, pass]));
                pass += 1;
                order.extend(more);
            }
            let take: Vec<usize> = order.drain(..bs.min(order.len())).collect();
            let images: Vec<_> = take.iter().map(|&i| self.ws.dataset.image(Split::Train, i)).collect();
            let batch: Vec<Example<'_, f32>> = take
                .iter()
                .zip(&images)
                .map(|(&i, im)| Example {
                    image: im,
                    task: new_task.global_id,
                    label: self.ws.dataset.label(Split::Train, i, new_task),
                })
                .collect();
            learner.base_step(&batch, cfg.bn_momentum)?;
            if b % cfg.probes.interval == 0 || b == duration {
                record(&learner, b, &mut out);
            }
        }
        Ok(out)
    }
}

fn checkpoint_paths(dir: &Path, episode: usize) -> (PathBuf, PathBuf) {
    let base = dir.join("checkpoints");
    (
        base.join(format!("episode-{episode:03}.bin")),
        base.join(format!("episode-{episode:03}.json")),
    )
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Writes the run log, probe log and trial log into `dir`.
pub fn write_outputs(dir: &Path, outcome: &RunOutcome) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_jsonl(&dir.join(RUN_LOG), &outcome.log.records)?;
    if !outcome.probes.is_empty() {
        write_jsonl(&dir.join(PROBE_LOG), &outcome.probes)?;
    }
    std::fs::write(dir.join(TRIAL_LOG), serde_json::to_string_pretty(&outcome.log)?)?;
    Ok(())
}

pub fn read_trial_log(path: &Path) -> Result<TrialLog> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn latest_checkpoint(dir: &Path, hash: &str, run_id: &str, n: usize) -> Result<Option<(CheckpointMeta, Learner)>> {
    for e in (1..=n).rev() {
        let (bin, json) = checkpoint_paths(dir, e);
        if !(bin.exists() && json.exists()) {
            continue;
        }
        let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(&json)?)?;
        if meta.config_hash != hash || meta.run_id != run_id {
            return Err(Error::MixedConfig(format!(
                "checkpoint {} belongs to run {} with config {}",
                json.display(),
                meta.run_id,
                meta.config_hash
            )));
        }
        let (weights, optim, _) = read_weights(&bin)?;
        let optim = optim.ok_or_else(|| Error::Format(format!("{} has no optimizer state", bin.display())))?;
        return Ok(Some((meta, Learner::from_parts(weights, optim))));
    }
    Ok(None)
}

/// Runs the episodes of `spec`: episode `i` trains the first `i` tasks of
/// its order with the configured curriculum.
pub fn run_sequence(ws: &Workspace, spec: &RunSpec, opts: &RunOptions) -> Result<RunOutcome> {
    let cfg = &ws.config;
    let n = cfg.n_episodes.min(spec.order.len());
    let tasks: Vec<TaskSpec> = spec.order[..n].iter().map(|&id| ws.task(id)).collect::<Result<_>>()?;
    let ctx = RunCtx {
        ws,
        run_id: &spec.run_id,
        seed: spec.seed,
    };
    let hash = cfg.hash();
    let mut learner = Learner::new(cfg, spec.seed)?;
    let mut trials = vec![0u64; n];
    let mut probes = Vec::new();
    let mut log = TrialLog {
        run_id: spec.run_id.clone(),
        config_hash: hash.clone(),
        seed: spec.seed,
        order: spec.order[..n].to_vec(),
        status: RunStatus::Completed,
        episodes: Vec::new(),
        cells: Vec::new(),
        records: Vec::new(),
    };
    let mut start = 1;
    if let (true, Some(dir)) = (opts.resume, &opts.out_dir) {
        if let Some((meta, l)) = latest_checkpoint(dir, &hash, &spec.run_id, n)? {
            start = meta.episode + 1;
            trials = meta.trials;
            log = meta.log;
            probes = meta.probes;
            learner = l;
        }
    }
    for episode in start..=n {
        if opts.stop_after.is_some_and(|s| episode > s) {
            break;
        }
        if cfg.probes.enabled && episode >= 2 {
            probes.extend(ctx.forgetting_probe(&learner, &tasks[episode - 1], &tasks[..episode - 1], episode)?);
        }
        let alloc = cfg.curriculum.allocate(episode, cfg.epoch_size)?;
        let offset = log.episodes.last().map_or(0, |e| e.end_epoch);
        let r = ctx.run_episode(&mut learner, &tasks[..episode], &alloc, &mut trials[..episode], offset, |t| episode - t)?;
        let failed = !r.summary.converged;
        log.episodes.push(r.summary);
        log.cells.extend(r.cells);
        log.records.extend(r.records);
        if failed && cfg.on_failure == FailurePolicy::Abort {
            log.status = RunStatus::Aborted;
        }
        if let Some(dir) = &opts.out_dir {
            let (bin, json) = checkpoint_paths(dir, episode);
            std::fs::create_dir_all(bin.parent().expect("checkpoint dir"))?;
            write_weights(&bin, &learner.weights, Some(&learner.optim), Some(&hash))?;
            let meta = CheckpointMeta {
                config_hash: hash.clone(),
                run_id: spec.run_id.clone(),
                episode,
                trials: trials.clone(),
                log: log.clone(),
                probes: probes.clone(),
            };
            std::fs::write(json, serde_json::to_string(&meta)?)?;
            write_outputs(dir, &RunOutcome { log: log.clone(), probes: probes.clone() })?;
        }
        if log.status == RunStatus::Aborted {
            break;
        }
    }
    Ok(RunOutcome { log, probes })
}

/// Trains `task_ids` together from scratch on an even per-epoch mixture
/// (counts differ by at most one) until all reach the criterion or
/// `max_epochs` pass. The log holds a single episode numbered 1.
pub fn run_simultaneous(ws: &Workspace, run_id: &str, task_ids: &[usize], seed: u64) -> Result<TrialLog> {
    let cfg = &ws.config;
    let k = task_ids.len() as u64;
    if k == 0 || k > cfg.epoch_size {
        return Err(Error::Config(format!("cannot mix {k} tasks in an epoch of {}", cfg.epoch_size)));
    }
    let tasks: Vec<TaskSpec> = task_ids.iter().map(|&id| ws.task(id)).collect::<Result<_>>()?;
    let counts = (0..k)
        .map(|t| cfg.epoch_size / k + u64::from(t < cfg.epoch_size % k))
        .collect();
    let alloc = EpisodeAllocation {
        episode: 1,
        counts,
        epoch_size: cfg.epoch_size,
    };
    let ctx = RunCtx { ws, run_id, seed };
    let mut learner = Learner::new(cfg, seed)?;
    let mut trials = vec![0u64; tasks.len()];
    let r = ctx.run_episode(&mut learner, &tasks, &alloc, &mut trials, 0, |_| 1)?;
    let status = if r.summary.converged || cfg.on_failure == FailurePolicy::Continue {
        RunStatus::Completed
    } else {
        RunStatus::Aborted
    };
    Ok(TrialLog {
        run_id: run_id.to_owned(),
        config_hash: cfg.hash(),
        seed,
        order: task_ids.to_vec(),
        status,
        episodes: vec![r.summary],
        cells: r.cells,
        records: r.records,
    })
}
