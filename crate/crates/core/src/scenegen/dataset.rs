use std::borrow::Cow;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{render, sample_scene_inner, GenConfig, SceneSpec, TaskSpec, ValueUsage};
use crate::rng::{self, tag};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Holdout,
}

/// Train and holdout scenes plus (optionally) their rendered pixels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: GenConfig,
    pub train: Vec<SceneSpec>,
    pub holdout: Vec<SceneSpec>,
    train_masks: Vec<u64>,
    holdout_masks: Vec<u64>,
    train_pixels: Option<Vec<f32>>,
    holdout_pixels: Option<Vec<f32>>,
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    objects: Vec<super::ObjectSpec>,
    seed: u64,
    split: Split,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    channels: usize,
    height: usize,
    width: usize,
    count: usize,
}

impl Dataset {
    pub fn from_scenes(config: GenConfig, train: Vec<SceneSpec>, holdout: Vec<SceneSpec>) -> Self {
        let v = config.values_per_dimension;
        let train_masks = train.iter().map(|s| s.task_mask(v)).collect();
        let holdout_masks = holdout.iter().map(|s| s.task_mask(v)).collect();
        Self {
            config,
            train,
            holdout,
            train_masks,
            holdout_masks,
            train_pixels: None,
            holdout_pixels: None,
        }
    }

    pub fn image_len(&self) -> usize {
        3 * self.config.height * self.config.width
    }

    pub fn len(&self, split: Split) -> usize {
        self.scenes(split).len()
    }

    pub fn scenes(&self, split: Split) -> &[SceneSpec] {
        match split {
            Split::Train => &self.train,
            Split::Holdout => &self.holdout,
        }
    }

    /// Renders every image once and keeps the pixels in memory.
    pub fn materialize(&mut self) {
        let render_all = |scenes: &[SceneSpec], cfg: &GenConfig| {
            let mut out = Vec::with_capacity(scenes.len() * 3 * cfg.height * cfg.width);
            for s in scenes {
                out.extend_from_slice(&render(s, cfg).data);
            }
            out
        };
        if self.train_pixels.is_none() {
            self.train_pixels = Some(render_all(&self.train, &self.config));
        }
        if self.holdout_pixels.is_none() {
            self.holdout_pixels = Some(render_all(&self.holdout, &self.config));
        }
    }

    pub fn is_materialized(&self) -> bool {
        self.train_pixels.is_some() && self.holdout_pixels.is_some()
    }

    pub fn image(&self, split: Split, index: usize) -> Cow<'_, [f32]> {
        let pixels = match split {
            Split::Train => &self.train_pixels,
            Split::Holdout => &self.holdout_pixels,
        };
        match pixels {
            Some(p) => {
                let n = self.image_len();
                Cow::Borrowed(&p[index * n..(index + 1) * n])
            }
            None => Cow::Owned(render(&self.scenes(split)[index], &self.config).data),
        }
    }

    pub fn label(&self, split: Split, index: usize, task: &TaskSpec) -> bool {
        let masks = match split {
            Split::Train => &self.train_masks,
            Split::Holdout => &self.holdout_masks,
        };
        masks[index] >> task.global_id & 1 == 1
    }

    /// Per-dimension, per-value object counts for a split.
    pub fn value_usage(&self, split: Split) -> [Vec<u64>; 3] {
        let mut usage = ValueUsage::new(self.config.values_per_dimension);
        for s in self.scenes(split) {
            usage.record(s);
        }
        usage.counts
    }

    /// Holdout indices used to score `task`. With `balanced`, the majority
    /// class is subsampled so positives and negatives are equally frequent.
    pub fn holdout_eval_set(&self, task: &TaskSpec, balanced: bool, seed: u64) -> Vec<usize> {
        let n = self.holdout.len();
        if !balanced {
            return (0..n).collect();
        }
        let (mut pos, mut neg): (Vec<usize>, Vec<usize>) =
            (0..n).partition(|&i| self.label(Split::Holdout, i, task));
        let mut r = rng::derived_rng(seed, &[tag::EVAL_SET, task.global_id as u64]);
        let keep = pos.len().min(neg.len());
        pos.shuffle(&mut r);
        neg.shuffle(&mut r);
        pos.truncate(keep);
        neg.truncate(keep);
        let mut out: Vec<usize> = pos.into_iter().chain(neg).collect();
        out.sort_unstable();
        out
    }

    /// One JSON object per scene: `{objects, seed, split}`.
    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for (split, scenes) in [(Split::Train, &self.train), (Split::Holdout, &self.holdout)] {
            for s in scenes {
                let line = ManifestLine {
                    objects: s.objects.clone(),
                    seed: s.seed,
                    split,
                };
                serde_json::to_writer(&mut w, &line)?;
                w.write_all(b"\n")?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_manifest(path: &Path, config: GenConfig) -> Result<Self> {
        let r = BufReader::new(std::fs::File::open(path)?);
        let (mut train, mut holdout) = (Vec::new(), Vec::new());
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestLine = serde_json::from_str(&line)?;
            let scene = SceneSpec {
                objects: rec.objects,
                seed: rec.seed,
            };
            match rec.split {
                Split::Train => train.push(scene),
                Split::Holdout => holdout.push(scene),
            }
        }
        Ok(Self::from_scenes(config, train, holdout))
    }

    /// Header line `{channels, height, width, count}` followed by raw
    /// little-endian f32 pixels, image after image, channel-major.
    pub fn write_tensors(&self, split: Split, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        let header = TensorHeader {
            channels: 3,
            height: self.config.height,
            width: self.config.width,
            count: self.len(split),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for i in 0..self.len(split) {
            for v in self.image(split, i).iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads a tensor file written by [`Dataset::write_tensors`]; returns
/// `(channels, height, width, count, data)`.
pub fn read_tensors(path: &Path) -> Result<(usize, usize, usize, usize, Vec<f32>)> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut header = String::new();
    r.read_line(&mut header)?;
    let h: TensorHeader = serde_json::from_str(header.trim())?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let expected = h.channels * h.height * h.width * h.count * 4;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "tensor payload has {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((h.channels, h.height, h.width, h.count, data))
}

fn check_balance(usage: &[Vec<u64>; 3], tol: f64, split: &str) -> Result<()> {
    for (d, counts) in usage.iter().enumerate() {
        let total: u64 = counts.iter().sum();
        let share = total as f64 / counts.len() as f64;
        for (v, &c) in counts.iter().enumerate() {
            let dev = (c as f64 - share).abs() / share;
            if dev > tol {
                return Err(Error::Balance(format!(
                    "{split}: dimension {d} value {v} used {c} times vs uniform share {share:.1} \
                     (relative deviation {dev:.3} > {tol})"
                )));
            }
        }
    }
    Ok(())
}

/// Generates train and holdout scenes. Scene seeds come from disjoint
/// derived streams, and feature values are drawn least-used-first so that
/// per-value counts stay within `balance_tolerance` of uniform.
pub fn build_dataset(
    n_train: usize,
    n_holdout: usize,
    seed: u64,
    config: &GenConfig,
) -> Result<Dataset> {
    if n_train == 0 || n_holdout == 0 {
        return Err(Error::Config("dataset split sizes must be positive".into()));
    }
    config.validate()?;
    let v = config.values_per_dimension;
    let gen_split = |n: usize, split_tag: u64| -> Result<(Vec<SceneSpec>, ValueUsage)> {
        let mut usage = ValueUsage::new(v);
        let mut scenes = Vec::with_capacity(n);
        for i in 0..n {
            let s = rng::derive_seed(seed, &[split_tag, i as u64]);
            let scene = sample_scene_inner(s, config, Some(&usage))?;
            usage.record(&scene);
            scenes.push(scene);
        }
        Ok((scenes, usage))
    };
    let (train, usage) = gen_split(n_train, tag::SCENE_TRAIN)?;
    check_balance(&usage.counts, config.balance_tolerance, "train")?;
    let (holdout, _) = gen_split(n_holdout, tag::SCENE_HOLDOUT)?;
    Ok(Dataset::from_scenes(config.clone(), train, holdout))
}

/// One epoch's image-to-task assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochAssignment {
    /// `(train image index, slot in the task list)`, in random order.
    pub pairs: Vec<(usize, usize)>,
    /// Positive-label fraction per task slot.
    pub positive_fraction: Vec<f64>,
    /// Whether every task's fraction lies in the configured band.
    pub within_band: bool,
}

impl EpochAssignment {
    /// Image indices assigned to `slot`, in assignment order.
    pub fn images_for(&self, slot: usize) -> Vec<usize> {
        self.pairs
            .iter()
            .filter(|p| p.1 == slot)
            .map(|p| p.0)
            .collect()
    }
}

/// Assigns every training image to exactly one task so that task `t`
/// receives `counts[t]` images. With `stratify`, each task's quota is filled
/// alternately from its positive and negative pools, which drives positive
/// fractions toward one half whenever the pools allow it; otherwise the
/// images are dealt to tasks in random order.
pub fn assign_epoch_tasks(
    dataset: &Dataset,
    tasks: &[TaskSpec],
    counts: &[usize],
    seed: u64,
) -> Result<EpochAssignment> {
    let n = dataset.len(Split::Train);
    if tasks.len() != counts.len() {
        return Err(Error::Config("task list and allocation lengths differ".into()));
    }
    let total: usize = counts.iter().sum();
    if total != n {
        return Err(Error::Config(format!(
            "allocation sums to {total}, training split has {n} images"
        )));
    }
    let mut r = rng::derived_rng(seed, &[tag::ASSIGN]);

    let mut slots: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(t, &c)| std::iter::repeat(t).take(c))
        .collect();
    slots.shuffle(&mut r);

    // pools[t] = (positives, negatives), each shuffled, consumed front to back
    let mut pools: Vec<[Vec<usize>; 2]> = tasks
        .iter()
        .map(|task| {
            let (mut p, mut q): (Vec<usize>, Vec<usize>) =
                (0..n).partition(|&i| dataset.label(Split::Train, i, task));
            p.shuffle(&mut r);
            q.shuffle(&mut r);
            [p, q]
        })
        .collect();
    let mut cursor = vec![[0usize; 2]; tasks.len()];
    let mut taken = vec![[0usize; 2]; tasks.len()];
    let mut assigned = vec![false; n];
    let mut pairs = Vec::with_capacity(n);

    if !dataset.config.stratify {
        let mut images: Vec<usize> = (0..n).collect();
        images.shuffle(&mut r);
        for (&img, &t) in images.iter().zip(&slots) {
            let kind = if dataset.label(Split::Train, img, &tasks[t]) { 0 } else { 1 };
            assigned[img] = true;
            taken[t][kind] += 1;
            pairs.push((img, t));
        }
    }
    for &t in slots.iter().filter(|_| dataset.config.stratify) {
        let prefer = if taken[t][0] <= taken[t][1] { 0 } else { 1 };
        let mut chosen = None;
        for kind in [prefer, 1 - prefer] {
            let pool = &mut pools[t][kind];
            let cur = &mut cursor[t][kind];
            while *cur < pool.len() && assigned[pool[*cur]] {
                *cur += 1;
            }
            if *cur < pool.len() {
                chosen = Some((pool[*cur], kind));
                *cur += 1;
                break;
            }
        }
        // Every unassigned image is in one of the two pools, and a slot
        // exists only while unassigned images remain.
        let (img, kind) = chosen.expect("unassigned image available");
        assigned[img] = true;
        taken[t][kind] += 1;
        pairs.push((img, t));
    }
    for pool in &mut pools {
        pool[0].clear();
        pool[1].clear();
    }

    let [lo, hi] = dataset.config.positive_band;
    let positive_fraction: Vec<f64> = taken
        .iter()
        .map(|&[p, q]| if p + q == 0 { 0.0 } else { p as f64 / (p + q) as f64 })
        .collect();
    let mut within_band = true;
    for (t, &f) in positive_fraction.iter().enumerate() {
        if f < lo - 1e-12 || f > hi + 1e-12 {
            within_band = false;
            if dataset.config.strict_positive_band {
                return Err(Error::Stratification {
                    task: tasks[t].global_id,
                    achievable: f,
                    lo,
                    hi,
                });
            }
        }
    }
    Ok(EpochAssignment {
        pairs,
        positive_fraction,
        within_band,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{Dimension, FeatureCatalog};

    fn small_paper(n: usize) -> Dataset {
        build_dataset(n, 50, 11, &GenConfig::paper()).unwrap()
    }

    #[test]
    fn exact_balance_when_every_value_present() {
        let cfg = GenConfig {
            width: 40,
            height: 40,
            values_per_dimension: 4,
            min_objects: 4,
            max_objects: 4,
            ..GenConfig::paper()
        };
        let ds = build_dataset(100, 10, 5, &cfg).unwrap();
        for counts in ds.value_usage(Split::Train) {
            assert!(counts.iter().all(|&c| c == 100));
        }
    }

    #[test]
    fn usage_histograms_reproducible() {
        let a = small_paper(300);
        let b = small_paper(300);
        assert_eq!(a.value_usage(Split::Train), b.value_usage(Split::Train));
        assert_eq!(a.train, b.train);
    }

    #[test]
    fn train_and_holdout_seeds_disjoint() {
        let ds = small_paper(200);
        let train: std::collections::HashSet<u64> = ds.train.iter().map(|s| s.seed).collect();
        assert!(ds.holdout.iter().all(|s| !train.contains(&s.seed)));
    }

    #[test]
    fn episode_one_assigns_everything_to_task_one() {
        let ds = small_paper(400);
        let cat = FeatureCatalog::paper();
        let t = cat.task(Dimension::Color, 3).unwrap();
        let a = assign_epoch_tasks(&ds, &[t], &[400], 1).unwrap();
        assert_eq!(a.pairs.len(), 400);
        assert!(a.pairs.iter().all(|p| p.1 == 0));
        let mut imgs: Vec<usize> = a.pairs.iter().map(|p| p.0).collect();
        imgs.sort();
        assert_eq!(imgs, (0..400).collect::<Vec<_>>());
    }

    #[test]
    fn quotas_exact_and_balanced() {
        let ds = small_paper(900);
        let cat = FeatureCatalog::paper();
        let tasks: Vec<TaskSpec> = (0..3).map(|v| cat.task(Dimension::Shape, v).unwrap()).collect();
        let counts = [225, 225, 450];
        let a = assign_epoch_tasks(&ds, &tasks, &counts, 4).unwrap();
        for (slot, &c) in counts.iter().enumerate() {
            let imgs = a.images_for(slot);
            assert_eq!(imgs.len(), c);
            let pos = imgs
                .iter()
                .filter(|&&i| ds.label(Split::Train, i, &tasks[slot]))
                .count();
            assert!((pos as f64 / c as f64 - a.positive_fraction[slot]).abs() < 1e-12);
        }
        assert!(a.within_band);
        let b = assign_epoch_tasks(&ds, &tasks, &counts, 4).unwrap();
        assert_eq!(a, b);
        let c = assign_epoch_tasks(&ds, &tasks, &counts, 5).unwrap();
        assert_ne!(a.pairs, c.pairs);
    }

    #[test]
    fn unstratified_assignment_partitions_images() {
        let cfg = GenConfig {
            stratify: false,
            ..GenConfig::paper()
        };
        let ds = Dataset {
            config: cfg,
            ..small_paper(600)
        };
        let cat = FeatureCatalog::paper();
        let tasks: Vec<TaskSpec> = (0..3).map(|v| cat.task(Dimension::Texture, v).unwrap()).collect();
        let counts = [150, 150, 300];
        let a = assign_epoch_tasks(&ds, &tasks, &counts, 9).unwrap();
        let mut seen: Vec<usize> = a.pairs.iter().map(|p| p.0).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..600).collect::<Vec<_>>());
        for (slot, &c) in counts.iter().enumerate() {
            assert_eq!(a.images_for(slot).len(), c);
        }
        assert_eq!(a, assign_epoch_tasks(&ds, &tasks, &counts, 9).unwrap());
    }

    #[test]
    fn infeasible_band_reported_in_strict_mode() {
        let cfg = GenConfig {
            width: 32,
            height: 24,
            values_per_dimension: 3,
            min_objects: 2,
            max_objects: 3,
            ..GenConfig::paper()
        };
        let ds = build_dataset(300, 30, 2, &cfg).unwrap();
        let t = cfg.catalog().unwrap().task(Dimension::Color, 0).unwrap();
        match assign_epoch_tasks(&ds, &[t], &[300], 0) {
            Err(Error::Stratification { achievable, .. }) => assert!(achievable > 0.6),
            other => panic!("expected stratification error, got {other:?}"),
        }
        let lenient = Dataset {
            config: GenConfig {
                strict_positive_band: false,
                ..cfg
            },
            ..ds
        };
        let a = assign_epoch_tasks(&lenient, &[t], &[300], 0).unwrap();
        assert!(!a.within_band);
    }

    #[test]
    fn balanced_eval_set() {
        let ds = small_paper(50);
        let t = FeatureCatalog::paper().task(Dimension::Texture, 2).unwrap();
        let idx = ds.holdout_eval_set(&t, true, 3);
        let pos = idx.iter().filter(|&&i| ds.label(Split::Holdout, i, &t)).count();
        assert_eq!(2 * pos, idx.len());
        assert_eq!(ds.holdout_eval_set(&t, false, 3).len(), 50);
    }

    #[test]
    fn manifest_and_tensor_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig {
            width: 20,
            height: 16,
            ..GenConfig::paper()
        };
        let cfg = GenConfig {
            values_per_dimension: 5,
            radius_min_frac: 0.1,
            radius_max_frac: 0.12,
            ..cfg
        };
        let ds = build_dataset(20, 5, 9, &cfg).unwrap();
        let m = dir.path().join("scenes.jsonl");
        ds.write_manifest(&m).unwrap();
        let text = std::fs::read_to_string(&m).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["objects", "seed", "split"] {
            assert!(first.get(key).is_some());
        }
        let back = Dataset::read_manifest(&m, cfg.clone()).unwrap();
        assert_eq!(back.train, ds.train);
        assert_eq!(back.holdout, ds.holdout);

        let tpath = dir.path().join("holdout.f32");
        ds.write_tensors(Split::Holdout, &tpath).unwrap();
        let (c, h, w, n, data) = read_tensors(&tpath).unwrap();
        assert_eq!((c, h, w, n), (3, 16, 20, 5));
        assert_eq!(&data[..ds.image_len()], &*ds.image(Split::Holdout, 0));
    }
}
