#![allow(dead_code)]

use std::collections::BTreeMap;

use contlearn::nnet::{loss_and_grad, Example, ModelConfig, Scalar, WeightSnapshot};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Problem {
    pub config: ModelConfig,
    pub weights: WeightSnapshot<f64>,
    pub images: Vec<Vec<f64>>,
    pub tasks: Vec<usize>,
    pub labels: Vec<bool>,
}

impl Problem {
    pub fn batch<'a, S: Scalar>(&self, images: &'a [Vec<S>]) -> Vec<Example<'a, S>> {
        images
            .iter()
            .zip(&self.tasks)
            .zip(&self.labels)
            .map(|((im, &task), &label)| Example { image: im, task, label })
            .collect()
    }

    pub fn images_as<S: Scalar>(&self) -> Vec<Vec<S>> {
        self.images
            .iter()
            .map(|im| im.iter().map(|&v| S::from_f64(v).unwrap()).collect())
            .collect()
    }
}

/// Random desk-sized network at its initialization.
pub fn random_problem(seed: u64, batch: usize) -> Problem {
    random_problem_with(seed, batch, 0.0)
}

/// As [`random_problem`], with batchnorm, bias and task-mod parameters
/// shifted uniformly in `[-spread, spread)`.
pub fn random_problem_with(seed: u64, batch: usize, spread: f64) -> Problem {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n_tasks = r.gen_range(3..7);
    let config = ModelConfig {
        conv_filters: vec![4, 8],
        fc_widths: vec![32],
        n_tasks,
        task_mod_layer: Some(r.gen_range(1..=2)),
        input_dims: [3, 16, 16],
        ..ModelConfig::paper(n_tasks)
    };
    let mut weights = WeightSnapshot::<f64>::init(&config, seed).unwrap();
    let layout = weights.layout();
    for t in layout.tensors.iter().filter(|_| spread > 0.0) {
        if t.name.contains("gamma") || t.name.contains("beta") || t.name == "taskmod" || t.name.ends_with("bias") {
            for p in &mut weights.params[t.range()] {
                *p += r.gen_range(-spread..spread);
            }
        }
    }
    let images = (0..batch)
        .map(|_| (0..3 * 16 * 16).map(|_| r.gen_range(0.0..1.0)).collect())
        .collect();
    let tasks = (0..batch).map(|_| r.gen_range(0..n_tasks)).collect();
    let labels = (0..batch).map(|_| r.gen_bool(0.5)).collect();
    Problem {
        config,
        weights,
        images,
        tasks,
        labels,
    }
}

/// Central finite differences of the mean loss in f64.
pub fn finite_difference(p: &Problem, coords: &[usize], step: f64) -> Vec<f64> {
    let images = p.images_as::<f64>();
    let batch = p.batch(&images);
    coords
        .iter()
        .map(|&i| {
            let mut w = p.weights.clone();
            w.params[i] += step;
            let up = loss_and_grad(&w, &batch).unwrap().loss;
            w.params[i] -= 2.0 * step;
            let down = loss_and_grad(&w, &batch).unwrap().loss;
            (up - down) / (2.0 * step)
        })
        .collect()
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn onehot<S: Scalar>(n: usize, t: usize) -> Vec<S> {
    (0..n).map(|i| if i == t { S::one() } else { S::zero() }).collect()
}

/// Copies every tensor except the task-mod table into a network built from `config`.
pub fn transplant<S: Scalar>(from: &WeightSnapshot<S>, config: &ModelConfig) -> WeightSnapshot<S> {
    let mut to = WeightSnapshot::<S>::init(config, 0).unwrap();
    let (src, dst) = (from.layout(), to.layout());
    for t in &dst.tensors {
        let s = src.tensor(&t.name).unwrap();
        to.params[t.range()].copy_from_slice(&from.params[s.range()]);
    }
    to.bn_mean.clone_from(&from.bn_mean);
    to.bn_var.clone_from(&from.bn_var);
    to
}

const PER_TENSOR: usize = 64;

pub fn family(name: &str) -> &'static str {
    if name.starts_with("conv") {
        "conv"
    } else if name.starts_with("bn") {
        "batchnorm"
    } else if name == "taskmod" {
        "taskmod"
    } else {
        "fc"
    }
}

#[derive(Default)]
pub struct GradReport {
    pub worst: BTreeMap<&'static str, (f64, f64)>,
    pub checked: usize,
    pub rechecked: usize,
}

impl GradReport {
    pub fn add(&mut self, p: &Problem) {
        let layout = p.weights.layout();
        let coords: Vec<usize> = layout
            .tensors
            .iter()
            .flat_map(|t| {
                let r = t.range();
                let stride = (r.len() / PER_TENSOR).max(1);
                r.step_by(stride).take(PER_TENSOR)
            })
            .collect();
        let mut fd = finite_difference(p, &coords, 1e-5);
        let scale = fd.iter().fold(0.0f64, |m, x| m.max(x.abs()));

        let img64 = p.images_as::<f64>();
        let g64 = loss_and_grad(&p.weights, &p.batch(&img64)).unwrap().grad;
        let w32 = p.weights.cast::<f32>();
        let img32 = p.images_as::<f32>();
        let g32 = loss_and_grad(&w32, &p.batch(&img32)).unwrap().grad;

        let suspect: Vec<usize> = (0..coords.len())
            .filter(|&k| rel_err(g64[coords[k]], fd[k], 1e-5 * scale) >= 1e-5)
            .collect();
        let sus_coords: Vec<usize> = suspect.iter().map(|&k| coords[k]).collect();
        for (&k, v) in suspect.iter().zip(finite_difference(p, &sus_coords, 1e-7)) {
            fd[k] = v;
        }
        self.checked += coords.len();
        self.rechecked += suspect.len();

        for (k, &i) in coords.iter().enumerate() {
            let name = &layout.tensors.iter().find(|t| t.range().contains(&i)).unwrap().name;
            let entry = self.worst.entry(family(name)).or_insert((0.0, 0.0));
            entry.0 = entry.0.max(rel_err(g64[i], fd[k], 1e-5 * scale));
            entry.1 = entry.1.max(rel_err(g32[i] as f64, fd[k], 1e-3 * scale));
        }
    }

    /// Worst errors per parameter family, or the first violated bound.
    pub fn check(&self) -> Result<String, String> {
        if self.worst.len() != 4 {
            return Err(format!("covered families {:?}", self.worst.keys().collect::<Vec<_>>()));
        }
        if self.rechecked * 100 > self.checked {
            return Err(format!("{} of {} coordinates sat on kinks", self.rechecked, self.checked));
        }
        let mut parts = Vec::new();
        for (fam, (e64, e32)) in &self.worst {
            if *e64 >= 1e-5 || *e32 >= 1e-3 {
                return Err(format!("{fam}: f64 relative error {e64:.2e}, f32 {e32:.2e}"));
            }
            parts.push(format!("{fam} {e64:.1e}/{e32:.1e}"));
        }
        Ok(parts.join(", "))
    }

    pub fn assert_within(&self) {
        match self.check() {
            Ok(summary) => println!("{} coordinates, worst f64/f32 relative error: {summary}", self.checked),
            Err(e) => panic!("{e}"),
        }
    }
}
