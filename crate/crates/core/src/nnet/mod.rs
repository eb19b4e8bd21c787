//! Task-conditioned convolutional classifier.
//!
//! Each conv block is `conv3x3 (+ task bias) -> ReLU -> batchnorm -> maxpool 2x2`.
//! The flattened conv output is concatenated with the one-hot task vector
//! and passed through ReLU fully-connected layers to a single logit for
//! "yes". Parameters live in one flat vector described by a [`Layout`].

mod adam;
mod io;
mod ops;
mod pass;

use num_traits::{Float, FromPrimitive};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::rng;
use crate::{Error, Result};

pub use adam::{adam_step, OptimState};
pub use io::{read_weights, write_weights};
pub use pass::{
    evaluate_accuracy, forward, forward_batch_eval, loss_and_grad, loss_and_grad_grouped, loss_and_pooled_grad,
    BatchStats, Example, LossGrad, Mode,
};

pub const BN_EPS: f64 = 1e-5;

pub trait Scalar:
    Float + FromPrimitive + Default + std::fmt::Debug + Send + Sync + std::iter::Sum + 'static
{
}
impl Scalar for f32 {}
impl Scalar for f64 {}

pub(crate) fn s<S: Scalar>(x: f64) -> S {
    S::from_f64(x).expect("representable constant")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub conv_filters: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub pool: usize,
    pub fc_widths: Vec<usize>,
    pub n_tasks: usize,
    /// 1-based conv layer receiving per-task channel biases.
    pub task_mod_layer: Option<usize>,
    /// (channels, height, width)
    pub input_dims: [usize; 3],
}

impl ModelConfig {
    pub fn paper(n_tasks: usize) -> Self {
        Self {
            conv_filters: vec![16, 32, 48, 64],
            kernel: 3,
            stride: 1,
            padding: 1,
            pool: 2,
            fc_widths: vec![512, 512, 512, 512],
            n_tasks,
            task_mod_layer: None,
            input_dims: [3, 120, 160],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_filters.is_empty() || self.fc_widths.is_empty() {
            return Err(Error::Config("conv_filters and fc_widths must be non-empty".into()));
        }
        if self.conv_filters.iter().chain(&self.fc_widths).any(|&n| n == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if (self.kernel, self.stride, self.padding, self.pool) != (3, 1, 1, 2) {
            return Err(Error::Config(
                "only 3x3 kernels with stride 1, padding 1 and 2x2 pooling are supported".into(),
            ));
        }
        if self.n_tasks == 0 {
            return Err(Error::Config("n_tasks must be positive".into()));
        }
        if let Some(l) = self.task_mod_layer {
            if l == 0 || l > self.conv_filters.len() {
                return Err(Error::Config(format!(
                    "task_mod_layer {l} outside 1..={}",
                    self.conv_filters.len()
                )));
            }
        }
        let [_, mut h, mut w] = self.input_dims;
        for _ in &self.conv_filters {
            h /= 2;
            w /= 2;
        }
        if h == 0 || w == 0 {
            return Err(Error::Config("input too small for the number of pooling stages".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorDesc {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    /// Subject to L2 weight decay.
    pub decay: bool,
}

impl TensorDesc {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    /// input (== pre-pool output) spatial size
    pub h: usize,
    pub w: usize,
    /// pooled output size
    pub ho: usize,
    pub wo: usize,
    pub weight: usize,
    pub bias: usize,
    pub gamma: usize,
    pub beta: usize,
    /// offset into running-statistics vectors
    pub bn: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FcGeom {
    pub nin: usize,
    pub nout: usize,
    pub weight: usize,
    pub bias: usize,
}

/// Offsets of every tensor in the flat parameter vector.
#[derive(Debug, Clone)]
pub struct Layout {
    pub tensors: Vec<TensorDesc>,
    pub n_params: usize,
    pub n_bn: usize,
    pub(crate) conv: Vec<ConvGeom>,
    pub(crate) fc: Vec<FcGeom>,
    /// Flattened conv feature count (before the task one-hot).
    pub(crate) features: usize,
    pub(crate) task_mod: Option<(usize, usize)>,
    pub(crate) n_tasks: usize,
}

impl Layout {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut tensors = Vec::new();
        let mut offset = 0usize;
        let mut push = |name: String, shape: Vec<usize>, decay: bool| {
            let d = TensorDesc {
                name,
                shape,
                offset,
                decay,
            };
            offset += d.len();
            let at = d.offset;
            tensors.push(d);
            at
        };

        let [mut cin, mut h, mut w] = config.input_dims;
        let mut conv = Vec::new();
        let mut bn = 0;
        let mut task_mod = None;
        for (l, &cout) in config.conv_filters.iter().enumerate() {
            let weight = push(format!("conv{}.weight", l + 1), vec![cout, cin, 3, 3], true);
            let bias = push(format!("conv{}.bias", l + 1), vec![cout], false);
            let gamma = push(format!("bn{}.gamma", l + 1), vec![cout], false);
            let beta = push(format!("bn{}.beta", l + 1), vec![cout], false);
            if config.task_mod_layer == Some(l + 1) {
                let at = push("taskmod".into(), vec![config.n_tasks, cout], false);
                task_mod = Some((l, at));
            }
            conv.push(ConvGeom {
                cin,
                cout,
                h,
                w,
                ho: h / 2,
                wo: w / 2,
                weight,
                bias,
                gamma,
                beta,
                bn,
            });
            bn += cout;
            cin = cout;
            h /= 2;
            w /= 2;
        }
        let features = cin * h * w;
        let mut nin = features + config.n_tasks;
        let mut fc = Vec::new();
        for (j, &nout) in config.fc_widths.iter().enumerate() {
            let weight = push(format!("fc{}.weight", j + 1), vec![nout, nin], true);
            let bias = push(format!("fc{}.bias", j + 1), vec![nout], false);
            fc.push(FcGeom {
                nin,
                nout,
                weight,
                bias,
            });
            nin = nout;
        }
        let weight = push("out.weight".into(), vec![1, nin], true);
        let bias = push("out.bias".into(), vec![1], false);
        fc.push(FcGeom {
            nin,
            nout: 1,
            weight,
            bias,
        });

        Ok(Self {
            tensors,
            n_params: offset,
            n_bn: bn,
            conv,
            fc,
            features,
            task_mod,
            n_tasks: config.n_tasks,
        })
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorDesc> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.n_params];
        for t in self.tensors.iter().filter(|t| t.decay) {
            mask[t.range()].fill(true);
        }
        mask
    }

    pub fn image_len(&self) -> usize {
        let c = &self.conv[0];
        c.cin * c.h * c.w
    }
}

/// Complete model state: parameters plus batchnorm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSnapshot<S> {
    pub config: ModelConfig,
    pub params: Vec<S>,
    pub bn_mean: Vec<S>,
    pub bn_var: Vec<S>,
}

impl<S: Scalar> WeightSnapshot<S> {
    /// Fan-in scaled uniform weights, zero biases, unit batchnorm scale.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let layout = Layout::new(config)?;
        let mut r = rng::derived_rng(seed, &[rng::tag::INIT]);
        let mut params = vec![S::zero(); layout.n_params];
        for t in &layout.tensors {
            let slot = &mut params[t.range()];
            if t.name.ends_with(".weight") {
                let fan_in: usize = t.shape[1..].iter().product();
                // He-uniform for ReLU layers, plain 1/sqrt(fan_in) for the logit
                let bound = if t.name == "out.weight" {
                    (1.0 / fan_in as f64).sqrt()
                } else {
                    (6.0 / fan_in as f64).sqrt()
                };
                for p in slot.iter_mut() {
                    *p = s(r.gen_range(-bound..bound));
                }
            } else if t.name.ends_with(".gamma") {
                slot.fill(S::one());
            }
        }
        Ok(Self {
            config: config.clone(),
            params,
            bn_mean: vec![S::zero(); layout.n_bn],
            bn_var: vec![S::one(); layout.n_bn],
        })
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.config).expect("snapshot config was validated at construction")
    }

    /// Exponential moving average toward the batch statistics.
    pub fn update_running_stats(&mut self, stats: &BatchStats<S>, momentum: f64) {
        let m: S = s(momentum);
        let keep = S::one() - m;
        for (r, &b) in self.bn_mean.iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.bn_var.iter_mut().zip(&stats.var_unbiased) {
            *r = keep * *r + m * b;
        }
    }

    pub fn cast<T: Scalar>(&self) -> WeightSnapshot<T> {
        let c = |v: &Vec<S>| v.iter().map(|x| T::from_f64(x.to_f64().unwrap()).unwrap()).collect();
        WeightSnapshot {
            config: self.config.clone(),
            params: c(&self.params),
            bn_mean: c(&self.bn_mean),
            bn_var: c(&self.bn_var),
        }
    }
}

/// Stable hex digest of a serializable configuration.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk() -> ModelConfig {
        ModelConfig {
            conv_filters: vec![4, 8],
            fc_widths: vec![32],
            n_tasks: 5,
            input_dims: [3, 16, 16],
            task_mod_layer: Some(2),
            ..ModelConfig::paper(5)
        }
    }

    #[test]
    fn layout_totals() {
        let l = Layout::new(&desk()).unwrap();
        let sum: usize = l.tensors.iter().map(|t| t.len()).sum();
        assert_eq!(sum, l.n_params);
        assert_eq!(l.features, 8 * 4 * 4);
        assert_eq!(l.tensor("taskmod").unwrap().shape, vec![5, 8]);
        assert_eq!(l.tensor("fc1.weight").unwrap().shape, vec![32, 128 + 5]);
        assert_eq!(l.n_bn, 12);
    }

    #[test]
    fn paper_layout() {
        let l = Layout::new(&ModelConfig::paper(30)).unwrap();
        // 120x160 -> 7x10 after four pools
        assert_eq!(l.features, 64 * 7 * 10);
        assert_eq!(l.fc.len(), 5);
    }

    #[test]
    fn invalid_configs() {
        let mut c = desk();
        c.task_mod_layer = Some(3);
        assert!(c.validate().is_err());
        let mut c = desk();
        c.fc_widths.clear();
        assert!(c.validate().is_err());
        let mut c = desk();
        c.kernel = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn decay_mask_covers_weights_only() {
        let l = Layout::new(&desk()).unwrap();
        let mask = l.decay_mask();
        for t in &l.tensors {
            let expect = t.name.ends_with(".weight");
            assert!(mask[t.range()].iter().all(|&m| m == expect), "{}", t.name);
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = WeightSnapshot::<f32>::init(&desk(), 1).unwrap();
        let b = WeightSnapshot::<f32>::init(&desk(), 1).unwrap();
        let c = WeightSnapshot::<f32>::init(&desk(), 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params, c.params);
        let l = a.layout();
        assert!(a.params[l.tensor("taskmod").unwrap().range()].iter().all(|&x| x == 0.0));
    }
}
