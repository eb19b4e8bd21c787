//! Synthetic scenes of colored, textured shapes and the yes/no tasks
//! defined over them.
//!
//! Scenes are symbolic first ([`SceneSpec`]); labels are computed from the
//! symbols, never from pixels. [`render`] turns a scene into an
//! [`ImageTensor`] with a small anti-aliased 2-D rasterizer.

mod dataset;
mod render;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::{Error, Result};

pub use dataset::{assign_epoch_tasks, build_dataset, read_tensors, Dataset, EpochAssignment, Split};
pub use render::{render, ImageTensor};

/// The three visual dimensions a task can query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Shape,
    Color,
    Texture,
}

impl Dimension {
    pub const ALL: [Dimension; 3] = [Dimension::Shape, Dimension::Color, Dimension::Texture];

    pub fn index(self) -> usize {
        match self {
            Dimension::Shape => 0,
            Dimension::Color => 1,
            Dimension::Texture => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Dimension::Shape => "shape",
            Dimension::Color => "color",
            Dimension::Texture => "texture",
        }
    }
}

impl std::fmt::Display for Dimension {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Dimension {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shape" => Ok(Dimension::Shape),
            "color" => Ok(Dimension::Color),
            "texture" => Ok(Dimension::Texture),
            other => Err(Error::Config(format!("unknown dimension '{other}'"))),
        }
    }
}

const SHAPE_NAMES: [&str; 10] = [
    "cube",
    "sphere",
    "cylinder",
    "pyramid",
    "cone",
    "torus",
    "rectangular box",
    "ellipsoid",
    "octahedron",
    "dodecahedron",
];

const COLOR_NAMES: [&str; 10] = [
    "gray", "red", "blue", "green", "brown", "purple", "magenta", "yellow", "orange", "pink",
];

const TEXTURE_NAMES: [&str; 10] = [
    "metal",
    "rubber",
    "chainmail",
    "marble",
    "maze",
    "metal weave",
    "polka dots",
    "rug",
    "bathroom tiles",
    "wooden planks",
];

/// Named feature values for each dimension. Desk-scale catalogs keep the
/// first `V` names of every dimension.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureCatalog {
    values_per_dimension: usize,
}

impl FeatureCatalog {
    pub const MAX_VALUES: usize = 10;

    pub fn paper() -> Self {
        Self {
            values_per_dimension: Self::MAX_VALUES,
        }
    }

    pub fn with_values(values_per_dimension: usize) -> Result<Self> {
        if !(3..=Self::MAX_VALUES).contains(&values_per_dimension) {
            return Err(Error::Config(format!(
                "values per dimension must be in 3..=10, got {values_per_dimension}"
            )));
        }
        Ok(Self {
            values_per_dimension,
        })
    }

    pub fn values_per_dimension(&self) -> usize {
        self.values_per_dimension
    }

    pub fn n_tasks(&self) -> usize {
        3 * self.values_per_dimension
    }

    pub fn value_names(&self, dim: Dimension) -> &'static [&'static str] {
        let all: &'static [&'static str; 10] = match dim {
            Dimension::Shape => &SHAPE_NAMES,
            Dimension::Color => &COLOR_NAMES,
            Dimension::Texture => &TEXTURE_NAMES,
        };
        &all[..self.values_per_dimension]
    }

    pub fn task(&self, dimension: Dimension, value: usize) -> Result<TaskSpec> {
        if value >= self.values_per_dimension {
            return Err(Error::Config(format!(
                "value {value} out of range for {dimension} (V = {})",
                self.values_per_dimension
            )));
        }
        Ok(TaskSpec {
            dimension,
            value,
            global_id: dimension.index() * self.values_per_dimension + value,
        })
    }

    pub fn task_by_id(&self, global_id: usize) -> Result<TaskSpec> {
        let v = self.values_per_dimension;
        let dim = Dimension::from_index(global_id / v)
            .ok_or_else(|| Error::Config(format!("task id {global_id} out of range")))?;
        self.task(dim, global_id % v)
    }

    pub fn all_tasks(&self) -> Vec<TaskSpec> {
        (0..self.n_tasks())
            .map(|id| self.task_by_id(id).expect("id in range"))
            .collect()
    }

    pub fn task_name(&self, task: &TaskSpec) -> String {
        format!("{}={}", task.dimension, self.value_names(task.dimension)[task.value])
    }
}

/// A yes/no question: does the scene contain an object with `value` on `dimension`?
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSpec {
    pub dimension: Dimension,
    pub value: usize,
    pub global_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape_id: usize,
    pub color_id: usize,
    pub texture_id: usize,
    /// Center in pixel units, (x, y).
    pub center: [f64; 2],
    pub radius: f64,
}

impl ObjectSpec {
    pub fn value(&self, dim: Dimension) -> usize {
        match dim {
            Dimension::Shape => self.shape_id,
            Dimension::Color => self.color_id,
            Dimension::Texture => self.texture_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
    pub seed: u64,
}

impl SceneSpec {
    /// Bit `global_id` is set iff the scene answers "yes" to that task.
    pub fn task_mask(&self, values_per_dimension: usize) -> u64 {
        let mut mask = 0u64;
        for obj in &self.objects {
            for dim in Dimension::ALL {
                mask |= 1 << (dim.index() * values_per_dimension + obj.value(dim));
            }
        }
        mask
    }
}

/// Scene generation and rendering parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub width: usize,
    pub height: usize,
    pub values_per_dimension: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object radius bounds as fractions of image height.
    pub radius_min_frac: f64,
    pub radius_max_frac: f64,
    pub max_placement_retries: usize,
    /// Anti-aliasing subsamples per pixel side.
    pub supersample: usize,
    pub background: [f32; 3],
    /// One RGB triple per color value, in catalog order.
    pub palette: Vec<[f32; 3]>,
    /// Allowed relative deviation of per-value usage from the uniform share.
    pub balance_tolerance: f64,
    /// Target band for each task's positive fraction within an epoch.
    pub positive_band: [f64; 2],
    /// Fail instead of reporting when the band cannot be met.
    pub strict_positive_band: bool,
    /// Fill task quotas alternately from positive and negative pools. When
    /// off, images are partitioned among tasks uniformly at random.
    #[serde(default = "yes")]
    pub stratify: bool,
}

fn yes() -> bool {
    true
}

pub fn default_palette() -> Vec<[f32; 3]> {
    vec![
        [0.50, 0.50, 0.50], // gray
        [0.90, 0.08, 0.08], // red
        [0.10, 0.25, 0.95], // blue
        [0.10, 0.75, 0.20], // green
        [0.55, 0.32, 0.10], // brown
        [0.50, 0.12, 0.70], // purple
        [0.95, 0.10, 0.85], // magenta
        [0.95, 0.90, 0.10], // yellow
        [1.00, 0.55, 0.00], // orange
        [1.00, 0.68, 0.78], // pink
    ]
}

impl GenConfig {
    pub fn paper() -> Self {
        Self {
            width: 160,
            height: 120,
            values_per_dimension: 10,
            min_objects: 4,
            max_objects: 5,
            radius_min_frac: 0.08,
            radius_max_frac: 0.14,
            max_placement_retries: 1000,
            supersample: 4,
            background: [0.08, 0.08, 0.08],
            palette: default_palette(),
            balance_tolerance: 0.05,
            positive_band: [0.4, 0.6],
            strict_positive_band: true,
            stratify: true,
        }
    }

    pub fn catalog(&self) -> Result<FeatureCatalog> {
        FeatureCatalog::with_values(self.values_per_dimension)
    }

    pub fn validate(&self) -> Result<()> {
        let cat = self.catalog()?;
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("image width and height must be positive".into()));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config("min_objects exceeds max_objects".into()));
        }
        if self.max_objects > cat.values_per_dimension() {
            return Err(Error::Infeasible(format!(
                "{} objects cannot have distinct values with only {} values per dimension",
                self.max_objects,
                cat.values_per_dimension()
            )));
        }
        if !(self.radius_min_frac > 0.0 && self.radius_min_frac <= self.radius_max_frac) {
            return Err(Error::Config("radius fractions must satisfy 0 < min <= max".into()));
        }
        if 2.0 * self.radius_max_frac * self.height as f64 > self.width.min(self.height) as f64 {
            return Err(Error::Config("maximum object diameter exceeds the image".into()));
        }
        if self.palette.len() < cat.values_per_dimension() {
            return Err(Error::Config(format!(
                "palette has {} colors, need {}",
                self.palette.len(),
                cat.values_per_dimension()
            )));
        }
        let [lo, hi] = self.positive_band;
        if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
            return Err(Error::Config("positive_band must satisfy 0 <= lo <= hi <= 1".into()));
        }
        if self.supersample == 0 {
            return Err(Error::Config("supersample must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-dimension, per-value object counts accumulated while building a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct ValueUsage {
    pub counts: [Vec<u64>; 3],
}

impl ValueUsage {
    pub fn new(v: usize) -> Self {
        Self {
            counts: [vec![0; v], vec![0; v], vec![0; v]],
        }
    }

    pub fn record(&mut self, scene: &SceneSpec) {
        for obj in &scene.objects {
            for dim in Dimension::ALL {
                self.counts[dim.index()][obj.value(dim)] += 1;
            }
        }
    }
}

/// Samples a scene whose object values are uniform over distinct subsets.
pub fn sample_scene(seed: u64, config: &GenConfig) -> Result<SceneSpec> {
    sample_scene_inner(seed, config, None)
}

/// With `usage`, values are drawn preferring the least used ones, which
/// keeps dataset-wide feature counts close to uniform.
pub(crate) fn sample_scene_inner(
    seed: u64,
    config: &GenConfig,
    usage: Option<&ValueUsage>,
) -> Result<SceneSpec> {
    config.validate()?;
    let v = config.values_per_dimension;
    let mut rng = rng::rng_from(seed);
    let n_objects = rng.gen_range(config.min_objects..=config.max_objects);

    let mut picks: [Vec<usize>; 3] = Default::default();
    for dim in Dimension::ALL {
        let mut values: Vec<usize> = (0..v).collect();
        match usage {
            None => values.shuffle(&mut rng),
            Some(u) => {
                // Least used first; jitter < 1 only breaks ties randomly.
                let counts = &u.counts[dim.index()];
                let mut keyed: Vec<(f64, usize)> = values
                    .iter()
                    .map(|&val| (counts[val] as f64 + rng.gen::<f64>() * 0.999, val))
                    .collect();
                keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
                values = keyed.into_iter().map(|(_, val)| val).collect();
            }
        }
        values.truncate(n_objects);
        // Decouple which values co-occur on one object from usage order.
        values.shuffle(&mut rng);
        picks[dim.index()] = values;
    }

    let (w, h) = (config.width as f64, config.height as f64);
    let mut failed_at = 0;
    for _ in 0..LAYOUT_RESTARTS {
        match place_objects(&mut rng, config, &picks, n_objects, w, h) {
            Ok(objects) => return Ok(SceneSpec { objects, seed }),
            Err(i) => failed_at = i,
        }
    }
    Err(Error::Infeasible(format!(
        "could not place object {failed_at} without overlap after {} retries in {LAYOUT_RESTARTS} layouts",
        config.max_placement_retries
    )))
}

const LAYOUT_RESTARTS: usize = 20;

// Err carries the index of the object that found no free spot.
fn place_objects(
    rng: &mut rng::Rng,
    config: &GenConfig,
    picks: &[Vec<usize>; 3],
    n_objects: usize,
    w: f64,
    h: f64,
) -> std::result::Result<Vec<ObjectSpec>, usize> {
    let mut objects: Vec<ObjectSpec> = Vec::with_capacity(n_objects);
    for i in 0..n_objects {
        let mut placed = false;
        for _ in 0..config.max_placement_retries {
            let radius = rng.gen_range(config.radius_min_frac..=config.radius_max_frac) * h;
            let cx = rng.gen_range(radius..=(w - radius));
            let cy = rng.gen_range(radius..=(h - radius));
            let clear = objects.iter().all(|o| {
                let (dx, dy) = (o.center[0] - cx, o.center[1] - cy);
                (dx * dx + dy * dy).sqrt() >= o.radius + radius + 0.5
            });
            if clear {
                objects.push(ObjectSpec {
                    shape_id: picks[0][i],
                    color_id: picks[1][i],
                    texture_id: picks[2][i],
                    center: [cx, cy],
                    radius,
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(i);
        }
    }
    Ok(objects)
}

/// True iff some object carries `task.value` on `task.dimension`.
pub fn label(scene: &SceneSpec, task: &TaskSpec) -> bool {
    scene
        .objects
        .iter()
        .any(|o| o.value(task.dimension) == task.value)
}
