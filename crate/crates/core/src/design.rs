//! Replication plans: Latin-square task orders within a dimension and
//! dimension-cycled heterogeneous sequences.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::curriculum::CurriculumKind;
use crate::rng::{derive_seed, derived_rng, tag};
use crate::scenegen::{Dimension, FeatureCatalog};
use crate::{Error, Result};

/// An `n × n` array of symbols `0..n`; row `r` is the order used by the
/// `r`-th replication of a block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatinBlock {
    pub orders: Vec<Vec<usize>>,
}

impl LatinBlock {
    pub fn n(&self) -> usize {
        self.orders.len()
    }

    /// Every row is a permutation and every symbol occupies each position once.
    pub fn is_latin(&self) -> bool {
        let n = self.n();
        let mut col_seen = vec![vec![false; n]; n];
        for row in &self.orders {
            if row.len() != n {
                return false;
            }
            let mut row_seen = vec![false; n];
            for (pos, &s) in row.iter().enumerate() {
                if s >= n || row_seen[s] || col_seen[pos][s] {
                    return false;
                }
                row_seen[s] = true;
                col_seen[pos][s] = true;
            }
        }
        true
    }
}

/// Cyclic square with shuffled rows, columns and symbols.
pub fn latin_square(n: usize, seed: u64) -> LatinBlock {
    let mut r = derived_rng(seed, &[tag::PLAN]);
    let mut rows: Vec<usize> = (0..n).collect();
    let mut cols: Vec<usize> = (0..n).collect();
    let mut syms: Vec<usize> = (0..n).collect();
    rows.shuffle(&mut r);
    cols.shuffle(&mut r);
    syms.shuffle(&mut r);
    let orders = rows
        .iter()
        .map(|&i| cols.iter().map(|&j| syms[(i + j) % n]).collect())
        .collect();
    LatinBlock { orders }
}

/// Training-regime settings shared by every run of a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunVariant {
    pub curriculum: CurriculumKind,
    #[serde(default)]
    pub task_mod_layer: Option<usize>,
    #[serde(default)]
    pub maml: bool,
}

impl Default for RunVariant {
    fn default() -> Self {
        RunVariant {
            curriculum: CurriculumKind::Balanced,
            task_mod_layer: None,
            maml: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub run_id: String,
    /// One dimension for homogeneous runs; the cycling order for heterogeneous ones.
    pub dimensions: Vec<Dimension>,
    /// Global task ids in training order.
    pub order: Vec<usize>,
    pub block: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub variant: RunVariant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationPlan {
    pub master_seed: u64,
    pub values_per_dimension: usize,
    pub runs: Vec<RunSpec>,
}

const HOMOGENEOUS: u64 = 0;
const HETEROGENEOUS: u64 = 1;

/// `n_blocks` Latin blocks over the values of one dimension.
pub fn homogeneous_plan(
    catalog: &FeatureCatalog,
    dimension: Dimension,
    n_blocks: usize,
    master_seed: u64,
    variant: &RunVariant,
) -> Result<ReplicationPlan> {
    let v = catalog.values_per_dimension();
    let d = dimension.index() as u64;
    let mut runs = Vec::with_capacity(n_blocks * v);
    for block in 0..n_blocks {
        let square = latin_square(v, derive_seed(master_seed, &[tag::PLAN, HOMOGENEOUS, d, block as u64]));
        for (row, order) in square.orders.iter().enumerate() {
            let order = order
                .iter()
                .map(|&value| catalog.task(dimension, value).map(|t| t.global_id))
                .collect::<Result<Vec<_>>>()?;
            runs.push(RunSpec {
                run_id: format!("{dimension}-b{block}-r{row}"),
                dimensions: vec![dimension],
                order,
                block,
                seed: derive_seed(master_seed, &[tag::RUN, HOMOGENEOUS, d, block as u64, row as u64]),
                variant: variant.clone(),
            });
        }
    }
    Ok(ReplicationPlan {
        master_seed,
        values_per_dimension: v,
        runs,
    })
}

/// Homogeneous plans for every dimension, concatenated.
pub fn homogeneous_design(
    catalog: &FeatureCatalog,
    n_blocks: usize,
    master_seed: u64,
    variant: &RunVariant,
) -> Result<ReplicationPlan> {
    let mut runs = Vec::new();
    for dim in Dimension::ALL {
        runs.extend(homogeneous_plan(catalog, dim, n_blocks, master_seed, variant)?.runs);
    }
    Ok(ReplicationPlan {
        master_seed,
        values_per_dimension: catalog.values_per_dimension(),
        runs,
    })
}

/// Cycles through `dims`, drawing the next unused value of each dimension
/// from its order in `per_dim_orders` (indexed by dimension).
pub fn heterogeneous_sequence(
    catalog: &FeatureCatalog,
    dims: [Dimension; 3],
    per_dim_orders: &[Vec<usize>; 3],
    length: usize,
) -> Result<Vec<usize>> {
    let mut seen = [false; 3];
    for d in dims {
        if std::mem::replace(&mut seen[d.index()], true) {
            return Err(Error::Config(format!("{dims:?} is not a permutation of the dimensions")));
        }
    }
    let mut used = [0usize; 3];
    let mut out = Vec::with_capacity(length);
    for p in 0..length {
        let d = dims[p % 3];
        let order = &per_dim_orders[d.index()];
        let value = *order.get(used[d.index()]).ok_or_else(|| {
            Error::Config(format!("order for {d} has only {} tasks", order.len()))
        })?;
        used[d.index()] += 1;
        out.push(catalog.task(d, value)?.global_id);
    }
    let mut dedup = out.clone();
    dedup.sort_unstable();
    dedup.dedup();
    if dedup.len() != out.len() {
        return Err(Error::Config("per-dimension order repeats a task".into()));
    }
    Ok(out)
}

/// All six orderings of the three dimensions.
pub fn dimension_permutations() -> Vec<[Dimension; 3]> {
    let [a, b, c] = Dimension::ALL;
    vec![[a, b, c], [a, c, b], [b, a, c], [b, c, a], [c, a, b], [c, b, a]]
}

/// `n_blocks` blocks of six runs, each block using every dimension
/// permutation once in shuffled order. Within-dimension tasks come from a
/// stream of Latin squares per dimension: run `j` takes row `j mod V` of
/// that dimension's current square, so every value of a dimension visits
/// each within-dimension position once per `V` runs.
pub fn heterogeneous_plan(
    catalog: &FeatureCatalog,
    length: usize,
    n_blocks: usize,
    master_seed: u64,
    variant: &RunVariant,
) -> Result<ReplicationPlan> {
    let v = catalog.values_per_dimension();
    if length > 3 * v {
        return Err(Error::Config(format!("sequence of {length} exceeds the {} tasks available", 3 * v)));
    }
    let perms = dimension_permutations();
    let mut runs = Vec::with_capacity(6 * n_blocks);
    let mut squares: [Option<LatinBlock>; 3] = [None, None, None];
    for block in 0..n_blocks {
        let mut order: Vec<usize> = (0..6).collect();
        order.shuffle(&mut derived_rng(master_seed, &[tag::PLAN, HETEROGENEOUS, block as u64]));
        for (slot, &pi) in order.iter().enumerate() {
            let j = block * 6 + slot;
            let rows: [Vec<usize>; 3] = std::array::from_fn(|d| {
                if j % v == 0 {
                    let seed = derive_seed(master_seed, &[tag::PLAN, HETEROGENEOUS, 3 + d as u64, (j / v) as u64]);
                    squares[d] = Some(latin_square(v, seed));
                }
                squares[d].as_ref().expect("square drawn at row 0").orders[j % v].clone()
            });
            let dims = perms[pi];
            runs.push(RunSpec {
                run_id: format!("het-b{block}-r{slot}"),
                dimensions: dims.to_vec(),
                order: heterogeneous_sequence(catalog, dims, &rows, length)?,
                block,
                seed: derive_seed(master_seed, &[tag::RUN, HETEROGENEOUS, block as u64, slot as u64]),
                variant: variant.clone(),
            });
        }
    }
    Ok(ReplicationPlan {
        master_seed,
        values_per_dimension: v,
        runs,
    })
}

#[derive(Serialize)]
struct PlanRow<'a> {
    run_id: &'a str,
    dimension: Dimension,
    position: usize,
    task_id: usize,
    seed: u64,
}

impl ReplicationPlan {
    /// One row per (run, position); positions are 1-based.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let catalog = FeatureCatalog::with_values(self.values_per_dimension)?;
        let mut w = csv::Writer::from_writer(out);
        for run in &self.runs {
            for (p, &task_id) in run.order.iter().enumerate() {
                w.serialize(PlanRow {
                    run_id: &run.run_id,
                    dimension: catalog.task_by_id(task_id)?.dimension,
                    position: p + 1,
                    task_id,
                    seed: run.seed,
                })?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
