//! Forgetting-curve fits, split-sample model comparison, replication metrics
//! and figure data.
//!
//! Accuracy `a` maps to memory strength `m = clamp(2a - 1, 0, 1)`. Two decay
//! families are fitted by unweighted least squares in strength space:
//! exponential `m = α e^{-βt}` and power `m = α (1 + γt)^{-β}`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{ProbeRecord, TrialLog};
use crate::{Error, Result};

pub const ALPHA_MAX: f64 = 1.05;
pub const BETA_RANGE: (f64, f64) = (1e-5, 10.0);
pub const GAMMA_RANGE: (f64, f64) = (1e-4, 10.0);
/// Reported for the power family when the timescale cannot be identified.
pub const GAMMA_DEFAULT: f64 = 1.0;
const BETA_GRID: usize = 241;
const GAMMA_GRID: usize = 81;
const REL_TOL: f64 = 1e-6;

pub fn strength_transform(accuracy: &[f64]) -> Vec<f64> {
    accuracy.iter().map(|&a| (2.0 * a - 1.0).clamp(0.0, 1.0)).collect()
}

pub fn accuracy_from_strength(m: f64) -> f64 {
    0.5 + 0.5 * m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Exponential,
    Power,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Exponential => "exponential",
            Family::Power => "power",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingFit {
    pub family: Family,
    pub alpha: f64,
    pub beta: f64,
    /// Power family only.
    pub gamma: Option<f64>,
    pub train_mse: f64,
    /// Set by split-sample evaluation.
    pub eval_mse: Option<f64>,
    /// The series was constant; no decay was fitted.
    pub degenerate: bool,
}

impl ForgettingFit {
    pub fn predict(&self, t: f64) -> f64 {
        match self.family {
            Family::Exponential => self.alpha * (-self.beta * t).exp(),
            Family::Power => self.alpha * (1.0 + self.gamma.unwrap_or(GAMMA_DEFAULT) * t).powf(-self.beta),
        }
    }

    pub fn mse(&self, t: &[f64], m: &[f64]) -> f64 {
        let sse: f64 = t.iter().zip(m).map(|(&t, &m)| (self.predict(t) - m).powi(2)).sum();
        sse / t.len() as f64
    }
}

fn check_series(t: &[f64], m: &[f64], min: usize) -> Result<()> {
    if t.len() != m.len() {
        return Err(Error::Degenerate(format!("{} times but {} values", t.len(), m.len())));
    }
    if t.len() < min {
        return Err(Error::Degenerate(format!("need at least {min} points, got {}", t.len())));
    }
    if t.iter().chain(m).any(|x| !x.is_finite()) || t.iter().any(|&x| x < 0.0) {
        return Err(Error::Degenerate("times must be finite and non-negative, values finite".into()));
    }
    Ok(())
}

fn is_constant(m: &[f64]) -> bool {
    m.iter().all(|&x| (x - m[0]).abs() <= 1e-12)
}

/// Optimal bounded α for fixed β, and the resulting sum of squares.
fn alpha_for(u: &[f64], m: &[f64], beta: f64) -> (f64, f64) {
    let e: Vec<f64> = u.iter().map(|&u| (-beta * u).exp()).collect();
    let num: f64 = e.iter().zip(m).map(|(e, m)| e * m).sum();
    let den: f64 = e.iter().map(|e| e * e).sum();
    let alpha = if den > 0.0 { (num / den).clamp(0.0, ALPHA_MAX) } else { 0.0 };
    let sse = e.iter().zip(m).map(|(e, m)| (alpha * e - m).powi(2)).sum();
    (alpha, sse)
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

/// Golden-section minimum of `f` on `[lo, hi]`, stopping when the bracket
/// is within `REL_TOL` of its midpoint.
fn golden(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - r * (hi - lo);
    let mut x2 = lo + r * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..200 {
        if hi - lo <= REL_TOL * 0.5 * (lo.abs() + hi.abs()) {
            break;
        }
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - r * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + r * (hi - lo);
            f2 = f(x2);
        }
    }
    if f1 <= f2 {
        x1
    } else {
        x2
    }
}

/// Grid then golden-section search over a log-spaced parameter; the
/// refinement runs in log space between the best point's neighbours.
fn grid_refine(grid: &[f64], f: impl Fn(f64) -> f64) -> (f64, f64) {
    let vals: Vec<f64> = grid.iter().map(|&x| f(x)).collect();
    let best = (0..grid.len()).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).expect("non-empty grid");
    let lo = grid[best.saturating_sub(1)].ln();
    let hi = grid[(best + 1).min(grid.len() - 1)].ln();
    let x = golden(lo, hi, |l| f(l.exp())).exp();
    let fx = f(x);
    if fx <= vals[best] {
        (x, fx)
    } else {
        (grid[best], vals[best])
    }
}

/// (α, β, sse) of the exponential fit on (u, m).
fn exp_core(u: &[f64], m: &[f64]) -> (f64, f64, f64) {
    let (b, sse) = grid_refine(&log_grid(BETA_RANGE.0, BETA_RANGE.1, BETA_GRID), |b| alpha_for(u, m, b).1);
    let (a0, sse0) = alpha_for(u, m, 0.0);
    if sse0 <= sse {
        return (a0, 0.0, sse0);
    }
    let (a, _) = alpha_for(u, m, b);
    (a, b, sse)
}

pub fn fit_exponential(t: &[f64], m: &[f64]) -> Result<ForgettingFit> {
    check_series(t, m, 3)?;
    let n = t.len() as f64;
    if is_constant(m) {
        return Ok(ForgettingFit {
            family: Family::Exponential,
            alpha: m[0].clamp(0.0, ALPHA_MAX),
            beta: 0.0,
            gamma: None,
            train_mse: 0.0,
            eval_mse: None,
            degenerate: true,
        });
    }
    let (alpha, beta, sse) = exp_core(t, m);
    Ok(ForgettingFit {
        family: Family::Exponential,
        alpha,
        beta,
        gamma: None,
        train_mse: sse / n,
        eval_mse: None,
        degenerate: false,
    })
}

pub fn fit_power(t: &[f64], m: &[f64]) -> Result<ForgettingFit> {
    check_series(t, m, 3)?;
    let n = t.len() as f64;
    if is_constant(m) {
        return Ok(ForgettingFit {
            family: Family::Power,
            alpha: m[0].clamp(0.0, ALPHA_MAX),
            beta: 0.0,
            gamma: Some(GAMMA_DEFAULT),
            train_mse: 0.0,
            eval_mse: None,
            degenerate: true,
        });
    }
    let profile = |g: f64| {
        let u: Vec<f64> = t.iter().map(|&t| (g * t).ln_1p()).collect();
        exp_core(&u, m)
    };
    let (gamma, _) = grid_refine(&log_grid(GAMMA_RANGE.0, GAMMA_RANGE.1, GAMMA_GRID), |g| profile(g).2);
    let (alpha, beta, sse) = profile(gamma);
    Ok(ForgettingFit {
        family: Family::Power,
        alpha,
        beta,
        gamma: Some(if beta == 0.0 { GAMMA_DEFAULT } else { gamma }),
        train_mse: sse / n,
        eval_mse: None,
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitComparison {
    pub exponential: ForgettingFit,
    pub power: ForgettingFit,
    /// Lower holdout MSE; ties go to the exponential family.
    pub winner: Family,
}

/// Fits both families to the first `⌈n/2⌉` of the first `n` points and
/// scores them on the rest. `n` defaults to the whole series.
pub fn split_fit_evaluate(t: &[f64], m: &[f64], n: Option<usize>) -> Result<SplitComparison> {
    let n = n.unwrap_or(t.len()).min(t.len()).min(m.len());
    let (t, m) = (&t[..n], &m[..n]);
    check_series(t, m, 6)?;
    let h = n.div_ceil(2);
    let mut exponential = fit_exponential(&t[..h], &m[..h])?;
    let mut power = fit_power(&t[..h], &m[..h])?;
    exponential.eval_mse = Some(exponential.mse(&t[h..], &m[h..]));
    power.eval_mse = Some(power.mse(&t[h..], &m[h..]));
    let winner = if power.eval_mse < exponential.eval_mse {
        Family::Power
    } else {
        Family::Exponential
    };
    Ok(SplitComparison {
        exponential,
        power,
        winner,
    })
}

/// Probe series keyed by (run_id, probe_episode, old_task), sorted by time.
pub fn probe_series(records: &[ProbeRecord]) -> BTreeMap<(String, usize, usize), Vec<(usize, f64)>> {
    let mut out: BTreeMap<_, Vec<(usize, f64)>> = BTreeMap::new();
    for r in records {
        out.entry((r.run_id.clone(), r.probe_episode, r.old_task))
            .or_default()
            .push((r.batches_elapsed, r.accuracy));
    }
    for s in out.values_mut() {
        s.sort_by_key(|p| p.0);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRow {
    pub run_id: String,
    pub probe_episode: usize,
    pub task: usize,
    pub family: Family,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: Option<f64>,
    pub train_mse: f64,
    pub eval_mse: Option<f64>,
    pub winner: Family,
}

/// Split-sample fits of every probe series, two rows (one per family) each.
pub fn fit_probes(records: &[ProbeRecord]) -> Result<Vec<FitRow>> {
    let mut rows = Vec::new();
    for ((run_id, probe_episode, task), series) in probe_series(records) {
        let t: Vec<f64> = series.iter().map(|p| p.0 as f64).collect();
        let m = strength_transform(&series.iter().map(|p| p.1).collect::<Vec<_>>());
        let c = split_fit_evaluate(&t, &m, None)?;
        for f in [&c.exponential, &c.power] {
            rows.push(FitRow {
                run_id: run_id.clone(),
                probe_episode,
                task,
                family: f.family,
                alpha: f.alpha,
                beta: f.beta,
                gamma: f.gamma,
                train_mse: f.train_mse,
                eval_mse: f.eval_mse,
                winner: c.winner,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilySummary {
    pub family: Family,
    pub wins: usize,
    pub mean_train_mse: f64,
    pub mean_eval_mse: f64,
}

/// Winner counts and mean errors per family over fit rows.
pub fn compare_families(rows: &[FitRow]) -> Vec<FamilySummary> {
    [Family::Exponential, Family::Power]
        .into_iter()
        .map(|family| {
            let own: Vec<&FitRow> = rows.iter().filter(|r| r.family == family).collect();
            let n = own.len().max(1) as f64;
            FamilySummary {
                family,
                wins: own.iter().filter(|r| r.winner == family).count(),
                mean_train_mse: sorted_sum(own.iter().map(|r| r.train_mse)) / n,
                mean_eval_mse: sorted_sum(own.iter().map(|r| r.eval_mse.unwrap_or(0.0))) / n,
            }
        })
        .collect()
}

fn sorted_sum(xs: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = xs.collect();
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// Mean and standard error of the mean (`None` below two samples).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub sem: Option<f64>,
}

/// Order-independent: values are sorted before summation.
pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let mean = v.iter().sum::<f64>() / n as f64;
    let sem = (n >= 2).then(|| {
        let mut d: Vec<f64> = v.iter().map(|x| (x - mean).powi(2)).collect();
        d.sort_by(f64::total_cmp);
        (d.iter().sum::<f64>() / (n - 1) as f64).sqrt() / (n as f64).sqrt()
    });
    Some(Summary { n, mean, sem })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub position: usize,
    pub times_trained: usize,
    pub trials: Option<Summary>,
    pub accuracy_at_budget: Option<Summary>,
}

/// Least-squares line through `(ln x, ln y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLogFit {
    pub position: usize,
    pub n_points: usize,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub config_hash: String,
    pub n_logs: usize,
    pub cells: Vec<MetricCell>,
    /// Trials-to-criterion against times trained, one curve per position.
    pub curves: Vec<LogLogFit>,
}

pub fn loglog_fit(x: &[f64], y: &[f64]) -> Option<(f64, f64, f64)> {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(&x, &y)| x > 0.0 && y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some((slope, my - slope * mx, r2))
}

/// Per (position, times trained) means and SEMs across replications.
pub fn aggregate_metrics(logs: &[TrialLog]) -> Result<MetricTable> {
    let first = logs.first().ok_or_else(|| Error::MixedConfig("no logs to aggregate".into()))?;
    if let Some(other) = logs.iter().find(|l| l.config_hash != first.config_hash) {
        return Err(Error::MixedConfig(format!(
            "run {} has config {}, run {} has {}",
            first.run_id, first.config_hash, other.run_id, other.config_hash
        )));
    }
    let mut by_cell: BTreeMap<(usize, usize), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for log in logs {
        for c in &log.cells {
            let e = by_cell.entry((c.position, c.times_trained)).or_default();
            if let Some(t) = c.trials_to_criterion {
                e.0.push(t as f64);
            }
            e.1.push(c.accuracy_at_budget);
        }
    }
    let cells: Vec<MetricCell> = by_cell
        .into_iter()
        .map(|((position, times_trained), (t, a))| MetricCell {
            position,
            times_trained,
            trials: summarize(&t),
            accuracy_at_budget: summarize(&a),
        })
        .collect();
    let mut curves = Vec::new();
    let positions: std::collections::BTreeSet<usize> = cells.iter().map(|c| c.position).collect();
    for p in positions {
        let (x, y): (Vec<f64>, Vec<f64>) = cells
            .iter()
            .filter(|c| c.position == p)
            .filter_map(|c| c.trials.map(|s| (c.times_trained as f64, s.mean)))
            .unzip();
        if let Some((slope, intercept, r2)) = loglog_fit(&x, &y) {
            curves.push(LogLogFit {
                position: p,
                n_points: x.len(),
                slope,
                intercept,
                r2,
            });
        }
    }
    Ok(MetricTable {
        config_hash: first.config_hash.clone(),
        n_logs: logs.len(),
        cells,
        curves,
    })
}

#[derive(Serialize)]
struct MetricRow {
    position: usize,
    times_trained: usize,
    n_trials: usize,
    trials_mean: Option<f64>,
    trials_sem: Option<f64>,
    n_accuracy: usize,
    accuracy_mean: Option<f64>,
    accuracy_sem: Option<f64>,
}

pub fn write_metric_table<W: Write>(out: W, table: &MetricTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for c in &table.cells {
        w.serialize(MetricRow {
            position: c.position,
            times_trained: c.times_trained,
            n_trials: c.trials.map_or(0, |s| s.n),
            trials_mean: c.trials.map(|s| s.mean),
            trials_sem: c.trials.and_then(|s| s.sem),
            n_accuracy: c.accuracy_at_budget.map_or(0, |s| s.n),
            accuracy_mean: c.accuracy_at_budget.map(|s| s.mean),
            accuracy_sem: c.accuracy_at_budget.and_then(|s| s.sem),
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_curves<W: Write>(out: W, table: &MetricTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for c in &table.curves {
        w.serialize(c)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_fits<W: Write>(out: W, rows: &[FitRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// A table of numbers destined for one CSV file and one SVG plot.
#[derive(Debug, Clone, PartialEq)]
pub struct FigureData {
    pub name: String,
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    /// Column distinguishing plotted lines, if any.
    pub series: Option<usize>,
    pub x: usize,
    pub y: usize,
    pub log_x: bool,
    pub log_y: bool,
}

impl FigureData {
    fn new(name: &str, title: &str, columns: &[&str], (x, y): (usize, usize), series: Option<usize>) -> Self {
        Self {
            name: name.into(),
            title: title.into(),
            columns: columns.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
            series,
            x,
            y,
            log_x: false,
            log_y: false,
        }
    }

    fn logs(mut self, log_x: bool, log_y: bool) -> Self {
        self.log_x = log_x;
        self.log_y = log_y;
        self
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.columns)?;
        for r in &self.rows {
            w.write_record(r.iter().map(|v| if v.is_nan() { String::new() } else { v.to_string() }))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Line plot of column `y` against `x`, one line per distinct `series` value.
    pub fn to_svg(&self) -> String {
        svg_plot(self)
    }
}

fn opt(x: Option<f64>) -> f64 {
    x.unwrap_or(f64::NAN)
}

/// Within-episode trials of every evaluation record, keyed by log position.
fn within_episode(log: &TrialLog) -> Vec<(usize, usize, u64, f64)> {
    let mut start: BTreeMap<usize, u64> = BTreeMap::new();
    let mut last: BTreeMap<usize, u64> = BTreeMap::new();
    let mut current = 0;
    let mut out = Vec::new();
    for r in &log.records {
        if r.episode != current {
            current = r.episode;
            start = last.clone();
        }
        let Some(pos) = log.order.iter().position(|&t| t == r.task) else {
            continue;
        };
        let base = start.get(&r.task).copied().unwrap_or(0);
        out.push((r.episode, pos + 1, r.cumulative_task_trials - base, r.holdout_accuracy));
        last.insert(r.task, r.cumulative_task_trials);
    }
    out
}

fn summary_rows(groups: BTreeMap<Vec<u64>, Vec<f64>>) -> Vec<Vec<f64>> {
    groups
        .into_iter()
        .filter_map(|(k, v)| {
            let s = summarize(&v)?;
            let mut row: Vec<f64> = k.iter().map(|&x| x as f64).collect();
            row.extend([s.mean, opt(s.sem), s.n as f64]);
            Some(row)
        })
        .collect()
}

/// Figure-data tables for the learning, forgetting and fit figures. Fitting
/// tables are included when `fits` is non-empty.
pub fn figure_data(logs: &[TrialLog], probes: &[ProbeRecord], fits: &[FitRow]) -> Result<Vec<FigureData>> {
    let table = aggregate_metrics(logs)?;
    let mut figs = Vec::new();

    let mut a: BTreeMap<Vec<u64>, Vec<f64>> = BTreeMap::new();
    let mut b: BTreeMap<Vec<u64>, Vec<f64>> = BTreeMap::new();
    for log in logs {
        for (episode, pos, trials, acc) in within_episode(log) {
            if episode == pos {
                a.entry(vec![pos as u64, trials]).or_default().push(acc);
            }
            if pos == 1 {
                b.entry(vec![episode as u64, trials]).or_default().push(acc);
            }
        }
    }
    let mut f = FigureData::new(
        "fig3a_new_task_accuracy",
        "Holdout accuracy of a newly introduced task",
        &["position", "trials", "accuracy_mean", "accuracy_sem", "n"],
        (1, 2),
        Some(0),
    )
    .logs(true, false);
    f.rows = summary_rows(a);
    figs.push(f);
    let mut f = FigureData::new(
        "fig3b_task1_retraining",
        "Holdout accuracy of task 1 by times trained",
        &["times_trained", "trials", "accuracy_mean", "accuracy_sem", "n"],
        (1, 2),
        Some(0),
    )
    .logs(true, false);
    f.rows = summary_rows(b);
    figs.push(f);

    let cell_rows = |pick: &dyn Fn(&MetricCell) -> Option<Summary>, new_only: bool| -> Vec<Vec<f64>> {
        table
            .cells
            .iter()
            .filter(|c| !new_only || c.times_trained == 1)
            .filter_map(|c| {
                let s = pick(c)?;
                Some(vec![c.position as f64, c.times_trained as f64, s.mean, opt(s.sem), s.n as f64])
            })
            .collect()
    };
    let cols = ["position", "times_trained", "mean", "sem", "n"];
    for (name, title, new_only, trials) in [
        ("fig3c_trials_to_criterion", "Trials to criterion by times trained", false, true),
        ("fig3d_new_task_trials", "Trials to criterion for the new task by episode", true, true),
        ("fig3e_accuracy_at_budget", "Accuracy after the trial budget by times trained", false, false),
        ("fig3f_new_task_accuracy_at_budget", "Accuracy after the trial budget for the new task", true, false),
    ] {
        let pick: &dyn Fn(&MetricCell) -> Option<Summary> = if trials { &|c| c.trials } else { &|c| c.accuracy_at_budget };
        let (x, series) = if new_only { (0, None) } else { (1, Some(0)) };
        let mut f = FigureData::new(name, title, &cols, (x, 2), series).logs(!new_only, trials);
        f.rows = cell_rows(pick, new_only);
        figs.push(f);
    }

    if !probes.is_empty() {
        let position_of = |run: &str, task: usize| -> Option<usize> {
            let log = logs.iter().find(|l| l.run_id == run)?;
            log.order.iter().position(|&t| t == task).map(|p| p + 1)
        };
        let mut g: BTreeMap<Vec<u64>, Vec<f64>> = BTreeMap::new();
        for r in probes {
            if position_of(&r.run_id, r.old_task) == Some(1) {
                g.entry(vec![(r.probe_episode - 1) as u64, r.batches_elapsed as u64])
                    .or_default()
                    .push(r.accuracy);
            }
        }
        let mut f = FigureData::new(
            "fig4a_task1_forgetting",
            "Residual accuracy of task 1 while a new task is trained",
            &["times_trained", "batches", "accuracy_mean", "accuracy_sem", "n"],
            (1, 2),
            Some(0),
        );
        f.rows = summary_rows(g);
        figs.push(f);

        let mut d: BTreeMap<Vec<u64>, Vec<f64>> = BTreeMap::new();
        for r in fits.iter().filter(|r| r.family == Family::Exponential) {
            if let Some(p) = position_of(&r.run_id, r.task) {
                d.entry(vec![(r.probe_episode - p) as u64]).or_default().push(r.beta);
            }
        }
        let mut f = FigureData::new(
            "fig4b_decay_rate",
            "Fitted exponential decay rate by times trained",
            &["times_trained", "beta_mean", "beta_sem", "n"],
            (0, 1),
            None,
        );
        f.rows = summary_rows(d);
        figs.push(f);
    }
    Ok(figs)
}

/// Trials-to-criterion difference `baseline - condition` per cell; positive
/// values mean the condition learned faster.
pub fn comparison_figure(name: &str, baseline: &MetricTable, condition: &MetricTable) -> FigureData {
    let mut f = FigureData::new(
        name,
        "Increase in trials to criterion relative to the compared condition",
        &["position", "times_trained", "baseline_mean", "condition_mean", "increase"],
        (1, 4),
        Some(0),
    )
    .logs(true, false);
    for c in &condition.cells {
        let base = baseline
            .cells
            .iter()
            .find(|b| b.position == c.position && b.times_trained == c.times_trained);
        if let (Some(b), Some(t)) = (base.and_then(|b| b.trials), c.trials) {
            f.rows.push(vec![c.position as f64, c.times_trained as f64, b.mean, t.mean, b.mean - t.mean]);
        }
    }
    f
}

/// Per-task holdout accuracy over epochs of a simultaneous run.
pub fn simultaneous_figure(log: &TrialLog) -> FigureData {
    let mut f = FigureData::new(
        "simultaneous_training",
        "Simultaneous training: holdout accuracy per task",
        &["task", "epoch", "trials", "accuracy"],
        (2, 3),
        Some(0),
    );
    for r in &log.records {
        f.rows.push(vec![r.task as f64, r.epoch as f64, r.cumulative_task_trials as f64, r.holdout_accuracy]);
    }
    f
}

const PALETTE: [&str; 10] = [
    "#00bcd4", "#1e88e5", "#3949ab", "#5e35b1", "#8e24aa", "#ab47bc", "#c2185b", "#d81b60", "#e91e63", "#f50057",
];

fn ticks(lo: f64, hi: f64, log: bool) -> Vec<f64> {
    if log {
        let (a, b) = (lo.log10().floor() as i32, hi.log10().ceil() as i32);
        return (a..=b).map(|e| 10f64.powi(e)).filter(|&v| v >= lo * 0.999 && v <= hi * 1.001).collect();
    }
    let span = (hi - lo).max(1e-12);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|&s| s >= raw).unwrap_or(raw);
    let mut v = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while v <= hi + 1e-9 * span {
        out.push(v);
        v += step;
    }
    out
}

fn svg_plot(fig: &FigureData) -> String {
    let (w, h, ml, mr, mt, mb) = (640.0, 420.0, 70.0, 110.0, 40.0, 55.0);
    let ok = |v: f64, log: bool| v.is_finite() && (!log || v > 0.0);
    let pts: Vec<(f64, f64, f64)> = fig
        .rows
        .iter()
        .filter(|r| ok(r[fig.x], fig.log_x) && ok(r[fig.y], fig.log_y))
        .map(|r| (fig.series.map_or(0.0, |s| r[s]), r[fig.x], r[fig.y]))
        .collect();
    let tx = |v: f64| if fig.log_x { v.log10() } else { v };
    let ty = |v: f64| if fig.log_y { v.log10() } else { v };
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        (ml + w - mr) / 2.0,
        fig.title
    );
    let xlabel = &fig.columns[fig.x];
    let ylabel = &fig.columns[fig.y];
    let scale = |log: bool| if log { " (log)" } else { "" };
    s += &format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{xlabel}{}</text>\n\
         <text transform=\"translate(16,{}) rotate(-90)\" text-anchor=\"middle\">{ylabel}{}</text>\n",
        (ml + w - mr) / 2.0,
        h - 12.0,
        scale(fig.log_x),
        (mt + h - mb) / 2.0,
        scale(fig.log_y)
    );
    s += &format!(
        "<rect x=\"{ml}\" y=\"{mt}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n",
        w - ml - mr,
        h - mt - mb
    );
    if pts.is_empty() {
        s += &format!("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">no data</text>\n</svg>\n", (ml + w - mr) / 2.0, h / 2.0);
        return s;
    }
    let fold = |f: fn(f64, f64) -> f64, init: f64, pick: fn(&(f64, f64, f64)) -> f64| pts.iter().map(pick).fold(init, f);
    let (mut x0, mut x1) = (fold(f64::min, f64::INFINITY, |p| p.1), fold(f64::max, f64::NEG_INFINITY, |p| p.1));
    let (mut y0, mut y1) = (fold(f64::min, f64::INFINITY, |p| p.2), fold(f64::max, f64::NEG_INFINITY, |p| p.2));
    if x0 == x1 {
        (x0, x1) = if fig.log_x { (x0 / 2.0, x1 * 2.0) } else { (x0 - 1.0, x1 + 1.0) };
    }
    if y0 == y1 {
        (y0, y1) = if fig.log_y { (y0 / 2.0, y1 * 2.0) } else { (y0 - 0.5, y1 + 0.5) };
    }
    let px = |v: f64| ml + (tx(v) - tx(x0)) / (tx(x1) - tx(x0)) * (w - ml - mr);
    let py = |v: f64| h - mb - (ty(v) - ty(y0)) / (ty(y1) - ty(y0)) * (h - mt - mb);
    for t in ticks(x0, x1, fig.log_x) {
        s += &format!(
            "<line x1=\"{0}\" x2=\"{0}\" y1=\"{1}\" y2=\"{2}\" stroke=\"black\"/><text x=\"{0}\" y=\"{3}\" text-anchor=\"middle\">{4}</text>\n",
            px(t),
            h - mb,
            h - mb + 5.0,
            h - mb + 18.0,
            fmt_tick(t)
        );
    }
    for t in ticks(y0, y1, fig.log_y) {
        s += &format!(
            "<line x1=\"{0}\" x2=\"{1}\" y1=\"{2}\" y2=\"{2}\" stroke=\"black\"/><text x=\"{3}\" y=\"{4}\" text-anchor=\"end\">{5}</text>\n",
            ml - 5.0,
            ml,
            py(t),
            ml - 8.0,
            py(t) + 4.0,
            fmt_tick(t)
        );
    }
    let mut groups: BTreeMap<i64, Vec<(f64, f64)>> = BTreeMap::new();
    for &(g, x, y) in &pts {
        groups.entry(g.round() as i64).or_default().push((x, y));
    }
    for (i, (g, mut line)) in groups.into_iter().enumerate() {
        line.sort_by(|a, b| a.0.total_cmp(&b.0));
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = line.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        s += &format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            path.join(" ")
        );
        if let Some(col) = fig.series {
            s += &format!(
                "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{} {g}</text>\n",
                w - mr + 8.0,
                mt + 14.0 * (i + 1) as f64,
                fig.columns[col]
            );
        }
    }
    s += "</svg>\n";
    s
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e5 || v.abs() < 1e-3) {
        format!("{v:.0e}")
    } else {
        let t = format!("{v:.3}");
        t.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// Writes `<name>.csv` and `<name>.svg` for every figure into `dir`.
pub fn write_figures(dir: &Path, figs: &[FigureData]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for f in figs {
        f.write_csv(std::fs::File::create(dir.join(format!("{}.csv", f.name)))?)?;
        std::fs::write(dir.join(format!("{}.svg", f.name)), f.to_svg())?;
    }
    Ok(())
}
