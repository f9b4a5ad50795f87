//! Accuracy, weight statistics, estimator quality against the analytic
//! ratio, and per-stage wall-clock profiling.

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{contract, Result};
use crate::model::Classifier;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub top1: f64,
    pub topk: f64,
    pub k: usize,
}

/// Top-1 and top-k accuracy. Ties rank the lower class index first.
pub fn accuracy(model: &Classifier, split: &Split, k: usize) -> Result<Accuracy> {
    if split.is_empty() {
        return contract("accuracy needs a nonempty split");
    }
    let k = k.clamp(1, model.num_classes());
    let mut hit1 = 0usize;
    let mut hitk = 0usize;
    for (x, &y) in split.xs.iter().zip(&split.labels) {
        let z = model.logits(x);
        // Rank of the true class: classes strictly above it, plus lower-index ties.
        let rank = z.iter().enumerate().filter(|&(c, &v)| v > z[y] || (v == z[y] && c < y)).count();
        hit1 += (rank == 0) as usize;
        hitk += (rank < k) as usize;
    }
    let n = split.len() as f64;
    Ok(Accuracy { top1: hit1 as f64 / n, topk: hitk as f64 / n, k })
}

/// Mean per-class recall over the classes present in `split`.
pub fn balanced_accuracy(model: &Classifier, split: &Split) -> Result<f64> {
    if split.is_empty() {
        return contract("accuracy needs a nonempty split");
    }
    let c = model.num_classes();
    let mut hits = vec![0usize; c];
    let mut counts = vec![0usize; c];
    for (x, &y) in split.xs.iter().zip(&split.labels) {
        counts[y] += 1;
        hits[y] += (model.predict(x) == y) as usize;
    }
    let present: Vec<f64> = (0..c).filter(|&y| counts[y] > 0).map(|y| hits[y] as f64 / counts[y] as f64).collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Scale-normalised squared error
/// `‖ŵ/mean(ŵ) − w*/mean(w*)‖² / ‖w*/mean(w*)‖²`.
pub fn we_nmse(estimated: &[f64], oracle: &[f64]) -> Result<f64> {
    if estimated.len() != oracle.len() || oracle.is_empty() {
        return contract("estimated and oracle weights must have equal nonzero length");
    }
    let n = oracle.len() as f64;
    let mo = oracle.iter().sum::<f64>() / n;
    if mo == 0.0 || !mo.is_finite() {
        return contract("oracle weights have zero mean");
    }
    let me = estimated.iter().sum::<f64>() / n;
    // An all-zero estimate carries no shape; compare against the flat vector.
    let me = if me == 0.0 { f64::INFINITY } else { me };
    let mut num = 0.0;
    let mut den = 0.0;
    for (e, o) in estimated.iter().zip(oracle) {
        let a = if me.is_finite() { e / me } else { 0.0 };
        let b = o / mo;
        num += (a - b) * (a - b);
        den += b * b;
    }
    Ok(num / den)
}

pub const HISTOGRAM_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub name: String,
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    /// Counts over `HISTOGRAM_BINS` equal bins on `[0, max weight]`.
    pub histogram: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightStats {
    pub groups: Vec<GroupStats>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

impl WeightStats {
    /// Statistics of `weights` split by `group[i]` into `names.len()` groups.
    pub fn compute(weights: &[f64], group: &[usize], names: &[&str]) -> Result<Self> {
        if weights.len() != group.len() {
            return contract("one group id per weight is required");
        }
        if group.iter().any(|&g| g >= names.len()) {
            return contract("group id out of range");
        }
        let top = weights.iter().copied().fold(0.0, f64::max);
        let groups = names
            .iter()
            .enumerate()
            .map(|(g, name)| {
                let mut vals: Vec<f64> = weights.iter().zip(group).filter(|(_, &k)| k == g).map(|(w, _)| *w).collect();
                vals.sort_by(f64::total_cmp);
                let mut histogram = vec![0; HISTOGRAM_BINS];
                for v in &vals {
                    let b = if top > 0.0 { ((v / top) * HISTOGRAM_BINS as f64) as usize } else { 0 };
                    histogram[b.min(HISTOGRAM_BINS - 1)] += 1;
                }
                GroupStats {
                    name: name.to_string(),
                    count: vals.len(),
                    mean: if vals.is_empty() { f64::NAN } else { vals.iter().sum::<f64>() / vals.len() as f64 },
                    median: quantile(&vals, 0.5),
                    q1: quantile(&vals, 0.25),
                    q3: quantile(&vals, 0.75),
                    histogram,
                }
            })
            .collect();
        Ok(WeightStats { groups })
    }

    /// Clean versus noisy training samples.
    pub fn clean_noisy(weights: &[f64], noisy: &[bool]) -> Result<Self> {
        let g: Vec<usize> = noisy.iter().map(|&b| b as usize).collect();
        Self::compute(weights, &g, &["clean", "noisy"])
    }

    pub fn group(&self, name: &str) -> Option<&GroupStats> {
        self.groups.iter().find(|g| g.name == name)
    }
}

/// Training-loop stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    FetchTrain,
    FetchVal,
    ForwardTrain,
    ForwardVal,
    TrainLoss,
    ValLoss,
    EstimateWeights,
    WeightLoss,
    Backward,
    UpdateModel,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::FetchTrain,
        Stage::FetchVal,
        Stage::ForwardTrain,
        Stage::ForwardVal,
        Stage::TrainLoss,
        Stage::ValLoss,
        Stage::EstimateWeights,
        Stage::WeightLoss,
        Stage::Backward,
        Stage::UpdateModel,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Stage::FetchTrain => "Fetch tr data",
            Stage::FetchVal => "Fetch val data",
            Stage::ForwardTrain => "Forward tr data",
            Stage::ForwardVal => "Forward val data",
            Stage::TrainLoss => "Get tr loss",
            Stage::ValLoss => "Get val loss",
            Stage::EstimateWeights => "Estimate weights",
            Stage::WeightLoss => "Weight tr loss",
            Stage::Backward => "Backward data",
            Stage::UpdateModel => "Update model",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Profiling window: skip `skip` iterations once, then repeat cycles of
/// `warmup` unrecorded and `record` recorded iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub skip: usize,
    pub warmup: usize,
    pub record: usize,
}

impl Default for Window {
    fn default() -> Self {
        Window { skip: 10, warmup: 2, record: 10 }
    }
}

/// Per-stage wall-clock accumulator. Every measured interval goes into the
/// lifetime totals; intervals inside recorded window iterations also go
/// into the window totals used by [`StageTimer::report`].
#[derive(Debug, Clone)]
pub struct StageTimer {
    window: Window,
    iteration: Option<usize>,
    totals: [f64; 10],
    counts: [usize; 10],
    windows: Vec<[f64; 10]>,
    current: Option<Stage>,
    started: Option<Instant>,
}

impl StageTimer {
    pub fn new(window: Window) -> Self {
        StageTimer {
            window,
            iteration: None,
            totals: [0.0; 10],
            counts: [0; 10],
            windows: Vec::new(),
            current: None,
            started: None,
        }
    }

    /// Marks the start of a new loop iteration.
    pub fn next_iteration(&mut self) {
        self.stop();
        let it = self.iteration.map_or(0, |i| i + 1);
        self.iteration = Some(it);
        if let Some((_, 0)) = self.window_position(it) {
            self.windows.push([0.0; 10]);
        }
    }

    /// `(cycle, position within the record phase)` if `it` is recorded.
    fn window_position(&self, it: usize) -> Option<(usize, usize)> {
        let w = self.window;
        if it < w.skip || w.record == 0 {
            return None;
        }
        let cycle_len = w.warmup + w.record;
        let k = it - w.skip;
        let pos = k % cycle_len;
        (pos >= w.warmup).then(|| (k / cycle_len, pos - w.warmup))
    }

    /// Closes any open stage and opens `stage`.
    pub fn start(&mut self, stage: Stage) {
        self.stop();
        self.current = Some(stage);
        self.started = Some(Instant::now());
    }

    /// Closes the open stage, if any.
    pub fn stop(&mut self) {
        if let (Some(stage), Some(t0)) = (self.current.take(), self.started.take()) {
            self.add(stage, t0.elapsed().as_secs_f64());
        }
    }

    /// Adds an externally measured interval.
    pub fn add(&mut self, stage: Stage, seconds: f64) {
        let i = stage.index();
        self.totals[i] += seconds;
        self.counts[i] += 1;
        if let Some(it) = self.iteration {
            if self.window_position(it).is_some() {
                if let Some(w) = self.windows.last_mut() {
                    w[i] += seconds;
                }
            }
        }
    }

    pub fn measure<T>(&mut self, stage: Stage, f: impl FnOnce() -> T) -> T {
        self.start(stage);
        let out = f();
        self.stop();
        out
    }

    /// Lifetime seconds for a stage.
    pub fn total(&self, stage: Stage) -> f64 {
        self.totals[stage.index()]
    }

    /// Number of intervals recorded for a stage.
    pub fn count(&self, stage: Stage) -> usize {
        self.counts[stage.index()]
    }

    pub fn grand_total(&self) -> f64 {
        self.totals.iter().sum()
    }

    pub fn recorded_windows(&self) -> usize {
        self.windows.len()
    }

    /// Per-stage mean over recorded windows. Falls back to lifetime totals
    /// when no window was recorded (short runs).
    pub fn report(&self) -> StageReport {
        let per_stage: [f64; 10] = if self.windows.is_empty() {
            self.totals
        } else {
            let mut acc = [0.0; 10];
            for w in &self.windows {
                for (a, v) in acc.iter_mut().zip(w) {
                    *a += v;
                }
            }
            acc.map(|v| v / self.windows.len() as f64)
        };
        let total: f64 = per_stage.iter().sum();
        let rows = Stage::ALL
            .iter()
            .map(|&s| {
                let secs = per_stage[s.index()];
                StageRow {
                    stage: s.label().to_string(),
                    seconds: secs,
                    percent: if total > 0.0 { 100.0 * secs / total } else { 0.0 },
                }
            })
            .collect();
        StageReport { windows: self.windows.len(), total_seconds: total, rows }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub stage: String,
    pub seconds: f64,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub windows: usize,
    pub total_seconds: f64,
    pub rows: Vec<StageRow>,
}

/// Written above the CSV table.
pub const REPORT_HEADER: &str = "# wall-clock time only; single execution space";

impl StageReport {
    pub fn percent(&self, stage: Stage) -> f64 {
        self.rows.iter().find(|r| r.stage == stage.label()).map_or(0.0, |r| r.percent)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\nstage,seconds,percent\n");
        for r in &self.rows {
            s.push_str(&format!("{},{:.9},{:.4}\n", r.stage, r.seconds, r.percent));
        }
        s.push_str(&format!("Total,{:.9},100.0000\n", self.total_seconds));
        s
    }

    pub fn to_json(&self) -> String {
        let v = serde_json::json!({
            "clock": "wall",
            "windows": self.windows,
            "total_seconds": self.total_seconds,
            "rows": self.rows,
        });
        serde_json::to_string_pretty(&v).expect("report serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::optim::OptimizerKind;

    fn split_from(model: &Classifier, n: usize, rng: &mut Rng) -> Split {
        let xs: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.normal(), rng.normal()]).collect();
        let ys = xs.iter().map(|x| model.predict(x)).collect();
        Split::clean(xs, ys)
    }

    #[test]
    fn accuracy_cases() {
        let mut rng = Rng::new(1);
        let mut m = Classifier::new(2, 4, 3, OptimizerKind::Sgd, &mut rng).unwrap();
        let s = split_from(&m, 200, &mut rng);
        let a = accuracy(&m, &s, 2).unwrap();
        assert_eq!(a.top1, 1.0);
        assert_eq!(accuracy(&m, &s, 3).unwrap().topk, 1.0);
        assert_eq!(accuracy(&m, &s, 99).unwrap().topk, 1.0);

        // Constant predictor: all logits equal, so class 0 always wins.
        m.set_params(&vec![0.0; m.params().len()]).unwrap();
        let n = 3000;
        let xs: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.normal(), rng.normal()]).collect();
        let ys: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let bal = Split::clean(xs, ys);
        let a = accuracy(&m, &bal, 1).unwrap();
        assert!((a.top1 - 1.0 / 3.0).abs() < 0.01);
        assert!(accuracy(&m, &Split::default(), 1).is_err());
    }

    #[test]
    fn nmse_cases() {
        let w = vec![0.5, 1.0, 2.0, 3.0];
        assert_eq!(we_nmse(&w, &w).unwrap(), 0.0);
        let scaled: Vec<f64> = w.iter().map(|v| 7.3 * v).collect();
        assert!(we_nmse(&scaled, &w).unwrap() < 1e-24);
        assert!(we_nmse(&w, &[0.0; 4]).is_err());
        assert!(we_nmse(&w, &[1.0; 3]).is_err());
    }

    #[test]
    fn nmse_matches_monte_carlo() {
        // ŵ with i.i.d. Exp(1) entries against w* ≡ 1. Closed form for large n
        // is Var/mean² = 1; check the statistic against its own simulation.
        let mut rng = Rng::new(2);
        let n = 50;
        let ones = vec![1.0; n];
        let mut sim = 0.0;
        let trials = 100_000;
        for _ in 0..trials {
            let w: Vec<f64> = (0..n).map(|_| -(1.0 - rng.uniform()).ln()).collect();
            let m = w.iter().sum::<f64>() / n as f64;
            sim += w.iter().map(|v| (v / m - 1.0).powi(2)).sum::<f64>() / n as f64;
        }
        sim /= trials as f64;
        let mut direct = 0.0;
        for _ in 0..2000 {
            let w: Vec<f64> = (0..n).map(|_| -(1.0 - rng.uniform()).ln()).collect();
            direct += we_nmse(&w, &ones).unwrap();
        }
        direct /= 2000.0;
        assert!((direct - sim).abs() < 0.05, "{direct} vs {sim}");
    }

    #[test]
    fn weight_stats_groups() {
        let w = vec![0.1, 0.2, 2.0, 3.0, 4.0];
        let st = WeightStats::clean_noisy(&w, &[true, true, false, false, false]).unwrap();
        let clean = st.group("clean").unwrap();
        let noisy = st.group("noisy").unwrap();
        assert_eq!(clean.count + noisy.count, 5);
        assert_eq!(clean.median, 3.0);
        assert_eq!(clean.q1, 2.5);
        // Independent pass over the raw weights.
        let manual: f64 = w.iter().zip([1, 1, 0, 0, 0]).filter(|(_, g)| *g == 1).map(|(v, _)| v).sum::<f64>() / 2.0;
        assert!((noisy.mean - manual).abs() < 1e-12);
        assert_eq!(clean.histogram.iter().sum::<usize>(), 3);
        assert_eq!(clean.histogram[HISTOGRAM_BINS - 1], 1);
    }

    #[test]
    fn report_percentages() {
        let mut t = StageTimer::new(Window { skip: 0, warmup: 0, record: 1 });
        t.next_iteration();
        t.add(Stage::EstimateWeights, 0.5);
        let r = t.report();
        assert_eq!(r.percent(Stage::EstimateWeights), 100.0);

        let mut t = StageTimer::new(Window { skip: 0, warmup: 0, record: 1 });
        t.next_iteration();
        t.add(Stage::Backward, 0.25);
        t.add(Stage::UpdateModel, 0.25);
        let r = t.report();
        assert_eq!(r.percent(Stage::Backward), 50.0);
        assert!(r.to_csv().starts_with(REPORT_HEADER));
        let row_sum: f64 = r.rows.iter().map(|x| x.seconds).sum();
        assert!((row_sum - r.total_seconds).abs() <= 0.01 * r.total_seconds);
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["clock"], "wall");
    }

    #[test]
    fn window_schedule() {
        let mut t = StageTimer::new(Window { skip: 3, warmup: 1, record: 2 });
        for _ in 0..12 {
            t.next_iteration();
            t.add(Stage::FetchTrain, 1.0);
        }
        // iterations 3..12: cycles [warm, rec, rec] × 3 → 3 windows of 2 s.
        assert_eq!(t.recorded_windows(), 3);
        assert_eq!(t.report().rows[0].seconds, 2.0);
        assert_eq!(t.total(Stage::FetchTrain), 12.0);
        assert_eq!(t.count(Stage::FetchTrain), 12);
    }

    #[test]
    fn timer_overhead_is_small() {
        let mut t = StageTimer::new(Window::default());
        let n = 200_000;
        let t0 = Instant::now();
        for i in 0..n {
            if i % 10 == 0 {
                t.next_iteration();
            }
            t.start(Stage::ALL[i % 10]);
        }
        t.stop();
        let per = t0.elapsed().as_secs_f64() / n as f64;
        assert!(per < 1e-6, "{per}");
    }
}
