//! Training loops: loss-value ADIW, hidden-layer ADIW with per-class weight
//! estimation, and the Uniform / Random / Val-Only / DIW baselines.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintSet;
use crate::critic::{Critic, CriticConfig};
use crate::data::{ShiftDataset, Split};
use crate::error::{contract, Error, Result};
use crate::kernels::{BasisSet, RbfKernel};
use crate::metrics::{accuracy, balanced_accuracy, Stage, StageReport, StageTimer, WeightStats, Window};
use crate::model::{group_by_class, l2_normalize, transform_loss, Classifier, LossBatch};
use crate::numerics::{dot, Rng};
use crate::objectives::{EstimatorKind, KliepObjective, KmmObjective, LsifObjective, Objective, W1Objective};
use crate::optim::OptimizerKind;
use crate::pgd::{self, PgdConfig, StepSize};
use crate::weights::WeightStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Loss,
    Hidden,
}

impl std::str::FromStr for Transform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loss" | "loss_value" => Ok(Transform::Loss),
            "hidden" | "hidden_layer" => Ok(Transform::Hidden),
            _ => Err(Error::Config(format!("unknown transform '{s}' (expected loss or hidden)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Uniform,
    Random,
    #[serde(alias = "valonly")]
    ValOnly,
    #[serde(alias = "diw")]
    DiwKmm,
}

impl std::str::FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Baseline::Uniform),
            "random" => Ok(Baseline::Random),
            "valonly" | "val_only" => Ok(Baseline::ValOnly),
            "diw" | "diw_kmm" => Ok(Baseline::DiwKmm),
            _ => Err(Error::Config(format!("unknown baseline '{s}' (expected uniform, random, valonly or diw)"))),
        }
    }
}

/// How the base learning rate maps to the per-epoch rate `α_s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// `α_s = c/√S` with `c` the configured rate and `S` the epoch count.
    InvSqrtEpochs,
}

/// Weight-estimation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeConfig {
    /// PGD steps per mini-batch (T).
    pub steps: usize,
    /// PGD step size; `None` picks one per estimator.
    pub step_size: Option<f64>,
    /// Half-width of the mean band.
    pub epsilon: f64,
    /// Kernel width; `None` uses the per-batch median heuristic.
    pub sigma: Option<f64>,
    /// LSIF regulariser.
    pub lambda: f64,
    /// Cap each step's weight change by the current risk-gradient size.
    pub w2_clamp: bool,
    /// DIW baseline convergence settings.
    pub diw_tol: f64,
    pub diw_max_iter: usize,
}

impl Default for WeConfig {
    fn default() -> Self {
        WeConfig {
            steps: 1,
            step_size: None,
            epsilon: 0.1,
            sigma: None,
            lambda: 1e-5,
            w2_clamp: false,
            diw_tol: 1e-8,
            diw_max_iter: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticSettings {
    pub hidden: usize,
    pub kappa: f64,
    pub learning_rate: f64,
    pub warm_start_batches: usize,
    pub updates_per_batch: usize,
}

impl Default for CriticSettings {
    fn default() -> Self {
        let c = CriticConfig::default();
        CriticSettings {
            hidden: c.hidden,
            kappa: c.kappa,
            learning_rate: c.learning_rate,
            warm_start_batches: c.warm_start_batches,
            updates_per_batch: c.updates_per_batch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub estimator: EstimatorKind,
    pub transform: Transform,
    pub baseline: Option<Baseline>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Validation mini-batch size; clipped to the validation split.
    pub val_batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub optimizer: OptimizerKind,
    pub hidden: usize,
    pub we: WeConfig,
    pub critic: CriticSettings,
    pub seed: u64,
    /// Keep a weight snapshot every this many epochs (0 = final only).
    pub snapshot_stride: usize,
    pub profile_window: Window,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            estimator: EstimatorKind::Kmm,
            transform: Transform::Loss,
            baseline: None,
            epochs: 20,
            batch_size: 256,
            val_batch_size: 256,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::Constant,
            optimizer: OptimizerKind::Adam,
            hidden: 32,
            we: WeConfig::default(),
            critic: CriticSettings::default(),
            seed: 0,
            snapshot_stride: 0,
            profile_window: Window::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_tr: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 || self.batch_size > n_tr {
            return bad(format!("batch_size must be in 1..={n_tr}, got {}", self.batch_size));
        }
        if self.val_batch_size == 0 {
            return bad("val_batch_size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive".into());
        }
        if self.hidden == 0 {
            return bad("hidden must be >= 1".into());
        }
        if self.we.steps == 0 {
            return bad("we.steps must be >= 1".into());
        }
        if !(self.we.epsilon >= 0.0) {
            return bad("we.epsilon must be >= 0".into());
        }
        if let Some(s) = self.we.sigma {
            if !(s > 0.0) {
                return bad("we.sigma must be positive".into());
            }
        }
        if let Some(s) = self.we.step_size {
            if !(s > 0.0) {
                return bad("we.step_size must be positive".into());
            }
        }
        if !(self.we.lambda >= 0.0) {
            return bad("we.lambda must be >= 0".into());
        }
        if self.critic.hidden == 0 {
            return bad("critic.hidden must be >= 1".into());
        }
        if !(self.critic.learning_rate > 0.0) {
            return bad("critic.learning_rate must be positive".into());
        }
        if !(self.critic.kappa >= 0.0) {
            return bad("critic.kappa must be >= 0".into());
        }
        Ok(())
    }

    /// `α_s` for every epoch.
    pub fn epoch_lr(&self) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::InvSqrtEpochs => self.learning_rate / (self.epochs as f64).sqrt(),
        }
    }
}

/// `r_y = p_te(y) / p_tr(y)` per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPriorRatio {
    pub ratios: Vec<f64>,
}

impl ClassPriorRatio {
    pub fn ones(classes: usize) -> Self {
        ClassPriorRatio { ratios: vec![1.0; classes] }
    }
}

/// Label-frequency ratio with +1 smoothing on every count.
pub fn estimate_class_prior_ratio(train_labels: &[usize], val_labels: &[usize], classes: usize) -> Result<ClassPriorRatio> {
    let mut ct = vec![0usize; classes];
    let mut cv = vec![0usize; classes];
    for &y in train_labels {
        if y >= classes {
            return contract(format!("train label {y} out of range"));
        }
        ct[y] += 1;
    }
    for &y in val_labels {
        if y >= classes {
            return contract(format!("validation label {y} out of range"));
        }
        cv[y] += 1;
    }
    if let Some(y) = (0..classes).find(|&y| cv[y] > 0 && ct[y] == 0) {
        return contract(format!("class {y} appears in validation but not in training"));
    }
    let nt = (train_labels.len() + classes) as f64;
    let nv = (val_labels.len() + classes) as f64;
    let ratios = (0..classes).map(|y| ((cv[y] + 1) as f64 / nv) / ((ct[y] + 1) as f64 / nt)).collect();
    Ok(ClassPriorRatio { ratios })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub test_acc: f64,
    pub test_topk: f64,
    /// Mean per-class recall on the test split.
    pub test_balanced_acc: f64,
    pub val_acc: f64,
    /// Mean weighted training loss over the epoch's batches.
    pub weighted_loss: f64,
    /// `‖∇_θ (1/n)Σ w_i ℓ_i‖²` on the full training set at epoch end.
    pub grad_norm_sq: f64,
    /// Mean of the per-batch squared gradient norms.
    pub batch_grad_norm_sq: f64,
    pub mean_weight: f64,
    pub clean_mean_weight: f64,
    pub noisy_mean_weight: f64,
    pub skipped_batches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: String,
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub final_weights: Vec<f64>,
    pub weight_stats: WeightStats,
    /// Mean final weight per (noisy) training label.
    pub class_mean_weights: Vec<f64>,
    pub batches: usize,
    pub skipped_batches: usize,
    /// Seconds spent in weight estimation over all batches.
    pub we_seconds: f64,
    pub we_calls: usize,
    pub stages: StageReport,
    pub snapshots: Vec<(usize, Vec<f64>)>,
    pub notes: Vec<String>,
    #[serde(skip)]
    pub final_params: Vec<f64>,
}

impl TrainReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn epochs_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.epochs {
            w.serialize(e)?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("utf8"))
    }

    pub fn final_accuracy(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.test_acc)
    }

    /// Mean balanced test accuracy over the last `k` epochs.
    pub fn tail_balanced_accuracy(&self, k: usize) -> f64 {
        let k = k.min(self.epochs.len()).max(1);
        let tail = &self.epochs[self.epochs.len() - k..];
        tail.iter().map(|e| e.test_balanced_acc).sum::<f64>() / tail.len() as f64
    }

    /// Mean test accuracy over the last `k` epochs.
    pub fn tail_accuracy(&self, k: usize) -> f64 {
        let k = k.min(self.epochs.len()).max(1);
        let tail = &self.epochs[self.epochs.len() - k..];
        tail.iter().map(|e| e.test_acc).sum::<f64>() / tail.len() as f64
    }
}

/// Per-batch hook for instrumentation.
#[derive(Debug)]
pub struct BatchEvent<'a> {
    pub epoch: usize,
    pub batch: usize,
    pub indices: &'a [usize],
    /// Weights gathered from the store before estimation.
    pub gathered: &'a [f64],
    /// Weights used for the update (and scattered back).
    pub weights: &'a [f64],
    pub losses: &'a [f64],
    /// The weighted risk the trainer backpropagated.
    pub weighted_risk: f64,
    pub skipped: bool,
}

pub trait Observer {
    fn on_batch(&mut self, _event: &BatchEvent<'_>) {}
}

impl Observer for () {}

/// One estimation problem: a batch (or class slice of one).
struct WeJob {
    train: Vec<Vec<f64>>,
    val: Vec<Vec<f64>>,
    /// Warm-start weights (nonparametric) or β (parametric).
    start: Vec<f64>,
    critic: Option<Critic>,
    rng: Rng,
    /// Skipped under the class-size rule.
    skip: bool,
}

struct WeOutcome {
    weights: Vec<f64>,
    beta: Option<Vec<f64>>,
    critic: Option<Critic>,
}

/// Controls shared by all jobs of one batch.
#[derive(Clone, Copy)]
struct WePolicy<'a> {
    kind: EstimatorKind,
    cfg: &'a TrainConfig,
    pgd: PgdConfig,
    critic_penalty: bool,
}

fn kernel_for(cfg: &WeConfig, train: &[Vec<f64>], val: &[Vec<f64>]) -> Result<RbfKernel> {
    match cfg.sigma {
        Some(s) => RbfKernel::new(s),
        None => {
            let mut pts = train.to_vec();
            pts.extend_from_slice(val);
            Ok(RbfKernel::median_heuristic(&pts))
        }
    }
}

fn solve(obj: &dyn Objective, x0: &[f64], policy: &WePolicy, fallback_step: f64) -> Result<Vec<f64>> {
    let mut pgd_cfg = policy.pgd;
    if let Some(s) = policy.cfg.we.step_size {
        pgd_cfg.step_size = StepSize::Fixed(s);
    } else if obj.curvature().is_none() {
        pgd_cfg.step_size = StepSize::Fixed(fallback_step);
    }
    let x0 = obj.constraint().project(x0)?;
    Ok(pgd::run(obj, &x0, &pgd_cfg)?.point)
}

fn estimate(job: WeJob, policy: &WePolicy) -> Result<WeOutcome> {
    let WeJob { train, val, start, critic, mut rng, skip } = job;
    if skip {
        return Ok(WeOutcome { weights: start, beta: None, critic });
    }
    let we = &policy.cfg.we;
    match policy.kind {
        EstimatorKind::Kmm => {
            let kernel = kernel_for(we, &train, &val)?;
            let obj = KmmObjective::build(&kernel, &train, &val, we.epsilon)?;
            Ok(WeOutcome { weights: solve(&obj, &start, policy, 1.0)?, beta: None, critic })
        }
        EstimatorKind::Kliep => {
            let kernel = kernel_for(we, &train, &val)?;
            let obj = KliepObjective::build(BasisSet::new(val.clone())?, kernel, &train, &val)?;
            let b0 = obj.constraint().project(&start)?;
            let l = obj.local_curvature(&b0);
            let step = if l.is_finite() && l > 0.0 { 1.0 / l } else { 1.0 };
            let beta = solve(&obj, &b0, policy, step)?;
            let weights = obj.model().weights_from_params(&beta, &train)?;
            Ok(WeOutcome { weights, beta: Some(beta), critic })
        }
        EstimatorKind::Lsif => {
            let kernel = kernel_for(we, &train, &val)?;
            let obj = LsifObjective::build(BasisSet::new(val.clone())?, kernel, &train, &val, we.lambda)?;
            let beta = solve(&obj, &start, policy, 1.0)?;
            let weights = obj.model().weights_from_params(&beta, &train)?;
            Ok(WeOutcome { weights, beta: Some(beta), critic })
        }
        EstimatorKind::W1 => {
            let mut critic = match critic {
                Some(c) => c,
                None => return contract("W1 estimation needs a critic"),
            };
            let w0 = ConstraintSet::mean_band(we.epsilon)?.project(&start)?;
            let cs = &policy.cfg.critic;
            for _ in 0..cs.updates_per_batch {
                critic.train_step(&train, &w0, &val, cs.learning_rate, policy.critic_penalty, &mut rng)?;
            }
            let obj = W1Objective::new(critic.values(&train), &critic.values(&val), we.epsilon)?;
            // Default step moves each weight by its critic value.
            let weights = solve(&obj, &w0, policy, train.len() as f64)?;
            Ok(WeOutcome { weights, beta: None, critic: Some(critic) })
        }
    }
}

/// Cycles through the validation split in shuffled mini-batches and
/// reshuffles only once exhausted.
struct ValLoader {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: Rng,
}

impl ValLoader {
    fn new(n: usize, batch: usize, mut rng: Rng) -> Self {
        let order = rng.permutation(n);
        ValLoader { order, pos: 0, batch: batch.min(n), rng }
    }

    fn next(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}

fn fetch(split: &Split, idx: &[usize]) -> (Vec<Vec<f64>>, Vec<usize>) {
    (idx.iter().map(|&i| split.xs[i].clone()).collect(), idx.iter().map(|&i| split.labels[i]).collect())
}

fn threads() -> usize {
    std::env::var("DRIFTWT_THREADS").ok().and_then(|v| v.parse().ok()).filter(|&n: &usize| n > 0).unwrap_or(0)
}

/// Which weights a run uses.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Mode {
    Fixed,
    Random,
    Estimate { warm: bool },
}

/// Run whatever `cfg` describes: a baseline if one is set, otherwise ADIW
/// with the configured transformation.
pub fn train(data: &ShiftDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    train_observed(data, cfg, &mut ())
}

pub fn train_observed(data: &ShiftDataset, cfg: &TrainConfig, obs: &mut dyn Observer) -> Result<TrainReport> {
    match cfg.baseline {
        Some(_) => train_baseline_observed(data, cfg, obs),
        None => match cfg.transform {
            Transform::Loss => train_adiw_observed(data, cfg, obs),
            Transform::Hidden => {
                let prior = estimate_class_prior_ratio(&data.train.labels, &data.val.labels, data.classes)?;
                train_adiw_hidden_observed(data, cfg, &prior, obs)
            }
        },
    }
}

/// Loss-value ADIW.
pub fn train_adiw(data: &ShiftDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    train_adiw_observed(data, cfg, &mut ())
}

pub fn train_adiw_observed(data: &ShiftDataset, cfg: &TrainConfig, obs: &mut dyn Observer) -> Result<TrainReport> {
    let cfg = TrainConfig { transform: Transform::Loss, baseline: None, ..cfg.clone() };
    run_loop(data, &cfg, cfg.estimator, Mode::Estimate { warm: true }, None, obs)
}

/// Hidden-layer ADIW with per-class estimation scaled by `prior`.
pub fn train_adiw_hidden(data: &ShiftDataset, cfg: &TrainConfig, prior: &ClassPriorRatio) -> Result<TrainReport> {
    train_adiw_hidden_observed(data, cfg, prior, &mut ())
}

pub fn train_adiw_hidden_observed(
    data: &ShiftDataset,
    cfg: &TrainConfig,
    prior: &ClassPriorRatio,
    obs: &mut dyn Observer,
) -> Result<TrainReport> {
    if prior.ratios.len() != data.classes || prior.ratios.iter().any(|r| !(*r > 0.0)) {
        return contract("class-prior ratio needs one positive entry per class");
    }
    let cfg = TrainConfig { transform: Transform::Hidden, baseline: None, ..cfg.clone() };
    run_loop(data, &cfg, cfg.estimator, Mode::Estimate { warm: true }, Some(prior), obs)
}

pub fn train_baseline(data: &ShiftDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    train_baseline_observed(data, cfg, &mut ())
}

pub fn train_baseline_observed(data: &ShiftDataset, cfg: &TrainConfig, obs: &mut dyn Observer) -> Result<TrainReport> {
    let Some(b) = cfg.baseline else {
        return Err(Error::Config("train_baseline needs a baseline".into()));
    };
    match b {
        Baseline::Uniform => run_loop(data, cfg, cfg.estimator, Mode::Fixed, None, obs),
        Baseline::Random => run_loop(data, cfg, cfg.estimator, Mode::Random, None, obs),
        Baseline::ValOnly => {
            let mut vcfg = cfg.clone();
            vcfg.batch_size = cfg.batch_size.min(data.val.len());
            let vdata = ShiftDataset {
                classes: data.classes,
                dim: data.dim,
                train: data.val.clone(),
                val: data.val.clone(),
                test: data.test.clone(),
                oracle: None,
            };
            let mut r = run_loop(&vdata, &vcfg, cfg.estimator, Mode::Fixed, None, obs)?;
            r.method = "val_only".into();
            Ok(r)
        }
        Baseline::DiwKmm => {
            let prior = match cfg.transform {
                Transform::Hidden => Some(estimate_class_prior_ratio(&data.train.labels, &data.val.labels, data.classes)?),
                Transform::Loss => None,
            };
            let mut r = run_loop(data, cfg, EstimatorKind::Kmm, Mode::Estimate { warm: false }, prior.as_ref(), obs)?;
            r.notes.push("DIW baseline: weights reset to ones before every batch (no warm start)".into());
            Ok(r)
        }
    }
}

fn method_name(cfg: &TrainConfig, kind: EstimatorKind, mode: Mode) -> String {
    match (cfg.baseline, mode) {
        (Some(Baseline::Uniform), _) => "uniform".into(),
        (Some(Baseline::Random), _) => "random".into(),
        (Some(Baseline::ValOnly), _) => "val_only".into(),
        (Some(Baseline::DiwKmm), _) => "diw_kmm".into(),
        _ => format!("adiw_{}_{}", kind.name(), match cfg.transform {
            Transform::Loss => "loss",
            Transform::Hidden => "hidden",
        }),
    }
}

fn run_loop(
    data: &ShiftDataset,
    cfg: &TrainConfig,
    kind: EstimatorKind,
    mode: Mode,
    prior: Option<&ClassPriorRatio>,
    obs: &mut dyn Observer,
) -> Result<TrainReport> {
    data.validate().or_else(|e| if cfg.baseline == Some(Baseline::ValOnly) { Ok(()) } else { Err(e) })?;
    cfg.validate(data.train.len())?;
    let n_tr = data.train.len();
    let hidden_mode = cfg.transform == Transform::Hidden && matches!(mode, Mode::Estimate { .. });

    let mut root = Rng::new(cfg.seed);
    let mut model = Classifier::new(data.dim, cfg.hidden, data.classes, cfg.optimizer, &mut root.fork(1))?;
    let mut batch_rng = root.fork(2);
    let mut val_loader = ValLoader::new(data.val.len(), cfg.val_batch_size, root.fork(3));
    let mut we_rng = root.fork(4);
    let mut random_rng = root.fork(5);
    let mut critic_rng = root.fork(6);

    let mut store = WeightStore::new(n_tr)?;
    let mut beta_store = WeightStore::new(data.val.len())?;
    let critic_dim = if cfg.transform == Transform::Hidden { cfg.hidden } else { 1 };
    let n_critics = if hidden_mode { data.classes } else { 1 };
    let mut critics: Vec<Option<Critic>> = if kind == EstimatorKind::W1 && matches!(mode, Mode::Estimate { .. }) {
        (0..n_critics)
            .map(|_| Critic::new(critic_dim, cfg.critic.hidden, cfg.critic.kappa, &mut critic_rng).map(Some))
            .collect::<Result<_>>()?
    } else {
        vec![None; n_critics]
    };

    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        let t = threads();
        if t > 0 {
            b = b.num_threads(t);
        }
        b.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?
    };

    let lr = cfg.epoch_lr();
    let mut timer = StageTimer::new(cfg.profile_window);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut snapshots = Vec::new();
    let (mut batches, mut skipped_total, mut we_calls) = (0usize, 0usize, 0usize);
    let mut we_seconds = 0.0;

    for epoch in 1..=cfg.epochs {
        if mode == Mode::Random {
            let draws: Vec<f64> = (0..n_tr).map(|_| random_rng.normal().max(0.0)).collect();
            store = WeightStore::from_values(draws)?;
        }
        let order = batch_rng.permutation(n_tr);
        let (mut loss_acc, mut gn_acc, mut nb, mut skipped) = (0.0, 0.0, 0usize, 0usize);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            timer.next_iteration();
            timer.start(Stage::FetchTrain);
            let (xs, ys) = fetch(&data.train, idx);
            let gathered = store.gather(idx)?;
            let estimating = matches!(mode, Mode::Estimate { .. });
            let (vxs, vys, vidx) = if estimating {
                timer.start(Stage::FetchVal);
                let vidx = val_loader.next();
                let (a, b) = fetch(&data.val, &vidx);
                (a, b, vidx)
            } else {
                (Vec::new(), Vec::new(), Vec::new())
            };
            timer.start(Stage::ForwardTrain);
            let lb = model.forward_loss(&xs, &ys)?;
            let vlb = if estimating {
                timer.start(Stage::ForwardVal);
                Some(model.forward_loss(&vxs, &vys)?)
            } else {
                None
            };

            let mut weights = gathered.clone();
            let mut failed = false;
            if let (Mode::Estimate { warm }, Some(vlb)) = (mode, vlb.as_ref()) {
                timer.start(Stage::TrainLoss);
                let treps = reps(&lb, cfg.transform);
                timer.start(Stage::ValLoss);
                let vreps = reps(vlb, cfg.transform);
                timer.start(Stage::EstimateWeights);
                let t0 = Instant::now();
                let mut pgd_cfg = if warm {
                    PgdConfig::fixed(cfg.we.steps, StepSize::Auto)
                } else {
                    PgdConfig::to_convergence(StepSize::Auto, cfg.we.diw_tol, cfg.we.diw_max_iter)
                };
                if cfg.we.w2_clamp {
                    let g = model.weighted_gradient(&lb, &gathered)?;
                    pgd_cfg.w2_clamp = Some(lr * lr * dot(&g, &g));
                }
                let policy = WePolicy {
                    kind,
                    cfg,
                    pgd: pgd_cfg,
                    critic_penalty: batches >= cfg.critic.warm_start_batches,
                };
                let res = estimate_batch(
                    &pool,
                    &policy,
                    warm,
                    &treps,
                    &ys,
                    &vreps,
                    &vys,
                    &vidx,
                    &gathered,
                    hidden_mode.then_some(prior).flatten(),
                    &mut beta_store,
                    &mut critics,
                    &mut we_rng,
                );
                we_seconds += t0.elapsed().as_secs_f64();
                we_calls += 1;
                match res {
                    Ok(w) => weights = w,
                    Err(Error::StepFailure { .. }) => failed = true,
                    Err(e) => return Err(e),
                }
                if !failed {
                    store.scatter(idx, &weights)?;
                }
            }

            batches += 1;
            if failed {
                skipped += 1;
                timer.stop();
                obs.on_batch(&BatchEvent {
                    epoch,
                    batch: bi,
                    indices: idx,
                    gathered: &gathered,
                    weights: &gathered,
                    losses: &lb.losses,
                    weighted_risk: f64::NAN,
                    skipped: true,
                });
                continue;
            }
            timer.start(Stage::WeightLoss);
            let risk = lb.losses.iter().zip(&weights).map(|(l, w)| l * w).sum::<f64>() / lb.len() as f64;
            timer.start(Stage::Backward);
            let grad = model.weighted_gradient(&lb, &weights)?;
            timer.start(Stage::UpdateModel);
            model.apply_gradient(&grad, lr)?;
            timer.stop();
            loss_acc += risk;
            gn_acc += dot(&grad, &grad);
            nb += 1;
            obs.on_batch(&BatchEvent {
                epoch,
                batch: bi,
                indices: idx,
                gathered: &gathered,
                weights: &weights,
                losses: &lb.losses,
                weighted_risk: risk,
                skipped: false,
            });
        }
        skipped_total += skipped;

        let full = model.forward_loss(&data.train.xs, &data.train.labels)?;
        let g = model.weighted_gradient(&full, store.values())?;
        let test = accuracy(&model, &data.test, 5)?;
        let val_acc = accuracy(&model, &data.val, 1)?.top1;
        let stats = WeightStats::clean_noisy(store.values(), &data.train.noisy)?;
        epochs.push(EpochRecord {
            epoch,
            test_acc: test.top1,
            test_topk: test.topk,
            test_balanced_acc: balanced_accuracy(&model, &data.test)?,
            val_acc,
            weighted_loss: if nb > 0 { loss_acc / nb as f64 } else { f64::NAN },
            grad_norm_sq: dot(&g, &g),
            batch_grad_norm_sq: if nb > 0 { gn_acc / nb as f64 } else { f64::NAN },
            mean_weight: store.values().iter().sum::<f64>() / n_tr as f64,
            clean_mean_weight: stats.groups[0].mean,
            noisy_mean_weight: stats.groups[1].mean,
            skipped_batches: skipped,
        });
        if cfg.snapshot_stride > 0 && epoch % cfg.snapshot_stride == 0 {
            snapshots.push((epoch, store.values().to_vec()));
        }
    }

    let final_weights = store.values().to_vec();
    let mut class_sum = vec![0.0; data.classes];
    let mut class_n = vec![0usize; data.classes];
    for (w, &y) in final_weights.iter().zip(&data.train.labels) {
        class_sum[y] += w;
        class_n[y] += 1;
    }
    let class_mean_weights = class_sum.iter().zip(&class_n).map(|(s, &n)| if n > 0 { s / n as f64 } else { f64::NAN }).collect();
    Ok(TrainReport {
        method: method_name(cfg, kind, mode),
        config: cfg.clone(),
        epochs,
        weight_stats: WeightStats::clean_noisy(&final_weights, &data.train.noisy)?,
        final_weights,
        class_mean_weights,
        batches,
        skipped_batches: skipped_total,
        we_seconds,
        we_calls,
        stages: timer.report(),
        snapshots,
        notes: Vec::new(),
        final_params: model.params().to_vec(),
    })
}

fn reps(lb: &LossBatch, t: Transform) -> Vec<Vec<f64>> {
    match t {
        Transform::Loss => transform_loss(lb),
        Transform::Hidden => lb.hidden().iter().map(|h| l2_normalize(h.clone())).collect(),
    }
}

/// Weight estimation for one batch. Returns weights in batch order.
#[allow(clippy::too_many_arguments)]
fn estimate_batch(
    pool: &rayon::ThreadPool,
    policy: &WePolicy,
    warm: bool,
    treps: &[Vec<f64>],
    ys: &[usize],
    vreps: &[Vec<f64>],
    vys: &[usize],
    vidx: &[usize],
    gathered: &[f64],
    prior: Option<&ClassPriorRatio>,
    beta_store: &mut WeightStore,
    critics: &mut [Option<Critic>],
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let parametric = policy.kind.is_parametric();
    let start_for = |pos: &[usize], vpos: &[usize], scale: f64| -> Result<Vec<f64>> {
        if parametric {
            let ids: Vec<usize> = vpos.iter().map(|&p| vidx[p]).collect();
            if warm {
                beta_store.gather(&ids)
            } else {
                Ok(vec![1.0; ids.len()])
            }
        } else if warm {
            Ok(pos.iter().map(|&p| gathered[p] / scale).collect())
        } else {
            Ok(vec![1.0; pos.len()])
        }
    };

    let Some(prior) = prior else {
        let all: Vec<usize> = (0..treps.len()).collect();
        let vall: Vec<usize> = (0..vreps.len()).collect();
        let job = WeJob {
            train: treps.to_vec(),
            val: vreps.to_vec(),
            start: start_for(&all, &vall, 1.0)?,
            critic: critics[0].take(),
            rng: rng.fork(0),
            skip: false,
        };
        let out = estimate(job, policy)?;
        critics[0] = out.critic;
        if let Some(beta) = out.beta {
            beta_store.scatter(vidx, &beta)?;
        }
        return Ok(out.weights);
    };

    let tgroups = group_by_class(treps, ys);
    let vgroups = group_by_class(vreps, vys);
    let mut jobs = Vec::new();
    let mut meta = Vec::new();
    for g in &tgroups {
        let vg = vgroups.iter().find(|v| v.class == g.class);
        let vpos: Vec<usize> = vg.map(|v| v.positions.clone()).unwrap_or_default();
        let skip = g.positions.len() < 2 || vpos.len() < 2;
        let scale = prior.ratios[g.class];
        let start = if skip {
            g.positions.iter().map(|&p| gathered[p]).collect()
        } else {
            start_for(&g.positions, &vpos, scale)?
        };
        jobs.push(WeJob {
            train: g.reps.clone(),
            val: vg.map(|v| v.reps.clone()).unwrap_or_default(),
            start,
            critic: if skip { None } else { critics[g.class].take() },
            rng: rng.fork(g.class as u64),
            skip,
        });
        meta.push((g.class, g.positions.clone(), vpos, skip));
    }
    let outs: Vec<Result<WeOutcome>> = pool.install(|| jobs.into_par_iter().map(|j| estimate(j, policy)).collect());

    let mut weights = gathered.to_vec();
    let mut any = false;
    let mut first_err = None;
    for ((class, pos, vpos, skip), out) in meta.into_iter().zip(outs) {
        match out {
            Ok(o) => {
                if o.critic.is_some() {
                    critics[class] = o.critic;
                }
                if skip {
                    continue;
                }
                any = true;
                let r = prior.ratios[class];
                for (&p, w) in pos.iter().zip(&o.weights) {
                    weights[p] = w * r;
                }
                if let Some(beta) = o.beta {
                    let ids: Vec<usize> = vpos.iter().map(|&p| vidx[p]).collect();
                    beta_store.scatter(&ids, &beta)?;
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    if !any {
        weights.iter_mut().for_each(|w| *w = 0.0);
    }
    Ok(weights)
}
