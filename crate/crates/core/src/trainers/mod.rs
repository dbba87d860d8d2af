//! Mini-batch SGD and the five training schemes.
//!
//! Every scheme is a sequence of stages, and every stage steps along the
//! mixed gradient `λ ∇ℓ(orig) + (1 − λ) ∇ℓ_a(aug)`: original training is
//! `λ = 1`, augmented training is `λ = 0, δ = 0`. Sharing one code path is
//! what makes the reductions between schemes hold bit for bit. Original
//! examples are drawn without replacement on their own RNG stream and
//! augmented examples on another, so a stage that skips one side leaves the
//! other side's draws untouched.

mod trace;

pub use trace::{read_records, write_records, TraceRecord, TrainTrace, STAGE_AUGMENTED, STAGE_INIT, STAGE_ORIGINAL};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{check_len, invalid, Error, Result};
use crate::linalg;
use crate::losses::{self, CorrectionSet, MixWeights};
use crate::model::Predictor;
use crate::problem::Problem;
use crate::random::Rng;

const STREAM_ORIGINAL: u64 = 1;
const STREAM_AUGMENTED: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Multiply by `decay` every `every` iterations.
    Step { decay: f64, every: usize },
    /// Multiply by `decay` at each listed fraction of the stage length.
    Milestones { decay: f64, at: Vec<f64> },
}

impl LrSchedule {
    /// Learning-rate multiplier at step `t` (0-based) of a stage of `len` steps.
    pub fn factor(&self, t: usize, len: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Step { decay, every } => decay.powi((t / (*every).max(1)) as i32),
            LrSchedule::Milestones { decay, at } => {
                let passed = at.iter().filter(|f| t as f64 >= *f * len as f64).count();
                decay.powi(passed as i32)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            LrSchedule::Constant => Ok(()),
            LrSchedule::Step { decay, every } => {
                if !(*decay > 0.0) || *every == 0 {
                    return Err(invalid("step schedule needs decay > 0 and every >= 1"));
                }
                Ok(())
            }
            LrSchedule::Milestones { decay, at } => {
                if !(*decay > 0.0) || at.iter().any(|f| !(0.0..=1.0).contains(f)) {
                    return Err(invalid("milestone schedule needs decay > 0 and fractions in [0, 1]"));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOpt {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
}

impl StageOpt {
    pub fn plain(lr: f64) -> Self {
        Self {
            lr,
            momentum: 0.0,
            weight_decay: 0.0,
            schedule: LrSchedule::Constant,
        }
    }

    /// Momentum 0.9, weight decay 5e-4 and a ÷10 decay at 30/60/90% of the stage.
    pub fn practical(lr: f64) -> Self {
        Self {
            lr,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: LrSchedule::Milestones {
                decay: 0.1,
                at: vec![0.3, 0.6, 0.9],
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("step size must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(invalid("weight decay must be nonnegative"));
        }
        self.schedule.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scheme {
    Original { iters: usize },
    Augmented { iters: usize },
    AugDrop { t1: usize, t2: usize },
    MixLoss { iters: usize, mix: MixWeights },
    WeMix { t1: usize, t2: usize, mix: MixWeights },
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Original { .. } => "original",
            Scheme::Augmented { .. } => "augmented",
            Scheme::AugDrop { .. } => "augdrop",
            Scheme::MixLoss { .. } => "mixloss",
            Scheme::WeMix { .. } => "wemix",
        }
    }

    pub fn total_iters(&self) -> usize {
        match self {
            Scheme::Original { iters } | Scheme::Augmented { iters } | Scheme::MixLoss { iters, .. } => *iters,
            Scheme::AugDrop { t1, t2 } | Scheme::WeMix { t1, t2, .. } => t1 + t2,
        }
    }

    /// The `(λ, δ)` pair the `L_c` trace column is evaluated with.
    pub fn mix(&self) -> Option<MixWeights> {
        match self {
            Scheme::MixLoss { mix, .. } | Scheme::WeMix { mix, .. } => Some(*mix),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub scheme: Scheme,
    /// Original-data batch size.
    pub batch: usize,
    /// Augmented batch size of augmented and AugDrop Stage-I steps.
    pub aug_batch: usize,
    /// Optimiser of single-stage schemes and of the first stage.
    pub stage1: StageOpt,
    /// Optimiser of the second stage.
    pub stage2: StageOpt,
    pub seed: u64,
    /// Values resolved from estimated constants, kept for the run summary.
    #[serde(default)]
    pub resolved: BTreeMap<String, f64>,
    /// Keep every k-th iterate in the trace (0 keeps none).
    #[serde(default)]
    pub snapshot_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.aug_batch == 0 {
            return Err(invalid("batch sizes must be at least 1"));
        }
        self.stage1.validate()?;
        self.stage2.validate()?;
        if let Some(mix) = self.scheme.mix() {
            mix.validate()?;
        }
        Ok(())
    }
}

/// Heavy-ball velocity carried between steps.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MomentumState {
    pub velocity: Vec<f64>,
}

/// `g ← g + wd·w`, `v ← βv + g`, `w ← w − ηv`.
pub fn sgd_step(
    w: &[f64],
    grad: &[f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    mut state: MomentumState,
) -> Result<(Vec<f64>, MomentumState)> {
    check_len(w.len(), grad.len(), "gradient")?;
    if !(lr > 0.0) {
        return Err(invalid(format!("step size must be positive, got {lr}")));
    }
    if !linalg::all_finite(grad) {
        return Err(Error::Degenerate("non-finite gradient".into()));
    }
    if state.velocity.is_empty() {
        state.velocity = vec![0.0; w.len()];
    }
    check_len(w.len(), state.velocity.len(), "momentum buffer")?;
    let mut out = w.to_vec();
    for i in 0..w.len() {
        let g = grad[i] + weight_decay * w[i];
        state.velocity[i] = momentum * state.velocity[i] + g;
        out[i] -= lr * state.velocity[i];
    }
    Ok((out, state))
}

/// A run that produced a non-finite value. The trace holds every record
/// taken before the failure.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainError {
    Invalid(Error),
    Diverged { iteration: usize, trace: Box<TrainTrace> },
}

impl std::fmt::Display for TrainError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainError::Invalid(e) => write!(f, "{e}"),
            TrainError::Diverged { iteration, .. } => write!(f, "run diverged at iteration {iteration}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<Error> for TrainError {
    fn from(e: Error) -> Self {
        TrainError::Invalid(e)
    }
}

pub type TrainResult = std::result::Result<TrainTrace, TrainError>;

/// Draws original examples without replacement, reshuffling once fewer than
/// a batch remain.
struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl EpochSampler {
    fn new(n: usize, rng: Rng) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            rng,
        }
    }

    fn next(&mut self, m: usize) -> &[usize] {
        let m = m.min(self.order.len());
        if self.order.len() - self.pos < m {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let s = &self.order[self.pos..self.pos + m];
        self.pos += m;
        s
    }
}

/// Computes the per-record quantities on the held-out sets.
struct Evaluator<'a> {
    eval: &'a LabeledSet,
    aug_eval: &'a LabeledSet,
    shared_inputs: bool,
    lambda: f64,
    delta: f64,
    correction: CorrectionSet,
    ltilde_floor: f64,
}

impl<'a> Evaluator<'a> {
    fn new(problem: &'a Problem, scheme: &Scheme) -> Self {
        let (lambda, delta, correction) = match scheme.mix() {
            Some(m) => (m.lambda, m.delta_y, m.correction),
            None => (0.0, 0.0, CorrectionSet::default()),
        };
        Self {
            eval: &problem.eval,
            aug_eval: &problem.aug_eval,
            shared_inputs: problem.eval.inputs() == problem.aug_eval.inputs(),
            lambda,
            delta,
            correction,
            ltilde_floor: problem.ltilde_floor,
        }
    }

    fn record(&self, model: &Predictor, t: usize, stage: u8) -> TraceRecord {
        let n = self.eval.len() as f64;
        let mut grad = vec![0.0; model.params().len()];
        let (mut l, mut lt, mut la) = (0.0, 0.0, 0.0);
        for i in 0..self.eval.len() {
            let (x, y) = (self.eval.x(i), self.eval.y(i));
            let s = model.forward_unchecked(x);
            let p = linalg::neg_log_softmax_unchecked(&s);
            l += linalg::dot(y, &p);
            let gs = crate::model::score_grad_for_label(&s, y);
            model.pull_back_into(x, &gs, 1.0 / n, &mut grad);
            if self.shared_inputs {
                let yt = self.aug_eval.y(i);
                lt += linalg::dot(yt, &p);
                la += self.corrected(yt, &p);
            }
        }
        if !self.shared_inputs {
            for (x, yt) in self.aug_eval.iter() {
                let p = linalg::neg_log_softmax_unchecked(&model.forward_unchecked(x));
                lt += linalg::dot(yt, &p);
                la += self.corrected(yt, &p);
            }
        }
        let na = self.aug_eval.len() as f64;
        let (l, lt) = (l / n, lt / na);
        let la = if self.delta == 0.0 { lt } else { la / na };
        let l_c = if self.lambda == 0.0 {
            la
        } else if self.lambda == 1.0 {
            l
        } else {
            self.lambda * l + (1.0 - self.lambda) * la
        };
        TraceRecord {
            t,
            stage,
            l,
            l_tilde: lt,
            l_c,
            grad_norm: linalg::norm(&grad),
            constraint: lt - self.ltilde_floor,
        }
    }

    fn corrected(&self, y: &[f64], p: &[f64]) -> f64 {
        if self.delta == 0.0 || self.lambda == 1.0 {
            return 0.0;
        }
        linalg::dot(&losses::minimizer(y, p, self.delta, self.correction), p)
    }
}

struct Stage<'a> {
    tag: u8,
    iters: usize,
    opt: &'a StageOpt,
    mix: MixWeights,
}

fn run(init: &Predictor, problem: &Problem, cfg: &TrainConfig, stages: &[Stage]) -> TrainResult {
    cfg.validate()?;
    problem.validate()?;
    if init.arch() != problem.arch {
        return Err(invalid("initial model does not match the problem architecture").into());
    }
    let eval = Evaluator::new(problem, &cfg.scheme);
    let mut orig = EpochSampler::new(problem.train.len(), Rng::with_stream(cfg.seed, STREAM_ORIGINAL));
    let mut aug_rng = Rng::with_stream(cfg.seed, STREAM_AUGMENTED);
    let mut model = init.clone();
    let mut trace = TrainTrace {
        scheme: cfg.scheme.name().to_string(),
        seed: cfg.seed,
        l_floor: problem.l_floor,
        records: Vec::with_capacity(cfg.scheme.total_iters() + 1),
        final_params: Vec::new(),
        resolved: cfg.resolved.clone(),
        snapshots: Vec::new(),
    };
    let first = eval.record(&model, 0, STAGE_INIT);
    if !first.is_finite() {
        trace.final_params = model.into_params();
        return Err(TrainError::Diverged {
            iteration: 0,
            trace: Box::new(trace),
        });
    }
    trace.records.push(first);
    if cfg.snapshot_every > 0 {
        trace.snapshots.push((0, model.params().to_vec()));
    }
    let mut t = 0;
    for stage in stages {
        let mut state = MomentumState::default();
        for k in 0..stage.iters {
            t += 1;
            let orig_batch: Vec<(&[f64], &[f64])> = if stage.mix.lambda > 0.0 {
                orig.next(cfg.batch)
                    .iter()
                    .map(|&i| (problem.train.x(i), problem.train.y(i)))
                    .collect()
            } else {
                Vec::new()
            };
            let aug_owned = if stage.mix.lambda < 1.0 {
                problem.source.draw_batch(stage.mix.m0, &mut aug_rng)
            } else {
                Vec::new()
            };
            let aug_batch: Vec<(&[f64], &[f64])> = aug_owned.iter().map(|(x, y)| (x.as_slice(), y.as_slice())).collect();
            let g = losses::combined_grad_unchecked(&model, &orig_batch, &aug_batch, &stage.mix);
            let lr = stage.opt.lr * stage.opt.schedule.factor(k, stage.iters);
            let step = sgd_step(model.params(), &g, lr, stage.opt.momentum, stage.opt.weight_decay, std::mem::take(&mut state));
            let rec = match step {
                Ok((w, s)) if linalg::all_finite(&w) => {
                    state = s;
                    model = model.with_params(w);
                    Some(eval.record(&model, t, stage.tag))
                }
                _ => None,
            };
            match rec {
                Some(r) if r.is_finite() => {
                    trace.records.push(r);
                    if cfg.snapshot_every > 0 && t % cfg.snapshot_every == 0 {
                        trace.snapshots.push((t, model.params().to_vec()));
                    }
                }
                _ => {
                    log::warn!("{} seed {} diverged at iteration {t}", trace.scheme, cfg.seed);
                    trace.final_params = model.into_params();
                    return Err(TrainError::Diverged {
                        iteration: t,
                        trace: Box::new(trace),
                    });
                }
            }
        }
    }
    trace.final_params = model.into_params();
    Ok(trace)
}

fn plain(lambda: f64, m0: usize) -> MixWeights {
    MixWeights {
        lambda,
        delta_y: 0.0,
        m0,
        correction: CorrectionSet::default(),
    }
}

fn expect_scheme(cfg: &TrainConfig, name: &str) -> Result<()> {
    if cfg.scheme.name() != name {
        return Err(invalid(format!("{name} trainer called with a {} config", cfg.scheme.name())));
    }
    Ok(())
}

/// Mini-batch SGD on the original training set.
pub fn train_original(init: &Predictor, problem: &Problem, cfg: &TrainConfig) -> TrainResult {
    expect_scheme(cfg, "original")?;
    let stages = [Stage {
        tag: STAGE_ORIGINAL,
        iters: cfg.scheme.total_iters(),
        opt: &cfg.stage1,
        mix: plain(1.0, 1),
    }];
    run(init, problem, cfg, &stages)
}

/// Mini-batch SGD on augmented examples only.
pub fn train_augmented(init: &Predictor, problem: &Problem, cfg: &TrainConfig) -> TrainResult {
    expect_scheme(cfg, "augmented")?;
    let stages = [Stage {
        tag: STAGE_AUGMENTED,
        iters: cfg.scheme.total_iters(),
        opt: &cfg.stage1,
        mix: plain(0.0, cfg.aug_batch),
    }];
    run(init, problem, cfg, &stages)
}

/// Augmented training for `T₁` steps, then original training for `T₂` steps
/// from where it stopped.
pub fn augdrop(init: &Predictor, problem: &Problem, cfg: &TrainConfig) -> TrainResult {
    let Scheme::AugDrop { t1, t2 } = cfg.scheme else {
        return Err(invalid(format!("augdrop trainer called with a {} config", cfg.scheme.name())).into());
    };
    let stages = [
        Stage {
            tag: STAGE_AUGMENTED,
            iters: t1,
            opt: &cfg.stage1,
            mix: plain(0.0, cfg.aug_batch),
        },
        Stage {
            tag: STAGE_ORIGINAL,
            iters: t2,
            opt: &cfg.stage2,
            mix: plain(1.0, 1),
        },
    ];
    run(init, problem, cfg, &stages)
}

/// SGD on `λ L + (1 − λ) L_a` with `m₀` augmented examples per step.
pub fn mixloss(init: &Predictor, problem: &Problem, cfg: &TrainConfig) -> TrainResult {
    let Scheme::MixLoss { iters, mix } = cfg.scheme else {
        return Err(invalid(format!("mixloss trainer called with a {} config", cfg.scheme.name())).into());
    };
    let stages = [Stage {
        tag: STAGE_AUGMENTED,
        iters,
        opt: &cfg.stage1,
        mix,
    }];
    run(init, problem, cfg, &stages)
}

/// Mixed-loss steps for `T₁` iterations, then original-data steps for `T₂`.
pub fn wemix(init: &Predictor, problem: &Problem, cfg: &TrainConfig) -> TrainResult {
    let Scheme::WeMix { t1, t2, mix } = cfg.scheme else {
        return Err(invalid(format!("wemix trainer called with a {} config", cfg.scheme.name())).into());
    };
    let stages = [
        Stage {
            tag: STAGE_AUGMENTED,
            iters: t1,
            opt: &cfg.stage1,
            mix,
        },
        Stage {
            tag: STAGE_ORIGINAL,
            iters: t2,
            opt: &cfg.stage2,
            mix: plain(1.0, 1),
        },
    ];
    run(init, problem, cfg, &stages)
}

/// Dispatches on the configured scheme.
pub fn train(init: &Predictor, problem: &Problem, cfg: &TrainConfig) -> TrainResult {
    match cfg.scheme {
        Scheme::Original { .. } => train_original(init, problem, cfg),
        Scheme::Augmented { .. } => train_augmented(init, problem, cfg),
        Scheme::AugDrop { .. } => augdrop(init, problem, cfg),
        Scheme::MixLoss { .. } => mixloss(init, problem, cfg),
        Scheme::WeMix { .. } => wemix(init, problem, cfg),
    }
}
