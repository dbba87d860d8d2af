//! Empirical constants and the excess-risk bounds they feed.
//!
//! `G`, `L` and `μ` are only ever estimated over finite point clouds (the
//! iterates a run visited, plus perturbations), so every constant here is an
//! empirical surrogate for a quantity defined over all of parameter space.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{check_len, invalid, Error, Result};
use crate::linalg::{self, Mat};
use crate::model::{estimate_g, Arch, Predictor};
use crate::problem::{full_loss, full_loss_and_grad, Problem};
use crate::random::Rng;
use crate::trainers::{Scheme, TraceRecord, TrainTrace};

/// Points closer than this to the floor carry no PL information.
pub const MIN_GAP: f64 = 1e-10;
/// Pairs closer than this carry no curvature information.
pub const MIN_PAIR_DISTANCE: f64 = 1e-8;

/// A differentiable objective over flat parameter vectors.
pub trait DiffObjective: Sync {
    fn dim(&self) -> usize;
    fn value(&self, w: &[f64]) -> f64;
    fn grad(&self, w: &[f64]) -> Vec<f64>;

    fn value_and_grad(&self, w: &[f64]) -> (f64, Vec<f64>) {
        (self.value(w), self.grad(w))
    }
}

/// Mean cross-entropy of a model family over a labelled set.
#[derive(Debug, Clone, Copy)]
pub struct DatasetObjective<'a> {
    pub arch: Arch,
    pub set: &'a LabeledSet,
}

impl<'a> DatasetObjective<'a> {
    pub fn new(arch: Arch, set: &'a LabeledSet) -> Result<Self> {
        arch.validate()?;
        check_len(arch.dim(), set.dim(), "objective inputs")?;
        check_len(arch.classes(), set.classes(), "objective labels")?;
        if set.is_empty() {
            return Err(invalid("objective over an empty set"));
        }
        Ok(Self { arch, set })
    }

    fn model(&self, w: &[f64]) -> Predictor {
        Predictor::new(self.arch, w.to_vec()).expect("parameter vector of the right length")
    }
}

impl DiffObjective for DatasetObjective<'_> {
    fn dim(&self) -> usize {
        self.arch.param_count()
    }

    fn value(&self, w: &[f64]) -> f64 {
        full_loss(&self.model(w), self.set)
    }

    fn grad(&self, w: &[f64]) -> Vec<f64> {
        full_loss_and_grad(&self.model(w), self.set).1
    }

    fn value_and_grad(&self, w: &[f64]) -> (f64, Vec<f64>) {
        full_loss_and_grad(&self.model(w), self.set)
    }
}

/// `½‖Aw − b‖²`, the calibration objective with a known spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    pub a: Mat,
    pub b: Vec<f64>,
}

impl Quadratic {
    pub fn new(a: Mat, b: Vec<f64>) -> Result<Self> {
        check_len(a.rows(), b.len(), "quadratic offset")?;
        Ok(Self { a, b })
    }

    fn residual(&self, w: &[f64]) -> Vec<f64> {
        let mut r = self.a.matvec(w).expect("dimension checked by caller");
        linalg::axpy(-1.0, &self.b, &mut r);
        r
    }
}

impl DiffObjective for Quadratic {
    fn dim(&self) -> usize {
        self.a.cols()
    }

    fn value(&self, w: &[f64]) -> f64 {
        let r = self.residual(w);
        0.5 * linalg::dot(&r, &r)
    }

    fn grad(&self, w: &[f64]) -> Vec<f64> {
        self.a.t_matvec(&self.residual(w)).expect("residual has one entry per row")
    }
}

/// `‖∇‖² / (2 gap)`, or `None` when the point sits on the floor.
pub fn pl_ratio(grad_norm: f64, gap: f64) -> Option<f64> {
    (gap >= MIN_GAP).then(|| grad_norm * grad_norm / (2.0 * gap))
}

fn min_ratio(ratios: impl Iterator<Item = Option<f64>>, n: usize) -> Result<f64> {
    ratios
        .flatten()
        .reduce(f64::min)
        .ok_or_else(|| Error::UndefinedEstimate(format!("all {n} points are at the floor")))
}

/// Smallest PL ratio over a point set.
pub fn estimate_mu<O: DiffObjective>(objective: &O, floor: f64, points: &[Vec<f64>]) -> Result<f64> {
    if points.is_empty() {
        return Err(invalid("empty point set"));
    }
    for w in points {
        check_len(objective.dim(), w.len(), "point")?;
    }
    let ratios: Vec<Option<f64>> = points
        .par_iter()
        .map(|w| {
            let (v, g) = objective.value_and_grad(w);
            pl_ratio(linalg::norm(&g), v - floor)
        })
        .collect();
    min_ratio(ratios.into_iter(), points.len())
}

/// Same estimate from trace records, which already store `L` and `‖∇L‖`.
pub fn estimate_mu_from_records<'a>(records: impl IntoIterator<Item = &'a TraceRecord>, floor: f64) -> Result<f64> {
    let ratios: Vec<Option<f64>> = records.into_iter().map(|r| pl_ratio(r.grad_norm, r.l - floor)).collect();
    if ratios.is_empty() {
        return Err(invalid("no records"));
    }
    let n = ratios.len();
    min_ratio(ratios.into_iter(), n)
}

/// Largest gradient difference quotient over sampled pairs.
pub fn estimate_l_smooth<O: DiffObjective>(objective: &O, pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    for (w, u) in pairs {
        check_len(objective.dim(), w.len(), "pair point")?;
        check_len(objective.dim(), u.len(), "pair point")?;
    }
    let quotients: Vec<Option<f64>> = pairs
        .par_iter()
        .map(|(w, u)| {
            let d = linalg::distance(w, u).expect("lengths checked");
            if d < MIN_PAIR_DISTANCE {
                return None;
            }
            let dg = linalg::distance(&objective.grad(w), &objective.grad(u)).expect("gradients share a length");
            Some(dg / d)
        })
        .collect();
    quotients
        .into_iter()
        .flatten()
        .reduce(f64::max)
        .ok_or_else(|| Error::UndefinedEstimate("no pair is far enough apart".into()))
}

fn positive_mu(mu: f64) -> Result<()> {
    if mu > 0.0 && mu.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("mu must be positive, got {mu}")))
    }
}

/// `δ_y² G² / (2μ)`.
pub fn gamma0(delta_y: f64, g: f64, mu: f64) -> Result<f64> {
    positive_mu(mu)?;
    Ok(delta_y * delta_y * g * g / (2.0 * mu))
}

/// `δ_P G² / μ`.
pub fn gamma1(delta_p: f64, g: f64, mu: f64) -> Result<f64> {
    positive_mu(mu)?;
    Ok(delta_p * g * g / mu)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Membership {
    pub member: bool,
    /// `γ − (L̃(w) − floor)`; infinite for the `γ = ∞` sentinel.
    pub margin: f64,
}

/// Whether `w` lies in `{w : L̃(w) − L̃_floor ≤ γ}`.
pub fn in_constraint_set(w: &Predictor, gamma: f64, ltilde_floor: f64, aug_eval: &LabeledSet) -> Result<Membership> {
    check_len(w.arch().dim(), aug_eval.dim(), "augmented inputs")?;
    check_len(w.arch().classes(), aug_eval.classes(), "augmented labels")?;
    if gamma.is_nan() {
        return Err(invalid("gamma is NaN"));
    }
    if gamma == f64::INFINITY {
        return Ok(Membership {
            member: true,
            margin: f64::INFINITY,
        });
    }
    let margin = gamma - (full_loss(w, aug_eval) - ltilde_floor);
    Ok(Membership {
        member: margin >= 0.0,
        margin,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantEstimates {
    #[serde(rename = "G")]
    pub g: f64,
    #[serde(rename = "L_smooth")]
    pub l_smooth: f64,
    pub mu: f64,
    /// `μ` over the restricted point set; equals `mu` when none was given.
    pub mu_restricted: f64,
    pub delta_y: f64,
    #[serde(rename = "delta_P")]
    pub delta_p: Option<f64>,
    #[serde(rename = "L_floor")]
    pub l_floor: f64,
    #[serde(rename = "Ltilde_floor")]
    pub ltilde_floor: f64,
    /// `L(w₁) − L_floor`.
    pub initial_gap: f64,
    /// `L̃(w₁) − L̃_floor`.
    pub initial_aug_gap: f64,
    pub n: usize,
}

impl ConstantEstimates {
    pub fn kappa(&self) -> f64 {
        self.l_smooth / self.mu
    }

    /// `L(w₁)` itself, which the mixed-loss bound uses.
    pub fn initial_loss(&self) -> f64 {
        self.l_floor + self.initial_gap
    }

    pub fn is_label_preserving(&self) -> bool {
        self.delta_p.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.g,
            self.l_smooth,
            self.mu,
            self.mu_restricted,
            self.delta_y,
            self.delta_p.unwrap_or(0.0),
            self.l_floor,
            self.ltilde_floor,
            self.initial_gap,
            self.initial_aug_gap,
        ];
        if vals.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(invalid("constants must be finite and nonnegative"));
        }
        if self.n == 0 {
            return Err(invalid("n must be at least 1"));
        }
        Ok(())
    }
}

/// How many random perturbations and pairs the estimators sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CloudOptions {
    pub perturbations: usize,
    pub perturb_scale: f64,
    /// Examples per point used for `G`; the Jacobian bound is per example.
    pub g_examples: usize,
    pub g_points: usize,
}

impl Default for CloudOptions {
    fn default() -> Self {
        Self {
            perturbations: 64,
            perturb_scale: 0.05,
            g_examples: 200,
            g_points: 16,
        }
    }
}

fn spread(points: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    if points.len() <= k {
        return points.to_vec();
    }
    (0..k).map(|i| points[i * (points.len() - 1) / (k - 1).max(1)].clone()).collect()
}

/// Estimates every constant over `cloud` (visited iterates, first one being
/// `w₁`). `restricted` is a subset of the cloud, e.g. Stage-II iterates, for
/// the restricted PL constant.
pub fn estimate_constants(
    problem: &Problem,
    cloud: &[Vec<f64>],
    restricted: Option<&[Vec<f64>]>,
    opts: CloudOptions,
    rng: &mut Rng,
) -> Result<ConstantEstimates> {
    let first = cloud.first().ok_or_else(|| invalid("empty iterate cloud"))?;
    let obj = DatasetObjective::new(problem.arch, &problem.eval)?;
    let aug_obj = DatasetObjective::new(problem.arch, &problem.aug_eval)?;
    let mu = estimate_mu(&obj, problem.l_floor, cloud)?;
    let mu_restricted = match restricted {
        Some(r) => estimate_mu(&obj, problem.l_floor, r)?,
        None => mu,
    };
    let mut pairs = Vec::with_capacity(opts.perturbations + cloud.len());
    for w in cloud.windows(2) {
        pairs.push((w[0].clone(), w[1].clone()));
    }
    for _ in 0..opts.perturbations {
        let base = &cloud[rng.below(cloud.len())];
        let mut u = base.clone();
        linalg::axpy(1.0, &rng.normal_vec(u.len(), opts.perturb_scale), &mut u);
        pairs.push((base.clone(), u));
    }
    let l_smooth = estimate_l_smooth(&obj, &pairs)?;
    let g_set = problem.train.head(opts.g_examples.max(1));
    let g = estimate_g(problem.arch, &g_set, &spread(cloud, opts.g_points.max(1)))?;
    let c = ConstantEstimates {
        g,
        l_smooth,
        mu,
        mu_restricted,
        delta_y: problem.delta_y,
        delta_p: problem.delta_p,
        l_floor: problem.l_floor,
        ltilde_floor: problem.ltilde_floor,
        initial_gap: (obj.value(first) - problem.l_floor).max(0.0),
        initial_aug_gap: (aug_obj.value(first) - problem.ltilde_floor).max(0.0),
        n: problem.train.len(),
    };
    Ok(c)
}

/// Points for estimating constants before any run: the start, both fitted
/// optima, the segments between them, and perturbations around all of it.
pub fn pilot_cloud(problem: &Problem, init: &Predictor, count: usize, scale: f64, rng: &mut Rng) -> Vec<Vec<f64>> {
    let anchors = [init.params().to_vec(), problem.l_star.clone(), problem.ltilde_star.clone()];
    let mut cloud = anchors.to_vec();
    for s in 1..8 {
        let f = s as f64 / 8.0;
        for target in &anchors[1..] {
            let p: Vec<f64> = anchors[0].iter().zip(target).map(|(a, b)| a + f * (b - a)).collect();
            cloud.push(p);
        }
    }
    let base_len = cloud.len();
    for _ in 0..count {
        let mut w = cloud[rng.below(base_len)].clone();
        linalg::axpy(1.0, &rng.normal_vec(w.len(), scale), &mut w);
        cloud.push(w);
    }
    cloud
}

/// `log x` with the argument clamped at `e`, so `1 + log` stays ≥ 2.
fn clamped_log(x: f64) -> f64 {
    if x.is_nan() {
        return 1.0;
    }
    x.max(std::f64::consts::E).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundEntry {
    pub value: Option<f64>,
    /// Whether the bound is the one that governs the run's scheme.
    pub applies: bool,
    /// `measured ≤ value`; false when the bound could not be evaluated.
    pub satisfied: bool,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub scheme: String,
    pub measured_final_gap: f64,
    pub measured_initial_gap: f64,
    pub bounds: BTreeMap<String, BoundEntry>,
}

impl BoundReport {
    pub fn get(&self, name: &str) -> Option<&BoundEntry> {
        self.bounds.get(name)
    }
}

/// Bound values for the given constants, mixing weight and training-set
/// size. A missing or degenerate constant yields an error message instead
/// of a value.
pub fn bound_values(c: &ConstantEstimates, lambda: Option<f64>) -> BTreeMap<&'static str, std::result::Result<f64, String>> {
    let n = c.n as f64;
    let (g2, l, mu) = (c.g * c.g, c.l_smooth, c.mu);
    let need = |ok: bool, what: &str| if ok { Ok(()) } else { Err(format!("{what} is not positive")) };
    let base = || -> std::result::Result<(), String> {
        need(mu > 0.0, "mu")?;
        need(l > 0.0, "L")?;
        need(g2 > 0.0, "G")
    };
    let mut out = BTreeMap::new();
    out.insert("lemma2", need(mu > 0.0, "mu").map(|_| c.delta_y * c.delta_y * g2 / mu));
    out.insert(
        "original",
        base().map(|_| {
            let k = 8.0 * n * mu * mu / (g2 * l);
            (1.0 + clamped_log(k * c.initial_gap)) / k
        }),
    );
    out.insert(
        "thm1",
        base().and_then(|_| need(c.mu_restricted > 0.0, "restricted mu")).map(|_| {
            let k = 4.0 * n * c.mu_restricted * c.mu_restricted / (g2 * l);
            (1.0 + clamped_log(k * c.initial_gap)) / k
        }),
    );
    out.insert(
        "thm2",
        base().and_then(|_| match lambda {
            Some(lam) if lam > 0.0 && lam <= 1.0 => {
                let arg = n * mu * mu * c.initial_loss() / (lam * lam * l * g2);
                Ok(lam * l * g2 / (n * mu * mu) * (1.0 + 5.0 * clamped_log(arg)))
            }
            Some(lam) => Err(format!("lambda {lam} outside (0,1]")),
            None => Err("no mixing weight".into()),
        }),
    );
    out.insert(
        "lemma3",
        need(mu > 0.0, "mu").and_then(|_| c.delta_p.ok_or_else(|| "no delta_P".to_string()).map(|dp| 4.0 * dp * g2 / mu)),
    );
    out.insert(
        "thm3",
        base().and_then(|_| need(c.mu_restricted > 0.0, "restricted mu")).map(|_| {
            let k = 8.0 * n * c.mu_restricted * c.mu_restricted / (g2 * l);
            (1.0 + clamped_log(k * c.initial_gap)) / k
        }),
    );
    out
}

fn governing(scheme: &Scheme, preserving: bool) -> &'static [&'static str] {
    match (scheme, preserving) {
        (Scheme::Original { .. }, _) => &["original"],
        (Scheme::Augmented { .. }, false) => &["lemma2"],
        (Scheme::Augmented { .. }, true) => &["lemma3"],
        (Scheme::AugDrop { .. }, false) => &["thm1"],
        (Scheme::AugDrop { .. }, true) => &["thm3"],
        (Scheme::MixLoss { .. }, _) => &["thm2"],
        (Scheme::WeMix { .. }, false) => &["thm1", "thm2"],
        (Scheme::WeMix { .. }, true) => &["thm2", "thm3"],
    }
}

/// Evaluates every bound and compares it with the run's final gap.
pub fn bound_report(constants: &ConstantEstimates, run: &TrainTrace, scheme: &Scheme) -> BoundReport {
    let lambda = scheme.mix().map(|m| m.lambda);
    let measured = run.final_gap();
    let applies = governing(scheme, constants.is_label_preserving());
    let bounds = bound_values(constants, lambda)
        .into_iter()
        .map(|(name, v)| {
            let entry = match v {
                Ok(value) => BoundEntry {
                    value: Some(value),
                    applies: applies.contains(&name),
                    satisfied: measured <= value,
                    note: None,
                },
                Err(why) => BoundEntry {
                    value: None,
                    applies: applies.contains(&name),
                    satisfied: false,
                    note: Some(format!("not evaluable: {why}")),
                },
            };
            (name.to_string(), entry)
        })
        .collect();
    BoundReport {
        scheme: scheme.name().to_string(),
        measured_final_gap: measured,
        measured_initial_gap: run.initial_gap(),
        bounds,
    }
}

/// Step sizes, batch sizes and stage lengths resolved from the constants.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResolvedSchedule {
    pub values: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

impl ResolvedSchedule {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.get(key).copied()
    }

    fn set(&mut self, key: &str, v: f64) {
        self.values.insert(key.to_string(), v);
    }

    fn warn(&mut self, msg: String) {
        log::warn!("{msg}");
        self.warnings.push(msg);
    }

    /// Uses `v` when it is positive and finite, the cap otherwise.
    fn positive_or(&mut self, key: &str, v: f64, cap: f64) {
        if v > 0.0 && v.is_finite() {
            self.set(key, v);
        } else {
            self.warn(format!("{key} formula gave {v}; using {cap}"));
            self.set(key, cap);
        }
    }
}

/// Smallest integer not below `x`, robust to values a rounding error above
/// an integer.
pub fn batch_ceil(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r
    } else {
        x.ceil()
    }
}

/// `(1 + √(3 log(2N/δ)))² · c / b`.
pub fn concentration_batch(count: f64, delta: f64, c: f64, bias: f64) -> f64 {
    let root = 1.0 + (3.0 * (2.0 * count / delta).ln()).sqrt();
    root * root * c / bias
}

/// Step sizes and batch sizes the theory prescribes for `scheme`.
/// `delta` is the failure probability of the high-probability statements.
pub fn theory_stepsizes(c: &ConstantEstimates, scheme: &Scheme, n: usize, lambda: Option<f64>, delta: f64) -> Result<ResolvedSchedule> {
    c.validate()?;
    positive_mu(c.mu)?;
    if !(c.l_smooth > 0.0) || !(c.g > 0.0) {
        return Err(invalid("L and G must be positive"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid("failure probability must lie in (0,1)"));
    }
    let nf = n as f64;
    let (g2, l, mu) = (c.g * c.g, c.l_smooth, c.mu);
    let cap = 1.0 / (2.0 * l);
    let mut out = ResolvedSchedule::default();
    for (k, v) in [("G", c.g), ("L_smooth", l), ("mu", mu), ("mu_restricted", c.mu_restricted), ("n", nf)] {
        out.set(k, v);
    }
    // the bias entering the batch-size formulas
    let (bias_sq, preserving) = match c.delta_p {
        Some(dp) => (dp, true),
        None => (c.delta_y * c.delta_y, false),
    };
    let stage2_eta = |out: &mut ResolvedSchedule, mu_s: f64| {
        if !(mu_s > 0.0) {
            out.warn(format!("restricted mu is {mu_s}; eta2 falls back to 1/(2L)"));
            out.set("eta2", cap);
            return;
        }
        let eta = (8.0 * nf * mu_s * mu_s * c.initial_gap / (g2 * l)).ln() / (2.0 * nf * mu_s);
        out.positive_or("eta2", eta, cap);
    };
    match scheme {
        Scheme::Original { .. } => {
            let eta = (8.0 * nf * mu * mu * c.initial_gap / (g2 * l)).ln() / (2.0 * nf * mu);
            out.positive_or("eta", eta, cap);
        }
        Scheme::Augmented { .. } => {
            out.set("eta", 1.0 / l);
            let m0 = if preserving { 4.0 * l / bias_sq } else { 8.0 / bias_sq };
            out.positive_or("m0", batch_ceil(m0), nf);
        }
        Scheme::AugDrop { .. } | Scheme::WeMix { .. } => {
            out.set("eta1", 1.0 / l);
            let t1 = (l / mu) * (2.0 * c.initial_aug_gap * mu / (bias_sq * g2)).ln();
            if t1 >= 1.0 && t1.is_finite() {
                out.set("T1", t1.ceil());
            } else {
                out.warn(format!("T1 formula gave {t1}; using 1"));
                out.set("T1", 1.0);
            }
            let t1 = out.get("T1").unwrap_or(1.0);
            out.set("m1", batch_ceil(concentration_batch(t1, delta, 8.0, bias_sq)));
            let m2_const = if preserving { 8.0 } else { 4.0 };
            let m2 = batch_ceil(concentration_batch(nf, delta, m2_const, bias_sq));
            if m2 > nf {
                out.warn(format!("m2 = {m2} exceeds n = {n}; capped at n"));
                out.set("m2", nf);
            } else {
                out.set("m2", m2);
            }
            out.set("T2", (nf / out.get("m2").unwrap_or(nf)).floor().max(1.0));
            stage2_eta(&mut out, c.mu_restricted);
            if let Scheme::WeMix { mix, .. } = scheme {
                mixed_stage(&mut out, c, lambda.unwrap_or(mix.lambda), nf)?;
            }
        }
        Scheme::MixLoss { mix, .. } => mixed_stage(&mut out, c, lambda.unwrap_or(mix.lambda), nf)?,
    }
    Ok(out)
}

fn mixed_stage(out: &mut ResolvedSchedule, c: &ConstantEstimates, lambda: f64, nf: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(invalid("lambda out of (0,1]"));
    }
    let (g2, l, mu) = (c.g * c.g, c.l_smooth, c.mu);
    let cap = 1.0 / (2.0 * l);
    out.set("lambda", lambda);
    out.set("m0", batch_ceil(72.0 * (1.0 - lambda).powi(2) / (lambda * lambda)).max(1.0));
    let eta = (nf * mu * mu * c.initial_loss() / (lambda * lambda * l * g2)).ln() / (mu * nf);
    if eta > cap {
        out.warn(format!("eta = {eta} exceeds 1/(2L); capped"));
        out.set("eta", cap);
    } else {
        out.positive_or("eta", eta, cap);
    }
    Ok(())
}
