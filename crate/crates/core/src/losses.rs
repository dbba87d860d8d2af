//! The corrected loss `ℓ_a(ỹ, s) = min_{‖z − ỹ‖ ≤ δ} ⟨z, p(s)⟩`, the
//! objectives built from it and the mixed stochastic gradient.
//!
//! Two feasible sets are offered. [`CorrectionSet::Ball`] is the plain
//! Euclidean ball with closed form `⟨ỹ, p⟩ − δ‖p‖`. Its minimiser may leave
//! the simplex and the loss is then unbounded below in `w` once `δ` exceeds
//! the smallest label entry, which makes training with large `δ` diverge.
//! [`CorrectionSet::BallSimplex`] intersects the ball with the simplex,
//! which keeps the loss a genuine cross-entropy of some label and bounded
//! below by zero.

use serde::{Deserialize, Serialize};

use crate::data::{check_simplex, LabeledSet, Provenance};
use crate::error::{invalid, Result};
use crate::linalg::{self, dot};
use crate::model::{self, label_grad, GradSample, Predictor, LABEL_TOL};

/// Below this norm of `p` the ball minimiser is undefined and `ỹ` is used.
const P_NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionSet {
    Ball,
    #[default]
    BallSimplex,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectedLossResult {
    pub value: f64,
    pub minimizer_z: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

fn check_delta(delta_y: f64) -> Result<()> {
    if !(delta_y >= 0.0 && delta_y.is_finite()) {
        return Err(invalid(format!("delta_y must be a nonnegative number, got {delta_y}")));
    }
    Ok(())
}

/// Closed form over the Euclidean ball.
pub fn loss_a(y_tilde: &[f64], scores: &[f64], delta_y: f64) -> Result<CorrectedLossResult> {
    loss_a_over(y_tilde, scores, delta_y, CorrectionSet::Ball)
}

pub fn loss_a_over(y_tilde: &[f64], scores: &[f64], delta_y: f64, set: CorrectionSet) -> Result<CorrectedLossResult> {
    check_delta(delta_y)?;
    crate::error::check_len(scores.len(), y_tilde.len(), "label vs scores")?;
    check_simplex(y_tilde, LABEL_TOL)?;
    let p = model::p_of_scores(scores)?;
    let z = minimizer(y_tilde, &p, delta_y, set);
    Ok(CorrectedLossResult {
        value: dot(&z, &p),
        minimizer_z: z,
        grad: None,
    })
}

pub(crate) fn minimizer(y: &[f64], p: &[f64], delta: f64, set: CorrectionSet) -> Vec<f64> {
    if delta == 0.0 {
        return y.to_vec();
    }
    match set {
        CorrectionSet::Ball => {
            let r = linalg::norm(p);
            if r < P_NORM_FLOOR {
                return y.to_vec();
            }
            y.iter().zip(p).map(|(yi, pi)| yi - delta * pi / r).collect()
        }
        CorrectionSet::BallSimplex => ball_simplex_minimizer(y, p, delta),
    }
}

/// Euclidean projection onto the probability simplex.
pub(crate) fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, s) in sorted.iter().enumerate() {
        cum += s;
        let t = (cum - 1.0) / (i + 1) as f64;
        if s - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `argmin ⟨z, p⟩` over the simplex intersected with the ball of radius
/// `delta` around `y` (which is itself on the simplex).
///
/// Optimality gives `z = Π_Δ(y − τ p)` for the `τ ≥ 0` that puts `z` on the
/// sphere, unless the best vertex is already inside the ball. The distance
/// `‖Π_Δ(y − τ p) − y‖` is nondecreasing in `τ`, and on each piece where the
/// support `S` is fixed its square is `C + A τ²`, so once the support at the
/// answer is known `τ` follows in closed form. The search only has to find
/// that support; the first guess assumes nothing is clipped and is usually
/// right.
fn ball_simplex_minimizer(y: &[f64], p: &[f64], delta: f64) -> Vec<f64> {
    let d2 = delta * delta;
    let j = (0..p.len()).min_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
    let vertex: Vec<f64> = (0..p.len()).map(|i| f64::from(i == j)).collect();
    if dist2(&vertex, y) <= d2 {
        return vertex;
    }
    let mean = p.iter().sum::<f64>() / p.len() as f64;
    let spread = p.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>().sqrt();
    if spread == 0.0 {
        return y.to_vec();
    }
    let at = |tau: f64| -> Vec<f64> {
        let v: Vec<f64> = y.iter().zip(p).map(|(yi, pi)| yi - tau * pi).collect();
        project_simplex(&v)
    };
    let (mut lo, mut hi) = (0.0_f64, f64::INFINITY);
    let mut guess = delta / spread;
    let mut z_hi = None;
    for _ in 0..400 {
        let z = at(guess);
        if let Some(zt) = solve_on_support(y, p, &z, d2) {
            return zt;
        }
        if dist2(&z, y) < d2 {
            lo = guess;
        } else {
            hi = guess;
            z_hi = Some(z);
        }
        if hi.is_finite() {
            if hi - lo <= 1e-15 * hi {
                break;
            }
            guess = 0.5 * (lo + hi);
        } else {
            guess *= 2.0;
        }
    }
    // only reached when several entries tie for the smallest p: the face
    // they span is optimal and the limit point is one of its members
    z_hi.unwrap_or_else(|| at(guess))
}

fn solve_on_support(y: &[f64], p: &[f64], z: &[f64], d2: f64) -> Option<Vec<f64>> {
    let support: Vec<usize> = (0..z.len()).filter(|&i| z[i] > 0.0).collect();
    let s = support.len() as f64;
    let a = (support.iter().map(|&i| y[i]).sum::<f64>() - 1.0) / s;
    let b = support.iter().map(|&i| p[i]).sum::<f64>() / s;
    let curv: f64 = support.iter().map(|&i| (b - p[i]).powi(2)).sum();
    if curv <= 0.0 {
        return None;
    }
    let outside: f64 = (0..y.len()).filter(|&i| z[i] <= 0.0).map(|i| y[i] * y[i]).sum();
    let rest = d2 - outside - s * a * a;
    if rest < 0.0 {
        return None;
    }
    let tau = (rest / curv).sqrt();
    let theta = a - tau * b;
    let mut zt = vec![0.0; y.len()];
    for i in 0..y.len() {
        let v = y[i] - tau * p[i] - theta;
        // the projection at tau must have exactly this support
        if (z[i] > 0.0) != (v > 0.0) {
            return None;
        }
        zt[i] = v.max(0.0);
    }
    Some(zt)
}

/// Envelope gradient `⟨z*, ∇p⟩` of the ball-corrected loss.
pub fn grad_a(model: &Predictor, x_tilde: &[f64], y_tilde: &[f64], delta_y: f64) -> Result<GradSample> {
    grad_a_over(model, x_tilde, y_tilde, delta_y, CorrectionSet::Ball)
}

pub fn grad_a_over(
    model: &Predictor,
    x_tilde: &[f64],
    y_tilde: &[f64],
    delta_y: f64,
    set: CorrectionSet,
) -> Result<GradSample> {
    check_delta(delta_y)?;
    let s = model.forward(x_tilde)?;
    let r = loss_a_over(y_tilde, &s, delta_y, set)?;
    Ok(label_grad(model, x_tilde, &r.minimizer_z))
}

pub(crate) fn grad_a_unchecked(model: &Predictor, x: &[f64], y: &[f64], delta: f64, set: CorrectionSet) -> GradSample {
    if delta == 0.0 {
        return label_grad(model, x, y);
    }
    let s = model.forward_unchecked(x);
    let p = linalg::neg_log_softmax_unchecked(&s);
    let z = minimizer(y, &p, delta, set);
    label_grad(model, x, &z)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixWeights {
    pub lambda: f64,
    pub delta_y: f64,
    pub m0: usize,
    #[serde(default)]
    pub correction: CorrectionSet,
}

impl MixWeights {
    pub fn new(lambda: f64, delta_y: f64, m0: usize) -> Result<Self> {
        let w = Self {
            lambda,
            delta_y,
            m0,
            correction: CorrectionSet::default(),
        };
        w.validate()?;
        Ok(w)
    }

    pub fn with_correction(mut self, correction: CorrectionSet) -> Self {
        self.correction = correction;
        self
    }

    /// Trainers also accept `λ = 0`, the pure corrected-loss limit.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(invalid("lambda out of (0,1]"));
        }
        check_delta(self.delta_y)?;
        if self.m0 == 0 {
            return Err(invalid("m0 must be at least 1"));
        }
        Ok(())
    }
}

pub type Batch<'a> = [(&'a [f64], &'a [f64])];

/// `λ · mean ∇ℓ(orig) + (1 − λ) · mean ∇ℓ_a(aug)`.
///
/// A side with zero weight may be empty.
pub fn combined_grad(model: &Predictor, orig_batch: &Batch, aug_batch: &Batch, weights: &MixWeights) -> Result<Vec<f64>> {
    weights.validate()?;
    let lam = weights.lambda;
    if lam > 0.0 && orig_batch.is_empty() {
        return Err(invalid("original batch is empty"));
    }
    if lam < 1.0 {
        if aug_batch.is_empty() {
            return Err(invalid("augmented batch is empty"));
        }
        if aug_batch.len() != weights.m0 {
            return Err(invalid(format!("augmented batch has {} examples, m0 is {}", aug_batch.len(), weights.m0)));
        }
    }
    let k = model.arch().classes();
    for (x, y) in orig_batch.iter().chain(aug_batch) {
        model.forward(x)?;
        crate::error::check_len(k, y.len(), "label")?;
        check_simplex(y, LABEL_TOL)?;
    }
    Ok(combined_grad_unchecked(model, orig_batch, aug_batch, weights))
}

pub(crate) fn combined_grad_unchecked(model: &Predictor, orig: &Batch, aug: &Batch, w: &MixWeights) -> Vec<f64> {
    let mut g = vec![0.0; model.params().len()];
    if w.lambda > 0.0 {
        let c = w.lambda / orig.len() as f64;
        for (x, y) in orig {
            linalg::axpy(c, &label_grad(model, x, y).grad, &mut g);
        }
    }
    if w.lambda < 1.0 {
        let c = (1.0 - w.lambda) / aug.len() as f64;
        for (x, y) in aug {
            linalg::axpy(c, &grad_a_unchecked(model, x, y, w.delta_y, w.correction).grad, &mut g);
        }
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// Original objective, on an original set.
    L,
    /// Augmented objective, on an augmented set.
    LTilde,
    /// Corrected augmented objective.
    La { delta_y: f64, correction: CorrectionSet },
    /// `λ L + (1 − λ) L_a`.
    Lc {
        lambda: f64,
        delta_y: f64,
        correction: CorrectionSet,
    },
}

fn pick<'a>(sets: &[&'a LabeledSet], prov: Provenance, kind: &str) -> Result<&'a LabeledSet> {
    let mut found = sets.iter().filter(|s| s.provenance() == prov);
    match (found.next(), found.next()) {
        (Some(s), None) => Ok(s),
        (None, _) => Err(invalid(format!("{kind} needs a {prov:?} dataset"))),
        _ => Err(invalid(format!("{kind} got more than one {prov:?} dataset"))),
    }
}

fn mean_loss(model: &Predictor, set: &LabeledSet, delta: f64, corr: CorrectionSet) -> Result<f64> {
    crate::error::check_len(model.arch().dim(), set.dim(), "dataset inputs")?;
    crate::error::check_len(model.arch().classes(), set.classes(), "dataset labels")?;
    let total: f64 = set
        .iter()
        .map(|(x, y)| {
            let p = linalg::neg_log_softmax_unchecked(&model.forward_unchecked(x));
            dot(&minimizer(y, &p, delta, corr), &p)
        })
        .sum();
    Ok(total / set.len() as f64)
}

/// Empirical mean of the per-example loss selected by `kind`.
///
/// `sets` must hold exactly the datasets the objective reads, told apart by
/// provenance: `L` reads an original set, `L̃` and `L_a` an augmented one,
/// and `L_c` one of each.
pub fn objective_value(model: &Predictor, sets: &[&LabeledSet], kind: ObjectiveKind) -> Result<f64> {
    for s in sets {
        if s.provenance() == Provenance::Original && !matches!(kind, ObjectiveKind::L | ObjectiveKind::Lc { .. }) {
            return Err(invalid(format!("{kind:?} cannot be evaluated on original data")));
        }
        if s.provenance() == Provenance::Augmented && matches!(kind, ObjectiveKind::L) {
            return Err(invalid("L cannot be evaluated on augmented data"));
        }
    }
    match kind {
        ObjectiveKind::L => mean_loss(model, pick(sets, Provenance::Original, "L")?, 0.0, CorrectionSet::Ball),
        ObjectiveKind::LTilde => mean_loss(model, pick(sets, Provenance::Augmented, "L_tilde")?, 0.0, CorrectionSet::Ball),
        ObjectiveKind::La { delta_y, correction } => {
            check_delta(delta_y)?;
            mean_loss(model, pick(sets, Provenance::Augmented, "L_a")?, delta_y, correction)
        }
        ObjectiveKind::Lc {
            lambda,
            delta_y,
            correction,
        } => {
            if !(lambda > 0.0 && lambda <= 1.0) {
                return Err(invalid("lambda out of (0,1]"));
            }
            check_delta(delta_y)?;
            let l = mean_loss(model, pick(sets, Provenance::Original, "L_c")?, 0.0, CorrectionSet::Ball)?;
            if lambda == 1.0 {
                return Ok(l);
            }
            let la = mean_loss(model, pick(sets, Provenance::Augmented, "L_c")?, delta_y, correction)?;
            Ok(lambda * l + (1.0 - lambda) * la)
        }
    }
}
