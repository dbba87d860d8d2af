//! Differentiable classifiers `f(x; w)` with exact cross-entropy values and
//! gradients.
//!
//! The cross-entropy is written as `ℓ(y, s) = ⟨y, p(s)⟩` with
//! `p = -log softmax(s)`. The loss is linear in the label, so the gradient
//! for any label vector `z` (on the simplex or not) is the pull-back of the
//! score gradient `softmax(s)·Σz − z` through the network.

use serde::{Deserialize, Serialize};

use crate::data::{check_simplex, LabeledSet};
use crate::error::{check_len, invalid, Result};
use crate::linalg::{self, dot, Mat};
use crate::random::Rng;

/// Labels may drift off the simplex by this much before `ce_loss` refuses them.
pub const LABEL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Arch {
    /// `s = W x`, `W` stored row-major as `classes × dim`.
    SoftmaxLinear { dim: usize, classes: usize },
    /// `s = W2 tanh(W1 x + b1) + b2`; parameters packed as `W1, b1, W2, b2`.
    Mlp {
        dim: usize,
        hidden: usize,
        classes: usize,
    },
}

impl Arch {
    pub fn dim(&self) -> usize {
        match *self {
            Arch::SoftmaxLinear { dim, .. } | Arch::Mlp { dim, .. } => dim,
        }
    }

    pub fn classes(&self) -> usize {
        match *self {
            Arch::SoftmaxLinear { classes, .. } | Arch::Mlp { classes, .. } => classes,
        }
    }

    pub fn param_count(&self) -> usize {
        match *self {
            Arch::SoftmaxLinear { dim, classes } => dim * classes,
            Arch::Mlp {
                dim,
                hidden,
                classes,
            } => hidden * dim + hidden + classes * hidden + classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes() < 2 {
            return Err(invalid("classifier needs at least two classes"));
        }
        if self.dim() == 0 {
            return Err(invalid("input dimension must be positive"));
        }
        if let Arch::Mlp { hidden: 0, .. } = self {
            return Err(invalid("hidden width must be positive"));
        }
        Ok(())
    }

    pub fn zeros(&self) -> Predictor {
        Predictor {
            arch: *self,
            params: vec![0.0; self.param_count()],
        }
    }

    /// Gaussian initialisation with standard deviation `scale / sqrt(fan_in)`.
    pub fn random(&self, scale: f64, rng: &mut Rng) -> Predictor {
        let params = match *self {
            Arch::SoftmaxLinear { dim, classes } => {
                rng.normal_vec(dim * classes, scale / (dim as f64).sqrt())
            }
            Arch::Mlp {
                dim,
                hidden,
                classes,
            } => {
                let mut p = rng.normal_vec(hidden * dim, scale / (dim as f64).sqrt());
                p.extend(std::iter::repeat_n(0.0, hidden));
                p.extend(rng.normal_vec(classes * hidden, scale / (hidden as f64).sqrt()));
                p.extend(std::iter::repeat_n(0.0, classes));
                p
            }
        };
        Predictor {
            arch: *self,
            params,
        }
    }
}

/// Per-example loss and parameter gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSample {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// An architecture together with a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictor {
    arch: Arch,
    params: Vec<f64>,
}

impl Predictor {
    pub fn new(arch: Arch, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        check_len(arch.param_count(), params.len(), "parameter vector")?;
        if !linalg::all_finite(&params) {
            return Err(invalid("non-finite parameters"));
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn into_params(self) -> Vec<f64> {
        self.params
    }

    /// Same architecture, different parameters (unchecked length is a bug).
    pub fn with_params(&self, params: Vec<f64>) -> Self {
        debug_assert_eq!(params.len(), self.params.len());
        Self {
            arch: self.arch,
            params,
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.arch.dim(), x.len(), "model input")?;
        if !linalg::all_finite(x) {
            return Err(invalid("non-finite model input"));
        }
        Ok(self.forward_unchecked(x))
    }

    pub(crate) fn forward_unchecked(&self, x: &[f64]) -> Vec<f64> {
        match self.arch {
            Arch::SoftmaxLinear { dim, classes } => (0..classes)
                .map(|c| dot(&self.params[c * dim..(c + 1) * dim], x))
                .collect(),
            Arch::Mlp { .. } => self.mlp_hidden_and_scores(x).1,
        }
    }

    fn mlp_hidden_and_scores(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let Arch::Mlp {
            dim,
            hidden,
            classes,
        } = self.arch
        else {
            unreachable!()
        };
        let (w1, rest) = self.params.split_at(hidden * dim);
        let (b1, rest) = rest.split_at(hidden);
        let (w2, b2) = rest.split_at(classes * hidden);
        let h: Vec<f64> = (0..hidden)
            .map(|j| (dot(&w1[j * dim..(j + 1) * dim], x) + b1[j]).tanh())
            .collect();
        let s = (0..classes)
            .map(|c| dot(&w2[c * hidden..(c + 1) * hidden], &h) + b2[c])
            .collect();
        (h, s)
    }

    /// `-log softmax(f(x; w))`.
    pub fn p_of(&self, x: &[f64]) -> Result<Vec<f64>> {
        let s = self.forward(x)?;
        Ok(linalg::neg_log_softmax_unchecked(&s))
    }

    /// Vector-Jacobian product: gradient w.r.t. parameters of `⟨score_grad, f(x; w)⟩`.
    pub(crate) fn pull_back(&self, x: &[f64], score_grad: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.params.len()];
        self.pull_back_into(x, score_grad, 1.0, &mut out);
        out
    }

    /// `out += alpha · Jᵀ score_grad`.
    pub(crate) fn pull_back_into(&self, x: &[f64], score_grad: &[f64], alpha: f64, out: &mut [f64]) {
        match self.arch {
            Arch::SoftmaxLinear { dim, .. } => {
                for (c, g) in score_grad.iter().enumerate() {
                    linalg::axpy(alpha * g, x, &mut out[c * dim..(c + 1) * dim]);
                }
            }
            Arch::Mlp {
                dim,
                hidden,
                classes,
            } => {
                let (h, _) = self.mlp_hidden_and_scores(x);
                let w2 = &self.params[hidden * dim + hidden..hidden * dim + hidden + classes * hidden];
                let (o_w1, rest) = out.split_at_mut(hidden * dim);
                let (o_b1, rest) = rest.split_at_mut(hidden);
                let (o_w2, o_b2) = rest.split_at_mut(classes * hidden);
                let mut gh = vec![0.0; hidden];
                for (c, g) in score_grad.iter().enumerate() {
                    let ag = alpha * g;
                    linalg::axpy(ag, &h, &mut o_w2[c * hidden..(c + 1) * hidden]);
                    o_b2[c] += ag;
                    linalg::axpy(*g, &w2[c * hidden..(c + 1) * hidden], &mut gh);
                }
                for j in 0..hidden {
                    let ga = gh[j] * (1.0 - h[j] * h[j]);
                    linalg::axpy(alpha * ga, x, &mut o_w1[j * dim..(j + 1) * dim]);
                    o_b1[j] += alpha * ga;
                }
            }
        }
    }

    /// `K × D` Jacobian of the scores.
    pub fn score_jacobian(&self, x: &[f64]) -> Result<Mat> {
        check_len(self.arch.dim(), x.len(), "model input")?;
        let k = self.arch.classes();
        let mut data = Vec::with_capacity(k * self.params.len());
        let mut e = vec![0.0; k];
        for c in 0..k {
            e[c] = 1.0;
            data.extend(self.pull_back(x, &e));
            e[c] = 0.0;
        }
        Mat::new(k, self.params.len(), data)
    }

    /// `K × D` Jacobian of `p(x; w)`: row `i` is `Σ_j (q_j − δ_ij) ∂s_j/∂w`.
    pub fn p_jacobian(&self, x: &[f64]) -> Result<Mat> {
        let s = self.forward(x)?;
        let q = linalg::softmax_unchecked(&s);
        let js = self.score_jacobian(x)?;
        let k = q.len();
        let mut a = Mat::zeros(k, k);
        for i in 0..k {
            for j in 0..k {
                a.set(i, j, q[j] - if i == j { 1.0 } else { 0.0 });
            }
        }
        a.matmul(&js)
    }
}

/// `p = -log softmax(scores)`.
pub fn p_of_scores(scores: &[f64]) -> Result<Vec<f64>> {
    linalg::softmax(scores)?;
    Ok(linalg::neg_log_softmax_unchecked(scores))
}

/// Cross-entropy `Σ_i y_i p_i(scores)`.
pub fn ce_loss(y: &[f64], scores: &[f64]) -> Result<f64> {
    check_len(scores.len(), y.len(), "label vs scores")?;
    check_simplex(y, LABEL_TOL)?;
    let p = p_of_scores(scores)?;
    Ok(dot(y, &p))
}

/// Score-space gradient of `⟨z, p(s)⟩` for an arbitrary label vector `z`.
pub(crate) fn score_grad_for_label(scores: &[f64], z: &[f64]) -> Vec<f64> {
    let q = linalg::softmax_unchecked(scores);
    let mass: f64 = z.iter().sum();
    q.iter().zip(z).map(|(qi, zi)| qi * mass - zi).collect()
}

/// Value and parameter gradient of `⟨z, p(x; w)⟩` with no simplex check on `z`.
pub(crate) fn label_grad(model: &Predictor, x: &[f64], z: &[f64]) -> GradSample {
    let s = model.forward_unchecked(x);
    let p = linalg::neg_log_softmax_unchecked(&s);
    let gs = score_grad_for_label(&s, z);
    GradSample {
        loss: dot(z, &p),
        grad: model.pull_back(x, &gs),
    }
}

pub fn ce_grad(model: &Predictor, x: &[f64], y: &[f64]) -> Result<GradSample> {
    check_len(model.arch().classes(), y.len(), "label")?;
    check_simplex(y, LABEL_TOL)?;
    model.forward(x)?;
    Ok(label_grad(model, x, y))
}

/// Largest spectral norm of the `p`-Jacobian over every (example, parameter) pair.
pub fn estimate_g(arch: Arch, dataset: &LabeledSet, params_cloud: &[Vec<f64>]) -> Result<f64> {
    if params_cloud.is_empty() {
        return Err(invalid("parameter cloud is empty"));
    }
    if dataset.is_empty() {
        return Err(invalid("dataset is empty"));
    }
    let mut best = 0.0_f64;
    for w in params_cloud {
        let model = Predictor::new(arch, w.clone())?;
        for (x, _) in dataset.iter() {
            best = best.max(model.p_jacobian(x)?.spectral_norm());
        }
    }
    Ok(best)
}
