//! A training problem: the data a trainer sees, the held-out sets that
//! stand in for the population objectives, and the fitted optimum values
//! every gap is measured against.

use serde::{Deserialize, Serialize};

use crate::augment::{estimate_delta_y, AugmentSource, BiasKind, SyntheticTask};
use crate::data::LabeledSet;
use crate::error::{check_len, invalid, Result};
use crate::linalg;
use crate::model::{label_grad, Arch, Predictor};

/// How the trainers draw augmented examples.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceKind {
    /// Fresh draws from the planted augmented law.
    #[default]
    Fresh,
    /// Draws with replacement from the stored pool.
    Pool,
    Mixup { k: usize, alpha: f64 },
    Contrast { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub arch: Arch,
    pub train: LabeledSet,
    pub source: AugmentSource,
    /// Held-out soft-labelled set defining `L`.
    pub eval: LabeledSet,
    /// Held-out soft-labelled set defining `L̃`.
    pub aug_eval: LabeledSet,
    pub l_floor: f64,
    pub ltilde_floor: f64,
    pub l_star: Vec<f64>,
    pub ltilde_star: Vec<f64>,
    pub delta_y: f64,
    pub delta_p: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 3000,
            grad_tol: 1e-8,
        }
    }
}

/// Mean cross-entropy over a set and its gradient.
pub fn full_loss_and_grad(model: &Predictor, set: &LabeledSet) -> (f64, Vec<f64>) {
    let mut g = vec![0.0; model.params().len()];
    let mut loss = 0.0;
    let c = 1.0 / set.len() as f64;
    for (x, y) in set.iter() {
        let s = label_grad(model, x, y);
        loss += s.loss;
        linalg::axpy(c, &s.grad, &mut g);
    }
    (loss * c, g)
}

pub fn full_loss(model: &Predictor, set: &LabeledSet) -> f64 {
    set.iter()
        .map(|(x, y)| linalg::dot(y, &linalg::neg_log_softmax_unchecked(&model.forward_unchecked(x))))
        .sum::<f64>()
        / set.len() as f64
}

/// Minimises the mean cross-entropy over `set` by full-batch gradient
/// descent with Barzilai-Borwein trial steps and Armijo backtracking.
/// Returns the value reached and the minimiser.
pub fn fit_floor(init: &Predictor, set: &LabeledSet, opts: FitOptions) -> Result<(f64, Vec<f64>)> {
    check_len(init.arch().dim(), set.dim(), "floor inputs")?;
    check_len(init.arch().classes(), set.classes(), "floor labels")?;
    let mut w = init.clone();
    let (mut f, mut g) = full_loss_and_grad(&w, set);
    let mut step = 1.0;
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    for _ in 0..opts.max_iter {
        let gn2 = linalg::dot(&g, &g);
        if gn2.sqrt() <= opts.grad_tol {
            break;
        }
        if let Some((pw, pg)) = &prev {
            let s = linalg::sub(w.params(), pw)?;
            let y = linalg::sub(&g, pg)?;
            let sy = linalg::dot(&s, &y);
            if sy > 0.0 {
                step = (linalg::dot(&s, &s) / sy).clamp(1e-6, 1e6);
            }
        }
        let mut accepted = None;
        for _ in 0..60 {
            let mut cand = w.params().to_vec();
            linalg::axpy(-step, &g, &mut cand);
            let cw = w.with_params(cand);
            let cf = full_loss(&cw, set);
            if cf <= f - 1e-4 * step * gn2 {
                accepted = Some((cw, cf));
                break;
            }
            step *= 0.5;
        }
        let Some((cw, cf)) = accepted else { break };
        let (nf, ng) = full_loss_and_grad(&cw, set);
        debug_assert!((nf - cf).abs() <= 1e-12 * nf.abs().max(1.0));
        prev = Some((w.params().to_vec(), g));
        w = cw;
        f = nf;
        g = ng;
    }
    Ok((f, w.into_params()))
}

impl Problem {
    /// Builds the problem a trainer sees from a generated task. Floors are
    /// fitted on the held-out sets, starting from the teacher's linear part
    /// when the student can represent it.
    pub fn from_task(task: &SyntheticTask, arch: Arch, source: SourceKind, fit: FitOptions) -> Result<Self> {
        check_len(task.config.dim, arch.dim(), "student input dimension")?;
        check_len(task.config.classes, arch.classes(), "student classes")?;
        let source = match source {
            SourceKind::Fresh => AugmentSource::Fresh(task.fresh.clone()),
            SourceKind::Pool => AugmentSource::Pool(task.augmented.clone()),
            SourceKind::Mixup { k, alpha } => {
                crate::augment::AugSpec::new(crate::augment::AugKind::MixupK { k, alpha }, 0)?;
                AugmentSource::Mixup {
                    base: task.original.clone(),
                    k,
                    alpha,
                }
            }
            SourceKind::Contrast { lo, hi } => {
                crate::augment::AugSpec::new(crate::augment::AugKind::Contrast { lo, hi }, 0)?;
                AugmentSource::Contrast {
                    base: task.original.clone(),
                    lo,
                    hi,
                }
            }
        };
        let start = match arch {
            Arch::SoftmaxLinear { .. } => Predictor::new(arch, task.true_params())?,
            Arch::Mlp { .. } => arch.zeros(),
        };
        let planted_exact = matches!(
            (arch, task.config.bias),
            (Arch::SoftmaxLinear { .. }, BiasKind::LabelMixing { .. })
        );
        let (l_floor, l_star) = if planted_exact {
            // soft labels are exactly softmax(W* x), so W* minimises every term
            (full_loss(&start, &task.eval), start.params().to_vec())
        } else {
            fit_floor(&start, &task.eval, fit)?
        };
        let (ltilde_floor, ltilde_star) = fit_floor(&start, &task.aug_eval, fit)?;
        let (delta_y, delta_p) = match task.config.bias {
            BiasKind::LabelMixing { .. } => {
                let pairs = task
                    .augmented_clean_labels
                    .iter_rows()
                    .zip(task.augmented.labels().iter_rows());
                (estimate_delta_y(pairs)?, None)
            }
            BiasKind::InputShift { delta_p, .. } => (0.0, Some(delta_p)),
        };
        Ok(Self {
            arch,
            train: task.original.clone(),
            source,
            eval: task.eval.clone(),
            aug_eval: task.aug_eval.clone(),
            l_floor,
            ltilde_floor,
            l_star,
            ltilde_star,
            delta_y,
            delta_p,
        })
    }

    pub fn validate(&self) -> Result<()> {
        for (name, set) in [("train", &self.train), ("eval", &self.eval), ("aug_eval", &self.aug_eval)] {
            if set.dim() != self.arch.dim() || set.classes() != self.arch.classes() {
                return Err(invalid(format!("{name} set does not match the architecture")));
            }
        }
        Ok(())
    }

    pub fn gap(&self, model: &Predictor) -> f64 {
        full_loss(model, &self.eval) - self.l_floor
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{gen_synthetic, TaskConfig};
    use crate::random::Rng;

    fn small(bias: BiasKind) -> TaskConfig {
        TaskConfig {
            dim: 3,
            classes: 3,
            n_train: 100,
            n_aug: 200,
            n_eval: 400,
            teacher_scale: 0.7,
            bias,
        }
    }

    #[test]
    fn planted_floor_is_a_minimum() {
        let task = gen_synthetic(&small(BiasKind::LabelMixing { delta_y: 0.3 }), &Rng::new(1)).unwrap();
        let arch = Arch::SoftmaxLinear { dim: 3, classes: 3 };
        let p = Problem::from_task(&task, arch, SourceKind::Fresh, FitOptions::default()).unwrap();
        let star = Predictor::new(arch, p.l_star.clone()).unwrap();
        let (_, g) = full_loss_and_grad(&star, &p.eval);
        assert!(linalg::norm(&g) < 1e-12);
        assert!((p.delta_y - 0.3).abs() < 1e-12);
        let lt_star = Predictor::new(arch, p.ltilde_star.clone()).unwrap();
        let (_, g) = full_loss_and_grad(&lt_star, &p.aug_eval);
        assert!(linalg::norm(&g) < 1e-7);
        // the teacher is worse on the biased objective than its own fit
        assert!(full_loss(&star, &p.aug_eval) >= p.ltilde_floor);
    }

    #[test]
    fn fitted_floor_beats_random_points() {
        let cfg = small(BiasKind::InputShift {
            delta_p: 0.2,
            curvature: 1.5,
        });
        let task = gen_synthetic(&cfg, &Rng::new(2)).unwrap();
        let arch = Arch::SoftmaxLinear { dim: 3, classes: 3 };
        let p = Problem::from_task(&task, arch, SourceKind::Pool, FitOptions::default()).unwrap();
        let mut rng = Rng::new(3);
        for _ in 0..20 {
            let w = arch.random(1.0, &mut rng);
            assert!(p.gap(&w) >= 0.0);
        }
    }
}
