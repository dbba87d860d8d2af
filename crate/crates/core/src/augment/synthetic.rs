//! Planted-teacher classification tasks whose augmentation bias is known
//! exactly.
//!
//! Inputs are standard Gaussian and labels are drawn from `softmax(W* x)`.
//! In label-mixing mode the augmented labels are the clean labels moved a
//! fixed distance `δ_y`. In input-shift mode the labels keep their
//! conditional law and the augmented inputs come from a Gaussian whose mean
//! is moved so that `KL(P_x ‖ P_x̃) = δ_P`. The teacher then carries a
//! quadratic term along the shift direction, which a linear student cannot
//! represent, so moving the inputs actually changes the best fit.

use serde::{Deserialize, Serialize};

use super::{bias_label, contrast_unchecked, mixup_k};
use crate::data::{LabeledSet, Provenance};
use crate::error::{invalid, Result};
use crate::linalg::{self, Mat};
use crate::random::{sample_dirichlet, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BiasKind {
    LabelMixing { delta_y: f64 },
    InputShift { delta_p: f64, curvature: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub dim: usize,
    pub classes: usize,
    pub n_train: usize,
    /// Size of the stored augmented pool.
    pub n_aug: usize,
    /// Size of the soft-labelled sets used to evaluate population objectives.
    pub n_eval: usize,
    pub teacher_scale: f64,
    pub bias: BiasKind,
}

impl TaskConfig {
    /// The d=10, K=5, n=2000 label-mixing task with an augmented pool of 20n.
    pub fn canonical(delta_y: f64) -> Self {
        Self {
            dim: 10,
            classes: 5,
            n_train: 2000,
            n_aug: 40_000,
            n_eval: 2000,
            teacher_scale: 0.7,
            bias: BiasKind::LabelMixing { delta_y },
        }
    }

    pub fn input_shift(delta_p: f64) -> Self {
        Self {
            bias: BiasKind::InputShift {
                delta_p,
                curvature: 1.5,
            },
            ..Self::canonical(0.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.classes < 2 {
            return Err(invalid("task needs dim >= 1 and classes >= 2"));
        }
        if self.n_train == 0 || self.n_aug == 0 || self.n_eval == 0 {
            return Err(invalid("task set sizes must be positive"));
        }
        if !(self.teacher_scale >= 0.0 && self.teacher_scale.is_finite()) {
            return Err(invalid("teacher_scale must be nonnegative"));
        }
        match self.bias {
            BiasKind::LabelMixing { delta_y } => {
                super::check_delta_y(delta_y)?;
                for c in 0..self.classes {
                    bias_label(&unit(self.classes, c), delta_y)?;
                }
            }
            BiasKind::InputShift { delta_p, curvature } => {
                if !(delta_p >= 0.0 && delta_p.is_finite()) {
                    return Err(invalid(format!("delta_P must be nonnegative, got {delta_p}")));
                }
                if !curvature.is_finite() {
                    return Err(invalid("curvature must be finite"));
                }
            }
        }
        Ok(())
    }
}

fn unit(k: usize, i: usize) -> Vec<f64> {
    let mut e = vec![0.0; k];
    e[i] = 1.0;
    e
}

/// Ground-truth scoring rule `s(x) = W* x + a·v·(eᵀx)²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Teacher {
    weights: Mat,
    quadratic: Option<(Vec<f64>, Vec<f64>, f64)>,
}

impl Teacher {
    pub fn linear(weights: Mat) -> Self {
        Self {
            weights,
            quadratic: None,
        }
    }

    pub fn weights(&self) -> &Mat {
        &self.weights
    }

    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        let mut s: Vec<f64> = self.weights.iter_rows().map(|r| linalg::dot(r, x)).collect();
        if let Some((e, v, a)) = &self.quadratic {
            let t = linalg::dot(e, x);
            linalg::axpy(a * t * t, v, &mut s);
        }
        s
    }

    pub fn probs(&self, x: &[f64]) -> Vec<f64> {
        linalg::softmax_unchecked(&self.scores(x))
    }

    pub fn sample_class(&self, x: &[f64], rng: &mut Rng) -> usize {
        rng.categorical(&self.probs(x))
    }
}

/// Draws fresh augmented examples from the task's augmented law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreshSampler {
    teacher: Teacher,
    input_mean: Vec<f64>,
    /// Row `c` is the augmented label emitted when the clean class is `c`.
    vertex_labels: Mat,
}

impl FreshSampler {
    fn draw(&self, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
        let mut x = rng.normal_vec(self.input_mean.len(), 1.0);
        linalg::axpy(1.0, &self.input_mean, &mut x);
        let c = self.teacher.sample_class(&x, rng);
        (x, self.vertex_labels.row(c).to_vec())
    }
}

/// Where a trainer gets its augmented examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum AugmentSource {
    /// Uniform draws with replacement from a fixed set.
    Pool(LabeledSet),
    /// Fresh draws from the planted augmented distribution.
    Fresh(FreshSampler),
    /// k-image mixup of base examples with Dirichlet(α) weights.
    Mixup { base: LabeledSet, k: usize, alpha: f64 },
    /// Contrast of a base example with magnitude uniform on `[lo, hi]`.
    Contrast { base: LabeledSet, lo: f64, hi: f64 },
}

impl AugmentSource {
    pub fn draw(&self, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
        match self {
            AugmentSource::Pool(set) => {
                let i = rng.below(set.len());
                (set.x(i).to_vec(), set.y(i).to_vec())
            }
            AugmentSource::Fresh(s) => s.draw(rng),
            AugmentSource::Mixup { base, k, alpha } => {
                let idx: Vec<usize> = (0..*k).map(|_| rng.below(base.len())).collect();
                let w = sample_dirichlet(*alpha, *k, rng).expect("validated mixup parameters");
                let xs: Vec<&[f64]> = idx.iter().map(|&i| base.x(i)).collect();
                let ys: Vec<&[f64]> = idx.iter().map(|&i| base.y(i)).collect();
                mixup_k(&xs, &ys, &w).expect("dirichlet weights are on the simplex")
            }
            AugmentSource::Contrast { base, lo, hi } => {
                let i = rng.below(base.len());
                let m = rng.uniform_in(*lo, *hi);
                (contrast_unchecked(base.x(i), m), base.y(i).to_vec())
            }
        }
    }

    pub fn draw_batch(&self, m: usize, rng: &mut Rng) -> Vec<(Vec<f64>, Vec<f64>)> {
        (0..m).map(|_| self.draw(rng)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub config: TaskConfig,
    pub teacher: Teacher,
    /// One-hot labels sampled from the teacher.
    pub original: LabeledSet,
    /// Stored augmented pool.
    pub augmented: LabeledSet,
    /// Clean labels of the pool, row-aligned with `augmented`.
    pub augmented_clean_labels: Mat,
    /// Teacher probabilities on fresh inputs: the population objective `L`.
    pub eval: LabeledSet,
    /// Expected augmented labels on augmented-law inputs: the population `L̃`.
    pub aug_eval: LabeledSet,
    pub fresh: FreshSampler,
}

impl SyntheticTask {
    /// The linear part of the teacher, which is the exact minimiser of `L`
    /// in label-mixing mode.
    pub fn true_params(&self) -> Vec<f64> {
        self.teacher.weights.as_slice().to_vec()
    }

    pub fn input_mean(&self) -> &[f64] {
        &self.fresh.input_mean
    }
}

const STREAM_TEACHER: u64 = 0x7ea;
const STREAM_TRAIN: u64 = 0x7a1;
const STREAM_POOL: u64 = 0x9001;
const STREAM_EVAL: u64 = 0xe7a1;
const STREAM_AUG_EVAL: u64 = 0xe7a2;

fn random_unit(n: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v = rng.normal_vec(n, 1.0);
        let r = linalg::norm(&v);
        if r > 1e-6 {
            return linalg::scale(1.0 / r, &v);
        }
    }
}

pub fn gen_synthetic(config: &TaskConfig, rng: &Rng) -> Result<SyntheticTask> {
    config.validate()?;
    let (d, k) = (config.dim, config.classes);

    let mut trng = rng.derive(STREAM_TEACHER);
    let w = rng_mat(k, d, config.teacher_scale, &mut trng);
    let mut teacher = Teacher::linear(w);
    let mut input_mean = vec![0.0; d];
    let mut vertex_labels = Mat::identity(k);
    match config.bias {
        BiasKind::LabelMixing { delta_y } => {
            for c in 0..k {
                let b = bias_label(&unit(k, c), delta_y)?;
                vertex_labels.row_mut(c).copy_from_slice(&b);
            }
        }
        BiasKind::InputShift { delta_p, curvature } => {
            let e = random_unit(d, &mut trng);
            let mut v = trng.normal_vec(k, 1.0);
            let mean = v.iter().sum::<f64>() / k as f64;
            v.iter_mut().for_each(|x| *x -= mean);
            let v = linalg::scale(1.0 / linalg::norm(&v).max(1e-12), &v);
            input_mean = linalg::scale((2.0 * delta_p).sqrt(), &e);
            teacher.quadratic = Some((e, v, curvature));
        }
    }
    let fresh = FreshSampler {
        teacher: teacher.clone(),
        input_mean: input_mean.clone(),
        vertex_labels: vertex_labels.clone(),
    };

    let mut r = rng.derive(STREAM_TRAIN);
    let (xs, cs) = sample_inputs_and_classes(&teacher, &vec![0.0; d], config.n_train, &mut r);
    let original = LabeledSet::new(xs, one_hot(&cs, k), Provenance::Original)?;

    let mut r = rng.derive(STREAM_POOL);
    let (xs, cs) = sample_inputs_and_classes(&teacher, &input_mean, config.n_aug, &mut r);
    let clean = one_hot(&cs, k);
    let biased = vertex_labels.select_rows(&cs);
    let augmented = LabeledSet::new(xs, biased, Provenance::Augmented)?;

    let mut r = rng.derive(STREAM_EVAL);
    let ex = gaussian_inputs(config.n_eval, &vec![0.0; d], &mut r);
    let eval_labels = soft_labels(&teacher, &ex, &Mat::identity(k));
    let eval = LabeledSet::new(ex.clone(), eval_labels, Provenance::Original)?;

    let aug_inputs = match config.bias {
        BiasKind::LabelMixing { .. } => ex,
        BiasKind::InputShift { .. } => {
            let mut r = rng.derive(STREAM_AUG_EVAL);
            gaussian_inputs(config.n_eval, &input_mean, &mut r)
        }
    };
    let aug_labels = soft_labels(&teacher, &aug_inputs, &vertex_labels);
    let aug_eval = LabeledSet::new(aug_inputs, aug_labels, Provenance::Augmented)?;

    Ok(SyntheticTask {
        config: config.clone(),
        teacher,
        original,
        augmented,
        augmented_clean_labels: clean,
        eval,
        aug_eval,
        fresh,
    })
}

fn rng_mat(rows: usize, cols: usize, sd: f64, rng: &mut Rng) -> Mat {
    Mat::new(rows, cols, rng.normal_vec(rows * cols, sd)).expect("finite gaussian draws")
}

fn gaussian_inputs(n: usize, mean: &[f64], rng: &mut Rng) -> Mat {
    let mut m = rng_mat(n, mean.len(), 1.0, rng);
    for i in 0..n {
        linalg::axpy(1.0, mean, m.row_mut(i));
    }
    m
}

fn sample_inputs_and_classes(teacher: &Teacher, mean: &[f64], n: usize, rng: &mut Rng) -> (Mat, Vec<usize>) {
    let mut data = Vec::with_capacity(n * mean.len());
    let mut classes = Vec::with_capacity(n);
    for _ in 0..n {
        let mut x = rng.normal_vec(mean.len(), 1.0);
        linalg::axpy(1.0, mean, &mut x);
        classes.push(teacher.sample_class(&x, rng));
        data.extend(x);
    }
    (Mat::new(n, mean.len(), data).expect("finite gaussian draws"), classes)
}

fn one_hot(classes: &[usize], k: usize) -> Mat {
    Mat::identity(k).select_rows(classes)
}

/// `E[label | x] = Σ_c q_c(x) · vertex_labels[c]`.
fn soft_labels(teacher: &Teacher, inputs: &Mat, vertex_labels: &Mat) -> Mat {
    let k = vertex_labels.cols();
    let mut out = Mat::zeros(inputs.rows(), k);
    for (i, x) in inputs.iter_rows().enumerate() {
        let q = teacher.probs(x);
        let row = out.row_mut(i);
        for (c, qc) in q.iter().enumerate() {
            linalg::axpy(*qc, vertex_labels.row(c), row);
        }
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{estimate_delta_p, estimate_delta_y, KlFamily};

    fn small(bias: BiasKind) -> TaskConfig {
        TaskConfig {
            dim: 4,
            classes: 3,
            n_train: 50,
            n_aug: 200,
            n_eval: 100,
            teacher_scale: 0.7,
            bias,
        }
    }

    #[test]
    fn zero_bias_keeps_labels() {
        let t = gen_synthetic(&small(BiasKind::LabelMixing { delta_y: 0.0 }), &Rng::new(1)).unwrap();
        assert_eq!(t.augmented.labels(), &t.augmented_clean_labels);
        assert_eq!(t.eval.labels(), t.aug_eval.labels());
    }

    #[test]
    fn label_mixing_hits_requested_delta() {
        let t = gen_synthetic(&small(BiasKind::LabelMixing { delta_y: 0.2 }), &Rng::new(2)).unwrap();
        let pairs = t.augmented_clean_labels.iter_rows().zip(t.augmented.labels().iter_rows());
        let d = estimate_delta_y(pairs).unwrap();
        assert!((d - 0.2).abs() < 1e-9, "{d}");
    }

    #[test]
    fn same_seed_same_task() {
        let cfg = small(BiasKind::InputShift {
            delta_p: 0.1,
            curvature: 1.0,
        });
        assert_eq!(gen_synthetic(&cfg, &Rng::new(5)).unwrap(), gen_synthetic(&cfg, &Rng::new(5)).unwrap());
    }

    #[test]
    fn input_shift_mean_matches_kl() {
        let t = gen_synthetic(
            &small(BiasKind::InputShift {
                delta_p: 0.5,
                curvature: 1.0,
            }),
            &Rng::new(3),
        )
        .unwrap();
        assert!((linalg::norm(t.input_mean()) - 1.0).abs() < 1e-12);
        let kl = estimate_delta_p(t.eval.inputs(), t.aug_eval.inputs(), KlFamily::Gaussian).unwrap();
        assert!(kl > 0.2 && kl < 0.9, "{kl}");
    }

    #[test]
    fn sources_emit_simplex_labels() {
        let t = gen_synthetic(&small(BiasKind::LabelMixing { delta_y: 0.3 }), &Rng::new(4)).unwrap();
        let sources = [
            AugmentSource::Pool(t.augmented.clone()),
            AugmentSource::Fresh(t.fresh.clone()),
            AugmentSource::Mixup {
                base: t.original.clone(),
                k: 3,
                alpha: 0.5,
            },
            AugmentSource::Contrast {
                base: t.original.clone(),
                lo: 0.1,
                hi: 1.9,
            },
        ];
        let mut rng = Rng::new(9);
        for s in &sources {
            for (x, y) in s.draw_batch(20, &mut rng) {
                assert_eq!(x.len(), 4);
                crate::data::check_simplex(&y, 1e-12).unwrap();
            }
        }
    }
}
