//! Augmentation transforms, label-bias perturbations and the two bias
//! estimators (`δ_y` for label-mixing, `δ_P` for label-preserving).

mod synthetic;

pub use synthetic::{gen_synthetic, AugmentSource, BiasKind, FreshSampler, SyntheticTask, TaskConfig, Teacher};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{check_simplex, SIMPLEX_TOL};
use crate::error::{check_len, invalid, Error, Result};
use crate::linalg::{self, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugKind {
    MixupK { k: usize, alpha: f64 },
    Contrast { lo: f64, hi: f64 },
    SyntheticLabelBias { delta_y: f64 },
    SyntheticInputShift { delta_p: f64, curvature: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugSpec {
    pub kind: AugKind,
    pub stream: u64,
}

impl AugSpec {
    pub fn new(kind: AugKind, stream: u64) -> Result<Self> {
        match kind {
            AugKind::MixupK { k, alpha } => {
                if k < 2 {
                    return Err(invalid(format!("mixup needs k >= 2, got {k}")));
                }
                if !(alpha > 0.0 && alpha.is_finite()) {
                    return Err(invalid(format!("mixup alpha must be positive, got {alpha}")));
                }
            }
            AugKind::Contrast { lo, hi } => {
                if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                    return Err(invalid(format!("contrast range [{lo}, {hi}] is not 0 < lo <= hi")));
                }
            }
            AugKind::SyntheticLabelBias { delta_y } => check_delta_y(delta_y)?,
            AugKind::SyntheticInputShift { delta_p, curvature } => {
                if !(delta_p >= 0.0 && delta_p.is_finite()) {
                    return Err(invalid(format!("delta_P must be nonnegative, got {delta_p}")));
                }
                if !curvature.is_finite() {
                    return Err(invalid("input-shift curvature must be finite"));
                }
            }
        }
        Ok(Self { kind, stream })
    }
}

/// Mixed label distance and input divergence of an augmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasEstimate {
    pub delta_y: f64,
    pub delta_p: Option<f64>,
    pub method: String,
}

/// Convex combination of `k` examples with simplex weights.
pub fn mixup_k(xs: &[&[f64]], ys: &[&[f64]], weights: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if xs.is_empty() {
        return Err(invalid("mixup needs at least one example"));
    }
    check_len(xs.len(), ys.len(), "mixup labels vs inputs")?;
    check_len(xs.len(), weights.len(), "mixup weights")?;
    check_simplex(weights, SIMPLEX_TOL).map_err(|e| invalid(format!("mixup weights: {e}")))?;
    let mut x = vec![0.0; xs[0].len()];
    let mut y = vec![0.0; ys[0].len()];
    for ((xi, yi), &b) in xs.iter().zip(ys).zip(weights) {
        check_len(x.len(), xi.len(), "mixup input")?;
        check_len(y.len(), yi.len(), "mixup label")?;
        linalg::axpy(b, xi, &mut x);
        linalg::axpy(b, yi, &mut y);
    }
    Ok((x, y))
}

/// Rescales deviations from the per-example mean by `magnitude`.
pub fn contrast(x: &[f64], magnitude: f64, lo: f64, hi: f64) -> Result<Vec<f64>> {
    if !(lo..=hi).contains(&magnitude) {
        return Err(invalid(format!("contrast magnitude {magnitude} outside [{lo}, {hi}]")));
    }
    if x.is_empty() {
        return Err(invalid("contrast of an empty vector"));
    }
    Ok(contrast_unchecked(x, magnitude))
}

pub(crate) fn contrast_unchecked(x: &[f64], magnitude: f64) -> Vec<f64> {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| mean + magnitude * (v - mean)).collect()
}

/// Largest label displacement that always stays on the simplex.
pub const MAX_LABEL_SHIFT: f64 = std::f64::consts::SQRT_2;

fn check_delta_y(delta_y: f64) -> Result<()> {
    if !(0.0..=MAX_LABEL_SHIFT).contains(&delta_y) {
        return Err(invalid(format!(
            "delta_y must lie in [0, sqrt 2] (the simplex diameter), got {delta_y}"
        )));
    }
    Ok(())
}

/// Moves `y` a distance of exactly `delta` inside the simplex.
///
/// The preferred direction is toward the uniform label, which for one-hot
/// labels is label smoothing. When the uniform point is closer than `delta`
/// the label moves toward its least likely vertex instead.
pub fn bias_label(y: &[f64], delta: f64) -> Result<Vec<f64>> {
    check_delta_y(delta)?;
    check_simplex(y, SIMPLEX_TOL)?;
    if delta == 0.0 {
        return Ok(y.to_vec());
    }
    let k = y.len();
    let u = 1.0 / k as f64;
    let to_uniform: Vec<f64> = y.iter().map(|v| u - v).collect();
    let dist = linalg::norm(&to_uniform);
    let (dir, len) = if dist >= delta {
        (to_uniform, dist)
    } else {
        let j = (0..k).min_by(|&a, &b| y[a].total_cmp(&y[b])).unwrap();
        let dir: Vec<f64> = (0..k).map(|i| f64::from(i == j) - y[i]).collect();
        let len = linalg::norm(&dir);
        if len < delta {
            return Err(invalid(format!("delta_y {delta} is infeasible for label {y:?}")));
        }
        (dir, len)
    };
    let t = delta / len;
    Ok(y.iter()
        .zip(&dir)
        .map(|(v, d)| (v + t * d).max(0.0))
        .collect())
}

/// `max ‖y − ỹ‖` over label pairs that share an input.
pub fn estimate_delta_y<'a, I>(pairs: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a [f64], &'a [f64])>,
{
    let mut best: Option<f64> = None;
    for (y, yt) in pairs {
        let d = linalg::distance(y, yt)?;
        best = Some(best.map_or(d, |b: f64| b.max(d)));
    }
    best.ok_or_else(|| invalid("no label pairs to compare"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum KlFamily {
    /// Two Gaussians with a pooled covariance: `½ Δμᵀ Σ⁻¹ Δμ`.
    Gaussian,
    /// Empirical distributions over distinct rows, optionally after binning
    /// every coordinate to a grid of the given width.
    Histogram { bin_width: Option<f64> },
}

/// `KL(P ‖ Q)` between the laws of two input samples.
pub fn estimate_delta_p(sample_p: &Mat, sample_q: &Mat, family: KlFamily) -> Result<f64> {
    check_len(sample_p.cols(), sample_q.cols(), "sample dimensions")?;
    match family {
        KlFamily::Gaussian => gaussian_kl(sample_p, sample_q),
        KlFamily::Histogram { bin_width } => histogram_kl(sample_p, sample_q, bin_width),
    }
}

fn column_means(m: &Mat) -> Vec<f64> {
    let mut mean = vec![0.0; m.cols()];
    for r in m.iter_rows() {
        linalg::axpy(1.0, r, &mut mean);
    }
    linalg::scale(1.0 / m.rows() as f64, &mean)
}

fn gaussian_kl(p: &Mat, q: &Mat) -> Result<f64> {
    if p.rows() < 2 || q.rows() < 2 {
        return Err(invalid("gaussian KL needs at least two samples per side"));
    }
    let d = p.cols();
    let (mp, mq) = (column_means(p), column_means(q));
    let mut cov = Mat::zeros(d, d);
    for (m, mean) in [(p, &mp), (q, &mq)] {
        for r in m.iter_rows() {
            let c = linalg::sub(r, mean)?;
            for i in 0..d {
                for j in i..d {
                    cov.set(i, j, cov.get(i, j) + c[i] * c[j]);
                }
            }
        }
    }
    let dof = (p.rows() + q.rows() - 2) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov.get(i, j) / dof;
            cov.set(i, j, v);
            cov.set(j, i, v);
        }
    }
    let diff = linalg::sub(&mp, &mq)?;
    let sol = linalg::cholesky_solve(&cov, &diff)
        .map_err(|e| Error::Degenerate(format!("pooled covariance: {e}")))?;
    Ok((0.5 * linalg::dot(&diff, &sol)).max(0.0))
}

fn histogram_kl(p: &Mat, q: &Mat, bin_width: Option<f64>) -> Result<f64> {
    if let Some(w) = bin_width {
        if !(w > 0.0 && w.is_finite()) {
            return Err(invalid(format!("histogram bin width must be positive, got {w}")));
        }
    }
    let key = |row: &[f64]| -> Vec<i64> {
        match bin_width {
            Some(w) => row.iter().map(|v| (v / w).floor() as i64).collect(),
            // +0.0 and -0.0 are the same atom
            None => row.iter().map(|v| (v + 0.0).to_bits() as i64).collect(),
        }
    };
    let mut counts: HashMap<Vec<i64>, (f64, f64)> = HashMap::new();
    for r in p.iter_rows() {
        counts.entry(key(r)).or_default().0 += 1.0;
    }
    for r in q.iter_rows() {
        counts.entry(key(r)).or_default().1 += 1.0;
    }
    let support = counts.len() as f64;
    let (np, nq) = (p.rows() as f64 + support, q.rows() as f64 + support);
    let kl = counts
        .values()
        .map(|(cp, cq)| {
            let (pp, qq) = ((cp + 1.0) / np, (cq + 1.0) / nq);
            pp * (pp / qq).ln()
        })
        .sum::<f64>();
    Ok(kl.max(0.0))
}
