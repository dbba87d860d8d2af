use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, Result};
use crate::linalg::Mat;

/// Tolerance on label rows summing to one.
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Original,
    Augmented,
}

/// Inputs paired with label vectors on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSet {
    inputs: Mat,
    labels: Mat,
    provenance: Provenance,
}

pub fn check_simplex(y: &[f64], tol: f64) -> Result<()> {
    if y.iter().any(|v| !v.is_finite() || *v < -tol) {
        return Err(invalid("label has a negative or non-finite entry"));
    }
    let s: f64 = y.iter().sum();
    if (s - 1.0).abs() > tol {
        return Err(invalid(format!("label sums to {s}, not 1")));
    }
    Ok(())
}

impl LabeledSet {
    pub fn new(inputs: Mat, labels: Mat, provenance: Provenance) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(invalid("labeled set must hold at least one example"));
        }
        check_len(inputs.rows(), labels.rows(), "label rows vs input rows")?;
        if labels.cols() < 2 {
            return Err(invalid("labels need at least two classes"));
        }
        for (i, y) in labels.iter_rows().enumerate() {
            check_simplex(y, SIMPLEX_TOL).map_err(|e| invalid(format!("label row {i}: {e}")))?;
        }
        Ok(Self {
            inputs,
            labels,
            provenance,
        })
    }

    pub fn from_rows(xs: &[Vec<f64>], ys: &[Vec<f64>], provenance: Provenance) -> Result<Self> {
        Self::new(Mat::from_rows(xs)?, Mat::from_rows(ys)?, provenance)
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn classes(&self) -> usize {
        self.labels.cols()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn inputs(&self) -> &Mat {
        &self.inputs
    }

    pub fn labels(&self) -> &Mat {
        &self.labels
    }

    #[inline]
    pub fn x(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }

    #[inline]
    pub fn y(&self, i: usize) -> &[f64] {
        self.labels.row(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        self.inputs.iter_rows().zip(self.labels.iter_rows())
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(invalid("empty subset"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.len()) {
            return Err(invalid(format!("subset index {bad} out of range")));
        }
        Ok(Self {
            inputs: self.inputs.select_rows(idx),
            labels: self.labels.select_rows(idx),
            provenance: self.provenance,
        })
    }

    /// The first `n` examples (or all of them).
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len()).max(1)).collect();
        self.subset(&idx).expect("non-empty prefix")
    }
}
