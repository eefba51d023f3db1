//! SoftSig classification loss: a masked categorical cross-entropy plus a
//! masked per-category binary cross-entropy, with analytic gradients.
//!
//! Logit columns are the categories `1..C` followed by background. The
//! categorical term is normalized by `R`, the binary term by `R * (C + 1)`,
//! regardless of how many entries the masks switch off.

use ndarray::{Array1, Array2, ArrayView1};

use crate::assignment::RoiTargets;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LossBatch {
    logits: Array2<f64>,
    targets: Array2<f64>,
    masks: Array1<f64>,
    weights: Array2<f64>,
    lambda_binary: f64,
}

fn is_binary(v: f64) -> bool {
    v == 0.0 || v == 1.0
}

impl LossBatch {
    pub fn new(
        logits: Array2<f64>,
        targets: Array2<f64>,
        masks: Array1<f64>,
        weights: Array2<f64>,
        lambda_binary: f64,
    ) -> Result<Self> {
        let (rows, cols) = logits.dim();
        if rows == 0 || cols < 2 {
            return Err(Error::Batch(format!("need R >= 1 and C >= 1, got {rows} x {cols} logits")));
        }
        if targets.dim() != (rows, cols) || weights.dim() != (rows, cols) || masks.len() != rows {
            return Err(Error::Batch("targets, weights and masks must match the logit shape".into()));
        }
        for (r, row) in targets.rows().into_iter().enumerate() {
            if !row.iter().all(|&v| is_binary(v)) || row.sum() != 1.0 {
                return Err(Error::Batch(format!("target row {r} is not one-hot")));
            }
        }
        if !masks.iter().all(|&v| is_binary(v)) || !weights.iter().all(|&v| is_binary(v)) {
            return Err(Error::Batch("masks and weights must be 0 or 1".into()));
        }
        if !(lambda_binary >= 0.0 && lambda_binary.is_finite()) {
            return Err(Error::Batch(format!("lambda_binary must be >= 0, got {lambda_binary}")));
        }
        Ok(LossBatch { logits, targets, masks, weights, lambda_binary })
    }

    /// Batch with every mask and weight set to 1 (plain cross-entropies).
    pub fn unmasked(logits: Array2<f64>, targets: Array2<f64>, lambda_binary: f64) -> Result<Self> {
        let (rows, cols) = logits.dim();
        LossBatch::new(logits, targets, Array1::ones(rows), Array2::ones((rows, cols)), lambda_binary)
    }

    /// Builds a batch from the sampled ROIs `indices` of `targets`, with one
    /// logit row per sampled ROI.
    pub fn from_roi_targets(
        targets: &RoiTargets,
        indices: &[usize],
        logits: Array2<f64>,
        lambda_binary: f64,
    ) -> Result<Self> {
        let cols = targets.num_categories + 1;
        let rows = indices.len();
        if logits.dim() != (rows, cols) {
            return Err(Error::Batch(format!("expected {rows} x {cols} logits, got {:?}", logits.dim())));
        }
        let mut t = Array2::zeros((rows, cols));
        let mut m = Array1::zeros(rows);
        let mut w = Array2::zeros((rows, cols));
        for (r, &i) in indices.iter().enumerate() {
            let roi = targets.rois.get(i).ok_or_else(|| Error::Batch(format!("ROI index {i} out of range")))?;
            t[[r, roi.class_index]] = 1.0;
            m[r] = roi.mask as f64;
            for (c, &wc) in roi.weights.iter().enumerate() {
                w[[r, c]] = wc as f64;
            }
        }
        LossBatch::new(logits, t, m, w, lambda_binary)
    }

    pub fn rows(&self) -> usize {
        self.logits.nrows()
    }

    pub fn cols(&self) -> usize {
        self.logits.ncols()
    }

    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }

    pub fn lambda_binary(&self) -> f64 {
        self.lambda_binary
    }

    pub fn with_logits(&self, logits: Array2<f64>) -> Result<Self> {
        if logits.dim() != self.logits.dim() {
            return Err(Error::Batch("logit shape changed".into()));
        }
        Ok(LossBatch { logits, ..self.clone() })
    }

    pub fn with_lambda(&self, lambda_binary: f64) -> Result<Self> {
        LossBatch::new(
            self.logits.clone(),
            self.targets.clone(),
            self.masks.clone(),
            self.weights.clone(),
            lambda_binary,
        )
    }

    fn check_finite(&self) -> Result<()> {
        for ((row, column), v) in self.logits.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::NonFinite { row, column });
            }
        }
        Ok(())
    }
}

fn log_sum_exp(row: ArrayView1<f64>) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Masked categorical cross-entropy, averaged over all `R` rows.
pub fn categorical_loss(b: &LossBatch) -> Result<f64> {
    b.check_finite()?;
    let mut total = 0.0;
    for r in 0..b.rows() {
        if b.masks[r] == 0.0 {
            continue;
        }
        let row = b.logits.row(r);
        let lse = log_sum_exp(row);
        for c in 0..b.cols() {
            let t = b.targets[[r, c]];
            if t != 0.0 {
                total += t * (lse - row[c]);
            }
        }
    }
    Ok(total / b.rows() as f64)
}

/// Masked binary cross-entropy, averaged over all `R * (C + 1)` entries.
pub fn binary_loss(b: &LossBatch) -> Result<f64> {
    b.check_finite()?;
    let mut total = 0.0;
    for r in 0..b.rows() {
        for c in 0..b.cols() {
            if b.weights[[r, c]] == 0.0 {
                continue;
            }
            let x = b.logits[[r, c]];
            let t = b.targets[[r, c]];
            // -log sigmoid(x) = softplus(-x), -log(1 - sigmoid(x)) = softplus(x)
            total += t * softplus(-x) + (1.0 - t) * softplus(x);
        }
    }
    Ok(total / (b.rows() * b.cols()) as f64)
}

pub fn softsig_loss(b: &LossBatch) -> Result<f64> {
    Ok(categorical_loss(b)? + b.lambda_binary * binary_loss(b)?)
}

/// Analytic gradient of [`softsig_loss`] with respect to the logits.
///
/// Entries switched off by both the mask and the binary weights are exactly
/// `+0.0`.
pub fn softsig_gradient(b: &LossBatch) -> Result<Array2<f64>> {
    b.check_finite()?;
    let (rows, cols) = b.logits.dim();
    let cat_scale = 1.0 / rows as f64;
    let bin_scale = b.lambda_binary / (rows * cols) as f64;
    let mut grad = Array2::zeros((rows, cols));
    for r in 0..rows {
        let row = b.logits.row(r);
        if b.masks[r] != 0.0 {
            let lse = log_sum_exp(row);
            for c in 0..cols {
                let p = (row[c] - lse).exp();
                grad[[r, c]] += cat_scale * (p - b.targets[[r, c]]);
            }
        }
        if b.lambda_binary != 0.0 {
            for c in 0..cols {
                if b.weights[[r, c]] != 0.0 {
                    grad[[r, c]] += bin_scale * (sigmoid(row[c]) - b.targets[[r, c]]);
                }
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};
    use std::f64::consts::LN_2;

    fn bg_case() -> LossBatch {
        LossBatch::unmasked(arr2(&[[0.0, 0.0]]), arr2(&[[0.0, 1.0]]), 1.0).unwrap()
    }

    fn unsafe_case(x: [f64; 3]) -> LossBatch {
        // C = 2, ROI matched to an unsafe prediction of category 1
        LossBatch::new(arr2(&[x]), arr2(&[[0.0, 0.0, 1.0]]), arr1(&[0.0]), arr2(&[[0.0, 1.0, 0.0]]), 1.0).unwrap()
    }

    #[test]
    fn hand_values() {
        let b = bg_case();
        assert!((categorical_loss(&b).unwrap() - LN_2).abs() < 1e-12);
        assert!((binary_loss(&b).unwrap() - LN_2).abs() < 1e-12);
        assert!((softsig_loss(&b).unwrap() - 2.0 * LN_2).abs() < 1e-12);
        let u = unsafe_case([0.0; 3]);
        assert!((binary_loss(&u).unwrap() - LN_2 / 3.0).abs() < 1e-12);
        assert_eq!(categorical_loss(&u).unwrap(), 0.0);
    }

    #[test]
    fn lambda_zero_is_categorical() {
        let b = bg_case().with_lambda(0.0).unwrap();
        assert_eq!(softsig_loss(&b).unwrap(), categorical_loss(&b).unwrap());
    }

    #[test]
    fn larger_margin_lowers_loss() {
        let t = arr2(&[[1.0, 0.0]]);
        let wide = LossBatch::unmasked(arr2(&[[5.0, 0.0]]), t.clone(), 1.0).unwrap();
        let narrow = LossBatch::unmasked(arr2(&[[2.0, 0.0]]), t, 1.0).unwrap();
        assert!(categorical_loss(&wide).unwrap() < categorical_loss(&narrow).unwrap());
    }

    #[test]
    fn unsafe_gradient_hand_value() {
        let g = softsig_gradient(&unsafe_case([0.0; 3])).unwrap();
        assert_eq!(g[[0, 0]].to_bits(), 0.0f64.to_bits());
        assert_eq!(g[[0, 2]].to_bits(), 0.0f64.to_bits());
        assert!((g[[0, 1]] - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn fully_masked_batch() {
        let b = LossBatch::new(
            arr2(&[[1.0, -2.0, 0.5], [3.0, 0.0, -1.0]]),
            arr2(&[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]),
            arr1(&[0.0, 0.0]),
            Array2::zeros((2, 3)),
            1.0,
        )
        .unwrap();
        assert_eq!(softsig_loss(&b).unwrap(), 0.0);
        assert!(softsig_gradient(&b).unwrap().iter().all(|v| v.to_bits() == 0));
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let t = arr2(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let b = LossBatch::unmasked(arr2(&[[-500.0, 500.0, 0.0], [500.0, -500.0, 500.0]]), t, 1.0).unwrap();
        let l = softsig_loss(&b).unwrap();
        assert!(l.is_finite() && l > 0.0);
        assert!(softsig_gradient(&b).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn non_finite_logits_rejected() {
        let b = LossBatch::unmasked(arr2(&[[f64::NAN, 0.0]]), arr2(&[[1.0, 0.0]]), 1.0).unwrap();
        assert!(matches!(categorical_loss(&b), Err(Error::NonFinite { row: 0, column: 0 })));
        assert!(binary_loss(&b).is_err());
        assert!(softsig_gradient(&b).is_err());
    }

    #[test]
    fn malformed_batches_rejected() {
        let two_hot = LossBatch::unmasked(arr2(&[[0.0, 0.0]]), arr2(&[[1.0, 1.0]]), 1.0);
        assert!(matches!(two_hot, Err(Error::Batch(_))));
        let no_category = LossBatch::unmasked(arr2(&[[0.0]]), arr2(&[[1.0]]), 1.0);
        assert!(no_category.is_err());
    }
}
