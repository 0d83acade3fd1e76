//! Training loss terms: pixel MSE on the predicted frame, the image-gradient
//! sharpness penalty, channel-wise cosine feature inconsistency between
//! student and teacher taps, and their weighted combination.
//!
//! Each term comes with its analytic gradient (w.r.t. the prediction or the
//! student feature tensor). Teacher features are always treated as constants.

use ndarray::{Array2, Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Mode;

/// Norm clamp for the cosine denominator. An exactly-zero feature vector
/// yields inconsistency 1 with zero gradient (neutral value, no signal).
const COS_EPS: f32 = 1e-8;

/// How elementwise losses reduce over a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

fn default_lambda_e() -> f64 {
    0.7
}
fn default_lambda_g() -> f64 {
    0.1
}
fn default_lambda_c() -> f64 {
    0.2
}
fn default_alpha() -> u32 {
    1
}

/// Combination weights of the total loss, plus the sharpness exponent.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "default_lambda_e")]
    pub lambda_e: f64,
    #[serde(default = "default_lambda_g")]
    pub lambda_g: f64,
    #[serde(default = "default_lambda_c")]
    pub lambda_c: f64,
    #[serde(default = "default_alpha")]
    pub alpha: u32,
}

impl Default for LossWeights {
    fn default() -> Self {
        // Balance reported for all three benchmarks.
        Self { lambda_e: 0.7, lambda_g: 0.1, lambda_c: 0.2, alpha: 1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let mut violations = Vec::new();
        if self.lambda_e < 0.0 || self.lambda_g < 0.0 || self.lambda_c < 0.0 {
            violations.push("loss lambdas must be nonnegative".to_string());
        }
        if self.lambda_e == 0.0 && self.lambda_g == 0.0 && self.lambda_c == 0.0 {
            violations.push("at least one loss lambda must be positive".to_string());
        }
        if self.alpha < 1 {
            violations.push("loss alpha must be >= 1".to_string());
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(violations))
        }
    }

    /// Zero out terms that the training mode disables.
    pub fn for_mode(mut self, mode: Mode) -> Self {
        match mode {
            Mode::Pkg => {}
            Mode::AeOnly => self.lambda_c = 0.0,
            Mode::KdOnly => {
                self.lambda_e = 0.0;
                self.lambda_g = 0.0;
            }
        }
        self
    }
}

/// Per-term loss values for one step (or one epoch's mean).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default)]
pub struct LossBreakdown {
    pub l_e: f64,
    pub l_g: f64,
    pub l_c: f64,
    pub total: f64,
}

fn check_same_shape(a: &ArrayView3<f32>, b: &ArrayView3<f32>, context: &'static str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            context,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Pixel-level squared error between prediction and ground truth.
pub fn prediction_loss_r(
    pred: &ArrayView3<f32>,
    target: &ArrayView3<f32>,
    reduction: Reduction,
) -> Result<f64> {
    check_same_shape(pred, target, "prediction_loss")?;
    let sum: f64 = pred
        .iter()
        .zip(target.iter())
        .map(|(p, t)| {
            let d = *p as f64 - *t as f64;
            d * d
        })
        .sum();
    Ok(match reduction {
        Reduction::Mean => sum / pred.len() as f64,
        Reduction::Sum => sum,
    })
}

pub fn prediction_loss(pred: &ArrayView3<f32>, target: &ArrayView3<f32>) -> Result<f64> {
    prediction_loss_r(pred, target, Reduction::Mean)
}

/// Loss value and gradient w.r.t. `pred`.
pub fn prediction_loss_grad(
    pred: &ArrayView3<f32>,
    target: &ArrayView3<f32>,
    reduction: Reduction,
) -> Result<(f64, Array3<f32>)> {
    let loss = prediction_loss_r(pred, target, reduction)?;
    let scale = match reduction {
        Reduction::Mean => 2.0 / pred.len() as f32,
        Reduction::Sum => 2.0,
    };
    let mut grad = Array3::<f32>::zeros(pred.dim());
    ndarray::Zip::from(&mut grad).and(pred).and(target).for_each(|g, p, t| {
        *g = scale * (*p - *t);
    });
    Ok((loss, grad))
}

fn pow_abs(u: f64, alpha: u32) -> f64 {
    u.abs().powi(alpha as i32)
}

/// d|u|^alpha / du, with subgradient 0 at the kink.
fn pow_abs_deriv(u: f64, alpha: u32) -> f64 {
    if u == 0.0 {
        return 0.0;
    }
    alpha as f64 * u.abs().powi(alpha as i32 - 1) * u.signum()
}

/// Image-gradient sharpness penalty. Differences without a neighbor toward
/// smaller `i` (rows) or smaller `j` (columns) are excluded rather than
/// zero-padded; the mean is taken over all included difference terms and
/// channels.
pub fn gradient_loss_r(
    pred: &ArrayView3<f32>,
    target: &ArrayView3<f32>,
    alpha: u32,
    reduction: Reduction,
) -> Result<f64> {
    check_same_shape(pred, target, "gradient_loss")?;
    if alpha < 1 {
        return Err(Error::Config(vec!["gradient_loss alpha must be >= 1".to_string()]));
    }
    let (c, h, w) = pred.dim();
    let mut sum = 0.0f64;
    for ci in 0..c {
        for i in 1..h {
            for j in 0..w {
                let dt = target[(ci, i, j)] as f64 - target[(ci, i - 1, j)] as f64;
                let dp = pred[(ci, i, j)] as f64 - pred[(ci, i - 1, j)] as f64;
                sum += pow_abs(dt.abs() - dp.abs(), alpha);
            }
        }
        for i in 0..h {
            for j in 1..w {
                let dt = target[(ci, i, j - 1)] as f64 - target[(ci, i, j)] as f64;
                let dp = pred[(ci, i, j - 1)] as f64 - pred[(ci, i, j)] as f64;
                sum += pow_abs(dt.abs() - dp.abs(), alpha);
            }
        }
    }
    let n_terms = c * ((h.saturating_sub(1)) * w + h * (w.saturating_sub(1)));
    Ok(match reduction {
        Reduction::Mean => {
            if n_terms == 0 {
                0.0
            } else {
                sum / n_terms as f64
            }
        }
        Reduction::Sum => sum,
    })
}

pub fn gradient_loss(pred: &ArrayView3<f32>, target: &ArrayView3<f32>, alpha: u32) -> Result<f64> {
    gradient_loss_r(pred, target, alpha, Reduction::Mean)
}

/// Loss value and gradient w.r.t. `pred`.
pub fn gradient_loss_grad(
    pred: &ArrayView3<f32>,
    target: &ArrayView3<f32>,
    alpha: u32,
    reduction: Reduction,
) -> Result<(f64, Array3<f32>)> {
    check_same_shape(pred, target, "gradient_loss")?;
    if alpha < 1 {
        return Err(Error::Config(vec!["gradient_loss alpha must be >= 1".to_string()]));
    }
    let (c, h, w) = pred.dim();
    let n_terms = c * ((h.saturating_sub(1)) * w + h * (w.saturating_sub(1)));
    let scale = match reduction {
        Reduction::Mean => {
            if n_terms == 0 {
                0.0
            } else {
                1.0 / n_terms as f64
            }
        }
        Reduction::Sum => 1.0,
    };
    let mut sum = 0.0f64;
    let mut grad = Array3::<f32>::zeros(pred.dim());
    for ci in 0..c {
        for i in 1..h {
            for j in 0..w {
                let dt = target[(ci, i, j)] as f64 - target[(ci, i - 1, j)] as f64;
                let dp = pred[(ci, i, j)] as f64 - pred[(ci, i - 1, j)] as f64;
                let u = dt.abs() - dp.abs();
                sum += pow_abs(u, alpha);
                let d = -pow_abs_deriv(u, alpha) * dp.signum() * scale;
                grad[(ci, i, j)] += d as f32;
                grad[(ci, i - 1, j)] -= d as f32;
            }
        }
        for i in 0..h {
            for j in 1..w {
                let dt = target[(ci, i, j - 1)] as f64 - target[(ci, i, j)] as f64;
                let dp = pred[(ci, i, j - 1)] as f64 - pred[(ci, i, j)] as f64;
                let u = dt.abs() - dp.abs();
                sum += pow_abs(u, alpha);
                let d = -pow_abs_deriv(u, alpha) * dp.signum() * scale;
                grad[(ci, i, j - 1)] += d as f32;
                grad[(ci, i, j)] -= d as f32;
            }
        }
    }
    Ok((sum * scale, grad))
}

/// Per-position inconsistency `1 - cos(f_s[:, m, n], f_t[:, m, n])`.
pub fn feature_inconsistency_map(
    f_s: &ArrayView3<f32>,
    f_t: &ArrayView3<f32>,
) -> Result<Array2<f32>> {
    check_same_shape(f_s, f_t, "feature_inconsistency_map")?;
    let (c, m, n) = f_s.dim();
    let mut map = Array2::<f32>::zeros((m, n));
    for mi in 0..m {
        for ni in 0..n {
            let mut dot = 0.0f64;
            let mut ns = 0.0f64;
            let mut nt = 0.0f64;
            for ci in 0..c {
                let a = f_s[(ci, mi, ni)] as f64;
                let b = f_t[(ci, mi, ni)] as f64;
                dot += a * b;
                ns += a * a;
                nt += b * b;
            }
            let denom = ns.sqrt().max(COS_EPS as f64) * nt.sqrt().max(COS_EPS as f64);
            map[(mi, ni)] = (1.0 - dot / denom) as f32;
        }
    }
    Ok(map)
}

/// Spatial mean of one block's inconsistency map (the S_c^k component).
pub fn feature_inconsistency_block(f_s: &ArrayView3<f32>, f_t: &ArrayView3<f32>) -> Result<f64> {
    let map = feature_inconsistency_map(f_s, f_t)?;
    Ok(map.iter().map(|v| *v as f64).sum::<f64>() / map.len() as f64)
}

/// Block value plus gradient w.r.t. `f_s` of the spatial mean.
/// Positions where the student vector is clamped to the norm floor get zero
/// gradient.
pub fn feature_inconsistency_block_grad(
    f_s: &ArrayView3<f32>,
    f_t: &ArrayView3<f32>,
) -> Result<(f64, Array3<f32>)> {
    check_same_shape(f_s, f_t, "feature_inconsistency_block")?;
    let (c, m, n) = f_s.dim();
    let inv_mn = 1.0 / (m * n) as f64;
    let mut total = 0.0f64;
    let mut grad = Array3::<f32>::zeros(f_s.dim());
    for mi in 0..m {
        for ni in 0..n {
            let mut dot = 0.0f64;
            let mut ns2 = 0.0f64;
            let mut nt2 = 0.0f64;
            for ci in 0..c {
                let a = f_s[(ci, mi, ni)] as f64;
                let b = f_t[(ci, mi, ni)] as f64;
                dot += a * b;
                ns2 += a * a;
                nt2 += b * b;
            }
            let ns = ns2.sqrt();
            let nt = nt2.sqrt();
            let denom = ns.max(COS_EPS as f64) * nt.max(COS_EPS as f64);
            let cos = dot / denom;
            total += 1.0 - cos;
            if ns > COS_EPS as f64 && nt > COS_EPS as f64 {
                // d(1 - cos)/da = -(b/(ns*nt) - cos*a/ns^2), scaled by the mean.
                for ci in 0..c {
                    let a = f_s[(ci, mi, ni)] as f64;
                    let b = f_t[(ci, mi, ni)] as f64;
                    let d = -(b / (ns * nt) - cos * a / ns2) * inv_mn;
                    grad[(ci, mi, ni)] = d as f32;
                }
            }
        }
    }
    Ok((total * inv_mn, grad))
}

/// Mean over K blocks of each block's spatial-mean inconsistency.
pub fn feature_inconsistency_loss(pairs: &[(ArrayView3<f32>, ArrayView3<f32>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Model(
            "feature inconsistency loss requires at least one tapped block".to_string(),
        ));
    }
    let mut sum = 0.0f64;
    for (f_s, f_t) in pairs {
        sum += feature_inconsistency_block(f_s, f_t)?;
    }
    Ok(sum / pairs.len() as f64)
}

/// Weighted combination of the three terms. `weights` should already have
/// mode forcing applied (see [`LossWeights::for_mode`]).
pub fn total_loss(l_e: f64, l_g: f64, l_c: f64, weights: &LossWeights) -> LossBreakdown {
    let total = weights.lambda_e * l_e + weights.lambda_g * l_g + weights.lambda_c * l_c;
    LossBreakdown { l_e, l_g, l_c, total }
}
