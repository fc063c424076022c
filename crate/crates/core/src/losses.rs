//! The three-part training objective: an L1 content term, a squared
//! feature-space distance through the frozen perceptual extractor, and
//! a KL-style term that trains the geometric attention map.
//!
//! All three reduce a batch to a scalar tensor whose exact f64 value
//! rides along (see `Tensor::item_f64`), so logged breakdowns do not
//! pick up a second rounding step on top of the f32 lanes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridmath::{ops, Shape, Tensor};
use crate::smnet::PerceptualExtractor;

fn default_lambda_c() -> f64 {
    1.0
}

fn default_lambda_p() -> f64 {
    0.05
}

fn default_lambda_g() -> f64 {
    0.01
}

/// Mixing weights for the combined loss. Content carries the main
/// signal and must stay positive; the other two may be zeroed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "default_lambda_c")]
    pub lambda_c: f64,
    #[serde(default = "default_lambda_p")]
    pub lambda_p: f64,
    #[serde(default = "default_lambda_g")]
    pub lambda_g: f64,
}

impl Default for LossWeights {
    fn default() -> LossWeights {
        LossWeights {
            lambda_c: default_lambda_c(),
            lambda_p: default_lambda_p(),
            lambda_g: default_lambda_g(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_c", self.lambda_c),
            ("lambda_p", self.lambda_p),
            ("lambda_g", self.lambda_g),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if self.lambda_c == 0.0 {
            return Err(Error::Config(
                "loss weight lambda_c must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One batch's loss terms plus their weighted total, all scalar
/// tensors still attached to the graph. Disabled terms appear as
/// constant zeros so the CSV log keeps a stable column set.
pub struct LossBreakdown {
    pub content: Tensor,
    pub perceptual: Tensor,
    pub geometric: Tensor,
    pub total: Tensor,
}

fn expect_scalar(name: &str, t: &Tensor) -> Result<()> {
    if t.shape() != Shape::scalar() {
        return Err(Error::Config(format!(
            "{name} loss term must be scalar, got {}",
            t.shape()
        )));
    }
    Ok(())
}

fn expect_fields(op: &str, x: &Tensor, y: &Tensor) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::Config(format!(
            "{op}: incompatible shapes {} and {}",
            x.shape(),
            y.shape()
        )));
    }
    if x.shape().c != 1 {
        return Err(Error::Config(format!(
            "{op} expects single-channel fields, got {}",
            x.shape()
        )));
    }
    Ok(())
}

/// Mean absolute deviation over the batch: sum |x - y| over every
/// element divided by L*W*N.
pub fn content_loss(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    expect_fields("content loss", x, y)?;
    let total = ops::sum(&ops::abs(&ops::sub(x, y)?));
    Ok(ops::scale(&total, 1.0 / x.numel() as f64))
}

/// Squared distance between two feature maps of one extractor stage,
/// summed over every element and divided by the stage's L*W*N. The
/// channel axis is summed but not divided out, matching the printed
/// normalization.
pub fn feature_distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Config(format!(
            "feature distance: incompatible shapes {} and {}",
            a.shape(),
            b.shape()
        )));
    }
    let s = a.shape();
    let total = ops::sum(&ops::square(&ops::sub(a, b)?));
    Ok(ops::scale(&total, 1.0 / (s.n * s.h * s.w) as f64))
}

/// Feature-space loss: the mean of [`feature_distance`] over both
/// extractor stages. The extractor must be frozen first so the metric
/// is fixed; gradients reach only the inputs.
pub fn perceptual_loss(
    x: &Tensor,
    y: &Tensor,
    extractor: &PerceptualExtractor,
) -> Result<Tensor> {
    extractor.assert_frozen()?;
    expect_fields("perceptual loss", x, y)?;
    let (xa, xb) = extractor.forward(x)?;
    let (ya, yb) = extractor.forward(y)?;
    let da = feature_distance(&xa, &ya)?;
    let db = feature_distance(&xb, &yb)?;
    Ok(ops::scale(&ops::add(&da, &db)?, 0.5))
}

/// KL-style map loss: sum y*(log y - x) over the batch divided by
/// L*W*N, with x a log-domain map and y a spatial distribution.
/// Zeros in y are clamped to 1e-12 before the logarithm; since the
/// matching factor stays raw, those cells contribute exactly nothing.
pub fn geometric_loss(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    expect_fields("geometric loss", x, y)?;
    if y.data().iter().any(|v| *v < 0.0) {
        return Err(Error::Data(
            "geometric target contains negative probabilities".into(),
        ));
    }
    let log_y: Vec<f32> = y
        .data()
        .iter()
        .map(|v| (*v as f64).max(1e-12).ln() as f32)
        .collect();
    let log_y = Tensor::from_vec(y.shape(), log_y)?;
    let term = ops::mul(y, &ops::sub(&log_y, x)?)?;
    Ok(ops::scale(&ops::sum(&term), 1.0 / x.numel() as f64))
}

/// Weighted combination of the three terms. Terms a configuration has
/// switched off arrive as `None` and enter the breakdown as constant
/// zeros. The total is assembled with f64 factors, so the identity
/// total = lambda_c*content + lambda_p*perceptual + lambda_g*geometric
/// holds to f64 rounding.
pub fn total_loss(
    content: &Tensor,
    perceptual: Option<&Tensor>,
    geometric: Option<&Tensor>,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    weights.validate()?;
    expect_scalar("content", content)?;
    if let Some(p) = perceptual {
        expect_scalar("perceptual", p)?;
    }
    if let Some(g) = geometric {
        expect_scalar("geometric", g)?;
    }
    let mut total = ops::scale(content, weights.lambda_c);
    if let Some(p) = perceptual {
        total = ops::add(&total, &ops::scale(p, weights.lambda_p))?;
    }
    if let Some(g) = geometric {
        total = ops::add(&total, &ops::scale(g, weights.lambda_g))?;
    }
    Ok(LossBreakdown {
        content: content.clone(),
        perceptual: perceptual.cloned().unwrap_or_else(|| Tensor::scalar(0.0)),
        geometric: geometric.cloned().unwrap_or_else(|| Tensor::scalar(0.0)),
        total,
    })
}
