//! The two auxiliary feature extractors and the geometric training
//! target.
//!
//! The geometric target turns a high-density field into a spatial
//! probability distribution that piles mass onto sharp features: Sobel
//! gradient magnitude, area-averaged down to the extractor resolution,
//! divided by its mean so the sharpening is contrast-invariant, then a
//! spatial softmax taken in log domain. The geometric extractor is a
//! small strided CNN trained to predict that distribution from the
//! interpolated input alone; the perceptual extractor supplies frozen
//! feature spaces for the perceptual loss.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gridmath::ops;
use crate::gridmath::{Shape, Tensor};
use crate::smnet::blocks::ResAttentionBlock;
use crate::smnet::{conv_init, ParamList};

/// Log-domain target distribution for the geometric loss, one plane per
/// sample, at 1/`factor` of the input resolution. Computed in f64 and
/// returned as a constant tensor.
pub fn geometric_target(hr: &Tensor, factor: usize) -> Result<Tensor> {
    let s = hr.shape();
    if s.c != 1 {
        return Err(Error::Config(format!(
            "geometric target needs a single-channel field, got {} channels",
            s.c
        )));
    }
    if factor == 0 || s.h % factor != 0 || s.w % factor != 0 {
        return Err(Error::Config(format!(
            "geometric target: {}x{} field is not divisible by factor {factor}",
            s.h, s.w
        )));
    }
    let (th, tw) = (s.h / factor, s.w / factor);
    let mut out = vec![0.0f32; s.n * th * tw];
    let data = hr.data();
    for sample in 0..s.n {
        let plane = &data[sample * s.h * s.w..(sample + 1) * s.h * s.w];
        let at = |y: isize, x: isize| -> f64 {
            let y = y.clamp(0, s.h as isize - 1) as usize;
            let x = x.clamp(0, s.w as isize - 1) as usize;
            plane[y * s.w + x] as f64
        };
        // Sobel magnitude with repeated edges, pooled to the target grid.
        let mut pooled = vec![0.0f64; th * tw];
        for y in 0..s.h as isize {
            for x in 0..s.w as isize {
                let gx = at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1)
                    - at(y - 1, x - 1)
                    - 2.0 * at(y, x - 1)
                    - at(y + 1, x - 1);
                let gy = at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1)
                    - at(y - 1, x - 1)
                    - 2.0 * at(y - 1, x)
                    - at(y - 1, x + 1);
                let mag = (gx * gx + gy * gy).sqrt();
                pooled[(y as usize / factor) * tw + x as usize / factor] += mag;
            }
        }
        let cell = (factor * factor) as f64;
        for v in pooled.iter_mut() {
            *v /= cell;
        }
        let dst = &mut out[sample * th * tw..(sample + 1) * th * tw];
        let mean = pooled.iter().sum::<f64>() / pooled.len() as f64;
        if mean <= 0.0 {
            // Featureless field: fall back to the uniform distribution.
            let log_u = -((th * tw) as f64).ln();
            dst.fill(log_u as f32);
            continue;
        }
        // Dividing by the mean fixes the softmax temperature regardless
        // of field contrast, which is what concentrates the mass.
        let mut top = f64::NEG_INFINITY;
        for v in pooled.iter_mut() {
            *v /= mean;
            top = top.max(*v);
        }
        let norm: f64 = pooled.iter().map(|v| (v - top).exp()).sum();
        let log_norm = norm.ln();
        for (d, v) in dst.iter_mut().zip(&pooled) {
            *d = ((v - top) - log_norm) as f32;
        }
    }
    Tensor::from_vec(Shape::new(s.n, 1, th, tw), out)
}

/// Predicts the geometric target from the interpolated input: two
/// stride-2 conv stages, a 1x1 head, and a spatial log-softmax. Its
/// weights receive gradients only from the geometric loss.
pub struct GeometricExtractor {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    w3: Tensor,
    b3: Tensor,
    slope: f32,
}

impl GeometricExtractor {
    pub fn new(base_channels: usize, slope: f32, rng: &mut ChaCha8Rng) -> Result<GeometricExtractor> {
        let c1 = base_channels / 2;
        let c2 = base_channels;
        let (w1, b1) = conv_init(rng, c1, 1, 3)?;
        let (w2, b2) = conv_init(rng, c2, c1, 3)?;
        let (w3, b3) = conv_init(rng, 1, c2, 1)?;
        Ok(GeometricExtractor { w1, b1, w2, b2, w3, b3, slope })
    }

    /// Log-domain map at 1/4 of the input resolution.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().c != 1 {
            return Err(Error::Config(format!(
                "geometric extractor needs a single-channel field, got {} channels",
                x.shape().c
            )));
        }
        let h1 = ops::leaky_relu(&ops::conv2d(x, &self.w1, &self.b1, 2)?, self.slope);
        let h2 = ops::leaky_relu(&ops::conv2d(&h1, &self.w2, &self.b2, 2)?, self.slope);
        let logits = ops::conv2d(&h2, &self.w3, &self.b3, 1)?;
        Ok(ops::log_softmax_spatial(&logits))
    }

    pub(crate) fn collect_params(&self, prefix: &str, out: &mut ParamList) {
        out.push((format!("{prefix}.conv1.w"), self.w1.clone()));
        out.push((format!("{prefix}.conv1.b"), self.b1.clone()));
        out.push((format!("{prefix}.conv2.w"), self.w2.clone()));
        out.push((format!("{prefix}.conv2.b"), self.b2.clone()));
        out.push((format!("{prefix}.head.w"), self.w3.clone()));
        out.push((format!("{prefix}.head.b"), self.b3.clone()));
    }
}

/// Fixed feature spaces for the perceptual loss: two stride-2 residual
/// stages pretrained as an autoencoder, then frozen. Using it unfrozen
/// in the main loss is a contract violation, not a configuration issue.
pub struct PerceptualExtractor {
    stage1: ResAttentionBlock,
    stage2: ResAttentionBlock,
    frozen: bool,
}

impl PerceptualExtractor {
    pub fn new(base_channels: usize, slope: f32, rng: &mut ChaCha8Rng) -> Result<PerceptualExtractor> {
        let mid = base_channels / 2;
        Ok(PerceptualExtractor {
            stage1: ResAttentionBlock::new(1, mid, true, None, slope, rng)?,
            stage2: ResAttentionBlock::new(mid, base_channels, true, None, slope, rng)?,
            frozen: false,
        })
    }

    /// Both stage outputs, at 1/2 and 1/4 of the input resolution.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let f1 = self.stage1.forward(x)?;
        let f2 = self.stage2.forward(&f1)?;
        Ok((f1, f2))
    }

    /// Stops gradient accumulation for every weight and marks the
    /// feature spaces as fixed.
    pub fn freeze(&mut self) {
        let mut params = Vec::new();
        self.collect_params("perc", &mut params);
        for (_, p) in &params {
            p.set_requires_grad(false);
        }
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn assert_frozen(&self) -> Result<()> {
        if !self.frozen {
            return Err(Error::Invariant(
                "perceptual extractor used before its weights were frozen".into(),
            ));
        }
        Ok(())
    }

    pub(crate) fn collect_params(&self, prefix: &str, out: &mut ParamList) {
        self.stage1.collect_params(&format!("{prefix}.stage1"), out);
        self.stage2.collect_params(&format!("{prefix}.stage2"), out);
    }

    pub fn parameters(&self) -> ParamList {
        let mut out = Vec::new();
        self.collect_params("perc", &mut out);
        out
    }
}
