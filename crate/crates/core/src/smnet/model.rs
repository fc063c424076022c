//! The assembled network.
//!
//! The input stage is plain bilinear interpolation up to the output
//! size, so every convolution afterwards works at output resolution and
//! the weight tensors never depend on the scale factor. Four stride-2
//! residual stages halve the resolution to 1/16, a configurable stack of
//! residual blocks deepens the bottleneck, and four mirrored stages
//! (bilinear x2, optional skip concatenation, conv) climb back up. The
//! geometric extractor reads the interpolated input and its map is added
//! to one up-sampling stage; the map is detached there so only the
//! geometric loss trains the extractor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gridmath::ops;
use crate::gridmath::Tensor;
use crate::smnet::blocks::ResAttentionBlock;
use crate::smnet::config::{ModelConfig, ENCODER_DEPTH};
use crate::smnet::extractors::{GeometricExtractor, PerceptualExtractor};
use crate::smnet::{conv_init, ParamList};

pub struct Model {
    pub config: ModelConfig,
    stem_w: Tensor,
    stem_b: Tensor,
    downs: Vec<ResAttentionBlock>,
    bneck: Vec<ResAttentionBlock>,
    ups: Vec<(Tensor, Tensor)>,
    head_w: Tensor,
    head_b: Tensor,
    pub geometric: Option<GeometricExtractor>,
    pub perceptual: Option<PerceptualExtractor>,
}

impl Model {
    /// Builds and initializes the network. Equal configs give bitwise
    /// identical models: every draw comes from one seeded stream in
    /// construction order.
    pub fn new(config: &ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let bc = config.base_channels;
        let slope = config.leaky_slope;
        let attention = config
            .use_attention
            .then_some((config.channel_reduction, config.spatial_kernel));

        let (stem_w, stem_b) = conv_init(&mut rng, bc, 1, 3)?;
        let mut downs = Vec::with_capacity(ENCODER_DEPTH);
        for i in 0..ENCODER_DEPTH {
            downs.push(ResAttentionBlock::new(
                config.width(i),
                config.width(i + 1),
                true,
                attention,
                slope,
                &mut rng,
            )?);
        }
        let deep = config.width(ENCODER_DEPTH);
        let mut bneck = Vec::with_capacity(config.bottleneck_blocks);
        for _ in 0..config.bottleneck_blocks {
            bneck.push(ResAttentionBlock::new(deep, deep, false, None, slope, &mut rng)?);
        }
        let mut ups = Vec::with_capacity(ENCODER_DEPTH);
        for i in 0..ENCODER_DEPTH {
            let carried = config.width(ENCODER_DEPTH - i);
            let skip = if config.use_skip {
                config.width(ENCODER_DEPTH - 1 - i)
            } else {
                0
            };
            ups.push(conv_init(&mut rng, config.width(ENCODER_DEPTH - 1 - i), carried + skip, 3)?);
        }
        let (head_w, head_b) = conv_init(&mut rng, 1, bc, 1)?;
        let geometric = if config.use_geometric {
            Some(GeometricExtractor::new(bc, slope, &mut rng)?)
        } else {
            None
        };
        let perceptual = if config.use_perceptual {
            Some(PerceptualExtractor::new(bc, slope, &mut rng)?)
        } else {
            None
        };

        Ok(Model {
            config: config.clone(),
            stem_w,
            stem_b,
            downs,
            bneck,
            ups,
            head_w,
            head_b,
            geometric,
            perceptual,
        })
    }

    /// Reconstructed field plus, when the geometric branch is active,
    /// the extractor's log-domain map for the geometric loss.
    pub fn forward_with_map(&self, lr: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        let s = lr.shape();
        if s.c != 1 {
            return Err(Error::Config(format!(
                "model input must have one channel, got {}",
                s.c
            )));
        }
        let scale = self.config.scale;
        let (oh, ow) = (s.h * scale, s.w * scale);
        if oh % 16 != 0 || ow % 16 != 0 {
            let unit = 16 / gcd(16, scale);
            return Err(Error::Config(format!(
                "input {}x{} with scale {scale} gives output {oh}x{ow}, which the four \
                 down-sampling stages cannot halve cleanly; valid input sides are \
                 multiples of {unit}",
                s.h, s.w
            )));
        }
        let interpolated = ops::upsample_bilinear(lr, scale)?;
        let geo_map = match &self.geometric {
            Some(g) => Some(g.forward(&interpolated)?),
            None => None,
        };

        let slope = self.config.leaky_slope;
        let stem = ops::leaky_relu(
            &ops::conv2d(&interpolated, &self.stem_w, &self.stem_b, 1)?,
            slope,
        );
        let mut skips = vec![stem.clone()];
        let mut feats = stem;
        for (i, blk) in self.downs.iter().enumerate() {
            feats = blk.forward(&feats)?;
            if i + 1 < ENCODER_DEPTH {
                skips.push(feats.clone());
            }
        }
        for blk in &self.bneck {
            feats = blk.forward(&feats)?;
        }
        for (i, (w, b)) in self.ups.iter().enumerate() {
            feats = ops::upsample_bilinear(&feats, 2)?;
            if self.config.use_skip {
                feats = ops::concat_channels(&feats, &skips[ENCODER_DEPTH - 1 - i])?;
            }
            feats = ops::leaky_relu(&ops::conv2d(&feats, w, b, 1)?, slope);
            if i + 1 == self.config.geometric_stage {
                if let Some(map) = &geo_map {
                    // The extractor emits the map in log domain for the
                    // loss; the features receive the distribution itself.
                    let fs = feats.shape();
                    let prob = ops::exp(&map.detach());
                    let resized = ops::bilinear_resize(&prob, fs.h, fs.w)?;
                    feats = ops::add_broadcast_spatial(&feats, &resized)?;
                }
            }
        }
        let pred = ops::conv2d(&feats, &self.head_w, &self.head_b, 1)?;
        Ok((pred, geo_map))
    }

    pub fn forward(&self, lr: &Tensor) -> Result<Tensor> {
        self.forward_with_map(lr).map(|(pred, _)| pred)
    }

    /// Stable name to tensor registry in construction order; checkpoints
    /// serialize exactly this list.
    pub fn parameters(&self) -> ParamList {
        let mut out = Vec::new();
        out.push(("stem.w".to_string(), self.stem_w.clone()));
        out.push(("stem.b".to_string(), self.stem_b.clone()));
        for (i, blk) in self.downs.iter().enumerate() {
            blk.collect_params(&format!("down{}", i + 1), &mut out);
        }
        for (i, blk) in self.bneck.iter().enumerate() {
            blk.collect_params(&format!("bneck{}", i + 1), &mut out);
        }
        for (i, (w, b)) in self.ups.iter().enumerate() {
            out.push((format!("up{}.w", i + 1), w.clone()));
            out.push((format!("up{}.b", i + 1), b.clone()));
        }
        out.push(("head.w".to_string(), self.head_w.clone()));
        out.push(("head.b".to_string(), self.head_b.clone()));
        if let Some(g) = &self.geometric {
            g.collect_params("geo", &mut out);
        }
        if let Some(p) = &self.perceptual {
            p.collect_params("perc", &mut out);
        }
        out
    }

    /// Total trainable values. A pure function of the config; scale in
    /// particular never changes it.
    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, p)| p.numel()).sum()
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridmath::{check_gradients_scaled, NoGradGuard, Shape};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};

    fn tiny(scale: usize) -> ModelConfig {
        ModelConfig {
            base_channels: 4,
            bottleneck_blocks: 1,
            scale,
            seed: 9,
            ..ModelConfig::default()
        }
    }

    fn field(n: usize, side: usize, seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(
            Shape::new(n, 1, side, side),
            (0..n * side * side).map(|_| r.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn output_shape_is_the_input_scaled() {
        let _quiet = NoGradGuard::new();
        for (scale, side) in [(2usize, 8usize), (4, 8), (8, 2)] {
            let m = Model::new(&tiny(scale)).unwrap();
            let y = m.forward(&field(1, side, 1)).unwrap();
            assert_eq!(y.shape(), Shape::new(1, 1, side * scale, side * scale));
        }
    }

    #[test]
    fn indivisible_inputs_name_the_valid_sizes() {
        let m = Model::new(&tiny(2)).unwrap();
        let err = m.forward(&field(1, 30, 2)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("multiples of 8"), "{msg}");
        let m4 = Model::new(&tiny(4)).unwrap();
        assert!(m4.forward(&field(1, 3, 2)).unwrap_err().to_string().contains("multiples of 4"));
        assert!(m4.forward(&field(1, 8, 2)).is_ok());
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let _quiet = NoGradGuard::new();
        let m = Model::new(&tiny(2)).unwrap();
        let x = field(2, 8, 3);
        let a = m.forward(&x).unwrap();
        let b = m.forward(&x).unwrap();
        for (u, v) in a.data().iter().zip(b.data().iter()) {
            assert_eq!(u.to_bits(), v.to_bits());
        }

        // Same config, fresh build: identical weights, identical output.
        let m2 = Model::new(&tiny(2)).unwrap();
        let c = m2.forward(&x).unwrap();
        for (u, v) in a.data().iter().zip(c.data().iter()) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn parameter_count_depends_on_topology_not_scale() {
        let count = |cfg: &ModelConfig| Model::new(cfg).unwrap().parameter_count();
        let base = tiny(2);
        assert_eq!(count(&base), count(&tiny(8)));
        assert_eq!(count(&base), count(&base));

        let mut plain = base.clone();
        plain.use_skip = false;
        plain.use_attention = false;
        plain.use_perceptual = false;
        plain.use_geometric = false;
        assert!(count(&plain) < count(&base));

        let mut wide = base.clone();
        wide.base_channels = 8;
        assert!(count(&wide) > count(&base));

        let mut deep = base.clone();
        deep.bottleneck_blocks = 3;
        assert!(count(&deep) > count(&base));
    }

    #[test]
    fn all_switches_off_leaves_a_plain_residual_network() {
        let mut cfg = tiny(2);
        cfg.use_skip = false;
        cfg.use_attention = false;
        cfg.use_perceptual = false;
        cfg.use_geometric = false;
        let m = Model::new(&cfg).unwrap();
        for (name, _) in m.parameters() {
            assert!(
                !name.contains(".ca.") && !name.contains(".sa."),
                "unexpected attention parameter {name}"
            );
            assert!(
                !name.starts_with("geo") && !name.starts_with("perc"),
                "unexpected extractor parameter {name}"
            );
        }
        let _quiet = NoGradGuard::new();
        let (pred, map) = m.forward_with_map(&field(1, 8, 4)).unwrap();
        assert_eq!(pred.shape(), Shape::new(1, 1, 16, 16));
        assert!(map.is_none());
    }

    #[test]
    fn strict_spatial_kernel_is_enforced_at_build_time() {
        let mut cfg = tiny(2);
        cfg.spatial_kernel = 5;
        assert!(Model::new(&cfg).is_err());
        cfg.use_attention = false;
        assert!(Model::new(&cfg).is_ok());
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let cfg = tiny(2);
        let m = Model::new(&cfg).unwrap();
        let x = field(1, 16, 5);
        let target = field(1, 32, 6);

        // The trunk is checked against a squared-error readout, with
        // errors measured against the dominant gradient component: the
        // f32 forward pass puts an absolute noise floor under every
        // finite difference, so components below it carry no signal.
        // The geometric extractor is excluded: its map enters the
        // decoder detached by design, so the analytic gradient
        // deliberately ignores that path while a finite difference
        // would see it.
        //
        // Tolerance: per-operation backward passes are verified to
        // much tighter bounds on conditioned inputs in the kernel
        // suite. This test guards the composition (skip wiring,
        // broadcast injection, detachment), where a real bug shifts
        // gradients by orders of magnitude. The floor here is set by
        // leaky-unit kinks sitting inside the probe window: a central
        // difference straddling one averages the two linear pieces no
        // matter the step, which shows up as a few-permille error on
        // the dominant component of this particular seed.
        let mut trunk: ParamList = m
            .parameters()
            .into_iter()
            .filter(|(n, _)| !n.starts_with("geo") && !n.starts_with("perc"))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        trunk.shuffle(&mut rng);
        trunk.truncate(50);
        let mut loss = || {
            let pred = m.forward(&x)?;
            Ok(ops::sum(&ops::square(&ops::sub(&pred, &target)?)))
        };
        let report =
            check_gradients_scaled(&trunk, &mut loss, 1, &[2e-4, 1e-3, 4e-3, 2e-2], 78).unwrap();
        assert_eq!(report.checked, 50);
        assert!(
            report.within(5e-3),
            "trunk: rel err {:.3e} at {}[{}] ({} vs {})",
            report.max_rel_err,
            report.worst_param,
            report.worst_index,
            report.worst_analytic,
            report.worst_numeric
        );

        // The extractor itself differentiates cleanly through its own
        // output, checked with a sparse power-of-two readout so the
        // weighting adds no rounding noise. Sparsity matters: a dense
        // readout of a near-uniform softmax cancels almost perfectly
        // (the row sums of its jacobian are zero), leaving gradients
        // three orders below the readout's own noise. Biases are
        // skipped for the same reason in aggravated form: the softmax
        // is shift-invariant, so their gradients are pure cancellation
        // residue, while the bias backward is the same code path every
        // other convolution already exercises. Before probing, the
        // extractor's rectifiers are woken up by shifting its biases
        // positive: at this init most of its units sit on the 0.01
        // slope, which attenuates every gradient below what a finite
        // difference can resolve against the f32 forward noise.
        let geo: ParamList = m
            .parameters()
            .into_iter()
            .filter(|(n, _)| n.starts_with("geo") && n.ends_with(".w"))
            .collect();
        for (name, p) in m.parameters() {
            if name.starts_with("geo") && name.ends_with(".b") {
                p.update_data(|d| d.fill(0.5));
            }
        }
        let mut weights = vec![0f32; 64];
        weights[5] = 2.0;
        weights[29] = -1.0;
        weights[50] = 1.0;
        let t = Tensor::from_vec(Shape::new(1, 1, 8, 8), weights).unwrap();
        let mut geo_loss = || {
            let (_, map) = m.forward_with_map(&x)?;
            let map = map.expect("geometric branch is on");
            Ok(ops::sum(&ops::mul(&map, &t)?))
        };
        let geo_report =
            check_gradients_scaled(&geo, &mut geo_loss, 8, &[1e-3, 4e-3, 2e-2], 80).unwrap();
        assert!(
            geo_report.within(5e-3),
            "extractor: rel err {:.3e} at {}[{}]",
            geo_report.max_rel_err,
            geo_report.worst_param,
            geo_report.worst_index
        );
    }
}
