//! Channel and spatial attention.
//!
//! Channel attention squeezes each channel to its spatial average and
//! maximum, pushes both vectors through one shared bottleneck MLP (two
//! 1x1 convolutions around a leaky ReLU), sums the results and applies
//! a sigmoid. Spatial attention pools across channels instead, stacks
//! the average and maximum planes and convolves them with a single wide
//! kernel. Both produce gates in (0,1) that multiply the feature map
//! without changing its shape.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gridmath::ops;
use crate::gridmath::Tensor;
use crate::smnet::{conv_init, ParamList};

pub struct ChannelAttention {
    pub(crate) w0: Tensor,
    pub(crate) b0: Tensor,
    pub(crate) w1: Tensor,
    pub(crate) b1: Tensor,
    channels: usize,
    slope: f32,
}

impl ChannelAttention {
    pub fn new(
        channels: usize,
        reduction: usize,
        slope: f32,
        rng: &mut ChaCha8Rng,
    ) -> Result<ChannelAttention> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::Config(format!(
                "channel attention: {channels} channels are not divisible by reduction {reduction}"
            )));
        }
        let mid = channels / reduction;
        let (w0, b0) = conv_init(rng, mid, channels, 1)?;
        let (w1, b1) = conv_init(rng, channels, mid, 1)?;
        Ok(ChannelAttention { w0, b0, w1, b1, channels, slope })
    }

    /// Gate per channel, shape N x C x 1 x 1.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().c != self.channels {
            return Err(Error::Config(format!(
                "channel attention built for {} channels, got {}",
                self.channels,
                x.shape().c
            )));
        }
        let (avg, max) = ops::pool_channel_stats(x)?;
        let squeeze = |v: &Tensor| -> Result<Tensor> {
            let hidden = ops::leaky_relu(&ops::conv2d(v, &self.w0, &self.b0, 1)?, self.slope);
            ops::conv2d(&hidden, &self.w1, &self.b1, 1)
        };
        Ok(ops::sigmoid(&ops::add(&squeeze(&avg)?, &squeeze(&max)?)?))
    }

    pub(crate) fn collect_params(&self, prefix: &str, out: &mut ParamList) {
        out.push((format!("{prefix}.w0"), self.w0.clone()));
        out.push((format!("{prefix}.b0"), self.b0.clone()));
        out.push((format!("{prefix}.w1"), self.w1.clone()));
        out.push((format!("{prefix}.b1"), self.b1.clone()));
    }
}

pub struct SpatialAttention {
    pub(crate) w: Tensor,
    pub(crate) b: Tensor,
    kernel: usize,
}

impl SpatialAttention {
    /// `strict` pins the kernel to the published 7x7; pass false to
    /// experiment with other odd sizes.
    pub fn new(kernel: usize, strict: bool, rng: &mut ChaCha8Rng) -> Result<SpatialAttention> {
        if strict && kernel != 7 {
            return Err(Error::Config(format!(
                "spatial attention kernel is fixed at 7, got {kernel}"
            )));
        }
        if kernel == 0 || kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "spatial attention kernel must be odd, got {kernel}"
            )));
        }
        let (w, b) = conv_init(rng, 1, 2, kernel)?;
        Ok(SpatialAttention { w, b, kernel })
    }

    /// Gate per position, shape N x 1 x H x W. The convolution pads by
    /// repeating edge values so a constant input yields a constant gate.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        let (avg, max) = ops::pool_spatial_stats(x)?;
        let stacked = ops::concat_channels(&avg, &max)?;
        let p = self.kernel / 2;
        let padded = ops::replicate_pad(&stacked, p)?;
        let conv = ops::conv2d(&padded, &self.w, &self.b, 1)?;
        let inner = ops::crop_spatial(&conv, p, p, s.h, s.w)?;
        Ok(ops::sigmoid(&inner))
    }

    pub(crate) fn collect_params(&self, prefix: &str, out: &mut ParamList) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridmath::Shape;
    use rand::{Rng, SeedableRng};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn zero_params(t: &Tensor) {
        t.set_data(&vec![0.0; t.numel()]).unwrap();
    }

    #[test]
    fn zero_weights_pin_both_gates_at_half() {
        let mut r = rng();
        let ca = ChannelAttention::new(4, 2, 0.01, &mut r).unwrap();
        for t in [&ca.w0, &ca.b0, &ca.w1, &ca.b1] {
            zero_params(t);
        }
        let x = Tensor::from_vec(
            Shape::new(2, 4, 3, 3),
            (0..72).map(|i| (i as f32).cos()).collect(),
        )
        .unwrap();
        let mc = ca.forward(&x).unwrap();
        assert_eq!(mc.shape(), Shape::new(2, 4, 1, 1));
        assert!(mc.data().iter().all(|v| *v == 0.5));

        let sa = SpatialAttention::new(7, true, &mut r).unwrap();
        zero_params(&sa.w);
        zero_params(&sa.b);
        let ms = sa.forward(&x).unwrap();
        assert_eq!(ms.shape(), Shape::new(2, 1, 3, 3));
        assert!(ms.data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn identity_mlp_matches_scalar_arithmetic() {
        let mut r = rng();
        let ca = ChannelAttention::new(1, 1, 0.01, &mut r).unwrap();
        ca.w0.set_data(&[1.0]).unwrap();
        ca.w1.set_data(&[1.0]).unwrap();
        zero_params(&ca.b0);
        zero_params(&ca.b1);
        // Spatial average 1, spatial maximum 3.
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 0.0, 0.0, 3.0]).unwrap();
        let mc = ca.forward(&x).unwrap();
        assert_eq!(mc.shape(), Shape::new(1, 1, 1, 1));
        let got = mc.data()[0] as f64;
        assert!((got - 0.98201).abs() <= 1e-5, "sigmoid(4) came out as {got}");
    }

    #[test]
    fn reduction_must_divide_the_channel_count() {
        let mut r = rng();
        let err = ChannelAttention::new(6, 4, 0.01, &mut r).err().unwrap();
        assert!(err.to_string().contains("divisible"));
        assert!(ChannelAttention::new(6, 0, 0.01, &mut r).is_err());
        assert!(ChannelAttention::new(8, 4, 0.01, &mut r).is_ok());
    }

    #[test]
    fn constant_input_gives_a_constant_gate() {
        let mut r = rng();
        let sa = SpatialAttention::new(7, true, &mut r).unwrap();
        let mut data = vec![0.0f32; 3 * 81];
        for (c, v) in [0.3f32, -1.2, 0.8].iter().enumerate() {
            data[c * 81..(c + 1) * 81].fill(*v);
        }
        let x = Tensor::from_vec(Shape::new(1, 3, 9, 9), data).unwrap();
        let ms = sa.forward(&x).unwrap();
        let d = ms.data();
        assert!(d.iter().all(|v| v.to_bits() == d[0].to_bits()), "gate varies: {:?}", &d[..9]);
        assert!(d[0] > 0.0 && d[0] < 1.0);
    }

    #[test]
    fn gates_stay_inside_the_unit_interval() {
        let mut r = rng();
        let ca = ChannelAttention::new(8, 4, 0.01, &mut r).unwrap();
        let sa = SpatialAttention::new(7, true, &mut r).unwrap();
        let x = Tensor::from_vec(
            Shape::new(2, 8, 5, 5),
            (0..400).map(|_| r.gen_range(-30.0..30.0)).collect(),
        )
        .unwrap();
        let mc = ca.forward(&x).unwrap();
        let ms = sa.forward(&x).unwrap();
        for v in mc.data().iter().chain(ms.data().iter()) {
            assert!(*v > 0.0 && *v < 1.0, "gate {v} escaped (0,1)");
        }
    }

    #[test]
    fn strict_mode_pins_the_kernel_at_seven() {
        let mut r = rng();
        assert!(SpatialAttention::new(5, true, &mut r).is_err());
        assert!(SpatialAttention::new(5, false, &mut r).is_ok());
        assert!(SpatialAttention::new(4, false, &mut r).is_err());
        assert!(ChannelAttention::new(4, 2, 0.01, &mut r).unwrap().forward(
            &Tensor::from_vec(Shape::new(1, 3, 2, 2), vec![0.0; 12]).unwrap()
        ).is_err());
    }
}
