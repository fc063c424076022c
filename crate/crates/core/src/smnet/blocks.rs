//! Residual building block with optional attention and down-sampling.
//!
//! The branch is conv, leaky ReLU, conv. With attention enabled the
//! branch output is gated per channel and then per position before the
//! skip addition. Down-sampling blocks use a stride-2 first convolution
//! and a 1x1 stride-2 projection on the identity path; a plain channel
//! change projects with stride 1.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gridmath::ops;
use crate::gridmath::Tensor;
use crate::smnet::attention::{ChannelAttention, SpatialAttention};
use crate::smnet::{conv_init, ParamList};

pub struct ResAttentionBlock {
    pub(crate) w1: Tensor,
    pub(crate) b1: Tensor,
    pub(crate) w2: Tensor,
    pub(crate) b2: Tensor,
    pub(crate) proj: Option<(Tensor, Tensor)>,
    pub(crate) attention: Option<(ChannelAttention, SpatialAttention)>,
    stride: usize,
    slope: f32,
    cin: usize,
}

impl ResAttentionBlock {
    /// `attention` carries (channel reduction, spatial kernel) when the
    /// block should gate its branch.
    pub fn new(
        cin: usize,
        cout: usize,
        downsample: bool,
        attention: Option<(usize, usize)>,
        slope: f32,
        rng: &mut ChaCha8Rng,
    ) -> Result<ResAttentionBlock> {
        let stride = if downsample { 2 } else { 1 };
        let (w1, b1) = conv_init(rng, cout, cin, 3)?;
        let (w2, b2) = conv_init(rng, cout, cout, 3)?;
        let proj = if downsample || cin != cout {
            Some(conv_init(rng, cout, cin, 1)?)
        } else {
            None
        };
        let attention = match attention {
            Some((reduction, kernel)) => Some((
                ChannelAttention::new(cout, reduction, slope, rng)?,
                SpatialAttention::new(kernel, true, rng)?,
            )),
            None => None,
        };
        Ok(ResAttentionBlock { w1, b1, w2, b2, proj, attention, stride, slope, cin })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().c != self.cin {
            return Err(Error::Config(format!(
                "residual block expects {} input channels, got {}",
                self.cin,
                x.shape().c
            )));
        }
        let mut branch = ops::conv2d(x, &self.w1, &self.b1, self.stride)?;
        branch = ops::leaky_relu(&branch, self.slope);
        branch = ops::conv2d(&branch, &self.w2, &self.b2, 1)?;
        if let Some((ca, sa)) = &self.attention {
            let mc = ca.forward(&branch)?;
            branch = ops::mul_broadcast(&branch, &mc)?;
            let ms = sa.forward(&branch)?;
            branch = ops::mul_broadcast(&branch, &ms)?;
        }
        let identity = match &self.proj {
            Some((w, b)) => ops::conv2d(x, w, b, self.stride)?,
            None => x.clone(),
        };
        ops::add(&branch, &identity)
    }

    pub(crate) fn collect_params(&self, prefix: &str, out: &mut ParamList) {
        out.push((format!("{prefix}.conv1.w"), self.w1.clone()));
        out.push((format!("{prefix}.conv1.b"), self.b1.clone()));
        out.push((format!("{prefix}.conv2.w"), self.w2.clone()));
        out.push((format!("{prefix}.conv2.b"), self.b2.clone()));
        if let Some((w, b)) = &self.proj {
            out.push((format!("{prefix}.proj.w"), w.clone()));
            out.push((format!("{prefix}.proj.b"), b.clone()));
        }
        if let Some((ca, sa)) = &self.attention {
            ca.collect_params(&format!("{prefix}.ca"), out);
            sa.collect_params(&format!("{prefix}.sa"), out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridmath::Shape;
    use rand::{Rng, SeedableRng};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    fn zero(t: &Tensor) {
        t.set_data(&vec![0.0; t.numel()]).unwrap();
    }

    /// 3x3 kernel stack that passes each channel through unchanged.
    fn identity_kernel(c: usize) -> Vec<f32> {
        let mut w = vec![0.0f32; c * c * 9];
        for i in 0..c {
            w[(i * c + i) * 9 + 4] = 1.0;
        }
        w
    }

    #[test]
    fn zero_branch_reduces_to_the_identity_path() {
        let mut r = rng();
        let positive: Vec<f32> = (0..2 * 3 * 16).map(|_| r.gen_range(0.1..1.0)).collect();
        let x = Tensor::from_vec(Shape::new(2, 3, 4, 4), positive).unwrap();

        // Same width, no attention: the block collapses to x itself.
        let same = ResAttentionBlock::new(3, 3, false, None, 0.01, &mut r).unwrap();
        for t in [&same.w1, &same.b1, &same.w2, &same.b2] {
            zero(t);
        }
        assert!(same.proj.is_none());
        let y = same.forward(&x).unwrap();
        for (a, b) in y.data().iter().zip(x.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }

        // Widening block: the output is exactly the 1x1 projection.
        let wide = ResAttentionBlock::new(3, 5, false, None, 0.01, &mut r).unwrap();
        for t in [&wide.w1, &wide.b1, &wide.w2, &wide.b2] {
            zero(t);
        }
        let (pw, pb) = wide.proj.as_ref().unwrap();
        let want = ops::conv2d(&x, pw, pb, 1).unwrap();
        let got = wide.forward(&x).unwrap();
        for (a, b) in got.data().iter().zip(want.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn zero_attention_scales_the_branch_by_a_quarter() {
        let mut r = rng();
        let blk = ResAttentionBlock::new(2, 2, false, Some((2, 7)), 0.01, &mut r).unwrap();
        blk.w1.set_data(&identity_kernel(2)).unwrap();
        blk.w2.set_data(&identity_kernel(2)).unwrap();
        zero(&blk.b1);
        zero(&blk.b2);
        let (ca, sa) = blk.attention.as_ref().unwrap();
        for t in [&ca.w0, &ca.b0, &ca.w1, &ca.b1, &sa.w, &sa.b] {
            zero(t);
        }
        // Positive input passes the identity convs untouched, so the
        // branch equals x and both gates sit at 0.5: out = x/4 + x.
        let vals: Vec<f32> = (0..2 * 2 * 9).map(|_| r.gen_range(0.1..1.0)).collect();
        let x = Tensor::from_vec(Shape::new(2, 2, 3, 3), vals).unwrap();
        let y = blk.forward(&x).unwrap();
        for (a, b) in y.data().iter().zip(x.data().iter()) {
            assert!((*a - 1.25 * *b).abs() <= 1e-6, "{a} vs 1.25*{b}");
        }
    }

    #[test]
    fn downsampling_halves_the_spatial_size() {
        let mut r = rng();
        let blk = ResAttentionBlock::new(4, 8, true, Some((4, 7)), 0.01, &mut r).unwrap();
        let x = Tensor::from_vec(
            Shape::new(1, 4, 16, 16),
            (0..4 * 256).map(|_| r.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let y = blk.forward(&x).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 8, 8, 8));

        let err = blk.forward(&Tensor::zeros(Shape::new(1, 3, 16, 16))).unwrap_err();
        assert!(err.to_string().contains("channels"));
    }
}
