//! The reconstruction network: a bilinear input stage feeding an
//! encoder-decoder built from residual blocks with channel and spatial
//! attention, a deepened residual bottleneck, mirrored up-sampling with
//! skip connections, and two auxiliary extractors (geometric and
//! perceptual).
//!
//! Every trainable value is registered under a stable dotted name in
//! construction order; checkpoints serialize that registry verbatim, so
//! save, load and save again produces byte-identical files.

pub mod attention;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod extractors;
pub mod model;

pub use attention::{ChannelAttention, SpatialAttention};
pub use blocks::ResAttentionBlock;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::ModelConfig;
pub use extractors::{geometric_target, GeometricExtractor, PerceptualExtractor};
pub use model::Model;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gridmath::{Shape, Tensor};

/// Convolution weight plus bias, drawn from the centered uniform fan-in
/// distribution U(-sqrt(6/(cin*k*k)), +sqrt(6/(cin*k*k))); biases start
/// at zero. The sqrt(6) gain keeps activation variance roughly constant
/// through rectified conv stacks, so signal reaches the head at useful
/// amplitude from the first step. Draw order is fixed by construction
/// order, so a seed pins every initial value.
pub(crate) fn conv_init(
    rng: &mut ChaCha8Rng,
    cout: usize,
    cin: usize,
    k: usize,
) -> Result<(Tensor, Tensor)> {
    let fan_in = (cin * k * k) as f64;
    let bound = (6.0 / fan_in).sqrt();
    let data: Vec<f32> = (0..cout * cin * k * k)
        .map(|_| rng.gen_range(-bound..bound) as f32)
        .collect();
    let w = Tensor::variable(Shape::new(cout, cin, k, k), data)?;
    let b = Tensor::variable(Shape::new(1, cout, 1, 1), vec![0.0; cout])?;
    Ok((w, b))
}

/// Ordered list of named trainable tensors.
pub type ParamList = Vec<(String, Tensor)>;
