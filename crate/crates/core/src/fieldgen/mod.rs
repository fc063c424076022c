//! Synthetic low/high mesh-density field pairs.
//!
//! Two generators feed the pipeline: a closed-form plate-with-hole
//! stress field (exact, fast) and a five-point Poisson solver run at
//! two grid resolutions (genuine discretization gap between coarse and
//! fine meshes). Pairs are normalized jointly to [0,1] and persisted in
//! a small binary container.
//!
//! Every pair is a pure function of (dataset seed, pair index), drawn
//! from a per-index RNG stream, so generation could fan out across
//! threads; this build keeps it sequential and writes from one owner.

mod dataset;
mod kirsch;
mod pairs;
mod poisson;

pub use dataset::{
    import_csv_pairs, read_dataset, read_grid_csv, write_dataset, write_grid_csv, DatasetFile,
};
pub use kirsch::{kirsch_components, kirsch_field, von_mises, KirschParams};
pub use pairs::{
    block_average, generate_dataset, make_pair, normalize, GenKind, GenSpec, Generator, PairMode,
    PoissonSource, SamplePair, SourceDesc, SourceMode,
};
pub use poisson::poisson_solve;

/// Dense scalar field on an h by w grid, row major. Generation math
/// runs in f64; values only drop to f32 when a pair is assembled.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrid {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl FieldGrid {
    pub fn zeros(h: usize, w: usize) -> Self {
        FieldGrid {
            h,
            w,
            data: vec![0.0; h * w],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|v| *v as f32).collect()
    }
}
