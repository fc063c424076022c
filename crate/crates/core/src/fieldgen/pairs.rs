//! Pair construction, normalization, and whole-dataset assembly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::DatasetFile;
use super::kirsch::{kirsch_field, KirschParams};
use super::poisson::poisson_solve;
use super::FieldGrid;
use crate::error::{Error, Result};

/// How the coarse grid of a pair is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    /// Fine field, area-averaged down. Models coarse elements that
    /// integrate over the fine solution.
    Sample,
    /// Independent coarse and fine solves of the same problem, so the
    /// pair carries genuine discretization disagreement. Poisson only.
    Solve,
}

/// Sum of separable sine modes, evaluable at any resolution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceMode {
    pub amp: f64,
    pub kx: u32,
    pub ky: u32,
    pub px: f64,
    pub py: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoissonSource {
    pub modes: Vec<SourceMode>,
}

impl PoissonSource {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let modes = (0..6)
            .map(|_| SourceMode {
                amp: rng.gen_range(-1.0..1.0),
                kx: rng.gen_range(1..=4),
                ky: rng.gen_range(1..=4),
                px: rng.gen_range(0.0..std::f64::consts::TAU),
                py: rng.gen_range(0.0..std::f64::consts::TAU),
            })
            .collect();
        PoissonSource { modes }
    }

    /// Evaluate the source on an n by n node grid over the unit square.
    pub fn sample(&self, n: usize) -> FieldGrid {
        let mut g = FieldGrid::zeros(n, n);
        let h = 1.0 / (n as f64 - 1.0);
        for i in 0..n {
            let y = i as f64 * h;
            for j in 0..n {
                let x = j as f64 * h;
                let mut acc = 0.0;
                for m in &self.modes {
                    acc += m.amp
                        * (m.kx as f64 * std::f64::consts::PI * x + m.px).sin()
                        * (m.ky as f64 * std::f64::consts::PI * y + m.py).sin();
                }
                g.data[i * n + j] = acc;
            }
        }
        g
    }
}

/// A concrete field generator with its drawn parameters.
#[derive(Debug, Clone)]
pub enum Generator {
    Kirsch(KirschParams),
    Poisson(PoissonSource),
}

impl Generator {
    pub fn name(&self) -> &'static str {
        match self {
            Generator::Kirsch(_) => "kirsch",
            Generator::Poisson(_) => "poisson",
        }
    }
}

/// Where a pair came from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceDesc {
    pub generator: String,
    pub seed: u64,
}

/// One aligned coarse/fine pair, row major, f32.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub lr: Vec<f32>,
    pub hr: Vec<f32>,
    pub source: SourceDesc,
}

/// Mean over factor-by-factor blocks, in f64.
pub fn block_average(data: &[f64], h: usize, w: usize, factor: usize) -> Vec<f64> {
    let (oh, ow) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0f64; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = 0.0;
            for dy in 0..factor {
                let row = (oy * factor + dy) * w + ox * factor;
                for v in &data[row..row + factor] {
                    acc += *v;
                }
            }
            out[oy * ow + ox] = acc * inv;
        }
    }
    out
}

fn check_sizes(hr_size: usize, scale: usize) -> Result<()> {
    if !matches!(scale, 2 | 4 | 8) {
        return Err(Error::Config(format!(
            "make_pair: scale must be 2, 4 or 8, got {scale}"
        )));
    }
    if hr_size % scale != 0 || hr_size % 16 != 0 {
        return Err(Error::Config(format!(
            "make_pair: hr size {hr_size} must be divisible by the scale ({scale}) and by 16"
        )));
    }
    Ok(())
}

/// Build one pair at the requested fine resolution.
pub fn make_pair(
    gen: &Generator,
    hr_size: usize,
    scale: usize,
    mode: PairMode,
    source_seed: u64,
) -> Result<SamplePair> {
    check_sizes(hr_size, scale)?;
    let source = SourceDesc {
        generator: gen.name().to_string(),
        seed: source_seed,
    };
    let (lr, hr) = match (gen, mode) {
        (Generator::Kirsch(p), PairMode::Sample) => {
            let mut p = p.clone();
            p.resolution = hr_size;
            let fine = kirsch_field(&p)?;
            let coarse = block_average(&fine.data, hr_size, hr_size, scale);
            (coarse, fine.data)
        }
        (Generator::Kirsch(_), PairMode::Solve) => {
            return Err(Error::Config(
                "make_pair: solve mode needs the poisson generator; kirsch has no mesh".into(),
            ));
        }
        (Generator::Poisson(src), PairMode::Sample) => {
            let fine = poisson_solve(&src.sample(hr_size))?;
            let coarse = block_average(&fine.data, hr_size, hr_size, scale);
            (coarse, fine.data)
        }
        (Generator::Poisson(src), PairMode::Solve) => {
            let fine = poisson_solve(&src.sample(hr_size))?;
            let coarse = poisson_solve(&src.sample(hr_size / scale))?;
            (coarse.data, fine.data)
        }
    };
    Ok(SamplePair {
        lr: lr.iter().map(|v| *v as f32).collect(),
        hr: hr.iter().map(|v| *v as f32).collect(),
        source,
    })
}

/// Scale all lr and hr values of the dataset jointly to [0,1]. Returns
/// the (min, max) constants used, which callers must keep to map
/// predictions back. A constant dataset maps to all 0.5.
pub fn normalize(pairs: &mut [SamplePair]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::Config("normalize: no pairs".into()));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (i, p) in pairs.iter().enumerate() {
        for v in p.lr.iter().chain(p.hr.iter()) {
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "normalize: sample {i} contains a non-finite value"
                )));
            }
            lo = lo.min(*v as f64);
            hi = hi.max(*v as f64);
        }
    }
    let span = hi - lo;
    for p in pairs.iter_mut() {
        for v in p.lr.iter_mut().chain(p.hr.iter_mut()) {
            *v = if span == 0.0 {
                0.5
            } else {
                ((*v as f64 - lo) / span) as f32
            };
        }
    }
    Ok((lo, hi))
}

/// Map a normalized value back to field units.
pub fn denormalize(v: f64, lo: f64, hi: f64) -> f64 {
    lo + v * (hi - lo)
}

/// Which generator family a dataset run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenKind {
    Kirsch,
    Poisson,
}

/// Full recipe for a generated dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenSpec {
    pub generator: GenKind,
    pub mode: PairMode,
    pub count: usize,
    pub hr_size: usize,
    pub scale: usize,
    pub seed: u64,
}

fn draw_kirsch(rng: &mut ChaCha8Rng) -> KirschParams {
    KirschParams {
        s: rng.gen_range(0.5..1.5),
        a: rng.gen_range(0.08..0.22),
        extent: 1.0,
        rotation: rng.gen_range(0.0..std::f64::consts::PI),
        resolution: 64,
    }
}

/// Generate, normalize, and package a dataset. Pair i draws its
/// parameters from stream i of the seeded RNG, so the output is a pure
/// function of the spec.
pub fn generate_dataset(spec: &GenSpec) -> Result<DatasetFile> {
    if spec.count == 0 {
        return Err(Error::Config("generate_dataset: count must be positive".into()));
    }
    let mut pairs = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64);
        let gen = match spec.generator {
            GenKind::Kirsch => Generator::Kirsch(draw_kirsch(&mut rng)),
            GenKind::Poisson => Generator::Poisson(PoissonSource::random(&mut rng)),
        };
        pairs.push(make_pair(&gen, spec.hr_size, spec.scale, spec.mode, i as u64)?);
    }
    let (lo, hi) = normalize(&mut pairs)?;
    let meta = serde_json::to_string(spec)?;
    Ok(DatasetFile {
        version: super::dataset::VERSION,
        hr_h: spec.hr_size,
        hr_w: spec.hr_size,
        scale: spec.scale,
        norm_min: lo,
        norm_max: hi,
        meta,
        pairs,
    })
}
