//! Dataset splitting, perceptual pretraining, and the Adam training
//! loop with validation-MAE early stopping.
//!
//! A run writes four artifacts into its output directory: the best
//! checkpoint (model.smnt), the held-out test indices
//! (test_indices.json), a per-epoch log (training_log.csv), and the
//! resolved configuration (run_config.json). Everything a run does is
//! a pure function of the configuration and dataset, so reruns
//! reproduce checkpoints bit for bit.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fieldgen::DatasetFile;
use crate::gridmath::{ops, Adam, NoGradGuard, Shape, Tensor};
use crate::losses::{
    content_loss, feature_distance, geometric_loss, perceptual_loss, total_loss, LossWeights,
};
use crate::smnet::{
    conv_init, geometric_target, save_checkpoint, Checkpoint, Model, ModelConfig,
    PerceptualExtractor,
};

/// Pooling factor between a fine field and its geometric target,
/// matching the extractor's quarter-resolution map.
const TARGET_FACTOR: usize = 4;

/// Epochs for the perceptual autoencoder warm-up.
const PRETRAIN_EPOCHS: usize = 50;

fn default_epochs() -> usize {
    800
}

fn default_patience() -> usize {
    50
}

fn default_batch() -> usize {
    8
}

fn default_train_fraction() -> f64 {
    0.8
}

fn default_val_fraction() -> f64 {
    0.1
}

fn default_test_fraction() -> f64 {
    0.1
}

fn default_learning_rate() -> f64 {
    1e-3
}

/// Everything one training run needs. Serializes to the run_config
/// JSON artifact with these exact field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_patience")]
    pub early_stop_patience: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: default_epochs(),
            early_stop_patience: default_patience(),
            batch_size: default_batch(),
            train_fraction: default_train_fraction(),
            val_fraction: default_val_fraction(),
            test_fraction: default_test_fraction(),
            learning_rate: default_learning_rate(),
            seed: 0,
            weights: LossWeights::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::Config("early_stop_patience must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        for (name, f) in [
            ("train_fraction", self.train_fraction),
            ("val_fraction", self.val_fraction),
            ("test_fraction", self.test_fraction),
        ] {
            if !f.is_finite() || f < 0.0 || f > 1.0 {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {f}")));
            }
        }
        let sum = self.train_fraction + self.val_fraction + self.test_fraction;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must sum to 1, got {sum}"
            )));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        self.weights.validate()?;
        self.model.validate()
    }
}

/// Index sets of a seeded shuffle split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffle 0..count with the seed and cut it into train/val/test by
/// the fractions: train and val sizes round down, test takes the rest.
pub fn split_dataset(
    count: usize,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<SplitIndices> {
    if count < 10 {
        return Err(Error::Data(format!(
            "dataset has {count} pairs; at least 10 are needed for a split"
        )));
    }
    let (ft, fv, fe) = fractions;
    let sum = ft + fv + fe;
    if ft < 0.0 || fv < 0.0 || fe < 0.0 || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must be non-negative and sum to 1, got {ft}/{fv}/{fe}"
        )));
    }
    let mut order: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = (count as f64 * ft).floor() as usize;
    let n_val = (count as f64 * fv).floor() as usize;
    let train = order[..n_train].to_vec();
    let val = order[n_train..n_train + n_val].to_vec();
    let test = order[n_train + n_val..].to_vec();
    Ok(SplitIndices { train, val, test })
}

/// One epoch's averaged loss terms and MAE for one split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub content: f64,
    pub perceptual: f64,
    pub geometric: f64,
    pub total: f64,
    pub mae: f64,
}

/// Everything a finished (or aborted) run reports besides the
/// checkpoint itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub train: Vec<EpochStats>,
    pub val: Vec<EpochStats>,
    /// 1-based epoch whose validation MAE was lowest.
    pub best_epoch: usize,
    /// Wall-clock seconds spent inside the training loop.
    pub t_train: f64,
}

/// Stack selected pairs into batch tensors, coarse and fine.
fn batch_tensors(ds: &DatasetFile, idx: &[usize]) -> Result<(Tensor, Tensor)> {
    let (lh, lw) = (ds.lr_h(), ds.lr_w());
    let n = idx.len();
    let mut lr = Vec::with_capacity(n * lh * lw);
    let mut hr = Vec::with_capacity(n * ds.hr_h * ds.hr_w);
    for &i in idx {
        lr.extend_from_slice(&ds.pairs[i].lr);
        hr.extend_from_slice(&ds.pairs[i].hr);
    }
    Ok((
        Tensor::from_vec(Shape::new(n, 1, lh, lw), lr)?,
        Tensor::from_vec(Shape::new(n, 1, ds.hr_h, ds.hr_w), hr)?,
    ))
}

/// Assemble cached per-sample geometric targets for a batch.
fn batch_targets(cache: &[Vec<f32>], idx: &[usize], th: usize, tw: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(idx.len() * th * tw);
    for &i in idx {
        data.extend_from_slice(&cache[i]);
    }
    Tensor::from_vec(Shape::new(idx.len(), 1, th, tw), data)
}

/// Train the perceptual extractor as an autoencoder on fine fields,
/// then freeze it. The throwaway decoder mirrors the two stages with
/// bilinear upsampling. Fails if reconstruction MSE does not drop at
/// least 20% from the first epoch, or if it ever turns non-finite.
pub fn pretrain_perceptual(
    ds: &DatasetFile,
    train_idx: &[usize],
    base_channels: usize,
    slope: f32,
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    seed: u64,
) -> Result<PerceptualExtractor> {
    if train_idx.is_empty() {
        return Err(Error::Config("perceptual pretraining needs a non-empty train split".into()));
    }
    if epochs < 2 {
        return Err(Error::Config("perceptual pretraining needs at least 2 epochs".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut extractor = PerceptualExtractor::new(base_channels, slope, &mut rng)?;
    let half = (base_channels / 2).max(1);
    let (dw1, db1) = conv_init(&mut rng, half, base_channels, 3)?;
    let (dw2, db2) = conv_init(&mut rng, 1, half, 3)?;

    let mut adam = Adam::new(learning_rate);
    adam.register_all(&extractor.parameters());
    adam.register("dec.conv1.w", &dw1);
    adam.register("dec.conv1.b", &db1);
    adam.register("dec.conv2.w", &dw2);
    adam.register("dec.conv2.b", &db2);

    let mut order: Vec<usize> = train_idx.to_vec();
    let mut first_mse = 0.0f64;
    let mut last_mse = 0.0f64;
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let mut acc = 0.0f64;
        let mut seen = 0usize;
        for chunk in order.chunks(batch_size) {
            let (_, hr) = batch_tensors(ds, chunk)?;
            let (_, deep) = extractor.forward(&hr)?;
            let up1 = ops::upsample_bilinear(&deep, 2)?;
            let mid = ops::leaky_relu(&ops::conv2d(&up1, &dw1, &db1, 1)?, slope);
            let up2 = ops::upsample_bilinear(&mid, 2)?;
            let recon = ops::conv2d(&up2, &dw2, &db2, 1)?;
            let mse = feature_distance(&recon, &hr)?;
            let v = mse.item_f64();
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "perceptual pretraining diverged at epoch {epoch}"
                )));
            }
            acc += v * chunk.len() as f64;
            seen += chunk.len();
            adam.zero_grads();
            mse.backward()?;
            adam.step()?;
        }
        let epoch_mse = acc / seen as f64;
        if epoch == 1 {
            first_mse = epoch_mse;
        }
        last_mse = epoch_mse;
    }
    if last_mse > 0.8 * first_mse {
        return Err(Error::Numeric(format!(
            "perceptual pretraining failed to improve: epoch 1 mse {first_mse:.6e}, epoch {epochs} mse {last_mse:.6e}"
        )));
    }
    extractor.freeze();
    Ok(extractor)
}

struct EpochAccum {
    content: f64,
    perceptual: f64,
    geometric: f64,
    total: f64,
    seen: usize,
}

impl EpochAccum {
    fn new() -> EpochAccum {
        EpochAccum {
            content: 0.0,
            perceptual: 0.0,
            geometric: 0.0,
            total: 0.0,
            seen: 0,
        }
    }

    fn push(&mut self, b: &crate::losses::LossBreakdown, n: usize) {
        let w = n as f64;
        self.content += b.content.item_f64() * w;
        self.perceptual += b.perceptual.item_f64() * w;
        self.geometric += b.geometric.item_f64() * w;
        self.total += b.total.item_f64() * w;
        self.seen += n;
    }

    fn stats(&self) -> EpochStats {
        let w = self.seen.max(1) as f64;
        EpochStats {
            content: self.content / w,
            perceptual: self.perceptual / w,
            geometric: self.geometric / w,
            total: self.total / w,
            mae: self.content / w,
        }
    }
}

/// Compute the loss breakdown for one batch. `map` must be present
/// exactly when the model's geometric branch is on.
fn batch_loss(
    model: &Model,
    pred: &Tensor,
    map: Option<&Tensor>,
    hr: &Tensor,
    target: Option<&Tensor>,
    weights: &LossWeights,
) -> Result<crate::losses::LossBreakdown> {
    let content = content_loss(pred, hr)?;
    let perceptual = match &model.perceptual {
        Some(e) => Some(perceptual_loss(pred, hr, e)?),
        None => None,
    };
    let geometric = match (map, target) {
        (Some(m), Some(t)) => Some(geometric_loss(m, t)?),
        _ => None,
    };
    total_loss(&content, perceptual.as_ref(), geometric.as_ref(), weights)
}

fn snapshot_params(model: &Model) -> Vec<(String, Vec<f32>)> {
    model
        .parameters()
        .into_iter()
        .map(|(n, t)| (n, t.data().clone()))
        .collect()
}

fn restore_params(model: &Model, snap: &[(String, Vec<f32>)]) -> Result<()> {
    let params = model.parameters();
    for ((name, tensor), (sname, data)) in params.iter().zip(snap.iter()) {
        debug_assert_eq!(name, sname);
        tensor.set_data(data)?;
    }
    Ok(())
}

fn write_log_csv(path: &Path, record: &RunRecord) -> Result<()> {
    let mut out = String::from("epoch,split,content,perceptual,geometric,total,mae\n");
    for (i, (tr, va)) in record.train.iter().zip(record.val.iter()).enumerate() {
        let e = i + 1;
        for (split, s) in [("train", tr), ("val", va)] {
            out.push_str(&format!(
                "{e},{split},{},{},{},{},{}\n",
                s.content, s.perceptual, s.geometric, s.total, s.mae
            ));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Run the full training protocol and write the artifacts into
/// `out_dir`. Returns the best-validation checkpoint and the run
/// record. A non-finite loss aborts the run with the best checkpoint
/// so far already written.
pub fn train(cfg: &TrainConfig, ds: &DatasetFile, out_dir: &Path) -> Result<(Checkpoint, RunRecord)> {
    cfg.validate()?;
    if cfg.model.scale != ds.scale {
        return Err(Error::Config(format!(
            "model is configured for scale {} but the dataset was generated at scale {}",
            cfg.model.scale, ds.scale
        )));
    }
    let split = split_dataset(
        ds.pairs.len(),
        (cfg.train_fraction, cfg.val_fraction, cfg.test_fraction),
        cfg.seed,
    )?;
    for (name, part) in [
        ("train", &split.train),
        ("validation", &split.val),
        ("test", &split.test),
    ] {
        if part.is_empty() {
            return Err(Error::Config(format!(
                "{name} split is empty; adjust the fractions or enlarge the dataset"
            )));
        }
    }

    fs::create_dir_all(out_dir)?;
    fs::write(
        out_dir.join("test_indices.json"),
        serde_json::to_string(&split.test)?,
    )?;
    fs::write(
        out_dir.join("run_config.json"),
        serde_json::to_string_pretty(cfg)?,
    )?;

    let mut model = Model::new(&cfg.model)?;
    if cfg.model.use_perceptual {
        let pretrained = pretrain_perceptual(
            ds,
            &split.train,
            cfg.model.base_channels,
            cfg.model.leaky_slope,
            PRETRAIN_EPOCHS,
            cfg.learning_rate,
            cfg.batch_size,
            cfg.seed.wrapping_add(1),
        )?;
        model.perceptual = Some(pretrained);
    }

    // Geometric targets depend only on ground truth; compute each one
    // once up front. The target function hands back log probabilities
    // and the loss wants the distribution itself, so exponentiate here.
    let (th, tw) = (ds.hr_h / TARGET_FACTOR, ds.hr_w / TARGET_FACTOR);
    let mut target_cache: Vec<Vec<f32>> = vec![Vec::new(); ds.pairs.len()];
    if cfg.model.use_geometric {
        for &i in split.train.iter().chain(split.val.iter()) {
            let (_, hr) = batch_tensors(ds, &[i])?;
            let t = geometric_target(&hr, TARGET_FACTOR)?;
            target_cache[i] = t.data().iter().map(|v| v.exp()).collect();
        }
    }

    let trainable: Vec<(String, Tensor)> = model
        .parameters()
        .into_iter()
        .filter(|(n, _)| !n.starts_with("perc"))
        .collect();
    let mut adam = Adam::new(cfg.learning_rate);
    adam.register_all(&trainable);

    let checkpoint_path = out_dir.join("model.smnt");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut order = split.train.clone();
    let mut record = RunRecord {
        train: Vec::new(),
        val: Vec::new(),
        best_epoch: 0,
        t_train: 0.0,
    };
    let mut best_mae = f64::INFINITY;
    let mut best_snap = snapshot_params(&model);
    let mut stale = 0usize;
    let started = Instant::now();

    let abort = |model: &Model, snap: &[(String, Vec<f32>)], record: &mut RunRecord, epoch: usize| -> Error {
        record.t_train = started.elapsed().as_secs_f64();
        let kept = restore_params(model, snap)
            .and_then(|_| save_checkpoint(&checkpoint_path, model, ds.norm_min, ds.norm_max, cfg.seed))
            .and_then(|_| write_log_csv(&out_dir.join("training_log.csv"), record));
        match kept {
            Ok(()) => Error::Numeric(format!(
                "non-finite loss at epoch {epoch}; last good checkpoint kept at {}",
                checkpoint_path.display()
            )),
            Err(e) => e,
        }
    };

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = EpochAccum::new();
        for chunk in order.chunks(cfg.batch_size) {
            let (lr, hr) = batch_tensors(ds, chunk)?;
            let (pred, map) = model.forward_with_map(&lr)?;
            let target = if cfg.model.use_geometric {
                Some(batch_targets(&target_cache, chunk, th, tw)?)
            } else {
                None
            };
            let breakdown = batch_loss(&model, &pred, map.as_ref(), &hr, target.as_ref(), &cfg.weights)?;
            if !breakdown.total.item_f64().is_finite() {
                return Err(abort(&model, &best_snap, &mut record, epoch));
            }
            acc.push(&breakdown, chunk.len());
            adam.zero_grads();
            breakdown.total.backward()?;
            adam.step()?;
        }
        record.train.push(acc.stats());

        let mut vacc = EpochAccum::new();
        {
            let _guard = NoGradGuard::new();
            for chunk in split.val.chunks(cfg.batch_size) {
                let (lr, hr) = batch_tensors(ds, chunk)?;
                let (pred, map) = model.forward_with_map(&lr)?;
                let target = if cfg.model.use_geometric {
                    Some(batch_targets(&target_cache, chunk, th, tw)?)
                } else {
                    None
                };
                let breakdown =
                    batch_loss(&model, &pred, map.as_ref(), &hr, target.as_ref(), &cfg.weights)?;
                if !breakdown.total.item_f64().is_finite() {
                    return Err(abort(&model, &best_snap, &mut record, epoch));
                }
                vacc.push(&breakdown, chunk.len());
            }
        }
        let vstats = vacc.stats();
        record.val.push(vstats);

        if vstats.mae < best_mae {
            best_mae = vstats.mae;
            record.best_epoch = epoch;
            best_snap = snapshot_params(&model);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_patience {
                break;
            }
        }
    }
    record.t_train = started.elapsed().as_secs_f64();

    restore_params(&model, &best_snap)?;
    save_checkpoint(&checkpoint_path, &model, ds.norm_min, ds.norm_max, cfg.seed)?;
    write_log_csv(&out_dir.join("training_log.csv"), &record)?;

    Ok((
        Checkpoint {
            model,
            norm_min: ds.norm_min,
            norm_max: ds.norm_max,
            seed: cfg.seed,
        },
        record,
    ))
}
