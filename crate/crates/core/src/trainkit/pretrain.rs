use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{full_segments, gt_batch, stream_rng};
use crate::depthnet::{
    back_segments, berhu, init_network, positive_depth, positive_depth_backward, run_segments, ArchConfig, DepthNet,
    NetworkParams, PartitionSpec,
};
use crate::error::{Error, Result};
use crate::evalkit::{compute_metrics, EvalConfig};
use crate::nn::{Grads, Mode, Optimizer, OptimizerConfig};
use crate::scenegen::LabeledSource;
use crate::tensor::{DepthMap, Image, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial Adam learning rate.
    pub lr: f64,
    /// Divides the learning rate by 10 after this many epochs without a
    /// validation improvement.
    pub patience: usize,
    /// Fraction of the split held out for validation (taken from the end).
    pub val_fraction: f64,
    /// Random horizontal flips of image and depth.
    pub flip: bool,
    pub seed: u64,
    pub arch: ArchConfig,
    pub partition: PartitionSpec,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 12,
            batch_size: 10,
            lr: 0.01,
            patience: 1,
            val_fraction: 0.1,
            flip: true,
            seed: 0,
            arch: ArchConfig::default(),
            partition: PartitionSpec::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.partition.validate(&self.arch)?;
        if self.batch_size == 0 {
            return Err(Error::config("pretrain batch_size must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("pretrain lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config("val_fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// One row per epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean loss over the first fifth of the epoch's batches.
    pub loss_start: f64,
    /// Mean loss over the last fifth of the epoch's batches.
    pub loss_end: f64,
    pub loss_mean: f64,
    /// Median-scaled rel on the validation slice.
    pub val_rel: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs: Vec<EpochRecord>,
    pub final_val_rel: Option<f64>,
    pub n_train: usize,
    pub n_val: usize,
}

fn flip_image(img: &Image<f32>) -> Image<f32> {
    let mut out = img.clone();
    let w = img.width;
    for row in out.data.chunks_mut(w) {
        row.reverse();
    }
    out
}

fn flip_depth(d: &DepthMap<f32>) -> DepthMap<f32> {
    let mut out = d.clone();
    let w = d.width;
    for row in out.data.chunks_mut(w) {
        row.reverse();
    }
    for row in out.mask.chunks_mut(w) {
        row.reverse();
    }
    out
}

/// Median-scaled rel of the network on `indices`, against full-resolution
/// ground truth.
pub fn validation_rel(net: &NetworkParams<f32>, data: &dyn LabeledSource, indices: &[usize]) -> Result<f64> {
    let dn = DepthNet::new(&net.arch)?;
    let cfg = EvalConfig::default();
    let (mut sum, mut n) = (0.0, 0usize);
    for chunk in indices.chunks(16) {
        let imgs = chunk.iter().map(|&i| data.image(i)).collect::<Result<Vec<_>>>()?;
        let depth = dn.forward(&net.store, &Image::batch(&imgs.iter().collect::<Vec<_>>())?, Mode::Eval)?.depth;
        for (k, &i) in chunk.iter().enumerate() {
            let gt = data.depth(i)?;
            let r = compute_metrics(&DepthMap::from_tensor(&depth, k)?, &gt, &gt.mask, &cfg)?;
            sum += r.rel * r.n_pixels as f64;
            n += r.n_pixels;
        }
    }
    Ok(sum / n.max(1) as f64)
}

/// One supervised step of the whole network on BerHu against half-resolution
/// ground truth. Returns the loss.
fn supervised_step(
    dn: &DepthNet,
    net: &mut NetworkParams<f32>,
    opt: &mut Optimizer<f32>,
    x: &Tensor<f32>,
    gt: &(Vec<f32>, Vec<bool>),
) -> Result<f32> {
    let segs = full_segments(dn);
    let pass = run_segments(&segs, &net.store, x, Mode::Train)?;
    let depth = positive_depth(&pass.output);
    let loss = berhu(depth.data(), &gt.0, &gt.1)?;
    let d_depth = Tensor::from_vec(depth.shape(), loss.grad)?;
    let d_raw = positive_depth_backward(&depth, &d_depth)?;
    let mut grads = Grads::all();
    back_segments(&segs, &net.store, &pass.caches, d_raw, &mut grads, false)?;
    if !loss.value.is_finite() || !grads.all_finite() {
        return Err(Error::Numeric("non-finite supervised loss".into()));
    }
    opt.step(&mut net.store, &grads)?;
    for u in &pass.updates {
        u.apply(&mut net.store)?;
    }
    Ok(loss.value)
}

/// Supervised training of a fresh network on labeled source pairs with Adam
/// and BerHu, dividing the learning rate by 10 on validation plateaus.
pub fn pretrain_source(source: &dyn LabeledSource, cfg: &PretrainConfig) -> Result<(NetworkParams<f32>, PretrainReport)> {
    cfg.validate()?;
    let n = source.len();
    if n == 0 {
        return Err(Error::config("source split is empty"));
    }
    if source.image_size() != (cfg.arch.image_height, cfg.arch.image_width) {
        return Err(Error::config(format!(
            "source images are {:?}, architecture expects {}x{}",
            source.image_size(),
            cfg.arch.image_height,
            cfg.arch.image_width
        )));
    }
    // Touch one label up front so a split without depth fails before training.
    source.depth(0)?;
    let n_val = ((n as f64 * cfg.val_fraction).round() as usize).min(n - 1);
    let n_train = n - n_val;
    let val: Vec<usize> = (n_train..n).collect();
    let mut net = init_network::<f32>(cfg.seed, &cfg.arch, cfg.partition)?;
    let dn = DepthNet::new(&cfg.arch)?;
    let mut lr = cfg.lr;
    let mut opt = Optimizer::new(OptimizerConfig::adam(lr));
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let mut rng: ChaCha8Rng = stream_rng(cfg.seed, epoch as u64, 0);
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut rng);
        let mut losses = Vec::with_capacity(n_train.div_ceil(cfg.batch_size));
        for batch in order.chunks(cfg.batch_size) {
            let mut imgs = Vec::with_capacity(batch.len());
            let mut depths = Vec::with_capacity(batch.len());
            for &i in batch {
                let (img, d) = (source.image(i)?, source.depth(i)?);
                if cfg.flip && rng.random_bool(0.5) {
                    imgs.push(flip_image(&img));
                    depths.push(flip_depth(&d));
                } else {
                    imgs.push(img);
                    depths.push(d);
                }
            }
            let x = Image::batch(&imgs.iter().collect::<Vec<_>>())?;
            let gt = gt_batch(&depths)?;
            let loss = supervised_step(&dn, &mut net, &mut opt, &x, &gt)?;
            losses.push(loss as f64);
        }
        let fifth = (losses.len() / 5).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
        let val_rel = if val.is_empty() { f64::NAN } else { validation_rel(&net, source, &val)? };
        let rec = EpochRecord {
            epoch,
            lr,
            loss_start: mean(&losses[..fifth]),
            loss_end: mean(&losses[losses.len() - fifth..]),
            loss_mean: mean(&losses),
            val_rel,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "pretrain epoch {epoch}: lr {lr:.0e} loss {:.4} -> {:.4} val rel {val_rel:.4} ({:.1}s)",
            rec.loss_start,
            rec.loss_end,
            rec.seconds
        );
        epochs.push(rec);
        if val_rel < best {
            best = val_rel;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience.max(1) {
                lr /= 10.0;
                opt.config = opt.config.with_lr(lr);
                stale = 0;
            }
        }
    }
    let final_val_rel = epochs.last().map(|e| e.val_rel).filter(|v| v.is_finite());
    Ok((
        net,
        PretrainReport {
            epochs,
            final_val_rel,
            n_train,
            n_val,
        },
    ))
}
