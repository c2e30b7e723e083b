//! Optimization loops: supervised source pretraining, adversarial
//! adaptation with a content regularizer, the semi-supervised variant, the
//! weight-sharing sweep and checkpointing.

mod adapt;
mod checkpoint;
mod pretrain;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adapt::{
    adapt, adapt_semi, adapt_with_features, continue_semi, latent_drift, run_adaptation, sweep_sharing, AdaptBundle,
    AdaptConfig, AdaptFeatures, AdaptOutcome, CollapseMonitor, IterRecord, LabeledFeatures, SemiConfig, SweepReport,
    SweepRow, TrainLog,
};
pub use checkpoint::{checkpoint, load_model, load_network, restore, save_network, CHECKPOINT_VERSION};
pub use pretrain::{pretrain_source, validation_rel, EpochRecord, PretrainConfig, PretrainReport};

use crate::depthnet::DepthNet;
use crate::error::Result;
use crate::nn::Sequential;
use crate::scenegen::mix_seed;
use crate::tensor::DepthMap;

/// Independent generator for `(seed, counter, stream)`, so any iteration can
/// be replayed without running the ones before it.
pub(crate) fn stream_rng(seed: u64, counter: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, counter), stream))
}

/// Every encoder stage followed by the decoder.
pub(crate) fn full_segments(dn: &DepthNet) -> Vec<&Sequential> {
    let mut segs = dn.stages(0..dn.n_stages());
    segs.push(dn.decoder());
    segs
}

/// Half-resolution ground truth of a batch, flattened with its mask.
pub(crate) fn gt_batch(depths: &[DepthMap<f32>]) -> Result<(Vec<f32>, Vec<bool>)> {
    let mut data = Vec::new();
    let mut mask = Vec::new();
    for d in depths {
        let half = d.downsample2()?;
        data.extend_from_slice(&half.data);
        mask.extend_from_slice(&half.mask);
    }
    Ok((data, mask))
}
