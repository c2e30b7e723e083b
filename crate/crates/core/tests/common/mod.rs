#![allow(dead_code)]

use std::cell::Cell;
use std::sync::OnceLock;

use adadepth::congruency::{CtPretrainConfig, Regularizer};
use adadepth::depthnet::{ArchConfig, NetworkParams, PartitionSpec};
use adadepth::nn::{OptimizerConfig, PartitionTag};
use adadepth::scenegen::{
    apply_domain_shift, generate_scene, mix_seed, ImageSource, LabeledSource, SceneSpec, ShiftConfig, SplitData,
};
use adadepth::trainkit::{pretrain_source, AdaptConfig, PretrainConfig};
use adadepth::{DepthMap, Image, Result};

pub const SIZE: (usize, usize) = (32, 48);

pub fn arch() -> ArchConfig {
    ArchConfig {
        image_height: SIZE.0,
        image_width: SIZE.1,
        stem_channels: 4,
        stage_channels: vec![6, 8, 10, 12],
        decoder_channels: vec![8, 6, 4],
        output_bias: 3.0f64.ln(),
    }
}

pub fn scene() -> SceneSpec {
    SceneSpec {
        image_size: SIZE,
        ..SceneSpec::default()
    }
}

/// `n` scenes starting at seed index `start`, shifted when `shift` is set.
pub fn split(start: u64, n: usize, shift: Option<&ShiftConfig>, with_depth: bool) -> SplitData {
    let spec = scene();
    let samples: Vec<(Image, Option<DepthMap>)> = (0..n as u64)
        .map(|i| {
            let seed = mix_seed(11, start + i);
            let (mut img, depth) = generate_scene(seed, &spec).unwrap();
            if let Some(s) = shift {
                img = apply_domain_shift(&img, &s.reseeded(seed)).unwrap();
            }
            (img, with_depth.then_some(depth))
        })
        .collect();
    SplitData::from_samples(SIZE, &samples).unwrap()
}

pub struct Fixture {
    pub source: SplitData,
    pub target: SplitData,
    /// Target images with depth, for the counting-loader test.
    pub target_with_depth: SplitData,
    pub target_eval: SplitData,
    pub target_labeled: SplitData,
    pub net: NetworkParams<f32>,
}

pub fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let shift = ShiftConfig::default();
        let source = split(0, 48, None, true);
        let target_with_depth = split(1000, 32, Some(&shift), true);
        let target = split(1000, 32, Some(&shift), false);
        let target_eval = split(2000, 8, Some(&shift), true);
        let target_labeled = split(3000, 6, Some(&shift), true);
        let cfg = PretrainConfig {
            epochs: 2,
            batch_size: 8,
            lr: 3e-3,
            seed: 5,
            arch: arch(),
            ..PretrainConfig::default()
        };
        let (net, _) = pretrain_source(&source, &cfg).unwrap();
        Fixture {
            source,
            target,
            target_with_depth,
            target_eval,
            target_labeled,
            net,
        }
    })
}

/// Short run settings for the small fixture.
pub fn adapt_cfg(regularizer: Regularizer, k_outer: usize) -> AdaptConfig {
    AdaptConfig {
        regularizer,
        k_outer,
        batch_size: 4,
        optimizer: OptimizerConfig::momentum(1e-3, 0.9),
        partition: PartitionSpec { adapt_depth: 1 },
        seed: 3,
        ct_pretrain: CtPretrainConfig {
            steps: 20,
            batch_size: 4,
            ..CtPretrainConfig::default()
        },
        ..AdaptConfig::default()
    }
}

pub fn frozen(tag: PartitionTag) -> bool {
    matches!(tag, PartitionTag::Trunk | PartitionTag::Decoder)
}

/// Wraps a labeled split and counts label reads.
pub struct CountingSource<'a> {
    pub inner: &'a SplitData,
    pub depth_reads: Cell<usize>,
}

impl<'a> CountingSource<'a> {
    pub fn new(inner: &'a SplitData) -> Self {
        CountingSource {
            inner,
            depth_reads: Cell::new(0),
        }
    }
}

impl ImageSource for CountingSource<'_> {
    fn len(&self) -> usize {
        self.inner.len()
    }

    fn image_size(&self) -> (usize, usize) {
        self.inner.image_size()
    }

    fn image(&self, idx: usize) -> Result<Image> {
        self.inner.image(idx)
    }
}

impl LabeledSource for CountingSource<'_> {
    fn depth(&self, idx: usize) -> Result<DepthMap> {
        self.depth_reads.set(self.depth_reads.get() + 1);
        self.inner.depth(idx)
    }
}

/// Stacked probe batch of the first `n` images of a split.
pub fn probe(data: &dyn ImageSource, n: usize) -> adadepth::Tensor {
    let imgs: Vec<Image> = (0..n).map(|i| data.image(i).unwrap()).collect();
    Image::batch(&imgs.iter().collect::<Vec<_>>()).unwrap()
}
