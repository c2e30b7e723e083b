use std::path::{Path, PathBuf};

use adadepth::depthnet::ArchConfig;
use adadepth::evalkit::EvalConfig;
use adadepth::scenegen::{SceneSpec, ShiftConfig};
use adadepth::trainkit::{AdaptConfig, PretrainConfig, SemiConfig};
use adadepth::{Error, Result};
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

/// Default input locations, relative to the working directory. Each can be
/// overridden on the command line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Dataset root written by `gen`.
    pub data: PathBuf,
    /// Network checkpoint written by `pretrain`.
    pub network: PathBuf,
    /// Checkpoint evaluated by `eval`.
    pub checkpoint: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data: "runs/data".into(),
            network: "runs/pretrain/network".into(),
            checkpoint: "runs/adapt/checkpoint".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSizes {
    /// Images in each of source_train and target_train.
    pub n_train: usize,
    pub n_eval: usize,
    /// Labeled target pairs for the semi-supervised variant.
    pub n_labeled: usize,
}

impl Default for DatasetSizes {
    fn default() -> Self {
        DatasetSizes {
            n_train: 2000,
            n_eval: 200,
            n_labeled: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
    pub val_fraction: f64,
    pub flip: bool,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let d = PretrainConfig::default();
        PretrainSection {
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.lr,
            patience: d.patience,
            val_fraction: d.val_fraction,
            flip: d.flip,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemiSection {
    pub k_outer: usize,
    pub unlabeled_per_labeled: usize,
    /// Labeled images used, as a fraction of the target training split.
    pub labeled_frac: f64,
}

impl Default for SemiSection {
    fn default() -> Self {
        let d = SemiConfig::default();
        SemiSection {
            k_outer: d.k_outer,
            unlabeled_per_labeled: d.unlabeled_per_labeled,
            labeled_frac: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub depths: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection { depths: vec![1, 2, 3] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VizSection {
    /// Evaluation images exported as colormapped PNGs.
    pub count: usize,
    /// Depth mapped to the two ends of the colormap, in meters.
    pub depth_range: (f64, f64),
}

impl Default for VizSection {
    fn default() -> Self {
        VizSection {
            count: 4,
            depth_range: (0.5, 10.0),
        }
    }
}

/// Everything a subcommand needs. Missing keys take the defaults above;
/// unknown keys are rejected. The top-level `seed` overrides the seeds of
/// the scene generator and the training loops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub paths: Paths,
    pub scene: SceneSpec,
    pub shift: ShiftConfig,
    pub dataset: DatasetSizes,
    pub arch: ArchConfig,
    pub pretrain: PretrainSection,
    pub adapt: AdaptConfig,
    pub semi: SemiSection,
    pub eval: EvalConfig,
    pub sweep: SweepSection,
    pub viz: VizSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            seed: 0,
            paths: Paths::default(),
            scene: SceneSpec::default(),
            shift: ShiftConfig::default(),
            dataset: DatasetSizes::default(),
            arch: ArchConfig::default(),
            pretrain: PretrainSection::default(),
            adapt: AdaptConfig::default(),
            semi: SemiSection::default(),
            eval: EvalConfig::default(),
            sweep: SweepSection::default(),
            viz: VizSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Applies a seed override and propagates the seed into every section.
    pub fn resolve(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.scene.seed = self.seed;
        self.adapt.seed = self.seed;
        self
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            epochs: p.epochs,
            batch_size: p.batch_size,
            lr: p.lr,
            patience: p.patience,
            val_fraction: p.val_fraction,
            flip: p.flip,
            seed: self.seed,
            arch: self.arch.clone(),
            partition: self.adapt.partition,
        }
    }

    pub fn semi_config(&self) -> SemiConfig {
        SemiConfig {
            k_outer: self.semi.k_outer,
            unlabeled_per_labeled: self.semi.unlabeled_per_labeled,
        }
    }

    /// Checks every section that does not need a trained network.
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.shift.validate()?;
        self.arch.validate()?;
        if (self.arch.image_height, self.arch.image_width) != self.scene.image_size {
            return Err(Error::Config(format!(
                "arch expects {}x{} images but scene.image_size is {:?}",
                self.arch.image_height, self.arch.image_width, self.scene.image_size
            )));
        }
        self.pretrain_config().validate()?;
        let a = &self.adapt;
        if !(a.lambda.is_finite() && a.lambda >= 0.0) {
            return Err(Error::Config(format!("adapt.lambda must be non-negative, got {}", a.lambda)));
        }
        if a.m_inner == 0 || a.batch_size == 0 {
            return Err(Error::Config("adapt.m_inner and adapt.batch_size must be positive".into()));
        }
        a.optimizer.validate()?;
        a.ct_pretrain.validate()?;
        a.partition.validate(&self.arch)?;
        self.eval.validate()?;
        if !(self.semi.labeled_frac > 0.0 && self.semi.labeled_frac <= 1.0) {
            return Err(Error::Config(format!(
                "semi.labeled_frac must lie in (0, 1], got {}",
                self.semi.labeled_frac
            )));
        }
        if self.sweep.depths.is_empty() {
            return Err(Error::Config("sweep.depths is empty".into()));
        }
        for &d in &self.sweep.depths {
            adadepth::depthnet::PartitionSpec { adapt_depth: d }.validate(&self.arch)?;
        }
        let (lo, hi) = self.viz.depth_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Config(format!("viz.depth_range must satisfy lo < hi, got ({lo}, {hi})")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"lamda": 3}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"adapt": {"lamda": 3}}"#), Err(Error::Config(_))));
    }

    #[test]
    fn other_versions_are_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"version": 2}"#), Err(Error::Config(_))));
    }

    #[test]
    fn negative_lambda_fails_validation() {
        let cfg = RunConfig::from_json(r#"{"adapt": {"lambda": -1}}"#).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn echo_round_trips() {
        let cfg = RunConfig::default().resolve(Some(9));
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(cfg.adapt.seed, 9);
    }
}
