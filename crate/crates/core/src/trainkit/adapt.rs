use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::stream_rng;
use crate::adversary::{adv_loss_d, adv_loss_g, init_discriminators, DiscConfig, DiscriminatorParams, GanForm};
use crate::congruency::{
    dcr_loss, fcf_loss_grad, init_recon_branch, init_residual_branch, pretrain_ct_on_features, rtf_penalty,
    BranchConfig, CtPretrainConfig, CtPretrainReport, ReconBranchParams, Regularizer, ResidualBranchParams,
};
use crate::depthnet::{
    back_segments, berhu, encode_images, positive_depth, positive_depth_backward, run_segments, DepthNet,
    NetworkParams, Pass, PartitionSpec,
};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate_dataset, DepthModel, EvalConfig, MetricsReport};
use crate::nn::{ArrayRole, Grads, Mode, Optimizer, OptimizerConfig, PartitionTag, Sequential};
use crate::scenegen::{mix_seed, ImageSource, LabeledSource};
use crate::tensor::Tensor;

const STREAM_TARGET: u64 = 1;
const STREAM_SOURCE: u64 = 2;
const STREAM_LABELED: u64 = 3;
/// Offset between the streams of successive inner discriminator steps.
const INNER_STRIDE: u64 = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub regularizer: Regularizer,
    /// Weight of the content term.
    pub lambda: f64,
    pub gan_form: GanForm,
    /// Train and use the depth-output discriminator.
    pub use_dy: bool,
    /// Outer (generator-side) iterations.
    pub k_outer: usize,
    /// Discriminator steps per outer iteration.
    pub m_inner: usize,
    pub batch_size: usize,
    /// Shared by every adapted party and both discriminators.
    pub optimizer: OptimizerConfig,
    /// Global L2 norm cap on each generator-side party's gradient (head,
    /// residual branch, reconstruction branch). `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub partition: PartitionSpec,
    pub seed: u64,
    /// Initialization of the reconstruction branch before the loop.
    pub ct_pretrain: CtPretrainConfig,
    /// Prediction variance below this fraction of its first value counts
    /// toward a collapse warning.
    pub collapse_ratio: f64,
    /// Consecutive low-variance iterations that raise the warning.
    pub collapse_patience: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            regularizer: Regularizer::Fcf,
            lambda: 10.0,
            gan_form: GanForm::Lsq,
            use_dy: true,
            k_outer: 300,
            m_inner: 1,
            batch_size: 8,
            optimizer: OptimizerConfig::momentum(1e-4, 0.9),
            grad_clip: Some(10.0),
            partition: PartitionSpec::default(),
            seed: 0,
            ct_pretrain: CtPretrainConfig::default(),
            collapse_ratio: 0.01,
            collapse_patience: 20,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self, net: &NetworkParams<f32>) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::config(format!("lambda must be finite and non-negative, got {}", self.lambda)));
        }
        if self.m_inner == 0 {
            return Err(Error::config("m_inner must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("adapt batch_size must be positive"));
        }
        self.optimizer.validate()?;
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::config(format!("grad_clip must be positive, got {c}")));
            }
        }
        self.ct_pretrain.validate()?;
        self.partition.validate(&net.arch)?;
        if self.regularizer != Regularizer::Dcr && self.partition.adapt_depth != 1 {
            return Err(Error::config(format!(
                "{:?} works on the final encoder stage only; adapt_depth must be 1, got {}",
                self.regularizer, self.partition.adapt_depth
            )));
        }
        if self.regularizer == Regularizer::Dcr && self.partition.adapt_depth == 0 {
            return Err(Error::config("adapt_depth 0 leaves nothing to adapt"));
        }
        if !(0.0..=1.0).contains(&self.collapse_ratio) {
            return Err(Error::config("collapse_ratio must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Schedule of the semi-supervised continuation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemiConfig {
    /// Outer iterations run after the unsupervised phase.
    pub k_outer: usize,
    /// Unlabeled batches between consecutive labeled ones; 0 trains on
    /// labeled batches only.
    pub unlabeled_per_labeled: usize,
}

impl Default for SemiConfig {
    fn default() -> Self {
        SemiConfig {
            k_outer: 300,
            unlabeled_per_labeled: 1,
        }
    }
}

/// One outer iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iteration: u64,
    /// Generator loss against the depth discriminator (0 without it).
    pub l_adv_d: f64,
    /// Generator loss against the feature discriminator.
    pub l_adv_f: f64,
    /// Regularizer value, or BerHu on labeled batches.
    pub l_content: f64,
    pub l_final: f64,
    pub lambda: f64,
    pub disc_f_loss: f64,
    pub disc_y_loss: f64,
    /// Mean over pixels of the across-sample variance of predicted depth.
    pub pred_variance: f64,
    pub labeled: bool,
    pub warning: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub seed: u64,
    pub records: Vec<IterRecord>,
    pub ct_pretrain: Option<CtPretrainReport>,
    /// Not part of equality checks between runs.
    pub wall_clock_seconds: f64,
}

impl TrainLog {
    /// One JSON object per line.
    pub fn write_ndjson(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r).map_err(|e| Error::Numeric(e.to_string()))?;
            out.push(b'\n');
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&out))
            .map_err(|e| Error::io(path, e))
    }

    pub fn warnings(&self) -> impl Iterator<Item = &IterRecord> {
        self.records.iter().filter(|r| r.warning.is_some())
    }
}

/// Tracks the prediction-variance diagnostic across iterations.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CollapseMonitor {
    pub initial: Option<f64>,
    pub streak: usize,
}

impl CollapseMonitor {
    /// Records one iteration; returns the warning on the iteration the streak
    /// reaches `patience`.
    pub fn observe(&mut self, variance: f64, ratio: f64, patience: usize) -> Option<String> {
        let initial = *self.initial.get_or_insert(variance);
        if variance < ratio * initial {
            self.streak += 1;
        } else {
            self.streak = 0;
        }
        (patience > 0 && self.streak == patience).then(|| {
            format!(
                "possible mode collapse: prediction variance {variance:.3e} below {ratio} of initial {initial:.3e} \
                 for {patience} iterations"
            )
        })
    }
}

/// Frozen-network quantities reused by every iteration: outputs of the
/// frozen stages on target images, source-encoder latents of both domains
/// and half-resolution source depth.
#[derive(Clone, Debug)]
pub struct AdaptFeatures {
    pub partition: PartitionSpec,
    /// Output of the frozen stages for each target image (the images
    /// themselves when the whole encoder adapts).
    pub target_prefix: Tensor<f32>,
    /// Source-encoder latents of the target images.
    pub target_latent: Tensor<f32>,
    pub source_latent: Tensor<f32>,
    pub source_depth: Tensor<f32>,
}

impl AdaptFeatures {
    /// Runs the frozen source network over both training splits. Only target
    /// images are read.
    pub fn compute(
        net: &NetworkParams<f32>,
        partition: PartitionSpec,
        source: &dyn LabeledSource,
        target: &dyn ImageSource,
    ) -> Result<Self> {
        partition.validate(&net.arch)?;
        if source.is_empty() || target.is_empty() {
            return Err(Error::config("source and target splits must be non-empty"));
        }
        let dn = DepthNet::new(&net.arch)?;
        let n = dn.n_stages();
        let first = partition.first_adaptable(&net.arch);
        let t_idx: Vec<usize> = (0..target.len()).collect();
        let target_prefix = encode_images(net, target, &t_idx, first)?;
        let target_latent = encode_chunked(&dn, net, &target_prefix, first)?;
        let s_idx: Vec<usize> = (0..source.len()).collect();
        let source_latent = encode_images(net, source, &s_idx, n)?;
        let (oh, ow) = net.arch.output_size();
        let mut depth = Vec::with_capacity(source.len() * oh * ow);
        for i in s_idx {
            depth.extend_from_slice(&source.depth(i)?.downsample2()?.data);
        }
        let source_depth = Tensor::from_vec([source.len(), 1, oh, ow], depth)?;
        Ok(AdaptFeatures {
            partition,
            target_prefix,
            target_latent,
            source_latent,
            source_depth,
        })
    }

    /// Frozen-stage outputs and latents of a labeled target split, with its
    /// half-resolution ground truth.
    pub fn labeled(
        net: &NetworkParams<f32>,
        partition: PartitionSpec,
        labeled: &dyn LabeledSource,
    ) -> Result<LabeledFeatures> {
        if labeled.is_empty() {
            return Err(Error::config("labeled target split is empty"));
        }
        let dn = DepthNet::new(&net.arch)?;
        let first = partition.first_adaptable(&net.arch);
        let idx: Vec<usize> = (0..labeled.len()).collect();
        let prefix = encode_images(net, labeled, &idx, first)?;
        let latent = encode_chunked(&dn, net, &prefix, first)?;
        let depths = idx.iter().map(|&i| labeled.depth(i)).collect::<Result<Vec<_>>>()?;
        let (gt, mask) = super::gt_batch(&depths)?;
        Ok(LabeledFeatures {
            prefix,
            latent,
            gt,
            mask,
            per_item: gt_len(net),
        })
    }
}

fn gt_len(net: &NetworkParams<f32>) -> usize {
    let (h, w) = net.arch.output_size();
    h * w
}

fn encode_chunked(dn: &DepthNet, net: &NetworkParams<f32>, prefix: &Tensor<f32>, first: usize) -> Result<Tensor<f32>> {
    let n = prefix.batch();
    let mut parts = Vec::new();
    for start in (0..n).step_by(32) {
        let idx: Vec<usize> = (start..(start + 32).min(n)).collect();
        parts.push(dn.encode(&net.store, &prefix.gather(&idx)?, first..dn.n_stages(), Mode::Eval)?);
    }
    Tensor::stack(&parts)
}

/// Labeled target batches for the semi-supervised phase.
#[derive(Clone, Debug)]
pub struct LabeledFeatures {
    pub prefix: Tensor<f32>,
    pub latent: Tensor<f32>,
    gt: Vec<f32>,
    mask: Vec<bool>,
    per_item: usize,
}

impl LabeledFeatures {
    fn gt(&self, idx: &[usize]) -> (Vec<f32>, Vec<bool>) {
        let p = self.per_item;
        let mut gt = Vec::with_capacity(idx.len() * p);
        let mut mask = Vec::with_capacity(idx.len() * p);
        for &i in idx {
            gt.extend_from_slice(&self.gt[i * p..(i + 1) * p]);
            mask.extend_from_slice(&self.mask[i * p..(i + 1) * p]);
        }
        (gt, mask)
    }
}

/// Every array an adaptation run updates, with solver and diagnostic state.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptBundle {
    pub config: AdaptConfig,
    pub net: NetworkParams<f32>,
    pub residual: Option<ResidualBranchParams<f32>>,
    pub recon: Option<ReconBranchParams<f32>>,
    pub disc_f: DiscriminatorParams<f32>,
    pub disc_y: DiscriminatorParams<f32>,
    /// Keyed by party: `head`, `residual`, `recon`, `disc_f`, `disc_y`.
    pub optimizers: BTreeMap<String, Optimizer<f32>>,
    /// Outer iterations completed.
    pub iteration: u64,
    pub monitor: CollapseMonitor,
}

impl AdaptBundle {
    /// Fresh state around a source-pretrained network. For FCF a supplied
    /// reconstruction branch is used as is; otherwise one is pretrained on
    /// `features`.
    pub fn init(
        net: &NetworkParams<f32>,
        cfg: &AdaptConfig,
        features: &AdaptFeatures,
        recon: Option<ReconBranchParams<f32>>,
    ) -> Result<(Self, Option<CtPretrainReport>)> {
        cfg.validate(net)?;
        if features.partition != cfg.partition {
            return Err(Error::config("features were computed for a different partition"));
        }
        let mut net = net.clone();
        net.retag(cfg.partition)?;
        let branch_cfg = BranchConfig::from_arch(&net.arch);
        let (lh, lw, lc) = net.arch.latent_shape();
        let disc_cfg = DiscConfig {
            latent_channels: lc,
            latent_size: (lh, lw),
            depth_size: net.arch.output_size(),
            ..DiscConfig::default()
        };
        let (disc_f, disc_y) = init_discriminators(mix_seed(cfg.seed, 1), &disc_cfg);
        let residual = (cfg.regularizer == Regularizer::Rtf).then(|| init_residual_branch(mix_seed(cfg.seed, 2), branch_cfg.clone()));
        let (recon, report) = match (cfg.regularizer, recon) {
            (Regularizer::Fcf, Some(r)) => (Some(r), None),
            (Regularizer::Fcf, None) => {
                let init = init_recon_branch(mix_seed(cfg.seed, 3), branch_cfg);
                let ct_cfg = CtPretrainConfig {
                    seed: mix_seed(cfg.seed, 4),
                    ..cfg.ct_pretrain.clone()
                };
                let (r, rep) = pretrain_ct_on_features(init, &features.target_prefix, &features.target_latent, &ct_cfg)?;
                (Some(r), Some(rep))
            }
            _ => (None, None),
        };
        let mut optimizers = BTreeMap::new();
        let mut parties = vec!["disc_f", "disc_y"];
        parties.push(match cfg.regularizer {
            Regularizer::Rtf => "residual",
            _ => "head",
        });
        if recon.is_some() {
            parties.push("recon");
        }
        for p in parties {
            optimizers.insert(p.to_string(), Optimizer::new(cfg.optimizer));
        }
        Ok((
            AdaptBundle {
                config: cfg.clone(),
                net,
                residual,
                recon,
                disc_f,
                disc_y,
                optimizers,
                iteration: 0,
                monitor: CollapseMonitor::default(),
            },
            report,
        ))
    }

    /// Network plus residual branch, ready for evaluation.
    pub fn model(&self) -> DepthModel {
        DepthModel {
            net: self.net.clone(),
            residual: self.residual.clone(),
        }
    }

    /// Eval-mode target latent `M_t(x)` for images.
    pub fn target_latent(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let dn = DepthNet::new(&self.net.arch)?;
        let n = dn.n_stages();
        let boundary = dn.encode(&self.net.store, images, 0..n - 1, Mode::Eval)?;
        let latent = dn.encode(&self.net.store, &boundary, n - 1..n, Mode::Eval)?;
        match &self.residual {
            Some(r) => latent.add(&r.apply(&boundary)?),
            None => Ok(latent),
        }
    }
}

/// Mean `|M_t(x) − M_s(x)|` over a probe batch of images.
pub fn latent_drift(source: &NetworkParams<f32>, bundle: &AdaptBundle, probe: &Tensor<f32>) -> Result<f64> {
    let dn = DepthNet::new(&source.arch)?;
    let src = dn.encode(&source.store, probe, 0..dn.n_stages(), Mode::Eval)?;
    let tgt = bundle.target_latent(probe)?;
    let diff = tgt.sub(&src)?;
    Ok(diff.data().iter().map(|v| v.abs() as f64).sum::<f64>() / diff.len().max(1) as f64)
}

/// Adapted network, branches and log of one run.
#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub bundle: AdaptBundle,
    pub log: TrainLog,
}

/// Unsupervised adversarial adaptation of a source-pretrained network to the
/// target images. Target depth is never read.
pub fn adapt(
    net: &NetworkParams<f32>,
    source_train: &dyn LabeledSource,
    target_train: &dyn ImageSource,
    cfg: &AdaptConfig,
) -> Result<AdaptOutcome> {
    cfg.validate(net)?;
    let features = AdaptFeatures::compute(net, cfg.partition, source_train, target_train)?;
    adapt_with_features(net, &features, cfg, None)
}

/// [`adapt`] over precomputed features, optionally with an already
/// pretrained reconstruction branch.
pub fn adapt_with_features(
    net: &NetworkParams<f32>,
    features: &AdaptFeatures,
    cfg: &AdaptConfig,
    recon: Option<ReconBranchParams<f32>>,
) -> Result<AdaptOutcome> {
    let t0 = Instant::now();
    let (mut bundle, ct_report) = AdaptBundle::init(net, cfg, features, recon)?;
    let mut log = TrainLog {
        seed: cfg.seed,
        ct_pretrain: ct_report,
        ..TrainLog::default()
    };
    run_adaptation(&mut bundle, features, cfg.k_outer as u64, &mut log)?;
    log.wall_clock_seconds = t0.elapsed().as_secs_f64();
    Ok(AdaptOutcome { bundle, log })
}

/// Continues an unsupervised run until `bundle.iteration == until`.
pub fn run_adaptation(bundle: &mut AdaptBundle, features: &AdaptFeatures, until: u64, log: &mut TrainLog) -> Result<()> {
    let mut trainer = Trainer::new(bundle, features)?;
    while trainer.bundle.iteration < until {
        let rec = trainer.step(None)?;
        log.records.push(rec);
    }
    Ok(())
}

/// Semi-supervised continuation: unlabeled iterations as in [`adapt`]
/// alternate with labeled ones whose content term is BerHu against target
/// ground truth.
pub fn continue_semi(
    bundle: &mut AdaptBundle,
    features: &AdaptFeatures,
    labeled: &LabeledFeatures,
    semi: &SemiConfig,
    log: &mut TrainLog,
) -> Result<()> {
    let period = semi.unlabeled_per_labeled as u64 + 1;
    let mut trainer = Trainer::new(bundle, features)?;
    for j in 0..semi.k_outer as u64 {
        let rec = trainer.step((j % period == 0).then_some(labeled))?;
        log.records.push(rec);
    }
    Ok(())
}

/// [`adapt`] followed by the semi-supervised phase on `target_labeled`.
pub fn adapt_semi(
    net: &NetworkParams<f32>,
    source_train: &dyn LabeledSource,
    target_train: &dyn ImageSource,
    target_labeled: &dyn LabeledSource,
    cfg: &AdaptConfig,
    semi: &SemiConfig,
) -> Result<AdaptOutcome> {
    cfg.validate(net)?;
    if target_labeled.is_empty() {
        return Err(Error::config("labeled target split is empty"));
    }
    let t0 = Instant::now();
    let features = AdaptFeatures::compute(net, cfg.partition, source_train, target_train)?;
    let labeled = AdaptFeatures::labeled(net, cfg.partition, target_labeled)?;
    let mut out = adapt_with_features(net, &features, cfg, None)?;
    continue_semi(&mut out.bundle, &features, &labeled, semi, &mut out.log)?;
    out.log.wall_clock_seconds = t0.elapsed().as_secs_f64();
    Ok(out)
}

/// One row of the weight-sharing sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub adapt_depth: usize,
    /// Learned (non-statistic) encoder elements updated by the run.
    pub trainable_params: usize,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:>11} {:>10} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "adapt_depth", "params", "rel", "rms", "log10", "d1", "d2"
        );
        for r in &self.rows {
            let m = &r.metrics;
            s.push_str(&format!(
                "{:>11} {:>10} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
                r.adapt_depth, r.trainable_params, m.rel, m.rms, m.log10, m.delta1, m.delta2
            ));
        }
        s
    }
}

/// Runs DCR adaptation once per `adapt_depth` with otherwise identical
/// settings and seeds, evaluating each result on `target_eval`.
pub fn sweep_sharing(
    net: &NetworkParams<f32>,
    source_train: &dyn LabeledSource,
    target_train: &dyn ImageSource,
    target_eval: &dyn LabeledSource,
    depths: &[usize],
    cfg: &AdaptConfig,
    eval_cfg: &EvalConfig,
) -> Result<SweepReport> {
    if depths.is_empty() {
        return Err(Error::config("sweep needs at least one adapt_depth"));
    }
    let cfgs = depths
        .iter()
        .map(|&d| {
            let c = AdaptConfig {
                regularizer: Regularizer::Dcr,
                partition: PartitionSpec { adapt_depth: d },
                ..cfg.clone()
            };
            c.validate(net).map(|_| c)
        })
        .collect::<Result<Vec<_>>>()?;
    eval_cfg.validate()?;
    let mut rows = Vec::with_capacity(depths.len());
    for c in cfgs {
        let out = adapt(net, source_train, target_train, &c)?;
        let trainable_params = out
            .bundle
            .net
            .store
            .element_count(|a| a.tag == PartitionTag::Head && a.role == ArrayRole::Weight);
        let metrics = evaluate_dataset(&out.bundle.model(), target_eval, eval_cfg)?.aggregate;
        log::info!("sweep adapt_depth {}: rel {:.4}", c.partition.adapt_depth, metrics.rel);
        rows.push(SweepRow {
            adapt_depth: c.partition.adapt_depth,
            trainable_params,
            metrics,
        });
    }
    Ok(SweepReport { rows })
}

fn sample_indices(rng: &mut impl Rng, n: usize, b: usize) -> Vec<usize> {
    index::sample(rng, n, b.min(n)).into_vec()
}

/// The depth discriminator sees log-depth, the scale the decoder predicts in.
fn log_depth(depth: &Tensor<f32>) -> Tensor<f32> {
    depth.map(|v| v.ln())
}

fn log_depth_backward(depth: &Tensor<f32>, d_log: &Tensor<f32>) -> Result<Tensor<f32>> {
    depth.zip_map(d_log, |v, g| g / v)
}

fn pred_variance(depth: &Tensor<f32>) -> f64 {
    let n = depth.batch();
    let p = depth.item_len();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for j in 0..p {
        let mean = (0..n).map(|i| depth.item(i)[j] as f64).sum::<f64>() / n as f64;
        total += (0..n).map(|i| (depth.item(i)[j] as f64 - mean).powi(2)).sum::<f64>() / n as f64;
    }
    total / p as f64
}

/// Target-side forward state of one batch.
struct Generated {
    head: Option<Pass<f32>>,
    branch: Option<Pass<f32>>,
    boundary: Tensor<f32>,
    latent_src: Tensor<f32>,
    latent: Tensor<f32>,
    decoder: Pass<f32>,
    depth: Tensor<f32>,
}

struct Trainer<'a> {
    bundle: &'a mut AdaptBundle,
    features: &'a AdaptFeatures,
    dn: DepthNet,
    first: usize,
}

impl<'a> Trainer<'a> {
    fn new(bundle: &'a mut AdaptBundle, features: &'a AdaptFeatures) -> Result<Self> {
        if features.partition != bundle.config.partition {
            return Err(Error::config("features were computed for a different partition"));
        }
        let dn = DepthNet::new(&bundle.net.arch)?;
        let first = bundle.config.partition.first_adaptable(&bundle.net.arch);
        Ok(Trainer {
            bundle,
            features,
            dn,
            first,
        })
    }

    fn head_segments(&self) -> Vec<&Sequential> {
        self.dn.stages(self.first..self.dn.n_stages())
    }

    fn head_weights(&self) -> std::collections::BTreeSet<String> {
        self.bundle.net.store.weights_with_tag(PartitionTag::Head)
    }

    /// Target latent and depth for a batch of frozen-stage outputs.
    fn generate(&self, prefix: Tensor<f32>, latent_src: Tensor<f32>) -> Result<Generated> {
        let b = &*self.bundle;
        let (head, branch, latent) = match &b.residual {
            Some(r) => {
                let pass = r.forward_pass(&prefix, Mode::Train)?;
                let latent = latent_src.add(&pass.output)?;
                (None, Some(pass), latent)
            }
            None => {
                let pass = run_segments(&self.head_segments(), &b.net.store, &prefix, Mode::Eval)?;
                let latent = pass.output.clone();
                (Some(pass), None, latent)
            }
        };
        let decoder = run_segments(&[self.dn.decoder()], &b.net.store, &latent, Mode::Eval)?;
        let depth = positive_depth(&decoder.output);
        Ok(Generated {
            head,
            branch,
            boundary: prefix,
            latent_src,
            latent,
            decoder,
            depth,
        })
    }

    fn divergence(&self, reason: impl Into<String>) -> Error {
        Error::Divergence {
            iteration: self.bundle.iteration as usize,
            reason: reason.into(),
        }
    }

    fn clip(&self, grads: &mut Grads<f32>) {
        if let Some(c) = self.bundle.config.grad_clip {
            grads.clip_norm(c);
        }
    }

    /// One discriminator update on real vs generated inputs.
    fn disc_step(&mut self, which: &str, real: &Tensor<f32>, fake: &Tensor<f32>) -> Result<f64> {
        let form = self.bundle.config.gan_form;
        let disc = if which == "disc_f" { &self.bundle.disc_f } else { &self.bundle.disc_y };
        let (lr, cr) = disc.forward_cached(real)?;
        let (lf, cf) = disc.forward_cached(fake)?;
        let loss = adv_loss_d(lr.data(), lf.data(), form).map_err(|e| self.divergence(e.to_string()))?;
        let mut grads = Grads::all();
        disc.backward(&cr, Tensor::from_vec(lr.shape(), loss.d_real)?, &mut grads, false)?;
        disc.backward(&cf, Tensor::from_vec(lf.shape(), loss.d_fake)?, &mut grads, false)?;
        if !loss.value.is_finite() || !grads.all_finite() {
            return Err(self.divergence(format!("{which} loss is not finite")));
        }
        let b = &mut *self.bundle;
        let opt = b.optimizers.get_mut(which).ok_or_else(|| Error::config(format!("no optimizer for {which}")))?;
        let store = if which == "disc_f" { &mut b.disc_f.store } else { &mut b.disc_y.store };
        opt.step(store, &grads)?;
        Ok(loss.value as f64)
    }

    /// Generator-side loss and input gradient against a discriminator.
    fn gen_grad(&self, which: &str, fake: &Tensor<f32>) -> Result<(f64, Tensor<f32>)> {
        let disc = if which == "disc_f" { &self.bundle.disc_f } else { &self.bundle.disc_y };
        let (logits, caches) = disc.forward_cached(fake)?;
        let g = adv_loss_g(logits.data(), self.bundle.config.gan_form).map_err(|e| self.divergence(e.to_string()))?;
        let dx = disc
            .backward(&caches, Tensor::from_vec(logits.shape(), g.grad)?, &mut Grads::none(), true)?
            .ok_or_else(|| Error::shape("discriminator returned no input gradient"))?;
        Ok((g.value as f64, dx))
    }

    fn batch(&self, labeled: Option<&LabeledFeatures>, stream_offset: u64) -> Result<(Vec<usize>, Tensor<f32>, Tensor<f32>)> {
        let (it, seed, bsz) = (self.bundle.iteration, self.bundle.config.seed, self.bundle.config.batch_size);
        match labeled {
            Some(l) => {
                let mut rng = stream_rng(seed, it, STREAM_LABELED + stream_offset);
                let idx = sample_indices(&mut rng, l.prefix.batch(), bsz);
                Ok((idx.clone(), l.prefix.gather(&idx)?, l.latent.gather(&idx)?))
            }
            None => {
                let f = self.features;
                let mut rng = stream_rng(seed, it, STREAM_TARGET + stream_offset);
                let idx = sample_indices(&mut rng, f.target_prefix.batch(), bsz);
                Ok((idx.clone(), f.target_prefix.gather(&idx)?, f.target_latent.gather(&idx)?))
            }
        }
    }

    fn step(&mut self, labeled: Option<&LabeledFeatures>) -> Result<IterRecord> {
        let cfg = self.bundle.config.clone();
        let lambda = cfg.lambda as f32;
        let f = self.features;
        let (mut disc_f_loss, mut disc_y_loss) = (0.0, 0.0);
        let mut last: Option<(Vec<usize>, Generated)> = None;
        for j in 0..cfg.m_inner as u64 {
            let offset = j * INNER_STRIDE;
            let (t_idx, prefix, latent_src) = self.batch(labeled, offset)?;
            let gen = self.generate(prefix, latent_src)?;
            let mut rng = stream_rng(cfg.seed, self.bundle.iteration, STREAM_SOURCE + offset);
            let s_idx = sample_indices(&mut rng, f.source_latent.batch(), cfg.batch_size);
            disc_f_loss = self.disc_step("disc_f", &f.source_latent.gather(&s_idx)?, &gen.latent)?;
            if cfg.use_dy {
                let real = log_depth(&f.source_depth.gather(&s_idx)?);
                disc_y_loss = self.disc_step("disc_y", &real, &log_depth(&gen.depth))?;
            }
            last = Some((t_idx, gen));
        }
        let (t_idx, gen) = last.expect("m_inner >= 1");

        // Generator side against the updated discriminators.
        let (l_adv_f, mut d_latent) = self.gen_grad("disc_f", &gen.latent)?;
        let mut d_depth = Tensor::zeros(gen.depth.shape());
        let mut l_adv_d = 0.0;
        if cfg.use_dy {
            let (v, d) = self.gen_grad("disc_y", &log_depth(&gen.depth))?;
            l_adv_d = v;
            d_depth = log_depth_backward(&gen.depth, &d)?;
        }
        let mut recon_grads = Grads::all();
        let mut recon_pass = None;
        let mut d_residual_extra = None;
        let l_content = match labeled {
            Some(l) => {
                let (gt, mask) = l.gt(&t_idx);
                let lg = berhu(gen.depth.data(), &gt, &mask).map_err(|e| self.divergence(e.to_string()))?;
                d_depth.add_assign(&Tensor::from_vec(gen.depth.shape(), lg.grad)?.scale(lambda))?;
                lg.value as f64
            }
            None => match cfg.regularizer {
                Regularizer::Dcr => {
                    let lg = dcr_loss(&gen.latent_src, &gen.latent)?;
                    d_latent.add_assign(&Tensor::from_vec(gen.latent.shape(), lg.grad)?.scale(lambda))?;
                    lg.value as f64
                }
                Regularizer::Rtf => {
                    let residual = &gen.branch.as_ref().expect("residual branch pass").output;
                    let lg = rtf_penalty(residual);
                    d_residual_extra = Some(Tensor::from_vec(residual.shape(), lg.grad)?.scale(lambda));
                    lg.value as f64
                }
                Regularizer::Fcf => {
                    let recon = self.bundle.recon.as_ref().expect("reconstruction branch");
                    let (v, dl, pass) =
                        fcf_loss_grad(recon, &gen.latent, &gen.boundary, Mode::Train, &mut recon_grads, true)?;
                    d_latent.add_assign(&dl.expect("latent gradient requested").scale(lambda))?;
                    recon_grads.scale(lambda);
                    recon_pass = Some(pass);
                    v as f64
                }
            },
        };
        let l_final = l_adv_d + l_adv_f + cfg.lambda * l_content;
        if !l_final.is_finite() {
            return Err(self.divergence(format!(
                "non-finite objective (adv_d {l_adv_d}, adv_f {l_adv_f}, content {l_content})"
            )));
        }

        // Through the frozen decoder into the latent.
        let store = &self.bundle.net.store;
        if cfg.use_dy || labeled.is_some() {
            let d_raw = positive_depth_backward(&gen.depth, &d_depth)?;
            let d = back_segments(&[self.dn.decoder()], store, &gen.decoder.caches, d_raw, &mut Grads::none(), true)?
                .expect("decoder input gradient");
            d_latent.add_assign(&d)?;
        }
        let pred_var = pred_variance(&gen.depth);

        match (&gen.head, &gen.branch) {
            (Some(head), _) => {
                let mut grads = Grads::only(self.head_weights());
                back_segments(&self.head_segments(), store, &head.caches, d_latent, &mut grads, false)?;
                if !grads.all_finite() {
                    return Err(self.divergence("non-finite head gradient"));
                }
                self.clip(&mut grads);
                let b = &mut *self.bundle;
                b.optimizers
                    .get_mut("head")
                    .ok_or_else(|| Error::config("no optimizer for head"))?
                    .step(&mut b.net.store, &grads)?;
                for u in &head.updates {
                    u.apply(&mut b.net.store)?;
                }
            }
            (None, Some(pass)) => {
                let mut d_res = d_latent;
                if let Some(extra) = d_residual_extra {
                    d_res.add_assign(&extra)?;
                }
                let residual = self.bundle.residual.as_ref().expect("residual branch");
                let mut grads = Grads::all();
                residual.backward(pass, d_res, &mut grads, false)?;
                if !grads.all_finite() {
                    return Err(self.divergence("non-finite residual-branch gradient"));
                }
                self.clip(&mut grads);
                let b = &mut *self.bundle;
                let r = b.residual.as_mut().expect("residual branch");
                b.optimizers
                    .get_mut("residual")
                    .ok_or_else(|| Error::config("no optimizer for residual"))?
                    .step(&mut r.store, &grads)?;
                for u in &pass.updates {
                    u.apply(&mut r.store)?;
                }
            }
            (None, None) => unreachable!("generate sets one of head or branch"),
        }
        if let Some(pass) = recon_pass {
            if !recon_grads.all_finite() {
                return Err(self.divergence("non-finite reconstruction-branch gradient"));
            }
            self.clip(&mut recon_grads);
            let b = &mut *self.bundle;
            let r = b.recon.as_mut().expect("reconstruction branch");
            b.optimizers
                .get_mut("recon")
                .ok_or_else(|| Error::config("no optimizer for recon"))?
                .step(&mut r.store, &recon_grads)?;
            for u in &pass.updates {
                u.apply(&mut r.store)?;
            }
        }

        let b = &mut *self.bundle;
        let warning = b.monitor.observe(pred_var, cfg.collapse_ratio, cfg.collapse_patience);
        if let Some(w) = &warning {
            log::warn!("iteration {}: {w}", b.iteration);
        }
        let rec = IterRecord {
            iteration: b.iteration,
            l_adv_d,
            l_adv_f,
            l_content,
            l_final,
            lambda: cfg.lambda,
            disc_f_loss,
            disc_y_loss,
            pred_variance: pred_var,
            labeled: labeled.is_some(),
            warning,
        };
        b.iteration += 1;
        Ok(rec)
    }
}
