//! Content-congruency regularizers for adaptation: an L1 pin of the adapted
//! latent to the source latent, a penalized additive residual branch, and a
//! reconstruction branch from the latent back to the trunk features.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depthnet::{encode_images, register, run_segments, ArchConfig, LossGrad, NetworkParams, Pass};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Grads, Layer, Mode, Optimizer, OptimizerConfig, ParamStore, PartitionTag, Sequential};
use crate::scalar::{lit, Scalar};
use crate::scenegen::ImageSource;
use crate::tensor::Tensor;

/// Which content regularizer an adaptation run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Regularizer {
    Dcr,
    Rtf,
    Fcf,
}

/// Channel geometry shared by both branches.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BranchConfig {
    /// Channels of the trunk output.
    pub boundary_channels: usize,
    pub latent_channels: usize,
    /// Hidden width of the reconstruction branch.
    pub recon_width: usize,
}

impl Default for BranchConfig {
    fn default() -> Self {
        Self::from_arch(&ArchConfig::default())
    }
}

impl BranchConfig {
    pub fn from_arch(arch: &ArchConfig) -> Self {
        let n = arch.stage_channels.len();
        BranchConfig {
            boundary_channels: arch.stage_channels[n.saturating_sub(2)],
            latent_channels: arch.stage_channels[n - 1],
            recon_width: arch.stage_channels[n.saturating_sub(2)],
        }
    }
}

fn checked<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

/// Element-mean L1 between two tensors. The gradient is with respect to
/// `b`; the gradient with respect to `a` is its negation.
fn mean_l1<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<LossGrad<T>> {
    checked(a, b, what)?;
    let n = a.len().max(1);
    let inv = T::one() / lit(n as f64);
    let mut value = T::zero();
    let grad = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = y - x;
            value += d.abs();
            if d == T::zero() {
                T::zero()
            } else {
                d.signum() * inv
            }
        })
        .collect();
    Ok(LossGrad { value: value * inv, grad })
}

/// Domain consistency: element-mean `|f_src − f_tgt|`. Gradient is with
/// respect to `f_tgt`.
pub fn dcr_loss<T: Scalar>(f_src: &Tensor<T>, f_tgt: &Tensor<T>) -> Result<LossGrad<T>> {
    mean_l1(f_src, f_tgt, "dcr_loss")
}

/// Root-mean-square magnitude of the residual, with its gradient.
pub fn rtf_penalty<T: Scalar>(residual: &Tensor<T>) -> LossGrad<T> {
    let n = residual.len().max(1);
    let nt = lit::<T>(n as f64);
    let sq = residual.data().iter().fold(T::zero(), |acc, &r| acc + r * r);
    let rms = (sq / nt).sqrt();
    let grad = if rms == T::zero() {
        vec![T::zero(); residual.len()]
    } else {
        residual.data().iter().map(|&r| r / (nt * rms)).collect()
    };
    LossGrad { value: rms, grad }
}

/// Element-mean `|L_t − recon|`. Gradient is with respect to `recon`.
pub fn fcf_terms<T: Scalar>(recon: &Tensor<T>, boundary: &Tensor<T>) -> Result<LossGrad<T>> {
    mean_l1(boundary, recon, "fcf_loss")
}

/// Additive residual branch: two identity-shortcut conv blocks on the trunk
/// output, a stride-2 stage to latent resolution and a zero-initialized 1×1
/// output conv.
pub fn residual_branch_net(cfg: &BranchConfig) -> Sequential {
    let b = cfg.boundary_channels;
    let l = cfg.latent_channels;
    let block = |name: &str| Layer::Residual {
        body: Sequential::new(vec![
            Layer::Conv(Conv2d::k3(format!("delta_m.{name}.conv"), b, b, 1)),
            Layer::Norm(BatchNorm2d::new(format!("delta_m.{name}.norm"), b)),
        ]),
        shortcut: Sequential::default(),
        relu_out: true,
    };
    Sequential::new(vec![
        block("block1"),
        block("block2"),
        Layer::Conv(Conv2d::k3("delta_m.down.conv", b, l, 2)),
        Layer::Norm(BatchNorm2d::new("delta_m.down.norm", l)),
        Layer::Relu,
        Layer::Conv(Conv2d::k1("delta_m.out", l, l, 1)),
    ])
}

/// Reconstruction branch: latent → conv block → 2× upsample → conv block →
/// 1×1 output conv with trunk-output channels.
pub fn recon_branch_net(cfg: &BranchConfig) -> Sequential {
    let (b, l, w) = (cfg.boundary_channels, cfg.latent_channels, cfg.recon_width);
    Sequential::new(vec![
        Layer::Conv(Conv2d::k3("c_t.conv_a", l, w, 1)),
        Layer::Norm(BatchNorm2d::new("c_t.norm_a", w)),
        Layer::Relu,
        Layer::Upsample2x,
        Layer::Conv(Conv2d::k3("c_t.conv_b", w, w, 1)),
        Layer::Norm(BatchNorm2d::new("c_t.norm_b", w)),
        Layer::Relu,
        Layer::Conv(Conv2d::k1("c_t.out", w, b, 1)),
    ])
}

macro_rules! branch_type {
    ($(#[$doc:meta])* $name:ident, $net:ident, $tag:expr) => {
        $(#[$doc])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T> {
            pub config: BranchConfig,
            pub store: ParamStore<T>,
        }

        impl<T: Scalar> $name<T> {
            pub fn from_store(config: BranchConfig, store: ParamStore<T>) -> Self {
                $name { config, store }
            }

            pub fn net(&self) -> Sequential {
                $net(&self.config)
            }

            /// Forward pass keeping caches and batch-norm updates.
            pub fn forward_pass(&self, x: &Tensor<T>, mode: Mode) -> Result<Pass<T>> {
                run_segments(&[&self.net()], &self.store, x, mode)
            }

            /// Backward through a pass produced by [`Self::forward_pass`].
            pub fn backward(
                &self,
                pass: &Pass<T>,
                dy: Tensor<T>,
                grads: &mut Grads<T>,
                need_dx: bool,
            ) -> Result<Option<Tensor<T>>> {
                self.net().backward(&self.store, &pass.caches[0], dy, grads, need_dx)
            }

            /// Eval-mode output.
            pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
                Ok(self.forward_pass(x, Mode::Eval)?.output)
            }

            pub fn cast<U: Scalar>(&self) -> $name<U> {
                $name {
                    config: self.config.clone(),
                    store: self.store.cast(),
                }
            }

            fn init(seed: u64, config: BranchConfig) -> Self {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut store = ParamStore::new();
                register(&$net(&config), &mut store, &mut rng, $tag);
                $name { config, store }
            }
        }
    };
}

branch_type!(
    /// Weights of the additive latent residual branch.
    ResidualBranchParams,
    residual_branch_net,
    PartitionTag::ResidualBranch
);
branch_type!(
    /// Weights of the latent-to-trunk-feature reconstruction branch.
    ReconBranchParams,
    recon_branch_net,
    PartitionTag::ReconBranch
);

/// Residual branch whose output is identically zero.
pub fn init_residual_branch<T: Scalar>(seed: u64, config: BranchConfig) -> ResidualBranchParams<T> {
    let mut b = ResidualBranchParams::init(seed, config);
    b.store.zero_prefix("delta_m.out");
    b
}

pub fn init_recon_branch<T: Scalar>(seed: u64, config: BranchConfig) -> ReconBranchParams<T> {
    ReconBranchParams::init(seed, config)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RtfOutput<T> {
    pub latent_tgt: Tensor<T>,
    pub residual: Tensor<T>,
}

/// `latent_tgt = latent_src + ΔM(L_t)` with the branch in eval mode.
pub fn rtf_apply<T: Scalar>(
    branch: &ResidualBranchParams<T>,
    boundary: &Tensor<T>,
    latent_src: &Tensor<T>,
) -> Result<RtfOutput<T>> {
    let delta = branch.apply(boundary)?;
    checked(&delta, latent_src, "rtf_apply")?;
    let latent_tgt = latent_src.add(&delta)?;
    // Reported as the realized difference so the additive law holds bit-exactly.
    let residual = latent_tgt.sub(latent_src)?;
    Ok(RtfOutput { latent_tgt, residual })
}

/// Element-mean `|L_t − C_t(latent)|` with the branch in eval mode.
pub fn fcf_loss<T: Scalar>(branch: &ReconBranchParams<T>, latent: &Tensor<T>, boundary: &Tensor<T>) -> Result<T> {
    let recon = branch.apply(latent)?;
    Ok(fcf_terms(&recon, boundary)?.value)
}

/// Training-mode reconstruction loss with gradients for the branch (into
/// `grads`) and, when requested, for the latent.
pub fn fcf_loss_grad<T: Scalar>(
    branch: &ReconBranchParams<T>,
    latent: &Tensor<T>,
    boundary: &Tensor<T>,
    mode: Mode,
    grads: &mut Grads<T>,
    need_dlatent: bool,
) -> Result<(T, Option<Tensor<T>>, Pass<T>)> {
    let pass = branch.forward_pass(latent, mode)?;
    let lg = fcf_terms(&pass.output, boundary)?;
    let dy = Tensor::from_vec(pass.output.shape(), lg.grad)?;
    let d_latent = branch.backward(&pass, dy, grads, need_dlatent)?;
    Ok((lg.value, d_latent, pass))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CtPretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of the target images held out to measure the loss.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for CtPretrainConfig {
    fn default() -> Self {
        CtPretrainConfig {
            steps: 2000,
            batch_size: 8,
            lr: 1e-3,
            holdout_fraction: 0.1,
            seed: 0,
        }
    }
}

impl CtPretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("pretrain_ct batch_size must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("pretrain_ct lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::config("pretrain_ct holdout_fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtPretrainReport {
    pub initial_holdout: f64,
    pub final_holdout: f64,
    /// Set when the held-out loss did not decrease.
    pub warning: Option<String>,
}

/// Trains a fresh reconstruction branch on precomputed pairs of trunk outputs
/// and source latents (`[n, ...]` each). The last `holdout_fraction` of the
/// pairs is held out for the before/after loss.
pub fn pretrain_ct_on_features(
    init: ReconBranchParams<f32>,
    boundaries: &Tensor<f32>,
    latents: &Tensor<f32>,
    cfg: &CtPretrainConfig,
) -> Result<(ReconBranchParams<f32>, CtPretrainReport)> {
    cfg.validate()?;
    let n = boundaries.batch();
    if latents.batch() != n || n == 0 {
        return Err(Error::shape(format!(
            "pretrain_ct: {n} trunk outputs vs {} latents",
            latents.batch()
        )));
    }
    let n_hold = ((n as f64 * cfg.holdout_fraction).round() as usize).min(n - 1);
    let n_fit = n - n_hold;
    let hold: Vec<usize> = if n_hold == 0 { (0..n).collect() } else { (n_fit..n).collect() };
    let eval_hold = |b: &ReconBranchParams<f32>| -> Result<f64> {
        let mut total = 0.0;
        for chunk in hold.chunks(32) {
            let l = latents.gather(chunk)?;
            let t = boundaries.gather(chunk)?;
            total += fcf_loss(b, &l, &t)? as f64 * chunk.len() as f64;
        }
        Ok(total / hold.len() as f64)
    };
    let mut branch = init;
    let initial = eval_hold(&branch)?;
    let mut opt = Optimizer::new(OptimizerConfig::adam(cfg.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    for _ in 0..cfg.steps {
        if order.len() < cfg.batch_size {
            let mut fresh: Vec<usize> = (0..n_fit).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let batch: Vec<usize> = order.drain(..cfg.batch_size.min(order.len())).collect();
        let l = latents.gather(&batch)?;
        let t = boundaries.gather(&batch)?;
        let mut grads = Grads::all();
        let (value, _, pass) = fcf_loss_grad(&branch, &l, &t, Mode::Train, &mut grads, false)?;
        if !value.is_finite() || !grads.all_finite() {
            return Err(Error::Numeric("pretrain_ct: non-finite reconstruction loss".into()));
        }
        opt.step(&mut branch.store, &grads)?;
        for u in &pass.updates {
            u.apply(&mut branch.store)?;
        }
    }
    let fin = if cfg.steps == 0 { initial } else { eval_hold(&branch)? };
    let warning = (cfg.steps > 0 && fin >= initial).then(|| {
        let msg = format!("reconstruction loss did not decrease ({initial:.5} -> {fin:.5})");
        log::warn!("pretrain_ct: {msg}");
        msg
    });
    Ok((
        branch,
        CtPretrainReport {
            initial_holdout: initial,
            final_holdout: fin,
            warning,
        },
    ))
}

/// Trains the reconstruction branch against the frozen source encoder on
/// target images, with the default optimizer settings.
pub fn pretrain_ct(
    net: &NetworkParams<f32>,
    target_train: &dyn ImageSource,
    steps: usize,
    seed: u64,
) -> Result<(ReconBranchParams<f32>, CtPretrainReport)> {
    let cfg = CtPretrainConfig {
        steps,
        seed,
        ..CtPretrainConfig::default()
    };
    let n_stages = net.arch.n_stages();
    let idx: Vec<usize> = (0..target_train.len()).collect();
    let boundaries = encode_images(net, target_train, &idx, n_stages - 1)?;
    let dn = crate::depthnet::DepthNet::new(&net.arch)?;
    let latents = dn.encode(&net.store, &boundaries, n_stages - 1..n_stages, Mode::Eval)?;
    let init = init_recon_branch(seed, BranchConfig::from_arch(&net.arch));
    pretrain_ct_on_features(init, &boundaries, &latents, &cfg)
}
