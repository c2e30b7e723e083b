//! Patch discriminators on latent features and on predicted depth, with the
//! logarithmic and least-squares adversarial losses.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depthnet::{register, LossGrad};
use crate::error::{Error, Result};
use crate::nn::{Cache, Conv2d, Ctx, Grads, Layer, Mode, ParamStore, PartitionTag, Sequential};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

const LEAK: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscKind {
    /// Consumes latent feature maps.
    Feature,
    /// Consumes single-channel depth maps.
    Depth,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanForm {
    /// Sigmoid cross-entropy on logits.
    Log,
    /// Least squares with targets 1 (real) and 0 (fake).
    Lsq,
}

/// Input geometry of both discriminators.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscConfig {
    pub latent_channels: usize,
    pub latent_size: (usize, usize),
    pub depth_size: (usize, usize),
    pub feature_widths: (usize, usize),
    pub depth_widths: (usize, usize, usize),
}

impl Default for DiscConfig {
    fn default() -> Self {
        DiscConfig {
            latent_channels: 128,
            latent_size: (8, 10),
            depth_size: (64, 80),
            feature_widths: (64, 128),
            depth_widths: (16, 32, 64),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams<T> {
    kind: DiscKind,
    pub config: DiscConfig,
    pub store: ParamStore<T>,
}

fn prefix(kind: DiscKind) -> &'static str {
    match kind {
        DiscKind::Feature => "disc_f",
        DiscKind::Depth => "disc_y",
    }
}

/// Layer graph for a discriminator kind.
pub fn disc_net(kind: DiscKind, cfg: &DiscConfig) -> Sequential {
    let p = prefix(kind);
    match kind {
        DiscKind::Feature => {
            let (a, b) = cfg.feature_widths;
            Sequential::new(vec![
                Layer::Conv(Conv2d::k3(format!("{p}.conv1"), cfg.latent_channels, a, 2)),
                Layer::LeakyRelu(LEAK),
                Layer::Conv(Conv2d::k3(format!("{p}.conv2"), a, b, 2)),
                Layer::LeakyRelu(LEAK),
                Layer::Conv(Conv2d::k1(format!("{p}.head"), b, 1, 1)),
            ])
        }
        DiscKind::Depth => {
            let (a, b, c) = cfg.depth_widths;
            Sequential::new(vec![
                Layer::Conv(Conv2d::new(format!("{p}.conv1"), 1, a, 4, 2, 1)),
                Layer::LeakyRelu(LEAK),
                Layer::Conv(Conv2d::new(format!("{p}.conv2"), a, b, 4, 2, 1)),
                Layer::LeakyRelu(LEAK),
                Layer::Conv(Conv2d::new(format!("{p}.conv3"), b, c, 4, 2, 1)),
                Layer::LeakyRelu(LEAK),
                Layer::Conv(Conv2d::k3(format!("{p}.head"), c, 1, 1)),
            ])
        }
    }
}

impl<T: Scalar> DiscriminatorParams<T> {
    pub fn new(kind: DiscKind, config: DiscConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tag = match kind {
            DiscKind::Feature => PartitionTag::FeatureDisc,
            DiscKind::Depth => PartitionTag::DepthDisc,
        };
        let mut store = ParamStore::new();
        register(&disc_net(kind, &config), &mut store, &mut rng, tag);
        DiscriminatorParams { kind, config, store }
    }

    pub fn from_store(kind: DiscKind, config: DiscConfig, store: ParamStore<T>) -> Self {
        DiscriminatorParams { kind, config, store }
    }

    pub fn kind(&self) -> DiscKind {
        self.kind
    }

    pub fn net(&self) -> Sequential {
        disc_net(self.kind, &self.config)
    }

    /// Name prefix of the final scoring layer.
    pub fn head_prefix(&self) -> String {
        format!("{}.head", prefix(self.kind))
    }

    pub fn expected_input(&self) -> (usize, usize, usize) {
        match self.kind {
            DiscKind::Feature => (
                self.config.latent_channels,
                self.config.latent_size.0,
                self.config.latent_size.1,
            ),
            DiscKind::Depth => (1, self.config.depth_size.0, self.config.depth_size.1),
        }
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        let (c, h, w) = self.expected_input();
        if (x.channels(), x.height(), x.width()) != (c, h, w) {
            return Err(Error::shape(format!(
                "{:?} discriminator expects [n, {c}, {h}, {w}], got {:?}",
                self.kind,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Per-patch scores.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        self.net().infer(&self.store, x, &mut Ctx::eval())
    }

    /// Scores plus the caches needed by [`Self::backward`].
    pub fn forward_cached(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<Cache<T>>)> {
        self.check(x)?;
        self.net().forward(&self.store, x, &mut Ctx::new(Mode::Eval))
    }

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient when `need_dx` is set.
    pub fn backward(
        &self,
        caches: &[Cache<T>],
        d_logits: Tensor<T>,
        grads: &mut Grads<T>,
        need_dx: bool,
    ) -> Result<Option<Tensor<T>>> {
        self.net().backward(&self.store, caches, d_logits, grads, need_dx)
    }
}

/// Fresh feature and depth discriminators, each seeded from `seed`.
pub fn init_discriminators<T: Scalar>(seed: u64, config: &DiscConfig) -> (DiscriminatorParams<T>, DiscriminatorParams<T>) {
    (
        DiscriminatorParams::new(DiscKind::Feature, config.clone(), seed.wrapping_mul(2).wrapping_add(1)),
        DiscriminatorParams::new(DiscKind::Depth, config.clone(), seed.wrapping_mul(2).wrapping_add(2)),
    )
}

/// Patch scores shaped like the discriminator that produced them.
pub fn disc_forward<T: Scalar>(d: &DiscriminatorParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    d.forward(x)
}

fn check_finite<T: Scalar>(x: &[T], what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what}: non-finite logits")))
    }
}

/// `log σ(x)`, stable for large |x|.
fn log_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Mean over patches of the per-patch loss toward `target` (1 real, 0 fake).
fn side<T: Scalar>(logits: &[T], real: bool, form: GanForm) -> LossGrad<T> {
    let n = lit::<T>(logits.len().max(1) as f64);
    let mut value = T::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for &x in logits {
        match (form, real) {
            (GanForm::Lsq, true) => {
                value += (x - T::one()) * (x - T::one());
                grad.push(lit::<T>(2.0) * (x - T::one()) / n);
            }
            (GanForm::Lsq, false) => {
                value += x * x;
                grad.push(lit::<T>(2.0) * x / n);
            }
            (GanForm::Log, true) => {
                // −log σ(x)
                value -= log_sigmoid(x);
                grad.push((sigmoid(x) - T::one()) / n);
            }
            (GanForm::Log, false) => {
                // −log(1 − σ(x)) = −log σ(−x)
                value -= log_sigmoid(-x);
                grad.push(sigmoid(x) / n);
            }
        }
    }
    LossGrad { value: value / n, grad }
}

/// Discriminator-side loss with gradients for the real and fake logits.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscLoss<T> {
    pub value: T,
    pub d_real: Vec<T>,
    pub d_fake: Vec<T>,
}

/// Minimized discriminator loss: log form `−E log σ(real) − E log(1−σ(fake))`,
/// lsq form `E (real−1)² + E fake²`, each averaged over patches.
pub fn adv_loss_d<T: Scalar>(real: &[T], fake: &[T], form: GanForm) -> Result<DiscLoss<T>> {
    check_finite(real, "adv_loss_d real")?;
    check_finite(fake, "adv_loss_d fake")?;
    let r = side(real, true, form);
    let f = side(fake, false, form);
    Ok(DiscLoss {
        value: r.value + f.value,
        d_real: r.grad,
        d_fake: f.grad,
    })
}

/// Non-saturating generator loss: log form `−E log σ(fake)`, lsq form
/// `E (fake−1)²`.
pub fn adv_loss_g<T: Scalar>(fake: &[T], form: GanForm) -> Result<LossGrad<T>> {
    check_finite(fake, "adv_loss_g")?;
    Ok(side(fake, true, form))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::max_rel_err;
    use proptest::prelude::*;
    use rand::Rng;

    fn small() -> DiscConfig {
        DiscConfig {
            latent_channels: 3,
            latent_size: (4, 6),
            depth_size: (16, 24),
            feature_widths: (4, 5),
            depth_widths: (2, 3, 4),
        }
    }

    #[test]
    fn same_seed_same_discriminators() {
        let (fa, ya) = init_discriminators::<f32>(5, &DiscConfig::default());
        let (fb, yb) = init_discriminators::<f32>(5, &DiscConfig::default());
        assert!(fa.store.bit_equal(&fb.store));
        assert!(ya.store.bit_equal(&yb.store));
        assert_eq!(fa.kind(), DiscKind::Feature);
        assert_eq!(ya.kind(), DiscKind::Depth);
    }

    #[test]
    fn feature_disc_reads_latent_channels() {
        let (f, _) = init_discriminators::<f32>(0, &DiscConfig::default());
        assert_eq!(f.store.get("disc_f.conv1.weight").unwrap().shape[1], 128);
    }

    #[test]
    fn patch_output_geometry() {
        let (f, y) = init_discriminators::<f32>(0, &DiscConfig::default());
        let depth = Tensor::full([2, 1, 64, 80], 3.0f32);
        assert_eq!(y.forward(&depth).unwrap().shape(), [2, 1, 8, 10]);
        let latent = Tensor::full([2, 128, 8, 10], 0.1f32);
        assert_eq!(f.forward(&latent).unwrap().shape(), [2, 1, 2, 3]);
    }

    #[test]
    fn kind_mismatch_is_a_shape_error() {
        let (f, _) = init_discriminators::<f32>(0, &DiscConfig::default());
        let depth = Tensor::full([1, 1, 64, 80], 3.0f32);
        assert!(matches!(disc_forward(&f, &depth), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_head_gives_zero_logits_on_zero_input() {
        let (_, mut y) = init_discriminators::<f64>(0, &DiscConfig::default());
        let head = y.head_prefix();
        y.store.zero_prefix(&head);
        let out = y.forward(&Tensor::zeros([1, 1, 64, 80])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let (f, _) = init_discriminators::<f32>(3, &DiscConfig::default());
        let x = Tensor::full([1, 128, 8, 10], 0.7f32);
        assert_eq!(f.forward(&x).unwrap(), f.forward(&x).unwrap());
    }

    #[test]
    fn loss_oracles() {
        let z = adv_loss_d(&[1.0f64; 4], &[0.0; 4], GanForm::Lsq).unwrap().value;
        assert_eq!(z, 0.0);
        let log = adv_loss_d(&[0.0f64; 4], &[0.0; 4], GanForm::Log).unwrap().value;
        assert!((log - 2.0 * 2f64.ln()).abs() < 1e-12);
        let half = adv_loss_d(&[0.5f64; 4], &[0.5; 4], GanForm::Lsq).unwrap().value;
        assert!((half - 0.5).abs() < 1e-12);
        assert_eq!(adv_loss_g(&[1.0f64; 3], GanForm::Lsq).unwrap().value, 0.0);
        assert!((adv_loss_g(&[0.5f64; 3], GanForm::Lsq).unwrap().value - 0.25).abs() < 1e-12);
        assert!((adv_loss_g(&[0.0f64; 3], GanForm::Log).unwrap().value - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn non_finite_logits_are_rejected() {
        assert!(matches!(adv_loss_d(&[f64::NAN], &[0.0], GanForm::Lsq), Err(Error::Numeric(_))));
        assert!(matches!(adv_loss_g(&[f64::INFINITY], GanForm::Log), Err(Error::Numeric(_))));
    }

    #[test]
    fn log_form_is_stable_for_large_logits() {
        let v = adv_loss_d(&[800.0f64], &[-800.0], GanForm::Log).unwrap().value;
        assert!(v.is_finite() && v >= 0.0);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for form in [GanForm::Log, GanForm::Lsq] {
            for _ in 0..20 {
                let real: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
                let fake: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
                let d = adv_loss_d(&real, &fake, form).unwrap();
                let e1 = max_rel_err(|r| adv_loss_d(r, &fake, form).unwrap().value, &real, &d.d_real, 0..6, 1e-6);
                let e2 = max_rel_err(|f| adv_loss_d(&real, f, form).unwrap().value, &fake, &d.d_fake, 0..6, 1e-6);
                let g = adv_loss_g(&fake, form).unwrap();
                let e3 = max_rel_err(|f| adv_loss_g(f, form).unwrap().value, &fake, &g.grad, 0..6, 1e-6);
                assert!(e1.max(e2).max(e3) < 1e-4, "{form:?}: {e1} {e2} {e3}");
            }
        }
    }

    #[test]
    fn discriminator_backward_matches_finite_differences() {
        let (f, y) = init_discriminators::<f64>(2, &small());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for d in [f, y] {
            let (c, h, w) = d.expected_input();
            let x = Tensor::from_vec([2, c, h, w], (0..2 * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap();
            let (logits, caches) = d.forward_cached(&x).unwrap();
            let loss = adv_loss_g(logits.data(), GanForm::Lsq).unwrap();
            let mut grads = Grads::all();
            let dx = d
                .backward(&caches, Tensor::from_vec(logits.shape(), loss.grad).unwrap(), &mut grads, true)
                .unwrap()
                .unwrap();
            let eval = |xs: &[f64]| {
                let t = Tensor::from_vec(x.shape(), xs.to_vec()).unwrap();
                adv_loss_g(d.forward(&t).unwrap().data(), GanForm::Lsq).unwrap().value
            };
            let err = max_rel_err(eval, x.data(), dx.data(), (0..x.len()).step_by(7), 1e-6);
            assert!(err < 1e-4, "{:?} input grad err {err}", d.kind());
        }
    }

    proptest! {
        #[test]
        fn log_equilibrium_bound(p in 0.01f64..0.99) {
            let logit = (p / (1.0 - p)).ln();
            let v = adv_loss_d(&[logit; 3], &[logit; 3], GanForm::Log).unwrap().value;
            prop_assert!((v + (p.ln() + (1.0 - p).ln())).abs() < 1e-9);
            prop_assert!(v >= 2.0 * 2f64.ln() - 1e-12);
        }

        #[test]
        fn lsq_swap_equals_label_swap(a in proptest::collection::vec(-2.0f64..2.0, 6), b in proptest::collection::vec(-2.0f64..2.0, 6)) {
            // Swapping the real/fake inputs equals scoring with swapped targets.
            let swapped = adv_loss_d(&b, &a, GanForm::Lsq).unwrap().value;
            let label_swapped: f64 = a.iter().map(|x| x * x).sum::<f64>() / 6.0
                + b.iter().map(|x| (x - 1.0) * (x - 1.0)).sum::<f64>() / 6.0;
            prop_assert!((swapped - label_swapped).abs() < 1e-12);
            let mut perm = a.clone();
            perm.reverse();
            let p1 = adv_loss_d(&a, &b, GanForm::Lsq).unwrap().value;
            let p2 = adv_loss_d(&perm, &b, GanForm::Lsq).unwrap().value;
            prop_assert!((p1 - p2).abs() < 1e-12);
        }
    }
}
