//! The depth regressor: a residual encoder split into a frozen trunk and an
//! adaptable head, followed by an upsampling decoder, plus the BerHu loss.

use std::collections::BTreeSet;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Cache, Conv2d, Ctx, Grads, Layer, Mode, NormUpdate, ParamStore, PartitionTag, Sequential};
use crate::scalar::{lit, Scalar};
use crate::scenegen::ImageSource;
use crate::tensor::{DepthMap, Image, Tensor};

/// Lower and upper clamp of the positive depth mapping, in meters.
pub const MIN_DEPTH: f64 = 0.1;
pub const MAX_DEPTH: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub stem_channels: usize,
    /// One entry per stride-2 residual stage.
    pub stage_channels: Vec<usize>,
    /// One entry per upsampling block; one fewer than the number of stages so
    /// the prediction comes out at half the input resolution.
    pub decoder_channels: Vec<usize>,
    /// Initial bias of the output convolution (log-depth).
    pub output_bias: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            image_height: 128,
            image_width: 160,
            stem_channels: 8,
            stage_channels: vec![16, 32, 64, 128],
            decoder_channels: vec![32, 16, 8],
            output_bias: 3.0f64.ln(),
        }
    }
}

impl ArchConfig {
    pub fn n_stages(&self) -> usize {
        self.stage_channels.len()
    }

    pub fn total_stride(&self) -> usize {
        1 << self.n_stages()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_stages();
        if n < 2 {
            return Err(Error::config("need at least two encoder stages"));
        }
        if self.decoder_channels.len() != n - 1 {
            return Err(Error::config(format!(
                "decoder needs {} blocks for {n} stages, got {}",
                n - 1,
                self.decoder_channels.len()
            )));
        }
        let s = self.total_stride();
        if self.image_height == 0 || self.image_width == 0 || !self.image_height.is_multiple_of(s) || !self.image_width.is_multiple_of(s) {
            return Err(Error::config(format!(
                "image size {}×{} not divisible by total stride {s}",
                self.image_height, self.image_width
            )));
        }
        if self.stem_channels == 0 || self.stage_channels.contains(&0) || self.decoder_channels.contains(&0) {
            return Err(Error::config("channel counts must be positive"));
        }
        Ok(())
    }

    /// `(h, w, c)` of the trunk/head boundary feature.
    pub fn boundary_shape(&self) -> (usize, usize, usize) {
        let s = self.total_stride() / 2;
        (self.image_height / s, self.image_width / s, self.stage_channels[self.n_stages() - 2])
    }

    /// `(h, w, c)` of the latent.
    pub fn latent_shape(&self) -> (usize, usize, usize) {
        let s = self.total_stride();
        (self.image_height / s, self.image_width / s, *self.stage_channels.last().expect("validated"))
    }

    pub fn output_size(&self) -> (usize, usize) {
        (self.image_height / 2, self.image_width / 2)
    }
}

/// How many final encoder stages adapt to the target domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSpec {
    pub adapt_depth: usize,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        PartitionSpec { adapt_depth: 1 }
    }
}

impl PartitionSpec {
    pub fn validate(&self, arch: &ArchConfig) -> Result<()> {
        if self.adapt_depth > arch.n_stages() {
            return Err(Error::config(format!(
                "adapt_depth {} exceeds the {} encoder stages",
                self.adapt_depth,
                arch.n_stages()
            )));
        }
        Ok(())
    }

    /// Index of the first adaptable stage.
    pub fn first_adaptable(&self, arch: &ArchConfig) -> usize {
        arch.n_stages() - self.adapt_depth
    }
}

/// Network parameters together with the architecture and partition that
/// determine their names and tags.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T> {
    pub arch: ArchConfig,
    pub partition: PartitionSpec,
    pub store: ParamStore<T>,
}

impl<T: Scalar> NetworkParams<T> {
    /// Reassigns trunk/head tags for a new partition.
    pub fn retag(&mut self, partition: PartitionSpec) -> Result<()> {
        partition.validate(&self.arch)?;
        let first = partition.first_adaptable(&self.arch);
        for (name, a) in self.store.iter_mut() {
            if let Some(stage) = encoder_stage_of(name) {
                a.tag = if stage >= first { PartitionTag::Head } else { PartitionTag::Trunk };
            }
        }
        self.partition = partition;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> NetworkParams<U> {
        NetworkParams {
            arch: self.arch.clone(),
            partition: self.partition,
            store: self.store.cast(),
        }
    }
}

fn stage_prefix(i: usize) -> String {
    format!("enc{}", i + 1)
}

fn encoder_stage_of(name: &str) -> Option<usize> {
    let rest = name.strip_prefix("enc")?;
    let digits: String = rest.chars().take_while(char::is_ascii_digit).collect();
    digits.parse::<usize>().ok().map(|k| k - 1)
}

/// Layer graph of the depth network. Cheap to build; holds no weights.
#[derive(Clone, Debug)]
pub struct DepthNet {
    pub arch: ArchConfig,
    stages: Vec<Sequential>,
    decoder: Sequential,
}

/// Convolution → norm → ReLU.
pub(crate) fn conv_norm_relu(prefix: &str, conv: Conv2d) -> Vec<Layer> {
    let ch = conv.out_ch;
    vec![
        Layer::Conv(conv),
        Layer::Norm(BatchNorm2d::new(format!("{prefix}.norm"), ch)),
        Layer::Relu,
    ]
}

/// Stride-2 residual block with a projection shortcut.
pub(crate) fn down_block(prefix: &str, in_ch: usize, out_ch: usize) -> Layer {
    Layer::Residual {
        body: Sequential::new(vec![
            Layer::Conv(Conv2d::k3(format!("{prefix}.conv_a"), in_ch, out_ch, 2)),
            Layer::Norm(BatchNorm2d::new(format!("{prefix}.norm_a"), out_ch)),
            Layer::Relu,
            Layer::Conv(Conv2d::k3(format!("{prefix}.conv_b"), out_ch, out_ch, 1)),
            Layer::Norm(BatchNorm2d::new(format!("{prefix}.norm_b"), out_ch)),
        ]),
        shortcut: Sequential::new(vec![
            Layer::Conv(Conv2d::k1(format!("{prefix}.skip"), in_ch, out_ch, 2)),
            Layer::Norm(BatchNorm2d::new(format!("{prefix}.skip_norm"), out_ch)),
        ]),
        relu_out: true,
    }
}

/// Registers the arrays of every conv / norm layer in `seq`.
pub(crate) fn register<T: Scalar>(
    seq: &Sequential,
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    tag: PartitionTag,
) {
    for layer in &seq.layers {
        match layer {
            Layer::Conv(c) => store.add_conv(rng, &c.name, c.in_ch, c.out_ch, c.kernel, tag, 1.0),
            Layer::Norm(n) => store.add_norm(&n.name, n.channels, tag),
            Layer::Residual { body, shortcut, .. } => {
                register(body, store, rng, tag);
                register(shortcut, store, rng, tag);
            }
            Layer::Relu | Layer::LeakyRelu(_) | Layer::Upsample2x => {}
        }
    }
}

/// Intermediate results of a forward pass over a run of segments.
#[derive(Debug)]
pub struct Pass<T> {
    pub output: Tensor<T>,
    pub caches: Vec<Vec<Cache<T>>>,
    pub updates: Vec<NormUpdate<T>>,
}

/// Runs `segments` in order, keeping caches for a later backward pass.
pub fn run_segments<T: Scalar>(
    segments: &[&Sequential],
    params: &ParamStore<T>,
    x: &Tensor<T>,
    mode: Mode,
) -> Result<Pass<T>> {
    let mut ctx = Ctx::new(mode);
    let mut caches = Vec::with_capacity(segments.len());
    let mut cur = x.clone();
    for seg in segments {
        let (y, c) = seg.forward(params, &cur, &mut ctx)?;
        caches.push(c);
        cur = y;
    }
    Ok(Pass {
        output: cur,
        caches,
        updates: ctx.updates,
    })
}

/// Backward through `segments` (the same list given to [`run_segments`]).
pub fn back_segments<T: Scalar>(
    segments: &[&Sequential],
    params: &ParamStore<T>,
    caches: &[Vec<Cache<T>>],
    dy: Tensor<T>,
    grads: &mut Grads<T>,
    need_dx: bool,
) -> Result<Option<Tensor<T>>> {
    let mut cur = dy;
    for (i, (seg, cache)) in segments.iter().zip(caches).enumerate().rev() {
        match seg.backward(params, cache, cur, grads, need_dx || i > 0)? {
            Some(d) => cur = d,
            None => return Ok(None),
        }
    }
    Ok(Some(cur))
}

/// Trunk output, latent and depth for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<T> {
    /// Output of the stage before the last (`L_t`).
    pub boundary: Tensor<T>,
    pub latent: Tensor<T>,
    /// Positive depth, `[n, 1, H/2, W/2]`.
    pub depth: Tensor<T>,
}

impl DepthNet {
    pub fn new(arch: &ArchConfig) -> Result<Self> {
        arch.validate()?;
        let mut stages = Vec::with_capacity(arch.n_stages());
        let mut in_ch = arch.stem_channels;
        for (i, &out_ch) in arch.stage_channels.iter().enumerate() {
            let p = stage_prefix(i);
            let mut layers = Vec::new();
            if i == 0 {
                layers.extend(conv_norm_relu(
                    &format!("{p}.stem"),
                    Conv2d::k3(format!("{p}.stem.conv"), 3, arch.stem_channels, 1),
                ));
            }
            layers.push(down_block(&format!("{p}.block"), in_ch, out_ch));
            stages.push(Sequential::new(layers));
            in_ch = out_ch;
        }
        let mut dec = Vec::new();
        for (i, &out_ch) in arch.decoder_channels.iter().enumerate() {
            let p = format!("dec{}", i + 1);
            dec.push(Layer::Upsample2x);
            dec.extend(conv_norm_relu(&p, Conv2d::k3(format!("{p}.conv"), in_ch, out_ch, 1)));
            in_ch = out_ch;
        }
        dec.push(Layer::Conv(Conv2d::k3("dec.out", in_ch, 1, 1)));
        Ok(DepthNet {
            arch: arch.clone(),
            stages,
            decoder: Sequential::new(dec),
        })
    }

    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn stage(&self, i: usize) -> &Sequential {
        &self.stages[i]
    }

    pub fn stages(&self, range: Range<usize>) -> Vec<&Sequential> {
        self.stages[range].iter().collect()
    }

    pub fn decoder(&self) -> &Sequential {
        &self.decoder
    }

    /// Runs encoder stages `range` in `mode` without keeping caches.
    pub fn encode<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        x: &Tensor<T>,
        range: Range<usize>,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        let mut ctx = Ctx::new(mode);
        let mut cur = x.clone();
        for s in &self.stages[range] {
            cur = s.infer(params, &cur, &mut ctx)?;
        }
        Ok(cur)
    }

    /// Decodes latents to positive depth in eval mode.
    pub fn decode<T: Scalar>(&self, params: &ParamStore<T>, latent: &Tensor<T>) -> Result<Tensor<T>> {
        let raw = self.decoder.infer(params, latent, &mut Ctx::eval())?;
        Ok(positive_depth(&raw))
    }

    fn check_input<T: Scalar>(&self, img: &Tensor<T>) -> Result<()> {
        let a = &self.arch;
        if img.channels() != 3 || img.height() != a.image_height || img.width() != a.image_width {
            return Err(Error::shape(format!(
                "network expects [n, 3, {}, {}] input, got {:?}",
                a.image_height,
                a.image_width,
                img.shape()
            )));
        }
        Ok(())
    }

    /// Full forward pass in a single mode, without retaining caches.
    pub fn forward<T: Scalar>(&self, params: &ParamStore<T>, img: &Tensor<T>, mode: Mode) -> Result<ForwardTrace<T>> {
        self.check_input(img)?;
        let n = self.n_stages();
        let boundary = self.encode(params, img, 0..n - 1, mode)?;
        let latent = self.encode(params, &boundary, n - 1..n, mode)?;
        let raw = self.decoder.infer(params, &latent, &mut Ctx::new(mode))?;
        Ok(ForwardTrace {
            boundary,
            latent,
            depth: positive_depth(&raw),
        })
    }
}

/// Eval-mode output of encoder stages `0..upto` for the images at `indices`,
/// computed in chunks to bound memory.
pub fn encode_images(
    params: &NetworkParams<f32>,
    images: &dyn ImageSource,
    indices: &[usize],
    upto: usize,
) -> Result<Tensor<f32>> {
    const CHUNK: usize = 16;
    let net = DepthNet::new(&params.arch)?;
    if upto > net.n_stages() {
        return Err(Error::config(format!("encoder has {} stages, asked for {upto}", net.n_stages())));
    }
    let mut parts = Vec::with_capacity(indices.len().div_ceil(CHUNK));
    for chunk in indices.chunks(CHUNK) {
        let imgs = chunk.iter().map(|&i| images.image(i)).collect::<Result<Vec<_>>>()?;
        let x = Image::batch(&imgs.iter().collect::<Vec<_>>())?;
        net.check_input(&x)?;
        parts.push(net.encode(&params.store, &x, 0..upto, Mode::Eval)?);
    }
    if parts.is_empty() {
        return Err(Error::config("encode_images: no indices given"));
    }
    Tensor::stack(&parts)
}

/// Builds a freshly initialized network.
pub fn init_network<T: Scalar>(seed: u64, arch: &ArchConfig, partition: PartitionSpec) -> Result<NetworkParams<T>> {
    let net = DepthNet::new(arch)?;
    partition.validate(arch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let first = partition.first_adaptable(arch);
    for i in 0..net.n_stages() {
        let tag = if i >= first { PartitionTag::Head } else { PartitionTag::Trunk };
        register(net.stage(i), &mut store, &mut rng, tag);
    }
    register(net.decoder(), &mut store, &mut rng, PartitionTag::Decoder);
    // Small output weights keep the initial prediction near exp(output_bias).
    for (name, a) in store.iter_mut() {
        if name == "dec.out.weight" {
            a.data.iter_mut().for_each(|w| *w *= lit(0.1));
        }
        if name == "dec.out.bias" {
            a.data.iter_mut().for_each(|b| *b = lit(arch.output_bias));
        }
    }
    Ok(NetworkParams {
        arch: arch.clone(),
        partition,
        store,
    })
}

/// Frozen and adaptable encoder arrays under a partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderPartition {
    pub frozen: BTreeSet<String>,
    pub adaptable: BTreeSet<String>,
}

/// Splits the encoder arrays by `spec`. Decoder arrays belong to neither set
/// and are always frozen during adaptation.
pub fn partition_params<T: Scalar>(params: &NetworkParams<T>, spec: PartitionSpec) -> Result<EncoderPartition> {
    spec.validate(&params.arch)?;
    let first = spec.first_adaptable(&params.arch);
    let mut frozen = BTreeSet::new();
    let mut adaptable = BTreeSet::new();
    for name in params.store.names() {
        if let Some(stage) = encoder_stage_of(name) {
            if stage >= first {
                adaptable.insert(name.clone());
            } else {
                frozen.insert(name.clone());
            }
        }
    }
    Ok(EncoderPartition { frozen, adaptable })
}

/// `clamp(exp(raw), MIN_DEPTH, MAX_DEPTH)`.
pub fn positive_depth<T: Scalar>(raw: &Tensor<T>) -> Tensor<T> {
    let (lo, hi) = (lit::<T>(MIN_DEPTH), lit::<T>(MAX_DEPTH));
    raw.map(|r| r.exp().max(lo).min(hi))
}

/// Gradient of [`positive_depth`] given its output.
pub fn positive_depth_backward<T: Scalar>(depth: &Tensor<T>, d_depth: &Tensor<T>) -> Result<Tensor<T>> {
    let (lo, hi) = (lit::<T>(MIN_DEPTH), lit::<T>(MAX_DEPTH));
    depth.zip_map(d_depth, |d, g| if d > lo && d < hi { g * d } else { T::zero() })
}

/// Loss value with its gradient with respect to the prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad<T> {
    pub value: T,
    pub grad: Vec<T>,
}

fn masked_residuals<T: Scalar>(pred: &[T], gt: &[T], mask: &[bool]) -> Result<usize> {
    if pred.len() != gt.len() || pred.len() != mask.len() {
        return Err(Error::shape(format!(
            "berhu: pred {} / gt {} / mask {} lengths differ",
            pred.len(),
            gt.len(),
            mask.len()
        )));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::Evaluation("berhu: empty mask".into()));
    }
    Ok(n)
}

/// BerHu with an externally fixed threshold `c`, averaged over masked pixels.
pub fn berhu_with_threshold<T: Scalar>(pred: &[T], gt: &[T], mask: &[bool], c: T) -> Result<LossGrad<T>> {
    let n = masked_residuals(pred, gt, mask)?;
    let inv_n = T::one() / lit(n as f64);
    let two = lit::<T>(2.0);
    let mut value = T::zero();
    let mut grad = vec![T::zero(); pred.len()];
    for i in 0..pred.len() {
        if !mask[i] {
            continue;
        }
        let r = pred[i] - gt[i];
        if r.abs() <= c {
            value += r.abs();
            grad[i] = r.signum() * inv_n;
            if r == T::zero() {
                grad[i] = T::zero();
            }
        } else {
            value += (r * r + c * c) / (two * c);
            grad[i] = r / c * inv_n;
        }
    }
    Ok(LossGrad {
        value: value * inv_n,
        grad,
    })
}

/// Reverse Huber loss over masked pixels: `|r|` for `|r| ≤ c`, otherwise
/// `(r² + c²) / 2c`, with `c = 0.2 · max |r|`. The gradient includes the
/// dependence of `c` on the largest residual.
pub fn berhu<T: Scalar>(pred: &[T], gt: &[T], mask: &[bool]) -> Result<LossGrad<T>> {
    masked_residuals(pred, gt, mask)?;
    let mut arg = usize::MAX;
    let mut max_abs = T::zero();
    for i in 0..pred.len() {
        let a = (pred[i] - gt[i]).abs();
        if mask[i] && (arg == usize::MAX || a > max_abs) {
            arg = i;
            max_abs = a;
        }
    }
    if max_abs == T::zero() {
        return Ok(LossGrad {
            value: T::zero(),
            grad: vec![T::zero(); pred.len()],
        });
    }
    let c = lit::<T>(0.2) * max_abs;
    let mut out = berhu_with_threshold(pred, gt, mask, c)?;
    let n = lit::<T>(mask.iter().filter(|&&m| m).count() as f64);
    let half = lit::<T>(0.5);
    let mut d_c = T::zero();
    for i in 0..pred.len() {
        let r = pred[i] - gt[i];
        if mask[i] && r.abs() > c {
            d_c += half - r * r / (lit::<T>(2.0) * c * c);
        }
    }
    let r_max = pred[arg] - gt[arg];
    out.grad[arg] += d_c / n * lit::<T>(0.2) * r_max.signum();
    Ok(out)
}

/// [`berhu`] on depth maps; the mask is the caller's validity mask.
pub fn berhu_loss<T: Scalar>(pred: &DepthMap<T>, gt: &DepthMap<T>, mask: &[bool]) -> Result<T> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::shape("berhu_loss: prediction and ground truth differ in size"));
    }
    Ok(berhu(&pred.data, &gt.data, mask)?.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::max_rel_err;
    use proptest::prelude::*;
    use rand::Rng;

    fn small_arch() -> ArchConfig {
        ArchConfig {
            image_height: 32,
            image_width: 48,
            stem_channels: 2,
            stage_channels: vec![3, 4, 5, 6],
            decoder_channels: vec![4, 3, 2],
            output_bias: 0.0,
        }
    }

    fn image(arch: &ArchConfig, n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = n * 3 * arch.image_height * arch.image_width;
        Tensor::from_vec(
            [n, 3, arch.image_height, arch.image_width],
            (0..len).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn same_seed_same_params() {
        let a = init_network::<f32>(3, &ArchConfig::default(), PartitionSpec::default()).unwrap();
        let b = init_network::<f32>(3, &ArchConfig::default(), PartitionSpec::default()).unwrap();
        assert!(a.store.bit_equal(&b.store));
        let c = init_network::<f32>(4, &ArchConfig::default(), PartitionSpec::default()).unwrap();
        assert!(!c.store.bit_equal(&a.store));
    }

    #[test]
    fn default_arch_geometry() {
        let arch = ArchConfig::default();
        assert_eq!(arch.latent_shape(), (8, 10, 128));
        assert_eq!(arch.boundary_shape(), (16, 20, 64));
        assert_eq!(arch.output_size(), (64, 80));
        let params = init_network::<f32>(0, &arch, PartitionSpec::default()).unwrap();
        let net = DepthNet::new(&arch).unwrap();
        let img = Tensor::full([1, 3, 128, 160], 0.5f32);
        let trace = net.forward(&params.store, &img, Mode::Eval).unwrap();
        assert_eq!(trace.boundary.shape(), [1, 64, 16, 20]);
        assert_eq!(trace.latent.shape(), [1, 128, 8, 10]);
        assert_eq!(trace.depth.shape(), [1, 1, 64, 80]);
        assert!(trace.depth.data().iter().all(|&d| d > 0.0));
    }

    #[test]
    fn indivisible_size_is_a_config_error() {
        let arch = ArchConfig {
            image_height: 120,
            ..ArchConfig::default()
        };
        assert!(matches!(
            init_network::<f32>(0, &arch, PartitionSpec::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn eval_forward_is_pure() {
        let arch = small_arch();
        let params = init_network::<f64>(1, &arch, PartitionSpec::default()).unwrap();
        let net = DepthNet::new(&arch).unwrap();
        let img = image(&arch, 2, 9);
        let a = net.forward(&params.store, &img, Mode::Eval).unwrap();
        let b = net.forward(&params.store, &img, Mode::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_input_size_is_a_shape_error() {
        let arch = small_arch();
        let params = init_network::<f64>(1, &arch, PartitionSpec::default()).unwrap();
        let net = DepthNet::new(&arch).unwrap();
        let img = Tensor::<f64>::zeros([1, 3, 16, 48]);
        assert!(matches!(net.forward(&params.store, &img, Mode::Eval), Err(Error::Shape(_))));
    }

    #[test]
    fn decoder_perturbation_leaves_encoder_outputs() {
        let arch = small_arch();
        let params = init_network::<f64>(1, &arch, PartitionSpec::default()).unwrap();
        let net = DepthNet::new(&arch).unwrap();
        let img = image(&arch, 1, 2);
        let before = net.forward(&params.store, &img, Mode::Eval).unwrap();
        let mut tweaked = params.clone();
        tweaked.store.get_mut("dec1.conv.weight").unwrap().data[0] += 0.5;
        let after = net.forward(&tweaked.store, &img, Mode::Eval).unwrap();
        assert_eq!(before.boundary, after.boundary);
        assert_eq!(before.latent, after.latent);
        assert_ne!(before.depth, after.depth);
    }

    #[test]
    fn adapt_depth_one_tags_only_the_final_stage() {
        let params = init_network::<f32>(0, &ArchConfig::default(), PartitionSpec { adapt_depth: 1 }).unwrap();
        for (name, a) in params.store.iter() {
            let expect = if name.starts_with("enc4") {
                PartitionTag::Head
            } else if name.starts_with("enc") {
                PartitionTag::Trunk
            } else {
                PartitionTag::Decoder
            };
            assert_eq!(a.tag, expect, "{name}");
        }
    }

    #[test]
    fn partition_law() {
        let params = init_network::<f32>(0, &ArchConfig::default(), PartitionSpec::default()).unwrap();
        let encoder: BTreeSet<String> = params.store.names().filter(|n| n.starts_with("enc")).cloned().collect();
        for depth in 0..=4 {
            let p = partition_params(&params, PartitionSpec { adapt_depth: depth }).unwrap();
            assert!(p.frozen.is_disjoint(&p.adaptable));
            let union: BTreeSet<String> = p.frozen.union(&p.adaptable).cloned().collect();
            assert_eq!(union, encoder);
            if depth == 0 {
                assert!(p.adaptable.is_empty());
            }
            if depth == 1 {
                assert!(p.adaptable.iter().all(|n| n.starts_with("enc4.")));
                assert!(!p.adaptable.is_empty());
            }
        }
        assert!(partition_params(&params, PartitionSpec { adapt_depth: 5 }).is_err());
    }

    #[test]
    fn retag_follows_partition() {
        let mut params = init_network::<f32>(0, &ArchConfig::default(), PartitionSpec::default()).unwrap();
        params.retag(PartitionSpec { adapt_depth: 3 }).unwrap();
        let heads = params.store.names_with_tag(PartitionTag::Head);
        let p = partition_params(&params, PartitionSpec { adapt_depth: 3 }).unwrap();
        assert_eq!(heads, p.adaptable);
    }

    #[test]
    fn berhu_zero_on_exact_prediction() {
        let gt = [1.0, 2.0, 3.0];
        assert_eq!(berhu(&gt, &gt, &[true; 3]).unwrap().value, 0.0);
    }

    #[test]
    fn berhu_hand_example() {
        // residuals {1.0, 0.1}: c = 0.2, terms {2.6, 0.1}
        let v: f64 = berhu(&[2.0, 1.1], &[1.0, 1.0], &[true, true]).unwrap().value;
        assert!((v - 1.35).abs() < 1e-12, "{v}");
    }

    #[test]
    fn berhu_is_l1_below_threshold() {
        let pred = [0.3f64, -0.2, 0.05, 1.0];
        let gt = [0.0; 4];
        let mask = [true, true, true, false];
        let v = berhu_with_threshold(&pred, &gt, &mask, 10.0).unwrap().value;
        assert!((v - (0.3 + 0.2 + 0.05) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn berhu_empty_mask_is_an_evaluation_error() {
        assert!(matches!(berhu(&[1.0], &[1.0], &[false]), Err(Error::Evaluation(_))));
    }

    #[test]
    fn berhu_continuous_at_threshold() {
        let c = 0.7f64;
        let eps = 1e-6;
        let below = berhu_with_threshold(&[c - eps], &[0.0], &[true], c).unwrap().value;
        let above = berhu_with_threshold(&[c + eps], &[0.0], &[true], c).unwrap().value;
        assert!((below - above).abs() < 1e-5);
    }

    #[test]
    fn berhu_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let gt: Vec<f64> = (0..16).map(|_| rng.random_range(0.5..5.0)).collect();
            let pred: Vec<f64> = gt.iter().map(|g| g + rng.random_range(-2.0..2.0)).collect();
            let mask: Vec<bool> = (0..16).map(|i| i % 5 != 0).collect();
            let g = berhu(&pred, &gt, &mask).unwrap().grad;
            let err = max_rel_err(|p| berhu(p, &gt, &mask).unwrap().value, &pred, &g, 0..16, 1e-7);
            assert!(err < 1e-4, "{err}");
        }
    }

    proptest! {
        #[test]
        fn latent_is_one_sixteenth_of_input(hm in 1usize..4, wm in 1usize..4) {
            let arch = ArchConfig { image_height: 16 * hm, image_width: 16 * wm, ..small_arch() };
            let params = init_network::<f32>(0, &arch, PartitionSpec::default()).unwrap();
            let net = DepthNet::new(&arch).unwrap();
            let img = Tensor::full([1, 3, arch.image_height, arch.image_width], 0.3f32);
            let t = net.forward(&params.store, &img, Mode::Eval).unwrap();
            prop_assert_eq!(t.latent.shape(), [1, 6, hm, wm]);
            prop_assert_eq!(t.depth.shape(), [1, 1, 8 * hm, 8 * wm]);
        }

        #[test]
        fn berhu_is_nonnegative(res in proptest::collection::vec(-5.0f64..5.0, 1..30)) {
            let gt = vec![0.0; res.len()];
            let mask = vec![true; res.len()];
            prop_assert!(berhu(&res, &gt, &mask).unwrap().value >= 0.0);
        }
    }
}
