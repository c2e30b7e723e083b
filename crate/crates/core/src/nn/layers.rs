use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

use super::params::{Grads, ParamStore};

const NORM_EPS: f64 = 1e-5;
const NORM_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running-statistic updates are reported.
    Train,
    /// Frozen running statistics; a pure function of params and input.
    Eval,
}

/// Running-statistic update produced by a train-mode batch-norm layer.
#[derive(Clone, Debug)]
pub struct NormUpdate<T> {
    pub mean_name: String,
    pub var_name: String,
    pub batch_mean: Vec<T>,
    /// Unbiased batch variance.
    pub batch_var: Vec<T>,
}

impl<T: Scalar> NormUpdate<T> {
    pub fn apply(&self, params: &mut ParamStore<T>) -> Result<()> {
        let m = lit::<T>(NORM_MOMENTUM);
        let keep = T::one() - m;
        for (name, batch) in [(&self.mean_name, &self.batch_mean), (&self.var_name, &self.batch_var)] {
            let arr = params.get_mut(name)?;
            for (r, &b) in arr.data.iter_mut().zip(batch) {
                *r = keep * *r + m * b;
            }
        }
        Ok(())
    }
}

/// Per-call forward state: the mode and any statistic updates it produced.
#[derive(Debug)]
pub struct Ctx<T> {
    pub mode: Mode,
    pub updates: Vec<NormUpdate<T>>,
}

impl<T: Scalar> Ctx<T> {
    pub fn new(mode: Mode) -> Self {
        Ctx {
            mode,
            updates: Vec::new(),
        }
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval)
    }

    pub fn train() -> Self {
        Self::new(Mode::Train)
    }

    /// Applies the collected running-statistic updates.
    pub fn commit(self, params: &mut ParamStore<T>) -> Result<()> {
        for u in &self.updates {
            u.apply(params)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Conv2d {
            name: name.into(),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    /// 3×3, padding 1.
    pub fn k3(name: impl Into<String>, in_ch: usize, out_ch: usize, stride: usize) -> Self {
        Self::new(name, in_ch, out_ch, 3, stride, 1)
    }

    /// 1×1, no padding.
    pub fn k1(name: impl Into<String>, in_ch: usize, out_ch: usize, stride: usize) -> Self {
        Self::new(name, in_ch, out_ch, 1, stride, 0)
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn out_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (hp, wp) = (h + 2 * self.pad, w + 2 * self.pad);
        if hp < self.kernel || wp < self.kernel {
            return Err(Error::shape(format!(
                "{}: input {h}×{w} smaller than kernel {}",
                self.name, self.kernel
            )));
        }
        Ok(((hp - self.kernel) / self.stride + 1, (wp - self.kernel) / self.stride + 1))
    }

    fn pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `[lo, hi)` whose input column `ox * stride + kx - pad`
    /// falls inside `[0, w)`.
    fn valid_cols(&self, kx: usize, w: usize, wo: usize) -> (usize, usize) {
        let (s, pad) = (self.stride, self.pad);
        let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(s) };
        let hi = if w + pad > kx { ((w + pad - kx - 1) / s + 1).min(wo) } else { 0 };
        (lo.min(hi), hi)
    }

    fn im2col<T: Scalar>(&self, x: &[T], h: usize, w: usize, ho: usize, wo: usize, cols: &mut [T]) {
        let (k, s) = (self.kernel, self.stride);
        let p = ho * wo;
        for c in 0..self.in_ch {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((c * k + ky) * k + kx) * p..((c * k + ky) * k + kx + 1) * p];
                    let (lo, hi) = self.valid_cols(kx, w, wo);
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - self.pad as isize;
                        let out = &mut row[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            out.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        out[..lo].fill(T::zero());
                        out[hi..].fill(T::zero());
                        if lo < hi {
                            let ix0 = lo * s + kx - self.pad;
                            if s == 1 {
                                out[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                            } else {
                                for (v, &x) in out[lo..hi].iter_mut().zip(src[ix0..].iter().step_by(s)) {
                                    *v = x;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], h: usize, w: usize, ho: usize, wo: usize, dx: &mut [T]) {
        let (k, s) = (self.kernel, self.stride);
        let p = ho * wo;
        for c in 0..self.in_ch {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((c * k + ky) * k + kx) * p..((c * k + ky) * k + kx + 1) * p];
                    let (lo, hi) = self.valid_cols(kx, w, wo);
                    if lo >= hi {
                        continue;
                    }
                    let ix0 = lo * s + kx - self.pad;
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let g = &row[oy * wo + lo..oy * wo + hi];
                        if s == 1 {
                            for (d, &v) in dst[ix0..ix0 + hi - lo].iter_mut().zip(g) {
                                *d += v;
                            }
                        } else {
                            for (d, &v) in dst[ix0..].iter_mut().step_by(s).zip(g) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward<T: Scalar>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, c, h, w] = x.shape();
        if c != self.in_ch {
            return Err(Error::shape(format!(
                "{}: expected {} input channels, got {c}",
                self.name, self.in_ch
            )));
        }
        let (ho, wo) = self.out_size(h, w)?;
        let weight = params.data(&self.weight_name())?;
        let bias = params.data(&self.bias_name())?;
        let kk = self.in_ch * self.kernel * self.kernel;
        let p = ho * wo;
        let mut y = Tensor::zeros([n, self.out_ch, ho, wo]);
        let mut cols = if self.pointwise() { Vec::new() } else { vec![T::zero(); kk * p] };
        for i in 0..n {
            let out = y.item_mut(i);
            for (o, &b) in bias.iter().enumerate() {
                out[o * p..(o + 1) * p].iter_mut().for_each(|v| *v = b);
            }
            let src: &[T] = if self.pointwise() {
                x.item(i)
            } else {
                self.im2col(x.item(i), h, w, ho, wo, &mut cols);
                &cols
            };
            T::gemm(self.out_ch, kk, p, T::one(), weight, false, src, false, T::one(), out);
        }
        Ok(y)
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grads: &mut Grads<T>,
        need_dx: bool,
    ) -> Result<Option<Tensor<T>>> {
        let [n, _, h, w] = x.shape();
        let (ho, wo) = self.out_size(h, w)?;
        dy.ensure_shape([n, self.out_ch, ho, wo], &self.name)?;
        let weight = params.data(&self.weight_name())?;
        let kk = self.in_ch * self.kernel * self.kernel;
        let p = ho * wo;
        let (wname, bname) = (self.weight_name(), self.bias_name());
        let want_w = grads.wants(&wname);
        let want_b = grads.wants(&bname);
        let mut cols = if self.pointwise() { Vec::new() } else { vec![T::zero(); kk * p] };
        let mut dcols = if need_dx && !self.pointwise() { vec![T::zero(); kk * p] } else { Vec::new() };
        let mut dx = if need_dx { Some(Tensor::zeros(x.shape())) } else { None };
        for i in 0..n {
            let g = dy.item(i);
            if want_w {
                let src: &[T] = if self.pointwise() {
                    x.item(i)
                } else {
                    self.im2col(x.item(i), h, w, ho, wo, &mut cols);
                    &cols
                };
                let dw = grads.slot(&wname, weight.len());
                T::gemm(self.out_ch, p, kk, T::one(), g, false, src, true, T::one(), dw);
            }
            if want_b {
                let db = grads.slot(&bname, self.out_ch);
                for (o, acc) in db.iter_mut().enumerate() {
                    *acc += g[o * p..(o + 1) * p].iter().fold(T::zero(), |s, &v| s + v);
                }
            }
            if let Some(dx) = dx.as_mut() {
                if self.pointwise() {
                    T::gemm(kk, self.out_ch, p, T::one(), weight, true, g, false, T::zero(), dx.item_mut(i));
                } else {
                    T::gemm(kk, self.out_ch, p, T::one(), weight, true, g, false, T::zero(), &mut dcols);
                    self.col2im(&dcols, h, w, ho, wo, dx.item_mut(i));
                }
            }
        }
        Ok(dx)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        BatchNorm2d {
            name: name.into(),
            channels,
        }
    }

    fn names(&self) -> [String; 4] {
        ["gamma", "beta", "running_mean", "running_var"].map(|s| format!("{}.{s}", self.name))
    }
}

/// Per-layer values retained for the backward pass.
#[derive(Clone, Debug)]
pub enum Cache<T> {
    Conv { input: Tensor<T> },
    Norm { xhat: Tensor<T>, inv_std: Vec<T>, batch_stats: bool },
    Relu { output: Tensor<T> },
    LeakyRelu { input: Tensor<T> },
    Upsample,
    Residual {
        body: Vec<Cache<T>>,
        shortcut: Vec<Cache<T>>,
        output: Tensor<T>,
    },
}

#[derive(Clone, Debug)]
pub enum Layer {
    Conv(Conv2d),
    Norm(BatchNorm2d),
    Relu,
    LeakyRelu(f64),
    /// Nearest-neighbour 2× upsampling.
    Upsample2x,
    /// `act(body(x) + shortcut(x))`; an empty shortcut is the identity and
    /// `act` is ReLU when `relu_out` is set.
    Residual {
        body: Sequential,
        shortcut: Sequential,
        relu_out: bool,
    },
}

/// A chain of layers.
#[derive(Clone, Debug, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Sequential { layers }
    }

    pub fn push(&mut self, layer: Layer) {
        self.layers.push(layer);
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn forward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        x: &Tensor<T>,
        ctx: &mut Ctx<T>,
    ) -> Result<(Tensor<T>, Vec<Cache<T>>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let (y, cache) = layer.forward(params, cur, ctx)?;
            caches.push(cache);
            cur = y;
        }
        Ok((cur, caches))
    }

    /// Forward pass without retaining caches.
    pub fn infer<T: Scalar>(&self, params: &ParamStore<T>, x: &Tensor<T>, ctx: &mut Ctx<T>) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(params, cur, ctx)?.0;
        }
        Ok(cur)
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        caches: &[Cache<T>],
        dy: Tensor<T>,
        grads: &mut Grads<T>,
        need_dx: bool,
    ) -> Result<Option<Tensor<T>>> {
        if caches.len() != self.layers.len() {
            return Err(Error::shape("cache/layer count mismatch in backward"));
        }
        let mut cur = dy;
        for (i, (layer, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            let need = need_dx || i > 0;
            match layer.backward(params, cache, cur, grads, need)? {
                Some(d) => cur = d,
                None => return Ok(None),
            }
        }
        Ok(Some(cur))
    }
}

impl Layer {
    fn forward<T: Scalar>(&self, params: &ParamStore<T>, x: Tensor<T>, ctx: &mut Ctx<T>) -> Result<(Tensor<T>, Cache<T>)> {
        match self {
            Layer::Conv(conv) => {
                let y = conv.forward(params, &x)?;
                Ok((y, Cache::Conv { input: x }))
            }
            Layer::Norm(bn) => norm_forward(bn, params, x, ctx),
            Layer::Relu => {
                let y = x.map(|v| if v > T::zero() { v } else { T::zero() });
                Ok((y.clone(), Cache::Relu { output: y }))
            }
            Layer::LeakyRelu(slope) => {
                let s = lit::<T>(*slope);
                let y = x.map(|v| if v > T::zero() { v } else { v * s });
                Ok((y, Cache::LeakyRelu { input: x }))
            }
            Layer::Upsample2x => Ok((upsample2x(&x), Cache::Upsample)),
            Layer::Residual {
                body,
                shortcut,
                relu_out,
            } => {
                let (b, body_cache) = body.forward(params, &x, ctx)?;
                let (s, short_cache) = if shortcut.is_empty() {
                    (x, Vec::new())
                } else {
                    shortcut.forward(params, &x, ctx)?
                };
                let mut y = b.add(&s)?;
                if *relu_out {
                    y.data_mut().iter_mut().for_each(|v| {
                        if *v < T::zero() {
                            *v = T::zero()
                        }
                    });
                }
                Ok((
                    y.clone(),
                    Cache::Residual {
                        body: body_cache,
                        shortcut: short_cache,
                        output: y,
                    },
                ))
            }
        }
    }

    fn backward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        cache: &Cache<T>,
        dy: Tensor<T>,
        grads: &mut Grads<T>,
        need_dx: bool,
    ) -> Result<Option<Tensor<T>>> {
        match (self, cache) {
            (Layer::Conv(conv), Cache::Conv { input }) => conv.backward(params, input, &dy, grads, need_dx),
            (Layer::Norm(bn), Cache::Norm { xhat, inv_std, batch_stats }) => {
                norm_backward(bn, params, xhat, inv_std, *batch_stats, dy, grads, need_dx)
            }
            (Layer::Relu, Cache::Relu { output }) => {
                let mut d = dy;
                for (g, &o) in d.data_mut().iter_mut().zip(output.data()) {
                    if o <= T::zero() {
                        *g = T::zero();
                    }
                }
                Ok(Some(d))
            }
            (Layer::LeakyRelu(slope), Cache::LeakyRelu { input }) => {
                let s = lit::<T>(*slope);
                let mut d = dy;
                for (g, &x) in d.data_mut().iter_mut().zip(input.data()) {
                    if x <= T::zero() {
                        *g *= s;
                    }
                }
                Ok(Some(d))
            }
            (Layer::Upsample2x, Cache::Upsample) => Ok(Some(downsum2x(&dy))),
            (
                Layer::Residual {
                    body,
                    shortcut,
                    relu_out,
                },
                Cache::Residual {
                    body: body_cache,
                    shortcut: short_cache,
                    output,
                },
            ) => {
                let mut d = dy;
                if *relu_out {
                    for (g, &o) in d.data_mut().iter_mut().zip(output.data()) {
                        if o <= T::zero() {
                            *g = T::zero();
                        }
                    }
                }
                let db = body.backward(params, body_cache, d.clone(), grads, need_dx)?;
                let ds = if shortcut.is_empty() {
                    Some(d)
                } else {
                    shortcut.backward(params, short_cache, d, grads, need_dx)?
                };
                match (db, ds) {
                    (Some(mut a), Some(b)) => {
                        a.add_assign(&b)?;
                        Ok(Some(a))
                    }
                    _ => Ok(None),
                }
            }
            _ => Err(Error::shape("layer/cache kind mismatch in backward")),
        }
    }
}

fn norm_forward<T: Scalar>(
    bn: &BatchNorm2d,
    params: &ParamStore<T>,
    x: Tensor<T>,
    ctx: &mut Ctx<T>,
) -> Result<(Tensor<T>, Cache<T>)> {
    let [n, c, h, w] = x.shape();
    if c != bn.channels {
        return Err(Error::shape(format!(
            "{}: expected {} channels, got {c}",
            bn.name, bn.channels
        )));
    }
    let [gn, bname, mn, vn] = bn.names();
    let gamma = params.data(&gn)?;
    let beta = params.data(&bname)?;
    let hw = h * w;
    let count = n * hw;
    let eps = lit::<T>(NORM_EPS);
    let (mean, var, batch_stats) = match ctx.mode {
        Mode::Train => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut acc = T::zero();
                for i in 0..n {
                    acc += x.item(i)[ch * hw..(ch + 1) * hw].iter().fold(T::zero(), |s, &v| s + v);
                }
                let mu = acc / lit(count as f64);
                let mut sq = T::zero();
                for i in 0..n {
                    sq += x.item(i)[ch * hw..(ch + 1) * hw]
                        .iter()
                        .fold(T::zero(), |s, &v| s + (v - mu) * (v - mu));
                }
                mean[ch] = mu;
                var[ch] = sq / lit(count as f64);
            }
            let unbiased = if count > 1 {
                var.iter().map(|&v| v * lit(count as f64) / lit((count - 1) as f64)).collect()
            } else {
                var.clone()
            };
            ctx.updates.push(NormUpdate {
                mean_name: mn,
                var_name: vn,
                batch_mean: mean.clone(),
                batch_var: unbiased,
            });
            (mean, var, true)
        }
        Mode::Eval => (params.data(&mn)?.to_vec(), params.data(&vn)?.to_vec(), false),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = x;
    let mut y = Tensor::zeros(xhat.shape());
    for i in 0..n {
        let xi = xhat.item_mut(i);
        let yi = y.item_mut(i);
        for ch in 0..c {
            let (mu, is, g, b) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for (xv, yv) in xi[ch * hw..(ch + 1) * hw].iter_mut().zip(&mut yi[ch * hw..(ch + 1) * hw]) {
                *xv = (*xv - mu) * is;
                *yv = g * *xv + b;
            }
        }
    }
    Ok((
        y,
        Cache::Norm {
            xhat,
            inv_std,
            batch_stats,
        },
    ))
}

#[allow(clippy::too_many_arguments)]
fn norm_backward<T: Scalar>(
    bn: &BatchNorm2d,
    params: &ParamStore<T>,
    xhat: &Tensor<T>,
    inv_std: &[T],
    batch_stats: bool,
    dy: Tensor<T>,
    grads: &mut Grads<T>,
    need_dx: bool,
) -> Result<Option<Tensor<T>>> {
    let [n, c, h, w] = xhat.shape();
    let hw = h * w;
    let count = lit::<T>((n * hw) as f64);
    let [gn, bname, _, _] = bn.names();
    let gamma = params.data(&gn)?;
    let mut sum_dy = vec![T::zero(); c];
    let mut sum_dy_xhat = vec![T::zero(); c];
    for i in 0..n {
        let (g, xh) = (dy.item(i), xhat.item(i));
        for ch in 0..c {
            for (&a, &b) in g[ch * hw..(ch + 1) * hw].iter().zip(&xh[ch * hw..(ch + 1) * hw]) {
                sum_dy[ch] += a;
                sum_dy_xhat[ch] += a * b;
            }
        }
    }
    if grads.wants(&gn) {
        for (acc, &v) in grads.slot(&gn, c).iter_mut().zip(&sum_dy_xhat) {
            *acc += v;
        }
    }
    if grads.wants(&bname) {
        for (acc, &v) in grads.slot(&bname, c).iter_mut().zip(&sum_dy) {
            *acc += v;
        }
    }
    if !need_dx {
        return Ok(None);
    }
    let mut dx = dy;
    for i in 0..n {
        let xh = xhat.item(i);
        let d = dx.item_mut(i);
        for ch in 0..c {
            let scale = gamma[ch] * inv_std[ch];
            let seg = &mut d[ch * hw..(ch + 1) * hw];
            if batch_stats {
                let (m1, m2) = (sum_dy[ch] / count, sum_dy_xhat[ch] / count);
                for (g, &x) in seg.iter_mut().zip(&xh[ch * hw..(ch + 1) * hw]) {
                    *g = scale * (*g - m1 - x * m2);
                }
            } else {
                seg.iter_mut().for_each(|g| *g *= scale);
            }
        }
    }
    Ok(Some(dx))
}

pub fn upsample2x<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let mut y = Tensor::zeros([n, c, 2 * h, 2 * w]);
    let src = x.data();
    let dst = y.data_mut();
    for plane in 0..n * c {
        for yy in 0..2 * h {
            let row = &src[(plane * h + yy / 2) * w..(plane * h + yy / 2 + 1) * w];
            let out = &mut dst[(plane * 2 * h + yy) * 2 * w..(plane * 2 * h + yy + 1) * 2 * w];
            for (xx, v) in out.iter_mut().enumerate() {
                *v = row[xx / 2];
            }
        }
    }
    y
}

fn downsum2x<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, h2, w2] = dy.shape();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros([n, c, h, w]);
    let src = dy.data();
    let dst = dx.data_mut();
    for plane in 0..n * c {
        for yy in 0..h2 {
            let row = &src[(plane * h2 + yy) * w2..(plane * h2 + yy + 1) * w2];
            let out = &mut dst[(plane * h + yy / 2) * w..(plane * h + yy / 2 + 1) * w];
            for (xx, &g) in row.iter().enumerate() {
                out[xx / 2] += g;
            }
        }
    }
    dx
}
