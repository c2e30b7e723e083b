//! Depth evaluation: median scaling, depth caps, bilinear upsampling to the
//! ground-truth grid and the standard error / accuracy battery.

use serde::{Deserialize, Serialize};

use crate::congruency::{rtf_apply, ResidualBranchParams};
use crate::depthnet::{DepthNet, NetworkParams};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::scalar::Scalar;
use crate::scenegen::LabeledSource;
use crate::tensor::{DepthMap, Image, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleScope {
    /// One factor per image.
    #[default]
    PerImage,
    /// One factor over the whole dataset.
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub apply_median_scaling: bool,
    pub scale_scope: ScaleScope,
    /// Pixels with ground truth at or beyond the cap are dropped.
    pub cap_meters: Option<f64>,
    pub upsample_to_gt: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            apply_median_scaling: true,
            scale_scope: ScaleScope::PerImage,
            cap_meters: None,
            upsample_to_gt: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.cap_meters {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::config(format!("cap_meters must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rel: f64,
    pub sq_rel: f64,
    pub rms: f64,
    pub rms_log: f64,
    pub log10: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n_pixels: usize,
    pub scale_factors: Vec<f64>,
    pub cap: Option<f64>,
}

/// Additive per-pixel sums from which every metric is derived.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Sums {
    n: usize,
    rel: f64,
    sq_rel: f64,
    sq: f64,
    sq_log: f64,
    log10: f64,
    d: [usize; 3],
}

impl Sums {
    fn add_pixel(&mut self, p: f64, g: f64) {
        let diff = p - g;
        self.n += 1;
        self.rel += diff.abs() / g;
        self.sq_rel += diff * diff / g;
        self.sq += diff * diff;
        let dl = p.ln() - g.ln();
        self.sq_log += dl * dl;
        self.log10 += (p.log10() - g.log10()).abs();
        let ratio = (p / g).max(g / p);
        for (i, t) in [1.25f64, 1.25 * 1.25, 1.25 * 1.25 * 1.25].iter().enumerate() {
            if ratio < *t {
                self.d[i] += 1;
            }
        }
    }

    fn merge(&mut self, o: &Sums) {
        self.n += o.n;
        self.rel += o.rel;
        self.sq_rel += o.sq_rel;
        self.sq += o.sq;
        self.sq_log += o.sq_log;
        self.log10 += o.log10;
        for i in 0..3 {
            self.d[i] += o.d[i];
        }
    }

    fn report(&self, scale_factors: Vec<f64>, cap: Option<f64>) -> MetricsReport {
        let n = self.n as f64;
        MetricsReport {
            rel: self.rel / n,
            sq_rel: self.sq_rel / n,
            rms: (self.sq / n).sqrt(),
            rms_log: (self.sq_log / n).sqrt(),
            log10: self.log10 / n,
            delta1: self.d[0] as f64 / n,
            delta2: self.d[1] as f64 / n,
            delta3: self.d[2] as f64 / n,
            n_pixels: self.n,
            scale_factors,
            cap,
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn check_same_grid<T>(a: &DepthMap<T>, b: &DepthMap<T>, mask: &[bool]) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) || mask.len() != a.data.len() {
        return Err(Error::shape(format!(
            "prediction {}x{}, ground truth {}x{}, mask {}",
            a.height,
            a.width,
            b.height,
            b.width,
            mask.len()
        )));
    }
    Ok(())
}

fn scale_factor(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::Evaluation("median scaling over an empty pixel set".into()));
    }
    let mp = median(pred.to_vec());
    if !(mp > 0.0 && mp.is_finite()) {
        return Err(Error::Evaluation(format!("prediction median {mp} is not positive")));
    }
    Ok(median(gt.to_vec()) / mp)
}

/// Scales `pred` by `s = median(gt)/median(pred)` over masked pixels.
pub fn median_scale<T: Scalar>(pred: &DepthMap<T>, gt: &DepthMap<T>, mask: &[bool]) -> Result<(DepthMap<T>, T)> {
    check_same_grid(pred, gt, mask)?;
    let (p, g): (Vec<f64>, Vec<f64>) = (0..mask.len())
        .filter(|&i| mask[i])
        .map(|i| (pred.data[i].to_f64().unwrap_or(f64::NAN), gt.data[i].to_f64().unwrap_or(f64::NAN)))
        .unzip();
    let s = scale_factor(&p, &g)?;
    let st = T::from_f64(s).ok_or_else(|| Error::Numeric("scale factor not representable".into()))?;
    let mut out = pred.clone();
    out.data.iter_mut().for_each(|v| *v *= st);
    Ok((out, st))
}

/// Bilinear resampling with half-pixel centres and edge clamping. The mask is
/// carried over by nearest neighbour.
pub fn bilinear_upsample<T: Scalar>(map: &DepthMap<T>, height: usize, width: usize) -> DepthMap<T> {
    let (h0, w0) = (map.height, map.width);
    let coord = |dst: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        let s = ((dst as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut data = Vec::with_capacity(height * width);
    let mut mask = Vec::with_capacity(height * width);
    for y in 0..height {
        let (y0, y1, fy) = coord(y, height, h0);
        for x in 0..width {
            let (x0, x1, fx) = coord(x, width, w0);
            let at = |yy: usize, xx: usize| map.data[yy * w0 + xx].to_f64().unwrap_or(f64::NAN);
            let top = at(y0, x0) + (at(y0, x1) - at(y0, x0)) * fx;
            let bot = at(y1, x0) + (at(y1, x1) - at(y1, x0)) * fx;
            let v = if fx == 0.0 && fy == 0.0 { at(y0, x0) } else { top + (bot - top) * fy };
            data.push(T::from_f64(v).unwrap_or(T::nan()));
            let ny = (((y as f64 + 0.5) * h0 as f64 / height as f64) as usize).min(h0 - 1);
            let nx = (((x as f64 + 0.5) * w0 as f64 / width as f64) as usize).min(w0 - 1);
            mask.push(map.mask[ny * w0 + nx]);
        }
    }
    DepthMap {
        height,
        width,
        data,
        mask,
    }
}

/// Evaluated pixels as f64 pairs, after resampling and cap masking.
fn evaluated_pixels<T: Scalar>(
    pred: &DepthMap<T>,
    gt: &DepthMap<T>,
    mask: &[bool],
    cfg: &EvalConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let resampled;
    let pred = if (pred.height, pred.width) != (gt.height, gt.width) && cfg.upsample_to_gt {
        resampled = bilinear_upsample(pred, gt.height, gt.width);
        &resampled
    } else {
        pred
    };
    check_same_grid(pred, gt, mask)?;
    let mut p = Vec::new();
    let mut g = Vec::new();
    for i in 0..mask.len() {
        let gv = gt.data[i].to_f64().unwrap_or(f64::NAN);
        if !mask[i] || cfg.cap_meters.is_some_and(|c| gv >= c) {
            continue;
        }
        let pv = pred.data[i].to_f64().unwrap_or(f64::NAN);
        if !(gv > 0.0 && pv > 0.0 && gv.is_finite() && pv.is_finite()) {
            return Err(Error::Evaluation(format!(
                "non-positive depth at pixel {i} (pred {pv}, gt {gv})"
            )));
        }
        p.push(pv);
        g.push(gv);
    }
    if p.is_empty() {
        return Err(Error::Evaluation("no valid pixels to evaluate".into()));
    }
    Ok((p, g))
}

fn sums_with_scale(p: &[f64], g: &[f64], s: f64) -> Sums {
    let mut sums = Sums::default();
    for (&pv, &gv) in p.iter().zip(g) {
        sums.add_pixel(s * pv, gv);
    }
    sums
}

/// The metric battery over masked, capped pixels, after optional
/// resampling of `pred` to the ground-truth grid and median scaling.
pub fn compute_metrics<T: Scalar>(
    pred: &DepthMap<T>,
    gt: &DepthMap<T>,
    mask: &[bool],
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    cfg.validate()?;
    let (p, g) = evaluated_pixels(pred, gt, mask, cfg)?;
    let s = if cfg.apply_median_scaling { scale_factor(&p, &g)? } else { 1.0 };
    Ok(sums_with_scale(&p, &g, s).report(vec![s], cfg.cap_meters))
}

/// Network plus the optional residual branch that produces adapted latents.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthModel {
    pub net: NetworkParams<f32>,
    pub residual: Option<ResidualBranchParams<f32>>,
}

impl DepthModel {
    pub fn new(net: NetworkParams<f32>) -> Self {
        DepthModel { net, residual: None }
    }

    /// Eval-mode depth for a batch of images.
    pub fn predict(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let dn = DepthNet::new(&self.net.arch)?;
        let trace = dn.forward(&self.net.store, x, Mode::Eval)?;
        match &self.residual {
            None => Ok(trace.depth),
            Some(branch) => {
                let latent = rtf_apply(branch, &trace.boundary, &trace.latent)?.latent_tgt;
                dn.decode(&self.net.store, &latent)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub aggregate: MetricsReport,
    pub per_image: Vec<MetricsReport>,
}

/// Evaluates `model` on every image of a labeled split. Per-image results are
/// aggregated with pixel-count weights.
pub fn evaluate_dataset(model: &DepthModel, data: &dyn LabeledSource, cfg: &EvalConfig) -> Result<DatasetReport> {
    cfg.validate()?;
    const CHUNK: usize = 16;
    let n = data.len();
    if n == 0 {
        return Err(Error::Evaluation("evaluation split is empty".into()));
    }
    let mut pixels = Vec::with_capacity(n);
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(CHUNK) {
        let imgs = chunk.iter().map(|&i| data.image(i)).collect::<Result<Vec<_>>>()?;
        let depth = model.predict(&Image::batch(&imgs.iter().collect::<Vec<_>>())?)?;
        for (k, &i) in chunk.iter().enumerate() {
            let pred = DepthMap::from_tensor(&depth, k)?;
            let gt = data.depth(i)?;
            let pair = evaluated_pixels(&pred, &gt, &gt.mask, cfg)
                .map_err(|e| Error::Evaluation(format!("image {i}: {e}")))?;
            pixels.push(pair);
        }
    }
    let global = match (cfg.apply_median_scaling, cfg.scale_scope) {
        (true, ScaleScope::Global) => {
            let all_p: Vec<f64> = pixels.iter().flat_map(|(p, _)| p.iter().copied()).collect();
            let all_g: Vec<f64> = pixels.iter().flat_map(|(_, g)| g.iter().copied()).collect();
            Some(scale_factor(&all_p, &all_g)?)
        }
        _ => None,
    };
    let mut total = Sums::default();
    let mut factors = Vec::with_capacity(n);
    let mut per_image = Vec::with_capacity(n);
    for (i, (p, g)) in pixels.iter().enumerate() {
        let s = match (cfg.apply_median_scaling, global) {
            (false, _) => 1.0,
            (true, Some(s)) => s,
            (true, None) => scale_factor(p, g).map_err(|e| Error::Evaluation(format!("image {i}: {e}")))?,
        };
        let sums = sums_with_scale(p, g, s);
        total.merge(&sums);
        factors.push(s);
        per_image.push(sums.report(vec![s], cfg.cap_meters));
    }
    Ok(DatasetReport {
        aggregate: total.report(factors, cfg.cap_meters),
        per_image,
    })
}

impl MetricsReport {
    /// Aligned plain-text table with one header and one value row.
    pub fn to_table(&self) -> String {
        format_table(&[("", self)])
    }
}

/// Aligned rows of named reports, columns ordered rel, rms, log10, rms_log,
/// δ1, δ2, δ3, sq_rel, pixel count.
pub fn format_table(rows: &[(&str, &MetricsReport)]) -> String {
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(5);
    let mut out = format!(
        "{:<label_w$}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}  {:>9}\n",
        "run", "rel", "rms", "log10", "rms_log", "d1", "d2", "d3", "sq_rel", "pixels"
    );
    for (label, r) in rows {
        out.push_str(&format!(
            "{:<label_w$}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}  {:>9}\n",
            label, r.rel, r.rms, r.log10, r.rms_log, r.delta1, r.delta2, r.delta3, r.sq_rel, r.n_pixels
        ));
    }
    out
}
