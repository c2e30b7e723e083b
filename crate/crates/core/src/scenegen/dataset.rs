use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, ImageFormat, Luma, Rgb};
use serde::{Deserialize, Serialize};

use super::{apply_domain_shift, generate_scene, mix_seed, SceneSpec, ShiftConfig};
use crate::error::{Error, Result};
use crate::tensor::{DepthMap, Image};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    /// Paths are relative to the manifest directory.
    pub rgb: String,
    pub depth: Option<String>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub split: String,
    pub domain: Domain,
    pub image_size: (usize, usize),
    pub scene: SceneSpec,
    pub shift: Option<ShiftConfig>,
    pub entries: Vec<Entry>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    /// Reads `manifest.json` from a split directory (or the file itself).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = if path.is_dir() {
            path.join("manifest.json")
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&file).map_err(|e| Error::dataset(&file, e.to_string()))?;
        let mut m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::dataset(&file, format!("malformed manifest: {e}")))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::dataset(
                &file,
                format!("manifest version {} unsupported (expected {MANIFEST_VERSION})", m.version),
            ));
        }
        m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn has_depth(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| e.depth.is_some())
    }

    fn entry(&self, idx: usize) -> Result<&Entry> {
        self.entries.get(idx).ok_or(Error::Bounds {
            idx,
            len: self.entries.len(),
        })
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let file = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&file, text).map_err(|e| Error::dataset(&file, e.to_string()))
    }
}

/// 16-bit millimeter encoding of a depth value.
pub fn encode_depth(meters: f32) -> u16 {
    (meters as f64 * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16
}

pub fn decode_depth(mm: u16) -> f32 {
    (mm as f64 / 1000.0) as f32
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_rgb(path: &Path, img: &Image<f32>) -> Result<()> {
    let (h, w) = (img.height, img.width);
    let mut buf = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            buf.push(quantize(img.data[c * h * w + i]));
        }
    }
    let out: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_raw(w as u32, h as u32, buf).expect("buffer sized");
    out.save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::dataset(path, e.to_string()))
}

fn write_depth(path: &Path, depth: &DepthMap<f32>) -> Result<()> {
    let buf: Vec<u16> = depth.data.iter().map(|&d| encode_depth(d)).collect();
    let out: ImageBuffer<Luma<u16>, _> =
        ImageBuffer::from_raw(depth.width as u32, depth.height as u32, buf).expect("buffer sized");
    out.save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::dataset(path, e.to_string()))
}

fn open_png(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::dataset(path, e.to_string()))
}

fn read_rgb_bytes(path: &Path, size: (usize, usize)) -> Result<Vec<u8>> {
    let img = open_png(path)?;
    let rgb = match img {
        image::DynamicImage::ImageRgb8(b) => b,
        other => return Err(Error::dataset(path, format!("expected 8-bit RGB, found {:?}", other.color()))),
    };
    if (rgb.height() as usize, rgb.width() as usize) != size {
        return Err(Error::dataset(
            path,
            format!("decoded {}x{}, manifest declares {}x{}", rgb.height(), rgb.width(), size.0, size.1),
        ));
    }
    Ok(rgb.into_raw())
}

fn read_depth_mm(path: &Path, size: (usize, usize)) -> Result<Vec<u16>> {
    let img = open_png(path)?;
    let gray = match img {
        image::DynamicImage::ImageLuma16(b) => b,
        other => return Err(Error::dataset(path, format!("expected 16-bit gray, found {:?}", other.color()))),
    };
    if (gray.height() as usize, gray.width() as usize) != size {
        return Err(Error::dataset(
            path,
            format!("decoded {}x{}, manifest declares {}x{}", gray.height(), gray.width(), size.0, size.1),
        ));
    }
    Ok(gray.into_raw())
}

fn rgb_from_bytes(bytes: &[u8], size: (usize, usize)) -> Image<f32> {
    let (h, w) = size;
    let mut data = vec![0.0f32; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            data[c * h * w + i] = bytes[3 * i + c] as f32 / 255.0;
        }
    }
    Image {
        height: h,
        width: w,
        data,
    }
}

fn depth_from_mm(mm: &[u16], size: (usize, usize)) -> DepthMap<f32> {
    DepthMap {
        height: size.0,
        width: size.1,
        data: mm.iter().map(|&v| decode_depth(v)).collect(),
        mask: mm.iter().map(|&v| v > 0).collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image<f32>,
    pub depth: Option<DepthMap<f32>>,
    pub domain: Domain,
}

/// Decodes one entry from disk. Zero-valued depth pixels are marked invalid.
pub fn load_sample(manifest: &DatasetManifest, idx: usize) -> Result<Sample> {
    let entry = manifest.entry(idx)?;
    let bytes = read_rgb_bytes(&manifest.root.join(&entry.rgb), manifest.image_size)?;
    let depth = match &entry.depth {
        Some(p) => Some(depth_from_mm(
            &read_depth_mm(&manifest.root.join(p), manifest.image_size)?,
            manifest.image_size,
        )),
        None => None,
    };
    Ok(Sample {
        image: rgb_from_bytes(&bytes, manifest.image_size),
        depth,
        domain: manifest.domain,
    })
}

/// Random access to images of a split.
pub trait ImageSource {
    fn len(&self) -> usize;
    fn image_size(&self) -> (usize, usize);
    fn image(&self, idx: usize) -> Result<Image<f32>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Random access to images and their depth labels.
pub trait LabeledSource: ImageSource {
    fn depth(&self, idx: usize) -> Result<DepthMap<f32>>;
}

/// A split decoded into memory (8-bit RGB, 16-bit millimeter depth). Built
/// with [`SplitData::images`] it never opens a depth file and offers no
/// label access.
#[derive(Clone, Debug)]
pub struct SplitData {
    size: (usize, usize),
    rgb: Vec<Vec<u8>>,
    depth: Option<Vec<Vec<u16>>>,
}

impl SplitData {
    /// Loads images only.
    pub fn images(manifest: &DatasetManifest) -> Result<Self> {
        let rgb = manifest
            .entries
            .iter()
            .map(|e| read_rgb_bytes(&manifest.root.join(&e.rgb), manifest.image_size))
            .collect::<Result<_>>()?;
        Ok(SplitData {
            size: manifest.image_size,
            rgb,
            depth: None,
        })
    }

    /// Loads images and depth; every entry must carry a depth path.
    pub fn labeled(manifest: &DatasetManifest) -> Result<Self> {
        let mut data = Self::images(manifest)?;
        let depth = manifest
            .entries
            .iter()
            .map(|e| match &e.depth {
                Some(p) => read_depth_mm(&manifest.root.join(p), manifest.image_size),
                None => Err(Error::dataset(
                    manifest.root.join(&e.rgb),
                    format!("split `{}` has no depth label for this entry", manifest.split),
                )),
            })
            .collect::<Result<_>>()?;
        data.depth = Some(depth);
        Ok(data)
    }

    /// In-memory split from decoded samples; used for synthetic fixtures.
    pub fn from_samples(size: (usize, usize), samples: &[(Image<f32>, Option<DepthMap<f32>>)]) -> Result<Self> {
        let (h, w) = size;
        let mut rgb = Vec::with_capacity(samples.len());
        let mut depth = Vec::with_capacity(samples.len());
        for (img, d) in samples {
            if (img.height, img.width) != size {
                return Err(Error::shape(format!("sample is {}x{}, split is {h}x{w}", img.height, img.width)));
            }
            let mut bytes = Vec::with_capacity(3 * h * w);
            for i in 0..h * w {
                for c in 0..3 {
                    bytes.push(quantize(img.data[c * h * w + i]));
                }
            }
            rgb.push(bytes);
            if let Some(d) = d {
                depth.push(d.data.iter().map(|&v| encode_depth(v)).collect());
            }
        }
        let depth = (depth.len() == samples.len() && !samples.is_empty()).then_some(depth);
        Ok(SplitData { size, rgb, depth })
    }

    pub fn has_depth(&self) -> bool {
        self.depth.is_some()
    }

    /// Subset of entries in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let len = self.rgb.len();
        let check = |i: usize| if i < len { Ok(i) } else { Err(Error::Bounds { idx: i, len }) };
        let idx: Vec<usize> = indices.iter().map(|&i| check(i)).collect::<Result<_>>()?;
        Ok(SplitData {
            size: self.size,
            rgb: idx.iter().map(|&i| self.rgb[i].clone()).collect(),
            depth: self.depth.as_ref().map(|d| idx.iter().map(|&i| d[i].clone()).collect()),
        })
    }
}

impl ImageSource for SplitData {
    fn len(&self) -> usize {
        self.rgb.len()
    }

    fn image_size(&self) -> (usize, usize) {
        self.size
    }

    fn image(&self, idx: usize) -> Result<Image<f32>> {
        let bytes = self.rgb.get(idx).ok_or(Error::Bounds {
            idx,
            len: self.rgb.len(),
        })?;
        Ok(rgb_from_bytes(bytes, self.size))
    }
}

impl LabeledSource for SplitData {
    fn depth(&self, idx: usize) -> Result<DepthMap<f32>> {
        let all = self
            .depth
            .as_ref()
            .ok_or_else(|| Error::dataset(PathBuf::new(), "split was loaded without depth labels"))?;
        let mm = all.get(idx).ok_or(Error::Bounds { idx, len: all.len() })?;
        Ok(depth_from_mm(mm, self.size))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplits {
    pub source_train: DatasetManifest,
    pub target_train: DatasetManifest,
    pub target_eval: DatasetManifest,
    /// Small labeled target split for semi-supervised runs, when requested.
    pub target_labeled: Option<DatasetManifest>,
}

fn write_split(
    out_dir: &Path,
    name: &str,
    domain: Domain,
    with_depth: bool,
    seeds: impl Iterator<Item = u64>,
    spec: &SceneSpec,
    shift: &ShiftConfig,
) -> Result<DatasetManifest> {
    let dir = out_dir.join(name);
    fs::create_dir_all(&dir).map_err(|e| Error::dataset(&dir, e.to_string()))?;
    let mut entries = Vec::new();
    for (i, seed) in seeds.enumerate() {
        let (mut img, depth) = generate_scene(seed, spec)?;
        if domain == Domain::Target {
            img = apply_domain_shift(&img, &shift.reseeded(mix_seed(shift.seed, seed)))?;
        }
        let rgb = format!("rgb_{i:06}.png");
        write_rgb(&dir.join(&rgb), &img)?;
        let depth_path = if with_depth {
            let p = format!("depth_{i:06}.png");
            write_depth(&dir.join(&p), &depth)?;
            Some(p)
        } else {
            None
        };
        entries.push(Entry {
            rgb,
            depth: depth_path,
            seed,
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        split: name.to_string(),
        domain,
        image_size: spec.image_size,
        scene: spec.clone(),
        shift: (domain == Domain::Target).then(|| shift.clone()),
        entries,
        root: dir.clone(),
    };
    manifest.write(&dir)?;
    Ok(manifest)
}

/// Writes source-train, target-train and target-eval splits under `out_dir`.
pub fn build_dataset(
    n_train: usize,
    n_eval: usize,
    spec: &SceneSpec,
    shift: &ShiftConfig,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetSplits> {
    build_dataset_with_labeled(n_train, n_eval, 0, spec, shift, out_dir)
}

/// As [`build_dataset`], plus a `target_labeled` split of `n_labeled` shifted
/// scenes with depth when `n_labeled > 0`. Every split draws scene seeds from
/// its own disjoint index range.
pub fn build_dataset_with_labeled(
    n_train: usize,
    n_eval: usize,
    n_labeled: usize,
    spec: &SceneSpec,
    shift: &ShiftConfig,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetSplits> {
    spec.validate()?;
    shift.validate()?;
    let out = out_dir.as_ref();
    let seeds = |start: usize, n: usize| (start..start + n).map(|i| mix_seed(spec.seed, i as u64));
    let source_train = write_split(out, "source_train", Domain::Source, true, seeds(0, n_train), spec, shift)?;
    let target_train = write_split(out, "target_train", Domain::Target, false, seeds(n_train, n_train), spec, shift)?;
    let target_eval = write_split(out, "target_eval", Domain::Target, true, seeds(2 * n_train, n_eval), spec, shift)?;
    let target_labeled = if n_labeled > 0 {
        Some(write_split(
            out,
            "target_labeled",
            Domain::Target,
            true,
            seeds(2 * n_train + n_eval, n_labeled),
            spec,
            shift,
        )?)
    } else {
        None
    };
    Ok(DatasetSplits {
        source_train,
        target_train,
        target_eval,
        target_labeled,
    })
}
