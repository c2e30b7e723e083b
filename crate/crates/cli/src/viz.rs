use std::path::Path;

use adadepth::{DepthMap, Error, Result};
use image::{Rgb, RgbImage};

/// Anchor colors at evenly spaced positions from near (first) to far
/// (last); intermediate depths interpolate linearly between neighbors.
pub const COLORMAP: [[u8; 3]; 5] = [[68, 1, 84], [59, 82, 139], [33, 145, 140], [94, 201, 98], [253, 231, 37]];

/// Color of `depth` after clamping to `[lo, hi]`.
pub fn colorize(depth: f64, (lo, hi): (f64, f64)) -> [u8; 3] {
    let t = ((depth.clamp(lo, hi) - lo) / (hi - lo)).clamp(0.0, 1.0);
    let pos = t * (COLORMAP.len() - 1) as f64;
    let i = (pos.floor() as usize).min(COLORMAP.len() - 2);
    let f = pos - i as f64;
    let (a, b) = (COLORMAP[i], COLORMAP[i + 1]);
    std::array::from_fn(|c| (a[c] as f64 + f * (b[c] as f64 - a[c] as f64)).round() as u8)
}

/// Writes `pred` as an 8-bit RGB PNG. Masked-out pixels are black.
pub fn export_viz(pred: &DepthMap, path: &Path, depth_range: (f64, f64)) -> Result<()> {
    let (lo, hi) = depth_range;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::Config(format!("depth_range must satisfy lo < hi, got ({lo}, {hi})")));
    }
    let mut img = RgbImage::new(pred.width as u32, pred.height as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        *px = if pred.mask[i] {
            Rgb(colorize(pred.data[i] as f64, depth_range))
        } else {
            Rgb([0, 0, 0])
        };
    }
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_map_to_end_colors() {
        assert_eq!(colorize(0.5, (0.5, 10.0)), COLORMAP[0]);
        assert_eq!(colorize(10.0, (0.5, 10.0)), COLORMAP[4]);
        assert_eq!(colorize(-3.0, (0.5, 10.0)), COLORMAP[0]);
        assert_eq!(colorize(99.0, (0.5, 10.0)), COLORMAP[4]);
    }

    #[test]
    fn midpoint_hits_middle_anchor() {
        assert_eq!(colorize(5.0, (0.0, 10.0)), COLORMAP[2]);
    }
}
