//! Pixel preprocessing: bilinear resize, center crop, channel replication,
//! and per-channel standardization, plus the matching coordinate transform
//! for annotation boxes.

use crate::dataio::pnm::RawImage;
use crate::error::{Error, Result};
use crate::metrics::Bbox;
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Side length of the intermediate resize for a crop side `target`,
/// preserving a 256:224 resize-to-crop ratio: `ceil(target * 256 / 224)`.
pub fn resize_side(target: usize) -> usize {
    (target * 256 + 223) / 224
}

/// Resize (bilinear, square), center-crop to `target`, replicate grayscale
/// to 3 channels, and standardize with ImageNet statistics. Output shape is
/// `(3, target, target)`.
pub fn preprocess_image<T: Real>(image: &RawImage, target: usize) -> Result<Tensor<T>> {
    if target == 0 {
        return Err(Error::Config("preprocess target must be positive".into()));
    }
    if image.channels != 1 && image.channels != 3 {
        return Err(Error::Validation(format!(
            "cannot preprocess {}-channel image",
            image.channels
        )));
    }
    let resize = resize_side(target);
    let offset = (resize - target) / 2;
    let mut out = Vec::with_capacity(3 * target * target);
    for c in 0..3 {
        let src_c = if image.channels == 1 { 0 } else { c };
        let plane: Vec<f64> = (0..image.width * image.height)
            .map(|i| image.pixels[i * image.channels + src_c] as f64 / 255.0)
            .collect();
        let resized = bilinear_resize(&plane, image.width, image.height, resize, resize);
        for y in 0..target {
            for x in 0..target {
                let v = resized[(y + offset) * resize + (x + offset)];
                out.push(T::of((v - IMAGENET_MEAN[c]) / IMAGENET_STD[c]));
            }
        }
    }
    Tensor::new(vec![3, target, target], out)
}

/// Bilinear resampling with half-pixel centers: a destination pixel `i`
/// samples the source at `(i + 0.5) * src/dst - 0.5`, clamped to the grid.
pub fn bilinear_resize(src: &[f64], src_w: usize, src_h: usize, dst_w: usize, dst_h: usize) -> Vec<f64> {
    assert_eq!(src.len(), src_w * src_h);
    let scale_x = src_w as f64 / dst_w as f64;
    let scale_y = src_h as f64 / dst_h as f64;
    let mut out = Vec::with_capacity(dst_w * dst_h);
    for dy in 0..dst_h {
        let sy = ((dy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (src_h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(src_h - 1);
        let fy = sy - y0 as f64;
        for dx in 0..dst_w {
            let sx = ((dx as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (src_w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(src_w - 1);
            let fx = sx - x0 as f64;
            let top = src[y0 * src_w + x0] * (1.0 - fx) + src[y0 * src_w + x1] * fx;
            let bot = src[y1 * src_w + x0] * (1.0 - fx) + src[y1 * src_w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Affine map from original pixel coordinates into the resized-then-cropped
/// frame used by `preprocess_image`.
#[derive(Clone, Copy, Debug)]
pub struct CoordinateMap {
    pub scale_x: f64,
    pub scale_y: f64,
    pub offset: f64,
    pub target: usize,
}

pub fn coordinate_map(orig_w: usize, orig_h: usize, target: usize) -> CoordinateMap {
    let resize = resize_side(target);
    CoordinateMap {
        scale_x: resize as f64 / orig_w as f64,
        scale_y: resize as f64 / orig_h as f64,
        offset: ((resize - target) / 2) as f64,
        target,
    }
}

impl CoordinateMap {
    /// Map a box into preprocessed coordinates, clamped to the crop;
    /// `None` when the box falls entirely outside the crop.
    pub fn map_box(&self, b: &Bbox) -> Option<Bbox> {
        let side = self.target as f64;
        let x_min = (b.x_min * self.scale_x - self.offset).clamp(0.0, side);
        let x_max = (b.x_max * self.scale_x - self.offset).clamp(0.0, side);
        let y_min = (b.y_min * self.scale_y - self.offset).clamp(0.0, side);
        let y_max = (b.y_max * self.scale_y - self.offset).clamp(0.0, side);
        Bbox::new(x_min, y_min, x_max, y_max).ok()
    }

    /// Map a box from preprocessed coordinates back to original pixels; the
    /// inverse of `map_box` away from the clamped border.
    pub fn unmap_box(&self, b: &Bbox) -> Result<Bbox> {
        Bbox::new(
            (b.x_min + self.offset) / self.scale_x,
            (b.y_min + self.offset) / self.scale_y,
            (b.x_max + self.offset) / self.scale_x,
            (b.y_max + self.offset) / self.scale_y,
        )
    }
}
