//! Images, binary masks, and the masked-scene context input.

mod io;
mod masks;

use csf_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CsfError, Result};

pub use io::{
    load_image_dir, load_manifest, load_mask_png, load_rgb_png, load_scene, load_scene_dir, save_mask_png,
    save_rgb_png, save_scene, scan_image_dir, LoadedImages, SceneMeta,
};
pub use masks::{
    make_center_box_mask, make_random_brush_mask, BrushParams, BRUSH_MAX_ATTEMPTS,
};

/// Row-major `height × width` boolean map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMap {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMap {
    pub fn new(height: usize, width: usize, value: bool) -> Self {
        BinaryMap {
            height,
            width,
            bits: vec![value; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(CsfError::ShapeMismatch(format!(
                "{} bits for a {height}×{width} map",
                bits.len()
            )));
        }
        Ok(BinaryMap {
            height,
            width,
            bits,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height * width).map(|i| f(i / width, i % width)).collect();
        BinaryMap {
            height,
            width,
            bits,
        }
    }

    /// Threshold a real-valued plane at `>= 0.5`.
    pub fn from_plane(height: usize, width: usize, values: &[f64]) -> Self {
        assert_eq!(values.len(), height * width);
        BinaryMap {
            height,
            width,
            bits: values.iter().map(|&v| v >= 0.5).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.bits.iter().any(|&b| b)
    }

    /// Fraction of set bits.
    pub fn coverage(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.bits.len() as f64
        }
    }

    fn zip_with(&self, other: &BinaryMap, f: impl Fn(bool, bool) -> bool) -> BinaryMap {
        assert_eq!(self.dims(), other.dims(), "binary map shape mismatch");
        BinaryMap {
            height: self.height,
            width: self.width,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn and(&self, other: &BinaryMap) -> BinaryMap {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn or(&self, other: &BinaryMap) -> BinaryMap {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn and_not(&self, other: &BinaryMap) -> BinaryMap {
        self.zip_with(other, |a, b| a && !b)
    }

    pub fn not(&self) -> BinaryMap {
        BinaryMap {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|&b| !b).collect(),
        }
    }

    /// Square-neighborhood dilation with Chebyshev radius `r`.
    pub fn dilate(&self, r: usize) -> BinaryMap {
        if r == 0 {
            return self.clone();
        }
        let (h, w) = self.dims();
        // separable max filter: rows then columns
        let mut rows = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let lo = x.saturating_sub(r);
                let hi = (x + r).min(w - 1);
                rows[y * w + x] = (lo..=hi).any(|xx| self.bits[y * w + xx]);
            }
        }
        let mut out = vec![false; h * w];
        for y in 0..h {
            let lo = y.saturating_sub(r);
            let hi = (y + r).min(h - 1);
            for x in 0..w {
                out[y * w + x] = (lo..=hi).any(|yy| rows[yy * w + x]);
            }
        }
        BinaryMap {
            height: h,
            width: w,
            bits: out,
        }
    }

    /// Tight bounding box `(y0, x0, y1, x1)` (exclusive ends) of set bits.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    bb = Some(match bb {
                        None => (y, x, y + 1, x + 1),
                        Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y + 1), x1.max(x + 1)),
                    });
                }
            }
        }
        bb
    }

    /// `1 × H × W` tensor of 0/1.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            [1, self.height, self.width],
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
    }

    pub fn to_plane(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Bilinear area resample, re-thresholded at 0.5.
    pub fn resized(&self, height: usize, width: usize) -> BinaryMap {
        if (height, width) == self.dims() {
            return self.clone();
        }
        let plane = csf_autograd::kernels::resize_bilinear(
            &self.to_plane(),
            1,
            self.height,
            self.width,
            height,
            width,
        );
        BinaryMap::from_plane(height, width, &plane)
    }
}

/// An RGB image with values in `[0, 1]`, stored channel-first `3 × H × W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub pixels: Tensor,
    pub source_path: String,
}

impl ImageRecord {
    pub fn new(id: impl Into<String>, pixels: Tensor, source_path: impl Into<String>) -> Result<Self> {
        let shape = pixels.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(CsfError::ShapeMismatch(format!(
                "image pixels must be 3×H×W, got {shape:?}"
            )));
        }
        if let Some(bad) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(CsfError::InvalidArgument(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(ImageRecord {
            id: id.into(),
            pixels,
            source_path: source_path.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels.data()[(c * self.height() + y) * self.width() + x]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    CenterBox,
    RandomBrush,
    /// Loaded from disk or constructed directly.
    Custom,
}

/// Hole mask, `1 = missing`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub bits: BinaryMap,
    pub kind: MaskKind,
    pub area_fraction: f64,
    pub seed: u64,
}

impl Mask {
    pub fn custom(bits: BinaryMap) -> Self {
        let area_fraction = bits.coverage();
        Mask {
            bits,
            kind: MaskKind::Custom,
            area_fraction,
            seed: 0,
        }
    }

    pub fn coverage(&self) -> f64 {
        self.bits.coverage()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.bits.dims()
    }
}

/// Image, hole mask, and the network input: RGB with the hole zeroed plus
/// the mask as a fourth channel.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedScene {
    pub image: ImageRecord,
    pub mask: Mask,
    pub masked_pixels: Tensor,
}

impl MaskedScene {
    pub fn dims(&self) -> (usize, usize) {
        self.image.dims()
    }

    /// Hole-zeroed RGB, `3 × H × W`.
    pub fn masked_rgb(&self) -> Tensor {
        let (h, w) = self.dims();
        Tensor::new([3, h, w], self.masked_pixels.data()[..3 * h * w].to_vec())
    }

    /// Complement of the hole.
    pub fn visible(&self) -> BinaryMap {
        self.mask.bits.not()
    }
}

/// Zero the hole and append the mask channel.
pub fn apply_mask(image: &ImageRecord, mask: &Mask) -> Result<MaskedScene> {
    if image.dims() != mask.dims() {
        return Err(CsfError::ShapeMismatch(format!(
            "image is {:?} but mask is {:?}",
            image.dims(),
            mask.dims()
        )));
    }
    let (h, w) = image.dims();
    let n = h * w;
    let mut data = Vec::with_capacity(4 * n);
    for c in 0..3 {
        let plane = &image.pixels.data()[c * n..(c + 1) * n];
        data.extend(
            plane
                .iter()
                .zip(mask.bits.bits())
                .map(|(&v, &hole)| if hole { 0.0 } else { v }),
        );
    }
    data.extend(mask.bits.to_plane());
    Ok(MaskedScene {
        image: image.clone(),
        mask: mask.clone(),
        masked_pixels: Tensor::new([4, h, w], data),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn gradient_image(res: usize) -> ImageRecord {
        let n = res * res;
        let mut data = Vec::with_capacity(3 * n);
        for c in 0..3 {
            for i in 0..n {
                let (y, x) = (i / res, i % res);
                data.push(((x + 2 * y + 7 * c) % res) as f64 / res as f64);
            }
        }
        ImageRecord::new("g", Tensor::new([3, res, res], data), "").unwrap()
    }

    #[test]
    fn apply_mask_identity_on_empty_mask() {
        let img = gradient_image(16);
        let mask = Mask::custom(BinaryMap::new(16, 16, false));
        let scene = apply_mask(&img, &mask).unwrap();
        assert_eq!(scene.masked_rgb(), img.pixels);
        assert!(scene.masked_pixels.data()[3 * 256..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn apply_mask_full_mask_zeroes_rgb() {
        let img = gradient_image(16);
        let mask = Mask::custom(BinaryMap::new(16, 16, true));
        let scene = apply_mask(&img, &mask).unwrap();
        assert!(scene.masked_rgb().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn apply_mask_center_box_keeps_ring() {
        let img = gradient_image(32);
        let mask = make_center_box_mask(32, 0.5).unwrap();
        let scene = apply_mask(&img, &mask).unwrap();
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    let got = scene.masked_pixels.data()[(c * 32 + y) * 32 + x];
                    if mask.bits.get(y, x) {
                        assert_eq!(got, 0.0);
                    } else {
                        assert_eq!(got, img.at(c, y, x));
                    }
                }
            }
        }
    }

    #[test]
    fn apply_mask_is_idempotent_on_visible_region() {
        let img = gradient_image(16);
        let mask = make_center_box_mask(16, 0.3).unwrap();
        let once = apply_mask(&img, &mask).unwrap();
        let again_img = ImageRecord::new("g", once.masked_rgb(), "").unwrap();
        let twice = apply_mask(&again_img, &mask).unwrap();
        assert_eq!(once.masked_pixels, twice.masked_pixels);
    }

    #[test]
    fn apply_mask_rejects_shape_mismatch() {
        let img = gradient_image(16);
        let mask = Mask::custom(BinaryMap::new(8, 8, false));
        assert!(matches!(apply_mask(&img, &mask), Err(CsfError::ShapeMismatch(_))));
    }

    #[test]
    fn dilate_grows_by_radius() {
        let mut m = BinaryMap::new(9, 9, false);
        m.set(4, 4, true);
        let d = m.dilate(2);
        assert_eq!(d.count(), 25);
        assert_eq!(d.bbox(), Some((2, 2, 7, 7)));
    }

    #[test]
    fn image_rejects_out_of_range() {
        let t = Tensor::new([3, 1, 1], vec![0.0, 1.5, 0.2]);
        assert!(ImageRecord::new("x", t, "").is_err());
    }
}
