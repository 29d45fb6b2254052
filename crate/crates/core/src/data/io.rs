use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use csf_autograd::Tensor;
use image::imageops::FilterType;
use serde::{Deserialize, Serialize};

use super::{apply_mask, BinaryMap, ImageRecord, Mask, MaskKind, MaskedScene};
use crate::error::{CsfError, Result};

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

/// Result of scanning a directory: decoded records plus files that failed.
#[derive(Debug)]
pub struct LoadedImages {
    pub records: Vec<ImageRecord>,
    pub skipped: Vec<(PathBuf, String)>,
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn decode_resized(path: &Path, resolution: usize) -> std::result::Result<Tensor, String> {
    let img = image::ImageReader::open(path)
        .map_err(|e| e.to_string())?
        .with_guessed_format()
        .map_err(|e| e.to_string())?
        .decode()
        .map_err(|e| e.to_string())?
        .to_rgb8();
    let res = resolution as u32;
    let img = if img.dimensions() == (res, res) {
        img
    } else {
        image::imageops::resize(&img, res, res, FilterType::Triangle)
    };
    Ok(rgb8_to_tensor(&img))
}

fn rgb8_to_tensor(img: &image::RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = f64::from(p[c]) / 255.0;
        }
    }
    Tensor::new([3, h, w], data)
}

/// Decode every PNG/JPEG under `path` (non-recursive), resized to a square
/// `resolution`, ordered by path. Undecodable files are reported, not fatal.
pub fn scan_image_dir(path: &Path, resolution: usize) -> Result<LoadedImages> {
    let entries = fs::read_dir(path).map_err(|e| CsfError::io(path, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    files.sort();
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for file in files {
        match decode_resized(&file, resolution) {
            Ok(pixels) => {
                let id = file
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                records.push(ImageRecord {
                    id,
                    pixels,
                    source_path: file.to_string_lossy().into_owned(),
                });
            }
            Err(reason) => {
                log::warn!("skipping unreadable image {}: {reason}", file.display());
                skipped.push((file, reason));
            }
        }
    }
    if records.is_empty() {
        return Err(CsfError::EmptyDirectory(path.to_path_buf()));
    }
    Ok(LoadedImages { records, skipped })
}

pub fn load_image_dir(path: &Path, resolution: usize) -> Result<Vec<ImageRecord>> {
    scan_image_dir(path, resolution).map(|l| l.records)
}

/// Load images listed in a manifest of `id,path` lines. Relative paths
/// resolve against the manifest's directory; `#` starts a comment.
pub fn load_manifest(manifest: &Path, resolution: usize) -> Result<Vec<ImageRecord>> {
    let text = fs::read_to_string(manifest).map_err(|e| CsfError::io(manifest, e))?;
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, rel) = line.split_once(',').ok_or_else(|| {
            CsfError::InvalidArgument(format!(
                "{}:{}: expected `id,path`",
                manifest.display(),
                lineno + 1
            ))
        })?;
        let file = base.join(rel.trim());
        match decode_resized(&file, resolution) {
            Ok(pixels) => records.push(ImageRecord {
                id: id.trim().to_string(),
                pixels,
                source_path: file.to_string_lossy().into_owned(),
            }),
            Err(reason) => log::warn!("skipping unreadable image {}: {reason}", file.display()),
        }
    }
    if records.is_empty() {
        return Err(CsfError::EmptyDirectory(manifest.to_path_buf()));
    }
    Ok(records)
}

/// Write a `3 × H × W` tensor in `[0, 1]` as an 8-bit RGB PNG.
pub fn save_rgb_png(path: &Path, pixels: &Tensor) -> Result<()> {
    let (c, h, w) = pixels.dims3();
    if c != 3 {
        return Err(CsfError::ShapeMismatch(format!("expected 3 channels, got {c}")));
    }
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = std::array::from_fn(|ch| {
                let v = pixels.data()[(ch * h + y) * w + x];
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            });
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path).map_err(|e| CsfError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Read an RGB PNG at its native size.
pub fn load_rgb_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| CsfError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    Ok(rgb8_to_tensor(&img))
}

/// Write a binary map as a 1-bit grayscale PNG (set bits are white).
pub fn save_mask_png(path: &Path, bits: &BinaryMap) -> Result<()> {
    let (h, w) = bits.dims();
    let file = fs::File::create(path).map_err(|e| CsfError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::One);
    let stride = w.div_ceil(8);
    let mut packed = vec![0u8; stride * h];
    for y in 0..h {
        for x in 0..w {
            if bits.get(y, x) {
                packed[y * stride + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    let png_err = |e: png::EncodingError| CsfError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&packed).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// Read a mask PNG of any bit depth; pixels at or above half intensity are set.
pub fn load_mask_png(path: &Path) -> Result<BinaryMap> {
    let img = image::open(path)
        .map_err(|e| CsfError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    BinaryMap::from_bits(h, w, img.pixels().map(|p| p[0] >= 128).collect())
}

/// Sidecar record stored next to a persisted scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub id: String,
    pub kind: MaskKind,
    pub area_fraction: f64,
    pub seed: u64,
    pub resolution: usize,
    #[serde(default)]
    pub source_path: String,
}

/// Persist as `image.png`, `mask.png` and `meta.json` inside `dir`.
pub fn save_scene(dir: &Path, scene: &MaskedScene) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CsfError::io(dir, e))?;
    save_rgb_png(&dir.join("image.png"), &scene.image.pixels)?;
    save_mask_png(&dir.join("mask.png"), &scene.mask.bits)?;
    let meta = SceneMeta {
        id: scene.image.id.clone(),
        kind: scene.mask.kind,
        area_fraction: scene.mask.area_fraction,
        seed: scene.mask.seed,
        resolution: scene.image.height(),
        source_path: scene.image.source_path.clone(),
    };
    let path = dir.join("meta.json");
    fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| CsfError::io(&path, e))
}

pub fn load_scene(dir: &Path) -> Result<MaskedScene> {
    let meta_path = dir.join("meta.json");
    let meta: SceneMeta = serde_json::from_str(
        &fs::read_to_string(&meta_path).map_err(|e| CsfError::io(&meta_path, e))?,
    )?;
    let pixels = load_rgb_png(&dir.join("image.png"))?;
    let image = ImageRecord::new(meta.id.clone(), pixels, meta.source_path.clone())?;
    let bits = load_mask_png(&dir.join("mask.png"))?;
    let mask = Mask {
        bits,
        kind: meta.kind,
        area_fraction: meta.area_fraction,
        seed: meta.seed,
    };
    apply_mask(&image, &mask)
}

/// Every `<root>/<id>/` holding a persisted scene, ordered by id.
pub fn load_scene_dir(root: &Path) -> Result<Vec<MaskedScene>> {
    let entries = fs::read_dir(root).map_err(|e| CsfError::io(root, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CsfError::EmptyDirectory(root.to_path_buf()));
    }
    dirs.iter().map(|d| load_scene(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_center_box_mask;

    fn write_png(path: &Path, res: u32, shade: u8) {
        let img = image::RgbImage::from_fn(res, res, |x, y| {
            image::Rgb([shade, (x * 7 % 256) as u8, (y * 3 % 256) as u8])
        });
        img.save(path).unwrap();
    }

    #[test]
    fn loads_and_resizes_sorted() {
        let dir = tempfile::tempdir().unwrap();
        for (name, shade) in [("c.png", 10), ("a.png", 20), ("b.png", 30)] {
            write_png(&dir.path().join(name), 40, shade);
        }
        let recs = load_image_dir(dir.path(), 32).unwrap();
        assert_eq!(recs.len(), 3);
        let ids: Vec<_> = recs.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        for r in &recs {
            assert_eq!(r.pixels.shape(), &[3, 32, 32]);
            assert!(r.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let again = load_image_dir(dir.path(), 32).unwrap();
        assert_eq!(recs, again);
    }

    #[test]
    fn corrupt_file_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("a.png"), 16, 1);
        write_png(&dir.path().join("b.png"), 16, 2);
        fs::write(dir.path().join("c.png"), b"not a png at all").unwrap();
        let loaded = scan_image_dir(dir.path(), 16).unwrap();
        assert_eq!(loaded.records.len(), 2);
        assert_eq!(loaded.skipped.len(), 1);
        assert!(loaded.skipped[0].0.ends_with("c.png"));
    }

    #[test]
    fn empty_directory_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_image_dir(dir.path(), 16),
            Err(CsfError::EmptyDirectory(_))
        ));
    }

    #[test]
    fn manifest_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("x.png"), 16, 1);
        let manifest = dir.path().join("list.csv");
        fs::write(&manifest, "# id,path\nscene-1, x.png\n").unwrap();
        let recs = load_manifest(&manifest, 8).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].id, "scene-1");
        assert_eq!(recs[0].pixels.shape(), &[3, 8, 8]);
    }

    #[test]
    fn mask_png_roundtrip_is_one_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mask = make_center_box_mask(19, 0.4).unwrap();
        save_mask_png(&path, &mask.bits).unwrap();
        let decoder = png::Decoder::new(std::io::BufReader::new(fs::File::open(&path).unwrap()));
        let reader = decoder.read_info().unwrap();
        assert_eq!(reader.info().bit_depth, png::BitDepth::One);
        assert_eq!(load_mask_png(&path).unwrap(), mask.bits);
    }

    #[test]
    fn scene_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let img = image::RgbImage::from_fn(16, 16, |x, y| image::Rgb([(x * 16) as u8, (y * 16) as u8, 128]));
        let rec = ImageRecord::new("s", rgb8_to_tensor(&img), "orig.png").unwrap();
        let mask = make_center_box_mask(16, 0.5).unwrap();
        let scene = apply_mask(&rec, &mask).unwrap();
        save_scene(dir.path(), &scene).unwrap();
        let back = load_scene(dir.path()).unwrap();
        assert_eq!(back.masked_pixels, scene.masked_pixels);
        assert_eq!(back.mask.kind, MaskKind::CenterBox);
        assert_eq!(back.image.id, "s");
    }
}
