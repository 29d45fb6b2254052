//! Per-method metric reports, comparability checks and report emitters
//! (text table, JSON lines, bar charts).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assets::{AssetStore, FeatureNet, Lpips, CLIP, INCEPTION};
use crate::data::{ImageRecord, Mask, MaskKind};
use crate::error::{CsfError, Result};
use crate::eval::metrics::{clip_at_mask, fid, lpips_metric};

/// One restored image with its reference and hole.
#[derive(Clone, Debug)]
pub struct EvalSample {
    pub restored: ImageRecord,
    pub gt: ImageRecord,
    pub mask: Mask,
}

/// Frozen networks behind the three metrics.
#[derive(Clone, Debug)]
pub struct MetricNets {
    pub inception: Arc<FeatureNet>,
    pub lpips: Lpips,
    pub clip: Arc<FeatureNet>,
}

impl MetricNets {
    pub fn from_store(store: &AssetStore) -> Result<Self> {
        Ok(MetricNets {
            inception: store.get(INCEPTION)?,
            lpips: store.lpips()?,
            clip: store.get(CLIP)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method_id: String,
    pub mask_protocol: String,
    pub n_images: usize,
    pub fid: f64,
    pub lpips_mean: f64,
    pub c_at_m_mean: f64,
    /// SHA-256 over the sorted (image id, mask kind, mask seed) triples.
    pub manifest_hash: String,
}

fn kind_name(kind: MaskKind) -> &'static str {
    match kind {
        MaskKind::CenterBox => "center_box",
        MaskKind::RandomBrush => "random_brush",
        MaskKind::Custom => "custom",
    }
}

/// `center_box@0.50`, `random_brush`, or `mixed` when kinds differ.
pub fn mask_protocol(masks: &[&Mask]) -> String {
    let Some(first) = masks.first() else {
        return "none".into();
    };
    if masks.iter().any(|m| m.kind != first.kind) {
        return "mixed".into();
    }
    match first.kind {
        MaskKind::CenterBox if masks.iter().all(|m| (m.area_fraction - first.area_fraction).abs() < 1e-9) => {
            format!("center_box@{:.2}", first.area_fraction)
        }
        k => kind_name(k).into(),
    }
}

pub fn manifest_hash<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Mask)>) -> String {
    let mut lines: Vec<String> = entries
        .into_iter()
        .map(|(id, m)| format!("{id}\t{}\t{}", kind_name(m.kind), m.seed))
        .collect();
    lines.sort();
    let digest = Sha256::digest(lines.join("\n").as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// FID over the whole set plus per-image LPIPS and masked-region
/// similarity means.
pub fn evaluate(method_id: &str, samples: &[EvalSample], nets: &MetricNets) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(CsfError::InvalidArgument("no samples to evaluate".into()));
    }
    for s in samples {
        if s.restored.id != s.gt.id {
            return Err(CsfError::InvalidArgument(format!(
                "restored `{}` paired with ground truth `{}`",
                s.restored.id, s.gt.id
            )));
        }
    }
    let per_image: Vec<(f64, f64)> = csf_autograd::par::map_slice(samples, |s| {
        Ok((
            lpips_metric(&s.restored, &s.gt, &nets.lpips)?,
            clip_at_mask(&s.restored, &s.gt, &s.mask, &nets.clip)?,
        ))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let restored: Vec<_> = samples.iter().map(|s| s.restored.pixels.clone()).collect();
    let gts: Vec<_> = samples.iter().map(|s| s.gt.pixels.clone()).collect();
    let n = samples.len() as f64;
    Ok(MetricReport {
        method_id: method_id.to_string(),
        mask_protocol: mask_protocol(&samples.iter().map(|s| &s.mask).collect::<Vec<_>>()),
        n_images: samples.len(),
        fid: fid(&restored, &gts, &nets.inception)?,
        lpips_mean: per_image.iter().map(|p| p.0).sum::<f64>() / n,
        c_at_m_mean: per_image.iter().map(|p| p.1).sum::<f64>() / n,
        manifest_hash: manifest_hash(samples.iter().map(|s| (s.gt.id.as_str(), &s.mask))),
    })
}

/// Rows may only be compared when they cover the same images and masks.
pub fn check_comparable(reports: &[&MetricReport]) -> Result<()> {
    if let Some(first) = reports.first() {
        for r in &reports[1..] {
            if r.manifest_hash != first.manifest_hash {
                return Err(CsfError::Incomparable(format!(
                    "`{}` and `{}` were evaluated on different image/mask sets",
                    first.method_id, r.method_id
                )));
            }
        }
    }
    Ok(())
}

pub fn format_table(reports: &[MetricReport]) -> String {
    let w = reports.iter().map(|r| r.method_id.len()).max().unwrap_or(0).max(6);
    let mut s = String::new();
    let _ = writeln!(s, "{:<w$}  {:>10}  {:>8}  {:>8}  {:>6}  protocol", "method", "FID", "LPIPS", "C@m", "n");
    for r in reports {
        let _ = writeln!(
            s,
            "{:<w$}  {:>10.4}  {:>8.4}  {:>8.4}  {:>6}  {}",
            r.method_id, r.fid, r.lpips_mean, r.c_at_m_mean, r.n_images, r.mask_protocol
        );
    }
    s
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| CsfError::io(path, e))
}

/// One bar per value, heights scaled to the largest magnitude.
pub fn bar_chart(path: &Path, values: &[f64]) -> Result<()> {
    const H: u32 = 200;
    const BAR: u32 = 24;
    const GAP: u32 = 8;
    let width = (values.len() as u32 * (BAR + GAP) + GAP).max(1);
    let mut img = image::RgbImage::from_pixel(width, H, image::Rgb([255, 255, 255]));
    let max = values.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
    for (i, v) in values.iter().enumerate() {
        let frac = if max > 0.0 && v.is_finite() { v.abs() / max } else { 0.0 };
        let bar_h = ((H - 10) as f64 * frac).round() as u32;
        let x0 = GAP + i as u32 * (BAR + GAP);
        let colour = if *v >= 0.0 { [52, 101, 164] } else { [204, 0, 0] };
        for y in H - bar_h..H {
            for x in x0..x0 + BAR {
                img.put_pixel(x, y, image::Rgb(colour));
            }
        }
    }
    img.save(path).map_err(|e| CsfError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// `<stem>_fid.png`, `<stem>_lpips.png`, `<stem>_c_at_m.png` in `dir`.
pub fn write_charts(dir: &Path, stem: &str, reports: &[MetricReport]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let metrics: [(&str, fn(&MetricReport) -> f64); 3] =
        [("fid", |r| r.fid), ("lpips", |r| r.lpips_mean), ("c_at_m", |r| r.c_at_m_mean)];
    for (name, get) in metrics {
        let path = dir.join(format!("{stem}_{name}.png"));
        bar_chart(&path, &reports.iter().map(get).collect::<Vec<_>>())?;
        out.push(path);
    }
    Ok(out)
}
