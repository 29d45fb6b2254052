//! Downstream inpainters behind a minimal protocol: an RGB image whose hole
//! pixels are zeroed plus the hole mask in, a completed RGB image out.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};

use csf_autograd::Tensor;

use crate::data::{load_rgb_png, save_mask_png, save_rgb_png, BinaryMap, ImageRecord, MaskedScene};
use crate::error::{CsfError, Result};
use crate::select::GuidanceImage;

/// Environment variable naming the command for the `external` adapter.
/// The command is invoked as `<cmd> input.png mask.png output.png`.
pub const EXTERNAL_CMD_ENV: &str = "CSF_INPAINT_CMD";

pub trait InpainterAdapter: Send + Sync {
    fn id(&self) -> &str;

    fn accepts_guidance(&self) -> bool;

    /// Max absolute per-channel change the adapter may make to known pixels.
    fn tolerance(&self) -> f64 {
        1e-9
    }

    fn inpaint(&self, image: &Tensor, hole: &BinaryMap) -> Result<Tensor>;
}

/// Returns its input unchanged; hole pixels stay at whatever they held.
#[derive(Clone, Debug, Default)]
pub struct IdentityAdapter;

impl InpainterAdapter for IdentityAdapter {
    fn id(&self) -> &str {
        "identity"
    }

    fn accepts_guidance(&self) -> bool {
        true
    }

    fn inpaint(&self, image: &Tensor, _hole: &BinaryMap) -> Result<Tensor> {
        Ok(image.clone())
    }
}

/// Fills holes with the harmonic interpolant of the surrounding known
/// pixels (Jacobi iterations of the discrete Laplace equation).
#[derive(Clone, Debug)]
pub struct DiffusionAdapter {
    pub iterations: usize,
}

impl Default for DiffusionAdapter {
    fn default() -> Self {
        DiffusionAdapter { iterations: 400 }
    }
}

impl InpainterAdapter for DiffusionAdapter {
    fn id(&self) -> &str {
        "diffusion"
    }

    fn accepts_guidance(&self) -> bool {
        true
    }

    fn inpaint(&self, image: &Tensor, hole: &BinaryMap) -> Result<Tensor> {
        let (c, h, w) = image.dims3();
        let n = h * w;
        let holes: Vec<usize> = (0..n).filter(|&i| hole.bits()[i]).collect();
        let mut out = image.clone();
        if holes.is_empty() {
            return Ok(out);
        }
        let known = n - holes.len();
        for ch in 0..c {
            let plane = &mut out.data_mut()[ch * n..(ch + 1) * n];
            let init = if known == 0 {
                0.5
            } else {
                (0..n).filter(|&i| !hole.bits()[i]).map(|i| plane[i]).sum::<f64>() / known as f64
            };
            for &i in &holes {
                plane[i] = init;
            }
            let mut next = plane.to_vec();
            for _ in 0..self.iterations {
                for &i in &holes {
                    let (y, x) = (i / w, i % w);
                    let mut s = 0.0;
                    let mut k = 0.0;
                    if y > 0 {
                        s += plane[i - w];
                        k += 1.0;
                    }
                    if y + 1 < h {
                        s += plane[i + w];
                        k += 1.0;
                    }
                    if x > 0 {
                        s += plane[i - 1];
                        k += 1.0;
                    }
                    if x + 1 < w {
                        s += plane[i + 1];
                        k += 1.0;
                    }
                    next[i] = s / k;
                }
                for &i in &holes {
                    plane[i] = next[i];
                }
            }
        }
        Ok(out)
    }
}

/// Shells out to a user-provided inpainter through PNG files.
#[derive(Clone, Debug)]
pub struct ExternalAdapter {
    pub id: String,
    pub command: String,
    pub accepts_guidance: bool,
}

static SCRATCH: AtomicU64 = AtomicU64::new(0);

fn scratch_dir() -> Result<PathBuf> {
    let dir = std::env::temp_dir().join(format!(
        "csf-adapter-{}-{}",
        std::process::id(),
        SCRATCH.fetch_add(1, Ordering::Relaxed)
    ));
    std::fs::create_dir_all(&dir).map_err(|e| CsfError::io(&dir, e))?;
    Ok(dir)
}

impl ExternalAdapter {
    fn run(&self, dir: &Path, image: &Tensor, hole: &BinaryMap) -> Result<Tensor> {
        let (input, mask, output) = (dir.join("input.png"), dir.join("mask.png"), dir.join("output.png"));
        save_rgb_png(&input, image)?;
        save_mask_png(&mask, hole)?;
        let fail = |reason: String| CsfError::AdapterFailed {
            id: self.id.clone(),
            reason,
        };
        let status = Command::new(&self.command)
            .arg(&input)
            .arg(&mask)
            .arg(&output)
            .status()
            .map_err(|e| fail(format!("could not run `{}`: {e}", self.command)))?;
        if !status.success() {
            return Err(fail(format!("`{}` exited with {status}", self.command)));
        }
        load_rgb_png(&output).map_err(|e| fail(e.to_string()))
    }
}

impl InpainterAdapter for ExternalAdapter {
    fn id(&self) -> &str {
        &self.id
    }

    fn accepts_guidance(&self) -> bool {
        self.accepts_guidance
    }

    /// Known pixels make an 8-bit round trip.
    fn tolerance(&self) -> f64 {
        0.5 / 255.0 + 1e-9
    }

    fn inpaint(&self, image: &Tensor, hole: &BinaryMap) -> Result<Tensor> {
        let dir = scratch_dir()?;
        let out = self.run(&dir, image, hole);
        let _ = std::fs::remove_dir_all(&dir);
        out
    }
}

/// Built-in adapters by id; `external` needs [`EXTERNAL_CMD_ENV`] set.
pub fn adapter_by_name(id: &str) -> Result<Box<dyn InpainterAdapter>> {
    match id {
        "identity" => Ok(Box::new(IdentityAdapter)),
        "diffusion" => Ok(Box::new(DiffusionAdapter::default())),
        "external" => match std::env::var(EXTERNAL_CMD_ENV) {
            Ok(command) if !command.is_empty() => Ok(Box::new(ExternalAdapter {
                id: id.to_string(),
                command,
                accepts_guidance: true,
            })),
            _ => Err(CsfError::UnknownAdapter(format!("{id} ({EXTERNAL_CMD_ENV} is not set)"))),
        },
        other => Err(CsfError::UnknownAdapter(other.to_string())),
    }
}

/// Hole-zeroed image and hole mask for one downstream pass.
pub fn adapter_input(guide: Option<&GuidanceImage>, scene: &MaskedScene) -> Result<(Tensor, BinaryMap)> {
    match guide {
        None => Ok((scene.masked_rgb(), scene.mask.bits.clone())),
        Some(g) => {
            if g.dims() != scene.dims() {
                return Err(CsfError::ShapeMismatch(format!(
                    "guide is {:?} but scene is {:?}",
                    g.dims(),
                    scene.dims()
                )));
            }
            let residual = g.residual_mask(scene);
            let n = residual.len();
            let mut px = g.pixels.clone();
            for i in (0..n).filter(|&i| residual.bits()[i]) {
                for c in 0..3 {
                    px.data_mut()[c * n + i] = 0.0;
                }
            }
            Ok((px, residual))
        }
    }
}

/// Run `adapter` on the scene. With a guide (and an adapter that accepts
/// one) the guide-filled pixels become known context and only the residual
/// hole is inpainted; otherwise the original scene is passed through.
pub fn run_downstream(
    guide: Option<&GuidanceImage>,
    scene: &MaskedScene,
    adapter: &dyn InpainterAdapter,
) -> Result<ImageRecord> {
    let guide = guide.filter(|_| adapter.accepts_guidance());
    let (input, hole) = adapter_input(guide, scene)?;
    let fail = |reason: String| CsfError::AdapterFailed {
        id: adapter.id().to_string(),
        reason,
    };
    let out = adapter.inpaint(&input, &hole).map_err(|e| match e {
        CsfError::AdapterFailed { .. } => e,
        other => fail(other.to_string()),
    })?;
    if out.shape() != input.shape() {
        return Err(fail(format!("output shape {:?}, expected {:?}", out.shape(), input.shape())));
    }
    let n = hole.len();
    let tol = adapter.tolerance();
    for i in (0..n).filter(|&i| !hole.bits()[i]) {
        for c in 0..3 {
            let d = (out.data()[c * n + i] - input.data()[c * n + i]).abs();
            if d > tol {
                return Err(fail(format!("known pixel {i} changed by {d:.3e} (tolerance {tol:.1e})")));
            }
        }
    }
    let out = out.map(|v| v.clamp(0.0, 1.0));
    ImageRecord::new(scene.image.id.clone(), out, "").map_err(|e| fail(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{apply_mask, make_center_box_mask};
    use crate::toy::procedural_image;

    fn scene() -> MaskedScene {
        apply_mask(&procedural_image(16, 2), &make_center_box_mask(16, 0.5).unwrap()).unwrap()
    }

    #[test]
    fn identity_with_full_guide_returns_guide_hole() {
        let sc = scene();
        let guide = GuidanceImage {
            pixels: sc.image.pixels.map(|v| 1.0 - v),
            filled: sc.mask.bits.clone(),
            chosen: vec![Some(0); 256],
        };
        // guide must equal the scene outside the hole
        let mut g = guide.clone();
        for i in (0..256).filter(|&i| !sc.mask.bits.bits()[i]) {
            for c in 0..3 {
                g.pixels.data_mut()[c * 256 + i] = sc.image.pixels.data()[c * 256 + i];
            }
        }
        let out = run_downstream(Some(&g), &sc, &IdentityAdapter).unwrap();
        assert_eq!(out.pixels, g.pixels);
    }

    #[test]
    fn baseline_leaves_visible_pixels_and_diffusion_fills_smoothly() {
        let sc = scene();
        let out = run_downstream(None, &sc, &DiffusionAdapter::default()).unwrap();
        for i in (0..256).filter(|&i| !sc.mask.bits.bits()[i]) {
            assert_eq!(out.pixels.data()[i], sc.image.pixels.data()[i]);
        }
        assert!(out.pixels.all_finite());
    }

    #[test]
    fn constant_boundary_diffuses_to_constant() {
        let img = Tensor::full([3, 8, 8], 0.3);
        let hole = BinaryMap::from_fn(8, 8, |y, x| (2..6).contains(&y) && (2..6).contains(&x));
        let out = DiffusionAdapter::default().inpaint(&img, &hole).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn unknown_adapter_names_id() {
        let err = adapter_by_name("lama-xl").err().unwrap();
        assert!(err.to_string().contains("lama-xl"));
    }

    struct Broken;
    impl InpainterAdapter for Broken {
        fn id(&self) -> &str {
            "broken"
        }
        fn accepts_guidance(&self) -> bool {
            false
        }
        fn inpaint(&self, image: &Tensor, _hole: &BinaryMap) -> Result<Tensor> {
            Ok(image.map(|v| 1.0 - v))
        }
    }

    #[test]
    fn adapter_that_repaints_visible_pixels_is_rejected() {
        let err = run_downstream(None, &scene(), &Broken).unwrap_err();
        assert!(matches!(err, CsfError::AdapterFailed { ref id, .. } if id == "broken"));
    }
}
