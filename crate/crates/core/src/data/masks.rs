use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BinaryMap, Mask, MaskKind};
use crate::error::{CsfError, Result};

/// Attempts before a random-brush mask that misses its coverage band errors.
pub const BRUSH_MAX_ATTEMPTS: usize = 20;

/// Stroke budget per attempt when topping up toward the lower bound.
const MAX_STROKES_PER_ATTEMPT: usize = 64;

/// Centered square hole with side `round(resolution * sqrt(area_fraction))`.
pub fn make_center_box_mask(resolution: usize, area_fraction: f64) -> Result<Mask> {
    if !(area_fraction > 0.0 && area_fraction < 1.0) {
        return Err(CsfError::InvalidArgument(format!(
            "center box area fraction must lie in (0, 1), got {area_fraction}"
        )));
    }
    if resolution == 0 {
        return Err(CsfError::InvalidArgument("resolution must be positive".into()));
    }
    let side = ((resolution as f64 * area_fraction.sqrt()).round() as usize).min(resolution);
    let start = (resolution - side) / 2;
    let end = start + side;
    let bits = BinaryMap::from_fn(resolution, resolution, |y, x| {
        (start..end).contains(&y) && (start..end).contains(&x)
    });
    Ok(Mask {
        bits,
        kind: MaskKind::CenterBox,
        area_fraction,
        seed: 0,
    })
}

/// Geometry of the stroke-and-rectangle generator, in pixels at 256².
/// Scaled linearly for other resolutions.
#[derive(Clone, Debug)]
pub struct BrushParams {
    pub min_width: f64,
    pub max_width: f64,
    pub min_strokes: usize,
    pub max_strokes: usize,
    pub min_rects: usize,
    pub max_rects: usize,
    pub min_vertices: usize,
    pub max_vertices: usize,
}

impl Default for BrushParams {
    fn default() -> Self {
        BrushParams {
            min_width: 12.0,
            max_width: 40.0,
            min_strokes: 4,
            max_strokes: 8,
            min_rects: 1,
            max_rects: 3,
            min_vertices: 4,
            max_vertices: 12,
        }
    }
}

/// Union of random-walk brush strokes and rectangles whose coverage lands in
/// `[min_frac, max_frac]`. Identical seeds give identical masks.
pub fn make_random_brush_mask(
    resolution: usize,
    min_frac: f64,
    max_frac: f64,
    seed: u64,
) -> Result<Mask> {
    make_random_brush_mask_with(resolution, min_frac, max_frac, seed, &BrushParams::default())
}

pub(crate) fn make_random_brush_mask_with(
    resolution: usize,
    min_frac: f64,
    max_frac: f64,
    seed: u64,
    params: &BrushParams,
) -> Result<Mask> {
    if !(0.0 < min_frac && min_frac < max_frac && max_frac < 1.0) {
        return Err(CsfError::InvalidArgument(format!(
            "brush coverage band must satisfy 0 < min < max < 1, got [{min_frac}, {max_frac}]"
        )));
    }
    if resolution < 4 {
        return Err(CsfError::InvalidArgument(format!(
            "resolution {resolution} too small for brush masks"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = resolution as f64 / 256.0;
    let mut last = 0.0;
    for _ in 0..BRUSH_MAX_ATTEMPTS {
        let mut bits = BinaryMap::new(resolution, resolution, false);
        let n_rects = rng.random_range(params.min_rects..=params.max_rects);
        for _ in 0..n_rects {
            draw_rect(&mut bits, &mut rng);
        }
        let n_strokes = rng.random_range(params.min_strokes..=params.max_strokes);
        for _ in 0..n_strokes {
            draw_stroke(&mut bits, &mut rng, params, scale);
        }
        let mut extra = 0;
        while bits.coverage() < min_frac && extra < MAX_STROKES_PER_ATTEMPT {
            draw_stroke(&mut bits, &mut rng, params, scale);
            extra += 1;
        }
        last = bits.coverage();
        if (min_frac..=max_frac).contains(&last) {
            return Ok(Mask {
                bits,
                kind: MaskKind::RandomBrush,
                area_fraction: last,
                seed,
            });
        }
    }
    Err(CsfError::MaskGeneration(format!(
        "coverage band [{min_frac}, {max_frac}] not reached after {BRUSH_MAX_ATTEMPTS} attempts \
         (last attempt covered {last:.4})"
    )))
}

fn draw_rect(bits: &mut BinaryMap, rng: &mut ChaCha8Rng) {
    let res = bits.height();
    let lo = (res / 8).max(1);
    let hi = (res / 2).max(lo + 1);
    let rh = rng.random_range(lo..hi);
    let rw = rng.random_range(lo..hi);
    let y0 = rng.random_range(0..=res - rh);
    let x0 = rng.random_range(0..=res - rw);
    for y in y0..y0 + rh {
        for x in x0..x0 + rw {
            bits.set(y, x, true);
        }
    }
}

fn draw_stroke(bits: &mut BinaryMap, rng: &mut ChaCha8Rng, params: &BrushParams, scale: f64) {
    let res = bits.height() as f64;
    let width = rng.random_range(params.min_width..=params.max_width) * scale;
    let radius = (width / 2.0).max(0.5);
    let n_vertices = rng.random_range(params.min_vertices..=params.max_vertices);
    let mut y = rng.random_range(0.0..res);
    let mut x = rng.random_range(0.0..res);
    let mut angle = rng.random_range(0.0..std::f64::consts::TAU);
    for _ in 0..n_vertices {
        angle += rng.random_range(-1.2..1.2);
        let len = rng.random_range(res / 16.0..res / 4.0);
        let ny = (y + len * angle.sin()).clamp(0.0, res - 1.0);
        let nx = (x + len * angle.cos()).clamp(0.0, res - 1.0);
        draw_segment(bits, (y, x), (ny, nx), radius);
        y = ny;
        x = nx;
    }
}

/// Set every pixel center within `radius` of the segment.
fn draw_segment(bits: &mut BinaryMap, a: (f64, f64), b: (f64, f64), radius: f64) {
    let (h, w) = bits.dims();
    let y_lo = (a.0.min(b.0) - radius).floor().max(0.0) as usize;
    let y_hi = ((a.0.max(b.0) + radius).ceil() as usize).min(h - 1);
    let x_lo = (a.1.min(b.1) - radius).floor().max(0.0) as usize;
    let x_hi = ((a.1.max(b.1) + radius).ceil() as usize).min(w - 1);
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len2 = dy * dy + dx * dx;
    let r2 = radius * radius;
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let t = if len2 > 0.0 {
                (((py - a.0) * dy + (px - a.1) * dx) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (cy, cx) = (a.0 + t * dy, a.1 + t * dx);
            if (py - cy).powi(2) + (px - cx).powi(2) <= r2 {
                bits.set(y, x, true);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn center_box_side_and_coverage() {
        let m50 = make_center_box_mask(256, 0.5).unwrap();
        assert_eq!(m50.bits.count(), 181 * 181);
        assert!((m50.coverage() - 0.49991).abs() < 1e-4);
        let m80 = make_center_box_mask(256, 0.8).unwrap();
        assert_eq!(m80.bits.count(), 229 * 229);
        assert!((m80.coverage() - 0.80020).abs() < 1e-4);
    }

    #[test]
    fn center_box_is_centered() {
        let m = make_center_box_mask(256, 0.5).unwrap();
        assert_eq!(m.bits.bbox(), Some((37, 37, 218, 218)));
    }

    #[test]
    fn center_box_near_one_covers_everything() {
        let m = make_center_box_mask(256, 1.0 - 1e-6).unwrap();
        assert_eq!(m.bits.count(), 256 * 256);
    }

    #[test]
    fn center_box_rejects_out_of_range() {
        assert!(make_center_box_mask(256, 0.0).is_err());
        assert!(make_center_box_mask(256, 1.0).is_err());
        assert!(make_center_box_mask(256, -0.2).is_err());
    }

    #[test]
    fn brush_is_deterministic() {
        let a = make_random_brush_mask(256, 0.5, 0.8, 7).unwrap();
        let b = make_random_brush_mask(256, 0.5, 0.8, 7).unwrap();
        assert_eq!(a.bits, b.bits);
        let c = make_random_brush_mask(256, 0.5, 0.8, 8).unwrap();
        assert_ne!(a.bits, c.bits);
    }

    #[test]
    fn brush_degenerate_band_errors_or_lands() {
        match make_random_brush_mask(256, 0.99, 0.995, 1) {
            Ok(m) => assert!((0.99..=0.995).contains(&m.coverage())),
            Err(e) => assert!(matches!(e, CsfError::MaskGeneration(_))),
        }
    }

    #[test]
    fn brush_rejects_bad_band() {
        assert!(make_random_brush_mask(256, 0.8, 0.5, 1).is_err());
        assert!(make_random_brush_mask(256, 0.0, 0.5, 1).is_err());
    }

    #[test]
    fn brush_hits_band_for_many_seeds() {
        for seed in 0..100 {
            let m = make_random_brush_mask(256, 0.5, 0.8, seed).unwrap();
            assert!((0.5..=0.8).contains(&m.coverage()), "seed {seed}: {}", m.coverage());
            assert_eq!(m.kind, MaskKind::RandomBrush);
        }
    }

    #[test]
    fn brush_scales_to_small_resolutions() {
        for seed in 0..20 {
            let m = make_random_brush_mask(32, 0.5, 0.8, seed).unwrap();
            assert_eq!(m.dims(), (32, 32));
            assert!((0.5..=0.8).contains(&m.coverage()));
        }
    }
}
