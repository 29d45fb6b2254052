//! Image-set and per-image metrics: Fréchet distance on pooled classifier
//! features, learned perceptual distance, and masked-region embedding
//! similarity.

use csf_autograd::Tensor;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::assets::{FeatureNet, Lpips};
use crate::data::{ImageRecord, Mask};
use crate::error::{CsfError, Result};

/// Below this many images per set the Fréchet distance is flagged as a
/// small-sample estimate.
pub const FID_SMALL_SAMPLE: usize = 2048;
pub const FID_RIDGE: f64 = 1e-6;
/// Minimum crop side for the masked-region similarity.
pub const MIN_CROP: usize = 8;

fn pooled_features(net: &FeatureNet, images: &[Tensor]) -> Result<DMatrix<f64>> {
    let feats: Vec<Vec<f64>> = csf_autograd::par::map_slice(images, |img| {
        net.features(img)
            .pop()
            .map(|t| t.into_vec())
            .ok_or_else(|| CsfError::BadAsset {
                name: net.name.clone(),
                reason: "no feature tap".into(),
            })
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let d = feats[0].len();
    Ok(DMatrix::from_fn(feats.len(), d, |i, j| feats[i][j]))
}

fn center(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mu = DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n));
    let mut xc = x.clone();
    for mut row in xc.row_iter_mut() {
        row -= mu.transpose();
    }
    (mu, xc)
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let vals = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature matrices (rows
/// are samples). Covariances are compared inside the span of the centered
/// samples, where a ridge of [`FID_RIDGE`] regularizes singular estimates;
/// outside that span both covariances equal the ridge and contribute 0.
pub fn frechet_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(CsfError::InvalidArgument("each set needs at least two images".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(CsfError::ShapeMismatch(format!("feature dims {} vs {}", a.ncols(), b.ncols())));
    }
    let (mu_a, xa) = center(a);
    let (mu_b, xb) = center(b);
    let stacked = DMatrix::from_fn(xa.nrows() + xb.nrows(), xa.ncols(), |i, j| {
        if i < xa.nrows() {
            xa[(i, j)]
        } else {
            xb[(i - xa.nrows(), j)]
        }
    });
    let gram = &stacked * stacked.transpose();
    let eig = SymmetricEigen::new(gram);
    let tol = eig.eigenvalues.max().max(0.0) * 1e-12;
    let keep: Vec<usize> = (0..eig.eigenvalues.len()).filter(|&i| eig.eigenvalues[i] > tol).collect();
    let mean_term = (&mu_a - &mu_b).norm_squared();
    if keep.is_empty() {
        return Ok(mean_term);
    }
    // coordinates of the samples in an orthonormal basis of their span
    let k = keep.len();
    let v = DMatrix::from_fn(eig.eigenvectors.nrows(), k, |i, j| eig.eigenvectors[(i, keep[j])]);
    let inv_sqrt = DMatrix::from_diagonal(&DVector::from_iterator(
        k,
        keep.iter().map(|&i| 1.0 / eig.eigenvalues[i].sqrt()),
    ));
    let coords = &gram_rows(&stacked, &xa) * &v * &inv_sqrt;
    let coords_b = &gram_rows(&stacked, &xb) * &v * &inv_sqrt;
    if k < a.ncols() {
        log::info!("sample covariance is singular (rank {k} < {}); adding ridge {FID_RIDGE}", a.ncols());
    }
    let ridge = DMatrix::identity(k, k) * FID_RIDGE;
    let sa = coords.transpose() * &coords / (a.nrows() - 1) as f64 + &ridge;
    let sb = coords_b.transpose() * &coords_b / (b.nrows() - 1) as f64 + &ridge;
    let ra = sqrt_psd(&sa);
    let cross = SymmetricEigen::new(&ra * &sb * &ra);
    let tr_sqrt: f64 = cross.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let d = mean_term + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

/// `x · stackedᵀ`: inner products of rows of `x` with every stacked sample.
fn gram_rows(stacked: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    x * stacked.transpose()
}

/// Fréchet distance of pooled `net` features between two image sets.
pub fn fid(generated: &[Tensor], reference: &[Tensor], net: &FeatureNet) -> Result<f64> {
    if generated.len() < 2 || reference.len() < 2 {
        return Err(CsfError::InvalidArgument(format!(
            "FID needs at least two images per set, got {} and {}",
            generated.len(),
            reference.len()
        )));
    }
    let n = generated.len().min(reference.len());
    if n < FID_SMALL_SAMPLE {
        log::warn!("FID over {n} images is a small-sample estimate (< {FID_SMALL_SAMPLE}); compare only like-sized runs");
    }
    frechet_distance(&pooled_features(net, generated)?, &pooled_features(net, reference)?)
}

pub fn lpips_metric(a: &ImageRecord, b: &ImageRecord, lpips: &Lpips) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(CsfError::ShapeMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    lpips.distance(&a.pixels, &b.pixels)
}

/// Tight bounding box of the mask, grown to at least `MIN_CROP` per side.
pub fn crop_box(mask: &Mask) -> Result<(usize, usize, usize, usize)> {
    let (h, w) = mask.dims();
    let (mut y0, mut x0, mut y1, mut x1) = mask
        .bits
        .bbox()
        .ok_or_else(|| CsfError::InvalidArgument("mask is empty".into()))?;
    let grow = |lo: &mut usize, hi: &mut usize, limit: usize| {
        let min = MIN_CROP.min(limit);
        if *hi - *lo < min {
            let missing = min - (*hi - *lo);
            let new_lo = lo.saturating_sub(missing / 2);
            let new_hi = (new_lo + min).min(limit);
            *lo = new_hi - min;
            *hi = new_hi;
        }
    };
    if y1 - y0 < MIN_CROP || x1 - x0 < MIN_CROP {
        log::info!("mask bounding box {}×{} padded to the {MIN_CROP}px minimum crop", y1 - y0, x1 - x0);
    }
    grow(&mut y0, &mut y1, h);
    grow(&mut x0, &mut x1, w);
    Ok((y0, x0, y1, x1))
}

fn crop(t: &Tensor, (y0, x0, y1, x1): (usize, usize, usize, usize)) -> Tensor {
    let (c, _, w) = t.dims3();
    let (ch, cw) = (y1 - y0, x1 - x0);
    let mut out = Vec::with_capacity(c * ch * cw);
    for k in 0..c {
        for y in y0..y1 {
            let row = (k * t.shape()[1] + y) * w;
            out.extend_from_slice(&t.data()[row + x0..row + x1]);
        }
    }
    Tensor::new([c, ch, cw], out)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Cosine similarity between embeddings of the mask's bounding-box crop in
/// the restored and ground-truth images.
pub fn clip_at_mask(restored: &ImageRecord, gt: &ImageRecord, mask: &Mask, net: &FeatureNet) -> Result<f64> {
    if restored.dims() != gt.dims() || gt.dims() != mask.dims() {
        return Err(CsfError::ShapeMismatch(format!(
            "restored {:?}, ground truth {:?}, mask {:?}",
            restored.dims(),
            gt.dims(),
            mask.dims()
        )));
    }
    let bbox = crop_box(mask)?;
    let embed = |t: &Tensor| -> Result<Vec<f64>> {
        net.features(&crop(t, bbox))
            .pop()
            .map(Tensor::into_vec)
            .ok_or_else(|| CsfError::BadAsset {
                name: net.name.clone(),
                reason: "no embedding tap".into(),
            })
    };
    Ok(cosine(&embed(&restored.pixels)?, &embed(&gt.pixels)?))
}
