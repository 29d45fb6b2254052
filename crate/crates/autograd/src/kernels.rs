//! Raw numeric kernels over row-major slices. Shapes are checked by callers.

use crate::par;

fn transpose_copy(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Row `i` of `op(A) · op(B)` written into `out_row` (length `n`).
///
/// `a` is already in logical `m × k` layout. `b` is stored `k × n`, or `n × k`
/// when `tb` is set.
#[inline]
fn matmul_row(out_row: &mut [f64], a_row: &[f64], b: &[f64], k: usize, n: usize, tb: bool) {
    if tb {
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            *o = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    } else {
        out_row.iter_mut().for_each(|o| *o = 0.0);
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `op(A) · op(B)` where `op` optionally transposes. Logical shapes are
/// `m × k` and `k × n`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, ta: bool, tb: bool) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let a_owned;
    let a = if ta {
        a_owned = transpose_copy(a, k, m);
        &a_owned[..]
    } else {
        a
    };
    let mut out = vec![0.0; m * n];
    if n == 0 {
        return out;
    }
    par::chunks_mut(&mut out, n, k * n, |i, row| {
        matmul_row(row, &a[i * k..(i + 1) * k], b, k, n, tb);
    });
    out
}

/// Batched matmul over `batch` independent products.
#[allow(clippy::too_many_arguments)]
pub fn bmm(
    a: &[f64],
    b: &[f64],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * n];
    if m * n == 0 {
        return out;
    }
    par::chunks_mut(&mut out, m * n, m * k * n, |bi, chunk| {
        let a_blk = &a[bi * m * k..(bi + 1) * m * k];
        let b_blk = &b[bi * k * n..(bi + 1) * k * n];
        let a_owned;
        let a_blk = if ta {
            a_owned = transpose_copy(a_blk, k, m);
            &a_owned[..]
        } else {
            a_blk
        };
        for i in 0..m {
            matmul_row(
                &mut chunk[i * n..(i + 1) * n],
                &a_blk[i * k..(i + 1) * k],
                b_blk,
                k,
                n,
                tb,
            );
        }
    });
    out
}

/// Unfold a `C × H × W` map into `(C·kh·kw) × (H_out·W_out)` columns for a
/// stride-1 convolution with symmetric zero padding.
pub fn im2col(x: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize, pad: usize) -> Vec<f64> {
    let oh = h + 2 * pad + 1 - kh;
    let ow = w + 2 * pad + 1 - kw;
    let mut cols = vec![0.0; c * kh * kw * oh * ow];
    par::chunks_mut(&mut cols, oh * ow, oh * ow, |row, out| {
        let ci = row / (kh * kw);
        let ky = (row / kw) % kh;
        let kx = row % kw;
        for oy in 0..oh {
            let iy = oy as isize + ky as isize - pad as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            for ox in 0..ow {
                let ix = ox as isize + kx as isize - pad as isize;
                if ix < 0 || ix >= w as isize {
                    continue;
                }
                out[oy * ow + ox] = x[ci * h * w + iy as usize * w + ix as usize];
            }
        }
    });
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `C × H × W` map.
pub fn col2im(cols: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize, pad: usize) -> Vec<f64> {
    let oh = h + 2 * pad + 1 - kh;
    let ow = w + 2 * pad + 1 - kw;
    let mut x = vec![0.0; c * h * w];
    par::chunks_mut(&mut x, h * w, kh * kw * oh * ow, |ci, plane| {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = ox as isize + kx as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        plane[iy as usize * w + ix as usize] += src[oy * ow + ox];
                    }
                }
            }
        }
    });
    x
}

/// One axis of a bilinear resampling (half-pixel centers, edge clamped).
#[derive(Clone, Debug)]
pub struct LinearTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl LinearTaps {
    pub fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut lo = Vec::with_capacity(output);
        let mut hi = Vec::with_capacity(output);
        let mut frac = Vec::with_capacity(output);
        for o in 0..output {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let l = (src.floor() as usize).min(input - 1);
            let h = (l + 1).min(input - 1);
            lo.push(l);
            hi.push(h);
            frac.push(if h == l { 0.0 } else { src - l as f64 });
        }
        LinearTaps { lo, hi, frac }
    }
}

/// Bilinear resize of a `C × H × W` map to `C × oh × ow`.
pub fn resize_bilinear(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ty = LinearTaps::new(h, oh);
    let tx = LinearTaps::new(w, ow);
    let mut out = vec![0.0; c * oh * ow];
    par::chunks_mut(&mut out, oh * ow, 4 * oh * ow, |ci, plane| {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            for ox in 0..ow {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                plane[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    });
    out
}

/// Adjoint of [`resize_bilinear`].
pub fn resize_bilinear_adjoint(
    g: &[f64],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let ty = LinearTaps::new(h, oh);
    let tx = LinearTaps::new(w, ow);
    let mut out = vec![0.0; c * h * w];
    par::chunks_mut(&mut out, h * w, 4 * oh * ow, |ci, plane| {
        let gp = &g[ci * oh * ow..(ci + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            for ox in 0..ow {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let v = gp[oy * ow + ox];
                plane[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                plane[y0 * w + x1] += v * (1.0 - fy) * fx;
                plane[y1 * w + x0] += v * fy * (1.0 - fx);
                plane[y1 * w + x1] += v * fy * fx;
            }
        }
    });
    out
}

/// General axis permutation. `perm[i]` names the source axis of output axis `i`.
pub fn permute(x: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    assert_eq!(perm.len(), rank, "permutation rank mismatch");
    let src_strides = crate::tensor::strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides_for_out: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let n = x.len();
    let mut out = vec![0.0; n];
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for o in out.iter_mut() {
        *o = x[src];
        // odometer increment over output index
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += strides_for_out[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= strides_for_out[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_transpose_flags_agree() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive_matmul(&a, &b, m, k, n);
        let at = transpose_copy(&a, m, k);
        let bt = transpose_copy(&b, k, n);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let aa = if ta { &at } else { &a };
            let bb = if tb { &bt } else { &b };
            let got = matmul(aa, bb, m, k, n, ta, tb);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resize_down_by_two_is_box_average() {
        let x: Vec<f64> = (0..16).map(f64::from).collect();
        let y = resize_bilinear(&x, 1, 4, 4, 2, 2);
        assert_eq!(y, vec![2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn resize_identity_when_same_size() {
        let x: Vec<f64> = (0..12).map(|i| i as f64 * 0.5).collect();
        assert_eq!(resize_bilinear(&x, 1, 3, 4, 3, 4), x);
    }

    #[test]
    fn resize_adjoint_matches_dot_product() {
        let (c, h, w, oh, ow) = (2, 3, 5, 6, 4);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.7).sin()).collect();
        let g: Vec<f64> = (0..c * oh * ow).map(|i| (i as f64 * 0.3).cos()).collect();
        let y = resize_bilinear(&x, c, h, w, oh, ow);
        let xt = resize_bilinear_adjoint(&g, c, h, w, oh, ow);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&xt).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (c, h, w, k, pad) = (2, 4, 5, 3, 1);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.9).sin()).collect();
        let cols = im2col(&x, c, h, w, k, k, pad);
        let g: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.2).cos()).collect();
        let back = col2im(&g, c, h, w, k, k, pad);
        let lhs: f64 = cols.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn permute_roundtrip() {
        let shape = [2, 3, 4];
        let x: Vec<f64> = (0..24).map(f64::from).collect();
        let perm = [2, 0, 1];
        let (y, ys) = permute(&x, &shape, &perm);
        assert_eq!(ys, vec![4, 2, 3]);
        // y[k, i, j] == x[i, j, k]
        assert_eq!(y[1 * 6 + 1 * 3 + 2], x[1 * 12 + 2 * 4 + 1]);
        let (z, zs) = permute(&y, &ys, &inverse_permutation(&perm));
        assert_eq!(zs, shape.to_vec());
        assert_eq!(z, x);
    }
}
