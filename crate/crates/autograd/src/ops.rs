//! Differentiable operations on [`Var`].
//!
//! Shape violations panic; callers validate user-facing shapes up front.

use std::sync::Arc;

use crate::graph::Var;
use crate::kernels;
use crate::par;
use crate::tensor::Tensor;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn same_shape(a: &Var<'_>, b: &Var<'_>, op: &str) {
    let (sa, sb) = (a.shape(), b.shape());
    assert_eq!(sa, sb, "{op}: shape mismatch {sa:?} vs {sb:?}");
}

impl<'g> Var<'g> {
    fn unary(
        &self,
        f: impl Fn(f64) -> f64,
        // derivative given (input, output)
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'g> {
        let x = self.value();
        let y = x.map(f);
        let y_saved = y.clone();
        self.graph.record(y, &[*self], move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(y_saved.data())
                .map(|((&gv, &xv), &yv)| gv * df(xv, yv))
                .collect();
            vec![Some(Tensor::new(g.shape().to_vec(), data))]
        })
    }

    pub fn add(&self, other: &Var<'g>) -> Var<'g> {
        same_shape(self, other, "add");
        let y = self.value().add(&other.value());
        self.graph
            .record(y, &[*self, *other], |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&self, other: &Var<'g>) -> Var<'g> {
        same_shape(self, other, "sub");
        let y = self.value().zip_map(&other.value(), |a, b| a - b);
        self.graph.record(y, &[*self, *other], |g, _| {
            vec![Some(g.clone()), Some(g.scale(-1.0))]
        })
    }

    pub fn mul(&self, other: &Var<'g>) -> Var<'g> {
        same_shape(self, other, "mul");
        let (a, b) = (self.value(), other.value());
        let y = a.zip_map(&b, |x, y| x * y);
        self.graph.record(y, &[*self, *other], move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&b, |gv, bv| gv * bv)),
                needs[1].then(|| g.zip_map(&a, |gv, av| gv * av)),
            ]
        })
    }

    pub fn div(&self, other: &Var<'g>) -> Var<'g> {
        same_shape(self, other, "div");
        let (a, b) = (self.value(), other.value());
        let y = a.zip_map(&b, |x, y| x / y);
        let y_saved = y.clone();
        self.graph.record(y, &[*self, *other], move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&b, |gv, bv| gv / bv)),
                needs[1].then(|| {
                    let t = g.zip_map(&y_saved, |gv, yv| gv * yv);
                    t.zip_map(&b, |tv, bv| -tv / bv)
                }),
            ]
        })
    }

    /// `self[.., k] + bias[k]`, broadcasting the bias over leading axes.
    pub fn add_bias(&self, bias: &Var<'g>) -> Var<'g> {
        let x = self.value();
        let b = bias.value();
        let k = b.numel();
        assert!(
            k > 0 && x.shape().ends_with(b.shape()),
            "add_bias: bias of shape {:?} does not tile shape {:?}",
            b.shape(),
            x.shape()
        );
        let mut y = x.clone();
        for row in y.data_mut().chunks_mut(k) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        let b_shape = b.shape().to_vec();
        self.graph.record(y, &[*self, *bias], move |g, needs| {
            let gb = needs[1].then(|| {
                let mut acc = vec![0.0; k];
                for row in g.data().chunks(k) {
                    for (a, v) in acc.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                Tensor::new(b_shape.clone(), acc)
            });
            vec![Some(g.clone()), gb]
        })
    }

    /// `self[c, ..] * s[c]` with `s` broadcast over trailing axes.
    pub fn mul_channel(&self, s: &Var<'g>) -> Var<'g> {
        let x = self.value();
        let sv = s.value();
        let c = sv.numel();
        assert!(c > 0 && x.shape()[0] == c, "mul_channel: {c} scales for shape {:?}", x.shape());
        let inner = x.numel() / c;
        let mut y = x.clone();
        for (ci, plane) in y.data_mut().chunks_mut(inner).enumerate() {
            plane.iter_mut().for_each(|v| *v *= sv.data()[ci]);
        }
        let s_shape = sv.shape().to_vec();
        self.graph.record(y, &[*self, *s], move |g, needs| {
            let gx = needs[0].then(|| {
                let mut out = g.clone();
                for (ci, plane) in out.data_mut().chunks_mut(inner).enumerate() {
                    plane.iter_mut().for_each(|v| *v *= sv.data()[ci]);
                }
                out
            });
            let gs = needs[1].then(|| {
                let data = g
                    .data()
                    .chunks(inner)
                    .zip(x.data().chunks(inner))
                    .map(|(gp, xp)| gp.iter().zip(xp).map(|(a, b)| a * b).sum())
                    .collect();
                Tensor::new(s_shape.clone(), data)
            });
            vec![gx, gs]
        })
    }

    pub fn scale(&self, s: f64) -> Var<'g> {
        let y = self.value().scale(s);
        self.graph.record(y, &[*self], move |g, _| vec![Some(g.scale(s))])
    }

    pub fn neg(&self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'g> {
        let y = self.value().map(|v| v + c);
        self.graph.record(y, &[*self], |g, _| vec![Some(g.clone())])
    }

    /// Multiply by a one-element variable.
    pub fn mul_scalar(&self, s: &Var<'g>) -> Var<'g> {
        assert_eq!(s.numel(), 1, "mul_scalar expects a one-element scale");
        let x = self.value();
        let sv = s.value();
        let k = sv.item();
        let y = x.scale(k);
        self.graph.record(y, &[*self, *s], move |g, needs| {
            vec![
                needs[0].then(|| g.scale(k)),
                needs[1].then(|| {
                    let dot: f64 = g.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
                    Tensor::new(sv.shape().to_vec(), vec![dot])
                }),
            ]
        })
    }

    pub fn sigmoid(&self) -> Var<'g> {
        self.unary(
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            |_, y| y * (1.0 - y),
        )
    }

    pub fn exp(&self) -> Var<'g> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Var<'g> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Var<'g> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&self) -> Var<'g> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    /// Absolute value; the subgradient at zero is taken as zero.
    pub fn abs(&self) -> Var<'g> {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn relu(&self) -> Var<'g> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'g> {
        self.unary(
            |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            |x, _| {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            },
        )
    }

    pub fn sum(&self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let y = Tensor::scalar(x.sum());
        self.graph.record(y, &[*self], move |g, _| {
            vec![Some(Tensor::full(shape.clone(), g.item()))]
        })
    }

    pub fn mean(&self) -> Var<'g> {
        let n = self.numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over axis 0: `[a, rest..] -> [rest..]`.
    pub fn sum_leading(&self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        assert!(!shape.is_empty(), "sum_leading on scalar");
        let inner: usize = shape[1..].iter().product();
        let mut acc = vec![0.0; inner];
        for row in x.data().chunks(inner.max(1)) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        let out_shape = if shape.len() == 1 { vec![1] } else { shape[1..].to_vec() };
        let y = Tensor::new(out_shape, acc);
        self.graph.record(y, &[*self], move |g, _| {
            let lead = shape[0];
            let mut data = Vec::with_capacity(lead * inner);
            for _ in 0..lead {
                data.extend_from_slice(g.data());
            }
            vec![Some(Tensor::new(shape.clone(), data))]
        })
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Var<'g> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let y = x.reshape(shape);
        self.graph
            .record(y, &[*self], move |g, _| vec![Some(g.reshape(in_shape.clone()))])
    }

    pub fn matmul(&self, other: &Var<'g>) -> Var<'g> {
        self.matmul_t(other, false, false)
    }

    /// `op(self) · op(other)` for rank-2 operands.
    pub fn matmul_t(&self, other: &Var<'g>, ta: bool, tb: bool) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let (ar, ac) = a.dims2();
        let (br, bc) = b.dims2();
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
        let y = Tensor::new([m, n], kernels::matmul(a.data(), b.data(), m, k, n, ta, tb));
        self.graph.record(y, &[*self, *other], move |g, needs| {
            let gd = g.data();
            // dA = g·op(B)^T, stored to match A's layout
            let ga = needs[0].then(|| {
                if ta {
                    // A stored k×m: dA_store = op(B) · g^T
                    Tensor::new([k, m], kernels::matmul(b.data(), gd, k, n, m, tb, true))
                } else {
                    Tensor::new([m, k], kernels::matmul(gd, b.data(), m, n, k, false, !tb))
                }
            });
            let gb = needs[1].then(|| {
                if tb {
                    // B stored n×k: dB_store = g^T · op(A)
                    Tensor::new([n, k], kernels::matmul(gd, a.data(), n, m, k, true, ta))
                } else {
                    Tensor::new([k, n], kernels::matmul(a.data(), gd, k, m, n, !ta, false))
                }
            });
            vec![ga, gb]
        })
    }

    /// Batched `op(self) · op(other)` for rank-3 operands `[B, ., .]`.
    pub fn bmm(&self, other: &Var<'g>, ta: bool, tb: bool) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let (ba, ar, ac) = a.dims3();
        let (bb, br, bc) = b.dims3();
        assert_eq!(ba, bb, "bmm: batch {ba} vs {bb}");
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "bmm: inner dims {k} vs {k2}");
        let batch = ba;
        let y = Tensor::new(
            [batch, m, n],
            kernels::bmm(a.data(), b.data(), batch, m, k, n, ta, tb),
        );
        self.graph.record(y, &[*self, *other], move |g, needs| {
            let gd = g.data();
            let ga = needs[0].then(|| {
                if ta {
                    Tensor::new([batch, k, m], kernels::bmm(b.data(), gd, batch, k, n, m, tb, true))
                } else {
                    Tensor::new([batch, m, k], kernels::bmm(gd, b.data(), batch, m, n, k, false, !tb))
                }
            });
            let gb = needs[1].then(|| {
                if tb {
                    Tensor::new([batch, n, k], kernels::bmm(gd, a.data(), batch, n, m, k, true, ta))
                } else {
                    Tensor::new([batch, k, n], kernels::bmm(a.data(), gd, batch, k, m, n, !ta, false))
                }
            });
            vec![ga, gb]
        })
    }

    pub fn permute(&self, perm: &[usize]) -> Var<'g> {
        let x = self.value();
        let (data, shape) = kernels::permute(x.data(), x.shape(), perm);
        let inv = kernels::inverse_permutation(perm);
        self.graph.record(Tensor::new(shape, data), &[*self], move |g, _| {
            let (d, s) = kernels::permute(g.data(), g.shape(), &inv);
            vec![Some(Tensor::new(s, d))]
        })
    }

    /// Rank-2 transpose.
    pub fn t(&self) -> Var<'g> {
        self.permute(&[1, 0])
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        assert!(start + len <= shape[axis], "narrow out of range on axis {axis}");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * shape[axis] * inner;
            data.extend_from_slice(&x.data()[base + start * inner..base + (start + len) * inner]);
        }
        self.graph
            .record(Tensor::new(out_shape, data), &[*self], move |g, _| {
                let mut gx = vec![0.0; shape.iter().product()];
                for o in 0..outer {
                    let base = o * shape[axis] * inner;
                    gx[base + start * inner..base + (start + len) * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::new(shape.clone(), gx))]
            })
    }

    /// Concatenate along `axis`; all other axes must agree.
    pub fn concat(parts: &[Var<'g>], axis: usize) -> Var<'g> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let graph = parts[0].graph;
        let values: Vec<Tensor> = parts.iter().map(Var::value).collect();
        let base = values[0].shape().to_vec();
        for v in &values {
            let s = v.shape();
            assert_eq!(s.len(), base.len(), "concat rank mismatch");
            for (ax, (&a, &b)) in s.iter().zip(&base).enumerate() {
                assert!(ax == axis || a == b, "concat: mismatch on axis {ax}: {s:?} vs {base:?}");
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let widths: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = widths.iter().sum();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &w) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        graph.record(Tensor::new(out_shape, data), parts, move |g, needs| {
            let mut offset = 0;
            let mut out = Vec::with_capacity(widths.len());
            for ((&w, shape), &need) in widths.iter().zip(&shapes).zip(needs) {
                if need {
                    let mut d = Vec::with_capacity(outer * w * inner);
                    for o in 0..outer {
                        let s = (o * total + offset) * inner;
                        d.extend_from_slice(&g.data()[s..s + w * inner]);
                    }
                    out.push(Some(Tensor::new(shape.clone(), d)));
                } else {
                    out.push(None);
                }
                offset += w;
            }
            out
        })
    }

    /// Select rows of a rank-2 tensor; indices may repeat.
    pub fn gather_rows(&self, idx: Arc<Vec<usize>>) -> Var<'g> {
        let x = self.value();
        let (rows, cols) = x.dims2();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &r in idx.iter() {
            assert!(r < rows, "gather_rows index {r} out of {rows}");
            data.extend_from_slice(&x.data()[r * cols..(r + 1) * cols]);
        }
        let y = Tensor::new([idx.len(), cols], data);
        self.graph.record(y, &[*self], move |g, _| {
            let mut gx = vec![0.0; rows * cols];
            for (i, &r) in idx.iter().enumerate() {
                for c in 0..cols {
                    gx[r * cols + c] += g.data()[i * cols + c];
                }
            }
            vec![Some(Tensor::new([rows, cols], gx))]
        })
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Var<'g> {
        let x = self.value();
        let k = *x.shape().last().expect("softmax on scalar");
        let mut y = x.clone();
        for row in y.data_mut().chunks_mut(k) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let y_saved = y.clone();
        self.graph.record(y, &[*self], move |g, _| {
            let mut gx = g.clone();
            for (grow, yrow) in gx.data_mut().chunks_mut(k).zip(y_saved.data().chunks(k)) {
                let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                for (gv, yv) in grow.iter_mut().zip(yrow) {
                    *gv = yv * (*gv - dot);
                }
            }
            vec![Some(gx)]
        })
    }

    /// `log(sum(exp(x)))` over the last axis; drops that axis.
    pub fn logsumexp_last(&self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let k = *shape.last().expect("logsumexp on scalar");
        let rows = x.numel() / k;
        let mut lse = Vec::with_capacity(rows);
        let mut soft = x.clone();
        for row in soft.data_mut().chunks_mut(k) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
            lse.push(m + s.ln());
        }
        let out_shape = if shape.len() == 1 { vec![1] } else { shape[..shape.len() - 1].to_vec() };
        self.graph
            .record(Tensor::new(out_shape, lse), &[*self], move |g, _| {
                let mut gx = soft.clone();
                for (row, &gv) in gx.data_mut().chunks_mut(k).zip(g.data()) {
                    row.iter_mut().for_each(|v| *v *= gv);
                }
                vec![Some(gx)]
            })
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Var<'g>, beta: &Var<'g>, eps: f64) -> Var<'g> {
        let x = self.value();
        let k = *x.shape().last().expect("layer_norm on scalar");
        let (gv, bv) = (gamma.value(), beta.value());
        assert_eq!(gv.numel(), k, "layer_norm gamma size");
        assert_eq!(bv.numel(), k, "layer_norm beta size");
        let rows = x.numel() / k;
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(rows);
        for row in xhat.data_mut().chunks_mut(k) {
            let mean = row.iter().sum::<f64>() / k as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let mut y = xhat.clone();
        for row in y.data_mut().chunks_mut(k) {
            for ((v, gm), bt) in row.iter_mut().zip(gv.data()).zip(bv.data()) {
                *v = *v * gm + bt;
            }
        }
        let (g_shape, b_shape) = (gv.shape().to_vec(), bv.shape().to_vec());
        self.graph.record(y, &[*self, *gamma, *beta], move |g, needs| {
            let gx = needs[0].then(|| {
                let mut out = g.clone();
                for ((grow, xrow), &is) in out
                    .data_mut()
                    .chunks_mut(k)
                    .zip(xhat.data().chunks(k))
                    .zip(&inv_std)
                {
                    for (gv_, gm) in grow.iter_mut().zip(gv.data()) {
                        *gv_ *= gm;
                    }
                    let m1 = grow.iter().sum::<f64>() / k as f64;
                    let m2 = grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>() / k as f64;
                    for (gv_, xh) in grow.iter_mut().zip(xrow) {
                        *gv_ = is * (*gv_ - m1 - xh * m2);
                    }
                }
                out
            });
            let gg = needs[1].then(|| {
                let mut acc = vec![0.0; k];
                for (grow, xrow) in g.data().chunks(k).zip(xhat.data().chunks(k)) {
                    for ((a, gv_), xh) in acc.iter_mut().zip(grow).zip(xrow) {
                        *a += gv_ * xh;
                    }
                }
                Tensor::new(g_shape.clone(), acc)
            });
            let gb = needs[2].then(|| {
                let mut acc = vec![0.0; k];
                for grow in g.data().chunks(k) {
                    for (a, gv_) in acc.iter_mut().zip(grow) {
                        *a += gv_;
                    }
                }
                Tensor::new(b_shape.clone(), acc)
            });
            vec![gx, gg, gb]
        })
    }

    /// Stride-1 2-D convolution of a `Cin × H × W` map with a
    /// `Cout × Cin × kh × kw` kernel and symmetric zero padding.
    pub fn conv2d(&self, weight: &Var<'g>, bias: Option<&Var<'g>>, pad: usize) -> Var<'g> {
        let x = self.value();
        let w = weight.value();
        let (cin, h, wd) = x.dims3();
        let ws = w.shape().to_vec();
        assert_eq!(ws.len(), 4, "conv2d weight must be rank 4");
        let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(cin, wcin, "conv2d: input has {cin} channels, weight expects {wcin}");
        let oh = h + 2 * pad + 1 - kh;
        let ow = wd + 2 * pad + 1 - kw;
        let ckk = cin * kh * kw;
        let cols = kernels::im2col(x.data(), cin, h, wd, kh, kw, pad);
        let mut out = kernels::matmul(w.data(), &cols, cout, ckk, oh * ow, false, false);
        if let Some(b) = bias {
            let bv = b.value();
            assert_eq!(bv.numel(), cout, "conv2d bias size");
            for (plane, bb) in out.chunks_mut(oh * ow).zip(bv.data()) {
                plane.iter_mut().for_each(|v| *v += bb);
            }
        }
        let y = Tensor::new([cout, oh, ow], out);
        let mut parents = vec![*self, *weight];
        if let Some(b) = bias {
            parents.push(*b);
        }
        let has_bias = bias.is_some();
        let cols = Arc::new(cols);
        self.graph.record(y, &parents, move |g, needs| {
            let gd = g.data();
            let gx = needs[0].then(|| {
                let gcols = kernels::matmul(w.data(), gd, ckk, cout, oh * ow, true, false);
                Tensor::new([cin, h, wd], kernels::col2im(&gcols, cin, h, wd, kh, kw, pad))
            });
            let gw = needs[1].then(|| {
                Tensor::new(
                    [cout, cin, kh, kw],
                    kernels::matmul(gd, &cols, cout, oh * ow, ckk, false, true),
                )
            });
            let mut out = vec![gx, gw];
            if has_bias {
                out.push(needs[2].then(|| {
                    Tensor::new([cout], gd.chunks(oh * ow).map(|p| p.iter().sum()).collect())
                }));
            }
            out
        })
    }

    /// Bilinear resize of a `C × H × W` map (half-pixel centers).
    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Var<'g> {
        let x = self.value();
        let (c, h, w) = x.dims3();
        if (h, w) == (oh, ow) {
            return *self;
        }
        let y = Tensor::new([c, oh, ow], kernels::resize_bilinear(x.data(), c, h, w, oh, ow));
        self.graph.record(y, &[*self], move |g, _| {
            vec![Some(Tensor::new(
                [c, h, w],
                kernels::resize_bilinear_adjoint(g.data(), c, h, w, oh, ow),
            ))]
        })
    }

    /// 2×2 average pooling with stride 2 on a `C × H × W` map (even H, W).
    pub fn avg_pool2(&self) -> Var<'g> {
        let x = self.value();
        let (c, h, w) = x.dims3();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims, got {h}×{w}");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; c * oh * ow];
        par::chunks_mut(&mut out, oh * ow, 4 * oh * ow, |ci, plane| {
            let src = &x.data()[ci * h * w..(ci + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    plane[y * ow + xx] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        });
        self.graph
            .record(Tensor::new([c, oh, ow], out), &[*self], move |g, _| {
                let mut gx = vec![0.0; c * h * w];
                for ci in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let v = 0.25 * g.data()[ci * oh * ow + y * ow + xx];
                            let i = ci * h * w + 2 * y * w + 2 * xx;
                            gx[i] += v;
                            gx[i + 1] += v;
                            gx[i + w] += v;
                            gx[i + w + 1] += v;
                        }
                    }
                }
                vec![Some(Tensor::new([c, h, w], gx))]
            })
    }
}

impl<'g> std::ops::Add for Var<'g> {
    type Output = Var<'g>;
    fn add(self, rhs: Var<'g>) -> Var<'g> {
        Var::add(&self, &rhs)
    }
}

impl<'g> std::ops::Sub for Var<'g> {
    type Output = Var<'g>;
    fn sub(self, rhs: Var<'g>) -> Var<'g> {
        Var::sub(&self, &rhs)
    }
}

impl<'g> std::ops::Mul for Var<'g> {
    type Output = Var<'g>;
    fn mul(self, rhs: Var<'g>) -> Var<'g> {
        Var::mul(&self, &rhs)
    }
}

impl<'g> std::ops::Neg for Var<'g> {
    type Output = Var<'g>;
    fn neg(self) -> Var<'g> {
        Var::neg(&self)
    }
}
