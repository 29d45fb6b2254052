//! Parameter initialization and the small layer vocabulary shared by the
//! encoders, the fusion decoder and the score heads.

use csf_autograd::kernels;
use csf_autograd::{Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const LN_EPS: f64 = 1e-5;

/// Binds named tensors from a store onto a graph, either as trainable
/// leaves or as constants.
#[derive(Clone, Copy)]
pub struct Scope<'g> {
    pub graph: &'g Graph,
    store: &'g ParamStore,
    frozen: bool,
}

impl<'g> Scope<'g> {
    pub fn trainable(graph: &'g Graph, store: &'g ParamStore) -> Self {
        Scope {
            graph,
            store,
            frozen: false,
        }
    }

    pub fn frozen(graph: &'g Graph, store: &'g ParamStore) -> Self {
        Scope {
            graph,
            store,
            frozen: true,
        }
    }

    pub fn store(&self) -> &'g ParamStore {
        self.store
    }

    pub fn get(&self, name: &str) -> Var<'g> {
        if self.frozen {
            self.graph.frozen(self.store, name)
        } else {
            self.graph.param(self.store, name)
        }
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    pub fn constant(&self, t: Tensor) -> Var<'g> {
        self.graph.constant(t)
    }

    /// `x · W + b` for row-major tokens `x: N × in`.
    pub fn linear(&self, name: &str, x: Var<'g>) -> Var<'g> {
        let y = x.matmul(&self.get(&format!("{name}.weight")));
        let bias = format!("{name}.bias");
        if self.has(&bias) {
            y.add_bias(&self.get(&bias))
        } else {
            y
        }
    }

    pub fn conv(&self, name: &str, x: Var<'g>, pad: usize) -> Var<'g> {
        let w = self.get(&format!("{name}.weight"));
        let bias = format!("{name}.bias");
        if self.has(&bias) {
            x.conv2d(&w, Some(&self.get(&bias)), pad)
        } else {
            x.conv2d(&w, None, pad)
        }
    }

    pub fn layer_norm(&self, name: &str, x: Var<'g>) -> Var<'g> {
        x.layer_norm(
            &self.get(&format!("{name}.gamma")),
            &self.get(&format!("{name}.beta")),
            LN_EPS,
        )
    }
}

fn fnv(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seeded initializer. Each tensor draws from its own stream keyed by name,
/// so values do not depend on construction order.
#[derive(Clone, Copy, Debug)]
pub struct Init {
    pub seed: u64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { seed }
    }

    fn normal(&self, name: &str, shape: &[usize], std: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv(name));
        let dist = Normal::new(0.0, std).expect("positive std");
        let n: usize = shape.iter().product();
        // truncate at two standard deviations
        let data = (0..n)
            .map(|_| loop {
                let v: f64 = dist.sample(&mut rng);
                if v.abs() <= 2.0 * std {
                    break v;
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data)
    }

    pub fn add_normal(&self, store: &mut ParamStore, name: &str, shape: &[usize], std: f64) {
        store.insert(name, self.normal(name, shape, std));
    }

    pub fn add_linear(&self, store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool) {
        let w = format!("{name}.weight");
        store.insert(w.clone(), self.normal(&w, &[fan_in, fan_out], 0.02));
        if bias {
            store.insert(format!("{name}.bias"), Tensor::zeros([fan_out]));
        }
    }

    /// He-normal conv kernel plus zero bias.
    pub fn add_conv(&self, store: &mut ParamStore, name: &str, cout: usize, cin: usize, k: usize) {
        let w = format!("{name}.weight");
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        store.insert(w.clone(), self.normal(&w, &[cout, cin, k, k], std));
        store.insert(format!("{name}.bias"), Tensor::zeros([cout]));
    }

    pub fn add_layer_norm(&self, store: &mut ParamStore, name: &str, dim: usize) {
        store.insert(format!("{name}.gamma"), Tensor::ones([dim]));
        store.insert(format!("{name}.beta"), Tensor::zeros([dim]));
    }
}

/// `N × C` tokens in row-major spatial order to a `C × h × w` map.
pub fn tokens_to_map<'g>(x: Var<'g>, h: usize, w: usize) -> Var<'g> {
    let c = x.shape()[1];
    x.t().reshape([c, h, w])
}

pub fn map_to_tokens(x: Var<'_>) -> Var<'_> {
    let s = x.shape();
    x.reshape([s[0], s[1] * s[2]]).t()
}

/// Shrink a `C × H × W` map: exact power-of-two factors use repeated 2×2
/// averaging (anti-aliased), anything else falls back to one bilinear pass.
pub fn downsample<'g>(x: Var<'g>, oh: usize, ow: usize) -> Var<'g> {
    let mut x = x;
    loop {
        let s = x.shape();
        let (h, w) = (s[1], s[2]);
        if (h, w) == (oh, ow) {
            return x;
        }
        if h % 2 == 0 && w % 2 == 0 && h / 2 >= oh && w / 2 >= ow && h > oh && w > ow {
            x = x.avg_pool2();
        } else {
            return x.resize_bilinear(oh, ow);
        }
    }
}

/// Tensor counterpart of [`downsample`].
pub fn downsample_tensor(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (c, mut h, mut w) = x.dims3();
    let mut data = x.data().to_vec();
    while (h, w) != (oh, ow) {
        if h % 2 == 0 && w % 2 == 0 && h / 2 >= oh && w / 2 >= ow && h > oh && w > ow {
            data = kernels::resize_bilinear(&data, c, h, w, h / 2, w / 2);
            h /= 2;
            w /= 2;
        } else {
            data = kernels::resize_bilinear(&data, c, h, w, oh, ow);
            h = oh;
            w = ow;
        }
    }
    Tensor::new([c, h, w], data)
}

/// Bilinear resize of a `C × H × W` tensor.
pub fn resize_tensor(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (c, h, w) = x.dims3();
    if (h, w) == (oh, ow) {
        return x.clone();
    }
    Tensor::new([c, oh, ow], kernels::resize_bilinear(x.data(), c, h, w, oh, ow))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_order_independent() {
        let init = Init::new(3);
        let mut a = ParamStore::new();
        init.add_conv(&mut a, "x", 4, 2, 3);
        init.add_linear(&mut a, "y", 5, 6, true);
        let mut b = ParamStore::new();
        init.add_linear(&mut b, "y", 5, 6, true);
        init.add_conv(&mut b, "x", 4, 2, 3);
        assert_eq!(a, b);
        let mut c = ParamStore::new();
        Init::new(4).add_conv(&mut c, "x", 4, 2, 3);
        assert_ne!(a.get("x.weight"), c.get("x.weight"));
    }

    #[test]
    fn downsample_by_four_is_block_mean() {
        let data: Vec<f64> = (0..64).map(f64::from).collect();
        let t = Tensor::new([1, 8, 8], data.clone());
        let d = downsample_tensor(&t, 2, 2);
        let block = |by: usize, bx: usize| {
            let mut s = 0.0;
            for y in 0..4 {
                for x in 0..4 {
                    s += data[(by * 4 + y) * 8 + bx * 4 + x];
                }
            }
            s / 16.0
        };
        for by in 0..2 {
            for bx in 0..2 {
                assert!((d.data()[by * 2 + bx] - block(by, bx)).abs() < 1e-12);
            }
        }
        let g = Graph::new();
        let v = downsample(g.constant(t), 2, 2);
        assert!(v.value().max_abs_diff(&d) < 1e-12);
    }

    #[test]
    fn token_map_roundtrip() {
        let g = Graph::new();
        let t = Tensor::new([6, 2], (0..12).map(f64::from).collect());
        let m = tokens_to_map(g.constant(t.clone()), 2, 3);
        assert_eq!(m.shape(), vec![2, 2, 3]);
        // channel 1 at (row 1, col 2) is token 5's second entry
        assert_eq!(m.value().data()[6 + 5], 11.0);
        assert_eq!(map_to_tokens(m).value(), t);
    }
}
