//! Hierarchical windowed-attention encoders and the coarse-to-fine
//! cross-attention decoder that fuses context with candidate features.
//!
//! Feature maps are carried as row-major token matrices `N × C` with
//! `N = side²`. Level 1 is the finest.

use std::sync::Arc;

use csf_autograd::{ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CsfError, Result};
use crate::nn::{Init, Scope};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EncoderDesign {
    /// One encoder over the channel concatenation of context and candidates.
    Single,
    /// Separate context and semantic encoders.
    #[default]
    Dual,
}

impl std::str::FromStr for EncoderDesign {
    type Err = CsfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(EncoderDesign::Single),
            "dual" => Ok(EncoderDesign::Dual),
            other => Err(CsfError::InvalidArgument(format!("unknown encoder design `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub resolution: usize,
    pub patch: usize,
    pub channels: Vec<usize>,
    pub heads: Vec<usize>,
    /// Transformer blocks per encoder level.
    pub depths: Vec<usize>,
    pub window: usize,
    pub mlp_ratio: usize,
    pub candidates: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            resolution: 256,
            patch: 4,
            channels: vec![96, 192, 384, 768],
            heads: vec![3, 6, 12, 24],
            depths: vec![2, 2, 2, 2],
            window: 8,
            mlp_ratio: 4,
            candidates: 3,
        }
    }
}

impl FusionConfig {
    /// Small geometry for 32×32 inputs.
    pub fn toy() -> Self {
        FusionConfig {
            resolution: 32,
            patch: 2,
            channels: vec![16, 32, 64],
            heads: vec![2, 4, 8],
            depths: vec![2, 2, 2],
            window: 4,
            mlp_ratio: 2,
            candidates: 3,
        }
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    /// Spatial side of each level, finest first.
    pub fn sides(&self) -> Vec<usize> {
        let base = self.resolution / self.patch.max(1);
        (0..self.levels()).map(|l| base >> l).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CsfError::Config(m));
        let l = self.levels();
        if l == 0 {
            return bad("at least one level is required".into());
        }
        if self.heads.len() != l || self.depths.len() != l {
            return bad(format!(
                "channels, heads and depths must have equal length ({l}, {}, {})",
                self.heads.len(),
                self.depths.len()
            ));
        }
        if self.patch == 0 || self.window == 0 || self.mlp_ratio == 0 || self.candidates == 0 {
            return bad("patch, window, mlp_ratio and candidates must be positive".into());
        }
        let unit = self.patch << (l - 1);
        if self.resolution == 0 || self.resolution % unit != 0 || (self.resolution / unit) < 1 {
            return bad(format!(
                "resolution {} is not divisible by patch·2^(L−1) = {unit}",
                self.resolution
            ));
        }
        for (i, side) in self.sides().into_iter().enumerate() {
            if side % self.window != 0 {
                return bad(format!("window {} does not divide level {} side {side}", self.window, i + 1));
            }
        }
        for (i, (&c, &h)) in self.channels.iter().zip(&self.heads).enumerate() {
            if h == 0 || c % h != 0 {
                return bad(format!("level {} channels {c} not divisible by heads {h}", i + 1));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PyramidSource {
    Context,
    Semantic,
    Fused,
}

#[derive(Clone, Debug)]
pub struct FeaturePyramid<'g> {
    /// `side² × C_l` tokens per level, finest first.
    pub levels: Vec<Var<'g>>,
    pub sides: Vec<usize>,
    pub source: PyramidSource,
}

impl FeaturePyramid<'_> {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn geometry(&self) -> Vec<(usize, usize)> {
        self.levels.iter().zip(&self.sides).map(|(v, &s)| (s, v.shape()[1])).collect()
    }
}

/// Test and ablation switches for [`fuse`].
#[derive(Clone, Copy, Debug, Default)]
pub struct FuseOptions {
    /// Replace every cross-attention output with zeros.
    pub zero_attention: bool,
}

fn level_name(prefix: &str, l: usize) -> String {
    format!("{prefix}l{}", l + 1)
}

pub fn init_encoder(store: &mut ParamStore, init: &Init, prefix: &str, in_channels: usize, cfg: &FusionConfig) {
    let c0 = cfg.channels[0];
    init.add_linear(store, &format!("{prefix}embed"), in_channels * cfg.patch * cfg.patch, c0, true);
    init.add_layer_norm(store, &format!("{prefix}embed_norm"), c0);
    let table = (2 * cfg.window - 1).pow(2);
    for l in 0..cfg.levels() {
        let c = cfg.channels[l];
        for b in 0..cfg.depths[l] {
            let blk = format!("{}.b{b}", level_name(prefix, l));
            init.add_layer_norm(store, &format!("{blk}.norm1"), c);
            init.add_linear(store, &format!("{blk}.attn.qkv"), c, 3 * c, true);
            init.add_linear(store, &format!("{blk}.attn.proj"), c, c, true);
            init.add_normal(store, &format!("{blk}.attn.rpb"), &[table, cfg.heads[l]], 0.02);
            init.add_layer_norm(store, &format!("{blk}.norm2"), c);
            init.add_linear(store, &format!("{blk}.mlp.fc1"), c, cfg.mlp_ratio * c, true);
            init.add_linear(store, &format!("{blk}.mlp.fc2"), cfg.mlp_ratio * c, c, true);
        }
        if l + 1 < cfg.levels() {
            let m = format!("{prefix}merge{}", l + 1);
            init.add_layer_norm(store, &format!("{m}.norm"), 4 * c);
            init.add_linear(store, &format!("{m}.reduce"), 4 * c, cfg.channels[l + 1], false);
        }
    }
}

pub fn init_fusion(store: &mut ParamStore, init: &Init, cfg: &FusionConfig) {
    for l in 0..cfg.levels() {
        let c = cfg.channels[l];
        let p = level_name("fuse.", l);
        init.add_layer_norm(store, &format!("{p}.q_norm"), c);
        init.add_layer_norm(store, &format!("{p}.kv_norm"), c);
        for proj in ["q", "k", "v", "proj"] {
            init.add_linear(store, &format!("{p}.attn.{proj}"), c, c, true);
        }
        init.add_layer_norm(store, &format!("{p}.norm2"), c);
        init.add_linear(store, &format!("{p}.mlp.fc1"), c, cfg.mlp_ratio * c, true);
        init.add_linear(store, &format!("{p}.mlp.fc2"), cfg.mlp_ratio * c, c, true);
        if l + 1 < cfg.levels() {
            init.add_linear(store, &format!("{p}.up"), cfg.channels[l + 1], c, true);
        }
    }
}

/// Token order that groups a (cyclically shifted) `side × side` map into
/// `window × window` blocks: entry `k` is the source token of slot `k`.
fn window_order(side: usize, window: usize, shift: usize) -> Vec<usize> {
    let nw = side / window;
    let mut idx = Vec::with_capacity(side * side);
    for wy in 0..nw {
        for wx in 0..nw {
            for iy in 0..window {
                for ix in 0..window {
                    let y = (wy * window + iy + shift) % side;
                    let x = (wx * window + ix + shift) % side;
                    idx.push(y * side + x);
                }
            }
        }
    }
    idx
}

fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (k, &p) in perm.iter().enumerate() {
        inv[p] = k;
    }
    inv
}

/// Additive mask keeping attention inside regions that were contiguous
/// before the cyclic shift; `nW × heads × T × T`.
fn shift_mask(side: usize, window: usize, shift: usize, heads: usize) -> Tensor {
    let region = |c: usize| {
        if c < side - window {
            0
        } else if c < side - shift {
            1
        } else {
            2
        }
    };
    let nw = side / window;
    let t = window * window;
    let mut data = Vec::with_capacity(nw * nw * heads * t * t);
    for wy in 0..nw {
        for wx in 0..nw {
            let ids: Vec<usize> = (0..t)
                .map(|k| region(wy * window + k / window) * 3 + region(wx * window + k % window))
                .collect();
            for _ in 0..heads {
                for i in 0..t {
                    for j in 0..t {
                        data.push(if ids[i] == ids[j] { 0.0 } else { -100.0 });
                    }
                }
            }
        }
    }
    Tensor::new([nw * nw, heads, t, t], data)
}

fn relative_index(window: usize) -> Vec<usize> {
    let t = window * window;
    let span = 2 * window - 1;
    let mut idx = Vec::with_capacity(t * t);
    for i in 0..t {
        for j in 0..t {
            let dy = (i / window) as isize - (j / window) as isize + window as isize - 1;
            let dx = (i % window) as isize - (j % window) as isize + window as isize - 1;
            idx.push(dy as usize * span + dx as usize);
        }
    }
    idx
}

/// `[rows, heads·d]` → `[rows/t · heads, t, d]` grouped by window then head.
fn split_heads<'g>(x: Var<'g>, windows: usize, t: usize, heads: usize) -> Var<'g> {
    let d = x.shape()[1] / heads;
    x.reshape([windows, t, heads, d])
        .permute(&[0, 2, 1, 3])
        .reshape([windows * heads, t, d])
}

fn merge_heads<'g>(x: Var<'g>, windows: usize, t: usize, heads: usize) -> Var<'g> {
    let d = x.shape()[2];
    x.reshape([windows, heads, t, d])
        .permute(&[0, 2, 1, 3])
        .reshape([windows * t, heads * d])
}

fn window_self_attention<'g>(
    s: &Scope<'g>,
    name: &str,
    x: Var<'g>,
    side: usize,
    window: usize,
    heads: usize,
    shift: usize,
) -> Var<'g> {
    let c = x.shape()[1];
    let d = c / heads;
    let t = window * window;
    let nw = (side / window).pow(2);
    let order = window_order(side, window, shift);
    let inv = Arc::new(inverse(&order));
    let xw = x.gather_rows(Arc::new(order));
    let qkv = s.linear(&format!("{name}.qkv"), xw);
    let q = split_heads(qkv.narrow(1, 0, c), nw, t, heads);
    let k = split_heads(qkv.narrow(1, c, c), nw, t, heads);
    let v = split_heads(qkv.narrow(1, 2 * c, c), nw, t, heads);
    let rpb = s
        .get(&format!("{name}.rpb"))
        .gather_rows(Arc::new(relative_index(window)))
        .t()
        .reshape([heads, t, t]);
    let mut scores = q
        .bmm(&k, false, true)
        .scale(1.0 / (d as f64).sqrt())
        .reshape([nw, heads, t, t])
        .add_bias(&rpb);
    if shift > 0 {
        scores = scores + s.constant(shift_mask(side, window, shift, heads));
    }
    let attn = scores.reshape([nw * heads, t, t]).softmax_last();
    let out = merge_heads(attn.bmm(&v, false, false), nw, t, heads);
    s.linear(&format!("{name}.proj"), out).gather_rows(inv)
}

fn mlp<'g>(s: &Scope<'g>, name: &str, x: Var<'g>) -> Var<'g> {
    let h = s.linear(&format!("{name}.fc1"), x).gelu();
    s.linear(&format!("{name}.fc2"), h)
}

fn swin_block<'g>(s: &Scope<'g>, blk: &str, x: Var<'g>, side: usize, cfg: &FusionConfig, heads: usize, shifted: bool) -> Var<'g> {
    let shift = if shifted && side > cfg.window { cfg.window / 2 } else { 0 };
    let h = s.layer_norm(&format!("{blk}.norm1"), x);
    let x = x + window_self_attention(s, &format!("{blk}.attn"), h, side, cfg.window, heads, shift);
    let h = s.layer_norm(&format!("{blk}.norm2"), x);
    x + mlp(s, &format!("{blk}.mlp"), h)
}

/// 2×2 neighborhood concatenation, normalization and linear reduction.
fn patch_merge<'g>(s: &Scope<'g>, name: &str, x: Var<'g>, side: usize) -> Var<'g> {
    let half = side / 2;
    let pick = |dy: usize, dx: usize| {
        let idx: Vec<usize> = (0..half * half)
            .map(|k| (2 * (k / half) + dy) * side + 2 * (k % half) + dx)
            .collect();
        x.gather_rows(Arc::new(idx))
    };
    let cat = Var::concat(&[pick(0, 0), pick(1, 0), pick(0, 1), pick(1, 1)], 1);
    let h = s.layer_norm(&format!("{name}.norm"), cat);
    s.linear(&format!("{name}.reduce"), h)
}

/// Run one encoder over a `Cin × H × W` input.
pub fn encode<'g>(
    s: &Scope<'g>,
    prefix: &str,
    cfg: &FusionConfig,
    input: Var<'g>,
    source: PyramidSource,
) -> Result<FeaturePyramid<'g>> {
    let shape = input.shape();
    if shape.len() != 3 || shape[1] != cfg.resolution || shape[2] != cfg.resolution {
        return Err(CsfError::ShapeMismatch(format!(
            "encoder expects C×{r}×{r}, got {shape:?}",
            r = cfg.resolution
        )));
    }
    let embed_w = s.store().get(&format!("{prefix}embed.weight")).map(|t| t.shape()[0]);
    let cin = shape[0];
    if embed_w != Some(cin * cfg.patch * cfg.patch) {
        return Err(CsfError::ShapeMismatch(format!(
            "encoder `{prefix}` was built for a different input width than {cin} channels"
        )));
    }
    let p = cfg.patch;
    let side = cfg.resolution / p;
    let patches = input
        .reshape([cin, side, p, side, p])
        .permute(&[1, 3, 0, 2, 4])
        .reshape([side * side, cin * p * p]);
    let mut x = s.layer_norm(&format!("{prefix}embed_norm"), s.linear(&format!("{prefix}embed"), patches));
    let sides = cfg.sides();
    let mut levels = Vec::with_capacity(cfg.levels());
    for l in 0..cfg.levels() {
        for b in 0..cfg.depths[l] {
            let blk = format!("{}.b{b}", level_name(prefix, l));
            x = swin_block(s, &blk, x, sides[l], cfg, cfg.heads[l], b % 2 == 1);
        }
        levels.push(x);
        if l + 1 < cfg.levels() {
            x = patch_merge(s, &format!("{prefix}merge{}", l + 1), x, sides[l]);
        }
    }
    Ok(FeaturePyramid { levels, sides, source })
}

fn cross_attention<'g>(
    s: &Scope<'g>,
    name: &str,
    q: Var<'g>,
    kv: &[Var<'g>],
    side: usize,
    window: usize,
    heads: usize,
) -> Var<'g> {
    let n = side * side;
    let t = window * window;
    let nw = n / t;
    let p = kv.len();
    let order = window_order(side, window, 0);
    let inv = Arc::new(inverse(&order));
    // window w attends to its own slots in every candidate map
    let mut kv_order = Vec::with_capacity(nw * p * t);
    for w in 0..nw {
        for c in 0..p {
            kv_order.extend(order[w * t..(w + 1) * t].iter().map(|&i| c * n + i));
        }
    }
    let qw = q.gather_rows(Arc::new(order));
    let pool = if p == 1 { kv[0] } else { Var::concat(kv, 0) };
    let kvw = pool.gather_rows(Arc::new(kv_order));
    let d = q.shape()[1] / heads;
    let qh = split_heads(s.linear(&format!("{name}.q"), qw), nw, t, heads);
    let kh = split_heads(s.linear(&format!("{name}.k"), kvw), nw, p * t, heads);
    let vh = split_heads(s.linear(&format!("{name}.v"), kvw), nw, p * t, heads);
    let attn = qh.bmm(&kh, false, true).scale(1.0 / (d as f64).sqrt()).softmax_last();
    let out = merge_heads(attn.bmm(&vh, false, false), nw, t, heads);
    s.linear(&format!("{name}.proj"), out).gather_rows(inv)
}

/// Fuse context with candidate pyramids, coarsest level first. At each
/// finer level the query is the projected, upsampled coarser fusion plus
/// the context features at that level.
pub fn fuse<'g>(
    s: &Scope<'g>,
    cfg: &FusionConfig,
    ctx: &FeaturePyramid<'g>,
    sems: &[FeaturePyramid<'g>],
    opts: FuseOptions,
) -> Result<FeaturePyramid<'g>> {
    if sems.is_empty() {
        return Err(CsfError::InvalidArgument("fusion needs at least one semantic pyramid".into()));
    }
    let geo = ctx.geometry();
    let expected: Vec<(usize, usize)> = cfg.sides().into_iter().zip(cfg.channels.iter().copied()).collect();
    if geo != expected {
        return Err(CsfError::ShapeMismatch(format!("context pyramid {geo:?}, expected {expected:?}")));
    }
    for (i, sp) in sems.iter().enumerate() {
        if sp.geometry() != geo {
            return Err(CsfError::ShapeMismatch(format!(
                "semantic pyramid {i} has geometry {:?}, context has {geo:?}",
                sp.geometry()
            )));
        }
    }
    let levels = cfg.levels();
    let mut fused: Vec<Option<Var<'g>>> = vec![None; levels];
    for l in (0..levels).rev() {
        let p = level_name("fuse.", l);
        let side = ctx.sides[l];
        let query = match fused.get(l + 1).copied().flatten() {
            None => ctx.levels[l],
            Some(coarse) => {
                let proj = s.linear(&format!("{p}.up"), coarse);
                let cs = ctx.sides[l + 1];
                let c = proj.shape()[1];
                let up = proj.t().reshape([c, cs, cs]).resize_bilinear(side, side).reshape([c, side * side]).t();
                up + ctx.levels[l]
            }
        };
        let h = if opts.zero_attention {
            query
        } else {
            let qn = s.layer_norm(&format!("{p}.q_norm"), query);
            let kv: Vec<Var<'g>> = sems
                .iter()
                .map(|sp| s.layer_norm(&format!("{p}.kv_norm"), sp.levels[l]))
                .collect();
            query + cross_attention(s, &format!("{p}.attn"), qn, &kv, side, cfg.window, cfg.heads[l])
        };
        let out = h + mlp(s, &format!("{p}.mlp"), s.layer_norm(&format!("{p}.norm2"), h));
        fused[l] = Some(out);
    }
    Ok(FeaturePyramid {
        levels: fused.into_iter().map(|v| v.expect("every level fused")).collect(),
        sides: ctx.sides.clone(),
        source: PyramidSource::Fused,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use csf_autograd::Graph;
    use rand::{Rng, SeedableRng};

    fn random_input(c: usize, res: usize, seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::new([c, res, res], (0..c * res * res).map(|_| rng.random::<f64>()).collect())
    }

    fn setup(cfg: &FusionConfig) -> ParamStore {
        let mut store = ParamStore::new();
        let init = Init::new(1);
        init_encoder(&mut store, &init, "ctx.", 4, cfg);
        init_encoder(&mut store, &init, "sem.", 4, cfg);
        init_fusion(&mut store, &init, cfg);
        store
    }

    #[test]
    fn default_geometry_is_256_with_four_levels() {
        let cfg = FusionConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.sides(), vec![64, 32, 16, 8]);
        let bad = FusionConfig {
            resolution: 200,
            ..FusionConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad_window = FusionConfig {
            window: 6,
            ..FusionConfig::default()
        };
        assert!(bad_window.validate().is_err());
    }

    #[test]
    fn window_order_is_a_permutation() {
        for shift in [0, 2] {
            let mut o = window_order(8, 4, shift);
            o.sort();
            assert_eq!(o, (0..64).collect::<Vec<_>>());
        }
    }

    #[test]
    fn encoder_shapes_and_finiteness() {
        let cfg = FusionConfig::toy();
        let store = setup(&cfg);
        let g = Graph::new();
        let s = Scope::trainable(&g, &store);
        let pyr = encode(&s, "ctx.", &cfg, g.constant(Tensor::zeros([4, 32, 32])), PyramidSource::Context).unwrap();
        assert_eq!(pyr.geometry(), vec![(16, 16), (8, 32), (4, 64)]);
        assert!(pyr.levels.iter().all(|v| v.value().all_finite()));
    }

    #[test]
    fn fuse_is_invariant_to_candidate_order() {
        let cfg = FusionConfig::toy();
        let store = setup(&cfg);
        let g = Graph::new();
        let s = Scope::trainable(&g, &store);
        let ctx = encode(&s, "ctx.", &cfg, g.constant(random_input(4, 32, 1)), PyramidSource::Context).unwrap();
        let sems: Vec<_> = (0..3)
            .map(|i| encode(&s, "sem.", &cfg, g.constant(random_input(4, 32, 10 + i)), PyramidSource::Semantic).unwrap())
            .collect();
        let a = fuse(&s, &cfg, &ctx, &sems, FuseOptions::default()).unwrap();
        let rev: Vec<_> = sems.iter().rev().cloned().collect();
        let b = fuse(&s, &cfg, &ctx, &rev, FuseOptions::default()).unwrap();
        for (x, y) in a.levels.iter().zip(&b.levels) {
            assert!(x.value().max_abs_diff(&y.value()) < 1e-5);
        }
        assert_eq!(a.geometry(), ctx.geometry());
    }

    #[test]
    fn zero_attention_ignores_candidates() {
        let cfg = FusionConfig::toy();
        let store = setup(&cfg);
        let g = Graph::new();
        let s = Scope::trainable(&g, &store);
        let ctx = encode(&s, "ctx.", &cfg, g.constant(random_input(4, 32, 1)), PyramidSource::Context).unwrap();
        let sem_a = encode(&s, "sem.", &cfg, g.constant(random_input(4, 32, 2)), PyramidSource::Semantic).unwrap();
        let sem_b = encode(&s, "sem.", &cfg, g.constant(random_input(4, 32, 3)), PyramidSource::Semantic).unwrap();
        let opts = FuseOptions { zero_attention: true };
        let a = fuse(&s, &cfg, &ctx, &[sem_a.clone()], opts).unwrap();
        let b = fuse(&s, &cfg, &ctx, &[sem_b.clone()], opts).unwrap();
        for (x, y) in a.levels.iter().zip(&b.levels) {
            assert_eq!(x.value(), y.value());
        }
        let c = fuse(&s, &cfg, &ctx, &[sem_a], FuseOptions::default()).unwrap();
        let d = fuse(&s, &cfg, &ctx, &[sem_b], FuseOptions::default()).unwrap();
        assert!(c.levels[0].value().max_abs_diff(&d.levels[0].value()) > 0.0);
    }

    #[test]
    fn shift_mask_blocks_wrapped_regions() {
        let m = shift_mask(8, 4, 2, 1);
        // last window mixes three regions along each axis
        let t = 16;
        let last = &m.data()[3 * t * t..4 * t * t];
        assert!(last.iter().any(|&v| v < 0.0));
        let first = &m.data()[..t * t];
        assert!(first.iter().all(|&v| v == 0.0));
    }
}
