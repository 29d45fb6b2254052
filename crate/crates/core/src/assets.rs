//! Frozen feature networks: the perceptual extractor, the LPIPS backbone,
//! the FID pool-feature network and the CLIP-style image encoder.
//!
//! Each asset is a sequential convolutional network stored as
//! `<dir>/<name>.safetensors`, with its layer list in the `spec` metadata
//! entry. Without an asset directory, seeded built-in networks with the same
//! interfaces are used instead.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use csf_autograd::{Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::error::{CsfError, Result};
use crate::nn::{self, Init, Scope};

pub const VGG: &str = "vgg19";
pub const LPIPS: &str = "lpips";
pub const INCEPTION: &str = "inception";
pub const CLIP: &str = "clip";

/// Environment variable naming a directory of asset archives.
pub const ASSET_DIR_ENV: &str = "CSF_ASSET_DIR";

pub const PERCEPTUAL_TAPS: [&str; 4] = ["relu1_1", "relu2_1", "relu3_1", "relu4_1"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Layer {
    Conv {
        name: String,
        cin: usize,
        cout: usize,
        k: usize,
    },
    Relu,
    AvgPool,
    GlobalAvgPool,
    /// Record the current activation under `name`.
    Tap { name: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input_mean: [f64; 3],
    pub input_std: [f64; 3],
    /// Square side inputs are resized to before the first layer, if any.
    #[serde(default)]
    pub input_size: Option<usize>,
    pub layers: Vec<Layer>,
}

impl NetSpec {
    pub fn taps(&self) -> Vec<String> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Tap { name } => Some(name.clone()),
                _ => None,
            })
            .collect()
    }

    fn check(&self, name: &str, weights: &ParamStore) -> Result<()> {
        let bad = |reason: String| CsfError::BadAsset {
            name: name.to_string(),
            reason,
        };
        let mut channels = 3;
        for layer in &self.layers {
            if let Layer::Conv { name: conv, cin, cout, k } = layer {
                if *cin != channels {
                    return Err(bad(format!("layer `{conv}` expects {cin} channels, gets {channels}")));
                }
                let w = weights
                    .get(&format!("{conv}.weight"))
                    .ok_or_else(|| bad(format!("missing tensor `{conv}.weight`")))?;
                if w.shape() != [*cout, *cin, *k, *k] {
                    return Err(bad(format!("`{conv}.weight` has shape {:?}", w.shape())));
                }
                if k % 2 == 0 {
                    return Err(bad(format!("`{conv}` has even kernel {k}")));
                }
                channels = *cout;
            }
        }
        Ok(())
    }
}

/// A frozen sequential conv net with named intermediate taps.
#[derive(Clone, Debug)]
pub struct FeatureNet {
    pub name: String,
    pub spec: NetSpec,
    pub weights: ParamStore,
}

impl FeatureNet {
    pub fn new(name: impl Into<String>, spec: NetSpec, weights: ParamStore) -> Result<Self> {
        let name = name.into();
        spec.check(&name, &weights)?;
        Ok(FeatureNet { name, spec, weights })
    }

    /// Run on a `3 × H × W` image in `[0, 1]`, returning the tapped
    /// activations in layer order. Differentiable with respect to `x`;
    /// the weights enter the graph as constants.
    pub fn forward<'g>(&'g self, graph: &'g Graph, x: Var<'g>) -> Vec<Var<'g>> {
        self.forward_taps(graph, x, usize::MAX)
    }

    /// Like [`FeatureNet::forward`] but stops after `max_taps` taps.
    pub fn forward_taps<'g>(&'g self, graph: &'g Graph, x: Var<'g>, max_taps: usize) -> Vec<Var<'g>> {
        let scope = Scope::frozen(graph, &self.weights);
        let mut h = match self.spec.input_size {
            Some(s) => {
                let shape = x.shape();
                if shape[1] >= s && shape[2] >= s {
                    nn::downsample(x, s, s)
                } else {
                    x.resize_bilinear(s, s)
                }
            }
            None => x,
        };
        let inv_std: Vec<f64> = self.spec.input_std.iter().map(|s| 1.0 / s).collect();
        let shift: Vec<f64> = self
            .spec
            .input_mean
            .iter()
            .zip(&self.spec.input_std)
            .map(|(m, s)| -m / s)
            .collect();
        let shape = h.shape();
        let hw = shape[1] * shape[2];
        let offset: Vec<f64> = shift.iter().flat_map(|&v| std::iter::repeat_n(v, hw)).collect();
        h = h.mul_channel(&graph.constant(Tensor::new([3], inv_std)))
            + graph.constant(Tensor::new(shape, offset));
        let mut taps = Vec::new();
        for layer in &self.spec.layers {
            match layer {
                Layer::Conv { name, k, .. } => h = scope.conv(name, h, k / 2),
                Layer::Relu => h = h.relu(),
                Layer::AvgPool => h = h.avg_pool2(),
                Layer::GlobalAvgPool => {
                    let s = h.shape();
                    h = h.reshape([s[0], s[1] * s[2]]).t().sum_leading().scale(1.0 / (s[1] * s[2]) as f64)
                }
                Layer::Tap { .. } => {
                    taps.push(h);
                    if taps.len() >= max_taps {
                        break;
                    }
                }
            }
        }
        taps
    }

    /// Tensor-only convenience around [`FeatureNet::forward`].
    pub fn features(&self, x: &Tensor) -> Vec<Tensor> {
        let g = Graph::new();
        let v = g.constant(x.clone());
        self.forward(&g, v).iter().map(Var::value).collect()
    }

    pub fn checksum(&self) -> u64 {
        self.weights.checksum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = HashMap::new();
        meta.insert("spec".to_string(), serde_json::to_string(&self.spec)?);
        meta.insert("name".to_string(), self.name.clone());
        archive::save(path, &self.weights, &meta)
    }

    pub fn load(name: &str, path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(CsfError::MissingAsset {
                name: name.to_string(),
                path: path.to_path_buf(),
            });
        }
        let (weights, meta) = archive::load(path)?;
        let spec_json = meta.get("spec").ok_or_else(|| CsfError::BadAsset {
            name: name.to_string(),
            reason: "archive metadata has no `spec` entry".into(),
        })?;
        let spec: NetSpec = serde_json::from_str(spec_json).map_err(|e| CsfError::BadAsset {
            name: name.to_string(),
            reason: e.to_string(),
        })?;
        FeatureNet::new(name, spec, weights)
    }
}

fn conv(name: &str, cin: usize, cout: usize) -> Layer {
    Layer::Conv {
        name: name.into(),
        cin,
        cout,
        k: 3,
    }
}

fn tap(name: &str) -> Layer {
    Layer::Tap { name: name.into() }
}

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Narrow VGG-shaped stack with taps at the first ReLU of each block.
fn vgg_like_spec(width: usize) -> NetSpec {
    let (c1, c2, c3, c4) = (width, 2 * width, 4 * width, 8 * width);
    NetSpec {
        input_mean: IMAGENET_MEAN,
        input_std: IMAGENET_STD,
        input_size: None,
        layers: vec![
            conv("conv1_1", 3, c1),
            Layer::Relu,
            tap("relu1_1"),
            conv("conv1_2", c1, c1),
            Layer::Relu,
            Layer::AvgPool,
            conv("conv2_1", c1, c2),
            Layer::Relu,
            tap("relu2_1"),
            Layer::AvgPool,
            conv("conv3_1", c2, c3),
            Layer::Relu,
            tap("relu3_1"),
            Layer::AvgPool,
            conv("conv4_1", c3, c4),
            Layer::Relu,
            tap("relu4_1"),
        ],
    }
}

fn pool_feature_spec(dim: usize) -> NetSpec {
    NetSpec {
        input_mean: [0.5; 3],
        input_std: [0.5; 3],
        input_size: Some(32),
        layers: vec![
            conv("conv1", 3, 16),
            Layer::Relu,
            Layer::AvgPool,
            conv("conv2", 16, 32),
            Layer::Relu,
            Layer::AvgPool,
            conv("conv3", 32, 64),
            Layer::Relu,
            Layer::Conv {
                name: "proj".into(),
                cin: 64,
                cout: dim,
                k: 1,
            },
            Layer::Relu,
            Layer::GlobalAvgPool,
            tap("pool"),
        ],
    }
}

fn clip_like_spec() -> NetSpec {
    NetSpec {
        input_mean: [0.481, 0.458, 0.408],
        input_std: [0.269, 0.261, 0.276],
        input_size: Some(32),
        layers: vec![
            conv("conv1", 3, 16),
            Layer::Relu,
            Layer::AvgPool,
            conv("conv2", 16, 32),
            Layer::Relu,
            Layer::AvgPool,
            conv("conv3", 32, 64),
            Layer::Relu,
            Layer::GlobalAvgPool,
            tap("embed"),
        ],
    }
}

fn builtin_weights(spec: &NetSpec, seed: u64) -> ParamStore {
    let init = Init::new(seed);
    let mut store = ParamStore::new();
    for layer in &spec.layers {
        if let Layer::Conv { name, cin, cout, k } = layer {
            init.add_conv(&mut store, name, *cout, *cin, *k);
            // small positive bias keeps ReLU taps from being identically zero
            store.insert(format!("{name}.bias"), Tensor::full([*cout], 0.01));
        }
    }
    store
}

/// Deterministic stand-in for the named asset.
pub fn builtin(name: &str, seed: u64, pool_dim: usize) -> Result<FeatureNet> {
    let spec = match name {
        VGG => vgg_like_spec(8),
        LPIPS => vgg_like_spec(8),
        INCEPTION => pool_feature_spec(pool_dim),
        CLIP => clip_like_spec(),
        other => {
            return Err(CsfError::MissingAsset {
                name: other.to_string(),
                path: PathBuf::from("<builtin>"),
            })
        }
    };
    let salt = match name {
        VGG => 0x5647_4700,
        LPIPS => 0x4c50_4950,
        INCEPTION => 0x494e_4345,
        _ => 0x434c_4950,
    };
    let weights = builtin_weights(&spec, seed ^ salt);
    FeatureNet::new(name, spec, weights)
}

#[derive(Clone, Debug, PartialEq)]
pub enum AssetSource {
    Builtin { seed: u64, pool_dim: usize },
    Directory(PathBuf),
}

/// Resolves named assets once and shares them.
#[derive(Debug)]
pub struct AssetStore {
    source: AssetSource,
    cache: Mutex<HashMap<String, Arc<FeatureNet>>>,
}

pub const DEFAULT_POOL_DIM: usize = 2048;

impl AssetStore {
    pub fn new(source: AssetSource) -> Self {
        AssetStore {
            source,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn builtin() -> Self {
        Self::new(AssetSource::Builtin {
            seed: 0,
            pool_dim: DEFAULT_POOL_DIM,
        })
    }

    pub fn directory(dir: impl Into<PathBuf>) -> Self {
        Self::new(AssetSource::Directory(dir.into()))
    }

    /// Directory from [`ASSET_DIR_ENV`] when set, built-ins otherwise.
    pub fn from_env() -> Self {
        match std::env::var_os(ASSET_DIR_ENV) {
            Some(dir) if !dir.is_empty() => Self::directory(PathBuf::from(dir)),
            _ => Self::builtin(),
        }
    }

    pub fn source(&self) -> &AssetSource {
        &self.source
    }

    pub fn get(&self, name: &str) -> Result<Arc<FeatureNet>> {
        if let Some(net) = self.cache.lock().expect("asset cache poisoned").get(name) {
            return Ok(net.clone());
        }
        let net = Arc::new(match &self.source {
            AssetSource::Builtin { seed, pool_dim } => builtin(name, *seed, *pool_dim)?,
            AssetSource::Directory(dir) => {
                FeatureNet::load(name, &dir.join(format!("{name}.safetensors")))?
            }
        });
        self.cache
            .lock()
            .expect("asset cache poisoned")
            .insert(name.to_string(), net.clone());
        Ok(net)
    }

    pub fn perceptual(&self) -> Result<Arc<FeatureNet>> {
        self.get(VGG)
    }

    pub fn lpips(&self) -> Result<Lpips> {
        Ok(Lpips { net: self.get(LPIPS)? })
    }

    /// Write every asset this store resolves to `dir`.
    pub fn export(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        for name in [VGG, LPIPS, INCEPTION, CLIP] {
            let path = dir.join(format!("{name}.safetensors"));
            self.get(name)?.save(&path)?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Learned perceptual distance: channel-normalized tap features, squared
/// differences averaged over taps. Range `[0, 1]` for non-negative taps.
#[derive(Clone, Debug)]
pub struct Lpips {
    pub net: Arc<FeatureNet>,
}

impl Lpips {
    fn normalized(&self, x: &Tensor) -> Vec<Tensor> {
        self.net
            .features(x)
            .into_iter()
            .map(|f| {
                let (c, h, w) = f.dims3();
                let mut out = f.clone();
                for p in 0..h * w {
                    let norm = (0..c).map(|ch| f.data()[ch * h * w + p].powi(2)).sum::<f64>().sqrt() + 1e-10;
                    for ch in 0..c {
                        out.data_mut()[ch * h * w + p] /= norm;
                    }
                }
                out
            })
            .collect()
    }

    /// Per-pixel distance at the input resolution (each tap's map is
    /// bilinearly upsampled and the taps averaged).
    pub fn distance_map(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() || a.rank() != 3 {
            return Err(CsfError::ShapeMismatch(format!(
                "lpips inputs {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let (_, h, w) = a.dims3();
        let fa = self.normalized(a);
        let fb = self.normalized(b);
        let weight = 0.5 / fa.len() as f64;
        let mut acc = Tensor::zeros([1, h, w]);
        for (ta, tb) in fa.iter().zip(&fb) {
            let (c, th, tw) = ta.dims3();
            let mut m = vec![0.0; th * tw];
            for ch in 0..c {
                for (p, mv) in m.iter_mut().enumerate() {
                    let d = ta.data()[ch * th * tw + p] - tb.data()[ch * th * tw + p];
                    *mv += d * d;
                }
            }
            let up = nn::resize_tensor(&Tensor::new([1, th, tw], m), h, w);
            acc.accumulate(&up.scale(weight));
        }
        Ok(acc)
    }

    /// Mean distance over the whole image.
    pub fn distance(&self, a: &Tensor, b: &Tensor) -> Result<f64> {
        if a.shape() != b.shape() || a.rank() != 3 {
            return Err(CsfError::ShapeMismatch(format!(
                "lpips inputs {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let fa = self.normalized(a);
        let fb = self.normalized(b);
        let weight = 0.5 / fa.len() as f64;
        let mut total = 0.0;
        for (ta, tb) in fa.iter().zip(&fb) {
            let (_, th, tw) = ta.dims3();
            let sq: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y).powi(2)).sum();
            total += weight * sq / (th * tw) as f64;
        }
        Ok(total)
    }
}
