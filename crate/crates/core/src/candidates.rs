//! Amodal-completion candidates: generation through a pluggable backend,
//! consistency scoring against the visible region, and top-P selection.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use csf_autograd::{par, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assets::Lpips;
use crate::data::{self, BinaryMap, ImageRecord, MaskedScene};
use crate::error::{CsfError, Result};

/// Normalizer for the MSE similarity, `1 / (1 + mse / MSE_SCALE)`.
pub const MSE_SCALE: f64 = 0.01;

pub const DEFAULT_N: usize = 8;
pub const DEFAULT_P: usize = 3;

/// Environment variable holding the command line of the external
/// amodal-completion backend.
pub const AMODAL_CMD_ENV: &str = "CSF_AMODAL_CMD";

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateCompletion {
    /// `3 × H × W`; meaningful only where `validity` is set.
    pub values: Tensor,
    pub validity: BinaryMap,
    pub backend_id: String,
}

impl CandidateCompletion {
    pub fn new(values: Tensor, validity: BinaryMap, backend_id: impl Into<String>) -> Result<Self> {
        let (c, h, w) = values.dims3();
        if c != 3 || (h, w) != validity.dims() {
            return Err(CsfError::ShapeMismatch(format!(
                "candidate values {:?} vs validity {:?}",
                values.shape(),
                validity.dims()
            )));
        }
        let n = h * w;
        for ch in 0..3 {
            for (i, &ok) in validity.bits().iter().enumerate() {
                let v = values.data()[ch * n + i];
                if ok && !(v.is_finite() && (0.0..=1.0).contains(&v)) {
                    return Err(CsfError::InvalidArgument(format!(
                        "candidate value {v} outside [0, 1] at a valid pixel"
                    )));
                }
            }
        }
        Ok(CandidateCompletion {
            values,
            validity,
            backend_id: backend_id.into(),
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.validity.dims()
    }

    /// RGB zeroed outside the validity region.
    pub fn masked_values(&self) -> Tensor {
        let (h, w) = self.dims();
        let n = h * w;
        let mut out = self.values.clone();
        for ch in 0..3 {
            for (i, &ok) in self.validity.bits().iter().enumerate() {
                if !ok {
                    out.data_mut()[ch * n + i] = 0.0;
                }
            }
        }
        out
    }

    /// Encoder input: masked RGB with the validity map as a fourth channel.
    pub fn encoder_input(&self) -> Tensor {
        let (h, w) = self.dims();
        let mut data = self.masked_values().into_vec();
        data.extend(self.validity.to_plane());
        Tensor::new([4, h, w], data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyScore {
    pub s_mse: f64,
    pub s_lpips: f64,
    pub s_valid: f64,
}

/// Which similarity ranks candidates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum ScoreVariant {
    #[serde(rename = "mse")]
    Mse,
    #[serde(rename = "lpips")]
    Lpips,
    #[default]
    #[serde(rename = "mse+lpips")]
    MseLpips,
}

impl ScoreVariant {
    pub const ALL: [ScoreVariant; 3] = [ScoreVariant::Mse, ScoreVariant::Lpips, ScoreVariant::MseLpips];

    pub fn value(self, s: &ConsistencyScore) -> f64 {
        match self {
            ScoreVariant::Mse => s.s_mse,
            ScoreVariant::Lpips => s.s_lpips,
            ScoreVariant::MseLpips => s.s_valid,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreVariant::Mse => "mse",
            ScoreVariant::Lpips => "lpips",
            ScoreVariant::MseLpips => "mse+lpips",
        }
    }
}

impl std::str::FromStr for ScoreVariant {
    type Err = CsfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(ScoreVariant::Mse),
            "lpips" => Ok(ScoreVariant::Lpips),
            "mse+lpips" | "mse_lpips" => Ok(ScoreVariant::MseLpips),
            other => Err(CsfError::InvalidArgument(format!("unknown score variant `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub initial: Vec<CandidateCompletion>,
    pub scores: Vec<ConsistencyScore>,
    /// Indices into `initial`, best first.
    pub selected: Vec<usize>,
}

impl CandidateSet {
    pub fn selected_candidates(&self) -> Vec<CandidateCompletion> {
        self.selected.iter().map(|&i| self.initial[i].clone()).collect()
    }

    /// Keep only the first `p` selections.
    pub fn truncated(&self, p: usize) -> CandidateSet {
        let mut out = self.clone();
        out.selected.truncate(p.max(1));
        out
    }
}

/// Produces amodal completions for a masked scene.
pub trait AmodalBackend {
    fn id(&self) -> &str;

    /// Up to `count` completions. Per-sample failures may shorten the list.
    fn complete(&self, scene: &MaskedScene, count: usize, seed: u64) -> Result<Vec<CandidateCompletion>>;

    /// Whether concurrent calls on one instance are allowed.
    fn reentrant(&self) -> bool {
        false
    }
}

pub fn generate_candidates(
    scene: &MaskedScene,
    backend: &dyn AmodalBackend,
    n: usize,
    seed: u64,
) -> Result<Vec<CandidateCompletion>> {
    if n == 0 {
        return Err(CsfError::InvalidArgument("candidate count must be at least 1".into()));
    }
    let mut out = backend.complete(scene, n, seed)?;
    out.truncate(n);
    if out.is_empty() {
        return Err(CsfError::NoCandidates {
            backend: backend.id().to_string(),
        });
    }
    if out.len() < n {
        log::warn!(
            "backend `{}` returned {} of {n} candidates for `{}`",
            backend.id(),
            out.len(),
            scene.image.id
        );
    }
    Ok(out)
}

fn masked_to_region(x: &Tensor, region: &BinaryMap) -> Tensor {
    let n = region.len();
    let mut out = x.clone();
    for ch in 0..3 {
        for (i, &ok) in region.bits().iter().enumerate() {
            if !ok {
                out.data_mut()[ch * n + i] = 0.0;
            }
        }
    }
    out
}

/// Compare a candidate to the scene on `validity ∩ visible`, inverting both
/// errors to similarities in `[0, 1]`.
pub fn consistency_score(
    candidate: &CandidateCompletion,
    scene: &MaskedScene,
    lpips: &Lpips,
) -> Result<ConsistencyScore> {
    if candidate.dims() != scene.dims() {
        return Err(CsfError::ShapeMismatch(format!(
            "candidate is {:?} but scene is {:?}",
            candidate.dims(),
            scene.dims()
        )));
    }
    let region = candidate.validity.and(&scene.visible());
    let count = region.count();
    if count == 0 {
        return Err(CsfError::EmptyOverlap);
    }
    let cand = masked_to_region(&candidate.values, &region);
    let img = masked_to_region(&scene.image.pixels, &region);
    let sq: f64 = cand.data().iter().zip(img.data()).map(|(a, b)| (a - b).powi(2)).sum();
    let mse = sq / (3 * count) as f64;
    let map = lpips.distance_map(&cand, &img)?;
    let lp: f64 = map
        .data()
        .iter()
        .zip(region.bits())
        .filter(|(_, &ok)| ok)
        .map(|(v, _)| v)
        .sum::<f64>()
        / count as f64;
    let s_mse = 1.0 / (1.0 + mse / MSE_SCALE);
    let s_lpips = (1.0 - lp).clamp(0.0, 1.0);
    Ok(ConsistencyScore {
        s_mse,
        s_lpips,
        s_valid: s_mse + s_lpips,
    })
}

pub fn score_all(
    candidates: &[CandidateCompletion],
    scene: &MaskedScene,
    lpips: &Lpips,
) -> Result<Vec<ConsistencyScore>> {
    par::map_slice(candidates, |c| consistency_score(c, scene, lpips))
        .into_iter()
        .collect()
}

/// Top `p` by combined score; ties go to the lower index.
pub fn select_top_p(
    candidates: Vec<CandidateCompletion>,
    scores: Vec<ConsistencyScore>,
    p: usize,
) -> Result<CandidateSet> {
    select_top_p_by(candidates, scores, p, ScoreVariant::MseLpips)
}

pub fn select_top_p_by(
    candidates: Vec<CandidateCompletion>,
    scores: Vec<ConsistencyScore>,
    p: usize,
    variant: ScoreVariant,
) -> Result<CandidateSet> {
    if candidates.is_empty() {
        return Err(CsfError::InvalidArgument("no candidates to select from".into()));
    }
    if candidates.len() != scores.len() {
        return Err(CsfError::ShapeMismatch(format!(
            "{} candidates but {} scores",
            candidates.len(),
            scores.len()
        )));
    }
    if p == 0 {
        return Err(CsfError::InvalidArgument("p must be at least 1".into()));
    }
    if candidates.len() < p {
        log::warn!("only {} candidates available, selecting all (p = {p})", candidates.len());
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    // stable sort keeps lower indices first among equal scores
    order.sort_by(|&a, &b| variant.value(&scores[b]).total_cmp(&variant.value(&scores[a])));
    order.truncate(p);
    Ok(CandidateSet {
        initial: candidates,
        scores,
        selected: order,
    })
}

/// Generate, score and select in one pass.
pub fn build_candidate_set(
    scene: &MaskedScene,
    backend: &dyn AmodalBackend,
    lpips: &Lpips,
    n: usize,
    p: usize,
    seed: u64,
) -> Result<CandidateSet> {
    let cands = generate_candidates(scene, backend, n, seed)?;
    let scores = score_all(&cands, scene, lpips)?;
    select_top_p(cands, scores, p)
}

fn noise_blend(gt: &Tensor, level: impl Fn(usize) -> f64, rng: &mut ChaCha8Rng) -> Tensor {
    let (_, h, w) = gt.dims3();
    let n = h * w;
    let mut out = gt.clone();
    for ch in 0..3 {
        for i in 0..n {
            let noise: f64 = rng.random();
            let c = level(i);
            let v = &mut out.data_mut()[ch * n + i];
            *v = ((1.0 - c) * *v + c * noise).clamp(0.0, 1.0);
        }
    }
    out
}

/// Distinct dilation radii for `n` candidates.
fn dilation_radii(res: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let max_r = (res / 8).max(2).max(n);
    let mut pool: Vec<usize> = (1..=max_r).collect();
    pool.shuffle(rng);
    pool.truncate(n);
    pool
}

/// Test oracle: candidate `i` is the ground truth blended with seeded
/// uniform noise at `corruption[i]`, valid on the hole plus a dilated ring.
pub fn synth_candidates(
    gt: &ImageRecord,
    scene: &MaskedScene,
    n: usize,
    corruption: &[f64],
    seed: u64,
) -> Result<Vec<CandidateCompletion>> {
    if corruption.len() != n {
        return Err(CsfError::InvalidArgument(format!(
            "{} corruption levels for {n} candidates",
            corruption.len()
        )));
    }
    if let Some(c) = corruption.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(CsfError::InvalidArgument(format!("corruption level {c} outside [0, 1]")));
    }
    if gt.dims() != scene.dims() {
        return Err(CsfError::ShapeMismatch("ground truth and scene differ in size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radii = dilation_radii(gt.height(), n, &mut rng);
    let mut out = Vec::with_capacity(n);
    for (i, &level) in corruption.iter().enumerate() {
        let mut crng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64));
        let values = noise_blend(&gt.pixels, |_| level, &mut crng);
        let validity = scene.mask.bits.or(&scene.mask.bits.dilate(radii[i]));
        out.push(CandidateCompletion::new(values, validity, "oracle")?);
    }
    Ok(out)
}

/// Oracle variant where every candidate is clean on one band of the hole
/// and noisy elsewhere, with a per-candidate noise level on the visible ring.
/// Per-pixel selection can then beat any single candidate.
pub fn synth_segmentwise(
    gt: &ImageRecord,
    scene: &MaskedScene,
    n: usize,
    noise: f64,
    seed: u64,
) -> Result<Vec<CandidateCompletion>> {
    if gt.dims() != scene.dims() {
        return Err(CsfError::ShapeMismatch("ground truth and scene differ in size".into()));
    }
    let (h, w) = gt.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radii = dilation_radii(h, n, &mut rng);
    let (y0, x0, y1, x1) = scene.mask.bits.bbox().unwrap_or((0, 0, h, w));
    let vertical: bool = rng.random();
    let (lo, hi) = if vertical { (x0, x1) } else { (y0, y1) };
    let span = (hi - lo) as f64 / n as f64;
    let mut out = Vec::with_capacity(n);
    for (i, &radius) in radii.iter().enumerate() {
        let a = lo as f64 + span * (i as f64 - 0.25);
        let b = lo as f64 + span * (i as f64 + 1.25);
        let ring: f64 = rng.random_range(0.0..0.5 * noise);
        let hole = &scene.mask.bits;
        let level = |p: usize| {
            let coord = if vertical { p % w } else { p / w } as f64 + 0.5;
            if !hole.bits()[p] {
                ring
            } else if (a..b).contains(&coord) {
                0.0
            } else {
                noise
            }
        };
        let mut crng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64));
        let values = noise_blend(&gt.pixels, level, &mut crng);
        let validity = hole.or(&hole.dilate(radius));
        out.push(CandidateCompletion::new(values, validity, "oracle")?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub enum OraclePlan {
    /// Corruption levels, cycled when more candidates are requested.
    Levels(Vec<f64>),
    SegmentWise { noise: f64 },
}

/// Builds candidates from the scene's own ground truth. Only meaningful
/// for synthetic evaluation.
#[derive(Clone, Debug)]
pub struct OracleBackend {
    pub plan: OraclePlan,
}

impl OracleBackend {
    pub fn levels(levels: Vec<f64>) -> Self {
        OracleBackend {
            plan: OraclePlan::Levels(levels),
        }
    }

    /// Evenly spaced corruption from clean to fully noisy.
    pub fn graded(n: usize) -> Self {
        let levels = (0..n).map(|i| i as f64 / (n.max(2) - 1) as f64).collect();
        Self::levels(levels)
    }

    pub fn segmentwise(noise: f64) -> Self {
        OracleBackend {
            plan: OraclePlan::SegmentWise { noise },
        }
    }
}

impl AmodalBackend for OracleBackend {
    fn id(&self) -> &str {
        "oracle"
    }

    fn complete(&self, scene: &MaskedScene, count: usize, seed: u64) -> Result<Vec<CandidateCompletion>> {
        match &self.plan {
            OraclePlan::Levels(levels) => {
                if levels.is_empty() {
                    return Err(CsfError::InvalidArgument("oracle needs at least one level".into()));
                }
                let lv: Vec<f64> = (0..count).map(|i| levels[i % levels.len()]).collect();
                synth_candidates(&scene.image, scene, count, &lv, seed)
            }
            OraclePlan::SegmentWise { noise } => synth_segmentwise(&scene.image, scene, count, *noise, seed),
        }
    }

    fn reentrant(&self) -> bool {
        true
    }
}

/// Shells out to an external completion tool:
/// `<cmd> <scene_dir> <count> <seed> <out_dir>`, which must write
/// `cand_<i>.png` and `valid_<i>.png` into `out_dir`.
#[derive(Clone, Debug)]
pub struct ExternalBackend {
    pub id: String,
    pub command: Option<String>,
}

impl ExternalBackend {
    /// The pretrained amodal model, located through [`AMODAL_CMD_ENV`].
    pub fn pretrained_from_env() -> Self {
        ExternalBackend {
            id: "pretrained".into(),
            command: std::env::var(AMODAL_CMD_ENV).ok().filter(|s| !s.trim().is_empty()),
        }
    }
}

impl AmodalBackend for ExternalBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, scene: &MaskedScene, count: usize, seed: u64) -> Result<Vec<CandidateCompletion>> {
        let unavailable = |reason: String| CsfError::BackendUnavailable {
            backend: self.id.clone(),
            reason,
        };
        let cmd = self
            .command
            .as_ref()
            .ok_or_else(|| unavailable(format!("set {AMODAL_CMD_ENV} to the completion command")))?;
        let mut parts = cmd.split_whitespace();
        let program = parts.next().ok_or_else(|| unavailable("empty command".into()))?;
        let work = std::env::temp_dir().join(format!(
            "csf-amodal-{}-{}-{seed}",
            std::process::id(),
            scene.image.id
        ));
        let scene_dir = work.join("scene");
        let out_dir = work.join("out");
        data::save_scene(&scene_dir, scene)?;
        fs::create_dir_all(&out_dir).map_err(|e| CsfError::io(&out_dir, e))?;
        let status = Command::new(program)
            .args(parts)
            .arg(&scene_dir)
            .arg(count.to_string())
            .arg(seed.to_string())
            .arg(&out_dir)
            .status()
            .map_err(|e| unavailable(e.to_string()))?;
        if !status.success() {
            let _ = fs::remove_dir_all(&work);
            return Err(unavailable(format!("command exited with {status}")));
        }
        let mut out = Vec::new();
        for i in 0..count {
            match read_candidate(&out_dir, i, &self.id) {
                Ok(c) if c.dims() == scene.dims() => out.push(c),
                Ok(_) => log::warn!("backend `{}` sample {i} has the wrong size", self.id),
                Err(e) => log::warn!("backend `{}` sample {i} failed: {e}", self.id),
            }
        }
        let _ = fs::remove_dir_all(&work);
        Ok(out)
    }
}

/// Backend by CLI name: `oracle` or `pretrained`.
pub fn backend_by_name(name: &str) -> Result<Box<dyn AmodalBackend + Send + Sync>> {
    match name {
        "oracle" => Ok(Box::new(OracleBackend::segmentwise(0.6))),
        "oracle-graded" => Ok(Box::new(OracleBackend::graded(DEFAULT_N))),
        "pretrained" => Ok(Box::new(ExternalBackend::pretrained_from_env())),
        other => Err(CsfError::BackendUnavailable {
            backend: other.to_string(),
            reason: "unknown backend".into(),
        }),
    }
}

fn read_candidate(dir: &Path, i: usize, backend_id: &str) -> Result<CandidateCompletion> {
    let values = data::load_rgb_png(&dir.join(format!("cand_{i}.png")))?;
    let validity = data::load_mask_png(&dir.join(format!("valid_{i}.png")))?;
    CandidateCompletion::new(values, validity, backend_id)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub backend_id: String,
    pub s_mse: f64,
    pub s_lpips: f64,
    pub s_valid: f64,
    pub selected: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateManifest {
    pub scene_id: String,
    /// Selection order, best first.
    pub selected: Vec<usize>,
    pub candidates: Vec<ManifestEntry>,
}

/// Persist as `cand_<i>.png`, `valid_<i>.png` and `manifest.json`.
pub fn save_candidate_set(dir: &Path, scene_id: &str, set: &CandidateSet) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CsfError::io(dir, e))?;
    for (i, c) in set.initial.iter().enumerate() {
        data::save_rgb_png(&dir.join(format!("cand_{i}.png")), &c.masked_values())?;
        data::save_mask_png(&dir.join(format!("valid_{i}.png")), &c.validity)?;
    }
    let manifest = CandidateManifest {
        scene_id: scene_id.to_string(),
        selected: set.selected.clone(),
        candidates: set
            .initial
            .iter()
            .zip(&set.scores)
            .enumerate()
            .map(|(i, (c, s))| ManifestEntry {
                index: i,
                backend_id: c.backend_id.clone(),
                s_mse: s.s_mse,
                s_lpips: s.s_lpips,
                s_valid: s.s_valid,
                selected: set.selected.contains(&i),
            })
            .collect(),
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| CsfError::io(&path, e))
}

pub fn load_candidate_set(dir: &Path) -> Result<CandidateSet> {
    let path = dir.join("manifest.json");
    let manifest: CandidateManifest =
        serde_json::from_str(&fs::read_to_string(&path).map_err(|e| CsfError::io(&path, e))?)?;
    let mut initial = Vec::new();
    let mut scores = Vec::new();
    for e in &manifest.candidates {
        initial.push(read_candidate(dir, e.index, &e.backend_id)?);
        scores.push(ConsistencyScore {
            s_mse: e.s_mse,
            s_lpips: e.s_lpips,
            s_valid: e.s_valid,
        });
    }
    if initial.is_empty() {
        return Err(CsfError::NoCandidates {
            backend: format!("{}", dir.display()),
        });
    }
    Ok(CandidateSet {
        initial,
        scores,
        selected: manifest.selected,
    })
}

/// Sorted `(scene_id, directory)` pairs under a candidate store root.
pub fn list_candidate_dirs(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| CsfError::io(root, e))? {
        let path = entry.map_err(|e| CsfError::io(root, e))?.path();
        if path.join("manifest.json").is_file() {
            let id = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            out.push((id, path));
        }
    }
    out.sort();
    Ok(out)
}
