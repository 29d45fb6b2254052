use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use csf_core::assets::AssetStore;
use csf_core::candidates::{self, backend_by_name, build_candidate_set, load_candidate_set, save_candidate_set};
use csf_core::data::{
    self, apply_mask, load_image_dir, load_manifest, load_rgb_png, load_scene, load_scene_dir, make_center_box_mask,
    make_random_brush_mask, save_rgb_png, ImageRecord,
};
use csf_core::eval::{self, ablation, report, AblationContext, AblationGrid, EvalSample, MetricNets};
use csf_core::model::mean_hole_scores;
use csf_core::select::{compose_single, save_guide, GuideManifest, DEFAULT_THRESHOLD};
use csf_core::toy::{make_toy_set, save_toy_set, ToySpec};
use csf_core::trainer::{self, Checkpoint, TrainConfig, TrainItem};

#[derive(Parser)]
#[command(name = "csf", version, about = "Semantic guidance for large-mask inpainting")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum MaskArg {
    Center50,
    Center80,
    Brush,
}

#[derive(Subcommand)]
enum Cmd {
    /// Resize images, attach hole masks and write `<out>/<id>/` scenes.
    PrepareData {
        /// Image directory or an `id,path` manifest file.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 256)]
        resolution: usize,
        #[arg(long, value_enum, default_value = "center50")]
        mask: MaskArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Produce, score and rank amodal candidates for every scene.
    GenerateCandidates {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long, default_value = "oracle")]
        backend: String,
        #[arg(long, default_value_t = candidates::DEFAULT_N)]
        n: usize,
        #[arg(long, default_value_t = candidates::DEFAULT_P)]
        p: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Composite a guidance image for one scene.
    ComposeGuidance {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        candidates: PathBuf,
        /// Trained checkpoint; omit to copy the top-ranked candidate.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run a downstream inpainter on each scene, optionally with guides.
    Inpaint {
        #[arg(long)]
        scenes: PathBuf,
        /// Directory of `<id>/guide.png` + `<id>/filled.png`; omit for the baseline arm.
        #[arg(long)]
        guides: Option<PathBuf>,
        #[arg(long, default_value = "diffusion")]
        adapter: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score restored images against ground truth.
    Evaluate {
        #[arg(long)]
        method: String,
        #[arg(long)]
        scenes: PathBuf,
        /// Restored images named `<id>.png`.
        #[arg(long)]
        outputs: PathBuf,
        /// Ground truth images named `<id>.png`; defaults to the scene images.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train or load each variant of an ablation grid and evaluate it.
    Ablate {
        /// Base training config (TOML).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
    },
    /// Write the procedural toy set (`scenes/`, `candidates/`).
    MakeToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Save the frozen feature networks as safetensors.
    ExportAssets {
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Cmd::PrepareData {
            input,
            resolution,
            mask,
            seed,
            out,
        } => prepare_data(&input, resolution, mask, seed, &out),
        Cmd::GenerateCandidates {
            scenes,
            backend,
            n,
            p,
            seed,
            out,
        } => generate_candidates(&scenes, &backend, n, p, seed, &out),
        Cmd::ComposeGuidance {
            scene,
            candidates,
            checkpoint,
            out,
        } => compose_guidance(&scene, &candidates, checkpoint.as_deref(), &out),
        Cmd::Train {
            config,
            scenes,
            candidates,
            out,
            resume,
        } => train(&config, &scenes, &candidates, &out, resume.as_deref()),
        Cmd::Inpaint {
            scenes,
            guides,
            adapter,
            out,
        } => inpaint(&scenes, guides.as_deref(), &adapter, &out),
        Cmd::Evaluate {
            method,
            scenes,
            outputs,
            gt,
            report,
        } => evaluate(&method, &scenes, &outputs, gt.as_deref(), &report),
        Cmd::Ablate { config, grid } => ablate(&config, &grid),
        Cmd::MakeToy {
            out,
            count,
            resolution,
            seed,
        } => {
            let spec = ToySpec {
                count,
                resolution,
                seed,
                ..ToySpec::default()
            };
            let items = make_toy_set(&spec, &AssetStore::from_env().lpips()?)?;
            save_toy_set(&out, &items)?;
            println!("wrote {} toy scenes to {}", items.len(), out.display());
            Ok(())
        }
        Cmd::ExportAssets { out } => {
            for p in AssetStore::from_env().export(&out)? {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}

fn prepare_data(input: &Path, resolution: usize, mask: MaskArg, seed: u64, out: &Path) -> Result<()> {
    let images = if input.is_dir() {
        load_image_dir(input, resolution)?
    } else {
        load_manifest(input, resolution)?
    };
    for (i, img) in images.iter().enumerate() {
        let s = seed.wrapping_add(i as u64);
        let m = match mask {
            MaskArg::Center50 => make_center_box_mask(resolution, 0.5)?,
            MaskArg::Center80 => make_center_box_mask(resolution, 0.8)?,
            MaskArg::Brush => make_random_brush_mask(resolution, 0.5, 0.8, s)?,
        };
        let scene = apply_mask(img, &m)?;
        data::save_scene(&out.join(&img.id), &scene)?;
    }
    println!("prepared {} scenes in {}", images.len(), out.display());
    Ok(())
}

fn generate_candidates(scenes: &Path, backend: &str, n: usize, p: usize, seed: u64, out: &Path) -> Result<()> {
    let backend = backend_by_name(backend)?;
    let lpips = AssetStore::from_env().lpips()?;
    let scenes = load_scene_dir(scenes)?;
    for (i, scene) in scenes.iter().enumerate() {
        let id = &scene.image.id;
        let set = build_candidate_set(scene, backend.as_ref(), &lpips, n, p, seed.wrapping_add(i as u64))
            .with_context(|| format!("scene `{id}`"))?;
        save_candidate_set(&out.join(id), id, &set)?;
    }
    println!("wrote candidates for {} scenes to {}", scenes.len(), out.display());
    Ok(())
}

fn compose_guidance(scene_dir: &Path, cand_dir: &Path, checkpoint: Option<&Path>, out: &Path) -> Result<()> {
    let scene = load_scene(scene_dir)?;
    let set = load_candidate_set(cand_dir)?;
    let id = scene.image.id.clone();
    let (guide, manifest) = match checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let model = ckpt.model(AssetStore::from_env().perceptual()?)?;
            let item = TrainItem::from_set(scene.clone(), &set, ckpt.config.p, ckpt.config.score_variant)?;
            let (guide, volume) = model.infer(&item.scene, &item.candidates)?;
            let manifest = GuideManifest {
                scene_id: id,
                threshold: model.config.threshold,
                filled_fraction_of_hole: filled_fraction(&guide.filled, &scene),
                mean_scores: volume.as_ref().map(|v| mean_hole_scores(v, &scene)).unwrap_or_default(),
                betas: model.betas(),
            };
            (guide, manifest)
        }
        None => {
            let top = set.selected_candidates().into_iter().next().context("candidate set selects nothing")?;
            let guide = compose_single(&top, &scene)?;
            let manifest = GuideManifest {
                scene_id: id,
                threshold: DEFAULT_THRESHOLD,
                filled_fraction_of_hole: filled_fraction(&guide.filled, &scene),
                mean_scores: vec![],
                betas: vec![],
            };
            (guide, manifest)
        }
    };
    save_guide(out, &guide, &manifest)?;
    println!(
        "guide for `{}` in {} ({:.1}% of hole filled)",
        manifest.scene_id,
        out.display(),
        100.0 * manifest.filled_fraction_of_hole
    );
    Ok(())
}

fn filled_fraction(filled: &data::BinaryMap, scene: &data::MaskedScene) -> f64 {
    let hole = scene.mask.bits.count();
    if hole == 0 {
        return 0.0;
    }
    filled.and(&scene.mask.bits).count() as f64 / hole as f64
}

fn train(config: &Path, scenes: &Path, cands: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = TrainConfig::load(config)?;
    let extractor = AssetStore::from_env().perceptual()?;
    let items = trainer::load_dataset(scenes, cands, cfg.p, cfg.score_variant)?;
    let mut t = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.config != cfg {
                log::warn!("resuming with the checkpoint's config; {} differs", config.display());
            }
            trainer::Trainer::resume(&ckpt, extractor)?
        }
        None => trainer::Trainer::new(cfg, extractor)?,
    };
    let (history, ckpts) = t.fit(&items, Some(out))?;
    if let Some(last) = history.last() {
        println!("{} steps, final total loss {:.5}", last.step + 1, last.loss.total);
    }
    println!("{} checkpoints in {}", ckpts.len(), out.display());
    Ok(())
}

fn inpaint(scenes: &Path, guides: Option<&Path>, adapter: &str, out: &Path) -> Result<()> {
    let adapter = eval::adapter_by_name(adapter)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let scenes = load_scene_dir(scenes)?;
    for scene in &scenes {
        let id = &scene.image.id;
        let guide = match guides {
            Some(dir) => {
                let pixels = load_rgb_png(&dir.join(id).join("guide.png"))?;
                let filled = data::load_mask_png(&dir.join(id).join("filled.png"))?;
                let chosen = filled.bits().iter().map(|&b| b.then_some(0)).collect();
                Some(csf_core::select::GuidanceImage { pixels, filled, chosen })
            }
            None => None,
        };
        let restored = eval::run_downstream(guide.as_ref(), scene, adapter.as_ref())?;
        save_rgb_png(&out.join(format!("{id}.png")), &restored.pixels)?;
    }
    println!("inpainted {} scenes into {}", scenes.len(), out.display());
    Ok(())
}

fn evaluate(method: &str, scenes: &Path, outputs: &Path, gt: Option<&Path>, report_path: &Path) -> Result<()> {
    let nets = MetricNets::from_store(&AssetStore::from_env())?;
    let mut samples = Vec::new();
    for scene in load_scene_dir(scenes)? {
        let id = scene.image.id.clone();
        let restored = load_rgb_png(&outputs.join(format!("{id}.png")))
            .with_context(|| format!("restored image for `{id}`"))?;
        let gt_img = match gt {
            Some(dir) => ImageRecord::new(id.clone(), load_rgb_png(&dir.join(format!("{id}.png")))?, "")?,
            None => scene.image.clone(),
        };
        samples.push(EvalSample {
            restored: ImageRecord::new(id, restored, "")?,
            gt: gt_img,
            mask: scene.mask,
        });
    }
    let rep = eval::evaluate(method, &samples, &nets)?;
    let table = report::format_table(std::slice::from_ref(&rep));
    print!("{table}");
    if let Some(dir) = report_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(report_path, &table).with_context(|| format!("writing {}", report_path.display()))?;
    report::write_jsonl(&report_path.with_extension("jsonl"), &[rep])?;
    Ok(())
}

fn ablate(config: &Path, grid_path: &Path) -> Result<()> {
    let base = TrainConfig::load(config)?;
    let grid = AblationGrid::load(grid_path)?;
    let (Some(scenes), Some(cands)) = (&grid.scenes, &grid.candidates) else {
        bail!("grid file must set `scenes` and `candidates`");
    };
    let store = AssetStore::from_env();
    let nets = MetricNets::from_store(&store)?;
    let items = ablation::load_items(scenes, cands)?;
    let ctx = AblationContext {
        base: &base,
        items: &items,
        extractor: store.perceptual()?,
        nets: &nets,
        out_dir: grid.out.as_deref(),
    };
    let rows = eval::ablation_run(&grid, &ctx)?;
    print!("{}", ablation::format_rows(&rows));
    Ok(())
}
