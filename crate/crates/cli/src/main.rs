use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use labelgs_core::io::bundle::{encode_label_png, load_frame_flags, load_tracked, save_frames, write_rgb};
use labelgs_core::io::{
    load_bundle, load_checkpoint, make_synthetic_scene, save_bundle, save_checkpoint, SceneBundle, Split, SynthSpec,
};
use labelgs_core::lifting::{commit_votes, extract, lift_view};
use labelgs_core::occlusion::{annotate_view, OcclusionSettings};
use labelgs_core::pipeline::{
    evaluate_against_reference, evaluate_against_views, occluded_region_psnr, train_views, SeedConfig,
};
use labelgs_core::trainer::TrainConfig;
use labelgs_core::views::{densify_views, retain_training_masks, DEFAULT_INSERTS_PER_GAP};
use labelgs_core::{render_with, Camera, GaussianScene, Label, RenderOptions, RenderSettings};
use nalgebra::{Matrix3, Vector3};
use serde_json::json;

#[derive(Parser)]
#[command(name = "labelgs", version, about = "Label-aware Gaussian splatting")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a labeled synthetic scene and its bundle.
    Synth(SynthArgs),
    /// Train a labeled scene from a bundle's training views.
    Train(TrainArgs),
    /// Render interpolated frames for mask tracking, or fold tracked masks back into a bundle.
    DensifyViews(DensifyArgs),
    /// Compute unocclusion masks for every view with depth.
    Occlusion(OcclusionArgs),
    /// Assign labels to a scene's Gaussians from the training label maps.
    Lift(LiftArgs),
    /// Keep only the Gaussians carrying the given labels.
    Extract(ExtractArgs),
    /// Render views of a scene to PNG.
    Render(RenderArgs),
    /// Score extracted objects on held-out views.
    Eval(EvalArgs),
    /// Serve a scene over HTTP.
    Serve(ServeArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Bundle directory to write.
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth checkpoint path [default: <out>/ground_truth.ply].
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    objects: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 12)]
    train_views: usize,
    #[arg(long, default_value_t = 4)]
    test_views: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 128)]
    height: usize,
    #[arg(long, default_value_t = 150.0)]
    focal: f64,
    #[arg(long, default_value_t = 150)]
    gaussians_per_object: usize,
    /// Place the objects side by side instead of one in front of another.
    #[arg(long)]
    no_occlusion: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Metric log (JSON lines).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Iteration count; the label-loss start scales with it.
    #[arg(long, default_value_t = 15_000)]
    iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Contribution threshold on the main contributor's weight.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    masks_per_iter: Option<usize>,
    #[arg(long)]
    label_start: Option<usize>,
    /// SSIM weight.
    #[arg(long)]
    lambda1: Option<f64>,
    /// Label loss weight.
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    no_gpf: bool,
    #[arg(long)]
    no_oam: bool,
    /// Accepted for symmetry; view densification happens in `densify-views`.
    #[arg(long)]
    no_dov: bool,
    #[arg(long)]
    seed_points: Option<usize>,
    #[arg(long)]
    seed_opacity: Option<f64>,
}

#[derive(Args)]
struct DensifyArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Output: frame directory, or bundle directory with `--tracked`.
    #[arg(long)]
    out: PathBuf,
    /// Scene to render the frames from (label-free reconstruction).
    #[arg(long, required_unless_present = "tracked")]
    scene: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_INSERTS_PER_GAP)]
    inserts: usize,
    /// Write only the original frames.
    #[arg(long)]
    no_dov: bool,
    /// Tracked label maps of the frame sequence; switches to retain mode.
    #[arg(long, requires = "frames")]
    tracked: Option<PathBuf>,
    /// Frame directory written by an earlier run.
    #[arg(long)]
    frames: Option<PathBuf>,
}

#[derive(Args)]
struct OcclusionArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Where to write the annotated bundle [default: in place].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LiftArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = labelgs_core::lifting::DEFAULT_CONTRIBUTION_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    no_gpf: bool,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    labels: Vec<Label>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Bundle providing the cameras.
    #[arg(long)]
    bundle: PathBuf,
    /// View to render; all views when omitted.
    #[arg(long)]
    view: Option<String>,
    /// PNG file for a single view, directory otherwise.
    #[arg(long)]
    out: PathBuf,
    /// Render only these labels.
    #[arg(long, value_delimiter = ',')]
    labels: Option<Vec<Label>>,
    /// Write the 16-bit label map instead of the image.
    #[arg(long)]
    labelmap: bool,
    /// Explicit world-to-camera rotation, 9 row-major values; intrinsics from `--view` or the first view.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, requires = "translation")]
    rotation: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, requires = "rotation")]
    translation: Option<Vec<f64>>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    bundle: PathBuf,
    /// Ground-truth scene; without it the views' label maps and images are the reference.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Also report PSNR over the hidden part of this object (needs `--reference`).
    #[arg(long, requires = "reference")]
    occluded: Option<Label>,
    /// Evaluate on training views instead of held-out ones.
    #[arg(long)]
    train_split: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long, default_value_t = labelgs_server::DEFAULT_PORT)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::Synth(a) => synth(a),
        Cmd::Train(a) => train(a),
        Cmd::DensifyViews(a) => densify(a),
        Cmd::Occlusion(a) => occlusion(a),
        Cmd::Lift(a) => lift(a),
        Cmd::Extract(a) => extract_cmd(a),
        Cmd::Render(a) => render_cmd(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Serve(a) => serve(a),
    }
}

fn bundle_at(path: &Path) -> Result<SceneBundle> {
    load_bundle(path).with_context(|| format!("loading bundle {}", path.display()))
}

fn scene_at(path: &Path) -> Result<GaussianScene> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        objects: a.objects,
        seed: a.seed,
        train_views: a.train_views,
        test_views: a.test_views,
        width: a.width,
        height: a.height,
        focal: a.focal,
        gaussians_per_object: a.gaussians_per_object,
        occluding: !a.no_occlusion,
        ..SynthSpec::default()
    };
    let s = make_synthetic_scene(&spec)?;
    save_bundle(&s.bundle, &a.out)?;
    let gt = a.gt.unwrap_or_else(|| a.out.join("ground_truth.ply"));
    save_checkpoint(&s.scene, &gt)?;
    log::info!(
        "wrote {} views to {} and {} Gaussians to {}",
        s.bundle.views.len(),
        a.out.display(),
        s.scene.len(),
        gt.display()
    );
    Ok(())
}

fn train_config(a: &TrainArgs) -> TrainConfig {
    let mut c = TrainConfig::scaled_to(a.iterations);
    c.seed = a.seed;
    c.gpf_enabled = !a.no_gpf;
    c.oam_enabled = !a.no_oam;
    c.dov_enabled = !a.no_dov;
    if let Some(v) = a.threshold {
        c.contribution_threshold = v;
    }
    if let Some(v) = a.masks_per_iter {
        c.masks_per_iter = v;
    }
    if let Some(v) = a.label_start {
        c.label_loss_start = v;
    }
    if let Some(v) = a.lambda1 {
        c.lambda1 = v;
    }
    if let Some(v) = a.lambda2 {
        c.lambda2 = v;
    }
    c.dump_path = Some(a.out.with_extension("nonfinite.ply"));
    c
}

fn train(a: TrainArgs) -> Result<()> {
    let config = train_config(&a);
    config.validate()?;
    let bundle = bundle_at(&a.bundle)?;
    let views = bundle.train_views();
    ensure!(!views.is_empty(), "bundle has no training views");
    let defaults = SeedConfig::default();
    let seeding = SeedConfig {
        points: a.seed_points.unwrap_or(defaults.points),
        opacity: a.seed_opacity.unwrap_or(defaults.opacity),
    };
    let result = train_views(views, &config, &seeding, |r| {
        if let Some(p) = r.train_psnr {
            log::info!("iteration {} loss {:.5} gaussians {} psnr {:.2}", r.iteration, r.total, r.gaussians, p);
        }
    })?;
    for (view, label) in &result.absent_labels {
        log::warn!("label {label} sampled in view {view} but absent from the scene");
    }
    save_checkpoint(&result.scene, &a.out)?;
    if let Some(path) = &a.log {
        fs::write(path, result.log_jsonl())?;
    }
    log::info!("wrote {} Gaussians to {}", result.scene.len(), a.out.display());
    Ok(())
}

fn densify(a: DensifyArgs) -> Result<()> {
    let mut bundle = bundle_at(&a.bundle)?;
    if let Some(tracked) = &a.tracked {
        let frames = a.frames.as_deref().expect("clap enforces --frames");
        let flags = load_frame_flags(frames)?;
        let maps = retain_training_masks(load_tracked(tracked, flags.len())?, &flags)?;
        let train: Vec<usize> = (0..bundle.views.len()).filter(|&i| bundle.views[i].split == Split::Train).collect();
        ensure!(maps.len() == train.len(), "{} retained masks for {} training views", maps.len(), train.len());
        for (i, map) in train.into_iter().zip(maps) {
            let view = &mut bundle.views[i].view;
            ensure!(map.dims() == view.dims(), "tracked mask for {} has the wrong size", view.id);
            view.label_map = map;
            view.unocclusion.clear();
        }
        // tracker IDs need not match the synthetic ones
        let max = bundle.views.iter().flat_map(|v| v.view.label_map.ids.iter().copied()).max().unwrap_or(0);
        bundle.label_count = bundle.label_count.max(max);
        save_bundle(&bundle, &a.out)?;
        log::info!("wrote bundle with tracked masks to {}", a.out.display());
        return Ok(());
    }
    let scene = scene_at(a.scene.as_deref().expect("clap enforces --scene"))?;
    let cams: Vec<Camera> = bundle.train_views().into_iter().map(|v| v.camera).collect();
    let inserts = if a.no_dov { 0 } else { a.inserts };
    let frames = densify_views(&scene, &cams, inserts)?;
    let images: Vec<_> = frames.iter().map(|f| f.image.clone()).collect();
    let originals: Vec<_> = frames.iter().map(|f| f.original).collect();
    save_frames(&images, &originals, &a.out)?;
    log::info!("wrote {} frames ({} original) to {}", frames.len(), cams.len(), a.out.display());
    Ok(())
}

fn occlusion(a: OcclusionArgs) -> Result<()> {
    let mut bundle = bundle_at(&a.bundle)?;
    let settings = OcclusionSettings::default();
    for bv in &mut bundle.views {
        bv.view.unocclusion.clear();
        if let Some(report) = annotate_view(&mut bv.view, &settings)? {
            let occluders: serde_json::Map<_, _> =
                report.occluders.iter().filter(|(k, _)| **k != 0).map(|(k, o)| (k.to_string(), json!(o))).collect();
            println!("{}", json!({ "view": bv.view.id, "occluders": occluders }));
        }
    }
    save_bundle(&bundle, a.out.as_deref().unwrap_or(&a.bundle))?;
    Ok(())
}

fn lift(a: LiftArgs) -> Result<()> {
    let bundle = bundle_at(&a.bundle)?;
    let mut scene = scene_at(&a.scene)?;
    let mut votes = Vec::new();
    for (i, view) in bundle.train_views().iter().enumerate() {
        votes.extend(lift_view(&scene, view, i, a.threshold, !a.no_gpf)?);
    }
    let changed = commit_votes(&mut scene, &votes)?;
    save_checkpoint(&scene, &a.out)?;
    log::info!("{} votes, {changed} labels changed, wrote {}", votes.len(), a.out.display());
    Ok(())
}

fn extract_cmd(a: ExtractArgs) -> Result<()> {
    let scene = scene_at(&a.scene)?;
    let labels: BTreeSet<Label> = a.labels.into_iter().collect();
    let out = extract(&scene, &labels);
    if out.is_empty() {
        log::warn!("no Gaussian carries labels {labels:?}");
    }
    save_checkpoint(&out, &a.out)?;
    log::info!("extracted {} of {} Gaussians", out.len(), scene.len());
    Ok(())
}

fn render_cmd(a: RenderArgs) -> Result<()> {
    let scene = scene_at(&a.scene)?;
    let bundle = bundle_at(&a.bundle)?;
    let subset: Option<BTreeSet<Label>> = a.labels.map(|l| l.into_iter().collect());
    let opts = RenderOptions { subset: subset.as_ref(), background: None };
    let pick =
        |id: &str| bundle.view(id).map(|v| v.camera.clone()).with_context(|| format!("no view {id:?} in bundle"));
    let mut jobs: Vec<(String, Camera)> = match (&a.view, &a.rotation) {
        (_, Some(r)) => {
            let t = a.translation.as_deref().expect("clap enforces --translation");
            ensure!(r.len() == 9 && t.len() == 3, "rotation needs 9 values and translation 3");
            let base = match &a.view {
                Some(id) => pick(id)?,
                None => bundle.views.first().map(|v| v.view.camera.clone()).context("bundle has no views")?,
            };
            vec![("pose".into(), base.with_pose(Matrix3::from_row_slice(r), Vector3::from_column_slice(t))?)]
        }
        (Some(id), None) => vec![(id.clone(), pick(id)?)],
        (None, None) => bundle.views.iter().map(|v| (v.view.id.clone(), v.view.camera.clone())).collect(),
    };
    let single = jobs.len() == 1 && a.out.extension().is_some_and(|e| e == "png");
    if !single {
        fs::create_dir_all(&a.out)?;
    }
    for (id, cam) in jobs.drain(..) {
        let out = render_with(&scene, &cam, &opts, &RenderSettings::default());
        let path = if single { a.out.clone() } else { a.out.join(format!("{id}.png")) };
        if a.labelmap {
            fs::write(&path, encode_label_png(&out.labels)?)?;
        } else {
            write_rgb(&out.image, &path)?;
        }
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let scene = scene_at(&a.scene)?;
    let bundle = bundle_at(&a.bundle)?;
    let views = if a.train_split { bundle.train_views() } else { bundle.test_views() };
    if views.is_empty() {
        bail!("bundle has no {} views", if a.train_split { "training" } else { "test" });
    }
    let mut report = serde_json::Map::new();
    let scores = match &a.reference {
        Some(path) => {
            let reference = scene_at(path)?;
            let labels = reference.labels_present();
            if let Some(k) = a.occluded {
                let p = occluded_region_psnr(&scene, &reference, &views, k)?;
                report.insert("occluded_psnr".into(), json!(p));
            }
            evaluate_against_reference(&scene, &reference, &views, &labels)?
        }
        None => evaluate_against_views(&scene, &views)?,
    };
    let objects: Vec<_> = scores
        .iter()
        .filter(|s| s.label != 0)
        .map(|s| json!({ "label": s.label, "miou": s.miou, "psnr": s.psnr }))
        .collect();
    report.insert("objects".into(), json!(objects));
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let scene = scene_at(&a.scene)?;
    let bundle = bundle_at(&a.bundle)?;
    let state = labelgs_server::AppState::new(scene, &bundle);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port)).await?;
        log::info!("listening on http://{}", listener.local_addr()?);
        labelgs_server::serve(state, listener).await?;
        Ok(())
    })
}
