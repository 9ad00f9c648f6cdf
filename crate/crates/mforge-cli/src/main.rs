//! `mforge`: train and drive the part-based image animation pipeline.
//!
//! Subcommands cover the full workflow: synthesize a moving-shapes dataset
//! (`gen-data`), train on any frame-folder dataset (`train`), re-render
//! videos from first frame + motion (`reconstruct`), transfer motion onto a
//! still image (`animate`), score outputs (`eval`), and inspect what the
//! model attends to and how it segments motion (`dump-attention`,
//! `dump-motion`).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use motion_forge::data::{
    generate_scene, load_png, load_video, load_video_folder, save_png, write_scene, GroundTruth,
    SceneSpec,
};
use motion_forge::eval::{
    animate, dump_attention, dump_motion, evaluate_dirs_with_gt, reconstruct_video,
    write_reconstruction,
};
use motion_forge::metrics::AED_SEED;
use motion_forge::model::{AnimationModel, ModelConfig};
use motion_forge::motion::TransferMode;
use motion_forge::trainer::{mix_seed, train, TrainConfig};
use motion_forge::transformer::{AttentionMode, BlockForm};

#[derive(Parser)]
#[command(name = "mforge", version, about = "Unsupervised image animation: moving-part discovery, dense-flow warping, and motion transfer")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic moving-shapes dataset with ground-truth motion.
    GenData(GenDataArgs),
    /// Train a model on a frame-folder dataset.
    Train(TrainArgs),
    /// Re-render a video from its first frame plus per-frame motion.
    Reconstruct(ReconstructArgs),
    /// Drive a still image with the motion of a driving video.
    Animate(AnimateArgs),
    /// Score generated videos against their ground-truth counterparts.
    Eval(EvalArgs),
    /// Write per-layer attention heatmaps for every motion token.
    DumpAttention(DumpAttentionArgs),
    /// Write one image's motion parameters, part masks, and occlusion map.
    DumpMotion(DumpMotionArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Toggle {
    On,
    Off,
}

impl Toggle {
    fn enabled(self) -> bool {
        self == Toggle::On
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AttentionArg {
    /// Motion and image tokens attend over the concatenated sequence.
    Unified,
    /// Motion tokens self-attend, then cross-attend to image tokens.
    Split,
}

#[derive(Clone, Copy, ValueEnum)]
enum BlockFormArg {
    /// Post-norm residual blocks for both attention and feed-forward.
    Standard,
    /// No feed-forward residual and no final norm in each block.
    PaperLiteral,
}

#[derive(Args)]
struct GenDataArgs {
    /// Directory that receives one `vid###` folder per video.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Number of videos.
    #[arg(long, default_value_t = 200)]
    videos: usize,
    /// Frames per video.
    #[arg(long, default_value_t = 20)]
    frames: usize,
    /// Square frame size in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Moving parts per video (1-5).
    #[arg(long, default_value_t = 3)]
    parts: usize,
    /// Master seed; each video derives its own stream from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root: one subdirectory of frame_*.png per video.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Output directory for checkpoints and the loss log.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Training epochs; 0 writes an untrained checkpoint and exits.
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    /// Seed for weight init, data order, and equivariance transforms.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Learn a separate global background motion.
    #[arg(long, value_enum, default_value_t = Toggle::Off)]
    background: Toggle,
    /// Add positional encodings to image tokens.
    #[arg(long, value_enum, default_value_t = Toggle::On)]
    pe: Toggle,
    /// Transformer depth.
    #[arg(long, default_value_t = ModelConfig::desk().layers)]
    layers: usize,
    /// How motion tokens attend to image tokens.
    #[arg(long, value_enum, default_value_t = AttentionArg::Unified)]
    attention: AttentionArg,
    /// Residual/norm arrangement inside each transformer block.
    #[arg(long, value_enum, default_value_t = BlockFormArg::Standard)]
    block_form: BlockFormArg,
    /// Pairs per optimizer step.
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Reserve the last N videos (sorted by id) as a held-out split that
    /// never enters training.
    #[arg(long, default_value_t = 0)]
    holdout: usize,
    /// Print the learnable parameter count before training.
    #[arg(long)]
    print_params: bool,
}

#[derive(Args)]
struct ReconstructArgs {
    /// Trained checkpoint file.
    #[arg(long, value_name = "FILE")]
    ckpt: PathBuf,
    /// Directory of frame_*.png for one video.
    #[arg(long, value_name = "DIR")]
    video: PathBuf,
    /// Output directory for generated frames and keypoints.json.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct AnimateArgs {
    /// Trained checkpoint file.
    #[arg(long, value_name = "FILE")]
    ckpt: PathBuf,
    /// Still image to animate (PNG).
    #[arg(long, value_name = "FILE")]
    source: PathBuf,
    /// Directory of frame_*.png supplying the motion.
    #[arg(long, value_name = "DIR")]
    driving: PathBuf,
    /// Output directory for generated frames.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Motion transfer mode.
    #[arg(long, value_enum, default_value_t = ModeArg::Relative)]
    mode: ModeArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    /// Apply each driving frame's motion directly.
    Absolute,
    /// Apply each driving frame's change from its first frame to the
    /// source's own motion.
    Relative,
}

#[derive(Args)]
struct EvalArgs {
    /// Root of generated videos (as written by `reconstruct`).
    #[arg(long, value_name = "DIR")]
    generated: PathBuf,
    /// Root of ground-truth videos.
    #[arg(long, value_name = "DIR")]
    truth: PathBuf,
    /// Ground-truth motion file overriding the truth folder's gt.json;
    /// requires exactly one generated video.
    #[arg(long, value_name = "FILE")]
    gt_json: Option<PathBuf>,
    /// Where to write the JSON metrics report.
    #[arg(long, value_name = "FILE")]
    report: PathBuf,
}

#[derive(Args)]
struct DumpAttentionArgs {
    /// Trained checkpoint file.
    #[arg(long, value_name = "FILE")]
    ckpt: PathBuf,
    /// Input image (PNG).
    #[arg(long, value_name = "FILE")]
    image: PathBuf,
    /// Output directory for layer##_token##.png heatmaps.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct DumpMotionArgs {
    /// Trained checkpoint file.
    #[arg(long, value_name = "FILE")]
    ckpt: PathBuf,
    /// Input image (PNG).
    #[arg(long, value_name = "FILE")]
    image: PathBuf,
    /// Output JSON path; mask/occlusion PNGs are written beside it.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::GenData(a) => run_gen_data(a),
        Cmd::Train(a) => run_train(a),
        Cmd::Reconstruct(a) => run_reconstruct(a),
        Cmd::Animate(a) => run_animate(a),
        Cmd::Eval(a) => run_eval(a),
        Cmd::DumpAttention(a) => run_dump_attention(a),
        Cmd::DumpMotion(a) => run_dump_motion(a),
    }
}

fn run_gen_data(a: GenDataArgs) -> Result<()> {
    if a.videos == 0 {
        bail!("--videos must be at least 1");
    }
    let spec = SceneSpec { size: a.size, frames: a.frames, parts: a.parts, ..SceneSpec::default() };
    let width = a.videos.saturating_sub(1).to_string().len().max(3);
    for i in 0..a.videos {
        let scene = generate_scene(mix_seed(a.seed, 3, i as u64), &spec)
            .with_context(|| format!("video {i}"))?;
        let dir = a.out.join(format!("vid{i:0width$}"));
        write_scene(&scene, &dir).with_context(|| format!("writing {}", dir.display()))?;
    }
    println!(
        "wrote {} videos ({} frames, {}x{} px, {} parts) under {}",
        a.videos,
        a.frames,
        a.size,
        a.size,
        a.parts,
        a.out.display()
    );
    Ok(())
}

fn frame_hw(frame: &motion_forge::numerics::Tensor) -> (usize, usize) {
    (frame.shape()[1], frame.shape()[2])
}

fn check_frame_size(model: &AnimationModel, frame: &motion_forge::numerics::Tensor, what: &str) -> Result<()> {
    let (h, w) = frame_hw(frame);
    let s = model.cfg.image_size;
    if h != s || w != s {
        bail!("checkpoint expects {s}x{s} frames but {what} is {w}x{h}");
    }
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut data = load_video_folder(&a.data)
        .with_context(|| format!("loading dataset {}", a.data.display()))?;
    if a.holdout > 0 {
        if a.holdout >= data.videos.len() {
            bail!(
                "--holdout {} leaves no training videos (dataset has {})",
                a.holdout,
                data.videos.len()
            );
        }
        let kept = data.videos.len() - a.holdout;
        let held: Vec<String> = data.videos.split_off(kept).into_iter().map(|v| v.id).collect();
        println!("holding out {} videos: {} .. {}", held.len(), held[0], held[held.len() - 1]);
    }
    let (h, w) = data
        .frame_size()
        .ok_or_else(|| anyhow::anyhow!("dataset {} has no frames", a.data.display()))?;
    if h != w {
        bail!("frames must be square, got {w}x{h}");
    }

    let mut cfg = ModelConfig::desk();
    cfg.image_size = h;
    cfg.background_enabled = a.background.enabled();
    cfg.pe_enabled = a.pe.enabled();
    cfg.layers = a.layers;
    cfg.attention_mode = match a.attention {
        AttentionArg::Unified => AttentionMode::Unified,
        AttentionArg::Split => AttentionMode::Split,
    };
    cfg.block_form = match a.block_form {
        BlockFormArg::Standard => BlockForm::Standard,
        BlockFormArg::PaperLiteral => BlockForm::PaperLiteral,
    };

    let mut model = AnimationModel::new(cfg, a.seed)?;
    if a.print_params {
        println!("learnable parameters: {}", model.store.param_count());
    }

    let tcfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let outputs = train(&mut model, &data, &tcfg, &a.out)?;
    println!(
        "trained {} steps; checkpoint {}; loss log {}",
        outputs.steps,
        outputs.final_checkpoint.display(),
        outputs.csv_path.display()
    );
    Ok(())
}

fn run_reconstruct(a: ReconstructArgs) -> Result<()> {
    let model = AnimationModel::load(&a.ckpt)?;
    let video =
        load_video(&a.video).with_context(|| format!("loading video {}", a.video.display()))?;
    check_frame_size(&model, &video.frames[0], "the video")?;
    let rec = reconstruct_video(&model, &video.frames)?;
    write_reconstruction(&rec, &a.out)?;
    println!("reconstructed {} frames into {}", rec.frames.len(), a.out.display());
    Ok(())
}

fn run_animate(a: AnimateArgs) -> Result<()> {
    let model = AnimationModel::load(&a.ckpt)?;
    let source =
        load_png(&a.source).with_context(|| format!("loading image {}", a.source.display()))?;
    check_frame_size(&model, &source, "the source image")?;
    let driving = load_video(&a.driving)
        .with_context(|| format!("loading driving video {}", a.driving.display()))?;
    check_frame_size(&model, &driving.frames[0], "the driving video")?;
    let mode = match a.mode {
        ModeArg::Absolute => TransferMode::Absolute,
        ModeArg::Relative => TransferMode::Relative,
    };
    let frames = animate(&model, &source, &driving.frames, mode)?;
    std::fs::create_dir_all(&a.out)
        .with_context(|| format!("creating {}", a.out.display()))?;
    for (t, frame) in frames.iter().enumerate() {
        save_png(frame, &a.out.join(format!("frame_{t:05}.png")))?;
    }
    println!("animated {} frames into {}", frames.len(), a.out.display());
    Ok(())
}

fn read_gt(path: &Path) -> Result<GroundTruth> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let gt = a.gt_json.as_deref().map(read_gt).transpose()?;
    let report = evaluate_dirs_with_gt(&a.generated, &a.truth, AED_SEED, gt.as_ref())?;
    let text = serde_json::to_string_pretty(&report).context("serializing report")?;
    std::fs::write(&a.report, text + "\n")
        .with_context(|| format!("writing {}", a.report.display()))?;
    println!("videos: {}", report.per_video.len());
    println!("l1: {}", report.l1);
    match (report.akd_px, report.coverage_rate) {
        (Some(akd), Some(cov)) => {
            println!("akd_px: {akd}");
            println!("coverage_rate: {cov}");
        }
        _ => println!("akd_px: n/a (no ground-truth motion)"),
    }
    println!("aed_sub: {}", report.aed_sub);
    if let Some(note) = &report.note {
        println!("note: {note}");
    }
    println!("report written to {}", a.report.display());
    Ok(())
}

fn run_dump_attention(a: DumpAttentionArgs) -> Result<()> {
    let model = AnimationModel::load(&a.ckpt)?;
    let image =
        load_png(&a.image).with_context(|| format!("loading image {}", a.image.display()))?;
    check_frame_size(&model, &image, "the image")?;
    let paths = dump_attention(&model, &image, &a.out)?;
    println!("wrote {} attention maps into {}", paths.len(), a.out.display());
    Ok(())
}

fn run_dump_motion(a: DumpMotionArgs) -> Result<()> {
    let model = AnimationModel::load(&a.ckpt)?;
    let image =
        load_png(&a.image).with_context(|| format!("loading image {}", a.image.display()))?;
    check_frame_size(&model, &image, "the image")?;
    let dump = dump_motion(&model, &image, &a.out)?;
    println!(
        "wrote motion of {} parts (background: {}) to {}",
        dump.params.len(),
        if dump.background.is_some() { "yes" } else { "no" },
        a.out.display()
    );
    Ok(())
}
