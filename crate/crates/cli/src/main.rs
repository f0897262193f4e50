use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use candle_core::{DType, Device};
use clap::{Args, Parser, Subcommand, ValueEnum};
use i2v_core::data::{load_manifest, postprocess, Domain, VideoClip};
use i2v_core::metrics::{evaluate, ColorLayoutFeatures, FeatureExtractor, PerceptualFeatures};
use i2v_core::networks::{PerceptualConfig, PerceptualExtractor};
use i2v_core::trainer::{self, Direction, TrainOutput};

mod config;

use config::Preset;

#[derive(Parser)]
#[command(name = "i2v", version, about = "Unpaired infrared-to-visible video translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train all networks on an unpaired dataset.
    Train(TrainArgs),
    /// Translate every frame under a directory with a trained checkpoint.
    Translate(TranslateArgs),
    /// Score translated frames against reference frames.
    Evaluate(EvaluateArgs),
    /// Print per-subset frame counts of a dataset.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root.
    #[arg(long, env = "I2V_DATASET_ROOT")]
    dataset: PathBuf,
    /// Directory for the loss history, checkpoints and resolved config.
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum, default_value = "full")]
    preset: Preset,
    /// TOML file layered over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override with dotted keys, e.g. `weights.lambda4=0.2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    subset: Option<String>,
    /// Continue from a checkpoint; its stored config is used.
    #[arg(long, conflicts_with_all = ["config", "overrides", "preset"])]
    resume: Option<PathBuf>,
    #[arg(long)]
    no_pcp: bool,
    #[arg(long)]
    no_exs: bool,
    #[arg(long)]
    no_ins: bool,
    #[arg(long)]
    no_recycle: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    X2y,
    Y2x,
}

impl From<DirectionArg> for Direction {
    fn from(d: DirectionArg) -> Self {
        match d {
            DirectionArg::X2y => Direction::XToY,
            DirectionArg::Y2x => Direction::YToX,
        }
    }
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of frames; each directory holding images is one clip.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum, default_value = "x2y")]
    direction: DirectionArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExtractorArg {
    /// Pooled activations of the perceptual network.
    Perceptual,
    /// Colour statistics on a coarse grid.
    ColorLayout,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    translated: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    /// Where to write the JSON report; printed to stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "perceptual")]
    extractor: ExtractorArg,
    /// Pretrained weights for the perceptual extractor.
    #[arg(long)]
    perceptual_weights: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long, env = "I2V_DATASET_ROOT")]
    dataset: PathBuf,
    /// Print TOML instead of a table.
    #[arg(long)]
    toml: bool,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Translate(a) => translate(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Inspect(a) => inspect(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let manifest = load_manifest(&a.dataset)?;
    let (state, mut cfg) = match &a.resume {
        Some(path) => {
            let (state, cfg) = trainer::load_checkpoint(path)?;
            (Some(state), cfg)
        }
        None => (None, config::resolve(config::preset(a.preset), a.config.as_deref(), &a.overrides)?),
    };
    if let Some(seed) = a.seed {
        if state.is_some() {
            bail!("--seed cannot change a resumed run");
        }
        cfg.seed = seed;
    }
    if let Some(n) = a.iterations {
        cfg.total_iterations = n;
    }
    if a.subset.is_some() {
        cfg.subset = a.subset.clone();
    }
    cfg.ablation.disable_pcp |= a.no_pcp;
    cfg.ablation.disable_exs |= a.no_exs;
    cfg.ablation.disable_ins |= a.no_ins;
    cfg.ablation.disable_recycle |= a.no_recycle;
    cfg.validate()?;

    std::fs::create_dir_all(&a.output).with_context(|| format!("creating {}", a.output.display()))?;
    std::fs::write(a.output.join("config.toml"), config::to_toml(&cfg)?)?;
    let out = TrainOutput { dir: a.output.clone() };
    let (state, history) = match state {
        Some(s) => trainer::resume(s, &manifest, &cfg, Some(&out))?,
        None => trainer::train(&manifest, &cfg, Some(&out))?,
    };
    if let Some(last) = history.last() {
        println!(
            "trained to iteration {}: total {:.4} cyc {:.4} d_x {:.4} d_y {:.4}",
            state.iteration, last.total, last.cyc, last.d_x, last.d_y
        );
    } else {
        println!("nothing to do: already at iteration {}", state.iteration);
    }
    println!("checkpoint: {}", out.final_checkpoint_path().display());
    Ok(())
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Groups images by parent directory, each group sorted by name.
fn collect_clips(root: &Path, domain: Domain) -> Result<Vec<VideoClip>> {
    let mut clips = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let mut frames = Vec::new();
        for entry in std::fs::read_dir(&dir).with_context(|| format!("reading {}", dir.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if is_image(&path) {
                frames.push(path);
            }
        }
        if !frames.is_empty() {
            frames.sort();
            clips.push(VideoClip {
                clip_id: dir.strip_prefix(root).unwrap_or(&dir).display().to_string(),
                domain,
                frame_paths: frames,
            });
        }
    }
    clips.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
    Ok(clips)
}

fn translate(a: TranslateArgs) -> Result<()> {
    let bundle = trainer::load_bundle(&a.checkpoint)?;
    let direction = Direction::from(a.direction);
    let clips = collect_clips(&a.input, direction.source())?;
    if clips.is_empty() {
        bail!("no frames found under {}", a.input.display());
    }
    let mut frames = 0;
    let mut seconds = 0.0;
    for clip in &clips {
        let result = trainer::translate_clip(&bundle, clip, direction)?;
        for (src, frame) in clip.frame_paths.iter().zip(&result.frames) {
            let rel = src.strip_prefix(&a.input).expect("under input");
            let dst = a.output.join(rel).with_extension("png");
            if let Some(parent) = dst.parent() {
                std::fs::create_dir_all(parent)?;
            }
            postprocess(frame)?
                .save(&dst)
                .with_context(|| format!("writing {}", dst.display()))?;
        }
        frames += result.frames.len();
        seconds += result.seconds_per_frame.iter().sum::<f64>();
    }
    println!(
        "translated {frames} frames in {} clips, {:.2} ms/frame",
        clips.len(),
        1e3 * seconds / frames as f64
    );
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let extractor: Box<dyn FeatureExtractor> = match a.extractor {
        ExtractorArg::ColorLayout => Box::new(ColorLayoutFeatures),
        ExtractorArg::Perceptual => {
            let cfg = PerceptualConfig {
                weights: a.perceptual_weights.map(|p| p.display().to_string()),
                ..PerceptualConfig::default()
            };
            let net = PerceptualExtractor::new(&cfg, DType::F32, &Device::Cpu)?;
            Box::new(PerceptualFeatures::new(net, i2v_core::data::FRAME_SIZE))
        }
    };
    let report = evaluate(&a.translated, &a.reference, extractor.as_ref())?;
    match &a.output {
        Some(path) => {
            report.write_json(path)?;
            println!("report: {}", path.display());
        }
        None => println!("{}", report.to_json()?),
    }
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let manifest = load_manifest(&a.dataset)?;
    let summary = manifest.summary();
    if a.toml {
        print!("{}", summary.to_toml());
    } else {
        print!("{}", summary.table());
    }
    Ok(())
}
