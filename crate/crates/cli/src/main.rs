//! Command-line front end: synthetic data generation, training, rendering,
//! evaluation, and part-assignment visualization.
//!
//! Configs come from an optional JSON file plus repeatable `--set` overrides
//! (`--set path.to.field=json`); the resolved config is echoed next to the
//! outputs so every run is reproducible from its own directory.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use facefield::data::synth::{generate_dataset, SynthConfig, PART_PALETTE};
use facefield::data::{save_png, LoadedDataset, Split};
use facefield::deform::AssignMode;
use facefield::render::{render_ray, FieldBuf, ImageBuf, RenderOptions};
use facefield::train::{Trainer, TrainConfig};
use facefield::{Error, Result};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "facefield", version, about = "Part-based deformable head avatars")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic posed-head dataset with ground-truth renders.
    GenSynth(GenSynthArgs),
    /// Fit an avatar to a dataset with the three-stage schedule.
    Train(TrainArgs),
    /// Render dataset frames with a trained avatar.
    Render(RenderArgs),
    /// Compare rendered frames against ground truth (PSNR, SSIM, L1).
    Eval(EvalArgs),
    /// Color the surface by the dominant part assignment.
    VizParts(VizPartsArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; defaults fill omitted fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config field, e.g. `--set model.deform.hidden=32`.
    #[arg(long = "set", value_name = "PATH=JSON")]
    sets: Vec<String>,
}

#[derive(Args)]
struct GenSynthArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset directory to create.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset directory (from gen-synth).
    #[arg(long)]
    data: PathBuf,
    /// Run directory for the checkpoint, log, and resolved config.
    #[arg(long)]
    out: PathBuf,
    /// Continue from `out/checkpoint.bin` with its stored config.
    #[arg(long)]
    resume: bool,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output directory for PNGs and `renders.json`.
    #[arg(long)]
    out: PathBuf,
    /// Which frames: `train`, `test`, `all`, or comma-separated indices.
    #[arg(long, default_value = "test")]
    frames: String,
    #[arg(long, default_value_t = 32)]
    k_samples: usize,
    #[arg(long, default_value_t = 1e-3)]
    min_weight: f64,
    /// Part blending: `soft` or `hard`.
    #[arg(long, default_value = "soft")]
    mode: String,
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Metrics JSON destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    frames: String,
    #[arg(long, default_value_t = 32)]
    k_samples: usize,
    #[arg(long, default_value_t = 1e-3)]
    min_weight: f64,
    #[arg(long, default_value = "soft")]
    mode: String,
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Args)]
struct VizPartsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output PNG path.
    #[arg(long)]
    out: PathBuf,
    /// Dataset frame whose pose and camera to use.
    #[arg(long, default_value_t = 0)]
    frame: usize,
    #[arg(long, default_value_t = 32)]
    k_samples: usize,
    #[arg(long, default_value_t = 1e-3)]
    min_weight: f64,
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Help and version are successes; bad usage is a user error.
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenSynth(a) => gen_synth(a),
        Cmd::Train(a) => train(a),
        Cmd::Render(a) => render(a),
        Cmd::Eval(a) => eval(a),
        Cmd::VizParts(a) => viz_parts(a),
    }
}

/// Parse the config file (or `{}`), apply `--set` overrides, then let the
/// typed deserializer reject unknown fields and fill defaults.
fn resolve_config<T: serde::de::DeserializeOwned>(args: &ConfigArgs) -> Result<T> {
    let mut value = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::invalid("config", e.to_string()))?
        }
        None => Value::Object(Default::default()),
    };
    for spec in &args.sets {
        apply_set(&mut value, spec)?;
    }
    serde_json::from_value(value).map_err(|e| Error::invalid("config", e.to_string()))
}

/// Set `root[path] = value` where `path` is dot-separated; intermediate
/// objects are created as needed. The value parses as JSON, falling back to a
/// bare string so `--set mode=soft` works without quoting.
fn apply_set(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::invalid("--set", format!("expected PATH=VALUE, got `{spec}`")))?;
    if path.is_empty() {
        return Err(Error::invalid("--set", "empty path"));
    }
    let value: Value =
        serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let map = cur.as_object_mut().ok_or_else(|| {
            Error::invalid("--set", format!("`{}` is not an object", keys[..i].join(".")))
        })?;
        if i + 1 == keys.len() {
            map.insert((*key).to_string(), value);
            return Ok(());
        }
        cur = map
            .entry((*key).to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split('.') yields at least one key");
}

fn init_workers(workers: usize) -> Result<()> {
    if workers == 0 {
        return Ok(());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .map_err(|e| Error::invalid("--workers", e.to_string()))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::invalid("json", e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Echo the fully-resolved config (defaults included) next to the outputs.
fn echo_config<T: serde::Serialize>(dir: &Path, cfg: &T) -> Result<()> {
    let value = serde_json::to_value(cfg).map_err(|e| Error::invalid("config", e.to_string()))?;
    write_json(&dir.join("config.json"), &value)
}

fn parse_mode(s: &str) -> Result<AssignMode> {
    match s {
        "soft" => Ok(AssignMode::Soft),
        "hard" => Ok(AssignMode::Hard),
        other => Err(Error::invalid("--mode", format!("`{other}` is not soft|hard"))),
    }
}

/// `train`, `test`, `all`, or explicit comma-separated frame indices.
fn parse_frames(spec: &str, trainer: &Trainer) -> Result<Vec<usize>> {
    let n = trainer.frames.len();
    match spec {
        "train" => Ok(trainer.train_frames.clone()),
        "test" => Ok(trainer.test_frames.clone()),
        "all" => Ok((0..n).collect()),
        list => list
            .split(',')
            .map(|s| {
                let i: usize = s
                    .trim()
                    .parse()
                    .map_err(|_| Error::invalid("--frames", format!("`{s}` is not an index")))?;
                if i >= n {
                    return Err(Error::invalid(
                        "--frames",
                        format!("frame {i} out of range (dataset has {n})"),
                    ));
                }
                Ok(i)
            })
            .collect(),
    }
}

fn gen_synth(a: GenSynthArgs) -> Result<()> {
    let cfg = resolve_config::<SynthConfig>(&a.config)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    echo_config(&a.out, &cfg)?;
    let manifest = generate_dataset(&cfg, &a.out)?;
    println!(
        "wrote {} frames ({} train, {} test) to {}",
        manifest.frames.len(),
        manifest.train_indices().len(),
        manifest.test_indices().len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    init_workers(a.workers)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let dataset = LoadedDataset::load(&a.data)?;
    let ck_path = a.out.join("checkpoint.bin");
    let mut trainer = if a.resume {
        if !ck_path.exists() {
            return Err(Error::invalid(
                "--resume",
                format!("no checkpoint at {}", ck_path.display()),
            ));
        }
        Trainer::resume(dataset, &ck_path)?
    } else {
        let cfg = resolve_config::<TrainConfig>(&a.config)?;
        Trainer::new(cfg, dataset)?
    };
    echo_config(&a.out, &trainer.cfg)?;
    let log_path = a.out.join("train_log.jsonl");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    trainer.run(Some(&ck_path), &mut log)?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    println!(
        "trained to step {}; checkpoint at {}",
        trainer.step,
        ck_path.display()
    );
    Ok(())
}

fn render(a: RenderArgs) -> Result<()> {
    init_workers(a.workers)?;
    let mode = parse_mode(&a.mode)?;
    let dataset = LoadedDataset::load(&a.data)?;
    let trainer = Trainer::resume(dataset, &a.checkpoint)?;
    let frames = parse_frames(&a.frames, &trainer)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut entries = Vec::new();
    for &i in &frames {
        let img = trainer.render_frame(i, a.k_samples, a.min_weight, mode);
        let name = format!("frame_{i:03}.png");
        save_png(&a.out.join(&name), &img.rgb)?;
        let rec = &trainer.dataset.manifest.frames[i];
        entries.push(json!({
            "frame": i,
            "image": name,
            "split": if rec.split == Split::Train { "train" } else { "test" },
            "theta": rec.theta,
            "psi": rec.psi,
        }));
    }
    write_json(
        &a.out.join("renders.json"),
        &json!({ "step": trainer.step, "k_samples": a.k_samples, "frames": entries }),
    )?;
    println!("rendered {} frames to {}", frames.len(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    init_workers(a.workers)?;
    let mode = parse_mode(&a.mode)?;
    let dataset = LoadedDataset::load(&a.data)?;
    let trainer = Trainer::resume(dataset, &a.checkpoint)?;
    let frames = parse_frames(&a.frames, &trainer)?;
    let evals = trainer.evaluate(&frames, a.k_samples, a.min_weight, mode)?;
    let n = evals.len().max(1) as f64;
    let mean = |f: fn(&facefield::train::FrameEval) -> f64| {
        evals.iter().map(f).sum::<f64>() / n
    };
    let report = json!({
        "step": trainer.step,
        "k_samples": a.k_samples,
        "frames": evals,
        "mean_psnr": mean(|e| e.psnr),
        "mean_ssim": mean(|e| e.ssim),
        "mean_l1": mean(|e| e.l1),
    });
    match &a.out {
        Some(path) => {
            write_json(path, &report)?;
            println!("wrote metrics for {} frames to {}", evals.len(), path.display());
        }
        None => println!(
            "{}",
            serde_json::to_string_pretty(&report)
                .map_err(|e| Error::invalid("json", e.to_string()))?
        ),
    }
    Ok(())
}

/// Render the frame and color each surface pixel by the strongest part:
/// `palette[argmax S] * max S`, composited over white, so confident regions
/// are saturated and uncertain ones wash out.
fn viz_parts(a: VizPartsArgs) -> Result<()> {
    init_workers(a.workers)?;
    let dataset = LoadedDataset::load(&a.data)?;
    let trainer = Trainer::resume(dataset, &a.checkpoint)?;
    if a.frame >= trainer.frames.len() {
        return Err(Error::invalid(
            "--frame",
            format!("frame {} out of range (dataset has {})", a.frame, trainer.frames.len()),
        ));
    }
    let fc = &trainer.frames[a.frame];
    let field = trainer.avatar_field(a.frame, AssignMode::Soft);
    let opt = RenderOptions {
        k_samples: a.k_samples,
        near: fc.near,
        far: fc.far,
        min_weight: a.min_weight,
    };
    let (w, h) = (fc.camera.width, fc.camera.height);
    let mut img = ImageBuf::white(w, h);
    let mut buf = FieldBuf::default();
    let mut input = Vec::new();
    let mut probs = Vec::new();
    for py in 0..h {
        for px in 0..w {
            let ray = fc.camera.ray(px, py);
            let out = render_ray(&field, &ray, &opt, None, &mut buf);
            let Some(surf) = out.surface else { continue };
            // Assignment probabilities at the coarse-deformed point.
            let xp = fc.posed.inverse_lbs(ray.at(surf.t));
            trainer.model.deform.encode_input(xp, &fc.cond, &mut input);
            trainer.model.deform.assign_probs(&input, &mut buf.mlp, &mut probs);
            let (part, p) = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .expect("at least one part");
            let base = PART_PALETTE[part % PART_PALETTE.len()];
            let mut rgb = [0.0f32; 3];
            for ch in 0..3 {
                let c = base[ch] * p;
                rgb[ch] = (out.alpha * c + (1.0 - out.alpha)) as f32;
            }
            img.set_pixel(px, py, rgb);
        }
    }
    if let Some(dir) = a.out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    save_png(&a.out, &img)?;
    println!("wrote part map to {}", a.out.display());
    Ok(())
}
