use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use awan::checkpoint::{self, Checkpoint};
use awan::config::RunConfig;
use awan::data::{
    css_project, default_css, load_css, load_tensor, rgb_to_ppm, save_tensor, synth_dataset,
    CssFunction, HsiCube, RgbImage,
};
use awan::gradcheck::gradcheck;
use awan::loss::{error_heatmap, evaluate_set};
use awan::model::{count_parameters, Awan};
use awan::train::Trainer;
use awan::{Scalar, Tensor};

const HSI_SUFFIX: &str = "_hsi.cube";
const RGB_SUFFIX: &str = "_rgb.cube";
const PRED_SUFFIX: &str = "_pred.cube";

#[derive(Parser)]
#[command(name = "awan", version, about = "RGB to hyperspectral reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a directory of cube pairs.
    Train(TrainArgs),
    /// Reconstruct cubes from RGB images.
    Infer(InferArgs),
    /// Score predicted cubes against ground truth.
    Eval(EvalArgs),
    /// Project a cube to RGB through a sensitivity function.
    Project(ProjectArgs),
    /// Write a per-pixel relative error heatmap.
    Heatmap(HeatmapArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct Settings {
    /// key = value file applied before the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    /// Relative-error denominator floor, or `none`.
    #[arg(long)]
    floor: Option<String>,
    /// Sensitivity CSV; training without it disables the projection term.
    #[arg(long)]
    css: Option<PathBuf>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    /// Channel attention reduction ratio.
    #[arg(long)]
    t: Option<usize>,
    /// Non-local attention reduction ratio.
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    power: Option<f64>,
    #[arg(long = "ckpt-every")]
    ckpt_every: Option<u64>,
    /// Compute in 64-bit floating point.
    #[arg(long)]
    fp64: bool,
}

impl Settings {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        let flags: [(&str, Option<String>); 14] = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("iters", self.iters.map(|v| v.to_string())),
            ("batch", self.batch.map(|v| v.to_string())),
            ("patch", self.patch.map(|v| v.to_string())),
            ("tau", self.tau.map(|v| v.to_string())),
            ("floor", self.floor.clone()),
            ("css", self.css.as_ref().map(|p| p.display().to_string())),
            ("blocks", self.blocks.map(|v| v.to_string())),
            ("channels", self.channels.map(|v| v.to_string())),
            ("t", self.t.map(|v| v.to_string())),
            ("r", self.r.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("power", self.power.map(|v| v.to_string())),
            ("ckpt-every", self.ckpt_every.map(|v| v.to_string())),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        if self.fp64 {
            cfg.fp64 = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of `<name>_hsi.cube` / `<name>_rgb.cube` pairs.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the log and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    settings: Settings,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// An RGB cube file, or a directory of `<name>_rgb.cube` files.
    #[arg(long)]
    input: PathBuf,
    /// Output file, or directory receiving `<name>_pred.cube` files.
    #[arg(long)]
    out: PathBuf,
    /// Average with the vertically flipped pass.
    #[arg(long = "self-ensemble")]
    self_ensemble: bool,
    #[arg(long)]
    fp64: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Ground-truth cube file, or directory of `<name>_hsi.cube` files.
    #[arg(long)]
    gt: PathBuf,
    /// Predicted cube file, or directory of `<name>_pred.cube` files.
    #[arg(long)]
    pred: PathBuf,
    /// Relative-error denominator floor, or `none`.
    #[arg(long, default_value = "1e-4")]
    floor: String,
}

#[derive(Args)]
struct ProjectArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Sensitivity CSV; the bundled table when omitted.
    #[arg(long)]
    css: Option<PathBuf>,
    /// Also write a PPM preview scaled so the brightest value is white.
    #[arg(long)]
    ppm: Option<PathBuf>,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    /// PPM output; the range is written next to it with a `.range` suffix.
    #[arg(long)]
    out: PathBuf,
    /// Fixed color range `lo,hi`; defaults to the map's own extent.
    #[arg(long)]
    range: Option<String>,
    #[arg(long, default_value = "1e-4")]
    floor: String,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    css: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Operation name, `full_model` or `all`.
    #[arg(long, default_value = "all")]
    target: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_floor(value: &str) -> Result<Option<f64>> {
    match value {
        "none" | "off" => Ok(None),
        v => {
            let f: f64 = v.parse().with_context(|| format!("invalid floor `{v}`"))?;
            if !(f > 0.0) {
                bail!("floor must be > 0 or `none`, got {f}");
            }
            Ok(Some(f))
        }
    }
}

fn css_or_default(path: Option<&Path>) -> Result<CssFunction> {
    Ok(match path {
        Some(p) => load_css(p)?,
        None => default_css(),
    })
}

/// Files in `dir` ending in `suffix`, sorted, with the stem before it.
fn files_with_suffix(dir: &Path, suffix: &str) -> Result<Vec<(String, PathBuf)>> {
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(stem) = name.strip_suffix(suffix) {
            found.push((stem.to_string(), path.clone()));
        }
    }
    found.sort();
    Ok(found)
}

fn load_pairs(dir: &Path) -> Result<Vec<(HsiCube, RgbImage)>> {
    let mut pairs = Vec::new();
    for (stem, hsi_path) in files_with_suffix(dir, HSI_SUFFIX)? {
        let rgb_path = dir.join(format!("{stem}{RGB_SUFFIX}"));
        let hsi = HsiCube::load(&hsi_path)?;
        let rgb = RgbImage::load(&rgb_path)?;
        if hsi.data().shape()[1..] != rgb.data().shape()[1..] {
            bail!("{stem}: cube and RGB image sizes differ");
        }
        pairs.push((hsi, rgb));
    }
    if pairs.is_empty() {
        bail!("no `*{HSI_SUFFIX}` files in {}", dir.display());
    }
    Ok(pairs)
}

fn train(args: &TrainArgs) -> Result<()> {
    let cfg = args.settings.resolve()?;
    if cfg.fp64 {
        train_with::<f64>(args, &cfg)
    } else {
        train_with::<f32>(args, &cfg)
    }
}

fn train_with<E: Scalar>(args: &TrainArgs, cfg: &RunConfig) -> Result<()> {
    let dataset = load_pairs(&args.data)?;
    let css = cfg.css.as_deref().map(load_css).transpose()?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut trainer = match &args.resume {
        Some(path) => {
            let ckpt = checkpoint::load(path)?;
            if ckpt.config != cfg.model {
                eprintln!("note: using the model configuration stored in {}", path.display());
            }
            Trainer::<E>::resume(&ckpt, cfg.train, css.as_ref())?
        }
        None => Trainer::<E>::new(cfg.model, cfg.train, css.as_ref())?,
    };
    eprintln!(
        "training {} parameters on {} pairs for {} iterations",
        count_parameters(&trainer.params),
        dataset.len(),
        cfg.train.iterations
    );
    let log_path = args.out.join("train.log");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let out = args.out.clone();
    trainer.run(
        &dataset,
        |record| {
            println!("{record}");
            writeln!(log, "{record}").map_err(|e| awan::Error::Io {
                path: log_path.clone(),
                source: e,
            })
        },
        |ckpt| {
            let step = ckpt.optim.as_ref().map_or(0, |s| s.step);
            checkpoint::save(out.join(format!("ckpt_{step:08}.ckpt")), ckpt)
        },
    )?;
    let final_path = args.out.join("final.ckpt");
    checkpoint::save(&final_path, &trainer.checkpoint())?;
    eprintln!("wrote {}", final_path.display());
    Ok(())
}

fn load_model<E: Scalar>(path: &Path) -> Result<(Awan, awan::ParamSet<E>)> {
    let ckpt: Checkpoint = checkpoint::load(path)?;
    let (model, params) = ckpt.restore()?;
    Ok((model, params.cast()))
}

fn infer(args: &InferArgs) -> Result<()> {
    if args.fp64 {
        infer_with::<f64>(args)
    } else {
        infer_with::<f32>(args)
    }
}

fn infer_with<E: Scalar>(args: &InferArgs) -> Result<()> {
    let (model, params) = load_model::<E>(&args.ckpt)?;
    let run = |input: &Path, output: &Path| -> Result<()> {
        let rgb: Tensor<E> = RgbImage::load(input)?.data().cast();
        let hsi = if args.self_ensemble {
            model.infer_self_ensemble(&params, &rgb)?
        } else {
            model.infer(&params, &rgb)?
        };
        save_tensor(output, &hsi.cast())?;
        println!("{} -> {}", input.display(), output.display());
        Ok(())
    };
    if args.input.is_dir() {
        fs::create_dir_all(&args.out)?;
        let inputs = files_with_suffix(&args.input, RGB_SUFFIX)?;
        if inputs.is_empty() {
            bail!("no `*{RGB_SUFFIX}` files in {}", args.input.display());
        }
        for (stem, path) in inputs {
            run(&path, &args.out.join(format!("{stem}{PRED_SUFFIX}")))?;
        }
        Ok(())
    } else {
        run(&args.input, &args.out)
    }
}

fn eval(args: &EvalArgs) -> Result<()> {
    let floor = parse_floor(&args.floor)?;
    if args.gt.is_dir() {
        let mut pairs = Vec::new();
        for (stem, gt_path) in files_with_suffix(&args.gt, HSI_SUFFIX)? {
            let pred_path = args.pred.join(format!("{stem}{PRED_SUFFIX}"));
            pairs.push((load_tensor(&gt_path)?, load_tensor(&pred_path)?));
        }
        if pairs.is_empty() {
            bail!("no `*{HSI_SUFFIX}` files in {}", args.gt.display());
        }
        println!("{}", evaluate_set(&pairs, floor)?);
    } else {
        let pair = (load_tensor(&args.gt)?, load_tensor(&args.pred)?);
        let report = evaluate_set(&[pair], floor)?;
        println!("mrae={}", report.mean_mrae);
        println!("rmse={}", report.mean_rmse);
    }
    Ok(())
}

fn project(args: &ProjectArgs) -> Result<()> {
    let css = css_or_default(args.css.as_deref())?;
    let cube = HsiCube::load(&args.input)?;
    let rgb = css_project(&cube, &css)?;
    rgb.save(&args.out)?;
    if let Some(ppm) = &args.ppm {
        let max = rgb.data().max_abs();
        let scale = if max > 0.0 { 1.0 / max } else { 1.0 };
        fs::write(ppm, rgb_to_ppm(rgb.data(), scale)?).with_context(|| format!("writing {}", ppm.display()))?;
    }
    Ok(())
}

fn heatmap(args: &HeatmapArgs) -> Result<()> {
    let range = match &args.range {
        None => None,
        Some(text) => {
            let (lo, hi) = text.split_once(',').context("--range expects `lo,hi`")?;
            Some((lo.trim().parse::<f64>()?, hi.trim().parse::<f64>()?))
        }
    };
    let gt = load_tensor(&args.gt)?;
    let pred = load_tensor(&args.pred)?;
    let map = error_heatmap(&gt, &pred, parse_floor(&args.floor)?, range)?;
    let sidecar = map.write(&args.out)?;
    println!("min={} max={}", map.range.0, map.range.1);
    eprintln!("wrote {} and {}", args.out.display(), sidecar.display());
    Ok(())
}

fn synth(args: &SynthArgs) -> Result<()> {
    let css = css_or_default(args.css.as_deref())?;
    let pairs = synth_dataset(args.seed, args.count, args.height, args.width, &css)?;
    fs::create_dir_all(&args.out)?;
    for (i, (hsi, rgb)) in pairs.iter().enumerate() {
        hsi.save(args.out.join(format!("{i:04}{HSI_SUFFIX}")))?;
        rgb.save(args.out.join(format!("{i:04}{RGB_SUFFIX}")))?;
    }
    println!("wrote {} pairs to {}", pairs.len(), args.out.display());
    Ok(())
}

fn run_gradcheck(args: &GradcheckArgs) -> Result<bool> {
    let reports = gradcheck(&args.target, args.seed)?;
    let failed = reports.iter().filter(|r| !r.passed()).count();
    for r in &reports {
        print!("{r}");
    }
    println!("targets={} failed={}", reports.len(), failed);
    Ok(failed == 0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Train(a) => train(a).map(|_| true),
        Command::Infer(a) => infer(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Project(a) => project(a).map(|_| true),
        Command::Heatmap(a) => heatmap(a).map(|_| true),
        Command::Synth(a) => synth(a).map(|_| true),
        Command::Gradcheck(a) => run_gradcheck(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

