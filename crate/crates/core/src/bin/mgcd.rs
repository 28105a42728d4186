use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use mgcd::eval::{extract_features, score_diagnostics};
use mgcd::gradcheck::{gradcheck, GradcheckConfig};
use mgcd::inpaint::{gen_masks, inpaint, masked_l1, masked_psnr, mean_fill, MaskKind};
use mgcd::io::checkpoint::{load_checkpoint, save_checkpoint};
use mgcd::io::images::{labels_csv, load_dataset, load_labeled, load_mask, save_grid, save_png, save_tensor};
use mgcd::io::RunConfig;
use mgcd::textures::{generate_noisy, TextureKind};
use mgcd::{Error, Tensor, TrainState};

#[derive(Parser)]
#[command(name = "mgcd", version, about = "Multi-grid energy-based ConvNet models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a key=value config plus `--key=value` overrides.
    Train(TrainArgs),
    /// Generate images from scratch and write one PNG grid per grid level.
    Sample(SampleArgs),
    /// Fill masked regions of images.
    Inpaint(InpaintArgs),
    /// Per-grid score statistics of image sets, as CSV.
    Eval(EvalArgs),
    /// Export per-grid feature maps as raw tensors.
    Features(FeaturesArgs),
    /// Finite-difference check of the analytic gradients.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic texture dataset as PNG files.
    Textures(TexturesArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Config file; omitted keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Overrides such as `--iterations=200`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "samples")]
    out: PathBuf,
}

#[derive(Args)]
struct InpaintArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of PNG images.
    #[arg(long)]
    images: PathBuf,
    /// `square:HxW`, `doodle`, `pepper[:P]`, or a PNG file (white = missing).
    #[arg(long, default_value = "square:8x8")]
    mask: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "inpaint")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image sets as `NAME=DIR`, repeatable.
    #[arg(long = "set", required = true)]
    sets: Vec<String>,
    /// CSV destination; standard output if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FeaturesArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// PNG directory, or one subdirectory per class.
    #[arg(long)]
    images: PathBuf,
    #[arg(long, default_value = "features")]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    configs: usize,
    #[arg(long, default_value_t = 6)]
    coords: usize,
    #[arg(long, default_value_t = 1e-3)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Absolute tolerance for near-zero gradients.
    #[arg(long, default_value_t = 1e-7)]
    abs_tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TexturesArgs {
    /// `stripes`, `hv-stripes`, `checkers` or `noise`.
    #[arg(long, default_value = "stripes")]
    kind: String,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 16)]
    side: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "textures")]
    out: PathBuf,
    /// One subdirectory per class instead of a flat directory.
    #[arg(long)]
    by_class: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Spec(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Inpaint(a) => inpaint_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Features(a) => features(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Textures(a) => textures(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

type CmdResult = mgcd::Result<u8>;

fn parse_overrides(cfg: &mut RunConfig, overrides: &[String]) -> mgcd::Result<()> {
    for o in overrides {
        let kv = o
            .strip_prefix("--")
            .and_then(|s| s.split_once('='))
            .ok_or_else(|| Error::Config(format!("override '{o}' must look like --key=value")))?;
        cfg.set(kv.0, kv.1)?;
    }
    Ok(())
}

/// Moves `--config`/`--resume` that ended up among the overrides back
/// into their own fields.
fn split_train_flags(mut a: TrainArgs) -> mgcd::Result<TrainArgs> {
    let mut rest = Vec::new();
    let mut it = std::mem::take(&mut a.overrides).into_iter();
    while let Some(arg) = it.next() {
        let (flag, inline) = match arg.split_once('=') {
            Some((f, v)) => (f.to_string(), Some(v.to_string())),
            None => (arg.clone(), None),
        };
        let slot = match flag.as_str() {
            "--config" => &mut a.config,
            "--resume" => &mut a.resume,
            _ => {
                rest.push(arg);
                continue;
            }
        };
        let value = inline.or_else(|| it.next()).ok_or_else(|| Error::Config(format!("{flag} needs a value")))?;
        *slot = Some(PathBuf::from(value));
    }
    a.overrides = rest;
    Ok(a)
}

fn train(a: TrainArgs) -> CmdResult {
    let a = split_train_flags(a)?;
    let mut run = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    parse_overrides(&mut run, &a.overrides)?;
    run.validate()?;
    let dataset_dir = run.dataset.clone().ok_or_else(|| Error::Config("no dataset given".into()))?;
    if !dataset_dir.is_dir() {
        return Err(Error::Config(format!("dataset {} is not a directory", dataset_dir.display())));
    }
    let (data, report) = load_dataset(&dataset_dir, run.train.image_side(), run.train.channels)?;
    if !report.skipped.is_empty() {
        warn!("skipped {} unreadable file(s)", report.skipped.len());
    }
    info!("loaded {} image(s) of side {}", report.loaded, run.train.image_side());

    let mut state = match &a.resume {
        Some(p) => {
            let mut s = load_checkpoint(p)?;
            if s.config.channels != run.train.channels || s.config.image_side() != run.train.image_side() {
                return Err(Error::Config("resumed checkpoint does not match the data shape".into()));
            }
            s.config.iterations = run.train.iterations;
            s
        }
        None => TrainState::new(run.train.clone(), &data)?,
    };
    fs::create_dir_all(&run.output)?;
    fs::write(run.output.join("config.txt"), run.to_text())?;
    let ckpt = run.output.join("model.mgcd");
    let every = run.checkpoint_every;
    state.run(&data, |s, recs| {
        for r in recs {
            info!("iter {} grid {}: score_train {:.4} score_synth {:.4} grad_l1 {:.4e}", r.iteration, r.grid, r.score_train, r.score_synth, r.grad_l1);
        }
        if every > 0 && s.iteration % every == 0 {
            save_checkpoint(s, &ckpt)?;
        }
        Ok(())
    })?;
    save_checkpoint(&state, &ckpt)?;
    fs::write(run.output.join("diagnostics.csv"), state.diagnostics().to_csv())?;
    info!("wrote {}", ckpt.display());
    Ok(0)
}

fn sample(a: SampleArgs) -> CmdResult {
    let state = load_checkpoint(&a.checkpoint)?;
    let levels = state.sample(a.n, a.seed)?;
    fs::create_dir_all(&a.out)?;
    let cols = (a.n as f64).sqrt().ceil() as usize;
    for (level, model) in levels.iter().zip(&state.models) {
        let side = level.shape().h;
        let path = a.out.join(format!("grid{}_{side}x{side}.png", model.grid()));
        save_grid(level, cols, &path)?;
        info!("wrote {}", path.display());
    }
    Ok(0)
}

fn inpaint_cmd(a: InpaintArgs) -> CmdResult {
    let state = load_checkpoint(&a.checkpoint)?;
    let (images, _) = load_dataset(&a.images, state.config.image_side(), state.config.channels)?;
    let s = images.shape();
    let mask = if Path::new(&a.mask).extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        let m = load_mask(Path::new(&a.mask), s.h)?;
        Tensor::concat(&vec![m; s.n])?
    } else {
        gen_masks(MaskKind::parse(&a.mask)?, s.n, s.h, s.w, a.seed)?
    };
    let recon = inpaint(&state, &images, &mask, mgcd::rng::derive_seed(a.seed, 1))?;
    let filled = mean_fill(&images, &mask)?;
    fs::create_dir_all(&a.out)?;
    let mut csv = String::from("index,error,psnr,mean_fill_error,mean_fill_psnr\n");
    for i in 0..s.n {
        let (t, r, f, m) = (images.item_tensor(i), recon.item_tensor(i), filled.item_tensor(i), mask.item_tensor(i));
        csv.push_str(&format!(
            "{i},{},{},{},{}\n",
            masked_l1(&t, &r, &m)?,
            masked_psnr(&t, &r, &m)?,
            masked_l1(&t, &f, &m)?,
            masked_psnr(&t, &f, &m)?
        ));
        save_png(&recon, i, &a.out.join(format!("{i:05}_inpainted.png")))?;
        save_png(&f, 0, &a.out.join(format!("{i:05}_masked.png")))?;
    }
    fs::write(a.out.join("report.csv"), csv)?;
    info!(
        "masked L1 error {:.4} (mean fill {:.4})",
        masked_l1(&images, &recon, &mask)?,
        masked_l1(&images, &filled, &mask)?
    );
    Ok(0)
}

fn eval(a: EvalArgs) -> CmdResult {
    let state = load_checkpoint(&a.checkpoint)?;
    let mut sets = Vec::new();
    for s in &a.sets {
        let (name, dir) = s.split_once('=').ok_or_else(|| Error::Config(format!("set '{s}' must look like NAME=DIR")))?;
        let (images, _) = load_dataset(Path::new(dir), state.config.image_side(), state.config.channels)?;
        sets.push((name.to_string(), images));
    }
    let named: Vec<(&str, &Tensor<f32>)> = sets.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let mut csv = String::from("set,grid,n,mean,std\n");
    for r in score_diagnostics(&state, &named)? {
        csv.push_str(&format!("{},{},{},{},{}\n", r.set, r.grid, r.n, r.mean, r.std));
    }
    match &a.out {
        Some(p) => fs::write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(0)
}

fn features(a: FeaturesArgs) -> CmdResult {
    let state = load_checkpoint(&a.checkpoint)?;
    let data = load_labeled(&a.images, state.config.image_side(), state.config.channels)?;
    let bundle = extract_features(&state, &data.images)?;
    fs::create_dir_all(&a.out)?;
    for (grid, map) in bundle.grids.iter().zip(&bundle.maps) {
        let path = a.out.join(format!("grid{grid}.mgtn"));
        save_tensor(map, &path)?;
        info!("wrote {} ({})", path.display(), map.shape());
    }
    fs::write(a.out.join("labels.csv"), labels_csv(&data.labels, &data.classes))?;
    Ok(0)
}

fn gradcheck_cmd(a: GradcheckArgs) -> CmdResult {
    let report = gradcheck(&GradcheckConfig {
        configs: a.configs,
        coords: a.coords,
        step: a.step,
        tolerance: a.tolerance,
        abs_tolerance: a.abs_tolerance,
        seed: a.seed,
    })?;
    for (i, c) in report.cases.iter().enumerate() {
        println!(
            "case {i}: batch {} mode {} checked {} skipped {} max rel error {:.3e} max abs error {:.1e}  {}",
            c.batch, c.mode, c.checked, c.skipped, c.max_rel_error, c.max_abs_error, c.spec
        );
    }
    let ok = report.passed();
    println!(
        "{}: {} coordinates, max relative error {:.3e} (tolerance {:.0e}), max absolute error {:.1e} (tolerance {:.0e})",
        if ok { "PASS" } else { "FAIL" },
        report.checked(),
        report.max_rel_error(),
        report.tolerance,
        report.max_abs_error(),
        report.abs_tolerance
    );
    Ok(if ok { 0 } else { 3 })
}

fn textures(a: TexturesArgs) -> CmdResult {
    let kind = TextureKind::parse(&a.kind)?;
    let set = generate_noisy(kind, a.n, a.channels, a.side, a.noise, a.seed)?;
    for i in 0..set.len() {
        let dir = if a.by_class { a.out.join(format!("class{}", set.labels[i])) } else { a.out.clone() };
        fs::create_dir_all(&dir)?;
        save_png(&set.images, i, &dir.join(format!("{i:05}.png")))?;
    }
    info!("wrote {} image(s) to {}", set.len(), a.out.display());
    Ok(0)
}
