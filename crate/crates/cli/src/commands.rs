use std::path::{Path, PathBuf};

use clap::Args;
use ifrnet::baseline::ifrcs_solve;
use ifrnet::io::{
    header_path, read_checkpoint_expecting, read_complex, read_mask, read_png, write_checkpoint, write_complex,
    write_loss_csv, write_mask, write_png, write_text, CheckpointHeader,
};
use ifrnet::metrics::{evaluate, CSV_HEADER};
use ifrnet::network::{forward, NetworkConfig, NetworkParams};
use ifrnet::sampling::{make_mask_with, normalize_peak, MaskPattern, TrainingPair};
use ifrnet::training::{gradcheck as run_gradcheck, train_with_callback};
use ifrnet::{ComplexImage, RealImage, C64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::{CliError, Precision};

pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub precision: Precision,
}

impl Context {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn echo_config(&self) -> Result<(), CliError> {
        write_text(&self.path("config.toml"), &self.cfg.to_toml())?;
        Ok(())
    }

    fn quantize(&self, img: ComplexImage) -> ComplexImage {
        match self.precision {
            Precision::F64 => img,
            Precision::F32 => img.map(|c| C64::new(c.re as f32 as f64, c.im as f32 as f64)),
        }
    }

    fn quantize_params(&self, theta: &mut NetworkParams) {
        if self.precision == Precision::F32 {
            theta.visit_mut(|_, v| *v = *v as f32 as f64);
        }
    }
}

fn pair_part(base: &Path, part: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".");
    s.push(part);
    PathBuf::from(s)
}

fn is_png(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn load_image(path: &Path) -> Result<ComplexImage, CliError> {
    if is_png(path) {
        Ok(ComplexImage::from_real(&read_png(path)?))
    } else {
        Ok(read_complex(path)?)
    }
}

fn load_pair(ctx: &Context, base: &Path) -> Result<TrainingPair, CliError> {
    let y = ctx.quantize(read_complex(&pair_part(base, "y"))?);
    let mask = read_mask(&pair_part(base, "mask"))?;
    let x_gt = ctx.quantize(read_complex(&pair_part(base, "gt"))?);
    if y.dims() != mask.dims() || y.dims() != x_gt.dims() {
        return Err(CliError::Validation(format!("pair {} has inconsistent dimensions", base.display())));
    }
    Ok(TrainingPair { y, mask, x_gt })
}

fn error_map(x_hat: &ComplexImage, gt: &ComplexImage) -> RealImage {
    let (h, w) = gt.dims();
    RealImage::from_fn(h, w, |i, j| 5.0 * (x_hat.get(i, j).norm() - gt.get(i, j).norm()).abs())
}

/// Writes the complex pair, magnitude PNG and, with a ground truth, the 5× error map.
fn write_reconstruction(ctx: &Context, name: &str, x_hat: &ComplexImage, gt: Option<&ComplexImage>) -> Result<(), CliError> {
    if !x_hat.is_finite() {
        return Err(CliError::Numerical(format!("{name}: reconstruction contains NaN/Inf")));
    }
    write_complex(&ctx.path(name), x_hat)?;
    write_png(&ctx.path(&format!("{name}.png")), &x_hat.magnitude())?;
    if let Some(gt) = gt {
        write_png(&ctx.path(&format!("{name}.error.png")), &error_map(x_hat, gt))?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    /// random1d, random2d, radial or full; defaults to the config.
    #[arg(long)]
    pub pattern: Option<String>,
    /// Side of a square mask.
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    #[arg(long)]
    pub rate: Option<f64>,
    #[arg(short = 'o', long = "output", default_value = "mask")]
    pub name: String,
}

pub fn mask(ctx: &Context, a: MaskArgs) -> Result<(), CliError> {
    let pattern: MaskPattern = match &a.pattern {
        Some(p) => p.parse()?,
        None => ctx.cfg.pattern()?,
    };
    let rate = a.rate.unwrap_or(ctx.cfg.sampling.rate);
    let m = make_mask_with(pattern, a.size, a.size, rate, ctx.cfg.sampling.seed, &ctx.cfg.mask_options())?;
    write_mask(&ctx.path(&a.name), &m)?;
    let preview = RealImage::from_vec(a.size, a.size, m.centered().iter().map(|&c| c as f64).collect())?;
    write_png(&ctx.path(&format!("{}.png", a.name)), &preview)?;
    println!("{} {}x{} nominal {} achieved {:.6}", pattern, a.size, a.size, rate, m.achieved_rate());
    Ok(())
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// PNG or complex pair base name.
    #[arg(long, conflicts_with = "phantom", required_unless_present = "phantom")]
    pub input: Option<PathBuf>,
    /// Use a Shepp-Logan phantom of side `--size` instead of `--input`.
    #[arg(long)]
    pub phantom: bool,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Phantom variant; 0 is the standard phantom.
    #[arg(long, default_value_t = 0)]
    pub variant: u64,
    /// Existing mask base name; generated from the config when absent.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(short = 'o', long = "output", default_value = "pair")]
    pub name: String,
}

pub fn simulate(ctx: &Context, a: SimulateArgs) -> Result<(), CliError> {
    let image = match &a.input {
        Some(path) => load_image(path)?,
        None => ifrnet::sampling::make_phantom_variant(a.size, a.size, a.variant)?,
    };
    let image = ctx.quantize(normalize_peak(&image)?);
    let (h, w) = image.dims();
    let mask = match &a.mask {
        Some(base) => read_mask(base)?,
        None => make_mask_with(
            ctx.cfg.pattern()?,
            h,
            w,
            ctx.cfg.sampling.rate,
            ctx.cfg.sampling.seed,
            &ctx.cfg.mask_options(),
        )?,
    };
    if mask.dims() != (h, w) {
        return Err(CliError::Validation(format!(
            "mask is {:?} but image is {:?}",
            mask.dims(),
            (h, w)
        )));
    }
    let pair = TrainingPair::simulate(&image, &mask)?;
    let base = ctx.path(&a.name);
    write_complex(&pair_part(&base, "y"), &pair.y)?;
    write_mask(&pair_part(&base, "mask"), &pair.mask)?;
    write_complex(&pair_part(&base, "gt"), &pair.x_gt)?;
    let zf = pair.zero_filled();
    write_png(&pair_part(&base, "zf.png"), &zf.magnitude())?;
    let row = evaluate(&zf, &pair.x_gt, false)?.csv_row("zero_filled");
    write_text(&pair_part(&base, "metrics.csv"), &format!("{CSV_HEADER}\n{row}\n"))?;
    println!("{row}");
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Pair base names written by `simulate`; repeatable.
    #[arg(long = "pair", required = true)]
    pub pairs: Vec<PathBuf>,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Also checkpoint every N steps.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(short = 'o', long = "output", default_value = "ckpt")]
    pub name: String,
}

fn expected_header(ctx: &Context) -> Result<(NetworkParams, CheckpointHeader), CliError> {
    let theta = NetworkParams::init(&ctx.cfg.network_config())?;
    let header = CheckpointHeader::new(&theta, &ctx.cfg.descriptor_config());
    Ok((theta, header))
}

fn load_checkpoint(path: &Path, header: &CheckpointHeader) -> Result<NetworkParams, CliError> {
    read_checkpoint_expecting(path, header).map_err(|e| CliError::Validation(e.to_string()))
}

pub fn train(ctx: &Context, a: TrainArgs) -> Result<(), CliError> {
    let pairs = a.pairs.iter().map(|p| load_pair(ctx, p)).collect::<Result<Vec<_>, _>>()?;
    let dcfg = ctx.cfg.descriptor_config();
    let tcfg = ctx.cfg.train_config();
    let (fresh, header) = expected_header(ctx)?;
    let mut theta = match &a.init {
        Some(path) => load_checkpoint(path, &header)?,
        None => fresh,
    };
    ctx.quantize_params(&mut theta);
    write_checkpoint(&ctx.path(&format!("{}_init.ifr", a.name)), &theta, &dcfg)?;
    let every = a.checkpoint_every.unwrap_or(0);
    let (mut theta, history) = train_with_callback(&pairs, &theta, &dcfg, &tcfg, |step, th, loss| {
        if every > 0 && (step + 1) % every == 0 {
            let mut th = th.clone();
            ctx.quantize_params(&mut th);
            write_checkpoint(&ctx.path(&format!("{}_step{:06}.ifr", a.name, step + 1)), &th, &dcfg)?;
            println!("step {} nmse {loss:.6}", step + 1);
        }
        Ok(())
    })?;
    ctx.quantize_params(&mut theta);
    write_checkpoint(&ctx.path(&format!("{}_final.ifr", a.name)), &theta, &dcfg)?;
    write_loss_csv(&ctx.path("loss.csv"), &history)?;
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        println!("trained {} steps: nmse {first:.6} -> {last:.6}", history.len());
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Pair base name; `<pair>.gt` is used for the error map when present.
    #[arg(long)]
    pub pair: PathBuf,
    #[arg(short = 'o', long = "output", default_value = "recon")]
    pub name: String,
}

pub fn reconstruct(ctx: &Context, a: ReconstructArgs) -> Result<(), CliError> {
    let (_, header) = expected_header(ctx)?;
    let mut theta = load_checkpoint(&a.checkpoint, &header)?;
    ctx.quantize_params(&mut theta);
    let y = ctx.quantize(read_complex(&pair_part(&a.pair, "y"))?);
    let mask = read_mask(&pair_part(&a.pair, "mask"))?;
    let gt_base = pair_part(&a.pair, "gt");
    let gt = if header_path(&gt_base).exists() {
        Some(read_complex(&gt_base)?)
    } else {
        None
    };
    let (x_hat, _) = forward(&y, &mask, &theta, &ctx.cfg.descriptor_config())?;
    write_reconstruction(ctx, &a.name, &x_hat, gt.as_ref())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Reconstruction: complex pair base name or PNG.
    #[arg(long)]
    pub recon: PathBuf,
    /// Ground truth: complex pair base name or PNG.
    #[arg(long)]
    pub gt: PathBuf,
    /// Row label; defaults to the reconstruction's file name.
    #[arg(long)]
    pub id: Option<String>,
    /// Report HFEN without dividing by the ground truth's LoG norm.
    #[arg(long)]
    pub absolute_hfen: bool,
    #[arg(short = 'o', long = "output", default_value = "metrics.csv")]
    pub name: String,
}

pub fn eval(ctx: &Context, a: EvalArgs) -> Result<(), CliError> {
    let x_hat = ctx.quantize(load_image(&a.recon)?);
    let gt = ctx.quantize(load_image(&a.gt)?);
    let id = a.id.unwrap_or_else(|| {
        a.recon
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "recon".into())
    });
    let row = evaluate(&x_hat, &gt, a.absolute_hfen)?.csv_row(&id);
    write_text(&ctx.path(&a.name), &format!("{CSV_HEADER}\n{row}\n"))?;
    println!("{row}");
    Ok(())
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[arg(long, default_value_t = 2)]
    pub stages: usize,
    #[arg(long, default_value_t = 2)]
    pub blocks: usize,
    #[arg(long, default_value_t = 4)]
    pub filters: usize,
    #[arg(long, default_value_t = 31)]
    pub plf_points: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-6)]
    pub step: f64,
    /// Largest accepted relative error per class.
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
}

/// Small network and random complex pair used for gradient checking.
pub fn gradcheck_setup(cfg: &RunConfig, a: &GradcheckArgs) -> Result<(NetworkParams, TrainingPair), CliError> {
    let ncfg = NetworkConfig {
        stages: a.stages,
        blocks: a.blocks,
        filters: a.filters,
        plf_points: a.plf_points,
        ..cfg.network_config()
    };
    let theta = NetworkParams::init(&ncfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ncfg.seed);
    let n = a.size;
    let img = ComplexImage::from_fn(n, n, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    let mask = make_mask_with(
        MaskPattern::Random2d,
        n,
        n,
        0.35,
        ncfg.seed,
        &cfg.mask_options(),
    )?;
    Ok((theta, TrainingPair::simulate(&img, &mask)?))
}

pub fn gradcheck(ctx: &Context, a: GradcheckArgs) -> Result<(), CliError> {
    if ctx.precision == Precision::F32 {
        return Err(CliError::Validation("gradcheck runs in f64 only".into()));
    }
    let (theta, pair) = gradcheck_setup(&ctx.cfg, &a)?;
    let report = run_gradcheck(&theta, &pair, &ctx.cfg.descriptor_config(), a.step, a.tol)?;
    println!("{report}");
    write_text(&ctx.path("gradcheck.txt"), &format!("{report}\n"))?;
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("gradient check failed at tolerance {:e}", a.tol)))
    }
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    /// Pair base name written by `simulate`.
    #[arg(long)]
    pub pair: PathBuf,
    #[arg(short = 'o', long = "output", default_value = "baseline")]
    pub name: String,
}

pub fn baseline(ctx: &Context, a: BaselineArgs) -> Result<(), CliError> {
    let pair = load_pair(ctx, &a.pair)?;
    let x_hat = ifrcs_solve(&pair.y, &pair.mask, &ctx.cfg.baseline_config()?)?;
    write_reconstruction(ctx, &a.name, &x_hat, Some(&pair.x_gt))?;
    let row = evaluate(&x_hat, &pair.x_gt, false)?.csv_row(&a.name);
    write_text(&ctx.path(&format!("{}.metrics.csv", a.name)), &format!("{CSV_HEADER}\n{row}\n"))?;
    println!("{row}");
    Ok(())
}
