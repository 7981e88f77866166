use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::Args;
use illumfield::checkpoint::Checkpoint;
use illumfield::equivariance::LatentCode;
use illumfield::eval::{hdr_psnr, ldr_psnr, save_triptych};
use illumfield::field::FieldModel;
use illumfield::fitting::{
    decode_environment, fit_latent, interpolate as lerp_codes, log_pixels, optimal_scale,
    sample_prior, FitConfig,
};
use illumfield::geometry::Rotation;
use illumfield::hdr_io::{load_mask_png, lower_hemisphere_mask, save_mask_png, EnvironmentImage};
use illumfield::rng::seeded;
use illumfield::training::LatentBank;
use serde::{Deserialize, Serialize};

use super::{load_checkpoint, load_image, load_model, parse_size, Ctx};

/// Name of the code inside latent checkpoints.
pub const LATENT_KEY: &str = "z";

fn fit_config(
    steps: Option<usize>,
    lr_start: Option<f64>,
    lr_end: Option<f64>,
    batch: Option<usize>,
    seed: u64,
) -> anyhow::Result<FitConfig> {
    let d = FitConfig::default();
    let cfg = FitConfig {
        steps: steps.unwrap_or(d.steps),
        lr_start: lr_start.unwrap_or(d.lr_start),
        lr_end: lr_end.unwrap_or(d.lr_end),
        batch_size: batch.unwrap_or(d.batch_size),
        seed,
        ..d
    };
    cfg.validate()?;
    Ok(cfg)
}

fn save_latent(ctx: &Ctx, name: &str, z: &LatentCode) -> anyhow::Result<()> {
    let mut ck = Checkpoint::new();
    z.write_checkpoint(&mut ck, LATENT_KEY);
    ctx.save_checkpoint(name, &ck)
}

fn load_latent(path: &Path) -> anyhow::Result<LatentCode> {
    let ck = load_checkpoint(path)?;
    LatentCode::from_checkpoint(&ck, LATENT_KEY)
        .with_context(|| format!("{} does not hold a latent code", path.display()))
}

/// A stored code: a latent file if given, else row `index` of the bank.
fn pick_code(ck: &Checkpoint, file: Option<&PathBuf>, index: usize) -> anyhow::Result<LatentCode> {
    if let Some(p) = file {
        return load_latent(p);
    }
    let bank = LatentBank::from_checkpoint(ck)
        .context("checkpoint has no latent bank; pass a latent file")?;
    Ok(bank.code(index)?)
}

fn check_dim(model: &FieldModel<f32>, z: &LatentCode) -> anyhow::Result<()> {
    if z.n() != model.n() {
        bail!(
            "latent code has D = {} but the model expects D = {}",
            z.dim(),
            3 * model.n()
        );
    }
    Ok(())
}

/// Decodes `z` at `image`'s resolution and rescales it so its log mean over
/// observed pixels matches the image.
fn decode_aligned(
    model: &FieldModel<f32>,
    z: &LatentCode,
    image: &EnvironmentImage,
) -> anyhow::Result<EnvironmentImage> {
    let decoded = decode_environment(model, z, image.height(), image.width())?;
    let b = optimal_scale(&log_pixels(&decoded), &log_pixels(image), image.mask())?;
    Ok(decoded.scaled(b.exp() as f32)?)
}

fn linear(image: &EnvironmentImage) -> Vec<[f64; 3]> {
    image.pixels().iter().map(|p| p.map(f64::from)).collect()
}

fn history_csv(history: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in history.iter().enumerate() {
        s.push_str(&format!("{},{l:e}\n", i + 1));
    }
    s
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct FitArgs {
    /// Trained model checkpoint
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Target .hdr image
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// PNG mask at the image size; white pixels are observed
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Optimisation steps [default: 2500]
    #[arg(long)]
    pub steps: Option<usize>,
    /// Initial learning rate [default: 1e-1]
    #[arg(long)]
    pub lr_start: Option<f64>,
    /// Final learning rate [default: 1e-7]
    #[arg(long)]
    pub lr_end: Option<f64>,
    /// Direction samples per step [default: 2048]
    #[arg(long)]
    pub batch_size: Option<usize>,
}

pub fn fit(ctx: &Ctx, args: &FitArgs) -> anyhow::Result<()> {
    let (model, _) = load_model(args.ckpt.as_deref().context("missing --ckpt")?)?;
    let mut image = load_image(args.image.as_deref().context("missing --image")?)?;
    if let Some(m) = &args.mask {
        let mask = load_mask_png(m, image.height(), image.width())?;
        image = image.with_mask(mask)?;
    }
    let cfg = fit_config(
        args.steps,
        args.lr_start,
        args.lr_end,
        args.batch_size,
        ctx.seed,
    )?;
    let result = fit_latent(&model, &image, &cfg)?;
    let decoded = decode_aligned(&model, &result.code, &image)?;
    let stem = if args.mask.is_some() {
        "completed"
    } else {
        "fitted"
    };
    ctx.save_env(stem, &decoded)?;
    save_latent(ctx, "latent.ckpt", &result.code)?;
    ctx.write("fit_loss.csv", history_csv(&result.history))?;
    let (p, t) = (linear(&decoded), linear(&image));
    println!(
        "{stem}: PSNR-LDR {:.2} dB, PSNR-HDR {:.2} dB over the full image; final loss {:.4e}",
        ldr_psnr(&p, &t)?,
        hdr_psnr(&p, &t)?,
        result.history.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct CompleteArgs {
    /// Trained model checkpoint
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Full .hdr image; only one hemisphere of it is shown to the fit
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Observed hemisphere: lower or upper [default: lower]
    #[arg(long)]
    pub observe: Option<String>,
    /// Optimisation steps [default: 2500]
    #[arg(long)]
    pub steps: Option<usize>,
    /// Initial learning rate [default: 1e-1]
    #[arg(long)]
    pub lr_start: Option<f64>,
    /// Final learning rate [default: 1e-7]
    #[arg(long)]
    pub lr_end: Option<f64>,
    /// Direction samples per step [default: 2048]
    #[arg(long)]
    pub batch_size: Option<usize>,
}

pub fn complete(ctx: &Ctx, args: &CompleteArgs) -> anyhow::Result<()> {
    let (model, _) = load_model(args.ckpt.as_deref().context("missing --ckpt")?)?;
    let full = load_image(args.image.as_deref().context("missing --image")?)?.without_mask();
    let (h, w) = (full.height(), full.width());
    let lower = lower_hemisphere_mask(w, h);
    let mask: Vec<bool> = match args.observe.as_deref().unwrap_or("lower") {
        "lower" => lower,
        "upper" => lower.iter().map(|v| !v).collect(),
        other => bail!("unknown hemisphere {other:?} (expected lower or upper)"),
    };
    let observed = full.clone().with_mask(mask.clone())?;
    let cfg = fit_config(
        args.steps,
        args.lr_start,
        args.lr_end,
        args.batch_size,
        ctx.seed,
    )?;
    let result = fit_latent(&model, &observed, &cfg)?;
    let completed = decode_aligned(&model, &result.code, &observed)?;

    save_mask_png(&mask, w, h, ctx.path("mask.png"))?;
    ctx.save_env("completed", &completed)?;
    save_latent(ctx, "latent.ckpt", &result.code)?;
    ctx.write("fit_loss.csv", history_csv(&result.history))?;
    let (p, t) = (linear(&completed), linear(&full));
    save_triptych(&t, &p, w, h, ctx.path("triptych.png"))?;

    let hidden: Vec<usize> = (0..mask.len()).filter(|&i| !mask[i]).collect();
    let (hp, ht): (Vec<_>, Vec<_>) = hidden.iter().map(|&i| (p[i], t[i])).unzip();
    println!(
        "completion: PSNR-HDR {:.2} dB over the hidden half, {:.2} dB over the full image",
        hdr_psnr(&hp, &ht)?,
        hdr_psnr(&p, &t)?
    );
    Ok(())
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct SampleArgs {
    /// Trained model checkpoint
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Number of samples [default: 4]
    #[arg(long)]
    pub count: Option<usize>,
    /// Output raster size as HxW [default: 64x128]
    #[arg(long)]
    pub size: Option<String>,
}

pub fn sample(ctx: &Ctx, args: &SampleArgs) -> anyhow::Result<()> {
    let (model, _) = load_model(args.ckpt.as_deref().context("missing --ckpt")?)?;
    let (h, w) = parse_size(args.size.as_deref().unwrap_or("64x128"))?;
    let count = args.count.unwrap_or(4);
    let mut rng = seeded(ctx.seed);
    let mut codes = Checkpoint::new();
    for i in 0..count {
        let z = sample_prior(model.n(), &mut rng);
        ctx.save_env(
            &format!("sample_{i:04}"),
            &decode_environment(&model, &z, h, w)?,
        )?;
        z.write_checkpoint(&mut codes, &format!("sample.{i}"));
    }
    ctx.save_checkpoint("samples.ckpt", &codes)?;
    println!("wrote {count} samples");
    Ok(())
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct InterpolateArgs {
    /// Trained model checkpoint
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Start code file; defaults to a training code
    #[arg(long)]
    pub from: Option<PathBuf>,
    /// End code file; defaults to a training code
    #[arg(long)]
    pub to: Option<PathBuf>,
    /// Training image whose code starts the path [default: 0]
    #[arg(long)]
    pub from_index: Option<usize>,
    /// Training image whose code ends the path [default: 1]
    #[arg(long)]
    pub to_index: Option<usize>,
    /// Frames including both ends [default: 8]
    #[arg(long)]
    pub frames: Option<usize>,
    /// Output raster size as HxW [default: 64x128]
    #[arg(long)]
    pub size: Option<String>,
}

pub fn interpolate(ctx: &Ctx, args: &InterpolateArgs) -> anyhow::Result<()> {
    let (model, ck) = load_model(args.ckpt.as_deref().context("missing --ckpt")?)?;
    let a = pick_code(&ck, args.from.as_ref(), args.from_index.unwrap_or(0))?;
    let b = pick_code(&ck, args.to.as_ref(), args.to_index.unwrap_or(1))?;
    check_dim(&model, &a)?;
    check_dim(&model, &b)?;
    let frames = args.frames.unwrap_or(8);
    if frames < 2 {
        bail!("need at least 2 frames, got {frames}");
    }
    let (h, w) = parse_size(args.size.as_deref().unwrap_or("64x128"))?;
    for i in 0..frames {
        let t = i as f64 / (frames - 1) as f64;
        let z = lerp_codes(&a, &b, t)?;
        ctx.save_env(
            &format!("frame_{i:04}"),
            &decode_environment(&model, &z, h, w)?,
        )?;
    }
    println!("wrote {frames} frames");
    Ok(())
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct RotateArgs {
    /// Trained model checkpoint
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Code file; defaults to a training code
    #[arg(long)]
    pub latent: Option<PathBuf>,
    /// Training image whose code is rotated [default: 0]
    #[arg(long)]
    pub index: Option<usize>,
    /// Rotation about the vertical axis in degrees [default: 90]
    #[arg(long, allow_negative_numbers = true)]
    pub angle: Option<f64>,
    /// Output raster size as HxW [default: 64x128]
    #[arg(long)]
    pub size: Option<String>,
}

pub fn rotate(ctx: &Ctx, args: &RotateArgs) -> anyhow::Result<()> {
    let (model, ck) = load_model(args.ckpt.as_deref().context("missing --ckpt")?)?;
    let z = pick_code(&ck, args.latent.as_ref(), args.index.unwrap_or(0))?;
    check_dim(&model, &z)?;
    let angle = args.angle.unwrap_or(90.0);
    if !angle.is_finite() {
        bail!("angle must be finite");
    }
    let (h, w) = parse_size(args.size.as_deref().unwrap_or("64x128"))?;
    let rotated = z.rotated(&Rotation::about_y(angle.to_radians()));
    ctx.save_env("original", &decode_environment(&model, &z, h, w)?)?;
    ctx.save_env("rotated", &decode_environment(&model, &rotated, h, w)?)?;
    save_latent(ctx, "rotated_latent.ckpt", &rotated)?;
    println!("rotated the code by {angle} degrees about the vertical axis");
    Ok(())
}
