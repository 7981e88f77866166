use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::Args;
use illumfield::checkpoint::Checkpoint;
use illumfield::equivariance::EquivarianceMode;
use illumfield::field::{FieldConfig, OutputActivation};
use illumfield::training::{train_with_progress, AugmentConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use super::{channels_for_dim, load_image_dir, Ctx};

pub const MODEL_FILE: &str = "model.ckpt";

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct TrainArgs {
    /// Directory of equirectangular .hdr training images
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Equivariance mode: so2, so3 or none [default: so2]
    #[arg(long)]
    pub mode: Option<String>,
    /// Latent dimension D, a multiple of 3 [default: 27]
    #[arg(long)]
    pub latent_dim: Option<usize>,
    /// Optimisation steps [default: 5000]
    #[arg(long)]
    pub steps: Option<usize>,
    /// Architecture preset: small, desk or full [default: desk]
    #[arg(long)]
    pub arch: Option<String>,
    /// Override the preset's hidden width
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Override the preset's layer count
    #[arg(long)]
    pub layers: Option<usize>,
    /// Override the preset's attention head count
    #[arg(long)]
    pub heads: Option<usize>,
    /// Override the preset's positional-encoding frequency count
    #[arg(long)]
    pub pe_frequencies: Option<usize>,
    /// Output nonlinearity: identity or softplus-shift [default: identity]
    #[arg(long)]
    pub output_activation: Option<String>,
    /// Direction samples per step [default: 1024]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Images per step [default: 64, clamped to the dataset size]
    #[arg(long)]
    pub codes_per_batch: Option<usize>,
    /// Peak learning rate [default: 1e-3]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Warm-up steps [default: 500, at most a tenth of the run]
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Weight of the KL term [default: 1e-6]
    #[arg(long)]
    pub kld_weight: Option<f64>,
    /// Add mirrored copies of every image
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub hflip: Option<bool>,
    /// Extra azimuthally rotated copies per image [default: 0]
    #[arg(long)]
    pub az_rotations: Option<usize>,
    /// Print progress every this many steps, 0 for never [default: 100]
    #[arg(long)]
    pub log_every: Option<usize>,
}

pub fn field_config(args: &TrainArgs) -> anyhow::Result<FieldConfig> {
    let mode: EquivarianceMode = args.mode.as_deref().unwrap_or("so2").parse()?;
    let n = channels_for_dim(args.latent_dim.unwrap_or(27))?;
    let mut cfg = match args.arch.as_deref().unwrap_or("desk") {
        "small" => FieldConfig::small(n, mode),
        "desk" => FieldConfig::desk(n, mode),
        "full" => FieldConfig::new(n, mode),
        other => bail!("unknown architecture preset {other:?} (expected small, desk or full)"),
    };
    if let Some(v) = args.hidden {
        cfg.hidden = v;
    }
    if let Some(v) = args.layers {
        cfg.layers = v;
    }
    if let Some(v) = args.heads {
        cfg.heads = v;
    }
    if let Some(v) = args.pe_frequencies {
        cfg.pe_frequencies = v;
    }
    if let Some(a) = &args.output_activation {
        cfg.output_activation = a.parse::<OutputActivation>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn train_config(args: &TrainArgs, seed: u64) -> anyhow::Result<TrainConfig> {
    let mut cfg = TrainConfig::with_steps(args.steps.unwrap_or(5000));
    cfg.seed = seed;
    cfg.batch_size = args.batch_size.unwrap_or(1024);
    if let Some(k) = args.codes_per_batch {
        cfg.codes_per_batch = k;
    }
    if let Some(lr) = args.lr {
        cfg.schedule.lr0 = lr;
    }
    if let Some(w) = args.warmup {
        cfg.schedule.warmup = w;
    }
    if let Some(b) = args.kld_weight {
        cfg.weights.beta = b;
    }
    cfg.augment = AugmentConfig {
        hflip: args.hflip.unwrap_or(false),
        az_rotations: args.az_rotations.unwrap_or(0),
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(ctx: &Ctx, args: &TrainArgs) -> anyhow::Result<()> {
    let data = args.data.as_ref().context("missing --data")?;
    let field = field_config(args)?;
    let config = train_config(args, ctx.seed)?;
    let named = load_image_dir(data)?;
    let images: Vec<_> = named.iter().map(|(_, im)| im.clone()).collect();
    let log_every = args.log_every.unwrap_or(100);
    let steps = config.steps();
    eprintln!(
        "training {} model (D = {}) on {} images for {steps} steps",
        field.mode,
        3 * field.n,
        images.len()
    );
    let out = train_with_progress::<f32>(&images, field, &config, |r| {
        if log_every > 0 && (r.step % log_every == 0 || r.step == steps) {
            eprintln!("step {:>6}  loss {:.5}  lr {:.2e}", r.step, r.total, r.lr);
        }
    })?;

    let mut ck = Checkpoint::new();
    out.model.write_checkpoint(&mut ck);
    out.bank.write_checkpoint(&mut ck);
    config.write_checkpoint(&mut ck);
    ck.set("data.images", named.len());
    for (i, (name, _)) in named.iter().enumerate() {
        ck.set(&format!("data.name.{i}"), name);
    }
    ctx.save_checkpoint(MODEL_FILE, &ck)?;
    ctx.write("loss.csv", out.history.to_csv())?;
    let last = out
        .history
        .records
        .last()
        .map(|r| r.total)
        .unwrap_or(f64::NAN);
    println!(
        "final loss {last:.5}; wrote {} and loss.csv",
        ctx.path(MODEL_FILE).display()
    );
    Ok(())
}
