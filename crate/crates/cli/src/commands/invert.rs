use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::Args;
use illumfield::eval::hdr_psnr;
use illumfield::fitting::decode_environment;
use illumfield::inverse_render::{
    invert_lighting, invert_lighting_sh, InverseConfig, Material, Renderer, Rendering,
};
use illumfield::training::LatentBank;
use serde::{Deserialize, Serialize};

use super::{load_image, load_model, Ctx};

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct InvertArgs {
    /// Trained model checkpoint
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Ground-truth environment .hdr to render and then recover
    #[arg(long, conflicts_with_all = ["target", "index"])]
    pub env: Option<PathBuf>,
    /// Square .hdr render of the sphere to recover lighting from
    #[arg(long, conflicts_with = "index")]
    pub target: Option<PathBuf>,
    /// Render the model's own code for this training image and recover it
    #[arg(long)]
    pub index: Option<usize>,
    /// Specular weight of the glossy material [default: 0.6]
    #[arg(long)]
    pub specular: Option<f64>,
    /// Render resolution [default: 128]
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Environment grid height [default: 64]
    #[arg(long)]
    pub env_height: Option<usize>,
    /// Optimisation steps [default: 200]
    #[arg(long)]
    pub steps: Option<usize>,
    /// Learning rate [default: 1e-2]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Order of the SH comparison, 0 to skip it [default: 2]
    #[arg(long)]
    pub sh_order: Option<usize>,
}

pub fn run(ctx: &Ctx, args: &InvertArgs) -> anyhow::Result<()> {
    let (model, ck) = load_model(args.ckpt.as_deref().context("missing --ckpt")?)?;
    let material = Material::glossy(args.specular.unwrap_or(0.6))?;
    let env_h = args.env_height.unwrap_or(64);
    let mut resolution = args.resolution.unwrap_or(128);

    let target_file = match &args.target {
        Some(p) => {
            let r = Rendering::from_image(&load_image(p)?)?;
            resolution = r.resolution;
            Some(r)
        }
        None => None,
    };
    let renderer = Renderer::<f32>::new(resolution, env_h, material)?;
    let (target, truth) = match (target_file, &args.env, args.index) {
        (Some(t), _, _) => (t, None),
        (None, Some(p), _) => {
            let env = load_image(p)?;
            (
                renderer.render_image(&env)?,
                Some(env.resized(2 * env_h, env_h)?),
            )
        }
        (None, None, Some(i)) => {
            let z = LatentBank::from_checkpoint(&ck)?.code(i)?;
            let env = decode_environment(&model, &z, env_h, 2 * env_h)?;
            (renderer.render_latent(&model, &z, 1.0)?, Some(env))
        }
        (None, None, None) => bail!("pass one of --env, --target or --index"),
    };
    ctx.save_env("target", &target.to_image()?)?;

    let defaults = InverseConfig::default();
    let cfg = InverseConfig {
        steps: args.steps.unwrap_or(defaults.steps),
        lr: args.lr.unwrap_or(defaults.lr),
        ..defaults
    };
    let result = invert_lighting(&target, &renderer, &model, &cfg)?;
    let env = decode_environment(&model, &result.code, env_h, 2 * env_h)?
        .scaled(result.exposure as f32)?;
    let rerender = renderer.render_latent(&model, &result.code, result.exposure)?;
    ctx.save_env("neural_env", &env)?;
    ctx.save_env("neural_render", &rerender.to_image()?)?;
    let mut loss_csv = String::from("step,loss\n");
    for (i, l) in result.history.iter().enumerate() {
        loss_csv.push_str(&format!("{},{l:e}\n", i + 1));
    }
    ctx.write("inverse_loss.csv", loss_csv)?;

    let truth_lin: Option<Vec<[f64; 3]>> =
        truth.map(|t| t.pixels().iter().map(|p| p.map(f64::from)).collect());
    let env_score = |pred: &[[f64; 3]]| -> anyhow::Result<String> {
        match &truth_lin {
            Some(t) => Ok(format!("{:.4}", hdr_psnr(pred, t)?)),
            None => Ok(String::new()),
        }
    };
    let mut metrics = String::from("method,render_psnr,env_log_psnr\n");
    let neural_env: Vec<[f64; 3]> = env.pixels().iter().map(|p| p.map(f64::from)).collect();
    let neural_render = renderer.render_psnr(&rerender, &target)?;
    metrics.push_str(&format!(
        "neural,{neural_render:.4},{}\n",
        env_score(&neural_env)?
    ));
    println!(
        "neural: re-render PSNR {neural_render:.2} dB, exposure {:.4}",
        result.exposure
    );

    let order = args.sh_order.unwrap_or(2);
    if order > 0 {
        let sh = invert_lighting_sh(&target, &renderer, order)?;
        let sh_render = renderer.render_sh(&sh)?;
        let sh_env = sh.render(env_h, 2 * env_h);
        ctx.save_env("sh_env", &sh.to_image(env_h, 2 * env_h)?)?;
        ctx.save_env("sh_render", &sh_render.to_image()?)?;
        let score = renderer.render_psnr(&sh_render, &target)?;
        metrics.push_str(&format!("sh{order},{score:.4},{}\n", env_score(&sh_env)?));
        println!("SH order {order}: re-render PSNR {score:.2} dB");
    }
    ctx.write("metrics.csv", metrics)?;
    Ok(())
}
