use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::Args;
use illumfield::baselines::{fit_sg, fit_sh, SgFitConfig};
use illumfield::checkpoint::Checkpoint;
use illumfield::eval::ImageScore;
use illumfield::hdr_io::{EnvironmentImage, LOG_FLOOR};
use serde::{Deserialize, Serialize};

use super::{load_image, Ctx};

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct BaselineArgs {
    /// Baseline family: sh or sg
    pub method: Option<String>,
    /// Target .hdr image
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// SH order l_max [default: 2]
    #[arg(long)]
    pub order: Option<usize>,
    /// SG lobe count [default: 5]
    #[arg(long)]
    pub lobes: Option<usize>,
    /// SG optimisation steps [default: 500]
    #[arg(long)]
    pub steps: Option<usize>,
}

fn to_image(pixels: &[[f64; 3]], h: usize, w: usize) -> anyhow::Result<EnvironmentImage> {
    let px = pixels
        .iter()
        .map(|p| p.map(|v| v.max(LOG_FLOOR) as f32))
        .collect();
    Ok(EnvironmentImage::new(w, h, px)?)
}

pub fn run(ctx: &Ctx, args: &BaselineArgs) -> anyhow::Result<()> {
    match args.method.as_deref() {
        Some("sh" | "sg") => {}
        Some(other) => bail!("unknown baseline {other:?} (expected sh or sg)"),
        None => bail!("missing baseline method (sh or sg)"),
    }
    let image = load_image(args.image.as_deref().context("missing --image")?)?;
    let (h, w) = (image.height(), image.width());
    let mut ck = Checkpoint::new();
    let (label, recon, dim) = match args.method.as_deref() {
        Some("sh") => {
            let sh = fit_sh(&image, args.order.unwrap_or(2))?;
            sh.write_checkpoint(&mut ck, "sh");
            (format!("sh{}", sh.l_max()), sh.render(h, w), sh.dim())
        }
        Some("sg") => {
            let mut cfg = SgFitConfig::new(args.lobes.unwrap_or(5));
            if let Some(s) = args.steps {
                cfg.steps = s;
            }
            let fit = fit_sg(&image, &cfg)?;
            fit.lobes.write_checkpoint(&mut ck, "sg");
            let mut csv = String::from("step,loss\n");
            for (i, l) in fit.history.iter().enumerate() {
                csv.push_str(&format!("{},{l:e}\n", i + 1));
            }
            ctx.write("sg_loss.csv", csv)?;
            (
                format!("sg{}", cfg.lobes),
                fit.lobes.render(h, w),
                fit.lobes.dim(),
            )
        }
        _ => unreachable!("method checked above"),
    };
    ctx.save_checkpoint("baseline.ckpt", &ck)?;
    ctx.save_env("reconstruction", &to_image(&recon, h, w)?)?;
    let target: Vec<[f64; 3]> = image.pixels().iter().map(|p| p.map(f64::from)).collect();
    let score = ImageScore::compute(label.clone(), &recon, &target, w, h)?;
    ctx.write(
        "metrics.csv",
        format!(
            "method,dim,psnr_ldr,psnr_hdr,ssim\n{label},{dim},{:.4},{:.4},{:.4}\n",
            score.psnr_ldr, score.psnr_hdr, score.ssim
        ),
    )?;
    println!(
        "{label} (D = {dim}): PSNR-LDR {:.2} dB, PSNR-HDR {:.2} dB, SSIM {:.3}",
        score.psnr_ldr, score.psnr_hdr, score.ssim
    );
    Ok(())
}
