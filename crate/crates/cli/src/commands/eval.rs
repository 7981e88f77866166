use std::path::PathBuf;
use std::time::Instant;

use anyhow::Context;
use clap::Args;
use illumfield::baselines::{fit_sg, fit_sh, SgFitConfig};
use illumfield::eval::{
    rotation_fit_experiment, rotation_table_csv, rotation_table_markdown, save_triptych,
    ImageScore, MetricReport, ROTATION_TABLE_ANGLES,
};
use illumfield::fitting::{decode_environment, fit_latent, FitConfig};
use illumfield::hdr_io::EnvironmentImage;
use serde::{Deserialize, Serialize};

use super::{load_image_dir, load_model, Ctx};

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct EvalArgs {
    /// Trained model checkpoint
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Directory of held-out .hdr images
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Use at most this many images
    #[arg(long)]
    pub limit: Option<usize>,
    /// Latent fitting steps per image [default: 2500]
    #[arg(long)]
    pub fit_steps: Option<usize>,
    /// SH order of the baseline [default: largest with 3(l+1)^2 <= D]
    #[arg(long)]
    pub sh_order: Option<usize>,
    /// SG lobes of the baseline, 0 to skip it [default: D/6]
    #[arg(long)]
    pub sg_lobes: Option<usize>,
    /// Write a ground truth / reconstruction / error PNG per image
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub triptychs: Option<bool>,
    /// Also run the rotation-alignment experiment on this many images [default: 0]
    #[arg(long)]
    pub rotation_images: Option<usize>,
}

fn linear(image: &EnvironmentImage) -> Vec<[f64; 3]> {
    image.pixels().iter().map(|p| p.map(f64::from)).collect()
}

/// Largest SH order whose RGB coefficient count fits in `dim`.
fn matching_sh_order(dim: usize) -> usize {
    let mut l = 0;
    while 3 * (l + 2) * (l + 2) <= dim {
        l += 1;
    }
    l
}

pub fn run(ctx: &Ctx, args: &EvalArgs) -> anyhow::Result<()> {
    let (model, _) = load_model(args.ckpt.as_deref().context("missing --ckpt")?)?;
    let mut images = load_image_dir(args.data.as_deref().context("missing --data")?)?;
    if let Some(n) = args.limit {
        images.truncate(n);
    }
    let dim = 3 * model.n();
    let fit_cfg = FitConfig {
        steps: args.fit_steps.unwrap_or(FitConfig::default().steps),
        seed: ctx.seed,
        ..FitConfig::default()
    };
    fit_cfg.validate()?;
    let sh_order = args.sh_order.unwrap_or_else(|| matching_sh_order(dim));
    let sg_lobes = args.sg_lobes.unwrap_or(dim / 6);
    let triptychs = args.triptychs.unwrap_or(false);

    let mut neural = MetricReport {
        method: format!("neural-{}-d{dim}", model.config().mode),
        config: vec![("fit steps".into(), fit_cfg.steps.to_string())],
        ..MetricReport::default()
    };
    let mut sh = MetricReport {
        method: format!("sh{sh_order}"),
        config: vec![(
            "coefficients".into(),
            (3 * (sh_order + 1) * (sh_order + 1)).to_string(),
        )],
        ..MetricReport::default()
    };
    let mut sg = MetricReport {
        method: format!("sg{sg_lobes}"),
        config: vec![("parameters".into(), (6 * sg_lobes).to_string())],
        ..MetricReport::default()
    };

    for (name, image) in &images {
        let (h, w) = (image.height(), image.width());
        let target = linear(image);

        let t = Instant::now();
        let fit = fit_latent(&model, image, &fit_cfg)?;
        let pred = linear(&decode_environment(&model, &fit.code, h, w)?);
        neural.runtime_secs += t.elapsed().as_secs_f64();
        neural
            .images
            .push(ImageScore::compute(name.clone(), &pred, &target, w, h)?);
        if triptychs {
            save_triptych(
                &target,
                &pred,
                w,
                h,
                ctx.path(&format!("triptych_{name}.png")),
            )?;
        }

        let t = Instant::now();
        let pred = fit_sh(image, sh_order)?.render(h, w);
        sh.runtime_secs += t.elapsed().as_secs_f64();
        sh.images
            .push(ImageScore::compute(name.clone(), &pred, &target, w, h)?);

        if sg_lobes > 0 {
            let t = Instant::now();
            let pred = fit_sg(image, &SgFitConfig::new(sg_lobes))?
                .lobes
                .render(h, w);
            sg.runtime_secs += t.elapsed().as_secs_f64();
            sg.images
                .push(ImageScore::compute(name.clone(), &pred, &target, w, h)?);
        }
        eprintln!("scored {name}");
    }

    let mut reports = vec![neural, sh];
    if sg_lobes > 0 {
        reports.push(sg);
    }
    let csv: String = reports
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let body = r.to_csv();
            if i == 0 {
                body
            } else {
                body.split_once('\n')
                    .map(|(_, rest)| rest.to_string())
                    .unwrap_or_default()
            }
        })
        .collect();
    ctx.write("metrics.csv", csv)?;
    let md: Vec<String> = reports.iter().map(MetricReport::to_markdown).collect();
    ctx.write("metrics.md", md.join("\n"))?;
    for r in &reports {
        println!(
            "{:<16} PSNR-LDR {:>7.3}  PSNR-HDR {:>7.3}  SSIM {:.4}",
            r.method,
            r.mean_psnr_ldr(),
            r.mean_psnr_hdr(),
            r.mean_ssim()
        );
    }

    let k = args.rotation_images.unwrap_or(0).min(images.len());
    if k > 0 {
        let subset: Vec<EnvironmentImage> = images[..k].iter().map(|(_, im)| im.clone()).collect();
        let rows = rotation_fit_experiment(&model, &subset, &ROTATION_TABLE_ANGLES, &fit_cfg)?;
        ctx.write("rotation.csv", rotation_table_csv(&rows))?;
        let table = rotation_table_markdown(&rows);
        ctx.write("rotation.md", &table)?;
        println!("{table}");
    }
    Ok(())
}
