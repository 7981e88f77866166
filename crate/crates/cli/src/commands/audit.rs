use std::path::PathBuf;

use clap::Args;
use illumfield::eval::equivariance_audit;
use illumfield::field::FieldModel;
use serde::{Deserialize, Serialize};

use super::train::{field_config, TrainArgs};
use super::{load_model, Ctx};

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct AuditArgs {
    /// Model checkpoint; without one a freshly initialised model is audited
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Random (rotation, direction, code) triples [default: 100]
    #[arg(long)]
    pub trials: Option<usize>,
    /// Mode of the fresh model: so2, so3 or none [default: so2]
    #[arg(long, conflicts_with = "ckpt")]
    pub mode: Option<String>,
    /// Latent dimension of the fresh model [default: 27]
    #[arg(long, conflicts_with = "ckpt")]
    pub latent_dim: Option<usize>,
    /// Architecture preset of the fresh model [default: desk]
    #[arg(long, conflicts_with = "ckpt")]
    pub arch: Option<String>,
}

pub fn run(ctx: &Ctx, args: &AuditArgs) -> anyhow::Result<()> {
    let model: FieldModel<f32> = match &args.ckpt {
        Some(p) => load_model(p)?.0,
        None => {
            let cfg = field_config(&TrainArgs {
                mode: args.mode.clone(),
                latent_dim: args.latent_dim,
                arch: args.arch.clone(),
                ..TrainArgs::default()
            })?;
            FieldModel::new(cfg, ctx.seed)?
        }
    };
    let trials = args.trials.unwrap_or(100);
    let report = equivariance_audit(&model, trials, ctx.seed)?;
    ctx.write(
        "audit.csv",
        format!(
            "mode,trials,max_deviation,mean_deviation\n{},{},{:e},{:e}\n",
            report.mode, report.trials, report.max_deviation, report.mean_deviation
        ),
    )?;
    println!(
        "max equivariance deviation {:.3e} (mean {:.3e}) over {} trials, {} model",
        report.max_deviation, report.mean_deviation, report.trials, report.mode
    );
    Ok(())
}
