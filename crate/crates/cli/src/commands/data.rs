use clap::Args;
use illumfield::hdr_io::{generate_synthetic_env, save_hdr};
use serde::{Deserialize, Serialize};

use super::{parse_size, Ctx};

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct GenDataArgs {
    /// Number of environments [default: 8]
    #[arg(long)]
    pub count: Option<usize>,
    /// Raster size as HxW [default: 32x64]
    #[arg(long)]
    pub size: Option<String>,
    /// Also write a tone-mapped PNG next to every .hdr
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub previews: Option<bool>,
}

/// Seed of the `i`-th environment of a set generated with `seed`.
fn env_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(i as u64)
}

pub fn run(ctx: &Ctx, args: &GenDataArgs) -> anyhow::Result<()> {
    let count = args.count.unwrap_or(8);
    let (h, w) = parse_size(args.size.as_deref().unwrap_or("32x64"))?;
    for i in 0..count {
        let env = generate_synthetic_env(env_seed(ctx.seed, i), h, w)?;
        let stem = format!("env_{i:04}");
        if args.previews.unwrap_or(false) {
            ctx.save_env(&stem, &env)?;
        } else {
            save_hdr(&env, ctx.path(&format!("{stem}.hdr")))?;
        }
    }
    println!(
        "wrote {count} environments of {h}x{w} to {}",
        ctx.out.display()
    );
    Ok(())
}
