pub mod audit;
pub mod baseline;
pub mod data;
pub mod eval;
pub mod invert;
pub mod latent;
pub mod train;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use illumfield::checkpoint::Checkpoint;
use illumfield::eval::auto_exposure_offset;
use illumfield::field::FieldModel;
use illumfield::hdr_io::{load_hdr, save_hdr, EnvironmentImage};

/// Output directory and seed shared by every command.
#[derive(Debug, Clone)]
pub struct Ctx {
    pub out: PathBuf,
    pub seed: u64,
}

impl Ctx {
    pub fn new(out: PathBuf, seed: u64) -> anyhow::Result<Self> {
        std::fs::create_dir_all(&out)
            .with_context(|| format!("creating output directory {}", out.display()))?;
        Ok(Ctx { out, seed })
    }

    /// Path of an artifact. Names are plain file names chosen by the
    /// commands, so nothing lands outside the output directory.
    pub fn path(&self, name: &str) -> PathBuf {
        debug_assert!(!name.contains('/') && !name.contains(".."));
        self.out.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
        let path = self.path(name);
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
    }

    /// Writes `<stem>.hdr` and a tone-mapped `<stem>.png`.
    pub fn save_env(&self, stem: &str, image: &EnvironmentImage) -> anyhow::Result<()> {
        save_hdr(image, self.path(&format!("{stem}.hdr")))?;
        let exposure = display_exposure(image);
        image.save_png_tonemapped(self.path(&format!("{stem}.png")), exposure)?;
        Ok(())
    }

    pub fn save_checkpoint(&self, name: &str, ck: &Checkpoint) -> anyhow::Result<()> {
        ck.save(self.path(name))?;
        Ok(())
    }
}

/// Linear gain putting the median luminance at mid grey.
pub fn display_exposure(image: &EnvironmentImage) -> f64 {
    let pixels: Vec<[f64; 3]> = image.pixels().iter().map(|p| p.map(f64::from)).collect();
    auto_exposure_offset(&pixels).exp()
}

pub fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

pub fn load_model(path: &Path) -> anyhow::Result<(FieldModel<f32>, Checkpoint)> {
    let ck = load_checkpoint(path)?;
    let model = FieldModel::from_checkpoint(&ck)
        .with_context(|| format!("{} does not hold a model", path.display()))?;
    Ok((model, ck))
}

pub fn load_image(path: &Path) -> anyhow::Result<EnvironmentImage> {
    load_hdr(path).with_context(|| format!("loading {}", path.display()))
}

/// Every `.hdr` file in `dir`, sorted by file name.
pub fn load_image_dir(dir: &Path) -> anyhow::Result<Vec<(String, EnvironmentImage)>> {
    let entries =
        std::fs::read_dir(dir).with_context(|| format!("reading directory {}", dir.display()))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("hdr"))
        {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        bail!("no .hdr files in {}", dir.display());
    }
    paths
        .iter()
        .map(|p| {
            let stem = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((stem, load_image(p)?))
        })
        .collect()
}

/// Parses `HxW`, e.g. `32x64`.
pub fn parse_size(s: &str) -> anyhow::Result<(usize, usize)> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .with_context(|| format!("size {s:?} is not of the form HxW"))?;
    let h: usize = h
        .trim()
        .parse()
        .with_context(|| format!("bad height in {s:?}"))?;
    let w: usize = w
        .trim()
        .parse()
        .with_context(|| format!("bad width in {s:?}"))?;
    if h == 0 || w == 0 {
        bail!("size {s:?} has a zero side");
    }
    Ok((h, w))
}

/// Latent channels `N` for a latent dimension `D = 3N`.
pub fn channels_for_dim(dim: usize) -> anyhow::Result<usize> {
    if dim == 0 || dim % 3 != 0 {
        bail!("latent dimension must be a positive multiple of 3, got {dim}");
    }
    Ok(dim / 3)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_parse() {
        assert_eq!(parse_size("32x64").unwrap(), (32, 64));
        assert_eq!(parse_size("8X16").unwrap(), (8, 16));
        assert!(parse_size("32").is_err());
        assert!(parse_size("0x4").is_err());
        assert!(parse_size("ax4").is_err());
    }

    #[test]
    fn latent_dim_must_divide_by_three() {
        assert_eq!(channels_for_dim(27).unwrap(), 9);
        assert_eq!(channels_for_dim(300).unwrap(), 100);
        assert!(channels_for_dim(28).is_err());
        assert!(channels_for_dim(0).is_err());
    }
}
