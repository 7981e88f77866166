//! Metrics, tone mapping and report emission.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;

use crate::equivariance::{EquivarianceMode, LatentCode};
use crate::error::{Error, Result};
use crate::field::FieldModel;
use crate::fitting::{fit_latent, rotation_alignment, sample_prior, FitConfig};
use crate::geometry::{rotation_about_axis, sample_direction, Rotation};
use crate::hdr_io::{save_ldr_png, EnvironmentImage, LOG_FLOOR};
use crate::rng::seeded;
use crate::tape::{Groups, Real};

/// Display gamma used by [`tone_map`].
pub const GAMMA: f64 = 2.2;

/// Scales linear radiance by `exp(offset)`, clamps to `[0, 1]` and applies
/// display gamma.
pub fn tone_map_value(linear: f64, offset: f64) -> f64 {
    (linear * offset.exp()).clamp(0.0, 1.0).powf(1.0 / GAMMA)
}

pub fn tone_map_rgb(pixels: &[[f64; 3]], offset: f64) -> Vec<[f64; 3]> {
    pixels
        .iter()
        .map(|p| p.map(|c| tone_map_value(c, offset)))
        .collect()
}

pub fn tone_map(image: &EnvironmentImage, offset: f64) -> Vec<[f64; 3]> {
    image
        .pixels()
        .iter()
        .map(|p| p.map(|c| tone_map_value(c as f64, offset)))
        .collect()
}

pub fn luminance(p: [f64; 3]) -> f64 {
    0.2126 * p[0] + 0.7152 * p[1] + 0.0722 * p[2]
}

/// Tone-mapping offset that maps the median luminance of `pixels` to 0.5
/// before gamma, so LDR metrics see a comparable exposure on every image.
pub fn auto_exposure_offset(pixels: &[[f64; 3]]) -> f64 {
    let mut lum: Vec<f64> = pixels.iter().map(|&p| luminance(p)).collect();
    if lum.is_empty() {
        return 0.0;
    }
    let mid = lum.len() / 2;
    let (_, median, _) = lum.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    (0.5 / median.max(LOG_FLOOR)).ln()
}

/// `10 log10(peak^2 / MSE)`, or `+inf` when the inputs match exactly.
pub fn psnr(a: &[f64], b: &[f64], peak: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!(
            "psnr over {} and {} values",
            a.len(),
            b.len()
        )));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Mean of `target - pred` over the given values: the log-space offset that
/// best aligns a scale-free prediction with the target.
pub fn optimal_offset(pred_log: &[f64], target_log: &[f64]) -> f64 {
    let n = pred_log.len().max(1) as f64;
    pred_log
        .iter()
        .zip(target_log)
        .map(|(p, t)| t - p)
        .sum::<f64>()
        / n
}

fn flat_log(pixels: &[[f64; 3]]) -> Vec<f64> {
    pixels
        .iter()
        .flat_map(|p| p.map(|c| c.max(LOG_FLOOR).ln()))
        .collect()
}

/// Log-space offset aligning `pred` with `target`, estimated only where the
/// prediction is positive. Methods that produce non-positive radiance
/// (truncated SH expansions) would otherwise have their floored values drag
/// the offset far from the exposure of the rest of the image. The selection
/// does not change when `pred` is scaled, so neither does the score.
fn aligned_offset(pred: &[[f64; 3]], target: &[[f64; 3]]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, t) in pred.iter().zip(target) {
        for k in 0..3 {
            if p[k] > 0.0 {
                sum += t[k].max(LOG_FLOOR).ln() - p[k].ln();
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn flat(pixels: &[[f64; 3]]) -> Vec<f64> {
    pixels.iter().flatten().copied().collect()
}

/// PSNR in log space after aligning `pred_log` to `target_log` with the
/// optimal offset; the peak is the dynamic range of the target.
pub fn log_psnr(pred_log: &[f64], target_log: &[f64]) -> Result<f64> {
    let b = optimal_offset(pred_log, target_log);
    let aligned: Vec<f64> = pred_log.iter().map(|p| p + b).collect();
    let (lo, hi) = target_log
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &t| {
            (lo.min(t), hi.max(t))
        });
    let range = if hi > lo { hi - lo } else { 1.0 };
    psnr(&aligned, target_log, range)
}

/// Log-space PSNR on linear radiance; target values are floored at
/// [`LOG_FLOOR`] before the log. The alignment offset ignores non-positive prediction values; the
/// score counts them at the floor after alignment, so scaling `pred` leaves
/// the result unchanged.
pub fn hdr_psnr(pred: &[[f64; 3]], target: &[[f64; 3]]) -> Result<f64> {
    let b = aligned_offset(pred, target);
    let floor = LOG_FLOOR.ln();
    let aligned: Vec<f64> = pred
        .iter()
        .flat_map(|p| p.map(|v| if v > 0.0 { v.ln() + b } else { floor }))
        .collect();
    let target_log = flat_log(target);
    let (lo, hi) = target_log
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &t| {
            (lo.min(t), hi.max(t))
        });
    let range = if hi > lo { hi - lo } else { 1.0 };
    psnr(&aligned, &target_log, range)
}

/// Aligns `pred` to `target` in log space, then tone maps both with the
/// target's automatic exposure.
pub fn ldr_pair(pred: &[[f64; 3]], target: &[[f64; 3]]) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
    let b = aligned_offset(pred, target);
    let offset = auto_exposure_offset(target);
    (tone_map_rgb(pred, offset + b), tone_map_rgb(target, offset))
}

/// PSNR between tone-mapped images (peak 1) after exposure alignment.
pub fn ldr_psnr(pred: &[[f64; 3]], target: &[[f64; 3]]) -> Result<f64> {
    let (p, t) = ldr_pair(pred, target);
    psnr(&flat(&p), &flat(&t), 1.0)
}

/// SSIM on tone-mapped luminance after exposure alignment.
pub fn ldr_ssim(
    pred: &[[f64; 3]],
    target: &[[f64; 3]],
    width: usize,
    height: usize,
) -> Result<f64> {
    let (p, t) = ldr_pair(pred, target);
    let lp: Vec<f64> = p.iter().map(|&x| luminance(x)).collect();
    let lt: Vec<f64> = t.iter().map(|&x| luminance(x)).collect();
    ssim(&lp, &lt, width, height)
}

fn gaussian_window() -> [f64; 11] {
    let mut w = [0.0; 11];
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - 5.0;
        *v = (-x * x / (2.0 * 1.5 * 1.5)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Mean structural similarity of two single-channel images in `[0, 1]`
/// using an 11x11 Gaussian window (sigma 1.5) over fully contained windows.
pub fn ssim(a: &[f64], b: &[f64], width: usize, height: usize) -> Result<f64> {
    if a.len() != width * height || b.len() != width * height {
        return Err(Error::Shape(format!(
            "ssim on {}/{} values for {height}x{width}",
            a.len(),
            b.len()
        )));
    }
    if width < 11 || height < 11 {
        return Err(Error::InvalidArgument(format!(
            "ssim needs at least 11x11 pixels, got {height}x{width}"
        )));
    }
    let g = gaussian_window();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=height - 11 {
        for c0 in 0..=width - 11 {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let w = g[i] * g[j];
                    let k = (r0 + i) * width + c0 + j;
                    let (x, y) = (a[k], b[k]);
                    ma += w * x;
                    mb += w * y;
                    saa += w * x * x;
                    sbb += w * y * y;
                    sab += w * x * y;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Scores for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageScore {
    pub name: String,
    pub psnr_ldr: f64,
    pub psnr_hdr: f64,
    pub ssim: f64,
}

impl ImageScore {
    /// Scores a linear-radiance prediction against ground truth.
    pub fn compute(
        name: impl Into<String>,
        pred: &[[f64; 3]],
        target: &[[f64; 3]],
        width: usize,
        height: usize,
    ) -> Result<Self> {
        Ok(ImageScore {
            name: name.into(),
            psnr_ldr: ldr_psnr(pred, target)?,
            psnr_hdr: hdr_psnr(pred, target)?,
            ssim: ldr_ssim(pred, target, width, height)?,
        })
    }
}

/// Per-image and mean scores with a free-form configuration echo.
#[derive(Debug, Clone, Default)]
pub struct MetricReport {
    pub method: String,
    pub config: Vec<(String, String)>,
    pub images: Vec<ImageScore>,
    pub runtime_secs: f64,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl MetricReport {
    pub fn mean_psnr_ldr(&self) -> f64 {
        mean(self.images.iter().map(|s| s.psnr_ldr))
    }

    pub fn mean_psnr_hdr(&self) -> f64 {
        mean(self.images.iter().map(|s| s.psnr_hdr))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.images.iter().map(|s| s.ssim))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,image,psnr_ldr,psnr_hdr,ssim\n");
        for s in &self.images {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6}",
                self.method, s.name, s.psnr_ldr, s.psnr_hdr, s.ssim
            );
        }
        let _ = writeln!(
            out,
            "{},mean,{:.6},{:.6},{:.6}",
            self.method,
            self.mean_psnr_ldr(),
            self.mean_psnr_hdr(),
            self.mean_ssim()
        );
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut rows: Vec<[String; 4]> = self
            .images
            .iter()
            .map(|s| {
                [
                    s.name.clone(),
                    format!("{:.3}", s.psnr_ldr),
                    format!("{:.3}", s.psnr_hdr),
                    format!("{:.4}", s.ssim),
                ]
            })
            .collect();
        rows.push([
            "mean".into(),
            format!("{:.3}", self.mean_psnr_ldr()),
            format!("{:.3}", self.mean_psnr_hdr()),
            format!("{:.4}", self.mean_ssim()),
        ]);
        let mut out = format!("### {}\n\n", self.method);
        for (k, v) in &self.config {
            let _ = writeln!(out, "- {k}: {v}");
        }
        let _ = writeln!(out, "- runtime: {:.2} s\n", self.runtime_secs);
        out.push_str(&markdown_table(
            &["image", "PSNR-LDR", "PSNR-HDR", "SSIM"],
            &rows,
        ));
        out
    }
}

/// Renders rows as a column-aligned markdown table.
pub fn markdown_table<const C: usize>(header: &[&str; C], rows: &[[String; C]]) -> String {
    let mut widths = header.map(|h| h.len());
    for r in rows {
        for (w, cell) in widths.iter_mut().zip(r) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let body: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}", w = *w))
            .collect();
        format!("| {} |\n", body.join(" | "))
    };
    let mut out = line(header.to_vec());
    out.push_str(&format!(
        "|{}|\n",
        widths
            .iter()
            .map(|w| "-".repeat(w + 2))
            .collect::<Vec<_>>()
            .join("|")
    ));
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}

/// Side-by-side PNG of ground truth, reconstruction and a log-scale error
/// heat map, all tone mapped with the ground truth's automatic exposure.
pub fn save_triptych(
    target: &[[f64; 3]],
    pred: &[[f64; 3]],
    width: usize,
    height: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    if target.len() != width * height || pred.len() != width * height {
        return Err(Error::Shape("triptych inputs do not match the grid".into()));
    }
    let (p, t) = ldr_pair(pred, target);
    let b = aligned_offset(pred, target);
    let errors: Vec<f64> = pred
        .iter()
        .zip(target)
        .map(|(x, y)| {
            (0..3)
                .map(|k| (x[k].max(LOG_FLOOR).ln() + b - y[k].max(LOG_FLOOR).ln()).abs())
                .sum::<f64>()
                / 3.0
        })
        .collect();
    let max_err = errors.iter().cloned().fold(1e-12, f64::max);
    let mut canvas = vec![[0.0; 3]; 3 * width * height];
    for row in 0..height {
        for col in 0..width {
            let i = row * width + col;
            let base = row * 3 * width;
            canvas[base + col] = t[i];
            canvas[base + width + col] = p[i];
            canvas[base + 2 * width + col] = heat(errors[i] / max_err);
        }
    }
    save_ldr_png(&canvas, 3 * width, height, path)
}

fn heat(x: f64) -> [f64; 3] {
    let x = x.clamp(0.0, 1.0);
    [
        (1.5 * x).min(1.0),
        (1.5 * x - 0.5).clamp(0.0, 1.0),
        (1.5 * x - 1.0).clamp(0.0, 1.0),
    ]
}

/// Largest and mean deviation of an equivariance sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub mode: EquivarianceMode,
    pub trials: usize,
    pub max_deviation: f64,
    pub mean_deviation: f64,
}

/// Compares `f(R d, R Z)` with `f(d, Z)` over random directions, codes and
/// rotations. SO(3) models get arbitrary rotations; the other modes get
/// rotations about `+y`, so a non-equivariant model shows up as a large
/// deviation.
pub fn equivariance_audit<T: Real>(
    model: &FieldModel<T>,
    trials: usize,
    seed: u64,
) -> Result<AuditReport> {
    if trials == 0 {
        return Err(Error::InvalidArgument(
            "audit needs at least one trial".into(),
        ));
    }
    let mode = model.config().mode;
    let n = model.n();
    let mut rng = seeded(seed);
    let mut dirs = Array2::<f64>::zeros((2 * trials, 3));
    let mut latents = Array2::<f64>::zeros((2 * trials, 3 * n));
    for t in 0..trials {
        let rotation = match mode {
            EquivarianceMode::So3 => {
                let axis = sample_direction(&mut rng);
                rotation_about_axis(axis.vector(), rng.random_range(0.0..std::f64::consts::TAU))?
            }
            _ => Rotation::about_y(rng.random_range(0.0..std::f64::consts::TAU)),
        };
        let d = sample_direction(&mut rng);
        let z = sample_prior(n, &mut rng);
        let (rd, rz) = (d.rotated(&rotation), z.rotated(&rotation));
        for (row, (dd, zz)) in [(2 * t, (&d, &z)), (2 * t + 1, (&rd, &rz))] {
            for k in 0..3 {
                dirs[(row, k)] = dd.to_array()[k];
            }
            for (k, v) in zz.to_vec().into_iter().enumerate() {
                latents[(row, k)] = v;
            }
        }
    }
    let groups: Groups = (0..2 * trials).collect::<Vec<_>>().into();
    let out = model.forward_rows(&dirs, &latents, &groups)?;
    let mut max: f64 = 0.0;
    let mut sum = 0.0;
    for t in 0..trials {
        let dev = (0..3)
            .map(|k| (out[(2 * t, k)].as_f64() - out[(2 * t + 1, k)].as_f64()).abs())
            .fold(0.0, f64::max);
        max = max.max(dev);
        sum += dev;
    }
    Ok(AuditReport {
        mode,
        trials,
        max_deviation: max,
        mean_deviation: sum / trials as f64,
    })
}

/// Azimuths, in degrees, of the rotation-recovery table.
pub const ROTATION_TABLE_ANGLES: [f64; 6] = [5.0, 20.0, 45.0, 90.0, 180.0, 270.0];

/// One row of the rotation-recovery table, averaged over images.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationRow {
    pub angle_deg: f64,
    /// Mean relative error of the best-fit rotation.
    pub alignment_error: f64,
    /// Mean `|R_theta Z_unrot - Z_rot|_F / |Z_rot|_F` with the true rotation.
    pub ground_truth_error: f64,
}

/// Scores code pairs `(Z_unrot, Z_rot)` produced for each angle.
pub fn rotation_rows(
    angles_deg: &[f64],
    mut pairs: impl FnMut(f64) -> Result<Vec<(LatentCode, LatentCode)>>,
) -> Result<Vec<RotationRow>> {
    angles_deg
        .iter()
        .map(|&angle| {
            let rotation = Rotation::about_y(angle.to_radians());
            let list = pairs(angle)?;
            if list.is_empty() {
                return Err(Error::InvalidArgument("no code pairs".into()));
            }
            let (mut e, mut g) = (0.0, 0.0);
            for (unrot, rot) in &list {
                e += rotation_alignment(unrot, rot)?.error;
                let diff = unrot.rotated(&rotation).matrix() - rot.matrix();
                let denom = rot.frobenius_norm();
                let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
                g += if denom > 0.0 { norm / denom } else { norm };
            }
            let k = list.len() as f64;
            Ok(RotationRow {
                angle_deg: angle,
                alignment_error: e / k,
                ground_truth_error: g / k,
            })
        })
        .collect()
}

/// Fits codes to each image and to its copy rotated about `+y` by every
/// angle, then scores the recovered rotations.
pub fn rotation_fit_experiment<T: Real>(
    model: &FieldModel<T>,
    images: &[EnvironmentImage],
    angles_deg: &[f64],
    config: &FitConfig,
) -> Result<Vec<RotationRow>> {
    let unrotated: Vec<LatentCode> = images
        .iter()
        .map(|img| Ok(fit_latent(model, img, config)?.code))
        .collect::<Result<_>>()?;
    rotation_rows(angles_deg, |angle| {
        let rotation = Rotation::about_y(angle.to_radians());
        images
            .iter()
            .zip(&unrotated)
            .map(|(img, z)| {
                Ok((
                    z.clone(),
                    fit_latent(model, &img.rotated(&rotation), config)?.code,
                ))
            })
            .collect()
    })
}

pub fn rotation_table_markdown(rows: &[RotationRow]) -> String {
    let body: Vec<[String; 3]> = rows
        .iter()
        .map(|r| {
            [
                format!("{}", r.angle_deg),
                format!("{:.4}", r.alignment_error),
                format!("{:.4}", r.ground_truth_error),
            ]
        })
        .collect();
    markdown_table(
        &["angle (deg)", "E (best-fit R)", "rel. error (true R)"],
        &body,
    )
}

pub fn rotation_table_csv(rows: &[RotationRow]) -> String {
    let mut out = String::from("angle_deg,alignment_error,ground_truth_error\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:e},{:e}",
            r.angle_deg, r.alignment_error, r.ground_truth_error
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldConfig;

    #[test]
    fn tone_map_examples() {
        assert_eq!(tone_map_value(1.0, 0.0), 1.0);
        assert_eq!(tone_map_value(0.0, 0.0), 0.0);
        assert!((tone_map_value(0.5, 0.0) - 0.7297).abs() < 1e-4);
        assert_eq!(tone_map_value(40.0, 0.0), 1.0);
    }

    #[test]
    fn psnr_examples() {
        assert_eq!(psnr(&[0.3, 0.2], &[0.3, 0.2], 1.0).unwrap(), f64::INFINITY);
        let a = vec![0.0; 4];
        let b = vec![0.1; 4];
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &b[..3], 1.0).is_err());
    }

    #[test]
    fn hdr_psnr_ignores_exposure() {
        let mut rng = seeded(4);
        let target: Vec<[f64; 3]> = (0..200)
            .map(|_| {
                [
                    rng.random_range(0.01..50.0),
                    rng.random_range(0.01..50.0),
                    rng.random_range(0.01..50.0),
                ]
            })
            .collect();
        let pred: Vec<[f64; 3]> = target
            .iter()
            .map(|p| p.map(|c| c * rng.random_range(0.8..1.25)))
            .collect();
        let scaled: Vec<[f64; 3]> = pred.iter().map(|p| p.map(|c| c * 10.0)).collect();
        let a = hdr_psnr(&pred, &target).unwrap();
        let b = hdr_psnr(&scaled, &target).unwrap();
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }

    #[test]
    fn negative_predictions_do_not_shift_alignment() {
        let target: Vec<[f64; 3]> = (0..100).map(|i| [1.0 + i as f64, 2.0, 3.0]).collect();
        let mut pred: Vec<[f64; 3]> = target.iter().map(|p| p.map(|c| c * 4.0)).collect();
        pred[0] = [-1.0, -1.0, -1.0];
        let (p, t) = ldr_pair(&pred, &target);
        for (a, b) in p.iter().zip(&t).skip(1) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-9);
            }
        }
        assert_eq!(p[0], [0.0; 3]);
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let mut rng = seeded(1);
        let (w, h) = (24, 16);
        let a: Vec<f64> = (0..w * h).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = a
            .iter()
            .map(|v| (v + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0))
            .collect();
        assert!((ssim(&a, &a, w, h).unwrap() - 1.0).abs() < 1e-12);
        let ab = ssim(&a, &b, w, h).unwrap();
        let ba = ssim(&b, &a, w, h).unwrap();
        assert!((ab - ba).abs() < 1e-9);
        assert!(ab < 1.0 && ab > 0.0);
    }

    #[test]
    fn report_means_are_arithmetic() {
        let report = MetricReport {
            method: "x".into(),
            images: vec![
                ImageScore {
                    name: "a".into(),
                    psnr_ldr: 10.0,
                    psnr_hdr: 20.0,
                    ssim: 0.5,
                },
                ImageScore {
                    name: "b".into(),
                    psnr_ldr: 20.0,
                    psnr_hdr: 30.0,
                    ssim: 0.7,
                },
            ],
            ..Default::default()
        };
        assert_eq!(report.mean_psnr_ldr(), 15.0);
        assert_eq!(report.mean_psnr_hdr(), 25.0);
        assert!((report.mean_ssim() - 0.6).abs() < 1e-12);
        assert!(report
            .to_csv()
            .lines()
            .last()
            .unwrap()
            .starts_with("x,mean,15.000000"));
        assert!(report.to_markdown().contains("| mean "));
    }

    fn audit_model(mode: EquivarianceMode) -> FieldModel<f32> {
        FieldModel::new(FieldConfig::small(4, mode), 21).unwrap()
    }

    #[test]
    fn audit_separates_modes() {
        for mode in [EquivarianceMode::So2, EquivarianceMode::So3] {
            let r = equivariance_audit(&audit_model(mode), 100, 1).unwrap();
            assert!(r.max_deviation < 1e-4, "{mode}: {}", r.max_deviation);
            assert_eq!(r.trials, 100);
        }
        let r = equivariance_audit(&audit_model(EquivarianceMode::None), 100, 1).unwrap();
        assert!(r.max_deviation > 1e-2, "{}", r.max_deviation);
        assert!(equivariance_audit(&audit_model(EquivarianceMode::So2), 0, 1).is_err());
    }

    #[test]
    fn analytic_rotation_table() {
        let mut rng = seeded(30);
        let codes: Vec<LatentCode> = (0..4).map(|_| sample_prior(9, &mut rng)).collect();
        let rows = rotation_rows(&ROTATION_TABLE_ANGLES, |angle| {
            let r = Rotation::about_y(angle.to_radians());
            Ok(codes.iter().map(|z| (z.clone(), z.rotated(&r))).collect())
        })
        .unwrap();
        assert_eq!(rows.len(), 6);
        for row in &rows {
            assert!(row.alignment_error < 1e-6);
            assert!(row.ground_truth_error < 1e-12);
        }
        let md = rotation_table_markdown(&rows);
        assert_eq!(md.lines().count(), 8);
        assert!(md.contains("| 270 "));
        assert_eq!(rotation_table_csv(&rows).lines().count(), 7);
    }

    #[test]
    fn fitted_rotation_table_is_bounded() {
        let model =
            FieldModel::<f64>::new(FieldConfig::small(3, EquivarianceMode::So2), 4).unwrap();
        let img = crate::hdr_io::generate_synthetic_env(1, 16, 32).unwrap();
        let cfg = FitConfig {
            steps: 20,
            batch_size: 64,
            ..FitConfig::default()
        };
        let rows = rotation_fit_experiment(&model, &[img], &[45.0, 90.0], &cfg).unwrap();
        for r in rows {
            assert!(r.alignment_error.is_finite() && r.alignment_error >= 0.0);
            assert!(r.alignment_error <= r.ground_truth_error + 1e-9, "{r:?}");
        }
    }
}
