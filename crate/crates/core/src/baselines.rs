//! Spherical-harmonic and spherical-Gaussian environment baselines.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::geometry::{pixel_solid_angle, pixel_to_direction, Direction};
use crate::hdr_io::{EnvironmentImage, LOG_FLOOR};
use crate::optim::Adam;
use crate::tape::{Tape, Var};

pub const MAX_SH_ORDER: usize = 9;

/// Number of basis functions per channel up to `l_max`.
pub fn sh_count(l_max: usize) -> usize {
    (l_max + 1) * (l_max + 1)
}

/// Index of `Y_l^m` in the flat basis vector.
pub fn sh_index(l: usize, m: i64) -> usize {
    l * l + (l as i64 + m) as usize
}

/// Real orthonormal spherical harmonics at `d`, ordered by `sh_index`.
///
/// The polar angle is measured from `+y` and the azimuth is
/// `atan2(z, x)`, matching the equirectangular convention.
pub fn sh_basis(d: &Direction, l_max: usize) -> Result<Vec<f64>> {
    if l_max > MAX_SH_ORDER {
        return Err(Error::InvalidArgument(format!(
            "SH order {l_max} above {MAX_SH_ORDER}"
        )));
    }
    let x = d.y().clamp(-1.0, 1.0);
    let s = d.x().hypot(d.z());
    let theta = d.z().atan2(d.x());
    let n = l_max + 1;

    // Associated Legendre P_l^m(x) without the Condon-Shortley phase.
    let mut p = vec![vec![0.0; n]; n];
    p[0][0] = 1.0;
    for m in 1..n {
        p[m][m] = p[m - 1][m - 1] * (2 * m - 1) as f64 * s;
    }
    for m in 0..n.saturating_sub(1) {
        p[m + 1][m] = x * (2 * m + 1) as f64 * p[m][m];
    }
    for m in 0..n {
        for l in m + 2..n {
            p[l][m] = ((2 * l - 1) as f64 * x * p[l - 1][m] - (l + m - 1) as f64 * p[l - 2][m])
                / (l - m) as f64;
        }
    }

    let mut out = vec![0.0; sh_count(l_max)];
    for l in 0..n {
        for m in 0..=l {
            // (l - m)! / (l + m)!
            let ratio: f64 = ((l - m + 1)..=(l + m)).map(|k| 1.0 / k as f64).product();
            let k = ((2 * l + 1) as f64 / (4.0 * PI) * ratio).sqrt();
            if m == 0 {
                out[sh_index(l, 0)] = k * p[l][0];
            } else {
                let base = std::f64::consts::SQRT_2 * k * p[l][m];
                out[sh_index(l, m as i64)] = base * (m as f64 * theta).cos();
                out[sh_index(l, -(m as i64))] = base * (m as f64 * theta).sin();
            }
        }
    }
    Ok(out)
}

/// Per-channel SH coefficients up to `l_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShCoefficients {
    l_max: usize,
    coeffs: Vec<[f64; 3]>,
}

impl ShCoefficients {
    pub fn new(l_max: usize, coeffs: Vec<[f64; 3]>) -> Result<Self> {
        if l_max > MAX_SH_ORDER || coeffs.len() != sh_count(l_max) {
            return Err(Error::Shape(format!(
                "{} SH coefficients for order {l_max}",
                coeffs.len()
            )));
        }
        Ok(ShCoefficients { l_max, coeffs })
    }

    pub fn zeros(l_max: usize) -> Result<Self> {
        Self::new(l_max, vec![[0.0; 3]; sh_count(l_max)])
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    pub fn coeffs(&self) -> &[[f64; 3]] {
        &self.coeffs
    }

    /// Total degrees of freedom, `3 (l_max + 1)^2`.
    pub fn dim(&self) -> usize {
        3 * self.coeffs.len()
    }

    pub fn evaluate(&self, d: &Direction) -> [f64; 3] {
        let y = sh_basis(d, self.l_max).expect("order checked at construction");
        let mut out = [0.0; 3];
        for (b, c) in y.iter().zip(&self.coeffs) {
            for k in 0..3 {
                out[k] += b * c[k];
            }
        }
        out
    }

    /// Evaluates on an equirectangular grid. Negative lobes are kept.
    pub fn render(&self, height: usize, width: usize) -> Vec<[f64; 3]> {
        grid_directions(height, width)
            .iter()
            .map(|d| self.evaluate(d))
            .collect()
    }

    /// Rasterises as an image, clamping radiance at the log floor.
    pub fn to_image(&self, height: usize, width: usize) -> Result<EnvironmentImage> {
        let pixels = self
            .render(height, width)
            .into_iter()
            .map(|p| p.map(|v| v.max(LOG_FLOOR) as f32))
            .collect();
        EnvironmentImage::new(width, height, pixels)
    }

    pub fn to_array(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.coeffs.len(), 3), |(i, k)| self.coeffs[i][k])
    }

    pub fn from_array(a: &Array2<f64>) -> Result<Self> {
        let side = (a.nrows() as f64).sqrt().round() as usize;
        if a.ncols() != 3 || side == 0 || side * side != a.nrows() {
            return Err(Error::Shape(format!("SH coefficient array {:?}", a.dim())));
        }
        let coeffs = a.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect();
        Self::new(side - 1, coeffs)
    }

    pub fn write_checkpoint(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.set(&format!("{prefix}.l_max"), self.l_max);
        ck.insert_array(&format!("{prefix}.coeffs"), &self.to_array());
    }

    pub fn from_checkpoint(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let l_max: usize = ck.parse(&format!("{prefix}.l_max"))?;
        let a: Array2<f64> = ck.array(&format!("{prefix}.coeffs"))?;
        let coeffs = a.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect();
        Self::new(l_max, coeffs)
    }
}

pub(crate) fn grid_directions(height: usize, width: usize) -> Vec<Direction> {
    (0..height)
        .flat_map(|r| (0..width).map(move |c| pixel_to_direction(r, c, height, width)))
        .collect()
}

/// Per-pixel solid-angle weights for each equirectangular row.
///
/// Fejer's first rule on the row-centre polar angles, scaled by the column
/// spacing. It integrates polynomials in `cos(phi)` of degree below `height`
/// exactly, so projecting a band-limited signal sampled at pixel centres
/// recovers its coefficients to rounding. The weights are positive and sum
/// to `4 pi`.
pub fn projection_weights(height: usize, width: usize) -> Vec<f64> {
    let h = height as f64;
    (0..height)
        .map(|r| {
            let phi = PI * (r as f64 + 0.5) / h;
            let tail: f64 = (1..=height / 2)
                .map(|k| (2.0 * k as f64 * phi).cos() / (4.0 * (k * k) as f64 - 1.0))
                .sum();
            2.0 / h * (1.0 - 2.0 * tail) * std::f64::consts::TAU / width as f64
        })
        .collect()
}

/// Projects linear radiance onto the SH basis.
///
/// Unmasked images use the discrete projection with [`projection_weights`].
/// Masked images use weighted least squares over the observed pixels, since
/// projection over a partial sphere is biased.
pub fn fit_sh(image: &EnvironmentImage, l_max: usize) -> Result<ShCoefficients> {
    let pixels: Vec<[f64; 3]> = image.pixels().iter().map(|p| p.map(f64::from)).collect();
    fit_sh_values(&pixels, image.height(), image.width(), image.mask(), l_max)
}

/// [`fit_sh`] on raw row-major values, which may be negative.
pub fn fit_sh_values(
    pixels: &[[f64; 3]],
    height: usize,
    width: usize,
    mask: Option<&[bool]>,
    l_max: usize,
) -> Result<ShCoefficients> {
    let (h, w) = (height, width);
    if pixels.len() != h * w || mask.is_some_and(|m| m.len() != h * w) {
        return Err(Error::Shape(format!(
            "{} values for a {h}x{w} grid",
            pixels.len()
        )));
    }
    let count = sh_count(l_max);
    let weights = projection_weights(h, w);
    let observed = |i: usize| mask.is_none_or(|m| m[i]);
    if mask.is_none() {
        let mut coeffs = vec![[0.0; 3]; count];
        for r in 0..h {
            for c in 0..w {
                let y = sh_basis(&pixel_to_direction(r, c, h, w), l_max)?;
                let p = pixels[r * w + c];
                for (acc, b) in coeffs.iter_mut().zip(&y) {
                    for k in 0..3 {
                        acc[k] += p[k] * b * weights[r];
                    }
                }
            }
        }
        return ShCoefficients::new(l_max, coeffs);
    }
    if !(0..h * w).any(observed) {
        return Err(Error::EmptyMask);
    }
    let mut normal = DMatrix::<f64>::zeros(count, count);
    let mut rhs = DMatrix::<f64>::zeros(count, 3);
    for r in 0..h {
        for c in 0..w {
            if !observed(r * w + c) {
                continue;
            }
            let y = DVector::from_vec(sh_basis(&pixel_to_direction(r, c, h, w), l_max)?);
            normal += weights[r] * &y * y.transpose();
            let p = pixels[r * w + c];
            for k in 0..3 {
                for i in 0..count {
                    rhs[(i, k)] += weights[r] * y[i] * p[k];
                }
            }
        }
    }
    // Small ridge keeps unobserved bands at zero instead of exploding.
    let ridge = 1e-6 * normal.diagonal().max().max(f64::MIN_POSITIVE);
    for i in 0..count {
        normal[(i, i)] += ridge;
    }
    let solved = normal
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("SH normal equations not positive definite".into()))?
        .solve(&rhs);
    let coeffs = (0..count)
        .map(|i| [solved[(i, 0)], solved[(i, 1)], solved[(i, 2)]])
        .collect();
    ShCoefficients::new(l_max, coeffs)
}

/// One spherical Gaussian lobe `a exp(lambda (d . mu - 1))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgLobe {
    pub amplitude: [f64; 3],
    pub axis: Direction,
    pub sharpness: f64,
}

impl SgLobe {
    pub fn evaluate(&self, d: &Direction) -> [f64; 3] {
        let w = (self.sharpness * (d.vector().dot(self.axis.vector()) - 1.0)).exp();
        self.amplitude.map(|a| a * w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgLobes {
    pub lobes: Vec<SgLobe>,
}

impl SgLobes {
    /// Six degrees of freedom per lobe.
    pub fn dim(&self) -> usize {
        6 * self.lobes.len()
    }

    pub fn evaluate(&self, d: &Direction) -> [f64; 3] {
        let mut out = [0.0; 3];
        for lobe in &self.lobes {
            let v = lobe.evaluate(d);
            for k in 0..3 {
                out[k] += v[k];
            }
        }
        out
    }

    pub fn render(&self, height: usize, width: usize) -> Vec<[f64; 3]> {
        grid_directions(height, width)
            .iter()
            .map(|d| self.evaluate(d))
            .collect()
    }

    pub fn rotated(&self, rotation: &crate::geometry::Rotation) -> SgLobes {
        SgLobes {
            lobes: self
                .lobes
                .iter()
                .map(|l| SgLobe {
                    axis: l.axis.rotated(rotation),
                    ..*l
                })
                .collect(),
        }
    }

    pub fn write_checkpoint(&self, ck: &mut Checkpoint, prefix: &str) {
        let k = self.lobes.len();
        let amps = Array2::from_shape_fn((k, 3), |(i, c)| self.lobes[i].amplitude[c]);
        let axes = Array2::from_shape_fn((k, 3), |(i, c)| self.lobes[i].axis.to_array()[c]);
        let sharp = Array2::from_shape_fn((k, 1), |(i, _)| self.lobes[i].sharpness);
        ck.insert_array(&format!("{prefix}.amplitudes"), &amps);
        ck.insert_array(&format!("{prefix}.axes"), &axes);
        ck.insert_array(&format!("{prefix}.sharpness"), &sharp);
    }

    pub fn from_checkpoint(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let amps: Array2<f64> = ck.array(&format!("{prefix}.amplitudes"))?;
        let axes: Array2<f64> = ck.array(&format!("{prefix}.axes"))?;
        let sharp: Array2<f64> = ck.array(&format!("{prefix}.sharpness"))?;
        let k = amps.nrows();
        if amps.ncols() != 3 || axes.dim() != (k, 3) || sharp.dim() != (k, 1) {
            return Err(Error::Checkpoint(format!(
                "inconsistent SG tensors under {prefix}"
            )));
        }
        let lobes = (0..k)
            .map(|i| {
                Ok(SgLobe {
                    amplitude: [amps[(i, 0)], amps[(i, 1)], amps[(i, 2)]],
                    axis: Direction::normalize(nalgebra::Vector3::new(
                        axes[(i, 0)],
                        axes[(i, 1)],
                        axes[(i, 2)],
                    ))?,
                    sharpness: sharp[(i, 0)],
                })
            })
            .collect::<Result<_>>()?;
        Ok(SgLobes { lobes })
    }
}

/// Quasi-uniform points on the sphere.
pub fn fibonacci_sphere(count: usize) -> Vec<Direction> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..count)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
            let r = (1.0 - y * y).sqrt();
            let a = golden * i as f64;
            Direction::normalize(nalgebra::Vector3::new(r * a.cos(), y, r * a.sin())).expect("unit")
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgFitConfig {
    pub lobes: usize,
    pub steps: usize,
    pub lr: f64,
    pub initial_sharpness: f64,
}

impl SgFitConfig {
    /// Five lobes (D = 30), 500 steps.
    pub fn new(lobes: usize) -> Self {
        SgFitConfig {
            lobes,
            steps: 500,
            lr: 5e-2,
            initial_sharpness: 10.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SgFit {
    pub lobes: SgLobes,
    pub history: Vec<f64>,
}

/// Fits SG lobes by Adam on the solid-angle-weighted log-space MSE over
/// observed pixels. Amplitudes and sharpness are optimised through their
/// logarithms; axes are renormalised after every step.
pub fn fit_sg(image: &EnvironmentImage, config: &SgFitConfig) -> Result<SgFit> {
    let k = config.lobes;
    if k == 0 || config.steps == 0 || !(config.initial_sharpness > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "bad SG fit config {config:?}"
        )));
    }
    let (h, w) = (image.height(), image.width());
    let mut dirs = Vec::new();
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if image.is_observed(r, c) {
                dirs.push(pixel_to_direction(r, c, h, w));
                targets.push(image.pixel(r, c).map(|v| (v as f64).max(LOG_FLOOR).ln()));
                weights.push(pixel_solid_angle(r, h, w));
            }
        }
    }
    if dirs.is_empty() {
        return Err(Error::EmptyMask);
    }
    let total: f64 = weights.iter().sum();
    let p = dirs.len();
    let dir_m = Array2::from_shape_fn((p, 3), |(i, c)| dirs[i].to_array()[c]);
    let target_m = Array2::from_shape_fn((p, 3), |(i, c)| targets[i][c]);
    let weight_m = Array2::from_shape_fn((p, 1), |(i, _)| weights[i] / (3.0 * total));

    let mut mean = [0.0; 3];
    for (px, wt) in image
        .pixels()
        .iter()
        .zip(image.mask().map_or(vec![true; h * w], |m| m.to_vec()))
    {
        if wt {
            for c in 0..3 {
                mean[c] += px[c] as f64 / p as f64;
            }
        }
    }
    let init_axes = fibonacci_sphere(k);
    let mut params = vec![
        Array2::from_shape_fn((k, 3), |(_, c)| mean[c].max(LOG_FLOOR).ln()),
        Array2::from_shape_fn((k, 3), |(i, c)| init_axes[i].to_array()[c]),
        Array2::from_elem((1, k), config.initial_sharpness.ln()),
    ];
    let mut adam = Adam::new(&params);
    let mut history = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let (loss, grads) = sg_loss(&params, &dir_m, &target_m, &weight_m)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("SG fit loss".into()));
        }
        history.push(loss);
        adam.step(params.iter_mut(), &grads, config.lr)?;
        for mut row in params[1].rows_mut() {
            let n = row.dot(&row).sqrt().max(1e-12);
            row.mapv_inplace(|v| v / n);
        }
    }
    let lobes = (0..k)
        .map(|i| {
            Ok(SgLobe {
                amplitude: [0, 1, 2].map(|c| params[0][(i, c)].exp()),
                axis: Direction::normalize(nalgebra::Vector3::new(
                    params[1][(i, 0)],
                    params[1][(i, 1)],
                    params[1][(i, 2)],
                ))?,
                sharpness: params[2][(0, i)].exp(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(SgFit {
        lobes: SgLobes { lobes },
        history,
    })
}

/// Weighted log-space MSE of the lobes `(log amplitude, axes, log sharpness)`.
pub(crate) fn sg_loss(
    params: &[Array2<f64>],
    dirs: &Array2<f64>,
    target: &Array2<f64>,
    weights: &Array2<f64>,
) -> Result<(f64, Vec<Array2<f64>>)> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = sg_graph(&mut tape, &vars, dirs, target, weights)?;
    let g = tape.backward(loss)?;
    let grads = vars.iter().map(|&v| g.wrt(v)).collect::<Result<_>>()?;
    Ok((tape.scalar(loss), grads))
}

fn sg_graph(
    tape: &mut Tape<f64>,
    vars: &[Var],
    dirs: &Array2<f64>,
    target: &Array2<f64>,
    weights: &Array2<f64>,
) -> Result<Var> {
    let (log_amp, axes, log_sharp) = (vars[0], vars[1], vars[2]);
    let d = tape.constant(dirs.clone());
    let t = tape.constant(target.clone());
    let wt = tape.constant(weights.clone());
    let axes_t = tape.transpose(axes);
    let cosine = tape.matmul(d, axes_t)?;
    let shifted = tape.add_scalar(cosine, -1.0);
    let sharp = tape.exp(log_sharp);
    let arg = tape.mul_row(shifted, sharp)?;
    let lobe = tape.exp(arg);
    let amp = tape.exp(log_amp);
    let pred = tape.matmul(lobe, amp)?;
    let floored = tape.add_scalar(pred, LOG_FLOOR);
    let log_pred = tape.ln(floored);
    let resid = tape.sub(log_pred, t)?;
    let sq = tape.square(resid);
    let weighted = tape.mul_col(sq, wt)?;
    Ok(tape.sum(weighted))
}
