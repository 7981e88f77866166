//! Normalised Blinn-Phong environment shading of a sphere, and inverse
//! lighting through it.
//!
//! The shader sums the whole environment grid directly. For a fixed camera
//! and geometry the per-pixel weights never change, so they are precomputed
//! once as two sparse transport operators (diffuse and specular) and the
//! rendering of any environment is a pair of sparse products. Both are
//! constants on the tape, which makes renders differentiable in the
//! environment and the exposure.

use std::f64::consts::PI;
use std::rc::Rc;

use nalgebra::{DMatrix, Vector3};
use ndarray::Array2;

use crate::baselines::{sh_basis, sh_count, SgLobes, ShCoefficients};
use crate::equivariance::{single_group, LatentCode};
use crate::error::{Error, Result};
use crate::field::{direction_rows, FieldModel};
use crate::geometry::{pixel_solid_angle, pixel_to_direction, Direction};
use crate::hdr_io::EnvironmentImage;
use crate::losses::{inverse_loss, LossWeights};
use crate::optim::Adam;
use crate::tape::{Csr, Real, Tape, Var};

/// `(n + 2) / (4 pi (2 - exp(-n / 2)))`.
pub fn zeta(shininess: f64) -> f64 {
    (shininess + 2.0) / (4.0 * PI * (2.0 - (-shininess / 2.0).exp()))
}

/// Specular weights below this fraction of the lobe peak are dropped from
/// the transport operator.
pub const SPECULAR_CUTOFF: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Material {
    diffuse: [f64; 3],
    specular: f64,
    shininess: f64,
}

impl Material {
    pub fn new(diffuse: [f64; 3], specular: f64, shininess: f64) -> Result<Self> {
        if diffuse.iter().any(|c| !(0.0..=1.0).contains(c)) || !(0.0..=1.0).contains(&specular) {
            return Err(Error::InvalidArgument(format!(
                "albedo {diffuse:?} and specular weight {specular} must lie in [0, 1]"
            )));
        }
        if !(shininess > 0.0 && shininess.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "shininess {shininess} must be positive"
            )));
        }
        Ok(Material {
            diffuse,
            specular,
            shininess,
        })
    }

    /// Grey diffuse albedo `0.8 (1 - k_s)` with specular weight `k_s` and `n = 32`.
    pub fn glossy(specular: f64) -> Result<Self> {
        let kd = 0.8 * (1.0 - specular);
        Self::new([kd; 3], specular, 32.0)
    }

    pub fn diffuse(&self) -> [f64; 3] {
        self.diffuse
    }

    pub fn specular(&self) -> f64 {
        self.specular
    }

    pub fn shininess(&self) -> f64 {
        self.shininess
    }

    pub fn zeta(&self) -> f64 {
        zeta(self.shininess)
    }

    pub fn with_specular(&self, specular: f64) -> Result<Self> {
        Self::new(self.diffuse, specular, self.shininess)
    }
}

/// Direct-sum shading of one surface point under `env` sampled on an
/// `height x 2 height` grid with per-pixel solid angles.
pub fn shade(
    normal: &Direction,
    view: &Direction,
    env: impl Fn(&Direction) -> [f64; 3],
    material: &Material,
    height: usize,
) -> [f64; 3] {
    let width = 2 * height;
    let zeta = material.zeta();
    let mut out = [0.0; 3];
    for r in 0..height {
        let d_omega = pixel_solid_angle(r, height, width);
        for c in 0..width {
            let w = pixel_to_direction(r, c, height, width);
            let (diffuse, specular) = brdf_weights(
                normal.vector(),
                view.vector(),
                w.vector(),
                material.shininess,
            );
            if diffuse == 0.0 && specular == 0.0 {
                continue;
            }
            let l = env(&w);
            for k in 0..3 {
                out[k] += l[k]
                    * d_omega
                    * (material.diffuse[k] * diffuse + material.specular * zeta * specular);
            }
        }
    }
    out
}

/// `(max(0, N.w) / pi, max(0, N.h)^n)` for `h = normalize(w + V)`.
fn brdf_weights(
    n: &Vector3<f64>,
    v: &Vector3<f64>,
    w: &Vector3<f64>,
    shininess: f64,
) -> (f64, f64) {
    let cos = n.dot(w);
    let diffuse = cos.max(0.0) / PI;
    let half = w + v;
    let norm = half.norm();
    let specular = if norm > 1e-12 {
        (n.dot(&half) / norm).max(0.0).powf(shininess)
    } else {
        0.0
    };
    (diffuse, specular)
}

/// A unit sphere filling a square orthographic view along `-z`.
#[derive(Debug, Clone)]
pub struct SphereView {
    resolution: usize,
    /// Flat image index of each visible pixel.
    pixels: Vec<usize>,
    normals: Vec<Direction>,
}

impl SphereView {
    pub fn new(resolution: usize) -> Result<Self> {
        if resolution == 0 {
            return Err(Error::InvalidArgument(
                "render resolution must be positive".into(),
            ));
        }
        let mut pixels = Vec::new();
        let mut normals = Vec::new();
        let res = resolution as f64;
        for i in 0..resolution {
            for j in 0..resolution {
                let x = 2.0 * (j as f64 + 0.5) / res - 1.0;
                let y = 1.0 - 2.0 * (i as f64 + 0.5) / res;
                let r2 = x * x + y * y;
                if r2 < 1.0 {
                    pixels.push(i * resolution + j);
                    normals.push(Direction::normalize(Vector3::new(x, y, (1.0 - r2).sqrt()))?);
                }
            }
        }
        Ok(SphereView {
            resolution,
            pixels,
            normals,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn visible_count(&self) -> usize {
        self.pixels.len()
    }

    pub fn normals(&self) -> &[Direction] {
        &self.normals
    }

    /// Direction towards the camera.
    pub fn view_direction(&self) -> Direction {
        Direction::e_z()
    }

    /// Visibility map, row-major.
    pub fn visibility(&self) -> Vec<bool> {
        let mut v = vec![false; self.resolution * self.resolution];
        for &p in &self.pixels {
            v[p] = true;
        }
        v
    }
}

/// Linear RGB render with a zero background.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendering {
    pub resolution: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl Rendering {
    pub fn to_image(&self) -> Result<EnvironmentImage> {
        let pixels = self
            .pixels
            .iter()
            .map(|p| p.map(|v| v.max(0.0) as f32))
            .collect();
        EnvironmentImage::new(self.resolution, self.resolution, pixels)
    }

    pub fn from_image(image: &EnvironmentImage) -> Result<Self> {
        if image.width() != image.height() {
            return Err(Error::Shape(format!(
                "render must be square, got {}x{}",
                image.width(),
                image.height()
            )));
        }
        Ok(Rendering {
            resolution: image.width(),
            pixels: image.pixels().iter().map(|p| p.map(f64::from)).collect(),
        })
    }

    pub fn scaled(&self, s: f64) -> Rendering {
        Rendering {
            resolution: self.resolution,
            pixels: self.pixels.iter().map(|p| p.map(|v| v * s)).collect(),
        }
    }
}

/// A sphere, a material and precomputed transport to an `H x 2H` grid.
#[derive(Debug, Clone)]
pub struct Renderer<T: Real> {
    view: SphereView,
    material: Material,
    env_height: usize,
    env_dirs: Vec<Direction>,
    diffuse: Rc<Csr<T>>,
    specular: Rc<Csr<T>>,
}

impl<T: Real> Renderer<T> {
    /// `resolution^2` render, `env_height x 2 env_height` environment grid.
    pub fn new(resolution: usize, env_height: usize, material: Material) -> Result<Self> {
        if env_height == 0 {
            return Err(Error::InvalidArgument(
                "environment height must be positive".into(),
            ));
        }
        let view = SphereView::new(resolution)?;
        let env_width = 2 * env_height;
        let env_dirs: Vec<Direction> = (0..env_height)
            .flat_map(|r| {
                (0..env_width).map(move |c| pixel_to_direction(r, c, env_height, env_width))
            })
            .collect();
        let solid: Vec<f64> = (0..env_height)
            .map(|r| pixel_solid_angle(r, env_height, env_width))
            .collect();
        let v = *view.view_direction().vector();
        let mut diffuse = Csr::empty(env_dirs.len());
        let mut specular = Csr::empty(env_dirs.len());
        let mut d_row = Vec::new();
        let mut s_row = Vec::new();
        for n in view.normals() {
            d_row.clear();
            s_row.clear();
            for (i, w) in env_dirs.iter().enumerate() {
                let (d, s) = brdf_weights(n.vector(), &v, w.vector(), material.shininess);
                let d_omega = solid[i / env_width];
                if d > 0.0 {
                    d_row.push((i as u32, T::lit(d * d_omega)));
                }
                if s > SPECULAR_CUTOFF {
                    s_row.push((i as u32, T::lit(s * d_omega)));
                }
            }
            diffuse.push_row(d_row.iter().copied());
            specular.push_row(s_row.iter().copied());
        }
        Ok(Renderer {
            view,
            material,
            env_height,
            env_dirs,
            diffuse: Rc::new(diffuse),
            specular: Rc::new(specular),
        })
    }

    /// Same geometry and transport with a different albedo or specular
    /// weight. The shininess must match, since it shapes the operator.
    pub fn with_material(&self, material: Material) -> Result<Self> {
        if material.shininess != self.material.shininess {
            return Renderer::new(self.view.resolution, self.env_height, material);
        }
        Ok(Renderer {
            material,
            ..self.clone()
        })
    }

    pub fn view(&self) -> &SphereView {
        &self.view
    }

    pub fn material(&self) -> &Material {
        &self.material
    }

    pub fn env_height(&self) -> usize {
        self.env_height
    }

    pub fn env_width(&self) -> usize {
        2 * self.env_height
    }

    /// Grid directions, row-major.
    pub fn env_directions(&self) -> &[Direction] {
        &self.env_dirs
    }

    pub fn transport_nnz(&self) -> usize {
        self.diffuse.nnz() + self.specular.nnz()
    }

    /// PSNR of `pred` against `target` over the sphere's pixels, with the
    /// brightest target value as the peak.
    pub fn render_psnr(&self, pred: &Rendering, target: &Rendering) -> Result<f64> {
        let a = self.gather(pred)?;
        let b = self.gather(target)?;
        let peak = b.iter().fold(0.0f64, |m, v| m.max(v.as_f64()));
        let a: Vec<f64> = a.iter().map(|v| v.as_f64()).collect();
        let b: Vec<f64> = b.iter().map(|v| v.as_f64()).collect();
        crate::eval::psnr(&a, &b, if peak > 0.0 { peak } else { 1.0 })
    }

    /// Visible-pixel radiance (`V x 3`) on the tape from grid radiance `env`
    /// (`E x 3`, linear).
    pub fn render_var(&self, tape: &mut Tape<T>, env: Var) -> Result<Var> {
        let m = &self.material;
        let d = tape.sparse_matmul(self.diffuse.clone(), env)?;
        let kd = tape.constant(Array2::from_shape_fn((1, 3), |(_, k)| T::lit(m.diffuse[k])));
        let diffuse = tape.mul_row(d, kd)?;
        if m.specular == 0.0 {
            return Ok(diffuse);
        }
        let s = tape.sparse_matmul(self.specular.clone(), env)?;
        let specular = tape.scale(s, T::lit(m.specular * m.zeta()));
        tape.add(diffuse, specular)
    }

    /// Renders grid radiance given as `E` RGB triples.
    pub fn render_values(&self, env: &[[f64; 3]]) -> Result<Rendering> {
        if env.len() != self.env_dirs.len() {
            return Err(Error::Shape(format!(
                "{} environment values for a {}-pixel grid",
                env.len(),
                self.env_dirs.len()
            )));
        }
        let mut tape = Tape::<T>::new();
        let e = tape.constant(Array2::from_shape_fn((env.len(), 3), |(i, k)| {
            T::lit(env[i][k])
        }));
        let out = self.render_var(&mut tape, e)?;
        Ok(self.scatter(tape.value(out)))
    }

    /// Renders a raster environment, resampling it to the grid if needed.
    pub fn render_image(&self, env: &EnvironmentImage) -> Result<Rendering> {
        let env = if env.height() == self.env_height && env.width() == self.env_width() {
            env.clone()
        } else {
            env.resized(self.env_width(), self.env_height)?
        };
        let values: Vec<[f64; 3]> = env.pixels().iter().map(|p| p.map(f64::from)).collect();
        self.render_values(&values)
    }

    pub fn render_sh(&self, sh: &ShCoefficients) -> Result<Rendering> {
        self.render_values(
            &self
                .env_dirs
                .iter()
                .map(|d| sh.evaluate(d))
                .collect::<Vec<_>>(),
        )
    }

    pub fn render_sg(&self, sg: &SgLobes) -> Result<Rendering> {
        self.render_values(
            &self
                .env_dirs
                .iter()
                .map(|d| sg.evaluate(d))
                .collect::<Vec<_>>(),
        )
    }

    /// Renders `exposure * exp(f(d, z))`.
    pub fn render_latent(
        &self,
        model: &FieldModel<T>,
        z: &LatentCode,
        exposure: f64,
    ) -> Result<Rendering> {
        let logs = model.decode(&self.env_dirs, z)?;
        let values: Vec<[f64; 3]> = logs.iter().map(|l| l.map(|v| exposure * v.exp())).collect();
        self.render_values(&values)
    }

    fn scatter(&self, visible: &Array2<T>) -> Rendering {
        let res = self.view.resolution;
        let mut pixels = vec![[0.0; 3]; res * res];
        for (i, &p) in self.view.pixels.iter().enumerate() {
            pixels[p] = [0, 1, 2].map(|k| visible[(i, k)].as_f64());
        }
        Rendering {
            resolution: res,
            pixels,
        }
    }

    fn gather(&self, target: &Rendering) -> Result<Array2<T>> {
        if target.resolution != self.view.resolution {
            return Err(Error::Shape(format!(
                "target is {0}x{0}, renderer {1}x{1}",
                target.resolution, self.view.resolution
            )));
        }
        Ok(Array2::from_shape_fn(
            (self.view.visible_count(), 3),
            |(i, k)| T::lit(target.pixels[self.view.pixels[i]][k]),
        ))
    }

    /// Decoded radiance on the grid times `exp(log_exposure)`, on the tape.
    fn latent_env(
        &self,
        tape: &mut Tape<T>,
        model: &FieldModel<T>,
        dirs: &Array2<T>,
        z: Var,
        log_exposure: Var,
    ) -> Result<Var> {
        let params = model.bind(tape, false)?;
        let logs = model.forward(tape, &params, dirs, z, &single_group(dirs.nrows()))?;
        let radiance = tape.exp(logs);
        let exposure = tape.exp(log_exposure);
        tape.mul_scalar(radiance, exposure)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InverseConfig {
    pub steps: usize,
    pub lr: f64,
    pub weights: LossWeights,
}

impl Default for InverseConfig {
    /// 200 Adam steps at `1e-2` with `rho = 100, gamma = 1, beta = 1e-3`.
    fn default() -> Self {
        InverseConfig {
            steps: 200,
            lr: 1e-2,
            weights: LossWeights::INVERSE,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InverseResult {
    pub code: LatentCode,
    pub exposure: f64,
    /// Total loss per step.
    pub history: Vec<f64>,
}

/// Recovers a latent code and exposure whose render matches `target`.
///
/// Adam runs jointly on the code (initialised at zero) and the log exposure
/// (initialised at zero, i.e. exposure one); the loss is
/// `rho MSE + gamma cosine + beta prior` over visible pixels.
pub fn invert_lighting<T: Real>(
    target: &Rendering,
    renderer: &Renderer<T>,
    model: &FieldModel<T>,
    config: &InverseConfig,
) -> Result<InverseResult> {
    config.weights.validate()?;
    if config.steps == 0 || !(config.lr > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "bad inversion config {config:?}"
        )));
    }
    let target_m = renderer.gather(target)?;
    let dirs = direction_rows::<T>(&renderer.env_dirs);
    let mut params = vec![
        Array2::<T>::zeros((1, 3 * model.n())),
        Array2::<T>::zeros((1, 1)),
    ];
    let mut adam = Adam::new(&params);
    let mut history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut tape = Tape::<T>::new();
        let z = tape.leaf(params[0].clone());
        let log_exposure = tape.leaf(params[1].clone());
        let env = renderer.latent_env(&mut tape, model, &dirs, z, log_exposure)?;
        let rendered = renderer.render_var(&mut tape, env)?;
        let t = tape.constant(target_m.clone());
        let parts = inverse_loss(&mut tape, rendered, t, z, &config.weights)?;
        let loss = tape.scalar(parts.total).as_f64();
        if !loss.is_finite() {
            return Err(Error::NanLoss { step: step + 1 });
        }
        history.push(loss);
        let g = tape.backward(parts.total)?;
        let grads = [g.wrt(z)?, g.wrt(log_exposure)?];
        adam.step(params.iter_mut(), &grads, config.lr)?;
    }
    let code = LatentCode::from_vec(&params[0].iter().map(|v| v.as_f64()).collect::<Vec<_>>())?;
    Ok(InverseResult {
        code,
        exposure: params[1][(0, 0)].as_f64().exp(),
        history,
    })
}

/// Best SH environment for `target` under the renderer, per channel, in the
/// least-squares sense over visible pixels. Rendering is linear in the
/// coefficients, so this is the exact minimiser of the MSE term.
pub fn invert_lighting_sh<T: Real>(
    target: &Rendering,
    renderer: &Renderer<T>,
    l_max: usize,
) -> Result<ShCoefficients> {
    let target_m = renderer.gather(target)?;
    let count = sh_count(l_max);
    let basis: Vec<Vec<f64>> = renderer
        .env_dirs
        .iter()
        .map(|d| sh_basis(d, l_max))
        .collect::<Result<_>>()?;
    let visible = renderer.view.visible_count();
    // Render each basis function in every channel at once.
    let mut columns = vec![DMatrix::<f64>::zeros(visible, count); 3];
    for j in 0..count {
        let env: Vec<[f64; 3]> = basis.iter().map(|b| [b[j]; 3]).collect();
        let mut tape = Tape::<T>::new();
        let e = tape.constant(Array2::from_shape_fn((env.len(), 3), |(i, k)| {
            T::lit(env[i][k])
        }));
        let out = renderer.render_var(&mut tape, e)?;
        let v = tape.value(out);
        for (k, col) in columns.iter_mut().enumerate() {
            for i in 0..visible {
                col[(i, j)] = v[(i, k)].as_f64();
            }
        }
    }
    let mut coeffs = vec![[0.0; 3]; count];
    for (k, a) in columns.iter().enumerate() {
        let b = nalgebra::DVector::from_fn(visible, |i, _| target_m[(i, k)].as_f64());
        let mut normal = a.transpose() * a;
        let ridge = 1e-10 * normal.diagonal().max().max(f64::MIN_POSITIVE);
        for i in 0..count {
            normal[(i, i)] += ridge;
        }
        let rhs = a.transpose() * b;
        let x = normal
            .cholesky()
            .ok_or_else(|| Error::InvalidArgument("SH inversion normal equations singular".into()))?
            .solve(&rhs);
        for j in 0..count {
            coeffs[j][k] = x[j];
        }
    }
    ShCoefficients::new(l_max, coeffs)
}
