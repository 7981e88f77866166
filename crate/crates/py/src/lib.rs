//! Python bindings: environments, latent codes, models, baselines and the
//! sphere renderer.

use std::path::PathBuf;

use illumfield::baselines::{fit_sh as fit_sh_core, ShCoefficients};
use illumfield::checkpoint::Checkpoint;
use illumfield::equivariance::{EquivarianceMode, LatentCode};
use illumfield::eval;
use illumfield::field::{FieldConfig, FieldModel};
use illumfield::fitting::{decode_environment, fit_latent, sample_prior, FitConfig};
use illumfield::geometry::{Direction, Rotation};
use illumfield::hdr_io::{generate_synthetic_env, load_hdr, save_hdr, EnvironmentImage};
use illumfield::inverse_render::{invert_lighting, InverseConfig, Material, Renderer, Rendering};
use illumfield::optim::WarmupCosine;
use illumfield::rng::seeded;
use illumfield::training::{train, LatentBank, TrainConfig};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn err(e: illumfield::Error) -> PyErr {
    match e {
        illumfield::Error::Io { .. } | illumfield::Error::Image { .. } => {
            PyIOError::new_err(e.to_string())
        }
        other => PyValueError::new_err(other.to_string()),
    }
}

fn linear(image: &EnvironmentImage) -> Vec<[f64; 3]> {
    image.pixels().iter().map(|p| p.map(f64::from)).collect()
}

/// Equirectangular HDR raster of linear RGB radiance.
#[pyclass(name = "Environment", module = "illumfield_py", from_py_object)]
#[derive(Clone)]
pub struct PyEnvironment {
    pub inner: EnvironmentImage,
}

#[pymethods]
impl PyEnvironment {
    #[staticmethod]
    pub fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyEnvironment {
            inner: load_hdr(path).map_err(err)?,
        })
    }

    /// A procedural sky with a sun above the horizon.
    #[staticmethod]
    pub fn synthetic(seed: u64, height: usize, width: usize) -> PyResult<Self> {
        Ok(PyEnvironment {
            inner: generate_synthetic_env(seed, height, width).map_err(err)?,
        })
    }

    /// Row-major pixels, `height * width` RGB triples.
    #[staticmethod]
    pub fn from_pixels(height: usize, width: usize, pixels: Vec<[f32; 3]>) -> PyResult<Self> {
        Ok(PyEnvironment {
            inner: EnvironmentImage::new(width, height, pixels).map_err(err)?,
        })
    }

    pub fn save(&self, path: PathBuf) -> PyResult<()> {
        save_hdr(&self.inner, path).map_err(err)
    }

    /// Tone-mapped 8-bit PNG; `exposure` defaults to putting the median at mid grey.
    #[pyo3(signature = (path, exposure=None))]
    pub fn save_png(&self, path: PathBuf, exposure: Option<f64>) -> PyResult<()> {
        let exposure =
            exposure.unwrap_or_else(|| eval::auto_exposure_offset(&linear(&self.inner)).exp());
        self.inner.save_png_tonemapped(path, exposure).map_err(err)
    }

    #[getter]
    pub fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    pub fn width(&self) -> usize {
        self.inner.width()
    }

    pub fn pixels(&self) -> Vec<[f32; 3]> {
        self.inner.pixels().to_vec()
    }

    /// The environment rotated about the vertical axis.
    pub fn rotated(&self, angle_deg: f64) -> Self {
        PyEnvironment {
            inner: self
                .inner
                .rotated(&Rotation::about_y(angle_deg.to_radians())),
        }
    }

    /// A copy observing only pixels where `mask` is true (row-major).
    pub fn masked(&self, mask: Vec<bool>) -> PyResult<Self> {
        Ok(PyEnvironment {
            inner: self.inner.clone().with_mask(mask).map_err(err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Environment({}x{})",
            self.inner.height(),
            self.inner.width()
        )
    }
}

/// A `3 x N` latent code, flattened column by column.
#[pyclass(name = "LatentCode", module = "illumfield_py", from_py_object)]
#[derive(Clone)]
pub struct PyLatentCode {
    pub inner: LatentCode,
}

#[pymethods]
impl PyLatentCode {
    #[new]
    pub fn new(values: Vec<f64>) -> PyResult<Self> {
        Ok(PyLatentCode {
            inner: LatentCode::from_vec(&values).map_err(err)?,
        })
    }

    #[staticmethod]
    pub fn zeros(n: usize) -> Self {
        PyLatentCode {
            inner: LatentCode::zeros(n),
        }
    }

    pub fn to_list(&self) -> Vec<f64> {
        self.inner.to_vec()
    }

    #[getter]
    pub fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    pub fn n(&self) -> usize {
        self.inner.n()
    }

    /// The code rotated about the vertical axis.
    pub fn rotated(&self, angle_deg: f64) -> Self {
        PyLatentCode {
            inner: self
                .inner
                .rotated(&Rotation::about_y(angle_deg.to_radians())),
        }
    }

    pub fn interpolate(&self, other: &PyLatentCode, t: f64) -> PyResult<Self> {
        Ok(PyLatentCode {
            inner: illumfield::fitting::interpolate(&self.inner, &other.inner, t).map_err(err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!("LatentCode(D={})", self.inner.dim())
    }
}

fn field_config(mode: &str, latent_dim: usize, arch: &str) -> PyResult<FieldConfig> {
    let mode: EquivarianceMode = mode.parse().map_err(err)?;
    if latent_dim == 0 || latent_dim % 3 != 0 {
        return Err(PyValueError::new_err(format!(
            "latent_dim must be a positive multiple of 3, got {latent_dim}"
        )));
    }
    let n = latent_dim / 3;
    match arch {
        "small" => Ok(FieldConfig::small(n, mode)),
        "desk" => Ok(FieldConfig::desk(n, mode)),
        "full" => Ok(FieldConfig::new(n, mode)),
        other => Err(PyValueError::new_err(format!(
            "unknown architecture {other:?}"
        ))),
    }
}

/// A trained or freshly initialised field, with its training codes if known.
#[pyclass(name = "Model", module = "illumfield_py")]
pub struct PyModel {
    pub inner: FieldModel<f32>,
    pub bank: Option<LatentBank>,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    pub fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(path).map_err(err)?;
        let inner = FieldModel::from_checkpoint(&ck).map_err(err)?;
        let bank = LatentBank::from_checkpoint(&ck).ok();
        Ok(PyModel { inner, bank })
    }

    #[staticmethod]
    #[pyo3(signature = (mode="so2", latent_dim=27, arch="desk", seed=0))]
    pub fn random(mode: &str, latent_dim: usize, arch: &str, seed: u64) -> PyResult<Self> {
        let cfg = field_config(mode, latent_dim, arch)?;
        Ok(PyModel {
            inner: FieldModel::new(cfg, seed).map_err(err)?,
            bank: None,
        })
    }

    pub fn save(&self, path: PathBuf) -> PyResult<()> {
        let mut ck = Checkpoint::new();
        self.inner.write_checkpoint(&mut ck);
        if let Some(b) = &self.bank {
            b.write_checkpoint(&mut ck);
        }
        ck.save(path).map_err(err)
    }

    #[getter]
    pub fn mode(&self) -> String {
        self.inner.config().mode.to_string()
    }

    #[getter]
    pub fn latent_dim(&self) -> usize {
        3 * self.inner.n()
    }

    #[getter]
    pub fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    /// Number of training codes stored with the model.
    pub fn code_count(&self) -> usize {
        self.bank.as_ref().map_or(0, LatentBank::len)
    }

    /// Mean training code of image `index`.
    pub fn code(&self, index: usize) -> PyResult<PyLatentCode> {
        let bank = self
            .bank
            .as_ref()
            .ok_or_else(|| PyValueError::new_err("model has no training codes"))?;
        Ok(PyLatentCode {
            inner: bank.code(index).map_err(err)?,
        })
    }

    /// A code drawn from the standard normal prior.
    pub fn sample(&self, seed: u64) -> PyLatentCode {
        PyLatentCode {
            inner: sample_prior(self.inner.n(), &mut seeded(seed)),
        }
    }

    /// Log radiance at a unit direction `(x, y, z)`.
    pub fn eval(&self, direction: [f64; 3], code: &PyLatentCode) -> PyResult<[f64; 3]> {
        let d = Direction::new(direction[0], direction[1], direction[2]).map_err(err)?;
        self.inner.eval(&d, &code.inner).map_err(err)
    }

    pub fn decode(
        &self,
        code: &PyLatentCode,
        height: usize,
        width: usize,
    ) -> PyResult<PyEnvironment> {
        Ok(PyEnvironment {
            inner: decode_environment(&self.inner, &code.inner, height, width).map_err(err)?,
        })
    }

    /// Fits a code to the observed pixels of `image`; returns the code and
    /// the per-step loss.
    #[pyo3(signature = (image, steps=2500, seed=0))]
    pub fn fit(
        &self,
        image: &PyEnvironment,
        steps: usize,
        seed: u64,
    ) -> PyResult<(PyLatentCode, Vec<f64>)> {
        let cfg = FitConfig {
            steps,
            seed,
            ..FitConfig::default()
        };
        let r = fit_latent(&self.inner, &image.inner, &cfg).map_err(err)?;
        Ok((PyLatentCode { inner: r.code }, r.history))
    }

    /// Largest equivariance deviation over random rotations, directions and codes.
    #[pyo3(signature = (trials=100, seed=0))]
    pub fn audit(&self, trials: usize, seed: u64) -> PyResult<f64> {
        Ok(eval::equivariance_audit(&self.inner, trials, seed)
            .map_err(err)?
            .max_deviation)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(mode={}, D={})",
            self.inner.config().mode,
            3 * self.inner.n()
        )
    }
}

/// Trains a model; returns it with the per-step total loss.
#[pyfunction]
#[pyo3(signature = (images, mode="so2", latent_dim=27, steps=1000, arch="desk", batch_size=1024, seed=0))]
pub fn train_model(
    images: Vec<PyEnvironment>,
    mode: &str,
    latent_dim: usize,
    steps: usize,
    arch: &str,
    batch_size: usize,
    seed: u64,
) -> PyResult<(PyModel, Vec<f64>)> {
    let field = field_config(mode, latent_dim, arch)?;
    let mut cfg = TrainConfig::with_steps(steps);
    cfg.batch_size = batch_size;
    cfg.seed = seed;
    let images: Vec<EnvironmentImage> = images.into_iter().map(|e| e.inner).collect();
    let out = train::<f32>(&images, field, &cfg).map_err(err)?;
    let history = out.history.records.iter().map(|r| r.total).collect();
    Ok((
        PyModel {
            inner: out.model,
            bank: Some(out.bank),
        },
        history,
    ))
}

/// SH coefficients of `image` up to `order`, one RGB triple per basis function.
#[pyfunction]
pub fn fit_sh(image: &PyEnvironment, order: usize) -> PyResult<Vec<[f64; 3]>> {
    Ok(fit_sh_core(&image.inner, order)
        .map_err(err)?
        .coeffs()
        .to_vec())
}

/// Row-major raster of an SH expansion (values may be negative).
#[pyfunction]
pub fn render_sh(
    coeffs: Vec<[f64; 3]>,
    order: usize,
    height: usize,
    width: usize,
) -> PyResult<Vec<[f64; 3]>> {
    Ok(ShCoefficients::new(order, coeffs)
        .map_err(err)?
        .render(height, width))
}

/// Log-space PSNR after exposure alignment.
#[pyfunction]
pub fn hdr_psnr(pred: &PyEnvironment, target: &PyEnvironment) -> PyResult<f64> {
    eval::hdr_psnr(&linear(&pred.inner), &linear(&target.inner)).map_err(err)
}

/// PSNR of tone-mapped images after exposure alignment.
#[pyfunction]
pub fn ldr_psnr(pred: &PyEnvironment, target: &PyEnvironment) -> PyResult<f64> {
    eval::ldr_psnr(&linear(&pred.inner), &linear(&target.inner)).map_err(err)
}

/// Training learning rate at `step` of a run of `max_steps`.
#[pyfunction]
#[pyo3(signature = (step, max_steps=50_000))]
pub fn learning_rate(step: usize, max_steps: usize) -> f64 {
    WarmupCosine {
        max_steps,
        ..WarmupCosine::default()
    }
    .lr(step)
}

/// Glossy sphere under an orthographic camera, lit by an environment grid.
#[pyclass(name = "Renderer", module = "illumfield_py", unsendable)]
pub struct PyRenderer {
    pub inner: Renderer<f32>,
}

#[pymethods]
impl PyRenderer {
    #[new]
    #[pyo3(signature = (resolution=128, env_height=64, specular=0.6))]
    pub fn new(resolution: usize, env_height: usize, specular: f64) -> PyResult<Self> {
        let material = Material::glossy(specular).map_err(err)?;
        Ok(PyRenderer {
            inner: Renderer::new(resolution, env_height, material).map_err(err)?,
        })
    }

    /// Row-major `resolution^2` linear RGB render of a raster environment.
    pub fn render_env(&self, env: &PyEnvironment) -> PyResult<Vec<[f64; 3]>> {
        Ok(self.inner.render_image(&env.inner).map_err(err)?.pixels)
    }

    #[pyo3(signature = (model, code, exposure=1.0))]
    pub fn render_latent(
        &self,
        model: &PyModel,
        code: &PyLatentCode,
        exposure: f64,
    ) -> PyResult<Vec<[f64; 3]>> {
        Ok(self
            .inner
            .render_latent(&model.inner, &code.inner, exposure)
            .map_err(err)?
            .pixels)
    }

    /// Recovers `(code, exposure, loss history)` from a render.
    #[pyo3(signature = (model, target, steps=200))]
    pub fn invert(
        &self,
        model: &PyModel,
        target: Vec<[f64; 3]>,
        steps: usize,
    ) -> PyResult<(PyLatentCode, f64, Vec<f64>)> {
        let target = self.rendering(target)?;
        let cfg = InverseConfig {
            steps,
            ..InverseConfig::default()
        };
        let r = invert_lighting(&target, &self.inner, &model.inner, &cfg).map_err(err)?;
        Ok((PyLatentCode { inner: r.code }, r.exposure, r.history))
    }

    /// PSNR over the sphere's pixels with the brightest target value as peak.
    pub fn render_psnr(&self, pred: Vec<[f64; 3]>, target: Vec<[f64; 3]>) -> PyResult<f64> {
        let (p, t) = (self.rendering(pred)?, self.rendering(target)?);
        self.inner.render_psnr(&p, &t).map_err(err)
    }
}

impl PyRenderer {
    fn rendering(&self, pixels: Vec<[f64; 3]>) -> PyResult<Rendering> {
        let resolution = self.inner.view().resolution();
        if pixels.len() != resolution * resolution {
            return Err(PyValueError::new_err(format!(
                "expected {} pixels, got {}",
                resolution * resolution,
                pixels.len()
            )));
        }
        Ok(Rendering { resolution, pixels })
    }
}

#[pymodule]
fn illumfield_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEnvironment>()?;
    m.add_class::<PyLatentCode>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyRenderer>()?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(fit_sh, m)?)?;
    m.add_function(wrap_pyfunction!(render_sh, m)?)?;
    m.add_function(wrap_pyfunction!(hdr_psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ldr_psnr, m)?)?;
    m.add_function(wrap_pyfunction!(learning_rate, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
