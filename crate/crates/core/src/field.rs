//! Conditional spherical neural field: a cross-attention transformer decoder
//! mapping a direction and a latent code to log-HDR RGB.
//!
//! Pipeline per sample:
//!
//! 1. invariant features of `(d, Z)` for the configured mode;
//! 2. positional encoding of the directional features, then a linear layer
//!    to the hidden width (the single query token);
//! 3. the `N` conditioning columns, each mapped linearly to the hidden
//!    width plus a learned per-channel embedding (the key/value tokens);
//! 4. per layer: `h = MHA(h W^Q, T W^K, T W^V) W^O + h W^Q`, then
//!    `h = LN(h) + ReLU(LN(h) W1 + b1) W2 + b2`;
//! 5. `out = h W_out + b_out` (optionally through a shifted softplus).

use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::checkpoint::Checkpoint;
use crate::equivariance::{latent_rows, single_group, tape_features, EquivarianceMode, LatentCode};
use crate::error::{Error, Result};
use crate::geometry::Direction;
use crate::hdr_io::LOG_FLOOR;
use crate::rng::seeded;
use crate::tape::{Gradients, Groups, Real, Tape, Var};

const LN_EPS: f64 = 1e-5;

/// Final nonlinearity on the output head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputActivation {
    #[default]
    Identity,
    /// `softplus(x) + ln(1e-8)`: outputs bounded below by the radiance floor.
    SoftplusShift,
}

impl fmt::Display for OutputActivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutputActivation::Identity => "identity",
            OutputActivation::SoftplusShift => "softplus-shift",
        })
    }
}

impl FromStr for OutputActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(OutputActivation::Identity),
            "softplus-shift" => Ok(OutputActivation::SoftplusShift),
            other => Err(Error::InvalidArgument(format!(
                "unknown output activation {other:?}"
            ))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldConfig {
    /// Latent channels `N` (the code has `D = 3N` scalars).
    pub n: usize,
    pub heads: usize,
    pub layers: usize,
    pub hidden: usize,
    pub pe_frequencies: usize,
    pub mode: EquivarianceMode,
    pub output_activation: OutputActivation,
    /// Use `x + ReLU(...)` instead of `LN(x) + ReLU(...)` in the FFN.
    pub standard_ffn_residual: bool,
}

impl FieldConfig {
    /// Full-size defaults: 8 heads, 6 layers, width 128, 8 frequencies.
    pub fn new(n: usize, mode: EquivarianceMode) -> Self {
        FieldConfig {
            n,
            heads: 8,
            layers: 6,
            hidden: 128,
            pe_frequencies: 8,
            mode,
            output_activation: OutputActivation::Identity,
            standard_ffn_residual: false,
        }
    }

    /// Reduced width and depth for single-core runs.
    pub fn small(n: usize, mode: EquivarianceMode) -> Self {
        FieldConfig {
            heads: 4,
            layers: 2,
            hidden: 32,
            ..Self::new(n, mode)
        }
    }

    /// Width 64, three layers: the preset used for single-CPU training runs
    /// of a few thousand steps.
    pub fn desk(n: usize, mode: EquivarianceMode) -> Self {
        FieldConfig {
            heads: 4,
            layers: 3,
            hidden: 64,
            ..Self::new(n, mode)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0
            || self.layers == 0
            || self.hidden == 0
            || self.heads == 0
            || self.pe_frequencies == 0
        {
            return Err(Error::InvalidArgument(format!(
                "degenerate field config {self:?}"
            )));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "hidden width {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }

    pub fn query_width(&self) -> usize {
        self.mode.dir_feature_len(self.n) * 2 * self.pe_frequencies
    }

    fn write_header(&self, ck: &mut Checkpoint) {
        ck.set("field.mode", self.mode);
        ck.set("field.n", self.n);
        ck.set("field.heads", self.heads);
        ck.set("field.layers", self.layers);
        ck.set("field.hidden", self.hidden);
        ck.set("field.pe_frequencies", self.pe_frequencies);
        ck.set("field.output", self.output_activation);
        ck.set("field.standard_ffn_residual", self.standard_ffn_residual);
    }

    fn read_header(ck: &Checkpoint) -> Result<Self> {
        let cfg = FieldConfig {
            n: ck.parse("field.n")?,
            heads: ck.parse("field.heads")?,
            layers: ck.parse("field.layers")?,
            hidden: ck.parse("field.hidden")?,
            pe_frequencies: ck.parse("field.pe_frequencies")?,
            mode: ck.get("field.mode")?.parse()?,
            output_activation: ck.get("field.output")?.parse()?,
            standard_ffn_residual: ck.parse("field.standard_ffn_residual")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Decoder parameters, stored as an ordered list of named matrices.
#[derive(Debug, Clone)]
pub struct FieldModel<T: Real> {
    config: FieldConfig,
    names: Vec<String>,
    tensors: Vec<Array2<T>>,
    index: HashMap<String, usize>,
}

/// Tape handles for every parameter of a model, in storage order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    /// Handles created by the caller, one per tensor in storage order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        BoundParams { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn layer_name(l: usize, what: &str) -> String {
    format!("layer{l}.{what}")
}

impl<T: Real> FieldModel<T> {
    /// Randomly initialised model. Weight matrices are `N(0, 1/fan_in)`,
    /// biases zero, layer-norm gains one.
    pub fn new(config: FieldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let mut specs: Vec<(String, usize, usize, Init)> = Vec::new();
        let (n, h) = (config.n, config.hidden);
        if let Some((r, c)) = config.mode.frame_shape(n) {
            specs.push(("frame".into(), r, c, Init::Normal(1.0 / (n as f64).sqrt())));
        }
        let qw = config.query_width();
        specs.push(("query.w".into(), qw, h, Init::fan_in(qw)));
        specs.push(("query.b".into(), 1, h, Init::Zero));
        specs.push(("token.w".into(), 3, h, Init::fan_in(3)));
        specs.push(("token.b".into(), 1, h, Init::Zero));
        specs.push(("token.embed".into(), n, h, Init::Normal(1.0)));
        for l in 0..config.layers {
            for w in ["wq", "wk", "wv", "wo"] {
                specs.push((layer_name(l, w), h, h, Init::fan_in(h)));
            }
            specs.push((layer_name(l, "ln.gain"), 1, h, Init::One));
            specs.push((layer_name(l, "ln.bias"), 1, h, Init::Zero));
            specs.push((layer_name(l, "ffn.w1"), h, h, Init::fan_in(h)));
            specs.push((layer_name(l, "ffn.b1"), 1, h, Init::Zero));
            specs.push((layer_name(l, "ffn.w2"), h, h, Init::fan_in(h)));
            specs.push((layer_name(l, "ffn.b2"), 1, h, Init::Zero));
        }
        specs.push(("out.w".into(), h, 3, Init::fan_in(h)));
        specs.push(("out.b".into(), 1, 3, Init::Zero));

        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for (name, r, c, init) in specs {
            tensors.push(init.sample(&mut rng, r, c));
            names.push(name);
        }
        Self::from_parts(config, names, tensors)
    }

    fn from_parts(
        config: FieldConfig,
        names: Vec<String>,
        tensors: Vec<Array2<T>>,
    ) -> Result<Self> {
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Ok(FieldModel {
            config,
            names,
            tensors,
            index,
        })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn n(&self) -> usize {
        self.config.n
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Array2<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Array2<T>] {
        &mut self.tensors
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn param(&self, name: &str) -> Result<&Array2<T>> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name:?}")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Array2<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.tensors[i]),
            None => Err(Error::InvalidArgument(format!(
                "no parameter named {name:?}"
            ))),
        }
    }

    /// Same parameters at another precision.
    pub fn cast<U: Real>(&self) -> FieldModel<U> {
        FieldModel {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| t.mapv(|v| U::lit(v.as_f64())))
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.names.iter().zip(&self.tensors) {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter {name}")));
            }
        }
        Ok(())
    }

    /// Records every parameter on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Result<BoundParams> {
        self.check_finite()?;
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Ok(BoundParams { vars })
    }

    fn var(&self, bound: &BoundParams, name: &str) -> Var {
        bound.vars[self.index[name]]
    }

    /// Log-HDR RGB (`P x 3`) for directions `dirs` (`P x 3`), where sample
    /// `p` is conditioned on row `groups[p]` of `latents` (`G x 3N`,
    /// column-major codes).
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams,
        dirs: &Array2<T>,
        latents: Var,
        groups: &Groups,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (g, width) = tape.shape(latents);
        if width != 3 * cfg.n {
            return Err(Error::Shape(format!(
                "latents are {g}x{width}, model expects {} columns",
                3 * cfg.n
            )));
        }
        let frame = cfg
            .mode
            .frame_shape(cfg.n)
            .map(|_| self.var(params, "frame"));
        let (dir, tokens) = tape_features(tape, cfg.mode, dirs, latents, groups, frame)?;
        self.trunk(tape, params, dir, tokens, groups)
    }

    /// Everything after the invariant features: `dir` is `P x F`, `tokens`
    /// is `(G N) x 3`.
    fn trunk(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams,
        dir: Var,
        tokens: Var,
        groups: &Groups,
    ) -> Result<Var> {
        let cfg = &self.config;
        let g = tape.shape(tokens).0 / cfg.n;
        let pe = tape.positional_encode(dir, cfg.pe_frequencies);
        let q = tape.matmul(pe, self.var(params, "query.w"))?;
        let mut h = tape.add_row(q, self.var(params, "query.b"))?;

        let t = tape.matmul(tokens, self.var(params, "token.w"))?;
        let t = tape.add_row(t, self.var(params, "token.b"))?;
        let tile: Rc<[usize]> = (0..g * cfg.n).map(|i| i % cfg.n).collect();
        let embed = tape.gather_rows(self.var(params, "token.embed"), tile)?;
        let t = tape.add(t, embed)?;

        let eps = T::lit(LN_EPS);
        for l in 0..cfg.layers {
            let p = |w: &str| self.var(params, &layer_name(l, w));
            let q = tape.matmul(h, p("wq"))?;
            let k = tape.matmul(t, p("wk"))?;
            let v = tape.matmul(t, p("wv"))?;
            let att = tape.cross_attention(q, k, v, groups.clone(), cfg.n, cfg.heads)?;
            let o = tape.matmul(att, p("wo"))?;
            let x = tape.add(o, q)?;

            let ln = tape.layer_norm(x, eps);
            let ln = tape.mul_row(ln, p("ln.gain"))?;
            let ln = tape.add_row(ln, p("ln.bias"))?;
            let a = tape.matmul(ln, p("ffn.w1"))?;
            let a = tape.add_row(a, p("ffn.b1"))?;
            let a = tape.relu(a);
            let b = tape.matmul(a, p("ffn.w2"))?;
            let b = tape.add_row(b, p("ffn.b2"))?;
            let skip = if cfg.standard_ffn_residual { x } else { ln };
            h = tape.add(skip, b)?;
        }
        let out = tape.matmul(h, self.var(params, "out.w"))?;
        let out = tape.add_row(out, self.var(params, "out.b"))?;
        Ok(match cfg.output_activation {
            OutputActivation::Identity => out,
            OutputActivation::SoftplusShift => {
                let s = tape.softplus(out);
                tape.add_scalar(s, T::lit(LOG_FLOOR.ln()))
            }
        })
    }

    /// Gradients for every parameter, in storage order.
    pub fn param_gradients(
        &self,
        grads: &Gradients<T>,
        params: &BoundParams,
    ) -> Result<Vec<Array2<T>>> {
        params.vars.iter().map(|&v| grads.wrt(v)).collect()
    }

    /// Evaluates `dirs` (`P x 3`) against per-sample codes.
    ///
    /// Invariant features are formed in double precision before the trunk
    /// runs at `T`, so rotated inputs reach the trunk with matching
    /// rounding.
    pub fn forward_batch(
        &self,
        dirs: &Array2<T>,
        latents: &Array2<T>,
        groups: &Groups,
    ) -> Result<Array2<T>> {
        self.infer(
            &dirs.mapv(|v| v.as_f64()),
            &latents.mapv(|v| v.as_f64()),
            groups,
        )
    }

    /// [`FieldModel::forward_batch`] taking double-precision inputs, so
    /// directions and codes reach the invariant features unrounded.
    pub fn forward_rows(
        &self,
        dirs: &Array2<f64>,
        latents: &Array2<f64>,
        groups: &Groups,
    ) -> Result<Array2<T>> {
        self.infer(dirs, latents, groups)
    }

    fn infer(
        &self,
        dirs: &Array2<f64>,
        latents: &Array2<f64>,
        groups: &Groups,
    ) -> Result<Array2<T>> {
        let cfg = &self.config;
        if latents.ncols() != 3 * cfg.n {
            return Err(Error::Shape(format!(
                "latents are {:?}, model expects {} columns",
                latents.dim(),
                3 * cfg.n
            )));
        }
        let mut wide = Tape::<f64>::new();
        let z = wide.constant(latents.clone());
        let frame = match cfg.mode.frame_shape(cfg.n) {
            Some(_) => Some(wide.constant(self.param("frame")?.mapv(|v| v.as_f64()))),
            None => None,
        };
        let (dir, tokens) = tape_features(&mut wide, cfg.mode, dirs, z, groups, frame)?;

        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false)?;
        let dir = tape.constant(wide.value(dir).mapv(T::lit));
        let tokens = tape.constant(wide.value(tokens).mapv(T::lit));
        let out = self.trunk(&mut tape, &params, dir, tokens, groups)?;
        Ok(tape.value(out).clone())
    }

    /// Log-HDR RGB at each direction for one latent code, evaluated in
    /// chunks to bound memory.
    pub fn decode(&self, dirs: &[Direction], z: &LatentCode) -> Result<Vec<[f64; 3]>> {
        const CHUNK: usize = 4096;
        let latents = latent_rows(std::slice::from_ref(z))?;
        let mut out = Vec::with_capacity(dirs.len());
        for chunk in dirs.chunks(CHUNK) {
            let d = direction_rows::<f64>(chunk);
            let values = self.infer(&d, &latents, &single_group(chunk.len()))?;
            out.extend(
                values
                    .rows()
                    .into_iter()
                    .map(|r| [r[0].as_f64(), r[1].as_f64(), r[2].as_f64()]),
            );
        }
        Ok(out)
    }

    /// Single-direction evaluation.
    pub fn eval(&self, d: &Direction, z: &LatentCode) -> Result<[f64; 3]> {
        Ok(self.decode(std::slice::from_ref(d), z)?[0])
    }

    /// Writes the config header and parameters (prefixed `field.`).
    pub fn write_checkpoint(&self, ck: &mut Checkpoint) {
        self.config.write_header(ck);
        for (name, t) in self.names.iter().zip(&self.tensors) {
            ck.insert_array(&format!("field.{name}"), t);
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = FieldConfig::read_header(ck)?;
        let template = FieldModel::<T>::new(config.clone(), 0)?;
        let mut tensors = Vec::with_capacity(template.names.len());
        for (name, t) in template.names.iter().zip(&template.tensors) {
            let loaded: Array2<T> = ck.array(&format!("field.{name}"))?;
            if loaded.dim() != t.dim() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    loaded.dim(),
                    t.dim()
                )));
            }
            tensors.push(loaded);
        }
        let model = Self::from_parts(config, template.names, tensors)?;
        model.check_finite()?;
        Ok(model)
    }
}

/// Directions as `P x 3` rows.
pub fn direction_rows<T: Real>(dirs: &[Direction]) -> Array2<T> {
    Array2::from_shape_fn((dirs.len(), 3), |(p, c)| T::lit(dirs[p].to_array()[c]))
}

enum Init {
    Zero,
    One,
    Normal(f64),
}

impl Init {
    fn fan_in(fan: usize) -> Self {
        Init::Normal(1.0 / (fan as f64).sqrt())
    }

    fn sample<T: Real, R: Rng>(&self, rng: &mut R, rows: usize, cols: usize) -> Array2<T> {
        match self {
            Init::Zero => Array2::zeros((rows, cols)),
            Init::One => Array2::from_elem((rows, cols), T::one()),
            Init::Normal(s) => Array2::from_shape_simple_fn((rows, cols), || {
                T::lit(rng.sample::<f64, _>(StandardNormal) * s)
            }),
        }
    }
}
