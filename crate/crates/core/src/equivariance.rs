//! Latent codes and the rotation-invariant inputs fed to the field.
//!
//! A latent code is a `3 x N` matrix of ordered 3D vectors. Wherever codes
//! are stored flat (latent banks, tape rows) the layout is column-major:
//! entry `(c, n)` lives at index `3 n + c`.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array1, Array2, ArrayView2};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::geometry::{rotation_a_to_ex, Direction, Rotation};
use crate::tape::{Groups, Real, Tape, Var};

/// Rotation group the field is built to respect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum EquivarianceMode {
    /// Rotations about the vertical axis `e_y`.
    #[default]
    So2,
    /// Arbitrary rotations.
    So3,
    /// No invariance; raw directions and latents.
    None,
}

impl EquivarianceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EquivarianceMode::So2 => "so2",
            EquivarianceMode::So3 => "so3",
            EquivarianceMode::None => "none",
        }
    }

    /// Width of the per-direction feature vector for `n` latent channels.
    pub fn dir_feature_len(self, n: usize) -> usize {
        match self {
            EquivarianceMode::So2 => n + 2,
            EquivarianceMode::So3 => n,
            EquivarianceMode::None => 3,
        }
    }

    /// Shape of the learned frame weights, if the mode has any.
    pub fn frame_shape(self, n: usize) -> Option<(usize, usize)> {
        match self {
            EquivarianceMode::So2 => Some((n, 2)),
            EquivarianceMode::So3 => Some((n, 3)),
            EquivarianceMode::None => None,
        }
    }
}

impl fmt::Display for EquivarianceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EquivarianceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "so2" => Ok(EquivarianceMode::So2),
            "so3" => Ok(EquivarianceMode::So3),
            "none" => Ok(EquivarianceMode::None),
            other => Err(Error::InvalidArgument(format!(
                "unknown equivariance mode {other:?} (expected so2, so3 or none)"
            ))),
        }
    }
}

/// `N` ordered 3D vectors stored as a `3 x N` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    z: Array2<f64>,
}

impl LatentCode {
    /// Stores the `3 x N` matrix under `name`.
    pub fn write_checkpoint(&self, ck: &mut Checkpoint, name: &str) {
        ck.insert_array(name, self.matrix());
    }

    pub fn from_checkpoint(ck: &Checkpoint, name: &str) -> Result<Self> {
        Self::new(ck.array(name)?)
    }

    pub fn new(z: Array2<f64>) -> Result<Self> {
        if z.nrows() != 3 || z.ncols() == 0 {
            return Err(Error::Shape(format!(
                "latent code must be 3 x N, got {:?}",
                z.dim()
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent code".into()));
        }
        Ok(LatentCode { z })
    }

    pub fn zeros(n: usize) -> Self {
        LatentCode {
            z: Array2::zeros((3, n.max(1))),
        }
    }

    /// Rebuilds a code from its column-major vectorisation.
    pub fn from_vec(v: &[f64]) -> Result<Self> {
        if v.is_empty() || v.len() % 3 != 0 {
            return Err(Error::Shape(format!(
                "vectorised latent of length {}",
                v.len()
            )));
        }
        let n = v.len() / 3;
        Self::new(Array2::from_shape_fn((3, n), |(c, j)| v[3 * j + c]))
    }

    /// Column-major vectorisation, the inverse of [`LatentCode::from_vec`].
    pub fn to_vec(&self) -> Vec<f64> {
        let n = self.n();
        (0..3 * n).map(|i| self.z[(i % 3, i / 3)]).collect()
    }

    /// Number of channels `N`.
    pub fn n(&self) -> usize {
        self.z.ncols()
    }

    /// Total scalar count `D = 3N`.
    pub fn dim(&self) -> usize {
        3 * self.n()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.z
    }

    pub fn column(&self, j: usize) -> Vector3<f64> {
        Vector3::new(self.z[(0, j)], self.z[(1, j)], self.z[(2, j)])
    }

    pub fn column_norms(&self) -> Vec<f64> {
        (0..self.n()).map(|j| self.column(j).norm()).collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.z.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `R Z`, rotating every column.
    pub fn rotated(&self, r: &Rotation) -> LatentCode {
        let m = r.matrix();
        let mut z = self.z.clone();
        for j in 0..self.n() {
            let v = m * self.column(j);
            for c in 0..3 {
                z[(c, j)] = v[c];
            }
        }
        LatentCode { z }
    }

    /// Element-wise `(1 - t) self + t other`.
    pub fn lerp(&self, other: &LatentCode, t: f64) -> Result<LatentCode> {
        if self.n() != other.n() {
            return Err(Error::Shape(format!(
                "latents with {} and {} channels",
                self.n(),
                other.n()
            )));
        }
        LatentCode::new(&self.z * (1.0 - t) + &other.z * t)
    }
}

/// `R Z` after checking that `r` is a proper rotation.
pub fn rotate_latent(z: &LatentCode, r: &Matrix3<f64>) -> Result<LatentCode> {
    Ok(z.rotated(&Rotation::from_matrix(*r)?))
}

/// Features handed to the field for one direction.
#[derive(Debug, Clone, PartialEq)]
pub struct InvariantInputs {
    pub dir_features: Vec<f64>,
    /// `3 x N`, one conditioning token per column.
    pub cond_features: Array2<f64>,
}

/// Vector-neuron invariant layer: with the frame `F = Z W_f`, returns `F^T Z`.
///
/// `z` is `c x N` and `wf` is `N x c` for `c` in {2, 3}.
pub fn vn_invariant(z: &ArrayView2<f64>, wf: &ArrayView2<f64>) -> Result<Array2<f64>> {
    if wf.nrows() != z.ncols() || wf.ncols() != z.nrows() {
        return Err(Error::Shape(format!(
            "vn_invariant with Z {:?} and W_f {:?}",
            z.dim(),
            wf.dim()
        )));
    }
    let frame = z.dot(wf);
    Ok(frame.t().dot(z))
}

fn direction_column(d: &Direction) -> Array1<f64> {
    Array1::from(d.to_array().to_vec())
}

fn check_frame(wf: &ArrayView2<f64>, n: usize, comps: usize) -> Result<()> {
    if wf.dim() != (n, comps) {
        return Err(Error::Shape(format!(
            "frame weights {:?}, expected ({n}, {comps})",
            wf.dim()
        )));
    }
    Ok(())
}

/// `d' = Z^T d` and `Z' = VN-In(Z)`.
pub fn so3_invariant_inputs(
    d: &Direction,
    z: &LatentCode,
    wf: &ArrayView2<f64>,
) -> Result<InvariantInputs> {
    check_frame(wf, z.n(), 3)?;
    let dir = z.matrix().t().dot(&direction_column(d));
    Ok(InvariantInputs {
        dir_features: dir.to_vec(),
        cond_features: vn_invariant(&z.matrix().view(), wf)?,
    })
}

/// Invariants under rotations about `axis`.
///
/// Directional part: `(a.d, <d_perp, Z_perp>, |d_perp|)`, where `_perp`
/// denotes in-plane coordinates of the rejection from `a`. Conditioning
/// part: the projections `a.Z` stacked above `VN-In(Z_perp)`.
pub fn so2_invariant_inputs(
    d: &Direction,
    z: &LatentCode,
    axis: &Direction,
    wf: &ArrayView2<f64>,
) -> Result<InvariantInputs> {
    let n = z.n();
    check_frame(wf, n, 2)?;
    let r = rotation_a_to_ex(axis);
    let dr = r.apply(d.vector());
    let mut zr = Array2::zeros((3, n));
    for j in 0..n {
        let v = r.apply(&z.column(j));
        for c in 0..3 {
            zr[(c, j)] = v[c];
        }
    }
    let perp_z = zr.slice(ndarray::s![1..3, ..]);
    let mut dir = Vec::with_capacity(n + 2);
    dir.push(dr.x);
    for j in 0..n {
        dir.push(dr.y * perp_z[(0, j)] + dr.z * perp_z[(1, j)]);
    }
    dir.push((dr.y * dr.y + dr.z * dr.z).sqrt());
    let vn = vn_invariant(&perp_z, wf)?;
    let mut cond = Array2::zeros((3, n));
    for j in 0..n {
        cond[(0, j)] = zr[(0, j)];
        cond[(1, j)] = vn[(0, j)];
        cond[(2, j)] = vn[(1, j)];
    }
    Ok(InvariantInputs {
        dir_features: dir,
        cond_features: cond,
    })
}

/// Raw inputs for the non-equivariant ablation.
pub fn raw_inputs(d: &Direction, z: &LatentCode) -> InvariantInputs {
    InvariantInputs {
        dir_features: d.to_array().to_vec(),
        cond_features: z.matrix().clone(),
    }
}

/// Dispatches on `mode`; SO(2) uses the vertical axis `e_y`.
pub fn invariant_inputs(
    mode: EquivarianceMode,
    d: &Direction,
    z: &LatentCode,
    wf: Option<&ArrayView2<f64>>,
) -> Result<InvariantInputs> {
    let need = || Error::InvalidArgument(format!("{mode} mode needs frame weights"));
    match mode {
        EquivarianceMode::So2 => {
            so2_invariant_inputs(d, z, &Direction::e_y(), wf.ok_or_else(need)?)
        }
        EquivarianceMode::So3 => so3_invariant_inputs(d, z, wf.ok_or_else(need)?),
        EquivarianceMode::None => Ok(raw_inputs(d, z)),
    }
}

/// Constant operators splitting flattened latents into the vertical
/// projection and the in-plane coordinates about `e_y`.
struct VerticalSplit<T> {
    proj: Array2<T>,
    perp: Array2<T>,
    proj_back: Array2<T>,
    perp_back: Array2<T>,
    perp_dir: Array2<T>,
}

impl<T: Real> VerticalSplit<T> {
    fn new(n: usize) -> Self {
        let r = rotation_a_to_ex(&Direction::e_y()).to_rows();
        let mut proj = Array2::zeros((3 * n, n));
        let mut perp = Array2::zeros((3 * n, 2 * n));
        let mut proj_back = Array2::zeros((n, 3 * n));
        let mut perp_back = Array2::zeros((2 * n, 3 * n));
        for j in 0..n {
            for c in 0..3 {
                proj[(3 * j + c, j)] = T::lit(r[0][c]);
                for k in 0..2 {
                    perp[(3 * j + c, 2 * j + k)] = T::lit(r[1 + k][c]);
                }
            }
            proj_back[(j, 3 * j)] = T::one();
            perp_back[(2 * j, 3 * j + 1)] = T::one();
            perp_back[(2 * j + 1, 3 * j + 2)] = T::one();
        }
        let mut perp_dir = Array2::zeros((3, 2));
        for c in 0..3 {
            for k in 0..2 {
                perp_dir[(c, k)] = T::lit(r[1 + k][c]);
            }
        }
        VerticalSplit {
            proj,
            perp,
            proj_back,
            perp_back,
            perp_dir,
        }
    }
}

/// Batched invariant features on a tape.
///
/// `latents` is `G x 3N` (one flattened code per row); `dirs` is `P x 3`
/// and `groups[p]` names the code used by sample `p`. Returns the
/// `P x F` directional features and the `(G N) x 3` conditioning tokens.
pub(crate) fn tape_features<T: Real>(
    tape: &mut Tape<T>,
    mode: EquivarianceMode,
    dirs: &Array2<T>,
    latents: Var,
    groups: &Groups,
    frame: Option<Var>,
) -> Result<(Var, Var)> {
    let (g, width) = tape.shape(latents);
    if width % 3 != 0 || dirs.ncols() != 3 || dirs.nrows() != groups.len() {
        return Err(Error::Shape(format!(
            "features for latents {:?} and directions {:?}",
            (g, width),
            dirs.dim()
        )));
    }
    let n = width / 3;
    let need = || Error::InvalidArgument(format!("{mode} mode needs frame weights"));
    match mode {
        EquivarianceMode::None => {
            let d = tape.constant(dirs.clone());
            let tokens = tape.reshape(latents, g * n, 3)?;
            Ok((d, tokens))
        }
        EquivarianceMode::So3 => {
            let d = tape.constant(dirs.clone());
            let dir = tape.group_contract(latents, d, groups.clone(), 3)?;
            let cond = tape.vn_invariant(latents, frame.ok_or_else(need)?, 3)?;
            let tokens = tape.reshape(cond, g * n, 3)?;
            Ok((dir, tokens))
        }
        EquivarianceMode::So2 => {
            let split = VerticalSplit::<T>::new(n);
            // Direction-only pieces are constants.
            let perp_d = dirs.dot(&split.perp_dir);
            let mut lead = Array2::zeros((dirs.nrows(), 1));
            let mut tail = Array2::zeros((dirs.nrows(), 1));
            for p in 0..dirs.nrows() {
                lead[(p, 0)] = dirs[(p, 1)];
                tail[(p, 0)] =
                    (perp_d[(p, 0)] * perp_d[(p, 0)] + perp_d[(p, 1)] * perp_d[(p, 1)]).sqrt();
            }
            let perp_d = tape.constant(perp_d);
            let lead = tape.constant(lead);
            let tail = tape.constant(tail);

            let proj_m = tape.constant(split.proj);
            let perp_m = tape.constant(split.perp);
            let proj_z = tape.matmul(latents, proj_m)?;
            let perp_z = tape.matmul(latents, perp_m)?;
            let contract = tape.group_contract(perp_z, perp_d, groups.clone(), 2)?;
            let dir = tape.concat_cols(&[lead, contract, tail])?;

            let vn = tape.vn_invariant(perp_z, frame.ok_or_else(need)?, 2)?;
            let proj_back = tape.constant(split.proj_back);
            let perp_back = tape.constant(split.perp_back);
            let a = tape.matmul(proj_z, proj_back)?;
            let b = tape.matmul(vn, perp_back)?;
            let cond = tape.add(a, b)?;
            let tokens = tape.reshape(cond, g * n, 3)?;
            Ok((dir, tokens))
        }
    }
}

/// Row-per-code flattening of `codes` (column-major within each row).
pub fn latent_rows(codes: &[LatentCode]) -> Result<Array2<f64>> {
    let n = codes.first().map(|c| c.n()).unwrap_or(0);
    if n == 0 || codes.iter().any(|c| c.n() != n) {
        return Err(Error::Shape(
            "latent codes must share a non-zero channel count".into(),
        ));
    }
    let mut out = Array2::zeros((codes.len(), 3 * n));
    for (i, c) in codes.iter().enumerate() {
        for (k, v) in c.to_vec().into_iter().enumerate() {
            out[(i, k)] = v;
        }
    }
    Ok(out)
}

/// Group index list shared by every sample (`count` samples of code 0).
pub(crate) fn single_group(count: usize) -> Groups {
    Rc::from(vec![0usize; count])
}
