//! Flat-buffer storage for path-indexed fields and the solver outputs built on them.

use crate::grid::Grids;
use crate::spec::Dims;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Values indexed by `[step][path][component]`, stored contiguously in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct PathField {
    steps: usize,
    paths: usize,
    width: usize,
    data: Vec<f64>,
}

impl PathField {
    pub fn zeros(steps: usize, paths: usize, width: usize) -> Self {
        Self { steps, paths, width, data: vec![0.0; steps * paths * width] }
    }

    pub fn from_vec(steps: usize, paths: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), steps * paths * width, "PathField buffer has wrong length");
        Self { steps, paths, width, data }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
    pub fn paths(&self) -> usize {
        self.paths
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, i: usize, p: usize) -> usize {
        (i * self.paths + p) * self.width
    }

    #[inline]
    pub fn at(&self, i: usize, p: usize) -> &[f64] {
        let k = self.index(i, p);
        &self.data[k..k + self.width]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, p: usize) -> &mut [f64] {
        let k = self.index(i, p);
        let w = self.width;
        &mut self.data[k..k + w]
    }

    /// All paths at step `i`, `paths × width` values.
    #[inline]
    pub fn step(&self, i: usize) -> &[f64] {
        let len = self.paths * self.width;
        &self.data[i * len..(i + 1) * len]
    }

    #[inline]
    pub fn step_mut(&mut self, i: usize) -> &mut [f64] {
        let len = self.paths * self.width;
        &mut self.data[i * len..(i + 1) * len]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.steps == other.steps && self.paths == other.paths && self.width == other.width
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert!(self.same_shape(other), "PathField shapes differ");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Self { data, ..*self }
    }

    pub fn scale(&self, lambda: f64) -> Self {
        Self { data: self.data.iter().map(|v| lambda * v).collect(), ..*self }
    }

    /// Mean over paths at step `i`, one value per component.
    pub fn mean_at(&self, i: usize) -> Vec<f64> {
        let mut acc = vec![0.0; self.width];
        for p in 0..self.paths {
            for (a, v) in acc.iter_mut().zip(self.at(i, p)) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= self.paths as f64);
        acc
    }
}

/// Values indexed by `[slice][step][path][component]`, one [`PathField`]-shaped
/// block per parameter node `s_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct FamilyField {
    slices: usize,
    steps: usize,
    paths: usize,
    width: usize,
    data: Vec<f64>,
}

impl FamilyField {
    pub fn zeros(slices: usize, steps: usize, paths: usize, width: usize) -> Self {
        Self { slices, steps, paths, width, data: vec![0.0; slices * steps * paths * width] }
    }

    pub fn from_vec(slices: usize, steps: usize, paths: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), slices * steps * paths * width, "FamilyField buffer has wrong length");
        Self { slices, steps, paths, width, data }
    }

    pub fn slices(&self) -> usize {
        self.slices
    }
    pub fn steps(&self) -> usize {
        self.steps
    }
    pub fn paths(&self) -> usize {
        self.paths
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn slice_len(&self) -> usize {
        self.steps * self.paths * self.width
    }

    #[inline]
    pub fn index(&self, j: usize, i: usize, p: usize) -> usize {
        ((j * self.steps + i) * self.paths + p) * self.width
    }

    #[inline]
    pub fn at(&self, j: usize, i: usize, p: usize) -> &[f64] {
        let k = self.index(j, i, p);
        &self.data[k..k + self.width]
    }

    #[inline]
    pub fn at_mut(&mut self, j: usize, i: usize, p: usize) -> &mut [f64] {
        let k = self.index(j, i, p);
        let w = self.width;
        &mut self.data[k..k + w]
    }

    /// All paths of slice `j` at step `i`.
    #[inline]
    pub fn step(&self, j: usize, i: usize) -> &[f64] {
        let len = self.paths * self.width;
        let k = (j * self.steps + i) * len;
        &self.data[k..k + len]
    }

    /// Slice `j` as a [`PathField`] (copy).
    pub fn slice(&self, j: usize) -> PathField {
        let len = self.slice_len();
        PathField::from_vec(self.steps, self.paths, self.width, self.data[j * len..(j + 1) * len].to_vec())
    }

    /// Diagonal read `out[i] = self[j = i][i]`; requires `slices == steps`.
    pub fn diagonal(&self) -> PathField {
        assert_eq!(self.slices, self.steps, "diagonal needs one slice per time node");
        let mut out = PathField::zeros(self.steps, self.paths, self.width);
        for i in 0..self.steps {
            out.step_mut(i).copy_from_slice(self.step(i, i));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!(self.data.len(), other.data.len(), "FamilyField shapes differ");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Self { data, ..*self }
    }

    pub fn scale(&self, lambda: f64) -> Self {
        Self { data: self.data.iter().map(|v| lambda * v).collect(), ..*self }
    }
}

/// Per-step conditioned martingale residuals of each solved equation.
///
/// Each entry is the root-mean-square over paths of the regression of
/// `value_{i+1} + Δt·generator − value_i − v·dX` on the state at `t_i`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OrthoResiduals {
    /// Diagonal equation, per step.
    pub diagonal: Vec<f64>,
    /// Worst slice of the family, per step.
    pub family: Vec<f64>,
    /// Worst slice of the derivative family, per step (full solver only).
    pub derivative: Option<Vec<f64>>,
}

impl OrthoResiduals {
    pub fn max(&self) -> f64 {
        let it = self.diagonal.iter().chain(&self.family).chain(self.derivative.iter().flatten());
        it.fold(0.0, |a: f64, &b| a.max(b))
    }

    /// Root mean square over every recorded entry.
    pub fn rms(&self) -> f64 {
        let v: Vec<f64> = self.diagonal.iter().chain(&self.family).chain(self.derivative.iter().flatten()).copied().collect();
        if v.is_empty() {
            0.0
        } else {
            (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
        }
    }
}

/// Which solver produced a field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Full,
    Simplified,
}

/// Solution of the coupled system: the families `U^s`, `V^s`, the derivative
/// families `∂U^s`, `∂V^s` and the diagonal equation's pair `(𝒴, 𝒵)`.
#[derive(Debug, Clone)]
pub struct FieldSolution {
    pub grids: Grids,
    pub dims: Dims,
    pub n_paths: usize,
    pub solver: SolverKind,
    pub u: Arc<FamilyField>,
    pub v: Arc<FamilyField>,
    pub du: Option<FamilyField>,
    pub dv: Option<FamilyField>,
    pub ydiag: PathField,
    pub zdiag: PathField,
    /// `U_t^t` read off the family.
    pub udiag: PathField,
    /// `∂U_t^t`; read off the derivative family, or an `s`-difference of the
    /// family for the simplified solver.
    pub du_diag: PathField,
    /// `V_t^t` assembled from the antiderivative identity (full solver only).
    pub vdiag_reconstructed: Option<PathField>,
    pub ortho_residuals: OrthoResiduals,
    pub picard_trace: Vec<f64>,
    pub distance: f64,
    pub tol: f64,
    pub converged: bool,
    /// `‖𝒴 − diag U‖` in the discrete 𝕊² norm.
    pub ident_y: f64,
    /// `‖𝒵 − V_t^t‖` in the discrete ℍ² norm.
    pub ident_z: f64,
}

impl FieldSolution {
    pub fn iterations(&self) -> usize {
        self.picard_trace.len()
    }
}

/// Bookkeeping attached to an extracted BSVIE solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub backend: String,
    pub picard_tol: f64,
    pub picard_distance: f64,
    pub iterations: usize,
    pub ident_y: f64,
    pub ident_z: f64,
}

/// The type-I BSVIE solution `(Y_t^s, Z_t^s)` with its diagonals.
#[derive(Debug, Clone)]
pub struct BsvieSolution {
    pub grids: Grids,
    pub dims: Dims,
    pub y: Arc<FamilyField>,
    pub z: Arc<FamilyField>,
    pub ydiag: PathField,
    pub zdiag: PathField,
    pub provenance: Provenance,
}
