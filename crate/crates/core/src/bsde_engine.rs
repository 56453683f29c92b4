//! Regression Monte Carlo backward induction for one parameterised BSDE slice.
//!
//! Conditional expectations given `X_{t_i}` are least-squares projections onto
//! polynomials of total degree `≤ p` in the (normalised) state. The projector
//! of every time step depends only on the ensemble, so it is factorised once
//! (thin SVD of the design matrix) and shared by every slice.

use crate::error::{Error, Result};
use crate::field::PathField;
use crate::mc_forward::PathEnsemble;
use crate::spec::ProblemSpec;
use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

/// Updates larger than this abort the slice.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Polynomial basis of total degree `≤ degree` over the normalised features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RegressionBasis {
    pub degree: usize,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        Self { degree: 2 }
    }
}

impl RegressionBasis {
    pub fn polynomial(degree: usize) -> Self {
        Self { degree }
    }

    /// Number of basis functions, `C(n + p, p)`.
    pub fn size(&self, n_features: usize) -> usize {
        let (n, p) = (n_features, self.degree);
        (1..=p).fold(1usize, |acc, k| acc * (n + k) / k)
    }

    /// Exponent vectors in graded order, constant first.
    pub fn exponents(&self, n_features: usize) -> Vec<Vec<u32>> {
        (0..=self.degree as u32).flat_map(|total| compositions(total, n_features)).collect()
    }
}

/// All exponent vectors of length `n` summing to `total`.
fn compositions(total: u32, n: usize) -> Vec<Vec<u32>> {
    match n {
        0 => if total == 0 { vec![vec![]] } else { vec![] },
        1 => vec![vec![total]],
        _ => (0..=total)
            .rev()
            .flat_map(|e| {
                compositions(total - e, n - 1).into_iter().map(move |mut rest| {
                    rest.insert(0, e);
                    rest
                })
            })
            .collect(),
    }
}

/// Orthogonal projector onto the span of the basis evaluated at fixed features.
#[derive(Debug, Clone)]
pub struct Projector {
    rows: usize,
    rank: usize,
    /// Orthonormal basis of the column space, `rows × rank`, row-major.
    q: Vec<f64>,
}

impl Projector {
    /// Factorise the design matrix for `features` (`rows × n_features`, row-major).
    pub fn fit(features: &[f64], n_features: usize, basis: RegressionBasis) -> Result<Self> {
        let rows = if n_features == 0 { 0 } else { features.len() / n_features };
        let cols = basis.size(n_features);
        if rows < cols {
            return Err(Error::Config(format!(
                "regression needs at least {cols} samples for degree {} in {n_features} features, got {rows}",
                basis.degree
            )));
        }
        for c in 0..n_features {
            if (0..rows).any(|r| !features[r * n_features + c].is_finite()) {
                return Err(Error::Data { column: c, reason: "non-finite feature".into() });
            }
        }
        let design = design_matrix(features, rows, n_features, basis);
        let a = DMatrix::from_row_slice(rows, cols, &design);
        let svd = a.svd(true, false);
        let u = svd.u.ok_or_else(|| Error::Numeric("SVD did not return U".into()))?;
        let s_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
        let cutoff = s_max * rows.max(cols) as f64 * f64::EPSILON;
        let keep: Vec<usize> = (0..svd.singular_values.len()).filter(|&k| svd.singular_values[k] > cutoff).collect();
        let rank = keep.len();
        let mut q = vec![0.0; rows * rank];
        for r in 0..rows {
            for (c, &k) in keep.iter().enumerate() {
                q[r * rank + c] = u[(r, k)];
            }
        }
        Ok(Self { rows, rank, q })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Fitted values of every column of `targets` (`rows × cols`, row-major).
    pub fn project(&self, targets: &[f64], cols: usize, out: &mut [f64]) {
        debug_assert_eq!(targets.len(), self.rows * cols);
        let rank = self.rank;
        let mut coef = vec![0.0; rank * cols];
        for r in 0..self.rows {
            let qr = &self.q[r * rank..(r + 1) * rank];
            let tr = &targets[r * cols..(r + 1) * cols];
            for (k, &qk) in qr.iter().enumerate() {
                let ck = &mut coef[k * cols..(k + 1) * cols];
                for (c, &t) in ck.iter_mut().zip(tr) {
                    *c += qk * t;
                }
            }
        }
        for r in 0..self.rows {
            let qr = &self.q[r * rank..(r + 1) * rank];
            let or = &mut out[r * cols..(r + 1) * cols];
            or.iter_mut().for_each(|o| *o = 0.0);
            for (k, &qk) in qr.iter().enumerate() {
                let ck = &coef[k * cols..(k + 1) * cols];
                for (o, &c) in or.iter_mut().zip(ck) {
                    *o += qk * c;
                }
            }
        }
    }
}

fn design_matrix(features: &[f64], rows: usize, n: usize, basis: RegressionBasis) -> Vec<f64> {
    let mut scaled = vec![0.0; rows * n];
    for c in 0..n {
        let (lo, hi) = (0..rows)
            .map(|r| features[r * n + c])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        let range = hi - lo;
        let degenerate = range <= 1e-12 * hi.abs().max(lo.abs()).max(1.0);
        for r in 0..rows {
            scaled[r * n + c] = if degenerate { 0.0 } else { 2.0 * (features[r * n + c] - lo) / range - 1.0 };
        }
    }
    let exps = basis.exponents(n);
    let cols = exps.len();
    let mut design = vec![0.0; rows * cols];
    for r in 0..rows {
        let z = &scaled[r * n..(r + 1) * n];
        for (c, e) in exps.iter().enumerate() {
            design[r * cols + c] = e.iter().zip(z).map(|(&k, &v)| v.powi(k as i32)).product();
        }
    }
    design
}

/// Least-squares fitted values of each target column on the basis at `features`.
///
/// `features` is `rows × n_features`, `targets` is `rows × q`, both row-major.
pub fn regress(features: &[f64], n_features: usize, targets: &[f64], q: usize, basis: RegressionBasis) -> Result<Vec<f64>> {
    let proj = Projector::fit(features, n_features, basis)?;
    if targets.len() != proj.rows() * q {
        return Err(Error::Shape {
            component: "targets".into(),
            expected: format!("{} values", proj.rows() * q),
            got: targets.len().to_string(),
        });
    }
    for c in 0..q {
        if (0..proj.rows()).any(|r| !targets[r * q + c].is_finite()) {
            return Err(Error::Data { column: c, reason: "non-finite target".into() });
        }
    }
    let mut out = vec![0.0; targets.len()];
    proj.project(targets, q, &mut out);
    Ok(out)
}

/// `σ(t_i, X_{t_i})` for every step and path, `[step][path][n×m]`.
#[derive(Debug, Clone)]
pub struct SigmaTable {
    steps: usize,
    paths: usize,
    n: usize,
    m: usize,
    data: Vec<f64>,
}

impl SigmaTable {
    pub fn new(ens: &PathEnsemble, spec: &ProblemSpec) -> Result<Self> {
        let dims = spec.dims();
        let (n, m) = (dims.n, dims.m);
        let grid = ens.grid();
        let steps = grid.steps() + 1;
        let paths = ens.n_paths();
        let mut data = vec![0.0; steps * paths * n * m];
        data.par_chunks_mut(paths * n * m).enumerate().try_for_each(|(i, chunk)| -> Result<()> {
            for p in 0..paths {
                let out = &mut chunk[p * n * m..(p + 1) * n * m];
                spec.sigma().eval(grid.node(i), ens.state(p, i), out);
                if out.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite sigma at path {p}, step {i}")));
                }
            }
            Ok(())
        })?;
        Ok(Self { steps, paths, n, m, data })
    }

    #[inline]
    pub fn at(&self, i: usize, p: usize) -> &[f64] {
        let k = (i * self.paths + p) * self.n * self.m;
        &self.data[k..k + self.n * self.m]
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.n, self.m)
    }

    /// `‖σᵀ z‖²` for `z` of shape `n × d`.
    #[inline]
    pub fn weighted_sq(&self, i: usize, p: usize, z: &[f64], d: usize) -> f64 {
        let sig = self.at(i, p);
        let (n, m) = (self.n, self.m);
        let mut acc = 0.0;
        for k in 0..m {
            for c in 0..d {
                let v: f64 = (0..n).map(|a| sig[a * m + k] * z[a * d + c]).sum();
                acc += v * v;
            }
        }
        acc
    }
}

/// Pseudo-inverse of a symmetric positive semi-definite `n × n` matrix.
pub fn pinv_psd(mat: &[f64], n: usize) -> Result<Vec<f64>> {
    if mat.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("pseudo-inverse of a non-finite matrix".into()));
    }
    if n == 1 {
        let a = mat[0];
        return Ok(vec![if a > f64::MIN_POSITIVE { 1.0 / a } else { 0.0 }]);
    }
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(n, n, mat));
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let cutoff = lmax * n as f64 * f64::EPSILON;
    let mut out = vec![0.0; n * n];
    for (k, &l) in eig.eigenvalues.iter().enumerate() {
        if l > cutoff && l > 0.0 {
            for a in 0..n {
                for b in 0..n {
                    out[a * n + b] += eig.eigenvectors[(a, k)] * eig.eigenvectors[(b, k)] / l;
                }
            }
        }
    }
    Ok(out)
}

/// One point of a backward sweep, handed to generators.
#[derive(Debug, Clone, Copy)]
pub struct Point<'a> {
    pub i: usize,
    pub p: usize,
    pub t: f64,
    pub x: &'a [f64],
    /// The slice's own value (the regression predictor at `t_i`).
    pub y: &'a [f64],
    /// The slice's own martingale integrand at `t_i`, `n × d`.
    pub z: &'a [f64],
}

/// Generator of a slice; writes `d` values. Drift terms `zᵀσb` are added by
/// the engine and must not be included.
pub type SliceGenerator<'g> = dyn Fn(&Point<'_>, &mut [f64]) + Sync + 'g;

/// Output of [`Engine::solve_slice`].
#[derive(Debug, Clone)]
pub struct SliceSolution {
    /// Values, `[M+1][paths][d]`.
    pub u: PathField,
    /// Integrands, `[M+1][paths][n×d]`; the last step is zero.
    pub v: PathField,
    /// Regression predictors `E[u_{i+1} | X_{t_i}]` at which the generator was
    /// evaluated; the last step holds the terminal value.
    pub u_pred: PathField,
    /// Conditioned martingale residual per step.
    pub ortho: Vec<f64>,
}

/// Buffers a slice solve writes into; each must be sized for `[M+1][paths][·]`.
pub struct SliceBuffers<'b> {
    pub u: &'b mut [f64],
    pub v: &'b mut [f64],
    pub u_pred: &'b mut [f64],
    pub ortho: Option<&'b mut Vec<f64>>,
}

/// Ensemble-dependent state shared by every slice solve: per-step projectors,
/// volatility, `pinv(σσᵀ)` and the drift loading `σb`.
pub struct Engine<'a> {
    ens: &'a PathEnsemble,
    spec: &'a ProblemSpec,
    basis: RegressionBasis,
    projectors: Vec<Projector>,
    sigma: SigmaTable,
    /// `[step][path][n×n]` for steps `0..M`.
    vol_pinv: Vec<f64>,
    /// `[step][path][n]` for steps `0..=M`.
    sigma_b: Option<Vec<f64>>,
}

impl<'a> Engine<'a> {
    pub fn new(ens: &'a PathEnsemble, spec: &'a ProblemSpec, basis: RegressionBasis) -> Result<Self> {
        let dims = spec.dims();
        if ens.dim() != dims.n {
            return Err(Error::Shape {
                component: "ensemble".into(),
                expected: format!("state dimension {}", dims.n),
                got: ens.dim().to_string(),
            });
        }
        let (n, m) = (dims.n, dims.m);
        let grid = ens.grid();
        let steps = grid.steps();
        let paths = ens.n_paths();
        let projectors = (0..steps)
            .into_par_iter()
            .map(|i| Projector::fit(&ens.states_at(i), n, basis))
            .collect::<Result<Vec<_>>>()?;
        let sigma = SigmaTable::new(ens, spec)?;
        let mut vol_pinv = vec![0.0; steps * paths * n * n];
        vol_pinv.par_chunks_mut(paths * n * n).enumerate().try_for_each(|(i, chunk)| -> Result<()> {
            let mut ss = vec![0.0; n * n];
            for p in 0..paths {
                let sig = sigma.at(i, p);
                for a in 0..n {
                    for b in 0..n {
                        ss[a * n + b] = (0..m).map(|k| sig[a * m + k] * sig[b * m + k]).sum();
                    }
                }
                chunk[p * n * n..(p + 1) * n * n].copy_from_slice(&pinv_psd(&ss, n)?);
            }
            Ok(())
        })?;
        let sigma_b = match spec.drift_b() {
            None => None,
            Some(b) => {
                let mut out = vec![0.0; (steps + 1) * paths * n];
                let mut bv = vec![0.0; m];
                for i in 0..=steps {
                    for p in 0..paths {
                        b.eval(grid.node(i), ens.state(p, i), &mut bv);
                        let sig = sigma.at(i, p);
                        for a in 0..n {
                            out[(i * paths + p) * n + a] = (0..m).map(|k| sig[a * m + k] * bv[k]).sum();
                        }
                    }
                }
                if out.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric("non-finite drift loading sigma*b".into()));
                }
                Some(out)
            }
        };
        Ok(Self { ens, spec, basis, projectors, sigma, vol_pinv, sigma_b })
    }

    pub fn ensemble(&self) -> &'a PathEnsemble {
        self.ens
    }
    pub fn spec(&self) -> &'a ProblemSpec {
        self.spec
    }
    pub fn basis(&self) -> RegressionBasis {
        self.basis
    }
    pub fn sigma(&self) -> &SigmaTable {
        &self.sigma
    }
    pub fn projector(&self, i: usize) -> &Projector {
        &self.projectors[i]
    }

    /// Conditional expectation given `X_{t_i}` of a `[paths][cols]` array.
    pub fn condition(&self, i: usize, values: &[f64], cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; values.len()];
        self.projectors[i].project(values, cols, &mut out);
        out
    }

    /// `(σb)(t_i, X_{t_i})` of path `p`, if the problem has a drift.
    #[inline]
    pub fn sigma_b(&self, i: usize, p: usize) -> Option<&[f64]> {
        let n = self.spec.dims().n;
        self.sigma_b.as_ref().map(|sb| {
            let k = (i * self.ens.n_paths() + p) * n;
            &sb[k..k + n]
        })
    }

    /// Adds `zᵀσb` to `out` when the problem has a drift.
    #[inline]
    pub fn add_drift(&self, i: usize, p: usize, z: &[f64], out: &mut [f64]) {
        if let Some(sb) = self.sigma_b(i, p) {
            let d = out.len();
            for (a, &w) in sb.iter().enumerate() {
                for k in 0..d {
                    out[k] += z[a * d + k] * w;
                }
            }
        }
    }

    /// Martingale-increment projection:
    /// `pinv(σσᵀ) · E[dX_i ⊗ centred | X_{t_i}] / Δt`, written into `v`.
    fn integrand(&self, i: usize, centred: &[f64], d: usize, work: &mut [f64], proj: &mut [f64], v: &mut [f64]) {
        let n = self.spec.dims().n;
        let paths = self.ens.n_paths();
        let dt = self.ens.grid().dt();
        for p in 0..paths {
            let dx = self.ens.increment(p, i);
            for a in 0..n {
                for k in 0..d {
                    work[p * n * d + a * d + k] = dx[a] * centred[p * d + k];
                }
            }
        }
        self.projectors[i].project(work, n * d, proj);
        for p in 0..paths {
            let pinv = &self.vol_pinv[(i * paths + p) * n * n..(i * paths + p + 1) * n * n];
            let w = &proj[p * n * d..(p + 1) * n * d];
            let out = &mut v[p * n * d..(p + 1) * n * d];
            for a in 0..n {
                for k in 0..d {
                    out[a * d + k] = (0..n).map(|b| pinv[a * n + b] * w[b * d + k]).sum::<f64>() / dt;
                }
            }
        }
    }

    /// One step of the dynamic programme with a generator that does not depend
    /// on the unknowns: `u_i = E[next + Δt·g | X_{t_i}]` and
    /// `v_i = pinv(σσᵀ)·E[dX_i (next − E[next | X_{t_i}])ᵀ | X_{t_i}] / Δt`.
    pub fn backward_step(
        &self,
        i: usize,
        next_values: &[f64],
        generator_at_step: &(dyn Fn(usize, &mut [f64]) + Sync),
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.spec.dims().d;
        let n = self.spec.dims().n;
        let paths = self.ens.n_paths();
        if i >= self.ens.grid().steps() {
            return Err(Error::Config(format!("step index {i} out of range")));
        }
        if next_values.len() != paths * d {
            return Err(Error::Shape {
                component: "next_values".into(),
                expected: (paths * d).to_string(),
                got: next_values.len().to_string(),
            });
        }
        let dt = self.ens.grid().dt();
        let pred = self.condition(i, next_values, d);
        let centred: Vec<f64> = next_values.iter().zip(&pred).map(|(a, b)| a - b).collect();
        let mut work = vec![0.0; paths * n * d];
        let mut proj = vec![0.0; paths * n * d];
        let mut v = vec![0.0; paths * n * d];
        self.integrand(i, &centred, d, &mut work, &mut proj, &mut v);
        let mut target = next_values.to_vec();
        let mut g = vec![0.0; d];
        for p in 0..paths {
            generator_at_step(p, &mut g);
            for k in 0..d {
                target[p * d + k] += dt * g[k];
            }
        }
        Ok((self.condition(i, &target, d), v))
    }

    /// Backward induction from `terminal` (`[paths][d]`) to `t_0`.
    pub fn solve_slice(&self, terminal: &[f64], generator: &SliceGenerator<'_>, forcing: Option<&PathField>) -> Result<SliceSolution> {
        let d = self.spec.dims().d;
        let n = self.spec.dims().n;
        let steps = self.ens.grid().steps() + 1;
        let paths = self.ens.n_paths();
        let mut u = PathField::zeros(steps, paths, d);
        let mut v = PathField::zeros(steps, paths, n * d);
        let mut u_pred = PathField::zeros(steps, paths, d);
        let mut ortho = Vec::new();
        self.solve_slice_into(
            terminal,
            generator,
            forcing,
            SliceBuffers { u: u.data_mut(), v: v.data_mut(), u_pred: u_pred.data_mut(), ortho: Some(&mut ortho) },
        )?;
        Ok(SliceSolution { u, v, u_pred, ortho })
    }

    /// [`solve_slice`](Self::solve_slice) writing into caller-owned buffers.
    ///
    /// `forcing`, when given, holds `F_i` for `i < M`: the step-`i` target
    /// becomes `u_{i+1} + Δt·F_i` before any regression, i.e. `F_i` is an
    /// `F_{t_{i+1}}`-measurable integrand evaluated at the right end point.
    pub fn solve_slice_into(
        &self,
        terminal: &[f64],
        generator: &SliceGenerator<'_>,
        forcing: Option<&PathField>,
        out: SliceBuffers<'_>,
    ) -> Result<()> {
        let dims = self.spec.dims();
        let (n, d) = (dims.n, dims.d);
        let grid = self.ens.grid();
        let m_steps = grid.steps();
        let dt = grid.dt();
        let paths = self.ens.n_paths();
        let (w_u, w_v) = (paths * d, paths * n * d);
        if terminal.len() != w_u {
            return Err(Error::Shape { component: "terminal".into(), expected: w_u.to_string(), got: terminal.len().to_string() });
        }
        if terminal.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: m_steps, reason: "non-finite terminal value".into() });
        }
        let SliceBuffers { u, v, u_pred, mut ortho } = out;
        u[m_steps * w_u..].copy_from_slice(terminal);
        u_pred[m_steps * w_u..].copy_from_slice(terminal);
        v[m_steps * w_v..].iter_mut().for_each(|x| *x = 0.0);
        if let Some(o) = ortho.as_deref_mut() {
            o.clear();
            o.resize(m_steps, 0.0);
        }

        let mut next = vec![0.0; w_u];
        let mut centred = vec![0.0; w_u];
        let mut g = vec![0.0; w_u];
        let mut inc = vec![0.0; w_u];
        let mut work = vec![0.0; w_v];
        let mut proj = vec![0.0; w_v];
        let mut resid = vec![0.0; w_u];

        for i in (0..m_steps).rev() {
            next.copy_from_slice(&u[(i + 1) * w_u..(i + 2) * w_u]);
            if let Some(fc) = forcing {
                for (a, b) in next.iter_mut().zip(fc.step(i)) {
                    *a += dt * b;
                }
            }
            let (u_lo, _) = u.split_at_mut((i + 1) * w_u);
            let ui = &mut u_lo[i * w_u..];
            let pred = &mut u_pred[i * w_u..(i + 1) * w_u];
            self.projectors[i].project(&next, d, pred);
            for ((c, a), b) in centred.iter_mut().zip(&next).zip(pred.iter()) {
                *c = a - b;
            }
            let vi = &mut v[i * w_v..(i + 1) * w_v];
            self.integrand(i, &centred, d, &mut work, &mut proj, vi);

            let t = grid.node(i);
            for p in 0..paths {
                let y = &pred[p * d..(p + 1) * d];
                let z = &vi[p * n * d..(p + 1) * n * d];
                let pt = Point { i, p, t, x: self.ens.state(p, i), y, z };
                let gp = &mut g[p * d..(p + 1) * d];
                generator(&pt, gp);
                self.add_drift(i, p, z, gp);
            }
            self.projectors[i].project(&g, d, &mut inc);
            for (k, ((o, a), b)) in ui.iter_mut().zip(pred.iter()).zip(&inc).enumerate() {
                let step = dt * b;
                if !step.is_finite() || step.abs() > DIVERGENCE_LIMIT {
                    return Err(Error::Divergence {
                        step: i,
                        reason: format!("generator update {step:e} on path {}", k / d),
                    });
                }
                *o = a + step;
            }

            if let Some(o) = ortho.as_deref_mut() {
                for p in 0..paths {
                    let dx = self.ens.increment(p, i);
                    let z = &vi[p * n * d..(p + 1) * n * d];
                    for k in 0..d {
                        let mart: f64 = (0..n).map(|a| z[a * d + k] * dx[a]).sum();
                        let q = p * d + k;
                        centred[q] = next[q] + dt * g[q] - ui[q] - mart;
                    }
                }
                self.projectors[i].project(&centred, d, &mut resid);
                o[i] = (resid.iter().map(|r| r * r).sum::<f64>() / w_u as f64).sqrt();
            }
        }
        Ok(())
    }
}
