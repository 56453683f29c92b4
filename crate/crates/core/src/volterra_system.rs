//! Picard iteration for the coupled system of a type-I BSVIE with diagonal
//! dependence, and the identity checks available on its solution.
//!
//! One Picard step freezes a guess `(𝒴, 𝒵)` of the diagonal pair and solves,
//! for every `s_j`:
//!
//! * the family `U^s` with generator `f(s, t, X, U^s, V^s, 𝒴, 𝒵)`,
//! * the derivative family `∂U^s` with generator
//!   `∂_s f + ∂_y f·∂U^s + Σ_i ∂_{z_i} f·∂V^s_i` evaluated along `U^s`,
//!
//! then reads `U_t^t` and `∂U_t^t` off the grid diagonal, rebuilds `V_t^t`
//! from `V^T − ∫_t^T ∂V^r dr`, and finally solves the diagonal equation
//! `d𝒴 = −(f(t, t, X, 𝒴, 𝒵, U_t^t, V_t^t) − ∂U_t^t) dt + 𝒵 dX`.
//!
//! The `∂U_t^t` integral of the diagonal equation is taken over each step
//! with the trapezoid rule in `s` at the right end point,
//! `Δt·(∂U^{s_i}_{i+1} + ∂U^{s_{i+1}}_{i+1})/2`, inside the conditional
//! expectation. With that choice the discrete diagonal equation reproduces
//! the diagonal of the discrete family exactly whenever the family is affine
//! in `s`.

use crate::bsde_engine::{Engine, Point, RegressionBasis, SliceBuffers};
use crate::container::{Header, Section};
use crate::error::{Error, Result};
use crate::field::{BsvieSolution, FamilyField, FieldSolution, OrthoResiduals, PathField, Provenance, SolverKind};
use crate::grid::{Grids, ParamGrid, TimeGrid};
use crate::mc_forward::PathEnsemble;
use crate::metrics::{h2, s2};
use crate::spec::{Dims, GenArgs, NablaArgs, ProblemSpec};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::sync::Arc;

/// Stopping rule of the Picard loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PicardOptions {
    /// Relative tolerance: stop when the distance is below `tol·(1 + magnitude)`.
    pub tol: f64,
    pub max_iter: usize,
    /// Run exactly this many iterations and accept the result.
    pub fixed_iterations: Option<usize>,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self { tol: 1e-6, max_iter: 50, fixed_iterations: None }
    }
}

/// The diagonal pair frozen during a Picard step.
#[derive(Debug, Clone)]
pub struct DiagonalGuess {
    pub ydiag: PathField,
    pub zdiag: PathField,
}

impl DiagonalGuess {
    pub fn zeros(grid: &TimeGrid, paths: usize, dims: Dims) -> Self {
        Self {
            ydiag: PathField::zeros(grid.len(), paths, dims.d),
            zdiag: PathField::zeros(grid.len(), paths, dims.n * dims.d),
        }
    }
}

fn check_grids(engine: &Engine<'_>, grids: &Grids, op: &str) -> Result<()> {
    grids.require_diagonal_aligned(op)?;
    if engine.ensemble().grid() != &grids.time {
        return Err(Error::Config(format!("{op}: ensemble time grid differs from the solver grid")));
    }
    Ok(())
}

fn terminal_values(engine: &Engine<'_>, g: &crate::spec::StateFn, s: f64) -> Vec<f64> {
    let ens = engine.ensemble();
    let d = engine.spec().dims().d;
    let m = ens.grid().steps();
    let mut out = vec![0.0; ens.n_paths() * d];
    for p in 0..ens.n_paths() {
        g.eval(s, ens.state(p, m), &mut out[p * d..(p + 1) * d]);
    }
    out
}

fn max_per_step(rows: &[Vec<f64>]) -> Vec<f64> {
    let len = rows.first().map_or(0, |r| r.len());
    (0..len).map(|i| rows.iter().map(|r| r[i]).fold(0.0, f64::max)).collect()
}

/// One application of the Picard map to `guess`.
pub fn picard_step(engine: &Engine<'_>, grids: &Grids, guess: &DiagonalGuess, kind: SolverKind) -> Result<FieldSolution> {
    check_grids(engine, grids, "picard_step")?;
    let spec = engine.spec();
    let ens = engine.ensemble();
    let dims = spec.dims();
    let (n, d) = (dims.n, dims.d);
    let grid = &grids.time;
    let steps = grid.len();
    let paths = ens.n_paths();
    let slices = grids.param.len();
    let full = kind == SolverKind::Full;
    if guess.ydiag.steps() != steps || guess.ydiag.paths() != paths || guess.ydiag.width() != d {
        return Err(Error::Shape { component: "guess.ydiag".into(), expected: format!("[{steps}][{paths}][{d}]"), got: "other".into() });
    }
    if guess.zdiag.steps() != steps || guess.zdiag.paths() != paths || guess.zdiag.width() != n * d {
        return Err(Error::Shape { component: "guess.zdiag".into(), expected: format!("[{steps}][{paths}][{}]", n * d), got: "other".into() });
    }

    let mut u = FamilyField::zeros(slices, steps, paths, d);
    let mut v = FamilyField::zeros(slices, steps, paths, n * d);
    let (mut du, mut dv) = if full {
        (Some(FamilyField::zeros(slices, steps, paths, d)), Some(FamilyField::zeros(slices, steps, paths, n * d)))
    } else {
        (None, None)
    };
    let (lu, lv) = (u.slice_len(), v.slice_len());

    // Family and derivative family, one task per parameter node.
    let mut du_chunks: Vec<Option<&mut [f64]>> = match du.as_mut() {
        Some(f) => f.data_mut().chunks_mut(lu).map(Some).collect(),
        None => (0..slices).map(|_| None).collect(),
    };
    let mut dv_chunks: Vec<Option<&mut [f64]>> = match dv.as_mut() {
        Some(f) => f.data_mut().chunks_mut(lv).map(Some).collect(),
        None => (0..slices).map(|_| None).collect(),
    };
    let ortho_rows: Vec<(Vec<f64>, Vec<f64>)> = u
        .data_mut()
        .par_chunks_mut(lu)
        .zip(v.data_mut().par_chunks_mut(lv))
        .zip(du_chunks.par_iter_mut().zip(dv_chunks.par_iter_mut()))
        .enumerate()
        .map(|(j, ((uj, vj), (duj, dvj)))| -> Result<(Vec<f64>, Vec<f64>)> {
            let s = grids.param.node(j);
            let gen = |pt: &Point<'_>, out: &mut [f64]| {
                let args = GenArgs {
                    s,
                    t: pt.t,
                    x: pt.x,
                    y: pt.y,
                    z: pt.z,
                    u: guess.ydiag.at(pt.i, pt.p),
                    v: guess.zdiag.at(pt.i, pt.p),
                };
                spec.f().eval(&args, out);
            };
            let mut pred = vec![0.0; lu];
            let mut ortho_u = Vec::new();
            engine.solve_slice_into(
                &terminal_values(engine, spec.xi(), s),
                &gen,
                None,
                SliceBuffers { u: uj, v: vj, u_pred: &mut pred, ortho: Some(&mut ortho_u) },
            )?;
            let mut ortho_du = Vec::new();
            if let (Some(duj), Some(dvj)) = (duj.as_deref_mut(), dvj.as_deref_mut()) {
                let vj = &*vj;
                let pred = &pred;
                let dgen = |pt: &Point<'_>, out: &mut [f64]| {
                    let k = (pt.i * paths + pt.p) * d;
                    let kv = (pt.i * paths + pt.p) * n * d;
                    let args = NablaArgs {
                        s,
                        t: pt.t,
                        x: pt.x,
                        du: pt.y,
                        dv: pt.z,
                        y: &pred[k..k + d],
                        z: &vj[kv..kv + n * d],
                        u: guess.ydiag.at(pt.i, pt.p),
                        v: guess.zdiag.at(pt.i, pt.p),
                    };
                    let mut scratch = [0.0; 16];
                    if d * d <= 16 {
                        spec.nabla_f_into(&args, &mut scratch[..d * d], out);
                    } else {
                        let mut big = vec![0.0; d * d];
                        spec.nabla_f_into(&args, &mut big, out);
                    }
                };
                let mut dpred = vec![0.0; lu];
                engine.solve_slice_into(
                    &terminal_values(engine, spec.ds_xi(), s),
                    &dgen,
                    None,
                    SliceBuffers { u: duj, v: dvj, u_pred: &mut dpred, ortho: Some(&mut ortho_du) },
                )?;
            }
            Ok((ortho_u, ortho_du))
        })
        .collect::<Result<Vec<_>>>()?;
    drop(du_chunks);
    drop(dv_chunks);

    let udiag = u.diagonal();
    let vdiag_direct = v.diagonal();
    let (du_diag, vdiag_reconstructed, forcing) = match (&du, &dv) {
        (Some(du), Some(dv)) => {
            let vrec = reconstruct_diagonal_v(&v, dv, grids)?;
            let mut forcing = PathField::zeros(steps, paths, d);
            for i in 0..steps - 1 {
                let (a, b) = (du.step(i, i + 1), du.step(i + 1, i + 1));
                for ((f, x), y) in forcing.step_mut(i).iter_mut().zip(a).zip(b) {
                    *f = -0.5 * (x + y);
                }
            }
            (du.diagonal(), Some(vrec), forcing)
        }
        _ => {
            let ds = grids.param.ds().ok_or_else(|| Error::Config("simplified solver needs a uniform parameter grid".into()))?;
            let mut forcing = PathField::zeros(steps, paths, d);
            for i in 0..steps - 1 {
                let (a, b) = (u.step(i, i + 1), u.step(i + 1, i + 1));
                for ((f, x), y) in forcing.step_mut(i).iter_mut().zip(a).zip(b) {
                    *f = -(y - x) / ds;
                }
            }
            (s_difference_diagonal(&u, ds), None, forcing)
        }
    };
    let vdiag_for_gen = vdiag_reconstructed.as_ref().unwrap_or(&vdiag_direct);

    // Diagonal equation.
    let terminal = terminal_values(engine, spec.xi(), grid.horizon());
    let hgen = |pt: &Point<'_>, out: &mut [f64]| {
        let args = GenArgs {
            s: pt.t,
            t: pt.t,
            x: pt.x,
            y: pt.y,
            z: pt.z,
            u: udiag.at(pt.i, pt.p),
            v: vdiag_for_gen.at(pt.i, pt.p),
        };
        spec.f().eval(&args, out);
    };
    let sol = engine.solve_slice(&terminal, &hgen, Some(&forcing))?;

    let ortho_residuals = OrthoResiduals {
        diagonal: sol.ortho,
        family: max_per_step(&ortho_rows.iter().map(|r| r.0.clone()).collect::<Vec<_>>()),
        derivative: full.then(|| max_per_step(&ortho_rows.iter().map(|r| r.1.clone()).collect::<Vec<_>>())),
    };

    Ok(FieldSolution {
        grids: grids.clone(),
        dims,
        n_paths: paths,
        solver: kind,
        u: Arc::new(u),
        v: Arc::new(v),
        du,
        dv,
        ydiag: sol.u,
        zdiag: sol.v,
        udiag,
        du_diag,
        vdiag_reconstructed,
        ortho_residuals,
        picard_trace: Vec::new(),
        distance: f64::NAN,
        tol: f64::NAN,
        converged: false,
        ident_y: f64::NAN,
        ident_z: f64::NAN,
    })
}

/// `∂_s U` on the diagonal by second-order differences in `s`: centred inside,
/// one-sided at both ends.
fn s_difference_diagonal(u: &FamilyField, ds: f64) -> PathField {
    let (slices, steps, paths, d) = (u.slices(), u.steps(), u.paths(), u.width());
    let mut out = PathField::zeros(steps, paths, d);
    if slices < 3 {
        for i in 0..steps {
            let (j0, j1) = if i + 1 < slices { (i, i + 1) } else { (i - 1, i) };
            for (o, (a, b)) in out.step_mut(i).iter_mut().zip(u.step(j0, i).iter().zip(u.step(j1, i))) {
                *o = (b - a) / ds;
            }
        }
        return out;
    }
    let last = slices - 1;
    for i in 0..steps {
        let o = out.step_mut(i);
        if i == 0 {
            let (a, b, c) = (u.step(0, i), u.step(1, i), u.step(2, i));
            for k in 0..o.len() {
                o[k] = (4.0 * (b[k] - a[k]) - (c[k] - a[k])) / (2.0 * ds);
            }
        } else if i == last {
            let (a, b, c) = (u.step(last, i), u.step(last - 1, i), u.step(last - 2, i));
            for k in 0..o.len() {
                o[k] = (4.0 * (a[k] - b[k]) - (a[k] - c[k])) / (2.0 * ds);
            }
        } else {
            let (a, c) = (u.step(i - 1, i), u.step(i + 1, i));
            for k in 0..o.len() {
                o[k] = (c[k] - a[k]) / (2.0 * ds);
            }
        }
    }
    out
}

/// `V_t^t = V^T_t − ∫_t^T ∂V^r_t dr` with the trapezoid rule on the parameter grid.
pub fn reconstruct_diagonal_v(v: &FamilyField, dv: &FamilyField, grids: &Grids) -> Result<PathField> {
    grids.require_diagonal_aligned("reconstruct_diagonal_v")?;
    if v.slices() != grids.param.len() || dv.slices() != v.slices() || v.steps() != grids.time.len() || dv.steps() != v.steps() {
        return Err(Error::Shape { component: "V/dV".into(), expected: "families on the solver grids".into(), got: "other".into() });
    }
    let (steps, paths, w) = (v.steps(), v.paths(), v.width());
    let last = v.slices() - 1;
    let nodes = grids.param.nodes();
    let mut out = PathField::zeros(steps, paths, w);
    for i in 0..steps {
        let o = out.step_mut(i);
        o.copy_from_slice(v.step(last, i));
        for j in i..last {
            let h = 0.5 * (nodes[j + 1] - nodes[j]);
            let (a, b) = (dv.step(j, i), dv.step(j + 1, i));
            for k in 0..o.len() {
                o[k] -= h * (a[k] + b[k]);
            }
        }
    }
    Ok(out)
}

fn distance(engine: &Engine<'_>, grid: &TimeGrid, a: (&PathField, &PathField), b: (&PathField, &PathField)) -> f64 {
    (s2(&a.0.sub(b.0), grid, 0.0) + h2(&a.1.sub(b.1), engine.sigma(), grid, 0.0)).sqrt()
}

fn picard_loop(engine: &Engine<'_>, grids: &Grids, opts: PicardOptions, kind: SolverKind) -> Result<FieldSolution> {
    if !(opts.tol > 0.0) {
        return Err(Error::Config(format!("Picard tolerance must be positive, got {}", opts.tol)));
    }
    let max_iter = opts.fixed_iterations.unwrap_or(opts.max_iter);
    if max_iter == 0 {
        return Err(Error::Config("Picard max_iter must be at least 1".into()));
    }
    let grid = &grids.time;
    let dims = engine.spec().dims();
    let mut guess = DiagonalGuess::zeros(grid, engine.ensemble().n_paths(), dims);
    let mut trace = Vec::new();
    let mut k = 0;
    let mut field = loop {
        k += 1;
        let mut cand = picard_step(engine, grids, &guess, kind)?;
        let dist = distance(engine, grid, (&cand.ydiag, &cand.zdiag), (&guess.ydiag, &guess.zdiag));
        let magnitude = (s2(&cand.ydiag, grid, 0.0) + h2(&cand.zdiag, engine.sigma(), grid, 0.0)).sqrt();
        let tol = opts.tol * (1.0 + magnitude);
        trace.push(dist);
        cand.distance = dist;
        cand.tol = tol;
        cand.converged = dist < tol;
        let done = match opts.fixed_iterations {
            Some(n) => k >= n,
            None => cand.converged || k >= max_iter,
        };
        if done {
            break cand;
        }
        guess = DiagonalGuess { ydiag: cand.ydiag.clone(), zdiag: cand.zdiag.clone() };
    };
    field.picard_trace = trace;
    let vdiag = field.vdiag_reconstructed.clone().unwrap_or_else(|| field.v.diagonal());
    field.ident_y = s2(&field.ydiag.sub(&field.udiag), grid, 0.0).sqrt();
    field.ident_z = h2(&field.zdiag.sub(&vdiag), engine.sigma(), grid, 0.0).sqrt();
    Ok(field)
}

/// Run the Picard loop without treating non-convergence as an error; the
/// returned field carries `converged` and the trace. The simplified system is
/// used when the problem declares no `Z`-diagonal dependence.
pub fn picard_solve(engine: &Engine<'_>, grids: &Grids, opts: PicardOptions) -> Result<FieldSolution> {
    let kind = if engine.spec().z_diagonal_in_generator() { SolverKind::Full } else { SolverKind::Simplified };
    picard_loop(engine, grids, opts, kind)
}

fn finish(field: FieldSolution, opts: PicardOptions) -> Result<FieldSolution> {
    if field.converged || opts.fixed_iterations.is_some() {
        Ok(field)
    } else {
        Err(Error::NonConvergence { trace: field.picard_trace, distance: field.distance, tol: field.tol })
    }
}

/// Solve the full system from the zero guess.
pub fn solve_system(spec: &ProblemSpec, ens: &PathEnsemble, grids: &Grids, basis: RegressionBasis, opts: PicardOptions) -> Result<FieldSolution> {
    let engine = Engine::new(ens, spec, basis)?;
    solve_system_with(&engine, grids, opts)
}

/// [`solve_system`] on a prepared engine.
pub fn solve_system_with(engine: &Engine<'_>, grids: &Grids, opts: PicardOptions) -> Result<FieldSolution> {
    finish(picard_loop(engine, grids, opts, SolverKind::Full)?, opts)
}

/// Solve the system without the derivative family, for generators that do
/// not depend on the `Z` diagonal.
pub fn solve_system_simplified(spec: &ProblemSpec, ens: &PathEnsemble, grids: &Grids, basis: RegressionBasis, opts: PicardOptions) -> Result<FieldSolution> {
    let engine = Engine::new(ens, spec, basis)?;
    solve_system_simplified_with(&engine, grids, opts)
}

pub fn solve_system_simplified_with(engine: &Engine<'_>, grids: &Grids, opts: PicardOptions) -> Result<FieldSolution> {
    if engine.spec().z_diagonal_in_generator() {
        return Err(Error::Config("the simplified solver needs a generator declared free of the Z diagonal".into()));
    }
    finish(picard_loop(engine, grids, opts, SolverKind::Simplified)?, opts)
}

/// Read off `(Y, Z) = (U, V)` from a converged field.
pub fn extract_bsvie(field: &FieldSolution) -> Result<BsvieSolution> {
    if !field.converged {
        return Err(Error::State(format!(
            "field has not converged (distance {:e}, tolerance {:e})",
            field.distance, field.tol
        )));
    }
    Ok(BsvieSolution {
        grids: field.grids.clone(),
        dims: field.dims,
        y: Arc::clone(&field.u),
        z: Arc::clone(&field.v),
        ydiag: field.ydiag.clone(),
        zdiag: field.zdiag.clone(),
        provenance: Provenance {
            backend: match field.solver {
                SolverKind::Full => "regression_mc/full".into(),
                SolverKind::Simplified => "regression_mc/simplified".into(),
            },
            picard_tol: field.tol,
            picard_distance: field.distance,
            iterations: field.iterations(),
            ident_y: field.ident_y,
            ident_z: field.ident_z,
        },
    })
}

/// Residuals of the discrete dynamics of `U_t^t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalDynamicsReport {
    pub raw_rms: f64,
    pub conditioned_rms: f64,
    pub conditioned_per_step: Vec<f64>,
}

/// `R_i = U_{i+1}^{i+1} − U_i^i + Δt(f(t_i, t_i, X, U_i^i, V_i^i, 𝒴_i, 𝒵_i) − ∂U_i^i) − V_i^i·dX_i`.
pub fn check_diagonal_dynamics(field: &FieldSolution, engine: &Engine<'_>) -> Result<DiagonalDynamicsReport> {
    let spec = engine.spec();
    let ens = engine.ensemble();
    let dims = spec.dims();
    let (n, d) = (dims.n, dims.d);
    let grid = &field.grids.time;
    let m_steps = grid.steps();
    let dt = grid.dt();
    let paths = ens.n_paths();
    if field.n_paths != paths || field.udiag.steps() != grid.len() {
        return Err(Error::Shape { component: "field".into(), expected: "field solved on this ensemble".into(), got: "other".into() });
    }
    let direct;
    let vdiag = match &field.vdiag_reconstructed {
        Some(v) => v,
        None => {
            direct = field.v.diagonal();
            &direct
        }
    };
    let mut raw = 0.0;
    let mut cond = 0.0;
    let mut per_step = Vec::with_capacity(m_steps);
    let mut r = vec![0.0; paths * d];
    let mut g = vec![0.0; d];
    for i in 0..m_steps {
        let t = grid.node(i);
        for p in 0..paths {
            let (ui, vi) = (field.udiag.at(i, p), vdiag.at(i, p));
            let args = GenArgs { s: t, t, x: ens.state(p, i), y: ui, z: vi, u: field.ydiag.at(i, p), v: field.zdiag.at(i, p) };
            spec.f().eval(&args, &mut g);
            engine.add_drift(i, p, vi, &mut g);
            let dx = ens.increment(p, i);
            for k in 0..d {
                let mart: f64 = (0..n).map(|a| vi[a * d + k] * dx[a]).sum();
                r[p * d + k] = field.udiag.at(i + 1, p)[k] - ui[k] + dt * (g[k] - field.du_diag.at(i, p)[k]) - mart;
            }
        }
        raw += r.iter().map(|x| x * x).sum::<f64>();
        let c = engine.condition(i, &r, d);
        let step_sq = c.iter().map(|x| x * x).sum::<f64>();
        cond += step_sq;
        per_step.push((step_sq / (paths * d) as f64).sqrt());
    }
    let count = (m_steps * paths * d) as f64;
    Ok(DiagonalDynamicsReport { raw_rms: (raw / count).sqrt(), conditioned_rms: (cond / count).sqrt(), conditioned_per_step: per_step })
}

/// Residual of the representation `Y_t^t = E[Y_t^t] + Σ_{k<i} Z_{t_k}^{t_i}·dX_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MPropertyReport {
    pub max_rms: f64,
    pub rms_per_step: Vec<f64>,
}

pub fn check_m_property(bsvie: &BsvieSolution, ens: &PathEnsemble) -> Result<MPropertyReport> {
    bsvie.grids.require_diagonal_aligned("check_m_property")?;
    let Dims { n, d, .. } = bsvie.dims;
    let steps = bsvie.grids.time.len();
    let paths = ens.n_paths();
    if bsvie.ydiag.paths() != paths {
        return Err(Error::Shape { component: "ensemble".into(), expected: bsvie.ydiag.paths().to_string(), got: paths.to_string() });
    }
    let rms_per_step: Vec<f64> = (0..steps)
        .into_par_iter()
        .map(|i| {
            let mean = bsvie.ydiag.mean_at(i);
            let mut acc = 0.0;
            for p in 0..paths {
                let y = bsvie.ydiag.at(i, p);
                for k in 0..d {
                    let mut integral = 0.0;
                    for kk in 0..i {
                        let z = bsvie.z.at(i, kk, p);
                        let dx = ens.increment(p, kk);
                        integral += (0..n).map(|a| z[a * d + k] * dx[a]).sum::<f64>();
                    }
                    acc += (y[k] - mean[k] - integral).powi(2);
                }
            }
            (acc / (paths * d) as f64).sqrt()
        })
        .collect();
    let max_rms = rms_per_step.iter().cloned().fold(0.0, f64::max);
    Ok(MPropertyReport { max_rms, rms_per_step })
}

/// Residuals of `U^T − U^s = ∫_s^T ∂U^r dr` (and the same for `V`), per `s_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    /// 𝕊² norm (not squared) per parameter node.
    pub u_residual: Vec<f64>,
    /// ℍ² norm (not squared) per parameter node.
    pub v_residual: Vec<f64>,
    pub max_u: f64,
    pub max_v: f64,
}

pub fn check_constraint_d(field: &FieldSolution, engine: &Engine<'_>) -> Result<ConstraintReport> {
    let (du, dv) = match (&field.du, &field.dv) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::State("the constraint check needs the derivative family (full solver)".into())),
    };
    let grids = &field.grids;
    let grid = &grids.time;
    let nodes = grids.param.nodes();
    let last = grids.param.len() - 1;
    let residual = |fam: &FamilyField, dfam: &FamilyField| -> Vec<PathField> {
        let (steps, paths, w) = (fam.steps(), fam.paths(), fam.width());
        let mut acc = PathField::zeros(steps, paths, w);
        let mut out = vec![PathField::zeros(steps, paths, w); last + 1];
        for j in (0..=last).rev() {
            if j < last {
                let h = 0.5 * (nodes[j + 1] - nodes[j]);
                for i in 0..steps {
                    let (a, b) = (dfam.step(j, i), dfam.step(j + 1, i));
                    for (k, o) in acc.step_mut(i).iter_mut().enumerate() {
                        *o += h * (a[k] + b[k]);
                    }
                }
            }
            let r = &mut out[j];
            for i in 0..steps {
                let (top, cur, a) = (fam.step(last, i), fam.step(j, i), acc.step(i));
                for (k, o) in r.step_mut(i).iter_mut().enumerate() {
                    *o = top[k] - cur[k] - a[k];
                }
            }
        }
        out
    };
    let u_residual: Vec<f64> = residual(&field.u, du).iter().map(|r| s2(r, grid, 0.0).sqrt()).collect();
    let v_residual: Vec<f64> = residual(&field.v, dv).iter().map(|r| h2(r, engine.sigma(), grid, 0.0).sqrt()).collect();
    let max_u = u_residual.iter().cloned().fold(0.0, f64::max);
    let max_v = v_residual.iter().cloned().fold(0.0, f64::max);
    Ok(ConstraintReport { u_residual, v_residual, max_u, max_v })
}

/// Write a field to the binary container.
pub fn dump_field<W: Write>(field: &FieldSolution, seed: u64, w: &mut W) -> Result<()> {
    let grid = &field.grids.time;
    let Dims { n, m, d } = field.dims;
    let (steps, paths, slices) = (grid.len(), field.n_paths, field.grids.param.len());
    Header::new(paths, grid.steps(), n, seed).write(w)?;
    let mut grd = vec![grid.horizon()];
    grd.extend_from_slice(field.grids.param.nodes());
    Section::new("GRD", [grd.len(), 1, 1, 1], grd).write(w)?;
    let meta = vec![
        n as f64,
        m as f64,
        d as f64,
        if field.solver == SolverKind::Full { 0.0 } else { 1.0 },
        field.distance,
        field.tol,
        if field.converged { 1.0 } else { 0.0 },
        field.ident_y,
        field.ident_z,
    ];
    Section::new("MET", [meta.len(), 1, 1, 1], meta).write(w)?;
    Section::new("PT_", [field.picard_trace.len(), 1, 1, 1], field.picard_trace.clone()).write(w)?;
    let fam = |tag: &str, f: &FamilyField| Section::new(tag, [f.slices(), f.steps(), f.paths(), f.width()], f.data().to_vec());
    let path = |tag: &str, f: &PathField| Section::new(tag, [1, f.steps(), f.paths(), f.width()], f.data().to_vec());
    fam("U__", &field.u).write(w)?;
    fam("V__", &field.v).write(w)?;
    if let Some(du) = &field.du {
        fam("dU_", du).write(w)?;
    }
    if let Some(dv) = &field.dv {
        fam("dV_", dv).write(w)?;
    }
    path("YD_", &field.ydiag).write(w)?;
    path("ZD_", &field.zdiag).write(w)?;
    path("UD_", &field.udiag).write(w)?;
    path("dUD", &field.du_diag).write(w)?;
    if let Some(vd) = &field.vdiag_reconstructed {
        path("VD_", vd).write(w)?;
    }
    let o = &field.ortho_residuals;
    Section::new("OR1", [o.diagonal.len(), 1, 1, 1], o.diagonal.clone()).write(w)?;
    Section::new("OR2", [o.family.len(), 1, 1, 1], o.family.clone()).write(w)?;
    if let Some(dr) = &o.derivative {
        Section::new("OR3", [dr.len(), 1, 1, 1], dr.clone()).write(w)?;
    }
    debug_assert_eq!(slices, field.u.slices());
    debug_assert_eq!(steps, field.u.steps());
    Ok(())
}

/// Read a field written by [`dump_field`]; returns it with the stored seed.
pub fn restore_field<R: Read>(r: &mut R) -> Result<(FieldSolution, u64)> {
    let header = Header::read(r)?;
    let mut sections = std::collections::BTreeMap::new();
    while let Some(s) = Section::read(r)? {
        sections.insert(s.tag_str(), s);
    }
    let take = |tag: &str| sections.get(tag).ok_or_else(|| Error::Io(format!("missing section {tag}")));
    let fam = |tag: &str| -> Result<FamilyField> {
        let s = take(tag)?;
        let e = s.extents.map(|x| x as usize);
        Ok(FamilyField::from_vec(e[0], e[1], e[2], e[3], s.values.clone()))
    };
    let path = |tag: &str| -> Result<PathField> {
        let s = take(tag)?;
        let e = s.extents.map(|x| x as usize);
        Ok(PathField::from_vec(e[1], e[2], e[3], s.values.clone()))
    };
    let grd = &take("GRD")?.values;
    let time = TimeGrid::new(grd[0], header.steps as usize)?;
    let param = ParamGrid::from_nodes(grd[1..].to_vec())?.align_with(&time)?;
    let meta = &take("MET")?.values;
    let dims = Dims::new(meta[0] as usize, meta[1] as usize, meta[2] as usize);
    let field = FieldSolution {
        grids: Grids::new(time, param),
        dims,
        n_paths: header.n_paths as usize,
        solver: if meta[3] == 0.0 { SolverKind::Full } else { SolverKind::Simplified },
        u: Arc::new(fam("U__")?),
        v: Arc::new(fam("V__")?),
        du: fam("dU_").ok(),
        dv: fam("dV_").ok(),
        ydiag: path("YD_")?,
        zdiag: path("ZD_")?,
        udiag: path("UD_")?,
        du_diag: path("dUD")?,
        vdiag_reconstructed: path("VD_").ok(),
        ortho_residuals: OrthoResiduals {
            diagonal: take("OR1")?.values.clone(),
            family: take("OR2")?.values.clone(),
            derivative: take("OR3").ok().map(|s| s.values.clone()),
        },
        picard_trace: take("PT_")?.values.clone(),
        distance: meta[4],
        tol: meta[5],
        converged: meta[6] != 0.0,
        ident_y: meta[7],
        ident_z: meta[8],
    };
    Ok((field, header.seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mc_forward::simulate_paths;
    use crate::spec::{GenFn, StateFn};

    fn deterministic(spec: &ProblemSpec, horizon: f64, steps: usize) -> (PathEnsemble, Grids) {
        let grids = Grids::aligned(horizon, steps).unwrap();
        let ens = simulate_paths(spec, &grids.time, 8, 1).unwrap();
        (ens, grids)
    }

    fn exp_diag() -> ProblemSpec {
        ProblemSpec::builder(Dims::scalar())
            .f(GenFn::new(1, 1, |a, o| o[0] = a.u[0]))
            .xi(StateFn::constant(1, 1, vec![1.0]))
            .lipschitz(1.0, 0.0)
            .build()
            .unwrap()
    }

    #[test]
    fn zero_data_gives_zero_fields() {
        let spec = ProblemSpec::builder(Dims::scalar()).sigma_const(vec![1.0]).build().unwrap();
        let grids = Grids::aligned(1.0, 10).unwrap();
        let ens = simulate_paths(&spec, &grids.time, 100, 4).unwrap();
        let eng = Engine::new(&ens, &spec, RegressionBasis::default()).unwrap();
        let guess = DiagonalGuess::zeros(&grids.time, 100, spec.dims());
        let cand = picard_step(&eng, &grids, &guess, SolverKind::Full).unwrap();
        assert!(cand.u.data().iter().chain(cand.v.data()).chain(cand.ydiag.data()).all(|x| *x == 0.0));
        let field = solve_system_with(&eng, &grids, PicardOptions::default()).unwrap();
        assert_eq!(field.iterations(), 1);
        assert_eq!(field.picard_trace, vec![0.0]);
        assert!(field.du.as_ref().unwrap().data().iter().all(|x| *x == 0.0));
        assert!(field.ortho_residuals.max() == 0.0);
        let b = extract_bsvie(&field).unwrap();
        assert_eq!((b.provenance.ident_y, b.provenance.ident_z), (0.0, 0.0));
    }

    #[test]
    fn constant_generator_is_integrated_exactly() {
        let a = 0.75;
        let spec = ProblemSpec::builder(Dims::scalar())
            .x0(vec![0.3])
            .f(GenFn::constant(1, 1, vec![a]))
            .xi(StateFn::new(1, 1, |s, x, o| o[0] = s * s + x[0]))
            .ds_xi(StateFn::new(1, 1, |s, _, o| o[0] = 2.0 * s))
            .build()
            .unwrap();
        let (ens, grids) = deterministic(&spec, 2.0, 16);
        let eng = Engine::new(&ens, &spec, RegressionBasis::default()).unwrap();
        let mut guess = DiagonalGuess::zeros(&grids.time, 8, spec.dims());
        guess.ydiag.data_mut().iter_mut().for_each(|v| *v = 17.0);
        let cand = picard_step(&eng, &grids, &guess, SolverKind::Full).unwrap();
        for j in 0..=16 {
            let s = grids.param.node(j);
            for i in 0..=16 {
                let exact = s * s + 0.3 + a * (2.0 - grids.time.node(i));
                for p in 0..8 {
                    assert!((cand.u.at(j, i, p)[0] - exact).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn exponential_diagonal_problem() {
        let spec = exp_diag();
        let (ens, grids) = deterministic(&spec, 1.0, 100);
        let field = solve_system(&spec, &ens, &grids, RegressionBasis::default(), PicardOptions::default()).unwrap();
        // Discrete oracle of the left-point scheme: D_i = D_{i+1} / (1 - Δt).
        let dt = 0.01;
        let mut oracle = vec![1.0; 101];
        for i in (0..100).rev() {
            oracle[i] = oracle[i + 1] / (1.0 - dt);
        }
        for i in 0..=100 {
            assert!((field.ydiag.at(i, 0)[0] - oracle[i]).abs() < 1e-8 * oracle[i]);
        }
        let y0 = field.ydiag.at(0, 0)[0];
        assert!((y0 - std::f64::consts::E).abs() < std::f64::consts::E * dt, "y0 {y0}");
        for j in 0..=100 {
            assert!((field.u.at(j, 0, 3)[0] - y0).abs() < 1e-6 * y0, "j {j} u {} y0 {y0}", field.u.at(j, 0, 3)[0]);
        }
        let tr = &field.picard_trace;
        assert!(tr.len() >= 3);
        for w in tr[1..].windows(2) {
            assert!(w[1] < 0.5 * w[0], "trace {tr:?}");
        }
    }

    #[test]
    fn reconstruction_identities() {
        let grids = Grids::aligned(1.0, 6).unwrap();
        let (slices, steps, paths) = (7, 7, 3);
        let mut v = FamilyField::zeros(slices, steps, paths, 1);
        let mut dv = FamilyField::zeros(slices, steps, paths, 1);
        for j in 0..slices {
            let s = grids.param.node(j);
            for i in 0..steps {
                for p in 0..paths {
                    let w = (i as f64 * 0.7 + p as f64).sin();
                    v.at_mut(j, i, p)[0] = s * w;
                    dv.at_mut(j, i, p)[0] = w;
                }
            }
        }
        let rec = reconstruct_diagonal_v(&v, &dv, &grids).unwrap();
        for i in 0..steps {
            for p in 0..paths {
                let w = (i as f64 * 0.7 + p as f64).sin();
                assert!((rec.at(i, p)[0] - grids.time.node(i) * w).abs() < 1e-14);
            }
        }
        let zero = FamilyField::zeros(slices, steps, paths, 1);
        let rec = reconstruct_diagonal_v(&v, &zero, &grids).unwrap();
        for i in 0..steps {
            assert_eq!(rec.step(i), v.step(6, i));
        }
        let bad = Grids::new(grids.time.clone(), ParamGrid::uniform(1.0, 3).unwrap().align_with(&grids.time).unwrap());
        assert!(matches!(reconstruct_diagonal_v(&v, &dv, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn linear_z_diagonals_agree() {
        let spec = ProblemSpec::builder(Dims::scalar())
            .sigma_const(vec![1.0])
            .f(GenFn::new(1, 1, |a, o| o[0] = a.z[0]))
            .dz_f(vec![GenFn::constant(1, 1, vec![1.0])])
            .xi(StateFn::new(1, 1, |s, x, o| o[0] = (1.0 + s) * x[0]))
            .ds_xi(StateFn::new(1, 1, |_, x, o| o[0] = x[0]))
            .build()
            .unwrap();
        let grids = Grids::aligned(1.0, 20).unwrap();
        let ens = simulate_paths(&spec, &grids.time, 4000, 9).unwrap();
        let eng = Engine::new(&ens, &spec, RegressionBasis::default()).unwrap();
        let field = solve_system_with(&eng, &grids, PicardOptions::default()).unwrap();
        let vrec = field.vdiag_reconstructed.as_ref().unwrap();
        let diff = h2(&field.zdiag.sub(vrec), eng.sigma(), &grids.time, 0.0).sqrt();
        // Each estimator carries O(n_paths^{-1/2}) noise of unit scale.
        let slice_tol = 1.0 / (4000f64).sqrt();
        assert!(diff <= 2.0 * slice_tol, "diff {diff}");
        assert!(field.ident_z <= 5.0 * field.tol, "{} vs {}", field.ident_z, field.tol);
    }

    #[test]
    fn extraction_requires_convergence() {
        let spec = exp_diag();
        let (ens, grids) = deterministic(&spec, 1.0, 20);
        let opts = PicardOptions { max_iter: 1, ..Default::default() };
        match solve_system(&spec, &ens, &grids, RegressionBasis::default(), opts) {
            Err(Error::NonConvergence { trace, .. }) => assert_eq!(trace.len(), 1),
            other => panic!("unexpected {other:?}"),
        }
        let eng = Engine::new(&ens, &spec, RegressionBasis::default()).unwrap();
        let field = picard_solve(&eng, &grids, opts).unwrap();
        assert!(matches!(extract_bsvie(&field), Err(Error::State(_))));
    }

    #[test]
    fn generator_free_extraction_is_a_conditional_expectation() {
        let spec = ProblemSpec::builder(Dims::scalar())
            .sigma_const(vec![1.0])
            .xi(StateFn::new(1, 1, |s, x, o| o[0] = (s * x[0]).cos()))
            .ds_xi(StateFn::new(1, 1, |s, x, o| o[0] = -x[0] * (s * x[0]).sin()))
            .build()
            .unwrap();
        let grids = Grids::aligned(1.0, 10).unwrap();
        let ens = simulate_paths(&spec, &grids.time, 1000, 2).unwrap();
        let eng = Engine::new(&ens, &spec, RegressionBasis::default()).unwrap();
        let b = extract_bsvie(&solve_system_with(&eng, &grids, PicardOptions::default()).unwrap()).unwrap();
        let sol = eng.solve_slice(&terminal_values(&eng, spec.xi(), grids.param.node(4)), &|_, g| g[0] = 0.0, None).unwrap();
        for i in 0..=10 {
            for p in 0..1000 {
                assert_eq!(b.y.at(4, i, p)[0], sol.u.at(i, p)[0]);
            }
            // Y[j][i] is a function of X_{t_i}: re-projecting leaves it unchanged.
            if i < 10 {
                let again = eng.condition(i, b.y.step(4, i), 1);
                for (a, c) in again.iter().zip(b.y.step(4, i)) {
                    assert!((a - c).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn diagonal_dynamics_residuals() {
        let spec = ProblemSpec::builder(Dims::scalar()).f(GenFn::constant(1, 1, vec![2.0])).build().unwrap();
        let (ens, grids) = deterministic(&spec, 1.0, 30);
        let eng = Engine::new(&ens, &spec, RegressionBasis::default()).unwrap();
        let field = solve_system_with(&eng, &grids, PicardOptions::default()).unwrap();
        let r = check_diagonal_dynamics(&field, &eng).unwrap();
        assert!(r.raw_rms < 1e-12 && r.conditioned_rms < 1e-12, "{r:?}");

        let spec = exp_diag();
        let mut res = Vec::new();
        for steps in [100, 200] {
            let (ens, grids) = deterministic(&spec, 1.0, steps);
            let eng = Engine::new(&ens, &spec, RegressionBasis::default()).unwrap();
            let field = solve_system_with(&eng, &grids, PicardOptions::default()).unwrap();
            res.push(check_diagonal_dynamics(&field, &eng).unwrap().conditioned_rms);
        }
        assert!(res[0] < 1e-3, "{res:?}");
        assert!(res[0] >= 1.7 * res[1], "{res:?}");
    }

    #[test]
    fn m_property_for_deterministic_and_constant_problems() {
        let spec = exp_diag();
        let (ens, grids) = deterministic(&spec, 1.0, 40);
        let b = extract_bsvie(&solve_system(&spec, &ens, &grids, RegressionBasis::default(), PicardOptions::default()).unwrap()).unwrap();
        assert!(check_m_property(&b, &ens).unwrap().max_rms < 1e-12);

        let spec = ProblemSpec::builder(Dims::scalar()).sigma_const(vec![1.0]).xi(StateFn::constant(1, 1, vec![2.5])).build().unwrap();
        let grids = Grids::aligned(1.0, 20).unwrap();
        let ens = simulate_paths(&spec, &grids.time, 500, 3).unwrap();
        let b = extract_bsvie(&solve_system(&spec, &ens, &grids, RegressionBasis::default(), PicardOptions::default()).unwrap()).unwrap();
        assert!(b.y.data().iter().all(|y| (y - 2.5).abs() < 1e-12));
        assert!(b.z.data().iter().all(|z| z.abs() < 1e-10));
        assert!(check_m_property(&b, &ens).unwrap().max_rms < 1e-10);
    }

    #[test]
    fn constraint_residuals() {
        let spec = ProblemSpec::builder(Dims::scalar())
            .xi(StateFn::new(1, 1, |s, _, o| o[0] = s))
            .ds_xi(StateFn::constant(1, 1, vec![1.0]))
            .build()
            .unwrap();
        let (ens, grids) = deterministic(&spec, 1.0, 16);
        let eng = Engine::new(&ens, &spec, RegressionBasis::default()).unwrap();
        let field = solve_system_with(&eng, &grids, PicardOptions::default()).unwrap();
        let r = check_constraint_d(&field, &eng).unwrap();
        assert!(r.max_u < 1e-14 && r.max_v < 1e-14, "{r:?}");

        let spec = ProblemSpec::builder(Dims::scalar())
            .sigma_const(vec![1.0])
            .f(GenFn::new(1, 1, |a, o| o[0] = 0.5 * a.y[0].sin()))
            .dy_f(GenFn::new(1, 1, |a, o| o[0] = 0.5 * a.y[0].cos()))
            .xi(StateFn::new(1, 1, |_, x, o| o[0] = x[0]))
            .build()
            .unwrap();
        let grids = Grids::aligned(1.0, 10).unwrap();
        let ens = simulate_paths(&spec, &grids.time, 300, 3).unwrap();
        let eng = Engine::new(&ens, &spec, RegressionBasis::default()).unwrap();
        let field = solve_system_with(&eng, &grids, PicardOptions::default()).unwrap();
        let r = check_constraint_d(&field, &eng).unwrap();
        assert_eq!((r.max_u, r.max_v), (0.0, 0.0));
    }

    #[test]
    fn simplified_solver_contract() {
        let spec = exp_diag();
        let (ens, grids) = deterministic(&spec, 1.0, 50);
        let err = solve_system_simplified(&spec, &ens, &grids, RegressionBasis::default(), PicardOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let plain = spec.with_z_diagonal(false);
        let a = solve_system(&plain, &ens, &grids, RegressionBasis::default(), PicardOptions::default()).unwrap();
        let b = solve_system_simplified(&plain, &ens, &grids, RegressionBasis::default(), PicardOptions::default()).unwrap();
        assert!(b.du.is_none() && b.vdiag_reconstructed.is_none());
        for (x, y) in a.ydiag.data().iter().zip(b.ydiag.data()) {
            assert!((x - y).abs() < 1e-10);
        }
        for (x, y) in a.u.data().iter().zip(b.u.data()) {
            assert!((x - y).abs() < 1e-10);
        }

        let spec = ProblemSpec::builder(Dims::scalar())
            .sigma_const(vec![1.0])
            .xi(StateFn::new(1, 1, |s, x, o| o[0] = s * x[0]))
            .ds_xi(StateFn::new(1, 1, |_, x, o| o[0] = x[0]))
            .z_diagonal_in_generator(false)
            .build()
            .unwrap();
        let grids = Grids::aligned(1.0, 12).unwrap();
        let ens = simulate_paths(&spec, &grids.time, 400, 6).unwrap();
        let a = solve_system(&spec, &ens, &grids, RegressionBasis::default(), PicardOptions::default()).unwrap();
        let b = solve_system_simplified(&spec, &ens, &grids, RegressionBasis::default(), PicardOptions::default()).unwrap();
        assert_eq!(a.u.data(), b.u.data());
        assert_eq!(a.v.data(), b.v.data());
        for (x, y) in a.ydiag.data().iter().zip(b.ydiag.data()).chain(a.zdiag.data().iter().zip(b.zdiag.data())) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn doubling_the_data_doubles_linear_solutions() {
        let make = |scale: f64| {
            ProblemSpec::builder(Dims::scalar())
                .sigma_const(vec![1.0])
                .f(GenFn::new(1, 1, |a, o| o[0] = 0.3 * a.y[0] + 0.2 * a.u[0] - 0.1 * a.v[0] + 0.4 * a.z[0]))
                .dy_f(GenFn::constant(1, 1, vec![0.3]))
                .dz_f(vec![GenFn::constant(1, 1, vec![0.4])])
                .xi(StateFn::new(1, 1, move |s, x, o| o[0] = scale * (1.0 + s) * x[0].sin()))
                .ds_xi(StateFn::new(1, 1, move |_, x, o| o[0] = scale * x[0].sin()))
                .build()
                .unwrap()
        };
        let grids = Grids::aligned(1.0, 10).unwrap();
        let (one, two) = (make(1.0), make(2.0));
        let ens = simulate_paths(&one, &grids.time, 300, 4).unwrap();
        let opts = PicardOptions { fixed_iterations: Some(6), ..Default::default() };
        let a = solve_system(&one, &ens, &grids, RegressionBasis::default(), opts).unwrap();
        let b = solve_system(&two, &ens, &grids, RegressionBasis::default(), opts).unwrap();
        let pairs = [
            (a.u.data(), b.u.data()),
            (a.v.data(), b.v.data()),
            (a.du.as_ref().unwrap().data(), b.du.as_ref().unwrap().data()),
            (a.dv.as_ref().unwrap().data(), b.dv.as_ref().unwrap().data()),
            (a.ydiag.data(), b.ydiag.data()),
            (a.zdiag.data(), b.zdiag.data()),
        ];
        for (x, y) in pairs {
            for (p, q) in x.iter().zip(y) {
                assert!((2.0 * p - q).abs() <= 1e-12 * (1.0 + q.abs()), "{p} {q}");
            }
        }
    }

    #[test]
    fn short_horizon_contracts() {
        let spec = ProblemSpec::builder(Dims::scalar())
            .sigma_const(vec![1.0])
            .f(GenFn::new(1, 1, |a, o| o[0] = (a.u[0] + a.s).sin() + 0.5 * a.y[0]))
            .dy_f(GenFn::constant(1, 1, vec![0.5]))
            .ds_f(GenFn::new(1, 1, |a, o| o[0] = (a.u[0] + a.s).cos()))
            .xi(StateFn::new(1, 1, |s, x, o| o[0] = x[0] + s))
            .ds_xi(StateFn::constant(1, 1, vec![1.0]))
            .lipschitz(1.0, 1.0)
            .build()
            .unwrap();
        let grids = Grids::aligned(0.25, 20).unwrap();
        let ens = simulate_paths(&spec, &grids.time, 500, 4).unwrap();
        let opts = PicardOptions { tol: 1e-12, fixed_iterations: Some(6), ..Default::default() };
        let field = solve_system(&spec, &ens, &grids, RegressionBasis::default(), opts).unwrap();
        let tr = &field.picard_trace;
        for w in tr[1..].windows(2) {
            assert!(w[1] <= 0.9 * w[0], "{tr:?}");
        }
    }

    #[test]
    fn orthogonality_residuals_shrink_with_paths() {
        let spec = ProblemSpec::builder(Dims::scalar())
            .sigma_const(vec![1.0])
            .f(GenFn::new(1, 1, |a, o| o[0] = 0.5 * a.y[0].sin()))
            .dy_f(GenFn::new(1, 1, |a, o| o[0] = 0.5 * a.y[0].cos()))
            .xi(StateFn::new(1, 1, |s, x, o| o[0] = (x[0] + s).sin()))
            .ds_xi(StateFn::new(1, 1, |s, x, o| o[0] = (x[0] + s).cos()))
            .build()
            .unwrap();
        let grids = Grids::aligned(1.0, 10).unwrap();
        let rms: Vec<f64> = [500, 8000]
            .iter()
            .map(|&n| {
                let ens = simulate_paths(&spec, &grids.time, n, 12).unwrap();
                solve_system(&spec, &ens, &grids, RegressionBasis::default(), PicardOptions::default()).unwrap().ortho_residuals.rms()
            })
            .collect();
        // Sixteen times the paths; the fitted rate should be near one half.
        let rate = (rms[0] / rms[1]).ln() / 16f64.ln();
        assert!((0.35..=0.8).contains(&rate), "{rms:?}");
    }

    #[test]
    fn field_dump_round_trips() {
        let spec = exp_diag();
        let (ens, grids) = deterministic(&spec, 1.0, 10);
        let field = solve_system(&spec, &ens, &grids, RegressionBasis::default(), PicardOptions::default()).unwrap();
        let mut buf = Vec::new();
        dump_field(&field, 77, &mut buf).unwrap();
        let (back, seed) = restore_field(&mut buf.as_slice()).unwrap();
        assert_eq!(seed, 77);
        assert_eq!(back.u.data(), field.u.data());
        assert_eq!(back.dv.as_ref().unwrap().data(), field.dv.as_ref().unwrap().data());
        assert_eq!(back.ydiag, field.ydiag);
        assert_eq!(back.picard_trace, field.picard_trace);
        assert_eq!(back.grids, field.grids);
        assert_eq!(back.ortho_residuals, field.ortho_residuals);
        assert!(back.converged);
    }
}
