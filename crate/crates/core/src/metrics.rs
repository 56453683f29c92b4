//! Monte Carlo estimators of the solution norms, the a priori ratio and the
//! stability experiment.
//!
//! Every entry of a [`NormReport`] is a squared norm.

use crate::bsde_engine::{Engine, SigmaTable};
use crate::error::{Error, Result};
use crate::field::{FamilyField, FieldSolution, PathField};
use crate::grid::{Grids, TimeGrid};
use crate::mc_forward::PathEnsemble;
use crate::spec::{GenArgs, ProblemSpec, StateFn};
use crate::volterra_system::{solve_system_with, PicardOptions};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// `E[max_i e^{c t_i} |Y_i|²]`.
pub fn s2(field: &PathField, grid: &TimeGrid, c: f64) -> f64 {
    let (steps, paths) = (field.steps(), field.paths());
    let mut total = 0.0;
    for p in 0..paths {
        let mut worst: f64 = 0.0;
        for i in 0..steps {
            let w = (c * grid.node(i)).exp();
            worst = worst.max(w * sq(field.at(i, p)));
        }
        total += worst;
    }
    total / paths as f64
}

/// `E[Σ_{i<M} e^{c t_i} ‖σᵀ Z_i‖² Δt]`.
pub fn h2(field: &PathField, sigma: &SigmaTable, grid: &TimeGrid, c: f64) -> f64 {
    let (n, _) = sigma.dims();
    let d = field.width() / n;
    let paths = field.paths();
    let dt = grid.dt();
    let mut total = 0.0;
    for i in 0..grid.steps() {
        let w = (c * grid.node(i)).exp() * dt;
        let mut acc = 0.0;
        for p in 0..paths {
            acc += sigma.weighted_sq(i, p, field.at(i, p), d);
        }
        total += w * acc;
    }
    total / paths as f64
}

/// `E[Σ_{i<M} e^{c t_i} |Y_i|² Δt]`.
pub fn l2(field: &PathField, grid: &TimeGrid, c: f64) -> f64 {
    let paths = field.paths();
    let dt = grid.dt();
    let mut total = 0.0;
    for i in 0..grid.steps() {
        let w = (c * grid.node(i)).exp() * dt;
        total += w * (0..paths).map(|p| sq(field.at(i, p))).sum::<f64>();
    }
    total / paths as f64
}

fn sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn family_sup<F: Fn(&PathField) -> f64 + Sync>(family: &FamilyField, norm: F) -> f64 {
    (0..family.slices())
        .into_par_iter()
        .map(|j| norm(&family.slice(j)))
        .collect::<Vec<_>>()
        .into_iter()
        .fold(0.0, f64::max)
}

/// `sup_j` of the 𝕊² norms of the slices of a family.
pub fn s22_sup(family: &FamilyField, grid: &TimeGrid, c: f64) -> f64 {
    family_sup(family, |f| s2(f, grid, c))
}

/// `sup_j` of the ℍ² norms of the slices of a family.
pub fn h22_sup(family: &FamilyField, sigma: &SigmaTable, grid: &TimeGrid, c: f64) -> f64 {
    family_sup(family, |f| h2(f, sigma, grid, c))
}

/// Squared norm estimates of a solution.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    /// 𝕊² of the diagonal equation's `𝒴`.
    pub s2_sup: f64,
    /// ℍ² of the diagonal equation's `𝒵`.
    pub h2: f64,
    /// `sup_s` 𝕊² of `U^s`.
    pub s22_sup: f64,
    /// `sup_s` ℍ² of `V^s`.
    pub h22_sup: f64,
    /// ℍ² of the diagonal `V_t^t`.
    pub diag_h2: f64,
    /// 𝕃² of `𝒴`.
    pub l2: f64,
    pub exp_weight: f64,
}

impl NormReport {
    /// The H̄ norm of `V`: family part plus diagonal part.
    pub fn hbar22(&self) -> f64 {
        self.h22_sup + self.diag_h2
    }
}

/// Array inputs of [`compute_norms`].
pub struct NormInput<'a> {
    pub ydiag: &'a PathField,
    pub zdiag: &'a PathField,
    pub u: &'a FamilyField,
    pub v: &'a FamilyField,
    pub vdiag: &'a PathField,
}

impl<'a> NormInput<'a> {
    /// The arrays of a solved system; the diagonal of `V` is the reconstructed
    /// one when available and the direct diagonal read otherwise.
    pub fn from_field(field: &'a FieldSolution, fallback_vdiag: &'a mut Option<PathField>) -> Self {
        let vdiag = match &field.vdiag_reconstructed {
            Some(v) => v,
            None => fallback_vdiag.insert(field.v.diagonal()),
        };
        Self { ydiag: &field.ydiag, zdiag: &field.zdiag, u: &field.u, v: &field.v, vdiag }
    }
}

pub fn compute_norms(input: &NormInput<'_>, sigma: &SigmaTable, grid: &TimeGrid, c: f64) -> Result<NormReport> {
    let steps = grid.len();
    let shapes = [
        ("ydiag", input.ydiag.steps()),
        ("zdiag", input.zdiag.steps()),
        ("u", input.u.steps()),
        ("v", input.v.steps()),
        ("vdiag", input.vdiag.steps()),
        ("sigma", sigma.steps()),
    ];
    for (name, s) in shapes {
        if s != steps {
            return Err(Error::Shape { component: name.into(), expected: format!("{steps} steps"), got: s.to_string() });
        }
    }
    Ok(NormReport {
        s2_sup: s2(input.ydiag, grid, c),
        h2: h2(input.zdiag, sigma, grid, c),
        s22_sup: s22_sup(input.u, grid, c),
        h22_sup: h22_sup(input.v, sigma, grid, c),
        diag_h2: h2(input.vdiag, sigma, grid, c),
        l2: l2(input.ydiag, grid, c),
        exp_weight: c,
    })
}

/// Norms of a solved system with weight `c`.
pub fn field_norms(field: &FieldSolution, sigma: &SigmaTable, c: f64) -> Result<NormReport> {
    let mut fallback = None;
    let input = NormInput::from_field(field, &mut fallback);
    compute_norms(&input, sigma, &field.grids.time, c)
}

/// The a priori diagnostic: data norm, solution norm and their ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AprioriReport {
    pub i0_sq: f64,
    pub sol_sq: f64,
    /// `sol_sq / i0_sq`; `None` when both vanish.
    pub ratio: Option<f64>,
    /// Nonzero solution with vanishing data.
    pub anomaly: bool,
}

/// Data norm `I₀²` against the solution norm `‖h‖²`.
///
/// Data terms: `E|ξ(T, X_T)|²`, `sup_s E|ξ(s, X_T)|²`, `sup_s E|∂_sξ(s, X_T)|²`
/// and the `L^{1,2}`-type norms `E[(∫|·| dt)²]` of `f(t, t, X_t, 0)`,
/// `f(s, t, X_t, 0)` and `∂_s f(s, t, X_t, 0)`. The solution norm sums the
/// squared norms of `𝒴, 𝒵, U, V` (with its diagonal), `∂U` and `∂V`.
pub fn apriori_report(field: &FieldSolution, engine: &Engine<'_>) -> Result<AprioriReport> {
    let spec = engine.spec();
    let ens = engine.ensemble();
    let grids = &field.grids;
    let grid = &grids.time;
    let dims = spec.dims();
    let (n, d) = (dims.n, dims.d);
    let paths = ens.n_paths();
    let m_steps = grid.steps();
    let dt = grid.dt();
    let horizon = grid.horizon();

    let xi_norm = |g: &StateFn, s: f64| -> f64 {
        let mut out = vec![0.0; d];
        (0..paths)
            .map(|p| {
                g.eval(s, ens.state(p, m_steps), &mut out);
                sq(&out)
            })
            .sum::<f64>()
            / paths as f64
    };
    let zeros_d = vec![0.0; d];
    let zeros_nd = vec![0.0; n * d];
    let gen_norm = |g: &crate::spec::GenFn, s: Option<f64>| -> f64 {
        let mut out = vec![0.0; d];
        (0..paths)
            .map(|p| {
                let mut integral = 0.0;
                for i in 0..m_steps {
                    let t = grid.node(i);
                    let args = GenArgs {
                        s: s.unwrap_or(t),
                        t,
                        x: ens.state(p, i),
                        y: &zeros_d,
                        z: &zeros_nd,
                        u: &zeros_d,
                        v: &zeros_nd,
                    };
                    g.eval(&args, &mut out);
                    integral += sq(&out).sqrt() * dt;
                }
                integral * integral
            })
            .sum::<f64>()
            / paths as f64
    };
    let sup_over_s = |h: &dyn Fn(f64) -> f64| grids.param.nodes().iter().map(|&s| h(s)).fold(0.0, f64::max);

    let i0_sq = xi_norm(spec.xi(), horizon)
        + sup_over_s(&|s| xi_norm(spec.xi(), s))
        + sup_over_s(&|s| xi_norm(spec.ds_xi(), s))
        + gen_norm(spec.f(), None)
        + sup_over_s(&|s| gen_norm(spec.f(), Some(s)))
        + sup_over_s(&|s| gen_norm(spec.ds_f(), Some(s)));

    let sigma = engine.sigma();
    let norms = field_norms(field, sigma, 0.0)?;
    let mut sol_sq = norms.s2_sup + norms.h2 + norms.s22_sup + norms.hbar22();
    if let Some(du) = &field.du {
        sol_sq += s22_sup(du, grid, 0.0);
    }
    if let Some(dv) = &field.dv {
        sol_sq += h22_sup(dv, sigma, grid, 0.0);
    }
    let ratio = if i0_sq > 0.0 { Some(sol_sq / i0_sq) } else { None };
    Ok(AprioriReport { i0_sq, sol_sq, ratio, anomaly: i0_sq == 0.0 && sol_sq > 0.0 })
}

/// One row of a stability table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub eps: f64,
    /// `‖δ solution‖`, `None` when the perturbed run failed.
    pub diff: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityTable {
    pub base_iterations: usize,
    pub rows: Vec<StabilityRow>,
}

impl StabilityTable {
    /// `diff[k] / diff[k+1]` for consecutive successful rows with nonzero differences.
    pub fn ratios(&self) -> Vec<f64> {
        self.rows
            .windows(2)
            .filter_map(|w| match (w[0].diff, w[1].diff) {
                (Some(a), Some(b)) if a > 0.0 && b > 0.0 => Some(a / b),
                _ => None,
            })
            .collect()
    }
}

/// `‖a − b‖` in the norm of the whole system: square root of the sum of the
/// squared norms of the differences of `𝒴, 𝒵, U, V, V_t^t, ∂U, ∂V`.
pub fn solution_distance(a: &FieldSolution, b: &FieldSolution, sigma: &SigmaTable) -> f64 {
    let grid = &a.grids.time;
    let mut total = s2(&a.ydiag.sub(&b.ydiag), grid, 0.0)
        + h2(&a.zdiag.sub(&b.zdiag), sigma, grid, 0.0)
        + s22_sup(&a.u.sub(&b.u), grid, 0.0)
        + h22_sup(&a.v.sub(&b.v), sigma, grid, 0.0);
    if let (Some(x), Some(y)) = (&a.vdiag_reconstructed, &b.vdiag_reconstructed) {
        total += h2(&x.sub(y), sigma, grid, 0.0);
    }
    if let (Some(x), Some(y)) = (&a.du, &b.du) {
        total += s22_sup(&x.sub(y), grid, 0.0);
    }
    if let (Some(x), Some(y)) = (&a.dv, &b.dv) {
        total += h22_sup(&x.sub(y), sigma, grid, 0.0);
    }
    total.sqrt()
}

/// Solve for `ξ` and `ξ + ε·η` on the same ensemble for each `ε`.
///
/// Perturbed runs perform exactly as many Picard iterations as the base run,
/// so the comparison is between the same discrete maps.
pub fn stability_experiment(
    spec: &ProblemSpec,
    perturbation: (&StateFn, &StateFn),
    eps: &[f64],
    ens: &PathEnsemble,
    grids: &Grids,
    basis: crate::bsde_engine::RegressionBasis,
    opts: PicardOptions,
) -> Result<StabilityTable> {
    let engine = Engine::new(ens, spec, basis)?;
    let base = solve_system_with(&engine, grids, opts)?;
    let iterations = base.iterations();
    let locked = PicardOptions { fixed_iterations: Some(iterations), ..opts };
    let d = spec.dims().d;
    let mut rows = Vec::with_capacity(eps.len());
    for &e in eps {
        let (xi, ds_xi, eta, ds_eta) = (spec.xi().clone(), spec.ds_xi().clone(), perturbation.0.clone(), perturbation.1.clone());
        let pxi = StateFn::new(d, 1, move |s, x, out| {
            let mut buf = vec![0.0; out.len()];
            xi.eval(s, x, out);
            eta.eval(s, x, &mut buf);
            out.iter_mut().zip(&buf).for_each(|(o, b)| *o += e * b);
        });
        let pds = StateFn::new(d, 1, move |s, x, out| {
            let mut buf = vec![0.0; out.len()];
            ds_xi.eval(s, x, out);
            ds_eta.eval(s, x, &mut buf);
            out.iter_mut().zip(&buf).for_each(|(o, b)| *o += e * b);
        });
        let row = spec
            .with_xi(pxi, pds)
            .and_then(|perturbed| {
                let eng = Engine::new(ens, &perturbed, basis)?;
                solve_system_with(&eng, grids, locked)
            })
            .map(|field| solution_distance(&field, &base, engine.sigma()));
        rows.push(match row {
            Ok(diff) => StabilityRow { eps: e, diff: Some(diff), failure: None },
            Err(err) => StabilityRow { eps: e, diff: None, failure: Some(err.to_string()) },
        });
    }
    Ok(StabilityTable { base_iterations: iterations, rows })
}
