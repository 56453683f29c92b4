//! Explicit finite differences for one-dimensional states: the representation
//! PDE of a BSVIE and the two equilibrium HJB formulations.
//!
//! All schemes march backward from the terminal slice with explicit Euler
//! steps and central differences in `x`. The diagonal arguments are read from
//! the slice `s = t_{i+1}` at the current sub-step level. Boundary values are
//! extrapolated linearly.

use crate::error::{Error, Result};
use crate::field::BsvieSolution;
use crate::grid::Grids;
use crate::mc_forward::PathEnsemble;
use crate::spec::{GenArgs, ProblemSpec, StateFn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::sync::Arc;

/// Values above this magnitude abort the march.
pub const BLOW_UP_LIMIT: f64 = 1e12;

/// Largest admissible `σ²Δt/Δx²` of the explicit scheme.
pub const CFL_NUMBER: f64 = 0.4;

/// Uniform spatial grid `lo = x_0 < … < x_K = hi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XGrid {
    lo: f64,
    hi: f64,
    points: usize,
}

impl XGrid {
    pub fn uniform(lo: f64, hi: f64, points: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Grid(format!("x-grid needs finite lo < hi, got [{lo}, {hi}]")));
        }
        if points < 4 {
            return Err(Error::Grid(format!("x-grid needs at least 4 points, got {points}")));
        }
        Ok(Self { lo, hi, points })
    }

    /// `x0 ± 6σ_max√T`, rounded outward to whole multiples of `dx`.
    pub fn around(x0: f64, sigma_max: f64, horizon: f64, dx: f64) -> Result<Self> {
        if !(dx.is_finite() && dx > 0.0) {
            return Err(Error::Grid(format!("dx must be positive, got {dx}")));
        }
        let half = ((6.0 * sigma_max * horizon.sqrt()) / dx).ceil().max(2.0) as usize;
        Self::uniform(x0 - half as f64 * dx, x0 + half as f64 * dx, 2 * half + 1)
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }
    pub fn hi(&self) -> f64 {
        self.hi
    }
    pub fn len(&self) -> usize {
        self.points
    }
    pub fn is_empty(&self) -> bool {
        false
    }
    pub fn dx(&self) -> f64 {
        (self.hi - self.lo) / (self.points - 1) as f64
    }
    pub fn node(&self, k: usize) -> f64 {
        if k + 1 == self.points {
            self.hi
        } else {
            self.lo + k as f64 * self.dx()
        }
    }
    pub fn nodes(&self) -> Vec<f64> {
        (0..self.points).map(|k| self.node(k)).collect()
    }

    /// Cell index and weight for linear interpolation, `None` outside.
    pub fn locate(&self, x: f64) -> Option<(usize, f64)> {
        if !(x >= self.lo && x <= self.hi) {
            return None;
        }
        let pos = (x - self.lo) / self.dx();
        let k = (pos.floor() as usize).min(self.points - 2);
        Some((k, pos - k as f64))
    }
}

/// Finite control grid, sorted ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSet {
    points: Vec<f64>,
}

impl ControlSet {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Config("control set is empty".into()));
        }
        if points.iter().any(|a| !a.is_finite()) {
            return Err(Error::Config("control points must be finite".into()));
        }
        if points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("control points must be strictly ascending".into()));
        }
        Ok(Self { points })
    }

    /// `n` equally spaced points on `[lo, hi]`.
    pub fn linspace(lo: f64, hi: f64, n: usize) -> Result<Self> {
        match n {
            0 => Self::new(Vec::new()),
            1 => Self::new(vec![lo]),
            _ => Self::new((0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()),
        }
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }
}

/// `(s, t, x, a) → ℝ`.
pub type RewardFn = Arc<dyn Fn(f64, f64, f64, f64) -> f64 + Send + Sync>;
/// `(t, x, a) → ℝ`.
pub type ControlDriftFn = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;

/// Data of a time-inconsistent control problem with scalar state.
///
/// `ḡ(s, t, x, a, v) = f̄(s, t, x, a) + v·σ(t, x)·b(t, x, a)` and
/// `H(s, t, x, v) = max_a ḡ`.
#[derive(Clone)]
pub struct HjbSpec {
    pub x0: f64,
    pub bar_f: RewardFn,
    pub ds_bar_f: RewardFn,
    pub b: ControlDriftFn,
    pub sigma: StateFn,
    pub sigma_max: f64,
    pub xi: StateFn,
    pub ds_xi: StateFn,
    pub control: ControlSet,
}

impl std::fmt::Debug for HjbSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HjbSpec").field("x0", &self.x0).field("sigma_max", &self.sigma_max).field("control", &self.control).finish()
    }
}

impl HjbSpec {
    /// Zero reward and drift, unit volatility, zero terminal value.
    pub fn new(control: ControlSet) -> Self {
        Self {
            x0: 0.0,
            bar_f: Arc::new(|_, _, _, _| 0.0),
            ds_bar_f: Arc::new(|_, _, _, _| 0.0),
            b: Arc::new(|_, _, _| 0.0),
            sigma: StateFn::constant(1, 1, vec![1.0]),
            sigma_max: 1.0,
            xi: StateFn::zero(1, 1),
            ds_xi: StateFn::zero(1, 1),
            control,
        }
    }

    pub fn with_reward(mut self, bar_f: RewardFn, ds_bar_f: RewardFn) -> Self {
        self.bar_f = bar_f;
        self.ds_bar_f = ds_bar_f;
        self
    }

    pub fn with_drift(mut self, b: ControlDriftFn) -> Self {
        self.b = b;
        self
    }

    pub fn with_sigma(mut self, sigma: StateFn, sigma_max: f64) -> Self {
        self.sigma = sigma;
        self.sigma_max = sigma_max;
        self
    }

    pub fn with_sigma_const(self, sigma: f64) -> Self {
        self.with_sigma(StateFn::constant(1, 1, vec![sigma]), sigma.abs())
    }

    pub fn with_terminal(mut self, xi: StateFn, ds_xi: StateFn) -> Self {
        self.xi = xi;
        self.ds_xi = ds_xi;
        self
    }

    pub fn with_x0(mut self, x0: f64) -> Self {
        self.x0 = x0;
        self
    }

    fn sigma_at(&self, t: f64, x: f64) -> f64 {
        let mut out = [0.0];
        self.sigma.eval(t, &[x], &mut out);
        out[0]
    }

    pub fn g_bar(&self, s: f64, t: f64, x: f64, a: f64, v: f64) -> f64 {
        (self.bar_f)(s, t, x, a) + v * (self.sigma_at(t, x) * (self.b)(t, x, a))
    }

    /// The BSVIE obtained by freezing the only control, if there is one.
    pub fn control_free_problem(&self) -> Result<ProblemSpec> {
        let [a0] = self.control.points() else {
            return Err(Error::Config(format!("control set has {} points, a control-free problem needs exactly one", self.control.points().len())));
        };
        let a0 = *a0;
        let (f, df, b) = (self.bar_f.clone(), self.ds_bar_f.clone(), self.b.clone());
        let mut builder = ProblemSpec::builder(crate::spec::Dims::scalar())
            .x0(vec![self.x0])
            .sigma(self.sigma.clone(), self.sigma_max)
            .f(crate::spec::GenFn::new(1, 1, move |g, o| o[0] = f(g.s, g.t, g.x[0], a0)))
            .ds_f(crate::spec::GenFn::new(1, 1, move |g, o| o[0] = df(g.s, g.t, g.x[0], a0)))
            .xi(self.xi.clone())
            .ds_xi(self.ds_xi.clone())
            .lipschitz(0.0, 0.0);
        if let Some(c) = self.sigma.as_constant() {
            builder = builder.sigma_const(c.to_vec());
        }
        builder.drift_b(StateFn::new(1, 1, move |t, x, o| o[0] = b(t, x[0], a0))).build()
    }
}

/// Exhaustive maximisation of `ḡ` over the control points.
///
/// Ties go to the smallest control index.
pub fn hamiltonian_argmax(hjb: &HjbSpec, s: f64, t: f64, x: f64, v: f64) -> Result<(f64, f64)> {
    let sig = hjb.sigma_at(t, x);
    argmax_with(hjb, s, t, x, v, sig).map(|(a, h, _)| (a, h))
}

/// `(a*, H, σ·b(a*))`.
fn argmax_with(hjb: &HjbSpec, s: f64, t: f64, x: f64, v: f64, sig: f64) -> Result<(f64, f64, f64)> {
    let mut best: Option<(f64, f64, f64)> = None;
    for &a in hjb.control.points() {
        let sb = sig * (hjb.b)(t, x, a);
        let g = (hjb.bar_f)(s, t, x, a) + v * sb;
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite g_bar at control a = {a} (s = {s}, t = {t}, x = {x}, v = {v})")));
        }
        if best.is_none_or(|(_, h, _)| g > h) {
            best = Some((a, g, sb));
        }
    }
    Ok(best.expect("control set is non-empty"))
}

/// Which equation a [`PdeSolution`] solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PdeKind {
    Representation,
    Wy,
    Bkm,
}

/// Sub-stepping of the explicit scheme.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PdeOptions {
    /// Sub-steps per time step; `None` picks the smallest stable count.
    pub substeps: Option<usize>,
}

/// Grid values of a PDE solution, stored at the coarse time levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdeSolution {
    pub kind: PdeKind,
    pub sgrid: Vec<f64>,
    pub tgrid: Vec<f64>,
    pub xgrid: XGrid,
    pub substeps: usize,
    /// `v[j][i][k]`; the `𝒥` family for [`PdeKind::Bkm`].
    pub v: Vec<f64>,
    pub vx: Vec<f64>,
    /// `V[i][k]` of the BKM system.
    pub vfun: Option<Vec<f64>>,
}

impl PdeSolution {
    fn idx(&self, j: usize, i: usize, k: usize) -> usize {
        (j * self.tgrid.len() + i) * self.xgrid.len() + k
    }

    pub fn v_at(&self, j: usize, i: usize, k: usize) -> f64 {
        self.v[self.idx(j, i, k)]
    }

    pub fn vx_at(&self, j: usize, i: usize, k: usize) -> f64 {
        self.vx[self.idx(j, i, k)]
    }

    /// The `𝒥` family of a BKM solution.
    pub fn jfun(&self) -> Option<&[f64]> {
        (self.kind == PdeKind::Bkm).then_some(&self.v)
    }

    pub fn vfun_at(&self, i: usize, k: usize) -> Option<f64> {
        self.vfun.as_ref().map(|v| v[i * self.xgrid.len() + k])
    }

    /// `v(t_i, t_i, x_k)`.
    pub fn diag_at(&self, i: usize, k: usize) -> f64 {
        self.v_at(i, i, k)
    }

    /// `(v, vx)` at `(s_j, t_i, x)` by linear interpolation in `x`.
    pub fn interpolate(&self, j: usize, i: usize, x: f64) -> Option<(f64, f64)> {
        let (k, w) = self.xgrid.locate(x)?;
        let a = self.idx(j, i, k);
        Some(((1.0 - w) * self.v[a] + w * self.v[a + 1], (1.0 - w) * self.vx[a] + w * self.vx[a + 1]))
    }

    /// Rows `s,t,x,v,vx` with 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "s,t,x,v,vx")?;
        let xs = self.xgrid.nodes();
        for (j, s) in self.sgrid.iter().enumerate() {
            for (i, t) in self.tgrid.iter().enumerate() {
                for (k, x) in xs.iter().enumerate() {
                    let a = self.idx(j, i, k);
                    writeln!(w, "{s:.16e},{t:.16e},{x:.16e},{:.16e},{:.16e}", self.v[a], self.vx[a])?;
                }
            }
        }
        Ok(())
    }

    /// Rows `t,x,V` of a BKM solution.
    pub fn write_vfun_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let Some(vf) = &self.vfun else {
            return Err(Error::State("solution has no V function".into()));
        };
        writeln!(w, "t,x,V")?;
        let xs = self.xgrid.nodes();
        for (i, t) in self.tgrid.iter().enumerate() {
            for (k, x) in xs.iter().enumerate() {
                writeln!(w, "{t:.16e},{x:.16e},{:.16e}", vf[i * xs.len() + k])?;
            }
        }
        Ok(())
    }

    /// Grid metadata for the JSON sidecar of the CSV export.
    pub fn sidecar(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": self.kind,
            "columns": ["s", "t", "x", "v", "vx"],
            "s_nodes": self.sgrid.len(),
            "t_nodes": self.tgrid.len(),
            "horizon": self.tgrid.last(),
            "dt": self.tgrid.get(1).map(|t1| t1 - self.tgrid[0]),
            "x_lo": self.xgrid.lo(),
            "x_hi": self.xgrid.hi(),
            "x_points": self.xgrid.len(),
            "dx": self.xgrid.dx(),
            "substeps": self.substeps,
            "has_vfun": self.vfun.is_some(),
        })
    }
}

enum Mode<'a> {
    Representation(&'a ProblemSpec),
    Wy(&'a HjbSpec),
    Bkm(&'a HjbSpec),
}

impl Mode<'_> {
    fn kind(&self) -> PdeKind {
        match self {
            Mode::Representation(_) => PdeKind::Representation,
            Mode::Wy(_) => PdeKind::Wy,
            Mode::Bkm(_) => PdeKind::Bkm,
        }
    }

    fn sigma(&self) -> &StateFn {
        match self {
            Mode::Representation(p) => p.sigma(),
            Mode::Wy(h) | Mode::Bkm(h) => &h.sigma,
        }
    }

    fn xi(&self) -> &StateFn {
        match self {
            Mode::Representation(p) => p.xi(),
            Mode::Wy(h) | Mode::Bkm(h) => &h.xi,
        }
    }
}

/// Central differences inside, one-sided at the ends.
fn gradient(v: &[f64], dx: f64, out: &mut [f64]) {
    let k = v.len();
    for q in 1..k - 1 {
        out[q] = (v[q + 1] - v[q - 1]) / (2.0 * dx);
    }
    out[0] = (v[1] - v[0]) / dx;
    out[k - 1] = (v[k - 1] - v[k - 2]) / dx;
}

fn extrapolate_ends(v: &mut [f64]) {
    let k = v.len();
    v[0] = 2.0 * v[1] - v[2];
    v[k - 1] = 2.0 * v[k - 2] - v[k - 3];
}

/// Second-order `∂_s` of a family at slice `j` from three neighbouring slices.
fn ds_stencil(slices: usize, j: usize) -> Option<[(usize, f64); 3]> {
    if j >= 2 {
        Some([(j, 1.5), (j - 1, -2.0), (j - 2, 0.5)])
    } else if j + 2 < slices {
        Some([(j, -1.5), (j + 1, 2.0), (j + 2, -0.5)])
    } else if j >= 1 && j + 1 < slices {
        Some([(j + 1, 0.5), (j - 1, -0.5), (j, 0.0)])
    } else {
        None
    }
}

/// Sub-step count from the volatility sampled on the coarse grid.
fn substeps_for(sigma: &StateFn, grids: &Grids, xgrid: &XGrid, opts: PdeOptions) -> Result<usize> {
    let mut smax: f64 = 0.0;
    let mut out = [0.0];
    for &t in grids.time.nodes() {
        for k in 0..xgrid.len() {
            sigma.eval(t, &[xgrid.node(k)], &mut out);
            if !out[0].is_finite() {
                return Err(Error::Numeric(format!("non-finite sigma at t = {t}, x = {}", xgrid.node(k))));
            }
            smax = smax.max(out[0].abs());
        }
    }
    let dt = grids.time.dt();
    let dx = xgrid.dx();
    let max_dt = if smax > 0.0 { CFL_NUMBER * dx * dx / (smax * smax) } else { f64::INFINITY };
    match opts.substeps {
        Some(0) => Err(Error::Config("substeps must be positive".into())),
        Some(k) => {
            if dt / k as f64 > max_dt * (1.0 + 1e-12) {
                Err(Error::Config(format!(
                    "explicit scheme is unstable: time step {} exceeds the maximal admissible time step {max_dt} (dx = {dx}, sigma_max = {smax})",
                    dt / k as f64
                )))
            } else {
                Ok(k)
            }
        }
        None => Ok(((dt / max_dt) * (1.0 - 1e-12)).ceil().max(1.0) as usize),
    }
}

fn check_grids(grids: &Grids, op: &str) -> Result<()> {
    grids.require_diagonal_aligned(op)
}

fn march(mode: Mode<'_>, grids: &Grids, xgrid: &XGrid, opts: PdeOptions) -> Result<PdeSolution> {
    let op = match mode.kind() {
        PdeKind::Representation => "solve_representation_pde",
        PdeKind::Wy => "solve_hjb_wy",
        PdeKind::Bkm => "solve_hjb_bkm",
    };
    check_grids(grids, op)?;
    if let Mode::Representation(p) = mode {
        let dims = p.dims();
        if (dims.n, dims.m, dims.d) != (1, 1, 1) {
            return Err(Error::Config(format!("{op} handles scalar problems only, got n = {}, m = {}, d = {}", dims.n, dims.m, dims.d)));
        }
    }
    let substeps = substeps_for(mode.sigma(), grids, xgrid, opts)?;
    let slices = grids.param.len();
    if matches!(mode, Mode::Bkm(_)) && slices < 3 {
        return Err(Error::Config("solve_hjb_bkm needs at least two parameter intervals".into()));
    }
    if let Mode::Wy(h) | Mode::Bkm(h) = mode {
        validate_hjb(h, grids, xgrid)?;
    }
    let steps = grids.time.len();
    let kx = xgrid.len();
    let xs = xgrid.nodes();
    let dx = xgrid.dx();
    let m = grids.time.steps();

    let mut v = vec![0.0; slices * steps * kx];
    let mut vx = vec![0.0; slices * steps * kx];
    let mut cur = vec![0.0; slices * kx];
    let mut out = [0.0];
    for j in 0..slices {
        let s = grids.param.node(j);
        for k in 0..kx {
            mode.xi().eval(s, &[xs[k]], &mut out);
            cur[j * kx + k] = out[0];
        }
    }
    let mut vfun = match mode {
        Mode::Bkm(_) => Some(vec![0.0; steps * kx]),
        _ => None,
    };
    let mut big_v: Vec<f64> = match mode {
        Mode::Bkm(_) => {
            let horizon = grids.time.horizon();
            (0..kx)
                .map(|k| {
                    mode.xi().eval(horizon, &[xs[k]], &mut out);
                    out[0]
                })
                .collect()
        }
        _ => Vec::new(),
    };

    let store = |level: usize, cur: &[f64], v: &mut [f64], vx: &mut [f64]| {
        for j in 0..slices {
            let a = (j * steps + level) * kx;
            v[a..a + kx].copy_from_slice(&cur[j * kx..(j + 1) * kx]);
            gradient(&cur[j * kx..(j + 1) * kx], dx, &mut vx[a..a + kx]);
        }
    };
    store(m, &cur, &mut v, &mut vx);
    if let Some(vf) = vfun.as_mut() {
        vf[m * kx..].copy_from_slice(&big_v);
    }

    let mut next = vec![0.0; slices * kx];
    let mut sig = vec![0.0; kx];
    let mut sb = vec![0.0; kx];
    let mut astar = vec![0.0; kx];
    let mut ham = vec![0.0; kx];
    let mut dsj = vec![0.0; kx];
    let mut diag_x = vec![0.0; kx];
    let mut big_vx = vec![0.0; kx];
    let h = grids.time.dt() / substeps as f64;

    for i in (0..m).rev() {
        let jd = i + 1;
        let t_hi = grids.time.node(i + 1);
        for sub in 0..substeps {
            let t = t_hi - sub as f64 * h;
            let diag: Vec<f64> = cur[jd * kx..(jd + 1) * kx].to_vec();
            gradient(&diag, dx, &mut diag_x);
            for k in 0..kx {
                mode.sigma().eval(t, &[xs[k]], &mut out);
                sig[k] = out[0];
            }
            match mode {
                Mode::Representation(p) => {
                    if let Some(b) = p.drift_b() {
                        for k in 0..kx {
                            b.eval(t, &[xs[k]], &mut out);
                            sb[k] = sig[k] * out[0];
                        }
                    }
                }
                Mode::Wy(hj) => {
                    for k in 0..kx {
                        let (a, _, s_b) = argmax_with(hj, t, t, xs[k], diag_x[k], sig[k])?;
                        astar[k] = a;
                        sb[k] = s_b;
                    }
                }
                Mode::Bkm(hj) => {
                    gradient(&big_v, dx, &mut big_vx);
                    for k in 0..kx {
                        let (a, hv, s_b) = argmax_with(hj, t, t, xs[k], big_vx[k], sig[k])?;
                        astar[k] = a;
                        sb[k] = s_b;
                        ham[k] = hv;
                    }
                    let ds = grids.param.ds().ok_or_else(|| Error::Config("solve_hjb_bkm needs a uniform parameter grid".into()))?;
                    let st = ds_stencil(slices, jd).expect("at least three slices");
                    for k in 0..kx {
                        dsj[k] = st.iter().map(|&(j, w)| w * cur[j * kx + k]).sum::<f64>() / ds;
                    }
                }
            }

            let (cur_ref, sig_ref, sb_ref, a_ref, dx_ref) = (&cur, &sig, &sb, &astar, &diag_x);
            let diag_ref = &diag;
            let xs_ref = &xs;
            let mode_ref = &mode;
            next.par_chunks_mut(kx).enumerate().try_for_each(|(j, nj)| -> Result<()> {
                let s = grids.param.node(j);
                let cj = &cur_ref[j * kx..(j + 1) * kx];
                for k in 1..kx - 1 {
                    let x = xs_ref[k];
                    let own_x = (cj[k + 1] - cj[k - 1]) / (2.0 * dx);
                    let lap = (cj[k + 1] - 2.0 * cj[k] + cj[k - 1]) / (dx * dx);
                    let g = match mode_ref {
                        Mode::Representation(p) => {
                            let mut o = [0.0];
                            p.f().eval(
                                &GenArgs { s, t, x: &[x], y: &[cj[k]], z: &[own_x], u: &[diag_ref[k]], v: &[dx_ref[k]] },
                                &mut o,
                            );
                            o[0] + own_x * sb_ref[k]
                        }
                        Mode::Wy(hj) | Mode::Bkm(hj) => (hj.bar_f)(s, t, x, a_ref[k]) + own_x * sb_ref[k],
                    };
                    nj[k] = cj[k] + h * (0.5 * sig_ref[k] * sig_ref[k] * lap + g);
                }
                extrapolate_ends(nj);
                for k in 0..kx {
                    if !(nj[k].abs() <= BLOW_UP_LIMIT) {
                        return Err(Error::BlowUp { s, t: t - h, x: xs_ref[k], value: nj[k] });
                    }
                }
                Ok(())
            })?;
            std::mem::swap(&mut cur, &mut next);

            if matches!(mode, Mode::Bkm(_)) {
                let mut nv = vec![0.0; kx];
                for k in 1..kx - 1 {
                    let lap = (big_v[k + 1] - 2.0 * big_v[k] + big_v[k - 1]) / (dx * dx);
                    nv[k] = big_v[k] + h * (0.5 * sig[k] * sig[k] * lap + ham[k] - dsj[k]);
                }
                extrapolate_ends(&mut nv);
                if let Some(k) = nv.iter().position(|x| !(x.abs() <= BLOW_UP_LIMIT)) {
                    return Err(Error::BlowUp { s: t - h, t: t - h, x: xs[k], value: nv[k] });
                }
                big_v = nv;
            }
        }
        store(i, &cur, &mut v, &mut vx);
        if let Some(vf) = vfun.as_mut() {
            vf[i * kx..(i + 1) * kx].copy_from_slice(&big_v);
        }
    }

    Ok(PdeSolution {
        kind: mode.kind(),
        sgrid: grids.param.nodes().to_vec(),
        tgrid: grids.time.nodes().to_vec(),
        xgrid: xgrid.clone(),
        substeps,
        v,
        vx,
        vfun,
    })
}

fn validate_hjb(h: &HjbSpec, grids: &Grids, xgrid: &XGrid) -> Result<()> {
    let xs = xgrid.nodes();
    for &t in grids.time.nodes() {
        for &x in &xs {
            for &a in h.control.points() {
                let b = (h.b)(t, x, a);
                if !b.is_finite() {
                    return Err(Error::Numeric(format!("non-finite drift b at t = {t}, x = {x}, a = {a}")));
                }
                for &s in grids.param.nodes() {
                    let f = (h.bar_f)(s, t, x, a);
                    if !f.is_finite() {
                        return Err(Error::Numeric(format!("non-finite reward at s = {s}, t = {t}, x = {x}, a = {a}")));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Solves `∂_t v + ½σ²∂²_x v + f(s, t, x, v, ∂_x v, v(t,t,x), ∂_x v(t,t,x)) + ∂_x v·σb = 0`
/// with `v(s, T, x) = ξ(s, x)`.
pub fn solve_representation_pde(spec: &ProblemSpec, grids: &Grids, xgrid: &XGrid, opts: PdeOptions) -> Result<PdeSolution> {
    march(Mode::Representation(spec), grids, xgrid, opts)
}

/// Equilibrium HJB equation for the family `𝒱(s, t, x)`; the control is the
/// maximiser at the diagonal gradient.
pub fn solve_hjb_wy(hjb: &HjbSpec, grids: &Grids, xgrid: &XGrid, opts: PdeOptions) -> Result<PdeSolution> {
    march(Mode::Wy(hjb), grids, xgrid, opts)
}

/// Coupled system for `V(t, x)` and `𝒥(s, t, x)`; `V` carries the
/// `−∂_s 𝒥(t, t, x)` correction.
pub fn solve_hjb_bkm(hjb: &HjbSpec, grids: &Grids, xgrid: &XGrid, opts: PdeOptions) -> Result<PdeSolution> {
    march(Mode::Bkm(hjb), grids, xgrid, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    /// `sup |V − 𝒱(t, t, ·)|`.
    pub value_gap: f64,
    /// Sup of the residual of the `V` equation evaluated on `𝒱(t, t, ·)`.
    pub bkm_residual: f64,
}

/// Compares a WY solution with a BKM solution of the same problem.
///
/// With `V(t, x) = 𝒱(t, t, x)` and `𝒥 = 𝒱`, the `𝒥` equation holds by
/// construction and the `V` equation reduces to
/// `∂_t V(t, x) = ∂_t 𝒱(t, t, x) + ∂_s 𝒥(t, t, x)`. The residual is this
/// identity with backward differences in `t` over `[t_i, t_{i+1}]` and the
/// second-order `s`-difference at `s = t = t_{i+1}`, over interior nodes.
pub fn check_equivalence(wy: &PdeSolution, bkm: &PdeSolution) -> Result<EquivalenceReport> {
    if wy.kind != PdeKind::Wy || bkm.kind != PdeKind::Bkm {
        return Err(Error::Config(format!("check_equivalence expects (wy, bkm), got ({:?}, {:?})", wy.kind, bkm.kind)));
    }
    if wy.sgrid != bkm.sgrid || wy.tgrid != bkm.tgrid || wy.xgrid != bkm.xgrid {
        return Err(Error::Config("check_equivalence needs identical grids".into()));
    }
    let vf = bkm.vfun.as_ref().ok_or_else(|| Error::State("BKM solution has no V function".into()))?;
    let kx = wy.xgrid.len();
    let steps = wy.tgrid.len();
    let slices = wy.sgrid.len();
    let mut value_gap: f64 = 0.0;
    for i in 0..steps {
        for k in 0..kx {
            value_gap = value_gap.max((vf[i * kx + k] - wy.diag_at(i, k)).abs());
        }
    }
    let mut bkm_residual: f64 = 0.0;
    for i in 0..steps - 1 {
        let dt = wy.tgrid[i + 1] - wy.tgrid[i];
        let ds = wy.sgrid[i + 1] - wy.sgrid[i];
        let st = ds_stencil(slices, i + 1).ok_or_else(|| Error::Config("need at least two parameter intervals".into()))?;
        for k in 1..kx - 1 {
            let dt_v = (wy.diag_at(i + 1, k) - wy.diag_at(i, k)) / dt;
            let dt_family = (wy.v_at(i + 1, i + 1, k) - wy.v_at(i + 1, i, k)) / dt;
            let dsj = st.iter().map(|&(j, w)| w * wy.v_at(j, i + 1, k)).sum::<f64>() / ds;
            bkm_residual = bkm_residual.max((dt_v - dt_family - dsj).abs());
        }
    }
    Ok(EquivalenceReport { value_gap, bkm_residual })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeynmanKacReport {
    /// RMS of `Y[j][i][p] − v(s_j, t_i, X_{t_i}^p)`.
    pub y_rms: f64,
    /// RMS of `Z[j][i][p] − ∂_x v(s_j, t_i, X_{t_i}^p)` over `i < M`.
    pub z_rms: f64,
    /// Fraction of path points outside the spatial grid.
    pub exit_fraction: f64,
}

/// Compares a Monte Carlo BSVIE solution with a PDE solution on the same grids.
pub fn feynman_kac_check(pde: &PdeSolution, bsvie: &BsvieSolution, ens: &PathEnsemble) -> Result<FeynmanKacReport> {
    if pde.tgrid != bsvie.grids.time.nodes() || pde.sgrid != bsvie.grids.param.nodes() {
        return Err(Error::Config("feynman_kac_check needs identical time and parameter grids".into()));
    }
    if bsvie.dims.n != 1 || bsvie.dims.d != 1 {
        return Err(Error::Config("feynman_kac_check handles scalar problems only".into()));
    }
    let steps = pde.tgrid.len();
    let paths = ens.n_paths();
    if bsvie.y.paths() != paths || ens.grid().len() != steps {
        return Err(Error::Config("ensemble does not match the BSVIE solution".into()));
    }
    let mut loc = Vec::with_capacity(steps * paths);
    let mut exits = 0usize;
    for i in 0..steps {
        for p in 0..paths {
            let l = pde.xgrid.locate(ens.state(p, i)[0]);
            exits += l.is_none() as usize;
            loc.push(l);
        }
    }
    let exit_fraction = exits as f64 / (steps * paths) as f64;
    if exit_fraction > 0.05 {
        return Err(Error::Domain(format!(
            "{:.2}% of path points leave [{}, {}]; widen the x-grid",
            100.0 * exit_fraction,
            pde.xgrid.lo(),
            pde.xgrid.hi()
        )));
    }
    let (mut ey, mut ny, mut ez, mut nz) = (0.0, 0usize, 0.0, 0usize);
    for j in 0..pde.sgrid.len() {
        for i in 0..steps {
            for p in 0..paths {
                let Some((k, w)) = loc[i * paths + p] else { continue };
                let a = pde.idx(j, i, k);
                let v = (1.0 - w) * pde.v[a] + w * pde.v[a + 1];
                ey += (bsvie.y.at(j, i, p)[0] - v).powi(2);
                ny += 1;
                if i + 1 < steps {
                    let vx = (1.0 - w) * pde.vx[a] + w * pde.vx[a + 1];
                    ez += (bsvie.z.at(j, i, p)[0] - vx).powi(2);
                    nz += 1;
                }
            }
        }
    }
    let rms = |e: f64, n: usize| if n == 0 { 0.0 } else { (e / n as f64).sqrt() };
    Ok(FeynmanKacReport { y_rms: rms(ey, ny), z_rms: rms(ez, nz), exit_fraction })
}
