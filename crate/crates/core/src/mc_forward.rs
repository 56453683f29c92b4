//! Euler–Maruyama simulation of the driftless forward martingale
//! `dX = σ(t, X) dB`.
//!
//! Each path draws its Gaussian increments from its own ChaCha stream keyed by
//! `(seed, path)`, so the ensemble does not depend on how paths are scheduled.

use crate::container::{self, Header};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::spec::ProblemSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::io::{Read, Write};

/// Simulated forward paths.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    grid: TimeGrid,
    n_paths: usize,
    n: usize,
    seed: u64,
    /// `[path][step][component]`, `M + 1` steps.
    states: Vec<f64>,
    /// `[path][step][component]`, `M` steps.
    increments: Vec<f64>,
}

impl PathEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }
    pub fn dim(&self) -> usize {
        self.n
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn states(&self) -> &[f64] {
        &self.states
    }
    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    #[inline]
    pub fn state(&self, p: usize, i: usize) -> &[f64] {
        let k = (p * (self.grid.steps() + 1) + i) * self.n;
        &self.states[k..k + self.n]
    }

    #[inline]
    pub fn increment(&self, p: usize, i: usize) -> &[f64] {
        let k = (p * self.grid.steps() + i) * self.n;
        &self.increments[k..k + self.n]
    }

    /// States of all paths at step `i`, `[path][component]`.
    pub fn states_at(&self, i: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_paths * self.n);
        for p in 0..self.n_paths {
            out.extend_from_slice(self.state(p, i));
        }
        out
    }

    /// Same ensemble with the increments after step `from` of every path
    /// replaced by `other`'s; states are rebuilt from the increments.
    pub fn splice_future(&self, other: &PathEnsemble, from: usize) -> Result<Self> {
        if self.grid != other.grid || self.n_paths != other.n_paths || self.n != other.n {
            return Err(Error::Shape {
                component: "ensemble".into(),
                expected: "matching grids and sizes".into(),
                got: "mismatch".into(),
            });
        }
        let m = self.grid.steps();
        let mut out = self.clone();
        for p in 0..self.n_paths {
            for i in from..m {
                for a in 0..self.n {
                    let k = (p * m + i) * self.n + a;
                    out.increments[k] = other.increments[k];
                    let s = (p * (m + 1) + i) * self.n + a;
                    out.states[s + self.n] = out.states[s] + out.increments[k];
                }
            }
        }
        Ok(out)
    }

    /// Write the ensemble: header, horizon, states, increments.
    pub fn dump<W: Write>(&self, w: &mut W) -> Result<()> {
        Header::new(self.n_paths, self.grid.steps(), self.n, self.seed).write(w)?;
        container::write_f64s(w, &[self.grid.horizon()])?;
        container::write_f64s(w, &self.states)?;
        container::write_f64s(w, &self.increments)
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Self> {
        let h = Header::read(r)?;
        let (n_paths, m, n) = (h.n_paths as usize, h.steps as usize, h.n as usize);
        let horizon = container::read_f64s(r, 1)?[0];
        let grid = TimeGrid::new(horizon, m)?;
        let states = container::read_f64s(r, n_paths * (m + 1) * n)?;
        let increments = container::read_f64s(r, n_paths * m * n)?;
        Ok(Self { grid, n_paths, n, seed: h.seed, states, increments })
    }
}

/// Simulate `n_paths` Euler–Maruyama paths of `dX = σ(t, X) dB` from `x0`.
pub fn simulate_paths(spec: &ProblemSpec, grid: &TimeGrid, n_paths: usize, seed: u64) -> Result<PathEnsemble> {
    if n_paths == 0 {
        return Err(Error::Config("n_paths must be at least 1".into()));
    }
    let dims = spec.dims();
    let (n, m) = (dims.n, dims.m);
    let steps = grid.steps();
    let sqrt_dt = grid.dt().sqrt();
    let x0 = spec.x0();
    let mut states = vec![0.0; n_paths * (steps + 1) * n];
    let mut increments = vec![0.0; n_paths * steps * n];

    states
        .par_chunks_mut((steps + 1) * n)
        .zip(increments.par_chunks_mut(steps * n))
        .enumerate()
        .try_for_each(|(p, (xs, dxs))| -> Result<()> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(p as u64);
            let mut sig = vec![0.0; n * m];
            let mut db = vec![0.0; m];
            xs[..n].copy_from_slice(x0);
            for i in 0..steps {
                let (head, tail) = xs.split_at_mut((i + 1) * n);
                let x = &head[i * n..];
                spec.sigma().eval(grid.node(i), x, &mut sig);
                if let Some(k) = sig.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Simulation {
                        path: p,
                        step: i,
                        reason: format!("sigma component {k} is {}", sig[k]),
                    });
                }
                for b in db.iter_mut() {
                    let g: f64 = rng.sample(StandardNormal);
                    *b = sqrt_dt * g;
                }
                let dx = &mut dxs[i * n..(i + 1) * n];
                for a in 0..n {
                    dx[a] = (0..m).map(|k| sig[a * m + k] * db[k]).sum();
                    tail[a] = x[a] + dx[a];
                }
            }
            Ok(())
        })?;

    Ok(PathEnsemble { grid: grid.clone(), n_paths, n, seed, states, increments })
}

/// Ensemble average of `‖Σ dX dXᵀ − Σ σσᵀ(t_i, X_i) Δt‖_F`.
pub fn quadratic_variation_check(ens: &PathEnsemble, spec: &ProblemSpec) -> Result<f64> {
    let dims = spec.dims();
    if dims.n != ens.dim() {
        return Err(Error::Shape {
            component: "ensemble".into(),
            expected: format!("state dimension {}", dims.n),
            got: ens.dim().to_string(),
        });
    }
    let (n, m) = (dims.n, dims.m);
    let grid = ens.grid();
    let dt = grid.dt();
    let total: f64 = (0..ens.n_paths())
        .into_par_iter()
        .map(|p| {
            let mut acc = vec![0.0; n * n];
            let mut sig = vec![0.0; n * m];
            for i in 0..grid.steps() {
                let dx = ens.increment(p, i);
                spec.sigma().eval(grid.node(i), ens.state(p, i), &mut sig);
                for a in 0..n {
                    for b in 0..n {
                        let ss: f64 = (0..m).map(|k| sig[a * m + k] * sig[b * m + k]).sum();
                        acc[a * n + b] += dx[a] * dx[b] - ss * dt;
                    }
                }
            }
            acc.iter().map(|v| v * v).sum::<f64>().sqrt()
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    Ok(total / ens.n_paths() as f64)
}
