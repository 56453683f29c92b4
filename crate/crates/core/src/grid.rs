//! Uniform time grids and parameter grids.
//!
//! The parameter grid indexes the family of backward equations by `s`.
//! Whenever diagonal values `(s = t)` are needed it must coincide with the
//! time grid node for node.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

const ALIGN_TOL: f64 = 1e-12;

/// Uniform grid `0 = t_0 < ... < t_M = T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
    nodes: Vec<f64>,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Grid(format!("horizon must be positive and finite, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::Grid("time grid needs at least one step".into()));
        }
        let nodes = uniform_nodes(horizon, steps);
        Ok(Self { horizon, steps, nodes })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> f64 {
        self.nodes[i]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Nodes `s_0 = 0 < ... < s_J = T` of the parameter `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGrid {
    nodes: Vec<f64>,
    /// Index into the time grid for each node, present when the grid was
    /// validated against a time grid.
    time_index: Option<Vec<usize>>,
}

impl ParamGrid {
    pub fn uniform(horizon: f64, slices: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Grid(format!("horizon must be positive and finite, got {horizon}")));
        }
        if slices == 0 {
            return Err(Error::Grid("parameter grid needs at least one interval".into()));
        }
        Ok(Self { nodes: uniform_nodes(horizon, slices), time_index: None })
    }

    /// The default parameter grid: a copy of the time grid, aligned by construction.
    pub fn from_time_grid(grid: &TimeGrid) -> Self {
        Self { nodes: grid.nodes.clone(), time_index: Some((0..grid.len()).collect()) }
    }

    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::Grid("parameter grid needs at least two nodes".into()));
        }
        if nodes[0] != 0.0 {
            return Err(Error::Grid(format!("parameter grid must start at 0, got {}", nodes[0])));
        }
        if nodes.iter().any(|s| !s.is_finite()) {
            return Err(Error::Grid("parameter grid nodes must be finite".into()));
        }
        if nodes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Grid("parameter grid nodes must be strictly increasing".into()));
        }
        Ok(Self { nodes, time_index: None })
    }

    /// Validate that every node is a time-grid node and that the grid ends at `T`.
    /// Records the alignment map on success.
    pub fn align_with(mut self, grid: &TimeGrid) -> Result<Self> {
        let last = *self.nodes.last().unwrap();
        if (last - grid.horizon()).abs() > ALIGN_TOL * grid.horizon() {
            return Err(Error::Grid(format!(
                "parameter grid ends at {last}, time grid horizon is {}",
                grid.horizon()
            )));
        }
        let dt = grid.dt();
        let mut index = Vec::with_capacity(self.nodes.len());
        for &s in &self.nodes {
            let i = (s / dt).round() as usize;
            if i > grid.steps() || (grid.node(i) - s).abs() > ALIGN_TOL * grid.horizon() {
                return Err(Error::Grid(format!("parameter node {s} is not a time-grid node")));
            }
            index.push(i);
        }
        self.time_index = Some(index);
        Ok(self)
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn node(&self, j: usize) -> f64 {
        self.nodes[j]
    }

    /// Number of intervals `J`.
    pub fn slices(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_aligned(&self) -> bool {
        self.time_index.is_some()
    }

    pub fn time_index(&self) -> Option<&[usize]> {
        self.time_index.as_deref()
    }

    /// Uniform spacing, if the grid is uniform.
    pub fn ds(&self) -> Option<f64> {
        let h = self.nodes[1] - self.nodes[0];
        let uniform = self
            .nodes
            .windows(2)
            .all(|w| ((w[1] - w[0]) - h).abs() <= 1e-12 * self.nodes.last().unwrap());
        uniform.then_some(h)
    }
}

/// The pair of grids every solver runs on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grids {
    pub time: TimeGrid,
    pub param: ParamGrid,
}

impl Grids {
    /// Time grid with `steps` intervals and the identical parameter grid.
    pub fn aligned(horizon: f64, steps: usize) -> Result<Self> {
        let time = TimeGrid::new(horizon, steps)?;
        let param = ParamGrid::from_time_grid(&time);
        Ok(Self { time, param })
    }

    pub fn new(time: TimeGrid, param: ParamGrid) -> Self {
        Self { time, param }
    }

    /// True when the parameter grid coincides with the time grid node for node,
    /// which is what diagonal extraction needs.
    pub fn is_diagonal_aligned(&self) -> bool {
        match self.param.time_index() {
            Some(idx) => idx.len() == self.time.len() && idx.iter().enumerate().all(|(j, &i)| i == j),
            None => false,
        }
    }

    pub fn require_diagonal_aligned(&self, op: &str) -> Result<()> {
        if self.is_diagonal_aligned() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "{op} needs the parameter grid to coincide with the time grid (J = M, aligned nodes)"
            )))
        }
    }
}

fn uniform_nodes(horizon: f64, steps: usize) -> Vec<f64> {
    let mut nodes: Vec<f64> = (0..=steps).map(|i| horizon * i as f64 / steps as f64).collect();
    nodes[steps] = horizon;
    nodes
}
