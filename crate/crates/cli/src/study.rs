//! Refinement studies: rerun the pipeline over a ladder and fit observed orders.

use crate::config::{ConfigError, RunConfig, OVERRIDE_KEYS};
use crate::runner::{execute, RunMetrics, Status};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

/// Parallel override lists, e.g. `M=50,100,200` with `n_paths=1000,4000,16000`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ladder {
    pub keys: Vec<String>,
    /// `rungs[k][i]` is the value of `keys[i]` on rung `k`.
    pub rungs: Vec<Vec<String>>,
}

/// Parses `KEY=v1,v2,...` items. Lists of length one are repeated on every rung.
pub fn parse_ladder(items: &[String]) -> Result<Ladder, ConfigError> {
    let mut keys = Vec::new();
    let mut lists: Vec<Vec<String>> = Vec::new();
    for item in items {
        let (key, values) = item.split_once('=').ok_or_else(|| ConfigError::Invalid { key: "ladder".into(), message: format!("expected KEY=v1,v2,..., got '{item}'") })?;
        let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(ConfigError::Invalid { key: format!("ladder.{key}"), message: "no values".into() });
        }
        let key = key.trim();
        if !OVERRIDE_KEYS.contains(&key) {
            return Err(ConfigError::Invalid { key: format!("ladder.{key}"), message: format!("unknown key; use one of {}", OVERRIDE_KEYS.join(", ")) });
        }
        keys.push(key.to_string());
        lists.push(values);
    }
    let len = lists.iter().map(Vec::len).max().ok_or_else(|| ConfigError::Invalid { key: "ladder".into(), message: "empty ladder".into() })?;
    if let Some((k, l)) = keys.iter().zip(&lists).find(|(_, l)| l.len() != 1 && l.len() != len) {
        return Err(ConfigError::Invalid { key: format!("ladder.{k}"), message: format!("has {} values, other lists have {len}", l.len()) });
    }
    let rungs = (0..len).map(|r| lists.iter().map(|l| l[if l.len() == 1 { 0 } else { r }].clone()).collect()).collect();
    Ok(Ladder { keys, rungs })
}

/// Seed of rung `k`, a splitmix64 step away from the base seed.
pub fn derive_seed(base: u64, k: usize) -> u64 {
    let mut z = base.wrapping_add((k as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rung {
    pub overrides: Vec<(String, String)>,
    pub status: String,
    pub error: Option<String>,
    pub horizon: f64,
    pub m: usize,
    pub n_paths: usize,
    pub dx: f64,
    pub seed: u64,
    pub metrics: RunMetrics,
    /// Error of `E[U^s_0]` against the closed form, or against the finest rung.
    pub y0_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderRow {
    pub metric: String,
    pub variable: String,
    /// Least-squares slope of `log error` against `log h`.
    pub fitted: Option<f64>,
    pub pairwise: Vec<Option<f64>>,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyTable {
    pub rungs: Vec<Rung>,
    pub variable: Option<String>,
    pub orders: Vec<OrderRow>,
}

pub const METRICS: [&str; 7] = ["y0_error", "diag_dynamics", "constraint_d", "m_property", "fk_y_rms", "equivalence_gap", "bkm_residual"];

impl Rung {
    pub fn metric(&self, name: &str) -> Option<f64> {
        let m = &self.metrics;
        match name {
            "y0_error" => self.y0_error,
            "diag_dynamics" => m.diag_dynamics,
            "constraint_d" => m.constraint_d,
            "m_property" => m.m_property,
            "fk_y_rms" => m.fk_y_rms,
            "equivalence_gap" => m.equivalence_gap,
            "bkm_residual" => m.bkm_residual,
            _ => None,
        }
    }

    fn ok(&self) -> bool {
        self.status == Status::Converged.name()
    }
}

/// Runs every rung; a failing rung is recorded and the study goes on.
pub fn convergence_study(config: &RunConfig, ladder: &Ladder) -> StudyTable {
    let mut rungs = Vec::with_capacity(ladder.rungs.len());
    for (k, values) in ladder.rungs.iter().enumerate() {
        let overrides: Vec<(String, String)> = ladder.keys.iter().cloned().zip(values.iter().cloned()).collect();
        let mut rung = Rung {
            overrides: overrides.clone(),
            status: Status::ConfigError.name().into(),
            error: None,
            horizon: config.grids.horizon,
            m: config.grids.m,
            n_paths: config.mc.n_paths,
            dx: config.grids.dx,
            seed: derive_seed(config.mc.seed, k),
            metrics: RunMetrics::default(),
            y0_error: None,
        };
        let mut c = config.clone();
        c.mc.seed = rung.seed;
        let applied = overrides.iter().try_fold(c, |c, (key, value)| c.with_override(key, value));
        match applied {
            Err(e) => rung.error = Some(e.to_string()),
            Ok(c) => {
                (rung.horizon, rung.m, rung.n_paths, rung.dx, rung.seed) = (c.grids.horizon, c.grids.m, c.mc.n_paths, c.grids.dx, c.mc.seed);
                let ex = execute(&c);
                rung.status = ex.status.name().into();
                rung.error = ex.error;
                rung.y0_error = ex.metrics.y0_exact_error;
                rung.metrics = ex.metrics;
            }
        }
        rungs.push(rung);
    }
    let variable = refinement_variable(&rungs);
    if config.problem.exact_y.is_none() {
        errors_against_finest(&mut rungs, variable.as_deref());
    }
    let orders = match &variable {
        Some(v) => METRICS.iter().map(|m| fit_orders(&rungs, m, v)).collect(),
        None => Vec::new(),
    };
    StudyTable { rungs, variable, orders }
}

fn distinct<T: PartialEq>(values: impl Iterator<Item = T>) -> bool {
    let v: Vec<T> = values.collect();
    v.iter().any(|a| *a != v[0])
}

fn refinement_variable(rungs: &[Rung]) -> Option<String> {
    if rungs.len() < 2 {
        None
    } else if distinct(rungs.iter().map(|r| r.horizon / r.m as f64)) {
        Some("dt".into())
    } else if distinct(rungs.iter().map(|r| r.dx)) {
        Some("dx".into())
    } else if distinct(rungs.iter().map(|r| r.n_paths)) {
        Some("n_paths^-1/2".into())
    } else {
        None
    }
}

fn step_size(r: &Rung, variable: &str) -> f64 {
    match variable {
        "dt" => r.horizon / r.m as f64,
        "dx" => r.dx,
        _ => 1.0 / (r.n_paths as f64).sqrt(),
    }
}

fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let k = xs.partition_point(|&v| v < x).clamp(1, xs.len() - 1);
    let w = (x - xs[k - 1]) / (xs[k] - xs[k - 1]);
    ys[k - 1] + w * (ys[k] - ys[k - 1])
}

fn errors_against_finest(rungs: &mut [Rung], variable: Option<&str>) {
    let Some(variable) = variable else { return };
    let finest = rungs
        .iter()
        .enumerate()
        .filter(|(_, r)| r.ok() && r.metrics.y0.len() >= 2)
        .min_by(|a, b| step_size(a.1, variable).total_cmp(&step_size(b.1, variable)))
        .map(|(k, _)| k);
    let Some(f) = finest else { return };
    let (xs, ys) = (rungs[f].metrics.s_nodes.clone(), rungs[f].metrics.y0.clone());
    for (k, r) in rungs.iter_mut().enumerate() {
        if k != f && r.ok() {
            let e = r.metrics.s_nodes.iter().zip(&r.metrics.y0).map(|(&s, &y)| (y - interp(&xs, &ys, s)).abs()).fold(0.0, f64::max);
            r.y0_error = Some(e);
        }
    }
}

fn fit_orders(rungs: &[Rung], metric: &str, variable: &str) -> OrderRow {
    let pts: Vec<(f64, f64)> = rungs
        .iter()
        .filter(|r| r.ok())
        .filter_map(|r| r.metric(metric).map(|e| (step_size(r, variable), e)))
        .filter(|&(_, e)| e.is_finite() && e > 0.0)
        .collect();
    let pairwise = pts.windows(2).map(|w| {
        let r = (w[0].1 / w[1].1).ln() / (w[0].0 / w[1].0).ln();
        r.is_finite().then_some(r)
    });
    let pairwise: Vec<Option<f64>> = pairwise.collect();
    let fitted = if pts.len() >= 2 {
        let n = pts.len() as f64;
        let (lx, ly): (Vec<f64>, Vec<f64>) = pts.iter().map(|&(h, e)| (h.ln(), e.ln())).unzip();
        let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
        let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
        let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
        (sxx > 0.0).then(|| sxy / sxx)
    } else {
        None
    };
    OrderRow { metric: metric.into(), variable: variable.into(), fitted, pairwise, points: pts.len() }
}

fn num(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.16e}")).unwrap_or_default()
}

fn quoted(text: &str) -> String {
    if text.contains([',', '"', '\n']) {
        format!("\"{}\"", text.replace('"', "\"\""))
    } else {
        text.to_string()
    }
}

impl StudyTable {
    pub fn rungs_csv(&self) -> String {
        let mut out = format!("rung,status,T,M,n_paths,dx,seed,iterations,{},error\n", METRICS.join(","));
        for (k, r) in self.rungs.iter().enumerate() {
            let metrics: Vec<String> = METRICS.iter().map(|m| num(r.metric(m))).collect();
            let _ = writeln!(
                out,
                "{k},{},{},{},{},{},{},{},{},{}",
                r.status,
                r.horizon,
                r.m,
                r.n_paths,
                r.dx,
                r.seed,
                r.metrics.iterations,
                metrics.join(","),
                quoted(r.error.as_deref().unwrap_or(""))
            );
        }
        out
    }

    pub fn orders_csv(&self) -> String {
        let mut out = String::from("metric,variable,fitted_order,pairwise_orders,points\n");
        for o in &self.orders {
            let pairwise: Vec<String> = o.pairwise.iter().map(|p| p.map(|v| format!("{v:.6}")).unwrap_or_else(|| "nan".into())).collect();
            let _ = writeln!(out, "{},{},{},{},{}", o.metric, o.variable, num(o.fitted), pairwise.join(";"), o.points);
        }
        out
    }

    pub fn order(&self, metric: &str) -> Option<&OrderRow> {
        self.orders.iter().find(|o| o.metric == metric)
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("study.csv"), self.rungs_csv())?;
        fs::write(dir.join("study_orders.csv"), self.orders_csv())
    }
}
