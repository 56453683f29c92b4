//! Pipeline orchestration: simulate, solve, diagnose, cross-check, report.

use crate::config::{ProblemConfig, RunConfig};
use crate::expr::{Compiled, Expr};
use bsvie::metrics::{apriori_report, field_norms, stability_experiment};
use bsvie::pde_backend::{self, PdeOptions};
use bsvie::volterra_system::{self, picard_solve};
use bsvie::{ControlSet, Dims, Engine, Error, FieldSolution, GenFn, Grids, HjbSpec, PdeSolution, PicardOptions, ProblemSpec, RegressionBasis, SolverKind, StateFn, XGrid};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

/// Environment variable naming the directory relative output paths resolve against.
pub const OUTPUT_ROOT_VAR: &str = "BSVIE_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Converged,
    NonConverged,
    ConfigError,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Converged => 0,
            Status::NonConverged => 2,
            Status::ConfigError => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Status::Converged => "converged",
            Status::NonConverged => "non_converged",
            Status::ConfigError => "config_error",
        }
    }
}

fn status_of(e: &Error) -> Status {
    match e {
        Error::NonConvergence { .. } | Error::Divergence { .. } | Error::Numeric(_) | Error::BlowUp { .. } => Status::NonConverged,
        _ => Status::ConfigError,
    }
}

/// A resolved configuration turned into solver inputs.
pub struct Problem {
    pub spec: ProblemSpec,
    pub hjb: Option<HjbSpec>,
    pub grids: Grids,
    pub basis: RegressionBasis,
    pub picard: PicardOptions,
    pub exact_y: Option<Compiled>,
}

fn vars(s: f64, t: f64, x: f64) -> [f64; 8] {
    [s, t, x, 0.0, 0.0, 0.0, 0.0, 0.0]
}

fn gen_fn(e: &Expr, horizon: f64) -> GenFn {
    let c = e.compile(horizon);
    match c.constant() {
        Some(v) => GenFn::constant(1, 1, vec![v]),
        None => GenFn::new(1, 1, move |g, o| o[0] = c.eval(&[g.s, g.t, g.x[0], g.y[0], g.z[0], g.u[0], g.v[0], 0.0])),
    }
}

/// `(s, x)` data such as the terminal value.
fn terminal_fn(e: &Expr, horizon: f64) -> StateFn {
    let c = e.compile(horizon);
    match c.constant() {
        Some(v) => StateFn::constant(1, 1, vec![v]),
        None => StateFn::new(1, 1, move |s, x, o| o[0] = c.eval(&vars(s, 0.0, x[0]))),
    }
}

/// `(t, x)` coefficients.
fn coeff_fn(e: &Expr, horizon: f64) -> StateFn {
    let c = e.compile(horizon);
    match c.constant() {
        Some(v) => StateFn::constant(1, 1, vec![v]),
        None => StateFn::new(1, 1, move |t, x, o| o[0] = c.eval(&vars(0.0, t, x[0]))),
    }
}

fn reward_fn(e: &Expr, horizon: f64) -> pde_backend::RewardFn {
    let c = e.compile(horizon);
    Arc::new(move |s, t, x, a| c.eval(&[s, t, x, 0.0, 0.0, 0.0, 0.0, a]))
}

pub fn build_spec(p: &ProblemConfig, horizon: f64) -> Result<ProblemSpec, Error> {
    let mut b = ProblemSpec::builder(Dims::scalar())
        .x0(vec![p.x0])
        .f(gen_fn(&p.f, horizon))
        .ds_f(gen_fn(&p.ds_f, horizon))
        .dy_f(gen_fn(&p.dy_f, horizon))
        .dz_f(vec![gen_fn(&p.dz_f, horizon)])
        .xi(terminal_fn(&p.xi, horizon))
        .ds_xi(terminal_fn(&p.ds_xi, horizon))
        .lipschitz(p.lipschitz_f, p.lipschitz_ds_f)
        .z_diagonal_in_generator(p.z_diagonal);
    b = match p.sigma.compile(horizon).constant() {
        Some(c) if p.sigma_max >= c.abs() => b.sigma(StateFn::constant(1, 1, vec![c]), p.sigma_max),
        Some(c) => b.sigma_const(vec![c]),
        None => b.sigma(coeff_fn(&p.sigma, horizon), p.sigma_max),
    };
    if let Some(drift) = &p.b {
        b = b.drift_b(coeff_fn(drift, horizon));
    }
    b.build()
}

pub fn build_hjb(p: &ProblemConfig, horizon: f64) -> Result<Option<HjbSpec>, Error> {
    let Some(h) = &p.hjb else { return Ok(None) };
    let drift = h.control_b.compile(horizon);
    let hjb = HjbSpec::new(ControlSet::new(h.controls.clone())?)
        .with_reward(reward_fn(&h.bar_f, horizon), reward_fn(&h.ds_bar_f, horizon))
        .with_drift(Arc::new(move |t, x, a| drift.eval(&[0.0, t, x, 0.0, 0.0, 0.0, 0.0, a])))
        .with_sigma(coeff_fn(&p.sigma, horizon), p.sigma_max)
        .with_terminal(terminal_fn(&p.xi, horizon), terminal_fn(&p.ds_xi, horizon))
        .with_x0(p.x0);
    Ok(Some(hjb))
}

impl Problem {
    pub fn new(config: &RunConfig) -> Result<Self, Error> {
        let horizon = config.grids.horizon;
        Ok(Self {
            spec: build_spec(&config.problem, horizon)?,
            hjb: build_hjb(&config.problem, horizon)?,
            grids: Grids::aligned(horizon, config.grids.m)?,
            basis: RegressionBasis::polynomial(config.mc.degree),
            picard: PicardOptions { tol: config.picard.tol, max_iter: config.picard.max_iter, fixed_iterations: None },
            exact_y: config.problem.exact_y.as_ref().map(|e| e.compile(horizon)),
        })
    }
}

/// Spatial grid of the PDE runs.
pub fn pde_xgrid(config: &RunConfig) -> Result<XGrid, Error> {
    let dx = config.grids.dx;
    match (config.pde.x_lo, config.pde.x_hi) {
        (Some(lo), Some(hi)) => {
            if !(hi > lo) {
                return Err(Error::Config(format!("pde.x_hi must exceed pde.x_lo, got [{lo}, {hi}]")));
            }
            XGrid::uniform(lo, hi, ((hi - lo) / dx).round() as usize + 1)
        }
        _ => XGrid::around(config.problem.x0, config.problem.sigma_max, config.grids.horizon, dx),
    }
}

/// Numbers a study compares across rungs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    pub iterations: usize,
    pub s_nodes: Vec<f64>,
    /// `E[U^{s_j}_0]` per parameter node.
    pub y0: Vec<f64>,
    pub y0_exact_error: Option<f64>,
    pub diag_dynamics: Option<f64>,
    pub constraint_d: Option<f64>,
    pub m_property: Option<f64>,
    pub fk_y_rms: Option<f64>,
    pub equivalence_gap: Option<f64>,
    pub bkm_residual: Option<f64>,
}

/// Everything a run produced, before anything is written.
pub struct Execution {
    pub status: Status,
    pub error: Option<String>,
    pub results: Map<String, Value>,
    pub metrics: RunMetrics,
    pub field: Option<FieldSolution>,
    pub ensemble: Option<bsvie::PathEnsemble>,
    pub pde: Vec<(String, PdeSolution)>,
    pub stability: Option<bsvie::metrics::StabilityTable>,
}

fn entry(op: &str, value: Value) -> Value {
    json!({ "op": op, "value": value })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Runs the configured pipeline in memory.
pub fn execute(config: &RunConfig) -> Execution {
    let mut ex = Execution {
        status: Status::Converged,
        error: None,
        results: Map::new(),
        metrics: RunMetrics::default(),
        field: None,
        ensemble: None,
        pde: Vec::new(),
        stability: None,
    };
    if let Err(e) = pipeline(config, &mut ex) {
        ex.status = status_of(&e);
        ex.error = Some(e.to_string());
    }
    ex
}

fn pipeline(config: &RunConfig, ex: &mut Execution) -> Result<(), Error> {
    let problem = Problem::new(config)?;
    let Problem { spec, grids, basis, picard, .. } = &problem;
    let c = config.output.norm_weight;

    let ens = bsvie::simulate_paths(spec, &grids.time, config.mc.n_paths, config.mc.seed)?;
    ex.results.insert(
        "simulation".into(),
        entry(
            "mc_forward::simulate_paths",
            json!({
                "n_paths": ens.n_paths(),
                "steps": ens.grid().steps(),
                "seed": ens.seed(),
                "quadratic_variation_error": bsvie::mc_forward::quadratic_variation_check(&ens, spec)?,
            }),
        ),
    );

    let engine = Engine::new(&ens, spec, *basis)?;
    let field = picard_solve(&engine, grids, *picard)?;
    ex.metrics.iterations = field.iterations();
    ex.results.insert(
        "picard".into(),
        entry(
            "volterra_system::picard_solve",
            json!({
                "solver": field.solver,
                "iterations": field.iterations(),
                "trace": field.picard_trace,
                "distance": field.distance,
                "tol": field.tol,
                "converged": field.converged,
                "ident_y": field.ident_y,
                "ident_z": field.ident_z,
            }),
        ),
    );
    ex.results.insert(
        "ortho_residuals".into(),
        entry("volterra_system::picard_solve", json!({ "max": field.ortho_residuals.max(), "rms": field.ortho_residuals.rms() })),
    );
    let norms = field_norms(&field, engine.sigma(), c)?;
    ex.results.insert("norms".into(), entry("metrics::field_norms", json!({ "report": norms, "hbar22": norms.hbar22() })));
    let dyn_report = volterra_system::check_diagonal_dynamics(&field, &engine)?;
    ex.metrics.diag_dynamics = Some(dyn_report.conditioned_rms);
    ex.results.insert(
        "diagonal_dynamics".into(),
        entry("volterra_system::check_diagonal_dynamics", json!({ "raw_rms": dyn_report.raw_rms, "conditioned_rms": dyn_report.conditioned_rms })),
    );

    let s_nodes = grids.param.nodes().to_vec();
    ex.metrics.s_nodes = s_nodes.clone();
    ex.metrics.y0 = (0..s_nodes.len()).map(|j| mean(field.u.step(j, 0))).collect();

    if !field.converged {
        ex.status = Status::NonConverged;
        ex.error = Some(format!(
            "Picard iteration did not converge after {} iterations (distance {:e}, tolerance {:e})",
            field.iterations(),
            field.distance,
            field.tol
        ));
        ex.field = Some(field);
        ex.ensemble = Some(ens);
        return Ok(());
    }

    let bsvie = volterra_system::extract_bsvie(&field)?;
    let times = grids.time.nodes();
    ex.results.insert(
        "solution".into(),
        entry(
            "volterra_system::extract_bsvie",
            json!({
                "s_nodes": s_nodes,
                "y0": ex.metrics.y0,
                "ydiag0": mean(bsvie.ydiag.step(0)),
                "zdiag0": mean(bsvie.zdiag.step(0)),
                "ydiag_mean": (0..times.len()).map(|i| mean(bsvie.ydiag.step(i))).collect::<Vec<_>>(),
            }),
        ),
    );
    ex.results.insert("apriori".into(), entry("metrics::apriori_report", serde_json::to_value(apriori_report(&field, &engine)?).unwrap_or(Value::Null)));
    if field.solver == SolverKind::Full {
        let d = volterra_system::check_constraint_d(&field, &engine)?;
        ex.metrics.constraint_d = Some(d.max_u);
        ex.results.insert("constraint_d".into(), entry("volterra_system::check_constraint_d", json!({ "max_u": d.max_u, "max_v": d.max_v })));
    }
    let mp = volterra_system::check_m_property(&bsvie, &ens)?;
    ex.metrics.m_property = Some(mp.max_rms);
    ex.results.insert("m_property".into(), entry("volterra_system::check_m_property", json!({ "max_rms": mp.max_rms })));

    if let Some(exact) = &problem.exact_y {
        let x0 = config.problem.x0;
        let y0_err = s_nodes.iter().zip(&ex.metrics.y0).map(|(&s, y)| (y - exact.eval(&vars(s, 0.0, x0))).abs()).fold(0.0, f64::max);
        let (mut u_sq, mut d_sq, mut count) = (0.0, 0.0, 0usize);
        for (j, &s) in s_nodes.iter().enumerate() {
            for (i, &t) in times.iter().enumerate() {
                for p in 0..ens.n_paths() {
                    let x = ens.state(p, i)[0];
                    u_sq += (field.u.at(j, i, p)[0] - exact.eval(&vars(s, t, x))).powi(2);
                    if j == 0 {
                        d_sq += (bsvie.ydiag.at(i, p)[0] - exact.eval(&vars(t, t, x))).powi(2);
                        count += 1;
                    }
                }
            }
        }
        ex.metrics.y0_exact_error = Some(y0_err);
        ex.results.insert(
            "exact".into(),
            entry(
                "cli::exact_y",
                json!({
                    "y0_max_error": y0_err,
                    "u_rms_error": (u_sq / (count * s_nodes.len()) as f64).sqrt(),
                    "ydiag_rms_error": (d_sq / count as f64).sqrt(),
                }),
            ),
        );
    }

    let opts = PdeOptions { substeps: config.pde.substeps };
    if config.pde.representation || config.pde.hjb {
        let xg = pde_xgrid(config)?;
        if config.pde.representation {
            let pde = pde_backend::solve_representation_pde(spec, grids, &xg, opts)?;
            ex.results.insert("representation_pde".into(), entry("pde_backend::solve_representation_pde", pde_summary(&pde, config.problem.x0)));
            let fk = pde_backend::feynman_kac_check(&pde, &bsvie, &ens)?;
            ex.metrics.fk_y_rms = Some(fk.y_rms);
            ex.results.insert("feynman_kac".into(), entry("pde_backend::feynman_kac_check", serde_json::to_value(fk).unwrap_or(Value::Null)));
            ex.pde.push(("representation".into(), pde));
        }
        if config.pde.hjb {
            let hjb = problem.hjb.as_ref().ok_or_else(|| Error::Config("pde.hjb needs control data".into()))?;
            let wy = pde_backend::solve_hjb_wy(hjb, grids, &xg, opts)?;
            ex.results.insert("hjb_wy".into(), entry("pde_backend::solve_hjb_wy", pde_summary(&wy, config.problem.x0)));
            let bkm = pde_backend::solve_hjb_bkm(hjb, grids, &xg, opts)?;
            ex.results.insert("hjb_bkm".into(), entry("pde_backend::solve_hjb_bkm", pde_summary(&bkm, config.problem.x0)));
            let eq = pde_backend::check_equivalence(&wy, &bkm)?;
            ex.metrics.equivalence_gap = Some(eq.value_gap);
            ex.metrics.bkm_residual = Some(eq.bkm_residual);
            ex.results.insert("equivalence".into(), entry("pde_backend::check_equivalence", serde_json::to_value(eq).unwrap_or(Value::Null)));
            ex.pde.push(("hjb_wy".into(), wy));
            ex.pde.push(("hjb_bkm".into(), bkm));
        }
    }

    if let Some(st) = &config.stability {
        let eta = terminal_fn(&st.eta, config.grids.horizon);
        let ds_eta = terminal_fn(&st.ds_eta, config.grids.horizon);
        let stab_ens;
        let ens_ref = if st.n_paths == ens.n_paths() {
            &ens
        } else {
            stab_ens = bsvie::simulate_paths(spec, &grids.time, st.n_paths, config.mc.seed)?;
            &stab_ens
        };
        let table = stability_experiment(spec, (&eta, &ds_eta), &st.eps, ens_ref, grids, *basis, *picard)?;
        ex.results.insert(
            "stability".into(),
            entry("metrics::stability_experiment", json!({ "base_iterations": table.base_iterations, "rows": table.rows, "ratios": table.ratios() })),
        );
        ex.stability = Some(table);
    }

    ex.field = Some(field);
    ex.ensemble = Some(ens);
    Ok(())
}

fn pde_summary(pde: &PdeSolution, x0: f64) -> Value {
    let v0: Vec<Option<f64>> = (0..pde.sgrid.len()).map(|j| pde.interpolate(j, 0, x0).map(|(v, _)| v)).collect();
    let mut out = pde.sidecar();
    out["v0_at_x0"] = json!(v0);
    if let Some(vf) = &pde.vfun {
        out["vfun0_at_x0"] = match pde.xgrid.locate(x0) {
            Some((k, w)) => json!(vf[k] * (1.0 - w) + vf[(k + 1).min(pde.xgrid.len() - 1)] * w),
            None => Value::Null,
        };
    }
    out
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Hash of the time, parameter and spatial grids a configuration implies.
pub fn grid_hash(config: &RunConfig) -> String {
    let mut text = String::new();
    if let Ok(grids) = Grids::aligned(config.grids.horizon, config.grids.m) {
        for t in grids.time.nodes() {
            let _ = write!(text, "{:016x} ", t.to_bits());
        }
        text.push('|');
        for s in grids.param.nodes() {
            let _ = write!(text, "{:016x} ", s.to_bits());
        }
    }
    if config.pde.representation || config.pde.hjb {
        if let Ok(xg) = pde_xgrid(config) {
            let _ = write!(text, "|{:016x} {:016x} {}", xg.lo().to_bits(), xg.hi().to_bits(), xg.len());
        }
    }
    sha256_hex(text.as_bytes())
}

pub fn config_hash(config: &RunConfig) -> String {
    sha256_hex(config.canonical_json().as_bytes())
}

/// The deterministic report; nothing time-dependent goes in here.
pub fn report_json(config: &RunConfig, ex: &Execution) -> Value {
    json!({
        "status": ex.status.name(),
        "exit_code": ex.status.exit_code(),
        "error": ex.error,
        "provenance": {
            "package": concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")),
            "config_hash": config_hash(config),
            "grid_hash": grid_hash(config),
            "seed": config.mc.seed,
            "n_paths": config.mc.n_paths,
            "basis_degree": config.mc.degree,
        },
        "config": serde_json::to_value(config).unwrap_or(Value::Null),
        "results": Value::Object(ex.results.clone()),
    })
}

/// Resolves `output.directory` against the output root.
pub fn output_dir(config: &RunConfig) -> PathBuf {
    let dir = Path::new(&config.output.directory);
    if dir.is_absolute() {
        return dir.to_path_buf();
    }
    match std::env::var_os(OUTPUT_ROOT_VAR) {
        Some(root) => PathBuf::from(root).join(dir),
        None => dir.to_path_buf(),
    }
}

/// Outcome of [`run`].
pub struct RunOutcome {
    pub status: Status,
    pub error: Option<String>,
    pub directory: PathBuf,
    pub metrics: RunMetrics,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        self.status.exit_code()
    }
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_file(path: &Path, fill: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<(), Error> {
    let mut w = BufWriter::new(fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?);
    fill(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Runs the pipeline and writes every output into `dir`.
///
/// Outputs are written whatever the status, so a failed run leaves its
/// partial results behind.
pub fn run(config: &RunConfig, dir: &Path) -> Result<RunOutcome, Error> {
    let started = SystemTime::now();
    let clock = Instant::now();
    let ex = execute(config);
    fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;

    let report = report_json(config, &ex);
    write_file(&dir.join("report.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, &report).map_err(std::io::Error::other)?;
        writeln!(w)
    })?;
    if config.output.csv {
        write_csvs(config, &ex, dir)?;
    }
    if config.output.dump {
        if let (Some(ens), Some(field)) = (&ex.ensemble, &ex.field) {
            write_file(&dir.join("ensemble.bin"), |w| ens.dump(&mut &mut *w).map_err(|e| std::io::Error::other(e.to_string())))?;
            write_file(&dir.join("field.bin"), |w| volterra_system::dump_field(field, config.mc.seed, &mut &mut *w).map_err(|e| std::io::Error::other(e.to_string())))?;
        }
    }
    write_file(&dir.join("summary.txt"), |w| w.write_all(summary(config, &ex).as_bytes()))?;
    let finished = SystemTime::now();
    let meta = json!({
        "started_unix": started.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0),
        "finished_unix": finished.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0),
        "elapsed_seconds": clock.elapsed().as_secs_f64(),
        "threads": rayon_threads(),
        "config_hash": config_hash(config),
    });
    write_file(&dir.join("meta.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, &meta).map_err(std::io::Error::other)?;
        writeln!(w)
    })?;
    Ok(RunOutcome { status: ex.status, error: ex.error, directory: dir.to_path_buf(), metrics: ex.metrics })
}

fn rayon_threads() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn write_csvs(config: &RunConfig, ex: &Execution, dir: &Path) -> Result<(), Error> {
    if let Some(field) = &ex.field {
        write_file(&dir.join("picard_trace.csv"), |w| {
            writeln!(w, "iteration,distance")?;
            for (k, d) in field.picard_trace.iter().enumerate() {
                writeln!(w, "{},{}", k + 1, num(*d))?;
            }
            Ok(())
        })?;
        let exact = config.problem.exact_y.as_ref().map(|e| e.compile(config.grids.horizon));
        write_file(&dir.join("y0.csv"), |w| {
            writeln!(w, "s,y0{}", if exact.is_some() { ",exact" } else { "" })?;
            for (s, y) in ex.metrics.s_nodes.iter().zip(&ex.metrics.y0) {
                match &exact {
                    Some(e) => writeln!(w, "{},{},{}", num(*s), num(*y), num(e.eval(&vars(*s, 0.0, config.problem.x0))))?,
                    None => writeln!(w, "{},{}", num(*s), num(*y))?,
                }
            }
            Ok(())
        })?;
        write_file(&dir.join("diagonal.csv"), |w| {
            writeln!(w, "t,ydiag,zdiag,udiag,du_diag")?;
            for (i, t) in field.grids.time.nodes().iter().enumerate() {
                let cols = [mean(field.ydiag.step(i)), mean(field.zdiag.step(i)), mean(field.udiag.step(i)), mean(field.du_diag.step(i))];
                writeln!(w, "{},{}", num(*t), cols.map(num).join(","))?;
            }
            Ok(())
        })?;
    }
    if let Some(table) = &ex.stability {
        write_file(&dir.join("stability.csv"), |w| {
            writeln!(w, "eps,diff,failure")?;
            for r in &table.rows {
                writeln!(w, "{},{},{}", num(r.eps), r.diff.map(num).unwrap_or_default(), r.failure.as_deref().unwrap_or(""))?;
            }
            Ok(())
        })?;
    }
    if config.output.pde_csv {
        for (name, pde) in &ex.pde {
            write_file(&dir.join(format!("pde_{name}.csv")), |w| pde.write_csv(w).map_err(|e| std::io::Error::other(e.to_string())))?;
            write_file(&dir.join(format!("pde_{name}.json")), |w| {
                serde_json::to_writer_pretty(&mut *w, &pde.sidecar()).map_err(std::io::Error::other)?;
                writeln!(w)
            })?;
            if pde.vfun.is_some() {
                write_file(&dir.join(format!("pde_{name}_vfun.csv")), |w| pde.write_vfun_csv(w).map_err(|e| std::io::Error::other(e.to_string())))?;
            }
        }
    }
    Ok(())
}

fn pick(results: &Map<String, Value>, path: &[&str]) -> Option<f64> {
    let mut v = results.get(path[0])?.get("value")?;
    for key in &path[1..] {
        v = v.get(key)?;
    }
    v.as_f64()
}

/// Plain-text table of the headline numbers.
pub fn summary(config: &RunConfig, ex: &Execution) -> String {
    let mut rows: Vec<(&str, String)> = vec![
        ("status", ex.status.name().to_string()),
        ("grid", format!("T = {}, M = J = {}", config.grids.horizon, config.grids.m)),
        ("paths", format!("{} (seed {}, degree {})", config.mc.n_paths, config.mc.seed, config.mc.degree)),
    ];
    if let Some(e) = &ex.error {
        rows.push(("error", e.clone()));
    }
    let fields: [(&str, &[&str]); 15] = [
        ("picard iterations", &["picard", "iterations"]),
        ("picard distance", &["picard", "distance"]),
        ("ident_y", &["picard", "ident_y"]),
        ("ident_z", &["picard", "ident_z"]),
        ("Ydiag_0", &["solution", "ydiag0"]),
        ("Zdiag_0", &["solution", "zdiag0"]),
        ("diagonal dynamics", &["diagonal_dynamics", "conditioned_rms"]),
        ("constraint (u)", &["constraint_d", "max_u"]),
        ("M-property", &["m_property", "max_rms"]),
        ("Y_0 error vs exact", &["exact", "y0_max_error"]),
        ("U rms error vs exact", &["exact", "u_rms_error"]),
        ("Feynman-Kac y rms", &["feynman_kac", "y_rms"]),
        ("Feynman-Kac z rms", &["feynman_kac", "z_rms"]),
        ("WY/BKM value gap", &["equivalence", "value_gap"]),
        ("BKM residual", &["equivalence", "bkm_residual"]),
    ];
    for (label, path) in fields {
        if let Some(v) = pick(&ex.results, path) {
            rows.push((label, format!("{v:.6e}")));
        }
    }
    if let Some(t) = &ex.stability {
        let ratios: Vec<String> = t.ratios().iter().map(|r| format!("{r:.6}")).collect();
        rows.push(("stability ratios", ratios.join(" ")));
    }
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    rows.iter().map(|(k, v)| format!("{k:<width$}  {v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    fn preset(name: &str, extra: &str) -> RunConfig {
        parse_config(&format!("[problem]\npreset = \"{name}\"\n{extra}")).unwrap()
    }

    #[test]
    fn expression_closures_evaluate_their_slots() {
        let c = parse_config("[problem]\nf = \"s + 2*t + 3*x + 4*y + 5*z + 6*u + 7*v\"\nxi = \"s - x\"\nsigma = \"1 + t*x\"\nsigma_max = 10\nb = \"x\"\n").unwrap();
        let spec = build_spec(&c.problem, 1.0).unwrap();
        let g = bsvie::GenArgs { s: 1.0, t: 10.0, x: &[100.0], y: &[1e3], z: &[1e4], u: &[1e5], v: &[1e6] };
        let mut out = [0.0];
        spec.f().eval(&g, &mut out);
        assert_eq!(out[0], 1.0 + 20.0 + 300.0 + 4e3 + 5e4 + 6e5 + 7e6);
        spec.xi().eval(2.0, &[0.5], &mut out);
        assert_eq!(out[0], 1.5);
        spec.sigma().eval(2.0, &[0.5], &mut out);
        assert_eq!(out[0], 2.0);
        assert!(spec.drift_b().is_some());
        spec.ds_f().eval(&g, &mut out);
        assert_eq!(out[0], 1.0);
    }

    #[test]
    fn zero_preset_runs_cleanly() {
        let c = preset("zero", "");
        let ex = execute(&c);
        assert_eq!(ex.status, Status::Converged, "{:?}", ex.error);
        assert_eq!(ex.metrics.iterations, 1);
        assert!(ex.metrics.y0.iter().all(|&y| y == 0.0));
        assert_eq!(ex.metrics.diag_dynamics, Some(0.0));
        assert_eq!(ex.metrics.constraint_d, Some(0.0));
        assert_eq!(ex.metrics.y0_exact_error, Some(0.0));
        let report = report_json(&c, &ex);
        assert_eq!(report["results"]["picard"]["op"], "volterra_system::picard_solve");
        assert_eq!(report["status"], "converged");
    }

    #[test]
    fn forced_non_convergence_and_config_errors() {
        let ex = execute(&preset("exp_diag", "[picard]\nmax_iter = 1\n[grids]\nM = 20\n"));
        assert_eq!(ex.status, Status::NonConverged);
        assert_eq!(ex.status.exit_code(), 2);
        assert_eq!(ex.results["picard"]["value"]["trace"].as_array().unwrap().len(), 1);

        let ex = execute(&preset("brownian_identity", "[mc]\nn_paths = 50\n[pde]\nsubsteps = 1\n"));
        assert_eq!(ex.status, Status::ConfigError);
        assert!(ex.error.as_deref().unwrap().contains("explicit scheme is unstable"), "{:?}", ex.error);
        assert!(ex.results.contains_key("m_property"));
    }

    #[test]
    fn hashes_follow_the_configuration() {
        let a = preset("zero", "");
        let b = preset("zero", "[mc]\nseed = 2\n");
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(grid_hash(&a), grid_hash(&b));
        assert_ne!(grid_hash(&a), grid_hash(&preset("zero", "[grids]\nM = 10\n")));
        assert_eq!(config_hash(&a).len(), 64);
    }

    #[test]
    fn output_root_applies_to_relative_directories() {
        let mut c = preset("zero", "");
        c.output.directory = "/abs/run".into();
        assert_eq!(output_dir(&c), PathBuf::from("/abs/run"));
    }
}
