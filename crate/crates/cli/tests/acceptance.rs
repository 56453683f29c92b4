//! Acceptance suite: one PASS/FAIL line per criterion on stderr.
//!
//! Runs as a plain binary so the lines are visible without `--nocapture`.

use bsvie::pde_backend::{self, check_equivalence, PdeOptions};
use bsvie::spec::NablaArgs;
use bsvie::volterra_system::{solve_system, solve_system_simplified};
use bsvie::{simulate_paths, FieldSolution, PathField};
use bsvie_cli::config::{parse_config, RunConfig};
use bsvie_cli::presets::PRESETS;
use bsvie_cli::runner::{build_spec, execute, pde_xgrid, run, Execution, Problem, Status};
use bsvie_cli::study::{convergence_study, parse_ladder};
use rand::{Rng, SeedableRng};
use std::collections::HashMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

fn line(text: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{text}");
}

struct Verdict {
    checks: Vec<(bool, String)>,
}

impl Verdict {
    fn new() -> Self {
        Self { checks: Vec::new() }
    }

    fn check(&mut self, ok: bool, detail: impl Into<String>) {
        self.checks.push((ok, detail.into()));
    }

    fn info(&mut self, detail: impl Into<String>) {
        line(&format!("      info: {}", detail.into()));
    }
}

fn config(preset: &str, extra: &str) -> RunConfig {
    parse_config(&format!("[problem]\npreset = \"{preset}\"\n{extra}")).unwrap_or_else(|e| panic!("{preset}: {e}"))
}

/// Executions keyed by configuration text, so shared runs are solved once.
struct Cache {
    runs: HashMap<String, Execution>,
}

impl Cache {
    fn get(&mut self, preset: &str, extra: &str) -> &Execution {
        let key = format!("{preset}\n{extra}");
        self.runs.entry(key).or_insert_with(|| {
            let ex = execute(&config(preset, extra));
            assert_eq!(ex.status, Status::Converged, "{preset}: {:?}", ex.error);
            ex
        })
    }
}

fn field(ex: &Execution) -> &FieldSolution {
    ex.field.as_ref().expect("converged run keeps its field")
}

fn result(ex: &Execution, name: &str, key: &str) -> f64 {
    ex.results[name]["value"][key].as_f64().unwrap_or_else(|| panic!("{name}.{key} missing"))
}

fn max_abs(data: &[f64]) -> f64 {
    data.iter().fold(0.0, |a: f64, &b| a.max(b.abs()))
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m: f64, (x, y)| m.max((x - y).abs()))
}

fn criterion_1(cache: &mut Cache, v: &mut Verdict) {
    let ex = cache.get("zero", "bar_f = \"0\"\ncontrols = [0.0, 1.0]\n[pde]\nrepresentation = true\nhjb = true\n");
    let f = field(ex);
    let mut worst = [f.u.data(), f.v.data(), f.ydiag.data(), f.zdiag.data(), f.udiag.data(), f.du_diag.data()].iter().map(|d| max_abs(d)).fold(0.0, f64::max);
    for d in [&f.du, &f.dv].into_iter().flatten() {
        worst = worst.max(max_abs(d.data()));
    }
    worst = worst.max(f.vdiag_reconstructed.as_ref().map(|p: &PathField| max_abs(p.data())).unwrap_or(0.0));
    v.check(worst <= 1e-14, format!("max |solver output| = {worst:e}"));
    let n = &ex.results["norms"]["value"]["report"];
    let norms: Vec<f64> = ["s2_sup", "h2", "s22_sup", "h22_sup", "diag_h2", "l2"].iter().map(|k| n[k].as_f64().unwrap()).collect();
    v.check(max_abs(&norms) <= 1e-14, format!("max norm = {:e}", max_abs(&norms)));
    let residuals = [
        result(ex, "ortho_residuals", "max"),
        result(ex, "diagonal_dynamics", "raw_rms"),
        result(ex, "diagonal_dynamics", "conditioned_rms"),
        result(ex, "constraint_d", "max_u"),
        result(ex, "constraint_d", "max_v"),
        result(ex, "m_property", "max_rms"),
        result(ex, "feynman_kac", "y_rms"),
        result(ex, "feynman_kac", "z_rms"),
        result(ex, "equivalence", "value_gap"),
        result(ex, "equivalence", "bkm_residual"),
        f.ident_y,
        f.ident_z,
    ];
    v.check(max_abs(&residuals) <= 1e-14, format!("max residual = {:e}", max_abs(&residuals)));
    let pde_max = ex.pde.iter().map(|(_, p)| max_abs(&p.v).max(max_abs(&p.vx))).fold(0.0, f64::max);
    v.check(pde_max <= 1e-14, format!("max |PDE value| = {pde_max:e}"));
    v.check(f.iterations() == 1, format!("Picard iterations = {}", f.iterations()));
}

/// `D' = D` on `[0, 1]` from `D(0) = 1` with classical Runge–Kutta.
fn rk4_oracle(steps: usize) -> f64 {
    let h = 1.0 / steps as f64;
    let mut d = 1.0;
    for _ in 0..steps {
        let k1 = d;
        let k2 = d + 0.5 * h * k1;
        let k3 = d + 0.5 * h * k2;
        let k4 = d + h * k3;
        d += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    d
}

fn criterion_2(cache: &mut Cache, v: &mut Verdict) {
    let oracle = rk4_oracle(100_000);
    v.info(format!("oracle D(T) = {oracle:.12}"));
    let ex = cache.get("exp_diag", "");
    let err = ex.metrics.y0.iter().map(|y| (y - oracle).abs()).fold(0.0, f64::max);
    v.check(err <= 1e-3, format!("M = J = 200: max_s |Y_0^s - e| = {err:.3e} (Y_0 = {:.6})", ex.metrics.y0[0]));
    let dir = tempfile::tempdir().unwrap();
    let outcome = run(&config("exp_diag", ""), dir.path()).unwrap();
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    let ydiag0 = report["results"]["solution"]["value"]["ydiag0"].as_f64().unwrap();
    v.check(outcome.exit_code() == 0 && (ydiag0 - oracle).abs() <= 1e-3, format!("report.json Ydiag[0] = {ydiag0:.6}, exit {}", outcome.exit_code()));
    let study = convergence_study(&config("exp_diag", ""), &parse_ladder(&["M=50,100,200".to_string()]).unwrap());
    let errors: Vec<f64> = study.rungs.iter().map(|r| r.y0_error.unwrap_or(f64::NAN)).collect();
    let monotone = errors.windows(2).all(|w| w[1] < w[0]);
    let order = study.order("y0_error").and_then(|o| o.fitted).unwrap_or(f64::NAN);
    let shown: Vec<String> = errors.iter().map(|e| format!("{e:.3e}")).collect();
    v.check(monotone, format!("errors [{}] decrease", shown.join(", ")));
    v.check((0.8..=1.3).contains(&order), format!("fitted order in dt = {order:.4}"));
}

fn criterion_3(cache: &mut Cache, v: &mut Verdict) {
    let ex = cache.get("brownian_scaled", "");
    let u_rms = result(ex, "exact", "u_rms_error");
    v.check(u_rms < 0.05, format!("RMS(U - s X) = {u_rms:.4e}"));
    let f = field(ex);
    let times = f.grids.time.nodes();
    let (mut sq, mut count) = (0.0, 0usize);
    for (i, &t) in times.iter().enumerate().take(times.len() - 1) {
        for z in f.zdiag.step(i) {
            sq += (z - t).powi(2);
            count += 1;
        }
    }
    let z_rms = (sq / count as f64).sqrt();
    v.check(z_rms < 0.1, format!("RMS(Zdiag - t) = {z_rms:.4e}"));
}

fn criterion_4(cache: &mut Cache, v: &mut Verdict) {
    let cases = [("zero", 1e-3, "[grids]\nM = 25\n", "[grids]\nM = 50\n"), ("exp_diag", 1e-3, "[grids]\nM = 100\n", ""), ("brownian_scaled", 0.05, "[grids]\nM = 25\n", "")];
    for (preset, bound, coarse, fine) in cases {
        let a = cache.get(preset, coarse).metrics.diag_dynamics.unwrap();
        let b = cache.get(preset, fine).metrics.diag_dynamics.unwrap();
        v.check(b < bound, format!("{preset}: conditioned residual {b:.3e} < {bound:e}"));
        v.check(a >= 1.7 * b, format!("{preset}: M doubling shrinks {a:.3e} -> {b:.3e} (ratio {:.3})", a / b));
    }
}

fn criterion_5(cache: &mut Cache, v: &mut Verdict) {
    let a = cache.get("s_squared", "").metrics.constraint_d.unwrap();
    let b = cache.get("s_squared", "[grids]\nM = 40\n").metrics.constraint_d.unwrap();
    v.check(a >= 3.5 * b || a.max(b) <= 1e-12, format!("s_squared: J = 20 -> 40 residual {a:.3e} -> {b:.3e} (exact quadrature up to round-off)"));
    let a = cache.get("s_cubed", "").metrics.constraint_d.unwrap();
    let b = cache.get("s_cubed", "[grids]\nM = 40\n").metrics.constraint_d.unwrap();
    v.check(a >= 3.5 * b, format!("s_cubed: J = 20 -> 40 residual {a:.3e} -> {b:.3e} (ratio {:.3})", a / b));
    let ex = cache.get("s_independent", "");
    let (u, w) = (result(ex, "constraint_d", "max_u"), result(ex, "constraint_d", "max_v"));
    v.check(u.max(w) <= 1e-12, format!("s_independent: residual (u, v) = ({u:e}, {w:e})"));
}

fn criterion_6(cache: &mut Cache, v: &mut Verdict) {
    let m = cache.get("brownian_identity", "").metrics.m_property.unwrap();
    v.check(m < 0.05, format!("brownian_identity at 1e4 paths: {m:.4e}"));
    for preset in ["zero", "exp_diag", "s_squared"] {
        let m = cache.get(preset, "").metrics.m_property.unwrap();
        v.check(m < 1e-12, format!("{preset}: {m:.3e}"));
    }
}

fn criterion_7(cache: &mut Cache, v: &mut Verdict) {
    for preset in ["exp_diag", "brownian_identity", "brownian_scaled", "linear_z", "s_independent"] {
        let f = field(cache.get(preset, ""));
        v.check(f.ident_y <= 5.0 * f.tol && f.ident_z <= 5.0 * f.tol, format!("{preset}: ident (y, z) = ({:.2e}, {:.2e}), tol {:.2e}", f.ident_y, f.ident_z, f.tol));
    }
    for preset in ["s_cubed", "sin_nonlinear", "wy_vs_bkm_controlfree"] {
        let f = field(cache.get(preset, ""));
        v.info(format!("{preset} (not affine in s): ident (y, z) / tol = ({:.2}, {:.2})", f.ident_y / f.tol, f.ident_z / f.tol));
    }
    for (preset, paths) in [("exp_diag", 16), ("brownian_scaled", 2000), ("s_independent", 2000)] {
        let c = config(preset, &format!("z_diagonal = false\n[mc]\nn_paths = {paths}\n[grids]\nM = 40\n"));
        let p = Problem::new(&c).unwrap();
        let ens = simulate_paths(&p.spec, &p.grids.time, paths, 5).unwrap();
        let full = solve_system(&p.spec.with_z_diagonal(true), &ens, &p.grids, p.basis, p.picard).unwrap();
        let simple = solve_system_simplified(&p.spec, &ens, &p.grids, p.basis, p.picard).unwrap();
        let gap = max_diff(full.ydiag.data(), simple.ydiag.data()).max(max_diff(full.u.data(), simple.u.data()));
        v.check(gap <= 1e-10, format!("{preset}: full vs simplified max gap {gap:.3e}"));
    }
}

fn criterion_8(cache: &mut Cache, v: &mut Verdict) {
    let extra = "[grids]\nT = 0.25\n[picard]\ntol = 1e-10\n";
    for (preset, paths) in [("exp_diag", 16), ("sin_nonlinear", 2000), ("linear_z", 2000)] {
        let ex = cache.get(preset, &format!("{extra}[mc]\nn_paths = {paths}\n[stability]\nenabled = false\n[pde]\nrepresentation = false\n"));
        let trace = &field(ex).picard_trace;
        let worst = trace.windows(2).filter(|w| w[0] > 0.0).map(|w| w[1] / w[0]).fold(0.0, f64::max);
        v.check(worst <= 0.9, format!("{preset}: {} iterations, worst d(k+1)/d(k) = {worst:.4}", trace.len()));
    }
}

fn criterion_9(cache: &mut Cache, v: &mut Verdict) {
    for preset in ["brownian_identity", "sin_nonlinear"] {
        let ex = cache.get(preset, "");
        let (y, z) = (result(ex, "feynman_kac", "y_rms"), result(ex, "feynman_kac", "z_rms"));
        v.check(y < 0.05 && z < 0.05, format!("{preset}: RMS (Y, Z) = ({y:.4e}, {z:.4e}), exit fraction {:.2e}", result(ex, "feynman_kac", "exit_fraction")));
    }
}

fn criterion_10(cache: &mut Cache, v: &mut Verdict) {
    let ex = cache.get("s_independent", "");
    let gap = result(ex, "equivalence", "value_gap");
    v.check(gap < 1e-12, format!("s_independent: sup |Vfun - diag| = {gap:e}"));
    let reports: Vec<_> = [50, 100]
        .iter()
        .map(|m| {
            let c = config("wy_vs_bkm_controlfree", &format!("[grids]\nM = {m}\n"));
            let p = Problem::new(&c).unwrap();
            let hjb = p.hjb.as_ref().unwrap();
            let xg = pde_xgrid(&c).unwrap();
            let wy = pde_backend::solve_hjb_wy(hjb, &p.grids, &xg, PdeOptions::default()).unwrap();
            let bkm = pde_backend::solve_hjb_bkm(hjb, &p.grids, &xg, PdeOptions::default()).unwrap();
            check_equivalence(&wy, &bkm).unwrap()
        })
        .collect();
    let (a, b) = (reports[0].value_gap, reports[1].value_gap);
    v.check(a >= 1.7 * b && b > 0.0, format!("wy_vs_bkm_controlfree: gap {a:.4e} -> {b:.4e} (ratio {:.3})", a / b));
    let (a, b) = (reports[0].bkm_residual, reports[1].bkm_residual);
    v.check(a >= 1.7 * b && b > 0.0, format!("wy_vs_bkm_controlfree: BKM residual {a:.4e} -> {b:.4e} (ratio {:.3})", a / b));
}

fn criterion_11(cache: &mut Cache, v: &mut Verdict) {
    let ratios = cache.get("linear_z", "").stability.as_ref().unwrap().ratios();
    v.check(ratios.len() == 1 && (ratios[0] - 10.0).abs() <= 1e-6, format!("linear_z: ratios {ratios:?}"));
    let ex = cache.get("sin_nonlinear", "");
    let t = ex.stability.as_ref().unwrap();
    let ratios = t.ratios();
    v.check(ratios.len() == t.rows.len() - 1 && ratios.iter().all(|r| (5.0..=20.0).contains(r)), format!("sin_nonlinear: ratios {ratios:.4?}"));
}

fn criterion_12(v: &mut Verdict) {
    let c = parse_config("[problem]\nf = \"sin(s*y) + 0.3*z^2*cos(s) + u*v*y + exp(-s)*y*z - 0.2*x*y^3\"\nxi = 0\nsigma = 1\n").unwrap();
    let spec = build_spec(&c.problem, 1.0).unwrap();
    let mut rng = rand::rngs::StdRng::seed_from_u64(12);
    let mut worst = f64::INFINITY;
    for _ in 0..100 {
        let [a0, a1, w1, p1, b0, b1, w2, p2]: [f64; 8] = std::array::from_fn(|_| rng.random_range(-1.5..1.5));
        let (t, x, u, vv, s) = (rng.random_range(0.0..1.0), rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.1..0.9));
        let y = |s: f64| a0 + a1 * (w1 * s + p1).sin() + 1.0;
        let z = |s: f64| b0 + b1 * (w2 * s + p2).cos();
        let dy = a1 * w1 * (w1 * s + p1).cos();
        let dz = -b1 * w2 * (w2 * s + p2).sin();
        let f_at = |s: f64| {
            let mut out = [0.0];
            spec.f().eval(&bsvie::GenArgs { s, t, x: &[x], y: &[y(s)], z: &[z(s)], u: &[u], v: &[vv] }, &mut out);
            out[0]
        };
        let nabla = spec.assemble_nabla_f(&NablaArgs { s, t, x: &[x], du: &[dy], dv: &[dz], y: &[y(s)], z: &[z(s)], u: &[u], v: &[vv] }).unwrap()[0];
        let err = |h: f64| ((f_at(s + h) - f_at(s - h)) / (2.0 * h) - nabla).abs();
        let order = (err(1e-3) / err(1e-4)).log10();
        worst = worst.min(order);
    }
    v.check(worst >= 1.8, format!("worst observed order over 100 curves, h in {{1e-3, 1e-4}}: {worst:.4}"));
}

fn criterion_13(v: &mut Verdict) {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    for p in PRESETS {
        let c = config(p.name, "[mc]\nn_paths = 300\n[stability]\nn_paths = 300\n");
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        run(&c, a.path()).unwrap();
        pool.install(|| run(&c, b.path())).unwrap();
        let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("report.json")).unwrap();
        let same = read(&a) == read(&b);
        v.check(same, format!("{}: report.json identical across runs (1 and 3 threads)", p.name));
    }
}

fn main() {
    let mut cache = Cache { runs: HashMap::new() };
    type Criterion<'a> = (&'a str, Box<dyn Fn(&mut Cache, &mut Verdict) + 'a>);
    let criteria: Vec<Criterion> = vec![
        ("zero-solution exactness", Box::new(criterion_1)),
        ("diagonal coupling oracle (exp_diag)", Box::new(criterion_2)),
        ("conditional-expectation oracle", Box::new(criterion_3)),
        ("diagonal-dynamics residual", Box::new(criterion_4)),
        ("constraint residual", Box::new(criterion_5)),
        ("M-property", Box::new(criterion_6)),
        ("fixed-point identification", Box::new(criterion_7)),
        ("Picard contraction", Box::new(criterion_8)),
        ("Feynman-Kac cross-check", Box::new(criterion_9)),
        ("WY/BKM equivalence", Box::new(criterion_10)),
        ("stability", Box::new(criterion_11)),
        ("gradient assembly", Box::new(|_, v| criterion_12(v))),
        ("reproducibility", Box::new(|_, v| criterion_13(v))),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = Vec::new();
    for (k, (name, body)) in criteria.iter().enumerate() {
        let n = k + 1;
        if !filter.is_empty() && !filter.iter().any(|f| f == &n.to_string()) {
            continue;
        }
        let clock = Instant::now();
        let mut v = Verdict::new();
        let outcome = catch_unwind(AssertUnwindSafe(|| body(&mut cache, &mut v)));
        if let Err(e) = &outcome {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
            v.check(false, format!("panicked: {msg}"));
        }
        let pass = !v.checks.is_empty() && v.checks.iter().all(|c| c.0);
        line(&format!("criterion {n:>2} {}: {name} ({:.1}s)", if pass { "PASS" } else { "FAIL" }, clock.elapsed().as_secs_f64()));
        for (ok, detail) in &v.checks {
            line(&format!("      [{}] {detail}", if *ok { "ok" } else { "FAIL" }));
        }
        if !pass {
            failed.push(n);
        }
    }
    if failed.is_empty() {
        line("acceptance: all criteria pass");
    } else {
        line(&format!("acceptance: failing criteria {failed:?}"));
        std::process::exit(1);
    }
}
