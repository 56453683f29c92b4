//! Run configuration: `key = value` lines under `[section]` headers.
//!
//! Sections are `[problem]`, `[grids]`, `[mc]`, `[picard]`, `[pde]`,
//! `[output]` and `[stability]`. `problem.preset` pulls in a catalog entry;
//! keys given alongside it override the preset's.

use crate::expr::{self, Expr, Var};
use crate::presets;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("unknown section [{0}]")]
    UnknownSection(String),
    #[error("[{section}]: {message}")]
    Section { section: String, message: String },
    #[error("{0}")]
    Missing(String),
    #[error("{key}: {message}")]
    Expression { key: String, message: String },
    #[error("{key}: {message}")]
    Invalid { key: String, message: String },
    #[error("unknown preset '{0}'")]
    UnknownPreset(String),
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    pub grids: GridConfig,
    pub mc: McConfig,
    pub picard: PicardConfig,
    pub pde: PdeConfig,
    pub output: OutputConfig,
    pub stability: Option<StabilityConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProblemConfig {
    pub x0: f64,
    pub f: Expr,
    pub ds_f: Expr,
    pub dy_f: Expr,
    pub dz_f: Expr,
    pub xi: Expr,
    pub ds_xi: Expr,
    pub sigma: Expr,
    pub sigma_max: f64,
    pub b: Option<Expr>,
    pub lipschitz_f: f64,
    pub lipschitz_ds_f: f64,
    pub z_diagonal: bool,
    /// Closed form of `Y_t^s` as a function of `(s, t, x)`, if known.
    pub exact_y: Option<Expr>,
    pub hjb: Option<HjbConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HjbConfig {
    pub bar_f: Expr,
    pub ds_bar_f: Expr,
    pub control_b: Expr,
    pub controls: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridConfig {
    pub horizon: f64,
    pub m: usize,
    pub j: usize,
    pub dx: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McConfig {
    pub n_paths: usize,
    pub seed: u64,
    pub degree: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PicardConfig {
    pub tol: f64,
    pub max_iter: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PdeConfig {
    /// Representation PDE and the Feynman–Kac cross-check.
    pub representation: bool,
    /// Both equilibrium HJB formulations and their equivalence check.
    pub hjb: bool,
    pub x_lo: Option<f64>,
    pub x_hi: Option<f64>,
    pub substeps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutputConfig {
    pub directory: String,
    pub csv: bool,
    /// Full PDE grids as CSV; large.
    pub pde_csv: bool,
    /// Binary ensemble and field dumps.
    pub dump: bool,
    /// Exponential weight `c` of the reported norms.
    pub norm_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityConfig {
    pub eps: Vec<f64>,
    pub eta: Expr,
    pub ds_eta: Expr,
    pub n_paths: usize,
}

impl Serialize for Expr {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum ExprValue {
    Num(f64),
    Text(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum Controls {
    List(Vec<f64>),
    Range { lo: f64, hi: f64, n: usize },
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProblem {
    x0: Option<f64>,
    f: Option<ExprValue>,
    ds_f: Option<ExprValue>,
    dy_f: Option<ExprValue>,
    dz_f: Option<ExprValue>,
    xi: Option<ExprValue>,
    ds_xi: Option<ExprValue>,
    sigma: Option<ExprValue>,
    sigma_max: Option<f64>,
    b: Option<ExprValue>,
    lipschitz_f: Option<f64>,
    lipschitz_ds_f: Option<f64>,
    z_diagonal: Option<bool>,
    exact_y: Option<ExprValue>,
    bar_f: Option<ExprValue>,
    ds_bar_f: Option<ExprValue>,
    control_b: Option<ExprValue>,
    controls: Option<Controls>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrids {
    #[serde(rename = "T")]
    horizon: Option<f64>,
    #[serde(rename = "M")]
    m: Option<usize>,
    #[serde(rename = "J")]
    j: Option<usize>,
    dx: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMc {
    n_paths: Option<usize>,
    seed: Option<u64>,
    degree: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPicard {
    tol: Option<f64>,
    max_iter: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPde {
    representation: Option<bool>,
    hjb: Option<bool>,
    x_lo: Option<f64>,
    x_hi: Option<f64>,
    substeps: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    directory: Option<String>,
    csv: Option<bool>,
    pde_csv: Option<bool>,
    dump: Option<bool>,
    norm_weight: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStability {
    enabled: Option<bool>,
    eps: Option<Vec<f64>>,
    eta: Option<ExprValue>,
    ds_eta: Option<ExprValue>,
    n_paths: Option<usize>,
}

const SECTIONS: [&str; 7] = ["problem", "grids", "mc", "picard", "pde", "output", "stability"];

/// Reads and resolves a configuration file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io { path: path.display().to_string(), message: e.to_string() })?;
    parse_config(&text)
}

/// Parses configuration text, applying a preset if one is named.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let table = parse_table(text)?;
    resolve(expand_preset(table)?)
}

pub(crate) fn parse_table(text: &str) -> Result<toml::Table> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string().trim_end().to_string()))?;
    for (name, value) in &table {
        if !SECTIONS.contains(&name.as_str()) {
            return Err(if value.is_table() {
                ConfigError::UnknownSection(name.clone())
            } else {
                ConfigError::Section { section: "".into(), message: format!("key '{name}' outside any section") }
            });
        }
        if !value.is_table() {
            return Err(ConfigError::Section { section: name.clone(), message: "must be a section".into() });
        }
    }
    Ok(table)
}

/// Replaces `problem.preset` by the catalog entry, keeping explicit keys.
fn expand_preset(mut table: toml::Table) -> Result<toml::Table> {
    let preset = match table.get_mut("problem").and_then(|p| p.as_table_mut()).and_then(|p| p.remove("preset")) {
        None => return Ok(table),
        Some(toml::Value::String(name)) => name,
        Some(_) => return Err(ConfigError::Invalid { key: "problem.preset".into(), message: "must be a string".into() }),
    };
    let base = presets::find(&preset).ok_or_else(|| ConfigError::UnknownPreset(preset.clone()))?;
    let mut merged = parse_table(base.text)?;
    for (section, value) in table {
        let target = merged.entry(section).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        let (Some(dst), toml::Value::Table(src)) = (target.as_table_mut(), value) else { unreachable!("sections are tables") };
        for (k, v) in src {
            dst.insert(k, v);
        }
    }
    Ok(merged)
}

fn section<T: for<'de> Deserialize<'de> + Default>(table: &toml::Table, name: &str) -> Result<T> {
    match table.get(name) {
        None => Ok(T::default()),
        Some(v) => v.clone().try_into().map_err(|e: toml::de::Error| ConfigError::Section { section: name.into(), message: e.message().to_string() }),
    }
}

fn expression(key: &str, value: &ExprValue, allowed: &[Var]) -> Result<Expr> {
    let e = match value {
        ExprValue::Num(v) => Expr::Num(*v),
        ExprValue::Text(text) => expr::parse(text).map_err(|e| ConfigError::Expression { key: key.into(), message: format!("parse error: {e}") })?,
    };
    if let Some(bad) = e.variables().into_iter().find(|v| !allowed.contains(v)) {
        let names: Vec<&str> = allowed.iter().map(|v| v.name()).collect();
        return Err(ConfigError::Expression { key: key.into(), message: format!("variable '{}' is not allowed here (allowed: {})", bad.name(), names.join(", ")) });
    }
    Ok(e)
}

fn partial(key: &str, given: Option<&ExprValue>, of: &Expr, var: Var, allowed: &[Var]) -> Result<Expr> {
    match given {
        Some(v) => expression(key, v, allowed),
        None => of.derivative(var).map_err(|e| ConfigError::Expression { key: key.into(), message: format!("{e}; give it explicitly") }),
    }
}

fn positive(key: &str, v: f64) -> Result<f64> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(ConfigError::Invalid { key: key.into(), message: format!("must be positive and finite, got {v}") })
    }
}

fn at_least(key: &str, v: usize, min: usize) -> Result<usize> {
    if v >= min {
        Ok(v)
    } else {
        Err(ConfigError::Invalid { key: key.into(), message: format!("must be at least {min}, got {v}") })
    }
}

const GEN_VARS: [Var; 7] = [Var::S, Var::T, Var::X, Var::Y, Var::Z, Var::U, Var::V];
const TERMINAL_VARS: [Var; 2] = [Var::S, Var::X];
const COEFF_VARS: [Var; 2] = [Var::T, Var::X];
const REWARD_VARS: [Var; 4] = [Var::S, Var::T, Var::X, Var::A];
const CONTROL_DRIFT_VARS: [Var; 3] = [Var::T, Var::X, Var::A];

fn resolve(table: toml::Table) -> Result<RunConfig> {
    let p: RawProblem = section(&table, "problem")?;
    let g: RawGrids = section(&table, "grids")?;
    let mc: RawMc = section(&table, "mc")?;
    let pc: RawPicard = section(&table, "picard")?;
    let pde: RawPde = section(&table, "pde")?;
    let out: RawOutput = section(&table, "output")?;
    let st: RawStability = section(&table, "stability")?;

    let f_raw = p.f.as_ref().ok_or_else(|| ConfigError::Missing("problem.preset or problem.f required".into()))?;
    let f = expression("problem.f", f_raw, &GEN_VARS)?;
    let xi = expression("problem.xi", p.xi.as_ref().ok_or_else(|| ConfigError::Missing("problem.xi required".into()))?, &TERMINAL_VARS)?;
    let sigma = expression("problem.sigma", p.sigma.as_ref().ok_or_else(|| ConfigError::Missing("problem.sigma required".into()))?, &COEFF_VARS)?;
    let sigma_max = match (p.sigma_max, sigma.bind_horizon(1.0).as_num()) {
        (Some(m), _) if m.is_finite() && m >= 0.0 => m,
        (Some(m), _) => return Err(ConfigError::Invalid { key: "problem.sigma_max".into(), message: format!("must be finite and non-negative, got {m}") }),
        (None, Some(c)) if !sigma.uses_horizon() => c.abs(),
        (None, _) => return Err(ConfigError::Missing("problem.sigma_max required for a non-constant sigma".into())),
    };
    let hjb = match (&p.bar_f, &p.controls) {
        (None, None) => {
            if p.ds_bar_f.is_some() || p.control_b.is_some() {
                return Err(ConfigError::Missing("problem.bar_f and problem.controls required for control data".into()));
            }
            None
        }
        (Some(bf), Some(c)) => {
            let bar_f = expression("problem.bar_f", bf, &REWARD_VARS)?;
            let ds_bar_f = partial("problem.ds_bar_f", p.ds_bar_f.as_ref(), &bar_f, Var::S, &REWARD_VARS)?;
            let control_b = match &p.control_b {
                Some(v) => expression("problem.control_b", v, &CONTROL_DRIFT_VARS)?,
                None => Expr::Num(0.0),
            };
            let controls = match c {
                Controls::List(v) => v.clone(),
                Controls::Range { lo, hi, n } => bsvie::ControlSet::linspace(*lo, *hi, *n)
                    .map_err(|e| ConfigError::Invalid { key: "problem.controls".into(), message: e.to_string() })?
                    .points()
                    .to_vec(),
            };
            bsvie::ControlSet::new(controls.clone()).map_err(|e| ConfigError::Invalid { key: "problem.controls".into(), message: e.to_string() })?;
            Some(HjbConfig { bar_f, ds_bar_f, control_b, controls })
        }
        (None, Some(_)) => return Err(ConfigError::Missing("problem.bar_f required when problem.controls is given".into())),
        (Some(_), None) => return Err(ConfigError::Missing("problem.controls required when problem.bar_f is given".into())),
    };
    let problem = ProblemConfig {
        x0: p.x0.unwrap_or(0.0),
        ds_f: partial("problem.ds_f", p.ds_f.as_ref(), &f, Var::S, &GEN_VARS)?,
        dy_f: partial("problem.dy_f", p.dy_f.as_ref(), &f, Var::Y, &GEN_VARS)?,
        dz_f: partial("problem.dz_f", p.dz_f.as_ref(), &f, Var::Z, &GEN_VARS)?,
        f,
        ds_xi: partial("problem.ds_xi", p.ds_xi.as_ref(), &xi, Var::S, &TERMINAL_VARS)?,
        xi,
        sigma,
        sigma_max,
        b: p.b.as_ref().map(|v| expression("problem.b", v, &COEFF_VARS)).transpose()?,
        lipschitz_f: p.lipschitz_f.unwrap_or(0.0),
        lipschitz_ds_f: p.lipschitz_ds_f.unwrap_or(0.0),
        z_diagonal: p.z_diagonal.unwrap_or(true),
        exact_y: p.exact_y.as_ref().map(|v| expression("problem.exact_y", v, &[Var::S, Var::T, Var::X])).transpose()?,
        hjb,
    };
    if !problem.x0.is_finite() {
        return Err(ConfigError::Invalid { key: "problem.x0".into(), message: "must be finite".into() });
    }

    let m = at_least("grids.M", g.m.unwrap_or(50), 1)?;
    let j = g.j.unwrap_or(m);
    if j != m {
        return Err(ConfigError::Invalid { key: "grids.J".into(), message: format!("diagonal extraction needs J = M, got J = {j}, M = {m}") });
    }
    let grids = GridConfig { horizon: positive("grids.T", g.horizon.unwrap_or(1.0))?, m, j, dx: positive("grids.dx", g.dx.unwrap_or(0.05))? };

    let mc = McConfig { n_paths: at_least("mc.n_paths", mc.n_paths.unwrap_or(2000), 1)?, seed: mc.seed.unwrap_or(1), degree: mc.degree.unwrap_or(2) };
    if mc.degree > 8 {
        return Err(ConfigError::Invalid { key: "mc.degree".into(), message: format!("at most 8, got {}", mc.degree) });
    }
    let picard = PicardConfig { tol: positive("picard.tol", pc.tol.unwrap_or(1e-6))?, max_iter: at_least("picard.max_iter", pc.max_iter.unwrap_or(50), 1)? };

    let pde = PdeConfig {
        representation: pde.representation.unwrap_or(false),
        hjb: pde.hjb.unwrap_or(false),
        x_lo: pde.x_lo,
        x_hi: pde.x_hi,
        substeps: pde.substeps.map(|k| at_least("pde.substeps", k, 1)).transpose()?,
    };
    if pde.x_lo.is_some() != pde.x_hi.is_some() {
        return Err(ConfigError::Missing("pde.x_lo and pde.x_hi must be given together".into()));
    }
    if pde.hjb && problem.hjb.is_none() {
        return Err(ConfigError::Missing("pde.hjb needs problem.bar_f and problem.controls".into()));
    }

    let output = OutputConfig {
        directory: out.directory.unwrap_or_else(|| "bsvie-run".into()),
        csv: out.csv.unwrap_or(true),
        pde_csv: out.pde_csv.unwrap_or(false),
        dump: out.dump.unwrap_or(false),
        norm_weight: out.norm_weight.unwrap_or(0.0),
    };
    if !output.norm_weight.is_finite() {
        return Err(ConfigError::Invalid { key: "output.norm_weight".into(), message: "must be finite".into() });
    }

    let stability = if st.enabled.unwrap_or(false) {
        let eta = expression("stability.eta", st.eta.as_ref().ok_or_else(|| ConfigError::Missing("stability.eta required".into()))?, &TERMINAL_VARS)?;
        let eps = st.eps.clone().unwrap_or_else(|| vec![0.1, 0.01]);
        if eps.is_empty() || eps.iter().any(|e| !e.is_finite()) {
            return Err(ConfigError::Invalid { key: "stability.eps".into(), message: "must be a non-empty list of finite numbers".into() });
        }
        Some(StabilityConfig {
            ds_eta: partial("stability.ds_eta", st.ds_eta.as_ref(), &eta, Var::S, &TERMINAL_VARS)?,
            eta,
            eps,
            n_paths: at_least("stability.n_paths", st.n_paths.unwrap_or(mc.n_paths), 1)?,
        })
    } else {
        None
    };

    Ok(RunConfig { problem, grids, mc, picard, pde, output, stability })
}

impl Expr {
    fn uses_horizon(&self) -> bool {
        match self {
            Expr::Horizon => true,
            Expr::Num(_) | Expr::Var(_) => false,
            Expr::Neg(e) => e.uses_horizon(),
            Expr::Bin(_, a, b) => a.uses_horizon() || b.uses_horizon(),
            Expr::Call(_, args) => args.iter().any(Expr::uses_horizon),
        }
    }
}

pub const OVERRIDE_KEYS: &[&str] = &["M", "T", "dx", "n_paths", "seed", "degree", "substeps"];

impl RunConfig {
    /// Canonical JSON form; equal configurations give equal text.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }

    /// Applies `key=value` overrides such as `M=100` or `n_paths=4000`.
    /// Applies a single `KEY=value` override, with KEY one of [`OVERRIDE_KEYS`].
    pub fn with_override(&self, key: &str, value: &str) -> Result<RunConfig> {
        let bad = |message: String| ConfigError::Invalid { key: key.into(), message };
        let int = || value.trim().parse::<usize>().map_err(|e| bad(e.to_string()));
        let float = || value.trim().parse::<f64>().map_err(|e| bad(e.to_string()));
        let mut c = self.clone();
        match key {
            "M" => {
                c.grids.m = at_least("grids.M", int()?, 1)?;
                c.grids.j = c.grids.m;
            }
            "T" => c.grids.horizon = positive("grids.T", float()?)?,
            "dx" => c.grids.dx = positive("grids.dx", float()?)?,
            "n_paths" => c.mc.n_paths = at_least("mc.n_paths", int()?, 1)?,
            "seed" => c.mc.seed = value.trim().parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            "degree" => c.mc.degree = int()?,
            "substeps" => c.pde.substeps = Some(at_least("pde.substeps", int()?, 1)?),
            _ => return Err(bad(format!("unknown override; use one of {}", OVERRIDE_KEYS.join(", ")))),
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_problem_is_rejected() {
        assert_eq!(parse_config("[problem]\n").unwrap_err(), ConfigError::Missing("problem.preset or problem.f required".into()));
        assert_eq!(parse_config("").unwrap_err().to_string(), "problem.preset or problem.f required");
    }

    #[test]
    fn exp_diag_preset_and_its_inline_form_agree() {
        let preset = parse_config("[problem]\npreset = \"exp_diag\"\n").unwrap();
        assert_eq!((preset.grids.horizon, preset.grids.m, preset.grids.j), (1.0, 200, 200));
        assert_eq!(preset.problem.sigma, Expr::Num(0.0));
        let inline = parse_config(
            "[problem]\nf = \"u\"\nxi = \"1\"\nsigma = \"0\"\nlipschitz_f = 1\nexact_y = \"exp(T - t)\"\n[grids]\nT = 1\nM = 200\n[mc]\nn_paths = 16",
        )
        .unwrap();
        assert_eq!(inline, preset);
        assert_eq!(inline.canonical_json(), preset.canonical_json());
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        let e = parse_config("[problem]\npreset = \"zero\"\n[grids]\nN = 3\n").unwrap_err();
        assert!(matches!(&e, ConfigError::Section { section, message } if section == "grids" && message.contains("unknown field `N`")), "{e}");
        let e = parse_config("[problem]\npreset = \"zero\"\n[extra]\nk = 1\n").unwrap_err();
        assert_eq!(e, ConfigError::UnknownSection("extra".into()));
        assert!(matches!(parse_config("[problem]\npreset = \"nope\"\n"), Err(ConfigError::UnknownPreset(_))));
        assert!(matches!(parse_config("[problem\n"), Err(ConfigError::Syntax(_))));
    }

    #[test]
    fn expression_errors_name_the_key_and_position() {
        let e = parse_config("[problem]\nf = \"u + * 2\"\nxi = 0\nsigma = 1\n").unwrap_err();
        assert_eq!(e.to_string(), "problem.f: parse error: unexpected '*' at position 4");
        let e = parse_config("[problem]\nf = \"u\"\nxi = \"t\"\nsigma = 1\n").unwrap_err();
        assert!(e.to_string().starts_with("problem.xi: variable 't' is not allowed"), "{e}");
        let e = parse_config("[problem]\nf = \"u\"\nsigma = 1\n").unwrap_err();
        assert_eq!(e.to_string(), "problem.xi required");
        let e = parse_config("[problem]\nf = \"y^z\"\nxi = 0\nsigma = 1\n").unwrap_err();
        assert!(e.to_string().starts_with("problem.dz_f: cannot differentiate"), "{e}");
    }

    #[test]
    fn partials_are_derived() {
        let c = parse_config("[problem]\nf = \"s*y + 0.5*z^2\"\nxi = \"s^2 * x\"\nsigma = \"1 + 0.1*sin(x)\"\nsigma_max = 1.1\n").unwrap();
        assert_eq!(c.problem.ds_f.to_string(), "y");
        assert_eq!(c.problem.dy_f.to_string(), "s");
        assert_eq!(c.problem.dz_f.to_string(), "0.5 * (2 * z)");
        assert_eq!(c.problem.ds_xi.to_string(), "2 * s * x");
        let e = parse_config("[problem]\nf = 0\nxi = 0\nsigma = \"1 + 0.1*sin(x)\"\n").unwrap_err();
        assert_eq!(e.to_string(), "problem.sigma_max required for a non-constant sigma");
    }

    #[test]
    fn overrides_and_grid_rules() {
        let base = parse_config("[problem]\npreset = \"zero\"\n").unwrap();
        let c = base.with_override("M", "80").unwrap();
        assert_eq!((c.grids.m, c.grids.j), (80, 80));
        assert!(base.with_override("Q", "1").is_err());
        assert!(base.with_override("M", "0").is_err());
        let e = parse_config("[problem]\npreset = \"zero\"\n[grids]\nM = 10\nJ = 5\n").unwrap_err();
        assert!(e.to_string().starts_with("grids.J"), "{e}");
        let e = parse_config("[problem]\npreset = \"zero\"\n[grids]\nT = -1\n").unwrap_err();
        assert!(e.to_string().starts_with("grids.T"), "{e}");
    }

    #[test]
    fn control_data() {
        let c = parse_config("[problem]\nf = 0\nxi = 0\nsigma = 1\nbar_f = \"-(a - s)^2\"\ncontrols = { lo = 0, hi = 1, n = 3 }\n[pde]\nhjb = true\n").unwrap();
        let h = c.problem.hjb.unwrap();
        assert_eq!(h.controls, vec![0.0, 0.5, 1.0]);
        assert_eq!(h.control_b, Expr::Num(0.0));
        let e = parse_config("[problem]\nf = 0\nxi = 0\nsigma = 1\n[pde]\nhjb = true\n").unwrap_err();
        assert!(e.to_string().contains("pde.hjb"), "{e}");
        let e = parse_config("[problem]\nf = 0\nxi = 0\nsigma = 1\nbar_f = \"a\"\ncontrols = [1, 0]\n").unwrap_err();
        assert!(e.to_string().starts_with("problem.controls"), "{e}");
    }
}
