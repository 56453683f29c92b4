//! Catalog of ready-made problems with known answers or known structure.

pub struct Preset {
    pub name: &'static str,
    pub description: &'static str,
    pub text: &'static str,
}

pub const PRESETS: &[Preset] = &[
    Preset {
        name: "zero",
        description: "zero generator and terminal value; the solution vanishes",
        text: r#"
[problem]
f = "0"
xi = "0"
sigma = "1"
exact_y = "0"

[mc]
n_paths = 200
"#,
    },
    Preset {
        name: "exp_diag",
        description: "sigma = 0, f = u, xi = 1: Y_t^s = exp(T - t) for every s",
        text: r#"
[problem]
f = "u"
xi = "1"
sigma = "0"
lipschitz_f = 1
exact_y = "exp(T - t)"

[grids]
T = 1
M = 200

[mc]
n_paths = 16
"#,
    },
    Preset {
        name: "brownian_identity",
        description: "f = 0, xi = x, sigma = 1: Y_t^s = X_t",
        text: r#"
[problem]
f = "0"
xi = "x"
sigma = "1"
exact_y = "x"

[grids]
M = 50
dx = 0.05

[mc]
n_paths = 10000

[pde]
representation = true
"#,
    },
    Preset {
        name: "brownian_scaled",
        description: "f = 0, xi = s*x, sigma = 1: Y_t^s = s*X_t",
        text: r#"
[problem]
f = "0"
xi = "s * x"
sigma = "1"
exact_y = "s * x"

[grids]
M = 50

[mc]
n_paths = 10000
"#,
    },
    Preset {
        name: "s_squared",
        description: "f = 0, xi = s^2: Y_t^s = s^2",
        text: r#"
[problem]
f = "0"
xi = "s^2"
sigma = "1"
exact_y = "s^2"

[grids]
M = 20

[mc]
n_paths = 500
"#,
    },
    Preset {
        name: "s_cubed",
        description: "f = 0, xi = s^3 cos(x), sigma = 1: Y_t^s = s^3 exp((t - T)/2) cos(X_t)",
        text: r#"
[problem]
f = "0"
xi = "s^3 * cos(x)"
sigma = "1"
exact_y = "s^3 * exp((t - T) / 2) * cos(x)"

[grids]
M = 20

[mc]
n_paths = 2000
"#,
    },
    Preset {
        name: "s_independent",
        description: "data free of s, with a five-point control problem on top",
        text: r#"
[problem]
f = "0.5 * cos(x) - 0.5 * y + 0.25 * u"
xi = "cos(x)"
sigma = "0.7"
lipschitz_f = 0.75
bar_f = "-(a - sin(x))^2 + t"
control_b = "a"
controls = { lo = -1, hi = 1, n = 5 }

[grids]
M = 20
dx = 0.1

[mc]
n_paths = 2000

[pde]
hjb = true
"#,
    },
    Preset {
        name: "linear_z",
        description: "generator linear in z, v and s: Y_t^s = X_t + (0.5 + 0.1 s)(T - t)",
        text: r#"
[problem]
f = "0.3 * z + 0.2 * v + 0.1 * s"
xi = "x"
sigma = "1"
lipschitz_f = 0.5
lipschitz_ds_f = 0
exact_y = "x + (0.5 + 0.1 * s) * (T - t)"

[grids]
M = 50

[mc]
n_paths = 4000

[stability]
enabled = true
eps = [0.1, 0.01]
eta = "cos(x)"
"#,
    },
    Preset {
        name: "sin_nonlinear",
        description: "f = sin(y)/2 + sin(u)/2, xi = x/2 + s, sigma = 0.5",
        text: r#"
[problem]
f = "0.5 * sin(y) + 0.5 * sin(u)"
xi = "0.5 * x + s"
sigma = "0.5"
lipschitz_f = 1

[grids]
M = 50
dx = 0.05

[mc]
n_paths = 10000

[pde]
representation = true

[stability]
enabled = true
eps = [0.1, 0.01, 0.001]
eta = "1 + 0.5 * sin(x)"
n_paths = 2000
"#,
    },
    Preset {
        name: "wy_vs_bkm_controlfree",
        description: "single control: f = cos(x + s), xi = sin(x)(1 + s^2), sigma = 0.4",
        text: r#"
[problem]
f = "cos(x + s)"
xi = "sin(x) * (1 + s^2)"
sigma = "0.4"
bar_f = "cos(x + s)"
controls = [0.0]

[grids]
M = 50
dx = 0.1

[mc]
n_paths = 2000

[pde]
representation = true
hjb = true
"#,
    },
];

pub fn find(name: &str) -> Option<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    #[test]
    fn every_preset_resolves() {
        for p in PRESETS {
            let c = parse_config(&format!("[problem]\npreset = \"{}\"\n", p.name)).unwrap_or_else(|e| panic!("{}: {e}", p.name));
            assert_eq!(c.grids.m, c.grids.j, "{}", p.name);
        }
    }

    #[test]
    fn user_keys_override_the_preset() {
        let c = parse_config("[problem]\npreset = \"exp_diag\"\nf = \"2*u\"\n[grids]\nM = 10\n").unwrap();
        assert_eq!(c.problem.f.to_string(), "2 * u");
        assert_eq!(c.problem.ds_f, crate::expr::Expr::Num(0.0));
        assert_eq!((c.grids.m, c.grids.horizon), (10, 1.0));
    }
}
