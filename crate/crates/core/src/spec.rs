//! Problem specification: coefficients, dimensions and their partial derivatives.
//!
//! Matrices are passed as flat row-major slices. A generator argument `z` or
//! `v` of shape `n × d` stores row `i` (the loading on `dX_i`) at
//! `z[i*d..(i+1)*d]`, so that `zᵀ dX = Σ_i z[i,:] dX_i`.

use crate::error::{Error, Result};
use std::fmt;
use std::sync::Arc;

type StateClosure = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;
type GenClosure = dyn Fn(&GenArgs<'_>, &mut [f64]) + Send + Sync;

/// A coefficient of the form `(time-like, x) -> R^{rows × cols}`.
///
/// Used for `σ(t, x)`, `b(t, x)`, `ξ(s, x)` and `∂_s ξ(s, x)`.
#[derive(Clone)]
pub struct StateFn {
    rows: usize,
    cols: usize,
    constant: Option<Vec<f64>>,
    func: Arc<StateClosure>,
}

impl StateFn {
    pub fn new(rows: usize, cols: usize, func: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        Self { rows, cols, constant: None, func: Arc::new(func) }
    }

    pub fn constant(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), rows * cols, "constant coefficient has wrong length");
        let v = values.clone();
        Self {
            rows,
            cols,
            constant: Some(values),
            func: Arc::new(move |_, _, out: &mut [f64]| out.copy_from_slice(&v)),
        }
    }

    pub fn zero(rows: usize, cols: usize) -> Self {
        Self::constant(rows, cols, vec![0.0; rows * cols])
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_constant(&self) -> Option<&[f64]> {
        self.constant.as_deref()
    }

    #[inline]
    pub fn eval(&self, a: f64, x: &[f64], out: &mut [f64]) {
        (self.func)(a, x, out)
    }
}

impl fmt::Debug for StateFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "StateFn({}x{}", self.rows, self.cols)?;
        if let Some(c) = &self.constant {
            write!(f, ", constant {c:?}")?;
        }
        write!(f, ")")
    }
}

/// Arguments of the generator `f(s, t, x, y, z, u, v)`.
///
/// `y` and `z` are the equation's own solution, `u` and `v` the diagonal
/// values `(Y_t^t, Z_t^t)`.
#[derive(Debug, Clone, Copy)]
pub struct GenArgs<'a> {
    pub s: f64,
    pub t: f64,
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub z: &'a [f64],
    pub u: &'a [f64],
    pub v: &'a [f64],
}

/// A generator-shaped coefficient `(s, t, x, y, z, u, v) -> R^{rows × cols}`.
#[derive(Clone)]
pub struct GenFn {
    rows: usize,
    cols: usize,
    zero: bool,
    func: Arc<GenClosure>,
}

impl GenFn {
    pub fn new(rows: usize, cols: usize, func: impl Fn(&GenArgs<'_>, &mut [f64]) + Send + Sync + 'static) -> Self {
        Self { rows, cols, zero: false, func: Arc::new(func) }
    }

    pub fn constant(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), rows * cols, "constant coefficient has wrong length");
        let zero = values.iter().all(|&v| v == 0.0);
        Self { rows, cols, zero, func: Arc::new(move |_: &GenArgs<'_>, out: &mut [f64]| out.copy_from_slice(&values)) }
    }

    pub fn zero(rows: usize, cols: usize) -> Self {
        Self::constant(rows, cols, vec![0.0; rows * cols])
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// True when the coefficient was declared identically zero.
    pub fn is_zero(&self) -> bool {
        self.zero
    }

    #[inline]
    pub fn eval(&self, args: &GenArgs<'_>, out: &mut [f64]) {
        (self.func)(args, out)
    }
}

impl fmt::Debug for GenFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GenFn({}x{}{})", self.rows, self.cols, if self.zero { ", zero" } else { "" })
    }
}

/// State, Brownian and solution dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
    pub d: usize,
}

impl Dims {
    pub fn new(n: usize, m: usize, d: usize) -> Self {
        Self { n, m, d }
    }

    pub fn scalar() -> Self {
        Self { n: 1, m: 1, d: 1 }
    }
}

/// Lipschitz constants of `f` and `∂_s f`. Metadata only.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Lipschitz {
    pub l_f: f64,
    pub l_ds_f: f64,
}

/// Arguments of `∇f(s, t, x, u', v', y, z, u, v)`.
#[derive(Debug, Clone, Copy)]
pub struct NablaArgs<'a> {
    pub s: f64,
    pub t: f64,
    pub x: &'a [f64],
    pub du: &'a [f64],
    pub dv: &'a [f64],
    pub y: &'a [f64],
    pub z: &'a [f64],
    pub u: &'a [f64],
    pub v: &'a [f64],
}

/// A complete problem statement.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    dims: Dims,
    x0: Vec<f64>,
    sigma: StateFn,
    sigma_max: f64,
    drift_b: Option<StateFn>,
    f: GenFn,
    ds_f: GenFn,
    dy_f: GenFn,
    dz_f: Vec<GenFn>,
    xi: StateFn,
    ds_xi: StateFn,
    lipschitz: Lipschitz,
    z_diagonal_in_generator: bool,
}

impl ProblemSpec {
    pub fn builder(dims: Dims) -> ProblemSpecBuilder {
        ProblemSpecBuilder::new(dims)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }
    pub fn x0(&self) -> &[f64] {
        &self.x0
    }
    pub fn sigma(&self) -> &StateFn {
        &self.sigma
    }
    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }
    pub fn drift_b(&self) -> Option<&StateFn> {
        self.drift_b.as_ref()
    }
    pub fn f(&self) -> &GenFn {
        &self.f
    }
    pub fn ds_f(&self) -> &GenFn {
        &self.ds_f
    }
    pub fn dy_f(&self) -> &GenFn {
        &self.dy_f
    }
    pub fn dz_f(&self) -> &[GenFn] {
        &self.dz_f
    }
    pub fn xi(&self) -> &StateFn {
        &self.xi
    }
    pub fn ds_xi(&self) -> &StateFn {
        &self.ds_xi
    }
    pub fn lipschitz(&self) -> Lipschitz {
        self.lipschitz
    }
    pub fn z_diagonal_in_generator(&self) -> bool {
        self.z_diagonal_in_generator
    }

    /// Same problem with a different free term.
    pub fn with_xi(&self, xi: StateFn, ds_xi: StateFn) -> Result<Self> {
        let mut out = self.clone();
        out.xi = xi;
        out.ds_xi = ds_xi;
        out.validate()?;
        Ok(out)
    }

    /// Same problem with a different `z_diagonal_in_generator` declaration.
    pub fn with_z_diagonal(&self, flag: bool) -> Self {
        let mut out = self.clone();
        out.z_diagonal_in_generator = flag;
        out
    }

    fn validate(&self) -> Result<()> {
        let Dims { n, m, d } = self.dims;
        if n == 0 || m == 0 || d == 0 {
            return Err(Error::Config(format!("dimensions must be positive, got n={n}, m={m}, d={d}")));
        }
        check_len("x0", self.x0.len(), n)?;
        check_shape("sigma", self.sigma.shape(), (n, m))?;
        if let Some(b) = &self.drift_b {
            check_shape("drift_b", b.shape(), (m, 1))?;
        }
        check_shape("f", self.f.shape(), (d, 1))?;
        check_shape("ds_f", self.ds_f.shape(), (d, 1))?;
        check_shape("dy_f", self.dy_f.shape(), (d, d))?;
        if self.dz_f.len() != n {
            return Err(Error::Shape {
                component: "dz_f".into(),
                expected: format!("{n} functions"),
                got: format!("{} functions", self.dz_f.len()),
            });
        }
        for (i, g) in self.dz_f.iter().enumerate() {
            check_shape(&format!("dz_f[{i}]"), g.shape(), (d, d))?;
        }
        check_shape("xi", self.xi.shape(), (d, 1))?;
        check_shape("ds_xi", self.ds_xi.shape(), (d, 1))?;
        if !(self.sigma_max.is_finite() && self.sigma_max >= 0.0) {
            return Err(Error::Config(format!("sigma_max must be finite and non-negative, got {}", self.sigma_max)));
        }
        Ok(())
    }

    /// Largest Frobenius norm of `σ` over the given sample points, and whether
    /// it respects the declared bound.
    pub fn check_sigma_bound(&self, times: &[f64], states: &[Vec<f64>]) -> (f64, bool) {
        let Dims { n, m, .. } = self.dims;
        let mut buf = vec![0.0; n * m];
        let mut worst: f64 = 0.0;
        for &t in times {
            for x in states {
                self.sigma.eval(t, x, &mut buf);
                worst = worst.max(buf.iter().map(|v| v * v).sum::<f64>().sqrt());
            }
        }
        (worst, worst <= self.sigma_max * (1.0 + 1e-12))
    }

    /// `∂_s f + ∂_y f·u' + Σ_i ∂_{z_i} f·v'_i`, checking every argument shape.
    pub fn assemble_nabla_f(&self, args: &NablaArgs<'_>) -> Result<Vec<f64>> {
        let Dims { n, d, .. } = self.dims;
        check_len("x", args.x.len(), n)?;
        check_len("u'", args.du.len(), d)?;
        check_len("v'", args.dv.len(), n * d)?;
        check_len("y", args.y.len(), d)?;
        check_len("z", args.z.len(), n * d)?;
        check_len("u", args.u.len(), d)?;
        check_len("v", args.v.len(), n * d)?;
        let mut scratch = vec![0.0; d * d];
        let mut out = vec![0.0; d];
        self.nabla_f_into(args, &mut scratch, &mut out);
        Ok(out)
    }

    /// Unchecked kernel of [`assemble_nabla_f`](Self::assemble_nabla_f).
    /// `scratch` must hold `d*d` values and `out` `d`.
    #[inline]
    pub fn nabla_f_into(&self, a: &NablaArgs<'_>, scratch: &mut [f64], out: &mut [f64]) {
        let d = self.dims.d;
        let g = GenArgs { s: a.s, t: a.t, x: a.x, y: a.y, z: a.z, u: a.u, v: a.v };
        self.ds_f.eval(&g, out);
        if !self.dy_f.is_zero() {
            self.dy_f.eval(&g, scratch);
            mat_vec_acc(scratch, a.du, d, out);
        }
        for (i, dz) in self.dz_f.iter().enumerate() {
            if dz.is_zero() {
                continue;
            }
            dz.eval(&g, scratch);
            mat_vec_acc(scratch, &a.dv[i * d..(i + 1) * d], d, out);
        }
    }
}

#[inline]
fn mat_vec_acc(mat: &[f64], vec: &[f64], d: usize, out: &mut [f64]) {
    for k in 0..d {
        let row = &mat[k * d..(k + 1) * d];
        out[k] += row.iter().zip(vec).map(|(a, b)| a * b).sum::<f64>();
    }
}

fn check_shape(component: &str, got: (usize, usize), expected: (usize, usize)) -> Result<()> {
    if got == expected {
        Ok(())
    } else {
        Err(Error::Shape {
            component: component.into(),
            expected: format!("{}x{}", expected.0, expected.1),
            got: format!("{}x{}", got.0, got.1),
        })
    }
}

fn check_len(component: &str, got: usize, expected: usize) -> Result<()> {
    if got == expected {
        Ok(())
    } else {
        Err(Error::Shape { component: component.into(), expected: expected.to_string(), got: got.to_string() })
    }
}

/// Builder for [`ProblemSpec`]. Unset coefficients default to zero.
pub struct ProblemSpecBuilder {
    dims: Dims,
    x0: Option<Vec<f64>>,
    sigma: Option<(StateFn, Option<f64>)>,
    drift_b: Option<StateFn>,
    f: Option<GenFn>,
    ds_f: Option<GenFn>,
    dy_f: Option<GenFn>,
    dz_f: Option<Vec<GenFn>>,
    xi: Option<StateFn>,
    ds_xi: Option<StateFn>,
    lipschitz: Lipschitz,
    z_diagonal: Option<bool>,
}

impl ProblemSpecBuilder {
    fn new(dims: Dims) -> Self {
        Self {
            dims,
            x0: None,
            sigma: None,
            drift_b: None,
            f: None,
            ds_f: None,
            dy_f: None,
            dz_f: None,
            xi: None,
            ds_xi: None,
            lipschitz: Lipschitz::default(),
            z_diagonal: None,
        }
    }

    pub fn x0(mut self, x0: Vec<f64>) -> Self {
        self.x0 = Some(x0);
        self
    }

    /// Volatility with a declared bound on its Frobenius norm.
    pub fn sigma(mut self, sigma: StateFn, sigma_max: f64) -> Self {
        self.sigma = Some((sigma, Some(sigma_max)));
        self
    }

    /// Constant volatility matrix; the bound is its Frobenius norm.
    pub fn sigma_const(mut self, values: Vec<f64>) -> Self {
        let (n, m) = (self.dims.n, self.dims.m);
        self.sigma = Some((StateFn::constant(n, m, values), None));
        self
    }

    pub fn drift_b(mut self, b: StateFn) -> Self {
        self.drift_b = Some(b);
        self
    }

    pub fn f(mut self, f: GenFn) -> Self {
        self.f = Some(f);
        self
    }

    pub fn ds_f(mut self, g: GenFn) -> Self {
        self.ds_f = Some(g);
        self
    }

    pub fn dy_f(mut self, g: GenFn) -> Self {
        self.dy_f = Some(g);
        self
    }

    pub fn dz_f(mut self, g: Vec<GenFn>) -> Self {
        self.dz_f = Some(g);
        self
    }

    pub fn xi(mut self, xi: StateFn) -> Self {
        self.xi = Some(xi);
        self
    }

    pub fn ds_xi(mut self, g: StateFn) -> Self {
        self.ds_xi = Some(g);
        self
    }

    pub fn lipschitz(mut self, l_f: f64, l_ds_f: f64) -> Self {
        self.lipschitz = Lipschitz { l_f, l_ds_f };
        self
    }

    /// Declare whether `f` depends on its `v` (Z-diagonal) argument.
    /// Defaults to `true`, which selects the full solver.
    pub fn z_diagonal_in_generator(mut self, flag: bool) -> Self {
        self.z_diagonal = Some(flag);
        self
    }

    pub fn build(self) -> Result<ProblemSpec> {
        let Dims { n, m, d } = self.dims;
        let (sigma, declared) = self.sigma.unwrap_or_else(|| (StateFn::zero(n, m), None));
        let sigma_max = match declared {
            Some(b) => b,
            None => match sigma.as_constant() {
                Some(c) => c.iter().map(|v| v * v).sum::<f64>().sqrt(),
                None => return Err(Error::Config("non-constant sigma needs a declared bound".into())),
            },
        };
        let spec = ProblemSpec {
            dims: self.dims,
            x0: self.x0.unwrap_or_else(|| vec![0.0; n]),
            sigma,
            sigma_max,
            drift_b: self.drift_b,
            f: self.f.unwrap_or_else(|| GenFn::zero(d, 1)),
            ds_f: self.ds_f.unwrap_or_else(|| GenFn::zero(d, 1)),
            dy_f: self.dy_f.unwrap_or_else(|| GenFn::zero(d, d)),
            dz_f: self.dz_f.unwrap_or_else(|| (0..n).map(|_| GenFn::zero(d, d)).collect()),
            xi: self.xi.unwrap_or_else(|| StateFn::zero(d, 1)),
            ds_xi: self.ds_xi.unwrap_or_else(|| StateFn::zero(d, 1)),
            lipschitz: self.lipschitz,
            z_diagonal_in_generator: self.z_diagonal.unwrap_or(true),
        };
        spec.validate()?;
        Ok(spec)
    }
}
