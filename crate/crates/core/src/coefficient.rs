//! Oscillatory diffusion coefficients.

use std::f64::consts::PI;

use nalgebra::{Matrix2, Point2};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::expr::Expr;

/// Symmetric tensor field with known spectral bounds.
pub trait TensorField: Sync {
    fn tensor(&self, p: Point2<f64>) -> Matrix2<f64>;
    /// `(alpha, beta)`.
    fn bounds(&self) -> (f64, f64);
}

/// Spectrum of a symmetric 2x2 matrix, ascending.
pub fn eigenvalues(a: &Matrix2<f64>) -> (f64, f64) {
    let m = 0.5 * (a[(0, 0)] + a[(1, 1)]);
    let d = 0.5 * (a[(0, 0)] - a[(1, 1)]);
    let r = (d * d + a[(0, 1)] * a[(1, 0)]).max(0.0).sqrt();
    (m - r, m + r)
}

/// Checks `alpha <= spectrum <= beta` (relative slack 1e-12).
pub fn check_bounds(a: &Matrix2<f64>, p: Point2<f64>, alpha: f64, beta: f64) -> Result<()> {
    let (min, max) = eigenvalues(a);
    let slack = 1e-12 * beta.abs();
    if min < alpha - slack || max > beta + slack || !min.is_finite() || !max.is_finite() {
        return Err(Error::CoefficientBounds {
            x: p.x,
            y: p.y,
            min,
            max,
            alpha,
            beta,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum CoefficientKind {
    /// `a(y) = 1 + 100 cos^2(pi y1) sin^2(pi y2)`.
    PeriodicPaper,
    /// `a(x / eps) + exp((x1^2 + x2^2) / 2)`.
    LocallyPeriodicPaper,
    Constant(f64),
    /// `low` for `frac(y1) < 1/2`, `high` otherwise.
    Laminate {
        low: f64,
        high: f64,
    },
    /// Scalar field `f(x, y, eps)` given directly in physical variables.
    Expression(Expr),
}

/// `A_eps(x) = c (A(x / eps) + s(x)) I` with periodic part `A` and slow
/// additive part `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSpec {
    pub kind: CoefficientKind,
    pub eps: f64,
    /// Multiplicative factor applied to the whole field.
    pub scale: f64,
    pub alpha: f64,
    pub beta: f64,
}

fn paper_cell(y: Point2<f64>) -> f64 {
    let c = (PI * y.x).cos();
    let s = (PI * y.y).sin();
    1.0 + 100.0 * c * c * s * s
}

impl DiffusionSpec {
    fn with_bounds(kind: CoefficientKind, eps: f64, alpha: f64, beta: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "eps must be positive, got {eps}"
            )));
        }
        if !(alpha > 0.0) || beta < alpha {
            return Err(Error::InvalidArgument(format!(
                "invalid bounds [{alpha}, {beta}]"
            )));
        }
        Ok(DiffusionSpec {
            kind,
            eps,
            scale: 1.0,
            alpha,
            beta,
        })
    }

    pub fn periodic_paper(eps: f64) -> Result<Self> {
        Self::with_bounds(CoefficientKind::PeriodicPaper, eps, 1.0, 101.0)
    }

    pub fn locally_periodic_paper(eps: f64) -> Result<Self> {
        Self::with_bounds(
            CoefficientKind::LocallyPeriodicPaper,
            eps,
            2.0,
            101.0 + std::f64::consts::E,
        )
    }

    pub fn constant(value: f64, eps: f64) -> Result<Self> {
        Self::with_bounds(CoefficientKind::Constant(value), eps, value, value)
    }

    pub fn laminate(low: f64, high: f64, eps: f64) -> Result<Self> {
        Self::with_bounds(
            CoefficientKind::Laminate { low, high },
            eps,
            low.min(high),
            low.max(high),
        )
    }

    /// Bounds are estimated by sampling the unit square on a 401^2 grid.
    pub fn expression(expr: Expr, eps: f64) -> Result<Self> {
        let n = 400;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for j in 0..=n {
            for i in 0..=n {
                let v = expr.eval(i as f64 / n as f64, j as f64 / n as f64, eps);
                if !v.is_finite() {
                    return Err(Error::Config(format!(
                        "coefficient `{expr}` is not finite on the domain"
                    )));
                }
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if !(lo > 0.0) {
            return Err(Error::Config(format!(
                "coefficient `{expr}` is not uniformly positive (min {lo})"
            )));
        }
        // sampling may miss the extremes slightly
        Self::with_bounds(CoefficientKind::Expression(expr), eps, lo * 0.99, hi * 1.01)
    }

    /// Named preset: `periodic_paper`, `locally_periodic_paper`, `constant`
    /// (value 1), `laminate` (values 1 and 4).
    pub fn preset(name: &str, eps: f64) -> Result<Self> {
        match name {
            "periodic_paper" => Self::periodic_paper(eps),
            "locally_periodic_paper" => Self::locally_periodic_paper(eps),
            "constant" => Self::constant(1.0, eps),
            "laminate" => Self::laminate(1.0, 4.0, eps),
            other => Err(Error::Config(format!(
                "unknown coefficient preset `{other}`"
            ))),
        }
    }

    pub fn name(&self) -> String {
        match &self.kind {
            CoefficientKind::PeriodicPaper => "periodic_paper".into(),
            CoefficientKind::LocallyPeriodicPaper => "locally_periodic_paper".into(),
            CoefficientKind::Constant(c) => format!("constant({c})"),
            CoefficientKind::Laminate { low, high } => format!("laminate({low},{high})"),
            CoefficientKind::Expression(e) => format!("expr({e})"),
        }
    }

    /// Multiplies the field (and its bounds) by `c > 0`.
    pub fn scaled(&self, c: f64) -> Self {
        DiffusionSpec {
            scale: self.scale * c,
            alpha: self.alpha * c,
            beta: self.beta * c,
            ..self.clone()
        }
    }

    pub fn with_eps(&self, eps: f64) -> Self {
        DiffusionSpec {
            eps,
            ..self.clone()
        }
    }

    pub fn rho(&self) -> f64 {
        self.beta / self.alpha
    }

    /// Whether the field is a function of `x / eps` only.
    pub fn is_periodic(&self) -> bool {
        !matches!(
            self.kind,
            CoefficientKind::LocallyPeriodicPaper | CoefficientKind::Expression(_)
        )
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.kind, CoefficientKind::Constant(_))
    }

    /// Periodic unit-cell part `A(y)` (scalar multiple of the identity).
    pub fn cell_value(&self, y: Point2<f64>) -> f64 {
        let v = match &self.kind {
            CoefficientKind::PeriodicPaper | CoefficientKind::LocallyPeriodicPaper => paper_cell(y),
            CoefficientKind::Constant(c) => *c,
            CoefficientKind::Laminate { low, high } => {
                if y.x - y.x.floor() < 0.5 {
                    *low
                } else {
                    *high
                }
            }
            CoefficientKind::Expression(e) => e.eval(y.x * self.eps, y.y * self.eps, self.eps),
        };
        self.scale * v
    }

    /// Scalar value of `A_eps` at `x`.
    pub fn value(&self, x: Point2<f64>) -> f64 {
        match &self.kind {
            CoefficientKind::LocallyPeriodicPaper => {
                self.scale * (paper_cell(x / self.eps) + (0.5 * (x.x * x.x + x.y * x.y)).exp())
            }
            CoefficientKind::Expression(e) => self.scale * e.eval(x.x, x.y, self.eps),
            _ => self.cell_value(Point2::from(x.coords / self.eps)),
        }
    }

    /// Stable identifier of the field, used as part of cache keys.
    pub fn fingerprint(&self) -> String {
        let text = format!(
            "{}|eps={:016x}|scale={:016x}|alpha={:016x}",
            self.name(),
            self.eps.to_bits(),
            self.scale.to_bits(),
            self.alpha.to_bits()
        );
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Unit-cell field `y -> A(y)` (for correctors).
    pub fn unit_cell(&self) -> UnitCell<'_> {
        UnitCell(self)
    }
}

impl TensorField for DiffusionSpec {
    fn tensor(&self, p: Point2<f64>) -> Matrix2<f64> {
        Matrix2::identity() * self.value(p)
    }

    fn bounds(&self) -> (f64, f64) {
        (self.alpha, self.beta)
    }
}

pub struct UnitCell<'a>(&'a DiffusionSpec);

impl TensorField for UnitCell<'_> {
    fn tensor(&self, y: Point2<f64>) -> Matrix2<f64> {
        Matrix2::identity() * self.0.cell_value(y)
    }

    fn bounds(&self) -> (f64, f64) {
        match self.0.kind {
            // the slow additive part is not part of the cell
            CoefficientKind::LocallyPeriodicPaper => (self.0.scale, 101.0 * self.0.scale),
            _ => (self.0.alpha, self.0.beta),
        }
    }
}

/// Constant tensor.
#[derive(Debug, Clone, Copy)]
pub struct ConstantTensor(pub Matrix2<f64>);

impl TensorField for ConstantTensor {
    fn tensor(&self, _: Point2<f64>) -> Matrix2<f64> {
        self.0
    }

    fn bounds(&self) -> (f64, f64) {
        eigenvalues(&self.0)
    }
}

/// Samples the field on an `n x n` grid of the unit square and checks the
/// bounds, symmetry and (for periodic fields) periodicity of the unit cell.
pub fn validate_spec(spec: &DiffusionSpec, n: usize) -> Result<()> {
    for j in 0..=n {
        for i in 0..=n {
            let p = Point2::new(i as f64 / n as f64, j as f64 / n as f64);
            check_bounds(&spec.tensor(p), p, spec.alpha, spec.beta)?;
            if spec.is_periodic() {
                let a = spec.cell_value(p);
                for shift in [Point2::new(p.x + 1.0, p.y), Point2::new(p.x, p.y + 1.0)] {
                    if (spec.cell_value(shift) - a).abs() > 1e-12 * a.abs().max(1.0) {
                        return Err(Error::Periodicity(format!(
                            "unit-cell field not periodic at {p}"
                        )));
                    }
                }
            }
        }
    }
    Ok(())
}
