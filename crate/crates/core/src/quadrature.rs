//! Gauss rules on segments and triangles.
//!
//! Triangle rules are collapsed (Duffy) products of Gauss–Legendre rules:
//! the square `[0,1]^2` is mapped onto the reference triangle by
//! `(s, t) -> (s, t (1 - s))`. Weights stay positive and the exactness
//! degree can be chosen freely, which matters because the coefficient
//! fields are integrated at several orders for self-checks.

use std::sync::OnceLock;

use nalgebra::Point2;

const MAX_POINTS: usize = 32;

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1 && n <= MAX_POINTS, "unsupported Gauss rule size {n}");
    static TABLE: OnceLock<Vec<(Vec<f64>, Vec<f64>)>> = OnceLock::new();
    let table = TABLE.get_or_init(|| (1..=MAX_POINTS).map(compute_gauss_legendre).collect());
    table[n - 1].clone()
}

fn compute_gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Tricomi initial guess, then Newton on P_n.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        dp = if d != 0.0 { d } else { dp };
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Quadrature rule: points, positive weights and exactness degree.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub points: Vec<Point2<f64>>,
    pub weights: Vec<f64>,
    pub degree: usize,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Point2<f64>, f64)> + '_ {
        self.points
            .iter()
            .copied()
            .zip(self.weights.iter().copied())
    }
}

/// Reference rule on `[0, 1]`, exact for polynomials of the given degree.
pub fn unit_interval_rule(degree: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (degree + 2) / 2;
    let (x, w) = gauss_legendre(n.max(1));
    (
        x.iter().map(|&t| 0.5 * (t + 1.0)).collect(),
        w.iter().map(|&w| 0.5 * w).collect(),
    )
}

/// Rule on the reference triangle `{x, y >= 0, x + y <= 1}` (weights sum to 1/2).
pub fn reference_triangle_rule(degree: usize) -> &'static QuadratureRule {
    static TABLE: OnceLock<Vec<QuadratureRule>> = OnceLock::new();
    let table = TABLE.get_or_init(|| (0..=2 * MAX_POINTS - 3).map(build_triangle_rule).collect());
    &table[degree]
}

fn build_triangle_rule(degree: usize) -> QuadratureRule {
    // The collapsed integrand has degree `degree + 1` in s and `degree` in t.
    let ns = (degree + 3) / 2;
    let nt = (degree + 2) / 2;
    let (xs, ws) = gauss_legendre(ns.max(1));
    let (xt, wt) = gauss_legendre(nt.max(1));
    let mut points = Vec::with_capacity(ns * nt);
    let mut weights = Vec::with_capacity(ns * nt);
    for (&s, &wsi) in xs.iter().zip(&ws) {
        let s = 0.5 * (s + 1.0);
        for (&t, &wtj) in xt.iter().zip(&wt) {
            let t = 0.5 * (t + 1.0);
            points.push(Point2::new(s, t * (1.0 - s)));
            weights.push(0.25 * wsi * wtj * (1.0 - s));
        }
    }
    QuadratureRule {
        points,
        weights,
        degree,
    }
}

/// Rule mapped onto the physical triangle `(a, b, c)`.
pub fn triangle_rule(vertices: &[Point2<f64>; 3], degree: usize) -> QuadratureRule {
    let reference = reference_triangle_rule(degree);
    let [a, b, c] = *vertices;
    let e1 = b - a;
    let e2 = c - a;
    let jac = (e1.x * e2.y - e1.y * e2.x).abs();
    QuadratureRule {
        points: reference
            .points
            .iter()
            .map(|p| a + e1 * p.x + e2 * p.y)
            .collect(),
        weights: reference.weights.iter().map(|w| w * jac).collect(),
        degree,
    }
}

/// Rule on the segment `[a, b]`; weights sum to its length.
pub fn segment_rule(a: Point2<f64>, b: Point2<f64>, degree: usize) -> QuadratureRule {
    let (t, w) = unit_interval_rule(degree);
    let len = (b - a).norm();
    QuadratureRule {
        points: t.iter().map(|&t| a + (b - a) * t).collect(),
        weights: w.iter().map(|w| w * len).collect(),
        degree,
    }
}
