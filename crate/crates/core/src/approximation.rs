//! Scaled monomial bases on cells and faces, Gram matrices and L2
//! projectors.

use nalgebra::{DMatrix, DVector, Matrix2, Point2, Vector2};

use crate::error::{Error, Result};
use crate::mesh::polygon;
use crate::mesh::{CoarseMesh, FineSubmesh};
use crate::quadrature::{segment_rule, triangle_rule, QuadratureRule};

/// `dim P^q` in two variables.
pub const fn cell_dim(q: usize) -> usize {
    (q + 1) * (q + 2) / 2
}

/// `dim P^{k-1}`, zero for `k = 0`.
pub const fn cell_dim_below(k: usize) -> usize {
    if k == 0 {
        0
    } else {
        cell_dim(k - 1)
    }
}

/// `dim P^q` in one variable.
pub const fn face_dim(q: usize) -> usize {
    q + 1
}

/// Monomials `((x - c) / s)^a ((y - c) / s)^b` with `a + b <= q`, ordered
/// by total degree, so that the first `cell_dim(p)` functions span `P^p`
/// for every `p <= q`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellBasis {
    pub degree: usize,
    pub center: Point2<f64>,
    pub scale: f64,
    exponents: Vec<(usize, usize)>,
}

impl CellBasis {
    pub fn new(center: Point2<f64>, scale: f64, degree: usize) -> Self {
        let mut exponents = Vec::with_capacity(cell_dim(degree));
        for d in 0..=degree {
            for j in 0..=d {
                exponents.push((d - j, j));
            }
        }
        CellBasis {
            degree,
            center,
            scale,
            exponents,
        }
    }

    /// Basis centered at the barycenter and scaled by half the diameter.
    pub fn for_polygon(points: &[Point2<f64>], degree: usize) -> Self {
        Self::new(
            polygon::centroid(points),
            0.5 * polygon::diameter(points),
            degree,
        )
    }

    pub fn for_cell(mesh: &CoarseMesh, cell: usize, degree: usize) -> Self {
        Self::new(
            mesh.cell_centroids[cell],
            0.5 * mesh.cell_diameters[cell],
            degree,
        )
    }

    pub fn dim(&self) -> usize {
        self.exponents.len()
    }

    pub fn exponents(&self) -> &[(usize, usize)] {
        &self.exponents
    }

    fn powers(&self, p: Point2<f64>) -> ([f64; 16], [f64; 16]) {
        let x = (p.x - self.center.x) / self.scale;
        let y = (p.y - self.center.y) / self.scale;
        let mut px = [1.0; 16];
        let mut py = [1.0; 16];
        for i in 1..=self.degree {
            px[i] = px[i - 1] * x;
            py[i] = py[i - 1] * y;
        }
        (px, py)
    }

    pub fn eval_into(&self, p: Point2<f64>, out: &mut [f64]) {
        let (px, py) = self.powers(p);
        for (o, &(a, b)) in out.iter_mut().zip(&self.exponents) {
            *o = px[a] * py[b];
        }
    }

    pub fn eval(&self, p: Point2<f64>) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(p, &mut out);
        out
    }

    pub fn grad_into(&self, p: Point2<f64>, out: &mut [Vector2<f64>]) {
        let (px, py) = self.powers(p);
        let s = 1.0 / self.scale;
        for (o, &(a, b)) in out.iter_mut().zip(&self.exponents) {
            let dx = if a > 0 {
                a as f64 * px[a - 1] * py[b]
            } else {
                0.0
            };
            let dy = if b > 0 {
                b as f64 * px[a] * py[b - 1]
            } else {
                0.0
            };
            *o = Vector2::new(dx * s, dy * s);
        }
    }

    pub fn grad(&self, p: Point2<f64>) -> Vec<Vector2<f64>> {
        let mut out = vec![Vector2::zeros(); self.dim()];
        self.grad_into(p, &mut out);
        out
    }

    pub fn hessian(&self, p: Point2<f64>) -> Vec<Matrix2<f64>> {
        let (px, py) = self.powers(p);
        let s2 = 1.0 / (self.scale * self.scale);
        self.exponents
            .iter()
            .map(|&(a, b)| {
                let (af, bf) = (a as f64, b as f64);
                let dxx = if a > 1 {
                    af * (af - 1.0) * px[a - 2] * py[b]
                } else {
                    0.0
                };
                let dyy = if b > 1 {
                    bf * (bf - 1.0) * px[a] * py[b - 2]
                } else {
                    0.0
                };
                let dxy = if a > 0 && b > 0 {
                    af * bf * px[a - 1] * py[b - 1]
                } else {
                    0.0
                };
                Matrix2::new(dxx, dxy, dxy, dyy) * s2
            })
            .collect()
    }

    /// Value of `sum_i coeffs[i] phi_i(p)`.
    pub fn eval_sum(&self, coeffs: &[f64], p: Point2<f64>) -> f64 {
        let (px, py) = self.powers(p);
        coeffs
            .iter()
            .zip(&self.exponents)
            .map(|(c, &(a, b))| c * px[a] * py[b])
            .sum()
    }

    pub fn grad_sum(&self, coeffs: &[f64], p: Point2<f64>) -> Vector2<f64> {
        let (px, py) = self.powers(p);
        let mut g = Vector2::zeros();
        for (c, &(a, b)) in coeffs.iter().zip(&self.exponents) {
            if a > 0 {
                g.x += c * a as f64 * px[a - 1] * py[b];
            }
            if b > 0 {
                g.y += c * b as f64 * px[a] * py[b - 1];
            }
        }
        g / self.scale
    }
}

/// Monomials `t^j`, `j <= q`, in the coordinate `t in [-1, 1]` running
/// from the first to the second endpoint of the face.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceBasis {
    pub degree: usize,
    pub midpoint: Point2<f64>,
    pub half_length: f64,
    pub tangent: Vector2<f64>,
}

impl FaceBasis {
    pub fn new(a: Point2<f64>, b: Point2<f64>, degree: usize) -> Self {
        let d = b - a;
        let len = d.norm();
        FaceBasis {
            degree,
            midpoint: Point2::from((a.coords + b.coords) * 0.5),
            half_length: 0.5 * len,
            tangent: d / len,
        }
    }

    pub fn for_face(mesh: &CoarseMesh, face: usize, degree: usize) -> Self {
        let (a, b) = mesh.face_points(face);
        Self::new(a, b, degree)
    }

    pub fn dim(&self) -> usize {
        self.degree + 1
    }

    pub fn coordinate(&self, p: Point2<f64>) -> f64 {
        (p - self.midpoint).dot(&self.tangent) / self.half_length
    }

    pub fn eval_into(&self, p: Point2<f64>, out: &mut [f64]) {
        let t = self.coordinate(p);
        let mut v = 1.0;
        for o in out.iter_mut().take(self.degree + 1) {
            *o = v;
            v *= t;
        }
    }

    pub fn eval(&self, p: Point2<f64>) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(p, &mut out);
        out
    }

    pub fn eval_sum(&self, coeffs: &[f64], p: Point2<f64>) -> f64 {
        let t = self.coordinate(p);
        coeffs.iter().rev().fold(0.0, |acc, c| acc * t + c)
    }
}

/// Mass matrix `int phi_i phi_j` with the given rule.
pub fn gram<F: Fn(Point2<f64>, &mut [f64])>(
    dim: usize,
    eval: F,
    rule: &QuadratureRule,
) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(dim, dim);
    let mut phi = vec![0.0; dim];
    for (p, w) in rule.iter() {
        eval(p, &mut phi);
        for j in 0..dim {
            let wj = w * phi[j];
            for i in 0..dim {
                m[(i, j)] += phi[i] * wj;
            }
        }
    }
    m
}

pub fn cell_gram(basis: &CellBasis, rule: &QuadratureRule) -> DMatrix<f64> {
    gram(basis.dim(), |p, out| basis.eval_into(p, out), rule)
}

pub fn face_gram(basis: &FaceBasis, rule: &QuadratureRule) -> DMatrix<f64> {
    gram(basis.dim(), |p, out| basis.eval_into(p, out), rule)
}

/// Composite rule over a coarse cell.
pub fn cell_rule(mesh: &CoarseMesh, cell: usize, degree: usize) -> QuadratureRule {
    polygon::polygon_rule(&mesh.cell_points(cell), degree)
}

pub fn face_rule(mesh: &CoarseMesh, face: usize, degree: usize) -> QuadratureRule {
    let (a, b) = mesh.face_points(face);
    segment_rule(a, b, degree)
}

/// Solves `G x = b` for a Gram matrix, reporting singular Gram matrices.
pub fn gram_solve(g: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = g.clone().cholesky().ok_or(Error::SingularGram)?;
    let x = chol.solve(b);
    let r = g * &x - b;
    let scale = b.norm().max(g.norm() * x.norm());
    if scale > 0.0 && r.norm() > 1e-12 * scale {
        return Err(Error::SingularGram);
    }
    Ok(x)
}

fn moments<F, E>(dim: usize, f: F, eval: E, rule: &QuadratureRule) -> DVector<f64>
where
    F: Fn(Point2<f64>) -> f64,
    E: Fn(Point2<f64>, &mut [f64]),
{
    let mut b = DVector::zeros(dim);
    let mut phi = vec![0.0; dim];
    for (p, w) in rule.iter() {
        eval(p, &mut phi);
        let fw = f(p) * w;
        for i in 0..dim {
            b[i] += fw * phi[i];
        }
    }
    b
}

/// Coefficients of the L2 projection onto the span of `basis` over the
/// region covered by `rule`.
pub fn project_cell<F: Fn(Point2<f64>) -> f64>(
    f: F,
    basis: &CellBasis,
    rule: &QuadratureRule,
) -> Result<DVector<f64>> {
    let g = cell_gram(basis, rule);
    let b = moments(basis.dim(), f, |p, out| basis.eval_into(p, out), rule);
    gram_solve(&g, &b)
}

pub fn project_face<F: Fn(Point2<f64>) -> f64>(
    f: F,
    basis: &FaceBasis,
    rule: &QuadratureRule,
) -> Result<DVector<f64>> {
    let g = face_gram(basis, rule);
    let b = moments(basis.dim(), f, |p, out| basis.eval_into(p, out), rule);
    gram_solve(&g, &b)
}

/// Measured constants of the discrete trace and Poincare inequalities on
/// `P^q(T)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FunctionalConstants {
    /// `sup_v max_F ||v||_F H_F^{1/2} / ||v||_T`.
    pub trace: f64,
    /// `sup ||v||_T / ||grad v||_T` over zero-mean `v`, `None` for `q = 0`.
    pub poincare: Option<f64>,
}

/// Largest generalized eigenvalue of `a x = l b x` with `b` SPD.
fn max_generalized_eigenvalue(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let l = b.clone().cholesky().ok_or(Error::SingularGram)?.l();
    let li = l.try_inverse().ok_or(Error::SingularGram)?;
    let c = &li * a * li.transpose();
    let c = (&c + c.transpose()) * 0.5;
    Ok(c.symmetric_eigenvalues().max())
}

pub fn verify_functional_inequalities(
    mesh: &CoarseMesh,
    cell: usize,
    q: usize,
) -> Result<FunctionalConstants> {
    let basis = CellBasis::for_cell(mesh, cell, q);
    let rule = cell_rule(mesh, cell, 2 * q);
    let m = cell_gram(&basis, &rule);
    let mut trace: f64 = 0.0;
    for &f in &mesh.cell_faces[cell] {
        let fr = face_rule(mesh, f, 2 * q);
        let mf = gram(basis.dim(), |p, out| basis.eval_into(p, out), &fr) * mesh.face_diameters[f];
        trace = trace.max(max_generalized_eigenvalue(&mf, &m)?.sqrt());
    }
    let poincare = if q == 0 {
        None
    } else {
        // Zero-mean basis: phi_i - mean(phi_i), i >= 1.
        let area = m[(0, 0)];
        let n = basis.dim() - 1;
        let mut p = DMatrix::zeros(basis.dim(), n);
        for i in 0..n {
            p[(i + 1, i)] = 1.0;
            p[(0, i)] = -m[(0, i + 1)] / area;
        }
        let mass = p.transpose() * &m * &p;
        let mut stiff = DMatrix::zeros(basis.dim(), basis.dim());
        let mut g = vec![Vector2::zeros(); basis.dim()];
        for (x, w) in rule.iter() {
            basis.grad_into(x, &mut g);
            for i in 0..basis.dim() {
                for j in 0..basis.dim() {
                    stiff[(i, j)] += w * g[i].dot(&g[j]);
                }
            }
        }
        let stiff = p.transpose() * stiff * &p;
        Some(max_generalized_eigenvalue(&mass, &stiff)?.sqrt())
    };
    Ok(FunctionalConstants { trace, poincare })
}

/// Composite integral of `f` over the fine sub-mesh, checked against the
/// rule of twice the degree. Returns the higher-order value.
pub fn oscillatory_quadrature<F: Fn(Point2<f64>) -> f64>(
    f: F,
    sub: &FineSubmesh,
    degree: usize,
) -> Result<f64> {
    let integrate = |deg: usize| -> f64 {
        (0..sub.num_triangles())
            .map(|t| {
                triangle_rule(&sub.mesh.triangle(t), deg)
                    .iter()
                    .map(|(p, w)| w * f(p))
                    .sum::<f64>()
            })
            .sum()
    };
    let low = integrate(degree);
    let high = integrate(2 * degree.max(1));
    let scale = high.abs().max(low.abs());
    let difference = if scale > 0.0 {
        (high - low).abs() / scale
    } else {
        0.0
    };
    if difference > 1e-8 {
        return Err(Error::QuadratureNotConverged { difference });
    }
    Ok(high)
}
