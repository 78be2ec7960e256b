//! Periodic correctors, the homogenized tensor and the first-order
//! two-scale expansion.

use std::collections::HashMap;

use nalgebra::{DVector, Matrix2, Point2, Vector2};
use rayon::prelude::*;

use crate::coefficient::{eigenvalues, DiffusionSpec, TensorField};
use crate::error::{Error, Result};
use crate::hho_mono::{
    flux_moments, locate_structured, solve_dirichlet, volume_degree, DofMap, FineField,
    HhoDiscretization, MonoSolution,
};
use crate::local_solver::{solve_sparse_spd, CsrMatrix, SolverMethod};
use crate::mesh::TriMesh;
use crate::quadrature::triangle_rule;

/// Relative agreement required between the two forms of `A_0`.
pub const FORM_TOLERANCE: f64 = 1e-8;

/// Identifies the edges on `x = 1` (`y = 1`) with their partners on `x = 0`
/// (`y = 0`) of a [`TriMesh::unit_square`] mesh.
pub fn periodic_dof_map(mesh: &TriMesh) -> Result<DofMap> {
    let n_edges = mesh.num_edges();
    let key = |e: usize, horizontal: bool| {
        let (a, b) = mesh.edge_points(e);
        let m = if horizontal {
            0.5 * (a.x + b.x)
        } else {
            0.5 * (a.y + b.y)
        };
        (m * 1e9).round() as i64
    };
    let mut left = HashMap::new();
    let mut bottom = HashMap::new();
    for e in 0..n_edges {
        match mesh.edge_tags[e] {
            Some(3) => {
                left.insert(key(e, false), e);
            }
            Some(0) => {
                bottom.insert(key(e, true), e);
            }
            _ => {}
        }
    }
    let mut partner: Vec<Option<usize>> = vec![None; n_edges];
    for e in 0..n_edges {
        let found = match mesh.edge_tags[e] {
            Some(1) => Some(left.get(&key(e, false))),
            Some(2) => Some(bottom.get(&key(e, true))),
            _ => None,
        };
        if let Some(found) = found {
            let Some(&p) = found else {
                let (a, b) = mesh.edge_points(e);
                return Err(Error::Periodicity(format!(
                    "edge ({:.6}, {:.6})-({:.6}, {:.6}) has no periodic partner",
                    a.x, a.y, b.x, b.y
                )));
            };
            partner[e] = Some(p);
        }
    }
    let mut blocks = vec![None; n_edges];
    let mut n = 0;
    for e in 0..n_edges {
        if partner[e].is_none() {
            blocks[e] = Some(n);
            n += 1;
        }
    }
    for e in 0..n_edges {
        if let Some(p) = partner[e] {
            blocks[e] = blocks[p];
        }
    }
    if left.len() + bottom.len() != partner.iter().flatten().count() {
        return Err(Error::Periodicity(
            "opposite sides have different edge counts".into(),
        ));
    }
    Ok(DofMap {
        blocks,
        num_blocks: n,
    })
}

/// Discrete correctors `mu_1`, `mu_2` on the periodic unit cell.
#[derive(Debug, Clone)]
pub struct CorrectorSet {
    /// Grid resolution of the structured unit-cell mesh.
    pub n: usize,
    pub q: usize,
    pub mesh: TriMesh,
    pub correctors: [MonoSolution; 2],
    /// Relative residual of the periodic systems (both right-hand sides
    /// share one scale).
    pub residual: f64,
    /// Largest `|int_Q mu_l|`.
    pub mean: f64,
    /// Largest mismatch of edge unknowns across identified edges.
    pub periodic_mismatch: f64,
    /// `A_0` from the flux form, kept for the symmetric-form check.
    flux_form: Matrix2<f64>,
    symmetric_form: Matrix2<f64>,
}

/// Max-norm residual `|K x - b|` and the scale `|K| |x| + |b|`.
fn residual_parts(k: &CsrMatrix, x: &[f64], b: &[f64]) -> (f64, f64) {
    let r = k.mul_vec(x);
    let num = r
        .iter()
        .zip(b)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let knorm = (0..k.nrows)
        .map(|i| k.row(i).map(|(_, v)| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let xnorm = x.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let bnorm = b.iter().map(|v| v.abs()).fold(0.0, f64::max);
    (num, knorm * xnorm + bnorm)
}

/// Pins global unknown 0 to zero.
fn pin_first(k: &CsrMatrix) -> CsrMatrix {
    let triplets: Vec<_> = k
        .triplets()
        .into_iter()
        .filter(|&(i, j, _)| i != 0 && j != 0)
        .chain(std::iter::once((0, 0, 1.0)))
        .collect();
    CsrMatrix::from_triplets(k.nrows, k.ncols, &triplets)
}

/// Solves the corrector problems on an `n x n` periodic unit-cell mesh.
pub fn solve_correctors(field: &dyn TensorField, n: usize, q: usize) -> Result<CorrectorSet> {
    if n < 2 {
        return Err(Error::InvalidArgument("corrector mesh needs n >= 2".into()));
    }
    let mesh = TriMesh::unit_square(n)?;
    let map = periodic_dof_map(&mesh)?;
    let disc = HhoDiscretization::new(&mesh, field, q)?;
    let nt = mesh.num_triangles();
    let moments: Vec<[DVector<f64>; 2]> = (0..nt)
        .into_par_iter()
        .map(|t| flux_moments(&mesh, t, field, &disc.locals[t].basis))
        .collect();
    let k = disc.assemble(&map);
    let pinned = pin_first(&k);
    let mut fields = Vec::with_capacity(2);
    let (mut res_num, mut res_den): (f64, f64) = (0.0, 0.0);
    for l in 0..2 {
        // a_h(mu_l, v) = -int A e_l . grad R v
        let loads: Vec<DVector<f64>> = (0..nt)
            .map(|t| -disc.locals[t].rec.transpose() * &moments[t][l])
            .collect();
        let mut rhs = disc.condensed_rhs(&loads, &map, None);
        let full_rhs = rhs.clone();
        rhs[0] = 0.0;
        let x = solve_sparse_spd(&pinned, &rhs, SolverMethod::Cholesky)?;
        let (num, den) = residual_parts(&k, &x, &full_rhs);
        res_num = res_num.max(num);
        res_den = res_den.max(den);
        let mut u = disc.recover(&x, &map, None, &loads);
        let mean = disc.cell_integral(&u);
        u.shift(-mean);
        fields.push(u);
    }
    let residual = if res_den > 0.0 {
        res_num / res_den
    } else {
        0.0
    };
    let mean = fields
        .iter()
        .map(|u| disc.cell_integral(u).abs())
        .fold(0.0, f64::max);
    let periodic_mismatch = periodic_mismatch(&mesh, &map, &fields);

    // int A e_m . e_l with the same rule as the local operators
    let mut avg = Matrix2::zeros();
    for t in 0..nt {
        for (p, w) in triangle_rule(&mesh.triangle(t), volume_degree(q)).iter() {
            avg += field.tensor(p) * w;
        }
    }
    // flux[(m, l)] = int A (grad mu_l + e_l) . e_m
    // sym[(m, l)]  = int A (grad mu_l + e_l) . (grad mu_m + e_m)
    let mut flux = avg;
    let mut sym = avg;
    for t in 0..nt {
        let loc = &disc.locals[t];
        let gr: Vec<DVector<f64>> = fields
            .iter()
            .map(|u| &loc.rec * disc.gather(u, t))
            .collect();
        let lv: Vec<DVector<f64>> = fields.iter().map(|u| disc.gather(u, t)).collect();
        for m in 0..2 {
            for l in 0..2 {
                let cross = moments[t][m].dot(&gr[l]);
                flux[(m, l)] += cross;
                sym[(m, l)] += lv[l].dot(&(&loc.a * &lv[m])) + cross + moments[t][l].dot(&gr[m]);
            }
        }
    }
    let correctors = [
        MonoSolution::new(&disc, fields[0].clone()),
        MonoSolution::new(&disc, fields[1].clone()),
    ];
    Ok(CorrectorSet {
        n,
        q,
        mesh,
        correctors,
        residual,
        mean,
        periodic_mismatch,
        flux_form: flux,
        symmetric_form: sym,
    })
}

fn periodic_mismatch(mesh: &TriMesh, map: &DofMap, fields: &[FineField]) -> f64 {
    let mut first: HashMap<usize, usize> = HashMap::new();
    let mut worst: f64 = 0.0;
    for e in 0..mesh.num_edges() {
        let Some(b) = map.blocks[e] else { continue };
        match first.get(&b) {
            None => {
                first.insert(b, e);
            }
            Some(&p) => {
                for u in fields {
                    for (x, y) in u.face_block(e).iter().zip(u.face_block(p)) {
                        worst = worst.max((x - y).abs());
                    }
                }
            }
        }
    }
    worst
}

impl CorrectorSet {
    fn locate(&self, y: Point2<f64>) -> (usize, Point2<f64>) {
        let w = Point2::new(y.x - y.x.floor(), y.y - y.y.floor());
        let t = locate_structured(self.n, w).expect("wrapped point lies in the unit cell");
        (t, w)
    }

    /// `mu_l(y)` with periodic wrapping.
    pub fn value(&self, l: usize, y: Point2<f64>) -> f64 {
        let (t, w) = self.locate(y);
        self.correctors[l].value(t, w)
    }

    /// `grad_y mu_l(y)` with periodic wrapping.
    pub fn gradient(&self, l: usize, y: Point2<f64>) -> Vector2<f64> {
        let (t, w) = self.locate(y);
        self.correctors[l].gradient(t, w)
    }

    /// Values and gradients of both correctors on triangle `t` at `y`
    /// (no wrapping; `y` may lie slightly outside `t`).
    pub fn eval_on(&self, t: usize, y: Point2<f64>) -> ([f64; 2], [Vector2<f64>; 2]) {
        (
            [
                self.correctors[0].value(t, y),
                self.correctors[1].value(t, y),
            ],
            [
                self.correctors[0].gradient(t, y),
                self.correctors[1].gradient(t, y),
            ],
        )
    }
}

/// The constant homogenized tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomogenizedTensor {
    pub a0: Matrix2<f64>,
    /// Relative difference of the symmetric and flux forms.
    pub form_gap: f64,
}

impl TensorField for HomogenizedTensor {
    fn tensor(&self, _: Point2<f64>) -> Matrix2<f64> {
        self.a0
    }

    fn bounds(&self) -> (f64, f64) {
        eigenvalues(&self.a0)
    }
}

/// `A_0` from the correctors; both forms must agree.
pub fn homogenized_tensor(
    field: &dyn TensorField,
    correctors: &CorrectorSet,
) -> Result<HomogenizedTensor> {
    let flux = correctors.flux_form;
    let sym = correctors.symmetric_form;
    let form_gap = (flux - sym).norm() / flux.norm();
    if form_gap > FORM_TOLERANCE {
        return Err(Error::Tolerance {
            what: "homogenized tensor form agreement",
            value: form_gap,
            tolerance: FORM_TOLERANCE,
        });
    }
    let a0 = (sym + sym.transpose()) * 0.5;
    let (alpha, beta) = field.bounds();
    let (lo, hi) = eigenvalues(&a0);
    let slack = 1e-10 * beta;
    if lo < alpha - slack || hi > beta + slack {
        return Err(Error::Tolerance {
            what: "homogenized tensor spectrum",
            value: if lo < alpha { alpha - lo } else { hi - beta },
            tolerance: slack,
        });
    }
    Ok(HomogenizedTensor { a0, form_gap })
}

/// Correctors and `A_0` of the periodic part of `spec`.
pub fn homogenize(
    spec: &DiffusionSpec,
    n: usize,
    q: usize,
) -> Result<(CorrectorSet, HomogenizedTensor)> {
    let cell = spec.unit_cell();
    let correctors = solve_correctors(&cell, n, q)?;
    let a0 = homogenized_tensor(&cell, &correctors)?;
    Ok((correctors, a0))
}

/// A field with pointwise value, gradient and Hessian.
pub trait SmoothField: Sync {
    fn contains(&self, p: Point2<f64>) -> bool;
    fn value(&self, p: Point2<f64>) -> f64;
    fn gradient(&self, p: Point2<f64>) -> Vector2<f64>;
    fn hessian(&self, p: Point2<f64>) -> Matrix2<f64>;
}

/// Reconstruction of a monoscale solution on [`TriMesh::unit_square`]`(n)`.
pub struct StructuredField {
    pub n: usize,
    pub solution: MonoSolution,
}

impl StructuredField {
    fn triangle(&self, p: Point2<f64>) -> usize {
        locate_structured(self.n, p).expect("point inside the unit square")
    }
}

impl SmoothField for StructuredField {
    fn contains(&self, p: Point2<f64>) -> bool {
        locate_structured(self.n, p).is_some()
    }

    fn value(&self, p: Point2<f64>) -> f64 {
        self.solution.value(self.triangle(p), p)
    }

    fn gradient(&self, p: Point2<f64>) -> Vector2<f64> {
        self.solution.gradient(self.triangle(p), p)
    }

    fn hessian(&self, p: Point2<f64>) -> Matrix2<f64> {
        let t = self.triangle(p);
        let rec = &self.solution.rec[t];
        self.solution.bases[t]
            .hessian(p)
            .iter()
            .zip(rec.iter())
            .fold(Matrix2::zeros(), |acc, (h, c)| acc + h * *c)
    }
}

/// `L_eps(u0) = u0 + eps sum_l mu_l(x / eps) d_l u0`.
pub struct TwoScaleExpansion<'a> {
    pub u0: &'a dyn SmoothField,
    pub correctors: &'a CorrectorSet,
    pub eps: f64,
}

impl TwoScaleExpansion<'_> {
    fn check(&self, x: Point2<f64>) -> Result<()> {
        if self.u0.contains(x) {
            Ok(())
        } else {
            Err(Error::OutsideDomain { x: x.x, y: x.y })
        }
    }

    pub fn value(&self, x: Point2<f64>) -> Result<f64> {
        self.check(x)?;
        let y = Point2::from(x.coords / self.eps);
        let g = self.u0.gradient(x);
        Ok(self.u0.value(x)
            + self.eps * (self.correctors.value(0, y) * g.x + self.correctors.value(1, y) * g.y))
    }

    pub fn gradient(&self, x: Point2<f64>) -> Result<Vector2<f64>> {
        self.check(x)?;
        let y = Point2::from(x.coords / self.eps);
        Ok(self.gradient_with(x, |l| {
            (self.correctors.value(l, y), self.correctors.gradient(l, y))
        }))
    }

    /// Gradient with the corrector data supplied by the caller.
    fn gradient_with(
        &self,
        x: Point2<f64>,
        mu: impl Fn(usize) -> (f64, Vector2<f64>),
    ) -> Vector2<f64> {
        let g = self.u0.gradient(x);
        let h = self.u0.hessian(x);
        let mut out = g;
        for l in 0..2 {
            let (m, dm) = mu(l);
            out += dm * g[l] + h.column(l) * (self.eps * m);
        }
        out
    }
}

/// Settings of the two-scale expansion diagnostic.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionSettings {
    pub eps: Vec<f64>,
    /// Fine elements per period side for `u_eps`.
    pub cells_per_period: usize,
    pub fine_q: usize,
    pub corrector_n: usize,
    pub corrector_q: usize,
    /// Mesh and degree of the homogenized solve.
    pub u0_n: usize,
    pub u0_q: usize,
}

impl Default for ExpansionSettings {
    fn default() -> Self {
        ExpansionSettings {
            eps: vec![0.2, 0.1, 0.05],
            cells_per_period: 16,
            fine_q: 2,
            corrector_n: 64,
            corrector_q: 1,
            u0_n: 32,
            u0_q: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionReport {
    pub eps: Vec<f64>,
    pub energy: Vec<f64>,
    pub slope: f64,
    pub a0: Matrix2<f64>,
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

fn subdivide(tri: [Point2<f64>; 3], depth: usize, out: &mut Vec<[Point2<f64>; 3]>) {
    if depth == 0 {
        out.push(tri);
        return;
    }
    let [a, b, c] = tri;
    let ab = Point2::from((a.coords + b.coords) * 0.5);
    let bc = Point2::from((b.coords + c.coords) * 0.5);
    let ca = Point2::from((c.coords + a.coords) * 0.5);
    for child in [[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]] {
        subdivide(child, depth - 1, out);
    }
}

/// `E(eps) = ||A_eps^{1/2} grad(u_eps - L_eps(u0))||` on the unit square
/// for each `eps`, and the fitted slope of `log E` against `log eps`.
pub fn expansion_energy_diagnostic(
    spec: &DiffusionSpec,
    f: &(dyn Fn(Point2<f64>) -> f64 + Sync),
    settings: &ExpansionSettings,
) -> Result<ExpansionReport> {
    if !spec.is_periodic() {
        return Err(Error::InvalidArgument(format!(
            "the expansion diagnostic needs a periodic coefficient, got {}",
            spec.name()
        )));
    }
    if settings.eps.len() < 2 {
        return Err(Error::InvalidArgument(
            "need at least two values of eps".into(),
        ));
    }
    let (correctors, a0) = homogenize(spec, settings.corrector_n, settings.corrector_q)?;
    let u0_mesh = TriMesh::unit_square(settings.u0_n)?;
    let u0 = StructuredField {
        n: settings.u0_n,
        solution: solve_dirichlet(
            &u0_mesh,
            &a0,
            f,
            settings.u0_q,
            None,
            SolverMethod::Cholesky,
        )?,
    };
    let mut energy = Vec::with_capacity(settings.eps.len());
    for &eps in &settings.eps {
        let field = spec.with_eps(eps);
        let n = (settings.cells_per_period as f64 / eps).ceil() as usize;
        let mesh = TriMesh::unit_square(n)?;
        let h = mesh.max_diameter();
        if h > eps / 4.0 {
            return Err(Error::UnderResolved {
                h,
                limit: eps / 4.0,
            });
        }
        let ueps = solve_dirichlet(
            &mesh,
            &field,
            f,
            settings.fine_q,
            None,
            SolverMethod::Cholesky,
        )?;
        let expansion = TwoScaleExpansion {
            u0: &u0,
            correctors: &correctors,
            eps,
        };
        // sub-triangles no larger than the corrector cells seen at scale eps
        let ratio = settings.corrector_n as f64 / (n as f64 * eps);
        let depth = ratio.log2().ceil().max(0.0) as usize;
        let degree = 2 * settings.fine_q.max(settings.corrector_q) + 2;
        let e2: f64 = (0..mesh.num_triangles())
            .into_par_iter()
            .map(|t| {
                let mut subs = Vec::with_capacity(1 << (2 * depth));
                subdivide(mesh.triangle(t), depth, &mut subs);
                let mut s = 0.0;
                for sub in subs {
                    let c = Point2::from((sub[0].coords + sub[1].coords + sub[2].coords) / 3.0);
                    let yc = c.coords / eps;
                    let shift = Vector2::new(yc.x.floor(), yc.y.floor());
                    let tc = locate_structured(correctors.n, Point2::from(yc - shift))
                        .expect("wrapped centroid lies in the unit cell");
                    for (p, w) in triangle_rule(&sub, degree).iter() {
                        let y = Point2::from(p.coords / eps - shift);
                        let (mu, dmu) = correctors.eval_on(tc, y);
                        let gl = expansion.gradient_with(p, |l| (mu[l], dmu[l]));
                        let d = ueps.gradient(t, p) - gl;
                        s += w * d.dot(&(field.tensor(p) * d));
                    }
                }
                s
            })
            .collect::<Vec<f64>>()
            .iter()
            .sum();
        energy.push(e2.sqrt());
    }
    let slope = loglog_slope(&settings.eps, &energy);
    Ok(ExpansionReport {
        eps: settings.eps.clone(),
        energy,
        slope,
        a0: a0.a0,
    })
}
