//! Equal-order monoscale HHO on triangulations with a variable tensor
//! coefficient.
//!
//! Local unknowns on a triangle are one `P^q` cell polynomial and one
//! `P^q` polynomial per edge, ordered cell first, then local edges 0, 1, 2.
//! The reconstruction maps into `P^{q+1}` and the stabilization is the
//! usual equal-order face penalty weighted by `alpha / h_F`.

use nalgebra::{DMatrix, DVector, Point2, Vector2};
use rayon::prelude::*;

use crate::approximation::{cell_dim, face_dim, CellBasis, FaceBasis};
use crate::coefficient::{check_bounds, TensorField};
use crate::error::{Error, Result};
use crate::local_solver::{
    solve_sparse_spd, ConstrainedSolver, CsrMatrix, DenseCholesky, SolverMethod, SparseRow,
};
use crate::mesh::TriMesh;
use crate::quadrature::{segment_rule, triangle_rule};

/// Extra quadrature degree spent on the coefficient.
const COEFF_DEGREE: usize = 2;

/// Degree of the volume rule used by the local operators.
pub fn volume_degree(q: usize) -> usize {
    2 * q + 2 + COEFF_DEGREE
}

/// Local reconstruction and bilinear form of one triangle.
#[derive(Debug, Clone)]
pub struct LocalHho {
    pub q: usize,
    /// Basis of `P^{q+1}`; its first `cell_dim(q)` functions are the cell
    /// unknowns' basis.
    pub basis: CellBasis,
    /// Local dofs to reconstruction coefficients (`P^{q+1}`).
    pub rec: DMatrix<f64>,
    /// Local bilinear form (consistency plus stabilization).
    pub a: DMatrix<f64>,
    /// Stabilization part of `a`.
    pub stab: DMatrix<f64>,
}

impl LocalHho {
    pub fn num_cell_dofs(&self) -> usize {
        cell_dim(self.q)
    }

    pub fn num_dofs(&self) -> usize {
        cell_dim(self.q) + 3 * face_dim(self.q)
    }
}

pub fn edge_basis(mesh: &TriMesh, e: usize, q: usize) -> FaceBasis {
    let (a, b) = mesh.edge_points(e);
    FaceBasis::new(a, b, q)
}

/// Reconstruction and stabilized local form on triangle `t`.
pub fn local_operators(
    mesh: &TriMesh,
    t: usize,
    field: &dyn TensorField,
    q: usize,
    stab_weight: f64,
) -> Result<LocalHho> {
    let tri = mesh.triangle(t);
    let centroid = mesh.triangle_centroid(t);
    let basis = CellBasis::new(centroid, 0.5 * mesh.triangle_diameter(t), q + 1);
    let nr = basis.dim();
    let nc = cell_dim(q);
    let nf = face_dim(q);
    let nd = nc + 3 * nf;
    let (alpha, beta) = field.bounds();

    let mut stiff = DMatrix::zeros(nr, nr);
    let mut mass = DMatrix::zeros(nr, nr);
    let mut mean = DVector::zeros(nr);
    let mut grads = vec![Vector2::zeros(); nr];
    let mut vals = vec![0.0; nr];
    for (p, w) in triangle_rule(&tri, volume_degree(q)).iter() {
        let a = field.tensor(p);
        check_bounds(&a, p, alpha, beta)?;
        basis.grad_into(p, &mut grads);
        basis.eval_into(p, &mut vals);
        for j in 0..nr {
            let ag = a * grads[j] * w;
            for i in 0..nr {
                stiff[(i, j)] += grads[i].dot(&ag);
                mass[(i, j)] += w * vals[i] * vals[j];
            }
            mean[j] += w * vals[j];
        }
    }

    // rhs[i, :] = (A grad psi_i, grad v_T) + sum_F (v_F - v_T, A grad psi_i . n)_F
    let mut rhs = DMatrix::zeros(nr, nd);
    for i in 0..nr {
        for c in 0..nc {
            rhs[(i, c)] = stiff[(i, c)];
        }
    }
    let mut face_mass = Vec::with_capacity(3);
    let mut face_trace = Vec::with_capacity(3);
    let mut face_vals = vec![0.0; nf];
    for le in 0..3 {
        let e = mesh.triangle_edges[t][le];
        let fb = edge_basis(mesh, e, q);
        let n = mesh.outward_normal(t, le);
        let (pa, pb) = mesh.edge_points(e);
        let mut mf = DMatrix::zeros(nf, nf);
        let mut tf = DMatrix::zeros(nf, nr);
        for (p, w) in segment_rule(pa, pb, 2 * q + 1 + COEFF_DEGREE).iter() {
            // one-sided trace: coefficients may jump across mesh edges
            let a = field.tensor(p + (centroid - p) * 1e-9);
            check_bounds(&a, p, alpha, beta)?;
            basis.grad_into(p, &mut grads);
            basis.eval_into(p, &mut vals);
            fb.eval_into(p, &mut face_vals);
            for i in 0..nr {
                let flux = (a * grads[i]).dot(&n) * w;
                for c in 0..nc {
                    rhs[(i, c)] -= vals[c] * flux;
                }
                for j in 0..nf {
                    rhs[(i, nc + le * nf + j)] += face_vals[j] * flux;
                }
            }
            for j in 0..nf {
                for m in 0..nf {
                    mf[(j, m)] += w * face_vals[j] * face_vals[m];
                }
                for i in 0..nr {
                    tf[(j, i)] += w * face_vals[j] * vals[i];
                }
            }
        }
        face_mass.push(mf);
        face_trace.push(tf);
    }

    // Solve on the zero-mean complement (indices 1..), then fix the mean.
    let sub = stiff.view((1, 1), (nr - 1, nr - 1)).into_owned();
    let chol = DenseCholesky::factor(&sub).map_err(|e| Error::LocalSolve {
        cell: t,
        reason: format!("reconstruction stiffness: {e}"),
    })?;
    let rpart = chol.solve_matrix(&rhs.rows(1, nr - 1).into_owned());
    let mut rec = DMatrix::zeros(nr, nd);
    rec.rows_mut(1, nr - 1).copy_from(&rpart);
    let area = mean[0];
    for d in 0..nd {
        let cell_mean = if d < nc { mean[d] } else { 0.0 };
        let mut s = cell_mean;
        for i in 1..nr {
            s -= mean[i] * rec[(i, d)];
        }
        rec[(0, d)] = s / area;
    }
    let consistency = rpart.transpose() * &sub * &rpart;

    // v_T - Pi_T r in the P^q basis
    let mcc = mass.view((0, 0), (nc, nc)).into_owned();
    let mcc_chol = DenseCholesky::factor(&mcc).map_err(|_| Error::SingularGram)?;
    let proj = mcc_chol.solve_matrix(&(mass.rows(0, nc) * &rec));
    let mut dt = -proj;
    for c in 0..nc {
        dt[(c, c)] += 1.0;
    }
    let mut stab = DMatrix::zeros(nd, nd);
    for le in 0..3 {
        let e = mesh.triangle_edges[t][le];
        let mf = &face_mass[le];
        let tf = &face_trace[le];
        let mf_chol = DenseCholesky::factor(mf).map_err(|_| Error::SingularGram)?;
        // Pi_F(v_F - r) - Pi_F(v_T - Pi_T r)
        let mut delta = -mf_chol.solve_matrix(&(tf * &rec));
        delta -= mf_chol.solve_matrix(&(tf.columns(0, nc) * &dt));
        for j in 0..nf {
            delta[(j, nc + le * nf + j)] += 1.0;
        }
        stab += delta.transpose() * mf * &delta * (stab_weight / mesh.edge_length(e));
    }
    let mut a = consistency + &stab;
    a = (&a + a.transpose()) * 0.5;
    Ok(LocalHho {
        q,
        basis,
        rec,
        a,
        stab,
    })
}

/// `int_t (A e_l) . grad psi_i` for `l = 0, 1` on triangle `t`, with the
/// quadrature of [`local_operators`].
pub fn flux_moments(
    mesh: &TriMesh,
    t: usize,
    field: &dyn TensorField,
    basis: &CellBasis,
) -> [DVector<f64>; 2] {
    let q = basis.degree - 1;
    let nr = basis.dim();
    let mut out = [DVector::zeros(nr), DVector::zeros(nr)];
    let mut grads = vec![Vector2::zeros(); nr];
    for (p, w) in triangle_rule(&mesh.triangle(t), volume_degree(q)).iter() {
        let a = field.tensor(p);
        basis.grad_into(p, &mut grads);
        for (l, m) in out.iter_mut().enumerate() {
            let ae = a.column(l) * w;
            for i in 0..nr {
                m[i] += ae.dot(&grads[i]);
            }
        }
    }
    out
}

/// Triangle of [`TriMesh::unit_square`]`(n)` containing `p` (points on
/// shared edges go to either neighbour).
pub fn locate_structured(n: usize, p: Point2<f64>) -> Option<usize> {
    if !(0.0..=1.0).contains(&p.x) || !(0.0..=1.0).contains(&p.y) {
        return None;
    }
    let nf = n as f64;
    let i = ((p.x * nf).floor() as usize).min(n - 1);
    let j = ((p.y * nf).floor() as usize).min(n - 1);
    let s = p.x * nf - i as f64;
    let r = p.y * nf - j as f64;
    let lower = r <= s;
    Some(2 * (j * n + i) + usize::from(!lower))
}

/// Per-cell static condensation data.
#[derive(Debug, Clone)]
pub struct Condensation {
    /// `K_cc^{-1}`.
    pub kcc_inv: DMatrix<f64>,
    /// `K_cc^{-1} K_cf`.
    pub kcc_inv_kcf: DMatrix<f64>,
    /// `K_ff - K_fc K_cc^{-1} K_cf`.
    pub schur: DMatrix<f64>,
}

impl Condensation {
    /// Eliminates the first `nc` unknowns of the symmetric matrix `a`.
    pub fn new(a: &DMatrix<f64>, nc: usize) -> Result<Self> {
        let nd = a.nrows();
        let nfl = nd - nc;
        let kcc = a.view((0, 0), (nc, nc)).into_owned();
        let kcf = a.view((0, nc), (nc, nfl)).into_owned();
        let kff = a.view((nc, nc), (nfl, nfl)).into_owned();
        let chol = DenseCholesky::factor(&kcc)?;
        let kcc_inv = chol.inverse();
        let kcc_inv_kcf = chol.solve_matrix(&kcf);
        let mut schur = kff - kcf.transpose() * &kcc_inv_kcf;
        schur = (&schur + schur.transpose()) * 0.5;
        Ok(Condensation {
            kcc_inv,
            kcc_inv_kcf,
            schur,
        })
    }

    /// Condensed load `b_f - K_fc K_cc^{-1} b_c`.
    pub fn condense_load(&self, b: &DVector<f64>) -> DVector<f64> {
        let nc = self.kcc_inv.nrows();
        let nfl = b.len() - nc;
        b.rows(nc, nfl) - self.kcc_inv_kcf.transpose() * b.rows(0, nc)
    }

    /// Cell unknowns `K_cc^{-1} (b_c - K_cf u_f)`.
    pub fn recover(&self, b: &DVector<f64>, uf: &DVector<f64>) -> DVector<f64> {
        let nc = self.kcc_inv.nrows();
        &self.kcc_inv * b.rows(0, nc) - &self.kcc_inv_kcf * uf
    }
}

/// Cell and edge unknowns of a discrete field.
#[derive(Debug, Clone, PartialEq)]
pub struct FineField {
    pub q: usize,
    pub cell: Vec<f64>,
    pub face: Vec<f64>,
}

impl FineField {
    pub fn zeros(mesh: &TriMesh, q: usize) -> Self {
        FineField {
            q,
            cell: vec![0.0; mesh.num_triangles() * cell_dim(q)],
            face: vec![0.0; mesh.num_edges() * face_dim(q)],
        }
    }

    pub fn cell_block(&self, t: usize) -> &[f64] {
        let nc = cell_dim(self.q);
        &self.cell[t * nc..(t + 1) * nc]
    }

    pub fn face_block(&self, e: usize) -> &[f64] {
        let nf = face_dim(self.q);
        &self.face[e * nf..(e + 1) * nf]
    }

    pub fn scale_add(&mut self, c: f64, other: &FineField) {
        for (a, b) in self.cell.iter_mut().zip(&other.cell) {
            *a += c * b;
        }
        for (a, b) in self.face.iter_mut().zip(&other.face) {
            *a += c * b;
        }
    }

    /// Adds `c` to the constant coefficient of every block.
    pub fn shift(&mut self, c: f64) {
        let nc = cell_dim(self.q);
        let nf = face_dim(self.q);
        for v in self.cell.iter_mut().step_by(nc) {
            *v += c;
        }
        for v in self.face.iter_mut().step_by(nf) {
            *v += c;
        }
    }
}

/// Mapping of edge blocks to global unknown blocks (`None` = eliminated).
#[derive(Debug, Clone)]
pub struct DofMap {
    pub blocks: Vec<Option<usize>>,
    pub num_blocks: usize,
}

impl DofMap {
    pub fn all(mesh: &TriMesh) -> Self {
        DofMap {
            blocks: (0..mesh.num_edges()).map(Some).collect(),
            num_blocks: mesh.num_edges(),
        }
    }

    /// Interior edges only (homogeneous or lifted Dirichlet data).
    pub fn interior(mesh: &TriMesh) -> Self {
        let mut n = 0;
        let blocks = (0..mesh.num_edges())
            .map(|e| {
                if mesh.is_boundary_edge(e) {
                    None
                } else {
                    n += 1;
                    Some(n - 1)
                }
            })
            .collect();
        DofMap {
            blocks,
            num_blocks: n,
        }
    }
}

/// Local operators and condensation data of a whole triangulation.
pub struct HhoDiscretization<'m> {
    pub mesh: &'m TriMesh,
    pub q: usize,
    pub locals: Vec<LocalHho>,
    pub condensed: Vec<Condensation>,
}

impl<'m> HhoDiscretization<'m> {
    /// Stabilization weighted by the lower bound of `field`.
    pub fn new(mesh: &'m TriMesh, field: &dyn TensorField, q: usize) -> Result<Self> {
        let weight = field.bounds().0;
        Self::with_weight(mesh, field, q, weight)
    }

    pub fn with_weight(
        mesh: &'m TriMesh,
        field: &dyn TensorField,
        q: usize,
        weight: f64,
    ) -> Result<Self> {
        let nc = cell_dim(q);
        let pairs = (0..mesh.num_triangles())
            .into_par_iter()
            .map(|t| {
                let local = local_operators(mesh, t, field, q, weight)?;
                let cond = Condensation::new(&local.a, nc).map_err(|e| Error::LocalSolve {
                    cell: t,
                    reason: format!("static condensation: {e}"),
                })?;
                Ok((local, cond))
            })
            .collect::<Result<Vec<_>>>()?;
        let (locals, condensed) = pairs.into_iter().unzip();
        Ok(HhoDiscretization {
            mesh,
            q,
            locals,
            condensed,
        })
    }

    pub fn num_cell_dofs(&self) -> usize {
        cell_dim(self.q)
    }

    pub fn num_face_dofs(&self) -> usize {
        face_dim(self.q)
    }

    /// Local unknowns of triangle `t` gathered from a field.
    pub fn gather(&self, field: &FineField, t: usize) -> DVector<f64> {
        let nc = self.num_cell_dofs();
        let nf = self.num_face_dofs();
        let mut v = DVector::zeros(nc + 3 * nf);
        v.rows_mut(0, nc).copy_from_slice(field.cell_block(t));
        for (le, &e) in self.mesh.triangle_edges[t].iter().enumerate() {
            v.rows_mut(nc + le * nf, nf)
                .copy_from_slice(field.face_block(e));
        }
        v
    }

    fn gather_faces(&self, face: &[f64], t: usize) -> DVector<f64> {
        let nf = self.num_face_dofs();
        let mut v = DVector::zeros(3 * nf);
        for (le, &e) in self.mesh.triangle_edges[t].iter().enumerate() {
            v.rows_mut(le * nf, nf)
                .copy_from_slice(&face[e * nf..(e + 1) * nf]);
        }
        v
    }

    /// Cell loads `int f psi_c` per triangle (face entries zero).
    pub fn cell_loads(
        &self,
        f: &(dyn Fn(Point2<f64>) -> f64 + Sync),
        degree: usize,
    ) -> Vec<DVector<f64>> {
        let nc = self.num_cell_dofs();
        let nd = nc + 3 * self.num_face_dofs();
        (0..self.mesh.num_triangles())
            .into_par_iter()
            .map(|t| {
                let mut b = DVector::zeros(nd);
                let basis = &self.locals[t].basis;
                let mut vals = vec![0.0; basis.dim()];
                for (p, w) in triangle_rule(&self.mesh.triangle(t), degree).iter() {
                    basis.eval_into(p, &mut vals);
                    let fw = f(p) * w;
                    for c in 0..nc {
                        b[c] += fw * vals[c];
                    }
                }
                b
            })
            .collect()
    }

    /// Condensed matrix on the global blocks of `map`.
    pub fn assemble(&self, map: &DofMap) -> CsrMatrix {
        let nf = self.num_face_dofs();
        let n = map.num_blocks * nf;
        let mut triplets = Vec::with_capacity(self.mesh.num_triangles() * 9 * nf * nf);
        for (t, cond) in self.condensed.iter().enumerate() {
            let edges = self.mesh.triangle_edges[t];
            for (li, &ei) in edges.iter().enumerate() {
                let Some(bi) = map.blocks[ei] else { continue };
                for (lj, &ej) in edges.iter().enumerate() {
                    let Some(bj) = map.blocks[ej] else { continue };
                    for a in 0..nf {
                        for b in 0..nf {
                            triplets.push((
                                bi * nf + a,
                                bj * nf + b,
                                cond.schur[(li * nf + a, lj * nf + b)],
                            ));
                        }
                    }
                }
            }
        }
        CsrMatrix::from_triplets(n, n, &triplets)
    }

    /// Condensed right-hand side, with the contribution of prescribed
    /// values `fixed` on eliminated edges moved to the right.
    pub fn condensed_rhs(
        &self,
        loads: &[DVector<f64>],
        map: &DofMap,
        fixed: Option<&[f64]>,
    ) -> Vec<f64> {
        let nf = self.num_face_dofs();
        let mut rhs = vec![0.0; map.num_blocks * nf];
        for (t, cond) in self.condensed.iter().enumerate() {
            let mut g = cond.condense_load(&loads[t]);
            if let Some(fixed) = fixed {
                let uf = self.gather_faces(fixed, t);
                g -= &cond.schur * uf;
            }
            for (li, &e) in self.mesh.triangle_edges[t].iter().enumerate() {
                if let Some(b) = map.blocks[e] {
                    for a in 0..nf {
                        rhs[b * nf + a] += g[li * nf + a];
                    }
                }
            }
        }
        rhs
    }

    /// Expands global block values to all edges and recovers the cell
    /// unknowns.
    pub fn recover(
        &self,
        global: &[f64],
        map: &DofMap,
        fixed: Option<&[f64]>,
        loads: &[DVector<f64>],
    ) -> FineField {
        let nf = self.num_face_dofs();
        let nc = self.num_cell_dofs();
        let mut field = FineField::zeros(self.mesh, self.q);
        for (e, block) in map.blocks.iter().enumerate() {
            match block {
                Some(b) => {
                    field.face[e * nf..(e + 1) * nf].copy_from_slice(&global[b * nf..(b + 1) * nf])
                }
                None => {
                    if let Some(fixed) = fixed {
                        field.face[e * nf..(e + 1) * nf]
                            .copy_from_slice(&fixed[e * nf..(e + 1) * nf]);
                    }
                }
            }
        }
        let cells: Vec<DVector<f64>> = (0..self.mesh.num_triangles())
            .into_par_iter()
            .map(|t| self.condensed[t].recover(&loads[t], &self.gather_faces(&field.face, t)))
            .collect();
        for (t, c) in cells.iter().enumerate() {
            field.cell[t * nc..(t + 1) * nc].copy_from_slice(c.as_slice());
        }
        field
    }

    /// Reconstruction coefficients (`P^{q+1}`) of every triangle.
    pub fn reconstruct(&self, field: &FineField) -> Vec<DVector<f64>> {
        (0..self.mesh.num_triangles())
            .into_par_iter()
            .map(|t| &self.locals[t].rec * self.gather(field, t))
            .collect()
    }

    /// Discrete bilinear form `a_h(u, v)`.
    pub fn energy(&self, u: &FineField, v: &FineField) -> f64 {
        (0..self.mesh.num_triangles())
            .map(|t| {
                self.gather(u, t)
                    .dot(&(&self.locals[t].a * self.gather(v, t)))
            })
            .sum()
    }

    /// `sum_t int v_t`, from the cell unknowns.
    pub fn cell_integral(&self, field: &FineField) -> f64 {
        let nc = self.num_cell_dofs();
        (0..self.mesh.num_triangles())
            .map(|t| {
                let rule = triangle_rule(&self.mesh.triangle(t), self.q);
                let basis = &self.locals[t].basis;
                rule.iter()
                    .map(|(p, w)| w * basis.eval_sum(&field.cell_block(t)[..nc], p))
                    .sum::<f64>()
            })
            .sum()
    }

    /// Interpolate `u` (cell and edge L2 projections).
    pub fn interpolate(
        &self,
        u: &(dyn Fn(Point2<f64>) -> f64 + Sync),
        degree: usize,
    ) -> Result<FineField> {
        let mut field = FineField::zeros(self.mesh, self.q);
        let nc = self.num_cell_dofs();
        let nf = self.num_face_dofs();
        for t in 0..self.mesh.num_triangles() {
            let rule = triangle_rule(&self.mesh.triangle(t), degree);
            let basis = CellBasis::new(
                self.locals[t].basis.center,
                self.locals[t].basis.scale,
                self.q,
            );
            let c = crate::approximation::project_cell(u, &basis, &rule)?;
            field.cell[t * nc..(t + 1) * nc].copy_from_slice(c.as_slice());
        }
        for e in 0..self.mesh.num_edges() {
            let (a, b) = self.mesh.edge_points(e);
            let c = crate::approximation::project_face(
                u,
                &edge_basis(self.mesh, e, self.q),
                &segment_rule(a, b, degree),
            )?;
            field.face[e * nf..(e + 1) * nf].copy_from_slice(c.as_slice());
        }
        Ok(field)
    }

    /// Full (uncondensed) matrix on cell unknowns followed by the blocks of
    /// `map`; used to check the condensation.
    pub fn assemble_full(&self, map: &DofMap) -> CsrMatrix {
        let nc = self.num_cell_dofs();
        let nf = self.num_face_dofs();
        let ncell = self.mesh.num_triangles() * nc;
        let n = ncell + map.num_blocks * nf;
        let mut triplets = Vec::new();
        for t in 0..self.mesh.num_triangles() {
            let a = &self.locals[t].a;
            let idx: Vec<Option<usize>> =
                (0..nc)
                    .map(|c| Some(t * nc + c))
                    .chain(self.mesh.triangle_edges[t].iter().flat_map(|&e| {
                        (0..nf).map(move |m| map.blocks[e].map(|b| ncell + b * nf + m))
                    }))
                    .collect();
            for (i, gi) in idx.iter().enumerate() {
                let Some(gi) = gi else { continue };
                for (j, gj) in idx.iter().enumerate() {
                    let Some(gj) = gj else { continue };
                    triplets.push((*gi, *gj, a[(i, j)]));
                }
            }
        }
        CsrMatrix::from_triplets(n, n, &triplets)
    }
}

/// Discrete solution together with its reconstruction.
#[derive(Debug, Clone)]
pub struct MonoSolution {
    pub field: FineField,
    pub rec: Vec<DVector<f64>>,
    pub bases: Vec<CellBasis>,
}

impl MonoSolution {
    pub fn new(disc: &HhoDiscretization<'_>, field: FineField) -> Self {
        let rec = disc.reconstruct(&field);
        let bases = disc.locals.iter().map(|l| l.basis.clone()).collect();
        MonoSolution { field, rec, bases }
    }

    pub fn value(&self, t: usize, p: Point2<f64>) -> f64 {
        self.bases[t].eval_sum(self.rec[t].as_slice(), p)
    }

    pub fn gradient(&self, t: usize, p: Point2<f64>) -> Vector2<f64> {
        self.bases[t].grad_sum(self.rec[t].as_slice(), p)
    }
}

/// `-div(A grad u) = f` with `u = g` on the boundary.
pub fn solve_dirichlet(
    mesh: &TriMesh,
    field: &dyn TensorField,
    f: &(dyn Fn(Point2<f64>) -> f64 + Sync),
    q: usize,
    boundary: Option<&(dyn Fn(Point2<f64>) -> f64 + Sync)>,
    method: SolverMethod,
) -> Result<MonoSolution> {
    let disc = HhoDiscretization::new(mesh, field, q)?;
    solve_dirichlet_with(&disc, f, boundary, method)
}

pub fn solve_dirichlet_with(
    disc: &HhoDiscretization<'_>,
    f: &(dyn Fn(Point2<f64>) -> f64 + Sync),
    boundary: Option<&(dyn Fn(Point2<f64>) -> f64 + Sync)>,
    method: SolverMethod,
) -> Result<MonoSolution> {
    let mesh = disc.mesh;
    let q = disc.q;
    let nf = face_dim(q);
    let map = DofMap::interior(mesh);
    let fixed = match boundary {
        Some(g) => {
            let mut values = vec![0.0; mesh.num_edges() * nf];
            for e in 0..mesh.num_edges() {
                if mesh.is_boundary_edge(e) {
                    let (a, b) = mesh.edge_points(e);
                    let c = crate::approximation::project_face(
                        g,
                        &edge_basis(mesh, e, q),
                        &segment_rule(a, b, 2 * q + 6),
                    )?;
                    values[e * nf..(e + 1) * nf].copy_from_slice(c.as_slice());
                }
            }
            Some(values)
        }
        None => None,
    };
    let loads = disc.cell_loads(f, 2 * q + 6);
    let k = disc.assemble(&map);
    let rhs = disc.condensed_rhs(&loads, &map, fixed.as_deref());
    let x = solve_sparse_spd(&k, &rhs, method)?;
    let field = disc.recover(&x, &map, fixed.as_deref(), &loads);
    Ok(MonoSolution::new(disc, field))
}

/// Constrained pure-Neumann problem on a sub-mesh whose boundary edges are
/// tagged with the local index of the coarse face they belong to:
/// minimize `a_h(u, u) / 2 - l(u)` subject to
/// `int_F u_F Phi_{F,j} = c_{F,j}` for every coarse face `F` and `j <= k`.
pub struct NeumannProblem<'d, 'm> {
    pub disc: &'d HhoDiscretization<'m>,
    pub num_faces: usize,
    pub k: usize,
    rows: Vec<SparseRow>,
    solver: ConstrainedSolver,
}

impl<'d, 'm> NeumannProblem<'d, 'm> {
    /// `face_bases[f]` is the degree-`k` basis of coarse face `f`.
    pub fn new(disc: &'d HhoDiscretization<'m>, face_bases: &[FaceBasis]) -> Result<Self> {
        let mesh = disc.mesh;
        let q = disc.q;
        let nf = face_dim(q);
        let num_faces = face_bases.len();
        let k = face_bases[0].degree;
        let nk = face_dim(k);
        let mut rows: Vec<SparseRow> = vec![Vec::new(); num_faces * nk];
        let mut fine_vals = vec![0.0; nf];
        let mut coarse_vals = vec![0.0; nk];
        for e in 0..mesh.num_edges() {
            let Some(tag) = mesh.edge_tags[e] else {
                continue;
            };
            if tag >= num_faces {
                return Err(Error::InvalidMesh(format!(
                    "boundary edge {e} has no parent face"
                )));
            }
            let fb = edge_basis(mesh, e, q);
            let (a, b) = mesh.edge_points(e);
            let mut block = DMatrix::<f64>::zeros(nk, nf);
            for (p, w) in segment_rule(a, b, q + k).iter() {
                fb.eval_into(p, &mut fine_vals);
                face_bases[tag].eval_into(p, &mut coarse_vals);
                for j in 0..nk {
                    for m in 0..nf {
                        block[(j, m)] += w * coarse_vals[j] * fine_vals[m];
                    }
                }
            }
            for j in 0..nk {
                for m in 0..nf {
                    rows[tag * nk + j].push((e * nf + m, block[(j, m)]));
                }
            }
        }
        let pin = (0..num_faces).map(|f| f * nk).collect();
        let kmat = disc.assemble(&DofMap::all(mesh));
        let solver = ConstrainedSolver::new(&kmat, rows.clone(), pin)?;
        Ok(NeumannProblem {
            disc,
            num_faces,
            k,
            rows,
            solver,
        })
    }

    /// Face moments `int_F u_F Phi_{F,j}` of a field.
    pub fn constraint_values(&self, u: &FineField) -> DVector<f64> {
        DVector::from_iterator(
            self.rows.len(),
            self.rows
                .iter()
                .map(|row| row.iter().map(|&(i, v)| v * u.face[i]).sum::<f64>()),
        )
    }

    pub fn constraint_rows(&self) -> &[SparseRow] {
        &self.rows
    }

    /// Solves for the local loads and constraint values; returns the field
    /// and the multipliers (`K u + B^T mu = l`).
    pub fn solve(
        &self,
        loads: &[DVector<f64>],
        c: &DVector<f64>,
    ) -> Result<(FineField, DVector<f64>)> {
        let map = DofMap::all(self.disc.mesh);
        let rhs = self.disc.condensed_rhs(loads, &map, None);
        let (x, mu) = self.solver.solve(&rhs, c)?;
        Ok((self.disc.recover(&x, &map, None, loads), mu))
    }
}

/// Broken energy error `(sum_t int A grad(u - r_h) . grad(u - r_h))^{1/2}`.
pub fn energy_error_exact(
    mesh: &TriMesh,
    sol: &MonoSolution,
    field: &dyn TensorField,
    grad_u: &dyn Fn(Point2<f64>) -> Vector2<f64>,
    degree: usize,
) -> f64 {
    let mut s = 0.0;
    for t in 0..mesh.num_triangles() {
        for (p, w) in triangle_rule(&mesh.triangle(t), degree).iter() {
            let d = grad_u(p) - sol.gradient(t, p);
            s += w * d.dot(&(field.tensor(p) * d));
        }
    }
    s.sqrt()
}
