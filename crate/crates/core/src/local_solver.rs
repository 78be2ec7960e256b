//! Dense SPD and saddle-point solves for local problems, sparse SPD solves
//! for global systems.

use faer::prelude::*;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, Par, Side};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

fn relative_asymmetry(k: &DMatrix<f64>) -> f64 {
    let norm = k.amax();
    if norm == 0.0 {
        return 0.0;
    }
    let mut worst: f64 = 0.0;
    for j in 0..k.ncols() {
        for i in 0..j {
            worst = worst.max((k[(i, j)] - k[(j, i)]).abs());
        }
    }
    worst / norm
}

/// Dense Cholesky factor `K = L L^T`.
#[derive(Debug, Clone)]
pub struct DenseCholesky {
    l: DMatrix<f64>,
}

impl DenseCholesky {
    pub fn factor(k: &DMatrix<f64>) -> Result<Self> {
        let n = k.nrows();
        if k.ncols() != n {
            return Err(Error::InvalidArgument("matrix is not square".into()));
        }
        let asymmetry = relative_asymmetry(k);
        if asymmetry > 1e-12 {
            return Err(Error::NotSymmetric { asymmetry });
        }
        let mut l = DMatrix::zeros(n, n);
        let scale = (0..n).map(|i| k[(i, i)].abs()).fold(0.0, f64::max);
        for j in 0..n {
            let mut d = k[(j, j)];
            for p in 0..j {
                d -= l[(j, p)] * l[(j, p)];
            }
            if !(d > 1e-14 * scale) {
                return Err(Error::Indefinite { index: j, pivot: d });
            }
            let d = d.sqrt();
            l[(j, j)] = d;
            for i in j + 1..n {
                let mut s = k[(i, j)];
                for p in 0..j {
                    s -= l[(i, p)] * l[(j, p)];
                }
                l[(i, j)] = s / d;
            }
        }
        Ok(DenseCholesky { l })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn solve(&self, g: &DVector<f64>) -> DVector<f64> {
        let mut x = g.clone();
        self.solve_in_place(x.as_mut_slice());
        x
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        let n = self.dim();
        let l = &self.l;
        for i in 0..n {
            let mut s = x[i];
            for p in 0..i {
                s -= l[(i, p)] * x[p];
            }
            x[i] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for p in i + 1..n {
                s -= l[(p, i)] * x[p];
            }
            x[i] = s / l[(i, i)];
        }
    }

    pub fn solve_matrix(&self, g: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = g.clone();
        for mut col in x.column_iter_mut() {
            self.solve_in_place(col.as_mut_slice());
        }
        x
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.solve_matrix(&DMatrix::identity(self.dim(), self.dim()))
    }
}

/// Solves `K x = g` for symmetric positive definite `K`.
pub fn solve_spd(k: &DMatrix<f64>, g: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = DenseCholesky::factor(k)?;
    let mut x = chol.solve(g);
    // one step of refinement keeps the residual well below the tolerance
    let r = g - k * &x;
    x += chol.solve(&r);
    let gnorm = g.norm();
    let res = (k * &x - g).norm();
    if gnorm > 0.0 && res > 1e-10 * gnorm {
        return Err(Error::Tolerance {
            what: "SPD solve residual",
            value: res / gnorm,
            tolerance: 1e-10,
        });
    }
    Ok(x)
}

/// `K x + B^T mu = g`, `B x = c`.
#[derive(Debug, Clone)]
pub struct SaddleSystem {
    pub k: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub g: DVector<f64>,
    pub c: DVector<f64>,
}

/// Indices of rows of `b` that are linear combinations of earlier rows.
pub fn redundant_rows(b: &DMatrix<f64>, tol: f64) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut redundant = Vec::new();
    for i in 0..b.nrows() {
        let row = b.row(i).transpose();
        let norm = row.norm();
        let mut v = row.clone();
        for _ in 0..2 {
            for q in &basis {
                let d = q.dot(&v);
                v.axpy(-d, q, 1.0);
            }
        }
        let vn = v.norm();
        if norm == 0.0 || vn <= tol * norm {
            redundant.push(i);
        } else {
            basis.push(v / vn);
        }
    }
    redundant
}

/// Solves the saddle-point system by LU factorization of the bordered
/// matrix, with iterative refinement. Returns `(x, mu)`.
pub fn solve_saddle(sys: &SaddleSystem) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = sys.k.nrows();
    let m = sys.b.nrows();
    if sys.k.ncols() != n || sys.b.ncols() != n || sys.g.len() != n || sys.c.len() != m {
        return Err(Error::InvalidArgument(
            "inconsistent saddle-point block sizes".into(),
        ));
    }
    let asymmetry = relative_asymmetry(&sys.k);
    if asymmetry > 1e-12 {
        return Err(Error::NotSymmetric { asymmetry });
    }
    let rows = redundant_rows(&sys.b, 1e-10);
    if !rows.is_empty() {
        return Err(Error::RankDeficient { rows });
    }
    // Row-equilibrate B so both blocks have comparable magnitude.
    let kscale = sys.k.amax().max(f64::MIN_POSITIVE);
    let mut bs = sys.b.clone();
    let mut cs = sys.c.clone();
    let mut row_scale = vec![1.0; m];
    for i in 0..m {
        let s = kscale / bs.row(i).amax();
        row_scale[i] = s;
        bs.row_mut(i).scale_mut(s);
        cs[i] *= s;
    }
    let mut big = DMatrix::zeros(n + m, n + m);
    big.view_mut((0, 0), (n, n)).copy_from(&sys.k);
    big.view_mut((n, 0), (m, n)).copy_from(&bs);
    big.view_mut((0, n), (n, m)).copy_from(&bs.transpose());
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(&sys.g);
    rhs.rows_mut(n, m).copy_from(&cs);
    let lu = big.clone().lu();
    let mut sol = lu.solve(&rhs).ok_or(Error::SingularSaddle)?;
    for _ in 0..2 {
        let r = &rhs - &big * &sol;
        if let Some(d) = lu.solve(&r) {
            sol += d;
        }
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSaddle);
    }
    let x = sol.rows(0, n).into_owned();
    let mu = DVector::from_iterator(m, (0..m).map(|i| sol[n + i] * row_scale[i]));
    let r1 = &sys.k * &x + sys.b.transpose() * &mu - &sys.g;
    let r2 = &sys.b * &x - &sys.c;
    let scale = sys.g.norm() + sys.c.norm() + sys.k.norm() * x.norm();
    let res = (r1.norm_squared() + r2.norm_squared()).sqrt();
    if scale > 0.0 && res > 1e-9 * scale {
        // An unsolvable system with a full-rank B only arises from a
        // singular K on ker B.
        return Err(Error::SingularSaddle);
    }
    Ok((x, mu))
}

/// Compressed sparse row matrix with sorted, duplicate-free columns.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl CsrMatrix {
    /// Sums duplicate entries.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; nrows + 1];
        for &(i, _, _) in triplets {
            counts[i + 1] += 1;
        }
        for i in 0..nrows {
            counts[i + 1] += counts[i];
        }
        let mut next = counts.clone();
        let mut cols = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        for &(i, j, v) in triplets {
            cols[next[i]] = j;
            vals[next[i]] = v;
            next[i] += 1;
        }
        let mut row_ptr = Vec::with_capacity(nrows + 1);
        let mut out_cols = Vec::with_capacity(triplets.len());
        let mut out_vals = Vec::with_capacity(triplets.len());
        row_ptr.push(0);
        let mut scratch: Vec<(usize, f64)> = Vec::new();
        for i in 0..nrows {
            scratch.clear();
            scratch.extend((counts[i]..counts[i + 1]).map(|p| (cols[p], vals[p])));
            scratch.sort_by_key(|e| e.0);
            let mut last = usize::MAX;
            for &(j, v) in &scratch {
                if j == last {
                    *out_vals.last_mut().unwrap() += v;
                } else {
                    out_cols.push(j);
                    out_vals.push(v);
                    last = j;
                }
            }
            row_ptr.push(out_cols.len());
        }
        CsrMatrix {
            nrows,
            ncols,
            row_ptr,
            cols: out_cols,
            vals: out_vals,
        }
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |p| (self.cols[p], self.vals[p]))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|e| e.0 == j).map_or(0.0, |e| e.1)
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.mul_vec_into(x, &mut y);
        y
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let mut s = 0.0;
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.vals[p] * x[self.cols[p]];
            }
            *yi = s;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows).map(|i| self.get(i, i)).collect()
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        (0..self.nrows)
            .flat_map(|i| self.row(i).map(move |(j, v)| (i, j, v)))
            .collect()
    }

    /// Largest `|a_ij - a_ji|` relative to the largest entry.
    pub fn relative_asymmetry(&self) -> f64 {
        let max = self.vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max == 0.0 {
            return 0.0;
        }
        let mut worst: f64 = 0.0;
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst / max
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                m[(i, j)] += v;
            }
        }
        m
    }
}

/// Sparse Cholesky factorization with fill-reducing ordering.
pub struct SparseCholesky {
    n: usize,
    llt: faer::sparse::linalg::solvers::Llt<usize, f64>,
}

impl std::fmt::Debug for SparseCholesky {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SparseCholesky")
            .field("n", &self.n)
            .finish()
    }
}

impl SparseCholesky {
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        // Sequential kernels keep results independent of the thread count.
        faer::set_global_parallelism(Par::Seq);
        let n = a.nrows;
        let triplets: Vec<Triplet<usize, usize, f64>> = a
            .triplets()
            .into_iter()
            .filter(|&(i, j, _)| i >= j)
            .map(|(i, j, v)| Triplet::new(i, j, v))
            .collect();
        let m = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &triplets)
            .map_err(|e| Error::Factorization(format!("{e:?}")))?;
        let llt = m.sp_cholesky(Side::Lower).map_err(|e| {
            Error::Factorization(format!("matrix is not positive definite ({e:?})"))
        })?;
        Ok(SparseCholesky { n, llt })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let rhs = Mat::<f64>::from_fn(self.n, 1, |i, _| b[i]);
        let x = self.llt.solve(&rhs);
        (0..self.n).map(|i| x[(i, 0)]).collect()
    }

    /// Solves for every column of `b` (column-major, `n x ncols`).
    pub fn solve_columns(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let rhs = Mat::<f64>::from_fn(self.n, b.ncols(), |i, j| b[(i, j)]);
        let x = self.llt.solve(&rhs);
        DMatrix::from_fn(self.n, b.ncols(), |i, j| x[(i, j)])
    }
}

/// Jacobi-preconditioned conjugate gradients.
pub fn conjugate_gradient(a: &CsrMatrix, b: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let n = a.nrows;
    let inv_diag: Vec<f64> = a
        .diagonal()
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(x);
    }
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut ap = vec![0.0; n];
    let mut res = 1.0;
    for it in 0..max_iter {
        a.mul_vec_into(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if !(pap > 0.0) {
            return Err(Error::Indefinite {
                index: it,
                pivot: pap,
            });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        res = r.iter().map(|v| v * v).sum::<f64>().sqrt() / bnorm;
        if res <= tol {
            return Ok(x);
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::NoConvergence {
        residual: res,
        iterations: max_iter,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolverMethod {
    Cholesky,
    Cg { tol: f64 },
}

/// Solves a global SPD system with the chosen method and checks the
/// residual.
pub fn solve_sparse_spd(a: &CsrMatrix, b: &[f64], method: SolverMethod) -> Result<Vec<f64>> {
    if a.nrows == 0 {
        return Ok(Vec::new());
    }
    let x = match method {
        SolverMethod::Cholesky => {
            let chol = SparseCholesky::factor(a)?;
            let mut x = chol.solve(b);
            for _ in 0..2 {
                let ax = a.mul_vec(&x);
                let r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
                let d = chol.solve(&r);
                for (x, d) in x.iter_mut().zip(d) {
                    *x += d;
                }
            }
            x
        }
        SolverMethod::Cg { tol } => conjugate_gradient(a, b, tol, 20 * a.nrows + 1000)?,
    };
    let ax = a.mul_vec(&x);
    let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let res = b
        .iter()
        .zip(&ax)
        .map(|(b, a)| (b - a).powi(2))
        .sum::<f64>()
        .sqrt();
    match method {
        // normwise backward error
        SolverMethod::Cholesky => {
            let anorm = (0..a.nrows)
                .map(|i| a.row(i).map(|(_, v)| v.abs()).sum::<f64>())
                .fold(0.0, f64::max);
            let xnorm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let scale = anorm * xnorm + bnorm;
            if scale > 0.0 && res > 1e-12 * scale {
                return Err(Error::Tolerance {
                    what: "global solve backward error",
                    value: res / scale,
                    tolerance: 1e-12,
                });
            }
        }
        SolverMethod::Cg { tol } => {
            if bnorm > 0.0 && res > tol * 1.000001 * bnorm {
                return Err(Error::Tolerance {
                    what: "global solve residual",
                    value: res / bnorm,
                    tolerance: tol,
                });
            }
        }
    }
    Ok(x)
}

/// Sparse constraint row.
pub type SparseRow = Vec<(usize, f64)>;

/// Equality-constrained quadratic minimization on a sparse SPD-on-ker(B)
/// matrix, solved by an augmented Lagrangian: `K + s B_p^T B_p` is SPD
/// where `B_p` are the `pin` rows, and the full set of multipliers comes
/// from the small dense Schur complement.
pub struct ConstrainedSolver {
    n: usize,
    k: CsrMatrix,
    rows: Vec<SparseRow>,
    pin: Vec<usize>,
    s: f64,
    chol: SparseCholesky,
    /// `Z = Kt^{-1} B^T`, column per constraint.
    z: DMatrix<f64>,
    schur: DMatrix<f64>,
    schur_lu: nalgebra::linalg::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl ConstrainedSolver {
    pub fn new(k: &CsrMatrix, rows: Vec<SparseRow>, pin: Vec<usize>) -> Result<Self> {
        let n = k.nrows;
        let kmax = k.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let bmax = pin
            .iter()
            .map(|&r| rows[r].iter().map(|e| e.1 * e.1).sum::<f64>())
            .fold(0.0f64, f64::max);
        let s = if bmax > 0.0 { kmax / bmax } else { 0.0 };
        let mut triplets = k.triplets();
        for &r in &pin {
            let row = &rows[r];
            for &(i, a) in row {
                for &(j, b) in row {
                    triplets.push((i, j, s * a * b));
                }
            }
        }
        let kt = CsrMatrix::from_triplets(n, n, &triplets);
        let chol = SparseCholesky::factor(&kt)?;
        let m = rows.len();
        let mut bt = DMatrix::zeros(n, m);
        for (r, row) in rows.iter().enumerate() {
            for &(i, v) in row {
                bt[(i, r)] += v;
            }
        }
        let z = chol.solve_columns(&bt);
        let schur = bt.transpose() * &z;
        let dense_b = bt.transpose();
        let redundant = redundant_rows(&dense_b, 1e-10);
        if !redundant.is_empty() {
            return Err(Error::RankDeficient { rows: redundant });
        }
        let schur_lu = schur.clone().lu();
        Ok(ConstrainedSolver {
            n,
            k: k.clone(),
            rows,
            pin,
            s,
            chol,
            z,
            schur,
            schur_lu,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn num_constraints(&self) -> usize {
        self.rows.len()
    }

    fn apply_b(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.rows.len(),
            self.rows
                .iter()
                .map(|row| row.iter().map(|&(i, v)| v * x[i]).sum::<f64>()),
        )
    }

    fn solve_once(&self, g: &[f64], c: &DVector<f64>) -> Result<(Vec<f64>, DVector<f64>)> {
        // g + s B_p^T c_p
        let mut rhs = g.to_vec();
        for &r in &self.pin {
            for &(i, v) in &self.rows[r] {
                rhs[i] += self.s * v * c[r];
            }
        }
        let y = self.chol.solve(&rhs);
        let by = self.apply_b(&y);
        let mu = self
            .schur_lu
            .solve(&(by - c))
            .ok_or(Error::SingularSaddle)?;
        let mut x = y;
        let zmu = &self.z * &mu;
        for (x, d) in x.iter_mut().zip(zmu.iter()) {
            *x -= d;
        }
        Ok((x, mu))
    }

    /// Solves `K x + B^T mu = g`, `B x = c`, with two steps of iterative
    /// refinement.
    pub fn solve(&self, g: &[f64], c: &DVector<f64>) -> Result<(Vec<f64>, DVector<f64>)> {
        let (mut x, mut mu) = self.solve_once(g, c)?;
        for _ in 0..2 {
            let mut r1 = g.to_vec();
            for (r, kx) in r1.iter_mut().zip(self.k.mul_vec(&x)) {
                *r -= kx;
            }
            for (row, m) in self.rows.iter().zip(mu.iter()) {
                for &(i, v) in row {
                    r1[i] -= v * m;
                }
            }
            let r2 = c - self.apply_b(&x);
            let (dx, dmu) = self.solve_once(&r1, &r2)?;
            for (x, d) in x.iter_mut().zip(dx) {
                *x += d;
            }
            mu += dmu;
        }
        let res = (self.apply_b(&x) - c).norm();
        let scale = c.norm() + self.schur.norm() * mu.norm() / self.rows.len().max(1) as f64;
        if scale > 0.0 && res > 1e-9 * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::Tolerance {
                what: "constraint residual",
                value: res / scale,
                tolerance: 1e-9,
            });
        }
        Ok((x, mu))
    }
}
