//! Oscillatory cell- and face-based basis functions of one coarse cell,
//! computed by constrained Neumann problems on a fine sub-mesh, and their
//! binary cache.
//!
//! Cache file layout (little endian):
//!
//! ```text
//! magic   8 bytes  "MSHHOBAS"
//! version u32
//! key     u32 length + utf-8 bytes
//! header  u64 x 7: cell, k, k_osc, refinements, nfaces, nb, nfine_tri
//! per function: u64 kind (0 cell, 1 face), u64 a, u64 b,
//!               u64 n + f64 x n (cell dofs), u64 n + f64 x n (face dofs),
//!               u64 n + f64 x n (lambda)
//! matrices: stiffness, means, moments, recon, each as
//!           u64 rows, u64 cols, f64 x rows*cols column major
//! ```

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, Point2};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::approximation::{
    cell_dim, cell_dim_below, face_dim, face_gram, face_rule, CellBasis, FaceBasis,
};
use crate::coefficient::TensorField;
use crate::error::{Error, Result};
use crate::hho_mono::{FineField, HhoDiscretization, NeumannProblem};
use crate::mesh::{CoarseMesh, FineSubmesh};
use crate::quadrature::triangle_rule;
use crate::util::{write_atomic, ByteReader as Reader, ByteWriter as Writer};

pub const CACHE_MAGIC: &[u8; 8] = b"MSHHOBAS";
pub const CACHE_VERSION: u32 = 1;

/// Tolerance on constraint satisfaction and flux compatibility.
pub const CONSTRAINT_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisKind {
    /// Source `Phi_T^{k-1, index}`, zero face projections.
    Cell { index: usize },
    /// Face projection `Phi_F^{k, index}` on local face `face`, zero elsewhere.
    Face { face: usize, index: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasisFunction {
    pub kind: BasisKind,
    pub field: FineField,
    /// Normal flux polynomials: `k + 1` coefficients per local face in the
    /// coarse face basis.
    pub lambda: Vec<f64>,
}

impl BasisFunction {
    pub fn lambda_face(&self, face: usize, k: usize) -> &[f64] {
        let n = face_dim(k);
        &self.lambda[face * n..(face + 1) * n]
    }
}

/// Basis of the local space of one coarse cell and the data it induces.
#[derive(Debug, Clone, PartialEq)]
pub struct OscillatoryBasisSet {
    pub cell: usize,
    pub k: usize,
    pub k_osc: usize,
    /// Red refinements of the cell's initial triangulation.
    pub refinements: usize,
    pub num_faces: usize,
    pub functions: Vec<BasisFunction>,
    /// `K[a, b] = a_h(phi_a, phi_b)` on the fine sub-mesh.
    pub stiffness: DMatrix<f64>,
    /// `int_T phi_b`.
    pub means: DVector<f64>,
    /// `int_T Phi_T^{k, i} phi_b` (rows ordered as the coarse cell basis).
    pub moments: DMatrix<f64>,
    /// Fine reconstruction coefficients: row `t * nr + i` is coefficient
    /// `i` of the `P^{k_osc + 1}` reconstruction on fine triangle `t`.
    pub recon: DMatrix<f64>,
}

impl OscillatoryBasisSet {
    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn num_cell_functions(&self) -> usize {
        self.functions
            .iter()
            .filter(|f| matches!(f.kind, BasisKind::Cell { .. }))
            .count()
    }

    /// Fine reconstruction coefficients per fine triangle of `sum_b c_b phi_b`.
    pub fn combine_recon(&self, c: &DVector<f64>) -> DVector<f64> {
        &self.recon * c
    }

    /// Rebuilds the fine sub-mesh the set was computed on.
    pub fn submesh(&self, coarse: &CoarseMesh) -> Result<FineSubmesh> {
        FineSubmesh::build_with_refinements(coarse, self.cell, self.refinements)
    }
}

/// Expected dimension of the local space.
pub fn expected_dimension(k: usize, num_faces: usize) -> usize {
    if k == 0 {
        num_faces
    } else {
        cell_dim(k - 1) + num_faces * face_dim(k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DimensionReport {
    pub expected: usize,
    pub actual: usize,
    /// Numerical rank of the mean-augmented stiffness.
    pub rank: usize,
}

/// Count and rank check of a basis set.
pub fn dimension_check(set: &OscillatoryBasisSet) -> Result<DimensionReport> {
    let expected = expected_dimension(set.k, set.num_faces);
    let actual = set.len();
    let aug = &set.stiffness
        + &set.means * set.means.transpose() * (set.stiffness.norm() / set.means.norm_squared());
    let eig = aug.symmetric_eigenvalues();
    let top = eig.iter().copied().fold(0.0, f64::max);
    let rank = eig.iter().filter(|&&l| l > 1e-11 * top).count();
    let report = DimensionReport {
        expected,
        actual,
        rank,
    };
    if expected != actual || rank != actual {
        return Err(Error::Dimension {
            cell: set.cell,
            expected,
            found: if expected != actual { actual } else { rank },
        });
    }
    Ok(report)
}

/// Coarse face bases of a cell, by local face index.
pub fn cell_face_bases(coarse: &CoarseMesh, cell: usize, k: usize) -> Vec<FaceBasis> {
    coarse.cell_faces[cell]
        .iter()
        .map(|&f| FaceBasis::for_face(coarse, f, k))
        .collect()
}

/// Fine sub-mesh resolution for a cell: `h <= min(eps / 4, H_T / 4)`.
pub fn default_target_h(coarse: &CoarseMesh, cell: usize, eps: f64) -> f64 {
    (eps / 4.0).min(coarse.cell_diameters[cell] / 4.0)
}

/// Solves all constrained Neumann problems of `cell`.
pub fn compute_basis_set(
    coarse: &CoarseMesh,
    cell: usize,
    field: &dyn TensorField,
    k: usize,
    k_osc: usize,
    submesh: &FineSubmesh,
) -> Result<OscillatoryBasisSet> {
    compute_basis_set_with_sources(coarse, cell, field, k, k.checked_sub(1), k_osc, submesh)
}

/// Same as [`compute_basis_set`] with cell sources of degree
/// `source_degree` (`Some(k)` spans the enlarged equal-order space).
pub fn compute_basis_set_with_sources(
    coarse: &CoarseMesh,
    cell: usize,
    field: &dyn TensorField,
    k: usize,
    source_degree: Option<usize>,
    k_osc: usize,
    submesh: &FineSubmesh,
) -> Result<OscillatoryBasisSet> {
    let mesh = &submesh.mesh;
    let disc = HhoDiscretization::new(mesh, field, k_osc)?;
    let face_bases = cell_face_bases(coarse, cell, k);
    let num_faces = face_bases.len();
    let nk = face_dim(k);
    let problem = NeumannProblem::new(&disc, &face_bases)?;
    let grams: Vec<DMatrix<f64>> = coarse.cell_faces[cell]
        .iter()
        .zip(&face_bases)
        .map(|(&f, fb)| face_gram(fb, &face_rule(coarse, f, 2 * k + 2)))
        .collect();

    let mut kinds = Vec::new();
    if let Some(d) = source_degree {
        kinds.extend((0..cell_dim(d)).map(|index| BasisKind::Cell { index }));
    }
    if k == 0 {
        kinds.extend((0..num_faces).map(|face| BasisKind::Face { face, index: 0 }));
    } else {
        for face in 0..num_faces {
            kinds.extend((0..nk).map(|index| BasisKind::Face { face, index }));
        }
    }

    let source_basis = source_degree.map(|d| CellBasis::for_cell(coarse, cell, d));
    let nd = disc.num_cell_dofs() + 3 * disc.num_face_dofs();
    let zero_loads = vec![DVector::zeros(nd); mesh.num_triangles()];
    let mut functions = Vec::with_capacity(kinds.len());
    for kind in kinds {
        let mut c = DVector::zeros(num_faces * nk);
        let (loads, source_integral) = match kind {
            BasisKind::Cell { index } => {
                let sb = source_basis
                    .as_ref()
                    .expect("cell functions need a source degree");
                let src = |p: Point2<f64>| sb.eval(p)[index];
                let loads = disc.cell_loads(&src, k_osc + k + 1);
                let total: f64 = (0..mesh.num_triangles())
                    .map(|t| {
                        triangle_rule(&mesh.triangle(t), k + 1)
                            .iter()
                            .map(|(p, w)| w * src(p))
                            .sum::<f64>()
                    })
                    .sum();
                (loads, total)
            }
            BasisKind::Face { face, index } => {
                for j in 0..nk {
                    c[face * nk + j] = grams[face][(j, index)];
                }
                (zero_loads.clone(), 0.0)
            }
        };
        let (u, mu) = problem.solve(&loads, &c)?;
        let achieved = problem.constraint_values(&u);
        let scale = c
            .amax()
            .max(grams.iter().map(|g| g.amax()).fold(0.0, f64::max));
        let gap = (&achieved - &c).amax();
        if gap > CONSTRAINT_TOLERANCE * scale {
            return Err(Error::Tolerance {
                what: "oscillatory basis face constraint",
                value: gap / scale,
                tolerance: CONSTRAINT_TOLERANCE,
            });
        }
        let lambda: Vec<f64> = mu.iter().map(|m| -m).collect();
        // sum_F int_F lambda_F = -int_T source
        let flux: f64 = (0..num_faces)
            .map(|f| {
                (0..nk)
                    .map(|j| lambda[f * nk + j] * grams[f][(0, j)])
                    .sum::<f64>()
            })
            .sum();
        let flux_scale = (0..num_faces)
            .map(|f| {
                (0..nk)
                    .map(|j| (lambda[f * nk + j] * grams[f][(0, j)]).abs())
                    .sum::<f64>()
            })
            .sum::<f64>()
            .max(source_integral.abs())
            .max(f64::MIN_POSITIVE);
        let residual = (flux + source_integral).abs() / flux_scale;
        if residual > CONSTRAINT_TOLERANCE {
            return Err(Error::Incompatible {
                residual,
                tolerance: CONSTRAINT_TOLERANCE,
            });
        }
        functions.push(BasisFunction {
            kind,
            field: u,
            lambda,
        });
    }

    let nb = functions.len();
    // K = sum_t L_t^T a_t L_t with L_t the gathered local dofs
    let locals: Vec<DMatrix<f64>> = (0..mesh.num_triangles())
        .into_par_iter()
        .map(|t| {
            let mut l = DMatrix::zeros(nd, nb);
            for (b, f) in functions.iter().enumerate() {
                l.set_column(b, &disc.gather(&f.field, t));
            }
            l
        })
        .collect();
    let mut stiffness = DMatrix::zeros(nb, nb);
    for (t, l) in locals.iter().enumerate() {
        stiffness += l.transpose() * &disc.locals[t].a * l;
    }
    stiffness = (&stiffness + stiffness.transpose()) * 0.5;

    let means = DVector::from_iterator(nb, functions.iter().map(|f| disc.cell_integral(&f.field)));

    let coarse_basis = CellBasis::for_cell(coarse, cell, k);
    let nck = coarse_basis.dim();
    let nc = disc.num_cell_dofs();
    let mut moments = DMatrix::zeros(nck, nb);
    let mut cvals = vec![0.0; nck];
    for (t, l) in locals.iter().enumerate() {
        let fine_basis = &disc.locals[t].basis;
        for (p, w) in triangle_rule(&mesh.triangle(t), k + k_osc).iter() {
            coarse_basis.eval_into(p, &mut cvals);
            let fv = fine_basis.eval(p);
            for b in 0..nb {
                let v: f64 = (0..nc).map(|c| l[(c, b)] * fv[c]).sum();
                for i in 0..nck {
                    moments[(i, b)] += w * cvals[i] * v;
                }
            }
        }
    }

    let nr = cell_dim(k_osc + 1);
    let mut recon = DMatrix::zeros(mesh.num_triangles() * nr, nb);
    for (t, l) in locals.iter().enumerate() {
        let r = &disc.locals[t].rec * l;
        recon.view_mut((t * nr, 0), (nr, nb)).copy_from(&r);
    }

    Ok(OscillatoryBasisSet {
        cell,
        k,
        k_osc,
        refinements: submesh.refinements,
        num_faces,
        functions,
        stiffness,
        means,
        moments,
        recon,
    })
}

/// Number of cell-based functions (`N^{k-1}`, zero for `k = 0`).
pub fn num_cell_functions(k: usize) -> usize {
    cell_dim_below(k)
}

/// Identifies one cached basis set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheKey {
    pub level: usize,
    pub cell: usize,
    pub k: usize,
    pub k_osc: usize,
    /// Coefficient fingerprint.
    pub coefficient: String,
    /// Mesh fingerprint (geometry of the coarse level and fine resolution).
    pub mesh: String,
}

impl CacheKey {
    pub fn text(&self) -> String {
        format!(
            "level={};cell={};k={};kosc={};coef={};mesh={}",
            self.level, self.cell, self.k, self.k_osc, self.coefficient, self.mesh
        )
    }

    pub fn file_name(&self) -> String {
        let digest = Sha256::digest(self.text().as_bytes());
        let hex: String = digest.iter().take(12).map(|b| format!("{b:02x}")).collect();
        format!(
            "L{}-k{}-q{}-c{}-{hex}.bin",
            self.level, self.k, self.k_osc, self.cell
        )
    }
}

/// Write-once directory of cached basis sets.
#[derive(Debug, Clone)]
pub struct BasisCache {
    pub dir: PathBuf,
}

/// Serializes a basis set under `key`.
pub fn encode(set: &OscillatoryBasisSet, key: &CacheKey) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CACHE_MAGIC);
    w.0.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    let text = key.text();
    w.0.extend_from_slice(&(text.len() as u32).to_le_bytes());
    w.0.extend_from_slice(text.as_bytes());
    let ntri = set
        .functions
        .first()
        .map_or(0, |f| f.field.cell.len() / cell_dim(set.k_osc));
    for v in [
        set.cell,
        set.k,
        set.k_osc,
        set.refinements,
        set.num_faces,
        set.len(),
        ntri,
    ] {
        w.u64(v);
    }
    for f in &set.functions {
        let (kind, a, b) = match f.kind {
            BasisKind::Cell { index } => (0, index, 0),
            BasisKind::Face { face, index } => (1, face, index),
        };
        w.u64(kind);
        w.u64(a);
        w.u64(b);
        w.f64s(&f.field.cell);
        w.f64s(&f.field.face);
        w.f64s(&f.lambda);
    }
    w.matrix(&set.stiffness);
    w.matrix(&DMatrix::from_column_slice(
        set.means.len(),
        1,
        set.means.as_slice(),
    ));
    w.matrix(&set.moments);
    w.matrix(&set.recon);
    w.0
}

pub fn decode(bytes: &[u8], key: &CacheKey, path: &Path) -> Result<OscillatoryBasisSet> {
    let mut r = Reader::new(bytes, path);
    if r.take(8)? != CACHE_MAGIC {
        return Err(r.corrupt("bad magic"));
    }
    let version = r.u32()?;
    if version != CACHE_VERSION {
        return Err(r.corrupt(&format!("unsupported version {version}")));
    }
    let len = r.u32()? as usize;
    let text = r.take(len)?.to_vec();
    if text != key.text().as_bytes() {
        return Err(r.corrupt("key mismatch"));
    }
    let mut head = [0usize; 7];
    for h in head.iter_mut() {
        *h = r.u64()?;
    }
    let [cell, k, k_osc, refinements, num_faces, nb, _ntri] = head;
    let mut functions = Vec::with_capacity(nb.min(1024));
    for _ in 0..nb {
        let kind = r.u64()?;
        let a = r.u64()?;
        let b = r.u64()?;
        let kind = match kind {
            0 => BasisKind::Cell { index: a },
            1 => BasisKind::Face { face: a, index: b },
            _ => return Err(r.corrupt("unknown basis kind")),
        };
        let cell_dofs = r.f64s()?;
        let face_dofs = r.f64s()?;
        let lambda = r.f64s()?;
        functions.push(BasisFunction {
            kind,
            field: FineField {
                q: k_osc,
                cell: cell_dofs,
                face: face_dofs,
            },
            lambda,
        });
    }
    let stiffness = r.matrix()?;
    let means = r.matrix()?;
    let moments = r.matrix()?;
    let recon = r.matrix()?;
    if !r.at_end() {
        return Err(r.corrupt("trailing bytes"));
    }
    if stiffness.nrows() != nb
        || stiffness.ncols() != nb
        || means.nrows() != nb
        || recon.ncols() != nb
    {
        return Err(r.corrupt("inconsistent sizes"));
    }
    Ok(OscillatoryBasisSet {
        cell,
        k,
        k_osc,
        refinements,
        num_faces,
        functions,
        stiffness,
        means: means.column(0).into_owned(),
        moments,
        recon,
    })
}

impl BasisCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        BasisCache { dir: dir.into() }
    }

    pub fn path(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(key.file_name())
    }

    pub fn contains(&self, key: &CacheKey) -> bool {
        self.path(key).is_file()
    }

    pub fn load(&self, key: &CacheKey) -> Result<Option<OscillatoryBasisSet>> {
        let path = self.path(key);
        match std::fs::read(&path) {
            Ok(bytes) => decode(&bytes, key, &path).map(Some),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(&path, e)),
        }
    }

    /// Writes unless an entry already exists (entries are write-once).
    pub fn store(&self, key: &CacheKey, set: &OscillatoryBasisSet) -> Result<PathBuf> {
        let path = self.path(key);
        if !path.is_file() {
            write_atomic(&path, &encode(set, key))?;
        }
        Ok(path)
    }
}
