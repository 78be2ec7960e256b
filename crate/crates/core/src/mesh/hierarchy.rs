use std::f64::consts::SQRT_2;

use super::coarse::CoarseMesh;
use super::trimesh::TriMesh;
use crate::error::{Error, Result};

/// Default cap on the number of cells of the finest level.
pub const DEFAULT_CELL_CAP: usize = 8_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    UnitSquare,
}

/// Nested triangulations with `H_l = H_0 2^-l`; level `l + 1` is the red
/// refinement of level `l`, so triangle `t` of level `l` has children
/// `4t .. 4t + 3` on level `l + 1`.
#[derive(Debug, Clone)]
pub struct MeshHierarchy {
    pub h0: f64,
    pub trimeshes: Vec<TriMesh>,
    pub meshes: Vec<CoarseMesh>,
}

impl MeshHierarchy {
    pub fn num_levels(&self) -> usize {
        self.meshes.len()
    }

    pub fn nominal_h(&self, level: usize) -> f64 {
        self.h0 * f64::powi(0.5, level as i32)
    }

    pub fn level(&self, level: usize) -> &CoarseMesh {
        &self.meshes[level]
    }
}

/// Grid ticks on `[0, 1]` whose largest spacing is exactly `h0 / sqrt(2)`.
fn level0_ticks(h0: f64) -> Vec<f64> {
    let wmax = h0 / SQRT_2;
    let n = (1.0 / wmax - 1e-12).ceil().max(1.0) as usize;
    if ((n as f64) * wmax - 1.0).abs() < 1e-14 {
        return (0..=n).map(|i| i as f64 / n as f64).collect();
    }
    let rest = (1.0 - wmax) / (n - 1) as f64;
    let mut ticks = Vec::with_capacity(n + 1);
    ticks.push(0.0);
    ticks.push(wmax);
    for i in 1..n {
        ticks.push(wmax + rest * i as f64);
    }
    ticks[n] = 1.0;
    ticks
}

/// Level-0 structured triangulation of the domain with mesh size `h0`.
pub fn base_mesh(domain: Domain, h0: f64) -> Result<TriMesh> {
    match domain {
        Domain::UnitSquare => {
            if !(h0 > 0.0) || h0 > SQRT_2 * (1.0 + 1e-14) {
                return Err(Error::InvalidArgument(format!(
                    "H0 must lie in (0, sqrt(2)] for the unit square, got {h0}"
                )));
            }
            let ticks = level0_ticks(h0.min(SQRT_2));
            TriMesh::structured(&ticks, &ticks)
        }
    }
}

pub fn build_hierarchy(domain: Domain, levels: usize, h0: f64) -> Result<MeshHierarchy> {
    build_hierarchy_with_cap(domain, levels, h0, DEFAULT_CELL_CAP)
}

pub fn build_hierarchy_with_cap(
    domain: Domain,
    levels: usize,
    h0: f64,
    cap: usize,
) -> Result<MeshHierarchy> {
    if levels == 0 {
        return Err(Error::InvalidArgument(
            "at least one level is required".into(),
        ));
    }
    let base = base_mesh(domain, h0)?;
    let finest = base.num_triangles() as f64 * 4f64.powi(levels as i32 - 1);
    if finest > cap as f64 {
        return Err(Error::TooManyElements {
            count: finest.min(usize::MAX as f64) as usize,
            cap,
        });
    }
    let mut trimeshes = vec![base];
    for _ in 1..levels {
        let next = trimeshes.last().unwrap().refine();
        trimeshes.push(next);
    }
    let meshes = trimeshes
        .iter()
        .map(CoarseMesh::from_trimesh)
        .collect::<Result<Vec<_>>>()?;
    Ok(MeshHierarchy {
        h0,
        trimeshes,
        meshes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_sizes() {
        let hier = build_hierarchy(Domain::UnitSquare, 2, 0.43).unwrap();
        assert!((hier.meshes[0].h - 0.43).abs() < 1e-14);
        assert!((hier.meshes[1].h - 0.215).abs() < 1e-14);
        assert!((hier.meshes[1].h - hier.meshes[0].h / 2.0).abs() < 1e-15);
    }

    #[test]
    fn coarsest_mesh_is_two_triangles() {
        let hier = build_hierarchy(Domain::UnitSquare, 1, SQRT_2).unwrap();
        assert_eq!(hier.meshes[0].num_cells(), 2);
        assert!((hier.meshes[0].h - SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn cell_counts_quadruple() {
        let hier = build_hierarchy(Domain::UnitSquare, 3, 0.5).unwrap();
        // independent count: a uniform refinement multiplies triangles by 4
        let n0 = hier.meshes[0].num_cells();
        assert_eq!(hier.meshes[1].num_cells(), 4 * n0);
        assert_eq!(hier.meshes[2].num_cells(), 16 * n0);
        for l in 0..3 {
            assert!((hier.meshes[l].total_area() - 1.0).abs() < 1e-12);
            assert!((hier.meshes[l].h - hier.nominal_h(l)).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(build_hierarchy(Domain::UnitSquare, 2, -1.0).is_err());
        assert!(build_hierarchy(Domain::UnitSquare, 0, 0.5).is_err());
        assert!(matches!(
            build_hierarchy_with_cap(Domain::UnitSquare, 12, 0.5, 1000),
            Err(Error::TooManyElements { .. })
        ));
    }
}
