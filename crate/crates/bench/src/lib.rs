//! Shared fixtures for the benchmarks in `benches/`.

use std::f64::consts::SQRT_2;

use mshho::coefficient::DiffusionSpec;
use mshho::mesh::{build_hierarchy, CoarseMesh, Domain, FineSubmesh, MeshHierarchy};
use mshho::mshho::{local_forms, LocalOperatorPack, Variant};
use mshho::oscillatory_basis::{compute_basis_set, OscillatoryBasisSet};

pub const EPS: f64 = std::f64::consts::PI / 30.0;

pub fn hierarchy(levels: usize) -> MeshHierarchy {
    build_hierarchy(Domain::UnitSquare, levels, SQRT_2).expect("hierarchy")
}

pub fn periodic() -> DiffusionSpec {
    DiffusionSpec::periodic_paper(EPS).expect("coefficient")
}

/// Offline data of one level: sub-meshes, basis sets and operator packs.
pub struct LevelData {
    pub submeshes: Vec<FineSubmesh>,
    pub sets: Vec<OscillatoryBasisSet>,
    pub packs: Vec<LocalOperatorPack>,
}

pub fn offline_level(
    coarse: &CoarseMesh,
    spec: &DiffusionSpec,
    k: usize,
    refinements: usize,
    variant: Variant,
) -> LevelData {
    let submeshes: Vec<FineSubmesh> = (0..coarse.num_cells())
        .map(|c| FineSubmesh::build_with_refinements(coarse, c, refinements).expect("submesh"))
        .collect();
    let sets: Vec<OscillatoryBasisSet> = submeshes
        .iter()
        .enumerate()
        .map(|(c, s)| compute_basis_set(coarse, c, spec, k, 1, s).expect("basis"))
        .collect();
    let packs = local_forms(coarse, &sets, variant, spec.alpha).expect("packs");
    LevelData {
        submeshes,
        sets,
        packs,
    }
}
