//! Coarse polytopal meshes, nested hierarchies and per-cell simplicial
//! sub-meshes.

pub mod coarse;
pub mod hierarchy;
pub mod io;
pub mod polygon;
pub mod regularity;
pub mod submesh;
pub mod trimesh;

pub use coarse::{CoarseMesh, Face, FaceKind};
pub use hierarchy::{build_hierarchy, build_hierarchy_with_cap, Domain, MeshHierarchy};
pub use io::{read_mesh, write_mesh};
pub use regularity::{admissibility_report, RegularityReport};
pub use submesh::FineSubmesh;
pub use trimesh::TriMesh;
