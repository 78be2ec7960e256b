//! Plain-text mesh files.
//!
//! ```text
//! #nodes
//! <id> <x> <y>
//! #cells
//! <id> <n> <v1> ... <vn>
//! #boundary
//! <va> <vb>
//! ```
//!
//! Coordinates are written with 17 significant digits so that a
//! write/read cycle is lossless. An optional `#values` section
//! (`<node id> <value>`) carries a nodal field.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Point2;

use super::coarse::CoarseMesh;
use crate::error::{Error, Result};
use crate::util::write_atomic;

pub fn format_mesh(mesh: &CoarseMesh) -> String {
    format_mesh_with_values(&mesh.vertices, &mesh.cells, &boundary_pairs(mesh), None)
}

fn boundary_pairs(mesh: &CoarseMesh) -> Vec<[usize; 2]> {
    mesh.faces
        .iter()
        .filter(|f| f.is_boundary())
        .map(|f| f.vertices)
        .collect()
}

pub fn format_mesh_with_values(
    vertices: &[Point2<f64>],
    cells: &[Vec<usize>],
    boundary: &[[usize; 2]],
    values: Option<&[f64]>,
) -> String {
    let mut out = String::new();
    out.push_str("#nodes\n");
    for (i, p) in vertices.iter().enumerate() {
        let _ = writeln!(out, "{i} {:.16e} {:.16e}", p.x, p.y);
    }
    out.push_str("#cells\n");
    for (i, c) in cells.iter().enumerate() {
        let _ = write!(out, "{i} {}", c.len());
        for v in c {
            let _ = write!(out, " {v}");
        }
        out.push('\n');
    }
    out.push_str("#boundary\n");
    for [a, b] in boundary {
        let _ = writeln!(out, "{a} {b}");
    }
    if let Some(values) = values {
        out.push_str("#values\n");
        for (i, v) in values.iter().enumerate() {
            let _ = writeln!(out, "{i} {v:.16e}");
        }
    }
    out
}

pub fn write_mesh(path: &Path, mesh: &CoarseMesh) -> Result<()> {
    write_atomic(path, format_mesh(mesh).as_bytes())
}

pub fn read_mesh(path: &Path) -> Result<CoarseMesh> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_mesh(&text)
}

fn parse_error(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::InvalidMesh(format!("line {}: {msg}", line + 1))
}

pub fn parse_mesh(text: &str) -> Result<CoarseMesh> {
    #[derive(PartialEq)]
    enum Section {
        None,
        Nodes,
        Cells,
        Boundary,
        Values,
    }
    let mut section = Section::None;
    let mut vertices = Vec::new();
    let mut cells = Vec::new();
    let mut boundary = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('#') {
            section = match line {
                "#nodes" => Section::Nodes,
                "#cells" => Section::Cells,
                "#boundary" => Section::Boundary,
                "#values" => Section::Values,
                other => return Err(parse_error(ln, format!("unknown section {other}"))),
            };
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let int = |s: &str| s.parse::<usize>().map_err(|e| parse_error(ln, e));
        let float = |s: &str| s.parse::<f64>().map_err(|e| parse_error(ln, e));
        match section {
            Section::Nodes => {
                if fields.len() != 3 {
                    return Err(parse_error(ln, "expected `id x y`"));
                }
                if int(fields[0])? != vertices.len() {
                    return Err(parse_error(ln, "node ids must be consecutive from 0"));
                }
                vertices.push(Point2::new(float(fields[1])?, float(fields[2])?));
            }
            Section::Cells => {
                if fields.len() < 2 {
                    return Err(parse_error(ln, "expected `id n v1 .. vn`"));
                }
                if int(fields[0])? != cells.len() {
                    return Err(parse_error(ln, "cell ids must be consecutive from 0"));
                }
                let n = int(fields[1])?;
                if fields.len() != n + 2 {
                    return Err(parse_error(ln, format!("expected {n} vertex ids")));
                }
                cells.push(
                    fields[2..]
                        .iter()
                        .map(|s| int(s))
                        .collect::<Result<Vec<_>>>()?,
                );
            }
            Section::Boundary => {
                if fields.len() != 2 {
                    return Err(parse_error(ln, "expected `va vb`"));
                }
                let (a, b) = (int(fields[0])?, int(fields[1])?);
                boundary.push((a.min(b), a.max(b)));
            }
            Section::Values => {}
            Section::None => return Err(parse_error(ln, "data before the first section header")),
        }
    }
    let mesh = CoarseMesh::from_polygons(vertices, cells)?;
    let expected: HashSet<(usize, usize)> = mesh
        .faces
        .iter()
        .filter(|f| f.is_boundary())
        .map(|f| {
            (
                f.vertices[0].min(f.vertices[1]),
                f.vertices[0].max(f.vertices[1]),
            )
        })
        .collect();
    let given: HashSet<(usize, usize)> = boundary.into_iter().collect();
    if expected != given {
        return Err(Error::InvalidMesh(
            "#boundary section does not match the boundary of the cell complex".into(),
        ));
    }
    Ok(mesh)
}
