use nalgebra::{Point2, Vector2};

use crate::quadrature::{triangle_rule, QuadratureRule};

/// Twice the signed area of the loop (positive when counter-clockwise).
pub fn signed_double_area(points: &[Point2<f64>]) -> f64 {
    let n = points.len();
    (0..n)
        .map(|i| {
            let p = points[i];
            let q = points[(i + 1) % n];
            p.x * q.y - q.x * p.y
        })
        .sum()
}

pub fn area(points: &[Point2<f64>]) -> f64 {
    0.5 * signed_double_area(points).abs()
}

/// Area centroid; falls back to the vertex average for degenerate loops.
pub fn centroid(points: &[Point2<f64>]) -> Point2<f64> {
    let n = points.len();
    let a2 = signed_double_area(points);
    let avg = points
        .iter()
        .fold(Vector2::zeros(), |acc, p| acc + p.coords)
        / n as f64;
    if a2.abs() < 1e-300 {
        return Point2::from(avg);
    }
    // Shift to the vertex average to limit cancellation.
    let mut c = Vector2::zeros();
    for i in 0..n {
        let p = points[i].coords - avg;
        let q = points[(i + 1) % n].coords - avg;
        let cross = p.x * q.y - q.x * p.y;
        c += (p + q) * cross;
    }
    Point2::from(avg + c / (3.0 * a2))
}

pub fn diameter(points: &[Point2<f64>]) -> f64 {
    let mut d: f64 = 0.0;
    for (i, p) in points.iter().enumerate() {
        for q in &points[i + 1..] {
            d = d.max((p - q).norm());
        }
    }
    d
}

pub fn is_convex(points: &[Point2<f64>]) -> bool {
    let n = points.len();
    (0..n).all(|i| {
        let a = points[i];
        let b = points[(i + 1) % n];
        let c = points[(i + 2) % n];
        (b - a).perp(&(c - b)) >= -1e-14 * (b - a).norm() * (c - b).norm()
    })
}

/// Inradius of a triangle (zero for degenerate ones).
pub fn inradius(tri: &[Point2<f64>; 3]) -> f64 {
    let a = area(tri);
    let perimeter = (tri[1] - tri[0]).norm() + (tri[2] - tri[1]).norm() + (tri[0] - tri[2]).norm();
    if perimeter == 0.0 {
        0.0
    } else {
        2.0 * a / perimeter
    }
}

/// Ear-clipping triangulation of a simple counter-clockwise polygon,
/// returned as index triples into `points`.
pub fn ear_clip(points: &[Point2<f64>]) -> Option<Vec<[usize; 3]>> {
    let mut remaining: Vec<usize> = (0..points.len()).collect();
    let mut triangles = Vec::with_capacity(points.len().saturating_sub(2));
    while remaining.len() > 3 {
        let m = remaining.len();
        let ear = (0..m).find(|&i| {
            let ia = remaining[(i + m - 1) % m];
            let ib = remaining[i];
            let ic = remaining[(i + 1) % m];
            let (a, b, c) = (points[ia], points[ib], points[ic]);
            if (b - a).perp(&(c - b)) <= 0.0 {
                return false;
            }
            remaining.iter().all(|&j| {
                j == ia || j == ib || j == ic || !point_in_triangle(points[j], &[a, b, c])
            })
        })?;
        let ia = remaining[(ear + m - 1) % m];
        let ib = remaining[ear];
        let ic = remaining[(ear + 1) % m];
        triangles.push([ia, ib, ic]);
        remaining.remove(ear);
    }
    if remaining.len() == 3 {
        triangles.push([remaining[0], remaining[1], remaining[2]]);
    }
    Some(triangles)
}

/// Barycentric coordinates of `p` with respect to the triangle.
pub fn barycentric(p: Point2<f64>, tri: &[Point2<f64>; 3]) -> [f64; 3] {
    let v0 = tri[1] - tri[0];
    let v1 = tri[2] - tri[0];
    let v2 = p - tri[0];
    let det = v0.perp(&v1);
    let l1 = v2.perp(&v1) / det;
    let l2 = v0.perp(&v2) / det;
    [1.0 - l1 - l2, l1, l2]
}

pub fn point_in_triangle(p: Point2<f64>, tri: &[Point2<f64>; 3]) -> bool {
    barycentric(p, tri).iter().all(|&l| l >= -1e-12)
}

/// Triangulation of a polygon used for coarse-cell integration.
pub fn integration_triangles(points: &[Point2<f64>]) -> Vec<[Point2<f64>; 3]> {
    if points.len() == 3 {
        return vec![[points[0], points[1], points[2]]];
    }
    if is_convex(points) {
        let c = centroid(points);
        let n = points.len();
        return (0..n)
            .map(|i| [c, points[i], points[(i + 1) % n]])
            .collect();
    }
    ear_clip(points)
        .unwrap_or_default()
        .into_iter()
        .map(|[a, b, c]| [points[a], points[b], points[c]])
        .collect()
}

/// Composite rule over a polygon.
pub fn polygon_rule(points: &[Point2<f64>], degree: usize) -> QuadratureRule {
    let mut rule = QuadratureRule {
        points: Vec::new(),
        weights: Vec::new(),
        degree,
    };
    for tri in integration_triangles(points) {
        let r = triangle_rule(&tri, degree);
        rule.points.extend(r.points);
        rule.weights.extend(r.weights);
    }
    rule
}
