//! Uniform triangle meshes of the unit square and of the periodic unit torus.
//!
//! Level 0 is the square split along the diagonal from (0,0) to (1,1). Each
//! refinement splits every triangle into four, so level `l` is the uniform
//! square grid of width `2^-l` with every square cut along its (1,1) diagonal.
//! Coordinates are stored as integers over `2^level`.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use thiserror::Error;

/// Point in the plane.
pub type Point = [f64; 2];

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("mesh level {0} exceeds the supported maximum {MAX_LEVEL}")]
    LevelTooLarge(u32),
    #[error("level {requested} not built (hierarchy stops at {available})")]
    LevelNotBuilt { requested: u32, available: u32 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Refinement beyond this would overflow memory long before the integer
/// coordinates overflow.
pub const MAX_LEVEL: u32 = 12;

/// Local edges as (start, end) local vertex pairs; edge `k` is opposite vertex `2-k`
/// for k=0,1 and edge 2 joins vertices 0 and 2.
pub const LOCAL_EDGES: [(usize, usize); 3] = [(0, 1), (1, 2), (0, 2)];

/// How a vertex of level `l+1` arises from level `l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VertexParent {
    Vertex(usize),
    EdgeMidpoint(usize),
}

#[derive(Debug, Clone)]
pub struct MeshLevel {
    pub level: u32,
    pub periodic: bool,
    /// Integer vertex coordinates over `2^level`, wrapped into `[0, 2^level)` when periodic.
    pub vertices: Vec<[i64; 2]>,
    /// Counter-clockwise vertex ids.
    pub triangles: Vec<[usize; 3]>,
    /// Unwrapped integer coordinates of each triangle's vertices.
    pub tri_coords: Vec<[[i64; 2]; 3]>,
    /// Edge endpoints in canonical orientation.
    pub edges: Vec<[usize; 2]>,
    /// Unwrapped integer coordinate of each edge's start point.
    pub edge_start: Vec<[i64; 2]>,
    /// Canonical direction: one of (1,0), (0,1), (1,1).
    pub edge_dir: Vec<[i64; 2]>,
    /// Global edge id and orientation sign for each local edge.
    pub tri_edges: Vec<[(usize, f64); 3]>,
    pub boundary_edge: Vec<bool>,
    /// Parent triangle at the previous level; children of `t` are `4t..4t+4`.
    pub tri_parent: Vec<usize>,
    pub vertex_parent: Vec<VertexParent>,
    squares: OnceLock<Vec<[usize; 2]>>,
}

fn canonical(dir: [i64; 2]) -> ([i64; 2], bool) {
    match dir {
        [1, 0] | [0, 1] | [1, 1] => (dir, false),
        [-1, 0] | [0, -1] | [-1, -1] => ([-dir[0], -dir[1]], true),
        _ => panic!("edge direction {dir:?} is not a grid direction"),
    }
}

impl MeshLevel {
    /// Level-0 mesh.
    pub fn base(periodic: bool) -> Self {
        let tri_coords = vec![[[0, 0], [1, 0], [1, 1]], [[0, 0], [1, 1], [0, 1]]];
        if periodic {
            // one vertex, three edges: horizontal, vertical, diagonal
            let edges = vec![[0, 0]; 3];
            let edge_start = vec![[0, 0]; 3];
            let edge_dir = vec![[1, 0], [0, 1], [1, 1]];
            let tri_edges = vec![
                [(0, 1.0), (1, 1.0), (2, 1.0)],
                [(2, 1.0), (0, -1.0), (1, 1.0)],
            ];
            MeshLevel {
                level: 0,
                periodic,
                vertices: vec![[0, 0]],
                triangles: vec![[0, 0, 0], [0, 0, 0]],
                tri_coords,
                edges,
                edge_start,
                edge_dir,
                tri_edges,
                boundary_edge: vec![false; 3],
                tri_parent: Vec::new(),
                vertex_parent: Vec::new(),
                squares: OnceLock::new(),
            }
        } else {
            let vertices = vec![[0, 0], [1, 0], [1, 1], [0, 1]];
            let edges = vec![[0, 1], [1, 2], [0, 2], [3, 2], [0, 3]];
            let edge_start = vec![[0, 0], [1, 0], [0, 0], [0, 1], [0, 0]];
            let edge_dir = vec![[1, 0], [0, 1], [1, 1], [1, 0], [0, 1]];
            let tri_edges = vec![
                [(0, 1.0), (1, 1.0), (2, 1.0)],
                [(2, 1.0), (3, -1.0), (4, 1.0)],
            ];
            MeshLevel {
                level: 0,
                periodic,
                vertices,
                triangles: vec![[0, 1, 2], [0, 2, 3]],
                tri_coords,
                edges,
                edge_start,
                edge_dir,
                tri_edges,
                boundary_edge: vec![true, true, false, true, true],
                tri_parent: Vec::new(),
                vertex_parent: Vec::new(),
                squares: OnceLock::new(),
            }
        }
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }
    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }
    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    /// Grid width `2^-level`.
    pub fn h(&self) -> f64 {
        (0.5f64).powi(self.level as i32)
    }

    pub fn scale(&self) -> f64 {
        self.h()
    }

    pub fn triangle_area(&self) -> f64 {
        0.5 * self.h() * self.h()
    }

    /// Physical (unwrapped) vertex coordinates of triangle `t`.
    pub fn triangle_points(&self, t: usize) -> [Point; 3] {
        let s = self.h();
        let c = &self.tri_coords[t];
        [
            [c[0][0] as f64 * s, c[0][1] as f64 * s],
            [c[1][0] as f64 * s, c[1][1] as f64 * s],
            [c[2][0] as f64 * s, c[2][1] as f64 * s],
        ]
    }

    pub fn vertex_point(&self, v: usize) -> Point {
        let s = self.h();
        [self.vertices[v][0] as f64 * s, self.vertices[v][1] as f64 * s]
    }

    /// Unwrapped start point and canonical tangent (end minus start) of edge `e`.
    pub fn edge_geometry(&self, e: usize) -> (Point, Point) {
        let s = self.h();
        let p = [self.edge_start[e][0] as f64 * s, self.edge_start[e][1] as f64 * s];
        let d = [self.edge_dir[e][0] as f64 * s, self.edge_dir[e][1] as f64 * s];
        (p, d)
    }

    fn wrap(&self, c: [i64; 2], n: i64) -> [i64; 2] {
        if self.periodic {
            [c[0].rem_euclid(n), c[1].rem_euclid(n)]
        } else {
            c
        }
    }

    /// Uniform refinement; children of triangle `t` are `4t..4t+4`.
    pub fn refine(&self) -> MeshLevel {
        let nv = self.n_vertices();
        let ne = self.n_edges();
        let nt = self.n_triangles();
        let n_fine = 1i64 << (self.level + 1);

        let mut vertices = Vec::with_capacity(nv + ne);
        let mut vertex_parent = Vec::with_capacity(nv + ne);
        for (i, v) in self.vertices.iter().enumerate() {
            vertices.push([2 * v[0], 2 * v[1]]);
            vertex_parent.push(VertexParent::Vertex(i));
        }
        for e in 0..ne {
            let s = self.edge_start[e];
            let d = self.edge_dir[e];
            vertices.push(self.wrap([2 * s[0] + d[0], 2 * s[1] + d[1]], n_fine));
            vertex_parent.push(VertexParent::EdgeMidpoint(e));
        }

        // halves of old edges first, then three interior edges per triangle
        let mut edges = Vec::with_capacity(2 * ne + 3 * nt);
        let mut edge_start = Vec::with_capacity(2 * ne + 3 * nt);
        let mut edge_dir = Vec::with_capacity(2 * ne + 3 * nt);
        let mut boundary_edge = Vec::with_capacity(2 * ne + 3 * nt);
        for e in 0..ne {
            let [a, b] = self.edges[e];
            let s = self.edge_start[e];
            let d = self.edge_dir[e];
            let mid = nv + e;
            edges.push([a, mid]);
            edge_start.push([2 * s[0], 2 * s[1]]);
            edge_dir.push(d);
            edges.push([mid, b]);
            edge_start.push([2 * s[0] + d[0], 2 * s[1] + d[1]]);
            edge_dir.push(d);
            boundary_edge.push(self.boundary_edge[e]);
            boundary_edge.push(self.boundary_edge[e]);
        }

        let mut triangles = Vec::with_capacity(4 * nt);
        let mut tri_coords = Vec::with_capacity(4 * nt);
        let mut tri_edges = Vec::with_capacity(4 * nt);
        let mut tri_parent = Vec::with_capacity(4 * nt);

        for t in 0..nt {
            let pc = self.tri_coords[t];
            let pv = self.triangles[t];
            let q = [
                [2 * pc[0][0], 2 * pc[0][1]],
                [2 * pc[1][0], 2 * pc[1][1]],
                [2 * pc[2][0], 2 * pc[2][1]],
            ];
            let mid = |i: usize, j: usize| [pc[i][0] + pc[j][0], pc[i][1] + pc[j][1]];
            // local-edge index of the parent edge joining local vertices i, j
            let pe = |i: usize, j: usize| -> usize {
                LOCAL_EDGES
                    .iter()
                    .position(|&(a, b)| (a, b) == (i.min(j), i.max(j)))
                    .unwrap()
            };
            let mv = |k: usize| nv + self.tri_edges[t][k].0;
            let (m01, m12, m02) = (mid(0, 1), mid(1, 2), mid(0, 2));
            let (v01, v12, v02) = (mv(0), mv(1), mv(2));

            // interior edges: m01-m12, m12-m02, m01-m02
            let base = edges.len();
            for (p, pid, r, rid) in [
                (m01, v01, m12, v12),
                (m12, v12, m02, v02),
                (m01, v01, m02, v02),
            ] {
                let (dir, flip) = canonical([r[0] - p[0], r[1] - p[1]]);
                if flip {
                    edges.push([rid, pid]);
                    edge_start.push(r);
                } else {
                    edges.push([pid, rid]);
                    edge_start.push(p);
                }
                edge_dir.push(dir);
                boundary_edge.push(false);
            }

            // (coords, ids) of the four children, counter-clockwise
            let children: [([[i64; 2]; 3], [usize; 3]); 4] = [
                ([q[0], m01, m02], [pv[0], v01, v02]),
                ([m01, q[1], m12], [v01, pv[1], v12]),
                ([m02, m12, q[2]], [v02, v12, pv[2]]),
                ([m01, m12, m02], [v01, v12, v02]),
            ];
            // which half of a parent edge touches parent vertex i
            let half = |i: usize, j: usize| -> usize {
                let k = pe(i, j);
                let (e, sign) = self.tri_edges[t][k];
                let (a, _) = LOCAL_EDGES[k];
                if (i == a) == (sign > 0.0) {
                    2 * e
                } else {
                    2 * e + 1
                }
            };
            let interior = [base, base + 1, base + 2]; // m01m12, m12m02, m01m02
            let child_edge_ids: [[usize; 3]; 4] = [
                // (0,1): q0-m01, (1,2): m01-m02, (0,2): q0-m02
                [half(0, 1), interior[2], half(0, 2)],
                // (0,1): m01-q1, (1,2): q1-m12, (0,2): m01-m12
                [half(1, 0), half(1, 2), interior[0]],
                // (0,1): m02-m12, (1,2): m12-q2, (0,2): m02-q2
                [interior[1], half(2, 1), half(2, 0)],
                // (0,1): m01-m12, (1,2): m12-m02, (0,2): m01-m02
                [interior[0], interior[1], interior[2]],
            ];

            for (c, (coords, ids)) in children.iter().enumerate() {
                let mut te = [(0usize, 0.0f64); 3];
                for (k, &(a, b)) in LOCAL_EDGES.iter().enumerate() {
                    let e = child_edge_ids[c][k];
                    let d = [coords[b][0] - coords[a][0], coords[b][1] - coords[a][1]];
                    let sign = if d == edge_dir[e] {
                        1.0
                    } else {
                        debug_assert_eq!(d, [-edge_dir[e][0], -edge_dir[e][1]]);
                        -1.0
                    };
                    te[k] = (e, sign);
                }
                triangles.push(*ids);
                tri_coords.push(*coords);
                tri_edges.push(te);
                tri_parent.push(t);
            }
        }

        MeshLevel {
            level: self.level + 1,
            periodic: self.periodic,
            vertices,
            triangles,
            tri_coords,
            edges,
            edge_start,
            edge_dir,
            tri_edges,
            boundary_edge,
            tri_parent,
            vertex_parent,
            squares: OnceLock::new(),
        }
    }

    /// Interior edges (all edges when periodic), in increasing id order.
    pub fn interior_edges(&self) -> Vec<usize> {
        (0..self.n_edges()).filter(|&e| !self.boundary_edge[e]).collect()
    }

    /// Triangle containing the point, for meshes of the unit square.
    /// Points on shared boundaries go to the lower-left neighbour.
    pub fn locate(&self, p: Point) -> usize {
        let n = 1i64 << self.level;
        let nf = n as f64;
        let (mut x, mut y) = (p[0], p[1]);
        if self.periodic {
            x = x.rem_euclid(1.0);
            y = y.rem_euclid(1.0);
        }
        let i = ((x * nf).floor() as i64).clamp(0, n - 1);
        let j = ((y * nf).floor() as i64).clamp(0, n - 1);
        let (fx, fy) = (x * nf - i as f64, y * nf - j as f64);
        self.square_triangles(i, j)[usize::from(fy > fx)]
    }

    /// The two triangles (lower-right, upper-left) covering grid square (i, j).
    pub fn square_triangles(&self, i: i64, j: i64) -> [usize; 2] {
        let n = 1i64 << self.level;
        self.square_index()[(j * n + i) as usize]
    }

    /// Triangle pairs of all grid squares, row-major in (j, i).
    pub fn square_index(&self) -> &[[usize; 2]] {
        self.squares.get_or_init(|| {
            let n = 1i64 << self.level;
            let mut out = vec![[usize::MAX; 2]; (n * n) as usize];
            for (t, c) in self.tri_coords.iter().enumerate() {
                let i = c.iter().map(|p| p[0]).min().unwrap();
                let j = c.iter().map(|p| p[1]).min().unwrap();
                // the lower-right triangle owns the corner (i+1, j)
                let lower = c.iter().any(|p| *p == [i + 1, j]);
                out[(j * n + i) as usize][usize::from(!lower)] = t;
            }
            out
        })
    }

    /// Human-readable dump: counts, then one line per vertex, edge and triangle.
    pub fn to_debug_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "mesh level={} periodic={} vertices={} edges={} triangles={}",
            self.level,
            self.periodic,
            self.n_vertices(),
            self.n_edges(),
            self.n_triangles()
        );
        for (i, v) in self.vertices.iter().enumerate() {
            let _ = writeln!(s, "v {i} {} {}", v[0], v[1]);
        }
        for (i, e) in self.edges.iter().enumerate() {
            let _ = writeln!(
                s,
                "e {i} {} {} {}",
                e[0],
                e[1],
                if self.boundary_edge[i] { "b" } else { "i" }
            );
        }
        for (i, t) in self.triangles.iter().enumerate() {
            let te = self.tri_edges[i];
            let _ = writeln!(
                s,
                "t {i} {} {} {} {}{} {}{} {}{}",
                t[0],
                t[1],
                t[2],
                if te[0].1 > 0.0 { "+" } else { "-" },
                te[0].0,
                if te[1].1 > 0.0 { "+" } else { "-" },
                te[1].0,
                if te[2].1 > 0.0 { "+" } else { "-" },
                te[2].0
            );
        }
        s
    }

    pub fn export_debug(&self, path: &Path) -> Result<(), MeshError> {
        std::fs::write(path, self.to_debug_text())?;
        Ok(())
    }
}

/// Meshes of levels `0..=max_level`.
#[derive(Debug, Clone)]
pub struct MeshHierarchy {
    pub periodic: bool,
    pub levels: Vec<MeshLevel>,
}

impl MeshHierarchy {
    pub fn new(max_level: u32, periodic: bool) -> Result<Self, MeshError> {
        if max_level > MAX_LEVEL {
            return Err(MeshError::LevelTooLarge(max_level));
        }
        let mut levels = vec![MeshLevel::base(periodic)];
        for _ in 0..max_level {
            let next = levels.last().unwrap().refine();
            levels.push(next);
        }
        Ok(MeshHierarchy { periodic, levels })
    }

    pub fn max_level(&self) -> u32 {
        (self.levels.len() - 1) as u32
    }

    pub fn level(&self, l: u32) -> Result<&MeshLevel, MeshError> {
        self.levels.get(l as usize).ok_or(MeshError::LevelNotBuilt {
            requested: l,
            available: self.max_level(),
        })
    }

    /// Ancestor at level `coarse` of triangle `t` at level `fine`.
    pub fn ancestor(&self, fine: u32, t: usize, coarse: u32) -> usize {
        let mut t = t;
        for l in (coarse + 1..=fine).rev() {
            t = self.levels[l as usize].tri_parent[t];
        }
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shared_counts(m: &MeshLevel) -> Vec<usize> {
        let mut c = vec![0; m.n_edges()];
        for te in &m.tri_edges {
            for &(e, _) in te {
                c[e] += 1;
            }
        }
        c
    }

    #[test]
    fn counts_follow_closed_forms() {
        for periodic in [false, true] {
            let h = MeshHierarchy::new(5, periodic).unwrap();
            for m in &h.levels {
                let n = 1usize << m.level;
                assert_eq!(m.n_triangles(), 2 * n * n);
                if periodic {
                    assert_eq!(m.n_vertices(), n * n);
                    assert_eq!(m.n_edges(), 3 * n * n);
                    assert_eq!(m.n_vertices() as i64 - m.n_edges() as i64 + m.n_triangles() as i64, 0);
                } else {
                    assert_eq!(m.n_vertices(), (n + 1) * (n + 1));
                    assert_eq!(m.n_edges(), 3 * n * n + 2 * n);
                    assert_eq!(m.boundary_edge.iter().filter(|&&b| b).count(), 4 * n);
                    assert_eq!(m.n_vertices() as i64 - m.n_edges() as i64 + m.n_triangles() as i64, 1);
                }
            }
        }
    }

    #[test]
    fn edges_are_shared_correctly() {
        for periodic in [false, true] {
            let h = MeshHierarchy::new(4, periodic).unwrap();
            for m in &h.levels {
                for (e, c) in shared_counts(m).into_iter().enumerate() {
                    let want = if m.boundary_edge[e] { 1 } else { 2 };
                    assert_eq!(c, want, "level {} edge {e}", m.level);
                }
            }
        }
    }

    #[test]
    fn local_orientation_matches_canonical_direction() {
        for periodic in [false, true] {
            let h = MeshHierarchy::new(4, periodic).unwrap();
            for m in &h.levels {
                for t in 0..m.n_triangles() {
                    let c = m.tri_coords[t];
                    // counter-clockwise with the expected area
                    let det = (c[1][0] - c[0][0]) * (c[2][1] - c[0][1]) - (c[2][0] - c[0][0]) * (c[1][1] - c[0][1]);
                    assert_eq!(det, 1);
                    for (k, &(a, b)) in LOCAL_EDGES.iter().enumerate() {
                        let (e, s) = m.tri_edges[t][k];
                        let d = [c[b][0] - c[a][0], c[b][1] - c[a][1]];
                        let s = s as i64;
                        assert_eq!([s * d[0], s * d[1]], m.edge_dir[e]);
                        // endpoints agree with the triangle's vertex ids
                        let (va, vb) = (m.triangles[t][a], m.triangles[t][b]);
                        let want = if s > 0 { [va, vb] } else { [vb, va] };
                        assert_eq!(m.edges[e], want);
                    }
                }
            }
        }
    }

    #[test]
    fn periodic_edges_have_distinct_wrapped_midpoints() {
        let h = MeshHierarchy::new(4, true).unwrap();
        for m in &h.levels {
            let n = 2i64 << m.level;
            let mut mids: Vec<[i64; 2]> = (0..m.n_edges())
                .map(|e| {
                    let s = m.edge_start[e];
                    let d = m.edge_dir[e];
                    [(2 * s[0] + d[0]).rem_euclid(n), (2 * s[1] + d[1]).rem_euclid(n)]
                })
                .collect();
            mids.sort();
            mids.dedup();
            assert_eq!(mids.len(), m.n_edges());
        }
    }

    #[test]
    fn curl_of_gradient_vanishes() {
        for periodic in [false, true] {
            let h = MeshHierarchy::new(3, periodic).unwrap();
            for m in &h.levels {
                for t in 0..m.n_triangles() {
                    // sum over edges of sign * (end - start) must vanish for any vertex potential
                    let mut acc = std::collections::HashMap::<usize, i64>::new();
                    for (k, &(e, s)) in m.tri_edges[t].iter().enumerate() {
                        // boundary orientation of local edges (0,1), (1,2), (0,2)
                        let s = s as i64 * [1, 1, -1][k];
                        let [a, b] = m.edges[e];
                        *acc.entry(b).or_default() += s;
                        *acc.entry(a).or_default() -= s;
                    }
                    assert!(acc.values().all(|&v| v == 0));
                }
            }
        }
    }

    #[test]
    fn parent_maps_are_consistent() {
        let h = MeshHierarchy::new(4, false).unwrap();
        for l in 1..=4 {
            let (c, f) = (&h.levels[l - 1], &h.levels[l]);
            for (v, p) in f.vertex_parent.iter().enumerate() {
                let want = match *p {
                    VertexParent::Vertex(i) => [2 * c.vertices[i][0], 2 * c.vertices[i][1]],
                    VertexParent::EdgeMidpoint(e) => {
                        let [a, b] = c.edges[e];
                        [c.vertices[a][0] + c.vertices[b][0], c.vertices[a][1] + c.vertices[b][1]]
                    }
                };
                assert_eq!(f.vertices[v], want);
            }
            for t in 0..f.n_triangles() {
                let p = f.tri_parent[t];
                assert_eq!(p, t / 4);
                let pc = c.tri_coords[p];
                for q in f.tri_coords[t] {
                    // inside the doubled parent
                    let g = TriangleGeometryInt::new(pc);
                    assert!(g.contains_doubled(q));
                }
            }
        }
    }

    struct TriangleGeometryInt([[i64; 2]; 3]);
    impl TriangleGeometryInt {
        fn new(c: [[i64; 2]; 3]) -> Self {
            Self(c)
        }
        fn contains_doubled(&self, q: [i64; 2]) -> bool {
            let c = self.0;
            (0..3).all(|i| {
                let a = [2 * c[i][0], 2 * c[i][1]];
                let b = [2 * c[(i + 1) % 3][0], 2 * c[(i + 1) % 3][1]];
                (b[0] - a[0]) * (q[1] - a[1]) - (b[1] - a[1]) * (q[0] - a[0]) >= 0
            })
        }
    }

    #[test]
    fn locate_finds_the_containing_triangle() {
        let h = MeshHierarchy::new(3, false).unwrap();
        let m = &h.levels[3];
        for &p in &[[0.1, 0.05], [0.05, 0.1], [0.99, 0.99], [0.5, 0.26], [0.0, 0.0]] {
            let t = m.locate(p);
            let c = m.triangle_points(t);
            let g = crate::elements::TriangleGeometry::new(c).unwrap();
            let b = g.barycentric(p);
            assert!(b.iter().all(|&x| x >= -1e-12), "{p:?} -> {t} {b:?}");
        }
    }

    #[test]
    fn debug_export_lists_everything() {
        let m = MeshHierarchy::new(1, true).unwrap().levels[1].clone();
        let s = m.to_debug_text();
        assert!(s.starts_with("mesh level=1 periodic=true vertices=4 edges=12 triangles=8"));
        assert_eq!(s.lines().count(), 1 + 4 + 12 + 8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        m.export_debug(&path).unwrap();
        assert_eq!(std::fs::read_to_string(path).unwrap(), s);
    }
}
