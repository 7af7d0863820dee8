//! Tetrahedral meshes with globally oriented edges and faces, the discrete
//! grad/curl/div incidence operators, and lowest-order Whitney forms.
//!
//! Orientation is derived from vertex ids: an edge runs from its lower to its
//! higher vertex, a face is the ascending vertex triple and a tetrahedron is
//! stored with ascending vertex ids. Local and global orientations therefore
//! always agree and no per-element sign tables are needed.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::solver::SparseMatrix;

pub type Vec3 = [f64; 3];

/// Vertex pairs of the six local edges of a sorted tetrahedron.
pub const LOCAL_EDGES: [[usize; 2]; 6] = [[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]];
/// Vertex triples of the four local faces of a sorted tetrahedron.
pub const LOCAL_FACES: [[usize; 3]; 4] = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];

/// Snap tolerance used when matching port endpoints to vertices (meters).
pub const SNAP_TOLERANCE: f64 = 1e-9;

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn scale3(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub(crate) fn add3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn norm3(a: Vec3) -> f64 {
    dot3(a, a).sqrt()
}

/// Signed integer incidence matrix stored row-wise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Incidence {
    pub nrows: usize,
    pub ncols: usize,
    pub rows: Vec<Vec<(usize, i8)>>,
}

impl Incidence {
    pub fn to_sparse(&self) -> SparseMatrix {
        let t: Vec<_> = self
            .rows
            .iter()
            .enumerate()
            .flat_map(|(r, row)| row.iter().map(move |&(c, s)| (r, c, f64::from(s))))
            .collect();
        SparseMatrix::from_triplets(self.nrows, self.ncols, &t).expect("incidence indices valid")
    }

    /// Exact integer product `self * other`, returned as dense rows of the
    /// nonzero pattern only.
    pub fn compose(&self, other: &Incidence) -> Vec<BTreeMap<usize, i64>> {
        assert_eq!(self.ncols, other.nrows);
        self.rows
            .iter()
            .map(|row| {
                let mut acc: BTreeMap<usize, i64> = BTreeMap::new();
                for &(k, a) in row {
                    for &(c, b) in &other.rows[k] {
                        *acc.entry(c).or_insert(0) += i64::from(a) * i64::from(b);
                    }
                }
                acc
            })
            .collect()
    }

    /// Largest absolute entry of `self * other`.
    pub fn max_abs_product(&self, other: &Incidence) -> i64 {
        self.compose(other)
            .iter()
            .flat_map(|r| r.values().map(|v| v.abs()))
            .max()
            .unwrap_or(0)
    }
}

/// Barycentric gradients and volume of one tetrahedron.
#[derive(Debug, Clone, Copy)]
pub struct TetGeometry {
    pub volume: f64,
    pub grad: [Vec3; 4],
    pub vertices: [Vec3; 4],
}

impl TetGeometry {
    pub fn new(p: [Vec3; 4]) -> Result<Self> {
        let a = sub(p[1], p[0]);
        let b = sub(p[2], p[0]);
        let c = sub(p[3], p[0]);
        let det = dot3(a, cross(b, c));
        let size = norm3(a).max(norm3(b)).max(norm3(c));
        if det.abs() <= 1e-14 * size * size * size {
            return Err(Error::Topology("degenerate tetrahedron".into()));
        }
        // rows of the inverse Jacobian are the gradients of lambda_1..3
        let g1 = scale3(cross(b, c), 1.0 / det);
        let g2 = scale3(cross(c, a), 1.0 / det);
        let g3 = scale3(cross(a, b), 1.0 / det);
        let g0 = scale3(add3(add3(g1, g2), g3), -1.0);
        Ok(Self {
            volume: det.abs() / 6.0,
            grad: [g0, g1, g2, g3],
            vertices: p,
        })
    }

    pub fn barycentric(&self, x: Vec3) -> [f64; 4] {
        let mut l = [0.0; 4];
        for i in 1..4 {
            l[i] = dot3(self.grad[i], sub(x, self.vertices[0]));
        }
        l[0] = 1.0 - l[1] - l[2] - l[3];
        l
    }

    pub fn point(&self, lambda: [f64; 4]) -> Vec3 {
        let mut x = [0.0; 3];
        for (li, vi) in lambda.iter().zip(&self.vertices) {
            x = add3(x, scale3(*vi, *li));
        }
        x
    }

    /// Whitney edge function of local edge `e` as coefficients of the
    /// barycentric coordinates: `W = sum_v coef[v] * lambda_v`.
    pub fn w1_coefficients(&self, e: usize) -> [Vec3; 4] {
        let [a, b] = LOCAL_EDGES[e];
        let mut c = [[0.0; 3]; 4];
        c[a] = self.grad[b];
        c[b] = scale3(self.grad[a], -1.0);
        c
    }

    /// Whitney face function of local face `f` in the same representation.
    pub fn w2_coefficients(&self, f: usize) -> [Vec3; 4] {
        let [a, b, c] = LOCAL_FACES[f];
        let g = &self.grad;
        let mut out = [[0.0; 3]; 4];
        out[a] = scale3(cross(g[b], g[c]), 2.0);
        out[b] = scale3(cross(g[c], g[a]), 2.0);
        out[c] = scale3(cross(g[a], g[b]), 2.0);
        out
    }

    pub fn w1(&self, e: usize, lambda: [f64; 4]) -> Vec3 {
        eval_coefficients(&self.w1_coefficients(e), lambda)
    }

    pub fn w2(&self, f: usize, lambda: [f64; 4]) -> Vec3 {
        eval_coefficients(&self.w2_coefficients(f), lambda)
    }

    /// Constant curl of the Whitney edge function: `2 grad(l_a) x grad(l_b)`.
    pub fn curl_w1(&self, e: usize) -> Vec3 {
        let [a, b] = LOCAL_EDGES[e];
        scale3(cross(self.grad[a], self.grad[b]), 2.0)
    }

    pub fn centroid(&self) -> Vec3 {
        self.point([0.25; 4])
    }
}

fn eval_coefficients(c: &[Vec3; 4], lambda: [f64; 4]) -> Vec3 {
    let mut out = [0.0; 3];
    for (ci, li) in c.iter().zip(lambda) {
        out = add3(out, scale3(*ci, li));
    }
    out
}

/// Local curl incidence of a sorted tetrahedron (4 faces x 6 edges).
pub fn local_curl_incidence() -> [[i8; 6]; 4] {
    let mut m = [[0i8; 6]; 4];
    for (f, [a, b, c]) in LOCAL_FACES.iter().enumerate() {
        for (e, pair) in LOCAL_EDGES.iter().enumerate() {
            if *pair == [*a, *b] || *pair == [*b, *c] {
                m[f][e] = 1;
            } else if *pair == [*a, *c] {
                m[f][e] = -1;
            }
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq)]
pub struct TetMesh {
    pub vertices: Vec<Vec3>,
    /// Tetrahedra with ascending vertex ids.
    pub tets: Vec<[usize; 4]>,
    pub materials: Vec<u32>,
    pub edges: Vec<[usize; 2]>,
    pub faces: Vec<[usize; 3]>,
    pub tet_edges: Vec<[usize; 6]>,
    pub tet_faces: Vec<[usize; 4]>,
    pub boundary_faces: Vec<bool>,
    pub boundary_edges: Vec<bool>,
    pub curl_incidence: Incidence,
    pub grad_incidence: Incidence,
    edge_lookup: BTreeMap<[usize; 2], usize>,
    edge_tets: Vec<Vec<usize>>,
}

impl TetMesh {
    /// Builds a mesh from raw vertices and tetrahedra, deriving all topology.
    pub fn from_parts(
        vertices: Vec<Vec3>,
        tets: Vec<[usize; 4]>,
        materials: Vec<u32>,
    ) -> Result<Self> {
        if tets.len() != materials.len() {
            return Err(invalid("one material id per tetrahedron required"));
        }
        let nv = vertices.len();
        let mut sorted_tets = Vec::with_capacity(tets.len());
        for t in &tets {
            let mut s = *t;
            s.sort_unstable();
            if s.iter().any(|&v| v >= nv) {
                return Err(Error::Topology(format!("tet {t:?} references missing vertex")));
            }
            if s.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::Topology(format!("tet {t:?} repeats a vertex")));
            }
            TetGeometry::new(s.map(|v| vertices[v]))?;
            sorted_tets.push(s);
        }

        let mut edge_set: BTreeMap<[usize; 2], usize> = BTreeMap::new();
        let mut face_count: BTreeMap<[usize; 3], usize> = BTreeMap::new();
        for t in &sorted_tets {
            for [a, b] in LOCAL_EDGES {
                edge_set.insert([t[a], t[b]], 0);
            }
            for [a, b, c] in LOCAL_FACES {
                *face_count.entry([t[a], t[b], t[c]]).or_insert(0) += 1;
            }
        }
        if let Some((f, n)) = face_count.iter().find(|(_, &n)| n > 2) {
            return Err(Error::Topology(format!("face {f:?} shared by {n} tetrahedra")));
        }
        let edges: Vec<[usize; 2]> = edge_set.keys().copied().collect();
        for (i, v) in edge_set.values_mut().enumerate() {
            *v = i;
        }
        let faces: Vec<[usize; 3]> = face_count.keys().copied().collect();
        let face_index: BTreeMap<[usize; 3], usize> =
            faces.iter().enumerate().map(|(i, f)| (*f, i)).collect();

        let mut tet_edges = Vec::with_capacity(sorted_tets.len());
        let mut tet_faces = Vec::with_capacity(sorted_tets.len());
        let mut edge_tets = vec![Vec::new(); edges.len()];
        for (ti, t) in sorted_tets.iter().enumerate() {
            let te = LOCAL_EDGES.map(|[a, b]| edge_set[&[t[a], t[b]]]);
            for &e in &te {
                edge_tets[e].push(ti);
            }
            tet_edges.push(te);
            tet_faces.push(LOCAL_FACES.map(|[a, b, c]| face_index[&[t[a], t[b], t[c]]]));
        }

        let boundary_faces: Vec<bool> = faces.iter().map(|f| face_count[f] == 1).collect();
        let mut boundary_edges = vec![false; edges.len()];
        for (f, [a, b, c]) in faces.iter().enumerate() {
            if boundary_faces[f] {
                for pair in [[*a, *b], [*b, *c], [*a, *c]] {
                    boundary_edges[edge_set[&pair]] = true;
                }
            }
        }

        let curl_rows = faces
            .iter()
            .map(|&[a, b, c]| {
                let mut row = vec![
                    (edge_set[&[a, b]], 1i8),
                    (edge_set[&[b, c]], 1i8),
                    (edge_set[&[a, c]], -1i8),
                ];
                row.sort_unstable();
                row
            })
            .collect();
        let grad_rows = edges.iter().map(|&[a, b]| vec![(a, -1i8), (b, 1i8)]).collect();

        Ok(Self {
            curl_incidence: Incidence {
                nrows: faces.len(),
                ncols: edges.len(),
                rows: curl_rows,
            },
            grad_incidence: Incidence {
                nrows: edges.len(),
                ncols: nv,
                rows: grad_rows,
            },
            vertices,
            tets: sorted_tets,
            materials,
            edges,
            faces,
            tet_edges,
            tet_faces,
            boundary_faces,
            boundary_edges,
            edge_lookup: edge_set,
            edge_tets,
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn n_tets(&self) -> usize {
        self.tets.len()
    }

    /// `V - E + F - T`; equals 1 for a mesh of a ball.
    pub fn euler_characteristic(&self) -> i64 {
        self.n_vertices() as i64 - self.n_edges() as i64 + self.n_faces() as i64
            - self.n_tets() as i64
    }

    pub fn geometry(&self, tet: usize) -> TetGeometry {
        TetGeometry::new(self.tets[tet].map(|v| self.vertices[v]))
            .expect("tetrahedra validated at construction")
    }

    pub fn edge_id(&self, a: usize, b: usize) -> Option<usize> {
        let key = if a < b { [a, b] } else { [b, a] };
        self.edge_lookup.get(&key).copied()
    }

    /// Tetrahedra containing edge `e`.
    pub fn tets_of_edge(&self, e: usize) -> &[usize] {
        &self.edge_tets[e]
    }

    pub fn edge_length(&self, e: usize) -> f64 {
        let [a, b] = self.edges[e];
        norm3(sub(self.vertices[b], self.vertices[a]))
    }

    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for d in 0..3 {
                lo[d] = lo[d].min(v[d]);
                hi[d] = hi[d].max(v[d]);
            }
        }
        (lo, hi)
    }

    /// Face-to-cell incidence (discrete divergence), `T x F`.
    pub fn div_incidence(&self) -> Incidence {
        // boundary of [a,b,c,d] = [b,c,d] - [a,c,d] + [a,b,d] - [a,b,c]
        const SIGNS: [i8; 4] = [-1, 1, -1, 1];
        let rows = self
            .tet_faces
            .iter()
            .map(|tf| {
                let mut row: Vec<(usize, i8)> =
                    tf.iter().zip(SIGNS).map(|(&f, s)| (f, s)).collect();
                row.sort_unstable();
                row
            })
            .collect();
        Incidence {
            nrows: self.n_tets(),
            ncols: self.n_faces(),
            rows,
        }
    }

    /// Edges whose endpoints both lie on the plane `x[axis] = value`.
    pub fn edges_on_plane(&self, axis: usize, value: f64, tol: f64) -> Vec<usize> {
        self.edges
            .iter()
            .enumerate()
            .filter(|(_, [a, b])| {
                (self.vertices[*a][axis] - value).abs() <= tol
                    && (self.vertices[*b][axis] - value).abs() <= tol
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// Smallest edge length; used to scale geometric tolerances.
    pub fn min_edge_length(&self) -> f64 {
        (0..self.n_edges())
            .map(|e| self.edge_length(e))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn nearest_vertex(&self, p: Vec3) -> Option<(usize, f64)> {
        self.vertices
            .iter()
            .enumerate()
            .map(|(i, v)| (i, norm3(sub(*v, p))))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// Structured box mesh: every hexahedral cell is split into the six
/// tetrahedra of the Kuhn subdivision, all sharing the cell diagonal from
/// its lowest to its highest corner.
pub fn build_box_mesh(nx: usize, ny: usize, nz: usize, dims: Vec3) -> Result<TetMesh> {
    if nx == 0 || ny == 0 || nz == 0 {
        return Err(invalid("box mesh cell counts must be at least 1"));
    }
    if dims.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
        return Err(invalid("box mesh dimensions must be positive"));
    }
    let n = [nx, ny, nz];
    let vid = |i: usize, j: usize, k: usize| i + (nx + 1) * (j + (ny + 1) * k);
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1) * (nz + 1));
    for k in 0..=nz {
        for j in 0..=ny {
            for i in 0..=nx {
                vertices.push([
                    dims[0] * i as f64 / n[0] as f64,
                    dims[1] * j as f64 / n[1] as f64,
                    dims[2] * k as f64 / n[2] as f64,
                ]);
            }
        }
    }
    const PERMS: [[usize; 3]; 6] = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    let mut tets = Vec::with_capacity(6 * nx * ny * nz);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                for perm in PERMS {
                    let mut c = [i, j, k];
                    let mut t = [vid(c[0], c[1], c[2]), 0, 0, 0];
                    for (step, axis) in perm.iter().enumerate() {
                        c[*axis] += 1;
                        t[step + 1] = vid(c[0], c[1], c[2]);
                    }
                    tets.push(t);
                }
            }
        }
    }
    let materials = vec![0; tets.len()];
    TetMesh::from_parts(vertices, tets, materials)
}

/// Returns `(curl_incidence, grad_incidence)` after checking that the
/// mesh is manifold and that `curl * grad` vanishes.
pub fn derive_incidence(mesh: &TetMesh) -> Result<(Incidence, Incidence)> {
    let mut face_tets = vec![0usize; mesh.n_faces()];
    for tf in &mesh.tet_faces {
        for &f in tf {
            face_tets[f] += 1;
        }
    }
    if let Some(f) = face_tets.iter().position(|&n| n > 2) {
        return Err(Error::Topology(format!("face {f} is shared by more than two tetrahedra")));
    }
    if mesh.curl_incidence.max_abs_product(&mesh.grad_incidence) != 0 {
        return Err(Error::Topology("curl * grad does not vanish".into()));
    }
    Ok((mesh.curl_incidence.clone(), mesh.grad_incidence.clone()))
}

/// Line integral of Whitney function `W1_j` along edge `i` in the direction
/// of edge `i`.
pub fn whitney_edge_line_integral(mesh: &TetMesh, edge_i: usize, edge_j: usize) -> Result<f64> {
    let ne = mesh.n_edges();
    if edge_i >= ne || edge_j >= ne {
        return Err(invalid(format!("edge id out of range (mesh has {ne} edges)")));
    }
    let shared = mesh
        .tets_of_edge(edge_i)
        .iter()
        .find(|t| mesh.tet_edges[**t].contains(&edge_j));
    let Some(&tet) = shared else {
        return Ok(0.0);
    };
    let geo = mesh.geometry(tet);
    let local_j = mesh.tet_edges[tet]
        .iter()
        .position(|&e| e == edge_j)
        .expect("edge in tet");
    let local_i = mesh.tet_edges[tet]
        .iter()
        .position(|&e| e == edge_i)
        .expect("edge in tet");
    let [a, b] = LOCAL_EDGES[local_i];
    let tangent = sub(geo.vertices[b], geo.vertices[a]);
    // the integrand is linear along the edge: the midpoint rule is exact
    let mut lambda = [0.0; 4];
    lambda[a] = 0.5;
    lambda[b] = 0.5;
    Ok(dot3(geo.w1(local_j, lambda), tangent))
}

/// A lumped port: a chain of mesh edges with orientation signs.
#[derive(Debug, Clone, PartialEq)]
pub struct PortSpec {
    pub id: usize,
    pub label: String,
    /// `(edge id, sign)`; sign is +1 when the edge's global orientation
    /// follows the port direction.
    pub edges: Vec<(usize, i8)>,
}

/// Finds the oriented chain of mesh edges lying on the segment `a -> b`.
pub fn resolve_port(mesh: &TetMesh, id: usize, label: &str, a: Vec3, b: Vec3) -> Result<PortSpec> {
    let snap = |p: Vec3| -> Result<usize> {
        match mesh.nearest_vertex(p) {
            Some((v, d)) if d <= SNAP_TOLERANCE => Ok(v),
            _ => Err(Error::PortResolution(format!(
                "endpoint {p:?} is not a mesh vertex within {SNAP_TOLERANCE} m"
            ))),
        }
    };
    let va = snap(a)?;
    let vb = snap(b)?;
    if va == vb {
        return Err(Error::PortResolution("port endpoints coincide".into()));
    }
    let pa = mesh.vertices[va];
    let dir = sub(mesh.vertices[vb], pa);
    let len2 = dot3(dir, dir);
    let tol = SNAP_TOLERANCE.max(1e-9 * len2.sqrt());
    let on_segment = |v: usize| {
        let rel = sub(mesh.vertices[v], pa);
        let s = dot3(rel, dir) / len2;
        let perp = sub(rel, scale3(dir, s));
        (-1e-12..=1.0 + 1e-12).contains(&s) && norm3(perp) <= tol
    };
    let param = |v: usize| dot3(sub(mesh.vertices[v], pa), dir) / len2;

    let mut neighbours: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for (e, &[p, q]) in mesh.edges.iter().enumerate() {
        if on_segment(p) && on_segment(q) {
            neighbours.entry(p).or_default().push((q, e));
            neighbours.entry(q).or_default().push((p, e));
        }
    }
    // breadth-first search moving monotonically along the segment
    let mut prev: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut queue = VecDeque::from([va]);
    while let Some(v) = queue.pop_front() {
        if v == vb {
            break;
        }
        for &(w, e) in neighbours.get(&v).map(Vec::as_slice).unwrap_or(&[]) {
            if w != va && !prev.contains_key(&w) && param(w) > param(v) {
                prev.insert(w, (v, e));
                queue.push_back(w);
            }
        }
    }
    if !prev.contains_key(&vb) {
        return Err(Error::PortResolution(format!(
            "no edge chain joins vertices {va} and {vb}"
        )));
    }
    let mut chain = Vec::new();
    let mut v = vb;
    while v != va {
        let (u, e) = prev[&v];
        let sign = if mesh.edges[e] == [u, v] { 1 } else { -1 };
        chain.push((e, sign));
        v = u;
    }
    chain.reverse();
    Ok(PortSpec {
        id,
        label: label.to_string(),
        edges: chain,
    })
}

/// Checks that port edges exist and that no edge belongs to two ports.
pub fn validate_ports(mesh: &TetMesh, ports: &[PortSpec]) -> Result<()> {
    let mut owner: BTreeMap<usize, usize> = BTreeMap::new();
    for p in ports {
        if p.edges.is_empty() {
            return Err(Error::PortResolution(format!("port {} has no edges", p.label)));
        }
        for &(e, s) in &p.edges {
            if e >= mesh.n_edges() || (s != 1 && s != -1) {
                return Err(Error::PortResolution(format!(
                    "port {} has invalid edge entry ({e}, {s})",
                    p.label
                )));
            }
            if let Some(other) = owner.insert(e, p.id) {
                return Err(Error::PortResolution(format!(
                    "edge {e} shared by ports {other} and {}",
                    p.id
                )));
            }
        }
    }
    Ok(())
}

/// Parses the ASCII mesh format: `tetmesh <V> <T>`, `V` lines of `x y z`,
/// then `T` lines of `v0 v1 v2 v3 material_id`.
pub fn parse_ascii_mesh(text: &str) -> Result<TetMesh> {
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let header = lines.next().ok_or_else(|| invalid("empty mesh file"))?;
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 3 || h[0] != "tetmesh" {
        return Err(invalid(format!("bad mesh header `{header}`")));
    }
    let nv: usize = h[1].parse().map_err(|_| invalid("bad vertex count"))?;
    let nt: usize = h[2].parse().map_err(|_| invalid("bad tet count"))?;
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let l = lines.next().ok_or_else(|| invalid("mesh file truncated in vertices"))?;
        let v: Vec<f64> = l
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| invalid(format!("bad vertex line `{l}`")))?;
        if v.len() != 3 {
            return Err(invalid(format!("vertex line `{l}` needs 3 coordinates")));
        }
        vertices.push([v[0], v[1], v[2]]);
    }
    let mut tets = Vec::with_capacity(nt);
    let mut materials = Vec::with_capacity(nt);
    for _ in 0..nt {
        let l = lines.next().ok_or_else(|| invalid("mesh file truncated in tets"))?;
        let v: Vec<usize> = l
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| invalid(format!("bad tet line `{l}`")))?;
        if v.len() != 5 {
            return Err(invalid(format!("tet line `{l}` needs 4 vertices and a material")));
        }
        tets.push([v[0], v[1], v[2], v[3]]);
        materials.push(v[4] as u32);
    }
    TetMesh::from_parts(vertices, tets, materials)
}

pub fn read_ascii_mesh(path: &Path) -> Result<TetMesh> {
    parse_ascii_mesh(&std::fs::read_to_string(path)?)
}

pub fn write_ascii_mesh(mesh: &TetMesh) -> String {
    let mut s = format!("tetmesh {} {}\n", mesh.n_vertices(), mesh.n_tets());
    for v in &mesh.vertices {
        s.push_str(&format!("{:.17e} {:.17e} {:.17e}\n", v[0], v[1], v[2]));
    }
    for (t, m) in mesh.tets.iter().zip(&mesh.materials) {
        s.push_str(&format!("{} {} {} {} {}\n", t[0], t[1], t[2], t[3], m));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_cube() -> TetMesh {
        build_box_mesh(1, 1, 1, [1.0, 1.0, 1.0]).unwrap()
    }

    #[test]
    fn unit_cube_counts() {
        let m = unit_cube();
        assert_eq!(
            (m.n_vertices(), m.n_edges(), m.n_faces(), m.n_tets()),
            (8, 19, 18, 6)
        );
        assert_eq!(m.euler_characteristic(), 1);
    }

    #[test]
    fn two_cell_counts() {
        let m = build_box_mesh(2, 1, 1, [2.0, 1.0, 1.0]).unwrap();
        assert_eq!(m.n_tets(), 12);
        assert_eq!(m.n_vertices(), 12);
        assert_eq!(m.euler_characteristic(), 1);
    }

    #[test]
    fn box_mesh_is_deterministic() {
        assert_eq!(unit_cube(), unit_cube());
    }

    #[test]
    fn box_mesh_rejects_bad_arguments() {
        assert!(matches!(
            build_box_mesh(0, 1, 1, [1.0; 3]),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            build_box_mesh(1, 1, 1, [1.0, -1.0, 1.0]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn single_tet_incidence_shape() {
        let m = TetMesh::from_parts(
            vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            vec![[0, 1, 2, 3]],
            vec![0],
        )
        .unwrap();
        let (curl, grad) = derive_incidence(&m).unwrap();
        assert_eq!((curl.nrows, curl.ncols), (4, 6));
        for row in &curl.rows {
            assert_eq!(row.len(), 3);
            assert!(row.iter().all(|(_, s)| s.abs() == 1));
        }
        assert_eq!((grad.nrows, grad.ncols), (6, 4));
    }

    #[test]
    fn unit_cube_incidence_shapes_and_exactness() {
        let m = unit_cube();
        let (curl, grad) = derive_incidence(&m).unwrap();
        assert_eq!((curl.nrows, curl.ncols), (18, 19));
        assert_eq!((grad.nrows, grad.ncols), (19, 8));
        assert_eq!(curl.max_abs_product(&grad), 0);
        assert_eq!(m.div_incidence().max_abs_product(&curl), 0);
    }

    #[test]
    fn non_manifold_mesh_rejected() {
        let v = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 0.0, -1.0],
            [0.3, 0.3, 0.8],
        ];
        let r = TetMesh::from_parts(v, vec![[0, 1, 2, 3], [0, 1, 2, 4], [0, 1, 2, 5]], vec![0; 3]);
        assert!(matches!(r, Err(Error::Topology(_))));
    }

    #[test]
    fn curl_of_edge_function_matches_face_expansion() {
        let geo = TetGeometry::new([
            [0.1, 0.0, 0.0],
            [1.0, 0.2, 0.0],
            [0.0, 1.1, 0.3],
            [0.2, 0.1, 0.9],
        ])
        .unwrap();
        let c = local_curl_incidence();
        for e in 0..6 {
            let curl = geo.curl_w1(e);
            for lambda in [[0.25; 4], [0.1, 0.2, 0.3, 0.4], [0.7, 0.1, 0.1, 0.1]] {
                let mut sum = [0.0; 3];
                for (f, row) in c.iter().enumerate() {
                    sum = add3(sum, scale3(geo.w2(f, lambda), f64::from(row[e])));
                }
                for d in 0..3 {
                    assert!((sum[d] - curl[d]).abs() < 1e-12 * (1.0 + curl[d].abs()));
                }
            }
        }
    }

    fn gauss5(f: impl Fn(f64) -> f64) -> f64 {
        // 5-point Gauss-Legendre on [0, 1]
        let nodes = [
            0.0,
            -0.538_469_310_105_683_1,
            0.538_469_310_105_683_1,
            -0.906_179_845_938_664,
            0.906_179_845_938_664,
        ];
        let weights = [
            0.568_888_888_888_888_9,
            0.478_628_670_499_366_5,
            0.478_628_670_499_366_5,
            0.236_926_885_056_189_1,
            0.236_926_885_056_189_1,
        ];
        nodes
            .iter()
            .zip(weights)
            .map(|(x, w)| 0.5 * w * f(0.5 * (x + 1.0)))
            .sum()
    }

    /// Oracle: integrate W1_j along edge i by pointwise evaluation.
    fn line_integral_oracle(m: &TetMesh, i: usize, j: usize) -> f64 {
        let Some(&tet) = m
            .tets_of_edge(i)
            .iter()
            .find(|t| m.tet_edges[**t].contains(&j))
        else {
            return 0.0;
        };
        let geo = m.geometry(tet);
        let lj = m.tet_edges[tet].iter().position(|&e| e == j).unwrap();
        let [a, b] = m.edges[i];
        let pa = m.vertices[a];
        let pb = m.vertices[b];
        let t = sub(pb, pa);
        gauss5(|s| {
            let x = add3(pa, scale3(t, s));
            dot3(geo.w1(lj, geo.barycentric(x)), t)
        })
    }

    #[test]
    fn whitney_line_integrals() {
        let m = build_box_mesh(2, 2, 1, [1.0, 0.7, 0.4]).unwrap();
        for i in 0..m.n_edges() {
            assert!((whitney_edge_line_integral(&m, i, i).unwrap() - 1.0).abs() < 1e-13);
        }
        let mut checked = 0;
        for i in 0..m.n_edges() {
            for j in 0..m.n_edges() {
                if i == j {
                    continue;
                }
                let v = whitney_edge_line_integral(&m, i, j).unwrap();
                let o = line_integral_oracle(&m, i, j);
                assert!((v - o).abs() < 1e-13, "edge {i}, {j}: {v} vs {o}");
                checked += 1;
            }
        }
        assert!(checked > 0);
        assert!(whitney_edge_line_integral(&m, 0, m.n_edges()).is_err());
    }

    #[test]
    fn constant_field_patch_test() {
        // interpolating a constant field by its edge circulations reproduces it
        let geo = TetGeometry::new([
            [0.0, 0.0, 0.0],
            [0.9, 0.1, 0.0],
            [0.2, 1.0, 0.1],
            [0.1, 0.3, 1.2],
        ])
        .unwrap();
        let field = [0.3, -1.2, 0.7];
        let dofs: Vec<f64> = LOCAL_EDGES
            .iter()
            .map(|[a, b]| dot3(field, sub(geo.vertices[*b], geo.vertices[*a])))
            .collect();
        for lambda in [[0.25; 4], [0.6, 0.1, 0.2, 0.1], [0.0, 0.0, 0.5, 0.5]] {
            let mut f = [0.0; 3];
            for (e, d) in dofs.iter().enumerate() {
                f = add3(f, scale3(geo.w1(e, lambda), *d));
            }
            for k in 0..3 {
                assert!((f[k] - field[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resolve_single_and_double_edge_ports() {
        let m = build_box_mesh(2, 2, 2, [1.0, 1.0, 1.0]).unwrap();
        let p = resolve_port(&m, 0, "p", [0.5, 0.5, 0.0], [0.5, 0.5, 0.5]).unwrap();
        assert_eq!(p.edges.len(), 1);
        assert_eq!(p.edges[0].1, 1);

        let rev = resolve_port(&m, 0, "p", [0.5, 0.5, 0.5], [0.5, 0.5, 0.0]).unwrap();
        assert_eq!(rev.edges[0], (p.edges[0].0, -1));

        let two = resolve_port(&m, 1, "q", [0.0, 0.5, 0.0], [1.0, 0.5, 0.0]).unwrap();
        assert_eq!(two.edges.len(), 2);
        assert!(two.edges.iter().all(|&(_, s)| s == 1));
        let [a, b] = m.edges[two.edges[0].0];
        let [c, _] = m.edges[two.edges[1].0];
        assert_eq!(m.vertices[a], [0.0, 0.5, 0.0]);
        assert_eq!(b, c);
    }

    #[test]
    fn resolve_port_off_mesh_fails() {
        let m = build_box_mesh(2, 2, 2, [1.0, 1.0, 1.0]).unwrap();
        assert!(matches!(
            resolve_port(&m, 0, "p", [0.5, 0.5, 0.0], [0.5, 0.5, 0.3]),
            Err(Error::PortResolution(_))
        ));
    }

    #[test]
    fn overlapping_ports_rejected() {
        let m = build_box_mesh(2, 2, 2, [1.0, 1.0, 1.0]).unwrap();
        let p = resolve_port(&m, 0, "a", [0.5, 0.5, 0.0], [0.5, 0.5, 0.5]).unwrap();
        let mut q = p.clone();
        q.id = 1;
        assert!(validate_ports(&m, &[p.clone()]).is_ok());
        assert!(validate_ports(&m, &[p, q]).is_err());
    }

    #[test]
    fn ascii_round_trip() {
        let m = build_box_mesh(2, 1, 1, [1.0, 0.5, 0.5]).unwrap();
        let back = parse_ascii_mesh(&write_ascii_mesh(&m)).unwrap();
        assert_eq!(m, back);
        assert!(parse_ascii_mesh("tetmesh 1 1\n0 0 0\n").is_err());
    }
}
