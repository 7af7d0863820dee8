//! Mixed E-B finite-element system and its implicit time marching.
//!
//! Semi-discrete equations (edge coefficients `e`, face coefficients `b`,
//! edge-space load `f`):
//!
//! ```text
//! M_e de/dt = C^T M_f b + f
//!     db/dt = -C e
//! ```
//!
//! Each step applies the trapezoidal (average-acceleration) map, which is
//! Newmark with gamma = 1/2, beta = 1/4 written for the first-order pair.
//! Eliminating `b_{n+1}` leaves one SPD solve per step:
//!
//! ```text
//! (M_e/dt + dt/4 K) e1 = (M_e/dt - dt/4 K) e0 + C^T M_f b0 + (f0 + f1)/2,   K = C^T M_f C
//! b1 = b0 - dt/2 C (e0 + e1)
//! ```

use crate::error::{invalid, Error, Result};
use crate::mesh::{local_curl_incidence, TetGeometry, TetMesh, LOCAL_EDGES, LOCAL_FACES};
use crate::pml::{ConvolutionState, PmlOperator, StretchProfile};
use crate::solver::{gmres_solve_with, GmresConfig, JacobiPreconditioner, SparseMatrix};

pub const EPS0: f64 = 8.854_187_812_8e-12;
pub const MU0: f64 = 1.256_637_062_12e-6;
pub const C0: f64 = 299_792_458.0;

/// Relative material constants of one material id.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Material {
    pub eps_r: f64,
    pub mu_r: f64,
}

impl Default for Material {
    fn default() -> Self {
        Self {
            eps_r: 1.0,
            mu_r: 1.0,
        }
    }
}

/// Integral of `lambda_p lambda_q` over a tetrahedron of unit volume.
fn lambda_product(p: usize, q: usize) -> f64 {
    if p == q {
        0.1
    } else {
        0.05
    }
}

fn directional_mass<const N: usize>(coefs: &[[[f64; 3]; 4]; N], volume: f64) -> [[[f64; N]; N]; 3] {
    let mut m = [[[0.0; N]; N]; 3];
    for d in 0..3 {
        for i in 0..N {
            for j in i..N {
                let mut acc = 0.0;
                for p in 0..4 {
                    for q in 0..4 {
                        acc += coefs[i][p][d] * coefs[j][q][d] * lambda_product(p, q);
                    }
                }
                m[d][i][j] = acc * volume;
                m[d][j][i] = acc * volume;
            }
        }
    }
    m
}

/// `int W1_i,d W1_j,d dV` for each Cartesian direction `d` (unit material).
pub fn local_edge_mass_by_direction(geo: &TetGeometry) -> [[[f64; 6]; 6]; 3] {
    let coefs: [[[f64; 3]; 4]; 6] = std::array::from_fn(|e| geo.w1_coefficients(e));
    directional_mass(&coefs, geo.volume)
}

/// `int W2_i,d W2_j,d dV` for each Cartesian direction `d` (unit material).
pub fn local_face_mass_by_direction(geo: &TetGeometry) -> [[[f64; 4]; 4]; 3] {
    let coefs: [[[f64; 3]; 4]; 4] = std::array::from_fn(|f| geo.w2_coefficients(f));
    directional_mass(&coefs, geo.volume)
}

fn sum_directions<const N: usize>(m: &[[[f64; N]; N]; 3]) -> [[f64; N]; N] {
    let mut out = [[0.0; N]; N];
    for d in m {
        for i in 0..N {
            for j in 0..N {
                out[i][j] += d[i][j];
            }
        }
    }
    out
}

pub fn local_edge_mass(geo: &TetGeometry) -> [[f64; 6]; 6] {
    sum_directions(&local_edge_mass_by_direction(geo))
}

pub fn local_face_mass(geo: &TetGeometry) -> [[f64; 4]; 4] {
    sum_directions(&local_face_mass_by_direction(geo))
}

/// `C_loc^T M C_loc` for a local face matrix.
pub fn local_curl_curl(face_matrix: &[[f64; 4]; 4]) -> [[f64; 6]; 6] {
    let c = local_curl_incidence();
    let mut k = [[0.0; 6]; 6];
    for i in 0..6 {
        for j in 0..6 {
            let mut acc = 0.0;
            for f in 0..4 {
                if c[f][i] == 0 {
                    continue;
                }
                for g in 0..4 {
                    acc += f64::from(c[f][i]) * face_matrix[f][g] * f64::from(c[g][j]);
                }
            }
            k[i][j] = acc;
        }
    }
    k
}

fn is_positive_definite<const N: usize>(m: &[[f64; N]; N]) -> bool {
    let mat = nalgebra::SMatrix::<f64, N, N>::from_fn(|i, j| m[i][j]);
    mat.cholesky().is_some()
}

/// Assembled mixed FEM operators.
#[derive(Debug, Clone)]
pub struct MixedSystem {
    pub n_edges: usize,
    pub n_faces: usize,
    /// Permittivity-weighted edge mass; PEC rows and columns replaced by identity.
    pub mass_e: SparseMatrix,
    /// Inverse-permeability-weighted face mass.
    pub mass_f: SparseMatrix,
    /// Curl incidence (faces x edges).
    pub curl: SparseMatrix,
    /// `C^T M_f C`, PEC rows and columns removed.
    pub stiffness: SparseMatrix,
    /// `C^T M_f` with PEC rows zeroed.
    pub curl_t_mass_f: SparseMatrix,
    pub pec: Vec<bool>,
    pub materials: Vec<Material>,
}

impl MixedSystem {
    pub fn free_edges(&self) -> usize {
        self.pec.iter().filter(|p| !**p).count()
    }
}

fn eliminate(m: &SparseMatrix, pec: &[bool], diag: f64) -> SparseMatrix {
    let mut t: Vec<_> = m
        .triplets()
        .into_iter()
        .filter(|(r, c, _)| !pec[*r] && !pec[*c])
        .collect();
    t.extend(
        pec.iter()
            .enumerate()
            .filter(|(_, p)| **p)
            .map(|(i, _)| (i, i, diag)),
    );
    SparseMatrix::from_triplets(m.nrows(), m.ncols(), &t).expect("indices unchanged")
}

/// Assembles edge/face mass matrices and the curl-curl operator.
pub fn assemble_mixed_system(
    mesh: &TetMesh,
    materials: &[Material],
    pec: &[bool],
) -> Result<MixedSystem> {
    if pec.len() != mesh.n_edges() {
        return Err(invalid("PEC mask length must equal the number of edges"));
    }
    for (i, m) in materials.iter().enumerate() {
        if !(m.eps_r > 0.0 && m.mu_r > 0.0) || !m.eps_r.is_finite() || !m.mu_r.is_finite() {
            return Err(invalid(format!("material {i} has non-positive eps_r or mu_r")));
        }
    }
    let mut te = Vec::with_capacity(36 * mesh.n_tets());
    let mut tf = Vec::with_capacity(16 * mesh.n_tets());
    for (t, &mat_id) in mesh.materials.iter().enumerate() {
        let mat = materials.get(mat_id as usize).ok_or_else(|| {
            invalid(format!("tetrahedron {t} uses undefined material {mat_id}"))
        })?;
        let geo = mesh.geometry(t);
        let me = local_edge_mass(&geo);
        let mf = local_face_mass(&geo);
        if !is_positive_definite(&me) || !is_positive_definite(&mf) {
            return Err(Error::Assembly(format!(
                "local mass matrix of tetrahedron {t} is not positive definite"
            )));
        }
        let eps = EPS0 * mat.eps_r;
        let inv_mu = 1.0 / (MU0 * mat.mu_r);
        let edges = mesh.tet_edges[t];
        let faces = mesh.tet_faces[t];
        for i in 0..6 {
            for j in 0..6 {
                te.push((edges[i], edges[j], eps * me[i][j]));
            }
        }
        for i in 0..4 {
            for j in 0..4 {
                tf.push((faces[i], faces[j], inv_mu * mf[i][j]));
            }
        }
    }
    let ne = mesh.n_edges();
    let nf = mesh.n_faces();
    let mass_e_raw = SparseMatrix::from_triplets(ne, ne, &te)?;
    let mass_f = SparseMatrix::from_triplets(nf, nf, &tf)?;
    let curl = mesh.curl_incidence.to_sparse();
    let ct_mf = curl.transpose().matmul(&mass_f)?;
    let stiffness_raw = ct_mf.matmul(&curl)?;

    let mass_e = eliminate(&mass_e_raw, pec, 1.0);
    for (i, d) in mass_e.diagonal().iter().enumerate() {
        if !(*d > 0.0) {
            return Err(Error::Assembly(format!("edge mass diagonal {i} not positive")));
        }
    }
    let stiffness = eliminate(&stiffness_raw, pec, 0.0);
    let ct_t: Vec<_> = ct_mf
        .triplets()
        .into_iter()
        .filter(|(r, _, _)| !pec[*r])
        .collect();
    let curl_t_mass_f = SparseMatrix::from_triplets(ne, nf, &ct_t)?;

    Ok(MixedSystem {
        n_edges: ne,
        n_faces: nf,
        mass_e,
        mass_f,
        curl,
        stiffness,
        curl_t_mass_f,
        pec: pec.to_vec(),
        materials: materials.to_vec(),
    })
}

/// PEC mask marking every boundary edge of the mesh.
pub fn boundary_pec_mask(mesh: &TetMesh) -> Vec<bool> {
    mesh.boundary_edges.clone()
}

/// PEC mask for selected faces of the mesh bounding box. Face ids are
/// `2 * axis + side` with side 0 for the lower plane.
pub fn box_face_pec_mask(mesh: &TetMesh, faces: &[usize]) -> Vec<bool> {
    let (lo, hi) = mesh.bounding_box();
    let tol = 1e-9 * mesh.min_edge_length().max(1e-300);
    let mut mask = vec![false; mesh.n_edges()];
    for &f in faces {
        let axis = f / 2;
        let value = if f % 2 == 0 { lo[axis] } else { hi[axis] };
        for e in mesh.edges_on_plane(axis, value, tol) {
            mask[e] = true;
        }
    }
    mask
}

/// Temporal basis of the marching scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeBasis {
    pub dt: f64,
    pub gamma: f64,
    pub beta: f64,
}

impl TimeBasis {
    pub fn new(dt: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(invalid("time step must be positive"));
        }
        Ok(Self {
            dt,
            gamma: 0.5,
            beta: 0.25,
        })
    }

    /// Piecewise-linear hat `N(t)` centred at 0 with support `[-dt, dt]`.
    pub fn hat(&self, t: f64) -> f64 {
        (1.0 - (t / self.dt).abs()).max(0.0)
    }

    pub fn descriptor(&self) -> &'static str {
        "hat/trapezoidal newmark gamma=0.5 beta=0.25"
    }
}

/// Field coefficients at one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldState {
    pub e: Vec<f64>,
    pub b: Vec<f64>,
    /// Edge-space load applied at this step.
    pub load: Vec<f64>,
    pub step: usize,
    pub pml: Option<ConvolutionState>,
}

/// Linear solve statistics of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepStats {
    pub gmres_iterations: usize,
    pub residual: f64,
}

/// Precomputed step operators for a fixed time step.
#[derive(Debug, Clone)]
pub struct Stepper {
    pub basis: TimeBasis,
    matrix: SparseMatrix,
    explicit: SparseMatrix,
    curl: SparseMatrix,
    curl_t_mass_f: SparseMatrix,
    pec: Vec<bool>,
    pml: Option<PmlOperator>,
    precond: JacobiPreconditioner,
    n_faces: usize,
}

impl Stepper {
    pub fn new(system: &MixedSystem, dt: f64) -> Result<Self> {
        Self::build(system, dt, None)
    }

    /// Stepper with stretched-coordinate absorbing layers; `profile` supplies
    /// per-tetrahedron conductivities.
    pub fn with_pml(
        system: &MixedSystem,
        mesh: &TetMesh,
        profile: &StretchProfile,
        dt: f64,
    ) -> Result<Self> {
        let op = PmlOperator::new(mesh, system, profile, dt)?;
        Self::build(system, dt, if op.is_empty() { None } else { Some(op) })
    }

    fn build(system: &MixedSystem, dt: f64, pml: Option<PmlOperator>) -> Result<Self> {
        let basis = TimeBasis::new(dt)?;
        let m_dt = system.mass_e.scaled(1.0 / dt);
        let mut matrix = m_dt.add_scaled(&system.stiffness, dt / 4.0)?;
        let mut explicit = m_dt.add_scaled(&system.stiffness, -dt / 4.0)?;
        // PEC rows of the explicit operator must vanish
        let t: Vec<_> = explicit
            .triplets()
            .into_iter()
            .filter(|(r, _, _)| !system.pec[*r])
            .collect();
        explicit = SparseMatrix::from_triplets(system.n_edges, system.n_edges, &t)?;
        if let Some(op) = &pml {
            let extra = SparseMatrix::from_triplets(
                system.n_edges,
                system.n_edges,
                &op.matrix_triplets(&system.pec),
            )?;
            matrix = matrix.add_scaled(&extra, 1.0)?;
        }
        let precond = JacobiPreconditioner::new(&matrix);
        Ok(Self {
            basis,
            matrix,
            explicit,
            curl: system.curl.clone(),
            curl_t_mass_f: system.curl_t_mass_f.clone(),
            pec: system.pec.clone(),
            pml,
            precond,
            n_faces: system.n_faces,
        })
    }

    pub fn dt(&self) -> f64 {
        self.basis.dt
    }

    pub fn n_edges(&self) -> usize {
        self.pec.len()
    }

    pub fn n_faces(&self) -> usize {
        self.n_faces
    }

    pub fn pec(&self) -> &[bool] {
        &self.pec
    }

    /// System matrix of the implicit update for `e_{n+1}`.
    pub fn matrix(&self) -> &SparseMatrix {
        &self.matrix
    }

    pub fn preconditioner(&self) -> &JacobiPreconditioner {
        &self.precond
    }

    pub fn has_pml(&self) -> bool {
        self.pml.is_some()
    }

    /// Zero fields, zero load.
    pub fn initial_state(&self) -> FieldState {
        FieldState {
            e: vec![0.0; self.n_edges()],
            b: vec![0.0; self.n_faces],
            load: vec![0.0; self.n_edges()],
            step: 0,
            pml: self.pml.as_ref().map(PmlOperator::initial_state),
        }
    }

    /// State with prescribed initial fields; PEC entries are forced to zero.
    pub fn state_from(&self, mut e: Vec<f64>, b: Vec<f64>) -> Result<FieldState> {
        if e.len() != self.n_edges() || b.len() != self.n_faces {
            return Err(invalid("initial field lengths do not match the mesh"));
        }
        for (v, p) in e.iter_mut().zip(&self.pec) {
            if *p {
                *v = 0.0;
            }
        }
        let mut s = self.initial_state();
        s.e = e;
        s.b = b;
        Ok(s)
    }

    /// Right-hand side of the implicit update excluding the new load's half.
    pub fn history_rhs(&self, state: &FieldState) -> Vec<f64> {
        let n = self.n_edges();
        let mut rhs = vec![0.0; n];
        self.explicit.mul_into(&state.e, &mut rhs);
        let mut tmp = vec![0.0; n];
        self.curl_t_mass_f.mul_into(&state.b, &mut tmp);
        for i in 0..n {
            rhs[i] += tmp[i] + 0.5 * state.load[i];
        }
        if let (Some(op), Some(acc)) = (&self.pml, &state.pml) {
            op.add_history_rhs(acc, &state.e, &state.b, &mut rhs);
        }
        for (r, p) in rhs.iter_mut().zip(&self.pec) {
            if *p {
                *r = 0.0;
            }
        }
        rhs
    }

    /// Completes the step once `e_new` is known.
    pub fn finish(&self, state: &FieldState, e_new: Vec<f64>, load_new: Vec<f64>) -> FieldState {
        let mut sum = state.e.clone();
        for (s, v) in sum.iter_mut().zip(&e_new) {
            *s += v;
        }
        let mut ce = vec![0.0; self.n_faces];
        self.curl.mul_into(&sum, &mut ce);
        let half_dt = 0.5 * self.basis.dt;
        let b_new: Vec<f64> = state
            .b
            .iter()
            .zip(&ce)
            .map(|(b, c)| b - half_dt * c)
            .collect();
        let pml = match (&self.pml, &state.pml) {
            (Some(op), Some(acc)) => Some(op.advance(acc, &state.e, &e_new, &state.b, &b_new)),
            _ => None,
        };
        FieldState {
            e: e_new,
            b: b_new,
            load: load_new,
            step: state.step + 1,
            pml,
        }
    }

    /// One full step with the given edge-space load at the new time level.
    pub fn step(
        &self,
        state: &FieldState,
        load_new: &[f64],
        gmres: &GmresConfig,
    ) -> Result<(FieldState, StepStats)> {
        if load_new.len() != self.n_edges() {
            return Err(invalid("load vector length does not match the number of edges"));
        }
        let mut rhs = self.history_rhs(state);
        for ((r, l), p) in rhs.iter_mut().zip(load_new).zip(&self.pec) {
            if !*p {
                *r += 0.5 * l;
            }
        }
        let out = if gmres.jacobi {
            gmres_solve_with(&self.matrix, &rhs, Some(&state.e), gmres, &self.precond)?
        } else {
            gmres_solve_with(
                &self.matrix,
                &rhs,
                Some(&state.e),
                gmres,
                &crate::solver::IdentityPreconditioner,
            )?
        };
        let stats = StepStats {
            gmres_iterations: out.iterations,
            residual: out.residual,
        };
        Ok((self.finish(state, out.x, load_new.to_vec()), stats))
    }
}

/// Advances `state` by one step under `load_new`.
pub fn step_fields(
    stepper: &Stepper,
    state: &FieldState,
    load_new: &[f64],
    gmres: &GmresConfig,
) -> Result<FieldState> {
    stepper.step(state, load_new, gmres).map(|(s, _)| s)
}

/// `1/2 (e^T M_e e + b^T M_f b)` in joules.
pub fn field_energy(system: &MixedSystem, state: &FieldState) -> f64 {
    let quad = |m: &SparseMatrix, x: &[f64]| {
        let mut y = vec![0.0; x.len()];
        m.mul_into(x, &mut y);
        x.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>()
    };
    0.5 * (quad(&system.mass_e, &state.e) + quad(&system.mass_f, &state.b))
}

/// Edge coefficients of a smooth field: line integrals by 4-point Gauss.
pub fn interpolate_edge_field(mesh: &TetMesh, field: impl Fn([f64; 3]) -> [f64; 3]) -> Vec<f64> {
    const X: [f64; 4] = [
        0.069_431_844_202_973_71,
        0.330_009_478_207_571_9,
        0.669_990_521_792_428_1,
        0.930_568_155_797_026_3,
    ];
    const W: [f64; 4] = [
        0.173_927_422_568_726_9,
        0.326_072_577_431_273_1,
        0.326_072_577_431_273_1,
        0.173_927_422_568_726_9,
    ];
    mesh.edges
        .iter()
        .map(|&[a, b]| {
            let pa = mesh.vertices[a];
            let pb = mesh.vertices[b];
            let t = [pb[0] - pa[0], pb[1] - pa[1], pb[2] - pa[2]];
            X.iter()
                .zip(W)
                .map(|(s, w)| {
                    let x = [pa[0] + s * t[0], pa[1] + s * t[1], pa[2] + s * t[2]];
                    let f = field(x);
                    w * (f[0] * t[0] + f[1] * t[1] + f[2] * t[2])
                })
                .sum()
        })
        .collect()
}

/// Local edge and face index tables, exposed for diagnostics.
pub fn local_tables() -> ([[usize; 2]; 6], [[usize; 3]; 4]) {
    (LOCAL_EDGES, LOCAL_FACES)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_box_mesh;

    fn regular_tet() -> TetGeometry {
        let s = 1.0 / 2f64.sqrt();
        TetGeometry::new([
            [1.0, 0.0, -s],
            [-1.0, 0.0, -s],
            [0.0, 1.0, s],
            [0.0, -1.0, s],
        ])
        .unwrap()
    }

    // 4-point degree-2 rule, independent of the closed-form lambda products
    // used in assembly.
    fn quadrature_points() -> Vec<([f64; 4], f64)> {
        let a = 0.585_410_196_624_968_5;
        let b = 0.138_196_601_125_010_5;
        (0..4)
            .map(|i| {
                let mut l = [b; 4];
                l[i] = a;
                (l, 0.25)
            })
            .collect()
    }

    #[test]
    fn edge_mass_matches_quadrature() {
        let geo = regular_tet();
        let me = local_edge_mass(&geo);
        for i in 0..6 {
            for j in 0..6 {
                let q: f64 = quadrature_points()
                    .iter()
                    .map(|(l, w)| {
                        let a = geo.w1(i, *l);
                        let b = geo.w1(j, *l);
                        w * geo.volume * (a[0] * b[0] + a[1] * b[1] + a[2] * b[2])
                    })
                    .sum();
                assert!((me[i][j] - q).abs() < 1e-13, "{i},{j}: {} vs {q}", me[i][j]);
            }
        }
    }

    #[test]
    fn face_mass_matches_quadrature_and_curl_curl() {
        let geo = regular_tet();
        let mf = local_face_mass(&geo);
        for i in 0..4 {
            for j in 0..4 {
                let q: f64 = quadrature_points()
                    .iter()
                    .map(|(l, w)| {
                        let a = geo.w2(i, *l);
                        let b = geo.w2(j, *l);
                        w * geo.volume * (a[0] * b[0] + a[1] * b[1] + a[2] * b[2])
                    })
                    .sum();
                assert!((mf[i][j] - q).abs() < 1e-13);
            }
        }
        let k = local_curl_curl(&mf);
        for i in 0..6 {
            for j in 0..6 {
                let ci = geo.curl_w1(i);
                let cj = geo.curl_w1(j);
                let direct = geo.volume * (ci[0] * cj[0] + ci[1] * cj[1] + ci[2] * cj[2]);
                assert!((k[i][j] - direct).abs() < 1e-12 * (1.0 + direct.abs()));
            }
        }
    }

    #[test]
    fn mass_linear_in_permittivity() {
        let mesh = build_box_mesh(2, 2, 2, [1.0; 3]).unwrap();
        let pec = vec![false; mesh.n_edges()];
        let s1 = assemble_mixed_system(&mesh, &[Material::default()], &pec).unwrap();
        let s2 = assemble_mixed_system(
            &mesh,
            &[Material {
                eps_r: 2.0,
                mu_r: 1.0,
            }],
            &pec,
        )
        .unwrap();
        for ((r, c, v), (r2, c2, v2)) in s1.mass_e.triplets().iter().zip(s2.mass_e.triplets()) {
            assert_eq!((*r, *c), (r2, c2));
            assert_eq!(2.0 * v, v2);
        }
    }

    #[test]
    fn pec_masking_counts_interior_edges() {
        let mesh = build_box_mesh(3, 3, 3, [1.0; 3]).unwrap();
        let pec = boundary_pec_mask(&mesh);
        let sys = assemble_mixed_system(&mesh, &[Material::default()], &pec).unwrap();
        let boundary = pec.iter().filter(|p| **p).count();
        assert_eq!(sys.free_edges(), mesh.n_edges() - boundary);
        // 3x3x3 box: interior edges by direct enumeration
        let interior = mesh
            .edges
            .iter()
            .filter(|[a, b]| {
                let on_face = |d: usize, v: f64| {
                    (mesh.vertices[*a][d] - v).abs() < 1e-12 && (mesh.vertices[*b][d] - v).abs() < 1e-12
                };
                !(0..3).any(|d| on_face(d, 0.0) || on_face(d, 1.0))
            })
            .count();
        assert_eq!(sys.free_edges(), interior);
        assert_eq!(box_face_pec_mask(&mesh, &[0, 1, 2, 3, 4, 5]), pec);
    }

    #[test]
    fn rejects_bad_materials() {
        let mesh = build_box_mesh(1, 1, 1, [1.0; 3]).unwrap();
        let pec = vec![false; mesh.n_edges()];
        let bad = Material {
            eps_r: 0.0,
            mu_r: 1.0,
        };
        assert!(assemble_mixed_system(&mesh, &[bad], &pec).is_err());
        assert!(assemble_mixed_system(&mesh, &[], &pec).is_err());
    }

    #[test]
    fn energy_is_quadratic_and_zero_at_rest() {
        let mesh = build_box_mesh(2, 2, 2, [1.0; 3]).unwrap();
        let sys = assemble_mixed_system(&mesh, &[Material::default()], &boundary_pec_mask(&mesh))
            .unwrap();
        let st = Stepper::new(&sys, 1e-10).unwrap();
        let s0 = st.initial_state();
        assert_eq!(field_energy(&sys, &s0), 0.0);
        let e = interpolate_edge_field(&mesh, |x| [x[1] * (1.0 - x[1]), 0.3, x[0]]);
        let b: Vec<f64> = (0..sys.n_faces).map(|i| (i as f64 * 0.37).sin() * 1e-9).collect();
        let s1 = st.state_from(e.clone(), b.clone()).unwrap();
        let s2 = st
            .state_from(e.iter().map(|v| 2.0 * v).collect(), b.iter().map(|v| 2.0 * v).collect())
            .unwrap();
        let w1 = field_energy(&sys, &s1);
        let w2 = field_energy(&sys, &s2);
        assert!(w1 > 0.0);
        assert!((w2 - 4.0 * w1).abs() <= 1e-14 * w2);

        // explicit double loop over the stored entries
        let me = sys.mass_e.to_dense();
        let mf = sys.mass_f.to_dense();
        let mut acc = 0.0;
        for i in 0..sys.n_edges {
            for j in 0..sys.n_edges {
                acc += s1.e[i] * me[i][j] * s1.e[j];
            }
        }
        for i in 0..sys.n_faces {
            for j in 0..sys.n_faces {
                acc += s1.b[i] * mf[i][j] * s1.b[j];
            }
        }
        assert!((0.5 * acc - w1).abs() <= 1e-14 * w1);
    }

    #[test]
    fn zero_state_stays_zero() {
        let mesh = build_box_mesh(2, 2, 2, [1.0; 3]).unwrap();
        let sys = assemble_mixed_system(&mesh, &[Material::default()], &boundary_pec_mask(&mesh))
            .unwrap();
        let st = Stepper::new(&sys, 1e-10).unwrap();
        let mut s = st.initial_state();
        let zero = vec![0.0; sys.n_edges];
        for _ in 0..20 {
            s = step_fields(&st, &s, &zero, &GmresConfig::default()).unwrap();
        }
        assert!(s.e.iter().chain(&s.b).all(|v| *v == 0.0));
        assert_eq!(s.step, 20);
    }

    #[test]
    fn gradient_field_produces_no_flux() {
        let mesh = build_box_mesh(3, 3, 3, [1.0; 3]).unwrap();
        let pec = boundary_pec_mask(&mesh);
        let sys = assemble_mixed_system(&mesh, &[Material::default()], &pec).unwrap();
        let st = Stepper::new(&sys, 2e-10).unwrap();
        // nodal potential vanishing on the boundary
        let psi: Vec<f64> = mesh
            .vertices
            .iter()
            .map(|v| (0..3).map(|d| v[d] * (1.0 - v[d])).product::<f64>())
            .collect();
        let grad = mesh.grad_incidence.to_sparse();
        let e = crate::solver::spmv(&grad, &psi).unwrap();
        let mut s = st.state_from(e.clone(), vec![0.0; sys.n_faces]).unwrap();
        let zero = vec![0.0; sys.n_edges];
        for _ in 0..10 {
            s = step_fields(&st, &s, &zero, &GmresConfig::default()).unwrap();
        }
        let scale = e.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let bmax = s.b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(bmax < 1e-20 * scale.max(1.0), "b = {bmax}");
        for (a, b) in s.e.iter().zip(&e) {
            assert!((a - b).abs() < 1e-10 * scale);
        }
    }
}
