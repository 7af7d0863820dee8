//! EM/circuit interface: port coupling coefficients, current impression,
//! voltage readback and the fully coupled marching loop.

use std::fmt::Write as _;
#[cfg(not(target_arch = "wasm32"))]
use std::time::Instant;
#[cfg(target_arch = "wasm32")]
use web_time::Instant;

use nalgebra::DMatrix;

use crate::circuit::{MnaSystem, PortClosure};
use crate::emfem::{FieldState, Stepper};
use crate::error::{invalid, Error, Result};
use crate::mesh::{whitney_edge_line_integral, PortSpec, TetMesh};
use crate::solver::{gmres_solve_with, GmresConfig, Preconditioner, SparseMatrix};

/// Coupling coefficients of one port.
#[derive(Debug, Clone, PartialEq)]
pub struct PortCoupling {
    pub id: usize,
    pub label: String,
    /// `(edge, C_kq)`; positive current flows along the port direction.
    pub edges: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingMap {
    pub n_edges: usize,
    pub ports: Vec<PortCoupling>,
}

/// Coefficients from the Whitney line integrals over each port edge; `pec`
/// marks eliminated edges.
pub fn build_coupling(mesh: &TetMesh, ports: &[PortSpec], pec: &[bool]) -> Result<CouplingMap> {
    crate::mesh::validate_ports(mesh, ports)?;
    let mut out = Vec::with_capacity(ports.len());
    let mut sorted: Vec<&PortSpec> = ports.iter().collect();
    sorted.sort_by_key(|p| p.id);
    for (i, p) in sorted.iter().enumerate() {
        if p.id != i {
            return Err(Error::Config(format!(
                "port ids must be 0..{} without gaps",
                ports.len()
            )));
        }
        let mut edges = Vec::with_capacity(p.edges.len());
        for &(e, s) in &p.edges {
            if pec.get(e).copied().unwrap_or(false) {
                return Err(Error::Config(format!(
                    "port {} uses edge {e}, which lies on a PEC boundary",
                    p.label
                )));
            }
            let c = whitney_edge_line_integral(mesh, e, e)?;
            edges.push((e, f64::from(s) * c));
        }
        out.push(PortCoupling {
            id: p.id,
            label: p.label.clone(),
            edges,
        });
    }
    Ok(CouplingMap {
        n_edges: mesh.n_edges(),
        ports: out,
    })
}

impl CouplingMap {
    pub fn n_ports(&self) -> usize {
        self.ports.len()
    }

    pub fn labels(&self) -> Vec<String> {
        self.ports.iter().map(|p| p.label.clone()).collect()
    }
}

/// Edge-space load `sum_q C_kq I_q`.
pub fn impress_current(map: &CouplingMap, currents: &[f64]) -> Vec<f64> {
    let mut load = vec![0.0; map.n_edges];
    for (p, i) in map.ports.iter().zip(currents) {
        for &(e, c) in &p.edges {
            load[e] += c * i;
        }
    }
    load
}

/// `V_q = sum_k C_qk e_k`.
pub fn read_port_voltage(map: &CouplingMap, e: &[f64]) -> Vec<f64> {
    map.ports
        .iter()
        .map(|p| p.edges.iter().map(|&(k, c)| c * e[k]).sum())
        .collect()
}

/// Port quantities of one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub time: f64,
    pub v: Vec<f64>,
    pub i: Vec<f64>,
    pub newton_iters: usize,
    pub gmres_iters: usize,
    /// Wall-clock seconds spent on the step (not written to CSV).
    pub wall: f64,
}

/// Port waveforms of a transient run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PortWaveforms {
    pub records: Vec<StepRecord>,
}

impl PortWaveforms {
    pub fn n_ports(&self) -> usize {
        self.records.first().map_or(0, |r| r.v.len())
    }

    /// `step, time_s, port_id, V, I, newton_iters, gmres_iters`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,time_s,port_id,V,I,newton_iters,gmres_iters\n");
        for r in &self.records {
            for q in 0..r.v.len() {
                let _ = writeln!(
                    s,
                    "{},{:.17e},{},{:.17e},{:.17e},{},{}",
                    r.step, r.time, q, r.v[q], r.i[q], r.newton_iters, r.gmres_iters
                );
            }
        }
        s
    }

    /// Voltage samples of port `q`.
    pub fn voltage(&self, q: usize) -> Vec<f64> {
        self.records.iter().map(|r| r.v[q]).collect()
    }

    pub fn current(&self, q: usize) -> Vec<f64> {
        self.records.iter().map(|r| r.i[q]).collect()
    }

    pub fn mean_newton(&self) -> f64 {
        mean(self.records.iter().skip(1).map(|r| r.newton_iters as f64))
    }

    pub fn mean_gmres(&self) -> f64 {
        mean(self.records.iter().skip(1).map(|r| r.gmres_iters as f64))
    }

    pub fn mean_wall(&self) -> f64 {
        mean(self.records.iter().skip(1).map(|r| r.wall))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// `||a - b||_2 / ||b||_2` over all port voltages.
pub fn relative_l2(a: &PortWaveforms, b: &PortWaveforms) -> Result<f64> {
    if a.records.len() != b.records.len() || a.n_ports() != b.n_ports() {
        return Err(invalid("waveforms have different shapes"));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (ra, rb) in a.records.iter().zip(&b.records) {
        for (va, vb) in ra.v.iter().zip(&rb.v) {
            num += (va - vb) * (va - vb);
            den += vb * vb;
        }
    }
    if den == 0.0 {
        return Ok(if num == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok((num / den).sqrt())
}

/// Nonlinear iteration settings of the coupled solve.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledConfig {
    pub gmres: GmresConfig,
    pub max_newton: usize,
    /// Target for the scaled joint residual; the linear solves limit what is
    /// reachable to about 100x the GMRES tolerance.
    pub tol: f64,
    pub max_halvings: usize,
}

impl Default for CoupledConfig {
    fn default() -> Self {
        Self {
            gmres: GmresConfig::default(),
            max_newton: 50,
            tol: 1e-12,
            max_halvings: 4,
        }
    }
}

/// Jacobi on the EM rows, dense LU on the circuit rows.
struct BlockPreconditioner {
    inv_diag: Vec<f64>,
    circuit: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    circuit_diag: Vec<f64>,
    offset: usize,
}

impl Preconditioner for BlockPreconditioner {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        let m = self.offset;
        for i in 0..m {
            z[i] = r[i] * self.inv_diag[i];
        }
        match &self.circuit {
            Some(lu) => {
                let rhs = nalgebra::DVector::from_column_slice(&r[m..]);
                match lu.solve(&rhs) {
                    Some(x) => z[m..].copy_from_slice(x.as_slice()),
                    None => {
                        for (k, zi) in z[m..].iter_mut().enumerate() {
                            *zi = r[m + k] * self.circuit_diag[k];
                        }
                    }
                }
            }
            None => {
                for (k, zi) in z[m..].iter_mut().enumerate() {
                    *zi = r[m + k] * self.circuit_diag[k];
                }
            }
        }
    }
}

struct Joint {
    residual: Vec<f64>,
    /// `||R_em||` and `||b_em||`.
    em: (f64, f64),
    ckt: f64,
    jacobian: DMatrix<f64>,
}

/// Fully coupled march: at every step a block Newton iteration on the EM
/// update and the circuit unknowns, each correction solved by GMRES on the
/// monolithic matrix. Step 0 is the circuit's DC operating point with zero
/// fields.
pub fn coupled_transient_solve(
    stepper: &Stepper,
    mna: &mut MnaSystem,
    map: &CouplingMap,
    n_steps: usize,
    config: &CoupledConfig,
) -> Result<PortWaveforms> {
    let np = map.n_ports();
    if mna.n_ports() != np {
        return Err(Error::Config(format!(
            "circuit has {} em ports but the mesh defines {np}",
            mna.n_ports()
        )));
    }
    if map.n_edges != stepper.n_edges() {
        return Err(invalid("coupling map does not match the EM system"));
    }
    if (mna.dt - stepper.dt()).abs() > 1e-12 * stepper.dt() {
        return Err(Error::Config("EM and circuit time steps differ".into()));
    }
    config.gmres.validate()?;
    let ne = stepper.n_edges();
    let nc = mna.n_unknowns();
    let n = ne + nc;
    let port_rows: Vec<usize> = (0..np).map(|q| mna.port_index(q)).collect();
    let a = stepper.matrix();
    let a_diag = a.diagonal();
    let mut fixed = a.triplets();
    for (q, p) in map.ports.iter().enumerate() {
        for &(k, c) in &p.edges {
            fixed.push((k, ne + port_rows[q], -0.5 * c));
            fixed.push((ne + port_rows[q], k, -c));
        }
    }
    let limit = config.tol.max(100.0 * config.gmres.tol);

    let mut waves = PortWaveforms::default();
    let mut state: FieldState = stepper.initial_state();
    let mut currents = vec![0.0; np];
    for s in 0..n_steps {
        let started = Instant::now();
        if s == 0 {
            let out = mna.advance(PortClosure::Open)?;
            let v: Vec<f64> = (0..np).map(|q| mna.port_voltage(&out.x, q)).collect();
            waves.records.push(StepRecord {
                step: 0,
                time: 0.0,
                v,
                i: vec![0.0; np],
                newton_iters: out.iterations,
                gmres_iters: 0,
                wall: started.elapsed().as_secs_f64(),
            });
            continue;
        }
        let hist = stepper.history_rhs(&state);
        let mut e = state.e.clone();
        let mut x = mna.initial_guess();

        let joint = |mna: &mut MnaSystem, e: &[f64], x: &[f64]| -> Result<Joint> {
            let lin = mna.linearize(x, PortClosure::External)?;
            let cur: Vec<f64> = port_rows.iter().map(|&r| x[r]).collect();
            let load = impress_current(map, &cur);
            let mut ae = vec![0.0; ne];
            a.mul_into(e, &mut ae);
            let mut r = vec![0.0; n];
            let (mut rn, mut bn) = (0.0, 0.0);
            for k in 0..ne {
                let b = hist[k] + 0.5 * load[k];
                r[k] = ae[k] - b;
                rn += r[k] * r[k];
                bn += b * b + ae[k] * ae[k];
            }
            let mut scale = lin.scale.clone();
            r[ne..].copy_from_slice(&lin.residual);
            for (q, p) in map.ports.iter().enumerate() {
                let row = port_rows[q];
                for &(k, c) in &p.edges {
                    r[ne + row] -= c * e[k];
                    scale[row] += (c * e[k]).abs();
                }
            }
            let ckt = r[ne..]
                .iter()
                .zip(&scale)
                .map(|(v, s)| v.abs() / if *s > 0.0 { *s } else { 1.0 })
                .fold(0.0, f64::max);
            Ok(Joint {
                residual: r,
                em: (rn.sqrt(), bn.sqrt()),
                ckt,
                jacobian: lin.jacobian,
            })
        };

        let mut cur = joint(mna, &e, &x)?;
        // a correction solved to the GMRES tolerance reduces the residual
        // relative to its size at the start of the step
        let r0 = cur.residual.iter().map(|v| v * v).sum::<f64>().sqrt();
        let em_rel = |j: &Joint| {
            let d = j.em.1.max(r0);
            if d > 0.0 {
                j.em.0 / d
            } else {
                0.0
            }
        };
        let mut newton = 0;
        let mut gmres_total = 0;
        let mut history = Vec::new();
        loop {
            if newton >= config.max_newton {
                return Err(Error::Nonlinear {
                    step: s,
                    residual: cur.ckt.max(em_rel(&cur)),
                    detail: format!("coupled Newton did not converge; residuals {history:?}"),
                });
            }
            newton += 1;
            let mut trip = fixed.clone();
            for i in 0..nc {
                for j in 0..nc {
                    let v = cur.jacobian[(i, j)];
                    if v != 0.0 {
                        trip.push((ne + i, ne + j, v));
                    }
                }
            }
            // equilibrate rows so field and circuit equations weigh alike in
            // the GMRES residual
            let mut row_max = vec![0.0f64; n];
            for &(r, _, v) in &trip {
                row_max[r] = row_max[r].max(v.abs());
            }
            let w: Vec<f64> = row_max.iter().map(|m| if *m > 0.0 { 1.0 / m } else { 1.0 }).collect();
            for t in trip.iter_mut() {
                t.2 *= w[t.0];
            }
            let jac = SparseMatrix::from_triplets(n, n, &trip)?;
            let mut jc = cur.jacobian.clone();
            for i in 0..nc {
                for j in 0..nc {
                    jc[(i, j)] *= w[ne + i];
                }
            }
            let circuit_diag: Vec<f64> = (0..nc)
                .map(|i| if jc[(i, i)] != 0.0 { 1.0 / jc[(i, i)] } else { 1.0 })
                .collect();
            let pre = BlockPreconditioner {
                inv_diag: (0..ne)
                    .map(|k| {
                        let d = a_diag[k] * w[k];
                        if d != 0.0 {
                            1.0 / d
                        } else {
                            1.0
                        }
                    })
                    .collect(),
                circuit: Some(jc.lu()),
                circuit_diag,
                offset: ne,
            };
            let rhs: Vec<f64> = cur.residual.iter().zip(&w).map(|(v, s)| -v * s).collect();
            let out = gmres_solve_with(&jac, &rhs, None, &config.gmres, &pre).map_err(|err| {
                match err {
                    Error::SolverFailure { iterations, residual } => Error::Nonlinear {
                        step: s,
                        residual,
                        detail: format!("GMRES failed after {iterations} iterations in the coupled solve"),
                    },
                    other => other,
                }
            })?;
            gmres_total += out.iterations;
            let dy = out.x;
            let mut lambda = 1.0;
            let mut halvings = 0;
            let (mut e_t, mut x_t);
            loop {
                e_t = e.iter().zip(&dy[..ne]).map(|(a, d)| a + lambda * d).collect::<Vec<_>>();
                x_t = x.iter().zip(&dy[ne..]).map(|(a, d)| a + lambda * d).collect::<Vec<_>>();
                let trial = joint(mna, &e_t, &x_t)?;
                if trial.ckt <= cur.ckt || halvings >= config.max_halvings || trial.ckt <= limit {
                    cur = trial;
                    break;
                }
                lambda *= 0.5;
                halvings += 1;
            }
            e = e_t;
            x = x_t;
            history.push(cur.ckt.max(em_rel(&cur)));
            if cur.ckt <= limit && em_rel(&cur) <= limit {
                break;
            }
        }
        for (q, &r) in port_rows.iter().enumerate() {
            currents[q] = x[r];
        }
        let v = read_port_voltage(map, &e);
        let load = impress_current(map, &currents);
        mna.commit(x)?;
        state = stepper.finish(&state, e, load);
        waves.records.push(StepRecord {
            step: s,
            time: s as f64 * stepper.dt(),
            v,
            i: currents.clone(),
            newton_iters: newton,
            gmres_iters: gmres_total,
            wall: started.elapsed().as_secs_f64(),
        });
    }
    Ok(waves)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::parse_netlist;
    use crate::emfem::{assemble_mixed_system, boundary_pec_mask, field_energy, Material};
    use crate::mesh::{build_box_mesh, resolve_port};

    fn cavity() -> (TetMesh, Vec<bool>, PortSpec) {
        let mesh = build_box_mesh(3, 3, 2, [0.09, 0.09, 0.06]).unwrap();
        let pec = boundary_pec_mask(&mesh);
        let port = resolve_port(&mesh, 0, "p0", [0.03, 0.03, 0.0], [0.03, 0.03, 0.03]).unwrap();
        (mesh, pec, port)
    }

    #[test]
    fn single_edge_port_has_unit_coefficient() {
        let (mesh, pec, port) = cavity();
        let map = build_coupling(&mesh, &[port.clone()], &pec).unwrap();
        assert_eq!(map.ports[0].edges.len(), 1);
        assert!((map.ports[0].edges[0].1.abs() - 1.0).abs() < 1e-14);
        assert!((map.ports[0].edges[0].1 - f64::from(port.edges[0].1)).abs() < 1e-14);
        let rev = resolve_port(&mesh, 0, "r", [0.03, 0.03, 0.03], [0.03, 0.03, 0.0]).unwrap();
        let map_r = build_coupling(&mesh, &[rev], &pec).unwrap();
        assert_eq!(map_r.ports[0].edges[0].1, -map.ports[0].edges[0].1);
    }

    #[test]
    fn two_edge_port_sums_both_edges() {
        let (mesh, pec, _) = cavity();
        let port = resolve_port(&mesh, 0, "p", [0.03, 0.03, 0.0], [0.03, 0.03, 0.06]);
        let port = port.unwrap();
        assert_eq!(port.edges.len(), 2);
        let map = build_coupling(&mesh, &[port], &pec).unwrap();
        let mut e = vec![0.0; mesh.n_edges()];
        for &(k, c) in &map.ports[0].edges {
            assert!((c.abs() - 1.0).abs() < 1e-14);
            e[k] = 0.25 * c;
        }
        assert!((read_port_voltage(&map, &e)[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn pec_port_edge_is_a_config_error() {
        let (mesh, pec, _) = cavity();
        let port = resolve_port(&mesh, 0, "wall", [0.0, 0.0, 0.0], [0.0, 0.0, 0.03]).unwrap();
        assert!(matches!(build_coupling(&mesh, &[port], &pec), Err(Error::Config(_))));
    }

    #[test]
    fn impress_and_read_are_adjoint() {
        let (mesh, pec, port) = cavity();
        let p1 = resolve_port(&mesh, 1, "p1", [0.06, 0.06, 0.0], [0.06, 0.06, 0.03]).unwrap();
        let map = build_coupling(&mesh, &[port, p1], &pec).unwrap();
        assert!(impress_current(&map, &[0.0, 0.0]).iter().all(|v| *v == 0.0));
        let l0 = impress_current(&map, &[1.0, 0.0]);
        let l1 = impress_current(&map, &[0.0, -2.0]);
        let l01 = impress_current(&map, &[1.0, -2.0]);
        for k in 0..l0.len() {
            assert_eq!(l01[k], l0[k] + l1[k]);
        }
        let k = map.ports[0].edges[0].0;
        assert_eq!(l0[k], map.ports[0].edges[0].1);
        // <load(I), e> == <I, V(e)>
        let e: Vec<f64> = (0..mesh.n_edges()).map(|i| ((i * 7 % 13) as f64) - 6.0).collect();
        let v = read_port_voltage(&map, &e);
        let i = [0.3, -1.7];
        let lhs: f64 = impress_current(&map, &i).iter().zip(&e).map(|(a, b)| a * b).sum();
        let rhs: f64 = v.iter().zip(&i).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-14 * lhs.abs().max(1.0));
        assert!(read_port_voltage(&map, &vec![0.0; mesh.n_edges()]).iter().all(|v| *v == 0.0));
    }

    fn setup(deck: &str, dt: f64) -> (crate::emfem::MixedSystem, Stepper, CouplingMap, MnaSystem) {
        let (mesh, pec, port) = cavity();
        let sys = assemble_mixed_system(&mesh, &[Material::default()], &pec).unwrap();
        let stepper = Stepper::new(&sys, dt).unwrap();
        let map = build_coupling(&mesh, &[port], &pec).unwrap();
        let mna = MnaSystem::new(parse_netlist(deck).unwrap(), dt).unwrap();
        (sys, stepper, map, mna)
    }

    #[test]
    fn no_sources_give_zero_waveforms() {
        let (_, stepper, map, mut mna) = setup("R R1 1 0 50\nP EM 1 0 port=0\n", 2e-11);
        let w = coupled_transient_solve(&stepper, &mut mna, &map, 20, &CoupledConfig::default())
            .unwrap();
        assert!(w.records.iter().all(|r| r.v[0] == 0.0 && r.i[0] == 0.0));
    }

    #[test]
    fn power_balance_with_thevenin_source() {
        let deck = "V VS 1 0 gauss 1.5g 1g 1\nR RS 1 2 50\nP EM 2 0 port=0\n";
        let dt = 1.0 / (30.0 * 2.5e9);
        let (sys, stepper, map, mut mna) = setup(deck, dt);
        let cfg = CoupledConfig::default();
        let w = coupled_transient_solve(&stepper, &mut mna, &map, 300, &cfg).unwrap();
        // linear circuit: one Newton correction per step
        for r in w.records.iter().skip(1) {
            assert_eq!(r.newton_iters, 1, "step {}", r.step);
        }
        // replay the recorded currents through the field solver alone
        let mut st = stepper.initial_state();
        let mut delivered = 0.0;
        for pair in w.records.windows(2) {
            let load = impress_current(&map, &pair[1].i);
            st = crate::emfem::step_fields(&stepper, &st, &load, &cfg.gmres).unwrap();
            delivered += 0.25 * dt * (pair[0].v[0] + pair[1].v[0]) * (pair[0].i[0] + pair[1].i[0]);
        }
        let energy = field_energy(&sys, &st);
        assert!(energy > 0.0);
        assert!((delivered - energy).abs() <= 1e-6 * energy, "{delivered} vs {energy}");
    }
}
