//! Transient modified nodal analysis.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use super::netlist::{ElementKind, Netlist};
use crate::error::{invalid, Error, Result};

/// Exponent beyond which the diode law is continued linearly.
pub const DIODE_EXP_CLAMP: f64 = 40.0;

/// Conductance added from every node to ground when the DC operating point
/// matrix is singular (capacitor-only nodes).
pub const DC_GMIN: f64 = 1e-12;

/// Shockley diode current and its exact derivative.
pub fn diode_current(v: f64, is: f64, n: f64, vt: f64) -> (f64, f64) {
    let nvt = n * vt;
    let x = v / nvt;
    let (e, de) = if x > DIODE_EXP_CLAMP {
        let e40 = DIODE_EXP_CLAMP.exp();
        (e40 * (1.0 + x - DIODE_EXP_CLAMP), e40)
    } else {
        let e = x.exp();
        (e, e)
    };
    (is * (e - 1.0), is * de / nvt)
}

/// Backward-difference derivative weights `w` with
/// `dx/dt ~ (w[0] x_i + w[1] x_{i-1} + ...) / dt`.
pub fn derivative_stencil(order: usize) -> &'static [f64] {
    match order {
        1 => &[1.0, -1.0],
        _ => &[1.5, -2.0, 0.5],
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 50,
            max_halvings: 4,
        }
    }
}

/// Two-terminal element whose current is computed by an external model.
pub trait NonlinearBranch: Send {
    /// Current from n+ to n- and its derivative with respect to the branch
    /// voltage, for trial voltage `v` at time `t`. `dt` is `None` for the DC
    /// operating point.
    fn evaluate(&mut self, v: f64, t: f64, dt: Option<f64>) -> Result<(f64, f64)>;
    /// Accepts `v` as the converged branch voltage of the step.
    fn commit(&mut self, v: f64, t: f64, dt: Option<f64>) -> Result<()>;
    /// Size of the terms that cancel in the last evaluated current; sets
    /// the residual scale of the rows the branch touches.
    fn magnitude(&self) -> f64 {
        0.0
    }
}

/// How em_port rows are closed for a step.
#[derive(Debug, Clone, Copy)]
pub enum PortClosure<'a> {
    /// `I_q = 0`.
    Open,
    /// `V_k = sum_q z[k * n_p + q] I_q + h[k]`.
    Linear { z: &'a [f64], h: &'a [f64] },
    /// Port rows left as `v+ - v-`; the caller supplies the port voltage.
    External,
}

/// Residual, Jacobian and per-row magnitude scale at one iterate.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub residual: Vec<f64>,
    pub jacobian: DMatrix<f64>,
    pub scale: Vec<f64>,
    /// Current of every element (n+ to n-), in netlist order.
    pub currents: Vec<f64>,
}

impl Linearization {
    /// `max_i |r_i| / scale_i`.
    pub fn scaled_norm(&self) -> f64 {
        self.residual
            .iter()
            .zip(&self.scale)
            .map(|(r, s)| r.abs() / if *s > 0.0 { *s } else { 1.0 })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    /// Scaled residual after each iteration.
    pub residuals: Vec<f64>,
    pub currents: Vec<f64>,
}

pub struct MnaSystem {
    pub netlist: Netlist,
    pub dt: f64,
    pub newton: NewtonConfig,
    pub order: usize,
    branch: Vec<Option<usize>>,
    ports: Vec<usize>,
    devices: Vec<Option<Box<dyn NonlinearBranch>>>,
    history: VecDeque<Vec<f64>>,
    step: usize,
    gmin: f64,
}

impl std::fmt::Debug for MnaSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MnaSystem")
            .field("dt", &self.dt)
            .field("step", &self.step)
            .field("unknowns", &self.n_unknowns())
            .finish()
    }
}

impl MnaSystem {
    pub fn new(netlist: Netlist, dt: f64) -> Result<Self> {
        Self::with_devices(netlist, dt, Vec::new())
    }

    /// `devices` bind, in order, to the netlist's `DD` elements.
    pub fn with_devices(
        netlist: Netlist,
        dt: f64,
        devices: Vec<Box<dyn NonlinearBranch>>,
    ) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(invalid("circuit time step must be positive"));
        }
        let n_nodes = netlist.n_nodes();
        let mut branch = Vec::with_capacity(netlist.elements.len());
        let mut next = n_nodes;
        for e in &netlist.elements {
            if e.kind.has_branch_current() {
                branch.push(Some(next));
                next += 1;
            } else {
                branch.push(None);
            }
        }
        let ports = netlist
            .ports()
            .iter()
            .map(|(_, el)| branch[*el].expect("ports carry a branch current"))
            .collect();
        let mut supplied = devices.into_iter();
        let mut bound = Vec::with_capacity(netlist.elements.len());
        for e in &netlist.elements {
            if matches!(e.kind, ElementKind::Device(_)) {
                let d = supplied.next().ok_or_else(|| {
                    Error::CircuitTopology(format!("no device model bound to '{}'", e.name))
                })?;
                bound.push(Some(d));
            } else {
                bound.push(None);
            }
        }
        if supplied.next().is_some() {
            return Err(Error::CircuitTopology(
                "more device models than DD elements".into(),
            ));
        }
        Ok(Self {
            netlist,
            dt,
            newton: NewtonConfig::default(),
            order: 2,
            branch,
            ports,
            devices: bound,
            history: VecDeque::new(),
            step: 0,
            gmin: 0.0,
        })
    }

    pub fn n_unknowns(&self) -> usize {
        self.netlist.n_nodes() + self.branch.iter().flatten().count()
    }

    pub fn n_ports(&self) -> usize {
        self.ports.len()
    }

    /// Unknown index of port `q`'s branch current (also its row).
    pub fn port_index(&self, q: usize) -> usize {
        self.ports[q]
    }

    /// Node pair of port `q`.
    pub fn port_nodes(&self, q: usize) -> (usize, usize) {
        let el = self.netlist.ports()[q].1;
        let e = &self.netlist.elements[el];
        (e.pos, e.neg)
    }

    /// Index of the step solved next.
    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.dt
    }

    /// Last committed solution.
    pub fn last_solution(&self) -> Option<&[f64]> {
        self.history.front().map(Vec::as_slice)
    }

    pub fn node_voltage(x: &[f64], node: usize) -> f64 {
        if node == 0 {
            0.0
        } else {
            x[node - 1]
        }
    }

    pub fn port_voltage(&self, x: &[f64], q: usize) -> f64 {
        let (p, n) = self.port_nodes(q);
        Self::node_voltage(x, p) - Self::node_voltage(x, n)
    }

    fn is_dc(&self) -> bool {
        self.step == 0
    }

    /// Initial guess for the next step.
    pub fn initial_guess(&self) -> Vec<f64> {
        self.history
            .front()
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.n_unknowns()])
    }

    /// Residual and Jacobian at `x` for the step being solved. Port rows hold
    /// `v+ - v-` (or `I` at the DC operating point) before `closure` is
    /// applied.
    pub fn linearize(&mut self, x: &[f64], closure: PortClosure<'_>) -> Result<Linearization> {
        let n = self.n_unknowns();
        if x.len() != n {
            return Err(invalid("iterate length does not match the circuit unknowns"));
        }
        let dc = self.is_dc();
        let t = self.time();
        let dt = self.dt;
        let order = self.order.min(self.step).max(1);
        let w = derivative_stencil(order);
        let mut r = vec![0.0; n];
        let mut s = vec![0.0; n];
        let mut jac = DMatrix::<f64>::zeros(n, n);
        let mut currents = vec![0.0; self.netlist.elements.len()];
        let volt = |x: &[f64], k: usize| Self::node_voltage(x, k);

        // KCL: current leaving node `k` through the element
        // `mag` bounds the size of the terms that were summed into `i`
        fn kcl(r: &mut [f64], s: &mut [f64], p: usize, nn: usize, i: f64, mag: f64) {
            let mag = mag.max(i.abs());
            if p != 0 {
                r[p - 1] += i;
                s[p - 1] += mag;
            }
            if nn != 0 {
                r[nn - 1] -= i;
                s[nn - 1] += mag;
            }
        }
        fn jac_node(j: &mut DMatrix<f64>, p: usize, nn: usize, col: usize, g: f64) {
            if p != 0 {
                j[(p - 1, col)] += g;
            }
            if nn != 0 {
                j[(nn - 1, col)] -= g;
            }
        }
        fn conductance(j: &mut DMatrix<f64>, p: usize, nn: usize, g: f64) {
            if p != 0 {
                jac_node(j, p, nn, p - 1, g);
            }
            if nn != 0 {
                jac_node(j, p, nn, nn - 1, -g);
            }
        }
        fn branch_voltage(j: &mut DMatrix<f64>, row: usize, p: usize, nn: usize) {
            if p != 0 {
                j[(row, p - 1)] += 1.0;
            }
            if nn != 0 {
                j[(row, nn - 1)] -= 1.0;
            }
        }

        for (ei, e) in self.netlist.elements.iter().enumerate() {
            let (p, nn) = (e.pos, e.neg);
            let v = volt(x, p) - volt(x, nn);
            let vmag = volt(x, p).abs() + volt(x, nn).abs();
            match &e.kind {
                ElementKind::Resistor(res) => {
                    let i = v / res;
                    kcl(&mut r, &mut s, p, nn, i, vmag / res);
                    conductance(&mut jac, p, nn, 1.0 / res);
                    currents[ei] = i;
                }
                ElementKind::Capacitor(c) => {
                    if dc {
                        continue;
                    }
                    let mut acc = w[0] * v;
                    let mut mag = w[0].abs() * vmag;
                    for (k, wk) in w.iter().enumerate().skip(1) {
                        let h = &self.history[k - 1];
                        acc += wk * (volt(h, p) - volt(h, nn));
                        mag += wk.abs() * (volt(h, p).abs() + volt(h, nn).abs());
                    }
                    let i = c * acc / dt;
                    kcl(&mut r, &mut s, p, nn, i, c * mag / dt);
                    conductance(&mut jac, p, nn, c * w[0] / dt);
                    currents[ei] = i;
                }
                ElementKind::Inductor(l) => {
                    let b = self.branch[ei].expect("inductor branch");
                    let i = x[b];
                    kcl(&mut r, &mut s, p, nn, i, 0.0);
                    jac_node(&mut jac, p, nn, b, 1.0);
                    branch_voltage(&mut jac, b, p, nn);
                    let mut row = v;
                    let mut scale = vmag;
                    if !dc {
                        let mut acc = w[0] * i;
                        let mut mag = (w[0] * i).abs();
                        for (k, wk) in w.iter().enumerate().skip(1) {
                            acc += wk * self.history[k - 1][b];
                            mag += (wk * self.history[k - 1][b]).abs();
                        }
                        row -= l * acc / dt;
                        scale += l * mag / dt;
                        jac[(b, b)] -= l * w[0] / dt;
                    }
                    r[b] = row;
                    s[b] = scale;
                    currents[ei] = i;
                }
                ElementKind::VoltageSource(wf) => {
                    let b = self.branch[ei].expect("source branch");
                    let i = x[b];
                    kcl(&mut r, &mut s, p, nn, i, 0.0);
                    jac_node(&mut jac, p, nn, b, 1.0);
                    branch_voltage(&mut jac, b, p, nn);
                    let vs = wf.eval(t);
                    r[b] = v - vs;
                    s[b] = vmag + vs.abs();
                    currents[ei] = i;
                }
                ElementKind::CurrentSource(wf) => {
                    let i = wf.eval(t);
                    kcl(&mut r, &mut s, p, nn, i, 0.0);
                    currents[ei] = i;
                }
                ElementKind::Diode(d) => {
                    let (i, g) = diode_current(v, d.is, d.n, d.vt);
                    kcl(&mut r, &mut s, p, nn, i, d.is);
                    conductance(&mut jac, p, nn, g);
                    currents[ei] = i;
                }
                ElementKind::Port(_) => {
                    let b = self.branch[ei].expect("port branch");
                    let i = x[b];
                    kcl(&mut r, &mut s, p, nn, i, 0.0);
                    jac_node(&mut jac, p, nn, b, 1.0);
                    if dc {
                        r[b] = i;
                        s[b] = i.abs();
                        jac[(b, b)] = 1.0;
                    } else {
                        branch_voltage(&mut jac, b, p, nn);
                        r[b] = v;
                        s[b] = vmag;
                    }
                    currents[ei] = i;
                }
                ElementKind::Device(_) => {
                    let dev = self.devices[ei].as_mut().expect("device bound");
                    let (i, g) = dev.evaluate(v, t, (!dc).then_some(dt))?;
                    kcl(&mut r, &mut s, p, nn, i, dev.magnitude());
                    conductance(&mut jac, p, nn, g);
                    currents[ei] = i;
                }
            }
        }
        if self.gmin > 0.0 {
            for k in 0..self.netlist.n_nodes() {
                r[k] += self.gmin * x[k];
                jac[(k, k)] += self.gmin;
            }
        }
        if !dc {
            if let PortClosure::Linear { z, h } = closure {
                let np = self.ports.len();
                if z.len() != np * np || h.len() != np {
                    return Err(invalid("port closure dimensions do not match the ports"));
                }
                for k in 0..np {
                    let row = self.ports[k];
                    let mut vk = h[k];
                    let mut mag = h[k].abs();
                    for q in 0..np {
                        vk += z[k * np + q] * x[self.ports[q]];
                        mag += (z[k * np + q] * x[self.ports[q]]).abs();
                        jac[(row, self.ports[q])] -= z[k * np + q];
                    }
                    r[row] -= vk;
                    s[row] += mag;
                }
            }
        }
        Ok(Linearization {
            residual: r,
            jacobian: jac,
            scale: s,
            currents,
        })
    }

    fn newton_direction(&self, lin: &Linearization) -> Result<Vec<f64>> {
        let n = lin.residual.len();
        let lu = lin.jacobian.clone().lu();
        let rhs = DVector::from_iterator(n, lin.residual.iter().map(|v| -v));
        let dx = lu.solve(&rhs).ok_or_else(|| {
            Error::CircuitTopology(format!(
                "singular circuit matrix at step {} (floating node or source loop)",
                self.step
            ))
        })?;
        if dx.iter().any(|v| !v.is_finite()) {
            return Err(Error::CircuitTopology(format!(
                "circuit matrix is numerically singular at step {}",
                self.step
            )));
        }
        Ok(dx.iter().copied().collect())
    }

    /// Damped Newton iteration for the current step; does not commit.
    pub fn newton_solve_step(&mut self, closure: PortClosure<'_>) -> Result<StepOutcome> {
        let mut x = self.initial_guess();
        let mut lin = self.linearize(&x, closure)?;
        let mut norm = lin.scaled_norm();
        let mut residuals = Vec::new();
        for it in 1..=self.newton.max_iter {
            let dx = match self.newton_direction(&lin) {
                Ok(d) => d,
                Err(_) if self.is_dc() && self.gmin == 0.0 => {
                    // capacitor-only nodes have no DC path; retry with gmin
                    self.gmin = DC_GMIN;
                    lin = self.linearize(&x, closure)?;
                    norm = lin.scaled_norm();
                    self.newton_direction(&lin)?
                }
                Err(e) => return Err(e),
            };
            let mut lambda = 1.0;
            let mut trial: Vec<f64> = x.iter().zip(&dx).map(|(a, d)| a + d).collect();
            let mut trial_lin = self.linearize(&trial, closure)?;
            let mut trial_norm = trial_lin.scaled_norm();
            let mut halvings = 0;
            while !(trial_norm <= norm) && halvings < self.newton.max_halvings {
                lambda *= 0.5;
                halvings += 1;
                trial = x.iter().zip(&dx).map(|(a, d)| a + lambda * d).collect();
                trial_lin = self.linearize(&trial, closure)?;
                trial_norm = trial_lin.scaled_norm();
            }
            x = trial;
            lin = trial_lin;
            norm = trial_norm;
            residuals.push(norm);
            if norm <= self.newton.tol {
                return Ok(StepOutcome {
                    x,
                    iterations: it,
                    residual: norm,
                    residuals,
                    currents: lin.currents,
                });
            }
        }
        Err(Error::Nonlinear {
            step: self.step,
            residual: norm,
            detail: format!("Newton did not converge in {} iterations", self.newton.max_iter),
        })
    }

    /// Accepts `x` as the solution of the current step and advances.
    pub fn commit(&mut self, x: Vec<f64>) -> Result<()> {
        let dc = self.is_dc();
        let t = self.time();
        let dt = self.dt;
        for (ei, dev) in self.devices.iter_mut().enumerate() {
            if let Some(d) = dev {
                let e = &self.netlist.elements[ei];
                let v = Self::node_voltage(&x, e.pos) - Self::node_voltage(&x, e.neg);
                d.commit(v, t, (!dc).then_some(dt))?;
            }
        }
        self.history.push_front(x);
        self.history.truncate(self.order);
        self.step += 1;
        self.gmin = 0.0;
        Ok(())
    }

    /// Solves and commits one step.
    pub fn advance(&mut self, closure: PortClosure<'_>) -> Result<StepOutcome> {
        let out = self.newton_solve_step(closure)?;
        self.commit(out.x.clone())?;
        Ok(out)
    }
}
