//! One-dimensional drift-diffusion diode (metal contact at x = 0, ohmic
//! contact at x = L).
//!
//! Box-integrated Scharfetter-Gummel discretization, backward Euler in time.
//! Unknowns per node are `psi = phi / V_T` and densities scaled by the peak
//! doping; the coupled system is solved by damped Newton on a
//! block-tridiagonal Jacobian.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::circuit::NonlinearBranch;
use crate::emfem::EPS0;
use crate::error::{invalid, Error, Result};

pub const Q: f64 = 1.602_176_634e-19;

/// Bernoulli function `x / (e^x - 1)`.
pub fn bernoulli(x: f64) -> f64 {
    if x.abs() < 1e-3 {
        1.0 - x / 2.0 + x * x / 12.0 - x.powi(4) / 720.0
    } else if x > 700.0 {
        x * (-x).exp()
    } else {
        x / x.exp_m1()
    }
}

/// Derivative of [`bernoulli`].
pub fn bernoulli_prime(x: f64) -> f64 {
    if x.abs() < 1e-3 {
        -0.5 + x / 6.0 - x.powi(3) / 180.0
    } else if x > 700.0 {
        (1.0 - x) * (-x).exp()
    } else {
        let em1 = x.exp_m1();
        (em1 - x * x.exp()) / (em1 * em1)
    }
}

/// Scharfetter-Gummel electron flux `D/h (n_r B(d) - n_l B(-d))` between two
/// nodes with potential step `d` (in thermal voltages).
pub fn sg_electron_flux(d_over_h: f64, n_l: f64, n_r: f64, d: f64) -> f64 {
    d_over_h * (n_r * bernoulli(d) - n_l * bernoulli(-d))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DdParams {
    pub length: f64,
    pub nodes: usize,
    pub area: f64,
    pub eps_r: f64,
    pub ni: f64,
    pub nc: f64,
    /// Barrier height of the metal contact (V).
    pub phi_b: f64,
    pub mu_n: f64,
    pub mu_p: f64,
    pub vsat_n: f64,
    pub vsat_p: f64,
    pub tau_n: f64,
    pub tau_p: f64,
    pub vt: f64,
    /// `(x0, x1, net doping)`; donors positive.
    pub doping: Vec<(f64, f64, f64)>,
}

impl Default for DdParams {
    fn default() -> Self {
        Self {
            length: 1e-6,
            nodes: 201,
            area: 1e-9,
            eps_r: 11.7,
            ni: 1.5e16,
            nc: 2.8e25,
            phi_b: 0.6,
            mu_n: 0.135,
            mu_p: 0.048,
            vsat_n: 1e5,
            vsat_p: 1e5,
            tau_n: 1e-7,
            tau_p: 1e-7,
            vt: 0.025_852,
            doping: vec![(0.0, 1e-6, 1e23)],
        }
    }
}

impl DdParams {
    /// Parses the `key = value` device description.
    pub fn parse(text: &str) -> Result<Self> {
        let mut p = Self::default();
        let mut doping = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: &str| Error::Parse {
                line: i + 1,
                msg: m.to_string(),
            };
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected key = value"))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |s: &str| crate::circuit::parse_value(s.trim()).ok_or_else(|| err("bad number"));
            match k {
                "length" => p.length = num(v)?,
                "nodes" => p.nodes = v.parse().map_err(|_| err("bad node count"))?,
                "area" => p.area = num(v)?,
                "eps_r" => p.eps_r = num(v)?,
                "ni" => p.ni = num(v)?,
                "nc" => p.nc = num(v)?,
                "phi_b" => p.phi_b = num(v)?,
                "mu_n" => p.mu_n = num(v)?,
                "mu_p" => p.mu_p = num(v)?,
                "vsat_n" => p.vsat_n = num(v)?,
                "vsat_p" => p.vsat_p = num(v)?,
                "tau_n" => p.tau_n = num(v)?,
                "tau_p" => p.tau_p = num(v)?,
                "vt" => p.vt = num(v)?,
                "doping" => {
                    let mut segs = Vec::new();
                    for seg in v.split(',') {
                        let parts: Vec<&str> = seg.split(':').collect();
                        if parts.len() != 3 {
                            return Err(err("doping segments are x0:x1:value"));
                        }
                        segs.push((num(parts[0])?, num(parts[1])?, num(parts[2])?));
                    }
                    doping = Some(segs);
                }
                _ => return Err(err(&format!("unknown key '{k}'"))),
            }
        }
        if let Some(d) = doping {
            p.doping = d;
        }
        p.validate()?;
        Ok(p)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [
            self.length, self.area, self.eps_r, self.ni, self.nc, self.mu_n, self.mu_p,
            self.vsat_n, self.vsat_p, self.tau_n, self.tau_p, self.vt,
        ];
        if pos.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(invalid("device parameters must be positive and finite"));
        }
        if self.nodes < 5 {
            return Err(invalid("device grid needs at least 5 nodes"));
        }
        if !self.phi_b.is_finite() {
            return Err(invalid("barrier height must be finite"));
        }
        Ok(())
    }
}

/// Carrier and potential profile at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct DdState {
    /// Potential in thermal voltages.
    pub psi: Vec<f64>,
    /// Electron density (m^-3).
    pub n: Vec<f64>,
    /// Hole density (m^-3).
    pub p: Vec<f64>,
    /// Applied voltage (metal contact relative to ohmic contact).
    pub voltage: f64,
    /// Terminal current from the metal contact into the device (A).
    pub current: f64,
    /// `dI/dV` at this solution.
    pub conductance: f64,
    /// Sum of the magnitudes of the terms making up `current`.
    pub magnitude: f64,
    /// Conduction current (A, +x) on the first and last grid intervals.
    pub contact_currents: [f64; 2],
    pub time: f64,
}

impl DdState {
    pub fn phi(&self, vt: f64) -> Vec<f64> {
        self.psi.iter().map(|p| p * vt).collect()
    }
}

/// Discretized device.
#[derive(Debug, Clone)]
pub struct DdDevice {
    pub params: DdParams,
    pub x: Vec<f64>,
    /// Net doping per node (m^-3).
    pub doping: Vec<f64>,
    scale: f64,
    lambda2: f64,
    bc_left: [f64; 3],
    bc_right: [f64; 3],
}

struct Assembly {
    residual: Vec<Vector3<f64>>,
    lower: Vec<Matrix3<f64>>,
    diag: Vec<Matrix3<f64>>,
    upper: Vec<Matrix3<f64>>,
    d_voltage: Vec<Vector3<f64>>,
}

/// Jacobian block with respect to `(psi, ln n, ln p)` of the node `w`.
fn log_columns(m: &Matrix3<f64>, w: &Vector3<f64>) -> Matrix3<f64> {
    let mut out = *m;
    for r in 0..3 {
        out[(r, 1)] *= w[1];
        out[(r, 2)] *= w[2];
    }
    out
}

fn block_thomas(
    lower: &[Matrix3<f64>],
    diag: &[Matrix3<f64>],
    upper: &[Matrix3<f64>],
    rhs: &[Vector3<f64>],
) -> Option<Vec<Vector3<f64>>> {
    let n = diag.len();
    let mut c = vec![Matrix3::zeros(); n];
    let mut d = vec![Vector3::zeros(); n];
    for i in 0..n {
        let (m, r) = if i == 0 {
            (diag[0], rhs[0])
        } else {
            (diag[i] - lower[i] * c[i - 1], rhs[i] - lower[i] * d[i - 1])
        };
        let lu = m.lu();
        c[i] = lu.solve(&upper[i])?;
        d[i] = lu.solve(&r)?;
    }
    let mut x = vec![Vector3::zeros(); n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    Some(x)
}

impl DdDevice {
    pub fn new(params: DdParams) -> Result<Self> {
        params.validate()?;
        let n = params.nodes;
        let x: Vec<f64> = (0..n)
            .map(|i| params.length * i as f64 / (n - 1) as f64)
            .collect();
        let doping: Vec<f64> = x
            .iter()
            .map(|&xi| {
                params
                    .doping
                    .iter()
                    .filter(|(a, b, _)| xi >= *a - 1e-15 && xi <= *b + 1e-15)
                    .map(|s| s.2)
                    .last()
                    .unwrap_or(0.0)
            })
            .collect();
        let scale = doping.iter().fold(params.ni, |m, d| m.max(d.abs()));
        let eps = EPS0 * params.eps_r;
        let lambda2 = eps * params.vt / (Q * scale);
        // metal contact: fixed electron density from the barrier height
        let n0 = params.nc * (-params.phi_b / params.vt).exp();
        let p0 = params.ni * params.ni / n0;
        let bc_left = [(n0 / params.ni).ln(), n0 / scale, p0 / scale];
        let dl = doping[n - 1];
        let nl = 0.5 * dl + (0.25 * dl * dl + params.ni * params.ni).sqrt();
        let pl = params.ni * params.ni / nl;
        let bc_right = [(nl / params.ni).ln(), nl / scale, pl / scale];
        Ok(Self {
            params,
            x,
            doping,
            scale,
            lambda2,
            bc_left,
            bc_right,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.x.len()
    }

    fn h(&self, i: usize) -> f64 {
        self.x[i + 1] - self.x[i]
    }

    fn dual(&self, i: usize) -> f64 {
        let n = self.x.len();
        let left = if i > 0 { self.h(i - 1) } else { 0.0 };
        let right = if i + 1 < n { self.h(i) } else { 0.0 };
        0.5 * (left + right)
    }

    /// Field-dependent mobility and its derivative with respect to the
    /// applied voltage, with the lumped field `V / L`.
    fn mobility(&self, mu0: f64, vsat: f64, v: f64) -> (f64, f64) {
        let l = self.params.length;
        let denom = 1.0 + mu0 * (v / l).abs() / vsat;
        let mu = mu0 / denom;
        let dmu = -mu0 * mu0 / (vsat * l) * v.signum() * if v == 0.0 { 0.0 } else { 1.0 }
            / (denom * denom);
        (mu, dmu)
    }

    /// Built-in potential `phi(L) - phi(0)` at equilibrium (V).
    pub fn built_in_potential(&self) -> f64 {
        (self.bc_right[0] - self.bc_left[0]) * self.params.vt
    }

    /// Charge `q A int (p - n + N) dx` over the interior nodes.
    pub fn interior_charge(&self, s: &DdState) -> f64 {
        let n = self.n_nodes();
        let mut acc = 0.0;
        for i in 1..n - 1 {
            acc += self.dual(i) * (s.p[i] - s.n[i] + self.doping[i]);
        }
        Q * self.params.area * acc
    }

    /// Scale for "zero" currents: `q A N D_n / L`.
    pub fn current_scale(&self) -> f64 {
        Q * self.params.area * self.scale * self.params.mu_n * self.params.vt / self.params.length
    }

    fn srh(&self, n: f64, p: f64) -> (f64, f64, f64) {
        let ni = self.params.ni / self.scale;
        let (tn, tp) = (self.params.tau_n, self.params.tau_p);
        let num = n * p - ni * ni;
        let den = tp * (n + ni) + tn * (p + ni);
        (
            num / den,
            (p * den - num * tp) / (den * den),
            (n * den - num * tn) / (den * den),
        )
    }

    fn assemble(
        &self,
        u: &[Vector3<f64>],
        old: Option<(&[Vector3<f64>], f64)>,
        v: f64,
    ) -> Assembly {
        let n = self.n_nodes();
        let vt = self.params.vt;
        let (mun, dmun) = self.mobility(self.params.mu_n, self.params.vsat_n, v);
        let (mup, dmup) = self.mobility(self.params.mu_p, self.params.vsat_p, v);
        let (dn, dp) = (mun * vt, mup * vt);
        let mut residual = vec![Vector3::zeros(); n];
        let mut lower = vec![Matrix3::zeros(); n];
        let mut diag = vec![Matrix3::zeros(); n];
        let mut upper = vec![Matrix3::zeros(); n];
        let mut d_voltage = vec![Vector3::zeros(); n];

        for (i, bc) in [(0, self.bc_left), (n - 1, self.bc_right)] {
            let shift = if i == 0 { v / vt } else { 0.0 };
            residual[i] = Vector3::new(
                u[i][0] - bc[0] - shift,
                u[i][1] - bc[1],
                u[i][2] - bc[2],
            );
            diag[i] = Matrix3::identity();
            if i == 0 {
                d_voltage[0][0] = -1.0 / vt;
            }
        }
        // interval contributions
        for k in 0..n - 1 {
            let h = self.h(k);
            let d = u[k + 1][0] - u[k][0];
            let (bp, bm) = (bernoulli(d), bernoulli(-d));
            let (dbp, dbm) = (bernoulli_prime(d), bernoulli_prime(-d));
            let (nl, nr, pl, pr) = (u[k][1], u[k + 1][1], u[k][2], u[k + 1][2]);
            let fn_ = dn / h * (nr * bp - nl * bm);
            let fp = dp / h * (pl * bp - pr * bm);
            let dfn_dd = dn / h * (nr * dbp + nl * dbm);
            let dfp_dd = dp / h * (pl * dbp + pr * dbm);
            let field = self.lambda2 * d / h;
            // row k gets +flux (leaving to the right), row k+1 gets -flux
            // derivatives of (field, Fn, -Fp) with respect to the left and
            // right node unknowns
            let mut jl = Matrix3::zeros();
            let mut jr = Matrix3::zeros();
            jl[(0, 0)] = -self.lambda2 / h;
            jr[(0, 0)] = self.lambda2 / h;
            jl[(1, 0)] = -dfn_dd;
            jr[(1, 0)] = dfn_dd;
            jl[(1, 1)] = -dn / h * bm;
            jr[(1, 1)] = dn / h * bp;
            jl[(2, 0)] = dfp_dd;
            jr[(2, 0)] = -dfp_dd;
            jl[(2, 2)] = -dp / h * bp;
            jr[(2, 2)] = dp / h * bm;
            // row k sees the flux leaving to the right, row k+1 the negative
            for (row, sign) in [(k, 1.0), (k + 1, -1.0)] {
                if row == 0 || row == n - 1 {
                    continue;
                }
                residual[row][0] += sign * field;
                residual[row][1] += sign * fn_;
                residual[row][2] -= sign * fp;
                d_voltage[row][1] += sign * fn_ * dmun / mun;
                d_voltage[row][2] -= sign * fp * dmup / mup;
                if row == k {
                    diag[row] += sign * jl;
                    upper[row] += sign * jr;
                } else {
                    diag[row] += sign * jr;
                    lower[row] += sign * jl;
                }
            }
        }
        // node contributions
        for i in 1..n - 1 {
            let w = self.dual(i);
            let nd = self.doping[i] / self.scale;
            let (ni, pi) = (u[i][1], u[i][2]);
            residual[i][0] += w * (pi - ni + nd);
            diag[i][(0, 1)] -= w;
            diag[i][(0, 2)] += w;
            let (r, drn, drp) = self.srh(ni, pi);
            residual[i][1] -= w * r;
            residual[i][2] -= w * r;
            diag[i][(1, 1)] -= w * drn;
            diag[i][(1, 2)] -= w * drp;
            diag[i][(2, 1)] -= w * drn;
            diag[i][(2, 2)] -= w * drp;
            if let Some((prev, dt)) = old {
                residual[i][1] -= w * (ni - prev[i][1]) / dt;
                residual[i][2] -= w * (pi - prev[i][2]) / dt;
                diag[i][(1, 1)] -= w / dt;
                diag[i][(2, 2)] -= w / dt;
            }
        }
        Assembly {
            residual,
            lower,
            diag,
            upper,
            d_voltage,
        }
    }

    fn to_scaled(&self, s: &DdState) -> Vec<Vector3<f64>> {
        (0..self.n_nodes())
            .map(|i| Vector3::new(s.psi[i], s.n[i] / self.scale, s.p[i] / self.scale))
            .collect()
    }

    fn newton(
        &self,
        mut u: Vec<Vector3<f64>>,
        old: Option<(&[Vector3<f64>], f64)>,
        v: f64,
    ) -> Result<(Vec<Vector3<f64>>, Assembly)> {
        let mut history = Vec::new();
        for _ in 0..80 {
            let asm = self.assemble(&u, old, v);
            let rhs: Vec<Vector3<f64>> = asm.residual.iter().map(|r| -r).collect();
            // Newton in (psi, ln n, ln p) keeps the densities positive
            let lower: Vec<Matrix3<f64>> = asm
                .lower
                .iter()
                .zip(u.iter().cycle().skip(u.len() - 1))
                .map(|(m, w)| log_columns(m, w))
                .collect();
            let diag: Vec<Matrix3<f64>> =
                asm.diag.iter().zip(&u).map(|(m, w)| log_columns(m, w)).collect();
            let upper: Vec<Matrix3<f64>> = asm
                .upper
                .iter()
                .zip(u.iter().skip(1).chain(std::iter::once(&u[0])))
                .map(|(m, w)| log_columns(m, w))
                .collect();
            let du = block_thomas(&lower, &diag, &upper, &rhs).ok_or_else(|| {
                Error::Nonlinear {
                    step: 0,
                    residual: f64::NAN,
                    detail: "singular drift-diffusion Jacobian".into(),
                }
            })?;
            let size = du.iter().fold(0.0f64, |m, d| m.max(d.amax()));
            let lambda = (1.0 / size.max(1e-300)).min(1.0);
            for (ui, di) in u.iter_mut().zip(&du) {
                ui[0] += lambda * di[0];
                ui[1] *= (lambda * di[1]).exp();
                ui[2] *= (lambda * di[2]).exp();
            }
            history.push(size);
            if size <= 1e-12 && lambda == 1.0 {
                let asm = self.assemble(&u, old, v);
                return Ok((u, asm));
            }
        }
        let last = history.last().copied().unwrap_or(f64::NAN);
        if last <= 1e-8 {
            let asm = self.assemble(&u, old, v);
            return Ok((u, asm));
        }
        Err(Error::Nonlinear {
            step: 0,
            residual: last,
            detail: format!("drift-diffusion Newton stalled; update history {:?}", history),
        })
    }

    fn finish_state(
        &self,
        u: &[Vector3<f64>],
        asm: &Assembly,
        old: Option<(&[Vector3<f64>], f64)>,
        v: f64,
        time: f64,
    ) -> Result<DdState> {
        let n = self.n_nodes();
        let vt = self.params.vt;
        let qa = Q * self.params.area;
        let (mun, dmun) = self.mobility(self.params.mu_n, self.params.vsat_n, v);
        let (mup, dmup) = self.mobility(self.params.mu_p, self.params.vsat_p, v);
        let (dn, dp) = (mun * vt, mup * vt);
        let cond = |k: usize| -> (f64, f64, [f64; 6]) {
            let h = self.h(k);
            let d = u[k + 1][0] - u[k][0];
            let (bp, bm) = (bernoulli(d), bernoulli(-d));
            let (dbp, dbm) = (bernoulli_prime(d), bernoulli_prime(-d));
            let fn_ = dn / h * (u[k + 1][1] * bp - u[k][1] * bm);
            let fp = dp / h * (u[k][2] * bp - u[k + 1][2] * bm);
            let dfn_dd = dn / h * (u[k + 1][1] * dbp + u[k][1] * dbm);
            let dfp_dd = dp / h * (u[k][2] * dbp + u[k + 1][2] * dbm);
            // d(Fn + Fp)/d(psi_k, n_k, p_k, psi_k1, n_k1, p_k1)
            let grad = [
                -(dfn_dd + dfp_dd),
                -dn / h * bm,
                dp / h * bp,
                dfn_dd + dfp_dd,
                dn / h * bp,
                -dp / h * bm,
            ];
            (fn_, fp, grad)
        };
        let (fn0, fp0, g0) = cond(0);
        let (fnl, fpl, _) = cond(n - 2);
        let h0 = self.h(0);
        let eps = EPS0 * self.params.eps_r;
        let (jd, djd) = match old {
            Some((prev, dt)) => {
                let e_now = u[1][0] - u[0][0];
                let e_old = prev[1][0] - prev[0][0];
                (-eps * vt / h0 * (e_now - e_old) / dt, -eps * vt / (h0 * dt))
            }
            None => (0.0, 0.0),
        };
        let current = qa * self.scale * (fn0 + fp0) + self.params.area * jd;
        let flux_terms = {
            let d = u[1][0] - u[0][0];
            dn / h0 * (u[1][1] * bernoulli(d)).abs()
                + dn / h0 * (u[0][1] * bernoulli(-d)).abs()
                + dp / h0 * (u[0][2] * bernoulli(d)).abs()
                + dp / h0 * (u[1][2] * bernoulli(-d)).abs()
        };
        let disp_terms = match old {
            Some((prev, dt)) => {
                eps * vt / (h0 * dt)
                    * (u[1][0].abs() + u[0][0].abs() + prev[1][0].abs() + prev[0][0].abs())
            }
            None => 0.0,
        };
        let magnitude = qa * self.scale * flux_terms + self.params.area * disp_terms;

        // sensitivity du/dV = -J^-1 dR/dV
        let rhs: Vec<Vector3<f64>> = asm.d_voltage.iter().map(|r| -r).collect();
        let du = block_thomas(&asm.lower, &asm.diag, &asm.upper, &rhs).ok_or_else(|| {
            Error::Nonlinear {
                step: 0,
                residual: f64::NAN,
                detail: "singular drift-diffusion Jacobian in sensitivity".into(),
            }
        })?;
        let mut di = qa * self.scale * (fn0 * dmun / mun + fp0 * dmup / mup);
        let dsum = [du[0][0], du[0][1], du[0][2], du[1][0], du[1][1], du[1][2]];
        for (g, d) in g0.iter().zip(dsum) {
            di += qa * self.scale * g * d;
        }
        di += self.params.area * djd * (du[1][0] - du[0][0]);

        Ok(DdState {
            psi: u.iter().map(|w| w[0]).collect(),
            n: u.iter().map(|w| w[1] * self.scale).collect(),
            p: u.iter().map(|w| w[2] * self.scale).collect(),
            voltage: v,
            current,
            conductance: di,
            magnitude,
            contact_currents: [qa * self.scale * (fn0 + fp0), qa * self.scale * (fnl + fpl)],
            time,
        })
    }

    /// Zero-bias equilibrium: nonlinear Poisson with Boltzmann carriers.
    pub fn solve_equilibrium(&self) -> Result<DdState> {
        let n = self.n_nodes();
        let ni = self.params.ni / self.scale;
        let mut psi: Vec<f64> = self
            .doping
            .iter()
            .map(|d| (d / (2.0 * self.params.ni)).asinh())
            .collect();
        psi[0] = self.bc_left[0];
        psi[n - 1] = self.bc_right[0];
        let mut history = Vec::new();
        let mut converged = false;
        for _ in 0..200 {
            // tridiagonal Newton
            let mut a = vec![0.0; n];
            let mut b = vec![1.0; n];
            let mut c = vec![0.0; n];
            let mut r = vec![0.0; n];
            for i in 1..n - 1 {
                let (hl, hr) = (self.h(i - 1), self.h(i));
                let w = self.dual(i);
                let (en, ep) = (ni * psi[i].exp(), ni * (-psi[i]).exp());
                r[i] = self.lambda2 * ((psi[i + 1] - psi[i]) / hr - (psi[i] - psi[i - 1]) / hl)
                    + w * (ep - en + self.doping[i] / self.scale);
                a[i] = self.lambda2 / hl;
                c[i] = self.lambda2 / hr;
                b[i] = -self.lambda2 / hl - self.lambda2 / hr - w * (ep + en);
            }
            // Thomas algorithm on J d = -r
            let mut cp = vec![0.0; n];
            let mut dp = vec![0.0; n];
            for i in 0..n {
                let m = b[i] - if i > 0 { a[i] * cp[i - 1] } else { 0.0 };
                cp[i] = c[i] / m;
                dp[i] = (-r[i] - if i > 0 { a[i] * dp[i - 1] } else { 0.0 }) / m;
            }
            let mut d = vec![0.0; n];
            d[n - 1] = dp[n - 1];
            for i in (0..n - 1).rev() {
                d[i] = dp[i] - cp[i] * d[i + 1];
            }
            let size = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let lambda = (1.0 / size.max(1e-300)).min(1.0);
            for (p, di) in psi.iter_mut().zip(&d) {
                *p += lambda * di;
            }
            history.push(size);
            if size <= 1e-13 {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::Nonlinear {
                step: 0,
                residual: history.last().copied().unwrap_or(f64::NAN),
                detail: format!("equilibrium Poisson did not converge; history {:?}", history),
            });
        }
        let u: Vec<Vector3<f64>> = psi
            .iter()
            .enumerate()
            .map(|(i, &ps)| {
                if i == 0 {
                    Vector3::from(self.bc_left)
                } else if i == n - 1 {
                    Vector3::from(self.bc_right)
                } else {
                    Vector3::new(ps, ni * ps.exp(), ni * (-ps).exp())
                }
            })
            .collect();
        let asm = self.assemble(&u, None, 0.0);
        self.finish_state(&u, &asm, None, 0.0, 0.0)
    }

    /// Steady state at bias `v`, starting from `guess`.
    pub fn solve_steady(&self, guess: &DdState, v: f64) -> Result<DdState> {
        let mut u = self.to_scaled(guess);
        // continuation in bias keeps Newton inside its basin
        let v0 = guess.voltage;
        let parts = ((v - v0).abs() / self.params.vt).ceil().max(1.0) as usize;
        for k in 1..=parts {
            let vk = v0 + (v - v0) * k as f64 / parts as f64;
            u = self.newton(u, None, vk)?.0;
        }
        let asm = self.assemble(&u, None, v);
        self.finish_state(&u, &asm, None, v, guess.time)
    }

    /// Backward-Euler step of length `dt` to bias `v`; the lumped port field
    /// `v / L` sets the mobilities.
    pub fn transient_step(&self, state: &DdState, dt: f64, v: f64) -> Result<DdState> {
        if !(dt > 0.0) {
            return Err(invalid("device time step must be positive"));
        }
        let old = self.to_scaled(state);
        // continuation in bias: the intermediate solutions only seed Newton
        let mut u = old.clone();
        let v0 = state.voltage;
        let parts = ((v - v0).abs() / self.params.vt).ceil().max(1.0) as usize;
        for k in 1..parts {
            let vk = v0 + (v - v0) * k as f64 / parts as f64;
            u[0][0] = self.bc_left[0] + vk / self.params.vt;
            u = self.newton(u, Some((&old, dt)), vk)?.0;
        }
        u[0][0] = self.bc_left[0] + v / self.params.vt;
        let (u, asm) = self.newton(u, Some((&old, dt)), v)?;
        self.finish_state(&u, &asm, Some((&old, dt)), v, state.time + dt)
    }

    /// Largest `|np / n_i^2 - 1|` over the grid.
    pub fn mass_action_error(&self, s: &DdState) -> f64 {
        let ni2 = self.params.ni * self.params.ni;
        s.n.iter()
            .zip(&s.p)
            .map(|(n, p)| (n * p / ni2 - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Device seen by a circuit as a two-terminal branch (metal contact = n+).
#[derive(Debug, Clone)]
pub struct DdPort {
    pub device: DdDevice,
    state: DdState,
    trial: Option<(u64, Option<u64>, DdState)>,
}

/// Adapter exposing a drift-diffusion device to the circuit and coupling
/// modules.
pub fn port_adapter(device: DdDevice) -> Result<DdPort> {
    let state = device.solve_equilibrium()?;
    Ok(DdPort {
        device,
        state,
        trial: None,
    })
}

impl DdPort {
    pub fn state(&self) -> &DdState {
        &self.state
    }

    fn solve(&mut self, v: f64, dt: Option<f64>) -> Result<DdState> {
        let key = (v.to_bits(), dt.map(f64::to_bits));
        if let Some((kv, kd, s)) = &self.trial {
            if (*kv, *kd) == key {
                return Ok(s.clone());
            }
        }
        let s = match dt {
            Some(dt) => self.device.transient_step(&self.state, dt, v)?,
            None => self.device.solve_steady(&self.state, v)?,
        };
        self.trial = Some((key.0, key.1, s.clone()));
        Ok(s)
    }
}

impl NonlinearBranch for DdPort {
    fn evaluate(&mut self, v: f64, _t: f64, dt: Option<f64>) -> Result<(f64, f64)> {
        let s = self.solve(v, dt)?;
        Ok((s.current, s.conductance))
    }

    fn magnitude(&self) -> f64 {
        self.trial.as_ref().map_or(0.0, |t| t.2.magnitude)
    }

    fn commit(&mut self, v: f64, t: f64, dt: Option<f64>) -> Result<()> {
        let mut s = self.solve(v, dt)?;
        s.time = t;
        self.state = s;
        self.trial = None;
        Ok(())
    }
}
