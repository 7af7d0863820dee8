//! Stretched-coordinate absorbing layers evaluated by direct recursive
//! convolution.
//!
//! With `s_i = 1 + sigma_i / (j w eps0)` the diagonal entry of `j w Lambda`
//! for direction `x` is `(s + a)(s + b)/(s + c)` where `s = j w`,
//! `a = sigma_y/eps0`, `b = sigma_z/eps0`, `c = sigma_x/eps0`; the
//! corresponding entry of `Lambda^{-1}` is `s (s + c) / ((s + a)(s + b))`.
//! Both split exactly into a `delta'`/`delta` part plus decaying exponentials,
//! and the exponential parts are convolved recursively against the
//! piecewise-linear field history.

use num_complex::Complex64;

use crate::emfem::{
    local_edge_mass_by_direction, local_face_mass_by_direction, MixedSystem, C0, EPS0, MU0,
};
use crate::error::{invalid, Result};
use crate::mesh::{local_curl_incidence, TetMesh, Vec3};

/// Above this `rate * dt` a term is treated as fully decayed within one step.
pub const DECAY_GUARD: f64 = 700.0;

/// Graded conductivity layers lining selected faces of an axis-aligned box.
#[derive(Debug, Clone, PartialEq)]
pub struct StretchProfile {
    pub lo: Vec3,
    pub hi: Vec3,
    pub thickness: f64,
    pub order: u32,
    pub sigma_max: f64,
    /// Enabled faces, indexed `2 * axis + side` (side 0 = lower plane).
    pub faces: [bool; 6],
}

/// `sigma_max = -(m + 1) eps0 c ln(R0) / (2 d)`.
pub fn sigma_max_for(order: u32, thickness: f64, r0: f64) -> f64 {
    -(f64::from(order) + 1.0) * EPS0 * C0 * r0.ln() / (2.0 * thickness)
}

pub fn build_stretch_profile(
    lo: Vec3,
    hi: Vec3,
    thickness: f64,
    order: u32,
    r0: f64,
    faces: [bool; 6],
) -> Result<StretchProfile> {
    if order < 1 {
        return Err(invalid("PML grading order must be at least 1"));
    }
    if !(r0 > 0.0 && r0 <= 1.0) {
        return Err(invalid("PML target reflection must lie in (0, 1]"));
    }
    if !(thickness >= 0.0) {
        return Err(invalid("PML thickness must be non-negative"));
    }
    if thickness == 0.0 && r0 < 1.0 {
        return Err(invalid("zero PML thickness cannot reach a reflection below 1"));
    }
    for axis in 0..3 {
        if hi[axis] - lo[axis] < thickness * (faces[2 * axis] as u8 + faces[2 * axis + 1] as u8) as f64
        {
            return Err(invalid("PML layers thicker than the box"));
        }
    }
    let sigma_max = if thickness == 0.0 {
        0.0
    } else {
        sigma_max_for(order, thickness, r0)
    };
    Ok(StretchProfile {
        lo,
        hi,
        thickness,
        order,
        sigma_max,
        faces,
    })
}

impl StretchProfile {
    /// Conductivity at layer depth `depth` (meters into the layer).
    pub fn sigma_at_depth(&self, depth: f64) -> f64 {
        if depth <= 0.0 || self.thickness == 0.0 {
            0.0
        } else {
            self.sigma_max * (depth.min(self.thickness) / self.thickness).powi(self.order as i32)
        }
    }

    /// Per-direction conductivity `[sigma_x, sigma_y, sigma_z]` at `x`.
    pub fn sigma(&self, x: Vec3) -> Vec3 {
        let mut s = [0.0; 3];
        for axis in 0..3 {
            let mut depth: f64 = 0.0;
            if self.faces[2 * axis] {
                depth = depth.max(self.lo[axis] + self.thickness - x[axis]);
            }
            if self.faces[2 * axis + 1] {
                depth = depth.max(x[axis] - (self.hi[axis] - self.thickness));
            }
            s[axis] = self.sigma_at_depth(depth);
        }
        s
    }

    /// Plane-wave reflection `exp(-2/(eps0 c) * int_0^d sigma)` of the
    /// continuous profile, integrated numerically.
    pub fn normal_reflection(&self) -> f64 {
        let n = 2000;
        let h = self.thickness / n as f64;
        // composite Simpson
        let mut acc = self.sigma_at_depth(0.0) + self.sigma_at_depth(self.thickness);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * self.sigma_at_depth(i as f64 * h);
        }
        let integral = acc * h / 3.0;
        (-2.0 * integral / (EPS0 * C0)).exp()
    }
}

/// One causal kernel term `amplitude * t^power * exp(-rate t)`, `t >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelTerm {
    pub amplitude: f64,
    pub rate: f64,
    pub power: u8,
}

impl KernelTerm {
    pub fn eval(&self, t: f64) -> f64 {
        if t < 0.0 {
            0.0
        } else {
            self.amplitude * t.powi(i32::from(self.power)) * (-self.rate * t).exp()
        }
    }

    pub fn response(&self, s: Complex64) -> Complex64 {
        // power is 0 or 1, so power! == 1
        self.amplitude / (s + self.rate).powi(i32::from(self.power) + 1)
    }
}

/// `deriv * delta' + delta_coef * delta + sum(terms)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Kernel {
    pub deriv: f64,
    pub delta: f64,
    pub terms: Vec<KernelTerm>,
}

impl Kernel {
    /// Laplace-domain response at `s`.
    pub fn response(&self, s: Complex64) -> Complex64 {
        let mut r = self.deriv * s + self.delta;
        for t in &self.terms {
            r += t.response(s);
        }
        r
    }

    pub fn is_identity_like(&self) -> bool {
        self.terms.is_empty()
    }
}

/// Kernels of one diagonal entry: `L1` (from `j w Lambda`) and `L2` (from
/// `Lambda^{-1}`).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KernelDecomposition {
    pub l1: Kernel,
    pub l2: Kernel,
}

/// Relative tolerance below which two poles are merged into a double pole.
const POLE_MERGE: f64 = 1e-8;

/// Partial-fraction kernels for `a = sigma_1/eps0`, `b = sigma_2/eps0`
/// (the two transverse directions) and `c = sigma/eps0` of the entry's own
/// direction.
pub fn derive_kernels(a: f64, b: f64, c: f64) -> Result<KernelDecomposition> {
    if !(a >= 0.0 && b >= 0.0 && c >= 0.0) || !(a + b + c).is_finite() {
        return Err(invalid("stretch parameters must be finite and non-negative"));
    }
    // (s+a)(s+b)/(s+c) = s + (a+b-c) + (a-c)(b-c)/(s+c)
    let mut l1 = Kernel {
        deriv: 1.0,
        delta: a + b - c,
        terms: Vec::new(),
    };
    let amp = (a - c) * (b - c);
    if amp != 0.0 {
        l1.terms.push(KernelTerm {
            amplitude: amp,
            rate: c,
            power: 0,
        });
    }

    // s(s+c)/((s+a)(s+b)) = 1 + [(c-a-b)s - ab]/((s+a)(s+b))
    let mut l2 = Kernel {
        deriv: 0.0,
        delta: 1.0,
        terms: Vec::new(),
    };
    let scale = a.max(b);
    if (a - b).abs() <= POLE_MERGE * scale || scale == 0.0 {
        let p = 0.5 * (a + b);
        // 1 + (c-2p)/(s+p) + p(p-c)/(s+p)^2
        if c - 2.0 * p != 0.0 {
            l2.terms.push(KernelTerm {
                amplitude: c - 2.0 * p,
                rate: p,
                power: 0,
            });
        }
        if p * (p - c) != 0.0 {
            l2.terms.push(KernelTerm {
                amplitude: p * (p - c),
                rate: p,
                power: 1,
            });
        }
    } else {
        let ra = a * (a - c) / (b - a);
        let rb = b * (b - c) / (a - b);
        if ra != 0.0 {
            l2.terms.push(KernelTerm {
                amplitude: ra,
                rate: a,
                power: 0,
            });
        }
        if rb != 0.0 {
            l2.terms.push(KernelTerm {
                amplitude: rb,
                rate: b,
                power: 0,
            });
        }
    }
    Ok(KernelDecomposition { l1, l2 })
}

/// Kernels for the three diagonal entries at a point with conductivity
/// `sigma = [sigma_x, sigma_y, sigma_z]`.
pub fn tensor_kernels(sigma: Vec3) -> Result<[KernelDecomposition; 3]> {
    let n = sigma.map(|s| s / EPS0);
    Ok([
        derive_kernels(n[1], n[2], n[0])?,
        derive_kernels(n[0], n[2], n[1])?,
        derive_kernels(n[0], n[1], n[2])?,
    ])
}

/// `int_0^1 s^k exp(-x s) ds` for k = 0, 1, 2.
fn moment(k: usize, x: f64) -> f64 {
    if x < 1.0 {
        // alternating series, converges quickly for x < 1
        let mut term = 1.0;
        let mut acc = 0.0;
        for m in 0..40 {
            if m > 0 {
                term *= -x / m as f64;
            }
            acc += term / (k + m + 1) as f64;
        }
        acc
    } else {
        let e = (-x).exp();
        match k {
            0 => (1.0 - e) / x,
            1 => (1.0 - (1.0 + x) * e) / (x * x),
            _ => (2.0 - (2.0 + 2.0 * x + x * x) * e) / (x * x * x),
        }
    }
}

/// Per-step weights of the recursive update for one kernel rate, assuming
/// the signal is linear within each step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepWeights {
    pub dt: f64,
    pub decay: f64,
    pub old0: f64,
    pub new0: f64,
    pub old1: f64,
    pub new1: f64,
}

impl StepWeights {
    pub fn new(rate: f64, dt: f64) -> Self {
        let x = rate * dt;
        let decay = if x > DECAY_GUARD { 0.0 } else { (-x).exp() };
        let (g0, g1, g2) = (moment(0, x), moment(1, x), moment(2, x));
        Self {
            dt,
            decay,
            old0: dt * g1,
            new0: dt * (g0 - g1),
            old1: dt * dt * g2,
            new1: dt * dt * (g1 - g2),
        }
    }

    /// Coefficient of the new sample in the accumulator of the given power.
    pub fn new_weight(&self, power: u8) -> f64 {
        if power == 0 {
            self.new0
        } else {
            self.new1
        }
    }
}

/// Running state of `int_0^t t'^power exp(-rate t') x(t - t') dt'` for a
/// scalar signal; `p0` is the zeroth-power companion needed by power 1.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Accumulator {
    pub p0: f64,
    pub p1: f64,
}

/// Advances one accumulator by a step from sample `old` to sample `new`.
pub fn recursive_convolution_update(
    acc: Accumulator,
    w: &StepWeights,
    old: f64,
    new: f64,
) -> Accumulator {
    Accumulator {
        p0: w.decay * acc.p0 + w.old0 * old + w.new0 * new,
        p1: w.decay * (acc.p1 + w.dt * acc.p0) + w.old1 * old + w.new1 * new,
    }
}

/// Scalar convolution of a sampled signal with one kernel term.
#[derive(Debug, Clone)]
pub struct TermConvolver {
    pub term: KernelTerm,
    pub weights: StepWeights,
    acc: Accumulator,
    last: f64,
}

impl TermConvolver {
    pub fn new(term: KernelTerm, dt: f64) -> Self {
        Self {
            term,
            weights: StepWeights::new(term.rate, dt),
            acc: Accumulator::default(),
            last: 0.0,
        }
    }

    /// Pushes the next sample and returns the convolution value at its time.
    pub fn push(&mut self, sample: f64) -> f64 {
        self.acc = recursive_convolution_update(self.acc, &self.weights, self.last, sample);
        self.last = sample;
        self.value()
    }

    pub fn value(&self) -> f64 {
        let v = if self.term.power == 0 {
            self.acc.p0
        } else {
            self.acc.p1
        };
        self.term.amplitude * v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Space {
    Edge,
    Face,
}

#[derive(Debug, Clone)]
struct Channel {
    tet: usize,
    dir: usize,
    space: Space,
    amplitude: f64,
    power: u8,
    weights: StepWeights,
    /// Offset into the accumulator arrays (6 or 4 entries).
    offset: usize,
}

impl Channel {
    fn len(&self) -> usize {
        match self.space {
            Space::Edge => 6,
            Space::Face => 4,
        }
    }
}

#[derive(Debug, Clone)]
struct PmlTet {
    edges: [usize; 6],
    faces: [usize; 4],
    /// `eps * int W1_d W1_d` per direction.
    me: [[[f64; 6]; 6]; 3],
    /// `mu^-1 * int W2_d W2_d` per direction.
    mf: [[[f64; 4]; 4]; 3],
    /// Delta coefficients of `L1` per direction.
    l1_delta: [f64; 3],
}

/// Per-run accumulators for every layer tetrahedron and kernel term.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvolutionState {
    pub p0: Vec<f64>,
    pub p1: Vec<f64>,
}

/// Absorbing-layer contributions to the implicit step.
#[derive(Debug, Clone)]
pub struct PmlOperator {
    dt: f64,
    tets: Vec<PmlTet>,
    channels: Vec<Channel>,
    n_acc: usize,
}

fn matvec<const N: usize>(m: &[[f64; N]; N], x: &[f64; N]) -> [f64; N] {
    let mut y = [0.0; N];
    for i in 0..N {
        for j in 0..N {
            y[i] += m[i][j] * x[j];
        }
    }
    y
}

impl PmlOperator {
    pub fn new(
        mesh: &TetMesh,
        system: &MixedSystem,
        profile: &StretchProfile,
        dt: f64,
    ) -> Result<Self> {
        let mut tets = Vec::new();
        let mut channels = Vec::new();
        let mut n_acc = 0;
        for t in 0..mesh.n_tets() {
            let geo = mesh.geometry(t);
            let sigma = profile.sigma(geo.centroid());
            if sigma.iter().all(|s| *s == 0.0) {
                continue;
            }
            let mat = system
                .materials
                .get(mesh.materials[t] as usize)
                .copied()
                .unwrap_or_default();
            let eps = EPS0 * mat.eps_r;
            let inv_mu = 1.0 / (MU0 * mat.mu_r);
            let mut me = local_edge_mass_by_direction(&geo);
            let mut mf = local_face_mass_by_direction(&geo);
            me.iter_mut().flatten().flatten().for_each(|v| *v *= eps);
            mf.iter_mut().flatten().flatten().for_each(|v| *v *= inv_mu);
            let kernels = tensor_kernels(sigma)?;
            let index = tets.len();
            for (dir, k) in kernels.iter().enumerate() {
                for (space, kernel) in [(Space::Edge, &k.l1), (Space::Face, &k.l2)] {
                    for term in &kernel.terms {
                        let ch = Channel {
                            tet: index,
                            dir,
                            space,
                            amplitude: term.amplitude,
                            power: term.power,
                            weights: StepWeights::new(term.rate, dt),
                            offset: n_acc,
                        };
                        n_acc += ch.len();
                        channels.push(ch);
                    }
                }
            }
            tets.push(PmlTet {
                edges: mesh.tet_edges[t],
                faces: mesh.tet_faces[t],
                me,
                mf,
                l1_delta: [kernels[0].l1.delta, kernels[1].l1.delta, kernels[2].l1.delta],
            });
        }
        Ok(Self {
            dt,
            tets,
            channels,
            n_acc,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.tets.is_empty()
    }

    pub fn n_tets(&self) -> usize {
        self.tets.len()
    }

    pub fn initial_state(&self) -> ConvolutionState {
        ConvolutionState {
            p0: vec![0.0; self.n_acc],
            p1: vec![0.0; self.n_acc],
        }
    }

    /// Local implicit-matrix coefficients: per-direction edge weights and
    /// per-direction face weights.
    fn implicit_coefficients(&self, tet: usize) -> ([f64; 3], [f64; 3]) {
        let pt = &self.tets[tet];
        let mut ce = pt.l1_delta.map(|d| 0.5 * d);
        let mut cf = [0.0; 3];
        for ch in self.channels.iter().filter(|c| c.tet == tet) {
            let w = ch.amplitude * ch.weights.new_weight(ch.power);
            match ch.space {
                Space::Edge => ce[ch.dir] += 0.5 * w,
                Space::Face => cf[ch.dir] += w,
            }
        }
        (ce, cf)
    }

    /// Extra entries of the implicit step matrix (PEC rows and columns
    /// skipped).
    pub fn matrix_triplets(&self, pec: &[bool]) -> Vec<(usize, usize, f64)> {
        let c = local_curl_incidence();
        let mut out = Vec::new();
        for (ti, pt) in self.tets.iter().enumerate() {
            let (ce, cf) = self.implicit_coefficients(ti);
            let mut local = [[0.0; 6]; 6];
            for d in 0..3 {
                for i in 0..6 {
                    for j in 0..6 {
                        local[i][j] += ce[d] * pt.me[d][i][j];
                    }
                }
            }
            let mut q = [[0.0; 4]; 4];
            for d in 0..3 {
                for f in 0..4 {
                    for g in 0..4 {
                        q[f][g] += cf[d] * pt.mf[d][f][g];
                    }
                }
            }
            let quarter = 0.25 * self.dt;
            for i in 0..6 {
                for j in 0..6 {
                    let mut acc = 0.0;
                    for f in 0..4 {
                        for g in 0..4 {
                            acc += f64::from(c[f][i]) * q[f][g] * f64::from(c[g][j]);
                        }
                    }
                    local[i][j] += quarter * acc;
                }
            }
            for i in 0..6 {
                for j in 0..6 {
                    let (r, col) = (pt.edges[i], pt.edges[j]);
                    if !pec[r] && !pec[col] && local[i][j] != 0.0 {
                        out.push((r, col, local[i][j]));
                    }
                }
            }
        }
        out
    }

    fn gather<const N: usize>(ids: &[usize; N], v: &[f64]) -> [f64; N] {
        std::array::from_fn(|i| v[ids[i]])
    }

    /// Adds the known (history) part of the layer terms to `rhs`.
    pub fn add_history_rhs(&self, acc: &ConvolutionState, e0: &[f64], b0: &[f64], rhs: &mut [f64]) {
        let c = local_curl_incidence();
        let half_dt = 0.5 * self.dt;
        let mut local_rhs: Vec<[f64; 6]> = vec![[0.0; 6]; self.tets.len()];
        let mut face_force: Vec<[f64; 4]> = vec![[0.0; 4]; self.tets.len()];
        let mut e_loc = Vec::with_capacity(self.tets.len());
        let mut b_loc = Vec::with_capacity(self.tets.len());
        for (ti, pt) in self.tets.iter().enumerate() {
            let e = Self::gather(&pt.edges, e0);
            let b = Self::gather(&pt.faces, b0);
            for d in 0..3 {
                let me_e = matvec(&pt.me[d], &e);
                for i in 0..6 {
                    local_rhs[ti][i] -= 0.5 * pt.l1_delta[d] * me_e[i];
                }
            }
            // b_tilde = b0 - dt/2 C e0 (known part of b1)
            let mut bt = b;
            for f in 0..4 {
                for (i, ei) in e.iter().enumerate() {
                    bt[f] -= half_dt * f64::from(c[f][i]) * ei;
                }
            }
            e_loc.push(e);
            b_loc.push((b, bt));
        }
        for ch in &self.channels {
            let w = &ch.weights;
            let pt = &self.tets[ch.tet];
            match ch.space {
                Space::Edge => {
                    let e = &e_loc[ch.tet];
                    let mut avg = [0.0; 6];
                    for i in 0..6 {
                        let k = ch.offset + i;
                        let (now, known) = if ch.power == 0 {
                            (acc.p0[k], w.decay * acc.p0[k] + w.old0 * e[i])
                        } else {
                            (
                                acc.p1[k],
                                w.decay * (acc.p1[k] + w.dt * acc.p0[k]) + w.old1 * e[i],
                            )
                        };
                        avg[i] = 0.5 * ch.amplitude * (now + known);
                    }
                    let m = matvec(&pt.me[ch.dir], &avg);
                    for i in 0..6 {
                        local_rhs[ch.tet][i] -= m[i];
                    }
                }
                Space::Face => {
                    let (b, bt) = &b_loc[ch.tet];
                    let wn = w.new_weight(ch.power);
                    let mut avg = [0.0; 4];
                    for f in 0..4 {
                        let k = ch.offset + f;
                        let (now, known) = if ch.power == 0 {
                            (acc.p0[k], w.decay * acc.p0[k] + w.old0 * b[f])
                        } else {
                            (
                                acc.p1[k],
                                w.decay * (acc.p1[k] + w.dt * acc.p0[k]) + w.old1 * b[f],
                            )
                        };
                        avg[f] = 0.5 * ch.amplitude * (now + known + wn * bt[f]);
                    }
                    let m = matvec(&pt.mf[ch.dir], &avg);
                    for f in 0..4 {
                        face_force[ch.tet][f] += m[f];
                    }
                }
            }
        }
        for (ti, pt) in self.tets.iter().enumerate() {
            for i in 0..6 {
                let mut v = local_rhs[ti][i];
                for f in 0..4 {
                    v += f64::from(c[f][i]) * face_force[ti][f];
                }
                rhs[pt.edges[i]] += v;
            }
        }
    }

    /// Accumulators after the step `(e0, b0) -> (e1, b1)`.
    pub fn advance(
        &self,
        acc: &ConvolutionState,
        e0: &[f64],
        e1: &[f64],
        b0: &[f64],
        b1: &[f64],
    ) -> ConvolutionState {
        let mut next = acc.clone();
        for ch in &self.channels {
            let pt = &self.tets[ch.tet];
            let ids: &[usize] = match ch.space {
                Space::Edge => &pt.edges,
                Space::Face => &pt.faces,
            };
            let (old, new) = match ch.space {
                Space::Edge => (e0, e1),
                Space::Face => (b0, b1),
            };
            for (i, &g) in ids.iter().enumerate() {
                let k = ch.offset + i;
                let a = recursive_convolution_update(
                    Accumulator {
                        p0: acc.p0[k],
                        p1: acc.p1[k],
                    },
                    &ch.weights,
                    old[g],
                    new[g],
                );
                next.p0[k] = a.p0;
                next.p1[k] = a.p1;
            }
        }
        next
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64) / ((1u64 << 53) as f64)
    }

    #[test]
    fn sigma_max_vanishes_as_reflection_approaches_one() {
        let p = build_stretch_profile([0.0; 3], [1.0; 3], 0.1, 3, 1.0 - 1e-12, [true; 6]).unwrap();
        assert!(p.sigma_max < 1e-12);
        let p = build_stretch_profile([0.0; 3], [1.0; 3], 0.1, 3, 1.0, [true; 6]).unwrap();
        assert_eq!(p.sigma_max, 0.0);
    }

    #[test]
    fn sigma_zero_at_interface_and_outside() {
        let p = build_stretch_profile([0.0; 3], [1.0; 3], 0.1, 3, 1e-4, [true; 6]).unwrap();
        assert_eq!(p.sigma_at_depth(0.0), 0.0);
        assert_eq!(p.sigma([0.5, 0.5, 0.5]), [0.0; 3]);
        assert_eq!(p.sigma([0.9, 0.5, 0.5]), [0.0; 3]);
        let s = p.sigma([0.95, 0.5, 0.02]);
        assert!(s[0] > 0.0 && s[1] == 0.0 && s[2] > 0.0);
    }

    #[test]
    fn sigma_max_reproduces_target_reflection() {
        let p = build_stretch_profile([0.0; 3], [1.0; 3], 0.1, 3, 1e-4, [true; 6]).unwrap();
        // hand evaluation: 4 * eps0 * c * ln(1e4) / 0.2
        let expected = 4.0 * EPS0 * C0 * 1e4f64.ln() / 0.2;
        assert!((p.sigma_max - expected).abs() < 1e-12 * expected);
        assert!((p.normal_reflection() - 1e-4).abs() < 1e-10);
    }

    #[test]
    fn profile_rejects_bad_input() {
        assert!(build_stretch_profile([0.0; 3], [1.0; 3], 0.0, 3, 1e-4, [true; 6]).is_err());
        assert!(build_stretch_profile([0.0; 3], [1.0; 3], 0.1, 0, 1e-4, [true; 6]).is_err());
        assert!(build_stretch_profile([0.0; 3], [1.0; 3], 0.1, 3, 0.0, [true; 6]).is_err());
        assert!(build_stretch_profile([0.0; 3], [1.0; 3], 0.6, 3, 1e-4, [true; 6]).is_err());
    }

    #[test]
    fn equal_parameters_collapse_to_pure_terms() {
        let k = derive_kernels(2.5e9, 2.5e9, 2.5e9).unwrap();
        assert_eq!(k.l1.deriv, 1.0);
        assert_eq!(k.l1.delta, 2.5e9);
        assert!(k.l1.terms.is_empty());
    }

    #[test]
    fn vacuum_kernels_are_identity() {
        let k = derive_kernels(0.0, 0.0, 0.0).unwrap();
        assert_eq!(
            k.l1,
            Kernel {
                deriv: 1.0,
                delta: 0.0,
                terms: vec![]
            }
        );
        assert_eq!(
            k.l2,
            Kernel {
                deriv: 0.0,
                delta: 1.0,
                terms: vec![]
            }
        );
        assert!(derive_kernels(-1.0, 0.0, 0.0).is_err());
    }

    fn check_frequency_response(a: f64, b: f64, c: f64) {
        let k = derive_kernels(a, b, c).unwrap();
        for i in 0..100 {
            let w = 1e7 * 10f64.powf(i as f64 * 0.05);
            let s = Complex64::new(0.0, w);
            let one = Complex64::new(1.0, 0.0);
            let sx = one + c / s;
            let sy = one + a / s;
            let sz = one + b / s;
            let l1 = s * sy * sz / sx;
            let l2 = sx / (sy * sz);
            let r1 = k.l1.response(s);
            let r2 = k.l2.response(s);
            assert!((r1 - l1).norm() <= 1e-10 * l1.norm(), "L1 at w={w}: {r1} vs {l1}");
            assert!((r2 - l2).norm() <= 1e-10 * l2.norm(), "L2 at w={w}: {r2} vs {l2}");
        }
    }

    #[test]
    fn decomposition_matches_frequency_sweep() {
        let mut seed = 5;
        for _ in 0..20 {
            let a = 1e10 * lcg(&mut seed);
            let b = 1e10 * lcg(&mut seed);
            let c = 1e10 * lcg(&mut seed);
            check_frequency_response(a, b, c);
        }
        // degenerate pole pairs and vanishing parameters
        check_frequency_response(3e9, 3e9, 1e9);
        check_frequency_response(3e9, 3e9, 0.0);
        check_frequency_response(0.0, 0.0, 4e9);
        check_frequency_response(2e9, 5e9, 0.0);
    }

    #[test]
    fn zero_history_gives_zero() {
        let mut conv = TermConvolver::new(
            KernelTerm {
                amplitude: 2.0,
                rate: 1e9,
                power: 0,
            },
            1e-11,
        );
        for _ in 0..10 {
            assert_eq!(conv.push(0.0), 0.0);
        }
    }

    #[test]
    fn constant_signal_converges_to_steady_value() {
        let (amp, rate, dt, f) = (3.0, 2e9, 1e-10, 0.7);
        let mut conv = TermConvolver::new(
            KernelTerm {
                amplitude: amp,
                rate,
                power: 0,
            },
            dt,
        );
        let target = amp * f / rate;
        let q = (-rate * dt).exp();
        conv.push(f);
        let mut prev_err = (conv.value() - target).abs();
        for _ in 0..200 {
            conv.push(f);
            let err = (conv.value() - target).abs();
            assert!(err <= q * prev_err * (1.0 + 1e-9) + 1e-15 * target);
            prev_err = err;
        }
        assert!(prev_err < 1e-12 * target);
    }

    /// Direct O(N^2) discrete convolution: each sample's hat function is
    /// integrated against the kernel with Gauss-Legendre quadrature.
    fn direct_convolution(term: KernelTerm, dt: f64, x: &[f64]) -> Vec<f64> {
        const G: [(f64, f64); 8] = [
            (-0.960_289_856_497_536_3, 0.101_228_536_290_376_3),
            (-0.796_666_477_413_626_7, 0.222_381_034_453_374_5),
            (-0.525_532_409_916_329, 0.313_706_645_877_887_3),
            (-0.183_434_642_495_649_8, 0.362_683_783_378_362),
            (0.183_434_642_495_649_8, 0.362_683_783_378_362),
            (0.525_532_409_916_329, 0.313_706_645_877_887_3),
            (0.796_666_477_413_626_7, 0.222_381_034_453_374_5),
            (0.960_289_856_497_536_3, 0.101_228_536_290_376_3),
        ];
        let integrate = |lo: f64, hi: f64, f: &dyn Fn(f64) -> f64| -> f64 {
            let (m, h) = (0.5 * (lo + hi), 0.5 * (hi - lo));
            G.iter().map(|(s, w)| w * h * f(m + h * s)).sum()
        };
        let n = x.len();
        let mut out = vec![0.0; n];
        for i in 0..n {
            let ti = i as f64 * dt;
            let mut acc = 0.0;
            for (j, xj) in x.iter().enumerate().take(i + 1) {
                let tj = j as f64 * dt;
                // rising half on [t_{j-1}, t_j] (absent for j = 0)
                if j > 0 {
                    acc += xj
                        * integrate(tj - dt, tj, &|t| term.eval(ti - t) * (t - (tj - dt)) / dt);
                }
                // falling half on [t_j, t_{j+1}] truncated at t_i
                if j < i {
                    acc += xj * integrate(tj, tj + dt, &|t| term.eval(ti - t) * (tj + dt - t) / dt);
                }
            }
            out[i] = acc;
        }
        out
    }

    fn check_recursive_against_direct(term: KernelTerm, dt: f64, x: &[f64]) {
        let direct = direct_convolution(term, dt, x);
        let mut conv = TermConvolver::new(term, dt);
        let scale = direct.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        for (i, xi) in x.iter().enumerate() {
            let v = conv.push(*xi);
            assert!((v - direct[i]).abs() <= 1e-12 * scale, "step {i}: {v} vs {}", direct[i]);
        }
    }

    #[test]
    fn recursive_matches_direct_convolution() {
        let mut seed = 99;
        let x: Vec<f64> = std::iter::once(0.0)
            .chain((1..50).map(|_| lcg(&mut seed) - 0.5))
            .collect();
        for (rate, power) in [(0.0, 0), (5e8, 0), (3e9, 0), (5e8, 1), (3e9, 1), (4e10, 0)] {
            let term = KernelTerm {
                amplitude: 1.7,
                rate,
                power,
            };
            check_recursive_against_direct(term, 1e-10, &x);
        }
    }

    #[test]
    fn large_decay_is_guarded() {
        let w = StepWeights::new(1e15, 1e-9);
        assert_eq!(w.decay, 0.0);
        assert!(w.new0.is_finite() && w.old0.is_finite());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn recursive_equals_direct(
                samples in proptest::collection::vec(-1.0f64..1.0, 2..40),
                rate_exp in 6.0f64..10.5,
                power in 0u8..2,
            ) {
                let mut x = samples;
                x[0] = 0.0;
                let term = KernelTerm { amplitude: 1.0, rate: 10f64.powf(rate_exp), power };
                check_recursive_against_direct(term, 1e-10, &x);
            }
        }
    }
}
