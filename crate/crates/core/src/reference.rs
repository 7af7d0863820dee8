//! Dense brute-force references for small meshes (a few hundred unknowns).

use nalgebra::{DMatrix, DVector};

use crate::coupling::{impress_current, read_port_voltage, CouplingMap};
use crate::emfem::MixedSystem;

/// First-order system `H x' = S x + F` on free unknowns, marched with dense
/// trapezoidal matrices (no elimination of `b`).
pub fn dense_march(sys: &MixedSystem, dt: f64, loads: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let free: Vec<usize> = (0..sys.n_edges).filter(|&i| !sys.pec[i]).collect();
    let ne = free.len();
    let nf = sys.n_faces;
    let n = ne + nf;
    let me = sys.mass_e.to_dense();
    let mf = sys.mass_f.to_dense();
    let c = sys.curl.to_dense();
    let mut h = DMatrix::<f64>::zeros(n, n);
    let mut s = DMatrix::<f64>::zeros(n, n);
    for (i, &gi) in free.iter().enumerate() {
        for (j, &gj) in free.iter().enumerate() {
            h[(i, j)] = me[gi][gj];
        }
    }
    for f in 0..nf {
        for g in 0..nf {
            h[(ne + f, ne + g)] = mf[f][g];
        }
    }
    // S = [[0, C^T M_f], [-M_f C, 0]]
    for f in 0..nf {
        for (j, &gj) in free.iter().enumerate() {
            let mut acc = 0.0;
            for g in 0..nf {
                acc += mf[f][g] * c[g][gj];
            }
            s[(ne + f, j)] = -acc;
            s[(j, ne + f)] = acc;
        }
    }
    let lhs = &h / dt - &s * 0.5;
    let rhs_m = &h / dt + &s * 0.5;
    let lu = lhs.lu();
    let mut x = DVector::<f64>::zeros(n);
    let mut out = Vec::new();
    for k in 1..loads.len() {
        let mut r = &rhs_m * &x;
        for (i, &gi) in free.iter().enumerate() {
            r[i] += 0.5 * (loads[k - 1][gi] + loads[k][gi]);
        }
        x = lu.solve(&r).unwrap();
        let mut e = vec![0.0; sys.n_edges];
        for (i, &gi) in free.iter().enumerate() {
            e[gi] = x[i];
        }
        out.push(e);
    }
    out
}

/// `G[k][q][lag]` from dense marches with a unit hat current at `t_delta`.
pub fn dense_responses(
    sys: &MixedSystem,
    map: &CouplingMap,
    dt: f64,
    n_t: usize,
    t_delta: usize,
) -> Vec<Vec<Vec<f64>>> {
    let np = map.n_ports();
    let mut g = vec![vec![Vec::with_capacity(n_t); np]; np];
    for q in 0..np {
        let mut cur = vec![0.0; np];
        cur[q] = 1.0;
        let excite = impress_current(map, &cur);
        let loads: Vec<Vec<f64>> = (0..t_delta + n_t)
            .map(|s| if s == t_delta { excite.clone() } else { vec![0.0; sys.n_edges] })
            .collect();
        let fields = dense_march(sys, dt, &loads);
        for e in &fields[t_delta - 1..] {
            for (k, v) in read_port_voltage(map, e).into_iter().enumerate() {
                g[k][q].push(v);
            }
        }
    }
    g
}
