use emckt::emfem::{
    assemble_mixed_system, box_face_pec_mask, boundary_pec_mask, field_energy,
    interpolate_edge_field, Material, MixedSystem, Stepper, C0,
};
use emckt::mesh::{build_box_mesh, TetMesh};
use emckt::pml::build_stretch_profile;
use emckt::solver::GmresConfig;
use emckt::reference::dense_march;

fn cavity(n: usize, side: f64) -> (TetMesh, MixedSystem) {
    let mesh = build_box_mesh(n, n, n, [side; 3]).unwrap();
    let pec = boundary_pec_mask(&mesh);
    let sys = assemble_mixed_system(&mesh, &[Material::default()], &pec).unwrap();
    (mesh, sys)
}

fn lowest_mode_field(x: [f64; 3]) -> [f64; 3] {
    let pi = std::f64::consts::PI;
    [0.0, (pi * x[0]).sin() * (pi * x[2]).sin(), 0.0]
}

fn tight() -> GmresConfig {
    GmresConfig {
        tol: 1e-13,
        ..GmresConfig::default()
    }
}

#[test]
fn cavity_energy_is_conserved() {
    let (mesh, sys) = cavity(4, 1.0);
    let dt = 1.0 / (30.0 * 400e6);
    let stepper = Stepper::new(&sys, dt).unwrap();
    let e0 = interpolate_edge_field(&mesh, lowest_mode_field);
    let mut state = stepper.state_from(e0, vec![0.0; sys.n_faces]).unwrap();
    let zero = vec![0.0; sys.n_edges];
    let w0 = field_energy(&sys, &state);
    assert!(w0 > 0.0);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        state = stepper.step(&state, &zero, &tight()).unwrap().0;
        worst = worst.max((field_energy(&sys, &state) - w0).abs() / w0);
    }
    assert!(worst <= 1e-10, "energy drift {worst:e}");
}

#[test]
fn flux_divergence_is_invariant() {
    let (mesh, sys) = cavity(3, 1.0);
    let div = mesh.div_incidence().to_sparse();
    let stepper = Stepper::new(&sys, 1e-10).unwrap();
    let e0 = interpolate_edge_field(&mesh, |x| [x[1] * x[2], (3.0 * x[0]).sin(), x[0] * x[1]]);
    let b0: Vec<f64> = (0..sys.n_faces).map(|i| ((i * 37 % 11) as f64 - 5.0) * 1e-9).collect();
    let mut state = stepper.state_from(e0, b0).unwrap();
    let d0 = emckt::solver::spmv(&div, &state.b).unwrap();
    let scale = state.b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let zero = vec![0.0; sys.n_edges];
    for _ in 0..200 {
        state = stepper.step(&state, &zero, &GmresConfig::default()).unwrap().0;
    }
    let d1 = emckt::solver::spmv(&div, &state.b).unwrap();
    for (a, b) in d0.iter().zip(&d1) {
        assert!((a - b).abs() <= 1e-12 * scale, "{a} vs {b}");
    }
}

#[test]
fn impulse_response_matches_dense_resolvent() {
    let (mesh, sys) = cavity(2, 0.1);
    assert!(sys.free_edges() + sys.n_faces <= 200);
    let dt = 1.0 / (30.0 * 3e9);
    let stepper = Stepper::new(&sys, dt).unwrap();
    let edge = (0..mesh.n_edges()).find(|&e| !sys.pec[e]).unwrap();
    let steps = 60;
    let loads: Vec<Vec<f64>> = (0..=steps)
        .map(|k| {
            let mut l = vec![0.0; sys.n_edges];
            if k == 2 {
                l[edge] = 1.0;
            }
            l
        })
        .collect();
    let oracle = dense_march(&sys, dt, &loads);
    let mut state = stepper.initial_state();
    let scale = oracle.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(scale > 0.0);
    for k in 1..=steps {
        state = stepper.step(&state, &loads[k], &tight()).unwrap().0;
        for (a, b) in state.e.iter().zip(&oracle[k - 1]) {
            assert!((a - b).abs() <= 1e-12 * scale, "step {k}: {a} vs {b}");
        }
    }
}

/// Frequency of the largest Hann-windowed spectral peak in `[f_lo, f_hi]`.
fn spectral_peak(samples: &[f64], dt: f64, f_lo: f64, f_hi: f64) -> f64 {
    let n = samples.len();
    let mag = |f: f64| {
        let (mut re, mut im) = (0.0, 0.0);
        for (k, v) in samples.iter().enumerate() {
            let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * k as f64 / (n - 1) as f64).cos();
            let ph = 2.0 * std::f64::consts::PI * f * k as f64 * dt;
            re += w * v * ph.cos();
            im -= w * v * ph.sin();
        }
        re * re + im * im
    };
    let grid = 600;
    let mut best = (f_lo, 0.0);
    for i in 0..=grid {
        let f = f_lo + (f_hi - f_lo) * i as f64 / grid as f64;
        let m = mag(f);
        if m > best.1 {
            best = (f, m);
        }
    }
    // golden-section refinement around the grid maximum
    let h = (f_hi - f_lo) / grid as f64;
    let (mut a, mut b) = (best.0 - h, best.0 + h);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..60 {
        let x1 = b - g * (b - a);
        let x2 = a + g * (b - a);
        if mag(x1) > mag(x2) {
            b = x2;
        } else {
            a = x1;
        }
    }
    0.5 * (a + b)
}

fn cavity_resonance(n: usize) -> f64 {
    let (mesh, sys) = cavity(n, 1.0);
    let dt = 1.0 / (50.0 * 212e6);
    let stepper = Stepper::new(&sys, dt).unwrap();
    let e0 = interpolate_edge_field(&mesh, lowest_mode_field);
    let probe = mesh
        .edges
        .iter()
        .position(|&[a, b]| {
            let (pa, pb) = (mesh.vertices[a], mesh.vertices[b]);
            let mid = [0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1]), 0.5 * (pa[2] + pb[2])];
            (pb[1] - pa[1]).abs() > 0.0
                && pa[0] == pb[0]
                && pa[2] == pb[2]
                && (mid[0] - 0.5).abs() < 0.6 / n as f64
                && (mid[2] - 0.5).abs() < 0.6 / n as f64
        })
        .unwrap();
    let mut state = stepper.state_from(e0, vec![0.0; sys.n_faces]).unwrap();
    let zero = vec![0.0; sys.n_edges];
    let mut samples = vec![state.e[probe]];
    for _ in 0..600 {
        state = stepper.step(&state, &zero, &GmresConfig::default()).unwrap().0;
        samples.push(state.e[probe]);
    }
    spectral_peak(&samples, dt, 150e6, 300e6)
}

#[test]
fn cavity_resonance_converges_to_analytic_value() {
    let analytic = 0.5 * C0 * 2f64.sqrt();
    let fine = cavity_resonance(14);
    let coarse = cavity_resonance(6);
    let err_fine = (fine - analytic).abs() / analytic;
    let err_coarse = (coarse - analytic).abs() / analytic;
    println!("resonance: fine {fine:.6e} ({err_fine:.3e}), coarse {coarse:.6e} ({err_coarse:.3e})");
    assert!(err_fine <= 0.02);
    assert!(err_fine < err_coarse);
}

#[test]
fn zero_conductivity_layers_match_plain_run() {
    let (mesh, sys) = cavity(3, 1.0);
    let dt = 1e-10;
    let plain = Stepper::new(&sys, dt).unwrap();
    let profile =
        build_stretch_profile([0.0; 3], [1.0; 3], 1.0 / 3.0, 3, 1.0, [true; 6]).unwrap();
    let layered = Stepper::with_pml(&sys, &mesh, &profile, dt).unwrap();
    let e0 = interpolate_edge_field(&mesh, lowest_mode_field);
    let mut a = plain.state_from(e0.clone(), vec![0.0; sys.n_faces]).unwrap();
    let mut b = layered.state_from(e0, vec![0.0; sys.n_faces]).unwrap();
    let zero = vec![0.0; sys.n_edges];
    for _ in 0..50 {
        a = plain.step(&a, &zero, &GmresConfig::default()).unwrap().0;
        b = layered.step(&b, &zero, &GmresConfig::default()).unwrap().0;
    }
    let scale = a.e.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (x, y) in a.e.iter().zip(&b.e) {
        assert!((x - y).abs() <= 1e-14 * scale);
    }
}

mod slab {
    use super::*;

    pub const H: f64 = 0.01;
    pub const SOURCE_X: f64 = 0.2;
    pub const PROBE_X: f64 = 0.4;
    pub const INTERFACE_X: f64 = 0.6;
    pub const LAYER_CELLS: usize = 10;

    /// Normalized Gaussian-derivative current, free of DC content.
    pub fn pulse(t: f64) -> f64 {
        let sigma = 3.5 / (2.0 * std::f64::consts::PI * 1.5e9);
        let u = (t - 6.0 * sigma) / sigma;
        -u * (-0.5 * u * u).exp()
    }

    fn vertical_edges_at(mesh: &TetMesh, x: f64) -> Vec<usize> {
        (0..mesh.n_edges())
            .filter(|&e| {
                let [a, b] = mesh.edges[e];
                let (pa, pb) = (mesh.vertices[a], mesh.vertices[b]);
                (pa[0] - x).abs() < 1e-9
                    && (pb[0] - x).abs() < 1e-9
                    && pa[1] == pb[1]
                    && pa[2] != pb[2]
            })
            .collect()
    }

    /// Parallel-plate guide (PEC top and bottom, natural side walls) of the
    /// given length; probe voltage history.
    pub fn run(length: f64, with_layer: bool, end_pec: bool, steps: usize, dt: f64) -> Vec<f64> {
        let nx = (length / H).round() as usize;
        let mesh = build_box_mesh(nx, 1, 1, [length, H, H]).unwrap();
        let mut faces = vec![4, 5];
        if end_pec {
            faces.push(1);
        }
        let pec = box_face_pec_mask(&mesh, &faces);
        let sys = assemble_mixed_system(&mesh, &[Material::default()], &pec).unwrap();
        let stepper = if with_layer {
            let mut enabled = [false; 6];
            enabled[1] = true;
            let profile = build_stretch_profile(
                [0.0; 3],
                [length, H, H],
                LAYER_CELLS as f64 * H,
                3,
                1e-4,
                enabled,
            )
            .unwrap();
            Stepper::with_pml(&sys, &mesh, &profile, dt).unwrap()
        } else {
            Stepper::new(&sys, dt).unwrap()
        };
        let src = vertical_edges_at(&mesh, SOURCE_X);
        let probe = vertical_edges_at(&mesh, PROBE_X)[0];
        assert_eq!(src.len(), 2);
        let mut state = stepper.initial_state();
        let mut out = Vec::with_capacity(steps);
        for k in 1..=steps {
            let mut load = vec![0.0; sys.n_edges];
            for &e in &src {
                load[e] = pulse(k as f64 * dt);
            }
            state = stepper.step(&state, &load, &GmresConfig::default()).unwrap().0;
            out.push(state.e[probe]);
        }
        out
    }
}

#[test]
fn layer_reflection_is_below_minus_40_db() {
    use slab::*;
    let dt = 1.0 / (30.0 * 1.5e9);
    let steps = (12e-9 / dt) as usize;
    let absorbing_len = INTERFACE_X + LAYER_CELLS as f64 * H;
    let absorbed = run(absorbing_len, true, true, steps, dt);
    let pec_backed = run(INTERFACE_X, false, true, steps, dt);
    // long enough that its far-end echo reaches the probe after the gate
    let reference = run(4.0, false, true, steps, dt);
    let energy = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let residual = energy(&absorbed, &reference);
    let total = energy(&pec_backed, &reference);
    let db = 10.0 * (residual / total).log10();
    println!("layer reflection {db:.2} dB");
    assert!(db <= -40.0, "reflection {db:.2} dB");
}
