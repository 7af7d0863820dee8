use std::f64::consts::PI;

use emckt::circuit::{parse_netlist, MnaSystem, PortClosure};
use emckt_cli::post::{admittance, conversion_efficiency, dft};
use num_complex::Complex64;
use rustfft::FftPlanner;

#[test]
fn dft_matches_fft_at_bin_frequencies() {
    let n = 64;
    let dt = 2.5e-11;
    // fixed pseudo-random series
    let mut state = 0x9e37_79b9_7f4a_7c15u64;
    let x: Vec<f64> = (0..n)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        })
        .collect();
    let mut buf: Vec<Complex64> = x.iter().map(|v| Complex64::new(*v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let grid: Vec<f64> = (0..n).map(|m| m as f64 / (n as f64 * dt)).collect();
    let got = dft(&x, dt, &grid).unwrap();
    let scale = buf.iter().fold(0.0f64, |m, z| m.max(z.norm())) * dt;
    for (m, (a, b)) in got.iter().zip(&buf).enumerate() {
        assert!((a - b * dt).norm() <= 1e-12 * scale, "bin {m}: {a} vs {}", b * dt);
    }
}

fn run(deck: &str, dt: f64, steps: usize) -> Vec<Vec<f64>> {
    let mut mna = MnaSystem::new(parse_netlist(deck).unwrap(), dt).unwrap();
    (0..=steps).map(|_| mna.advance(PortClosure::Open).unwrap().x).collect()
}

#[test]
fn series_rc_admittance_matches_analytic() {
    let (r, c) = (50.0, 2e-12);
    let (f0, fbw) = (1e9, 0.5e9);
    let dt = 1.0 / (60.0 * (f0 + fbw));
    let deck = format!("V VS 1 0 gauss 1g 0.5g 1\nR R1 1 2 {r}\nC C1 2 0 {c}\n");
    let xs = run(&deck, dt, 1200);
    let v: Vec<f64> = xs.iter().map(|x| x[0]).collect();
    // source branch current flows into the source at its + terminal
    let i: Vec<f64> = xs.iter().map(|x| -x[2]).collect();
    let band: Vec<f64> = (0..=40).map(|k| f0 - fbw + k as f64 * 2.0 * fbw / 40.0).collect();
    let y = admittance(&dft(&v, dt, &band).unwrap(), &dft(&i, dt, &band).unwrap(), 1e-6).unwrap();
    let mut worst: f64 = 0.0;
    for (f, y) in band.iter().zip(&y) {
        let jw = Complex64::new(0.0, 2.0 * PI * f);
        let exact = jw * c / (1.0 + jw * r * c);
        worst = worst.max((y.unwrap() - exact).norm() / exact.norm());
    }
    println!("series RC admittance error {worst:.3e}");
    assert!(worst <= 5e-3, "relative error {worst:e}");
}

/// Half-wave rectifier with a 10 pF filter and a leaky diode; returns the
/// efficiency in percent.
fn rectifier_efficiency(load: f64) -> f64 {
    let f = 900e6;
    let dt = 1.0 / (30.0 * f);
    let deck = format!(
        "V VS 1 0 sine 900meg 0.3\nR RS 1 2 50\nD D1 2 3 is=1u n=1.05 vt=25.85m\nC CF 3 0 10p\nR RL 3 0 {load}\n"
    );
    let settle = (8.0 * load * 10e-12 / dt) as usize + 3000;
    let window = 30 * 100;
    let xs = run(&deck, dt, settle + window);
    let tail = &xs[xs.len() - window..];
    let mut p_src = 0.0;
    let mut v_out = 0.0;
    for x in tail {
        p_src += x[0] * (x[0] - x[1]) / 50.0;
        v_out += x[2];
    }
    let (p_src, v_out) = (p_src / window as f64, v_out / window as f64);
    conversion_efficiency(v_out * v_out / load, p_src).unwrap()
}

#[test]
fn rectifier_efficiency_rises_to_a_peak_over_a_load_sweep() {
    let loads = [100.0, 300.0, 1e3, 3e3, 1e4, 3e4, 1e5];
    let eta: Vec<f64> = loads.iter().map(|r| rectifier_efficiency(*r)).collect();
    println!("load sweep efficiency {eta:.2?}");
    assert!(eta.iter().all(|e| *e > 0.0 && *e < 100.0));
    let peak = eta
        .iter()
        .enumerate()
        .fold(0, |best, (k, e)| if *e > eta[best] { k } else { best });
    assert!(peak > 0 && peak + 1 < eta.len(), "no interior peak: {eta:?}");
    for k in 1..=peak {
        assert!(eta[k] > eta[k - 1], "not monotone below the peak: {eta:?}");
    }
}
