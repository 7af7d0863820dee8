//! Browser bindings for a small cavity and a drift-diffusion diode.

use emckt::circuit::{decks, parse_netlist, MnaSystem};
use emckt::coupling::{build_coupling, coupled_transient_solve, relative_l2, CoupledConfig, CouplingMap};
use emckt::device_dd::{DdDevice, DdParams};
use emckt::emfem::{assemble_mixed_system, boundary_pec_mask, Material, Stepper};
use emckt::mesh::{build_box_mesh, resolve_port};
use emckt::portx::{extract, replay_transient_solve};
use emckt::solver::GmresConfig;
use wasm_bindgen::prelude::*;

fn js(e: emckt::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// 0.2 x 0.15 x 0.1 m PEC box with `4k x 3k x 2k` cells and one floor port.
fn cavity(refine: usize) -> Result<(Stepper, CouplingMap), JsError> {
    if !(1..=3).contains(&refine) {
        return Err(JsError::new("refinement must be 1, 2 or 3"));
    }
    let k = refine;
    let mesh = build_box_mesh(4 * k, 3 * k, 2 * k, [0.2, 0.15, 0.1]).map_err(js)?;
    let pec = boundary_pec_mask(&mesh);
    let sys = assemble_mixed_system(&mesh, &[Material::default()], &pec).map_err(js)?;
    let stepper = Stepper::new(&sys, 1.0 / (30.0 * 2e9)).map_err(js)?;
    let port = resolve_port(&mesh, 0, "feed", [0.1, 0.05, 0.0], [0.1, 0.05, 0.05]).map_err(js)?;
    let map = build_coupling(&mesh, &[port], &pec).map_err(js)?;
    Ok((stepper, map))
}

/// Port voltages of the coupled and replayed runs of one deck.
#[wasm_bindgen]
pub struct Comparison {
    coupled: Vec<f64>,
    replay: Vec<f64>,
    l2: f64,
    dt: f64,
}

#[wasm_bindgen]
impl Comparison {
    #[wasm_bindgen(getter)]
    pub fn coupled(&self) -> Vec<f64> {
        self.coupled.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn replay(&self) -> Vec<f64> {
        self.replay.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn l2(&self) -> f64 {
        self.l2
    }

    #[wasm_bindgen(getter)]
    pub fn dt(&self) -> f64 {
        self.dt
    }
}

/// Runs `deck` (`chebyshev` or `mixer`) against the cavity both ways.
#[wasm_bindgen]
pub fn compare_deck(deck: &str, refine: usize, steps: usize) -> Result<Comparison, JsError> {
    let text = match deck {
        "chebyshev" => decks::CHEBYSHEV,
        "mixer" => decks::MIXER,
        other => return Err(JsError::new(&format!("unknown deck {other}"))),
    };
    if steps == 0 || steps > 5000 {
        return Err(JsError::new("steps must lie in 1..=5000"));
    }
    let (stepper, map) = cavity(refine)?;
    let dt = stepper.dt();
    let archive = extract(&stepper, &map, steps, 2, &GmresConfig::default()).map_err(js)?;
    let net = parse_netlist(text).map_err(js)?;
    let mut m1 = MnaSystem::new(net.clone(), dt).map_err(js)?;
    let c = coupled_transient_solve(&stepper, &mut m1, &map, steps, &CoupledConfig::default()).map_err(js)?;
    let mut m2 = MnaSystem::new(net, dt).map_err(js)?;
    let r = replay_transient_solve(&archive, &mut m2, steps).map_err(js)?;
    Ok(Comparison {
        l2: relative_l2(&r, &c).map_err(js)?,
        coupled: c.voltage(0),
        replay: r.voltage(0),
        dt,
    })
}

/// Port impulse response `G[0][0][lag]` in ohms.
#[wasm_bindgen]
pub fn impulse_response(refine: usize, lags: usize) -> Result<Vec<f64>, JsError> {
    if lags == 0 || lags > 20000 {
        return Err(JsError::new("lags must lie in 1..=20000"));
    }
    let (stepper, map) = cavity(refine)?;
    let a = extract(&stepper, &map, lags, 2, &GmresConfig::default()).map_err(js)?;
    Ok(a.series(0, 0).to_vec())
}

/// Steady-state current (A) of the default Schottky diode at each bias in
/// `[v_min, v_max]`, swept upward from equilibrium.
#[wasm_bindgen]
pub fn schottky_iv(v_min: f64, v_max: f64, points: usize) -> Result<Vec<f64>, JsError> {
    if points < 2 || !(v_max > v_min) || v_min.abs().max(v_max.abs()) > 1.0 {
        return Err(JsError::new("need at least 2 points and -1 <= v_min < v_max <= 1"));
    }
    let dev = DdDevice::new(DdParams::default()).map_err(js)?;
    let mut state = dev.solve_equilibrium().map_err(js)?;
    let mut out = Vec::with_capacity(points);
    for k in 0..points {
        let v = v_min + (v_max - v_min) * k as f64 / (points - 1) as f64;
        state = dev.solve_steady(&state, v).map_err(js)?;
        out.push(state.current);
    }
    Ok(out)
}
