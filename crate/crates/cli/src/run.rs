//! Run modes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use emckt::circuit::{parse_netlist, ElementKind, MnaSystem, Netlist, NewtonConfig, NonlinearBranch};
use emckt::coupling::{build_coupling, coupled_transient_solve, relative_l2, CoupledConfig, CouplingMap, PortWaveforms};
use emckt::device_dd::{port_adapter, DdDevice, DdParams};
use emckt::emfem::{assemble_mixed_system, box_face_pec_mask, boundary_pec_mask, Material, Stepper};
use emckt::mesh::{build_box_mesh, read_ascii_mesh, resolve_port, TetMesh};
use emckt::pml::build_stretch_profile;
use emckt::portx::{extract_with_stats, replay_transient_solve, ExtractStats, ImpulseArchive};
use emckt::solver::GmresConfig;

use crate::config::{PecSpec, RunConfig};
use crate::post::{admittance, average_power, dft, s11_from_y};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    Extract,
    Replay,
    Coupled,
    Compare,
    Bench,
}

/// Outcome of a successful run.
#[derive(Debug, Clone, Default)]
pub struct Report {
    pub files: Vec<PathBuf>,
    pub l2: Option<f64>,
    pub cost: Option<CostReport>,
    /// Human-readable summary lines.
    pub lines: Vec<String>,
}

/// Per-step costs of the coupled, extraction and replay paths.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CostReport {
    /// Free EM edge unknowns.
    pub n_em: usize,
    pub n_ckt: usize,
    pub n_p: usize,
    pub n_t: usize,
    pub steps: usize,
    pub newton_per_step: f64,
    pub gmres_per_step_coupled: f64,
    /// GMRES iterations per marched extraction step, averaged over ports.
    pub gmres_per_step_extraction: f64,
    /// Seconds per coupled step.
    pub c_coupled: f64,
    /// Seconds per extraction step, averaged over ports.
    pub c_pe1: f64,
    /// Seconds per replay step.
    pub c_pe2: f64,
    pub total_coupled: f64,
    pub total_extraction: f64,
    pub total_replay: f64,
}

impl CostReport {
    pub fn to_csv(&self) -> String {
        let rows: [(&str, String); 15] = [
            ("N_EM", self.n_em.to_string()),
            ("N_CKT", self.n_ckt.to_string()),
            ("N_p", self.n_p.to_string()),
            ("N_t", self.n_t.to_string()),
            ("steps", self.steps.to_string()),
            ("N_NL_per_step", format!("{:.6e}", self.newton_per_step)),
            ("N_GMRES_coupled_per_step", format!("{:.6e}", self.gmres_per_step_coupled)),
            ("N_GMRES_extraction_per_step", format!("{:.6e}", self.gmres_per_step_extraction)),
            ("C_coupled_s_per_step", format!("{:.6e}", self.c_coupled)),
            ("C_PE1_s_per_step", format!("{:.6e}", self.c_pe1)),
            ("C_PE2_s_per_step", format!("{:.6e}", self.c_pe2)),
            ("total_coupled_s", format!("{:.6e}", self.total_coupled)),
            ("total_extraction_s", format!("{:.6e}", self.total_extraction)),
            ("total_replay_s", format!("{:.6e}", self.total_replay)),
            ("speedup_per_step", format!("{:.6e}", self.speedup())),
        ];
        let mut s = String::from("quantity,value\n");
        for (k, v) in rows {
            let _ = writeln!(s, "{k},{v}");
        }
        s
    }

    /// Coupled over replay cost per step.
    pub fn speedup(&self) -> f64 {
        self.c_coupled / self.c_pe2
    }
}

struct Em {
    stepper: Stepper,
    map: CouplingMap,
    n_free: usize,
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let io = |source| CliError::Output {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    std::fs::write(path, contents).map_err(io)
}

fn gmres(cfg: &RunConfig) -> GmresConfig {
    GmresConfig {
        tol: cfg.solver.gmres_tol,
        restart: cfg.solver.gmres_restart,
        max_iter: cfg.solver.gmres_max_iter,
        jacobi: true,
    }
}

fn load_mesh(cfg: &RunConfig) -> Result<TetMesh, CliError> {
    let m = cfg
        .mesh
        .as_ref()
        .ok_or_else(|| CliError::Config("this mode needs a [mesh] section".into()))?;
    Ok(match m.source.as_str() {
        "box" => {
            let n = m.cells.expect("validated");
            build_box_mesh(n[0], n[1], n[2], m.size.expect("validated"))?
        }
        _ => read_ascii_mesh(&cfg.resolve(m.file.as_ref().expect("validated")))?,
    })
}

fn build_em(cfg: &RunConfig, dt: f64) -> Result<Em, CliError> {
    let mesh = load_mesh(cfg)?;
    let pec = match &cfg.mesh.as_ref().expect("mesh loaded").pec {
        PecSpec::Named(n) if n == "boundary" => boundary_pec_mask(&mesh),
        PecSpec::Named(_) => vec![false; mesh.n_edges()],
        PecSpec::Faces(f) => {
            if f.iter().any(|x| *x >= 6) {
                return Err(CliError::Config("box faces are numbered 0..6".into()));
            }
            box_face_pec_mask(&mesh, f)
        }
    };
    let materials: Vec<Material> = if cfg.materials.is_empty() {
        vec![Material::default()]
    } else {
        cfg.materials
            .iter()
            .map(|m| Material {
                eps_r: m.eps_r,
                mu_r: m.mu_r,
            })
            .collect()
    };
    let sys = assemble_mixed_system(&mesh, &materials, &pec)?;
    let stepper = match &cfg.pml {
        Some(p) => {
            let mut faces = [false; 6];
            for &f in &p.faces {
                *faces
                    .get_mut(f)
                    .ok_or_else(|| CliError::Config("pml faces are numbered 0..6".into()))? = true;
            }
            let (lo, hi) = mesh.bounding_box();
            let profile = build_stretch_profile(lo, hi, p.thickness, p.order, p.reflection, faces)?;
            Stepper::with_pml(&sys, &mesh, &profile, dt)?
        }
        None => Stepper::new(&sys, dt)?,
    };
    if cfg.ports.is_empty() {
        return Err(CliError::Config("at least one [[port]] is required".into()));
    }
    let specs = cfg
        .ports
        .iter()
        .enumerate()
        .map(|(i, p)| resolve_port(&mesh, i, &p.label, p.from, p.to))
        .collect::<Result<Vec<_>, _>>()?;
    let map = build_coupling(&mesh, &specs, &pec)?;
    Ok(Em {
        stepper,
        map,
        n_free: sys.free_edges(),
    })
}

struct Circuit {
    netlist: Netlist,
    /// Device parameters bound to the `DD` elements, in netlist order.
    devices: Vec<DdDevice>,
}

fn load_circuit(cfg: &RunConfig) -> Result<Option<Circuit>, CliError> {
    let Some(c) = &cfg.circuit else {
        return Ok(None);
    };
    let path = cfg.resolve(&c.netlist);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Config(format!("cannot read netlist {}: {e}", path.display())))?;
    let netlist = parse_netlist(&text)?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut devices = Vec::new();
    for e in &netlist.elements {
        if let ElementKind::Device(file) = &e.kind {
            let p = dir.join(file);
            let params = DdParams::read(&p).map_err(|err| match err {
                emckt::Error::Io(io) => {
                    CliError::Config(format!("cannot read device file {}: {io}", p.display()))
                }
                other => other.into(),
            })?;
            devices.push(DdDevice::new(params)?);
        }
    }
    Ok(Some(Circuit { netlist, devices }))
}

fn need_circuit(c: &Option<Circuit>) -> Result<&Circuit, CliError> {
    c.as_ref()
        .ok_or_else(|| CliError::Config("this mode needs a [circuit] section".into()))
}

impl Circuit {
    fn mna(&self, cfg: &RunConfig, dt: f64) -> Result<MnaSystem, CliError> {
        let devices = self
            .devices
            .iter()
            .map(|d| port_adapter(d.clone()).map(|p| Box::new(p) as Box<dyn NonlinearBranch>))
            .collect::<Result<Vec<_>, _>>()?;
        let mut mna = MnaSystem::with_devices(self.netlist.clone(), dt, devices)?;
        mna.newton = NewtonConfig {
            tol: cfg.solver.newton_tol,
            max_iter: cfg.solver.newton_max,
            max_halvings: cfg.solver.max_halvings,
        };
        Ok(mna)
    }
}

fn archive_path(cfg: &RunConfig) -> PathBuf {
    match &cfg.archive.path {
        Some(p) => cfg.resolve(p),
        None => out_dir(cfg).join("archive.empx"),
    }
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.resolve(&cfg.output.dir)
}

fn extract_archive(cfg: &RunConfig, em: &Em) -> Result<(ImpulseArchive, ExtractStats), CliError> {
    Ok(extract_with_stats(&em.stepper, &em.map, cfg.lags(), cfg.time.t_delta, &gmres(cfg))?)
}

fn coupled(cfg: &RunConfig, em: &Em, ckt: &Circuit) -> Result<(PortWaveforms, usize), CliError> {
    let mut mna = ckt.mna(cfg, em.stepper.dt())?;
    let config = CoupledConfig {
        gmres: gmres(cfg),
        max_newton: cfg.solver.newton_max,
        tol: cfg.solver.newton_tol,
        max_halvings: cfg.solver.max_halvings,
    };
    let w = coupled_transient_solve(&em.stepper, &mut mna, &em.map, cfg.time.steps, &config)?;
    Ok((w, mna.n_unknowns()))
}

fn replay(cfg: &RunConfig, archive: &ImpulseArchive, ckt: &Circuit, dt: f64) -> Result<PortWaveforms, CliError> {
    let mut mna = ckt.mna(cfg, dt)?;
    Ok(replay_transient_solve(archive, &mut mna, cfg.time.steps)?)
}

/// Waveform CSV plus, when `[post]` is configured, spectra and port power.
fn emit_waveforms(cfg: &RunConfig, name: &str, w: &PortWaveforms, dt: f64, report: &mut Report) -> Result<(), CliError> {
    let dir = out_dir(cfg);
    let path = dir.join(format!("{name}.csv"));
    write_file(&path, w.to_csv().as_bytes())?;
    report.files.push(path);
    let Some(post) = &cfg.post else {
        return Ok(());
    };
    let grid = post.grid();
    let mut power = String::from("port_id,P_avg_W\n");
    let np = w.n_ports();
    for q in 0..np {
        let (v, i) = (w.voltage(q), w.current(q));
        let _ = writeln!(power, "{q},{:.17e}", average_power(&v, &i)?);
        let vf = dft(&v, dt, &grid)?;
        let i_f = dft(&i, dt, &grid)?;
        let mut spectra = vec![
            (format!("V{q}"), vf.iter().map(|z| Some(*z)).collect::<Vec<_>>()),
            (format!("I{q}"), i_f.iter().map(|z| Some(*z)).collect()),
        ];
        if np == 1 {
            let y = admittance(&vf, &i_f, post.noise_floor)?;
            let s = y.iter().map(|y| y.map(|y| s11_from_y(y, post.z0))).collect();
            spectra.push(("Y00".into(), y));
            spectra.push(("S11".into(), s));
        }
        for (label, values) in spectra {
            let mut s = String::from("f_Hz,re,im,flagged\n");
            for (f, z) in grid.iter().zip(&values) {
                match z {
                    Some(z) => {
                        let _ = writeln!(s, "{f:.17e},{:.17e},{:.17e},0", z.re, z.im);
                    }
                    None => {
                        let _ = writeln!(s, "{f:.17e},nan,nan,1");
                    }
                }
            }
            let p = dir.join(format!("spectrum_{name}_{label}.csv"));
            write_file(&p, s.as_bytes())?;
            report.files.push(p);
        }
    }
    let p = dir.join(format!("power_{name}.csv"));
    write_file(&p, power.as_bytes())?;
    report.files.push(p);
    Ok(())
}

fn summary(name: &str, w: &PortWaveforms) -> String {
    format!(
        "{name}: {} steps, {} ports, mean Newton {:.2}/step, mean GMRES {:.1}/step",
        w.records.len(),
        w.n_ports(),
        w.mean_newton(),
        w.mean_gmres()
    )
}

/// Cumulative wall time per step of the coupled and replay runs.
pub fn cumulative_csv(coupled: &PortWaveforms, replay: &PortWaveforms) -> String {
    let mut s = String::from("step,coupled_s,replay_s,coupled_newton\n");
    let (mut tc, mut tr, mut nl) = (0.0, 0.0, 0usize);
    for (c, r) in coupled.records.iter().zip(&replay.records).skip(1) {
        tc += c.wall;
        tr += r.wall;
        nl += c.newton_iters;
        let _ = writeln!(s, "{},{tc:.6e},{tr:.6e},{nl}", c.step);
    }
    s
}

pub fn run(mode: Mode, cfg: &RunConfig) -> Result<Report, CliError> {
    let ckt = load_circuit(cfg)?;
    let dt = cfg.dt(ckt.as_ref().and_then(|c| c.netlist.f_max()))?;
    let mut report = Report::default();
    match mode {
        Mode::Extract => {
            let em = build_em(cfg, dt)?;
            let (archive, stats) = extract_archive(cfg, &em)?;
            let path = archive_path(cfg);
            write_file(&path, &archive.to_bytes())?;
            report.lines.push(format!(
                "extracted {} port(s) x {} lags at dt = {:.6e} s, GMRES iterations per port {:?}",
                archive.n_ports, archive.n_t, archive.dt, stats.gmres_iterations
            ));
            report.files.push(path);
        }
        Mode::Replay => {
            let ckt = need_circuit(&ckt)?;
            let path = archive_path(cfg);
            let archive = ImpulseArchive::read(&path).map_err(|e| match e {
                emckt::Error::Io(io) => {
                    CliError::Config(format!("cannot read archive {}: {io}", path.display()))
                }
                other => other.into(),
            })?;
            let w = replay(cfg, &archive, ckt, dt)?;
            report.lines.push(summary("replay", &w));
            emit_waveforms(cfg, "replay", &w, dt, &mut report)?;
        }
        Mode::Coupled => {
            let ckt = need_circuit(&ckt)?;
            let em = build_em(cfg, dt)?;
            let (w, _) = coupled(cfg, &em, ckt)?;
            report.lines.push(summary("coupled", &w));
            emit_waveforms(cfg, "coupled", &w, dt, &mut report)?;
        }
        Mode::Compare => {
            let ckt = need_circuit(&ckt)?;
            let em = build_em(cfg, dt)?;
            let path = archive_path(cfg);
            let archive = if path.exists() {
                report.lines.push(format!("using archive {}", path.display()));
                ImpulseArchive::read(&path)?
            } else {
                let (a, _) = extract_archive(cfg, &em)?;
                write_file(&path, &a.to_bytes())?;
                report.files.push(path);
                a
            };
            let (wc, _) = coupled(cfg, &em, ckt)?;
            let wr = replay(cfg, &archive, ckt, dt)?;
            report.lines.push(summary("coupled", &wc));
            report.lines.push(summary("replay", &wr));
            emit_waveforms(cfg, "coupled", &wc, dt, &mut report)?;
            emit_waveforms(cfg, "replay", &wr, dt, &mut report)?;
            let l2 = relative_l2(&wr, &wc)?;
            let threshold = cfg.compare.threshold;
            let p = out_dir(cfg).join("compare.csv");
            write_file(
                &p,
                format!("quantity,value\nrelative_l2,{l2:.17e}\nthreshold,{threshold:.17e}\n").as_bytes(),
            )?;
            report.files.push(p);
            report.lines.push(format!("relative L2 {l2:.6e} (threshold {threshold:.1e})"));
            report.l2 = Some(l2);
            if !(l2 <= threshold) {
                return Err(CliError::Equivalence { l2, threshold });
            }
        }
        Mode::Bench => {
            let ckt = need_circuit(&ckt)?;
            let em = build_em(cfg, dt)?;
            let (archive, stats) = extract_archive(cfg, &em)?;
            let (wc, n_ckt) = coupled(cfg, &em, ckt)?;
            let wr = replay(cfg, &archive, ckt, dt)?;
            emit_waveforms(cfg, "coupled", &wc, dt, &mut report)?;
            emit_waveforms(cfg, "replay", &wr, dt, &mut report)?;
            let steps = cfg.time.steps.saturating_sub(1).max(1) as f64;
            let marched = (stats.steps * archive.n_ports).max(1) as f64;
            let total = |w: &PortWaveforms| w.records.iter().skip(1).map(|r| r.wall).sum::<f64>();
            let cost = CostReport {
                n_em: em.n_free,
                n_ckt,
                n_p: archive.n_ports,
                n_t: archive.n_t,
                steps: cfg.time.steps,
                newton_per_step: wc.mean_newton(),
                gmres_per_step_coupled: wc.mean_gmres(),
                gmres_per_step_extraction: stats.gmres_iterations.iter().sum::<usize>() as f64 / marched,
                c_coupled: total(&wc) / steps,
                c_pe1: stats.wall / marched,
                c_pe2: total(&wr) / steps,
                total_coupled: total(&wc),
                total_extraction: stats.wall,
                total_replay: total(&wr),
            };
            let dir = out_dir(cfg);
            for (name, body) in [("cost_report.csv", cost.to_csv()), ("cumulative_time.csv", cumulative_csv(&wc, &wr))] {
                let p = dir.join(name);
                write_file(&p, body.as_bytes())?;
                report.files.push(p);
            }
            report.lines.push(format!(
                "coupled {:.3e} s/step ({:.2} Newton, {:.1} GMRES), replay {:.3e} s/step, extraction {:.3e} s/step: {:.1}x",
                cost.c_coupled,
                cost.newton_per_step,
                cost.gmres_per_step_coupled,
                cost.c_pe2,
                cost.c_pe1,
                cost.speedup()
            ));
            report.cost = Some(cost);
        }
    }
    Ok(report)
}
