//! Port impulse-response extraction, the response archive, and replay of
//! circuits against the archived responses by causal convolution.

use std::path::Path;
#[cfg(not(target_arch = "wasm32"))]
use std::time::Instant;
#[cfg(target_arch = "wasm32")]
use web_time::Instant;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::circuit::{MnaSystem, PortClosure};
use crate::coupling::{impress_current, read_port_voltage, CouplingMap, PortWaveforms, StepRecord};
use crate::emfem::Stepper;
use crate::error::{invalid, Error, Result};
use crate::solver::GmresConfig;

pub const ARCHIVE_MAGIC: &[u8; 4] = b"EMPX";
pub const ARCHIVE_VERSION: u32 = 1;

/// Sampled port impulse responses, `G[k][q][lag]` in volts per ampere of
/// unit hat current.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpulseArchive {
    pub n_ports: usize,
    pub n_t: usize,
    pub dt: f64,
    /// Step at which the unit excitation was applied.
    pub t_delta: usize,
    pub basis: String,
    pub labels: Vec<String>,
    /// Port-major, lag-minor: index `(k * n_ports + q) * n_t + lag`.
    pub g: Vec<f64>,
}

impl ImpulseArchive {
    pub fn get(&self, k: usize, q: usize, lag: usize) -> f64 {
        self.g[(k * self.n_ports + q) * self.n_t + lag]
    }

    /// `G[k][q][..]`.
    pub fn series(&self, k: usize, q: usize) -> &[f64] {
        let start = (k * self.n_ports + q) * self.n_t;
        &self.g[start..start + self.n_t]
    }

    /// `G[.][.][0]`, row-major.
    pub fn instantaneous(&self) -> Vec<f64> {
        let np = self.n_ports;
        let mut z = vec![0.0; np * np];
        for k in 0..np {
            for q in 0..np {
                z[k * np + q] = self.get(k, q, 0);
            }
        }
        z
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.g.len());
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n_ports as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_t as u64).to_le_bytes());
        out.extend_from_slice(&self.dt.to_le_bytes());
        out.extend_from_slice(&(self.t_delta as u64).to_le_bytes());
        let mut put_str = |s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        put_str(&self.basis);
        for l in &self.labels {
            put_str(l);
        }
        for v in &self.g {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 32 || &bytes[..4] != ARCHIVE_MAGIC {
            return Err(corrupt("missing EMPX header"));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(corrupt("checksum mismatch (truncated or modified file)"));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != ARCHIVE_VERSION {
            return Err(corrupt(&format!("unsupported archive version {version}")));
        }
        let n_ports = r.u32()? as usize;
        let n_t = r.u64()? as usize;
        let dt = f64::from_bits(r.u64()?);
        let t_delta = r.u64()? as usize;
        let basis = r.string()?;
        let labels = (0..n_ports).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        let count = n_ports
            .checked_mul(n_ports)
            .and_then(|v| v.checked_mul(n_t))
            .ok_or_else(|| corrupt("dimensions overflow"))?;
        let rest = &body[r.pos..];
        if rest.len() != 8 * count {
            return Err(corrupt("response block length does not match the header"));
        }
        let g: Vec<f64> = rest
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if g.iter().any(|v| !v.is_finite()) || !(dt > 0.0) {
            return Err(corrupt("non-finite response or time step"));
        }
        Ok(Self {
            n_ports,
            n_t,
            dt,
            t_delta,
            basis,
            labels,
            g,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn corrupt(msg: &str) -> Error {
    Error::CorruptArchive(msg.to_string())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(corrupt("unexpected end of archive"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("label is not UTF-8"))
    }
}

/// Linear-solver effort of an extraction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExtractStats {
    /// Total GMRES iterations per port column.
    pub gmres_iterations: Vec<usize>,
    /// Steps marched per column.
    pub steps: usize,
    /// Wall-clock seconds over all columns.
    pub wall: f64,
}

/// Response of every port to a hat current of height `amplitude` at port `q`
/// applied at step `t_delta`: `out[k][lag]` for `lag < n_t`. Also returns the
/// GMRES iterations spent.
pub fn extract_column(
    stepper: &Stepper,
    map: &CouplingMap,
    q: usize,
    amplitude: f64,
    n_t: usize,
    t_delta: usize,
    gmres: &GmresConfig,
) -> Result<(Vec<Vec<f64>>, usize)> {
    let np = map.n_ports();
    if q >= np {
        return Err(invalid(format!("port {q} out of range")));
    }
    if t_delta < 1 {
        return Err(invalid("excitation step must be at least 1"));
    }
    let mut currents = vec![0.0; np];
    currents[q] = amplitude;
    let excite = impress_current(map, &currents);
    let zero = vec![0.0; map.n_edges];
    let mut out = vec![Vec::with_capacity(n_t); np];
    let mut state = stepper.initial_state();
    let mut iterations = 0;
    for s in 1..t_delta + n_t {
        let load = if s == t_delta { &excite } else { &zero };
        let (next, stats) = stepper.step(&state, load, gmres).map_err(|e| match e {
            Error::SolverFailure { iterations, residual } => Error::Nonlinear {
                step: s,
                residual,
                detail: format!("extraction of port {q}: GMRES stopped after {iterations} iterations"),
            },
            other => other,
        })?;
        iterations += stats.gmres_iterations;
        state = next;
        let v = read_port_voltage(map, &state.e);
        if s + 1 == t_delta && v.iter().any(|x| *x != 0.0) {
            return Err(Error::Assembly(format!(
                "port {q}: response before the excitation step is nonzero"
            )));
        }
        if s >= t_delta {
            for (k, vk) in v.into_iter().enumerate() {
                out[k].push(vk);
            }
        }
    }
    Ok((out, iterations))
}

/// Unit-excitation extraction over all ports (independent marches, run in
/// parallel).
pub fn extract_with_stats(
    stepper: &Stepper,
    map: &CouplingMap,
    n_t: usize,
    t_delta: usize,
    gmres: &GmresConfig,
) -> Result<(ImpulseArchive, ExtractStats)> {
    if n_t == 0 {
        return Err(invalid("number of lags must be positive"));
    }
    if map.n_edges != stepper.n_edges() {
        return Err(invalid("coupling map does not match the EM system"));
    }
    let np = map.n_ports();
    let started = Instant::now();
    let columns: Vec<Result<(Vec<Vec<f64>>, usize)>> = (0..np)
        .into_par_iter()
        .map(|q| extract_column(stepper, map, q, 1.0, n_t, t_delta, gmres))
        .collect();
    let mut g = vec![0.0; np * np * n_t];
    let mut its = Vec::with_capacity(np);
    for (q, col) in columns.into_iter().enumerate() {
        let (col, it) = col?;
        for (k, series) in col.iter().enumerate() {
            let start = (k * np + q) * n_t;
            g[start..start + n_t].copy_from_slice(series);
        }
        its.push(it);
    }
    let archive = ImpulseArchive {
        n_ports: np,
        n_t,
        dt: stepper.dt(),
        t_delta,
        basis: stepper.basis.descriptor().to_string(),
        labels: map.labels(),
        g,
    };
    let stats = ExtractStats {
        gmres_iterations: its,
        steps: t_delta + n_t - 1,
        wall: started.elapsed().as_secs_f64(),
    };
    Ok((archive, stats))
}

pub fn extract(
    stepper: &Stepper,
    map: &CouplingMap,
    n_t: usize,
    t_delta: usize,
    gmres: &GmresConfig,
) -> Result<ImpulseArchive> {
    extract_with_stats(stepper, map, n_t, t_delta, gmres).map(|(a, _)| a)
}

/// `V_k(t_i) = sum_q sum_{j<=i} G[k][q][i-j] I_q[j]` with `i = len - 1`;
/// `history[q]` holds port `q`'s currents.
pub fn reconstruct_port_voltage(archive: &ImpulseArchive, history: &[Vec<f64>]) -> Result<Vec<f64>> {
    let np = archive.n_ports;
    if history.len() != np {
        return Err(invalid("one current history per port is required"));
    }
    let len = history[0].len();
    if len == 0 || history.iter().any(|h| h.len() != len) {
        return Err(invalid("current histories must be non-empty and equally long"));
    }
    let i = len - 1;
    if i >= archive.n_t {
        return Err(Error::HorizonExceeded {
            step: i,
            step_plus_one: i + 1,
            n_t: archive.n_t,
        });
    }
    Ok((0..np)
        .map(|k| {
            let mut acc = 0.0;
            for (q, h) in history.iter().enumerate() {
                let g = archive.series(k, q);
                for (j, ij) in h.iter().enumerate() {
                    acc += g[i - j] * ij;
                }
            }
            acc
        })
        .collect())
}

/// Circuit march with every em port closed by the archived responses:
/// `V = G[0] I + history` at each step.
pub fn replay_transient_solve(
    archive: &ImpulseArchive,
    mna: &mut MnaSystem,
    n_steps: usize,
) -> Result<PortWaveforms> {
    let np = archive.n_ports;
    if mna.n_ports() != np {
        return Err(Error::Config(format!(
            "circuit has {} em ports but the archive holds {np}",
            mna.n_ports()
        )));
    }
    if (mna.dt - archive.dt).abs() > 1e-12 * archive.dt {
        return Err(Error::Config(format!(
            "archive time step {:e} s does not match circuit time step {:e} s",
            archive.dt, mna.dt
        )));
    }
    if n_steps > archive.n_t {
        return Err(Error::HorizonExceeded {
            step: n_steps - 1,
            step_plus_one: n_steps,
            n_t: archive.n_t,
        });
    }
    let z = archive.instantaneous();
    let mut currents: Vec<Vec<f64>> = vec![Vec::with_capacity(n_steps); np];
    let mut waves = PortWaveforms::default();
    for s in 0..n_steps {
        let started = Instant::now();
        let out = if s == 0 {
            mna.advance(PortClosure::Open)?
        } else {
            let h: Vec<f64> = (0..np)
                .map(|k| {
                    let mut acc = 0.0;
                    for (q, hist) in currents.iter().enumerate() {
                        let g = archive.series(k, q);
                        for (j, ij) in hist.iter().enumerate() {
                            acc += g[s - j] * ij;
                        }
                    }
                    acc
                })
                .collect();
            mna.advance(PortClosure::Linear { z: &z, h: &h })?
        };
        let i: Vec<f64> = (0..np).map(|q| out.x[mna.port_index(q)]).collect();
        let v: Vec<f64> = (0..np).map(|q| mna.port_voltage(&out.x, q)).collect();
        for (q, iq) in i.iter().enumerate() {
            currents[q].push(*iq);
        }
        waves.records.push(StepRecord {
            step: s,
            time: s as f64 * mna.dt,
            v,
            i,
            newton_iters: out.iterations,
            gmres_iters: 0,
            wall: started.elapsed().as_secs_f64(),
        });
    }
    Ok(waves)
}
