//! Frequency-domain post-processing of port waveforms.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::CliError;

fn invalid(msg: &str) -> CliError {
    CliError::InvalidArgument(msg.into())
}

/// `X(f) = dt * sum_k x[k] exp(-j 2 pi f k dt)` at each requested frequency.
pub fn dft(samples: &[f64], dt: f64, freqs: &[f64]) -> Result<Vec<Complex64>, CliError> {
    if samples.is_empty() {
        return Err(invalid("cannot transform an empty series"));
    }
    if !(dt > 0.0) {
        return Err(invalid("sample spacing must be positive"));
    }
    Ok(freqs
        .iter()
        .map(|&f| {
            let w = -2.0 * PI * f * dt;
            let mut acc = Complex64::new(0.0, 0.0);
            for (k, x) in samples.iter().enumerate() {
                acc += Complex64::from_polar(*x, w * k as f64);
            }
            acc * dt
        })
        .collect())
}

/// A spectral value that is `None` where the reference magnitude fell below
/// the noise floor.
pub type Flagged = Option<Complex64>;

/// `Y = I / V`, flagging points where `|V| < floor * max |V|`.
pub fn admittance(v: &[Complex64], i: &[Complex64], floor: f64) -> Result<Vec<Flagged>, CliError> {
    if v.len() != i.len() {
        return Err(invalid("voltage and current spectra differ in length"));
    }
    let peak = v.iter().fold(0.0f64, |m, x| m.max(x.norm()));
    Ok(v
        .iter()
        .zip(i)
        .map(|(v, i)| {
            if peak == 0.0 || v.norm() < floor * peak {
                None
            } else {
                Some(i / v)
            }
        })
        .collect())
}

/// One-port reflection `(1 - Z0 Y) / (1 + Z0 Y)`.
pub fn s11_from_y(y: Complex64, z0: f64) -> Complex64 {
    let zy = y * z0;
    (1.0 - zy) / (1.0 + zy)
}

/// Two-port `S = (1 - Z0 Y)(1 + Z0 Y)^-1`.
pub fn s_from_y2(y: [[Complex64; 2]; 2], z0: f64) -> [[Complex64; 2]; 2] {
    let (a, b, c, d) = (y[0][0] * z0, y[0][1] * z0, y[1][0] * z0, y[1][1] * z0);
    let det = (1.0 + a) * (1.0 + d) - b * c;
    [
        [((1.0 - a) * (1.0 + d) + b * c) / det, -2.0 * b / det],
        [-2.0 * c / det, ((1.0 + a) * (1.0 - d) + b * c) / det],
    ]
}

/// `eta = P_dc / P_source * 100`.
pub fn conversion_efficiency(p_dc: f64, p_source: f64) -> Result<f64, CliError> {
    if !(p_dc >= 0.0) || !(p_source >= 0.0) {
        return Err(invalid("powers must be non-negative"));
    }
    if p_source == 0.0 {
        return Err(invalid("source power is zero"));
    }
    Ok(100.0 * p_dc / p_source)
}

/// Time-average of `v * i`.
pub fn average_power(v: &[f64], i: &[f64]) -> Result<f64, CliError> {
    if v.is_empty() || v.len() != i.len() {
        return Err(invalid("power needs equally long, non-empty series"));
    }
    Ok(v.iter().zip(i).map(|(a, b)| a * b).sum::<f64>() / v.len() as f64)
}
