//! Synthetic experiments: a coupling-law device with losses, heater and
//! photon sources, generating fringe datasets and HOM scans with Poisson noise.
//!
//! Randomness comes from ChaCha20 (`rand_chacha::ChaCha20Rng`) seeded with
//! `rng_seed`; each record draws from its own stream, so outputs do not depend
//! on generation order and are identical across platforms.

use std::f64::consts::LN_2;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::calibration::{FringeDataset, FringeRecord};
use crate::device::{unitary_at, Band, CouplingMatrix, PhaseDevice, MODES};
use crate::error::{Error, Result};
use crate::homscan::{HomScanDataset, HomScanHeader, HomScanRow};
use crate::interference::{coincidence_vs_delay, DelayProfile};
use crate::linalg::UnitaryMatrix;

/// Expected counts above this are refused rather than sampled.
pub const MAX_EXPECTED_COUNT: f64 = 1e9;
/// Below this mean Poisson draws use exact inversion; above, a rounded normal.
pub const POISSON_INVERSION_MAX: f64 = 30.0;

/// `kappa` giving a 0.4 ps FWHM for `exp(-kappa tau^2 / 2)`.
pub fn default_kappa() -> f64 {
    8.0 * LN_2 / (0.4 * 0.4)
}

fn default_resistance() -> f64 {
    100.0
}

fn default_window() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDeviceSpec {
    /// Per arm `[c0, c1, c2]` with `g_i(theta) = c0 + c1 theta + c2 theta^2`.
    pub coupling_law: [[f64; 3]; 3],
    /// W^-1.
    pub k_true: f64,
    /// Ohm.
    #[serde(default = "default_resistance")]
    pub heater_resistance: f64,
    pub eta_in: [f64; 3],
    pub eta_out: [f64; 3],
    /// Photons/s injected for fringe measurements.
    pub source_rate: f64,
    /// Pairs/s for HOM scans.
    pub pair_rate: f64,
    /// ps^-2.
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default = "default_window")]
    pub coincidence_window_ns: f64,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default)]
    pub dark_counts_per_s: f64,
}

impl SyntheticDeviceSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k_true", self.k_true),
            ("heater_resistance", self.heater_resistance),
            ("source_rate", self.source_rate),
            ("pair_rate", self.pair_rate),
            ("kappa", self.kappa),
            ("coincidence_window_ns", self.coincidence_window_ns),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        for (name, etas) in [("eta_in", self.eta_in), ("eta_out", self.eta_out)] {
            if etas.iter().any(|&e| !(e > 0.0 && e <= 1.0)) {
                return Err(Error::Config(format!("{name} entries must lie in (0, 1], got {etas:?}")));
            }
        }
        if !(self.dark_counts_per_s >= 0.0) {
            return Err(Error::Config(format!("dark_counts_per_s must be >= 0, got {}", self.dark_counts_per_s)));
        }
        if self.coupling_law.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Config("coupling law coefficients must be finite".into()));
        }
        Ok(())
    }

    /// Checks `g_i(theta) >= 0` on `[lo, hi]`, including any interior extremum of the quadratic.
    pub fn validate_range(&self, lo: f64, hi: f64) -> Result<()> {
        for (arm, &[c0, c1, c2]) in self.coupling_law.iter().enumerate() {
            let g = |t: f64| c0 + c1 * t + c2 * t * t;
            let mut probes = vec![lo, hi];
            if c2 != 0.0 {
                let vertex = -c1 / (2.0 * c2);
                if vertex > lo && vertex < hi {
                    probes.push(vertex);
                }
            }
            if let Some(t) = probes.into_iter().find(|&t| g(t) < 0.0) {
                return Err(Error::Config(format!("coupling g{} is negative ({}) at theta = {t}", arm + 1, g(t))));
            }
        }
        Ok(())
    }

    pub fn theta(&self, voltage: f64) -> f64 {
        self.k_true * voltage * voltage / self.heater_resistance
    }

    pub fn current(&self, voltage: f64) -> f64 {
        voltage / self.heater_resistance
    }

    pub fn coupling(&self, theta: f64) -> Result<CouplingMatrix> {
        CouplingMatrix::from_g(self.coupling_law.map(|[c0, c1, c2]| c0 + c1 * theta + c2 * theta * theta))
    }

    pub fn unitary_at_theta(&self, theta: f64) -> Result<UnitaryMatrix> {
        unitary_at(&self.coupling(theta)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let spec: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// The generating device itself, exact at every phase.
impl PhaseDevice for SyntheticDeviceSpec {
    fn theta_range(&self) -> (f64, f64) {
        (f64::NEG_INFINITY, f64::INFINITY)
    }

    fn unitary(&self, theta: f64, _band: Band) -> Result<UnitaryMatrix> {
        self.unitary_at_theta(theta)
    }
}

/// One HOM scan selection, 1-based ports as in the files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PortSelection {
    pub input: [usize; 2],
    pub output: [usize; 2],
}

impl PortSelection {
    /// 0-based `(input, output)` pairs.
    pub fn zero_based(&self) -> Result<((usize, usize), (usize, usize))> {
        let ports = [self.input[0], self.input[1], self.output[0], self.output[1]];
        if ports.iter().any(|&p| p == 0 || p > MODES) {
            return Err(Error::Config(format!("ports must be 1..={MODES}, got {self:?}")));
        }
        if self.input[0] == self.input[1] || self.output[0] == self.output[1] {
            return Err(Error::Config(format!("port pairs must be distinct, got {self:?}")));
        }
        Ok(((self.input[0] - 1, self.input[1] - 1), (self.output[0] - 1, self.output[1] - 1)))
    }
}

fn default_delays() -> Vec<f64> {
    (0..41).map(|q| -2.0 + 0.1 * q as f64).collect()
}

fn default_integration() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

fn default_ports() -> Vec<PortSelection> {
    let pairs = [[1, 2], [1, 3], [2, 3]];
    pairs.iter().flat_map(|&input| pairs.iter().map(move |&output| PortSelection { input, output })).collect()
}

fn default_fringe_file() -> String {
    "fringes.csv".into()
}

fn default_scan_dir() -> String {
    "scans".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Heater voltages for the fringe sweep (V).
    pub voltages: Vec<f64>,
    /// Delay grid for HOM scans (ps).
    #[serde(default = "default_delays")]
    pub delays_ps: Vec<f64>,
    #[serde(default = "default_integration")]
    pub fringe_integration_s: f64,
    #[serde(default = "default_integration")]
    pub scan_integration_s: f64,
    /// Voltages at which HOM scans are taken; none means no scans.
    #[serde(default)]
    pub scan_voltages: Vec<f64>,
    #[serde(default = "default_ports")]
    pub scan_ports: Vec<PortSelection>,
    /// When false, scans carry no accidentals and no singles columns.
    #[serde(default = "default_true")]
    pub accidentals: bool,
    #[serde(default = "default_fringe_file")]
    pub fringe_file: String,
    #[serde(default = "default_scan_dir")]
    pub scan_dir: String,
}

fn check_increasing(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Config(format!("{name} must be finite")));
    }
    if let Some(w) = v.windows(2).find(|w| !(w[1] > w[0])) {
        return Err(Error::Config(format!("{name} must be strictly increasing ({} then {})", w[0], w[1])));
    }
    Ok(())
}

impl RunConfig {
    pub fn new(voltages: Vec<f64>) -> Self {
        Self {
            voltages,
            delays_ps: default_delays(),
            fringe_integration_s: 1.0,
            scan_integration_s: 1.0,
            scan_voltages: Vec::new(),
            scan_ports: default_ports(),
            accidentals: true,
            fringe_file: default_fringe_file(),
            scan_dir: default_scan_dir(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.voltages.is_empty() {
            return Err(Error::Config("voltage grid is empty".into()));
        }
        check_increasing("voltages", &self.voltages)?;
        check_increasing("scan_voltages", &self.scan_voltages)?;
        check_increasing("delays_ps", &self.delays_ps)?;
        if self.voltages.iter().chain(&self.scan_voltages).any(|&v| v < 0.0) {
            return Err(Error::Config("voltages must be >= 0".into()));
        }
        if !self.scan_voltages.is_empty() && self.delays_ps.is_empty() {
            return Err(Error::Config("delay grid is empty".into()));
        }
        for (name, t) in
            [("fringe_integration_s", self.fringe_integration_s), ("scan_integration_s", self.scan_integration_s)]
        {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {t}")));
            }
        }
        for p in &self.scan_ports {
            p.zero_based()?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Draws a Poisson variate: exact inversion below [`POISSON_INVERSION_MAX`],
/// otherwise a normal approximation rounded to an integer and floored at 0.
pub fn sample_poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    if mean < POISSON_INVERSION_MAX {
        let u: f64 = rng.random();
        let mut k = 0.0;
        let mut p = (-mean).exp();
        let mut cdf = p;
        while u > cdf && p > 0.0 {
            k += 1.0;
            p *= mean / k;
            cdf += p;
        }
        k
    } else {
        let z: f64 = rng.sample(StandardNormal);
        (mean + mean.sqrt() * z).round().max(0.0)
    }
}

const STREAM_FRINGE: u64 = 1;
const STREAM_SCAN: u64 = 2;

fn record_rng(seed: u64, kind: u64, a: u64, b: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream((kind << 56) | (a << 24) | b);
    rng
}

fn guarded(mean: f64) -> Result<f64> {
    if mean > MAX_EXPECTED_COUNT || !mean.is_finite() {
        return Err(Error::Overflow { expected: mean });
    }
    Ok(mean)
}

/// Single counts `eta_in[i] eta_out[j] |U_ij|^2 M T` at every voltage and input.
pub fn generate_fringes(spec: &SyntheticDeviceSpec, cfg: &RunConfig, noise_free: bool) -> Result<FringeDataset> {
    spec.validate()?;
    cfg.validate()?;
    let thetas: Vec<f64> = cfg.voltages.iter().map(|&v| spec.theta(v)).collect();
    spec.validate_range(thetas[0], thetas[thetas.len() - 1])?;
    let t = cfg.fringe_integration_s;
    let mut records = Vec::with_capacity(3 * cfg.voltages.len());
    for (vi, (&voltage, &theta)) in cfg.voltages.iter().zip(&thetas).enumerate() {
        let u = spec.unitary_at_theta(theta)?;
        for i in 0..MODES {
            let mut rng = record_rng(spec.rng_seed, STREAM_FRINGE, vi as u64, i as u64);
            let mut counts = [0.0; 3];
            for (j, c) in counts.iter_mut().enumerate() {
                let mean = guarded(
                    spec.eta_in[i] * spec.eta_out[j] * u[(i, j)].norm_sqr() * spec.source_rate * t
                        + spec.dark_counts_per_s * t,
                )?;
                *c = if noise_free { mean } else { sample_poisson(mean, &mut rng) };
            }
            records.push(FringeRecord {
                voltage,
                current: spec.current(voltage),
                input_port: i,
                counts,
                integration_time: t,
            });
        }
    }
    FringeDataset::new(records, spec.source_rate)
}

/// Coincidence scans over the delay grid at every scan voltage and port selection.
pub fn generate_hom_scans(
    spec: &SyntheticDeviceSpec,
    cfg: &RunConfig,
    noise_free: bool,
) -> Result<Vec<HomScanDataset>> {
    spec.validate()?;
    cfg.validate()?;
    if let (Some(first), Some(last)) = (cfg.scan_voltages.first(), cfg.scan_voltages.last()) {
        spec.validate_range(spec.theta(*first), spec.theta(*last))?;
    }
    let t = cfg.scan_integration_s;
    let window_s = spec.coincidence_window_ns * 1e-9;
    let mut scans = Vec::new();
    for (vi, &voltage) in cfg.scan_voltages.iter().enumerate() {
        let u = spec.unitary_at_theta(spec.theta(voltage))?;
        for (pi, sel) in cfg.scan_ports.iter().enumerate() {
            let ((i, j), (m, n)) = sel.zero_based()?;
            let loss = spec.eta_in[i] * spec.eta_out[n] * spec.eta_in[j] * spec.eta_out[m];
            let singles = |out: usize| {
                spec.pair_rate
                    * t
                    * (spec.eta_in[i] * u[(i, out)].norm_sqr() + spec.eta_in[j] * u[(j, out)].norm_sqr())
                    * spec.eta_out[out]
                    + spec.dark_counts_per_s * t
            };
            let (s_m, s_n) = (guarded(singles(m))?, guarded(singles(n))?);
            let accidental = if cfg.accidentals { s_m * s_n * window_s / t } else { 0.0 };
            let stream = (vi * cfg.scan_ports.len() + pi) as u64;
            let mut rows = Vec::with_capacity(cfg.delays_ps.len());
            for (k, &tau) in cfg.delays_ps.iter().enumerate() {
                let mut rng = record_rng(spec.rng_seed, STREAM_SCAN, stream, k as u64);
                let p = coincidence_vs_delay(&u, (i, j), (m, n), &DelayProfile::new(spec.kappa, tau)?)?;
                let mean = guarded(loss * spec.pair_rate * p * t + accidental)?;
                let row = if noise_free {
                    HomScanRow {
                        delay_ps: tau,
                        coincidences: mean,
                        singles_m: cfg.accidentals.then_some(s_m),
                        singles_n: cfg.accidentals.then_some(s_n),
                    }
                } else {
                    let coincidences = sample_poisson(mean, &mut rng);
                    let sm = sample_poisson(s_m, &mut rng);
                    let sn = sample_poisson(s_n, &mut rng);
                    HomScanRow {
                        delay_ps: tau,
                        coincidences,
                        singles_m: cfg.accidentals.then_some(sm),
                        singles_n: cfg.accidentals.then_some(sn),
                    }
                };
                rows.push(row);
            }
            let header = HomScanHeader {
                input_pair: (i, j),
                output_pair: (m, n),
                voltage,
                current: spec.current(voltage),
                integration_time: t,
                window_ns: spec.coincidence_window_ns,
            };
            scans.push(HomScanDataset::new(header, rows)?);
        }
    }
    Ok(scans)
}
