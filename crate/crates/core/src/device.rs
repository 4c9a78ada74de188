//! Parametric model of the tunable three-arm interferometer.
//!
//! A device at one heater setpoint is described by a real symmetric coupling
//! matrix `C = [[b, g1, g3], [g1, b, g2], [g3, g2, b]]`; its unitary is
//! `exp(-i C)`. A calibrated [`DeviceModel`] holds one coupling per setpoint
//! together with tolerance bands, the thermo-optic calibration constant and
//! the facet/detector loss products needed for absolute count predictions.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{herm_expm, ComplexMatrix, HermitianMatrix, UnitaryMatrix};

pub const MODES: usize = 3;

/// Relative slack allowed at the ends of the calibrated phase range.
const RANGE_SLACK: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CouplingMatrix {
    /// Common propagation phase; only ever contributes a global phase.
    pub beta: f64,
    /// Effective couplings `(g1, g2, g3)` between arms (1,2), (2,3), (1,3).
    pub g: [f64; 3],
}

impl CouplingMatrix {
    pub fn new(beta: f64, g: [f64; 3]) -> Result<Self> {
        if !beta.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { beta, g })
    }

    /// Couplings with `beta = 0`.
    pub fn from_g(g: [f64; 3]) -> Result<Self> {
        Self::new(0.0, g)
    }

    /// Projection onto the `g >= 0` branch. Count data only constrain `|U_ij|^2`,
    /// which is unchanged by flipping the sign of any coupling.
    pub fn canonical(self) -> Self {
        Self { beta: self.beta, g: self.g.map(f64::abs) }
    }

    pub fn is_canonical(&self) -> bool {
        self.g.iter().all(|&x| x >= 0.0)
    }

    pub fn to_hermitian(&self) -> HermitianMatrix {
        let [g1, g2, g3] = self.g;
        let b = self.beta;
        HermitianMatrix::from_real_symmetric(3, &[b, g1, g3, g1, b, g2, g3, g2, b]).expect("finite by construction")
    }

    /// Componentwise linear blend `(1 - t) * self + t * other`.
    pub fn lerp(&self, other: &Self, t: f64) -> Self {
        let mix = |a: f64, b: f64| a + (b - a) * t;
        Self {
            beta: mix(self.beta, other.beta),
            g: [mix(self.g[0], other.g[0]), mix(self.g[1], other.g[1]), mix(self.g[2], other.g[2])],
        }
    }
}

/// `U = exp(-i C)` for the coupling matrix `C`.
pub fn unitary_at(c: &CouplingMatrix) -> Result<UnitaryMatrix> {
    herm_expm(&c.to_hermitian(), -1.0)
}

/// Balanced three-port splitter: the 3x3 discrete Fourier transform.
pub fn ideal_tritter() -> UnitaryMatrix {
    let norm = 1.0 / 3f64.sqrt();
    let m = ComplexMatrix::from_fn(MODES, |j, k| Complex64::from_polar(norm, 2.0 * PI * ((j * k) % 3) as f64 / 3.0))
        .expect("finite");
    UnitaryMatrix::new(m).expect("DFT is unitary")
}

/// Ideal symmetric device: tritter, phase `theta` on the middle arm, tritter.
pub fn ideal_device_unitary(theta: f64) -> Result<UnitaryMatrix> {
    if !theta.is_finite() {
        return Err(Error::Domain(format!("phase must be finite, got {theta}")));
    }
    let t = ideal_tritter();
    let one = Complex64::new(1.0, 0.0);
    let phase = ComplexMatrix::diagonal(&[one, Complex64::from_polar(1.0, theta), one]);
    UnitaryMatrix::new(&(t.matrix() * &phase) * t.matrix())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseCalibration {
    /// Thermo-optic coefficient, rad per W of dissipated power.
    pub k: f64,
    pub k_uncertainty: f64,
}

impl PhaseCalibration {
    pub fn new(k: f64, k_uncertainty: f64) -> Result<Self> {
        if !(k > 0.0 && k.is_finite()) || !(k_uncertainty >= 0.0 && k_uncertainty.is_finite()) {
            return Err(Error::Domain(format!(
                "calibration needs k > 0 and a finite uncertainty, got k = {k} +/- {k_uncertainty}"
            )));
        }
        Ok(Self { k, k_uncertainty })
    }
}

/// Induced phase `theta = k * I * V`.
pub fn phase_from_power(cal: &PhaseCalibration, current: f64, voltage: f64) -> Result<f64> {
    if !(current >= 0.0) || !(voltage >= 0.0) {
        return Err(Error::Domain(format!(
            "heater current and voltage must be non-negative, got I = {current}, V = {voltage}"
        )));
    }
    Ok(cal.k * current * voltage)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SetpointRecord {
    pub voltage: f64,
    pub current: f64,
    pub theta: f64,
    pub coupling: CouplingMatrix,
    pub coupling_lo: CouplingMatrix,
    pub coupling_hi: CouplingMatrix,
}

impl SetpointRecord {
    /// Setpoint with zero-width tolerance bands.
    pub fn exact(voltage: f64, current: f64, theta: f64, coupling: CouplingMatrix) -> Self {
        Self { voltage, current, theta, coupling, coupling_lo: coupling, coupling_hi: coupling }
    }

    fn validate(&self) -> Result<()> {
        if !self.coupling.is_canonical() {
            return Err(Error::Domain(format!(
                "setpoint at theta = {} has negative couplings {:?}",
                self.theta, self.coupling.g
            )));
        }
        for a in 0..3 {
            if !(self.coupling_lo.g[a] <= self.coupling.g[a] && self.coupling.g[a] <= self.coupling_hi.g[a]) {
                return Err(Error::Domain(format!(
                    "setpoint at theta = {}: band for g{} does not bracket the central value",
                    self.theta,
                    a + 1
                )));
            }
        }
        Ok(())
    }

    /// Coupling at one of the eight band corners; bit `a` of `mask` selects
    /// the upper bound for `g_{a+1}`.
    pub fn corner(&self, mask: u8) -> CouplingMatrix {
        let mut g = [0.0; 3];
        for (a, slot) in g.iter_mut().enumerate() {
            *slot = if mask & (1 << a) != 0 { self.coupling_hi.g[a] } else { self.coupling_lo.g[a] };
        }
        CouplingMatrix { beta: self.coupling.beta, g }
    }
}

/// Which coupling to use when evaluating a banded device.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Band {
    Central,
    /// Corner index in `0..8`; see [`SetpointRecord::corner`].
    Corner(u8),
}

impl Band {
    pub fn corners() -> impl Iterator<Item = Band> {
        (0u8..8).map(Band::Corner)
    }
}

/// Anything that yields a device unitary as a function of the induced phase.
pub trait PhaseDevice {
    /// Phases over which [`PhaseDevice::unitary`] is defined.
    fn theta_range(&self) -> (f64, f64);

    fn unitary(&self, theta: f64, band: Band) -> Result<UnitaryMatrix>;
}

/// The ideal symmetric reference device. It has no tolerance bands: every
/// corner evaluates to the central unitary.
#[derive(Clone, Copy, Debug)]
pub struct IdealDevice {
    pub range: (f64, f64),
}

impl Default for IdealDevice {
    fn default() -> Self {
        Self { range: (-PI, PI) }
    }
}

impl PhaseDevice for IdealDevice {
    fn theta_range(&self) -> (f64, f64) {
        self.range
    }

    fn unitary(&self, theta: f64, _band: Band) -> Result<UnitaryMatrix> {
        ideal_device_unitary(theta)
    }
}

/// Calibrated device: per-setpoint couplings and the data needed to turn
/// probabilities into count rates.
#[derive(Clone, Debug, PartialEq)]
pub struct DeviceModel {
    setpoints: Vec<SetpointRecord>,
    pub calibration: PhaseCalibration,
    /// `eta_in[i] * eta_out[j]` keyed by 0-based `(input, output)`.
    pub loss_products: BTreeMap<(usize, usize), f64>,
    /// Photon pairs per second delivered to the chip.
    pub input_pair_rate: f64,
}

impl DeviceModel {
    pub fn new(
        setpoints: Vec<SetpointRecord>,
        calibration: PhaseCalibration,
        loss_products: BTreeMap<(usize, usize), f64>,
        input_pair_rate: f64,
    ) -> Result<Self> {
        if setpoints.is_empty() {
            return Err(Error::Domain("device model needs at least one setpoint".into()));
        }
        for sp in &setpoints {
            sp.validate()?;
            unitary_at(&sp.coupling)?;
        }
        if let Some(w) = setpoints.windows(2).find(|w| !(w[0].theta < w[1].theta)) {
            return Err(Error::Domain(format!(
                "setpoints must be strictly ascending in theta ({} then {})",
                w[0].theta, w[1].theta
            )));
        }
        for (&(i, j), &v) in &loss_products {
            if i >= MODES || j >= MODES {
                return Err(Error::IndexOutOfRange { index: i.max(j), dim: MODES });
            }
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Domain(format!("loss product ({},{}) = {v} outside (0, 1]", i + 1, j + 1)));
            }
        }
        if !(input_pair_rate >= 0.0 && input_pair_rate.is_finite()) {
            return Err(Error::Domain(format!("input pair rate must be >= 0, got {input_pair_rate}")));
        }
        Ok(Self { setpoints, calibration, loss_products, input_pair_rate })
    }

    /// All nine loss products set to one.
    pub fn lossless_products() -> BTreeMap<(usize, usize), f64> {
        (0..MODES).flat_map(|i| (0..MODES).map(move |j| ((i, j), 1.0))).collect()
    }

    pub fn setpoints(&self) -> &[SetpointRecord] {
        &self.setpoints
    }

    pub fn loss_product(&self, input: usize, output: usize) -> Result<f64> {
        self.loss_products
            .get(&(input, output))
            .copied()
            .ok_or(Error::Unrecoverable { input: input + 1, output: output + 1 })
    }

    /// Coupling at band `band`, linearly interpolated between bracketing setpoints.
    pub fn coupling_at(&self, theta: f64, band: Band) -> Result<CouplingMatrix> {
        let (min, max) = self.theta_range();
        let slack = RANGE_SLACK * (1.0 + min.abs().max(max.abs()));
        if !(theta >= min - slack && theta <= max + slack) {
            return Err(Error::OutOfRange { theta, min, max });
        }
        let pick = |sp: &SetpointRecord| match band {
            Band::Central => sp.coupling,
            Band::Corner(mask) => sp.corner(mask),
        };
        let sps = &self.setpoints;
        let upper = sps.partition_point(|sp| sp.theta < theta);
        if upper == 0 {
            return Ok(pick(&sps[0]));
        }
        if upper == sps.len() {
            return Ok(pick(&sps[sps.len() - 1]));
        }
        let (a, b) = (&sps[upper - 1], &sps[upper]);
        if b.theta == theta {
            return Ok(pick(b));
        }
        let t = (theta - a.theta) / (b.theta - a.theta);
        Ok(pick(a).lerp(&pick(b), t))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&DeviceModelDoc::from(self))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&DeviceModelDoc::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: DeviceModelDoc = serde_json::from_str(text)?;
        doc.try_into()
    }
}

/// Componentwise linear interpolation of the central couplings.
pub fn model_interpolate(m: &DeviceModel, theta: f64) -> Result<CouplingMatrix> {
    m.coupling_at(theta, Band::Central)
}

impl PhaseDevice for DeviceModel {
    fn theta_range(&self) -> (f64, f64) {
        (self.setpoints[0].theta, self.setpoints[self.setpoints.len() - 1].theta)
    }

    fn unitary(&self, theta: f64, band: Band) -> Result<UnitaryMatrix> {
        unitary_at(&self.coupling_at(theta, band)?)
    }
}

// JSON wire format. Ports in loss-product keys are 1-based.

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DeviceModelDoc {
    calibration: PhaseCalibration,
    setpoints: Vec<SetpointDoc>,
    loss_products: BTreeMap<String, f64>,
    input_pair_rate: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SetpointDoc {
    voltage: f64,
    current: f64,
    theta: f64,
    g: [f64; 3],
    g_lo: [f64; 3],
    g_hi: [f64; 3],
}

impl From<&DeviceModel> for DeviceModelDoc {
    fn from(m: &DeviceModel) -> Self {
        Self {
            calibration: m.calibration,
            setpoints: m
                .setpoints
                .iter()
                .map(|sp| SetpointDoc {
                    voltage: sp.voltage,
                    current: sp.current,
                    theta: sp.theta,
                    g: sp.coupling.g,
                    g_lo: sp.coupling_lo.g,
                    g_hi: sp.coupling_hi.g,
                })
                .collect(),
            loss_products: m.loss_products.iter().map(|(&(i, j), &v)| (format!("{},{}", i + 1, j + 1), v)).collect(),
            input_pair_rate: m.input_pair_rate,
        }
    }
}

impl TryFrom<DeviceModelDoc> for DeviceModel {
    type Error = Error;

    fn try_from(doc: DeviceModelDoc) -> Result<Self> {
        let setpoints = doc
            .setpoints
            .into_iter()
            .map(|s| {
                Ok(SetpointRecord {
                    voltage: s.voltage,
                    current: s.current,
                    theta: s.theta,
                    coupling: CouplingMatrix::from_g(s.g)?,
                    coupling_lo: CouplingMatrix::from_g(s.g_lo)?,
                    coupling_hi: CouplingMatrix::from_g(s.g_hi)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut losses = BTreeMap::new();
        for (key, v) in doc.loss_products {
            let parsed = key
                .split_once(',')
                .and_then(|(a, b)| Some((a.trim().parse::<usize>().ok()?, b.trim().parse::<usize>().ok()?)))
                .filter(|&(a, b)| (1..=MODES).contains(&a) && (1..=MODES).contains(&b));
            let (i, j) = parsed.ok_or_else(|| Error::Domain(format!("bad loss-product key {key:?}")))?;
            losses.insert((i - 1, j - 1), v);
        }
        DeviceModel::new(
            setpoints,
            PhaseCalibration::new(doc.calibration.k, doc.calibration.k_uncertainty)?,
            losses,
            doc.input_pair_rate,
        )
    }
}
