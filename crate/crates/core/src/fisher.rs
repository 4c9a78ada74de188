//! Nonclassical fringes `p(theta)` for one- and two-photon inputs and the
//! classical Fisher information `F = sum p'^2 / p` with tolerance bands.

use serde::{Deserialize, Serialize};

use crate::device::{Band, PhaseDevice, MODES};
use crate::error::{Error, Result};
use crate::interference::{n_photon_prob_oracle, single_photon_probs, two_photon_prob, FockState};
use crate::linalg::UnitaryMatrix;

/// Probabilities below this are treated as touching zero.
pub const P_FLOOR: f64 = 1e-9;
/// At `p < P_FLOOR`, a slope at or above this means the grid straddles a
/// transversal zero. Smaller slopes mark a quadratic zero and the term is dropped.
pub const SLOPE_SINGULAR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct FringeFamily {
    pub input: FockState,
    pub thetas: Vec<f64>,
    pub outcomes: Vec<FockState>,
    /// `probs[outcome][theta]`.
    pub probs: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FisherCurve {
    pub thetas: Vec<f64>,
    pub values: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// `n` evenly spaced points from `lo` to `hi` inclusive.
pub fn theta_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|q| lo + (hi - lo) * q as f64 / (n - 1) as f64).collect(),
    }
}

fn outcome_probs(u: &UnitaryMatrix, input: &FockState, outcomes: &[FockState]) -> Result<Vec<f64>> {
    match input.photon_modes()[..] {
        [i] => single_photon_probs(u, i),
        [i, j] if i != j => outcomes
            .iter()
            .map(|o| {
                let m = o.photon_modes();
                two_photon_prob(u, (i, j), (m[0], m[1]))
            })
            .collect(),
        _ => outcomes.iter().map(|o| n_photon_prob_oracle(u, input, o)).collect(),
    }
}

fn family_for_band(device: &dyn PhaseDevice, input: &FockState, thetas: &[f64], band: Band) -> Result<FringeFamily> {
    if input.modes() != MODES {
        return Err(Error::Shape { dim: input.modes(), expected: MODES, got: input.modes() });
    }
    if !(1..=2).contains(&input.total()) {
        return Err(Error::UnsupportedInput(format!("fringes are computed for 1 or 2 photons, got {}", input.total())));
    }
    let outcomes = FockState::enumerate(MODES, input.total());
    let mut probs = vec![Vec::with_capacity(thetas.len()); outcomes.len()];
    for &theta in thetas {
        let u = device.unitary(theta, band)?;
        for (row, p) in probs.iter_mut().zip(outcome_probs(&u, input, &outcomes)?) {
            row.push(p);
        }
    }
    Ok(FringeFamily { input: input.clone(), thetas: thetas.to_vec(), outcomes, probs })
}

/// Outcome probabilities over a phase grid from the device's central couplings.
pub fn fringe_family(device: &dyn PhaseDevice, input: &FockState, thetas: &[f64]) -> Result<FringeFamily> {
    family_for_band(device, input, thetas, Band::Central)
}

fn grid_step(thetas: &[f64]) -> Result<f64> {
    if thetas.len() < 3 {
        return Err(Error::Domain(format!("need at least 3 grid points, got {}", thetas.len())));
    }
    let h = (thetas[thetas.len() - 1] - thetas[0]) / (thetas.len() - 1) as f64;
    if !(h > 0.0) {
        return Err(Error::Domain("grid must be increasing".into()));
    }
    for w in thetas.windows(2) {
        if ((w[1] - w[0]) - h).abs() > 1e-6 * h {
            return Err(Error::Domain(format!("grid spacing is not uniform near theta = {}", w[0])));
        }
    }
    Ok(h)
}

fn derivative(p: &[f64], h: f64, t: usize) -> f64 {
    let n = p.len();
    if t == 0 {
        (-3.0 * p[0] + 4.0 * p[1] - p[2]) / (2.0 * h)
    } else if t == n - 1 {
        (3.0 * p[n - 1] - 4.0 * p[n - 2] + p[n - 3]) / (2.0 * h)
    } else {
        (p[t + 1] - p[t - 1]) / (2.0 * h)
    }
}

fn fisher_values(f: &FringeFamily) -> Result<Vec<f64>> {
    let h = grid_step(&f.thetas)?;
    let mut values = vec![0.0; f.thetas.len()];
    for p in &f.probs {
        for (t, acc) in values.iter_mut().enumerate() {
            let dp = derivative(p, h, t);
            if p[t] < P_FLOOR {
                if dp.abs() >= SLOPE_SINGULAR {
                    return Err(Error::SingularTerm { theta: f.thetas[t], p: p[t], dp });
                }
                continue;
            }
            *acc += dp * dp / p[t];
        }
    }
    Ok(values)
}

/// Fisher information of a fringe family. Bands collapse onto the curve.
pub fn fisher_curve(f: &FringeFamily) -> Result<FisherCurve> {
    let values = fisher_values(f)?;
    Ok(FisherCurve { thetas: f.thetas.clone(), lower: values.clone(), upper: values.clone(), values })
}

/// Central Fisher curve with pointwise min/max over the eight coupling-band corners.
pub fn fisher_with_bands(device: &dyn PhaseDevice, input: &FockState, thetas: &[f64]) -> Result<FisherCurve> {
    let mut curve = fisher_curve(&fringe_family(device, input, thetas)?)?;
    for band in Band::corners() {
        let corner = fisher_values(&family_for_band(device, input, thetas, band)?)?;
        for (t, v) in corner.into_iter().enumerate() {
            curve.lower[t] = curve.lower[t].min(v);
            curve.upper[t] = curve.upper[t].max(v);
        }
    }
    Ok(curve)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisherSummary {
    #[serde(rename = "max_F")]
    pub max_f: f64,
    pub argmax_theta: f64,
    /// Maximal runs of grid points with `F > threshold`, as `[first, last]` theta.
    #[serde(rename = "theta_interval_where_F_exceeds_2")]
    pub intervals_above_2: Vec<[f64; 2]>,
}

/// Runs of consecutive grid points where `values > threshold`.
pub fn intervals_above(thetas: &[f64], values: &[f64], threshold: f64) -> Vec<[f64; 2]> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for t in 0..=values.len() {
        let above = t < values.len() && values[t] > threshold;
        match (above, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                out.push([thetas[s], thetas[t - 1]]);
                start = None;
            }
            _ => {}
        }
    }
    out
}

impl FisherCurve {
    pub fn summary(&self) -> FisherSummary {
        let (idx, max) = self.values.iter().copied().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        });
        FisherSummary {
            max_f: max,
            argmax_theta: self.thetas.get(idx).copied().unwrap_or(f64::NAN),
            intervals_above_2: intervals_above(&self.thetas, &self.values, 2.0),
        }
    }
}
