//! Reduction of coincidence-vs-delay scans to visibilities: accidental
//! subtraction, a Gaussian dip/peak fit and the visibility with its error.

use crate::device::{phase_from_power, PhaseCalibration, MODES};
use crate::error::{Error, Result};
use crate::simplex::{minimize_restarting, SimplexOptions};

pub const MIN_SCAN_POINTS: usize = 15;
/// Points with `|tau - tau0| > BASELINE_SIGMAS * w` form the baseline region.
pub const BASELINE_SIGMAS: f64 = 3.0;
pub const MIN_BASELINE_POINTS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct HomScanHeader {
    /// 0-based input ports.
    pub input_pair: (usize, usize),
    /// 0-based output ports.
    pub output_pair: (usize, usize),
    pub voltage: f64,
    pub current: f64,
    pub integration_time: f64,
    pub window_ns: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HomScanRow {
    pub delay_ps: f64,
    /// Real-valued so noise-free synthetic scans can carry exact expectations.
    pub coincidences: f64,
    pub singles_m: Option<f64>,
    pub singles_n: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HomScanDataset {
    pub header: HomScanHeader,
    pub rows: Vec<HomScanRow>,
    /// Accidentals removed per row, once [`subtract_accidentals`] has run.
    pub accidentals: Option<Vec<f64>>,
}

impl HomScanDataset {
    pub fn new(header: HomScanHeader, rows: Vec<HomScanRow>) -> Result<Self> {
        let s = Self { header, rows, accidentals: None };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        for (a, b) in [h.input_pair, h.output_pair] {
            if a >= MODES || b >= MODES {
                return Err(Error::IndexOutOfRange { index: a.max(b), dim: MODES });
            }
            if a == b {
                return Err(Error::UnsupportedInput(format!("port pair ({}, {}) must be distinct", a + 1, b + 1)));
            }
        }
        if !(h.window_ns > 0.0) {
            return Err(Error::Domain(format!("coincidence window must be > 0, got {}", h.window_ns)));
        }
        if !(h.integration_time > 0.0) {
            return Err(Error::Domain(format!("integration time must be > 0, got {}", h.integration_time)));
        }
        if self.rows.len() < MIN_SCAN_POINTS {
            return Err(Error::Domain(format!(
                "scan has {} delay points; need at least {MIN_SCAN_POINTS}",
                self.rows.len()
            )));
        }
        if let Some(w) = self.rows.windows(2).find(|w| !(w[1].delay_ps > w[0].delay_ps)) {
            return Err(Error::Domain(format!("delays not strictly increasing at {} ps", w[1].delay_ps)));
        }
        for r in &self.rows {
            let singles = [r.singles_m, r.singles_n];
            if !(r.coincidences >= 0.0 && r.coincidences.is_finite())
                || singles.iter().flatten().any(|s| !(*s >= 0.0 && s.is_finite()))
            {
                return Err(Error::Domain(format!("negative or non-finite count at {} ps", r.delay_ps)));
            }
        }
        Ok(())
    }

    pub fn delays(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.delay_ps).collect()
    }

    pub fn coincidences(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.coincidences).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AccidentalStatus {
    Subtracted,
    /// Subtraction would have gone negative on this many rows; they were floored at 0.
    Floored(usize),
    /// Singles were absent; the scan passed through unchanged.
    MissingSingles,
}

/// Removes `singles_m * singles_n * window / T` from every row, flooring at zero.
pub fn subtract_accidentals(s: &HomScanDataset) -> (HomScanDataset, AccidentalStatus) {
    if s.rows.iter().any(|r| r.singles_m.is_none() || r.singles_n.is_none()) {
        let mut out = s.clone();
        out.accidentals.get_or_insert_with(|| vec![0.0; s.rows.len()]);
        return (out, AccidentalStatus::MissingSingles);
    }
    let scale = s.header.window_ns * 1e-9 / s.header.integration_time;
    let mut floored = 0;
    let mut out = s.clone();
    let mut acc = Vec::with_capacity(s.rows.len());
    for r in &mut out.rows {
        let a = r.singles_m.unwrap_or(0.0) * r.singles_n.unwrap_or(0.0) * scale;
        if r.coincidences < a {
            floored += 1;
        }
        r.coincidences = (r.coincidences - a).max(0.0);
        acc.push(a);
    }
    out.accidentals = Some(acc);
    let status = if floored > 0 { AccidentalStatus::Floored(floored) } else { AccidentalStatus::Subtracted };
    (out, status)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisibilityRecord {
    /// 0-based input ports.
    pub input_pair: (usize, usize),
    /// 0-based output ports.
    pub output_pair: (usize, usize),
    pub voltage: f64,
    pub current: f64,
    /// Set once a phase calibration is applied.
    pub theta: Option<f64>,
    pub visibility: f64,
    pub visibility_sigma: f64,
    pub baseline: f64,
    pub extremum: f64,
    pub dip_center: f64,
    pub dip_width: f64,
}

impl VisibilityRecord {
    pub fn with_phase(mut self, cal: &PhaseCalibration) -> Result<Self> {
        self.theta = Some(phase_from_power(cal, self.current, self.voltage)?);
        Ok(self)
    }
}

/// `base + amp * exp(-(tau - tau0)^2 / (2 w^2))`.
pub fn gaussian(tau: f64, p: &[f64; 4]) -> f64 {
    let [base, amp, tau0, w] = *p;
    base + amp * (-(tau - tau0).powi(2) / (2.0 * w * w)).exp()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Cholesky solve of a symmetric positive-definite system, returning the inverse.
fn spd_inverse<const N: usize>(a: [[f64; N]; N]) -> Option<[[f64; N]; N]> {
    let mut l = [[0.0; N]; N];
    for i in 0..N {
        for j in 0..=i {
            let s = a[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            if i == j {
                if !(s > 1e-14 * a[i][i].abs()) {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut inv = [[0.0; N]; N];
    for c in 0..N {
        let mut y = [0.0; N];
        for i in 0..N {
            let rhs = if i == c { 1.0 } else { 0.0 };
            y[i] = (rhs - (0..i).map(|k| l[i][k] * y[k]).sum::<f64>()) / l[i][i];
        }
        for i in (0..N).rev() {
            inv[i][c] = (y[i] - (i + 1..N).map(|k| l[k][i] * inv[k][c]).sum::<f64>()) / l[i][i];
        }
    }
    Some(inv)
}

/// Fits a Gaussian dip or peak and returns the visibility `-amp / base`.
///
/// The scan should already have its accidentals subtracted. Weights are
/// Poisson, from the raw counts (fitted model plus removed accidentals).
pub fn fit_scan(s: &HomScanDataset) -> Result<VisibilityRecord> {
    s.validate()?;
    let tau = s.delays();
    let y = s.coincidences();
    let acc = s.accidentals.clone().unwrap_or_else(|| vec![0.0; y.len()]);
    let n = y.len();
    let span = tau[n - 1] - tau[0];
    let min_gap = tau.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    let (w_min, w_max) = (0.5 * min_gap, span / 8.0);
    // tau0 and w enter through a sine map onto their allowed ranges, which
    // keeps the objective smooth without hard clamps.
    let bounded = |x: f64, lo: f64, hi: f64| lo + (hi - lo) * 0.5 * (1.0 + x.sin());
    let unbounded = |v: f64, lo: f64, hi: f64| (2.0 * (v - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0).asin();

    let q = (n / 4).max(1);
    let outer: Vec<f64> = y[..q].iter().chain(&y[n - q..]).copied().collect();
    let base0 = median(outer);
    let ext = (0..n).max_by(|&a, &b| (y[a] - base0).abs().total_cmp(&(y[b] - base0).abs())).unwrap();
    let scale = y.iter().fold(base0.abs(), |m: f64, v| m.max(v.abs())).max(1.0);
    let params = |x: &[f64]| -> [f64; 4] {
        [x[0] * scale, x[1] * scale, bounded(x[2], tau[0], tau[n - 1]), bounded(x[3], w_min, w_max)]
    };

    let weights: Vec<f64> = y.iter().zip(&acc).map(|(v, a)| 1.0 / (v + a).max(1.0)).collect();
    let objective = |x: &[f64]| {
        let p = params(x);
        tau.iter().zip(&y).zip(&weights).map(|((t, v), w)| w * (v - gaussian(*t, &p)).powi(2)).sum::<f64>()
    };
    // Start just inside the range ends so the sine map is not stationary there.
    let start = [
        base0 / scale,
        (y[ext] - base0) / scale,
        unbounded(tau[ext], tau[0], tau[n - 1]).clamp(-1.5, 1.5),
        unbounded(span / 4.0, w_min, w_max).clamp(-1.5, 1.5),
    ];
    let probe = objective(&start);
    let opts = SimplexOptions {
        initial_step: vec![0.05, 0.05, 0.2, 0.2],
        x_tol: 1e-9,
        f_tol: 1e-13 * probe.max(1.0),
        max_evals: 100_000,
    };
    let mut res = minimize_restarting(objective, &start, &opts, 8);
    if res.converged {
        let tight = SimplexOptions { f_tol: 1e-13 * res.f.max(1e-6), max_evals: opts.max_evals, ..opts.clone() };
        let again = minimize_restarting(objective, &res.x, &tight, 8);
        if again.converged && again.f <= res.f {
            res = again;
        }
    }
    if !res.converged {
        return Err(Error::FitFailure {
            reason: format!("Gaussian fit did not converge after {} evaluations", res.evals),
            best: Some(params(&res.x).to_vec()),
        });
    }
    let p = params(&res.x);
    let [base, amp, tau0, w] = p;
    if !(base > 0.0) {
        return Err(Error::UndefinedVisibility { denominator: base });
    }
    let baseline_points = tau.iter().filter(|t| (*t - tau0).abs() > BASELINE_SIGMAS * w).count();
    if baseline_points < MIN_BASELINE_POINTS {
        return Err(Error::IllConditioned(format!(
            "only {baseline_points} points outside {BASELINE_SIGMAS} widths of the dip; need {MIN_BASELINE_POINTS}"
        )));
    }

    // Covariance from the Poisson-weighted Jacobian, inflated by the reduced
    // chi-square when the scatter exceeds Poisson.
    let mut jtj4 = [[0.0; 4]; 4];
    let mut chi2 = 0.0;
    for k in 0..n {
        let model = gaussian(tau[k], &p);
        let wgt = 1.0 / (model + acc[k]).max(1.0);
        let e = (-(tau[k] - tau0).powi(2) / (2.0 * w * w)).exp();
        let j = [1.0, e, amp * e * (tau[k] - tau0) / (w * w), amp * e * (tau[k] - tau0).powi(2) / w.powi(3)];
        for a in 0..4 {
            for b in 0..4 {
                jtj4[a][b] += wgt * j[a] * j[b];
            }
        }
        chi2 += wgt * (y[k] - model).powi(2);
    }
    let dof = (n - 4) as f64;
    let inflation = (chi2 / dof).max(1.0);
    let cov_ba = match spd_inverse(jtj4) {
        Some(c) => [[c[0][0], c[0][1]], [c[1][0], c[1][1]]],
        None => spd_inverse([[jtj4[0][0], jtj4[0][1]], [jtj4[1][0], jtj4[1][1]]])
            .ok_or_else(|| Error::IllConditioned("visibility covariance is singular".into()))?,
    };
    let grad = [amp / (base * base), -1.0 / base];
    let var = (0..2).map(|a| (0..2).map(|b| grad[a] * cov_ba[a][b] * grad[b]).sum::<f64>()).sum::<f64>();

    Ok(VisibilityRecord {
        input_pair: s.header.input_pair,
        output_pair: s.header.output_pair,
        voltage: s.header.voltage,
        current: s.header.current,
        theta: None,
        visibility: -amp / base,
        visibility_sigma: (var.max(0.0) * inflation).sqrt(),
        baseline: base,
        extremum: base + amp,
        dip_center: tau0,
        dip_width: w,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> HomScanHeader {
        HomScanHeader {
            input_pair: (0, 1),
            output_pair: (0, 1),
            voltage: 1.0,
            current: 0.01,
            integration_time: 1.0,
            window_ns: 1.0,
        }
    }

    fn scan_from(f: impl Fn(f64) -> f64, singles: Option<f64>) -> HomScanDataset {
        let rows = (0..41)
            .map(|q| {
                let tau = -2.0 + 0.1 * q as f64;
                HomScanRow { delay_ps: tau, coincidences: f(tau), singles_m: singles, singles_n: singles }
            })
            .collect();
        HomScanDataset::new(header(), rows).unwrap()
    }

    #[test]
    fn accidental_arithmetic() {
        let s = scan_from(|_| 60.0, Some(1e5));
        let (out, status) = subtract_accidentals(&s);
        assert_eq!(status, AccidentalStatus::Subtracted);
        assert!(out.rows.iter().all(|r| (r.coincidences - 50.0).abs() < 1e-9));

        let zero = scan_from(|_| 60.0, Some(0.0));
        assert_eq!(subtract_accidentals(&zero).0.coincidences(), zero.coincidences());

        let low = scan_from(|_| 5.0, Some(1e5));
        let (out, status) = subtract_accidentals(&low);
        assert_eq!(status, AccidentalStatus::Floored(41));
        assert!(out.rows.iter().all(|r| r.coincidences == 0.0));

        let missing = scan_from(|_| 5.0, None);
        let (out, status) = subtract_accidentals(&missing);
        assert_eq!(status, AccidentalStatus::MissingSingles);
        assert_eq!(out.coincidences(), missing.coincidences());
    }

    #[test]
    fn tritter_dip_gives_one_half() {
        let kappa = 34.657;
        let s = scan_from(|t| 1000.0 * (2.0 / 9.0 - (1.0 / 9.0) * (-kappa * t * t / 2.0).exp()), None);
        let v = fit_scan(&s).unwrap();
        assert!((v.visibility - 0.5).abs() < 1e-6, "{}", v.visibility);
        assert!((v.dip_width - 1.0 / kappa.sqrt()).abs() < 1e-5);
    }

    #[test]
    fn full_hom_dip_and_peak_signs() {
        let dip = fit_scan(&scan_from(|t| 500.0 * (1.0 - (-t * t / 0.08).exp()), None)).unwrap();
        assert!((dip.visibility - 1.0).abs() < 1e-6);
        let peak = fit_scan(&scan_from(|t| 500.0 * (1.0 + 0.4 * (-(t - 0.1).powi(2) / 0.08).exp()), None)).unwrap();
        assert!((peak.visibility + 0.4).abs() < 1e-6);
        assert!((peak.dip_center - 0.1).abs() < 1e-5);
    }

    #[test]
    fn flat_scan_has_zero_visibility() {
        let v = fit_scan(&scan_from(|_| 700.0, None)).unwrap();
        assert!(v.visibility.abs() < 1e-6, "{}", v.visibility);
        assert!(v.visibility_sigma > 0.0);
    }

    #[test]
    fn empty_baseline_is_undefined() {
        assert!(matches!(fit_scan(&scan_from(|_| 0.0, None)), Err(Error::UndefinedVisibility { .. })));
    }

    #[test]
    fn short_or_unordered_scans_are_rejected() {
        let rows: Vec<HomScanRow> = (0..10)
            .map(|q| HomScanRow { delay_ps: q as f64, coincidences: 1.0, singles_m: None, singles_n: None })
            .collect();
        assert!(HomScanDataset::new(header(), rows.clone()).is_err());
        let mut rows: Vec<HomScanRow> = (0..20)
            .map(|q| HomScanRow { delay_ps: q as f64, coincidences: 1.0, singles_m: None, singles_n: None })
            .collect();
        rows.swap(3, 4);
        assert!(HomScanDataset::new(header(), rows).is_err());
    }

    #[test]
    fn spd_inverse_round_trip() {
        let a = [[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 2.0]];
        let inv = spd_inverse(a).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| a[i][k] * inv[k][j]).sum();
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        assert!(spd_inverse([[1.0, 1.0], [1.0, 1.0]]).is_none());
    }
}
