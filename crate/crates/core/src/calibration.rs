//! Extraction of the phase-dependent unitary from classical fringe data.
//!
//! Per setpoint, loss-invariant ratios of single counts are fitted by a
//! Gaussian log-likelihood over the three couplings `(g1, g2, g3)`. The
//! fitted `|U_ij|^2` against dissipated power then fix the thermo-optic
//! constant `k`, and the raw counts fix the facet loss products.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::device::{
    unitary_at, Band, CouplingMatrix, DeviceModel, PhaseCalibration, PhaseDevice, SetpointRecord, MODES,
};
use crate::error::{Error, Result};
use crate::interference::{classical_two_photon_prob, two_photon_prob};
use crate::simplex::{minimize_restarting, SimplexOptions};

/// Counts below this make a ratio unusable (Poisson error propagation breaks down).
pub const COUNT_GUARD: f64 = 10.0;

/// The `(i, j, k, l)` index sets of the fitted ratios `F_1122`, `F_1133`, `F_2233`.
pub const RATIO_INDICES: [(usize, usize, usize, usize); 3] = [(0, 0, 1, 1), (0, 0, 2, 2), (1, 1, 2, 2)];

/// Elements with `|U_ij|^2` at or below this are too dark to fix a loss product.
pub const DARK_ELEMENT: f64 = 0.05;

/// Likelihood rise that marks the `1/e^2` point of `exp(-L)`.
const BAND_DELTA_L: f64 = 2.0;

const SIMPLEX_STEP: f64 = 0.1;
const SIMPLEX_X_TOL: f64 = 1e-8;
const SIMPLEX_F_TOL: f64 = 1e-12;
const MAX_EVALS: usize = 100_000;
const POLISH_STEP: f64 = 1e-6;
const POLISH_X_TOL: f64 = 1e-11;
const POLISH_EVALS: usize = 2_000;
const RESTARTS: usize = 3;

/// Starting couplings for the first setpoint of a sweep.
pub const CANONICAL_SEED: [f64; 3] = [FRAC_PI_4; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct FringeRecord {
    pub voltage: f64,
    pub current: f64,
    /// 0-based input port.
    pub input_port: usize,
    /// Counts at outputs 1..3. Real-valued so noise-free synthetic data can
    /// carry exact expectations.
    pub counts: [f64; 3],
    pub integration_time: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FringeDataset {
    pub records: Vec<FringeRecord>,
    /// Photons per second injected at the chip input.
    pub source_rate: f64,
}

/// The nine count series at one voltage, `counts[input][output]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FringeSetpoint {
    pub voltage: f64,
    pub current: f64,
    pub counts: [[f64; 3]; 3],
    pub integration_time: [f64; 3],
}

impl FringeDataset {
    pub fn new(records: Vec<FringeRecord>, source_rate: f64) -> Result<Self> {
        let d = Self { records, source_rate };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.source_rate > 0.0 && self.source_rate.is_finite()) {
            return Err(Error::Domain(format!("source rate must be > 0, got {}", self.source_rate)));
        }
        for r in &self.records {
            if r.input_port >= MODES {
                return Err(Error::IndexOutOfRange { index: r.input_port, dim: MODES });
            }
            if r.counts.iter().any(|&c| !(c >= 0.0 && c.is_finite())) {
                return Err(Error::Domain(format!("negative or non-finite count at {} V", r.voltage)));
            }
            if !(r.integration_time > 0.0) {
                return Err(Error::Domain(format!("integration time must be > 0 at {} V", r.voltage)));
            }
        }
        self.setpoints().map(|_| ())
    }

    /// Records grouped by voltage, ascending. Every voltage must carry exactly
    /// one record per input port.
    pub fn setpoints(&self) -> Result<Vec<FringeSetpoint>> {
        let mut by_voltage: BTreeMap<u64, Vec<&FringeRecord>> = BTreeMap::new();
        for r in &self.records {
            if !r.voltage.is_finite() || r.voltage < 0.0 {
                return Err(Error::Domain(format!("voltage must be finite and >= 0, got {}", r.voltage)));
            }
            // Non-negative floats order like their bit patterns.
            by_voltage.entry(r.voltage.to_bits()).or_default().push(r);
        }
        by_voltage
            .into_values()
            .map(|group| {
                let voltage = group[0].voltage;
                let mut counts = [[0.0; 3]; 3];
                let mut integration = [0.0; 3];
                let mut seen = [false; 3];
                for r in &group {
                    if std::mem::replace(&mut seen[r.input_port], true) {
                        return Err(Error::Domain(format!(
                            "duplicate record for input {} at {voltage} V",
                            r.input_port + 1
                        )));
                    }
                    counts[r.input_port] = r.counts;
                    integration[r.input_port] = r.integration_time;
                }
                if let Some(p) = seen.iter().position(|s| !s) {
                    return Err(Error::Domain(format!("missing input {} at {voltage} V", p + 1)));
                }
                let current = group.iter().map(|r| r.current).sum::<f64>() / group.len() as f64;
                Ok(FringeSetpoint { voltage, current, counts, integration_time: integration })
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ratio {
    pub value: f64,
    pub sigma: f64,
}

/// Ratios at one voltage; `None` marks a ratio excluded by the count guard.
#[derive(Clone, Debug, PartialEq)]
pub struct SetpointRatios {
    pub voltage: f64,
    pub current: f64,
    pub ratios: [Option<Ratio>; 3],
}

impl SetpointRatios {
    pub fn usable(&self) -> usize {
        self.ratios.iter().flatten().count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RatioSet {
    pub setpoints: Vec<SetpointRatios>,
}

/// `F_ijkl = x_ij x_kl / (x_il x_kj)` for a 3x3 array of counts or probabilities.
pub fn ratio_of(x: &[[f64; 3]; 3], (i, j, k, l): (usize, usize, usize, usize)) -> f64 {
    x[i][j] * x[k][l] / (x[i][l] * x[k][j])
}

/// Loss-invariant ratios with first-order Poisson errors for one count matrix.
pub fn ratios_from_counts(counts: &[[f64; 3]; 3]) -> [Option<Ratio>; 3] {
    RATIO_INDICES.map(|q @ (i, j, k, l)| {
        let used = [counts[i][j], counts[k][l], counts[i][l], counts[k][j]];
        if used.iter().any(|&n| n < COUNT_GUARD) {
            return None;
        }
        let value = ratio_of(counts, q);
        let rel = used.iter().map(|n| 1.0 / n).sum::<f64>().sqrt();
        Some(Ratio { value, sigma: value * rel })
    })
}

pub fn compute_ratios(d: &FringeDataset) -> Result<RatioSet> {
    let setpoints = d
        .setpoints()?
        .into_iter()
        .map(|sp| SetpointRatios { voltage: sp.voltage, current: sp.current, ratios: ratios_from_counts(&sp.counts) })
        .collect();
    Ok(RatioSet { setpoints })
}

/// `|U_ij|^2` for the device with coupling `g`.
pub fn transition_probs(g: &CouplingMatrix) -> Result<[[f64; 3]; 3]> {
    let u = unitary_at(g)?;
    let mut p = [[0.0; 3]; 3];
    for (i, row) in p.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = u[(i, j)].norm_sqr();
        }
    }
    Ok(p)
}

/// Gaussian negative log-likelihood of the measured ratios given couplings `g`.
pub fn likelihood(g: &CouplingMatrix, r: &SetpointRatios) -> Result<f64> {
    if r.usable() == 0 {
        return Err(Error::DegenerateLikelihood { voltage: r.voltage });
    }
    let p = transition_probs(g)?;
    Ok(likelihood_from_probs(&p, r))
}

fn likelihood_from_probs(p: &[[f64; 3]; 3], r: &SetpointRatios) -> f64 {
    RATIO_INDICES
        .iter()
        .zip(&r.ratios)
        .filter_map(|(&q, measured)| {
            let m = measured.as_ref()?;
            let resid = (m.value - ratio_of(p, q)) / m.sigma;
            Some(0.5 * resid * resid)
        })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FitStatus {
    Ok,
    /// Fewer than three ratios survived the count guard; the fit is underdetermined.
    Partial,
    /// The seeded minimum looked local and restarts were used.
    Restarted,
}

impl FitStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            FitStatus::Ok => "ok",
            FitStatus::Partial => "partial",
            FitStatus::Restarted => "restarted",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SetpointFit {
    pub voltage: f64,
    pub current: f64,
    pub coupling: CouplingMatrix,
    pub coupling_lo: CouplingMatrix,
    pub coupling_hi: CouplingMatrix,
    pub likelihood: f64,
    pub evals: usize,
    pub status: FitStatus,
}

impl SetpointFit {
    pub fn into_record(self, theta: f64) -> SetpointRecord {
        SetpointRecord {
            voltage: self.voltage,
            current: self.current,
            theta,
            coupling: self.coupling,
            coupling_lo: self.coupling_lo,
            coupling_hi: self.coupling_hi,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitOptions {
    /// Seeds the random restarts.
    pub seed: u64,
    /// Pair rate written into the calibrated model.
    pub input_pair_rate: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { seed: 0, input_pair_rate: 0.0 }
    }
}

struct Candidate {
    g: [f64; 3],
    l: f64,
    evals: usize,
    converged: bool,
}

fn simplex_opts() -> SimplexOptions {
    SimplexOptions {
        initial_step: vec![SIMPLEX_STEP],
        x_tol: SIMPLEX_X_TOL,
        f_tol: SIMPLEX_F_TOL,
        max_evals: MAX_EVALS,
    }
}

fn run_simplex(r: &SetpointRatios, start: [f64; 3]) -> Candidate {
    let objective = |x: &[f64]| match CouplingMatrix::from_g([x[0].abs(), x[1].abs(), x[2].abs()]) {
        Ok(c) => transition_probs(&c).map(|p| likelihood_from_probs(&p, r)).unwrap_or(f64::INFINITY),
        Err(_) => f64::INFINITY,
    };
    // The objective is evaluated to ~1e-15 relative, so the flatness test
    // scales with the size of L at the minimum.
    let mut opts = simplex_opts();
    let probe = objective(&start);
    if probe.is_finite() {
        opts.f_tol = SIMPLEX_F_TOL * probe.max(1.0);
    }
    let mut res = minimize_restarting(objective, &start, &opts, 4);
    if !res.converged || res.f > 1.0 {
        opts.f_tol = SIMPLEX_F_TOL * res.f.max(1.0);
        let budget = SimplexOptions { max_evals: MAX_EVALS.saturating_sub(res.evals), ..opts };
        let again = minimize_restarting(objective, &res.x, &budget, 4);
        res = crate::simplex::SimplexResult { evals: res.evals + again.evals, ..again };
    }
    // Polish: a small simplex around the minimum with a tighter diameter.
    let polish_opts = SimplexOptions {
        initial_step: vec![POLISH_STEP],
        x_tol: POLISH_X_TOL,
        f_tol: SIMPLEX_F_TOL * res.f.max(1.0),
        max_evals: POLISH_EVALS,
    };
    let polished = crate::simplex::minimize(objective, &res.x, &polish_opts);
    res.evals += polished.evals;
    if polished.f <= res.f {
        res.x = polished.x;
        res.f = polished.f;
    }
    Candidate {
        g: [res.x[0].abs(), res.x[1].abs(), res.x[2].abs()],
        l: res.f,
        evals: res.evals,
        converged: res.converged,
    }
}

fn norm(g: &[f64; 3]) -> f64 {
    g.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Fits the couplings at one voltage by simplex minimisation of the likelihood.
///
/// When the seeded minimum exceeds ten times the number of usable ratios it
/// is treated as local: the fit is repeated from the canonical seed and from
/// random points in `[0, pi/2]^3`. Among minima equal to within numerical
/// precision the one closest to zero coupling is kept, which makes the choice
/// between exactly degenerate solutions deterministic.
pub fn fit_setpoint(r: &SetpointRatios, seed: &CouplingMatrix, opts: &FitOptions) -> Result<SetpointFit> {
    fit_from_seeds(r, &[*seed], None, opts)
}

/// Likelihood difference below which two minima are statistically
/// indistinguishable (the band criterion).
const INDISTINGUISHABLE_L: f64 = BAND_DELTA_L;

/// As [`fit_setpoint`] with several seeds. With a `continuation` point,
/// the kept minimum is the one nearest to it among all minima within
/// [`INDISTINGUISHABLE_L`] of the best; this follows a smooth branch
/// through points where exact solution branches touch.
fn fit_from_seeds(
    r: &SetpointRatios,
    seeds: &[CouplingMatrix],
    continuation: Option<[f64; 3]>,
    opts: &FitOptions,
) -> Result<SetpointFit> {
    let usable = r.usable();
    if usable == 0 {
        return Err(Error::DegenerateLikelihood { voltage: r.voltage });
    }
    if let Some(seed) = seeds.iter().find(|s| !s.is_canonical()) {
        return Err(Error::Domain(format!("seed must lie on the g >= 0 branch, got {:?}", seed.g)));
    }
    let mut candidates: Vec<Candidate> = seeds.iter().map(|s| run_simplex(r, s.g)).collect();
    let mut status = if usable < 3 { FitStatus::Partial } else { FitStatus::Ok };

    let seeded_best = candidates.iter().map(|c| c.l).fold(f64::INFINITY, f64::min);
    if seeded_best > 10.0 * usable as f64 {
        status = FitStatus::Restarted;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ r.voltage.to_bits().rotate_left(17));
        for k in 0..RESTARTS {
            let start = if k == 0 {
                CANONICAL_SEED
            } else {
                [rng.random_range(0.0..FRAC_PI_2), rng.random_range(0.0..FRAC_PI_2), rng.random_range(0.0..FRAC_PI_2)]
            };
            candidates.push(run_simplex(r, start));
        }
    }

    let evals: usize = candidates.iter().map(|c| c.evals).sum();
    let best_l = candidates.iter().map(|c| c.l).fold(f64::INFINITY, f64::min);
    let chosen = match continuation {
        Some(target) => {
            let dist = |g: &[f64; 3]| norm(&std::array::from_fn(|i| g[i] - target[i]));
            candidates
                .iter()
                .filter(|c| c.l <= best_l + INDISTINGUISHABLE_L)
                .min_by(|a, b| dist(&a.g).total_cmp(&dist(&b.g)))
        }
        None => {
            let tie = 1e-9 + 1e-6 * best_l;
            candidates.iter().filter(|c| c.l <= best_l + tie).min_by(|a, b| norm(&a.g).total_cmp(&norm(&b.g)))
        }
    }
    .expect("at least one candidate");
    if !chosen.converged {
        return Err(Error::FitFailure {
            reason: format!("simplex did not converge at {} V after {evals} evaluations", r.voltage),
            best: Some(chosen.g.to_vec()),
        });
    }

    let coupling = CouplingMatrix::from_g(chosen.g)?;
    let (lo, hi) = likelihood_bands(r, &coupling, chosen.l)?;
    Ok(SetpointFit {
        voltage: r.voltage,
        current: r.current,
        coupling,
        coupling_lo: CouplingMatrix::from_g(lo)?,
        coupling_hi: CouplingMatrix::from_g(hi)?,
        likelihood: chosen.l,
        evals,
        status,
    })
}

/// Per-axis points where `L` rises by 2 above its minimum (the `1/e^2` width
/// of `exp(-L)`), holding the other couplings fixed.
fn likelihood_bands(r: &SetpointRatios, best: &CouplingMatrix, l_min: f64) -> Result<([f64; 3], [f64; 3])> {
    let mut lo = best.g;
    let mut hi = best.g;
    for axis in 0..3 {
        let excess = |x: f64| -> f64 {
            let mut g = best.g;
            g[axis] = x;
            match CouplingMatrix::from_g(g).and_then(|c| likelihood(&c, r)) {
                Ok(l) => l - l_min - BAND_DELTA_L,
                Err(_) => f64::INFINITY,
            }
        };
        let centre = best.g[axis];
        hi[axis] = band_edge(&excess, centre, centre + PI);
        lo[axis] = if excess(0.0) < 0.0 { 0.0 } else { band_edge(&excess, centre, 0.0) };
    }
    Ok((lo, hi))
}

/// Walks from `centre` towards `limit` with growing steps until `excess`
/// turns non-negative, then bisects. Returns `limit` if it never does.
fn band_edge(excess: &impl Fn(f64) -> f64, centre: f64, limit: f64) -> f64 {
    let dir = (limit - centre).signum();
    let span = (limit - centre).abs();
    if span == 0.0 {
        return limit;
    }
    let mut inside = centre;
    let mut step = 1e-6;
    let outside = loop {
        let x = if step >= span { limit } else { centre + dir * step };
        if excess(x) >= 0.0 {
            break x;
        }
        if step >= span {
            return limit;
        }
        inside = x;
        step *= 2.0;
    };
    let (mut a, mut b) = (inside, outside);
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if mid == a || mid == b {
            break;
        }
        if excess(mid) >= 0.0 {
            b = mid;
        } else {
            a = mid;
        }
    }
    b
}

/// One `|U_ij|^2` series against dissipated power.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseSeries {
    /// 0-based `(input, output)`.
    pub element: (usize, usize),
    /// `(power in W, |U_ij|^2)`.
    pub points: Vec<(f64, f64)>,
}

/// Per-series coefficients of `offset + A sin(kP) + B cos(kP)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FringeCoefficients {
    pub element: (usize, usize),
    pub a: f64,
    pub b: f64,
    pub offset: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseFit {
    pub calibration: PhaseCalibration,
    pub coefficients: Vec<FringeCoefficients>,
    pub residual_ss: f64,
    pub series_used: usize,
}

const K_GRID: usize = 2000;
const MIN_POINTS: usize = 5;

fn solve3(m: [[f64; 3]; 3], v: [f64; 3]) -> Option<[f64; 3]> {
    let det = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(m);
    let scale = m.iter().flatten().map(|x| x.abs()).fold(0.0, f64::max).powi(3);
    if d.abs() <= 1e-14 * scale {
        return None;
    }
    let mut out = [0.0; 3];
    for (c, slot) in out.iter_mut().enumerate() {
        let mut mc = m;
        for r in 0..3 {
            mc[r][c] = v[r];
        }
        *slot = det(mc) / d;
    }
    Some(out)
}

/// Closed-form least squares for `(offset, A, B)` at fixed `k`; returns the
/// coefficients and the residual sum of squares.
fn linear_fringe_fit(points: &[(f64, f64)], k: f64) -> ([f64; 3], f64) {
    let mut ata = [[0.0; 3]; 3];
    let mut aty = [0.0; 3];
    for &(p, y) in points {
        let (s, c) = (k * p).sin_cos();
        let row = [1.0, s, c];
        for r in 0..3 {
            aty[r] += row[r] * y;
            for q in 0..3 {
                ata[r][q] += row[r] * row[q];
            }
        }
    }
    let mean = points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64;
    let coef = solve3(ata, aty).unwrap_or([mean, 0.0, 0.0]);
    let ss = points
        .iter()
        .map(|&(p, y)| {
            let (s, c) = (k * p).sin_cos();
            let r = y - (coef[0] + coef[1] * s + coef[2] * c);
            r * r
        })
        .sum();
    (coef, ss)
}

/// Shared-`k` fit of `|U_ij|^2 = offset + A sin(kP) + B cos(kP)` across all
/// series: closed-form `(offset, A, B)` per series at fixed `k`, coarse scan
/// then golden-section search over `k`.
pub fn fit_phase_calibration(series: &[PhaseSeries]) -> Result<PhaseFit> {
    let series: Vec<&PhaseSeries> = series.iter().filter(|s| !s.points.is_empty()).collect();
    if series.is_empty() {
        return Err(Error::IllConditioned("no fringe series to fit".into()));
    }
    if let Some(s) = series.iter().find(|s| s.points.len() < MIN_POINTS) {
        return Err(Error::IllConditioned(format!(
            "series ({},{}) has {} points; need at least {MIN_POINTS}",
            s.element.0 + 1,
            s.element.1 + 1,
            s.points.len()
        )));
    }
    let mut powers: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    powers.sort_by(f64::total_cmp);
    powers.dedup();
    let span = powers[powers.len() - 1] - powers[0];
    if !(span > 0.0) || powers.len() < MIN_POINTS {
        return Err(Error::IllConditioned("powers do not span a range".into()));
    }
    let mut gaps: Vec<f64> = powers.windows(2).map(|w| w[1] - w[0]).collect();
    gaps.sort_by(f64::total_cmp);
    let median_gap = gaps[gaps.len() / 2];

    let total_var: f64 = series
        .iter()
        .map(|s| {
            let mean = s.points.iter().map(|p| p.1).sum::<f64>() / s.points.len() as f64;
            s.points.iter().map(|p| (p.1 - mean).powi(2)).sum::<f64>()
        })
        .sum();
    if total_var <= 1e-24 {
        return Err(Error::IllConditioned("all series are constant; k is unidentifiable".into()));
    }

    let sse = |k: f64| series.iter().map(|s| linear_fringe_fit(&s.points, k).1).sum::<f64>();

    let k_lo = 0.1 * PI / span;
    let k_hi = PI / median_gap;
    let ratio = (k_hi / k_lo).ln();
    let grid: Vec<f64> = (0..K_GRID).map(|q| k_lo * (ratio * q as f64 / (K_GRID - 1) as f64).exp()).collect();
    let values: Vec<f64> = grid.iter().map(|&k| sse(k)).collect();
    let (best_idx, _) = values.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap();
    let (vmin, vmax) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if vmax - vmin <= 1e-9 * total_var {
        return Err(Error::IllConditioned("fit objective is flat in k".into()));
    }

    let mut a = grid[best_idx.saturating_sub(1)];
    let mut b = grid[(best_idx + 1).min(K_GRID - 1)];
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (sse(c), sse(d));
    while (b - a) > 1e-14 * b {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = sse(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = sse(d);
        }
    }
    let k = 0.5 * (a + b);
    if k * span < PI {
        return Err(Error::IllConditioned(format!(
            "data span {:.3} rad at the fitted k; need at least half a fringe period",
            k * span
        )));
    }

    let residual_ss = sse(k);
    let n_points: usize = series.iter().map(|s| s.points.len()).sum();
    let n_params = 3 * series.len() + 1;
    let h = 1e-4 * k;
    let curvature = (sse(k + h) - 2.0 * residual_ss + sse(k - h)) / (h * h);
    let k_uncertainty = if n_points > n_params && curvature > 0.0 {
        let sigma2 = residual_ss / (n_points - n_params) as f64;
        (2.0 * sigma2 / curvature).sqrt()
    } else {
        0.0
    };

    let coefficients = series
        .iter()
        .map(|s| {
            let (coef, _) = linear_fringe_fit(&s.points, k);
            FringeCoefficients { element: s.element, offset: coef[0], a: coef[1], b: coef[2] }
        })
        .collect();
    Ok(PhaseFit {
        calibration: PhaseCalibration::new(k, k_uncertainty)?,
        coefficients,
        residual_ss,
        series_used: series.len(),
    })
}

/// Recovered `eta_in[i] * eta_out[j]`; dark elements are listed separately.
#[derive(Clone, Debug, PartialEq)]
pub struct LossProducts {
    pub products: BTreeMap<(usize, usize), f64>,
    pub unrecoverable: Vec<(usize, usize)>,
}

/// Allowed excess over 1 before a loss product counts as inconsistent; covers rounding.
const LOSS_SLACK: f64 = 1e-9;

/// `eta_in[i] eta_out[j] = N_ij / (M T |U_ij|^2)`, count-weighted over the
/// setpoints where the element is bright.
pub fn solve_loss_products(d: &FringeDataset, m: &DeviceModel) -> Result<LossProducts> {
    let data = d.setpoints()?;
    let mut num = [[0.0; 3]; 3];
    let mut den = [[0.0; 3]; 3];
    for sp in &data {
        let tol = 1e-9 * sp.voltage.abs().max(1.0);
        let rec = m
            .setpoints()
            .iter()
            .find(|r| (r.voltage - sp.voltage).abs() <= tol)
            .ok_or_else(|| Error::Domain(format!("model has no setpoint at {} V", sp.voltage)))?;
        let p = transition_probs(&rec.coupling)?;
        for i in 0..MODES {
            for j in 0..MODES {
                if p[i][j] > DARK_ELEMENT {
                    let n = sp.counts[i][j];
                    let estimate = n / (d.source_rate * sp.integration_time[i] * p[i][j]);
                    num[i][j] += n * estimate;
                    den[i][j] += n;
                }
            }
        }
    }
    let mut products = BTreeMap::new();
    let mut unrecoverable = Vec::new();
    for i in 0..MODES {
        for j in 0..MODES {
            if den[i][j] <= 0.0 {
                unrecoverable.push((i, j));
                continue;
            }
            let v = num[i][j] / den[i][j];
            if v > 1.0 + LOSS_SLACK {
                return Err(Error::InconsistentNormalization { input: i + 1, output: j + 1, value: v });
            }
            products.insert((i, j), v.min(1.0));
        }
    }
    Ok(LossProducts { products, unrecoverable })
}

/// One row of the per-setpoint fit report.
#[derive(Clone, Debug, PartialEq)]
pub struct FitReportRow {
    pub voltage: f64,
    pub theta: f64,
    pub fit: SetpointFit,
}

#[derive(Clone, Debug)]
pub struct Calibration {
    pub model: DeviceModel,
    pub report: Vec<FitReportRow>,
    pub phase_fit: PhaseFit,
    pub losses: LossProducts,
    /// Voltages skipped because no ratio survived the count guard.
    pub skipped: Vec<f64>,
}

/// Linear extrapolation in dissipated power from the last two solutions.
fn extrapolate(fits: &[SetpointFit], power: f64) -> Option<[f64; 3]> {
    let [.., a, b] = fits else { return None };
    let (pa, pb) = (a.current * a.voltage, b.current * b.voltage);
    let t = (power - pb) / (pb - pa);
    if !t.is_finite() || !(0.0..=4.0).contains(&t) {
        return None;
    }
    Some(std::array::from_fn(|i| (b.coupling.g[i] + t * (b.coupling.g[i] - a.coupling.g[i])).abs()))
}

/// Fits every setpoint of a voltage sweep in order. Each fit is seeded from
/// the previous solution and from the linear extrapolation of the last two;
/// the extrapolation also decides between indistinguishable minima, so the
/// sweep follows a smooth branch through fringe extrema, where the
/// continuing and the mirrored solution branches touch.
pub fn fit_sweep(ratios: &RatioSet, opts: &FitOptions) -> Result<(Vec<SetpointFit>, Vec<f64>)> {
    let mut fits: Vec<SetpointFit> = Vec::with_capacity(ratios.setpoints.len());
    let mut skipped = Vec::new();
    for r in &ratios.setpoints {
        let previous = fits.last().map_or(CouplingMatrix::from_g(CANONICAL_SEED), |f| Ok(f.coupling))?;
        let ahead = extrapolate(&fits, r.current * r.voltage);
        let mut seeds = vec![previous];
        if let Some(g) = ahead {
            seeds.insert(0, CouplingMatrix::from_g(g)?);
        }
        match fit_from_seeds(r, &seeds, ahead, opts) {
            Ok(fit) => fits.push(fit),
            Err(Error::DegenerateLikelihood { voltage }) => skipped.push(voltage),
            Err(e) => return Err(e),
        }
    }
    Ok((fits, skipped))
}

/// Full classical characterisation: couplings per setpoint, shared `k`,
/// phases, loss products.
pub fn calibrate(d: &FringeDataset, opts: &FitOptions) -> Result<Calibration> {
    let ratios = compute_ratios(d)?;
    let (fits, skipped) = fit_sweep(&ratios, opts)?;
    if fits.len() < MIN_POINTS {
        return Err(Error::IllConditioned(format!("only {} setpoints could be fitted", fits.len())));
    }

    let mut series = Vec::with_capacity(9);
    let probs: Vec<[[f64; 3]; 3]> = fits.iter().map(|f| transition_probs(&f.coupling)).collect::<Result<_>>()?;
    for i in 0..MODES {
        for j in 0..MODES {
            let points = fits.iter().zip(&probs).map(|(f, p)| (f.current * f.voltage, p[i][j])).collect();
            series.push(PhaseSeries { element: (i, j), points });
        }
    }
    let phase_fit = fit_phase_calibration(&series)?;
    let k = phase_fit.calibration.k;

    let report: Vec<FitReportRow> = fits
        .iter()
        .map(|f| FitReportRow { voltage: f.voltage, theta: k * f.current * f.voltage, fit: f.clone() })
        .collect();
    let setpoints: Vec<SetpointRecord> = report.iter().map(|row| row.fit.clone().into_record(row.theta)).collect();

    let provisional = DeviceModel::new(
        setpoints.clone(),
        phase_fit.calibration,
        DeviceModel::lossless_products(),
        opts.input_pair_rate,
    )?;
    let losses = solve_loss_products(d, &provisional)?;
    let model = DeviceModel::new(setpoints, phase_fit.calibration, losses.products.clone(), opts.input_pair_rate)?;
    Ok(Calibration { model, report, phase_fit, losses, skipped })
}

/// Predicted coincidence rate with its band over the coupling-tolerance corners.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoincidencePrediction {
    pub rate: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Rate `loss * p * pair_rate` for photons in `input` detected at `out`. The
/// loss factor pairs `(i, n)` with `(j, m)`, giving
/// `eta_i^in eta_n^out eta_j^in eta_m^out`.
pub fn predict_coincidence_rate(
    device: &dyn PhaseDevice,
    losses: &BTreeMap<(usize, usize), f64>,
    pair_rate: f64,
    input: (usize, usize),
    out: (usize, usize),
    theta: f64,
    indistinguishable: bool,
) -> Result<CoincidencePrediction> {
    let (i, j) = input;
    let (m, n) = out;
    let loss =
        |a: usize, b: usize| losses.get(&(a, b)).copied().ok_or(Error::Unrecoverable { input: a + 1, output: b + 1 });
    let factor = loss(i, n)? * loss(j, m)? * pair_rate;
    let prob = |band: Band| -> Result<f64> {
        let u = device.unitary(theta, band)?;
        if indistinguishable {
            two_photon_prob(&u, input, out)
        } else {
            classical_two_photon_prob(&u, input, out)
        }
    };
    let rate = factor * prob(Band::Central)?;
    let (mut lo, mut hi) = (rate, rate);
    for band in Band::corners() {
        let r = factor * prob(band)?;
        lo = lo.min(r);
        hi = hi.max(r);
    }
    Ok(CoincidencePrediction { rate, lo, hi })
}

pub fn predict_coincidences(
    m: &DeviceModel,
    input: (usize, usize),
    out: (usize, usize),
    theta: f64,
    indistinguishable: bool,
) -> Result<CoincidencePrediction> {
    predict_coincidence_rate(m, &m.loss_products, m.input_pair_rate, input, out, theta, indistinguishable)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interference::predicted_visibility;

    fn lossy_counts(g: [f64; 3], eta_in: [f64; 3], eta_out: [f64; 3], scale: f64) -> [[f64; 3]; 3] {
        let p = transition_probs(&CouplingMatrix::from_g(g).unwrap()).unwrap();
        let mut n = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                n[i][j] = eta_in[i] * eta_out[j] * p[i][j] * scale;
            }
        }
        n
    }

    fn ratios_at(counts: [[f64; 3]; 3]) -> SetpointRatios {
        SetpointRatios { voltage: 1.0, current: 0.01, ratios: ratios_from_counts(&counts) }
    }

    #[test]
    fn equal_counts_give_unit_ratios() {
        let c = 400.0;
        for r in ratios_from_counts(&[[c; 3]; 3]) {
            let r = r.unwrap();
            assert_eq!(r.value, 1.0);
            assert!((r.sigma - 2.0 / c.sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn direct_ratio_arithmetic() {
        let n = [[100.0, 50.0, 30.0], [50.0, 100.0, 30.0], [30.0, 30.0, 30.0]];
        assert_eq!(ratios_from_counts(&n)[0].unwrap().value, 4.0);
    }

    #[test]
    fn count_guard_flags_ratios() {
        let n = [[100.0, 5.0, 30.0], [50.0, 100.0, 30.0], [30.0, 30.0, 30.0]];
        let r = ratios_from_counts(&n);
        assert!(r[0].is_none());
        assert!(r[1].is_some() && r[2].is_some());
        let dark = SetpointRatios { voltage: 2.0, current: 0.0, ratios: [None; 3] };
        let g = CouplingMatrix::from_g([0.1; 3]).unwrap();
        assert!(matches!(likelihood(&g, &dark), Err(Error::DegenerateLikelihood { .. })));
    }

    #[test]
    fn ratios_cancel_losses() {
        let g = [0.8, 0.6, 0.1];
        let lossless = ratios_from_counts(&lossy_counts(g, [1.0; 3], [1.0; 3], 1e6));
        let lossy = ratios_from_counts(&lossy_counts(g, [0.5, 0.4, 0.3], [0.2, 0.25, 0.3], 1e6));
        for (a, b) in lossless.iter().zip(&lossy) {
            assert!((a.unwrap().value - b.unwrap().value).abs() < 1e-12 * a.unwrap().value);
        }
    }

    #[test]
    fn likelihood_zero_at_truth_and_half_per_sigma() {
        let g = CouplingMatrix::from_g([0.8, 0.6, 0.1]).unwrap();
        let r = ratios_at(lossy_counts(g.g, [0.5, 0.4, 0.3], [0.2, 0.25, 0.3], 1e7));
        assert!(likelihood(&g, &r).unwrap() < 1e-18);

        let p = transition_probs(&g).unwrap();
        let mut shifted = r.clone();
        let m = shifted.ratios[1].as_mut().unwrap();
        m.value = ratio_of(&p, RATIO_INDICES[1]) + m.sigma;
        assert!((likelihood(&g, &shifted).unwrap() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn likelihood_invariant_under_sign_flip() {
        let mut state = 99u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..100 {
            let g = [2.0 * next(), 2.0 * next(), 2.0 * next()];
            let data = [next() * 2.0 + 0.1, next() * 2.0 + 0.1, next() * 2.0 + 0.1];
            let r = SetpointRatios {
                voltage: 0.0,
                current: 0.0,
                ratios: data.map(|v| Some(Ratio { value: v, sigma: 0.05 })),
            };
            let plus = likelihood(&CouplingMatrix::from_g(g).unwrap(), &r).unwrap();
            let minus = likelihood(&CouplingMatrix::from_g(g.map(|x| -x)).unwrap(), &r).unwrap();
            assert!((plus - minus).abs() <= 1e-10 * plus.max(1.0));
        }
    }

    #[test]
    fn noiseless_setpoint_round_trip() {
        let truth = [0.8, 0.6, 0.1];
        let r = ratios_at(lossy_counts(truth, [0.5, 0.4, 0.3], [0.2, 0.25, 0.3], 2e6));
        let near = CouplingMatrix::from_g([0.75, 0.65, 0.15]).unwrap();
        let fit = fit_setpoint(&r, &near, &FitOptions::default()).unwrap();
        for a in 0..3 {
            assert!((fit.coupling.g[a] - truth[a]).abs() < 1e-5, "{:?}", fit.coupling.g);
            assert!(fit.coupling_lo.g[a] <= fit.coupling.g[a] && fit.coupling.g[a] <= fit.coupling_hi.g[a]);
            assert!(fit.coupling_hi.g[a] > fit.coupling_lo.g[a]);
        }
        assert_eq!(fit.status, FitStatus::Ok);
    }

    #[test]
    fn far_seed_reaches_same_minimum() {
        let truth = [0.8, 0.6, 0.1];
        let r = ratios_at(lossy_counts(truth, [0.5, 0.4, 0.3], [0.2, 0.25, 0.3], 2e6));
        let near =
            fit_setpoint(&r, &CouplingMatrix::from_g([0.75, 0.65, 0.15]).unwrap(), &FitOptions::default()).unwrap();
        let far = fit_setpoint(&r, &CouplingMatrix::from_g([2.0; 3]).unwrap(), &FitOptions::default()).unwrap();
        for a in 0..3 {
            assert!(
                (near.coupling.g[a] - far.coupling.g[a]).abs() < 1e-5,
                "{:?} vs {:?}",
                near.coupling.g,
                far.coupling.g
            );
        }
    }

    #[test]
    fn band_is_the_delta_l_two_contour() {
        let truth = [0.7, 0.5, 0.3];
        let r = ratios_at(lossy_counts(truth, [1.0; 3], [1.0; 3], 1e5));
        let fit = fit_setpoint(&r, &CouplingMatrix::from_g(truth).unwrap(), &FitOptions::default()).unwrap();
        for a in 0..3 {
            for edge in [fit.coupling_lo.g[a], fit.coupling_hi.g[a]] {
                let mut g = fit.coupling.g;
                g[a] = edge;
                let l = likelihood(&CouplingMatrix::from_g(g).unwrap(), &r).unwrap();
                assert!((l - fit.likelihood - 2.0).abs() < 1e-6, "axis {a}: {l}");
            }
        }
    }

    fn sinusoid_series(k: f64, noise: impl Fn(usize) -> f64) -> Vec<PhaseSeries> {
        let mut out = Vec::new();
        let mut idx = 0;
        for e in 0..9 {
            let (a, b, c) = (0.1 + 0.02 * e as f64, 0.2 - 0.03 * e as f64, 0.4 + 0.01 * e as f64);
            let points = (0..40)
                .map(|q| {
                    let p = q as f64 * 0.25;
                    idx += 1;
                    (p, (c + a * (k * p).sin() + b * (k * p).cos()) * (1.0 + noise(idx)))
                })
                .collect();
            out.push(PhaseSeries { element: (e / 3, e % 3), points });
        }
        out
    }

    #[test]
    fn phase_calibration_recovers_k_noiseless() {
        let fit = fit_phase_calibration(&sinusoid_series(0.626, |_| 0.0)).unwrap();
        assert!((fit.calibration.k - 0.626).abs() < 1e-6, "{}", fit.calibration.k);
        assert_eq!(fit.coefficients.len(), 9);
        assert!((fit.coefficients[0].a - 0.1).abs() < 1e-6);
    }

    #[test]
    fn phase_calibration_with_one_percent_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise: Vec<f64> = (0..400).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.01).collect();
        let fit = fit_phase_calibration(&sinusoid_series(0.626, |i| noise[i])).unwrap();
        assert!((fit.calibration.k / 0.626 - 1.0).abs() < 0.05);
        assert!(fit.calibration.k_uncertainty > 0.0);
    }

    #[test]
    fn constant_series_is_ill_conditioned() {
        let series: Vec<PhaseSeries> = (0..9)
            .map(|e| PhaseSeries { element: (e / 3, e % 3), points: (0..20).map(|q| (q as f64, 0.3)).collect() })
            .collect();
        assert!(matches!(fit_phase_calibration(&series), Err(Error::IllConditioned(_))));
        let short = vec![PhaseSeries { element: (0, 0), points: vec![(0.0, 1.0), (0.1, 0.5)] }];
        assert!(matches!(fit_phase_calibration(&short), Err(Error::IllConditioned(_))));
    }

    #[test]
    fn short_span_is_ill_conditioned() {
        // A tenth of a fringe period.
        let series: Vec<PhaseSeries> = (0..9)
            .map(|e| PhaseSeries {
                element: (e / 3, e % 3),
                points: (0..20).map(|q| (q as f64 * 0.01, (0.626 * q as f64 * 0.01 + e as f64).cos())).collect(),
            })
            .collect();
        assert!(matches!(fit_phase_calibration(&series), Err(Error::IllConditioned(_))));
    }

    fn tritter_model(pair_rate: f64) -> DeviceModel {
        let g = CouplingMatrix::from_g([2.0 * PI / 9.0; 3]).unwrap();
        let sps = vec![SetpointRecord::exact(0.0, 0.0, 0.0, g), SetpointRecord::exact(1.0, 1.0, 1.0, g)];
        DeviceModel::new(sps, PhaseCalibration::new(1.0, 0.0).unwrap(), DeviceModel::lossless_products(), pair_rate)
            .unwrap()
    }

    #[test]
    fn tritter_coincidence_predictions() {
        let m = tritter_model(900.0);
        let q = predict_coincidences(&m, (0, 1), (0, 1), 0.5, true).unwrap();
        assert!((q.rate - 100.0).abs() < 1e-9);
        assert_eq!((q.lo, q.hi), (q.rate, q.rate));
        let c = predict_coincidences(&m, (0, 1), (0, 1), 0.5, false).unwrap();
        assert!((c.rate - 200.0).abs() < 1e-9);
        assert_eq!(predict_coincidences(&tritter_model(0.0), (0, 1), (0, 1), 0.5, true).unwrap().rate, 0.0);
        assert!(matches!(predict_coincidences(&m, (0, 1), (0, 1), 1.5, true), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn prediction_contrast_matches_visibility() {
        let sps: Vec<SetpointRecord> = (0..5)
            .map(|q| {
                let t = q as f64 * 0.5;
                let g = CouplingMatrix::from_g([0.5 + 0.2 * t, 0.7 - 0.1 * t, 0.3 + 0.05 * t * t]).unwrap();
                SetpointRecord::exact(t, 0.0, t, g)
            })
            .collect();
        let m = DeviceModel::new(sps, PhaseCalibration::new(1.0, 0.0).unwrap(), DeviceModel::lossless_products(), 1e4)
            .unwrap();
        for theta in [0.0, 0.3, 1.1, 2.0] {
            for (input, out) in [((0, 1), (0, 1)), ((1, 2), (0, 2)), ((0, 2), (1, 2))] {
                let quantum = predict_coincidences(&m, input, out, theta, true).unwrap().rate;
                let classical = predict_coincidences(&m, input, out, theta, false).unwrap().rate;
                let u = m.unitary(theta, Band::Central).unwrap();
                let v = predicted_visibility(&u, input, out).unwrap();
                assert!(((classical - quantum) / classical - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn missing_loss_product_is_unrecoverable() {
        let mut m = tritter_model(10.0);
        m.loss_products.remove(&(0, 1));
        assert!(matches!(predict_coincidences(&m, (0, 1), (0, 1), 0.5, true), Err(Error::Unrecoverable { .. })));
    }
}
