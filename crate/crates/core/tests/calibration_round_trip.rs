use std::time::Instant;

use rayon::prelude::*;
use tritter_core::calibration::{calibrate, compute_ratios, fit_sweep, FitOptions};
use tritter_core::experiment::{default_kappa, generate_fringes, RunConfig, SyntheticDeviceSpec};

fn spec(law: [[f64; 3]; 3], source_rate: f64, seed: u64) -> SyntheticDeviceSpec {
    SyntheticDeviceSpec {
        coupling_law: law,
        k_true: 0.626,
        heater_resistance: 100.0,
        eta_in: [0.5, 0.4, 0.3],
        eta_out: [0.2, 0.25, 0.3],
        source_rate,
        pair_rate: 1e5,
        kappa: default_kappa(),
        coincidence_window_ns: 1.0,
        rng_seed: seed,
        dark_counts_per_s: 0.0,
    }
}

/// Near-equal arms: fringes are close enough to sinusoids in power for a
/// tight shared-k fit.
const NEAR_EQUAL: [[f64; 3]; 3] = [[0.01, 1.0 / 3.0, 2e-4], [0.02, 1.0 / 3.0, -2e-4], [0.03, 1.0 / 3.0, 0.0]];
/// Just over half a fringe period.
const THETA_MAX: f64 = 3.3;
/// Strongly curved, distinct arms.
const CURVED: [[f64; 3]; 3] = [[0.3, 0.25, 0.02], [0.5, 0.1, 0.03], [0.2, 0.3, -0.01]];

fn sweep(n: usize, theta_max: f64) -> RunConfig {
    let v_max = (theta_max * 100.0 / 0.626_f64).sqrt();
    RunConfig::new((0..n).map(|q| v_max * q as f64 / (n - 1) as f64).collect())
}

fn check_couplings(s: &SyntheticDeviceSpec, cal: &tritter_core::calibration::Calibration, tol: f64) {
    for sp in cal.model.setpoints() {
        let truth = s.coupling(s.theta(sp.voltage)).unwrap();
        for a in 0..3 {
            assert!(
                (sp.coupling.g[a] - truth.g[a]).abs() < tol,
                "V={} {:?} vs {:?}",
                sp.voltage,
                sp.coupling.g,
                truth.g
            );
        }
    }
}

fn check_losses(s: &SyntheticDeviceSpec, cal: &tritter_core::calibration::Calibration, tol: f64) {
    assert_eq!(cal.model.loss_products.len(), 9);
    for (&(i, j), &v) in &cal.model.loss_products {
        assert!((v - s.eta_in[i] * s.eta_out[j]).abs() < tol, "({i},{j}) {v}");
    }
}

#[test]
fn noiseless_near_equal_round_trip() {
    let s = spec(NEAR_EQUAL, 3e6, 1);
    let data = generate_fringes(&s, &sweep(50, THETA_MAX), true).unwrap();
    let start = Instant::now();
    let cal = calibrate(&data, &FitOptions::default()).unwrap();
    assert!(start.elapsed().as_secs_f64() < 60.0);
    let k = cal.model.calibration.k;
    assert!((k / 0.626 - 1.0).abs() < 1e-4, "k = {k}");
    check_couplings(&s, &cal, 1e-5);
    check_losses(&s, &cal, 1e-6);
}

#[test]
fn noiseless_equal_arm_k_is_exact() {
    let s = spec([[0.1, 1.0 / 3.0, 0.0]; 3], 3e6, 1);
    let cal = calibrate(&generate_fringes(&s, &sweep(50, THETA_MAX), true).unwrap(), &FitOptions::default()).unwrap();
    assert!((cal.model.calibration.k / 0.626 - 1.0).abs() < 1e-7);
    check_couplings(&s, &cal, 1e-5);
}

#[test]
fn noiseless_curved_device_couplings_and_losses() {
    // The sinusoidal k model does not hold for these laws, so only couplings
    // and loss products are checked; both are independent of k.
    let s = spec(CURVED, 3e6, 1);
    let data = generate_fringes(&s, &sweep(40, 6.0), true).unwrap();
    let (fits, skipped) = fit_sweep(&compute_ratios(&data).unwrap(), &FitOptions::default()).unwrap();
    assert!(skipped.is_empty());
    for f in &fits {
        let truth = s.coupling(s.theta(f.voltage)).unwrap();
        for a in 0..3 {
            assert!((f.coupling.g[a] - truth.g[a]).abs() < 1e-5, "V={} {:?} vs {:?}", f.voltage, f.coupling.g, truth.g);
        }
    }
    if let Ok(cal) = calibrate(&data, &FitOptions::default()) {
        check_losses(&s, &cal, 1e-6);
    }
}

#[test]
fn lossless_products_are_unity() {
    let s = SyntheticDeviceSpec { eta_in: [1.0; 3], eta_out: [1.0; 3], ..spec(NEAR_EQUAL, 1e6, 1) };
    let cal = calibrate(&generate_fringes(&s, &sweep(30, THETA_MAX), true).unwrap(), &FitOptions::default()).unwrap();
    for &v in cal.model.loss_products.values() {
        assert!((v - 1.0).abs() < 1e-10, "{v}");
    }
}

struct NoisyOutcome {
    k_rel_err: f64,
    covered: usize,
    total: usize,
    max_jump_ratio: f64,
}

fn noisy_trial(seed: u64) -> NoisyOutcome {
    let s = spec(NEAR_EQUAL, 3e6, seed);
    let cal = calibrate(
        &generate_fringes(&s, &sweep(50, THETA_MAX), false).unwrap(),
        &FitOptions { seed, ..Default::default() },
    )
    .unwrap();
    let mut covered = 0;
    let mut total = 0;
    for sp in cal.model.setpoints() {
        let truth = s.coupling(s.theta(sp.voltage)).unwrap();
        for a in 0..3 {
            total += 1;
            if sp.coupling_lo.g[a] <= truth.g[a] && truth.g[a] <= sp.coupling_hi.g[a] {
                covered += 1;
            }
        }
    }
    let sps = cal.model.setpoints();
    let s = &s;
    let max_jump_ratio = sps
        .windows(2)
        .flat_map(|w| {
            (0..3).map(move |a| {
                let width =
                    (w[1].coupling_hi.g[a] - w[1].coupling_lo.g[a]).max(w[0].coupling_hi.g[a] - w[0].coupling_lo.g[a]);
                let expected = (s.coupling(w[1].theta).unwrap().g[a] - s.coupling(w[0].theta).unwrap().g[a]).abs();
                ((w[1].coupling.g[a] - w[0].coupling.g[a]).abs() - expected).max(0.0) / width
            })
        })
        .fold(0.0, f64::max);
    NoisyOutcome { k_rel_err: (cal.model.calibration.k / 0.626 - 1.0).abs(), covered, total, max_jump_ratio }
}

#[test]
fn noisy_calibration_over_seeds() {
    let outcomes: Vec<NoisyOutcome> = (0..100u64).into_par_iter().map(noisy_trial).collect();
    let worst_k = outcomes.iter().map(|o| o.k_rel_err).fold(0.0, f64::max);
    let covered: usize = outcomes.iter().map(|o| o.covered).sum();
    let total: usize = outcomes.iter().map(|o| o.total).sum();
    let coverage = covered as f64 / total as f64;
    let worst_jump = outcomes.iter().map(|o| o.max_jump_ratio).fold(0.0, f64::max);
    println!("worst k error {worst_k:.2e}, band coverage {coverage:.4}, worst excess jump {worst_jump:.2} band widths");
    assert!(worst_k < 0.05);
    assert!(coverage >= 0.90);
    assert!(worst_jump < 5.0);
}
