use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use tritter_core::experiment::{default_kappa, generate_hom_scans, PortSelection, RunConfig, SyntheticDeviceSpec};
use tritter_core::homscan::{fit_scan, subtract_accidentals};
use tritter_core::interference::{classical_two_photon_prob, predicted_visibility};

const PAIRS: [[usize; 2]; 3] = [[1, 2], [1, 3], [2, 3]];
const TARGET_BASELINE: f64 = 2000.0;

/// A random device with one scan at a random phase and port selection,
/// integrated long enough for the target baseline count.
fn random_setup(seed: u64) -> (SyntheticDeviceSpec, RunConfig, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let law = std::array::from_fn(|_| {
            [rng.random_range(0.2..1.2), rng.random_range(0.05..0.5), rng.random_range(-0.02..0.02)]
        });
        let spec = SyntheticDeviceSpec {
            coupling_law: law,
            k_true: 0.626,
            heater_resistance: 100.0,
            eta_in: std::array::from_fn(|_| rng.random_range(0.3..0.9)),
            eta_out: std::array::from_fn(|_| rng.random_range(0.3..0.9)),
            source_rate: 1e6,
            pair_rate: 1e4,
            kappa: default_kappa(),
            coincidence_window_ns: 1.0,
            rng_seed: seed,
            dark_counts_per_s: 0.0,
        };
        let voltage: f64 = rng.random_range(0.0..22.0);
        let sel = PortSelection { input: PAIRS[rng.random_range(0..3)], output: PAIRS[rng.random_range(0..3)] };
        let ((i, j), (m, n)) = sel.zero_based().unwrap();
        let theta = spec.theta(voltage);
        let u = spec.unitary_at_theta(theta).unwrap();
        let p_cl = classical_two_photon_prob(&u, (i, j), (m, n)).unwrap();
        if p_cl < 1e-2 {
            continue;
        }
        let rate = spec.eta_in[i] * spec.eta_out[n] * spec.eta_in[j] * spec.eta_out[m] * spec.pair_rate * p_cl;
        let mut cfg = RunConfig::new(vec![0.0, voltage.max(0.1)]);
        cfg.scan_voltages = vec![voltage];
        cfg.scan_ports = vec![sel];
        cfg.scan_integration_s = TARGET_BASELINE / rate;
        let v = predicted_visibility(&u, (i, j), (m, n)).unwrap();
        return (spec, cfg, v);
    }
}

#[test]
fn noiseless_scans_match_predicted_visibility() {
    let worst = (0..200u64)
        .into_par_iter()
        .map(|seed| {
            let (spec, cfg, v) = random_setup(seed);
            let scan = &generate_hom_scans(&spec, &cfg, true).unwrap()[0];
            let (scan, _) = subtract_accidentals(scan);
            (fit_scan(&scan).unwrap().visibility - v).abs()
        })
        .reduce(|| 0.0, f64::max);
    println!("worst noiseless visibility error {worst:.2e}");
    assert!(worst < 1e-6);
}

#[test]
fn noisy_scans_agree_within_three_sigma() {
    let outcomes: Vec<Option<f64>> = (0..1000u64)
        .into_par_iter()
        .map(|seed| {
            let (spec, cfg, v) = random_setup(10_000 + seed);
            let scan = &generate_hom_scans(&spec, &cfg, false).unwrap()[0];
            let (scan, _) = subtract_accidentals(scan);
            fit_scan(&scan).ok().map(|r| (r.visibility - v).abs() / r.visibility_sigma)
        })
        .collect();
    let agree = outcomes.iter().filter(|z| matches!(z, Some(z) if *z <= 3.0)).count();
    let failed = outcomes.iter().filter(|z| z.is_none()).count();
    let frac = agree as f64 / outcomes.len() as f64;
    println!("{agree}/{} within 3 sigma ({failed} fit errors)", outcomes.len());
    assert!(frac >= 0.95);
}

#[test]
fn dip_turns_into_peak_and_the_fit_sees_it() {
    let spec = SyntheticDeviceSpec {
        coupling_law: [[0.1, 1.0 / 3.0, 0.0]; 3],
        k_true: 0.626,
        heater_resistance: 100.0,
        eta_in: [0.5, 0.4, 0.3],
        eta_out: [0.2, 0.25, 0.3],
        source_rate: 1e6,
        pair_rate: 1e6,
        kappa: default_kappa(),
        coincidence_window_ns: 1.0,
        rng_seed: 7,
        dark_counts_per_s: 0.0,
    };
    let voltages: Vec<f64> = (0..=30).map(|q| q as f64 * 0.7).collect();
    let mut found = None;
    'search: for input in PAIRS {
        for output in PAIRS {
            let sel = PortSelection { input, output };
            let ((i, j), (m, n)) = sel.zero_based().unwrap();
            let vis: Vec<f64> = voltages
                .iter()
                .map(|&v| {
                    predicted_visibility(&spec.unitary_at_theta(spec.theta(v)).unwrap(), (i, j), (m, n)).unwrap_or(0.0)
                })
                .collect();
            let dip = vis.iter().position(|&x| x > 0.2);
            let peak = vis.iter().position(|&x| x < -0.2);
            if let (Some(a), Some(b)) = (dip, peak) {
                found = Some((sel, voltages[a], voltages[b]));
                break 'search;
            }
        }
    }
    let (sel, v_dip, v_peak) = found.expect("some port pair changes sign");
    let mut cfg = RunConfig::new(voltages.clone());
    cfg.scan_voltages = if v_dip < v_peak { vec![v_dip, v_peak] } else { vec![v_peak, v_dip] };
    cfg.scan_ports = vec![sel];
    let fitted: Vec<(f64, f64)> = generate_hom_scans(&spec, &cfg, false)
        .unwrap()
        .iter()
        .map(|s| (s.header.voltage, fit_scan(&subtract_accidentals(s).0).unwrap().visibility))
        .collect();
    let at = |v: f64| fitted.iter().find(|f| f.0 == v).unwrap().1;
    assert!(at(v_dip) > 0.0 && at(v_peak) < 0.0, "{fitted:?}");
}
