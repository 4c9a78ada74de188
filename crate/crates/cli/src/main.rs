//! `tritter`: synthetic data generation, calibration, HOM scan fitting,
//! predictions and Fisher information for three-port interferometers.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tritter_core::calibration::{calibrate, predict_coincidence_rate, FitOptions};
use tritter_core::device::{Band, DeviceModel, IdealDevice, PhaseDevice};
use tritter_core::experiment::{generate_fringes, generate_hom_scans, RunConfig, SyntheticDeviceSpec};
use tritter_core::fisher::{fisher_with_bands, theta_grid};
use tritter_core::formats::{
    format_float, read_fringes, read_scan_dir, read_visibilities, scan_file_name, write_fisher, write_fit_report,
    write_fringes, write_hom_scan, write_json, write_table, write_visibilities,
};
use tritter_core::homscan::{fit_scan, subtract_accidentals, AccidentalStatus};
use tritter_core::interference::{predicted_visibility, FockState};
use tritter_core::{Error, Result};

#[derive(Parser)]
#[command(name = "tritter", version, about = "Characterise a phase-tunable three-port interferometer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic fringe and HOM scan files from a device spec.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write expected counts instead of Poisson samples.
        #[arg(long)]
        noise_free: bool,
        /// Overrides the spec's rng_seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit couplings, phase constant and loss products from a fringe file.
    Calibrate {
        #[arg(long)]
        fringes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Photon pairs per second delivered to the chip, stored in the model.
        #[arg(long, default_value_t = 0.0)]
        pair_rate: f64,
        /// Overrides the source rate given in the fringe file.
        #[arg(long)]
        source_rate: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fit visibilities to every scan in a directory.
    ScanFit {
        #[arg(long)]
        scans: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Calibrated model used to attach phases.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Quantum and classical coincidence fringes for a two-photon input.
    Predict {
        /// Model JSON, or `ideal` for the ideal symmetric device.
        #[arg(long)]
        model: String,
        #[arg(long)]
        input: FockState,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the model's pair rate (the ideal device uses 1).
        #[arg(long)]
        pair_rate: Option<f64>,
        #[arg(long, default_value_t = 721)]
        grid: usize,
    },
    /// Classical Fisher information of the output distribution versus phase.
    Fisher {
        /// Model JSON, or `ideal` for the ideal symmetric device.
        #[arg(long)]
        model: String,
        #[arg(long)]
        input: FockState,
        #[arg(long, default_value_t = 2000)]
        grid: usize,
        #[arg(long)]
        out: PathBuf,
        /// Summary JSON; defaults to the output path with a .json extension.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Measured against predicted visibilities.
    Report {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vis: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Device {
    Ideal(IdealDevice),
    Model(DeviceModel),
}

impl Device {
    fn load(arg: &str) -> Result<Self> {
        if arg.eq_ignore_ascii_case("ideal") {
            Ok(Device::Ideal(IdealDevice::default()))
        } else {
            DeviceModel::load(Path::new(arg)).map(Device::Model)
        }
    }

    fn phase_device(&self) -> &dyn PhaseDevice {
        match self {
            Device::Ideal(d) => d,
            Device::Model(m) => m,
        }
    }
}

fn pair_label((a, b): (usize, usize)) -> String {
    format!("{},{}", a + 1, b + 1)
}

/// `(max - min) / (max + min)` over a fringe.
fn fringe_visibility(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if max + min > 0.0 {
        (max - min) / (max + min)
    } else {
        0.0
    }
}

fn gen(spec: &Path, config: &Path, out: &Path, noise_free: bool, seed: Option<u64>) -> Result<()> {
    let mut spec = SyntheticDeviceSpec::load(spec)?;
    if let Some(s) = seed {
        spec.rng_seed = s;
    }
    let cfg = RunConfig::load(config)?;
    let fringes = generate_fringes(&spec, &cfg, noise_free)?;
    let fringe_path = out.join(&cfg.fringe_file);
    write_fringes(&fringe_path, &fringes)?;
    let scans = generate_hom_scans(&spec, &cfg, noise_free)?;
    let scan_dir = out.join(&cfg.scan_dir);
    for (q, s) in scans.iter().enumerate() {
        write_hom_scan(&scan_dir.join(scan_file_name(q, s)), s)?;
    }
    println!("wrote {} fringe records to {}", fringes.records.len(), fringe_path.display());
    if !scans.is_empty() {
        println!("wrote {} scans to {}", scans.len(), scan_dir.display());
    }
    Ok(())
}

fn run_calibrate(
    fringes: &Path,
    out: &Path,
    report: Option<&Path>,
    pair_rate: f64,
    source_rate: Option<f64>,
    seed: u64,
) -> Result<()> {
    let data = read_fringes(fringes, source_rate)?;
    let cal = calibrate(&data, &FitOptions { seed, input_pair_rate: pair_rate })?;
    cal.model.save(out)?;
    if let Some(r) = report {
        write_fit_report(r, &cal)?;
    }
    let pc = &cal.model.calibration;
    println!(
        "k = {} +/- {} W^-1 from {} setpoints",
        format_float(pc.k),
        format_float(pc.k_uncertainty),
        cal.report.len()
    );
    if !cal.skipped.is_empty() {
        println!("skipped {} setpoints with no usable ratios", cal.skipped.len());
    }
    for (i, j) in &cal.losses.unrecoverable {
        println!("loss product ({},{}) unrecoverable", i + 1, j + 1);
    }
    Ok(())
}

fn scan_fit(scans: &Path, out: &Path, model: Option<&Path>) -> Result<()> {
    let model = model.map(DeviceModel::load).transpose()?;
    let mut records = Vec::new();
    for (path, scan) in read_scan_dir(scans)? {
        let (scan, status) = subtract_accidentals(&scan);
        match status {
            AccidentalStatus::MissingSingles => eprintln!("{}: no singles, accidentals not subtracted", path.display()),
            AccidentalStatus::Floored(n) => eprintln!("{}: {n} points floored at zero", path.display()),
            AccidentalStatus::Subtracted => {}
        }
        let rec = fit_scan(&scan).map_err(|e| annotate(&path, e))?;
        records.push(match &model {
            Some(m) => rec.with_phase(&m.calibration)?,
            None => rec,
        });
    }
    write_visibilities(out, &records)?;
    println!("fitted {} scans", records.len());
    Ok(())
}

fn annotate(path: &Path, e: Error) -> Error {
    match e {
        Error::FitFailure { reason, best } => {
            Error::FitFailure { reason: format!("{}: {reason}", path.display()), best }
        }
        Error::IllConditioned(m) => Error::IllConditioned(format!("{}: {m}", path.display())),
        other => other,
    }
}

fn two_photon_input(input: &FockState) -> Result<(usize, usize)> {
    match input.photon_modes()[..] {
        [a, b] if a != b && input.modes() == 3 => Ok((a, b)),
        _ => Err(Error::UnsupportedInput(format!(
            "predict needs two photons in distinct modes of a three-mode state, got {input}"
        ))),
    }
}

fn predict(model: &str, input: &FockState, out: &Path, pair_rate: Option<f64>, grid: usize) -> Result<()> {
    let input = two_photon_input(input)?;
    let device = Device::load(model)?;
    let (losses, default_rate) = match &device {
        Device::Ideal(_) => (DeviceModel::lossless_products(), 1.0),
        Device::Model(m) => (m.loss_products.clone(), m.input_pair_rate),
    };
    let rate = pair_rate.unwrap_or(default_rate);
    let dev = device.phase_device();
    let (lo, hi) = dev.theta_range();
    let thetas = theta_grid(lo, hi, grid);
    let outputs = [(0, 1), (0, 2), (1, 2)];
    let mut rows = Vec::with_capacity(thetas.len() * outputs.len());
    let mut fringes: BTreeMap<(usize, usize), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for &theta in &thetas {
        for out_pair in outputs {
            let q = predict_coincidence_rate(dev, &losses, rate, input, out_pair, theta, true)?;
            let c = predict_coincidence_rate(dev, &losses, rate, input, out_pair, theta, false)?;
            let entry = fringes.entry(out_pair).or_default();
            entry.0.push(q.rate);
            entry.1.push(c.rate);
            rows.push(vec![
                format_float(theta),
                pair_label(out_pair),
                format_float(q.rate),
                format_float(q.lo),
                format_float(q.hi),
                format_float(c.rate),
                format_float(c.lo),
                format_float(c.hi),
            ]);
        }
    }
    write_table(
        out,
        &["theta", "output_pair", "quantum", "quantum_lo", "quantum_hi", "classical", "classical_lo", "classical_hi"],
        &rows,
    )?;
    println!("input {} over theta in [{}, {}]", pair_label(input), format_float(lo), format_float(hi));
    for (out_pair, (q, c)) in &fringes {
        println!(
            "outputs {}: quantum fringe visibility {:.4}, classical {:.4}",
            pair_label(*out_pair),
            fringe_visibility(q),
            fringe_visibility(c)
        );
    }
    Ok(())
}

fn fisher(model: &str, input: &FockState, grid: usize, out: &Path, summary: Option<&Path>) -> Result<()> {
    let device = Device::load(model)?;
    let dev = device.phase_device();
    let (lo, hi) = dev.theta_range();
    let curve = fisher_with_bands(dev, input, &theta_grid(lo, hi, grid))?;
    write_fisher(out, &curve)?;
    let s = curve.summary();
    let summary_path = summary.map_or_else(|| out.with_extension("json"), Path::to_path_buf);
    write_json(&summary_path, &s)?;
    println!("max F = {:.4} at theta = {:.4}", s.max_f, s.argmax_theta);
    for [a, b] in &s.intervals_above_2 {
        println!("F > 2 for theta in [{a:.4}, {b:.4}]");
    }
    Ok(())
}

fn report(model: &Path, vis: &Path, out: &Path) -> Result<()> {
    let m = DeviceModel::load(model)?;
    let mut rows = Vec::new();
    for rec in read_visibilities(vis)? {
        let rec = match rec.theta {
            Some(_) => rec,
            None => rec.with_phase(&m.calibration)?,
        };
        let theta = rec.theta.expect("phase attached");
        let at = |band| predicted_visibility(&m.unitary(theta, band)?, rec.input_pair, rec.output_pair);
        let central = at(Band::Central)?;
        let corners = Band::corners().map(at).collect::<Result<Vec<_>>>()?;
        let lo = corners.iter().copied().fold(central, f64::min);
        let hi = corners.iter().copied().fold(central, f64::max);
        let z = if rec.visibility_sigma > 0.0 { (rec.visibility - central) / rec.visibility_sigma } else { f64::NAN };
        rows.push(vec![
            pair_label(rec.input_pair),
            pair_label(rec.output_pair),
            format_float(rec.voltage),
            format_float(theta),
            format_float(rec.visibility),
            format_float(rec.visibility_sigma),
            format_float(central),
            format_float(lo),
            format_float(hi),
            format_float(z),
        ]);
    }
    write_table(
        out,
        &[
            "input_pair",
            "output_pair",
            "voltage",
            "theta",
            "measured",
            "measured_sigma",
            "predicted",
            "predicted_lo",
            "predicted_hi",
            "deviation_sigmas",
        ],
        &rows,
    )?;
    println!("compared {} visibilities", rows.len());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { spec, config, out, noise_free, seed } => gen(&spec, &config, &out, noise_free, seed),
        Command::Calibrate { fringes, out, report, pair_rate, source_rate, seed } => {
            run_calibrate(&fringes, &out, report.as_deref(), pair_rate, source_rate, seed)
        }
        Command::ScanFit { scans, out, model } => scan_fit(&scans, &out, model.as_deref()),
        Command::Predict { model, input, out, pair_rate, grid } => predict(&model, &input, &out, pair_rate, grid),
        Command::Fisher { model, input, grid, out, summary } => fisher(&model, &input, grid, &out, summary.as_deref()),
        Command::Report { model, vis, out } => report(&model, &vis, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_fit_failure() { 3 } else { 2 })
        }
    }
}
