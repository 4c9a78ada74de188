//! CSV and JSON file formats for datasets, fit reports and derived curves.
//!
//! Ports are 1-based in every file. Floats are written in shortest
//! round-trip form, so write followed by read is lossless.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use crate::calibration::{Calibration, FringeDataset, FringeRecord};
use crate::device::MODES;
use crate::error::{Error, Result};
use crate::fisher::FisherCurve;
use crate::homscan::{HomScanDataset, HomScanHeader, HomScanRow, VisibilityRecord};

pub const FRINGE_COLUMNS: [&str; 7] =
    ["voltage_V", "current_A", "input_port", "counts_out1", "counts_out2", "counts_out3", "integration_s"];
pub const SCAN_COLUMNS: [&str; 4] = ["delay_ps", "coincidences", "singles_m", "singles_n"];
pub const VISIBILITY_COLUMNS: [&str; 11] = [
    "input_pair",
    "output_pair",
    "voltage_V",
    "current_A",
    "theta",
    "visibility",
    "visibility_sigma",
    "baseline",
    "extremum",
    "dip_center",
    "dip_width",
];

/// Preamble `#key=value` lines followed by CSV text.
struct Document {
    preamble: BTreeMap<String, (usize, String)>,
    body: String,
    /// File line number of the CSV header.
    header_line: usize,
}

fn split_preamble(path: &Path, text: &str) -> Result<Document> {
    let mut preamble = BTreeMap::new();
    let mut consumed = 0;
    for (idx, line) in text.lines().enumerate() {
        let Some(rest) = line.strip_prefix('#') else { break };
        consumed = idx + 1;
        let (key, value) = rest
            .split_once('=')
            .ok_or_else(|| Error::schema(path, idx + 1, format!("malformed preamble line `{line}`")))?;
        if preamble.insert(key.trim().to_string(), (idx + 1, value.trim().to_string())).is_some() {
            return Err(Error::schema(path, idx + 1, format!("repeated preamble key `{}`", key.trim())));
        }
    }
    let body: String = text.lines().skip(consumed).collect::<Vec<_>>().join("\n");
    Ok(Document { preamble, body, header_line: consumed + 1 })
}

fn check_header(path: &Path, line: usize, got: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    for name in got.iter() {
        if !expected.contains(&name) {
            return Err(Error::schema(path, line, format!("unknown column `{name}`")));
        }
    }
    for (pos, want) in expected.iter().enumerate() {
        match got.get(pos) {
            Some(name) if name == *want => {}
            Some(name) => {
                return Err(Error::schema(path, line, format!("column {} is `{name}`, expected `{want}`", pos + 1)))
            }
            None => return Err(Error::schema(path, line, format!("missing column `{want}`"))),
        }
    }
    Ok(())
}

fn reader(body: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new().has_headers(true).flexible(true).trim(csv::Trim::All).from_reader(body.as_bytes())
}

struct Row<'a> {
    path: &'a Path,
    line: usize,
    rec: csv::StringRecord,
    columns: &'a [&'a str],
}

impl Row<'_> {
    fn raw(&self, col: usize) -> &str {
        self.rec.get(col).unwrap_or("")
    }

    fn float(&self, col: usize) -> Result<f64> {
        let s = self.raw(col);
        s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
            Error::schema(self.path, self.line, format!("`{}`: cannot parse `{s}` as a number", self.columns[col]))
        })
    }

    fn count(&self, col: usize) -> Result<f64> {
        let v = self.float(col)?;
        if v < 0.0 {
            return Err(Error::schema(self.path, self.line, format!("`{}` is negative ({v})", self.columns[col])));
        }
        Ok(v)
    }

    fn optional_count(&self, col: usize) -> Result<Option<f64>> {
        if self.raw(col).is_empty() {
            Ok(None)
        } else {
            self.count(col).map(Some)
        }
    }
}

fn rows<'a>(path: &'a Path, doc: &Document, columns: &'a [&'a str]) -> Result<Vec<Row<'a>>> {
    let mut rdr = reader(&doc.body);
    let header = rdr.headers()?.clone();
    check_header(path, doc.header_line, &header, columns)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = doc.header_line - 1 + rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != columns.len() {
            return Err(Error::schema(path, line, format!("expected {} fields, found {}", columns.len(), rec.len())));
        }
        out.push(Row { path, line, rec, columns });
    }
    Ok(out)
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn writer_with_preamble(path: &Path, preamble: &[(String, String)]) -> Result<csv::Writer<fs::File>> {
    use std::io::Write;
    ensure_parent(path)?;
    let mut file = fs::File::create(path)?;
    for (k, v) in preamble {
        writeln!(file, "#{k}={v}")?;
    }
    Ok(csv::Writer::from_writer(file))
}

pub fn write_fringes(path: &Path, d: &FringeDataset) -> Result<()> {
    let mut w = writer_with_preamble(path, &[("source_rate_hz".into(), fmt(d.source_rate))])?;
    w.write_record(FRINGE_COLUMNS)?;
    for r in &d.records {
        w.write_record([
            fmt(r.voltage),
            fmt(r.current),
            (r.input_port + 1).to_string(),
            fmt(r.counts[0]),
            fmt(r.counts[1]),
            fmt(r.counts[2]),
            fmt(r.integration_time),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a fringe CSV. `source_rate` overrides (or replaces a missing)
/// `#source_rate_hz` preamble entry.
pub fn read_fringes(path: &Path, source_rate: Option<f64>) -> Result<FringeDataset> {
    let text = fs::read_to_string(path)?;
    let doc = split_preamble(path, &text)?;
    for (key, (line, _)) in &doc.preamble {
        if key != "source_rate_hz" {
            return Err(Error::schema(path, *line, format!("unknown preamble key `{key}`")));
        }
    }
    let rate = match (source_rate, doc.preamble.get("source_rate_hz")) {
        (Some(r), _) => r,
        (None, Some((line, v))) => {
            v.parse().map_err(|_| Error::schema(path, *line, format!("cannot parse source rate `{v}`")))?
        }
        (None, None) => {
            return Err(Error::Config(format!(
                "{}: no #source_rate_hz preamble; pass the source rate explicitly",
                path.display()
            )))
        }
    };
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for row in rows(path, &doc, &FRINGE_COLUMNS)? {
        let port = row.float(2)?;
        if port.fract() != 0.0 || !(1.0..=MODES as f64).contains(&port) {
            return Err(Error::schema(path, row.line, format!("input_port must be 1..={MODES}, got {port}")));
        }
        let voltage = row.float(0)?;
        if !seen.insert((voltage.to_bits(), port as usize)) {
            return Err(Error::schema(
                path,
                row.line,
                format!("duplicated setpoint: voltage {voltage} V, input port {port}"),
            ));
        }
        let integration_time = row.float(6)?;
        if !(integration_time > 0.0) {
            return Err(Error::schema(path, row.line, "integration_s must be > 0"));
        }
        records.push(FringeRecord {
            voltage,
            current: row.float(1)?,
            input_port: port as usize - 1,
            counts: [row.count(3)?, row.count(4)?, row.count(5)?],
            integration_time,
        });
    }
    FringeDataset::new(records, rate)
}

fn pair_label((a, b): (usize, usize)) -> String {
    format!("{},{}", a + 1, b + 1)
}

fn parse_pair(path: &Path, line: usize, s: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let ports: Option<Vec<usize>> = parts.iter().map(|p| p.parse::<usize>().ok()).collect();
    match ports.as_deref() {
        Some(&[a, b]) if (1..=MODES).contains(&a) && (1..=MODES).contains(&b) && a != b => Ok((a - 1, b - 1)),
        _ => Err(Error::schema(path, line, format!("expected two distinct ports in 1..={MODES}, got `{s}`"))),
    }
}

pub fn write_hom_scan(path: &Path, s: &HomScanDataset) -> Result<()> {
    let h = &s.header;
    let preamble = [
        ("input_pair".to_string(), pair_label(h.input_pair)),
        ("output_pair".to_string(), pair_label(h.output_pair)),
        ("voltage_V".to_string(), fmt(h.voltage)),
        ("current_A".to_string(), fmt(h.current)),
        ("window_ns".to_string(), fmt(h.window_ns)),
        ("integration_s".to_string(), fmt(h.integration_time)),
    ];
    let mut w = writer_with_preamble(path, &preamble)?;
    w.write_record(SCAN_COLUMNS)?;
    let opt = |v: Option<f64>| v.map(fmt).unwrap_or_default();
    for r in &s.rows {
        w.write_record([fmt(r.delay_ps), fmt(r.coincidences), opt(r.singles_m), opt(r.singles_n)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_hom_scan(path: &Path) -> Result<HomScanDataset> {
    const KEYS: [&str; 6] = ["input_pair", "output_pair", "voltage_V", "current_A", "window_ns", "integration_s"];
    let text = fs::read_to_string(path)?;
    let doc = split_preamble(path, &text)?;
    for (key, (line, _)) in &doc.preamble {
        if !KEYS.contains(&key.as_str()) {
            return Err(Error::schema(path, *line, format!("unknown preamble key `{key}`")));
        }
    }
    let get = |key: &str| {
        doc.preamble
            .get(key)
            .ok_or_else(|| Error::schema(path, doc.header_line, format!("missing preamble key `{key}`")))
    };
    let number = |key: &str| -> Result<f64> {
        let (line, v) = get(key)?;
        v.parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| Error::schema(path, *line, format!("`{key}`: cannot parse `{v}` as a number")))
    };
    let (in_line, in_text) = get("input_pair")?;
    let (out_line, out_text) = get("output_pair")?;
    let header = HomScanHeader {
        input_pair: parse_pair(path, *in_line, in_text)?,
        output_pair: parse_pair(path, *out_line, out_text)?,
        voltage: number("voltage_V")?,
        current: number("current_A")?,
        integration_time: number("integration_s")?,
        window_ns: number("window_ns")?,
    };
    let mut out = Vec::new();
    let mut last: Option<f64> = None;
    for row in rows(path, &doc, &SCAN_COLUMNS)? {
        let delay_ps = row.float(0)?;
        if last.is_some_and(|prev| !(delay_ps > prev)) {
            return Err(Error::schema(path, row.line, format!("delays not strictly increasing at {delay_ps} ps")));
        }
        last = Some(delay_ps);
        out.push(HomScanRow {
            delay_ps,
            coincidences: row.count(1)?,
            singles_m: row.optional_count(2)?,
            singles_n: row.optional_count(3)?,
        });
    }
    HomScanDataset::new(header, out)
}

/// All `*.csv` scans in a directory, sorted by file name.
pub fn read_scan_dir(dir: &Path) -> Result<Vec<(PathBuf, HomScanDataset)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    paths.into_iter().map(|p| read_hom_scan(&p).map(|s| (p, s))).collect()
}

/// Deterministic file name for a scan, e.g. `scan_003_in12_out23.csv`.
pub fn scan_file_name(index: usize, s: &HomScanDataset) -> String {
    let (i, j) = s.header.input_pair;
    let (m, n) = s.header.output_pair;
    format!("scan_{index:03}_in{}{}_out{}{}.csv", i + 1, j + 1, m + 1, n + 1)
}

pub fn write_visibilities(path: &Path, records: &[VisibilityRecord]) -> Result<()> {
    let mut w = writer_with_preamble(path, &[])?;
    w.write_record(VISIBILITY_COLUMNS)?;
    for r in records {
        w.write_record([
            pair_label(r.input_pair),
            pair_label(r.output_pair),
            fmt(r.voltage),
            fmt(r.current),
            r.theta.map(fmt).unwrap_or_default(),
            fmt(r.visibility),
            fmt(r.visibility_sigma),
            fmt(r.baseline),
            fmt(r.extremum),
            fmt(r.dip_center),
            fmt(r.dip_width),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_visibilities(path: &Path) -> Result<Vec<VisibilityRecord>> {
    let text = fs::read_to_string(path)?;
    let doc = split_preamble(path, &text)?;
    rows(path, &doc, &VISIBILITY_COLUMNS)?
        .into_iter()
        .map(|row| {
            Ok(VisibilityRecord {
                input_pair: parse_pair(path, row.line, row.raw(0))?,
                output_pair: parse_pair(path, row.line, row.raw(1))?,
                voltage: row.float(2)?,
                current: row.float(3)?,
                theta: if row.raw(4).is_empty() { None } else { Some(row.float(4)?) },
                visibility: row.float(5)?,
                visibility_sigma: row.float(6)?,
                baseline: row.float(7)?,
                extremum: row.float(8)?,
                dip_center: row.float(9)?,
                dip_width: row.float(10)?,
            })
        })
        .collect()
}

/// Per-setpoint fit report with the phase-calibration result in the preamble.
pub fn write_fit_report(path: &Path, c: &Calibration) -> Result<()> {
    let preamble = [
        ("k".to_string(), fmt(c.phase_fit.calibration.k)),
        ("k_uncertainty".to_string(), fmt(c.phase_fit.calibration.k_uncertainty)),
        ("k_fit".to_string(), format!("joint fit over {} element series", c.phase_fit.series_used)),
        ("skipped_voltages".to_string(), c.skipped.iter().map(|v| fmt(*v)).collect::<Vec<_>>().join(";")),
        (
            "unrecoverable_loss_products".to_string(),
            c.losses.unrecoverable.iter().map(|&(i, j)| format!("{}{}", i + 1, j + 1)).collect::<Vec<_>>().join(";"),
        ),
    ];
    let mut w = writer_with_preamble(path, &preamble)?;
    w.write_record([
        "voltage",
        "theta",
        "g1",
        "g2",
        "g3",
        "g1_lo",
        "g2_lo",
        "g3_lo",
        "g1_hi",
        "g2_hi",
        "g3_hi",
        "likelihood_at_min",
        "n_evals",
        "status",
    ])?;
    for row in &c.report {
        let f = &row.fit;
        let mut rec = vec![fmt(row.voltage), fmt(row.theta)];
        rec.extend(f.coupling.g.iter().map(|v| fmt(*v)));
        rec.extend(f.coupling_lo.g.iter().map(|v| fmt(*v)));
        rec.extend(f.coupling_hi.g.iter().map(|v| fmt(*v)));
        rec.extend([fmt(f.likelihood), f.evals.to_string(), f.status.as_str().to_string()]);
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_fisher(path: &Path, c: &FisherCurve) -> Result<()> {
    let mut w = writer_with_preamble(path, &[])?;
    w.write_record(["theta", "F", "F_lo", "F_hi"])?;
    for t in 0..c.thetas.len() {
        w.write_record([fmt(c.thetas[t]), fmt(c.values[t]), fmt(c.lower[t]), fmt(c.upper[t])])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes any serialisable value as pretty JSON.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Writes plain rows under a header.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = writer_with_preamble(path, &[])?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn format_float(v: f64) -> String {
    fmt(v)
}
