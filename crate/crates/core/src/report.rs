//! Report assembly and emission (JSON, text table, per-curve CSV).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::pipeline::{AtmosphereReport, CurveReport, PolarizationReport, PovmSummary, ScanSummary};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub command: String,
    pub config_hash: String,
    /// Seeds that drove the run, by role.
    pub seeds: BTreeMap<String, u64>,
    #[serde(default)]
    pub calibration: Vec<CurveReport>,
    #[serde(default)]
    pub polarization: Vec<PolarizationReport>,
    #[serde(default)]
    pub atmosphere: Option<AtmosphereReport>,
    #[serde(default)]
    pub povm: Option<PovmSummary>,
    #[serde(default)]
    pub scan: Option<ScanSummary>,
    /// Output files written alongside the report, relative to its directory.
    #[serde(default)]
    pub artifacts: Vec<String>,
}

impl Report {
    pub fn new(command: impl Into<String>, config_hash: impl Into<String>) -> Self {
        Self {
            command: command.into(),
            config_hash: config_hash.into(),
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, role: &str, seed: u64) -> Self {
        self.seeds.insert(role.to_string(), seed);
        self
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Human-readable summary; the calibration table has one row per curve.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command      {}", self.command);
        let _ = writeln!(s, "config hash  {}", self.config_hash);
        for (role, seed) in &self.seeds {
            let _ = writeln!(s, "seed         {role} = {seed}");
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<16} {:>14} {:>14} {:>9} {:>9}",
            "response", "eta~ [1/nW]", "sigma [1/nW]", "eta [%]", "sigma [%]"
        );
        for r in &self.calibration {
            let _ = writeln!(
                s,
                "{:<16} {:>14.4e} {:>14.2e} {:>9.2} {:>9.2}",
                format!("Gamma_{}", r.label),
                r.eta_tilde.value,
                r.eta_tilde.sigma,
                100.0 * r.eta.value,
                100.0 * r.eta.sigma
            );
        }
        let notes: Vec<_> = self
            .calibration
            .iter()
            .flat_map(|r| r.notes.iter().map(move |n| (r.label.as_str(), n)))
            .collect();
        if !notes.is_empty() {
            let _ = writeln!(s);
            for (label, n) in notes {
                let _ = writeln!(s, "note  {label}: {n}");
            }
        }
        for p in &self.polarization {
            let f = &p.fit;
            let phi_sigma = f
                .phi0_sigma_deg
                .map_or_else(|| "undetermined".to_string(), |v| format!("{v:.3}"));
            let _ = writeln!(s);
            let _ = writeln!(s, "polarization fit, mode {} ({} angles)", p.mode, p.points.len());
            let _ = writeln!(s, "  eta_max  {:.4} +- {:.4} %", f.eta_max.value, f.eta_max.sigma);
            let _ = writeln!(s, "  eta_min  {:.4} +- {:.4} %", f.eta_min.value, f.eta_min.sigma);
            let _ = writeln!(s, "  phi0     {:.4} +- {phi_sigma} deg", f.phi0_deg);
            if f.degenerate {
                let _ = writeln!(s, "  degenerate: no modulation");
            }
        }
        if let Some(a) = &self.atmosphere {
            let m = &a.moments;
            let _ = writeln!(s);
            let _ = writeln!(
                s,
                "transmittance moments (degree {} fit, {} points)",
                m.degree,
                a.points.len()
            );
            let _ = writeln!(
                s,
                "  <eta>    {:.6} +- {:.2e}   model {:.6}",
                m.mean.value, m.mean.sigma, a.model_mean
            );
            let _ = writeln!(
                s,
                "  <eta^2>  {:.6} +- {:.2e}   model {:.6}",
                m.second.value, m.second.sigma, a.model_second
            );
            let _ = writeln!(s, "  var      {:.6} +- {:.2e}", m.variance.value, m.variance.sigma);
            let _ = writeln!(s, "  a0       {:.9} +- {:.2e}", m.intercept.value, m.intercept.sigma);
            if m.intercept_flag {
                let _ = writeln!(s, "  flag: intercept deviates from 1 beyond 5 sigma");
            }
            if m.variance_flag {
                let _ = writeln!(s, "  flag: variance negative beyond 3 sigma");
            }
        }
        if let Some(p) = &self.povm {
            let _ = writeln!(s);
            let _ = writeln!(
                s,
                "povm N={} eta={} dark={} n_max={}  completeness defect {:.3e}",
                p.bins, p.eta, p.dark, p.n_max, p.completeness_defect
            );
        }
        if let Some(q) = &self.scan {
            let _ = writeln!(s);
            let _ = writeln!(s, "quasiprobability scan, s = {}, {} points", q.s, q.points);
            let _ = writeln!(s, "  min {:.6e} at ({}, {})", q.min_value, q.min_at.re, q.min_at.im);
            let _ = writeln!(s, "  max {:.6e} at ({}, {})", q.max_value, q.max_at.re, q.max_at.im);
        }
        for a in &self.artifacts {
            let _ = writeln!(s, "wrote {a}");
        }
        s
    }
}

/// Plot-ready CSV of a curve with the adopted line evaluated at each point.
pub fn write_curve_csv<W: Write>(r: &CurveReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "power_nw",
        "power_err_nw",
        "x",
        "gamma",
        "gamma_err",
        "order",
        "flagged",
        "fit",
    ])?;
    let nu = r.nu_tilde.map_or(0.0, |e| e.value);
    let n = r.curve.bins as f64;
    for p in &r.curve.points {
        let x = p.power / n;
        w.write_record([
            p.power.to_string(),
            p.power_err.to_string(),
            x.to_string(),
            p.gamma.to_string(),
            p.gamma_err.to_string(),
            p.order.to_string(),
            p.flagged.to_string(),
            (nu + r.eta_tilde.value * x).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// File name for a curve's CSV, e.g. `curve_A_H.csv`.
pub fn curve_file_name(r: &CurveReport) -> String {
    let safe: String = r
        .label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("curve_{safe}.csv")
}

/// Writes `report.json`, `report.txt` and one CSV per curve into `dir`.
pub fn emit_report(report: &Report, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for r in &report.calibration {
        let path = dir.join(curve_file_name(r));
        write_curve_csv(r, std::io::BufWriter::new(std::fs::File::create(&path)?))?;
        written.push(path);
    }
    let json = dir.join("report.json");
    std::fs::write(&json, report.to_json()?)?;
    let text = dir.join("report.txt");
    std::fs::write(&text, report.to_text())?;
    written.push(json);
    written.push(text);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::CalibrationConfig;
    use crate::pipeline::calibrate_curve;
    use crate::synthetic::{attenuator_powers, exact_response_curve, LinearDetector};

    fn table1_like() -> Report {
        let cal = CalibrationConfig::default();
        let mut report = Report::new("calibrate", "abc").with_seed("simulate", 1);
        for (mode, angle, eta_tilde) in [
            ("A", 0.0, 52.86e-3),
            ("B", 0.0, 46.83e-3),
            ("A", 45.0, 33.23e-3),
            ("B", 45.0, 28.63e-3),
        ] {
            let det = LinearDetector {
                bins: 8,
                eta_tilde,
                dark: 0.0,
            };
            let mut curve = exact_response_curve(&det, &attenuator_powers(30.0, 0.5, 10), 1, 0.05).unwrap();
            curve.mode = mode.into();
            curve.angle_deg = angle;
            report.calibration.push(calibrate_curve(&curve, &cal).unwrap());
        }
        report
    }

    #[test]
    fn text_table_has_one_row_per_curve() {
        let text = table1_like().to_text();
        let rows: Vec<&str> = text.lines().filter(|l| l.starts_with("Gamma_")).collect();
        assert_eq!(rows.len(), 4);
        assert!(rows[0].starts_with("Gamma_A^H"));
        assert!(rows[0].contains("29.86"), "{}", rows[0]);
        assert!(rows[3].starts_with("Gamma_B^V"));
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let r = table1_like();
        let back = Report::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn empty_report_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let r = Report::new("calibrate", "0");
        let files = emit_report(&r, dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        let back = Report::from_json(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(back, r);
        let text = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("Gamma_")).count(), 0);
    }

    #[test]
    fn curve_csv_contains_fit() {
        let r = &table1_like().calibration[0];
        let mut buf = Vec::new();
        write_curve_csv(r, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 11);
        assert_eq!(curve_file_name(r), "curve_A_H.csv");
    }
}
