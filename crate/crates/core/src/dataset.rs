//! Click-count datasets on disk.
//!
//! CSV schema, one record per row:
//!
//! | column         | meaning                                                   |
//! |----------------|-----------------------------------------------------------|
//! | `mode`         | mode label; joint records use `A+B`                       |
//! | `angle_deg`    | half-wave-plate angle in degrees                          |
//! | `power_nw`     | reference power in nW                                     |
//! | `power_err_nw` | power uncertainty in nW; blank means relative default     |
//! | `bins_a`       | bins of the (first) mode                                  |
//! | `bins_b`       | bins of the second mode, `0` for single-mode records      |
//! | `events`       | total event count `C`                                     |
//! | `counts`       | space-separated counts, row-major in `(k_a, k_b)`         |
//!
//! JSON holds the same records as `{"records": [...]}`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::click_model::{ClickHistogram, JointClickHistogram};
use crate::error::{invalid, Error, Result};

pub const CSV_HEADER: [&str; 8] = [
    "mode",
    "angle_deg",
    "power_nw",
    "power_err_nw",
    "bins_a",
    "bins_b",
    "events",
    "counts",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Csv,
    Json,
}

impl DataFormat {
    pub fn extension(self) -> &'static str {
        match self {
            DataFormat::Csv => "csv",
            DataFormat::Json => "json",
        }
    }

    /// Guesses the format from a file extension, defaulting to CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => DataFormat::Json,
            _ => DataFormat::Csv,
        }
    }
}

impl FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(DataFormat::Csv),
            "json" => Ok(DataFormat::Json),
            other => Err(invalid(format!("unknown format {other:?}"))),
        }
    }
}

impl fmt::Display for DataFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.extension())
    }
}

/// One acquisition: a click histogram at one power and polarization setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub mode: String,
    pub angle_deg: f64,
    pub power_nw: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_err_nw: Option<f64>,
    pub bins_a: usize,
    #[serde(default)]
    pub bins_b: usize,
    pub events: u64,
    pub counts: Vec<u64>,
}

impl Record {
    pub fn is_joint(&self) -> bool {
        self.bins_b > 0
    }

    /// Mode labels carried by the record, in (A, B) order.
    pub fn mode_labels(&self) -> Vec<&str> {
        if self.is_joint() {
            self.mode.splitn(2, '+').map(str::trim).collect()
        } else {
            vec![self.mode.trim()]
        }
    }

    /// `(label, bins)` for every mode of the record.
    pub fn modes(&self) -> Vec<(&str, usize)> {
        self.mode_labels().into_iter().zip([self.bins_a, self.bins_b]).collect()
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.mode.trim().is_empty() {
            return Err("empty mode label".into());
        }
        let labels = self.mode_labels();
        if self.is_joint() && (labels.len() != 2 || labels.iter().any(|l| l.is_empty())) {
            return Err(format!("joint record needs a mode like \"A+B\", got {:?}", self.mode));
        }
        if !self.is_joint() && self.mode.contains('+') {
            return Err(format!("single-mode record has joint label {:?}", self.mode));
        }
        if !self.angle_deg.is_finite() {
            return Err("angle is not finite".into());
        }
        if !(self.power_nw >= 0.0) || !self.power_nw.is_finite() {
            return Err(format!("power {} must be finite and >= 0", self.power_nw));
        }
        if let Some(e) = self.power_err_nw {
            if !(e >= 0.0) || !e.is_finite() {
                return Err(format!("power error {e} must be finite and >= 0"));
            }
        }
        if self.bins_a == 0 {
            return Err("bins_a must be at least 1".into());
        }
        let expect = (self.bins_a + 1) * (self.bins_b + 1);
        if self.counts.len() != expect {
            return Err(format!(
                "{} counts do not match bins ({}, {}), expected {expect}",
                self.counts.len(),
                self.bins_a,
                self.bins_b
            ));
        }
        let sum: u64 = self.counts.iter().sum();
        if sum != self.events {
            return Err(format!("counts sum to {sum}, events column says {}", self.events));
        }
        Ok(())
    }

    /// Joint histogram; single-mode records get a trivial second mode.
    pub fn joint_histogram(&self) -> Result<JointClickHistogram> {
        JointClickHistogram::new(self.bins_a, self.bins_b, self.counts.clone())
    }

    /// Marginal histogram of the mode at `index` (0 = A, 1 = B).
    pub fn histogram(&self, index: usize) -> Result<ClickHistogram> {
        if !self.is_joint() {
            return match index {
                0 => ClickHistogram::new(self.counts.clone()),
                _ => Err(invalid("single-mode record has no second mode")),
            };
        }
        let joint = self.joint_histogram()?;
        Ok(match index {
            0 => joint.marginal_a(),
            _ => joint.marginal_b(),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub records: Vec<Record>,
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    mode: String,
    angle_deg: f64,
    power_nw: f64,
    power_err_nw: Option<f64>,
    bins_a: usize,
    bins_b: usize,
    events: u64,
    counts: String,
}

fn schema(line: usize, message: impl Into<String>) -> Error {
    Error::Schema {
        line,
        message: message.into(),
    }
}

impl Dataset {
    pub fn new(records: Vec<Record>) -> Result<Self> {
        let d = Self { records };
        d.validate()?;
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Checks every record and that each mode label keeps one bin count.
    /// Errors name the 1-based record position.
    pub fn validate(&self) -> Result<()> {
        let mut bins: BTreeMap<&str, usize> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            let line = i + 1;
            r.validate().map_err(|m| schema(line, m))?;
            for (label, n) in r.modes() {
                match bins.insert(label, n) {
                    Some(prev) if prev != n => {
                        return Err(schema(
                            line,
                            format!("mode {label} has {n} bins here but {prev} earlier"),
                        ));
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    pub fn from_csv_reader<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let headers = rdr.headers().map_err(|e| schema(1, e.to_string()))?.clone();
        if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
            return Err(schema(1, "empty file"));
        }
        for col in CSV_HEADER {
            if !headers.iter().any(|h| h == col) {
                return Err(schema(1, format!("missing column {col:?}")));
            }
        }
        let mut records = Vec::new();
        let mut lines = Vec::new();
        for row in rdr.records() {
            let row = row.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line() as usize);
                schema(line, e.to_string())
            })?;
            let line = row.position().map_or(0, |p| p.line() as usize);
            let raw: CsvRow = row
                .deserialize(Some(&headers))
                .map_err(|e| schema(line, e.to_string()))?;
            let counts = raw
                .counts
                .split_whitespace()
                .map(|t| {
                    let v: i64 = t
                        .parse()
                        .map_err(|_| schema(line, format!("count {t:?} is not an integer")))?;
                    u64::try_from(v).map_err(|_| schema(line, format!("negative count {v}")))
                })
                .collect::<Result<Vec<u64>>>()?;
            records.push(Record {
                mode: raw.mode,
                angle_deg: raw.angle_deg,
                power_nw: raw.power_nw,
                power_err_nw: raw.power_err_nw,
                bins_a: raw.bins_a,
                bins_b: raw.bins_b,
                events: raw.events,
                counts,
            });
            lines.push(line);
        }
        if records.is_empty() {
            return Err(schema(1, "no records"));
        }
        let d = Self { records };
        // re-map record positions onto the file lines they came from
        d.validate().map_err(|e| match e {
            Error::Schema { line, message } => schema(lines[line - 1], message),
            other => other,
        })?;
        Ok(d)
    }

    pub fn from_json_reader<R: Read>(input: R) -> Result<Self> {
        let mut text = String::new();
        let mut input = input;
        input.read_to_string(&mut text)?;
        if text.trim().is_empty() {
            return Err(schema(1, "empty file"));
        }
        let d: Dataset = serde_json::from_str(&text).map_err(|e| schema(e.line(), e.to_string()))?;
        if d.records.is_empty() {
            return Err(schema(1, "no records"));
        }
        d.validate()?;
        Ok(d)
    }

    pub fn load(path: &Path, format: DataFormat) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        match format {
            DataFormat::Csv => Self::from_csv_reader(file),
            DataFormat::Json => Self::from_json_reader(file),
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        for r in &self.records {
            let counts: Vec<String> = r.counts.iter().map(u64::to_string).collect();
            w.write_record([
                r.mode.clone(),
                r.angle_deg.to_string(),
                r.power_nw.to_string(),
                r.power_err_nw.map_or_else(String::new, |e| e.to_string()),
                r.bins_a.to_string(),
                r.bins_b.to_string(),
                r.events.to_string(),
                counts.join(" "),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut out, self)?;
        out.write_all(b"\n")?;
        Ok(())
    }

    pub fn save(&self, path: &Path, format: DataFormat) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        match format {
            DataFormat::Csv => self.write_csv(file),
            DataFormat::Json => self.write_json(file),
        }
    }
}
