//! Plain-text run reports.
//!
//! ```text
//! pgcam-report 1
//! dataset=<sha256 of the manifest>
//! key=value
//! [table]
//! row-label<TAB>metric=value<TAB>...
//! [boxes]
//! row-label<TAB>image<TAB>x0 y0 x1 y1 score
//! ```
//!
//! Floats use the shortest representation that parses back to the same
//! value, so a parsed report equals the one that was emitted.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::localizer::{Detection, MethodResult};
use crate::trainer::ClassMetrics;

const MAGIC: &str = "pgcam-report 1";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("report line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("cannot emit report: {0}")]
    Emit(String),
    #[error("reports cover different datasets ({0} vs {1})")]
    Fingerprint(String, String),
    #[error("report i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub metrics: Vec<(String, f64)>,
}

impl ReportRow {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.metrics.iter().find(|(k, _)| k == key).map(|&(_, v)| v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoxListing {
    pub row: String,
    pub image: String,
    pub detection: Detection,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunReport {
    /// Content hash of the evaluated manifest.
    pub dataset: String,
    /// Configuration echo and timing, in insertion order.
    pub header: Vec<(String, String)>,
    pub rows: Vec<ReportRow>,
    pub boxes: Vec<BoxListing>,
}

/// Hex sha256 of `bytes`.
pub fn fingerprint(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn fingerprint_file(path: &Path) -> std::io::Result<String> {
    Ok(fingerprint(&std::fs::read(path)?))
}

fn check_token(s: &str, what: &str, forbid: &[char]) -> Result<(), ReportError> {
    if s.is_empty() || s.contains(['\n', '\r']) || s.contains(forbid) || s.starts_with('[') {
        return Err(ReportError::Emit(format!("{what} '{s}' is empty or contains a reserved character")));
    }
    Ok(())
}

impl RunReport {
    pub fn new(dataset: impl Into<String>) -> Self {
        RunReport {
            dataset: dataset.into(),
            ..Default::default()
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.header.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.header.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn row(&self, label: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn push_classification(&mut self, label: &str, m: &ClassMetrics) {
        let mut metrics = vec![("accuracy".to_string(), m.accuracy)];
        for (c, r) in m.recall.iter().enumerate() {
            metrics.push((format!("recall{c}"), *r));
        }
        for (t, row) in m.confusion.iter().enumerate() {
            for (p, n) in row.iter().enumerate() {
                metrics.push((format!("n{t}{p}"), *n as f64));
            }
        }
        self.rows.push(ReportRow {
            label: label.to_string(),
            metrics,
        });
    }

    /// Adds a localization row plus its per-image boxes.
    pub fn push_localization(&mut self, label: &str, r: &MethodResult, image_names: &[String]) {
        let c = r.counts;
        let m = r.metrics;
        self.rows.push(ReportRow {
            label: label.to_string(),
            metrics: vec![
                ("precision".into(), m.precision),
                ("accuracy".into(), m.accuracy),
                ("f1".into(), m.f1),
                ("recall".into(), m.recall),
                ("tp".into(), c.tp as f64),
                ("fp".into(), c.fp as f64),
                ("fn".into(), c.fn_ as f64),
                ("tau".into(), r.spec.tau),
            ],
        });
        for (dets, name) in r.detections.iter().zip(image_names) {
            for d in dets {
                self.boxes.push(BoxListing {
                    row: label.to_string(),
                    image: name.clone(),
                    detection: *d,
                });
            }
        }
    }

    pub fn emit(&self) -> Result<String, ReportError> {
        let mut out = String::new();
        check_token(&self.dataset, "dataset fingerprint", &['=', '\t'])?;
        writeln!(out, "{MAGIC}").expect("string write");
        writeln!(out, "dataset={}", self.dataset).expect("string write");
        for (k, v) in &self.header {
            check_token(k, "header key", &['=', '\t'])?;
            if k == "dataset" {
                return Err(ReportError::Emit("header key 'dataset' is reserved".into()));
            }
            if v.contains(['\n', '\r']) {
                return Err(ReportError::Emit(format!("header value for '{k}' spans lines")));
            }
            writeln!(out, "{k}={v}").expect("string write");
        }
        out.push_str("[table]\n");
        for r in &self.rows {
            check_token(&r.label, "row label", &['\t'])?;
            out.push_str(&r.label);
            for (k, v) in &r.metrics {
                check_token(k, "metric name", &['=', '\t'])?;
                write!(out, "\t{k}={v:?}").expect("string write");
            }
            out.push('\n');
        }
        out.push_str("[boxes]\n");
        for b in &self.boxes {
            check_token(&b.row, "row label", &['\t'])?;
            check_token(&b.image, "image name", &['\t'])?;
            let x = b.detection.bbox;
            writeln!(
                out,
                "{}\t{}\t{} {} {} {} {:?}",
                b.row,
                b.image,
                x.x0(),
                x.y0(),
                x.x1(),
                x.y1(),
                b.detection.score
            )
            .expect("string write");
        }
        Ok(out)
    }

    pub fn parse(text: &str) -> Result<Self, ReportError> {
        let err = |line: usize, msg: String| ReportError::Parse { line, msg };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l == MAGIC => {}
            _ => return Err(err(1, format!("expected '{MAGIC}'"))),
        }
        let mut report = RunReport::default();
        let mut seen_dataset = false;
        #[derive(PartialEq)]
        enum Section {
            Header,
            Table,
            Boxes,
        }
        let mut section = Section::Header;
        for (n, line) in lines {
            match line {
                "[table]" if section == Section::Header => {
                    section = Section::Table;
                    continue;
                }
                "[boxes]" if section == Section::Table => {
                    section = Section::Boxes;
                    continue;
                }
                _ => {}
            }
            match section {
                Section::Header => {
                    let (k, v) = line.split_once('=').ok_or_else(|| err(n, "header line lacks '='".into()))?;
                    if k.is_empty() {
                        return Err(err(n, "empty header key".into()));
                    }
                    if k == "dataset" {
                        if seen_dataset {
                            return Err(err(n, "duplicate dataset line".into()));
                        }
                        seen_dataset = true;
                        report.dataset = v.to_string();
                    } else if report.get(k).is_some() {
                        return Err(err(n, format!("duplicate header key '{k}'")));
                    } else {
                        report.header.push((k.to_string(), v.to_string()));
                    }
                }
                Section::Table => {
                    let mut fields = line.split('\t');
                    let label = fields.next().filter(|l| !l.is_empty()).ok_or_else(|| err(n, "empty row label".into()))?;
                    let metrics = fields
                        .map(|f| {
                            let (k, v) = f.split_once('=').ok_or_else(|| err(n, format!("metric '{f}' lacks '='")))?;
                            let v: f64 = v.parse().map_err(|_| err(n, format!("invalid number '{v}'")))?;
                            Ok((k.to_string(), v))
                        })
                        .collect::<Result<_, ReportError>>()?;
                    report.rows.push(ReportRow {
                        label: label.to_string(),
                        metrics,
                    });
                }
                Section::Boxes => {
                    let mut fields = line.splitn(3, '\t');
                    let (row, image, rest) = match (fields.next(), fields.next(), fields.next()) {
                        (Some(r), Some(i), Some(b)) if !r.is_empty() && !i.is_empty() => (r, i, b),
                        _ => return Err(err(n, "box line needs row, image and box fields".into())),
                    };
                    let det = crate::localizer::parse_boxes(rest)
                        .map_err(|e| err(n, e.to_string()))?
                        .pop()
                        .ok_or_else(|| err(n, "empty box".into()))?;
                    report.boxes.push(BoxListing {
                        row: row.to_string(),
                        image: image.to_string(),
                        detection: det,
                    });
                }
            }
        }
        if !seen_dataset {
            return Err(err(1, "missing dataset fingerprint".into()));
        }
        if section != Section::Boxes {
            return Err(err(text.lines().count(), "missing [table] or [boxes] section".into()));
        }
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<(), ReportError> {
        crate::io::write_atomic(path, self.emit()?.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ReportError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// Concatenates rows and boxes of reports over the same dataset. Header
/// entries are kept under an `input<i>.` prefix.
pub fn merge_reports(reports: &[RunReport]) -> Result<RunReport, ReportError> {
    let first = reports
        .first()
        .ok_or_else(|| ReportError::Emit("nothing to merge".into()))?;
    let mut out = RunReport::new(first.dataset.clone());
    out.set("merged_inputs", reports.len());
    for (i, r) in reports.iter().enumerate() {
        if r.dataset != first.dataset {
            return Err(ReportError::Fingerprint(first.dataset.clone(), r.dataset.clone()));
        }
        for (k, v) in &r.header {
            out.header.push((format!("input{i}.{k}"), v.clone()));
        }
        out.rows.extend(r.rows.iter().cloned());
        out.boxes.extend(r.boxes.iter().cloned());
    }
    Ok(out)
}
