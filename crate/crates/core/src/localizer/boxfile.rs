//! Box listing: one `x0 y0 x1 y1 score` line per detection.

use super::{BBox, Detection, LocError};

pub fn format_boxes(dets: &[Detection]) -> String {
    let mut out = String::new();
    for d in dets {
        let b = d.bbox;
        out.push_str(&format!("{} {} {} {} {:?}\n", b.x0(), b.y0(), b.x1(), b.y1(), d.score));
    }
    out
}

/// Parses a box listing. Blank lines and `#` comments are skipped.
pub fn parse_boxes(text: &str) -> Result<Vec<Detection>, LocError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| LocError::Parse { line: i + 1, msg };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", fields.len())));
        }
        let mut c = [0u32; 4];
        for (slot, f) in c.iter_mut().zip(&fields) {
            *slot = f.parse().map_err(|_| err(format!("invalid coordinate '{f}'")))?;
        }
        let score: f64 = fields[4].parse().map_err(|_| err(format!("invalid score '{}'", fields[4])))?;
        if !score.is_finite() {
            return Err(err(format!("non-finite score '{}'", fields[4])));
        }
        let bbox = BBox::new(c[0], c[1], c[2], c[3]).map_err(|e| err(e.to_string()))?;
        out.push(Detection { bbox, score });
    }
    Ok(out)
}
