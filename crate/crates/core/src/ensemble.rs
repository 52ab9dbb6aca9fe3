//! Per-image class-probability sets: CSV I/O and averaging.

use std::io::{Read, Write};

use indexmap::IndexMap;
use log::warn;
use thiserror::Error;

use crate::data::{check_header, csv_reader, ClassLabel, DataError, CSV_HEADER, NUM_CLASSES};

/// Rows whose sum is off by more than this are rejected.
pub const REJECT_TOLERANCE: f64 = 1e-3;
/// Rows off by more than this (but within [`REJECT_TOLERANCE`]) are
/// renormalized with a warning.
pub const RENORMALIZE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("no prediction sets to average")]
    Empty,
    #[error("prediction sets cover different images: {0}")]
    IdMismatch(String),
    #[error("bad header: {0}")]
    BadHeader(String),
    #[error("line {line}: {reason}")]
    BadRow { line: usize, reason: String },
    #[error("line {line}: probabilities for `{image}` sum to {sum}")]
    NotNormalized { line: usize, image: String, sum: f64 },
    #[error("duplicate image id `{0}`")]
    DuplicateId(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EnsembleError>;

pub type ProbRow = [f64; NUM_CLASSES];

/// Probability rows keyed by image id, in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictionSet {
    pub rows: IndexMap<String, ProbRow>,
}

impl PredictionSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, image_id: impl Into<String>, row: ProbRow) -> Result<()> {
        let id = image_id.into();
        if self.rows.contains_key(&id) {
            return Err(EnsembleError::DuplicateId(id));
        }
        self.rows.insert(id, row);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&ProbRow> {
        self.rows.get(image_id)
    }
}

/// Elementwise mean of the sets' rows. Output order follows the first set.
///
/// Each entry sums its contributions in ascending order, so the result does
/// not depend on the order of `sets`.
pub fn average(sets: &[PredictionSet]) -> Result<PredictionSet> {
    let first = sets.first().ok_or(EnsembleError::Empty)?;
    for (k, s) in sets.iter().enumerate().skip(1) {
        if s.len() != first.len() {
            return Err(EnsembleError::IdMismatch(format!(
                "set 0 has {} images, set {k} has {}",
                first.len(),
                s.len()
            )));
        }
        if let Some(id) = first.rows.keys().find(|id| !s.rows.contains_key(*id)) {
            return Err(EnsembleError::IdMismatch(format!("`{id}` missing from set {k}")));
        }
    }
    let k = sets.len() as f64;
    let mut out = PredictionSet::new();
    let mut column = Vec::with_capacity(sets.len());
    for id in first.rows.keys() {
        let mut row = [0.0; NUM_CLASSES];
        for (c, v) in row.iter_mut().enumerate() {
            column.clear();
            column.extend(sets.iter().map(|s| s.rows[id][c]));
            column.sort_by(f64::total_cmp);
            *v = column.iter().sum::<f64>() / k;
        }
        out.rows.insert(id.clone(), row);
    }
    Ok(out)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &ProbRow) -> ClassLabel {
    let mut best = 0;
    for c in 1..NUM_CLASSES {
        if row[c] > row[best] {
            best = c;
        }
    }
    ClassLabel::ALL[best]
}

pub fn argmax_labels(s: &PredictionSet) -> IndexMap<String, ClassLabel> {
    s.rows.iter().map(|(id, row)| (id.clone(), argmax(row))).collect()
}

/// Result of reading a prediction CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ReadOutcome {
    pub set: PredictionSet,
    /// Ids of rows that were renormalized.
    pub renormalized: Vec<String>,
}

pub fn read_predictions<R: Read>(reader: R) -> Result<ReadOutcome> {
    let mut rdr = csv_reader(reader);
    let mut records = rdr.records();
    match records.next() {
        Some(h) => check_header(&h?).map_err(|e| match e {
            DataError::BadHeader { found } => EnsembleError::BadHeader(found),
            other => EnsembleError::BadHeader(other.to_string()),
        })?,
        None => return Err(EnsembleError::BadHeader("empty file".into())),
    }
    let mut set = PredictionSet::new();
    let mut renormalized = Vec::new();
    for (i, rec) in records.enumerate() {
        let line = i + 2;
        let rec = rec?;
        if rec.len() == 1 && rec[0].trim().is_empty() {
            continue;
        }
        if rec.len() != CSV_HEADER.len() {
            return Err(EnsembleError::BadRow {
                line,
                reason: format!("expected {} fields, found {}", CSV_HEADER.len(), rec.len()),
            });
        }
        let id = rec[0].trim().to_string();
        let mut row = [0.0; NUM_CLASSES];
        for (c, field) in rec.iter().skip(1).enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| EnsembleError::BadRow {
                line,
                reason: format!("`{field}` is not a number"),
            })?;
            if !(0.0..=1.0).contains(&v) {
                return Err(EnsembleError::BadRow {
                    line,
                    reason: format!("probability {v} outside [0, 1]"),
                });
            }
            row[c] = v;
        }
        let sum: f64 = row.iter().sum();
        let off = (sum - 1.0).abs();
        if off > REJECT_TOLERANCE {
            return Err(EnsembleError::NotNormalized { line, image: id, sum });
        }
        if off > RENORMALIZE_TOLERANCE {
            warn!("line {line}: probabilities for `{id}` sum to {sum}; renormalizing");
            for v in &mut row {
                *v /= sum;
            }
            renormalized.push(id.clone());
        }
        set.insert(id, row)?;
    }
    Ok(ReadOutcome { set, renormalized })
}

/// Rounds a probability row to integer millionths that sum to exactly one
/// million (largest remainder, ties to the lower index). Falls back to
/// plain rounding when the row is not close to normalized.
fn micro_units(row: &ProbRow) -> [i64; NUM_CLASSES] {
    let scaled = row.map(|v| v * 1e6);
    let mut units = scaled.map(|v| v.floor() as i64);
    let short = 1_000_000 - units.iter().sum::<i64>();
    if !(0..=NUM_CLASSES as i64).contains(&short) {
        return scaled.map(|v| v.round() as i64);
    }
    let mut order: Vec<usize> = (0..NUM_CLASSES).collect();
    order.sort_by(|&a, &b| {
        let ra = scaled[a] - units[a] as f64;
        let rb = scaled[b] - units[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &c in order.iter().take(short as usize) {
        units[c] += 1;
    }
    units
}

/// Writes the prediction CSV with six decimals per value. Rows are rounded
/// so that the printed values still sum to exactly 1.
pub fn write_predictions<W: Write>(s: &PredictionSet, writer: W) -> Result<()> {
    let mut w = std::io::BufWriter::new(writer);
    writeln!(w, "{}", CSV_HEADER.join(","))?;
    for (id, row) in &s.rows {
        write!(w, "{id}")?;
        for u in micro_units(row) {
            write!(w, ",{}.{:06}", u / 1_000_000, u % 1_000_000)?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(head: &[f64]) -> ProbRow {
        let mut r = [0.0; NUM_CLASSES];
        r[..head.len()].copy_from_slice(head);
        r
    }

    fn set(rows: &[(&str, ProbRow)]) -> PredictionSet {
        let mut s = PredictionSet::new();
        for (id, r) in rows {
            s.insert(*id, *r).unwrap();
        }
        s
    }

    #[test]
    fn average_examples() {
        let a = set(&[("x", row(&[0.8, 0.2]))]);
        let b = set(&[("x", row(&[0.4, 0.6]))]);
        let m = average(&[a.clone(), b]).unwrap();
        assert!((m.rows["x"][0] - 0.6).abs() < 1e-15);
        assert!((m.rows["x"][1] - 0.4).abs() < 1e-15);
        assert_eq!(average(std::slice::from_ref(&a)).unwrap(), a);
        let three = average(&[a.clone(), a.clone(), a.clone()]).unwrap();
        for (x, y) in three.rows["x"].iter().zip(&a.rows["x"]) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(matches!(average(&[]), Err(EnsembleError::Empty)));
        let other = set(&[("y", row(&[1.0]))]);
        assert!(matches!(average(&[a, other]), Err(EnsembleError::IdMismatch(_))));
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(argmax(&row(&[1.0])), ClassLabel::MEL);
        assert_eq!(argmax(&[0.125; 8]), ClassLabel::MEL);
        assert_eq!(argmax(&row(&[0.1, 0.7, 0.2])), ClassLabel::NV);
    }

    #[test]
    fn write_read_round_trip() {
        let s = set(&[
            ("a", [0.1, 0.2, 0.05, 0.05, 0.3, 0.1, 0.1, 0.1]),
            ("b", [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
        ]);
        let mut buf = Vec::new();
        write_predictions(&s, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("image,MEL,NV,BCC,AK,BKL,DF,VASC,SCC\n"));
        assert!(text.contains("b,0.333334,0.333333,0.333333,"));
        let back = read_predictions(buf.as_slice()).unwrap();
        assert!(back.renormalized.is_empty());
        for (id, r) in &s.rows {
            for (x, y) in r.iter().zip(&back.set.rows[id]) {
                assert!((x - y).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn tolerance_band() {
        let h = "image,MEL,NV,BCC,AK,BKL,DF,VASC,SCC\n";
        let half = format!("{h}x,0.5,0,0,0,0,0,0,0\n");
        assert!(matches!(
            read_predictions(half.as_bytes()),
            Err(EnsembleError::NotNormalized { .. })
        ));
        let close = format!("{h}x,0.5004,0.5,0,0,0,0,0,0\n");
        let out = read_predictions(close.as_bytes()).unwrap();
        assert_eq!(out.renormalized, vec!["x".to_string()]);
        assert!((out.set.rows["x"].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let bad = format!("{h}x,abc,0,0,0,0,0,0,1\n");
        assert!(matches!(
            read_predictions(bad.as_bytes()),
            Err(EnsembleError::BadRow { .. })
        ));
        assert!(matches!(
            read_predictions("image,A\n".as_bytes()),
            Err(EnsembleError::BadHeader(_))
        ));
    }
}
