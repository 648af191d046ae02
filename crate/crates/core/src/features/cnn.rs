//! Ingestion of externally computed per-proposal CNN vectors.
//!
//! File format: one row per proposal, `image_id proposal_index v1 ... vM`,
//! whitespace separated, with the same `M` on every row.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CnnFeatureTable {
    dim: Option<usize>,
    rows: BTreeMap<(String, usize), Vec<f64>>,
}

impl CnnFeatureTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Vector length shared by all rows; `None` while empty.
    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, image_id: &str, proposal: usize) -> Option<&[f64]> {
        self.rows
            .get(&(image_id.to_string(), proposal))
            .map(Vec::as_slice)
    }

    pub fn insert(&mut self, image_id: &str, proposal: usize, vector: Vec<f64>) -> Result<()> {
        match self.dim {
            Some(d) if d != vector.len() => {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: vector.len(),
                })
            }
            None => self.dim = Some(vector.len()),
            _ => {}
        }
        let key = (image_id.to_string(), proposal);
        if self.rows.contains_key(&key) {
            return Err(Error::Invalid(format!(
                "duplicate CNN feature row for ({image_id}, {proposal})"
            )));
        }
        self.rows.insert(key, vector);
        Ok(())
    }

    /// Rows in `(image_id, proposal_index)` order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, usize, &[f64])> {
        self.rows
            .iter()
            .map(|((id, p), v)| (id.as_str(), *p, v.as_slice()))
    }
}

pub fn parse_cnn_features(text: &str) -> Result<CnnFeatureTable> {
    let mut table = CnnFeatureTable::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let mut fields = line.split_whitespace();
        let Some(image_id) = fields.next() else {
            continue;
        };
        let proposal = fields
            .next()
            .ok_or_else(|| Error::parse(line_no, "missing proposal index"))?
            .parse::<usize>()
            .map_err(|e| Error::parse(line_no, format!("proposal index: {e}")))?;
        let vector = fields
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| Error::parse(line_no, format!("{f:?}: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if vector.is_empty() {
            return Err(Error::parse(line_no, "row has no feature values"));
        }
        table
            .insert(image_id, proposal, vector)
            .map_err(|e| Error::parse(line_no, e.to_string()))?;
    }
    Ok(table)
}

pub fn load_cnn_features(path: &Path) -> Result<CnnFeatureTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_cnn_features(&text)
}

pub fn format_cnn_features(table: &CnnFeatureTable) -> String {
    let mut out = String::new();
    for (id, p, v) in table.iter() {
        let _ = write!(out, "{id} {p}");
        for x in v {
            let _ = write!(out, " {x:.16e}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file() {
        let t = parse_cnn_features("").unwrap();
        assert!(t.is_empty());
        assert_eq!(t.dim(), None);
    }

    #[test]
    fn two_rows() {
        let t = parse_cnn_features("img1 0 1 2 3 4\nimg1 1 0.5 -1 2e3 0\n").unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.dim(), Some(4));
        assert_eq!(t.get("img1", 1).unwrap(), &[0.5, -1.0, 2000.0, 0.0]);
    }

    #[test]
    fn length_mismatch_names_line() {
        let err = parse_cnn_features("a 0 1 2 3 4\na 1 1 2 3\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn malformed_and_duplicate() {
        assert!(matches!(
            parse_cnn_features("a 0 1 x\n").unwrap_err(),
            Error::Parse { line: 1, .. }
        ));
        assert!(matches!(
            parse_cnn_features("a 0 1\n\na 0 2\n").unwrap_err(),
            Error::Parse { line: 3, .. }
        ));
        assert!(parse_cnn_features("a\n").is_err());
    }

    #[test]
    fn format_round_trip_is_bit_exact() {
        let mut t = CnnFeatureTable::new();
        t.insert("x", 3, vec![0.1, 1.0 / 3.0, -2.5e-300]).unwrap();
        t.insert("a", 0, vec![f64::MAX, 0.0, 7.0]).unwrap();
        let back = parse_cnn_features(&format_cnn_features(&t)).unwrap();
        assert_eq!(back, t);
    }
}
