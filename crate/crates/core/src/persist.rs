//! Line-oriented text container shared by every persisted model.
//!
//! ```text
//! fusiondet-model <kind>
//! version 1
//! field <name> <value>
//! vector <name> <len>
//! <len values>
//! matrix <name> <rows> <cols>
//! <one line of values per row>
//! end
//! ```
//!
//! Reals are written with 17 significant digits so reloading is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &str = "fusiondet-model";
pub const VERSION: u32 = 1;

/// Formats a real with 17 significant digits.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

pub struct ModelWriter {
    out: String,
}

impl ModelWriter {
    pub fn new(kind: &str) -> Self {
        ModelWriter {
            out: format!("{MAGIC} {kind}\nversion {VERSION}\n"),
        }
    }

    pub fn field(&mut self, name: &str, value: impl std::fmt::Display) -> &mut Self {
        let _ = writeln!(self.out, "field {name} {value}");
        self
    }

    pub fn real(&mut self, name: &str, value: f64) -> &mut Self {
        self.field(name, fmt_real(value))
    }

    pub fn vector(&mut self, name: &str, values: &[f64]) -> &mut Self {
        let _ = writeln!(self.out, "vector {name} {}", values.len());
        self.push_row(values);
        self
    }

    pub fn matrix(&mut self, name: &str, rows: &[Vec<f64>]) -> &mut Self {
        let cols = rows.first().map_or(0, Vec::len);
        let _ = writeln!(self.out, "matrix {name} {} {cols}", rows.len());
        for r in rows {
            self.push_row(r);
        }
        self
    }

    fn push_row(&mut self, values: &[f64]) {
        let line: Vec<String> = values.iter().map(|v| fmt_real(*v)).collect();
        self.out.push_str(&line.join(" "));
        self.out.push('\n');
    }

    pub fn finish(mut self) -> String {
        self.out.push_str("end\n");
        self.out
    }
}

pub struct ModelReader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    line_no: usize,
}

impl<'a> ModelReader<'a> {
    /// Checks the magic line, kind and version.
    pub fn new(text: &'a str, kind: &str) -> Result<Self> {
        let mut r = ModelReader {
            lines: text.lines().enumerate(),
            line_no: 0,
        };
        let head = r.next_line()?;
        let expected = format!("{MAGIC} {kind}");
        if head.trim() != expected {
            return Err(Error::parse(
                r.line_no,
                format!("expected header {expected:?}, found {head:?}"),
            ));
        }
        let version = r.next_line()?;
        if version.trim() != format!("version {VERSION}") {
            return Err(Error::parse(r.line_no, format!("unsupported {version:?}")));
        }
        Ok(r)
    }

    fn next_line(&mut self) -> Result<&'a str> {
        match self.lines.next() {
            Some((i, l)) => {
                self.line_no = i + 1;
                Ok(l)
            }
            None => Err(Error::parse(self.line_no + 1, "unexpected end of model")),
        }
    }

    fn header(&mut self, tag: &str, name: &str, arity: usize) -> Result<Vec<&'a str>> {
        let line = self.next_line()?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 + arity || fields[0] != tag || fields[1] != name {
            return Err(Error::parse(
                self.line_no,
                format!("expected `{tag} {name}`, found {line:?}"),
            ));
        }
        Ok(fields[2..].to_vec())
    }

    fn parse_num<T: std::str::FromStr>(&self, s: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        s.parse::<T>()
            .map_err(|e| Error::parse(self.line_no, format!("{s:?}: {e}")))
    }

    pub fn field(&mut self, name: &str) -> Result<&'a str> {
        Ok(self.header("field", name, 1)?[0])
    }

    pub fn parse_field<T: std::str::FromStr>(&mut self, name: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.field(name)?;
        self.parse_num(v)
    }

    fn row(&mut self, len: usize) -> Result<Vec<f64>> {
        let line = self.next_line()?;
        let values = line
            .split_whitespace()
            .map(|s| self.parse_num::<f64>(s))
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != len {
            return Err(Error::parse(
                self.line_no,
                format!("expected {len} values, found {}", values.len()),
            ));
        }
        Ok(values)
    }

    pub fn vector(&mut self, name: &str) -> Result<Vec<f64>> {
        let h = self.header("vector", name, 1)?;
        let len: usize = self.parse_num(h[0])?;
        self.row(len)
    }

    pub fn matrix(&mut self, name: &str) -> Result<Vec<Vec<f64>>> {
        let h = self.header("matrix", name, 2)?;
        let rows: usize = self.parse_num(h[0])?;
        let cols: usize = self.parse_num(h[1])?;
        (0..rows).map(|_| self.row(cols)).collect()
    }

    pub fn finish(mut self) -> Result<()> {
        let line = self.next_line()?;
        if line.trim() != "end" {
            return Err(Error::parse(self.line_no, format!("expected `end`, found {line:?}")));
        }
        Ok(())
    }
}

/// Types stored in the shared container.
pub trait Persist: Sized {
    const KIND: &'static str;

    fn write_body(&self, w: &mut ModelWriter);

    fn read_body(r: &mut ModelReader<'_>) -> Result<Self>;

    fn to_text(&self) -> String {
        let mut w = ModelWriter::new(Self::KIND);
        self.write_body(&mut w);
        w.finish()
    }

    fn from_text(text: &str) -> Result<Self> {
        let mut r = ModelReader::new(text, Self::KIND)?;
        let v = Self::read_body(&mut r)?;
        r.finish()?;
        Ok(v)
    }

    fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

use crate::features::{GmmModel, PcaModel};

impl Persist for PcaModel {
    const KIND: &'static str = "pca";

    fn write_body(&self, w: &mut ModelWriter) {
        w.field("input_dim", self.input_dim())
            .field("output_dim", self.output_dim())
            .vector("mean", &self.mean)
            .vector("variances", &self.variances)
            .matrix("components", &self.components);
    }

    fn read_body(r: &mut ModelReader<'_>) -> Result<Self> {
        let input: usize = r.parse_field("input_dim")?;
        let output: usize = r.parse_field("output_dim")?;
        let mean = r.vector("mean")?;
        let variances = r.vector("variances")?;
        let components = r.matrix("components")?;
        if mean.len() != input
            || variances.len() != output
            || components.len() != output
            || components.iter().any(|c| c.len() != input)
        {
            return Err(Error::Invalid("PCA model dimensions disagree".into()));
        }
        Ok(PcaModel {
            mean,
            components,
            variances,
        })
    }
}

impl Persist for GmmModel {
    const KIND: &'static str = "gmm";

    fn write_body(&self, w: &mut ModelWriter) {
        w.field("k", self.k())
            .field("dim", self.dim())
            .vector("weights", &self.weights)
            .matrix("means", &self.means)
            .matrix("variances", &self.variances);
    }

    fn read_body(r: &mut ModelReader<'_>) -> Result<Self> {
        let k: usize = r.parse_field("k")?;
        let dim: usize = r.parse_field("dim")?;
        let weights = r.vector("weights")?;
        let means = r.matrix("means")?;
        let variances = r.matrix("variances")?;
        let shape_ok = |m: &Vec<Vec<f64>>| m.len() == k && m.iter().all(|row| row.len() == dim);
        if weights.len() != k || !shape_ok(&means) || !shape_ok(&variances) {
            return Err(Error::Invalid("GMM model dimensions disagree".into()));
        }
        Ok(GmmModel {
            weights,
            means,
            variances,
        })
    }
}
