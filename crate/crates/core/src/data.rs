//! Column-major observation matrices with named columns.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use crate::error::{BetelError, Result};

/// Observations stored column by column; moment families bind columns by name.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn new(names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(BetelError::InvalidData(format!(
                "{} names for {} columns",
                names.len(),
                columns.len()
            )));
        }
        if let Some(first) = columns.first() {
            if columns.iter().any(|c| c.len() != first.len()) {
                return Err(BetelError::InvalidData("columns have unequal lengths".into()));
            }
        }
        for (i, name) in names.iter().enumerate() {
            if names[..i].contains(name) {
                return Err(BetelError::InvalidData(format!("duplicate column `{name}`")));
            }
        }
        Ok(Self { names, columns })
    }

    /// Convenience constructor from `(name, values)` pairs.
    pub fn from_columns<S: Into<String>>(pairs: Vec<(S, Vec<f64>)>) -> Result<Self> {
        let (names, columns): (Vec<String>, Vec<Vec<f64>>) =
            pairs.into_iter().map(|(n, c)| (n.into(), c)).unzip();
        Self::new(names, columns)
    }

    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.columns[i].as_slice())
            .ok_or_else(|| BetelError::MissingColumn(name.to_string()))
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }

    /// Copy of a contiguous block of rows.
    pub fn slice_rows(&self, rows: Range<usize>) -> Dataset {
        Dataset {
            names: self.names.clone(),
            columns: self.columns.iter().map(|c| c[rows.clone()].to_vec()).collect(),
        }
    }

    /// Copy of the rows at `indices`, in that order (repeats allowed).
    pub fn select_rows(&self, indices: &[usize]) -> Dataset {
        Dataset {
            names: self.names.clone(),
            columns: self
                .columns
                .iter()
                .map(|c| indices.iter().map(|&i| c[i]).collect())
                .collect(),
        }
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let names: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
        let mut columns = vec![Vec::new(); names.len()];
        for (line, record) in rdr.records().enumerate() {
            let record = record?;
            if record.len() != names.len() {
                return Err(BetelError::InvalidData(format!(
                    "row {} has {} fields, header has {}",
                    line + 1,
                    record.len(),
                    names.len()
                )));
            }
            for (col, field) in columns.iter_mut().zip(record.iter()) {
                let value: f64 = field.trim().parse().map_err(|_| {
                    BetelError::InvalidData(format!("row {}: cannot parse `{field}`", line + 1))
                })?;
                col.push(value);
            }
        }
        Self::new(names, columns)
    }

    pub fn read_csv_path(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    /// Writes a header row followed by one line per observation (LF endings).
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        wtr.write_record(&self.names)?;
        for i in 0..self.n_rows() {
            wtr.write_record(self.columns.iter().map(|c| format_float(c[i])))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Shortest round-trip representation, so written files reload bit-exactly.
pub(crate) fn format_float(x: f64) -> String {
    format!("{x:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let ds = Dataset::from_columns(vec![
            ("y", vec![1.5, -0.1, 1.0 / 3.0]),
            ("z", vec![0.5, 2.0, 1e-300]),
        ])
        .unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("y,z\n"));
        assert!(!text.contains('\r'));
        let back = Dataset::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn missing_column_is_reported() {
        let ds = Dataset::from_columns(vec![("y", vec![1.0])]).unwrap();
        assert!(matches!(ds.column("x"), Err(BetelError::MissingColumn(c)) if c == "x"));
    }

    #[test]
    fn rejects_ragged_and_duplicate_columns() {
        assert!(Dataset::from_columns(vec![("a", vec![1.0]), ("b", vec![])]).is_err());
        assert!(Dataset::from_columns(vec![("a", vec![1.0]), ("a", vec![2.0])]).is_err());
    }

    #[test]
    fn unparsable_field_is_an_error() {
        let text = "y\n1.0\nabc\n";
        assert!(Dataset::read_csv(text.as_bytes()).is_err());
    }
}
