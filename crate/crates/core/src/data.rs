//! Numeric tables read from and written to CSV.
//!
//! Comma separated, `.` decimal point, header row required; an empty cell is
//! a missing value and is held as NaN.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::error::{Result, SemError};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub names: Vec<String>,
    /// Column-major storage, one vector per column.
    pub columns: Vec<Vec<f64>>,
    pub source: Option<PathBuf>,
}

impl Dataset {
    pub fn new(names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(SemError::DimensionMismatch("names and columns differ in length".into()));
        }
        let n = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != n) {
            return Err(SemError::DimensionMismatch("columns differ in length".into()));
        }
        let mut ds = Dataset {
            names: Vec::new(),
            columns: Vec::new(),
            source: None,
        };
        for (name, col) in names.into_iter().zip(columns) {
            ds.push_column(name, col)?;
        }
        Ok(ds)
    }

    pub fn from_matrix(names: Vec<String>, m: &DMatrix<f64>) -> Result<Self> {
        let cols = m.column_iter().map(|c| c.iter().copied().collect()).collect();
        Dataset::new(names, cols)
    }

    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn n_cols(&self) -> usize {
        self.names.len()
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| SemError::UnknownColumn(name.to_string()))
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.columns[self.column_index(name)?])
    }

    pub fn push_column(&mut self, name: String, values: Vec<f64>) -> Result<()> {
        if self.names.contains(&name) {
            return Err(SemError::ColumnCollision(name));
        }
        if !self.columns.is_empty() && values.len() != self.n_rows() {
            return Err(SemError::DimensionMismatch(format!(
                "column `{name}` has {} rows, table has {}",
                values.len(),
                self.n_rows()
            )));
        }
        self.names.push(name);
        self.columns.push(values);
        Ok(())
    }

    /// `n × k` matrix of the named columns; missing values are an error.
    pub fn select(&self, names: &[String]) -> Result<DMatrix<f64>> {
        let idx: Vec<usize> = names.iter().map(|n| self.column_index(n)).collect::<Result<_>>()?;
        let n = self.n_rows();
        let mut m = DMatrix::zeros(n, idx.len());
        for (j, &c) in idx.iter().enumerate() {
            for i in 0..n {
                let v = self.columns[c][i];
                if !v.is_finite() {
                    return Err(SemError::NonFinite { row: i, column: c });
                }
                m[(i, j)] = v;
            }
        }
        Ok(m)
    }

    pub fn rows_subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            names: self.names.clone(),
            columns: self.columns.iter().map(|c| rows.iter().map(|&i| c[i]).collect()).collect(),
            source: self.source.clone(),
        }
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Dataset> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let names: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
        if names.is_empty() || names.iter().all(String::is_empty) {
            return Err(SemError::MalformedData("CSV header row is missing".into()));
        }
        let mut columns = vec![Vec::new(); names.len()];
        for (line, record) in rdr.records().enumerate() {
            let record = record?;
            for (j, cell) in record.iter().enumerate() {
                let cell = cell.trim();
                let value = if cell.is_empty() || cell == "NA" {
                    f64::NAN
                } else {
                    cell.parse::<f64>().map_err(|_| {
                        SemError::MalformedData(format!(
                            "non-numeric cell `{cell}` in column `{}` at data row {}",
                            names[j],
                            line + 1
                        ))
                    })?
                };
                columns[j].push(value);
            }
        }
        Dataset::new(names, columns)
    }

    pub fn read_csv_path(path: &Path) -> Result<Dataset> {
        let file = std::fs::File::open(path)?;
        let mut ds = Dataset::read_csv(std::io::BufReader::new(file))?;
        ds.source = Some(path.to_path_buf());
        Ok(ds)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(&self.names)?;
        let mut record = Vec::with_capacity(self.n_cols());
        for i in 0..self.n_rows() {
            record.clear();
            for col in &self.columns {
                let v = col[i];
                record.push(if v.is_nan() { String::new() } else { format!("{v}") });
            }
            wtr.write_record(&record)?;
        }
        wtr.flush()?;
        Ok(())
    }
}
