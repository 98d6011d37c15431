use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{HptrError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Provenance {
    Clean,
    Corrupted { fraction: f64, adversary: String },
}

/// n records of dimension d stored row-major, with an optional label per record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub n: usize,
    pub d: usize,
    pub x: Vec<f64>,
    pub labels: Option<Vec<f64>>,
    pub provenance: Provenance,
    pub seed: u64,
}

impl Dataset {
    pub fn new(d: usize, x: Vec<f64>, labels: Option<Vec<f64>>) -> Result<Self> {
        if d == 0 || x.len() % d != 0 {
            return Err(HptrError::Shape(format!("{} values do not form rows of width {d}", x.len())));
        }
        let n = x.len() / d;
        if let Some(y) = &labels {
            if y.len() != n {
                return Err(HptrError::Shape(format!("{} labels for {n} rows", y.len())));
            }
        }
        Ok(Dataset { n, d, x, labels, provenance: Provenance::Clean, seed: 0 })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != d) {
            return Err(HptrError::Shape("ragged rows".into()));
        }
        Self::new(d, rows.concat(), None)
    }

    pub fn with_labels(mut self, y: Vec<f64>) -> Result<Self> {
        if y.len() != self.n {
            return Err(HptrError::Shape(format!("{} labels for {} rows", y.len(), self.n)));
        }
        self.labels = Some(y);
        Ok(self)
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn label(&self, i: usize) -> Option<f64> {
        self.labels.as_ref().map(|y| y[i])
    }

    pub fn labels_required(&self) -> Result<&[f64]> {
        self.labels
            .as_deref()
            .ok_or_else(|| HptrError::Schema("dataset has no label column".into()))
    }

    /// Projections <v, x_i> for every record.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n).map(|i| dot(self.row(i), v)).collect()
    }

    /// Number of records (row plus label) that differ.
    pub fn hamming(&self, other: &Dataset) -> usize {
        (0..self.n.min(other.n))
            .filter(|&i| self.row(i) != other.row(i) || self.label(i) != other.label(i))
            .count()
            + self.n.abs_diff(other.n)
    }

    /// CSV with header `x1,...,xd[,y]`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (1..=self.d).map(|j| format!("x{j}")).collect();
        if self.labels.is_some() {
            header.push("y".into());
        }
        wr.write_record(&header).map_err(csv_err)?;
        for i in 0..self.n {
            let mut rec: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            if let Some(y) = self.label(i) {
                rec.push(y.to_string());
            }
            wr.write_record(&rec).map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers().map_err(csv_err)?.clone();
        let labeled = header.iter().last() == Some("y");
        let d = header.len() - labeled as usize;
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (k, rec) in rd.records().enumerate() {
            let line = k + 2;
            let rec = rec.map_err(|e| HptrError::Parse { line, msg: e.to_string() })?;
            if rec.len() != header.len() {
                return Err(HptrError::Parse { line, msg: format!("expected {} fields", header.len()) });
            }
            for (j, field) in rec.iter().enumerate() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| HptrError::Parse { line, msg: format!("bad number {field:?}") })?;
                if j < d {
                    x.push(v);
                } else {
                    y.push(v);
                }
            }
        }
        Dataset::new(d, x, labeled.then_some(y))
    }
}

pub(crate) fn csv_err(e: csv::Error) -> HptrError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    HptrError::Parse { line, msg: e.to_string() }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let ds = Dataset::new(2, vec![1.0, 2.5, -3.0, 4.0], Some(vec![0.5, -1.25])).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("x1,x2,y\n"));
        let back = Dataset::read_csv(&buf[..]).unwrap();
        assert_eq!(back.x, ds.x);
        assert_eq!(back.labels, ds.labels);
    }

    #[test]
    fn csv_parse_error_names_line() {
        let err = Dataset::read_csv("x1\n1.0\nfoo\n".as_bytes()).unwrap_err();
        assert!(matches!(err, HptrError::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn shape_checks() {
        assert!(Dataset::new(3, vec![1.0; 4], None).is_err());
        assert!(Dataset::new(1, vec![1.0; 4], Some(vec![0.0; 3])).is_err());
    }
}
