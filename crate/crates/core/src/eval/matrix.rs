use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense matrix with named rows and columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl LabeledMatrix {
    pub fn new(rows: Vec<String>, cols: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.len() != rows.len() || values.iter().any(|r| r.len() != cols.len()) {
            return Err(Error::dim(format!(
                "{}×{} labels for a matrix with {} rows",
                rows.len(),
                cols.len(),
                values.len()
            )));
        }
        Ok(LabeledMatrix { rows, cols, values })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i][j]
    }

    pub fn is_square(&self) -> bool {
        self.rows.len() == self.cols.len()
    }

    /// Header row of column names, then one line per row name.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("row");
        for c in &self.cols {
            s.push(',');
            s.push_str(c);
        }
        s.push('\n');
        for (name, row) in self.rows.iter().zip(&self.values) {
            s.push_str(name);
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }

    /// `row,col,value` triples for plotting tools.
    pub fn to_long_csv(&self) -> String {
        let mut s = String::from("row,col,value\n");
        for (name, row) in self.rows.iter().zip(&self.values) {
            for (c, v) in self.cols.iter().zip(row) {
                s.push_str(&format!("{name},{c},{v}\n"));
            }
        }
        s
    }
}
