//! Observational samples `(Z_i, X_i, Y_i)` stored row-major.

use crate::design::{check_factor_count, combination_index};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    n: usize,
    k: usize,
    d: usize,
    z: Vec<i8>,
    x: Vec<f64>,
    y: Vec<f64>,
    cells: Vec<usize>,
}

impl Dataset {
    /// `z` is N×K and `x` is N×D, both row-major; `y` has length N.
    pub fn new(k: usize, d: usize, z: Vec<i8>, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        check_factor_count(k)?;
        let n = y.len();
        if n == 0 {
            return Err(Error::Data {
                row: None,
                message: "dataset has no rows".into(),
            });
        }
        if z.len() != n * k || x.len() != n * d {
            return Err(Error::Data {
                row: None,
                message: format!(
                    "inconsistent sizes: {} factor values, {} covariate values, {n} outcomes",
                    z.len(),
                    x.len()
                ),
            });
        }
        let mut cells = Vec::with_capacity(n);
        for i in 0..n {
            let zi = &z[i * k..(i + 1) * k];
            if let Some(bad) = zi.iter().find(|&&v| v != 1 && v != -1) {
                return Err(Error::data(
                    i,
                    format!("factor level {bad} is not -1 or +1"),
                ));
            }
            if x[i * d..(i + 1) * d].iter().any(|v| !v.is_finite()) {
                return Err(Error::data(i, "non-finite covariate value"));
            }
            if !y[i].is_finite() {
                return Err(Error::data(i, "non-finite outcome"));
            }
            cells.push(combination_index(zi));
        }
        Ok(Dataset {
            n,
            k,
            d,
            z,
            x,
            y,
            cells,
        })
    }

    pub fn from_rows(z: &[Vec<i8>], x: &[Vec<f64>], y: &[f64]) -> Result<Self> {
        let k = z.first().map_or(0, Vec::len);
        let d = x.first().map_or(0, Vec::len);
        if let Some(i) = z.iter().position(|r| r.len() != k) {
            return Err(Error::data(i, "ragged factor row"));
        }
        if let Some(i) = x.iter().position(|r| r.len() != d) {
            return Err(Error::data(i, "ragged covariate row"));
        }
        Dataset::new(k, d, z.concat(), x.concat(), y.to_vec())
    }

    /// Same units and covariates with a different outcome vector.
    pub fn with_outcome(&self, y: Vec<f64>) -> Result<Self> {
        Dataset::new(self.k, self.d, self.z.clone(), self.x.clone(), y)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn factors(&self) -> usize {
        self.k
    }

    pub fn covariates(&self) -> usize {
        self.d
    }

    pub fn z_row(&self, i: usize) -> &[i8] {
        &self.z[i * self.k..(i + 1) * self.k]
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    /// Enumeration index of unit `i`'s treatment combination.
    pub fn cell(&self, i: usize) -> usize {
        self.cells[i]
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    /// Number of units in each of the 2^K cells.
    pub fn cell_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; 1usize << self.k];
        for &c in &self.cells {
            counts[c] += 1;
        }
        counts
    }

    /// Column `j` of the covariate matrix.
    pub fn covariate(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.x[i * self.d + j]).collect()
    }
}
