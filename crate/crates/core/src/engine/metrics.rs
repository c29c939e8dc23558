use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower-triangular grid: row `k` holds the accuracies on tasks `1..=k`
/// after training through task `k` (both 1-based in the API).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let k = self.rows.len() + 1;
        if row.len() != k {
            return Err(Error::Contract(format!(
                "row {k} needs {k} entries, got {}",
                row.len()
            )));
        }
        if let Some(bad) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("accuracy {bad} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Number of completed tasks.
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// `a[k][j]`, 1-based.
    pub fn get(&self, k: usize, j: usize) -> Option<f64> {
        self.rows
            .get(k.checked_sub(1)?)?
            .get(j.checked_sub(1)?)
            .copied()
    }

    pub fn last_row(&self) -> Option<&[f64]> {
        self.rows.last().map(Vec::as_slice)
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.rows.len() {
            return Err(Error::Contract(format!(
                "k = {k} outside 1..={}",
                self.rows.len()
            )));
        }
        Ok(())
    }

    /// `AA_k`: mean of row `k`.
    pub fn average_accuracy(&self, k: usize) -> Result<f64> {
        self.check_k(k)?;
        Ok(average_accuracy(&self.rows[k - 1]))
    }

    /// `f_j^k = max_{j ≤ l < k} a[l][j] - a[k][j]`.
    pub fn forgetting(&self, k: usize, j: usize) -> Result<f64> {
        self.check_k(k)?;
        if j == 0 || j >= k {
            return Err(Error::Contract(format!(
                "forgetting needs 1 <= j < k, got j = {j}, k = {k}"
            )));
        }
        let best = (j..k)
            .map(|l| self.rows[l - 1][j - 1])
            .fold(f64::NEG_INFINITY, f64::max);
        Ok(best - self.rows[k - 1][j - 1])
    }

    /// `AF_k`: mean forgetting over tasks `1..k`. Undefined for `k < 2`.
    pub fn average_forgetting(&self, k: usize) -> Result<f64> {
        self.check_k(k)?;
        if k < 2 {
            return Err(Error::Contract(
                "average forgetting needs at least two tasks".into(),
            ));
        }
        let mut total = 0.0;
        for j in 1..k {
            total += self.forgetting(k, j)?;
        }
        Ok(total / (k - 1) as f64)
    }

    /// `(AA_T, AF_T)` for the last row; AF is `None` with one task.
    pub fn final_metrics(&self) -> Result<(f64, Option<f64>)> {
        let t = self.rows.len();
        let aa = self.average_accuracy(t)?;
        let af = if t >= 2 {
            Some(self.average_forgetting(t)?)
        } else {
            None
        };
        Ok((aa, af))
    }
}

/// Mean of one accuracy row.
pub fn average_accuracy(row: &[f64]) -> f64 {
    if row.is_empty() {
        return f64::NAN;
    }
    row.iter().sum::<f64>() / row.len() as f64
}

/// Standalone form of [`AccuracyMatrix::average_forgetting`].
pub fn average_forgetting(matrix: &AccuracyMatrix, k: usize) -> Result<f64> {
    matrix.average_forgetting(k)
}
