//! The global per-sample weight vector, read and written by batch index.

use std::io::Write;

use crate::error::{contract, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct WeightStore {
    values: Vec<f64>,
}

impl WeightStore {
    /// All ones.
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return contract("weight store needs at least one sample");
        }
        Ok(WeightStore { values: vec![1.0; n] })
    }

    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return contract("weights must be finite, nonnegative and nonempty");
        }
        Ok(WeightStore { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn reset(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 1.0);
    }

    fn check_indices(&self, indices: &[usize]) -> Result<()> {
        let mut seen = vec![false; self.values.len()];
        for &i in indices {
            if i >= self.values.len() {
                return contract(format!("index {i} out of range for {} weights", self.values.len()));
            }
            if std::mem::replace(&mut seen[i], true) {
                return contract(format!("duplicate index {i} in batch"));
            }
        }
        Ok(())
    }

    pub fn gather(&self, indices: &[usize]) -> Result<Vec<f64>> {
        self.check_indices(indices)?;
        Ok(indices.iter().map(|&i| self.values[i]).collect())
    }

    pub fn scatter(&mut self, indices: &[usize], new_values: &[f64]) -> Result<()> {
        if indices.len() != new_values.len() {
            return contract("scatter: index and value lengths differ");
        }
        if let Some(v) = new_values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return contract(format!("scatter: weight {v} is not a finite nonnegative number"));
        }
        self.check_indices(indices)?;
        for (&i, &v) in indices.iter().zip(new_values) {
            self.values[i] = v;
        }
        Ok(())
    }

    /// CSV snapshot with columns `index,weight,is_noisy`.
    pub fn write_csv<W: Write>(&self, out: W, noisy: &[bool]) -> Result<()> {
        if noisy.len() != self.values.len() {
            return contract("noise flags must cover every sample");
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["index", "weight", "is_noisy"])?;
        for (i, (v, n)) in self.values.iter().zip(noisy).enumerate() {
            w.write_record([i.to_string(), format!("{v:.17e}"), (*n as u8).to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}
