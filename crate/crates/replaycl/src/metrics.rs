//! Accuracy-matrix bookkeeping (ACC, BWT), parameter and memory
//! accounting, and CSV/JSON serialization of results.

use serde::{Deserialize, Serialize};

use crate::continual::LearnerState;
use crate::error::{Error, Result};
use crate::nn::{ParamBundle, Scalar};

/// Lower-triangular accuracy matrix: `R[j][i]` is the test accuracy (in
/// percent) on task `i` after training through task `j`. Both indices are
/// 1-based; cells above the diagonal are undefined.
#[derive(Debug, Clone, PartialEq)]
pub struct AccMatrix {
    t: usize,
    cells: Vec<Option<f64>>,
}

impl AccMatrix {
    pub fn new(t: usize) -> Self {
        Self {
            t,
            cells: vec![None; t * t],
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.t
    }

    fn idx(&self, j: usize, i: usize) -> Result<usize> {
        if j < 1 || j > self.t || i < 1 || i > j {
            return Err(Error::Metric(format!(
                "cell ({j}, {i}) outside the lower triangle of a {0}x{0} matrix",
                self.t
            )));
        }
        Ok((j - 1) * self.t + (i - 1))
    }

    pub fn set(&mut self, j: usize, i: usize, value: f64) -> Result<()> {
        if !(0.0..=100.0).contains(&value) {
            return Err(Error::Metric(format!(
                "accuracy {value} outside [0, 100] at ({j}, {i})"
            )));
        }
        let k = self.idx(j, i)?;
        self.cells[k] = Some(value);
        Ok(())
    }

    pub fn get(&self, j: usize, i: usize) -> Option<f64> {
        self.idx(j, i).ok().and_then(|k| self.cells[k])
    }

    fn require(&self, j: usize, i: usize) -> Result<f64> {
        self.get(j, i)
            .ok_or_else(|| Error::Metric(format!("cell ({j}, {i}) is undefined")))
    }

    /// Mean of the just-after-training diagonal, `(1/T) Σ_t R[t][t]`.
    pub fn acc(&self) -> Result<f64> {
        let mut sum = 0.0;
        for t in 1..=self.t {
            sum += self.require(t, t)?;
        }
        Ok(sum / self.t as f64)
    }

    /// Mean of the final row, `(1/T) Σ_t R[T][t]` — the accuracy most of
    /// the literature reports. Kept separate from [`AccMatrix::acc`].
    pub fn acc_final(&self) -> Result<f64> {
        let mut sum = 0.0;
        for i in 1..=self.t {
            sum += self.require(self.t, i)?;
        }
        Ok(sum / self.t as f64)
    }

    /// Backward transfer, `(1/(T−1)) Σ_{t<T} (R[T][t] − R[t][t])`.
    /// Negative values indicate forgetting.
    pub fn bwt(&self) -> Result<f64> {
        if self.t < 2 {
            return Err(Error::Metric(
                "backward transfer needs at least 2 tasks".into(),
            ));
        }
        let mut sum = 0.0;
        for t in 1..self.t {
            sum += self.require(self.t, t)? - self.require(t, t)?;
        }
        Ok(sum / (self.t - 1) as f64)
    }

    /// CSV with one row per `j`, one column per `i`, blank for undefined
    /// cells. Values use the shortest round-trippable representation.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for j in 1..=self.t {
            let row: Vec<String> = (1..=self.t)
                .map(|i| match self.get(j, i) {
                    Some(v) => format!("{v}"),
                    None => String::new(),
                })
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let t = rows.len();
        let mut m = Self::new(t);
        for (j0, row) in rows.iter().enumerate() {
            let fields: Vec<&str> = row.split(',').collect();
            if fields.len() != t {
                return Err(Error::Metric(format!(
                    "row {} has {} fields, expected {t}",
                    j0 + 1,
                    fields.len()
                )));
            }
            for (i0, f) in fields.iter().enumerate() {
                let f = f.trim();
                if f.is_empty() {
                    continue;
                }
                let v: f64 = f
                    .parse()
                    .map_err(|e| Error::Metric(format!("bad cell at ({}, {}): {e}", j0 + 1, i0 + 1)))?;
                m.set(j0 + 1, i0 + 1, v)?;
            }
        }
        Ok(m)
    }
}

/// Exact parameter counts by module, plus float32 memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub shared: usize,
    /// VAE parameter count of each private module, in task order.
    pub private_vaes: Vec<usize>,
    /// Classifier-head parameter count of each private module.
    pub heads: Vec<usize>,
    pub total: usize,
    /// Megabytes at 4 bytes per parameter.
    pub mb: f64,
}

pub fn count_params<S: Scalar>(state: &LearnerState<S>) -> ParamBreakdown {
    let shared = state.shared.param_count();
    let private_vaes: Vec<usize> = state.privates.iter().map(|m| m.vae.param_count()).collect();
    let heads: Vec<usize> = state.privates.iter().map(|m| m.head.param_count()).collect();
    let total = shared + private_vaes.iter().sum::<usize>() + heads.iter().sum::<usize>();
    ParamBreakdown {
        shared,
        private_vaes,
        heads,
        total,
        mb: total as f64 * 4.0 / (1 << 20) as f64,
    }
}
