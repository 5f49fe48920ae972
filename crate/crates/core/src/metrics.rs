//! Accuracy matrix, average accuracy and backward transfer, plus evaluation helpers.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Meta;
use crate::data::{argmax, Dataset};
use crate::error::{Error, Result};
use crate::network::{Network, TaskId};
use crate::tape::log_sum_exp;

const EVAL_BATCH: usize = 256;

/// Lower-triangular `K×K` matrix; `get(m, t)` is the accuracy (percent) on task
/// `t` after training task `m`, zero-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccMatrix {
    k: usize,
    entries: Vec<Vec<Option<f64>>>,
}

impl AccMatrix {
    pub fn new(k: usize) -> Self {
        AccMatrix {
            k,
            entries: (0..k).map(|m| vec![None; m + 1]).collect(),
        }
    }

    /// Builds a matrix from complete lower-triangular rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let mut a = AccMatrix::new(rows.len());
        for (m, row) in rows.iter().enumerate() {
            if row.len() != m + 1 {
                return Err(Error::contract(format!("row {m} has {} entries, expected {}", row.len(), m + 1)));
            }
            for (t, &v) in row.iter().enumerate() {
                a.set(m, t, v)?;
            }
        }
        Ok(a)
    }

    pub fn tasks(&self) -> usize {
        self.k
    }

    pub fn set(&mut self, m: usize, t: usize, value: f64) -> Result<()> {
        if m >= self.k || t > m {
            return Err(Error::contract(format!("entry ({m}, {t}) outside the lower triangle of a {0}×{0} matrix", self.k)));
        }
        if !(0.0..=100.0).contains(&value) {
            return Err(Error::contract(format!("accuracy {value} outside [0, 100]")));
        }
        self.entries[m][t] = Some(value);
        Ok(())
    }

    pub fn get(&self, m: usize, t: usize) -> Option<f64> {
        self.entries.get(m)?.get(t).copied().flatten()
    }

    pub fn row_complete(&self, m: usize) -> bool {
        self.entries.get(m).is_some_and(|r| r.iter().all(Option::is_some))
    }

    /// Number of leading complete rows.
    pub fn completed_rows(&self) -> usize {
        (0..self.k).take_while(|&m| self.row_complete(m)).count()
    }

    fn last_row(&self) -> Result<Vec<f64>> {
        if self.k == 0 || !self.row_complete(self.k - 1) {
            return Err(Error::contract("accuracy matrix has an incomplete final row"));
        }
        Ok(self.entries[self.k - 1].iter().map(|v| v.unwrap()).collect())
    }

    /// Mean of the final row.
    pub fn acc(&self) -> Result<f64> {
        let last = self.last_row()?;
        Ok(last.iter().sum::<f64>() / self.k as f64)
    }

    /// `(1/(K−1)) Σ_{t<K} (A_{K,t} − A_{t,t})`.
    pub fn bwt(&self) -> Result<f64> {
        if self.k < 2 {
            return Err(Error::contract("backward transfer needs at least two tasks"));
        }
        let last = self.last_row()?;
        let mut sum = 0.0;
        for (t, a_kt) in last.iter().enumerate().take(self.k - 1) {
            let a_tt = self
                .get(t, t)
                .ok_or_else(|| Error::contract(format!("diagonal entry {t} missing")))?;
            sum += a_kt - a_tt;
        }
        Ok(sum / (self.k - 1) as f64)
    }

    /// `after_task,task,accuracy` rows under a provenance comment.
    pub fn to_csv(&self, meta: &Meta) -> String {
        let mut s = provenance_line(meta);
        s.push_str("after_task,task,accuracy\n");
        for (m, row) in self.entries.iter().enumerate() {
            for (t, v) in row.iter().enumerate() {
                if let Some(v) = v {
                    let _ = writeln!(s, "{m},{t},{v}");
                }
            }
        }
        s
    }
}

/// First line of every CSV artifact.
pub fn provenance_line(meta: &Meta) -> String {
    format!("# config_hash={}, seed={}\n", meta.config_hash, meta.seed)
}

/// Task-incremental accuracy in percent, eval-mode batch norm.
pub fn accuracy(net: &Network, task: TaskId, data: &Dataset) -> Result<f64> {
    let (correct, _) = evaluate(net, task, data)?;
    Ok(100.0 * correct as f64 / data.len() as f64)
}

/// Mean cross-entropy, eval-mode batch norm.
pub fn task_loss(net: &Network, task: TaskId, data: &Dataset) -> Result<f64> {
    let (_, loss) = evaluate(net, task, data)?;
    Ok(loss)
}

/// Correct count and mean cross-entropy in one pass.
pub fn evaluate(net: &Network, task: TaskId, data: &Dataset) -> Result<(usize, f64)> {
    if data.is_empty() {
        return Err(Error::Data(format!("empty evaluation split for task {task}")));
    }
    let (mut correct, mut loss) = (0usize, 0.0);
    for idx in data.batches(EVAL_BATCH, None) {
        let (x, y) = data.select(&idx);
        let logits = net.predict(&x, task)?;
        let k = logits.cols();
        for (r, &label) in y.iter().enumerate() {
            let row = &logits.data()[r * k..(r + 1) * k];
            if argmax(row) == label {
                correct += 1;
            }
            loss += log_sum_exp(row) - row[label];
        }
    }
    Ok((correct, loss / data.len() as f64))
}
