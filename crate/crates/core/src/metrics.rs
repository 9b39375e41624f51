//! Accuracy aggregation, backward transfer (BWT) and the forgetting
//! heatmap. BWT follows Eq. 3: after finishing a stream of A tasks,
//! average the change in accuracy on each earlier task relative to the
//! accuracy measured right after training on it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower-triangular partial accuracy matrix. `entry(a, b)` (0-based)
/// is the accuracy on task `b` after finishing training stage `a`,
/// defined only for `b <= a`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    n: usize,
    cells: Vec<Option<f64>>,
}

impl AccuracyMatrix {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            cells: vec![None; n * n],
        }
    }

    pub fn n_tasks(&self) -> usize {
        self.n
    }

    pub fn set(&mut self, after_stage: usize, task: usize, acc: f64) -> Result<()> {
        if after_stage >= self.n || task > after_stage {
            return Err(Error::Invalid(format!(
                "undefined region: entry ({after_stage}, {task}) of a {0}x{0} lower-triangular matrix",
                self.n
            )));
        }
        if !(0.0..=1.0).contains(&acc) && !(0.0..=100.0).contains(&acc) {
            return Err(Error::Invalid(format!("accuracy {acc} out of range")));
        }
        self.cells[after_stage * self.n + task] = Some(acc);
        Ok(())
    }

    pub fn get(&self, after_stage: usize, task: usize) -> Option<f64> {
        if after_stage >= self.n || task >= self.n {
            return None;
        }
        self.cells[after_stage * self.n + task]
    }

    fn require(&self, a: usize, b: usize) -> Result<f64> {
        self.get(a, b)
            .ok_or_else(|| Error::Invalid(format!("missing accuracy entry ({a}, {b})")))
    }
}

/// Eq. 3: (1/(A-1)) sum over a < A of R[A][a] - R[a][a]. Requires the
/// last row and the diagonal. Units follow the inputs (fractions or
/// percentage points).
pub fn bwt(r: &AccuracyMatrix) -> Result<f64> {
    let a_total = r.n_tasks();
    if a_total < 2 {
        return Err(Error::Invalid(
            "BWT needs at least two tasks in the stream".into(),
        ));
    }
    let mut sum = 0.0;
    for a in 0..a_total - 1 {
        sum += r.require(a_total - 1, a)? - r.require(a, a)?;
    }
    Ok(sum / (a_total - 1) as f64)
}

/// Fig. 8-style deltas: e[r][c] = R[r][c] - R[c][c] for r > c, zero on
/// the diagonal. Returned in the same lower-triangular layout.
pub fn heatmap_deltas(r: &AccuracyMatrix) -> Result<AccuracyMatrix> {
    let n = r.n_tasks();
    let mut out = AccuracyMatrix::new(n);
    for row in 0..n {
        for col in 0..=row {
            let v = if row == col {
                r.require(row, col)?;
                0.0
            } else {
                r.require(row, col)? - r.require(col, col)?
            };
            out.cells[row * n + col] = Some(v);
        }
    }
    Ok(out)
}

/// Mean and sample standard deviation across complete runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n_runs: usize,
    pub n_tasks: usize,
}

/// Collapses each run to its mean over tasks, then reports the mean
/// and sample std (n-1 denominator) across runs; std is 0 for one run.
pub fn aggregate(per_task: &[Vec<f64>]) -> Result<Aggregate> {
    if per_task.is_empty() || per_task.iter().any(|r| r.is_empty()) {
        return Err(Error::Invalid("aggregate needs nonempty runs".into()));
    }
    let run_means: Vec<f64> = per_task
        .iter()
        .map(|r| r.iter().sum::<f64>() / r.len() as f64)
        .collect();
    let n = run_means.len();
    let mean = run_means.iter().sum::<f64>() / n as f64;
    let std = if n == 1 {
        0.0
    } else {
        (run_means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Ok(Aggregate {
        mean,
        std,
        n_runs: n,
        n_tasks: per_task[0].len(),
    })
}

/// Difference of means; the baseline is the zero reference point.
pub fn relative_accuracy(a: &Aggregate, baseline: &Aggregate) -> f64 {
    a.mean - baseline.mean
}

/// Collapses a dataset-level matrix to domain level: entries within
/// one (stage domain, task domain) block are averaged. `domain_of[i]`
/// gives the domain index of dataset `i`; domain indices must appear
/// in contiguous ascending blocks matching the stream order.
pub fn group_by_domain(r: &AccuracyMatrix, domain_of: &[usize]) -> Result<AccuracyMatrix> {
    if domain_of.len() != r.n_tasks() {
        return Err(Error::Invalid("domain map length mismatch".into()));
    }
    let n_dom = match domain_of.iter().max() {
        Some(&m) => m + 1,
        None => return Err(Error::Invalid("empty matrix".into())),
    };
    for w in domain_of.windows(2) {
        if w[1] != w[0] && w[1] != w[0] + 1 {
            return Err(Error::Invalid(
                "domains must form contiguous ascending blocks".into(),
            ));
        }
    }
    let mut out = AccuracyMatrix::new(n_dom);
    // the stage for a domain is the last dataset stage in its block
    let mut last_stage = vec![0usize; n_dom];
    for (i, &d) in domain_of.iter().enumerate() {
        last_stage[d] = i;
    }
    for dr in 0..n_dom {
        for dc in 0..=dr {
            let stage = last_stage[dr];
            let mut vals = Vec::new();
            for (task, &d) in domain_of.iter().enumerate() {
                if d == dc {
                    vals.push(r.require(stage, task)?);
                }
            }
            out.cells[dr * n_dom + dc] = Some(vals.iter().sum::<f64>() / vals.len() as f64);
        }
    }
    Ok(out)
}
