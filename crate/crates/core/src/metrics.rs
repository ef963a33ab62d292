//! Accuracy-matrix evaluation with test-time adaptation, and Avg/BWT/FWT.

use mocl_autodiff::{Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::seeding::{derive_indexed, SeedTag};
use crate::streams::{sample_from_pool, Task};
use crate::trainer::{Learner, Snapshot};

/// `R[i][j]`: accuracy on task j after training through task i.
#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyMatrix {
    pub values: Vec<Vec<Real>>,
}

impl AccuracyMatrix {
    pub fn new(values: Vec<Vec<Real>>) -> Result<Self> {
        let m = values.len();
        if m == 0 || values.iter().any(|r| r.len() != m) {
            return Err(CoreError::Precondition(
                "accuracy matrix must be square and nonempty".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn size(&self) -> usize {
        self.values.len()
    }

    pub fn diagonal(&self) -> Vec<Real> {
        (0..self.size()).map(|i| self.values[i][i]).collect()
    }

    pub fn mean_diagonal(&self) -> Real {
        self.diagonal().iter().sum::<Real>() / self.size() as Real
    }

    /// Mean of every entry off the diagonal; `NaN` for 1×1.
    pub fn mean_off_diagonal(&self) -> Real {
        let m = self.size();
        let total: Real = (0..m)
            .flat_map(|i| (0..m).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| self.values[i][j])
            .sum();
        total / (m * m - m) as Real
    }

    /// Rows as comma-separated lines, full round-trip precision.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in &self.values {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }
}

pub fn avg_accuracy(r: &AccuracyMatrix) -> Real {
    let last = &r.values[r.size() - 1];
    last.iter().sum::<Real>() / last.len() as Real
}

fn need_two(r: &AccuracyMatrix, metric: &str) -> Result<usize> {
    let m = r.size();
    if m < 2 {
        return Err(CoreError::Precondition(format!(
            "{metric} needs at least two tasks, got {m}"
        )));
    }
    Ok(m)
}

/// `(1/(M−1)) Σ_{j<M−1} (R[M−1][j] − R[j][j])`
pub fn bwt(r: &AccuracyMatrix) -> Result<Real> {
    let m = need_two(r, "BWT")?;
    let s: Real = (0..m - 1)
        .map(|j| r.values[m - 1][j] - r.values[j][j])
        .sum();
    Ok(s / (m - 1) as Real)
}

/// `(1/(M−1)) Σ_{j≥1} R[j−1][j]`, without baseline subtraction.
pub fn fwt(r: &AccuracyMatrix) -> Result<Real> {
    let m = need_two(r, "FWT")?;
    let s: Real = (1..m).map(|j| r.values[j - 1][j]).sum();
    Ok(s / (m - 1) as Real)
}

/// Number of rows whose arg-max (first on ties) equals the label.
pub fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let n = logits.shape()[1];
    logits
        .data()
        .chunks_exact(n)
        .zip(labels)
        .filter(|(row, &y)| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best == y
        })
        .count()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSettings {
    pub k: usize,
    pub q_test: usize,
    pub eval_cap: usize,
    /// Master seed; cell (i, j) draws its test support from the eval stream keyed by j.
    pub seed: u64,
}

/// Accuracy of one snapshot on one task.
pub fn evaluate_cell(
    learner: &Learner,
    snapshot: &Snapshot,
    task: &Task,
    settings: &EvalSettings,
) -> Result<Real> {
    let n = task.n_classes();
    let min_class = task
        .class_map
        .iter()
        .map(|&c| task.test_pool.iter().filter(|e| e.label == c).count())
        .min()
        .unwrap_or(0);
    let per_class = min_class.saturating_sub(settings.k);
    let query = settings.eval_cap.min(per_class * n);
    if query < n {
        return Err(CoreError::InsufficientData(format!(
            "task {} test pool: {min_class} examples in its smallest class cannot hold K={} support plus {n} queries",
            task.index, settings.k
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_indexed(
        settings.seed,
        SeedTag::Eval,
        task.index as u64,
    ));
    let episode = sample_from_pool(task, &task.test_pool, settings.k, query, &mut rng)?;
    let adapted = learner.adapt_for_inference(snapshot, &episode, settings.q_test)?;
    let logits = learner.logits(&adapted, &episode.query_x)?;
    Ok(count_correct(&logits, &episode.query_y) as Real / episode.query_y.len() as Real)
}

pub fn evaluate_matrix(
    learner: &Learner,
    snapshots: &[Snapshot],
    tasks: &[Task],
    settings: &EvalSettings,
) -> Result<AccuracyMatrix> {
    if snapshots.len() != tasks.len() {
        return Err(CoreError::Precondition(format!(
            "{} snapshots for {} tasks",
            snapshots.len(),
            tasks.len()
        )));
    }
    let values = snapshots
        .iter()
        .map(|s| {
            tasks
                .iter()
                .map(|t| evaluate_cell(learner, s, t, settings))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    AccuracyMatrix::new(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_takes_first_on_ties() {
        let logits = Tensor::new(vec![2, 2], vec![1.0, 1.0, 0.0, 2.0]).unwrap();
        assert_eq!(count_correct(&logits, &[0, 1]), 2);
        assert_eq!(count_correct(&logits, &[1, 0]), 0);
    }

    #[test]
    fn single_task_metrics() {
        let r = AccuracyMatrix::new(vec![vec![0.7]]).unwrap();
        assert_eq!(avg_accuracy(&r), 0.7);
        assert!(bwt(&r).is_err() && fwt(&r).is_err());
    }
}
