//! Accuracy matrix, average accuracy (ACC) and backward transfer (BWT).

use std::fmt::Write as _;

use serde::Serialize;

use crate::dsp::FeatureMatrix;
use crate::error::{input_err, Error, Result};
use crate::scalar::Scalar;

/// Anything that maps feature matrices to one logit row each.
pub trait LogitModel<T: Scalar> {
    fn predict_logits(&self, inputs: &[&FeatureMatrix<T>]) -> Result<Vec<Vec<T>>>;
}

impl<T: Scalar> LogitModel<T> for crate::model::TcResNet8<T> {
    fn predict_logits(&self, inputs: &[&FeatureMatrix<T>]) -> Result<Vec<Vec<T>>> {
        crate::model::TcResNet8::predict_logits(self, inputs)
    }
}

/// Index of the largest logit; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Counts examples whose argmax over the full output space equals the label.
pub fn count_correct<T: Scalar, M: LogitModel<T> + ?Sized>(
    model: &M,
    examples: &[(&FeatureMatrix<T>, usize)],
) -> Result<usize> {
    let inputs: Vec<&FeatureMatrix<T>> = examples.iter().map(|(f, _)| *f).collect();
    let logits = model.predict_logits(&inputs)?;
    Ok(logits.iter().zip(examples).filter(|(row, (_, y))| argmax(row) == *y).count())
}

/// Fraction of a task's validation examples classified correctly, with no
/// restriction of the output space to the task's classes.
pub fn evaluate_task_accuracy<T: Scalar, M: LogitModel<T> + ?Sized>(
    model: &M,
    validation: &[(&FeatureMatrix<T>, usize)],
) -> Result<f64> {
    if validation.is_empty() {
        return Err(input_err!("empty validation set"));
    }
    Ok(count_correct(model, validation)? as f64 / validation.len() as f64)
}

/// `R[t][i]`: accuracy on task `i` after training through task `t`
/// (zero-based), defined for `i ≤ t`.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    tasks: usize,
    cells: Vec<Option<f64>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        Self { tasks, cells: vec![None; tasks * tasks] }
    }

    /// Builds a matrix from full lower-triangular rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let mut m = Self::new(rows.len());
        for (t, row) in rows.iter().enumerate() {
            if row.len() != t + 1 {
                return Err(input_err!("row {t} has {} entries, expected {}", row.len(), t + 1));
            }
            for (i, &v) in row.iter().enumerate() {
                m.set(t, i, v)?;
            }
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn set(&mut self, after_task: usize, task: usize, acc: f64) -> Result<()> {
        if task > after_task || after_task >= self.tasks {
            return Err(input_err!("cell ({after_task}, {task}) outside the lower triangle of {}", self.tasks));
        }
        if !(0.0..=1.0).contains(&acc) {
            return Err(input_err!("accuracy {acc} outside [0, 1]"));
        }
        self.cells[after_task * self.tasks + task] = Some(acc);
        Ok(())
    }

    pub fn get(&self, after_task: usize, task: usize) -> Option<f64> {
        if after_task >= self.tasks || task >= self.tasks {
            return None;
        }
        self.cells[after_task * self.tasks + task]
    }

    pub fn row(&self, after_task: usize) -> &[Option<f64>] {
        &self.cells[after_task * self.tasks..(after_task + 1) * self.tasks]
    }

    /// Final-row accuracies, if every task has one.
    pub fn final_row(&self) -> Option<Vec<f64>> {
        if self.tasks == 0 {
            return None;
        }
        self.row(self.tasks - 1).iter().copied().collect()
    }

    /// CSV with a header row; rows are after-task indices (1-based), columns
    /// are task indices, undefined cells are empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("after_task");
        for i in 0..self.tasks {
            write!(s, ",task_{}", i + 1).unwrap();
        }
        s.push('\n');
        for t in 0..self.tasks {
            write!(s, "{}", t + 1).unwrap();
            for cell in self.row(t) {
                s.push(',');
                if let Some(v) = cell {
                    write!(s, "{v}").unwrap();
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Mean of the final row, uniform over tasks.
pub fn compute_acc(r: &AccuracyMatrix) -> Result<f64> {
    let row = r.final_row().ok_or_else(|| Error::UndefinedMetric("ACC needs a fully defined final row".into()))?;
    Ok(row.iter().sum::<f64>() / row.len() as f64)
}

/// `(1/(T−1))·Σ_{i<T} (R[T][i] − R[i][i])`.
pub fn compute_bwt(r: &AccuracyMatrix) -> Result<f64> {
    let t = r.tasks();
    if t < 2 {
        return Err(Error::UndefinedMetric("BWT needs at least two tasks".into()));
    }
    let mut sum = 0.0;
    for i in 0..t - 1 {
        let (last, diag) = r.get(t - 1, i).zip(r.get(i, i)).ok_or_else(|| {
            Error::UndefinedMetric(format!("BWT needs R[{t}][{}] and R[{}][{}]", i + 1, i + 1, i + 1))
        })?;
        sum += last - diag;
    }
    Ok(sum / (t - 1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub bwt: Option<f64>,
    /// Final accuracy pooled over all validation utterances.
    pub class_weighted_acc: f64,
    pub per_task_final: Vec<f64>,
    pub parameter_count: usize,
}

impl MetricsReport {
    pub fn from_matrix(r: &AccuracyMatrix, class_weighted_acc: f64, parameter_count: usize) -> Result<Self> {
        Ok(Self {
            acc: compute_acc(r)?,
            bwt: compute_bwt(r).ok(),
            class_weighted_acc,
            per_task_final: r.final_row().unwrap_or_default(),
            parameter_count,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn acc_examples() {
        let r = AccuracyMatrix::from_rows(&[vec![0.9], vec![0.8, 0.7]]).unwrap();
        assert!((compute_acc(&r).unwrap() - 0.75).abs() < 1e-12);
        let ones = AccuracyMatrix::from_rows(&[vec![1.0], vec![1.0, 1.0], vec![1.0; 3]]).unwrap();
        assert_eq!(compute_acc(&ones).unwrap(), 1.0);
        let single = AccuracyMatrix::from_rows(&[vec![0.9]]).unwrap();
        assert_eq!(compute_acc(&single).unwrap(), 0.9);
    }

    #[test]
    fn bwt_examples() {
        let r = AccuracyMatrix::from_rows(&[vec![0.9], vec![0.8, 0.95]]).unwrap();
        assert!((compute_bwt(&r).unwrap() + 0.1).abs() < 1e-12);
        let r = AccuracyMatrix::from_rows(&[vec![0.9], vec![0.85, 0.8], vec![0.6, 0.7, 0.7]]).unwrap();
        assert!((compute_bwt(&r).unwrap() + 0.2).abs() < 1e-12);
        let flat = AccuracyMatrix::from_rows(&[vec![0.5], vec![0.5, 0.6], vec![0.5, 0.6, 0.7]]).unwrap();
        assert_eq!(compute_bwt(&flat).unwrap(), 0.0);
        let single = AccuracyMatrix::from_rows(&[vec![0.9]]).unwrap();
        assert!(matches!(compute_bwt(&single), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn partial_matrix_has_acc_but_no_bwt() {
        let mut r = AccuracyMatrix::new(3);
        for (i, v) in [0.9, 0.8, 0.7].into_iter().enumerate() {
            r.set(2, i, v).unwrap();
        }
        assert!((compute_acc(&r).unwrap() - 0.8).abs() < 1e-12);
        assert!(compute_bwt(&r).is_err());
        let rep = MetricsReport::from_matrix(&r, 0.81, 10).unwrap();
        assert_eq!(rep.bwt, None);
        assert_eq!(r.to_csv(), "after_task,task_1,task_2,task_3\n1,,,\n2,,,\n3,0.9,0.8,0.7\n");
    }

    #[test]
    fn set_validates_cells() {
        let mut r = AccuracyMatrix::new(2);
        assert!(r.set(0, 1, 0.5).is_err());
        assert!(r.set(1, 0, 1.5).is_err());
        assert!(r.set(2, 0, 0.5).is_err());
    }

    #[test]
    fn csv_layout() {
        let r = AccuracyMatrix::from_rows(&[vec![1.0], vec![0.25, 0.5]]).unwrap();
        assert_eq!(r.to_csv(), "after_task,task_1,task_2\n1,1,\n2,0.25,0.5\n");
    }

    /// Predicts a fixed class for each input, keyed by the first feature value.
    struct Stub;

    impl LogitModel<f64> for Stub {
        fn predict_logits(&self, inputs: &[&FeatureMatrix<f64>]) -> Result<Vec<Vec<f64>>> {
            Ok(inputs
                .iter()
                .map(|f| {
                    let mut row = vec![0.0; 30];
                    row[f.values()[0] as usize] = 1.0;
                    row
                })
                .collect())
        }
    }

    struct Oracle;

    impl LogitModel<f64> for Oracle {
        fn predict_logits(&self, inputs: &[&FeatureMatrix<f64>]) -> Result<Vec<Vec<f64>>> {
            Ok(inputs
                .iter()
                .map(|f| {
                    let mut row = vec![f64::NEG_INFINITY; 30];
                    row[f.values()[1] as usize] = f64::INFINITY;
                    row
                })
                .collect())
        }
    }

    #[test]
    fn task_accuracy_enumeration() {
        // (predicted, truth): two hits out of four.
        let cases = [(3usize, 3usize), (4, 5), (5, 5), (29, 3)];
        let feats: Vec<FeatureMatrix<f64>> =
            cases.iter().map(|&(p, y)| FeatureMatrix::new(1, 2, vec![p as f64, y as f64]).unwrap()).collect();
        let val: Vec<(&FeatureMatrix<f64>, usize)> = feats.iter().zip(cases).map(|(f, (_, y))| (f, y)).collect();
        assert_eq!(evaluate_task_accuracy(&Stub, &val).unwrap(), 0.5);
        assert_eq!(evaluate_task_accuracy(&Oracle, &val).unwrap(), 1.0);
        assert!(evaluate_task_accuracy(&Stub, &[]).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_tie() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 2.0]), 1);
    }

    proptest! {
        #[test]
        fn acc_bwt_ranges_and_forgetting_sign(
            t in 1usize..7,
            seed_vals in prop::collection::vec(0.0f64..=1.0, 64),
            drops in prop::collection::vec(0.0f64..=1.0, 8),
        ) {
            // Diagonals arbitrary; final row never exceeds its diagonal.
            let mut rows: Vec<Vec<f64>> = (0..t).map(|r| seed_vals[r * 7 % 64..][..r + 1].to_vec()).collect();
            for i in 0..t.saturating_sub(1) {
                rows[t - 1][i] = rows[i][i] * (1.0 - drops[i]);
            }
            let r = AccuracyMatrix::from_rows(&rows).unwrap();
            let acc = compute_acc(&r).unwrap();
            prop_assert!((0.0..=1.0).contains(&acc));
            if t >= 2 {
                let bwt = compute_bwt(&r).unwrap();
                prop_assert!((-1.0..=0.0).contains(&bwt));
            }
        }

        #[test]
        fn acc_invariant_to_permuting_earlier_tasks(vals in prop::collection::vec(0.0f64..=1.0, 4)) {
            let mut r1 = AccuracyMatrix::new(4);
            let mut r2 = AccuracyMatrix::new(4);
            let perm = [2usize, 0, 1, 3];
            for i in 0..4 {
                r1.set(3, i, vals[i]).unwrap();
                r2.set(3, i, vals[perm[i]]).unwrap();
            }
            prop_assert!((compute_acc(&r1).unwrap() - compute_acc(&r2).unwrap()).abs() < 1e-12);
        }
    }
}
