//! Descriptive dataset-level labels: y = A(D).

use super::Task;
use crate::error::{Error, Result};
use crate::ndtensor::NdArray;
use crate::stats;

/// Computes the label of a descriptive task from the realized dataset.
///
/// median: per-column medians; correlation: Pearson r of the two columns;
/// winrate: fraction of rows where column 1 exceeds column 2;
/// ot1d: 1-Wasserstein distance between the two empirical marginals,
/// computed as the mean absolute difference of sorted columns.
pub fn functional_label(data: &NdArray, task: Task) -> Result<Vec<f64>> {
    let shape = data.shape();
    let (n, m) = (shape[0], shape[1]);
    let col = |c: usize| -> Vec<f64> { (0..n).map(|r| data.data()[r * m + c]).collect() };
    match task {
        Task::Median => Ok((0..m).map(|c| stats::median(&col(c))).collect()),
        Task::Correlation => {
            require_two_columns(m, "correlation")?;
            let (a, b) = (col(0), col(1));
            if stats::population_variance(&a) == 0.0 || stats::population_variance(&b) == 0.0 {
                return Err(Error::Spec("correlation of a constant column".into()));
            }
            Ok(vec![stats::pearson(&a, &b)])
        }
        Task::Winrate => {
            require_two_columns(m, "winrate")?;
            let wins = (0..n)
                .filter(|&r| data.data()[r * m] > data.data()[r * m + 1])
                .count();
            Ok(vec![wins as f64 / n as f64])
        }
        Task::Ot1d => {
            require_two_columns(m, "ot1d")?;
            let mut a = col(0);
            let mut b = col(1);
            a.sort_by(|x, y| x.partial_cmp(y).unwrap());
            b.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let cost: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64;
            Ok(vec![cost])
        }
        Task::Normality | Task::MutualInfo => Err(Error::Config(format!(
            "{task:?} labels come from the distribution spec, not the data"
        ))),
    }
}

fn require_two_columns(m: usize, what: &str) -> Result<()> {
    if m != 2 {
        Err(Error::Spec(format!("{what} requires m=2, got {m}")))
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_col(rows: &[[f64; 2]]) -> NdArray {
        NdArray::new(vec![rows.len(), 2], rows.concat()).unwrap()
    }

    #[test]
    fn identical_columns_give_degenerate_labels() {
        let d = two_col(&[[1.0, 1.0], [0.5, 0.5], [2.0, 2.0]]);
        assert_eq!(functional_label(&d, Task::Ot1d).unwrap(), vec![0.0]);
        assert_eq!(functional_label(&d, Task::Winrate).unwrap(), vec![0.0]);
        let r = functional_label(&d, Task::Correlation).unwrap()[0];
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn winrate_counts_first_column_wins() {
        let d = two_col(&[[1.0, 0.0], [0.0, 1.0], [2.0, 1.0]]);
        assert!((functional_label(&d, Task::Winrate).unwrap()[0] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ot1d_sorted_difference() {
        let d = two_col(&[[0.0, 1.0], [1.0, 2.0]]);
        assert!((functional_label(&d, Task::Ot1d).unwrap()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn median_even_and_odd() {
        let d = NdArray::new(vec![4, 1], vec![4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!(functional_label(&d, Task::Median).unwrap(), vec![2.5]);
        let d3 = NdArray::new(vec![3, 1], vec![9.0, 1.0, 5.0]).unwrap();
        assert_eq!(functional_label(&d3, Task::Median).unwrap(), vec![5.0]);
    }

    #[test]
    fn correlation_rejects_constant_column() {
        let d = two_col(&[[1.0, 3.0], [2.0, 3.0], [3.0, 3.0]]);
        assert!(functional_label(&d, Task::Correlation).is_err());
    }
}
