//! Classification accuracy.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fraction of rows whose first-maximum column equals the label.
pub fn accuracy(preds: &Tensor, labels: &[usize]) -> Result<f64> {
    if preds.rank() != 2 {
        return Err(Error::dim("accuracy", preds.shape(), &[labels.len(), 0]));
    }
    if preds.rows() != labels.len() {
        return Err(Error::Contract(format!(
            "accuracy: {} prediction rows but {} labels",
            preds.rows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Contract("accuracy: empty batch".into()));
    }
    let correct = preds
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn preds(rows: &[[f64; 3]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn reference_values() {
        let p = preds(&[[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8], [0.8, 0.1, 0.1]]);
        assert_eq!(accuracy(&p, &[0, 1, 2, 1]).unwrap(), 0.75);
        assert_eq!(accuracy(&p, &[0, 1, 2, 0]).unwrap(), 1.0);
    }

    #[test]
    fn uniform_rows_pick_class_zero() {
        let p = preds(&[[1.0 / 3.0; 3]; 4]);
        assert_eq!(accuracy(&p, &[0; 4]).unwrap(), 1.0);
    }

    #[test]
    fn length_mismatch_is_contract_error() {
        let p = preds(&[[1.0, 0.0, 0.0]]);
        assert!(matches!(accuracy(&p, &[0, 1]), Err(Error::Contract(_))));
    }
}
