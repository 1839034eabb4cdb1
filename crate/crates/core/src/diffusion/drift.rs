use crate::error::{shape, Result};
use crate::numerics::{Scalar, Tensor};

/// Which quantity a [`DriftTensor`] holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriftKind {
    /// Exact drift of a behavior sequence.
    Z0,
    /// Forward-noised drift at step `r`.
    Noised(usize),
    /// Approximator output.
    Estimate,
}

/// `[n, d]` drift values. `carry` holds, for the last row only, the
/// rounding residual that makes `values + inputs` reproduce the original next
/// behavior bit-exactly; it is absent for noised or estimated drift.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftTensor<F: Scalar> {
    pub values: Tensor<F>,
    pub kind: DriftKind,
    carry: Option<Vec<F>>,
}

impl<F: Scalar> DriftTensor<F> {
    pub fn new(values: Tensor<F>, kind: DriftKind) -> Self {
        Self {
            values,
            kind,
            carry: None,
        }
    }
}

/// Adjacent differences of `x: [n + 1, d]`: row `j` is `x[j + 1] - x[j]`.
pub fn drift_prepare<F: Scalar>(x: &Tensor<F>) -> Result<DriftTensor<F>> {
    if x.ndim() != 2 || x.rows() < 2 {
        return Err(shape("drift_prepare", format!("need at least 2 rows, got {:?}", x.shape())));
    }
    let (rows, d) = (x.rows(), x.cols());
    let mut out = Vec::with_capacity((rows - 1) * d);
    for j in 0..rows - 1 {
        out.extend(x.row(j + 1).iter().zip(x.row(j)).map(|(&a, &b)| a - b));
    }
    let last = &out[(rows - 2) * d..];
    let carry = last
        .iter()
        .zip(x.row(rows - 1))
        .zip(x.row(rows - 2))
        .map(|((&s, &a), &b)| a - (s + b))
        .collect();
    Ok(DriftTensor {
        values: Tensor::new(&[rows - 1, d], out)?,
        kind: DriftKind::Z0,
        carry: Some(carry),
    })
}

/// Last row of `drift + x`, i.e. the predicted next behavior, as `[1, d]`.
pub fn drift_utilize<F: Scalar>(drift: &DriftTensor<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
    let values = &drift.values;
    if values.shape() != x.shape() || values.ndim() != 2 || values.rows() == 0 {
        return Err(shape(
            "drift_utilize",
            format!("drift {:?} vs inputs {:?}", values.shape(), x.shape()),
        ));
    }
    let last = values.rows() - 1;
    let mut row: Vec<F> = values.row(last).iter().zip(x.row(last)).map(|(&a, &b)| a + b).collect();
    if let Some(carry) = &drift.carry {
        for (v, &c) in row.iter_mut().zip(carry) {
            *v = *v + c;
        }
    }
    Tensor::new(&[1, values.cols()], row)
}

/// Cosine similarity of the flattened tensors; `None` when either norm is zero.
pub fn similarity<F: Scalar>(z0: &Tensor<F>, z0_hat: &Tensor<F>) -> Option<f64> {
    if z0.shape() != z0_hat.shape() {
        return None;
    }
    let (a, b) = (z0.to_f64_vec(), z0_hat.to_f64_vec());
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 || !(na * nb).is_finite() {
        return None;
    }
    Some(dot / (na * nb))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arithmetic() {
        let x = Tensor::<f64>::from_f64(&[3, 2], &[1., 2., 3., 5., 4., 9.]).unwrap();
        assert_eq!(drift_prepare(&x).unwrap().values.data(), &[2., 3., 1., 4.]);
        let c = Tensor::<f64>::full(&[4, 3], 7.0);
        assert!(drift_prepare(&c).unwrap().values.data().iter().all(|&v| v == 0.0));
        assert!(drift_prepare(&Tensor::<f64>::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn inverse_pair() {
        let x = Tensor::<f64>::from_f64(&[4, 2], &[0.1, -0.3, 0.7, 1.1, -2.5, 0.25, 3.3, 1e-3]).unwrap();
        let z0 = drift_prepare(&x).unwrap();
        let inputs = Tensor::new(&[3, 2], x.data()[..6].to_vec()).unwrap();
        let next = drift_utilize(&z0, &inputs).unwrap();
        assert_eq!(next.data(), x.row(3));
        // Uncompensated addition is off by an ulp here.
        let plain = drift_utilize(&DriftTensor::new(z0.values.clone(), DriftKind::Estimate), &inputs).unwrap();
        assert_ne!(plain.data(), x.row(3));
    }

    #[test]
    fn cosine() {
        let a = Tensor::<f64>::from_f64(&[1, 2], &[1., 0.]).unwrap();
        let b = Tensor::<f64>::from_f64(&[1, 2], &[0., 2.]).unwrap();
        assert_eq!(similarity(&a, &a), Some(1.0));
        assert_eq!(similarity(&a, &a.map(|v| -v)), Some(-1.0));
        assert_eq!(similarity(&a, &b), Some(0.0));
        assert_eq!(similarity(&a, &Tensor::zeros(&[1, 2])), None);
    }
}
