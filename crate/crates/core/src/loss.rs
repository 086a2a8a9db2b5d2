//! Loss heads. These sit outside the layer chain and are never compressed;
//! the gradient they hand back is the exact full-precision one.

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Training target: dense values for regression, class indices otherwise.
#[derive(Debug, Clone)]
pub enum Target {
    Values(Tensor),
    Classes(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    /// Mean over all output entries of the squared residual.
    MeanSquared,
    /// Row-wise softmax followed by mean negative log likelihood.
    SoftmaxCrossEntropy,
}

impl Loss {
    pub fn value(&self, pred: &Tensor, target: &Target) -> Result<f64> {
        match (self, target) {
            (Loss::MeanSquared, Target::Values(t)) => {
                check_same(pred, t)?;
                let sum: f64 = pred
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(&p, &y)| {
                        let d = f64::from(p) - f64::from(y);
                        d * d
                    })
                    .sum();
                Ok(sum / pred.len() as f64)
            }
            (Loss::SoftmaxCrossEntropy, Target::Classes(ys)) => {
                let (n, k) = check_logits(pred, ys)?;
                let mut total = 0.0f64;
                for s in 0..n {
                    let row = &pred.data()[s * k..(s + 1) * k];
                    let lse = log_sum_exp(row);
                    total += lse - f64::from(row[ys[s]]);
                }
                Ok(total / n as f64)
            }
            _ => Err(Error::BadArgument {
                what: "target",
                detail: "target kind does not match the loss".into(),
            }),
        }
    }

    pub fn grad(&self, pred: &Tensor, target: &Target) -> Result<Tensor> {
        match (self, target) {
            (Loss::MeanSquared, Target::Values(t)) => {
                check_same(pred, t)?;
                let scale = 2.0 / pred.len() as f32;
                let g = pred.data().iter().zip(t.data()).map(|(&p, &y)| (p - y) * scale).collect();
                Tensor::new(pred.shape().to_vec(), g)
            }
            (Loss::SoftmaxCrossEntropy, Target::Classes(ys)) => {
                let (n, k) = check_logits(pred, ys)?;
                let mut g = vec![0.0f32; n * k];
                let inv = 1.0 / n as f32;
                for s in 0..n {
                    let row = &pred.data()[s * k..(s + 1) * k];
                    let lse = log_sum_exp(row);
                    for j in 0..k {
                        let p = (f64::from(row[j]) - lse).exp() as f32;
                        g[s * k + j] = (p - f32::from(u8::from(j == ys[s]))) * inv;
                    }
                }
                Tensor::new(pred.shape().to_vec(), g)
            }
            _ => Err(Error::BadArgument {
                what: "target",
                detail: "target kind does not match the loss".into(),
            }),
        }
    }
}

fn check_same(pred: &Tensor, t: &Tensor) -> Result<()> {
    if pred.shape() != t.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", pred.shape()),
            got: format!("{:?}", t.shape()),
        });
    }
    if pred.is_empty() {
        return Err(Error::ShapeMismatch { expected: "non-empty output".into(), got: "[]".into() });
    }
    Ok(())
}

fn check_logits(pred: &Tensor, ys: &[usize]) -> Result<(usize, usize)> {
    if pred.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            expected: "[N, classes] logits".into(),
            got: format!("{:?}", pred.shape()),
        });
    }
    let (n, k) = (pred.shape()[0], pred.shape()[1]);
    if n == 0 || k == 0 || ys.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} labels for {n}x{k} logits"),
            got: format!("{} labels", ys.len()),
        });
    }
    if let Some(&bad) = ys.iter().find(|&&y| y >= k) {
        return Err(Error::BadArgument { what: "labels", detail: format!("class {bad} out of {k}") });
    }
    Ok((n, k))
}

fn log_sum_exp(row: &[f32]) -> f64 {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let s: f64 = row.iter().map(|&v| f64::from(v - m).exp()).sum();
    f64::from(m) + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_squared_on_scalars() {
        let p = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        let t = Target::Values(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        assert_eq!(Loss::MeanSquared.value(&p, &t).unwrap(), 4.0);
        assert_eq!(Loss::MeanSquared.grad(&p, &t).unwrap().data(), &[4.0]);
    }

    #[test]
    fn cross_entropy_prefers_correct_class() {
        let p = Tensor::new(vec![1, 2], vec![10.0, -10.0]).unwrap();
        let good = Loss::SoftmaxCrossEntropy.value(&p, &Target::Classes(vec![0])).unwrap();
        let bad = Loss::SoftmaxCrossEntropy.value(&p, &Target::Classes(vec![1])).unwrap();
        assert!(good < 1e-6, "{good}");
        assert!(bad > 19.0, "{bad}");
    }

    #[test]
    fn cross_entropy_grad_rows_sum_to_zero() {
        let p = Tensor::new(vec![2, 3], vec![0.3, -0.2, 1.1, 0.0, 0.5, -0.9]).unwrap();
        let g = Loss::SoftmaxCrossEntropy.grad(&p, &Target::Classes(vec![2, 1])).unwrap();
        for s in 0..2 {
            let row: f64 = g.data()[s * 3..(s + 1) * 3].iter().map(|&v| f64::from(v)).sum();
            assert!(row.abs() < 1e-6);
        }
    }

    #[test]
    fn big_logits_stay_finite() {
        let p = Tensor::new(vec![1, 2], vec![400.0, -400.0]).unwrap();
        let v = Loss::SoftmaxCrossEntropy.value(&p, &Target::Classes(vec![1])).unwrap();
        assert!(v.is_finite() && v > 700.0, "{v}");
        let g = Loss::SoftmaxCrossEntropy.grad(&p, &Target::Classes(vec![1])).unwrap();
        assert!(g.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let p = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert!(Loss::SoftmaxCrossEntropy.value(&p, &Target::Classes(vec![2])).is_err());
    }
}
