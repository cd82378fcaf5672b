//! Plain stochastic gradient descent.

use crate::error::{Error, Result};
use crate::numerics::tensor::ParameterSet;

/// Apply one SGD update `theta -= lr * grad` to every parameter, then clear
/// the gradients.
///
/// Every parameter must carry a gradient buffer; a missing one means the
/// caller forgot a backward pass (or a parameter was added after it), which
/// is an error rather than a silent no-op. Checked before any tensor is
/// touched so a failed call leaves the set unmodified.
pub fn sgd_step(params: &mut ParameterSet, lr: f64) -> Result<()> {
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::Argument(format!(
            "learning rate must be nonnegative and finite, got {lr}"
        )));
    }
    for (name, t) in params.iter() {
        match &t.grad {
            None => {
                return Err(Error::OptimizerState(format!(
                    "parameter {name:?} has no gradient"
                )))
            }
            Some(g) if g.len() != t.numel() => {
                return Err(Error::OptimizerState(format!(
                    "parameter {name:?} gradient length {} does not match {}",
                    g.len(),
                    t.numel()
                )))
            }
            Some(g) => {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NumericDomain(format!(
                        "parameter {name:?} has a non-finite gradient"
                    )));
                }
            }
        }
    }
    for (_, t) in params.iter_mut() {
        let g = t.grad.take().expect("validated above");
        for (x, gi) in t.data_mut().iter_mut().zip(&g) {
            *x -= lr * gi;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;

    #[test]
    fn update_moves_against_gradient() {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap())
            .unwrap();
        p.get_mut("w").unwrap().grad = Some(vec![0.5, -2.0]);
        sgd_step(&mut p, 0.1).unwrap();
        let w = p.get("w").unwrap().data();
        assert_eq!(w, &[1.0 - 0.05, -1.0 + 0.2]);
        assert!(p.get("w").unwrap().grad.is_none());
    }

    #[test]
    fn missing_gradient_fails_and_leaves_params_untouched() {
        let mut p = ParameterSet::new();
        p.insert("a", Tensor::new(vec![1], vec![3.0]).unwrap())
            .unwrap();
        p.insert("b", Tensor::new(vec![1], vec![4.0]).unwrap())
            .unwrap();
        p.get_mut("a").unwrap().grad = Some(vec![1.0]);
        let err = sgd_step(&mut p, 0.1);
        assert!(matches!(err, Err(Error::OptimizerState(_))));
        assert_eq!(p.get("a").unwrap().data(), &[3.0]);
    }

    #[test]
    fn rejects_bad_learning_rate() {
        let mut p = ParameterSet::new();
        assert!(sgd_step(&mut p, f64::NAN).is_err());
        assert!(sgd_step(&mut p, f64::INFINITY).is_err());
        assert!(sgd_step(&mut p, -0.1).is_err());
    }

    #[test]
    fn zero_rate_is_a_null_update() {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::new(vec![2], vec![0.25, -3.5]).unwrap())
            .unwrap();
        p.get_mut("w").unwrap().grad = Some(vec![11.0, -7.0]);
        sgd_step(&mut p, 0.0).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[0.25, -3.5]);
        assert!(p.get("w").unwrap().grad.is_none());
    }
}
