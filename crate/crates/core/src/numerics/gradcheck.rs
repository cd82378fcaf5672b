//! Finite-difference verification of analytic gradients.
//!
//! [`grad_check`] perturbs every parameter element with central differences
//! and compares against the gradients the tape produced. It also evaluates
//! the loss twice at the unperturbed point and demands bitwise equality, so
//! any hidden nondeterminism in a model closure is caught here rather than in
//! a flaky tolerance failure later.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::tensor::{ParameterSet, Tensor};
use crate::numerics::Tape;

/// Worst relative error for one parameter tensor.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: String,
    pub max_rel_err: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Outcome of a full gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckResult {
    pub reports: Vec<GradReport>,
    pub max_rel_err: f64,
}

impl GradCheckResult {
    pub fn worst(&self) -> Option<&GradReport> {
        self.reports
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Check analytic gradients of `loss_fn` against central finite differences.
///
/// `loss_fn` must build the loss on the provided tape from the current
/// parameter values and return the loss handle; it is called many times, once
/// per perturbed element plus two baseline evaluations.
pub fn grad_check<F>(params: &mut ParameterSet, eps: f64, mut loss_fn: F) -> Result<GradCheckResult>
where
    F: FnMut(&mut Tape, &ParameterSet) -> Result<crate::numerics::Value>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Argument(format!(
            "grad_check step {eps:e} outside [1e-6, 1e-3]"
        )));
    }

    let eval = |params: &ParameterSet,
                loss_fn: &mut F|
     -> Result<(f64, Tape, crate::numerics::Value)> {
        let mut tape = Tape::new();
        let loss = loss_fn(&mut tape, params)?;
        if tape.value(loss).len() != 1 {
            return Err(Error::Dimension("grad_check loss must be scalar".into()));
        }
        let l = tape.value(loss)[0];
        if !l.is_finite() {
            return Err(Error::NumericDomain(format!(
                "grad_check loss is non-finite: {l}"
            )));
        }
        Ok((l, tape, loss))
    };

    // Baseline pass with analytic gradients.
    params.zero_grads();
    let (l0, mut tape, loss) = eval(params, &mut loss_fn)?;
    tape.backward(loss)?;
    tape.write_grads(params)?;

    // Determinism probe: identical inputs must give the identical loss bits.
    let (l1, _, _) = eval(params, &mut loss_fn)?;
    if l0.to_bits() != l1.to_bits() {
        return Err(Error::Determinism(format!(
            "loss not reproducible at fixed parameters: {l0:?} vs {l1:?}"
        )));
    }

    let analytic: Vec<(String, Vec<f64>)> = params
        .iter()
        .map(|(name, t)| {
            let g = t
                .grad
                .clone()
                .ok_or_else(|| Error::Argument(format!("no gradient for {name:?}")))?;
            Ok((name.clone(), g))
        })
        .collect::<Result<_>>()?;

    let names: Vec<String> = params.names();
    let mut reports = Vec::new();
    let mut global_max = 0.0_f64;

    for (name, grads) in names.iter().zip(analytic.iter().map(|(_, g)| g)) {
        let numel = params.get(name).expect("name from this set").numel();
        let mut worst = GradReport {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..numel {
            let orig = params.get(name).expect("present").data()[i];
            params.get_mut(name).expect("present").data_mut()[i] = orig + eps;
            let (lp, _, _) = eval(params, &mut loss_fn)?;
            params.get_mut(name).expect("present").data_mut()[i] = orig - eps;
            let (lm, _, _) = eval(params, &mut loss_fn)?;
            params.get_mut(name).expect("present").data_mut()[i] = orig;

            let numeric = (lp - lm) / (2.0 * eps);
            let a = grads[i];
            let err = rel_err(a, numeric);
            if err > worst.max_rel_err {
                worst = GradReport {
                    name: name.clone(),
                    max_rel_err: err,
                    worst_index: i,
                    analytic: a,
                    numeric,
                };
            }
        }
        global_max = global_max.max(worst.max_rel_err);
        reports.push(worst);
    }

    Ok(GradCheckResult {
        reports,
        max_rel_err: global_max,
    })
}

/// Result line of one primitive's gradient check.
#[derive(Debug, Clone)]
pub struct PrimitiveCheck {
    pub op: &'static str,
    pub max_rel_err: f64,
}

/// Gradient-check every differentiable primitive at randomized inputs.
///
/// Each case builds a small graph whose loss funnels the op's output through
/// reductions with non-uniform weights, so gradients are exercised at every
/// output position. Returns one line per op with its worst relative error.
pub fn primitive_grad_suite(seed: u64) -> Result<Vec<PrimitiveCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = 1e-5;
    let mut out = Vec::new();

    // Non-uniform weight matrix so d(loss)/d(out) varies by position.
    let weight = |tape: &mut Tape, shape: Vec<usize>| {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|i| 0.3 + 0.1 * i as f64).collect();
        tape.constant(&Tensor::new(shape, data).expect("static shape"))
    };

    let mut check = |op: &'static str,
                     params: &mut ParameterSet,
                     f: &mut dyn FnMut(&mut Tape, &ParameterSet) -> Result<crate::numerics::Value>|
     -> Result<()> {
        let r = grad_check(params, eps, f)?;
        out.push(PrimitiveCheck {
            op,
            max_rel_err: r.max_rel_err,
        });
        Ok(())
    };

    // add
    let mut p = ParameterSet::new();
    p.insert("a", Tensor::randn(vec![3, 4], 0.8, &mut rng))?;
    p.insert("b", Tensor::randn(vec![3, 4], 0.8, &mut rng))?;
    check("add", &mut p, &mut |tape, params| {
        let a = tape.param("a", params.get("a").expect("set above"))?;
        let b = tape.param("b", params.get("b").expect("set above"))?;
        let c = tape.add(a, b)?;
        let w = weight(tape, vec![3, 4]);
        let m = tape.mul(c, w)?;
        Ok(tape.sum(m))
    })?;

    // mul
    let mut p = ParameterSet::new();
    p.insert("a", Tensor::randn(vec![2, 5], 0.7, &mut rng))?;
    p.insert("b", Tensor::randn(vec![2, 5], 0.7, &mut rng))?;
    check("mul", &mut p, &mut |tape, params| {
        let a = tape.param("a", params.get("a").expect("set above"))?;
        let b = tape.param("b", params.get("b").expect("set above"))?;
        let c = tape.mul(a, b)?;
        Ok(tape.sum(c))
    })?;

    // scale
    let mut p = ParameterSet::new();
    p.insert("a", Tensor::randn(vec![4, 3], 0.9, &mut rng))?;
    check("scale", &mut p, &mut |tape, params| {
        let a = tape.param("a", params.get("a").expect("set above"))?;
        let c = tape.scale(a, -1.7);
        let w = weight(tape, vec![4, 3]);
        let m = tape.mul(c, w)?;
        Ok(tape.sum(m))
    })?;

    // scalar_mul
    let mut p = ParameterSet::new();
    p.insert("s", Tensor::randn(vec![1], 0.5, &mut rng))?;
    p.insert("a", Tensor::randn(vec![3, 3], 0.8, &mut rng))?;
    check("scalar_mul", &mut p, &mut |tape, params| {
        let s = tape.param("s", params.get("s").expect("set above"))?;
        let a = tape.param("a", params.get("a").expect("set above"))?;
        let c = tape.scalar_mul(s, a)?;
        let w = weight(tape, vec![3, 3]);
        let m = tape.mul(c, w)?;
        Ok(tape.sum(m))
    })?;

    // exp
    let mut p = ParameterSet::new();
    p.insert("a", Tensor::randn(vec![2, 3], 0.5, &mut rng))?;
    check("exp", &mut p, &mut |tape, params| {
        let a = tape.param("a", params.get("a").expect("set above"))?;
        let c = tape.exp(a);
        let w = weight(tape, vec![2, 3]);
        let m = tape.mul(c, w)?;
        Ok(tape.sum(m))
    })?;

    // gelu
    let mut p = ParameterSet::new();
    p.insert("a", Tensor::randn(vec![3, 4], 1.2, &mut rng))?;
    check("gelu", &mut p, &mut |tape, params| {
        let a = tape.param("a", params.get("a").expect("set above"))?;
        let c = tape.gelu(a);
        let w = weight(tape, vec![3, 4]);
        let m = tape.mul(c, w)?;
        Ok(tape.sum(m))
    })?;

    // matmul
    let mut p = ParameterSet::new();
    p.insert("a", Tensor::randn(vec![3, 4], 0.6, &mut rng))?;
    p.insert("b", Tensor::randn(vec![4, 2], 0.6, &mut rng))?;
    check("matmul", &mut p, &mut |tape, params| {
        let a = tape.param("a", params.get("a").expect("set above"))?;
        let b = tape.param("b", params.get("b").expect("set above"))?;
        let c = tape.matmul(a, b)?;
        let w = weight(tape, vec![3, 2]);
        let m = tape.mul(c, w)?;
        Ok(tape.sum(m))
    })?;

    // transpose
    let mut p = ParameterSet::new();
    p.insert("a", Tensor::randn(vec![2, 4], 0.8, &mut rng))?;
    check("transpose", &mut p, &mut |tape, params| {
        let a = tape.param("a", params.get("a").expect("set above"))?;
        let c = tape.transpose(a)?;
        let w = weight(tape, vec![4, 2]);
        let m = tape.mul(c, w)?;
        Ok(tape.sum(m))
    })?;

    // add_row_broadcast
    let mut p = ParameterSet::new();
    p.insert("m", Tensor::randn(vec![3, 4], 0.8, &mut rng))?;
    p.insert("b", Tensor::randn(vec![4], 0.8, &mut rng))?;
    check("add_row_broadcast", &mut p, &mut |tape, params| {
        let m = tape.param("m", params.get("m").expect("set above"))?;
        let b = tape.param("b", params.get("b").expect("set above"))?;
        let c = tape.add_row_broadcast(m, b)?;
        let w = weight(tape, vec![3, 4]);
        let x = tape.mul(c, w)?;
        Ok(tape.sum(x))
    })?;

    // layer_norm_rows
    let mut p = ParameterSet::new();
    p.insert("x", Tensor::randn(vec![3, 5], 1.0, &mut rng))?;
    p.insert("g", Tensor::randn(vec![5], 0.4, &mut rng))?;
    p.insert("b", Tensor::randn(vec![5], 0.4, &mut rng))?;
    check("layer_norm_rows", &mut p, &mut |tape, params| {
        let x = tape.param("x", params.get("x").expect("set above"))?;
        let g = tape.param("g", params.get("g").expect("set above"))?;
        let b = tape.param("b", params.get("b").expect("set above"))?;
        let c = tape.layer_norm_rows(x, g, b)?;
        let w = weight(tape, vec![3, 5]);
        let m = tape.mul(c, w)?;
        Ok(tape.sum(m))
    })?;

    // softmax_with_bias
    let mut p = ParameterSet::new();
    p.insert("s", Tensor::randn(vec![4, 4], 0.9, &mut rng))?;
    p.insert("m", Tensor::randn(vec![4, 4], 0.9, &mut rng))?;
    check("softmax_with_bias", &mut p, &mut |tape, params| {
        let s = tape.param("s", params.get("s").expect("set above"))?;
        let m = tape.param("m", params.get("m").expect("set above"))?;
        let c = tape.softmax_with_bias(s, m, 2.0_f64.sqrt())?;
        let w = weight(tape, vec![4, 4]);
        let x = tape.mul(c, w)?;
        Ok(tape.sum(x))
    })?;

    // softmax_rows
    let mut p = ParameterSet::new();
    p.insert("s", Tensor::randn(vec![3, 4], 0.9, &mut rng))?;
    check("softmax_rows", &mut p, &mut |tape, params| {
        let s = tape.param("s", params.get("s").expect("set above"))?;
        let c = tape.softmax_rows(s, 1.3)?;
        let w = weight(tape, vec![3, 4]);
        let x = tape.mul(c, w)?;
        Ok(tape.sum(x))
    })?;

    // cross_entropy through softmax
    let mut p = ParameterSet::new();
    p.insert("logits", Tensor::randn(vec![5], 1.0, &mut rng))?;
    check("cross_entropy", &mut p, &mut |tape, params| {
        let l = tape.param("logits", params.get("logits").expect("set above"))?;
        let probs = tape.softmax_vec(l)?;
        tape.cross_entropy(probs, 2)
    })?;

    // l2_normalize
    let mut p = ParameterSet::new();
    p.insert("x", Tensor::randn(vec![6], 1.0, &mut rng))?;
    check("l2_normalize", &mut p, &mut |tape, params| {
        let x = tape.param("x", params.get("x").expect("set above"))?;
        let y = tape.l2_normalize(x)?;
        let w = weight(tape, vec![6]);
        let wv = tape.reshape(w, vec![6])?;
        tape.dot(y, wv)
    })?;

    // dot
    let mut p = ParameterSet::new();
    p.insert("a", Tensor::randn(vec![5], 0.8, &mut rng))?;
    p.insert("b", Tensor::randn(vec![5], 0.8, &mut rng))?;
    check("dot", &mut p, &mut |tape, params| {
        let a = tape.param("a", params.get("a").expect("set above"))?;
        let b = tape.param("b", params.get("b").expect("set above"))?;
        tape.dot(a, b)
    })?;

    // cosine_similarity
    let mut p = ParameterSet::new();
    p.insert("a", Tensor::randn(vec![5], 1.0, &mut rng))?;
    p.insert("b", Tensor::randn(vec![5], 1.0, &mut rng))?;
    check("cosine_similarity", &mut p, &mut |tape, params| {
        let a = tape.param("a", params.get("a").expect("set above"))?;
        let b = tape.param("b", params.get("b").expect("set above"))?;
        tape.cosine_similarity(a, b)
    })?;

    // slice_rows / concat_rows
    let mut p = ParameterSet::new();
    p.insert("a", Tensor::randn(vec![4, 3], 0.8, &mut rng))?;
    p.insert("b", Tensor::randn(vec![2, 3], 0.8, &mut rng))?;
    check("slice_concat_rows", &mut p, &mut |tape, params| {
        let a = tape.param("a", params.get("a").expect("set above"))?;
        let b = tape.param("b", params.get("b").expect("set above"))?;
        let top = tape.slice_rows(a, 1, 3)?;
        let cat = tape.concat_rows(&[top, b])?;
        let w = weight(tape, vec![4, 3]);
        let m = tape.mul(cat, w)?;
        Ok(tape.sum(m))
    })?;

    // slice_cols / concat_cols
    let mut p = ParameterSet::new();
    p.insert("a", Tensor::randn(vec![3, 5], 0.8, &mut rng))?;
    check("slice_concat_cols", &mut p, &mut |tape, params| {
        let a = tape.param("a", params.get("a").expect("set above"))?;
        let left = tape.slice_cols(a, 0, 2)?;
        let right = tape.slice_cols(a, 2, 5)?;
        let cat = tape.concat_cols(&[right, left])?;
        let w = weight(tape, vec![3, 5]);
        let m = tape.mul(cat, w)?;
        Ok(tape.sum(m))
    })?;

    // row / stack_rows
    let mut p = ParameterSet::new();
    p.insert("a", Tensor::randn(vec![3, 4], 0.8, &mut rng))?;
    check("row_stack_rows", &mut p, &mut |tape, params| {
        let a = tape.param("a", params.get("a").expect("set above"))?;
        let r0 = tape.row(a, 0)?;
        let r2 = tape.row(a, 2)?;
        let s = tape.stack_rows(&[r2, r0])?;
        let w = weight(tape, vec![2, 4]);
        let m = tape.mul(s, w)?;
        Ok(tape.sum(m))
    })?;

    // mean_rows
    let mut p = ParameterSet::new();
    p.insert("a", Tensor::randn(vec![4, 3], 0.8, &mut rng))?;
    check("mean_rows", &mut p, &mut |tape, params| {
        let a = tape.param("a", params.get("a").expect("set above"))?;
        let m = tape.mean_rows(a)?;
        let w = weight(tape, vec![3]);
        let wv = tape.reshape(w, vec![3])?;
        tape.dot(m, wv)
    })?;

    // reshape
    let mut p = ParameterSet::new();
    p.insert("a", Tensor::randn(vec![2, 6], 0.8, &mut rng))?;
    check("reshape", &mut p, &mut |tape, params| {
        let a = tape.param("a", params.get("a").expect("set above"))?;
        let r = tape.reshape(a, vec![3, 4])?;
        let w = weight(tape, vec![3, 4]);
        let m = tape.mul(r, w)?;
        Ok(tape.sum(m))
    })?;

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_eps() {
        let mut p = ParameterSet::new();
        p.insert("x", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        let err = grad_check(&mut p, 1e-7, |tape, params| {
            let x = tape.param("x", params.get("x").unwrap())?;
            Ok(tape.sum(x))
        });
        assert!(matches!(err, Err(Error::Argument(_))));
    }

    #[test]
    fn quadratic_gradient_matches() {
        // loss = sum(x^2): gradient 2x, exactly representable.
        let mut p = ParameterSet::new();
        p.insert("x", Tensor::new(vec![3], vec![0.5, -1.25, 2.0]).unwrap())
            .unwrap();
        let r = grad_check(&mut p, 1e-5, |tape, params| {
            let x = tape.param("x", params.get("x").unwrap())?;
            tape.dot(x, x)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-7, "rel err {}", r.max_rel_err);
    }

    #[test]
    fn detects_wrong_gradient() {
        // Scaling the loss after backward registration is impossible through
        // the public API, so sabotage via an inconsistent closure: the loss
        // differs between evaluations only through a hidden counter.
        use std::cell::Cell;
        let calls = Cell::new(0_u32);
        let mut p = ParameterSet::new();
        p.insert("x", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        let err = grad_check(&mut p, 1e-5, |tape, params| {
            let x = tape.param("x", params.get("x").unwrap())?;
            let s = tape.dot(x, x)?;
            let c = calls.get();
            calls.set(c + 1);
            Ok(tape.scale(s, 1.0 + c as f64))
        });
        assert!(matches!(err, Err(Error::Determinism(_))));
    }

    #[test]
    fn primitive_suite_is_tight() {
        let checks = primitive_grad_suite(7).unwrap();
        assert!(checks.len() >= 20);
        for c in &checks {
            assert!(
                c.max_rel_err <= 1e-6,
                "{} rel err {} exceeds 1e-6",
                c.op,
                c.max_rel_err
            );
        }
    }
}
