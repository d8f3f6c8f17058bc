use super::{Result, Tape, Tensor, Var};

/// Denominator floor for relative errors, so entries whose true gradient is
/// (near) zero are compared on an absolute scale instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Maximum relative error per input.
    pub per_input: Vec<f64>,
    pub checked: usize,
}

/// Compare tape gradients of the scalar function `f` with central
/// differences `(f(x+h) - f(x-h)) / 2h`, element by element.
///
/// The relative error of an element is
/// `|analytic - numeric| / max(|analytic|, |numeric|, REL_ERROR_FLOOR)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut work = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut checked = 0;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].rows(), inputs[i].cols()));
        let mut worst = 0.0f64;
        for j in 0..inputs[i].len() {
            let x0 = work[i].data()[j];
            work[i].data_mut()[j] = x0 + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = x0 - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[j];
            let denom = a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
            checked += 1;
        }
        per_input.push(worst);
    }
    Ok(GradCheckReport {
        max_rel_error: per_input.iter().copied().fold(0.0, f64::max),
        per_input,
        checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let w = Tensor::row(vec![0.3, -1.2, 2.5, 0.7]);
        let x = Tensor::row(vec![1.0, 2.0, -0.5, 0.25]);
        let report = grad_check(
            |t, v| {
                let c = t.constant(w.clone());
                let p = t.mul(v[0], c)?;
                Ok(t.sum(p))
            },
            &[x],
            1e-3,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-10, "{}", report.max_rel_error);
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let x = Tensor::row(vec![1.0, 2.0]);
        let report = grad_check(
            |t, _| Ok(t.constant(Tensor::scalar(4.0))),
            &[x],
            1e-5,
        )
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert_eq!(report.checked, 2);
    }
}
