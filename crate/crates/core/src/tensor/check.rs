use super::{Result, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, entry)` where the maximum was observed.
    pub worst: Option<(usize, usize)>,
    pub entries_checked: usize,
}

fn check_eps(eps: f64) -> Result<()> {
    if (1e-6..=1e-4).contains(&eps) {
        Ok(())
    } else {
        Err(TensorError::Argument {
            op: "grad_check",
            msg: format!("eps must lie in [1e-6, 1e-4], got {eps}"),
        })
    }
}

fn evaluate<F, E>(f: &F, inputs: &[Tensor]) -> Result<(Tape, Vec<Var>, Var), E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.check_finite()?;
    if tape.value(out).len() != 1 {
        return Err(TensorError::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            tape.shape(out)
        ))
        .into());
    }
    Ok((tape, vars, out))
}

/// Compares tape gradients against central differences at the listed
/// `(input, entry)` positions. Relative error per entry is
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn grad_check_entries<F, E>(
    f: F,
    inputs: &[Tensor],
    eps: f64,
    entries: &[(usize, usize)],
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    check_eps(eps)?;
    let (mut tape, vars, out) = evaluate(&f, inputs)?;
    tape.backward(out)?;
    let analytic: Vec<Option<Tensor>> = vars.iter().map(|&v| tape.grad(v).cloned()).collect();
    drop(tape);

    let mut probe = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    for &(input, entry) in entries {
        let orig = probe[input].data()[entry];
        probe[input].data_mut()[entry] = orig + eps;
        let (t, _, o) = evaluate(&f, &probe)?;
        let plus = t.value(o).data()[0];
        probe[input].data_mut()[entry] = orig - eps;
        let (t, _, o) = evaluate(&f, &probe)?;
        let minus = t.value(o).data()[0];
        probe[input].data_mut()[entry] = orig;

        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[input].as_ref().map_or(0.0, |g| g.data()[entry]);
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        if !rel.is_finite() {
            return Err(TensorError::Contract(format!(
                "grad_check produced a non-finite error at input {input} entry {entry}"
            ))
            .into());
        }
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = rel.max(report.max_rel_error);
            report.worst = Some((input, entry));
        }
        report.entries_checked += 1;
    }
    Ok(report)
}

/// Maximum relative error between analytic and central-difference
/// gradients over every entry of `x`.
pub fn grad_check<F, E>(f: F, x: &Tensor, eps: f64) -> Result<f64, E>
where
    F: Fn(&mut Tape, Var) -> Result<Var, E>,
    E: From<TensorError>,
{
    let entries: Vec<_> = (0..x.len()).map(|e| (0, e)).collect();
    let report = grad_check_entries(|t, v| f(t, v[0]), std::slice::from_ref(x), eps, &entries)?;
    Ok(report.max_rel_error)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_is_exact() {
        let x = Tensor::new(&[4], vec![0.3, -1.2, 2.5, 0.9]).unwrap();
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok::<_, TensorError>(t.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let x = Tensor::from_fn(&[2, 2], |i| i as f64);
        let err = grad_check(
            |t, _| Ok::<_, TensorError>(t.constant(Tensor::scalar(3.0))),
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn eps_out_of_range() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|t, v| Ok::<_, TensorError>(t.sum(v)), &x, 1e-2).is_err());
    }

    #[test]
    fn non_finite_is_diagnosed() {
        let x = Tensor::scalar(1e300);
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok::<_, TensorError>(t.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { op: "mul", .. }));
    }
}
