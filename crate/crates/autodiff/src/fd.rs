//! Central finite-difference verification of tape gradients.

use crate::{AutodiffError, Real, Result, Tape, Tensor, Var};

/// Outcome of [`finite_difference_check`].
#[derive(Clone, Debug)]
pub struct FdReport {
    /// Per leaf, max over coordinates of `|analytic − numeric| / max(1, |numeric|)`.
    pub max_rel_error: Vec<Real>,
    pub tolerance: Real,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error.iter().all(|&e| e <= self.tolerance)
    }

    pub fn worst(&self) -> Real {
        self.max_rel_error.iter().copied().fold(0.0, Real::max)
    }

    /// Indices of leaves over tolerance.
    pub fn failures(&self) -> Vec<usize> {
        (0..self.max_rel_error.len())
            .filter(|&i| self.max_rel_error[i] > self.tolerance)
            .collect()
    }
}

fn scalar_of(tape: &Tape, v: Var) -> Result<Real> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(AutodiffError::NonScalarLoss {
            shape: t.shape().to_vec(),
        });
    }
    Ok(t.item())
}

/// Compares tape gradients of `f` with central differences at step `eps`.
///
/// `f` receives a tape and one `Var` per entry of `leaves` and returns a scalar.
/// It must be deterministic; two evaluations at the unperturbed point are compared
/// bitwise first.
pub fn finite_difference_check<F>(
    f: F,
    leaves: &[Tensor],
    eps: Real,
    tolerance: Real,
) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<Real> {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let first = eval(leaves)?;
    let second = eval(leaves)?;
    if first.to_bits() != second.to_bits() {
        return Err(AutodiffError::NonDeterministic { first, second });
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut probe = leaves.to_vec();
    let mut max_rel_error = Vec::with_capacity(leaves.len());
    for (li, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("leaf gradient").data().to_vec();
        let mut worst: Real = 0.0;
        for i in 0..leaves[li].numel() {
            let orig = probe[li].data()[i];
            probe[li].data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe[li].data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe[li].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
        max_rel_error.push(worst);
    }
    Ok(FdReport {
        max_rel_error,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_is_exact() {
        // f(x) = xᵀ A x with A = [[2, 1], [1, 3]]
        let a = Tensor::new(vec![2, 2], vec![2.0, 1.0, 1.0, 3.0]).unwrap();
        let x = Tensor::new(vec![2, 1], vec![0.7, -1.3]).unwrap();
        let report = finite_difference_check(
            |t, v| {
                let ax = t.matmul(v[0], v[1])?;
                let xt = t.transpose(v[1])?;
                t.matmul(xt, ax)
            },
            &[a, x],
            1e-5,
            1e-7,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let report = finite_difference_check(
            |t, _| Ok(t.constant(Tensor::scalar(4.2))),
            &[x.clone()],
            1e-5,
            1e-12,
        )
        .unwrap();
        assert_eq!(report.worst(), 0.0);

        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let c = tape.constant(Tensor::scalar(4.2));
        let grads = tape.backward(c).unwrap();
        assert!(grads.get(v).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn non_deterministic_function_is_rejected() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let result = finite_difference_check(
            |t, _| {
                calls.set(calls.get() + 1.0);
                Ok(t.constant(Tensor::scalar(calls.get())))
            },
            &[Tensor::scalar(0.0)],
            1e-5,
            1e-4,
        );
        assert!(matches!(
            result,
            Err(AutodiffError::NonDeterministic { .. })
        ));
    }
}
