use crate::engine::{NodeId, Tape, Tensor};
use crate::{Error, Result, Scalar};

/// Validate the tape's analytic gradient of a scalar function against
/// central finite differences.
///
/// `f` rebuilds the function on a fresh tape from a single leaf; it runs
/// once with gradients enabled for the analytic side and twice per
/// coordinate for the finite-difference side. Returns the maximum over
/// coordinates of `|analytic - fd| / max(1, |analytic|)`.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, h: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, NodeId) -> Result<NodeId>,
{
    let eval = |point: Tensor<T>, with_grad: bool| -> Result<(T, Option<Tensor<T>>)> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(point, with_grad);
        let out = f(&mut tape, leaf)?;
        let value = tape.value(out);
        if !value.is_scalar() {
            return Err(Error::BadShape {
                op: "grad_check",
                shape: value.shape().to_vec(),
                msg: "function under test must return a single-element tensor".into(),
            });
        }
        let v = value.item();
        if !v.is_finite() {
            return Err(Error::NonFinite {
                op: "grad_check",
                index: 0,
            });
        }
        let grad = if with_grad {
            Some(tape.backward(out)?.get_or_zero(leaf))
        } else {
            None
        };
        Ok((v, grad))
    };

    let (_, grad) = eval(x.clone(), true)?;
    let analytic = grad.expect("gradient requested");

    let mut max_rel = T::zero();
    let two = T::one() + T::one();
    for i in 0..x.numel() {
        let bump = |delta: T| -> Tensor<T> {
            Tensor::from_fn(x.shape(), |j| if j == i { x.data()[j] + delta } else { x.data()[j] })
        };
        let (fp, _) = eval(bump(h), false)?;
        let (fm, _) = eval(bump(-h), false)?;
        let fd = (fp - fm) / (two * h);
        let a = analytic.data()[i];
        let rel = (a - fd).abs() / T::one().max(a.abs());
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
