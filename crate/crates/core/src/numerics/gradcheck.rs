use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Outcome of a central-difference gradient comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport<T> {
    /// `max_i |a_i - n_i| / max(1e-8, |a_i| + |n_i|)`
    pub max_rel_error: T,
    pub worst_coord: usize,
    pub coords: Vec<usize>,
    pub analytic: Vec<T>,
    pub numeric: Vec<T>,
}

fn eval_value<T: Scalar, F>(f: &F, x: &Tensor<T>) -> Result<T>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = f(&mut tape, xv)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares the tape gradient of scalar `f` at `x` with central differences
/// over every coordinate of `x`.
pub fn finite_diff_check<T: Scalar, F>(f: F, x: &Tensor<T>, eps: T) -> Result<GradCheckReport<T>>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    finite_diff_check_coords(f, x, eps, &coords)
}

/// [`finite_diff_check`] restricted to the listed flat coordinates.
pub fn finite_diff_check_coords<T: Scalar, F>(
    f: F,
    x: &Tensor<T>,
    eps: T,
    coords: &[usize],
) -> Result<GradCheckReport<T>>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let value_and_grad = |p: &Tensor<T>| -> Result<(T, Vec<T>)> {
        let mut tape = Tape::new();
        let xv = tape.leaf(p.clone().with_requires_grad());
        let out = f(&mut tape, xv)?;
        let value = tape.value(out).item();
        tape.backward(out)?;
        let grad = tape
            .grad(xv)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); p.numel()]);
        Ok((value, grad))
    };
    let value = |p: &Tensor<T>| eval_value(&f, p);
    check_with(value_and_grad, value, x, eps, coords)
}

/// Generic form: `value_and_grad` supplies the analytic gradient, `value`
/// evaluates the function alone.
pub fn check_with<T: Scalar>(
    value_and_grad: impl Fn(&Tensor<T>) -> Result<(T, Vec<T>)>,
    value: impl Fn(&Tensor<T>) -> Result<T>,
    x: &Tensor<T>,
    eps: T,
    coords: &[usize],
) -> Result<GradCheckReport<T>> {
    if eps <= T::zero() {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let (v0, grad) = value_and_grad(x)?;
    let v1 = value(x)?;
    if v0.to_f64_lossy().to_bits() != v1.to_f64_lossy().to_bits() {
        return Err(Error::NonDeterministic);
    }
    let floor = T::lit(1e-8);
    let two = T::lit(2.0);
    let mut report = GradCheckReport {
        max_rel_error: T::zero(),
        worst_coord: coords.first().copied().unwrap_or(0),
        coords: coords.to_vec(),
        analytic: Vec::with_capacity(coords.len()),
        numeric: Vec::with_capacity(coords.len()),
    };
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = value(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = value(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (two * eps);
        let analytic = grad[i];
        let rel = (analytic - numeric).abs() / floor.max(analytic.abs() + numeric.abs());
        if rel > report.max_rel_error || rel.is_nan() {
            report.max_rel_error = rel;
            report.worst_coord = i;
        }
        report.analytic.push(analytic);
        report.numeric.push(numeric);
    }
    Ok(report)
}
