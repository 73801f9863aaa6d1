use super::{Scalar, Tape, Tensor, Var};
use crate::error::Result;

/// Perturbation used by the central-difference checks.
pub const FD_EPS: f64 = 1e-5;

/// `|a − b| / max(|a|, |b|, 1e−8)`; two zeros compare as exact.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares analytic gradients of `f` with central differences and returns
/// the worst coordinate-wise relative error across all `params`.
///
/// `f` receives a fresh tape and one leaf per parameter and must return a
/// scalar. It is called once for the analytic pass and twice per
/// coordinate, so any randomness inside it must be re-seeded on each call.
pub fn grad_check<T, F>(mut f: F, params: &[Tensor<T>], eps: T) -> Result<f64>
where
    T: Scalar,
    F: FnMut(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = params
        .iter()
        .map(|p| tape.leaf(p.clone().with_grad()))
        .collect();
    let loss = f(&mut tape, &leaves)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<T>> = leaves
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            tape.grad(v)
                .map(<[T]>::to_vec)
                .unwrap_or_else(|| vec![T::zero(); p.len()])
        })
        .collect();

    let mut eval = |probe: &[Tensor<T>]| -> Result<T> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = probe.iter().map(|p| tape.constant(p.clone())).collect();
        let loss = f(&mut tape, &leaves)?;
        Ok(tape.value(loss).item())
    };

    let mut probe: Vec<Tensor<T>> = params.to_vec();
    let two_eps = eps + eps;
    let mut worst = 0.0f64;
    for (pi, grads) in analytic.iter().enumerate() {
        for ci in 0..grads.len() {
            let original = probe[pi].values()[ci];
            probe[pi].values_mut()[ci] = original + eps;
            let plus = eval(&probe)?;
            probe[pi].values_mut()[ci] = original - eps;
            let minus = eval(&probe)?;
            probe[pi].values_mut()[ci] = original;
            let numeric = (plus - minus) / two_eps;
            worst = worst.max(relative_error(grads[ci].as_f64(), numeric.as_f64()));
        }
    }
    Ok(worst)
}
