use super::{Graph, Tensor, TensorError, Var};

/// Relative error with the `max(|a|, |b|, 1e-8)` denominator.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the analytic gradient of a scalar function against central
/// finite differences and returns the largest elementwise relative error.
///
/// `f` records its computation on the supplied graph starting from the leaf
/// holding `x`, and returns the scalar output.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_at(f, x, eps, &all)
}

/// [`grad_check`] restricted to the listed entries of `x`.
pub fn grad_check_at<F>(f: F, x: &Tensor<f64>, eps: f64, entries: &[usize]) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let leaf = g.param(x.clone());
    let out = f(&mut g, leaf)?;
    g.backward(out)?;
    let analytic = match g.grad(leaf) {
        Some(t) => t.data().to_vec(),
        None => vec![0.0; x.numel()],
    };

    let eval = |t: Tensor<f64>| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let leaf = g.constant(t);
        let out = f(&mut g, leaf)?;
        let v = g.value(out);
        if v.numel() != 1 {
            return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let mut worst = 0.0f64;
    for &i in entries {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        if !fd.is_finite() {
            return Err(TensorError::NonFinite("finite difference".into()));
        }
        worst = worst.max(rel_err(analytic[i], fd));
    }
    Ok(worst)
}
