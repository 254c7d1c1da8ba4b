use super::{Graph, Result, Tensor, TensorError, Var};

/// Compare the tape gradient of a scalar function with central differences.
///
/// Returns the maximum over coordinates of
/// `|autodiff - fd| / (|fd| + 1e-12)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    grad_check_with(f, x, h, 1e-12)
}

/// [`grad_check`] with an explicit floor on the relative-error denominator.
pub fn grad_check_with<F>(f: F, x: &Tensor, h: f64, floor: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    if !(h > 0.0) {
        return Err(TensorError::Invalid {
            op: "grad_check",
            msg: format!("step size must be positive, got {h}"),
        });
    }
    let g = Graph::new();
    let leaf = g.leaf(x.clone());
    let out = f(&g, leaf)?;
    let analytic = g.backward(out)?.wrt(leaf);

    let eval = |p: Tensor| -> Result<f64> {
        let g = Graph::new();
        let v = g.leaf(p);
        let y = f(&g, v)?;
        let val = y.value();
        if val.len() != 1 {
            return Err(TensorError::NonScalar(val.shape().to_vec()));
        }
        Ok(val.item())
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.data().to_vec();
        let mut minus = x.data().to_vec();
        plus[i] += h;
        minus[i] -= h;
        let fp = eval(Tensor::new(x.shape(), plus)?)?;
        let fm = eval(Tensor::new(x.shape(), minus)?)?;
        let fd = (fp - fm) / (2.0 * h);
        let err = (analytic.data()[i] - fd).abs() / (fd.abs() + floor);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_gradient_is_exact() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 4.0, 2.5, 0.0]);
        let g = Graph::new();
        let v = g.leaf(x.clone());
        let grads = g.backward(v.mean()).unwrap();
        assert!(grads.wrt(v).data().iter().all(|&d| d == 1.0 / 5.0));
        let err = grad_check(|_, v| Ok(v.mean()), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn softmax_first_component_matches_finite_differences() {
        let x = Tensor::from_vec(vec![0.0, 1.0, 2.0]);
        let err = grad_check(|_, v| Ok(v.softmax(0)?.select(0, 0)?.sum()), &x, 1e-5).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn rejects_non_scalar_output_and_bad_step() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        assert!(matches!(
            grad_check(|_, v| Ok(v.exp()), &x, 1e-5),
            Err(TensorError::NonScalar(_))
        ));
        assert!(grad_check(|_, v| Ok(v.sum()), &x, 0.0).is_err());
    }
}
