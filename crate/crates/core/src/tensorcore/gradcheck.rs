use crate::error::{Error, Result};

use super::{Graph, ParamId, ParamSet, Tensor, Trainable, Var};

/// Floor on the relative-error denominator so that near-zero gradient
/// entries are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences `(f(p+h) − f(p−h)) / 2h`, coordinate by coordinate.
///
/// `f` receives a fresh graph and one leaf per input tensor and returns the
/// scalar output node. Returns the largest relative error seen.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {h}")));
    }
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &leaves)?;
        let y = g.value(out).item();
        if !y.is_finite() {
            return Err(Error::NonFinite("finite_diff_check function value".into()));
        }
        Ok(y)
    };

    let mut g = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &leaves)?;
    let grads = g.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(leaves[i], input);
        for j in 0..input.numel() {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + h;
            let fp = eval(&probe)?;
            probe[i].data_mut()[j] = orig - h;
            let fm = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(relative_error(analytic.data()[j], numeric));
        }
    }
    Ok(worst)
}

/// Same check over entries of a parameter set: `f` builds the scalar on a
/// graph whose parameters are all trainable, and each listed parameter is
/// perturbed in turn.
pub fn finite_diff_check_params<F>(params: &ParamSet, ids: &[ParamId], f: F, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {h}")));
    }
    let eval = |ps: &ParamSet| -> Result<f64> {
        let mut g = Graph::with_params(ps, Trainable::Nothing);
        let out = f(&mut g)?;
        let y = g.value(out).item();
        if !y.is_finite() {
            return Err(Error::NonFinite("finite_diff_check function value".into()));
        }
        Ok(y)
    };
    let grads = {
        let mut g = Graph::with_params(params, Trainable::All);
        let out = f(&mut g)?;
        g.backward(out)?.into_params()
    };
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for &id in ids {
        let base = params.get(id).clone();
        let analytic = grads
            .get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(base.shape()));
        for j in 0..base.numel() {
            let orig = base.data()[j];
            probe.get_mut(id).data_mut()[j] = orig + h;
            let fp = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig - h;
            let fm = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig;
            worst = worst.max(relative_error(analytic.data()[j], (fp - fm) / (2.0 * h)));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_nearly_exact() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.0]);
        let err = finite_diff_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                let s = g.scale(sq, 1.5);
                Ok(g.sum(s))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let err = finite_diff_check(
            |g, v| {
                let z = g.scale(v[0], 0.0);
                Ok(g.sum(z))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_bad_step_and_non_finite_values() {
        let x = Tensor::vector(vec![1.0]);
        assert!(finite_diff_check(|g, v| Ok(g.sum(v[0])), &[x.clone()], 0.0).is_err());
        let inf = Tensor::vector(vec![f64::INFINITY]);
        assert!(finite_diff_check(|g, v| Ok(g.sum(v[0])), &[inf], 1e-5).is_err());
    }
}
