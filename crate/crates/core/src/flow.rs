//! Rectified-flow helpers shared by the world model and the action expert.
//!
//! Paths are linear, `x_t = (1 − t)·x₀ + t·x₁` with `x₀ ~ N(0, I)`, so the
//! regression target for the velocity field is `x₁ − x₀`.

use crate::error::{Error, Result};
use crate::tensorcore::Tensor;

/// Point on the linear path at time `t` and its target velocity.
pub fn interpolate(x0: &Tensor, x1: &Tensor, t: f64) -> Result<(Tensor, Tensor)> {
    let xt = x0.zip_with(x1, "interpolate", |a, b| (1.0 - t) * a + t * b)?;
    let v = x1.sub(x0)?;
    Ok((xt, v))
}

/// Same as [`interpolate`] with one time per block of `rows_per_sample` rows.
pub fn interpolate_rows(x0: &Tensor, x1: &Tensor, ts: &[f64], rows_per_sample: usize) -> Result<(Tensor, Tensor)> {
    if x0.shape() != x1.shape() {
        return Err(Error::shape("interpolate_rows", x0.shape(), x1.shape()));
    }
    let c = x0.cols();
    if x0.rows() != ts.len() * rows_per_sample {
        return Err(Error::invalid(format!(
            "{} rows do not split into {} samples of {rows_per_sample}",
            x0.rows(),
            ts.len()
        )));
    }
    let mut xt = x0.clone();
    for (i, v) in xt.data_mut().iter_mut().enumerate() {
        let t = ts[i / (c * rows_per_sample)];
        *v = (1.0 - t) * *v + t * x1.data()[i];
    }
    Ok((xt, x1.sub(x0)?))
}

/// Explicit Euler integration of `dx/dt = v(x, t)` from `t = 0` to `1`:
/// `x ← x + v(x, n/N)/N` for `n = 0..N`.
pub fn euler_integrate<F>(x0: Tensor, steps: usize, mut field: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    if steps == 0 {
        return Err(Error::invalid("Euler integration needs at least one step"));
    }
    let dt = 1.0 / steps as f64;
    let mut x = x0;
    for n in 0..steps {
        let v = field(&x, n as f64 * dt)?;
        if v.shape() != x.shape() {
            return Err(Error::shape("euler_integrate", x.shape(), v.shape()));
        }
        for (xi, vi) in x.data_mut().iter_mut().zip(v.data()) {
            *xi += dt * vi;
        }
        if !x.is_finite() {
            return Err(Error::Divergence {
                step: n,
                what: "non-finite state during Euler integration".into(),
            });
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_field_telescopes() {
        let z0 = Tensor::vector(vec![0.5, -1.0, 2.0]);
        let c = Tensor::vector(vec![1.0, 2.0, -0.25]);
        for n in [1, 2, 3, 7, 64] {
            let z = euler_integrate(z0.clone(), n, |_, _| Ok(c.clone())).unwrap();
            for ((a, b), cc) in z.data().iter().zip(z0.data()).zip(c.data()) {
                assert!((a - (b + cc)).abs() < 1e-12, "n={n}");
            }
        }
    }

    #[test]
    fn linear_field_matches_compound_growth() {
        let z0 = Tensor::vector(vec![1.0, -2.0]);
        let z = euler_integrate(z0.clone(), 1000, |x, _| Ok(x.clone())).unwrap();
        let closed = (1.0 + 1.0 / 1000.0f64).powi(1000);
        for (a, b) in z.data().iter().zip(z0.data()) {
            assert!((a - b * closed).abs() < 1e-9);
            assert!((a / (b * std::f64::consts::E) - 1.0).abs() < 2e-3);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let z0 = Tensor::vector(vec![1.0]);
        let err = euler_integrate(z0, 4, |_, _| Ok(Tensor::vector(vec![f64::INFINITY]))).unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 0, .. }));
    }

    #[test]
    fn interpolation_endpoints() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::vector(vec![3.0, -2.0]);
        assert_eq!(interpolate(&a, &b, 0.0).unwrap().0, a);
        assert_eq!(interpolate(&a, &b, 1.0).unwrap().0, b);
        assert_eq!(interpolate(&a, &b, 0.5).unwrap().1.data(), &[2.0, -4.0]);
    }
}
