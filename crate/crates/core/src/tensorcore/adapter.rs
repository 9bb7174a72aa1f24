use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::Tensor;

/// Frozen base weight plus a low-rank additive delta.
///
/// The effective weight is `base + scale · (up · down)`; with `up` all zero
/// it equals `base` exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterizedWeight {
    pub base: Tensor,
    pub down: Tensor,
    pub up: Tensor,
    pub scale: f64,
}

impl AdapterizedWeight {
    /// Fresh adapter: `down ~ U(−b, b)` with `b = 1/√d_in`, `up = 0`,
    /// `scale = 1/rank`.
    pub fn init(base: Tensor, rank: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if rank == 0 {
            return Err(Error::invalid("adapter rank must be ≥ 1"));
        }
        let (d_out, d_in) = base.dims2();
        let bound = 1.0 / (d_in as f64).sqrt();
        let down = (0..rank * d_in)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Ok(AdapterizedWeight {
            base,
            down: Tensor::matrix(rank, d_in, down)?,
            up: Tensor::zeros(&[d_out, rank]),
            scale: 1.0 / rank as f64,
        })
    }

    pub fn rank(&self) -> usize {
        self.down.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let (d_out, d_in) = self.base.dims2();
        let rank = self.down.rows();
        if rank == 0 || self.down.cols() != d_in || self.up.dims2() != (d_out, rank) {
            return Err(Error::invalid(format!(
                "adapter shapes inconsistent: base {:?}, down {:?}, up {:?}",
                self.base.shape(),
                self.down.shape(),
                self.up.shape()
            )));
        }
        Ok(())
    }

    pub fn effective(&self) -> Result<Tensor> {
        self.validate()?;
        if self.up.data().iter().all(|&v| v == 0.0) {
            return Ok(self.base.clone());
        }
        let delta = self.up.matmul(&self.down)?.scale(self.scale);
        self.base.add(&delta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn zero_up_projection_is_bit_exact_base() {
        let mut r = rng::stream(3);
        let base = rng::normal_tensor(&mut r, &[4, 5]);
        let w = AdapterizedWeight::init(base.clone(), 2, &mut r).unwrap();
        assert_eq!(w.effective().unwrap(), base);
    }

    #[test]
    fn full_rank_matches_dense_reference() {
        let mut r = rng::stream(11);
        let base = rng::normal_tensor(&mut r, &[3, 4]);
        let mut w = AdapterizedWeight::init(base.clone(), 3, &mut r).unwrap();
        w.up = rng::normal_tensor(&mut r, &[3, 3]);
        let eff = w.effective().unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let mut delta = 0.0;
                for k in 0..3 {
                    delta += w.up.at(i, k) * w.down.at(k, j);
                }
                let expect = base.at(i, j) + w.scale * delta;
                assert!((eff.at(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn inconsistent_shapes_are_rejected() {
        let mut r = rng::stream(1);
        let mut w = AdapterizedWeight::init(Tensor::zeros(&[2, 2]), 1, &mut r).unwrap();
        w.up = Tensor::zeros(&[3, 1]);
        assert!(w.effective().is_err());
        assert!(AdapterizedWeight::init(Tensor::zeros(&[2, 2]), 0, &mut r).is_err());
    }
}
