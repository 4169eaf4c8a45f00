//! The frozen feature extractor shared by CF matching, the detector head,
//! and the feature-space analyses. A single linear map with an optional tanh;
//! under the identity nonlinearity, input-space composition maps exactly to
//! feature-space composition, which several test fixtures rely on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gaussian_sample, Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Identity,
    Tanh,
}

/// Frozen after creation; no operation mutates it.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    in_dim: usize,
    out_dim: usize,
    /// Row-major [out_dim, in_dim].
    projection: Tensor,
    bias: Tensor,
    nonlinearity: Nonlinearity,
}

/// Projection entries i.i.d. normal scaled by 1/sqrt(in_dim), zero bias.
pub fn init_feature_map(
    rng: &mut Rng,
    in_dim: usize,
    out_dim: usize,
    nonlinearity: Nonlinearity,
) -> Result<FeatureMap> {
    if in_dim == 0 || out_dim == 0 {
        return Err(Error::InvalidArgument("feature map dims must be >= 1".into()));
    }
    let scale = 1.0 / (in_dim as f64).sqrt();
    let projection = gaussian_sample(rng, vec![out_dim, in_dim], 0.0, scale)?;
    Ok(FeatureMap {
        in_dim,
        out_dim,
        projection,
        bias: Tensor::zeros(vec![out_dim]),
        nonlinearity,
    })
}

impl FeatureMap {
    /// Identity map fixture: square identity projection, zero bias.
    pub fn identity(dim: usize) -> FeatureMap {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        FeatureMap {
            in_dim: dim,
            out_dim: dim,
            projection: Tensor::new(vec![dim, dim], data).unwrap(),
            bias: Tensor::zeros(vec![dim]),
            nonlinearity: Nonlinearity::Identity,
        }
    }

    pub fn from_parts(
        projection: Tensor,
        bias: Tensor,
        nonlinearity: Nonlinearity,
    ) -> Result<FeatureMap> {
        if projection.shape().len() != 2 {
            return Err(Error::InvalidArgument("projection must be rank 2".into()));
        }
        let out_dim = projection.shape()[0];
        let in_dim = projection.shape()[1];
        if bias.shape() != [out_dim] {
            return Err(Error::ShapeMismatch {
                expected: vec![out_dim],
                got: bias.shape().to_vec(),
            });
        }
        Ok(FeatureMap {
            in_dim,
            out_dim,
            projection,
            bias,
            nonlinearity,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn nonlinearity(&self) -> Nonlinearity {
        self.nonlinearity
    }

    pub fn projection(&self) -> &Tensor {
        &self.projection
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    /// nonlinearity(projection * x + bias).
    pub fn extract(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape() != [self.in_dim] {
            return Err(Error::ShapeMismatch {
                expected: vec![self.in_dim],
                got: x.shape().to_vec(),
            });
        }
        let p = self.projection.data();
        let mut out = vec![0.0; self.out_dim];
        for (o, row) in out.iter_mut().zip(p.chunks_exact(self.in_dim)) {
            let mut acc = 0.0;
            for (w, xi) in row.iter().zip(x.data()) {
                acc += w * xi;
            }
            *o = acc;
        }
        for (o, b) in out.iter_mut().zip(self.bias.data()) {
            *o += b;
        }
        if self.nonlinearity == Nonlinearity::Tanh {
            for o in out.iter_mut() {
                *o = o.tanh();
            }
        }
        Tensor::vector(out)
    }

    pub fn extract_batch(&self, xs: &[Tensor]) -> Result<Vec<Tensor>> {
        xs.iter().map(|x| self.extract(x)).collect()
    }

    /// Pull a gradient w.r.t. the extracted features back to the input:
    /// dL/dx = P^T (n'(pre) . dL/dv). Because tanh outputs are v = tanh(pre),
    /// the Jacobian diagonal is expressed as 1 - v^2 from the forward value.
    pub fn backprop_input(&self, features: &Tensor, grad_features: &Tensor) -> Result<Tensor> {
        if features.shape() != [self.out_dim] || grad_features.shape() != [self.out_dim] {
            return Err(Error::ShapeMismatch {
                expected: vec![self.out_dim],
                got: grad_features.shape().to_vec(),
            });
        }
        let mut gpre = vec![0.0; self.out_dim];
        match self.nonlinearity {
            Nonlinearity::Identity => gpre.copy_from_slice(grad_features.data()),
            Nonlinearity::Tanh => {
                for ((g, v), out) in grad_features
                    .data()
                    .iter()
                    .zip(features.data())
                    .zip(gpre.iter_mut())
                {
                    *out = g * (1.0 - v * v);
                }
            }
        }
        let p = self.projection.data();
        let mut gx = vec![0.0; self.in_dim];
        for (row, gp) in p.chunks_exact(self.in_dim).zip(&gpre) {
            for (gxi, w) in gx.iter_mut().zip(row) {
                *gxi += w * gp;
            }
        }
        Tensor::vector(gx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, grad_rel_error};

    #[test]
    fn deterministic_init_and_seed_sensitivity() {
        let a = init_feature_map(&mut Rng::seeded(0), 4, 4, Nonlinearity::Identity).unwrap();
        let b = init_feature_map(&mut Rng::seeded(0), 4, 4, Nonlinearity::Identity).unwrap();
        let c = init_feature_map(&mut Rng::seeded(1), 4, 4, Nonlinearity::Identity).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.projection(), c.projection());
    }

    #[test]
    fn scalar_output_shape() {
        let fm = init_feature_map(&mut Rng::seeded(2), 5, 1, Nonlinearity::Tanh).unwrap();
        let x = Tensor::vector(vec![0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        assert_eq!(fm.extract(&x).unwrap().shape(), &[1]);
    }

    #[test]
    fn identity_map_is_identity() {
        let fm = FeatureMap::identity(3);
        let x = Tensor::vector(vec![1.5, -0.2, 7.0]).unwrap();
        assert_eq!(fm.extract(&x).unwrap(), x);
    }

    #[test]
    fn tanh_of_zero_is_zero() {
        let fm = init_feature_map(&mut Rng::seeded(3), 4, 4, Nonlinearity::Tanh).unwrap();
        let y = fm.extract(&Tensor::zeros(vec![4])).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linearity_under_identity_nonlinearity() {
        let fm = init_feature_map(&mut Rng::seeded(4), 6, 3, Nonlinearity::Identity).unwrap();
        let x = Tensor::vector(vec![0.3, -1.0, 0.7, 2.0, -0.4, 0.1]).unwrap();
        let lhs = fm.extract(&x.scale(2.5)).unwrap();
        let rhs = fm.extract(&x).unwrap().scale(2.5);
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn extract_rejects_wrong_dim() {
        let fm = FeatureMap::identity(3);
        assert!(fm.extract(&Tensor::zeros(vec![4])).is_err());
    }

    #[test]
    fn backprop_matches_finite_differences() {
        for nl in [Nonlinearity::Identity, Nonlinearity::Tanh] {
            let mut rng = Rng::seeded(5);
            let fm = init_feature_map(&mut rng, 4, 3, nl).unwrap();
            let x = gaussian_sample(&mut rng, vec![4], 0.0, 1.0).unwrap();
            let coeff = gaussian_sample(&mut rng, vec![3], 0.0, 1.0).unwrap();
            // scalar objective <coeff, extract(x)>
            let v = fm.extract(&x).unwrap();
            let analytic = fm.backprop_input(&v, &coeff).unwrap();
            let fd = finite_diff_grad(
                |t| fm.extract(t).unwrap().dot(&coeff).unwrap(),
                &x,
                1e-6,
            )
            .unwrap();
            assert!(grad_rel_error(&analytic, &fd) < 1e-8);
        }
    }
}
