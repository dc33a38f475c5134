//! SGD with momentum and coupled L2 weight decay.

use alloc::string::ToString;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const DEFAULT_MOMENTUM: f32 = 0.9;
pub const DEFAULT_WEIGHT_DECAY: f32 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct SgdMomentum {
    pub momentum: f32,
    pub weight_decay: f32,
    pub lr: f32,
    velocity: Vec<Tensor>,
}

impl SgdMomentum {
    pub fn new(params: &ParamSet, momentum: f32, weight_decay: f32) -> Self {
        SgdMomentum {
            momentum,
            weight_decay,
            lr: 0.0,
            velocity: (0..params.len())
                .map(|i| Tensor::zeros(params.get(i).shape()))
                .collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// Restores velocity buffers, e.g. from a checkpoint.
    pub fn set_velocity(&mut self, velocity: Vec<Tensor>) -> Result<()> {
        if velocity.len() != self.velocity.len()
            || velocity
                .iter()
                .zip(&self.velocity)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Contract("velocity buffers do not mirror parameters".to_string()));
        }
        self.velocity = velocity;
        Ok(())
    }

    /// `v <- mu*v + (g + wd*p); p <- p - lr*v`. A missing gradient counts as zero.
    ///
    /// The whole step is rejected, leaving parameters and velocity untouched,
    /// if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Contract("one gradient slot per parameter".to_string()));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Argument("learning rate must be >= 0".to_string()));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.shape() != params.get(i).shape() {
                    return Err(Error::Shape {
                        op: "sgd_momentum_step",
                        lhs: params.get(i).shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
                if !g.all_finite() {
                    return Err(Error::NonFinite(params.name(i).to_string()));
                }
            }
        }
        let (mu, wd, lr) = (self.momentum, self.weight_decay, self.lr);
        for (i, g) in grads.iter().enumerate() {
            let p = params.get_mut(i).data_mut();
            let v = self.velocity[i].data_mut();
            match g {
                Some(g) => {
                    for ((pv, vv), &gv) in p.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                        *vv = mu * *vv + (gv + wd * *pv);
                        *pv -= lr * *vv;
                    }
                }
                None => {
                    for (pv, vv) in p.iter_mut().zip(v.iter_mut()) {
                        *vv = mu * *vv + wd * *pv;
                        *pv -= lr * *vv;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn single(p: f32) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.push("w", Tensor::new(&[1], vec![p]).unwrap());
        ps
    }

    fn grad(g: f32) -> Vec<Option<Tensor>> {
        vec![Some(Tensor::new(&[1], vec![g]).unwrap())]
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut ps = single(1.5);
        let mut opt = SgdMomentum::new(&ps, 0.9, 1e-4);
        opt.step(&mut ps, &grad(3.0)).unwrap();
        assert_eq!(ps.get(0).data(), &[1.5]);
    }

    #[test]
    fn plain_gradient_descent() {
        let mut ps = single(1.0);
        let mut opt = SgdMomentum::new(&ps, 0.0, 0.0);
        opt.lr = 1.0;
        opt.step(&mut ps, &grad(0.5)).unwrap();
        assert_eq!(ps.get(0).data(), &[0.5]);
    }

    #[test]
    fn two_steps_match_hand_unrolled_recurrence() {
        let (mu, wd, lr) = (0.9f32, 1e-4f32, 0.1f32);
        let mut ps = single(1.0);
        let mut opt = SgdMomentum::new(&ps, mu, wd);
        opt.lr = lr;
        opt.step(&mut ps, &grad(0.5)).unwrap();
        opt.step(&mut ps, &grad(-0.25)).unwrap();
        // hand unrolling
        let p0 = 1.0f32;
        let v1 = 0.5 + wd * p0;
        let p1 = p0 - lr * v1;
        let v2 = mu * v1 + (-0.25 + wd * p1);
        let p2 = p1 - lr * v2;
        assert_eq!(ps.get(0).data(), &[p2]);
        assert_eq!(opt.velocity()[0].data(), &[v2]);
    }

    #[test]
    fn non_finite_gradient_aborts_and_names_param() {
        let mut ps = single(1.0);
        let mut opt = SgdMomentum::new(&ps, 0.9, 0.0);
        opt.lr = 0.1;
        let err = opt.step(&mut ps, &grad(f32::NAN)).unwrap_err();
        assert_eq!(err, Error::NonFinite("w".into()));
        assert_eq!(ps.get(0).data(), &[1.0]);
        assert_eq!(opt.velocity()[0].data(), &[0.0]);
    }
}
