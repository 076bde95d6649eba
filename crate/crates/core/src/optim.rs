//! Adam and momentum SGD over lists of tensors.

use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Adam with a learning rate per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Scalar = f32> {
    pub lrs: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(shapes: &[&[usize]], lrs: Vec<f64>) -> Result<Self> {
        if shapes.len() != lrs.len() {
            return Err(Error::Invalid(format!("{} tensors but {} learning rates", shapes.len(), lrs.len())));
        }
        Ok(Self {
            lrs,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        })
    }

    pub fn update(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        check_lists(params.len(), grads.len(), self.m.len())?;
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps) = (T::of(self.beta1), T::of(self.beta2), T::of(self.eps));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::Invalid(format!("adam: tensor {i} shape mismatch")));
            }
            let lr = T::of(self.lrs[i] / bc1);
            let sq = T::of(bc2.sqrt());
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((x, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mj = b1 * *mj + (T::one() - b1) * gj;
                *vj = b2 * *vj + (T::one() - b2) * gj * gj;
                *x -= lr * *mj / (vj.sqrt() / sq + eps);
            }
        }
        Ok(())
    }
}

/// SGD with momentum and L2 weight decay added to the gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T: Scalar = f32> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    buf: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(count: usize, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            buf: vec![None; count],
        }
    }

    pub fn update(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        check_lists(params.len(), grads.len(), self.buf.len())?;
        let (lr, mu, wd) = (T::of(self.lr), T::of(self.momentum), T::of(self.weight_decay));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Invalid(format!("sgd: tensor {i} shape mismatch")));
            }
            let mut d: Vec<T> = g.data().iter().zip(p.data()).map(|(&gj, &x)| gj + wd * x).collect();
            if self.momentum != 0.0 {
                match &mut self.buf[i] {
                    Some(b) => {
                        for (bj, dj) in b.data_mut().iter_mut().zip(d.iter_mut()) {
                            *bj = mu * *bj + *dj;
                            *dj = *bj;
                        }
                    }
                    slot => *slot = Some(Tensor::new(p.shape().to_vec(), d.clone())?),
                }
            }
            for (x, dj) in p.data_mut().iter_mut().zip(d) {
                *x -= lr * dj;
            }
        }
        Ok(())
    }
}

fn check_lists(params: usize, grads: usize, state: usize) -> Result<()> {
    if params != grads || params != state {
        return Err(Error::Invalid(format!(
            "optimizer got {params} params, {grads} grads, state for {state}"
        )));
    }
    Ok(())
}

/// Step decay: the rate is multiplied by `factor` at each listed step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl StepSchedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| step >= m).count();
        self.base_lr * self.factor.powi(passed as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Tensor::<f64>::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = Tensor::new(vec![3], vec![0.3, -4.0, 1e-3]).unwrap();
        let mut opt = Adam::new(&[p.shape()], vec![0.1]).unwrap();
        opt.update(&mut [&mut p], &[g]).unwrap();
        let want = [0.9, -1.9, 0.4];
        for (a, b) in p.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = Tensor::<f64>::new(vec![2], vec![3.0, -1.0]).unwrap();
        let mut opt = Adam::new(&[p.shape()], vec![0.05]).unwrap();
        for _ in 0..2000 {
            let g = p.map(|x| 2.0 * x);
            opt.update(&mut [&mut p], &[g]).unwrap();
        }
        assert!(p.max_abs() < 1e-3);
    }

    #[test]
    fn sgd_momentum_matches_hand_rollout() {
        let mut p = Tensor::<f64>::new(vec![1], vec![1.0]).unwrap();
        let mut opt = Sgd::new(1, 0.1, 0.9, 0.5);
        // d1 = 2 + 0.5 = 2.5, p = 0.75; d2 = 0.9*2.5 + 2 + 0.375 = 4.625, p = 0.2875
        for _ in 0..2 {
            let g = Tensor::new(vec![1], vec![2.0]).unwrap();
            opt.update(&mut [&mut p], &[g]).unwrap();
        }
        assert!((p.data()[0] - 0.2875).abs() < 1e-12);
    }

    #[test]
    fn schedule_decays() {
        let s = StepSchedule {
            base_lr: 0.01,
            milestones: vec![10, 20],
            factor: 0.1,
        };
        assert_eq!(s.lr_at(9), 0.01);
        assert!((s.lr_at(10) - 0.001).abs() < 1e-15);
        assert!((s.lr_at(25) - 0.0001).abs() < 1e-15);
    }

    #[test]
    fn mismatched_lists_rejected() {
        let mut p = Tensor::<f32>::zeros(&[2]);
        let mut opt = Adam::new(&[p.shape()], vec![0.1]).unwrap();
        assert!(opt.update(&mut [&mut p], &[]).is_err());
    }
}
