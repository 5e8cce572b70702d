//! SGD with momentum, weight decay and learning-rate schedules.
//!
//! Update rule (decoupled nothing, decay folded into the gradient, the
//! classic form): `v <- m*v + g + wd*w; w <- w - lr*v`.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Cosine annealing to zero over `t_max` optimizer steps; the rate is
    /// held at zero past `t_max`.
    Cosine { t_max: usize },
}

impl LrSchedule {
    pub fn rate(&self, base_lr: f32, step: usize) -> f32 {
        match self {
            LrSchedule::Constant => base_lr,
            LrSchedule::Cosine { t_max } => {
                let t = step.min(*t_max) as f32 / *t_max as f32;
                base_lr * 0.5 * (1.0 + (std::f32::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Debug)]
pub struct SgdMomentum {
    base_lr: f32,
    momentum: f32,
    weight_decay: f32,
    schedule: LrSchedule,
    step: usize,
    velocity: BTreeMap<String, Vec<f32>>,
}

impl SgdMomentum {
    pub fn new(base_lr: f32, momentum: f32, weight_decay: f32, schedule: LrSchedule) -> Self {
        SgdMomentum {
            base_lr,
            momentum,
            weight_decay,
            schedule,
            step: 0,
            velocity: BTreeMap::new(),
        }
    }

    pub fn current_lr(&self) -> f32 {
        self.schedule.rate(self.base_lr, self.step)
    }

    /// Apply one step to `params` in place using `grads` (matched by name).
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        let lr = self.current_lr();
        for (name, grad) in grads {
            let param = params
                .get_mut(name)
                .ok_or_else(|| crate::error::Error::UnboundName(name.clone()))?;
            let velocity = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.numel()]);
            let mut data = param.clone().into_data();
            for ((w, v), g) in data.iter_mut().zip(velocity.iter_mut()).zip(grad.data()) {
                *v = self.momentum * *v + *g + self.weight_decay * *w;
                *w -= lr * *v;
            }
            *param = Tensor::new(param.shape().to_vec(), data)?;
        }
        self.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        let s = LrSchedule::Cosine { t_max: 10 };
        assert!((s.rate(1.0, 0) - 1.0).abs() < 1e-6);
        assert!((s.rate(1.0, 5) - 0.5).abs() < 1e-6);
        assert!(s.rate(1.0, 10).abs() < 1e-6);
        assert!(s.rate(1.0, 25).abs() < 1e-6);
    }

    #[test]
    fn plain_sgd_matches_hand_update() {
        let mut opt = SgdMomentum::new(0.1, 0.0, 0.0, LrSchedule::Constant);
        let mut params: BTreeMap<String, Tensor> =
            [("w".to_string(), Tensor::vector(&[1.0, -2.0]).unwrap())].into();
        let grads: BTreeMap<String, Tensor> =
            [("w".to_string(), Tensor::vector(&[0.5, 1.0]).unwrap())].into();
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(params["w"].data(), &[1.0 - 0.05, -2.0 - 0.1]);
    }

    #[test]
    fn momentum_accumulates() {
        let mut opt = SgdMomentum::new(1.0, 0.5, 0.0, LrSchedule::Constant);
        let mut params: BTreeMap<String, Tensor> =
            [("w".to_string(), Tensor::vector(&[0.0]).unwrap())].into();
        let grads: BTreeMap<String, Tensor> =
            [("w".to_string(), Tensor::vector(&[1.0]).unwrap())].into();
        opt.step(&mut params, &grads).unwrap(); // v=1, w=-1
        opt.step(&mut params, &grads).unwrap(); // v=1.5, w=-2.5
        assert!((params["w"].data()[0] + 2.5).abs() < 1e-6);
    }
}
