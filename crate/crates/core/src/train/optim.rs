//! SGD with Nesterov momentum, uniform weight decay and a step schedule.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MOMENTUM: f64 = 0.9;
pub const WEIGHT_DECAY: f64 = 1e-4;
pub const BASE_LR: f64 = 0.1;

/// Epochs at which the learning rate drops by 10x.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// Fractions of the total epoch count; boundary `floor(f * total)`.
    Fractions(Vec<f64>),
    Milestones(Vec<usize>),
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::Fractions(alloc::vec![0.5, 0.75])
    }
}

impl Schedule {
    pub fn drops_before(&self, epoch: usize, total: usize) -> usize {
        match self {
            Schedule::Fractions(fs) => fs
                .iter()
                .filter(|&&f| epoch >= num_traits::Float::floor(f * total as f64) as usize)
                .count(),
            Schedule::Milestones(ms) => ms.iter().filter(|&&m| epoch >= m).count(),
        }
    }

    pub fn lr_at(&self, base_lr: f64, epoch: usize, total: usize) -> f64 {
        let mut lr = base_lr;
        for _ in 0..self.drops_before(epoch, total) {
            lr /= 10.0;
        }
        lr
    }
}

/// Default schedule: 0.1, divided by 10 at 50% and 75% of training.
pub fn lr_at(epoch: usize, total_epochs: usize) -> f64 {
    Schedule::default().lr_at(BASE_LR, epoch, total_epochs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    /// One buffer per registered parameter, in registration order.
    pub velocities: Vec<Tensor<T>>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub base_lr: f64,
    pub schedule: Schedule,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self {
            velocities: store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect(),
            momentum: MOMENTUM,
            weight_decay: WEIGHT_DECAY,
            base_lr: BASE_LR,
            schedule: Schedule::default(),
        }
    }

    pub fn lr_at(&self, epoch: usize, total: usize) -> f64 {
        self.schedule.lr_at(self.base_lr, epoch, total)
    }
}

/// One update of every parameter:
/// `g' = g + wd * w; v <- mu * v - lr * g'; w <- w + mu * v - lr * g'`.
/// Returns the number of scalars updated.
pub fn sgd_nesterov_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut OptimizerState<T>, lr: f64) -> Result<usize> {
    if state.velocities.len() != store.len() {
        return Err(Error::Usage(format!(
            "optimizer holds {} velocity buffers for {} parameters",
            state.velocities.len(),
            store.len()
        )));
    }
    let (mu, wd, lr) = (T::lit(state.momentum), T::lit(state.weight_decay), T::lit(lr));
    let mut touched = 0;
    for (p, v) in store.iter_mut().zip(&mut state.velocities) {
        let grad = p
            .grad
            .as_ref()
            .ok_or_else(|| Error::Usage(format!("parameter {} has no gradient", p.name)))?;
        if v.shape() != p.value.shape() {
            return Err(Error::Usage(format!("velocity of {} has shape {:?}", p.name, v.shape())));
        }
        for ((w, vel), &g) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(grad.data()) {
            let g = g + wd * *w;
            *vel = mu * *vel - lr * g;
            *w = *w + mu * *vel - lr * g;
        }
        touched += p.value.numel();
    }
    Ok(touched)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{ParamGroup, ParamKind};

    fn one_scalar(w: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.register("w", ParamKind::DenseWeight, ParamGroup::Other, Tensor::full(&[1], w)).unwrap();
        s
    }

    fn set_grad(s: &mut ParamStore<f64>, g: f64) {
        s.iter_mut().for_each(|p| p.grad = Some(Tensor::full(&[1], g)));
    }

    #[test]
    fn two_hand_steps() {
        let mut s = one_scalar(1.0);
        let mut st = OptimizerState::new(&s);
        st.weight_decay = 0.0;
        set_grad(&mut s, 1.0);
        sgd_nesterov_step(&mut s, &mut st, 0.1).unwrap();
        assert!((st.velocities[0].data()[0] + 0.1).abs() < 1e-15);
        assert!((s.iter().next().unwrap().1.value.data()[0] - 0.81).abs() < 1e-15);
        sgd_nesterov_step(&mut s, &mut st, 0.1).unwrap();
        assert!((st.velocities[0].data()[0] + 0.19).abs() < 1e-15);
        assert!((s.iter().next().unwrap().1.value.data()[0] - 0.539).abs() < 1e-15);
    }

    #[test]
    fn plain_sgd_without_momentum() {
        let mut s = one_scalar(2.0);
        let mut st = OptimizerState::new(&s);
        st.momentum = 0.0;
        st.weight_decay = 0.0;
        set_grad(&mut s, 3.0);
        sgd_nesterov_step(&mut s, &mut st, 0.5).unwrap();
        assert_eq!(s.iter().next().unwrap().1.value.data()[0], 0.5);
    }

    #[test]
    fn zero_gradient_fixed_point_and_decay() {
        let mut s = one_scalar(-2.0);
        let mut st = OptimizerState::new(&s);
        st.weight_decay = 0.0;
        set_grad(&mut s, 0.0);
        sgd_nesterov_step(&mut s, &mut st, 0.1).unwrap();
        assert_eq!(s.iter().next().unwrap().1.value.data()[0], -2.0);
        st.weight_decay = 1e-4;
        sgd_nesterov_step(&mut s, &mut st, 0.1).unwrap();
        assert!(s.iter().next().unwrap().1.value.data()[0] > -2.0);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut s = one_scalar(1.0);
        let mut st = OptimizerState::new(&s);
        let err = sgd_nesterov_step(&mut s, &mut st, 0.1).unwrap_err();
        assert!(alloc::format!("{err}").contains("w"));
    }

    #[test]
    fn schedule_boundaries() {
        assert_eq!(lr_at(0, 300), 0.1);
        assert!((lr_at(149, 300) - 0.1).abs() < 1e-15);
        assert!((lr_at(160, 300) - 0.01).abs() < 1e-15);
        assert!((lr_at(250, 300) - 0.001).abs() < 1e-15);
        let s = Schedule::Milestones(alloc::vec![30, 60, 90]);
        let lrs: Vec<f64> = [29, 30, 60, 95].iter().map(|&e| s.lr_at(0.1, e, 100)).collect();
        assert_eq!(lrs, [0.1, 0.1 / 10.0, 0.1 / 100.0, 0.1 / 1000.0]);
    }
}
