//! Weight initialization: He normal for convolutions, Xavier uniform for
//! dense weights, identity affine for batch norm, zero biases.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::param::{ParamId, ParamKind, ParamStore, Parameter};
use crate::scalar::Scalar;

pub fn he_std(fan_in: usize) -> f64 {
    num_traits::Float::sqrt(2.0 / fan_in as f64)
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    num_traits::Float::sqrt(6.0 / (fan_in + fan_out) as f64)
}

pub fn init_param<T: Scalar, R: Rng + ?Sized>(p: &mut Parameter<T>, rng: &mut R) {
    match p.kind {
        ParamKind::ConvKernel => {
            let fan_in: usize = p.value.shape()[1..].iter().product();
            let normal = Normal::new(0.0, he_std(fan_in)).expect("positive std");
            for v in p.value.data_mut() {
                *v = T::lit(normal.sample(rng));
            }
        }
        ParamKind::DenseWeight => {
            let (fan_in, fan_out) = (p.value.shape()[0], p.value.shape()[1]);
            let b = xavier_bound(fan_in, fan_out);
            let uniform = Uniform::new_inclusive(-b, b).expect("finite bound");
            for v in p.value.data_mut() {
                *v = T::lit(uniform.sample(rng));
            }
        }
        ParamKind::BnGamma => p.value.data_mut().fill(T::one()),
        ParamKind::BnBeta | ParamKind::DenseBias => p.value.data_mut().fill(T::zero()),
    }
}

/// Initializes the listed parameters in order.
pub fn init_ids<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, ids: &[ParamId], rng: &mut R) {
    for &id in ids {
        init_param(store.get_mut(id), rng);
    }
}

/// Re-initializes every parameter in registration order.
pub fn init_params<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R) {
    for p in store.iter_mut() {
        init_param(p, rng);
    }
}
