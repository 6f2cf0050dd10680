use serde::{Deserialize, Serialize};

use crate::nn::{NnError, ParamStore, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment accumulators of an AdamW optimizer, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros = |_| -> Vec<Tensor<T>> {
            params
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape()))
                .collect()
        };
        Self {
            config,
            step: 0,
            first: zeros(()),
            second: zeros(()),
        }
    }
}

/// One AdamW update with decoupled weight decay. Gradients are left in place.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    state: &mut OptimState<T>,
) -> Result<(), NnError> {
    if state.first.len() != params.len() || state.second.len() != params.len() {
        return Err(NnError::InvalidArgument(format!(
            "optimizer tracks {} parameters, store has {}",
            state.first.len(),
            params.len()
        )));
    }
    for (_, p) in params.iter() {
        if p.trainable && p.grad.is_none() {
            return Err(NnError::MissingGradient(p.name.clone()));
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let lr = T::lit(c.lr);
    let b1 = T::lit(c.beta1);
    let b2 = T::lit(c.beta2);
    let eps = T::lit(c.eps);
    let bc1 = T::one() - T::lit(c.beta1.powi(t));
    let bc2 = T::one() - T::lit(c.beta2.powi(t));
    let wd = T::lit(c.weight_decay);

    for (id, p) in params.iter_mut() {
        if !p.trainable {
            continue;
        }
        let grad = p.grad.as_ref().expect("checked above").data();
        let m = state.first[id.0].data_mut();
        let v = state.second[id.0].data_mut();
        let decay = if p.decay { wd } else { T::zero() };
        for (((w, &g), mi), vi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(grad)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = b1 * *mi + (T::one() - b1) * g;
            *vi = b2 * *vi + (T::one() - b2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w = *w - lr * decay * *w - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(x: f64, decay: bool) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(x), decay).unwrap();
        s
    }

    #[test]
    fn zero_gradients_without_decay_leave_parameters() {
        let mut s = single(0.7, true);
        let mut st = OptimState::new(
            &s,
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        adamw_step(&mut s, &mut st).unwrap();
        assert_eq!(s.value(crate::nn::ParamId(0)).item(), 0.7);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn decoupled_decay_shrinks_by_lr_times_decay() {
        let mut s = single(2.0, true);
        let cfg = AdamWConfig {
            lr: 0.05,
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut st = OptimState::new(&s, cfg);
        adamw_step(&mut s, &mut st).unwrap();
        let want = 2.0 * (1.0 - 0.05 * 0.1);
        assert!((s.value(crate::nn::ParamId(0)).item() - want).abs() < 1e-15);
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        let mut s = single(1.0, false);
        let mut st = OptimState::new(
            &s,
            AdamWConfig {
                lr: 0.1,
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        let id = crate::nn::ParamId(0);
        for _ in 0..200 {
            s.zero_grad();
            let x = s.value(id).item();
            s.accumulate_grad(id, &[2.0 * x]);
            adamw_step(&mut s, &mut st).unwrap();
        }
        assert!(
            s.value(id).item().abs() < 1e-3,
            "x = {}",
            s.value(id).item()
        );
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut s = single(1.0, false);
        s.get_mut(crate::nn::ParamId(0)).grad = None;
        let mut st = OptimState::new(&s, AdamWConfig::default());
        assert!(matches!(
            adamw_step(&mut s, &mut st),
            Err(NnError::MissingGradient(_))
        ));
    }
}
