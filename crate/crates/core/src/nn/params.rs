use std::collections::HashMap;

use crate::nn::{NnError, Tensor};
use crate::scalar::Scalar;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub trainable: bool,
    /// Whether decoupled weight decay applies (off for biases, norms and the
    /// contrastive temperature).
    pub decay: bool,
}

/// Named parameter tensors with gradient buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>, decay: bool) -> Result<ParamId, NnError> {
        if self.index.contains_key(name) {
            return Err(NnError::DuplicateParam(name.to_string()));
        }
        let id = ParamId(self.params.len());
        let grad = Some(Tensor::zeros(value.shape()));
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad,
            trainable: true,
            decay,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Resets every trainable gradient buffer to zeros.
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            if p.trainable {
                match &mut p.grad {
                    Some(g) => g.data_mut().iter_mut().for_each(|x| *x = T::zero()),
                    None => p.grad = Some(Tensor::zeros(p.value.shape())),
                }
            }
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[T]) {
        let p = &mut self.params[id.0];
        let buf = p.grad.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
        for (g, d) in buf.data_mut().iter_mut().zip(grad) {
            *g += *d;
        }
    }

    pub fn grad_norm(&self) -> T {
        let mut sq = T::zero();
        for p in self.params.iter().filter(|p| p.trainable) {
            if let Some(g) = &p.grad {
                sq += g.data().iter().map(|&x| x * x).sum::<T>();
            }
        }
        sq.sqrt()
    }

    /// Rescales gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: T) -> T {
        let norm = self.grad_norm();
        if norm > max_norm && norm > T::zero() {
            let scale = max_norm / norm;
            for p in self.params.iter_mut().filter(|p| p.trainable) {
                if let Some(g) = &mut p.grad {
                    g.data_mut().iter_mut().for_each(|x| *x *= scale);
                }
            }
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(Tensor::cast),
                    trainable: p.trainable,
                    decay: p.decay,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::zeros(&[2]), true).unwrap();
        assert!(matches!(
            store.add("w", Tensor::zeros(&[2]), true),
            Err(NnError::DuplicateParam(_))
        ));
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::zeros(&[2]), true).unwrap();
        store.accumulate_grad(a, &[3.0, 4.0]);
        let before = store.clip_grad_norm(1.0);
        assert_eq!(before, 5.0);
        assert!((store.grad_norm() - 1.0).abs() < 1e-12);
    }
}
