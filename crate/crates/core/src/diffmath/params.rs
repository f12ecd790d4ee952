use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors and their gradient accumulators.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Registers a tensor; names are unique so nothing is registered twice.
    pub fn register(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.names.iter().any(|n| n == name) {
            return Err(Error::Config(format!("parameter `{name}` registered twice")));
        }
        self.names.push(name.to_string());
        self.values.push(value);
        self.grads.push(None);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn set_grad(&mut self, id: ParamId, grad: Tensor<T>) -> Result<()> {
        if grad.shape() != self.values[id.0].shape() {
            return Err(Error::shape(
                "set_grad",
                format!(
                    "gradient {:?} for `{}` of shape {:?}",
                    grad.shape(),
                    self.names[id.0],
                    self.values[id.0].shape()
                ),
            ));
        }
        self.grads[id.0] = Some(grad);
        Ok(())
    }

    /// Adds into the gradient accumulator, creating it if absent.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor<T>) {
        match &mut self.grads[id.0] {
            Some(g) => g.add_assign(grad),
            slot @ None => *slot = Some(grad.clone()),
        }
    }

    pub fn clear_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub(crate) fn values_mut_with_grads(
        &mut self,
    ) -> impl Iterator<Item = (&str, &mut Tensor<T>, &mut Option<Tensor<T>>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter_mut())
            .zip(self.grads.iter_mut())
            .map(|((n, v), g)| (n, v, g))
    }

    pub fn total_len(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f64>::new();
        store.register("w", Tensor::zeros(&[2])).unwrap();
        assert!(store.register("w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn grad_accumulates() {
        let mut store = ParamStore::<f64>::new();
        let id = store.register("w", Tensor::zeros(&[2])).unwrap();
        let g = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        store.accumulate_grad(id, &g);
        store.accumulate_grad(id, &g);
        assert_eq!(store.grad(id).unwrap().data(), &[2.0, 4.0]);
    }
}
