use super::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Adam moment estimates for every parameter of one store.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store
            .ids()
            .map(|id| Tensor::zeros(store.value(id).shape()))
            .collect();
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update over every parameter in `store`.
///
/// Weight decay is folded into the gradient (`g + wd·θ`) before the moment
/// updates. Gradients are cleared afterwards.
pub fn adam_step<T: Real>(
    store: &mut ParamStore<T>,
    state: &mut AdamState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if state.first.len() != store.len() {
        return Err(Error::Config(format!(
            "optimizer tracks {} parameters, store has {}",
            state.first.len(),
            store.len()
        )));
    }
    if let Some(id) = store.ids().find(|&id| store.grad(id).is_none()) {
        return Err(Error::MissingGrad(store.name(id).to_string()));
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (T::lit(state.beta1), T::lit(state.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - state.beta1), T::lit(1.0 - state.beta2));
    let corr1 = T::lit(1.0 - state.beta1.powf(t));
    let corr2 = T::lit(1.0 - state.beta2.powf(t));
    let (lr, wd, eps) = (T::lit(lr), T::lit(weight_decay), T::lit(state.eps));

    for (((_, value, grad), m), v) in store
        .values_mut_with_grads()
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        let g = grad.take().expect("checked above");
        let params = value.data_mut();
        for (i, p) in params.iter_mut().enumerate() {
            let gi = g.data()[i] + wd * *p;
            let mi = b1 * m.data()[i] + one_b1 * gi;
            let vi = b2 * v.data()[i] + one_b2 * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / corr1;
            let v_hat = vi / corr2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[f64]) -> (ParamStore<f64>, super::super::ParamId) {
        let mut store = ParamStore::new();
        let id = store
            .register("theta", Tensor::from_f64(&[values.len()], values).unwrap())
            .unwrap();
        (store, id)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut store, id) = store_with(&[0.5, -1.0, 2.0]);
        let mut state = AdamState::new(&store);
        store.set_grad(id, Tensor::full(&[3], 1.0)).unwrap();
        adam_step(&mut store, &mut state, 0.001, 0.0).unwrap();
        let expect = [0.5 - 0.001, -1.0 - 0.001, 2.0 - 0.001];
        for (v, e) in store.value(id).data().iter().zip(expect) {
            assert!((v - e).abs() < 1e-9, "{v} vs {e}");
        }
        assert!(store.grad(id).is_none());
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut store, id) = store_with(&[0.5, -1.0]);
        let mut state = AdamState::new(&store);
        store.set_grad(id, Tensor::zeros(&[2])).unwrap();
        adam_step(&mut store, &mut state, 0.001, 0.0).unwrap();
        assert_eq!(store.value(id).data(), &[0.5, -1.0]);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let (mut store, _) = store_with(&[0.5]);
        let mut state = AdamState::new(&store);
        assert!(matches!(
            adam_step(&mut store, &mut state, 0.001, 0.0),
            Err(Error::MissingGrad(_))
        ));
    }

    #[test]
    fn minimizes_square() {
        let (mut store, id) = store_with(&[1.0]);
        let mut state = AdamState::new(&store);
        for _ in 0..100 {
            let theta = store.value(id).data()[0];
            store.set_grad(id, Tensor::full(&[1], 2.0 * theta)).unwrap();
            adam_step(&mut store, &mut state, 0.1, 0.0).unwrap();
        }
        assert!(store.value(id).data()[0].abs() < 0.2);
    }

    #[test]
    fn weight_decay_adds_to_gradient() {
        // zero gradient with decay behaves like gradient wd·θ
        let (mut a, ia) = store_with(&[2.0]);
        let (mut b, ib) = store_with(&[2.0]);
        let (mut sa, mut sb) = (AdamState::new(&a), AdamState::new(&b));
        a.set_grad(ia, Tensor::zeros(&[1])).unwrap();
        adam_step(&mut a, &mut sa, 0.01, 0.5).unwrap();
        b.set_grad(ib, Tensor::full(&[1], 1.0)).unwrap();
        adam_step(&mut b, &mut sb, 0.01, 0.0).unwrap();
        assert_eq!(a.value(ia).data(), b.value(ib).data());
    }
}
