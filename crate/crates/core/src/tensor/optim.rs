use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A trainable tensor together with its gradient slot and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub grad: Option<Vec<T>>,
    pub adam_m: Vec<T>,
    pub adam_v: Vec<T>,
    pub step_count: u64,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>) -> Self {
        let n = tensor.numel();
        Self {
            name: name.into(),
            tensor,
            grad: None,
            adam_m: vec![T::zero(); n],
            adam_v: vec![T::zero(); n],
            step_count: 0,
        }
    }
}

/// Ordered, named collection of parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        self.params.push(Parameter::new(name, tensor));
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Sets every gradient slot to zeros.
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            match &mut p.grad {
                Some(g) => g.iter_mut().for_each(|v| *v = T::zero()),
                None => p.grad = Some(vec![T::zero(); p.tensor.numel()]),
            }
        }
    }

    /// Drops every gradient slot.
    pub fn clear_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[T]) -> Result<()> {
        let p = self
            .params
            .get_mut(id.0)
            .ok_or_else(|| Error::Backward(format!("parameter index {} not in store", id.0)))?;
        if g.len() != p.tensor.numel() {
            return Err(Error::Shape {
                op: "backward",
                lhs: p.tensor.shape().to_vec(),
                rhs: vec![g.len()],
            });
        }
        match &mut p.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => p.grad = Some(g.to_vec()),
        }
        Ok(())
    }
}

/// Bias-corrected Adam.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Applies one update to every parameter in `store`.
    ///
    /// All gradients are checked before any parameter is touched, so a
    /// missing gradient leaves the store unchanged.
    pub fn step<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if let Some(p) = store.params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let (lr, eps) = (T::from_f64_lossy(self.lr), T::from_f64_lossy(self.eps));
        for p in &mut store.params {
            p.step_count += 1;
            let t = p.step_count as i32;
            let bc1 = T::one() - b1.powi(t);
            let bc2 = T::one() - b2.powi(t);
            let grad = p.grad.as_ref().expect("checked above");
            let data = p.tensor.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                p.adam_m[i] = b1 * p.adam_m[i] + (T::one() - b1) * g;
                p.adam_v[i] = b2 * p.adam_v[i] + (T::one() - b2) * g * g;
                let m_hat = p.adam_m[i] / bc1;
                let v_hat = p.adam_v[i] / bc2;
                data[i] = data[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
