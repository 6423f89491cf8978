use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// SGD with classic (undampened) momentum:
/// `v <- momentum * v + g`, `p <- p - lr * v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub momentum: f64,
    buffers: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(store: &ParamStore<T>, momentum: f64) -> Self {
        Self {
            momentum,
            buffers: store.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect(),
        }
    }

    pub fn from_buffers(momentum: f64, buffers: Vec<Tensor<T>>) -> Self {
        Self { momentum, buffers }
    }

    pub fn buffers(&self) -> &[Tensor<T>] {
        &self.buffers
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.buffers.len() != store.len() {
            return Err(Error::invalid(
                "sgd_step",
                format!("{} momentum buffers for {} parameters", self.buffers.len(), store.len()),
            ));
        }
        if let Some(p) = store.iter().find(|p| p.grad.is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        let mu = T::lit(self.momentum);
        let lr = T::lit(lr);
        for (p, v) in store.iter_mut().zip(&mut self.buffers) {
            let g = p.grad.as_ref().expect("checked above");
            for ((w, m), &gv) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *m = mu * *m + gv;
                *w -= lr * *m;
            }
        }
        Ok(())
    }
}
