use crate::scalar::Real;
use crate::tensor::Tensor;

/// A named trainable tensor together with its gradient slot and the
/// first/second moment state used by the optimizer.
#[derive(Clone, Debug)]
pub struct Parameter<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub adam_m: Tensor<T>,
    pub adam_v: Tensor<T>,
    /// Number of optimizer steps applied so far.
    pub adam_t: u64,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let shape = value.shape().to_vec();
        Parameter {
            name: name.into(),
            value,
            grad: None,
            adam_m: Tensor::zeros(shape.clone()),
            adam_v: Tensor::zeros(shape),
            adam_t: 0,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}
