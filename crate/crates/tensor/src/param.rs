use crate::tensor::Tensor;

/// A named trainable tensor. The gradient accumulator always exists; frozen
/// parameters are never updated by the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    name: String,
    tensor: Tensor,
    frozen: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Self {
            name: name.into(),
            tensor: tensor.with_grad(),
            frozen: false,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.tensor.data()
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.tensor.data_mut()
    }

    pub fn grad(&self) -> &[f64] {
        self.tensor.grad().expect("parameters always carry a gradient buffer")
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        self.tensor.grad_mut().expect("parameters always carry a gradient buffer")
    }

    pub(crate) fn data_and_grad_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        let (d, g) = self.tensor.parts_mut();
        (d, g.expect("parameters always carry a gradient buffer"))
    }

    pub fn zero_grad(&mut self) {
        self.tensor.zero_grad();
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn grad_norm(&self) -> f64 {
        self.grad().iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}
