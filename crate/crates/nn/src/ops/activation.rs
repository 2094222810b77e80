use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn forward_inplace(self, t: &mut Tensor) {
        match self {
            Activation::Linear => {}
            Activation::Relu => t.data_mut().iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Sigmoid => t.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v)),
        }
    }

    /// Converts a gradient w.r.t. the activation output into one w.r.t. its
    /// input, using only the activation's output `y`.
    pub fn backward_inplace(self, y: &Tensor, g: &mut Tensor) -> Result<()> {
        if y.shape() != g.shape() {
            return Err(NnError::shape("activation_backward", format!("{:?}", y.shape()), format!("{:?}", g.shape())));
        }
        match self {
            Activation::Linear => {}
            Activation::Relu => g
                .data_mut()
                .iter_mut()
                .zip(y.data())
                .for_each(|(g, &y)| {
                    if y <= 0.0 {
                        *g = 0.0
                    }
                }),
            Activation::Sigmoid => g
                .data_mut()
                .iter_mut()
                .zip(y.data())
                .for_each(|(g, &y)| *g *= y * (1.0 - y)),
        }
        Ok(())
    }
}

fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    Activation::Relu.forward_inplace(&mut y);
    y
}

pub fn sigmoid_forward(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    Activation::Sigmoid.forward_inplace(&mut y);
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values() {
        let x = Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.0]);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        let x = Tensor::new(vec![3], vec![-200.0, 0.0, 200.0]).unwrap();
        let y = sigmoid_forward(&x);
        assert_eq!(y.data(), &[0.0, 0.5, 1.0]);
        assert!(y.all_finite());
    }
}
