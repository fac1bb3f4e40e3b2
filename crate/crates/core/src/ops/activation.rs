use crate::graph::{Graph, Op, Var};
use crate::tensor::Tensor;

pub fn relu_forward(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

/// Subgradient at 0 is 0.
pub fn relu_backward(x: &Tensor, g: &[f64]) -> Vec<f64> {
    x.data()
        .iter()
        .zip(g)
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect()
}

impl Graph {
    pub fn relu(&mut self, input: Var) -> Var {
        let out = relu_forward(self.value(input));
        self.push(out, Op::Relu(input))
    }
}
