use crate::error::{Error, Result};
use crate::graph::{Graph, Op, Var};
use crate::tensor::Tensor;

/// `input[N,D] · weight[K,D]ᵀ + bias[K]`.
pub fn linear_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (is, ws, bs) = (input.shape(), weight.shape(), bias.shape());
    if is.len() != 2 || ws.len() != 2 || is[1] != ws[1] || bs != [ws[0]] {
        return Err(Error::ShapeMismatch {
            op: "linear",
            lhs: is.to_vec(),
            rhs: ws.to_vec(),
        });
    }
    let (n, d, k) = (is[0], is[1], ws[0]);
    let (x, w, b) = (input.data(), weight.data(), bias.data());
    let mut out = Vec::with_capacity(n * k);
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        for j in 0..k {
            let wj = &w[j * d..(j + 1) * d];
            out.push(row.iter().zip(wj).map(|(a, b)| a * b).sum::<f64>() + b[j]);
        }
    }
    Tensor::from_vec(&[n, k], out)
}

/// Returns `(d input, d weight, d bias)`.
pub fn linear_backward(input: &Tensor, weight: &Tensor, g: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, d) = (input.shape()[0], input.shape()[1]);
    let k = weight.shape()[0];
    let (x, w) = (input.data(), weight.data());
    let mut gi = vec![0.0; n * d];
    let mut gw = vec![0.0; k * d];
    let mut gb = vec![0.0; k];
    for r in 0..n {
        for j in 0..k {
            let go = g[r * k + j];
            gb[j] += go;
            for t in 0..d {
                gi[r * d + t] += go * w[j * d + t];
                gw[j * d + t] += go * x[r * d + t];
            }
        }
    }
    (gi, gw, gb)
}

impl Graph {
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = linear_forward(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(
            out,
            Op::Linear {
                input,
                weight,
                bias,
            },
        ))
    }
}
