use crate::error::{Error, Result};
use crate::graph::{Graph, Op, Var};
use crate::tensor::Tensor;

/// 2×2 max pooling with stride 2. Returns the output and, per output
/// element, the flat input index it was taken from (first maximum in
/// row-major window order).
pub fn maxpool2_forward(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::pre(format!("maxpool2 expects NCHW input, got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::pre(format!("maxpool2 needs even H and W, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let data = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::from_vec(&[n, c, oh, ow], out)?, argmax))
}

pub fn global_avg_pool_forward(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::pre(format!("global_avg_pool expects NCHW input, got {s:?}")));
    }
    let hw = s[2] * s[3];
    let out = x
        .data()
        .chunks(hw)
        .map(|p| p.iter().sum::<f64>() / hw as f64)
        .collect();
    Tensor::from_vec(&[s[0], s[1]], out)
}

pub fn global_avg_pool_backward(x: &Tensor, g: &[f64]) -> Vec<f64> {
    let s = x.shape();
    let hw = s[2] * s[3];
    let mut gi = Vec::with_capacity(x.numel());
    for &v in g {
        gi.extend(std::iter::repeat_n(v / hw as f64, hw));
    }
    gi
}

impl Graph {
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = maxpool2_forward(self.value(input))?;
        Ok(self.push(out, Op::MaxPool2 { input, argmax }))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let out = global_avg_pool_forward(self.value(input))?;
        Ok(self.push(out, Op::GlobalAvgPool(input)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    #[test]
    fn single_window() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = maxpool2_forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn ties_route_to_first_element() {
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[1, 1, 4, 4], 0.5).unwrap());
        let p = g.maxpool2(x).unwrap();
        assert_eq!(g.value(p).data(), &[0.5; 4]);
        let s = g.sum(p);
        g.backward(s, &mut store).unwrap();
        let grad = g.grad(x).unwrap();
        let expected: Vec<f64> = (0..16)
            .map(|i| if (i / 4) % 2 == 0 && (i % 4) % 2 == 0 { 1.0 } else { 0.0 })
            .collect();
        assert_eq!(grad, expected.as_slice());
    }

    #[test]
    fn odd_extent_rejected() {
        assert!(maxpool2_forward(&Tensor::zeros(&[1, 1, 3, 4]).unwrap()).is_err());
        assert!(maxpool2_forward(&Tensor::zeros(&[1, 1, 4, 5]).unwrap()).is_err());
    }

    #[test]
    fn global_average() {
        let c = Tensor::full(&[2, 3, 4, 4], 1.5).unwrap();
        assert_eq!(global_avg_pool_forward(&c).unwrap().data(), &[1.5; 6]);
        let x = Tensor::from_vec(&[1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        assert_eq!(global_avg_pool_forward(&x).unwrap().data(), &[2.0]);

        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let xv = g.input(Tensor::randn(&[1, 2, 2, 3], 0, 1.0).unwrap());
        let p = g.global_avg_pool(xv).unwrap();
        let s = g.sum(p);
        g.backward(s, &mut store).unwrap();
        assert!(g.grad(xv).unwrap().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
    }
}
