//! Define-by-run reverse-mode autodiff.
//!
//! Every operation appends a node to the graph; node ids are assigned in
//! execution order, so the node list is already topologically sorted and
//! backward is a single reverse sweep.

use crate::error::{Error, Result};
use crate::ops;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Relu(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    ChannelMean {
        input: Var,
        channel: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    param_sites: Vec<(Var, String)>,
    done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Registers a non-parameter leaf (an input batch or constant).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Registers one use-site of the parameter `name`.
    pub fn param(&mut self, store: &mut ParamStore, name: &str) -> Result<Var> {
        store.record_use(name)?;
        let mut value = store.get(name)?.clone();
        value.clear_grad();
        let v = self.push(value, Op::Leaf);
        self.param_sites.push((v, name.to_string()));
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Number of use-sites recorded in this graph for `name`.
    pub fn sites_of(&self, name: &str) -> usize {
        self.param_sites.iter().filter(|(_, n)| n == name).count()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::from_vec(x.shape(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::from_vec(x.shape(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Mean of one channel of an NCHW activation, averaged over N, H and W.
    pub fn channel_mean(&mut self, a: Var, channel: usize) -> Result<Var> {
        let x = self.value(a);
        let s = x.shape();
        if s.len() != 4 || channel >= s[1] {
            return Err(Error::pre(format!(
                "channel {channel} out of range for shape {s:?}"
            )));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let mut total = 0.0;
        for i in 0..n {
            let base = (i * c + channel) * hw;
            total += x.data()[base..base + hw].iter().sum::<f64>();
        }
        let out = Tensor::scalar(total / (n * hw) as f64);
        Ok(self.push(out, Op::ChannelMean { input: a, channel }))
    }

    /// Reverse sweep from `loss`; parameter gradients are summed over
    /// use-sites and added into `params`. Every parameter ends with a
    /// populated gradient buffer (zeros when unused).
    pub fn backward(&mut self, loss: Var, params: &mut ParamStore) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Graph("backward called before any forward op".into()));
        }
        if self.done {
            return Err(Error::Graph("backward already ran on this graph".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Graph(format!("loss node {} not in graph", loss.0)));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Graph(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        // Validate parameter names before mutating anything.
        for (_, name) in &self.param_sites {
            params.get(name)?;
        }
        self.done = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            for (target, contrib) in self.local_backward(i, &g)? {
                match &mut grads[target.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[i] = Some(g);
        }

        for (v, name) in &self.param_sites {
            let t = params.get_mut(name)?;
            match &grads[v.0] {
                Some(g) => t.accumulate_grad(g)?,
                None => {
                    if t.grad().is_none() {
                        t.zero_grad();
                    }
                }
            }
        }
        for (_, p) in params.iter_mut() {
            if p.tensor.grad().is_none() {
                p.tensor.zero_grad();
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn local_backward(&self, i: usize, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        Ok(match &self.nodes[i].op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul(a, b) => {
                let (x, y) = (val(*a).data(), val(*b).data());
                let ga = g.iter().zip(y).map(|(g, y)| g * y).collect();
                let gb = g.iter().zip(x).map(|(g, x)| g * x).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).numel()])],
            Op::Relu(a) => vec![(*a, ops::activation::relu_backward(val(*a), g))],
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let (gi, gk) =
                    ops::conv::conv2d_backward(val(*input), val(*kernel), g, *stride, *padding);
                vec![(*input, gi), (*kernel, gk)]
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (gi, gg, gb) = ops::norm::batchnorm_backward(
                    val(*input).shape(),
                    val(*gamma).data(),
                    xhat,
                    inv_std,
                    *batch_stats,
                    g,
                );
                vec![(*input, gi), (*gamma, gg), (*beta, gb)]
            }
            Op::MaxPool2 { input, argmax } => {
                let mut gi = vec![0.0; val(*input).numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    gi[src] += g[o];
                }
                vec![(*input, gi)]
            }
            Op::GlobalAvgPool(a) => vec![(*a, ops::pool::global_avg_pool_backward(val(*a), g))],
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (gi, gw, gb) = ops::linear::linear_backward(val(*input), val(*weight), g);
                vec![(*input, gi), (*weight, gw), (*bias, gb)]
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let k = val(*logits).shape()[1];
                let n = labels.len();
                let mut gl = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    gl[r * k + y] -= 1.0;
                }
                let scale = g[0] / n as f64;
                gl.iter_mut().for_each(|v| *v *= scale);
                vec![(*logits, gl)]
            }
            Op::ChannelMean { input, channel } => {
                let x = val(*input);
                let s = x.shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let mut gi = vec![0.0; x.numel()];
                let w = g[0] / (n * hw) as f64;
                for b in 0..n {
                    let base = (b * c + channel) * hw;
                    gi[base..base + hw].fill(w);
                }
                vec![(*input, gi)]
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, name, t).unwrap();
        s
    }

    #[test]
    fn shared_scalar_sum_rule() {
        let mut store = store_with("w", Tensor::from_vec(&[1], vec![0.7]).unwrap());
        let mut g = Graph::new();
        let w1 = g.param(&mut store, "w").unwrap();
        let x1 = g.input(Tensor::from_vec(&[1], vec![2.0]).unwrap());
        let w2 = g.param(&mut store, "w").unwrap();
        let x2 = g.input(Tensor::from_vec(&[1], vec![3.0]).unwrap());
        let a = g.mul(w1, x1).unwrap();
        let b = g.mul(w2, x2).unwrap();
        let loss = g.add(a, b).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get("w").unwrap().grad().unwrap(), &[5.0]);
        assert_eq!(store.use_count("w"), 2);
        assert_eq!(g.sites_of("w"), 2);
    }

    #[test]
    fn unused_param_gets_zero_grad() {
        let mut store = store_with("w", Tensor::full(&[3], 1.0).unwrap());
        store.insert("unused", "unused", Tensor::full(&[2, 2], 4.0).unwrap()).unwrap();
        let mut g = Graph::new();
        let w = g.param(&mut store, "w").unwrap();
        let loss = g.sum(w);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get("unused").unwrap().grad().unwrap(), &[0.0; 4]);
        assert_eq!(store.get("w").unwrap().grad().unwrap(), &[1.0; 3]);
    }

    #[test]
    fn rejects_non_scalar_loss_and_empty_graph() {
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        assert!(matches!(
            g.backward(Var(0), &mut store),
            Err(Error::Graph(_))
        ));
        let x = g.input(Tensor::full(&[2], 1.0).unwrap());
        assert!(g.backward(x, &mut store).is_err());
    }

    #[test]
    fn backward_runs_once() {
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[2], 1.0).unwrap());
        let s = g.sum(x);
        g.backward(s, &mut store).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
        assert!(g.backward(s, &mut store).is_err());
    }

    #[test]
    fn fan_out_accumulates_in_graph() {
        // y = sum(x * x) through two reads of the same node.
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let y = g.sum(sq);
        g.backward(y, &mut store).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }
}
