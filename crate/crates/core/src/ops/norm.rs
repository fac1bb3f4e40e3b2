//! Per-channel batch normalization over (N, H, W).

use crate::error::{Error, Result};
use crate::graph::{Graph, Op, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer. The affine pair
/// (gamma, beta) lives in the `ParamStore`; these buffers are not trainable.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BnState {
    pub const MOMENTUM: f64 = 0.1;
    pub const EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: Self::MOMENTUM,
            eps: Self::EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

pub struct BnForward {
    pub out: Tensor,
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub fn batchnorm_forward(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    state: &mut BnState,
    mode: Mode,
) -> Result<BnForward> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::pre(format!("batchnorm expects NCHW input, got {s:?}")));
    }
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    if c != state.channels() || gamma.len() != c || beta.len() != c {
        return Err(Error::ShapeMismatch {
            op: "batchnorm",
            lhs: s.to_vec(),
            rhs: vec![state.channels(), gamma.len(), beta.len()],
        });
    }
    let m = n * hw;
    if mode == Mode::Train && m < 2 {
        return Err(Error::pre("batchnorm in train mode needs N*H*W >= 2"));
    }
    let data = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    match mode {
        Mode::Train => {
            for ch in 0..c {
                let mut acc = 0.0;
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    acc += data[base..base + hw].iter().sum::<f64>();
                }
                let mu = acc / m as f64;
                let mut sq = 0.0;
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    sq += data[base..base + hw]
                        .iter()
                        .map(|v| (v - mu) * (v - mu))
                        .sum::<f64>();
                }
                mean[ch] = mu;
                var[ch] = sq / m as f64;
                let unbiased = sq / (m - 1) as f64;
                let mom = state.momentum;
                state.running_mean[ch] = (1.0 - mom) * state.running_mean[ch] + mom * mu;
                state.running_var[ch] = (1.0 - mom) * state.running_var[ch] + mom * unbiased;
            }
        }
        Mode::Eval => {
            mean.copy_from_slice(&state.running_mean);
            var.copy_from_slice(&state.running_var);
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
    let mut xhat = vec![0.0; data.len()];
    let mut out = vec![0.0; data.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                let h = (data[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                out[i] = gamma[ch] * h + beta[ch];
            }
        }
    }
    Ok(BnForward {
        out: Tensor::from_vec(s, out)?,
        xhat,
        inv_std,
    })
}

/// Returns `(d input, d gamma, d beta)`.
pub fn batchnorm_backward(
    shape: &[usize],
    gamma: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    batch_stats: bool,
    g: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let m = (n * hw) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                dgamma[ch] += g[i] * xhat[i];
                dbeta[ch] += g[i];
            }
        }
    }
    let mut dx = vec![0.0; g.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let scale = gamma[ch] * inv_std[ch];
            for i in base..base + hw {
                dx[i] = if batch_stats {
                    scale * (g[i] - dbeta[ch] / m - xhat[i] * dgamma[ch] / m)
                } else {
                    scale * g[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

impl Graph {
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &mut BnState,
        mode: Mode,
    ) -> Result<Var> {
        let f = batchnorm_forward(
            self.value(input),
            self.value(gamma).data(),
            self.value(beta).data(),
            state,
            mode,
        )?;
        Ok(self.push(
            f.out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat: f.xhat,
                inv_std: f.inv_std,
                batch_stats: mode == Mode::Train,
            },
        ))
    }
}
