#![allow(dead_code)]

use anchorconv::arch::{Network, NetworkSpec};
use anchorconv::ops::Mode;
use anchorconv::{Graph, ParamStore, Result, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_FLOOR)
}

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, seed, 1.0).unwrap()
}

/// Graph whose scalar loss is `sum(out * proj)`, or `out` when scalar.
fn forward<F>(build: &F, inputs: &[Tensor], proj_seed: u64) -> (Graph, Var, Vec<Var>)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let loss = if g.value(out).is_scalar() {
        out
    } else {
        let r = rand_tensor(g.value(out).shape(), proj_seed);
        let r = g.input(r);
        let m = g.mul(out, r).unwrap();
        g.sum(m)
    };
    (g, loss, vars)
}

/// Largest relative error between backward and central differences over
/// every element of every input.
pub fn check_inputs<F>(build: F, inputs: Vec<Tensor>) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let proj_seed = 0xfeed;
    let (mut g, loss, vars) = forward(&build, &inputs, proj_seed);
    g.backward(loss, &mut ParamStore::new()).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| g.grad(*v).unwrap().to_vec()).collect();

    let eval = |inp: &[Tensor]| {
        let (g, loss, _) = forward(&build, inp, proj_seed);
        g.value(loss).data()[0]
    };
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i][j], numeric));
        }
    }
    worst
}

fn net_loss(net: &mut Network, x: &Tensor, labels: &[usize]) -> f64 {
    let mut g = Graph::new();
    let f = net.forward_graph(&mut g, x.clone(), Mode::Train).unwrap();
    let loss = g.softmax_cross_entropy(f.logits, labels).unwrap();
    g.value(loss).data()[0]
}

/// Finite-difference check of every parameter of a 3-layer plain net
/// (C=4, 8×8 inputs, batch 2). Returns the worst relative error and the
/// parameter names checked.
pub fn net_gradcheck(sections: usize) -> (f64, Vec<String>) {
    let spec = NetworkSpec::plain(3, 4, 3).with_input(8, 8).with_sections(sections);
    let mut net = Network::build(&spec, 60 + sections as u64).unwrap();
    let x = rand_tensor(&[2, 3, 8, 8], 70);
    let labels = [2, 0];

    net.params_mut().clear_grads();
    net.loss_and_grad(x.clone(), &labels, Mode::Train).unwrap();
    let analytic: Vec<(String, Vec<f64>)> = net
        .params()
        .iter()
        .map(|(n, p)| (n.to_string(), p.tensor.grad().unwrap().to_vec()))
        .collect();

    let mut worst = 0.0f64;
    for (name, grad) in &analytic {
        for (j, &a) in grad.iter().enumerate() {
            let orig = net.params().get(name).unwrap().data()[j];
            net.params_mut().get_mut(name).unwrap().data_mut()[j] = orig + FD_STEP;
            let lp = net_loss(&mut net, &x, &labels);
            net.params_mut().get_mut(name).unwrap().data_mut()[j] = orig - FD_STEP;
            let lm = net_loss(&mut net, &x, &labels);
            net.params_mut().get_mut(name).unwrap().data_mut()[j] = orig;
            worst = worst.max(rel_err(a, (lp - lm) / (2.0 * FD_STEP)));
        }
    }
    (worst, analytic.into_iter().map(|(n, _)| n).collect())
}

#[allow(clippy::too_many_arguments)]
/// Direct six-loop convolution.
pub fn naive_conv(
    x: &[f64],
    k: &[f64],
    (n, cin, h, w): (usize, usize, usize, usize),
    (cout, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xi = ((b * cin + ci) * h + iy as usize) * w + ix as usize;
                                let ki = ((co * cin + ci) * kh + ky) * kw + kx;
                                acc += x[xi] * k[ki];
                            }
                        }
                    }
                    out[((b * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

