//! Activation-maximization filter visualization and PPM output.

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::Network;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::ops::Mode;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct VizConfig {
    /// 0 is the expansion conv, `1..=depth` the body convs.
    pub layer_index: usize,
    pub filter_index: usize,
    pub steps: usize,
    pub step_size: f64,
    pub seed: u64,
    pub output_size: (usize, usize),
}

impl VizConfig {
    pub fn new(layer_index: usize, filter_index: usize, output_size: (usize, usize)) -> Self {
        VizConfig {
            layer_index,
            filter_index,
            steps: 100,
            step_size: 0.1,
            seed: 0,
            output_size,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Visualization {
    /// `[3, H, W]`, min-max rescaled to `[0, 1]`.
    pub image: Tensor,
    /// Objective before each step, plus the final value (`steps + 1` entries).
    pub objective: Vec<f64>,
}

/// Order-sensitive hash of every parameter value, bit for bit.
pub fn param_fingerprint(params: &ParamStore) -> u64 {
    let mut h = DefaultHasher::new();
    for (name, p) in params.iter() {
        name.hash(&mut h);
        p.tensor.shape().hash(&mut h);
        for v in p.tensor.data() {
            v.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

/// Channel count of tap `layer` without running the network.
fn tap_channels(net: &Network, layer: usize) -> Result<usize> {
    let taps = net.tap_count();
    if layer >= taps {
        return Err(Error::pre(format!("layer index {layer} out of range (network has {taps} conv layers)")));
    }
    let (h, w) = net.spec().input_size;
    let mut probe = net.clone();
    let mut g = Graph::new();
    let f = probe.forward_graph(&mut g, Tensor::zeros(&[1, 3, h, w])?, Mode::Eval)?;
    Ok(g.value(f.taps[layer]).shape()[1])
}

fn objective_and_grad(net: &mut Network, x: &Tensor, cfg: &VizConfig) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let f = net.forward_graph(&mut g, x.clone(), Mode::Eval)?;
    let obj = g.channel_mean(f.taps[cfg.layer_index], cfg.filter_index)?;
    // Backward writes parameter gradients; send them to a scratch store.
    let mut scratch = net.params().clone();
    g.backward(obj, &mut scratch)?;
    let grad = g
        .grad(f.input)
        .ok_or_else(|| Error::Graph("input received no gradient".into()))?
        .to_vec();
    Ok((g.value(obj).data()[0], grad))
}

fn rescale(x: &Tensor) -> Result<Tensor> {
    let d = x.data();
    let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let out = if span > 0.0 && span.is_finite() {
        d.iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.5; d.len()]
    };
    let s = x.shape();
    Tensor::from_vec(&s[1..], out)
}

/// Gradient ascent on the input to maximize the mean activation of one
/// filter. The network runs in eval mode and is not modified.
pub fn activation_maximize(net: &Network, cfg: &VizConfig) -> Result<Visualization> {
    let (h, w) = net.spec().input_size;
    if cfg.output_size != (h, w) {
        return Err(Error::pre(format!(
            "output size {:?} differs from network input size {:?}",
            cfg.output_size,
            (h, w)
        )));
    }
    if !cfg.step_size.is_finite() {
        return Err(Error::pre("step size must be finite"));
    }
    let channels = tap_channels(net, cfg.layer_index)?;
    if cfg.filter_index >= channels {
        return Err(Error::pre(format!(
            "filter index {} out of range (layer {} has {channels} filters)",
            cfg.filter_index, cfg.layer_index
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = (0..3 * h * w).map(|_| rng.random_range(0.4..0.6)).collect();
    let mut x = Tensor::from_vec(&[1, 3, h, w], noise)?;
    let mut work = net.clone();
    let mut objective = Vec::with_capacity(cfg.steps + 1);
    for _ in 0..cfg.steps {
        let (value, grad) = objective_and_grad(&mut work, &x, cfg)?;
        objective.push(value);
        for (xi, gi) in x.data_mut().iter_mut().zip(&grad) {
            *xi += cfg.step_size * gi;
        }
    }
    let (value, _) = objective_and_grad(&mut work, &x, cfg)?;
    objective.push(value);
    Ok(Visualization {
        image: rescale(&x)?,
        objective,
    })
}

/// Encodes a `[3, H, W]` image with values in `[0, 1]` as binary PPM.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "PPM image must be [3, H, W]".into(),
        });
    }
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    if let Some(bad) = d.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::pre(format!("PPM pixel value {bad} outside [0, 1]")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            out.push((d[c * h * w + i] * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn write_ppm(image: &Tensor, path: &Path) -> Result<()> {
    let bytes = encode_ppm(image)?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Decodes a binary PPM with maxval 255 into `[3, H, W]` values `byte / 255`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if bytes.get(pos) == Some(&b'#') {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Data("truncated PPM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(Error::Data(format!("not a P6 PPM (magic `{}`)", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Data(format!("bad PPM header field `{s}`")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(Error::Data(format!("unsupported PPM maxval {maxval}")));
    }
    let payload = bytes.get(pos..).unwrap_or_default();
    if payload.len() != 3 * h * w {
        return Err(Error::Data(format!("PPM payload is {} bytes, expected {}", payload.len(), 3 * h * w)));
    }
    let mut out = vec![0.0; 3 * h * w];
    for (i, px) in payload.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * h * w + i] = f64::from(px[c]) / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], out)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&fs::read(path)?)
}

/// Mean absolute per-pixel difference between two images.
pub fn mean_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "mean_abs_diff",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let n = a.numel().max(1) as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n)
}
