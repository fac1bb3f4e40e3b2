//! Network construction and forward execution.
//!
//! Parameter entry names:
//!
//! | entry                         | meaning                                   |
//! |-------------------------------|-------------------------------------------|
//! | `W_conv_1`                    | expansion conv, 3 → first working width   |
//! | `W_conv_G`                    | the single shared kernel of plain nets    |
//! | `W_conv_S{s}`                 | shared kernel of section `s` (mixed nets) |
//! | `W_trans_{s}`                 | transition conv into section `s`          |
//! | `W_proj_{s}`                  | 1×1 shortcut projection into section `s`  |
//! | `W_conv_{l}` (l ≥ 2)          | body conv `l` of a free net               |
//! | `W_reg_{r}`                   | 1×1 conv of regulator `r`                 |
//! | `W_bn_{i}.gamma` / `.beta`    | affine pair of batch norm `i`             |
//! | `classifier.weight` / `.bias` | linear head                               |

use indexmap::IndexMap;

use super::spec::{Family, Layout, NetworkSpec};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::{BnState, Mode};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// conv → optional batch norm → optional ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvUnit {
    pub conv: String,
    pub bn: Option<usize>,
    pub relu: bool,
}

/// Two conv units, shortcut addition, ReLU, then an optional regulator.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub section: usize,
    pub first: ConvUnit,
    pub second: ConvUnit,
    pub projection: Option<ConvUnit>,
    pub regulator: Option<ConvUnit>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Unit(ConvUnit),
    Block(ResidualBlock),
    Pool,
    /// Global average pool followed by the linear classifier.
    Head { weight: String, bias: String },
}

#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    layout: Layout,
    layers: Vec<Layer>,
    params: ParamStore,
    bn: Vec<BnState>,
}

/// Graph handles produced by one forward pass.
pub struct Forward {
    pub input: Var,
    pub logits: Var,
    /// Output of the expansion layer followed by one entry per body conv.
    pub taps: Vec<Var>,
}

struct Builder {
    params: ParamStore,
    bn: Vec<BnState>,
    batchnorm: bool,
    seed: u64,
}

impl Builder {
    fn next_seed(&mut self) -> u64 {
        let s = self.seed;
        self.seed = self.seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
        s
    }

    /// Inserts a He-initialized kernel unless `name` already exists.
    fn kernel(&mut self, name: &str, cout: usize, cin: usize, k: usize) -> Result<()> {
        if self.params.contains(name) {
            let have = self.params.get(name)?.shape().to_vec();
            if have != [cout, cin, k, k] {
                return Err(Error::Spec(format!(
                    "shared kernel `{name}` reused with shape {:?}, stored {have:?}",
                    [cout, cin, k, k]
                )));
            }
            return Ok(());
        }
        let scale = (2.0 / (cin * k * k) as f64).sqrt();
        let seed = self.next_seed();
        let t = Tensor::randn(&[cout, cin, k, k], seed, scale)?;
        self.params.insert(name, name, t)
    }

    fn unit(&mut self, conv: &str, cout: usize, cin: usize, k: usize, relu: bool) -> Result<ConvUnit> {
        self.kernel(conv, cout, cin, k)?;
        let bn = if self.batchnorm {
            let i = self.bn.len() + 1;
            let group = format!("W_bn_{i}");
            self.params
                .insert(&format!("{group}.gamma"), &group, Tensor::full(&[cout], 1.0)?)?;
            self.params
                .insert(&format!("{group}.beta"), &group, Tensor::zeros(&[cout])?)?;
            self.bn.push(BnState::new(cout));
            Some(i - 1)
        } else {
            None
        };
        Ok(ConvUnit {
            conv: conv.to_string(),
            bn,
            relu,
        })
    }
}

impl Network {
    /// Builds any family, dispatching on `spec.family`.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        match spec.family {
            Family::Plain | Family::PlainResidual => build_plain(spec, seed),
            Family::Mixed | Family::MixedResidual => build_mixed(spec, seed),
            Family::Free => build_free(spec, seed),
        }
    }

    fn assemble(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let layout = spec.validate()?;
        let mut b = Builder {
            params: ParamStore::new(),
            bn: Vec::new(),
            batchnorm: spec.batchnorm,
            seed,
        };
        let mut layers = Vec::new();
        let mut free_index = 2usize;
        let mut regulator_index = 1usize;
        let residual = spec.is_residual();

        let first = spec.channels.of_section(0);
        layers.push(Layer::Unit(b.unit("W_conv_1", first, 3, 3, true)?));
        let mut width = first;

        // Kernel entry for a 3×3 body conv in section `s`.
        let mut body_kernel = |s: usize, cin: usize, cout: usize| -> String {
            match spec.family {
                Family::Free => {
                    let name = format!("W_conv_{free_index}");
                    free_index += 1;
                    name
                }
                _ if cin != cout => format!("W_trans_{s}"),
                Family::Plain | Family::PlainResidual => "W_conv_G".to_string(),
                Family::Mixed | Family::MixedResidual => format!("W_conv_S{s}"),
            }
        };

        for s in 0..spec.sections {
            let c = spec.channels.of_section(s);
            if s == 0 {
                for _ in 0..layout.leading {
                    let k = body_kernel(0, width, c);
                    layers.push(Layer::Unit(b.unit(&k, c, width, 3, true)?));
                    width = c;
                }
            }
            for _ in 0..layout.per_section[s] {
                if residual {
                    let k1 = body_kernel(s, width, c);
                    let first = b.unit(&k1, c, width, 3, true)?;
                    let k2 = body_kernel(s, c, c);
                    let second = b.unit(&k2, c, c, 3, false)?;
                    let projection = if width != c {
                        Some(b.unit(&format!("W_proj_{s}"), c, width, 1, false)?)
                    } else {
                        None
                    };
                    let regulator = if spec.regulators.contains(&s) {
                        let name = format!("W_reg_{regulator_index}");
                        regulator_index += 1;
                        Some(b.unit(&name, c, c, 1, true)?)
                    } else {
                        None
                    };
                    layers.push(Layer::Block(ResidualBlock {
                        section: s,
                        first,
                        second,
                        projection,
                        regulator,
                    }));
                } else {
                    let k = body_kernel(s, width, c);
                    layers.push(Layer::Unit(b.unit(&k, c, width, 3, true)?));
                }
                width = c;
            }
            if s + 1 < spec.sections {
                layers.push(Layer::Pool);
            }
        }
        if width != spec.channels.of_section(spec.sections - 1) {
            return Err(Error::Spec("final section never reached its channel width".into()));
        }

        let k = spec.num_classes;
        let seed = b.next_seed();
        let w = Tensor::randn(&[k, width], seed, (2.0 / width as f64).sqrt())?;
        b.params.insert("classifier.weight", "classifier", w)?;
        b.params.insert("classifier.bias", "classifier", Tensor::zeros(&[k])?)?;
        layers.push(Layer::Head {
            weight: "classifier.weight".into(),
            bias: "classifier.bias".into(),
        });

        Ok(Network {
            spec: spec.clone(),
            layout,
            layers,
            params: b.params,
            bn: b.bn,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bn_states(&self) -> &[BnState] {
        &self.bn
    }

    pub fn bn_states_mut(&mut self) -> &mut [BnState] {
        &mut self.bn
    }

    /// Number of tap points: the expansion layer plus every body conv.
    pub fn tap_count(&self) -> usize {
        self.spec.depth + 1
    }

    /// How many layer positions reference each conv kernel.
    pub fn conv_use_sites(&self) -> IndexMap<String, usize> {
        let mut sites = IndexMap::new();
        let mut bump = |u: &ConvUnit| *sites.entry(u.conv.clone()).or_insert(0) += 1;
        for layer in &self.layers {
            match layer {
                Layer::Unit(u) => bump(u),
                Layer::Block(b) => {
                    bump(&b.first);
                    bump(&b.second);
                    if let Some(p) = &b.projection {
                        bump(p);
                    }
                    if let Some(r) = &b.regulator {
                        bump(r);
                    }
                }
                Layer::Pool | Layer::Head { .. } => {}
            }
        }
        sites
    }

    fn unit_forward(&mut self, g: &mut Graph, x: Var, u: &ConvUnit, mode: Mode) -> Result<Var> {
        let kernel = g.param(&mut self.params, &u.conv)?;
        let pad = g.value(kernel).shape()[2] / 2;
        let mut y = g.conv2d(x, kernel, 1, pad)?;
        if let Some(i) = u.bn {
            let gamma = g.param(&mut self.params, &format!("W_bn_{}.gamma", i + 1))?;
            let beta = g.param(&mut self.params, &format!("W_bn_{}.beta", i + 1))?;
            y = g.batchnorm(y, gamma, beta, &mut self.bn[i], mode)?;
        }
        if u.relu {
            y = g.relu(y);
        }
        Ok(y)
    }

    /// Runs the network on `batch` (NCHW) inside `g`.
    pub fn forward_graph(&mut self, g: &mut Graph, batch: Tensor, mode: Mode) -> Result<Forward> {
        let (h, w) = self.spec.input_size;
        let expected = [batch.shape().first().copied().unwrap_or(0), 3, h, w];
        if batch.shape() != expected || expected[0] == 0 {
            return Err(Error::ShapeMismatch {
                op: "network forward",
                lhs: batch.shape().to_vec(),
                rhs: vec![3, h, w],
            });
        }
        self.params.reset_use_counts();
        let input = g.input(batch);
        let mut x = input;
        let mut taps = Vec::with_capacity(self.tap_count());
        let layers = std::mem::take(&mut self.layers);
        let result = (|| -> Result<Var> {
            for layer in &layers {
                match layer {
                    Layer::Unit(u) => {
                        x = self.unit_forward(g, x, u, mode)?;
                        taps.push(x);
                    }
                    Layer::Block(b) => {
                        let h1 = self.unit_forward(g, x, &b.first, mode)?;
                        taps.push(h1);
                        let h2 = self.unit_forward(g, h1, &b.second, mode)?;
                        let shortcut = match &b.projection {
                            Some(p) => self.unit_forward(g, x, p, mode)?,
                            None => x,
                        };
                        let sum = g.add(h2, shortcut)?;
                        x = g.relu(sum);
                        taps.push(x);
                        if let Some(r) = &b.regulator {
                            x = self.unit_forward(g, x, r, mode)?;
                        }
                    }
                    Layer::Pool => x = g.maxpool2(x)?,
                    Layer::Head { weight, bias } => {
                        let pooled = g.global_avg_pool(x)?;
                        let wv = g.param(&mut self.params, weight)?;
                        let bv = g.param(&mut self.params, bias)?;
                        x = g.linear(pooled, wv, bv)?;
                    }
                }
            }
            Ok(x)
        })();
        self.layers = layers;
        Ok(Forward {
            input,
            logits: result?,
            taps,
        })
    }

    /// Logits for `batch`; the graph is discarded.
    pub fn forward(&mut self, batch: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut g = Graph::new();
        let f = self.forward_graph(&mut g, batch.clone(), mode)?;
        Ok(g.value(f.logits).clone())
    }

    /// Forward, mean cross-entropy and backward. Gradients are added into
    /// the parameter store; returns the loss and the logits.
    pub fn loss_and_grad(&mut self, batch: Tensor, labels: &[usize], mode: Mode) -> Result<(f64, Tensor)> {
        let mut g = Graph::new();
        let f = self.forward_graph(&mut g, batch, mode)?;
        let loss = g.softmax_cross_entropy(f.logits, labels)?;
        g.backward(loss, &mut self.params)?;
        Ok((g.value(loss).data()[0], g.value(f.logits).clone()))
    }
}

fn check_family(spec: &NetworkSpec, allowed: &[Family], builder: &str) -> Result<()> {
    if allowed.contains(&spec.family) {
        Ok(())
    } else {
        Err(Error::Spec(format!(
            "{builder} cannot build family `{}`",
            spec.family.as_str()
        )))
    }
}

/// Constant-width net where every body conv uses `W_conv_G`.
pub fn build_plain(spec: &NetworkSpec, seed: u64) -> Result<Network> {
    check_family(spec, &[Family::Plain, Family::PlainResidual], "build_plain")?;
    Network::assemble(spec, seed)
}

/// Channel-expanding net with one shared kernel per section.
pub fn build_mixed(spec: &NetworkSpec, seed: u64) -> Result<Network> {
    check_family(spec, &[Family::Mixed, Family::MixedResidual], "build_mixed")?;
    Network::assemble(spec, seed)
}

/// Unshared reference with the topology implied by `spec.channels` and depth.
pub fn build_free(spec: &NetworkSpec, seed: u64) -> Result<Network> {
    check_family(spec, &[Family::Free], "build_free")?;
    Network::assemble(spec, seed)
}
