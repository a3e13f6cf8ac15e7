//! Declarative layer stacks on top of [`Graph`].

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::graph::{BatchStats, BnMode, Graph, Var};
use crate::params::ParameterSet;
use crate::tensor::Tensor;

/// Running-statistics momentum for batch norm.
pub const BN_MOMENTUM: f64 = 0.99;

/// Weight initialisation for affine and convolution layers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal(0, sqrt(2 / fan_in)), zero bias.
    He,
    /// Uniform(-b, b) for weights and bias.
    Uniform(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Affine { name: String, inputs: usize, outputs: usize, init: Init },
    Conv2d { name: String, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize },
    MaxPool { kernel: usize, stride: usize },
    AvgPool { kernel: usize, stride: usize },
    BatchNorm { name: String, features: usize },
    Relu,
    Tanh,
    Softmax,
    GlobalAvgPool,
    /// Appends two constant planes holding the normalized column and row
    /// coordinates in [-1, 1] to an `[N, C, H, W]` input.
    AppendCoords,
}

impl Layer {
    pub fn affine(name: &str, inputs: usize, outputs: usize) -> Self {
        Layer::Affine { name: name.into(), inputs, outputs, init: Init::He }
    }

    pub fn conv(name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Layer::Conv2d { name: name.into(), in_ch, out_ch, kernel, stride, padding }
    }

    pub fn batch_norm(name: &str, features: usize) -> Self {
        Layer::BatchNorm { name: name.into(), features }
    }

    fn init_params<R: Rng + ?Sized>(&self, ps: &mut ParameterSet, rng: &mut R) -> Result<()> {
        match self {
            Layer::Affine { name, inputs, outputs, init } => {
                let (w, b) = match init {
                    Init::He => (
                        Tensor::randn(&[*outputs, *inputs], libm::sqrt(2.0 / *inputs as f64), rng),
                        Tensor::zeros(&[*outputs]),
                    ),
                    Init::Uniform(bound) => (
                        Tensor::uniform(&[*outputs, *inputs], *bound, rng),
                        Tensor::uniform(&[*outputs], *bound, rng),
                    ),
                };
                ps.insert(&format!("{}.weight", name), w)?;
                ps.insert(&format!("{}.bias", name), b)?;
            }
            Layer::Conv2d { name, in_ch, out_ch, kernel, .. } => {
                let fan_in = (in_ch * kernel * kernel) as f64;
                let w = Tensor::randn(&[*out_ch, *in_ch, *kernel, *kernel], libm::sqrt(2.0 / fan_in), rng);
                ps.insert(&format!("{}.weight", name), w)?;
                ps.insert(&format!("{}.bias", name), Tensor::zeros(&[*out_ch]))?;
            }
            Layer::BatchNorm { name, features } => {
                ps.insert(&format!("{}.gamma", name), Tensor::full(&[*features], 1.0))?;
                ps.insert(&format!("{}.beta", name), Tensor::zeros(&[*features]))?;
                ps.insert_buffer(&format!("{}.running_mean", name), Tensor::zeros(&[*features]))?;
                ps.insert_buffer(&format!("{}.running_var", name), Tensor::full(&[*features], 1.0))?;
            }
            _ => {}
        }
        Ok(())
    }
}

/// Values recorded by [`Sequential::forward`].
pub struct Forward {
    pub output: Var,
    /// Output of every layer, in order.
    pub outputs: Vec<Var>,
    /// Batch statistics of every training-mode batch norm, keyed by layer name.
    pub bn_stats: Vec<(String, BatchStats)>,
}

/// A chain of layers sharing one [`ParameterSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParameterSet> {
        let mut ps = ParameterSet::new();
        for l in &self.layers {
            l.init_params(&mut ps, rng)?;
        }
        Ok(ps)
    }

    /// Appends the stack to `g`. With `track == false` parameters are bound as
    /// constants and receive no gradient.
    pub fn forward(&self, g: &mut Graph, ps: &ParameterSet, x: Var, mode: BnMode, track: bool) -> Result<Forward> {
        let mut cur = x;
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut bn_stats = Vec::new();
        for layer in &self.layers {
            cur = match layer {
                Layer::Affine { name, .. } => {
                    let w = g.param(ps, &format!("{}.weight", name), track)?;
                    let b = g.param(ps, &format!("{}.bias", name), track)?;
                    g.affine(cur, w, b)?
                }
                Layer::Conv2d { name, stride, padding, .. } => {
                    let w = g.param(ps, &format!("{}.weight", name), track)?;
                    let b = g.param(ps, &format!("{}.bias", name), track)?;
                    g.conv2d(cur, w, b, *stride, *padding)?
                }
                Layer::MaxPool { kernel, stride } => g.max_pool(cur, *kernel, *stride)?,
                Layer::AvgPool { kernel, stride } => g.avg_pool(cur, *kernel, *stride)?,
                Layer::BatchNorm { name, .. } => {
                    let gamma = g.param(ps, &format!("{}.gamma", name), track)?;
                    let beta = g.param(ps, &format!("{}.beta", name), track)?;
                    let running = match mode {
                        BnMode::Eval => Some((
                            ps.buffer(&format!("{}.running_mean", name))?,
                            ps.buffer(&format!("{}.running_var", name))?,
                        )),
                        BnMode::Train => None,
                    };
                    let (out, stats) = g.batch_norm(cur, gamma, beta, mode, running)?;
                    if let Some(s) = stats {
                        bn_stats.push((name.clone(), s));
                    }
                    out
                }
                Layer::Relu => g.relu(cur)?,
                Layer::Tanh => g.tanh(cur)?,
                Layer::Softmax => g.softmax(cur)?,
                Layer::GlobalAvgPool => g.global_avg_pool(cur)?,
                Layer::AppendCoords => {
                    let coords = coord_planes(g.value(cur).shape())?;
                    let c = g.input(coords);
                    g.concat(&[cur, c])?
                }
            };
            outputs.push(cur);
        }
        Ok(Forward { output: cur, outputs, bn_stats })
    }
}

/// Applies collected batch statistics to the running buffers of `ps`.
pub fn apply_bn_stats(ps: &mut ParameterSet, stats: &[(String, BatchStats)]) -> Result<()> {
    for (name, s) in stats {
        ps.update_running_stats(name, s, BN_MOMENTUM)?;
    }
    Ok(())
}

fn coord_planes(shape: &[usize]) -> Result<Tensor> {
    let [n, _, h, w] = *shape else {
        return Err(shape_err("append_coords", format!("input {:?}", shape)));
    };
    let norm = |i: usize, len: usize| if len > 1 { 2.0 * i as f64 / (len - 1) as f64 - 1.0 } else { 0.0 };
    let mut data = Vec::with_capacity(n * 2 * h * w);
    for _ in 0..n {
        for _y in 0..h {
            data.extend((0..w).map(|x| norm(x, w)));
        }
        for y in 0..h {
            data.extend(core::iter::repeat(norm(y, h)).take(w));
        }
    }
    Tensor::new(&[n, 2, h, w], data)
}

/// Result of [`forward_graph`]: the tape, its output and any batch statistics.
pub struct ForwardPass {
    pub graph: Graph,
    pub output: Var,
    pub inputs: Vec<Var>,
    pub bn_stats: Vec<(String, BatchStats)>,
}

/// Runs `net` on `inputs` (concatenated along axis 1 when there are several)
/// and returns the tape so that the caller can differentiate a loss built on
/// top of `output`.
pub fn forward_graph(inputs: &[Tensor], net: &Sequential, ps: &ParameterSet, mode: BnMode) -> Result<ForwardPass> {
    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.input(t.clone())).collect();
    let x = match vars.len() {
        0 => return Err(shape_err("forward_graph", "no inputs")),
        1 => vars[0],
        _ => graph.concat(&vars)?,
    };
    let fwd = net.forward(&mut graph, ps, x, mode, true)?;
    Ok(ForwardPass { graph, output: fwd.output, inputs: vars, bn_stats: fwd.bn_stats })
}
