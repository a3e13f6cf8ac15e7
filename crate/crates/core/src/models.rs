//! The networks: backbone `f`, classifier `g`, actor and conditioned critic,
//! plus exploration noise and the response-map samplers.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::{BatchStats, BnMode, Graph, Var};
use crate::imaging::{FixationAction, Image, CHANNELS};
use crate::layers::{Init, Layer, Sequential};
use crate::params::ParameterSet;
use crate::tensor::Tensor;

pub const ACTION_DIM: usize = 3;

/// Checkpoint prefixes.
pub const PREFIX_F: &str = "f.";
pub const PREFIX_G: &str = "g.";
pub const PREFIX_ACTOR: &str = "actor.";
pub const PREFIX_CRITIC: &str = "critic.";
pub const PREFIX_CRITIC_TARGET: &str = "critic_target.";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    /// Output channels of the three stride-2 conv blocks; the last one is the feature dim.
    pub channels: [usize; 3],
    /// Append normalized x/y coordinate planes to the input.
    pub coords: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { channels: [16, 32, 64], coords: true }
    }
}

impl BackboneConfig {
    pub fn feature_dim(&self) -> usize {
        self.channels[2]
    }

    pub fn net(&self) -> Sequential {
        let mut layers = Vec::new();
        let mut cin = CHANNELS;
        if self.coords {
            layers.push(Layer::AppendCoords);
            cin += 2;
        }
        for (i, &c) in self.channels.iter().enumerate() {
            let name = alloc::format!("conv{}", i + 1);
            layers.push(Layer::conv(&name, cin, c, 3, 2, 1));
            layers.push(Layer::batch_norm(&alloc::format!("bn{}", i + 1), c));
            layers.push(Layer::Relu);
            cin = c;
        }
        Sequential::new(layers)
    }
}

/// `g`: one affine layer from features to class logits.
pub fn classifier_net(features: usize, classes: usize) -> Sequential {
    Sequential::new(vec![Layer::affine("fc", features, classes)])
}

pub fn actor_net(state_dim: usize, hidden: usize) -> Sequential {
    Sequential::new(vec![
        Layer::affine("fc1", state_dim, hidden),
        Layer::batch_norm("bn1", hidden),
        Layer::Relu,
        Layer::affine("fc2", hidden, hidden),
        Layer::batch_norm("bn2", hidden),
        Layer::Relu,
        Layer::Affine { name: "out".into(), inputs: hidden, outputs: ACTION_DIM, init: Init::Uniform(3e-3) },
        Layer::Tanh,
    ])
}

pub fn critic_net(input_dim: usize, hidden: usize) -> Sequential {
    Sequential::new(vec![
        Layer::affine("fc1", input_dim, hidden),
        Layer::Relu,
        Layer::affine("fc2", hidden, hidden),
        Layer::Relu,
        Layer::Affine { name: "out".into(), inputs: hidden, outputs: 1, init: Init::Uniform(3e-3) },
    ])
}

/// `f` and `g` together.
#[derive(Clone, Debug, PartialEq)]
pub struct Perception {
    pub config: BackboneConfig,
    pub classes: usize,
    pub f: ParameterSet,
    pub g: ParameterSet,
    f_net: Sequential,
    g_net: Sequential,
}

/// Eval-mode outputs for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub features: Vec<f64>,
    /// Pre-pool map, `[F, h, w]` row-major.
    pub map: Vec<f64>,
    pub map_hw: (usize, usize),
    pub logits: Vec<f64>,
}

impl Observation {
    pub fn probabilities(&self) -> Vec<f64> {
        let mut p = self.logits.clone();
        crate::graph::softmax_in_place(&mut p);
        p
    }

    pub fn predicted(&self) -> usize {
        argmax(&self.logits)
    }

    /// Entropy of the predicted distribution, in nats.
    pub fn entropy(&self) -> f64 {
        entropy(&self.probabilities())
    }

    /// `-log softmax(logits)[label]`.
    pub fn cross_entropy(&self, label: usize) -> Result<f64> {
        nll(&self.logits, label)
    }
}

/// Tape outputs of a perception forward pass.
pub struct PerceptionVars {
    pub map: Var,
    pub features: Var,
    pub logits: Var,
    pub bn_stats: Vec<(alloc::string::String, BatchStats)>,
}

impl Perception {
    pub fn new<R: Rng + ?Sized>(config: BackboneConfig, classes: usize, rng: &mut R) -> Result<Self> {
        let f_net = config.net();
        let g_net = classifier_net(config.feature_dim(), classes);
        let f = f_net.init(rng)?;
        let g = g_net.init(rng)?;
        Ok(Self { config, classes, f, g, f_net, g_net })
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    /// Appends `g(f(x))` to a tape.
    pub fn forward(&self, graph: &mut Graph, x: Var, mode: BnMode, track: bool) -> Result<PerceptionVars> {
        let fwd = self.f_net.forward(graph, &self.f, x, mode, track)?;
        let features = graph.global_avg_pool(fwd.output)?;
        let logits = self.g_net.forward(graph, &self.g, features, mode, track)?.output;
        Ok(PerceptionVars { map: fwd.output, features, logits, bn_stats: fwd.bn_stats })
    }

    /// Inference-mode observation of a batch of same-sized images.
    pub fn observe(&self, images: &[&Image]) -> Result<Vec<Observation>> {
        let first = images.first().ok_or_else(|| Error::InvalidArgument("no images".into()))?;
        let (h, w) = (first.height(), first.width());
        let mut data = Vec::with_capacity(images.len() * CHANNELS * h * w);
        for img in images {
            if img.height() != h || img.width() != w {
                return Err(Error::InvalidArgument("images in a batch must share a size".into()));
            }
            data.extend_from_slice(img.data());
        }
        let x = Tensor::new(&[images.len(), CHANNELS, h, w], data)?;
        let mut graph = Graph::new();
        let xv = graph.input(x);
        let vars = self.forward(&mut graph, xv, BnMode::Eval, false)?;
        let map = graph.value(vars.map);
        let (fd, mh, mw) = (map.shape()[1], map.shape()[2], map.shape()[3]);
        let feats = graph.value(vars.features);
        let logits = graph.value(vars.logits);
        Ok((0..images.len())
            .map(|i| Observation {
                features: feats.row(i).to_vec(),
                map: map.data()[i * fd * mh * mw..(i + 1) * fd * mh * mw].to_vec(),
                map_hw: (mh, mw),
                logits: logits.row(i).to_vec(),
            })
            .collect())
    }

    pub fn observe_one(&self, image: &Image) -> Result<Observation> {
        Ok(self.observe(&[image])?.remove(0))
    }

    /// Row `class` of the classifier weight, usable as a 1x1 convolution.
    pub fn class_filter(&self, class: usize) -> Result<&[f64]> {
        if class >= self.classes {
            return Err(Error::LabelOutOfRange { label: class, classes: self.classes });
        }
        Ok(self.g.get("fc.weight")?.row(class))
    }

    pub fn save(&self, ck: &mut Checkpoint) {
        ck.insert_set(PREFIX_F, &self.f);
        ck.insert_set(PREFIX_G, &self.g);
    }

    pub fn load(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.load_set(PREFIX_F, &mut self.f)?;
        ck.load_set(PREFIX_G, &mut self.g)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|v| **v > 0.0).map(|v| v * libm::log(*v)).sum::<f64>()
}

pub fn nll(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange { label, classes: logits.len() });
    }
    Ok(crate::graph::log_sum_exp(logits) - logits[label])
}

/// Deterministic policy `pi_w`.
#[derive(Clone, Debug, PartialEq)]
pub struct Actor {
    pub net: Sequential,
    pub params: ParameterSet,
    pub state_dim: usize,
}

impl Actor {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let net = actor_net(state_dim, hidden);
        let params = net.init(rng)?;
        Ok(Self { net, params, state_dim })
    }

    /// Inference-mode action for one state.
    pub fn act(&self, state: &[f64]) -> Result<FixationAction> {
        if state.len() != self.state_dim {
            return Err(crate::error::shape_err("actor", alloc::format!("state of {} values, want {}", state.len(), self.state_dim)));
        }
        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[1, self.state_dim], state.to_vec())?);
        let out = self.net.forward(&mut g, &self.params, x, BnMode::Eval, false)?.output;
        let a = g.value(out).data();
        Ok(FixationAction::new(a[0], a[1], a[2]))
    }
}

/// `Q(s, a | C)`; the target copy shares the layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Critic {
    pub net: Sequential,
    pub params: ParameterSet,
    pub input_dim: usize,
}

impl Critic {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let net = critic_net(input_dim, hidden);
        let params = net.init(rng)?;
        Ok(Self { net, params, input_dim })
    }

    /// Values for a batch of already-concatenated `[s, a, C]` rows.
    pub fn values(&self, rows: Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let x = g.input(rows);
        let out = self.net.forward(&mut g, &self.params, x, BnMode::Train, false)?.output;
        Ok(g.value(out).data().to_vec())
    }
}

/// Ornstein-Uhlenbeck process `x <- x + theta (mu - x) + sigma N(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct OuNoise {
    pub theta: f64,
    pub sigma: f64,
    pub mu: f64,
    pub state: [f64; ACTION_DIM],
}

impl OuNoise {
    pub fn new(theta: f64, sigma: f64, mu: f64) -> Self {
        Self { theta, sigma, mu, state: [mu; ACTION_DIM] }
    }

    pub fn reset(&mut self) {
        self.state = [self.mu; ACTION_DIM];
    }

    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> [f64; ACTION_DIM] {
        for x in self.state.iter_mut() {
            let n: f64 = StandardNormal.sample(rng);
            *x += self.theta * (self.mu - *x) + self.sigma * n;
        }
        self.state
    }

    /// Stationary variance of the discrete process.
    pub fn stationary_variance(&self) -> f64 {
        self.sigma * self.sigma / (2.0 * self.theta - self.theta * self.theta)
    }
}

impl Default for OuNoise {
    fn default() -> Self {
        Self::new(0.15, 0.2, 0.0)
    }
}

/// `m[i, j] = sum_k filter[k] * map[k, i, j]`.
pub fn response_map(map: &[f64], hw: (usize, usize), filter: &[f64]) -> Result<Vec<f64>> {
    let cells = hw.0 * hw.1;
    if map.len() != filter.len() * cells {
        return Err(crate::error::shape_err("response_map", "map and filter disagree"));
    }
    let mut m = vec![0.0; cells];
    for (k, w) in filter.iter().enumerate() {
        for (mi, v) in m.iter_mut().zip(&map[k * cells..(k + 1) * cells]) {
            *mi += w * v;
        }
    }
    Ok(m)
}

/// Shifts a response map to be nonnegative and normalizes it to sum 1.
/// A flat map becomes uniform.
pub fn normalize_map(m: &[f64]) -> Vec<f64> {
    let min = m.iter().copied().fold(f64::INFINITY, f64::min);
    let shifted: Vec<f64> = m.iter().map(|v| v - min).collect();
    let total: f64 = shifted.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return vec![1.0 / m.len() as f64; m.len()];
    }
    shifted.into_iter().map(|v| v / total).collect()
}

/// Draws an index with probability proportional to `p`.
pub fn sample_index<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>() * p.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, v) in p.iter().enumerate() {
        acc += v;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|v| *v > 0.0).unwrap_or(p.len() - 1)
}

/// Normalized centre of grid cell `idx` on an `hw` grid.
pub fn cell_center(idx: usize, hw: (usize, usize)) -> (f64, f64) {
    let (i, j) = (idx / hw.1, idx % hw.1);
    ((2 * j + 1) as f64 / hw.1 as f64 - 1.0, (2 * i + 1) as f64 / hw.0 as f64 - 1.0)
}

/// Samples a fixation from the response of `filter` over `obs.map`, with a
/// uniform radius code.
pub fn sample_from_map<R: Rng + ?Sized>(obs: &Observation, filter: &[f64], rng: &mut R) -> Result<FixationAction> {
    let p = normalize_map(&response_map(&obs.map, obs.map_hw, filter)?);
    let (x, y) = cell_center(sample_index(&p, rng), obs.map_hw);
    let l = rng.random_range(-1.0..=1.0);
    Ok(FixationAction::new(x, y, l))
}

/// Training-time coach: response map of the ground-truth class.
pub fn oracle_action<R: Rng + ?Sized>(obs: &Observation, label: usize, perception: &Perception, rng: &mut R) -> Result<FixationAction> {
    sample_from_map(obs, perception.class_filter(label)?, rng)
}

/// Evaluation baseline: response map of the predicted class. Takes no label.
pub fn saliency_action<R: Rng + ?Sized>(obs: &Observation, perception: &Perception, rng: &mut R) -> Result<FixationAction> {
    sample_from_map(obs, perception.class_filter(obs.predicted())?, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ou_fixed_point_and_decay() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ou = OuNoise::new(0.15, 0.0, 0.0);
        for _ in 0..10 {
            assert_eq!(ou.sample(&mut rng), [0.0; 3]);
        }
        ou.state = [1.0, -2.0, 0.5];
        for k in 1..=20 {
            let s = ou.sample(&mut rng);
            let f = 0.85f64.powi(k);
            assert!((s[0] - f).abs() < 1e-12 && (s[1] + 2.0 * f).abs() < 1e-12 && (s[2] - 0.5 * f).abs() < 1e-12);
        }
    }

    #[test]
    fn single_peak_map_is_deterministic() {
        let mut map = vec![0.0; 2 * 16];
        map[5] = 3.0; // feature 0, cell 5
        let obs = Observation { features: vec![], map, map_hw: (4, 4), logits: vec![0.0] };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let a = sample_from_map(&obs, &[1.0, 0.0], &mut rng).unwrap();
            assert_eq!((a.x, a.y), (-0.25, -0.25));
            assert!((-1.0..=1.0).contains(&a.l));
        }
    }

    #[test]
    fn flat_map_is_uniform() {
        assert_eq!(normalize_map(&[2.0; 4]), vec![0.25; 4]);
        let p = normalize_map(&[1.0, 3.0, 2.0]);
        assert_eq!(p, vec![0.0, 2.0 / 3.0, 1.0 / 3.0]);
    }

    #[test]
    fn cell_centres() {
        assert_eq!(cell_center(0, (8, 8)), (-0.875, -0.875));
        assert_eq!(cell_center(63, (8, 8)), (0.875, 0.875));
        assert_eq!(cell_center(8 * 2 + 5, (8, 8)), (0.375, -0.375));
    }

    #[test]
    fn actor_outputs_are_deterministic_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let actor = Actor::new(10, 16, &mut rng).unwrap();
        let s: Vec<f64> = (0..10).map(|i| i as f64 - 4.0).collect();
        let a = actor.act(&s).unwrap();
        assert_eq!(a, actor.act(&s).unwrap());
        assert!(a.to_array().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn perception_observation_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Perception::new(BackboneConfig { channels: [4, 6, 8], coords: true }, 5, &mut rng).unwrap();
        let img = Image::filled(32, 32, 0.4);
        let o = p.observe_one(&img).unwrap();
        assert_eq!(o.features.len(), 8);
        assert_eq!(o.map_hw, (4, 4));
        assert_eq!(o.map.len(), 8 * 16);
        assert_eq!(o.logits.len(), 5);
        let m = response_map(&o.map, o.map_hw, p.class_filter(2).unwrap()).unwrap();
        assert_eq!(m.len(), 16);
    }

    #[test]
    fn nll_matches_log_softmax() {
        let l = [1.0, 0.0];
        assert!((nll(&l, 0).unwrap() - 0.313_261_687_518_222_8).abs() < 1e-12);
        assert!(nll(&l, 2).is_err());
    }
}
