//! Central-difference gradient checking for graph ops, layer stacks and the
//! two agent losses. The numeric side only ever evaluates forward passes, so
//! it is independent of the tape's backward rules.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::{EnvConfig, EpisodeCondition};
use crate::error::Result;
use crate::graph::{BnMode, Graph, Var};
use crate::layers::{Layer, Sequential};
use crate::models::ACTION_DIM;
use crate::params::ParameterSet;
use crate::tensor::Tensor;
use crate::trainer::{Agent, Transition};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Pass threshold on the worst relative error.
pub const TOLERANCE: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, 1e-4)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Builds a scalar loss from input variables.
pub type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

fn forward(inputs: &[Tensor], build: &Build) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.value(loss).item()
}

/// Worst relative error over every element of every input.
pub fn check_graph(inputs: &[Tensor], build: &Build) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for k in 0..inputs.len() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].len() {
            let x = inputs[k].data()[i];
            probe[k].data_mut()[i] = x + STEP;
            let up = forward(&probe, build)?;
            probe[k].data_mut()[i] = x - STEP;
            let down = forward(&probe, build)?;
            probe[k].data_mut()[i] = x;
            worst = worst.max(relative_error(analytic.data()[i], (up - down) / (2.0 * STEP)));
        }
    }
    Ok(worst)
}

/// Same check over named parameters. `loss` must fill gradients into the set
/// it is given (accumulating onto zeros) and return the loss value.
pub fn check_params<T>(owner: &mut T, params: fn(&mut T) -> &mut ParameterSet, mut loss: impl FnMut(&mut T) -> Result<f64>) -> Result<f64> {
    params(owner).zero_grad();
    loss(owner)?;
    let names: Vec<String> = params(owner).params().map(|(n, _)| n.clone()).collect();
    let analytic: Vec<Tensor> = names.iter().map(|n| params(owner).grad(n).cloned()).collect::<Result<_>>()?;
    let mut worst = 0.0f64;
    for (name, grad) in names.iter().zip(&analytic) {
        for i in 0..grad.len() {
            let x = params(owner).get(name)?.data()[i];
            params(owner).get_mut(name)?.data_mut()[i] = x + STEP;
            let up = loss(owner)?;
            params(owner).get_mut(name)?.data_mut()[i] = x - STEP;
            let down = loss(owner)?;
            params(owner).get_mut(name)?.data_mut()[i] = x;
            worst = worst.max(relative_error(grad.data()[i], (up - down) / (2.0 * STEP)));
        }
    }
    params(owner).zero_grad();
    Ok(worst)
}

/// Worst error for one case over its trials.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub trials: usize,
    pub worst: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.worst < TOLERANCE
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Weighted sum so every output element carries its own gradient.
fn project(g: &mut Graph, out: Var, w: &Tensor) -> Result<Var> {
    let w = g.input(w.clone());
    let p = g.mul(out, w)?;
    g.sum(p)
}

type Maker = fn(&mut ChaCha8Rng) -> Result<f64>;

/// A graph case with a random projection sized by a dry run.
fn projected(rng: &mut ChaCha8Rng, inputs: Vec<Tensor>, op: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> Result<f64> {
    let shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = op(&mut g, &vars)?;
        g.value(out).shape().to_vec()
    };
    let w = randn(&shape, rng);
    let build: Box<Build> = Box::new(move |g, v| {
        let out = op(g, v)?;
        project(g, out, &w)
    });
    check_graph(&inputs, build.as_ref())
}

fn affine(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n, i, o) = (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..6));
    let inputs = vec![randn(&[n, i], rng), randn(&[o, i], rng), randn(&[o], rng)];
    projected(rng, inputs, |g, v| g.affine(v[0], v[1], v[2]))
}

fn conv2d(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n, c, o) = (rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..4));
    let k = rng.random_range(1..4);
    let size = rng.random_range(k..7);
    let (stride, pad) = (rng.random_range(1..3), rng.random_range(0..2));
    let inputs = vec![randn(&[n, c, size, size], rng), randn(&[o, c, k, k], rng), randn(&[o], rng)];
    projected(rng, inputs, move |g, v| g.conv2d(v[0], v[1], v[2], stride, pad))
}

fn max_pool(rng: &mut ChaCha8Rng) -> Result<f64> {
    let k = rng.random_range(1..4);
    let stride = rng.random_range(1..=k);
    let size = rng.random_range(k..7);
    let inputs = vec![randn(&[rng.random_range(1..3), rng.random_range(1..3), size, size], rng)];
    projected(rng, inputs, move |g, v| g.max_pool(v[0], k, stride))
}

fn avg_pool(rng: &mut ChaCha8Rng) -> Result<f64> {
    let k = rng.random_range(1..4);
    let stride = rng.random_range(1..=k);
    let size = rng.random_range(k..7);
    let inputs = vec![randn(&[rng.random_range(1..3), rng.random_range(1..3), size, size], rng)];
    projected(rng, inputs, move |g, v| g.avg_pool(v[0], k, stride))
}

fn global_avg_pool(rng: &mut ChaCha8Rng) -> Result<f64> {
    let shape = [rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..5)];
    let inputs = vec![randn(&shape, rng)];
    projected(rng, inputs, |g, v| g.global_avg_pool(v[0]))
}

fn batch_norm_train(rng: &mut ChaCha8Rng) -> Result<f64> {
    let f = rng.random_range(1..5);
    let x = if rng.random_bool(0.5) {
        randn(&[rng.random_range(2..6), f], rng)
    } else {
        randn(&[rng.random_range(1..3), f, rng.random_range(1..4), rng.random_range(2..4)], rng)
    };
    let inputs = vec![x, randn(&[f], rng), randn(&[f], rng)];
    projected(rng, inputs, |g, v| Ok(g.batch_norm(v[0], v[1], v[2], BnMode::Train, None)?.0))
}

fn batch_norm_eval(rng: &mut ChaCha8Rng) -> Result<f64> {
    let f = rng.random_range(1..5);
    let inputs = vec![randn(&[rng.random_range(1..5), f], rng), randn(&[f], rng), randn(&[f], rng)];
    let mean = randn(&[f], rng);
    let var = Tensor::new(&[f], (0..f).map(|_| rng.random_range(0.2..3.0)).collect())?;
    projected(rng, inputs, move |g, v| Ok(g.batch_norm(v[0], v[1], v[2], BnMode::Eval, Some((&mean, &var)))?.0))
}

fn rows(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![randn(&[rng.random_range(1..5), rng.random_range(1..6)], rng)]
}

fn relu(rng: &mut ChaCha8Rng) -> Result<f64> {
    let inputs = rows(rng);
    projected(rng, inputs, |g, v| g.relu(v[0]))
}

fn tanh(rng: &mut ChaCha8Rng) -> Result<f64> {
    let inputs = rows(rng);
    projected(rng, inputs, |g, v| g.tanh(v[0]))
}

fn softmax(rng: &mut ChaCha8Rng) -> Result<f64> {
    let inputs = rows(rng);
    projected(rng, inputs, |g, v| g.softmax(v[0]))
}

fn concat(rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = rng.random_range(1..4);
    let parts = rng.random_range(1..4);
    let inputs: Vec<Tensor> = (0..parts).map(|_| randn(&[n, rng.random_range(1..4)], rng)).collect();
    projected(rng, inputs, |g, v| g.concat(v))
}

fn pointwise(rng: &mut ChaCha8Rng) -> Result<f64> {
    let shape = [rng.random_range(1..4), rng.random_range(1..5)];
    let inputs = vec![randn(&shape, rng), randn(&shape, rng)];
    let c = rng.random_range(-2.0..2.0);
    projected(rng, inputs, move |g, v| {
        let s = g.add(v[0], v[1])?;
        let d = g.sub(v[0], v[1])?;
        let m = g.mul(s, d)?;
        let q = g.square(m)?;
        g.scale(q, c)
    })
}

fn reductions(rng: &mut ChaCha8Rng) -> Result<f64> {
    let inputs = rows(rng);
    let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
    let build: Box<Build> = Box::new(move |g, v| {
        let m = g.mean(v[0])?;
        let m = g.scale(m, a)?;
        let sq = g.square(v[0])?;
        let s = g.sum(sq)?;
        let s = g.scale(s, b)?;
        g.add(m, s)
    });
    check_graph(&inputs, build.as_ref())
}

fn cross_entropy(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n, k) = (rng.random_range(1..6), rng.random_range(2..7));
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let inputs = vec![Tensor::randn(&[n, k], 2.0, rng)];
    let build: Box<Build> = Box::new(move |g, v| g.cross_entropy(v[0], &labels));
    check_graph(&inputs, build.as_ref())
}

/// Coordinate planes, conv, batch norm, pooling and a classifier head,
/// differentiated with respect to every parameter.
fn layer_stack(rng: &mut ChaCha8Rng) -> Result<f64> {
    let c = rng.random_range(1..3);
    let h = rng.random_range(2..4);
    let classes = rng.random_range(2..5);
    let net = Sequential::new(vec![
        Layer::AppendCoords,
        Layer::conv("conv", c + 2, h, 3, 1, 1),
        Layer::batch_norm("bn", h),
        Layer::Relu,
        Layer::MaxPool { kernel: 2, stride: 2 },
        Layer::conv("conv2", h, h, 3, 1, 1),
        Layer::AvgPool { kernel: 2, stride: 1 },
        Layer::Tanh,
        Layer::GlobalAvgPool,
        Layer::affine("fc", h, classes),
    ]);
    let n = rng.random_range(2..4);
    let x = randn(&[n, c, 6, 6], rng);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let mut ps = loop {
        let mut ps = net.init(rng)?;
        jitter(&mut ps, rng)?;
        if relu_margin(&net, &ps, &x)?.0 > KINK_MARGIN {
            break ps;
        }
    };
    check_params(&mut ps, |p| p, |ps| {
        let mut g = Graph::new();
        let input = g.input(x.clone());
        let out = net.forward(&mut g, ps, input, BnMode::Train, true)?.output;
        let loss = g.cross_entropy(out, &labels)?;
        let value = g.value(loss).item()?;
        g.backward(loss)?.accumulate_into(ps)?;
        Ok(value)
    })
}

fn jitter(ps: &mut ParameterSet, rng: &mut ChaCha8Rng) -> Result<()> {
    let names: Vec<String> = ps.params().map(|(n, _)| n.clone()).collect();
    for n in &names {
        for v in ps.get_mut(n)?.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    Ok(())
}

/// Trials are redrawn when a ReLU input lies this close to zero, so the
/// stencil never straddles a kink.
pub const KINK_MARGIN: f64 = 1e-3;

/// Smallest |ReLU input| of `net` on `x`, and the output.
fn relu_margin(net: &Sequential, ps: &ParameterSet, x: &Tensor) -> Result<(f64, Tensor)> {
    let mut g = Graph::new();
    let input = g.input(x.clone());
    let fwd = net.forward(&mut g, ps, input, BnMode::Train, false)?;
    let mut margin = f64::INFINITY;
    for (i, layer) in net.layers.iter().enumerate() {
        if matches!(layer, Layer::Relu) {
            let v = if i == 0 { input } else { fwd.outputs[i - 1] };
            margin = g.value(v).data().iter().fold(margin, |m, z| m.min(z.abs()));
        }
    }
    Ok((margin, g.value(fwd.output).clone()))
}

fn critic_margin(agent: &Agent, rows: Vec<f64>, n: usize) -> Result<f64> {
    Ok(relu_margin(&agent.critic.net, &agent.critic.params, &Tensor::new(&[n, agent.critic.input_dim], rows)?)?.0)
}

fn random_action(rng: &mut ChaCha8Rng) -> [f64; ACTION_DIM] {
    core::array::from_fn(|_| rng.random_range(-1.0..1.0))
}

/// A small agent and a random replay batch.
fn agent_and_batch(rng: &mut ChaCha8Rng) -> Result<(Agent, Vec<Transition>)> {
    let env = EnvConfig { steps: rng.random_range(1..4), ..EnvConfig::default() };
    let feature_dim = rng.random_range(1..5);
    let classes = rng.random_range(2..5);
    let mut agent = Agent::new(&env, feature_dim, classes, rng.random_range(2..7), rng.random_range(2..7), rng)?;
    // Zero biases put ReLU inputs exactly on the kink for dead rows, and an
    // untouched target makes the TD targets trivial, so jitter everything.
    jitter(&mut agent.actor.params, rng)?;
    jitter(&mut agent.critic.params, rng)?;
    jitter(&mut agent.target.params, rng)?;
    let sd = env.state_dim(feature_dim);
    // Two-row batch norm is nearly singular when the rows are close; keep
    // at least four so central differences stay in their O(h^2) regime.
    let batch = (0..rng.random_range(4..9))
        .map(|_| {
            let terminal = rng.random_bool(0.3);
            Transition {
                state: (0..sd).map(|_| rng.random_range(-1.0..1.0)).collect(),
                action: random_action(rng),
                oracle: random_action(rng),
                reward: rng.random_range(-1.0..1.0),
                next_state: (0..sd).map(|_| rng.random_range(-1.0..1.0)).collect(),
                next_action: if terminal { [0.0; ACTION_DIM] } else { random_action(rng) },
                condition: Arc::new(EpisodeCondition { feat_high: (0..feature_dim).map(|_| rng.random_range(0.0..2.0)).collect(), label: rng.random_range(0..classes) }),
                terminal,
            }
        })
        .collect();
    Ok((agent, batch))
}

fn critic_loss(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (mut agent, batch, conditioned) = loop {
        let (agent, batch) = agent_and_batch(rng)?;
        let conditioned = rng.random_bool(0.5);
        let mut rows = Vec::new();
        for t in &batch {
            agent.critic_row(&t.state, &t.action, &t.condition, conditioned, &mut rows);
        }
        if critic_margin(&agent, rows, batch.len())? > KINK_MARGIN {
            break (agent, batch, conditioned);
        }
    };
    let gamma = rng.random_range(0.0..1.0);
    let refs: Vec<&Transition> = batch.iter().collect();
    check_params(&mut agent, |a| &mut a.critic.params, |a| a.critic_loss_and_grads(&refs, gamma, conditioned))
}

fn actor_loss(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (mut agent, batch, conditioned) = loop {
        let (agent, batch) = agent_and_batch(rng)?;
        let conditioned = rng.random_bool(0.5);
        let sd = agent.actor.state_dim;
        let states: Vec<f64> = batch.iter().flat_map(|t| t.state.iter().copied()).collect();
        let (actor_margin, actions) = relu_margin(&agent.actor.net, &agent.actor.params, &Tensor::new(&[batch.len(), sd], states)?)?;
        let mut rows = Vec::new();
        for (t, a) in batch.iter().zip(actions.data().chunks(ACTION_DIM)) {
            rows.extend_from_slice(&t.state);
            rows.extend_from_slice(a);
            if conditioned {
                rows.extend(t.condition.vector(agent.classes));
            } else {
                rows.extend(core::iter::repeat_n(0.0, agent.condition_dim));
            }
        }
        if actor_margin.min(critic_margin(&agent, rows, batch.len())?) > KINK_MARGIN {
            break (agent, batch, conditioned);
        }
    };
    let eps = rng.random_range(0.0..1.0);
    let refs: Vec<&Transition> = batch.iter().collect();
    check_params(&mut agent, |a| &mut a.actor.params, |a| a.actor_loss_and_grads(&refs, eps, conditioned))
}

/// Every case checked by [`run_suite`].
pub const CASES: &[(&str, Maker)] = &[
    ("affine", affine),
    ("conv2d", conv2d),
    ("max_pool", max_pool),
    ("avg_pool", avg_pool),
    ("global_avg_pool", global_avg_pool),
    ("batch_norm_train", batch_norm_train),
    ("batch_norm_eval", batch_norm_eval),
    ("relu", relu),
    ("tanh", tanh),
    ("softmax", softmax),
    ("concat", concat),
    ("pointwise", pointwise),
    ("reductions", reductions),
    ("cross_entropy", cross_entropy),
    ("layer_stack", layer_stack),
    ("critic_loss", critic_loss),
    ("actor_loss", actor_loss),
];

/// Runs `trials` randomized trials of every case.
pub fn run_suite(trials: usize, seed: u64) -> Result<Vec<CaseResult>> {
    CASES
        .iter()
        .enumerate()
        .map(|(k, (name, make))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((k as u64 + 1) << 32));
            let mut worst = 0.0f64;
            for _ in 0..trials {
                worst = worst.max(make(&mut rng)?);
            }
            Ok(CaseResult { name, trials, worst })
        })
        .collect()
}
