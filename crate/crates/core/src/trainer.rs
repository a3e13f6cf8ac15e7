//! Off-policy training with a conditioned critic and a coached actor.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::env::{EnvConfig, Environment, EpisodeCondition};
use crate::error::{Error, Result};
use crate::graph::{BnMode, Graph};
use crate::imaging::{FixationAction, Image, CHANNELS};
use crate::layers::apply_bn_stats;
use crate::models::{self, Actor, BackboneConfig, Critic, OuNoise, Perception, ACTION_DIM};
use crate::params::{AdamState, ParameterSet};
use crate::rng::stream;
use crate::synth::SampleRecord;
use crate::tensor::Tensor;

/// One replay record.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    /// Executed action, exploration noise included.
    pub action: [f64; ACTION_DIM],
    /// Coach proposal for the same state.
    pub oracle: [f64; ACTION_DIM],
    pub reward: f64,
    pub next_state: Vec<f64>,
    /// Executed next action; zero at the terminal step.
    pub next_action: [f64; ACTION_DIM],
    pub condition: Arc<EpisodeCondition>,
    pub terminal: bool,
}

/// Fixed-capacity FIFO with uniform sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self { capacity, items: Vec::new(), next: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// Items from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity { 0 } else { self.next };
        self.items[split..].iter().chain(&self.items[..split])
    }

    /// `n` draws with replacement from the occupied slots.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        if self.items.is_empty() {
            return Err(Error::InvalidArgument("sampling an empty replay buffer".into()));
        }
        Ok((0..n).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect())
    }
}

/// Which of the two extensions over plain DDPG are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TrainMode {
    Ddpg,
    Cc,
    Coach,
    Full,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [TrainMode::Ddpg, TrainMode::Cc, TrainMode::Coach, TrainMode::Full];

    pub fn conditioned(self) -> bool {
        matches!(self, TrainMode::Cc | TrainMode::Full)
    }

    pub fn coached(self) -> bool {
        matches!(self, TrainMode::Coach | TrainMode::Full)
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Ddpg => "ddpg",
            TrainMode::Cc => "cc",
            TrainMode::Coach => "coach",
            TrainMode::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ddpg" => Ok(TrainMode::Ddpg),
            "cc" => Ok(TrainMode::Cc),
            "coach" => Ok(TrainMode::Coach),
            "full" => Ok(TrainMode::Full),
            _ => Err(Error::InvalidArgument(alloc::format!("unknown mode `{}`", s))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub env: EnvConfig,
    pub epochs: usize,
    pub freeze_epochs: usize,
    pub episodes_per_epoch: usize,
    pub batch: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub finetune_lr: f64,
    pub tau: f64,
    pub eps0: f64,
    pub eps_decay: f64,
    pub eps_period: usize,
    pub warmup: usize,
    pub buffer: usize,
    pub ou_theta: f64,
    pub ou_sigma: f64,
    pub ou_sigma_decay: f64,
    pub actor_hidden: usize,
    pub critic_hidden: usize,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            epochs: 60,
            freeze_epochs: 50,
            episodes_per_epoch: 100,
            batch: 32,
            actor_lr: 1e-4,
            critic_lr: 1e-4,
            finetune_lr: 1e-4,
            tau: 1e-4,
            eps0: 0.7,
            eps_decay: 0.96,
            eps_period: 1000,
            warmup: 1000,
            buffer: 50_000,
            ou_theta: 0.15,
            ou_sigma: 0.2,
            ou_sigma_decay: 0.995,
            actor_hidden: 128,
            critic_hidden: 128,
            optimizer: Optimizer::Sgd,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        let bad = |m: &str| Err(Error::InvalidArgument(alloc::format!("train config: {}", m)));
        if self.freeze_epochs > self.epochs {
            return bad("freeze_epochs must not exceed epochs");
        }
        if self.batch == 0 || self.buffer == 0 || self.episodes_per_epoch == 0 {
            return bad("batch, buffer and episodes_per_epoch must be positive");
        }
        if !(0.0..=1.0).contains(&self.tau) || !(0.0..=1.0).contains(&self.eps0) {
            return bad("tau and eps0 must lie in [0, 1]");
        }
        if self.eps_period == 0 {
            return bad("eps_period must be positive");
        }
        Ok(())
    }
}

/// `eps0 * decay^floor(u / period)`.
pub fn epsilon(updates: usize, eps0: f64, decay: f64, period: usize) -> f64 {
    eps0 * libm::pow(decay, (updates / period) as f64)
}

/// `r` at the terminal step, `r + gamma * q_next` otherwise.
pub fn td_target(reward: f64, terminal: bool, gamma: f64, q_next: f64) -> f64 {
    if terminal {
        reward
    } else {
        reward + gamma * q_next
    }
}

/// Actor, critic and target critic, sized for one perception model.
#[derive(Clone, Debug, PartialEq)]
pub struct Agent {
    pub actor: Actor,
    pub critic: Critic,
    pub target: Critic,
    pub classes: usize,
    pub condition_dim: usize,
    pub optimizer: Optimizer,
    actor_adam: AdamState,
    critic_adam: AdamState,
}

/// Update rule for the actor and critic.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam,
}

impl Optimizer {
    pub fn name(self) -> &'static str {
        match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            _ => Err(Error::InvalidArgument(alloc::format!("unknown optimizer `{}`", s))),
        }
    }
}

fn apply(opt: Optimizer, params: &mut ParameterSet, adam: &mut AdamState, lr: f64) -> Result<()> {
    match opt {
        Optimizer::Sgd => params.sgd_step(lr),
        Optimizer::Adam => params.adam_step(adam, lr),
    }
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(env: &EnvConfig, feature_dim: usize, classes: usize, actor_hidden: usize, critic_hidden: usize, rng: &mut R) -> Result<Self> {
        let state_dim = env.state_dim(feature_dim);
        let condition_dim = EpisodeCondition::dim(feature_dim, classes);
        let actor = Actor::new(state_dim, actor_hidden, rng)?;
        let critic = Critic::new(state_dim + ACTION_DIM + condition_dim, critic_hidden, rng)?;
        let target = critic.clone();
        Ok(Self { actor, critic, target, classes, condition_dim, optimizer: Optimizer::Sgd, actor_adam: AdamState::default(), critic_adam: AdamState::default() })
    }

    /// `[s, a, C]`, with `C` zeroed for a global critic.
    pub fn critic_row(&self, state: &[f64], action: &[f64; ACTION_DIM], cond: &EpisodeCondition, conditioned: bool, out: &mut Vec<f64>) {
        out.extend_from_slice(state);
        out.extend_from_slice(action);
        if conditioned {
            out.extend(cond.vector(self.classes));
        } else {
            out.extend(core::iter::repeat(0.0).take(self.condition_dim));
        }
    }

    /// TD targets for a batch from the target critic.
    pub fn targets(&self, batch: &[&Transition], gamma: f64, conditioned: bool) -> Result<Vec<f64>> {
        let live: Vec<usize> = (0..batch.len()).filter(|i| !batch[*i].terminal).collect();
        let mut q_next = vec![0.0; batch.len()];
        if !live.is_empty() && gamma != 0.0 {
            let mut rows = Vec::with_capacity(live.len() * self.critic.input_dim);
            for &i in &live {
                let t = batch[i];
                self.critic_row(&t.next_state, &t.next_action, &t.condition, conditioned, &mut rows);
            }
            let vals = self.target.values(Tensor::new(&[live.len(), self.critic.input_dim], rows)?)?;
            for (k, &i) in live.iter().enumerate() {
                q_next[i] = vals[k];
            }
        }
        Ok(batch.iter().zip(&q_next).map(|(t, q)| td_target(t.reward, t.terminal, gamma, *q)).collect())
    }

    /// Mean squared TD error; fills critic gradients and returns the loss.
    pub fn critic_loss_and_grads(&mut self, batch: &[&Transition], gamma: f64, conditioned: bool) -> Result<f64> {
        let q = self.targets(batch, gamma, conditioned)?;
        let mut rows = Vec::with_capacity(batch.len() * self.critic.input_dim);
        for t in batch {
            self.critic_row(&t.state, &t.action, &t.condition, conditioned, &mut rows);
        }
        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[batch.len(), self.critic.input_dim], rows)?);
        let out = self.critic.net.forward(&mut g, &self.critic.params, x, BnMode::Train, true)?.output;
        let target = g.input(Tensor::new(&[batch.len(), 1], q)?);
        let diff = g.sub(out, target)?;
        let sq = g.square(diff)?;
        let loss = g.mean(sq)?;
        let value = g.value(loss).item()?;
        g.backward(loss)?.accumulate_into(&mut self.critic.params)?;
        Ok(value)
    }

    /// One SGD step on the critic only.
    pub fn critic_step(&mut self, batch: &[&Transition], gamma: f64, conditioned: bool, lr: f64) -> Result<f64> {
        let loss = self.critic_loss_and_grads(batch, gamma, conditioned)?;
        apply(self.optimizer, &mut self.critic.params, &mut self.critic_adam, lr)?;
        Ok(loss)
    }

    /// `-(1 - eps) mean Q(s, pi(s) | C) + eps mean |pi(s) - a'|^2`; fills
    /// actor gradients (critic frozen) and returns the loss.
    pub fn actor_loss_and_grads(&mut self, batch: &[&Transition], eps: f64, conditioned: bool) -> Result<f64> {
        if !(0.0..=1.0).contains(&eps) {
            return Err(Error::InvalidArgument(alloc::format!("epsilon {} outside [0, 1]", eps)));
        }
        let n = batch.len();
        let sd = self.actor.state_dim;
        let mut states = Vec::with_capacity(n * sd);
        let mut oracle = Vec::with_capacity(n * ACTION_DIM);
        let mut conds = Vec::with_capacity(n * self.condition_dim);
        for t in batch {
            states.extend_from_slice(&t.state);
            oracle.extend_from_slice(&t.oracle);
            if conditioned {
                conds.extend(t.condition.vector(self.classes));
            } else {
                conds.extend(core::iter::repeat(0.0).take(self.condition_dim));
            }
        }
        let mut g = Graph::new();
        let s = g.input(Tensor::new(&[n, sd], states)?);
        let fwd = self.actor.net.forward(&mut g, &self.actor.params, s, BnMode::Train, true)?;
        let a = fwd.output;
        let c = g.input(Tensor::new(&[n, self.condition_dim], conds)?);
        let row = g.concat(&[s, a, c])?;
        let q = self.critic.net.forward(&mut g, &self.critic.params, row, BnMode::Train, false)?.output;
        let q_mean = g.mean(q)?;
        let q_term = g.scale(q_mean, -(1.0 - eps))?;
        let target = g.input(Tensor::new(&[n, ACTION_DIM], oracle)?);
        let diff = g.sub(a, target)?;
        let sq = g.square(diff)?;
        let total = g.sum(sq)?;
        let imitation = g.scale(total, eps / n as f64)?;
        let loss = g.add(q_term, imitation)?;
        let value = g.value(loss).item()?;
        g.backward(loss)?.accumulate_into(&mut self.actor.params)?;
        apply_bn_stats(&mut self.actor.params, &fwd.bn_stats)?;
        Ok(value)
    }

    /// One SGD step on the actor only.
    pub fn actor_step(&mut self, batch: &[&Transition], eps: f64, conditioned: bool, lr: f64) -> Result<f64> {
        let loss = self.actor_loss_and_grads(batch, eps, conditioned)?;
        apply(self.optimizer, &mut self.actor.params, &mut self.actor_adam, lr)?;
        Ok(loss)
    }

    pub fn soft_update(&mut self, tau: f64) -> Result<()> {
        self.target.params.soft_update_from(&self.critic.params, tau)
    }

    pub fn save(&self, ck: &mut Checkpoint) {
        ck.insert_set(models::PREFIX_ACTOR, &self.actor.params);
        ck.insert_set(models::PREFIX_CRITIC, &self.critic.params);
        ck.insert_set(models::PREFIX_CRITIC_TARGET, &self.target.params);
    }

    pub fn load(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.load_set(models::PREFIX_ACTOR, &mut self.actor.params)?;
        ck.load_set(models::PREFIX_CRITIC, &mut self.critic.params)?;
        ck.load_set(models::PREFIX_CRITIC_TARGET, &mut self.target.params)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 12, batch: 32, lr: 0.01, lr_decay: 0.96, decay_every: 4 }
    }
}

impl PretrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * libm::pow(self.lr_decay, (epoch / self.decay_every.max(1)) as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifyEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
}

/// One SGD step of cross-entropy on `g(f(x))` with batch statistics.
pub fn classify_step(p: &mut Perception, images: &[Image], labels: &[usize], lr: f64) -> Result<(f64, usize)> {
    let first = images.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * CHANNELS * h * w);
    images.iter().for_each(|im| data.extend_from_slice(im.data()));
    let mut g = Graph::new();
    let x = g.input(Tensor::new(&[images.len(), CHANNELS, h, w], data)?);
    let vars = p.forward(&mut g, x, BnMode::Train, true)?;
    let loss = g.cross_entropy(vars.logits, labels)?;
    let value = g.value(loss).item()?;
    let logits = g.value(vars.logits);
    let correct = (0..labels.len()).filter(|i| models::argmax(logits.row(*i)) == labels[*i]).count();
    let grads = g.backward(loss)?;
    let bn = vars.bn_stats;
    grads.accumulate_into_split(&mut p.f, &mut p.g)?;
    p.f.sgd_step(lr)?;
    p.g.sgd_step(lr)?;
    apply_bn_stats(&mut p.f, &bn)?;
    Ok((value, correct))
}

/// Supervised training of `g o f` on `n` examples produced by `example`.
pub fn train_classifier<F>(p: &mut Perception, n: usize, mut example: F, cfg: &PretrainConfig, rng: &mut ChaCha8Rng, mut on_epoch: impl FnMut(&ClassifyEpoch)) -> Result<Vec<ClassifyEpoch>>
where
    F: FnMut(usize) -> Result<(Image, usize)>,
{
    use rand::seq::SliceRandom;
    if n == 0 {
        return Err(Error::InvalidArgument("no training examples".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let lr = cfg.lr_at(epoch);
        let (mut loss, mut correct) = (0.0, 0);
        for chunk in order.chunks(cfg.batch.max(2)) {
            if chunk.len() < 2 {
                continue;
            }
            let mut imgs = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (im, y) = example(i)?;
                imgs.push(im);
                labels.push(y);
            }
            let (l, c) = classify_step(p, &imgs, &labels, lr)?;
            loss += l * chunk.len() as f64;
            correct += c;
        }
        let e = ClassifyEpoch { epoch, lr, loss: loss / n as f64, accuracy: correct as f64 / n as f64 };
        on_epoch(&e);
        log.push(e);
    }
    Ok(log)
}

/// Accuracy of `g o f` on `n` examples.
pub fn classifier_accuracy<F>(p: &Perception, n: usize, mut example: F) -> Result<f64>
where
    F: FnMut(usize) -> Result<(Image, usize)>,
{
    let mut correct = 0;
    let mut i = 0;
    while i < n {
        let end = (i + 32).min(n);
        let mut imgs = Vec::new();
        let mut labels = Vec::new();
        for k in i..end {
            let (im, y) = example(k)?;
            imgs.push(im);
            labels.push(y);
        }
        let refs: Vec<&Image> = imgs.iter().collect();
        for (o, y) in p.observe(&refs)?.iter().zip(&labels) {
            if o.predicted() == *y {
                correct += 1;
            }
        }
        i = end;
    }
    Ok(correct as f64 / n.max(1) as f64)
}

/// Supervised `g o f` on full high-acuity images.
pub fn pretrain(backbone: &BackboneConfig, classes: usize, train: &[SampleRecord], cfg: &PretrainConfig, seed: u64, on_epoch: impl FnMut(&ClassifyEpoch)) -> Result<(Perception, Vec<ClassifyEpoch>)> {
    let mut init = stream(seed, 0x7072, 0);
    let mut p = Perception::new(backbone.clone(), classes, &mut init)?;
    let mut rng = stream(seed, 0x7072, 1);
    let log = train_classifier(&mut p, train.len(), |i| Ok((train[i].high(), train[i].label)), cfg, &mut rng, on_epoch)?;
    Ok((p, log))
}

/// Per-epoch training metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mode: TrainMode,
    pub mean_return: f64,
    /// Accuracy of `g o f` on the final canvases of this epoch's rollouts.
    pub accuracy: f64,
    pub mean_pixel_fraction: f64,
    pub epsilon: f64,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub classify_loss: f64,
    pub ou_sigma: f64,
    pub buffer_len: usize,
    pub updates: usize,
}

/// Everything a training run produces.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub perception: Perception,
    pub agent: Agent,
    pub metrics: Vec<EpochMetrics>,
    pub buffer_len: usize,
}

/// RNG streams of a training run.
const S_INIT: u64 = 0x7401;
const S_EPISODE: u64 = 0x7402;
const S_NOISE: u64 = 0x7403;
const S_ORACLE: u64 = 0x7404;
const S_BATCH: u64 = 0x7405;
const S_FINETUNE: u64 = 0x7406;

/// Trainer state, advanced one episode at a time.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    mode: TrainMode,
    /// Overrides for the switch-composition identities.
    eps_override: Option<f64>,
    zero_condition: bool,
    pub perception: Perception,
    pub agent: Agent,
    pub buffer: ReplayBuffer,
    train: &'a [SampleRecord],
    ou: OuNoise,
    updates: usize,
    rng_episode: ChaCha8Rng,
    rng_noise: ChaCha8Rng,
    rng_oracle: ChaCha8Rng,
    rng_batch: ChaCha8Rng,
    rng_finetune: ChaCha8Rng,
}

/// Running sums over one epoch.
#[derive(Default)]
struct EpochAcc {
    ret: f64,
    correct: usize,
    pixels: f64,
    episodes: usize,
    critic: f64,
    actor: f64,
    steps: usize,
    canvases: Vec<(Image, usize)>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &TrainConfig, mode: TrainMode, perception: Perception, train: &'a [SampleRecord], seed: u64) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::InvalidArgument("empty training split".into()));
        }
        let mut init = stream(seed, S_INIT, 0);
        let mut agent = Agent::new(&cfg.env, perception.feature_dim(), perception.classes, cfg.actor_hidden, cfg.critic_hidden, &mut init)?;
        agent.optimizer = cfg.optimizer;
        Ok(Self {
            cfg: cfg.clone(),
            mode,
            eps_override: None,
            zero_condition: false,
            perception,
            agent,
            buffer: ReplayBuffer::new(cfg.buffer),
            train,
            ou: OuNoise::new(cfg.ou_theta, cfg.ou_sigma, 0.0),
            updates: 0,
            rng_episode: stream(seed, S_EPISODE, 0),
            rng_noise: stream(seed, S_NOISE, 0),
            rng_oracle: stream(seed, S_ORACLE, 0),
            rng_batch: stream(seed, S_BATCH, 0),
            rng_finetune: stream(seed, S_FINETUNE, 0),
        })
    }

    /// Forces epsilon to a constant regardless of mode.
    pub fn force_epsilon(&mut self, eps: f64) {
        self.eps_override = Some(eps);
    }

    /// Feeds an all-zero condition to the critic regardless of mode.
    pub fn zero_condition(&mut self) {
        self.zero_condition = true;
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    fn conditioned(&self) -> bool {
        self.mode.conditioned() && !self.zero_condition
    }

    pub fn current_epsilon(&self) -> f64 {
        if let Some(e) = self.eps_override {
            return e;
        }
        if self.mode.coached() {
            epsilon(self.updates, self.cfg.eps0, self.cfg.eps_decay, self.cfg.eps_period)
        } else {
            0.0
        }
    }

    fn update(&mut self, acc: &mut EpochAcc) -> Result<()> {
        if self.buffer.len() < self.cfg.warmup.max(1) {
            return Ok(());
        }
        let conditioned = self.conditioned();
        let eps = self.current_epsilon();
        let batch = self.buffer.sample(self.cfg.batch, &mut self.rng_batch)?;
        acc.critic += self.agent.critic_step(&batch, self.cfg.env.gamma, conditioned, self.cfg.critic_lr)?;
        self.agent.soft_update(self.cfg.tau)?;
        acc.actor += self.agent.actor_step(&batch, eps, conditioned, self.cfg.actor_lr)?;
        acc.steps += 1;
        self.updates += 1;
        Ok(())
    }

    fn episode(&mut self, acc: &mut EpochAcc, keep_canvas: bool) -> Result<()> {
        let sample = &self.train[self.rng_episode.random_range(0..self.train.len())];
        let (mut env, mut state) = Environment::reset(&self.perception, &self.cfg.env, sample)?;
        let cond = Arc::new(env.condition().clone());
        self.ou.reset();
        let mut pending: Option<Transition> = None;
        let mut ret = 0.0;
        let mut discount = 1.0;
        for _ in 0..self.cfg.env.steps {
            let s = state.to_vec();
            let pi = self.agent.actor.act(&s)?.to_array();
            let noise = self.ou.sample(&mut self.rng_noise);
            let action = FixationAction::new(pi[0] + noise[0], pi[1] + noise[1], pi[2] + noise[2]).clamped();
            let oracle = models::oracle_action(env.observation(), sample.label, &self.perception, &mut self.rng_oracle)?;
            if let Some(mut prev) = pending.take() {
                prev.next_action = action.to_array();
                self.buffer.push(prev);
            }
            let out = env.step(&self.perception, action)?;
            ret += discount * out.reward.total;
            discount *= self.cfg.env.gamma;
            pending = Some(Transition {
                state: s,
                action: action.to_array(),
                oracle: oracle.to_array(),
                reward: out.reward.total,
                next_state: out.state.to_vec(),
                next_action: [0.0; ACTION_DIM],
                condition: cond.clone(),
                terminal: out.done,
            });
            state = out.state;
            self.update(acc)?;
        }
        if let Some(last) = pending.take() {
            self.buffer.push(last);
        }
        acc.ret += ret;
        acc.pixels += env.foveator().pixel_fraction();
        if env.observation().predicted() == sample.label {
            acc.correct += 1;
        }
        acc.episodes += 1;
        if keep_canvas {
            acc.canvases.push((env.foveator().canvas().canvas().clone(), sample.label));
        }
        Ok(())
    }

    /// Runs epoch `epoch` (0-based) and returns its metrics.
    pub fn run_epoch(&mut self, epoch: usize) -> Result<EpochMetrics> {
        let finetune = epoch >= self.cfg.freeze_epochs;
        let mut acc = EpochAcc::default();
        for _ in 0..self.cfg.episodes_per_epoch {
            self.episode(&mut acc, finetune)?;
        }
        let mut classify_loss = 0.0;
        if finetune {
            use rand::seq::SliceRandom;
            acc.canvases.shuffle(&mut self.rng_finetune);
            let mut batches = 0;
            for chunk in acc.canvases.chunks(self.cfg.batch) {
                if chunk.len() < 2 {
                    continue;
                }
                let imgs: Vec<Image> = chunk.iter().map(|c| c.0.clone()).collect();
                let labels: Vec<usize> = chunk.iter().map(|c| c.1).collect();
                classify_loss += classify_step(&mut self.perception, &imgs, &labels, self.cfg.finetune_lr)?.0;
                batches += 1;
            }
            classify_loss /= batches.max(1) as f64;
        }
        let n = acc.episodes.max(1) as f64;
        let m = EpochMetrics {
            epoch,
            mode: self.mode,
            mean_return: acc.ret / n,
            accuracy: acc.correct as f64 / n,
            mean_pixel_fraction: acc.pixels / n,
            epsilon: self.current_epsilon(),
            critic_loss: acc.critic / acc.steps.max(1) as f64,
            actor_loss: acc.actor / acc.steps.max(1) as f64,
            classify_loss,
            ou_sigma: self.ou.sigma,
            buffer_len: self.buffer.len(),
            updates: self.updates,
        };
        self.ou.sigma *= self.cfg.ou_sigma_decay;
        Ok(m)
    }

    pub fn run(mut self, mut on_epoch: impl FnMut(&EpochMetrics, &Perception, &Agent) -> Result<()>) -> Result<TrainOutcome> {
        let mut metrics = Vec::with_capacity(self.cfg.epochs);
        for epoch in 0..self.cfg.epochs {
            let m = self.run_epoch(epoch)?;
            on_epoch(&m, &self.perception, &self.agent)?;
            metrics.push(m);
        }
        Ok(TrainOutcome { buffer_len: self.buffer.len(), perception: self.perception, agent: self.agent, metrics })
    }
}

/// Trains one mode from a pretrained perception model.
pub fn train(cfg: &TrainConfig, mode: TrainMode, pretrained: &Perception, data: &[SampleRecord], seed: u64, on_epoch: impl FnMut(&EpochMetrics, &Perception, &Agent) -> Result<()>) -> Result<TrainOutcome> {
    Trainer::new(cfg, mode, pretrained.clone(), data, seed)?.run(on_epoch)
}
