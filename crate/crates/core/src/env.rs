//! The fixation MDP: state assembly, rewards and the episode loop.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::imaging::{self, FixationAction, FixationGeometry, Image, MixedAcuityImage, CHANNELS};
use crate::models::{Observation, Perception, ACTION_DIM};
use crate::synth::SampleRecord;

#[derive(Clone, Debug, PartialEq)]
pub struct EnvConfig {
    /// Fixations per episode.
    pub steps: usize,
    pub lambda: f64,
    pub threshold: f64,
    pub gamma: f64,
    pub b1: f64,
    pub b2: f64,
    pub thumb_size: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self { steps: 5, lambda: 5.0, threshold: 0.25, gamma: 0.9, b1: 4.0, b2: 16.0, thumb_size: 8 }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(alloc::format!("env config: {}", m)));
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return bad("threshold must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(self.b1 > 0.0 && self.b1 <= self.b2) {
            return bad("radius bounds must satisfy 0 < b1 <= b2");
        }
        if self.thumb_size == 0 {
            return bad("thumbnail size must be positive");
        }
        Ok(())
    }

    pub fn state_dim(&self, feature_dim: usize) -> usize {
        3 * feature_dim + ACTION_DIM * self.steps
    }
}

/// `-1` at the last step when the revealed fraction exceeds the threshold.
pub fn efficiency_reward(t: usize, steps: usize, p: f64, threshold: f64) -> f64 {
    if t == steps && p > threshold {
        -1.0
    } else {
        0.0
    }
}

/// Drop in cross-entropy from one canvas to the next.
pub fn accuracy_reward(xe_before: f64, xe_after: f64) -> f64 {
    xe_before - xe_after
}

pub fn total_reward(ra: f64, re: f64, lambda: f64) -> f64 {
    ra + lambda * re
}

/// Quantized, area-averaged thumbnail; what the edge sends.
pub fn thumbnail(high: &Image, size: usize) -> Result<Image> {
    Ok(imaging::downsample(high, size, size)?.quantized())
}

/// `[f(I_t), f(I_{t-1}), f(I_t^local), h_t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeState {
    pub feat_cur: Vec<f64>,
    pub feat_prev: Vec<f64>,
    pub feat_local: Vec<f64>,
    pub history: Vec<f64>,
}

impl EpisodeState {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(&self.feat_cur);
        v.extend_from_slice(&self.feat_prev);
        v.extend_from_slice(&self.feat_local);
        v.extend_from_slice(&self.history);
        v
    }

    pub fn len(&self) -> usize {
        self.feat_cur.len() + self.feat_prev.len() + self.feat_local.len() + self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `[f(I_high), y]`, fixed for an episode. Training only.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeCondition {
    pub feat_high: Vec<f64>,
    pub label: usize,
}

impl EpisodeCondition {
    /// Critic input block: high-acuity features then a one-hot label.
    pub fn vector(&self, classes: usize) -> Vec<f64> {
        let mut v = self.feat_high.clone();
        v.extend((0..classes).map(|c| if c == self.label { 1.0 } else { 0.0 }));
        v
    }

    pub fn dim(feature_dim: usize, classes: usize) -> usize {
        feature_dim + classes
    }
}

/// Label-free fixation loop over a mixed-acuity canvas. The cloud side of a
/// session and every evaluation policy run on this.
#[derive(Clone, Debug)]
pub struct Foveator {
    cfg: EnvConfig,
    canvas: MixedAcuityImage,
    t: usize,
    history: Vec<f64>,
    current: Observation,
    prev_features: Vec<f64>,
    local_features: Vec<f64>,
    fixations: Vec<FixationGeometry>,
    pending: Option<FixationGeometry>,
}

impl Foveator {
    /// Starts from a thumbnail; the canvas is its upsampled version.
    pub fn new(perception: &Perception, cfg: &EnvConfig, thumb: &Image, height: usize, width: usize) -> Result<Self> {
        cfg.validate()?;
        let canvas = MixedAcuityImage::from_low(thumb, height, width)?;
        let current = perception.observe_one(canvas.canvas())?;
        let dim = perception.feature_dim();
        Ok(Self {
            cfg: cfg.clone(),
            canvas,
            t: 0,
            history: vec![0.0; ACTION_DIM * cfg.steps],
            current,
            prev_features: vec![0.0; dim],
            local_features: vec![0.0; dim],
            fixations: Vec::new(),
            pending: None,
        })
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn done(&self) -> bool {
        self.t == self.cfg.steps
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn canvas(&self) -> &MixedAcuityImage {
        &self.canvas
    }

    pub fn observation(&self) -> &Observation {
        &self.current
    }

    pub fn fixations(&self) -> &[FixationGeometry] {
        &self.fixations
    }

    pub fn pixel_fraction(&self) -> f64 {
        self.canvas.pixel_fraction()
    }

    pub fn state(&self) -> EpisodeState {
        EpisodeState {
            feat_cur: self.current.features.clone(),
            feat_prev: self.prev_features.clone(),
            feat_local: self.local_features.clone(),
            history: self.history.clone(),
        }
    }

    /// Records the action in the history and returns the disc to reveal.
    pub fn begin_step(&mut self, action: FixationAction) -> Result<FixationGeometry> {
        if self.done() {
            return Err(Error::Episode("step after the episode finished"));
        }
        if self.pending.is_some() {
            return Err(Error::Episode("previous fixation not completed"));
        }
        let (h, w) = (self.canvas.height(), self.canvas.width());
        let geom = imaging::denormalize_action(action, h, w, self.cfg.b1, self.cfg.b2);
        self.begin_step_with(action, geom)
    }

    /// Like [`Self::begin_step`] but with an explicit disc. Baselines use this
    /// for radii outside the action range; `action` only feeds the history.
    pub fn begin_step_with(&mut self, action: FixationAction, geom: FixationGeometry) -> Result<FixationGeometry> {
        if self.done() {
            return Err(Error::Episode("step after the episode finished"));
        }
        if self.pending.is_some() {
            return Err(Error::Episode("previous fixation not completed"));
        }
        let a = action.clamped().to_array();
        self.history[ACTION_DIM * self.t..ACTION_DIM * (self.t + 1)].copy_from_slice(&a);
        self.pending = Some(geom);
        Ok(geom)
    }

    /// Pixels of the pending disc that still need to be fetched.
    pub fn requested_pixels(&self) -> Result<Vec<(usize, usize)>> {
        let g = self.pending.as_ref().ok_or(Error::Episode("no pending fixation"))?;
        Ok(self.canvas.unrevealed_in(g))
    }

    /// Pastes one fetched pixel. Returns whether it was new.
    pub fn paste(&mut self, px: usize, py: usize, rgb: [f64; CHANNELS]) -> Result<bool> {
        if px >= self.canvas.width() || py >= self.canvas.height() {
            return Err(Error::Episode("pixel outside the canvas"));
        }
        Ok(self.canvas.reveal_pixel(px, py, rgb))
    }

    /// Re-observes the canvas and local patch after the pending fixation.
    pub fn finish_step(&mut self, perception: &Perception) -> Result<()> {
        let geom = self.pending.take().ok_or(Error::Episode("no pending fixation"))?;
        let (h, w) = (self.canvas.height(), self.canvas.width());
        let local = imaging::crop_local_patch(&self.canvas, &geom, h, w)?;
        let mut obs = perception.observe(&[self.canvas.canvas(), &local])?;
        let local_obs = obs.pop().expect("two observations");
        let cur = obs.pop().expect("two observations");
        self.prev_features = core::mem::replace(&mut self.current, cur).features;
        self.local_features = local_obs.features;
        self.fixations.push(geom);
        self.t += 1;
        Ok(())
    }

    /// Whole step against a locally held high-acuity image.
    pub fn step_local(&mut self, perception: &Perception, action: FixationAction, high: &Image) -> Result<usize> {
        let geom = self.begin_step(action)?;
        let new = self.canvas.reveal_fixation(&geom, high)?;
        self.finish_step(perception)?;
        Ok(new)
    }
}

/// Reward breakdown of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reward {
    pub accuracy: f64,
    pub efficiency: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub state: EpisodeState,
    pub reward: Reward,
    pub done: bool,
    pub new_pixels: usize,
    pub pixel_fraction: f64,
    pub entropy: f64,
}

/// One trace line of an episode.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace {
    pub t: usize,
    pub action: FixationAction,
    pub new_pixels: usize,
    pub pixel_fraction: f64,
    pub reward: Reward,
    pub entropy: f64,
}

/// Training environment: a [`Foveator`] plus the label and the high-acuity
/// image, so that rewards and the condition can be computed.
#[derive(Clone, Debug)]
pub struct Environment {
    fov: Foveator,
    high: Image,
    label: usize,
    condition: EpisodeCondition,
    trace: Vec<StepTrace>,
}

impl Environment {
    pub fn reset(perception: &Perception, cfg: &EnvConfig, sample: &SampleRecord) -> Result<(Self, EpisodeState)> {
        let high = sample.high();
        let thumb = thumbnail(&high, cfg.thumb_size)?;
        let fov = Foveator::new(perception, cfg, &thumb, high.height(), high.width())?;
        let condition = EpisodeCondition { feat_high: perception.observe_one(&high)?.features, label: sample.label };
        let s0 = fov.state();
        Ok((Self { fov, high, label: sample.label, condition, trace: Vec::new() }, s0))
    }

    pub fn condition(&self) -> &EpisodeCondition {
        &self.condition
    }

    pub fn foveator(&self) -> &Foveator {
        &self.fov
    }

    pub fn observation(&self) -> &Observation {
        self.fov.observation()
    }

    pub fn trace(&self) -> &[StepTrace] {
        &self.trace
    }

    pub fn high(&self) -> &Image {
        &self.high
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn step(&mut self, perception: &Perception, action: FixationAction) -> Result<StepOutcome> {
        let xe_before = self.fov.observation().cross_entropy(self.label)?;
        let new_pixels = self.fov.step_local(perception, action, &self.high)?;
        let obs = self.fov.observation();
        let xe_after = obs.cross_entropy(self.label)?;
        let cfg = self.fov.config();
        let p = self.fov.pixel_fraction();
        let accuracy = accuracy_reward(xe_before, xe_after);
        let efficiency = efficiency_reward(self.fov.t(), cfg.steps, p, cfg.threshold);
        let reward = Reward { accuracy, efficiency, total: total_reward(accuracy, efficiency, cfg.lambda) };
        let entropy = obs.entropy();
        self.trace.push(StepTrace {
            t: self.fov.t() - 1,
            action: action.clamped(),
            new_pixels,
            pixel_fraction: p,
            reward,
            entropy,
        });
        Ok(StepOutcome { state: self.fov.state(), reward, done: self.fov.done(), new_pixels, pixel_fraction: p, entropy })
    }

    /// Discounted return of the trace so far.
    pub fn discounted_return(&self) -> f64 {
        let g = self.fov.config().gamma;
        self.trace.iter().rev().fold(0.0, |acc, s| s.reward.total + g * acc)
    }
}
