//! Test-time policies and the evaluation report.
//!
//! Policies only ever see the thumbnail, the pixels they fetched and the
//! perception model. Labels enter after the prediction, for scoring.

use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::env::{thumbnail, EnvConfig, Foveator};
use crate::error::{Error, Result};
use crate::imaging::{self, disc_pixels, FixationAction, FixationGeometry, Image, Rect};
use crate::models::{self, Actor, Perception};
use crate::protocol;
use crate::rng::stream;
use crate::synth::SampleRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PolicyKind {
    Drift,
    Random,
    Center,
    Saliency,
    DriftE,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [PolicyKind::Drift, PolicyKind::Random, PolicyKind::Center, PolicyKind::Saliency, PolicyKind::DriftE];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Drift => "drift",
            PolicyKind::Random => "random",
            PolicyKind::Center => "center",
            PolicyKind::Saliency => "saliency",
            PolicyKind::DriftE => "drift-e",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(alloc::format!("unknown policy `{}`", s)))
    }
}

/// Models available at test time. No critic, no labels.
#[derive(Clone, Copy)]
pub struct Deployment<'a> {
    pub perception: &'a Perception,
    pub actor: Option<&'a Actor>,
    pub env: &'a EnvConfig,
}

/// What one policy episode produced, before scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub prediction: usize,
    pub entropy: f64,
    pub pixel_fraction: f64,
    pub fixations: Vec<FixationGeometry>,
    pub new_pixels: Vec<usize>,
    pub fallback: bool,
    pub canvas: Image,
}

/// Deterministic Drift action at wire precision.
pub fn drift_action(actor: &Actor, fov: &Foveator) -> Result<FixationAction> {
    Ok(actor.act(&fov.state().to_vec())?.clamped().to_wire_precision())
}

/// Cumulative pixel target after step `t` (0-based).
fn cumulative_target(budget: f64, t: usize, steps: usize, area: usize) -> usize {
    libm::round(budget * area as f64 * (t + 1) as f64 / steps as f64) as usize
}

/// Radius of a centred disc whose area is the cumulative budget share.
pub fn center_radius(budget: f64, t: usize, steps: usize, h: usize, w: usize) -> f64 {
    libm::sqrt((t + 1) as f64 / steps as f64 * budget * (h * w) as f64 / core::f64::consts::PI)
}

/// Largest radius at `(cx, cy)` whose new pixels do not exceed `allowance`.
fn radius_for_allowance(fov: &Foveator, cx: f64, cy: f64, allowance: usize) -> f64 {
    let (h, w) = (fov.canvas().height(), fov.canvas().width());
    let new_at = |r: f64| {
        disc_pixels(&FixationGeometry::new(cx, cy, r), h, w).filter(|&(x, y)| !fov.canvas().is_revealed(x, y)).count()
    };
    let (mut lo, mut hi) = (0.0, libm::sqrt((h * h + w * w) as f64));
    if new_at(lo) > allowance {
        return -1.0;
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if new_at(mid) <= allowance {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

fn action_of(g: &FixationGeometry, env: &EnvConfig, h: usize, w: usize) -> FixationAction {
    let (x, y) = imaging::normalize_location(g.cx, g.cy, h, w);
    let l = 2.0 * (g.radius - env.b1) / (env.b2 - env.b1) - 1.0;
    FixationAction::new(x, y, l).clamped()
}

/// Runs one policy over one image. `budget` is the target pixel fraction for
/// Random and Center; `threshold` the entropy cutoff for DriftE.
pub fn run_episode(kind: PolicyKind, dep: &Deployment, high: &Image, budget: f64, threshold: f64, rng: &mut ChaCha8Rng) -> Result<EpisodeResult> {
    let (h, w) = (high.height(), high.width());
    let env = dep.env;
    let thumb = thumbnail(high, env.thumb_size)?;
    let mut fov = Foveator::new(dep.perception, env, &thumb, h, w)?;
    let mut new_pixels = Vec::with_capacity(env.steps);
    let actor = || dep.actor.ok_or_else(|| Error::InvalidArgument("policy needs a trained actor".into()));
    for t in 0..env.steps {
        let n = match kind {
            PolicyKind::Drift | PolicyKind::DriftE => {
                let a = drift_action(actor()?, &fov)?;
                fov.step_local(dep.perception, a, high)?
            }
            PolicyKind::Saliency => {
                let a = models::saliency_action(fov.observation(), dep.perception, rng)?;
                fov.step_local(dep.perception, a, high)?
            }
            PolicyKind::Center => {
                let g = FixationGeometry::new(w as f64 / 2.0, h as f64 / 2.0, center_radius(budget, t, env.steps, h, w));
                step_geometry(&mut fov, dep, g, high, true)?
            }
            PolicyKind::Random => {
                let (cx, cy) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
                let target = cumulative_target(budget, t, env.steps, h * w);
                let allowance = target.saturating_sub(fov.canvas().revealed_count());
                let r = radius_for_allowance(&fov, cx, cy, allowance);
                // a negative radius means even one pixel would overshoot
                step_geometry(&mut fov, dep, FixationGeometry::new(cx, cy, r.max(0.0)), high, r >= 0.0)?
            }
        };
        new_pixels.push(n);
    }
    let obs = fov.observation();
    let mut result = EpisodeResult {
        prediction: obs.predicted(),
        entropy: obs.entropy(),
        pixel_fraction: fov.pixel_fraction(),
        fixations: fov.fixations().to_vec(),
        new_pixels,
        fallback: false,
        canvas: fov.canvas().canvas().clone(),
    };
    if kind == PolicyKind::DriftE && result.entropy > threshold {
        result = drift_e_fallback(dep.perception, high, result)?;
    }
    Ok(result)
}

fn step_geometry(fov: &mut Foveator, dep: &Deployment, g: FixationGeometry, high: &Image, reveal: bool) -> Result<usize> {
    let (h, w) = (high.height(), high.width());
    let a = action_of(&g, dep.env, h, w);
    fov.begin_step_with(a, g)?;
    let mut n = 0;
    let wanted = if reveal { fov.requested_pixels()? } else { Vec::new() };
    for (px, py) in wanted {
        if fov.paste(px, py, high.pixel(py, px))? {
            n += 1;
        }
    }
    fov.finish_step(dep.perception)?;
    Ok(n)
}

/// Classifies the full high-acuity image and charges every pixel.
pub fn drift_e_fallback(perception: &Perception, high: &Image, mut r: EpisodeResult) -> Result<EpisodeResult> {
    let obs = perception.observe_one(high)?;
    r.prediction = obs.predicted();
    r.entropy = obs.entropy();
    r.pixel_fraction = 1.0;
    r.fallback = true;
    r.canvas = high.clone();
    Ok(r)
}

/// Entropy cutoff above which `fraction` of the calibration values lie.
pub fn calibrate_threshold(entropies: &[f64], fraction: f64) -> Result<f64> {
    if entropies.is_empty() || !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument("calibration needs entropies and a fraction in [0, 1]".into()));
    }
    let mut v = entropies.to_vec();
    v.sort_by(f64::total_cmp);
    let above = libm::round(fraction * v.len() as f64) as usize;
    if above == 0 {
        return Ok(f64::INFINITY);
    }
    if above >= v.len() {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(v[v.len() - above - 1])
}

/// Hit iff the intersection exceeds 90% of the box's own area.
pub fn is_hit(bbox: &Rect, gt: &Rect) -> bool {
    let own = bbox.area();
    if own <= 0.0 {
        log::warn!("zero-area fixation box counted as a miss");
        return false;
    }
    bbox.intersection(gt).area() > 0.9 * own
}

/// Percentage of hits.
pub fn hit_rate(boxes: &[Rect], gts: &[Rect]) -> Result<f64> {
    if boxes.len() != gts.len() || boxes.is_empty() {
        return Err(Error::InvalidArgument("hit rate needs one ground-truth box per fixation box".into()));
    }
    let hits = boxes.iter().zip(gts).filter(|(b, g)| is_hit(b, g)).count();
    Ok(100.0 * hits as f64 / boxes.len() as f64)
}

/// Bytes a session with these per-step reveals would move.
pub fn session_bytes(thumb_size: usize, new_pixels: &[usize], fallback_pixels: Option<usize>) -> usize {
    let mut l = protocol::SessionLedger::default();
    l.record_session(thumb_size, thumb_size, new_pixels);
    let extra = fallback_pixels.map_or(0, |n| protocol::REQUEST_FRAME + protocol::patch_frame_len(n));
    l.bytes_up + l.bytes_down + extra
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleEval {
    pub index: usize,
    pub label: usize,
    pub prediction: usize,
    pub correct: bool,
    pub pixel_fraction: f64,
    pub bytes: usize,
    pub hit: bool,
    pub entropy: f64,
    pub fallback: bool,
    pub fixations: Vec<FixationGeometry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub policy: PolicyKind,
    pub budget: f64,
    pub threshold: f64,
    pub accuracy: f64,
    pub mean_pixel_percent: f64,
    pub mean_bytes: f64,
    pub hit_rate: f64,
    pub fallback_rate: f64,
    pub records: Vec<SampleEval>,
}

impl EvalReport {
    /// Aggregates from per-sample records.
    pub fn from_records(policy: PolicyKind, budget: f64, threshold: f64, records: Vec<SampleEval>) -> Self {
        let n = records.len().max(1) as f64;
        let pct = |f: &dyn Fn(&SampleEval) -> bool| 100.0 * records.iter().filter(|r| f(r)).count() as f64 / n;
        Self {
            policy,
            budget,
            threshold,
            accuracy: pct(&|r| r.correct),
            mean_pixel_percent: 100.0 * records.iter().map(|r| r.pixel_fraction).sum::<f64>() / n,
            mean_bytes: records.iter().map(|r| r.bytes as f64).sum::<f64>() / n,
            hit_rate: pct(&|r| r.hit),
            fallback_rate: pct(&|r| r.fallback),
            records,
        }
    }
}

const S_EVAL: u64 = 0xe7a1;

/// Evaluates one policy over a split. `seed` drives the stochastic
/// baselines; every sample gets its own stream.
pub fn run_policy_eval(kind: PolicyKind, dep: &Deployment, data: &[SampleRecord], budget: f64, threshold: f64, seed: u64) -> Result<EvalReport> {
    let mut records = Vec::with_capacity(data.len());
    for (i, s) in data.iter().enumerate() {
        let high = s.high();
        let mut rng = stream(seed, S_EVAL, i as u64);
        let r = run_episode(kind, dep, &high, budget, threshold, &mut rng)?;
        let revealed: usize = r.new_pixels.iter().sum();
        let hw = high.height() * high.width();
        let bytes = session_bytes(dep.env.thumb_size, &r.new_pixels, r.fallback.then_some(hw - revealed));
        let hit = match imaging::fit_bounding_box(&r.fixations, high.height(), high.width()) {
            Ok(b) => is_hit(&b, &s.gt_box),
            Err(_) => false,
        };
        records.push(SampleEval {
            index: i,
            label: s.label,
            prediction: r.prediction,
            correct: r.prediction == s.label,
            pixel_fraction: r.pixel_fraction,
            bytes,
            hit,
            entropy: r.entropy,
            fallback: r.fallback,
            fixations: r.fixations,
        });
    }
    Ok(EvalReport::from_records(kind, budget, threshold, records))
}

/// Entropies of plain Drift on a calibration split.
pub fn drift_entropies(dep: &Deployment, data: &[SampleRecord]) -> Result<Vec<f64>> {
    let mut rng = stream(0, S_EVAL, 0);
    data.iter().map(|s| Ok(run_episode(PolicyKind::Drift, dep, &s.high(), 0.0, f64::INFINITY, &mut rng)?.entropy)).collect()
}

/// Accuracy of `g o f` on thumbnails only (upsampled) and on full images.
pub fn reference_accuracies(perception: &Perception, env: &EnvConfig, data: &[SampleRecord]) -> Result<(f64, f64)> {
    let (mut low, mut full) = (0usize, 0usize);
    for s in data {
        let high = s.high();
        let canvas = imaging::upsample_psi(&thumbnail(&high, env.thumb_size)?, high.height(), high.width())?;
        let obs = perception.observe(&[&canvas, &high])?;
        low += (obs[0].predicted() == s.label) as usize;
        full += (obs[1].predicted() == s.label) as usize;
    }
    let n = data.len().max(1) as f64;
    Ok((100.0 * low as f64 / n, 100.0 * full as f64 / n))
}

/// Percentage of `count` out of `n`.
pub fn percent(count: usize, n: usize) -> f64 {
    100.0 * count as f64 / n.max(1) as f64
}

/// Mean of a slice, 0 when empty.
pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::BackboneConfig;
    use crate::synth::{generate_dataset, GlyphConfig};
    use rand::SeedableRng;

    #[test]
    fn hit_examples() {
        let gt = Rect::new(0.0, 0.0, 100.0, 100.0);
        assert!(is_hit(&Rect::new(10.0, 10.0, 20.0, 20.0), &gt));
        assert!(!is_hit(&Rect::new(200.0, 200.0, 210.0, 210.0), &gt));
        let b = Rect::new(90.0, 90.0, 200.0, 200.0);
        assert!((b.intersection(&gt).area() / b.area() - 100.0 / 12100.0).abs() < 1e-12);
        assert!(!is_hit(&b, &gt));
        assert!(!is_hit(&Rect::new(5.0, 5.0, 5.0, 9.0), &gt));
        assert_eq!(hit_rate(&[Rect::new(1.0, 1.0, 2.0, 2.0), b], &[gt, gt]).unwrap(), 50.0);
    }

    #[test]
    fn calibration_quantile() {
        let e: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let thr = calibrate_threshold(&e, 0.25).unwrap();
        assert_eq!(e.iter().filter(|v| **v > thr).count(), 25);
        assert_eq!(calibrate_threshold(&e, 0.0).unwrap(), f64::INFINITY);
        assert_eq!(calibrate_threshold(&e, 1.0).unwrap(), f64::NEG_INFINITY);
    }

    fn setup() -> (Perception, Vec<SampleRecord>) {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = Perception::new(BackboneConfig { channels: [4, 6, 8], coords: true }, 10, &mut rng).unwrap();
        (p, generate_dataset(&GlyphConfig::default(), 2, 0, 6).unwrap().test)
    }

    #[test]
    fn center_radius_matches_budget() {
        let r = center_radius(0.15, 4, 5, 64, 64);
        assert!((core::f64::consts::PI * r * r / 4096.0 - 0.15).abs() < 1e-12);
        let (p, data) = setup();
        let env = EnvConfig::default();
        let dep = Deployment { perception: &p, actor: None, env: &env };
        let rep = run_policy_eval(PolicyKind::Center, &dep, &data, 0.15, f64::INFINITY, 0).unwrap();
        for rec in &rep.records {
            assert!((rec.pixel_fraction - 0.15).abs() < 0.01);
            assert!(rec.fixations.iter().all(|f| f.cx == 32.0 && f.cy == 32.0));
        }
    }

    #[test]
    fn random_meets_budget_and_zero_budget_is_thumbnail_only() {
        let (p, data) = setup();
        let env = EnvConfig::default();
        let dep = Deployment { perception: &p, actor: None, env: &env };
        let rep = run_policy_eval(PolicyKind::Random, &dep, &data, 0.1, f64::INFINITY, 1).unwrap();
        assert!((rep.mean_pixel_percent - 10.0).abs() < 1.0, "{}", rep.mean_pixel_percent);
        let zero = run_policy_eval(PolicyKind::Random, &dep, &data, 0.0, f64::INFINITY, 1).unwrap();
        assert_eq!(zero.mean_pixel_percent, 0.0);
        for (rec, s) in zero.records.iter().zip(&data) {
            let high = s.high();
            let canvas = imaging::upsample_psi(&thumbnail(&high, 8).unwrap(), 64, 64).unwrap();
            assert_eq!(rec.prediction, p.observe_one(&canvas).unwrap().predicted());
        }
    }

    #[test]
    fn drift_e_limits() {
        let (p, data) = setup();
        let env = EnvConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let actor = Actor::new(env.state_dim(8), 8, &mut rng).unwrap();
        let dep = Deployment { perception: &p, actor: Some(&actor), env: &env };
        let plain = run_policy_eval(PolicyKind::Drift, &dep, &data, 0.0, f64::INFINITY, 0).unwrap();
        let never = run_policy_eval(PolicyKind::DriftE, &dep, &data, 0.0, f64::INFINITY, 0).unwrap();
        assert_eq!(plain.accuracy, never.accuracy);
        assert_eq!(plain.mean_pixel_percent, never.mean_pixel_percent);
        let always = run_policy_eval(PolicyKind::DriftE, &dep, &data, 0.0, -1.0, 0).unwrap();
        assert_eq!(always.mean_pixel_percent, 100.0);
        assert_eq!(always.fallback_rate, 100.0);
    }
}
