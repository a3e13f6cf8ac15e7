//! Dataset gate: a thumbnail alone must not identify the class, a crop of the
//! ground-truth box must.

use alloc::vec::Vec;

use crate::env::thumbnail;
use crate::error::Result;
use crate::imaging::{upsample_psi, Image, Rect};
use crate::models::{BackboneConfig, Perception};
use crate::rng::stream;
use crate::synth::{disc_center, GlyphConfig, SampleRecord};
use crate::trainer::{classifier_accuracy, train_classifier, PretrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct SolvabilityConfig {
    pub backbone: BackboneConfig,
    pub pretrain: PretrainConfig,
    /// Points above chance the thumbnail classifier may reach.
    pub thumb_slack: f64,
    /// Minimum accuracy (percent) of the crop classifier.
    pub crop_floor: f64,
}

impl Default for SolvabilityConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig { channels: [8, 16, 32], coords: true },
            pretrain: PretrainConfig { epochs: 10, batch: 32, lr: 0.1, lr_decay: 0.96, decay_every: 4 },
            thumb_slack: 15.0,
            crop_floor: 95.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolvabilityReport {
    pub chance: f64,
    pub thumb_accuracy: f64,
    pub crop_accuracy: f64,
    pub thumb_limit: f64,
    pub crop_floor: f64,
}

impl SolvabilityReport {
    pub fn thumb_ok(&self) -> bool {
        self.thumb_accuracy <= self.thumb_limit
    }

    pub fn crop_ok(&self) -> bool {
        self.crop_accuracy >= self.crop_floor
    }

    pub fn passed(&self) -> bool {
        self.thumb_ok() && self.crop_ok()
    }
}

/// The thumbnail as the classifier would see it at step zero.
pub fn thumb_view(cfg: &GlyphConfig, s: &SampleRecord) -> Result<Image> {
    let high = s.high();
    upsample_psi(&thumbnail(&high, cfg.thumb_size)?, s.size, s.size)
}

/// A fixed-size window around the ground-truth box at native resolution,
/// shifted inward where the box touches the border so every crop has the
/// same shape.
pub fn crop_view(cfg: &GlyphConfig, s: &SampleRecord) -> Result<Image> {
    let high = s.high();
    let side = (libm::ceil(2.0 * (cfg.disc_radius + cfg.gt_margin)) as usize).clamp(1, s.size);
    let (cx, cy) = disc_center(s.class_cell);
    let start = |c: f64| (libm::round(c - side as f64 / 2.0).max(0.0) as usize).min(s.size - side);
    let (x0, y0) = (start(cx), start(cy));
    high.crop(y0, y0 + side, x0, x0 + side)
}

/// Trains a fresh classifier on `view(train)` and reports its accuracy in
/// percent on `view(test)`.
pub fn gate_accuracy<V>(classes: usize, train: &[SampleRecord], test: &[SampleRecord], check: &SolvabilityConfig, seed: u64, view: V) -> Result<f64>
where
    V: Fn(&SampleRecord) -> Result<Image>,
{
    let mut p = Perception::new(check.backbone, classes, &mut stream(seed, 0x5017, 0))?;
    let xs: Vec<Image> = train.iter().map(&view).collect::<Result<_>>()?;
    train_classifier(&mut p, xs.len(), |i| Ok((xs[i].clone(), train[i].label)), &check.pretrain, &mut stream(seed, 0x5017, 1), |_| {})?;
    let acc = classifier_accuracy(&p, test.len(), |i| Ok((view(&test[i])?, test[i].label)))?;
    Ok(100.0 * acc)
}

pub fn solvability_check(cfg: &GlyphConfig, train: &[SampleRecord], test: &[SampleRecord], check: &SolvabilityConfig, seed: u64) -> Result<SolvabilityReport> {
    cfg.validate()?;
    let chance = 100.0 / cfg.classes as f64;
    let thumb_accuracy = gate_accuracy(cfg.classes, train, test, check, seed, |s| thumb_view(cfg, s))?;
    log::info!("solvability: thumbnail accuracy {:.1}% (chance {:.1}%)", thumb_accuracy, chance);
    let crop_accuracy = gate_accuracy(cfg.classes, train, test, check, seed, |s| crop_view(cfg, s))?;
    log::info!("solvability: gt-crop accuracy {:.1}%", crop_accuracy);
    Ok(SolvabilityReport { chance, thumb_accuracy, crop_accuracy, thumb_limit: chance + check.thumb_slack, crop_floor: check.crop_floor })
}

/// Box of `s` in integer pixel bounds; handy for diagnostics.
pub fn gt_window(s: &SampleRecord) -> Rect {
    let b = s.gt_box.clip(s.size, s.size);
    Rect::new(libm::floor(b.x0), libm::floor(b.y0), libm::ceil(b.x1), libm::ceil(b.y1))
}
