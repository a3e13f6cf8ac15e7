//! GlyphWorld: a procedural fine-grained dataset whose class evidence only
//! survives at high acuity.
//!
//! Every image holds one class glyph and `distractors` pool glyphs, each inked
//! inside a bright disc on a textured background. The class disc is brighter
//! than the distractor discs and carries a faint tint shared by a group of
//! classes, so a thumbnail shows where to look and narrows the class to its
//! group. Glyph cells
//! are aligned with the thumbnail grid and every glyph has the same number of
//! on-pixels per row and column, so the thumbnail carries no identity.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::{self, Image, Rect, CHANNELS};
use crate::rng::derive_seed;

pub const GLYPH: usize = 8;
/// On-pixels per glyph row and per glyph column.
pub const GLYPH_WEIGHT: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct GlyphConfig {
    pub image_size: usize,
    pub thumb_size: usize,
    pub classes: usize,
    pub distractors: usize,
    pub distractor_pool: usize,
    pub disc_radius: f64,
    pub class_disc_level: f64,
    pub distractor_disc_level: f64,
    pub ink_level: f64,
    /// The class disc of class `y` gets tint `y % hue_groups`; distractor
    /// discs stay grey. A thumbnail then narrows the class to a group but no
    /// further, and the tint sits on the object itself.
    pub hue_groups: usize,
    pub hue_strength: f64,
    /// Padding around the class disc for the ground-truth box.
    pub gt_margin: f64,
    pub background_low: f64,
    pub background_high: f64,
    pub placement_retries: usize,
}

impl Default for GlyphConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            thumb_size: 8,
            classes: 10,
            distractors: 3,
            distractor_pool: 6,
            disc_radius: 8.0,
            class_disc_level: 0.85,
            distractor_disc_level: 0.6,
            ink_level: 0.05,
            hue_groups: 2,
            hue_strength: 0.15,
            gt_margin: 8.0,
            background_low: 0.1,
            background_high: 0.4,
            placement_retries: 200,
        }
    }
}

impl GlyphConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("glyph config: {}", m)));
        if self.classes < 2 {
            return bad("need at least two classes");
        }
        if self.image_size % GLYPH != 0 || self.image_size < 3 * GLYPH {
            return bad("image size must be a multiple of 8 and at least 24");
        }
        if self.thumb_size == 0 || self.thumb_size > self.image_size {
            return bad("thumbnail size must be in [1, image size]");
        }
        if self.distractors > 0 && self.distractor_pool == 0 {
            return bad("distractors need a non-empty pool");
        }
        if self.hue_groups == 0 || !(0.0..=0.5).contains(&self.hue_strength) {
            return bad("need at least one hue group and a strength in [0, 0.5]");
        }
        if !(self.gt_margin >= 0.0) {
            return bad("ground-truth margin must be non-negative");
        }
        if !(self.disc_radius >= GLYPH as f64 * 0.75) {
            return bad("disc radius must cover the glyph");
        }
        for v in [self.class_disc_level, self.distractor_disc_level, self.ink_level, self.background_low, self.background_high] {
            if !(0.0..=1.0).contains(&v) {
                return bad("levels must lie in [0, 1]");
            }
        }
        if self.background_low > self.background_high {
            return bad("background range is empty");
        }
        Ok(())
    }

    /// Glyph cells (row, col) whose disc fits inside the image.
    fn cells(&self) -> Vec<(usize, usize)> {
        let n = self.image_size / GLYPH;
        let fits = |i: usize| {
            let c = (i * GLYPH) as f64 + (GLYPH as f64 - 1.0) / 2.0;
            c - self.disc_radius >= 0.0 && c + self.disc_radius <= (self.image_size - 1) as f64
        };
        let ok: Vec<usize> = (0..n).filter(|i| fits(*i)).collect();
        ok.iter().flat_map(|&r| ok.iter().map(move |&c| (r, c))).collect()
    }
}

/// 8x8 binary pattern, row-major.
pub type Glyph = [bool; GLYPH * GLYPH];

/// Class glyphs plus the shared distractor pool.
#[derive(Clone, Debug, PartialEq)]
pub struct GlyphBank {
    pub class_glyphs: Vec<Glyph>,
    pub pool: Vec<Glyph>,
}

pub fn hamming(a: &Glyph, b: &Glyph) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

fn permuted_circulant(rng: &mut ChaCha8Rng) -> Glyph {
    let mut rows: Vec<usize> = (0..GLYPH).collect();
    let mut cols: Vec<usize> = (0..GLYPH).collect();
    rows.shuffle(rng);
    cols.shuffle(rng);
    let mut g = [false; GLYPH * GLYPH];
    for r in 0..GLYPH {
        for k in 0..GLYPH_WEIGHT {
            g[rows[r] * GLYPH + cols[(r + k) % GLYPH]] = true;
        }
    }
    g
}

impl GlyphBank {
    /// Draws `classes + pool` glyphs with pairwise Hamming distance of at
    /// least a quarter of the glyph area.
    pub fn generate(classes: usize, pool: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x6c79, 0));
        let min_dist = GLYPH * GLYPH / 4;
        let mut all: Vec<Glyph> = Vec::new();
        let mut tries = 0;
        while all.len() < classes + pool {
            tries += 1;
            if tries > 100_000 {
                return Err(Error::Dataset("could not draw enough distinct glyphs".into()));
            }
            let g = permuted_circulant(&mut rng);
            if all.iter().all(|o| hamming(o, &g) >= min_dist) {
                all.push(g);
            }
        }
        let pool = all.split_off(classes);
        Ok(Self { class_glyphs: all, pool })
    }
}

/// One labelled image. Pixels are stored as interleaved RGB bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub size: usize,
    pub rgb: Vec<u8>,
    pub label: usize,
    /// Bounds of the class disc plus margin; evaluation only.
    pub gt_box: Rect,
    /// Glyph cell (row, col) of the class glyph.
    pub class_cell: (usize, usize),
}

impl SampleRecord {
    pub fn high(&self) -> Image {
        Image::from_rgb8(self.size, self.size, &self.rgb).expect("sample buffer size")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: GlyphConfig,
    pub bank: GlyphBank,
    pub train: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
}

/// Streams used for derived seeds.
pub const SPLIT_TRAIN: u64 = 1;
pub const SPLIT_TEST: u64 = 2;
pub const SPLIT_VALIDATION: u64 = 3;

pub fn generate_dataset(cfg: &GlyphConfig, seed: u64, n_train: usize, n_test: usize) -> Result<Dataset> {
    cfg.validate()?;
    let bank = GlyphBank::generate(cfg.classes, cfg.distractor_pool, seed)?;
    let train = generate_split(cfg, &bank, seed, SPLIT_TRAIN, n_train)?;
    let test = generate_split(cfg, &bank, seed, SPLIT_TEST, n_test)?;
    Ok(Dataset { config: cfg.clone(), bank, train, test })
}

/// Class-balanced split of `n` images: label `i mod C` shuffled, every image
/// drawn from its own derived seed.
pub fn generate_split(cfg: &GlyphConfig, bank: &GlyphBank, seed: u64, split: u64, n: usize) -> Result<Vec<SampleRecord>> {
    cfg.validate()?;
    let mut labels: Vec<usize> = (0..n).map(|i| i % cfg.classes).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, split, u64::MAX)));
    labels
        .into_iter()
        .enumerate()
        .map(|(i, y)| render_sample(cfg, bank, y, derive_seed(seed, split, i as u64)))
        .collect()
}

/// Pixel centre of the disc drawn in glyph cell `(row, col)`.
pub fn disc_center(cell: (usize, usize)) -> (f64, f64) {
    let off = (GLYPH as f64 - 1.0) / 2.0;
    ((cell.1 * GLYPH) as f64 + off, (cell.0 * GLYPH) as f64 + off)
}

/// Renders one image of class `label`.
pub fn render_sample(cfg: &GlyphConfig, bank: &GlyphBank, label: usize, seed: u64) -> Result<SampleRecord> {
    if label >= cfg.classes || label >= bank.class_glyphs.len() {
        return Err(Error::LabelOutOfRange { label, classes: cfg.classes });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.image_size;
    let mut img = background(cfg, &mut rng);

    let cells = cfg.cells();
    if cells.is_empty() {
        return Err(Error::Dataset("no glyph cell fits the disc radius".into()));
    }
    let min_sep = 2.0 * cfg.disc_radius + 1.0;
    let mut placed: Vec<(usize, usize)> = Vec::with_capacity(cfg.distractors + 1);
    let mut retries = 0;
    while placed.len() < cfg.distractors + 1 {
        let cand = cells[rng.random_range(0..cells.len())];
        let (cx, cy) = disc_center(cand);
        let clear = placed.iter().all(|p| {
            let (px, py) = disc_center(*p);
            libm::sqrt((px - cx) * (px - cx) + (py - cy) * (py - cy)) >= min_sep
        });
        if clear {
            placed.push(cand);
        } else {
            retries += 1;
            if retries > cfg.placement_retries {
                return Err(Error::Dataset(format!(
                    "could not place {} discs of radius {} in a {}x{} image",
                    cfg.distractors + 1,
                    cfg.disc_radius,
                    n,
                    n
                )));
            }
        }
    }

    for (k, cell) in placed.iter().enumerate() {
        let (glyph, colour) = if k == 0 {
            (&bank.class_glyphs[label], disc_colour(cfg, cfg.class_disc_level, label % cfg.hue_groups))
        } else {
            (&bank.pool[rng.random_range(0..bank.pool.len())], [cfg.distractor_disc_level; CHANNELS])
        };
        let (cx, cy) = disc_center(*cell);
        let disc = imaging::FixationGeometry::new(cx, cy, cfg.disc_radius);
        for (px, py) in imaging::disc_pixels(&disc, n, n) {
            img[(py * n + px) * CHANNELS..(py * n + px + 1) * CHANNELS].copy_from_slice(&colour);
        }
        for gy in 0..GLYPH {
            for gx in 0..GLYPH {
                if glyph[gy * GLYPH + gx] {
                    let (py, px) = (cell.0 * GLYPH + gy, cell.1 * GLYPH + gx);
                    for c in 0..CHANNELS {
                        img[(py * n + px) * CHANNELS + c] = cfg.ink_level;
                    }
                }
            }
        }
    }

    let (cx, cy) = disc_center(placed[0]);
    let r = cfg.disc_radius + cfg.gt_margin;
    Ok(SampleRecord {
        size: n,
        rgb: img.iter().map(|v| imaging::quantize(*v)).collect(),
        label,
        gt_box: Rect::new(cx - r, cy - r, cx + r, cy + r).clip(n, n),
        class_cell: placed[0],
    })
}

/// Tint `group` spaced evenly around the hue circle; one group means grey.
pub fn disc_colour(cfg: &GlyphConfig, level: f64, group: usize) -> [f64; CHANNELS] {
    if cfg.hue_groups == 1 {
        return [level; CHANNELS];
    }
    let tau = 2.0 * core::f64::consts::PI;
    let phase = tau * group as f64 / cfg.hue_groups as f64;
    core::array::from_fn(|c| (level + cfg.hue_strength * libm::cos(phase + tau * c as f64 / 3.0)).clamp(0.0, 1.0))
}

/// Smooth value noise on a 4-pixel lattice plus per-pixel grain, tinted
/// per channel. Interleaved RGB.
fn background(cfg: &GlyphConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = cfg.image_size;
    let step = 4;
    let m = n / step + 2;
    let lattice: Vec<f64> = (0..m * m).map(|_| rng.random::<f64>()).collect();
    let tint: [f64; CHANNELS] = core::array::from_fn(|_| rng.random_range(-0.05..0.05));
    let span = cfg.background_high - cfg.background_low;
    let mut out = vec![0.0; n * n * CHANNELS];
    for y in 0..n {
        for x in 0..n {
            let (fy, fx) = (y as f64 / step as f64, x as f64 / step as f64);
            let (iy, ix) = (fy as usize, fx as usize);
            let (ty, tx) = (fy - iy as f64, fx - ix as f64);
            let at = |r: usize, c: usize| lattice[r * m + c];
            let smooth = (at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx) * (1.0 - ty)
                + (at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx) * ty;
            let grain = rng.random_range(-0.15..0.15);
            for (c, t) in tint.iter().enumerate() {
                let v = cfg.background_low + span * (0.5 + 0.7 * (smooth - 0.5) + grain + t);
                out[(y * n + x) * CHANNELS + c] = v.clamp(cfg.background_low, cfg.background_high);
            }
        }
    }
    out
}

/// Glyph rendered as ink on a disc-level patch and area-averaged at the
/// thumbnail ratio. Used to show thumbnails cannot separate classes.
pub fn glyph_thumbnail(cfg: &GlyphConfig, glyph: &Glyph) -> Result<Image> {
    let mut data = vec![0.0; CHANNELS * GLYPH * GLYPH];
    for c in 0..CHANNELS {
        for i in 0..GLYPH * GLYPH {
            data[c * GLYPH * GLYPH + i] = if glyph[i] { cfg.ink_level } else { cfg.class_disc_level };
        }
    }
    let patch = Image::new(GLYPH, GLYPH, data)?;
    let cell = (GLYPH * cfg.thumb_size / cfg.image_size).max(1);
    imaging::downsample(&patch, cell, cell)
}
