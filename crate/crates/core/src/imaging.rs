//! Mixed-acuity images: resampling, fixation geometry, circular reveals with
//! exact pixel accounting, local crops, bounding boxes and overlay rendering.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;

/// Planar (channel-major) RGB image with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != CHANNELS * height * width {
            return Err(Error::InvalidArgument(format!(
                "{}x{} image needs {} values, got {}",
                height,
                width,
                CHANNELS * height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("image values must lie in [0, 1]".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, data: vec![value.clamp(0.0, 1.0); CHANNELS * height * width] }
    }

    /// Builds an image from interleaved 8-bit RGB (`v / 255`).
    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != CHANNELS * height * width {
            return Err(Error::InvalidArgument("rgb buffer size".into()));
        }
        let plane = height * width;
        let mut data = vec![0.0; CHANNELS * plane];
        for (i, px) in rgb.chunks_exact(CHANNELS).enumerate() {
            for c in 0..CHANNELS {
                data[c * plane + i] = dequantize(px[c]);
            }
        }
        Ok(Self { height, width, data })
    }

    /// Interleaved 8-bit RGB, rounding to nearest.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(CHANNELS * plane);
        for i in 0..plane {
            for c in 0..CHANNELS {
                out.push(quantize(self.data[c * plane + i]));
            }
        }
        out
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v.clamp(0.0, 1.0);
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; CHANNELS] {
        core::array::from_fn(|c| self.get(c, y, x))
    }

    /// `[1, 3, H, W]` tensor view for the networks.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, CHANNELS, self.height, self.width], self.data.clone()).expect("image tensor shape")
    }

    /// Rounds every value to the nearest multiple of 1/255.
    pub fn quantized(&self) -> Image {
        let data = self.data.iter().map(|v| dequantize(quantize(*v))).collect();
        Image { height: self.height, width: self.width, data }
    }

    /// Copies the `[y0, y1) x [x0, x1)` window.
    pub fn crop(&self, y0: usize, y1: usize, x0: usize, x1: usize) -> Result<Image> {
        if y0 >= y1 || x0 >= x1 || y1 > self.height || x1 > self.width {
            return Err(Error::InvalidArgument(format!("crop [{},{})x[{},{}) out of bounds", y0, y1, x0, x1)));
        }
        let (h, w) = (y1 - y0, x1 - x0);
        let mut data = Vec::with_capacity(CHANNELS * h * w);
        for c in 0..CHANNELS {
            for y in y0..y1 {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + x0..row + x1]);
            }
        }
        Ok(Image { height: h, width: w, data })
    }
}

pub fn quantize(v: f64) -> u8 {
    libm::round(v.clamp(0.0, 1.0) * 255.0) as u8
}

pub fn dequantize(v: u8) -> f64 {
    v as f64 / 255.0
}

/// Area-average downsampling over aligned cells. Cell `i` covers rows
/// `[i*H/out_h, (i+1)*H/out_h)` (integer division), likewise for columns.
pub fn downsample(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("downsample to zero size".into()));
    }
    if out_h > img.height || out_w > img.width {
        return Err(Error::InvalidArgument(format!(
            "downsample {}x{} -> {}x{} enlarges",
            img.height, img.width, out_h, out_w
        )));
    }
    let mut data = Vec::with_capacity(CHANNELS * out_h * out_w);
    for c in 0..CHANNELS {
        for i in 0..out_h {
            let (y0, y1) = (i * img.height / out_h, (i + 1) * img.height / out_h);
            for j in 0..out_w {
                let (x0, x1) = (j * img.width / out_w, (j + 1) * img.width / out_w);
                let mut acc = 0.0;
                for y in y0..y1 {
                    let row = (c * img.height + y) * img.width;
                    acc += img.data[row + x0..row + x1].iter().sum::<f64>();
                }
                data.push((acc / ((y1 - y0) * (x1 - x0)) as f64).clamp(0.0, 1.0));
            }
        }
    }
    Ok(Image { height: out_h, width: out_w, data })
}

/// Corner-aligned bilinear resampling to any size.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("resize to zero size".into()));
    }
    let src = |i: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        if n_out == 1 || n_in == 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (libm::floor(pos) as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, pos - lo as f64)
    };
    let cols: Vec<_> = (0..out_w).map(|j| src(j, out_w, img.width)).collect();
    let mut data = Vec::with_capacity(CHANNELS * out_h * out_w);
    for c in 0..CHANNELS {
        for i in 0..out_h {
            let (y0, y1, fy) = src(i, out_h, img.height);
            for &(x0, x1, fx) in &cols {
                let top = img.get(c, y0, x0) * (1.0 - fx) + img.get(c, y0, x1) * fx;
                let bot = img.get(c, y1, x0) * (1.0 - fx) + img.get(c, y1, x1) * fx;
                data.push((top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0));
            }
        }
    }
    Ok(Image { height: out_h, width: out_w, data })
}

/// The interpolation operator that brings a thumbnail back to input size.
pub fn upsample_psi(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h < img.height || out_w < img.width {
        return Err(Error::InvalidArgument(format!(
            "upsample {}x{} -> {}x{} shrinks",
            img.height, img.width, out_h, out_w
        )));
    }
    resize_bilinear(img, out_h, out_w)
}

/// Normalized fixation action `(x, y, l)`, each in [-1, 1].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FixationAction {
    pub x: f64,
    pub y: f64,
    pub l: f64,
}

impl FixationAction {
    pub fn new(x: f64, y: f64, l: f64) -> Self {
        Self { x, y, l }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self { x: a[0], y: a[1], l: a[2] }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.l]
    }

    pub fn is_in_range(&self) -> bool {
        self.to_array().iter().all(|v| (-1.0..=1.0).contains(v))
    }

    pub fn clamped(self) -> Self {
        let c = |v: f64| if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
        Self { x: c(self.x), y: c(self.y), l: c(self.l) }
    }

    /// Rounds every component through `f32`, the wire precision.
    pub fn to_wire_precision(self) -> Self {
        Self { x: self.x as f32 as f64, y: self.y as f32 as f64, l: self.l as f32 as f64 }
    }
}

/// A fixation disc in pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FixationGeometry {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl FixationGeometry {
    pub fn new(cx: f64, cy: f64, radius: f64) -> Self {
        Self { cx, cy, radius }
    }

    /// Pixel-centre membership: integer coordinates are tested directly.
    pub fn contains(&self, px: usize, py: usize) -> bool {
        let dx = px as f64 - self.cx;
        let dy = py as f64 - self.cy;
        dx * dx + dy * dy <= self.radius * self.radius
    }

    /// Axis-aligned bounds `(x0, y0, x1, y1)` of the disc, unclipped.
    pub fn bounds(&self) -> Rect {
        Rect::new(self.cx - self.radius, self.cy - self.radius, self.cx + self.radius, self.cy + self.radius)
    }
}

/// Maps a normalized action to pixel geometry:
/// `((1+x)/2 * w, (1+y)/2 * h, b1 + (1+l)/2 * (b2 - b1))`.
/// Out-of-range components are clamped with a warning.
pub fn denormalize_action(a: FixationAction, h: usize, w: usize, b1: f64, b2: f64) -> FixationGeometry {
    let a = if a.is_in_range() {
        a
    } else {
        log::warn!("fixation action {:?} outside [-1, 1]; clamping", a);
        a.clamped()
    };
    FixationGeometry {
        cx: (1.0 + a.x) / 2.0 * w as f64,
        cy: (1.0 + a.y) / 2.0 * h as f64,
        radius: b1 + (1.0 + a.l) / 2.0 * (b2 - b1),
    }
}

/// Inverse of the location part of [`denormalize_action`].
pub fn normalize_location(cx: f64, cy: f64, h: usize, w: usize) -> (f64, f64) {
    (2.0 * cx / w as f64 - 1.0, 2.0 * cy / h as f64 - 1.0)
}

/// Integer pixels `(px, py)` inside `g` and inside a `h x w` frame.
pub fn disc_pixels(g: &FixationGeometry, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
    let r = if g.radius.is_finite() && g.radius > 0.0 { g.radius } else { 0.0 };
    let lo = |c: f64| libm::ceil(c - r).max(0.0) as usize;
    let hi = |c: f64, n: usize| {
        let v = libm::floor(c + r);
        if v < 0.0 {
            0
        } else {
            (v as usize + 1).min(n)
        }
    };
    let (x0, x1) = (lo(g.cx), hi(g.cx, w));
    let (y0, y1) = (lo(g.cy), hi(g.cy, h));
    (y0..y1.max(y0)).flat_map(move |py| (x0..x1.max(x0)).map(move |px| (px, py))).filter(move |&(px, py)| g.contains(px, py))
}

/// Thumbnail canvas with high-acuity pixels pasted in where revealed.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedAcuityImage {
    canvas: Image,
    mask: Vec<bool>,
    revealed: usize,
}

impl MixedAcuityImage {
    /// Starts from an already-upsampled low-acuity canvas with nothing revealed.
    pub fn from_canvas(canvas: Image) -> Self {
        let n = canvas.height * canvas.width;
        Self { canvas, mask: vec![false; n], revealed: 0 }
    }

    /// `Psi(low)` at `h x w`.
    pub fn from_low(low: &Image, h: usize, w: usize) -> Result<Self> {
        Ok(Self::from_canvas(upsample_psi(low, h, w)?))
    }

    pub fn canvas(&self) -> &Image {
        &self.canvas
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn is_revealed(&self, px: usize, py: usize) -> bool {
        self.mask[py * self.canvas.width + px]
    }

    pub fn revealed_count(&self) -> usize {
        self.revealed
    }

    pub fn height(&self) -> usize {
        self.canvas.height
    }

    pub fn width(&self) -> usize {
        self.canvas.width
    }

    /// Fraction of pixels revealed at high acuity.
    pub fn pixel_fraction(&self) -> f64 {
        self.revealed as f64 / (self.canvas.height * self.canvas.width) as f64
    }

    /// Pastes one high-acuity pixel. Returns `true` when it was new.
    pub fn reveal_pixel(&mut self, px: usize, py: usize, rgb: [f64; CHANNELS]) -> bool {
        let idx = py * self.canvas.width + px;
        if self.mask[idx] {
            return false;
        }
        for (c, v) in rgb.iter().enumerate() {
            self.canvas.set(c, py, px, *v);
        }
        self.mask[idx] = true;
        self.revealed += 1;
        true
    }

    /// Reveals every in-bounds pixel of the disc from `high`; returns the
    /// number of pixels that were not revealed before.
    pub fn reveal_fixation(&mut self, g: &FixationGeometry, high: &Image) -> Result<usize> {
        if high.height != self.canvas.height || high.width != self.canvas.width {
            return Err(Error::InvalidArgument("high-acuity image does not match canvas".into()));
        }
        let (h, w) = (self.canvas.height, self.canvas.width);
        let mut new = 0;
        for (px, py) in disc_pixels(g, h, w) {
            if self.reveal_pixel(px, py, high.pixel(py, px)) {
                new += 1;
            }
        }
        Ok(new)
    }

    /// Pixels of `g` not yet revealed, in row-major order.
    pub fn unrevealed_in(&self, g: &FixationGeometry) -> Vec<(usize, usize)> {
        disc_pixels(g, self.canvas.height, self.canvas.width).filter(|&(px, py)| !self.is_revealed(px, py)).collect()
    }
}

/// Integer crop window `[y0, y1) x [x0, x1)` of the square of side `2r`
/// centred on the fixation, clipped to the frame. `None` when empty.
pub fn local_window(g: &FixationGeometry, h: usize, w: usize) -> Option<(usize, usize, usize, usize)> {
    let clip = |v: f64, n: usize| libm::round(v).clamp(0.0, n as f64) as usize;
    let (x0, x1) = (clip(g.cx - g.radius, w), clip(g.cx + g.radius, w));
    let (y0, y1) = (clip(g.cy - g.radius, h), clip(g.cy + g.radius, h));
    (x0 < x1 && y0 < y1).then_some((y0, y1, x0, x1))
}

/// Square patch around the fixation, resized to `out_h x out_w`.
/// A degenerate window falls back to the whole canvas.
pub fn crop_local_patch(m: &MixedAcuityImage, g: &FixationGeometry, out_h: usize, out_w: usize) -> Result<Image> {
    match local_window(g, m.height(), m.width()) {
        Some((y0, y1, x0, x1)) => resize_bilinear(&m.canvas.crop(y0, y1, x0, x1)?, out_h, out_w),
        None => {
            log::warn!("local patch around {:?} is empty; using the whole canvas", g);
            resize_bilinear(&m.canvas, out_h, out_w)
        }
    }
}

/// Axis-aligned rectangle `[x0, x1] x [y0, y1]` in pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        (self.x1 - self.x0).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y1 - self.y0).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection(&self, o: &Rect) -> Rect {
        Rect::new(self.x0.max(o.x0), self.y0.max(o.y0), self.x1.min(o.x1), self.y1.min(o.y1))
    }

    pub fn union(&self, o: &Rect) -> Rect {
        Rect::new(self.x0.min(o.x0), self.y0.min(o.y0), self.x1.max(o.x1), self.y1.max(o.y1))
    }

    pub fn clip(&self, h: usize, w: usize) -> Rect {
        let (w, h) = (w as f64, h as f64);
        Rect::new(self.x0.clamp(0.0, w), self.y0.clamp(0.0, h), self.x1.clamp(0.0, w), self.y1.clamp(0.0, h))
    }

    pub fn contains_rect(&self, o: &Rect) -> bool {
        o.x0 >= self.x0 && o.y0 >= self.y0 && o.x1 <= self.x1 && o.y1 <= self.y1
    }
}

/// Tightest axis-aligned box around every disc, clipped to the frame.
pub fn fit_bounding_box(fixations: &[FixationGeometry], h: usize, w: usize) -> Result<Rect> {
    let first = fixations.first().ok_or_else(|| Error::InvalidArgument("no fixations to bound".into()))?;
    let b = fixations.iter().skip(1).fold(first.bounds(), |acc, g| acc.union(&g.bounds()));
    Ok(b.clip(h, w))
}

pub const RED: [u8; 3] = [255, 0, 0];
pub const GREEN: [u8; 3] = [0, 255, 0];

/// Interleaved RGB8 raster with red circle outlines for `fixations` and an
/// optional green box outline. Disc interiors are left untouched.
pub fn render_rgb8(img: &Image, fixations: &[FixationGeometry], bbox: Option<Rect>) -> Vec<u8> {
    let (h, w) = (img.height, img.width);
    let mut out = img.to_rgb8();
    let mut paint = |x: usize, y: usize, c: [u8; 3]| {
        let i = (y * w + x) * CHANNELS;
        out[i..i + CHANNELS].copy_from_slice(&c);
    };
    for g in fixations {
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 - g.cx, y as f64 - g.cy);
                let d = libm::sqrt(dx * dx + dy * dy);
                if libm::fabs(d - g.radius) < 0.5 {
                    paint(x, y, RED);
                }
            }
        }
    }
    if let Some(b) = bbox {
        let b = b.clip(h, w);
        if b.area() > 0.0 {
            let last = |v: f64, n: usize| (libm::ceil(v) as usize).saturating_sub(1).min(n - 1);
            let (x0, x1) = ((libm::floor(b.x0) as usize).min(w - 1), last(b.x1, w));
            let (y0, y1) = ((libm::floor(b.y0) as usize).min(h - 1), last(b.y1, h));
            for x in x0..=x1 {
                paint(x, y0, GREEN);
                paint(x, y1, GREEN);
            }
            for y in y0..=y1 {
                paint(x0, y, GREEN);
                paint(x1, y, GREEN);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gradient_image(h: usize, w: usize) -> Image {
        let mut data = vec![0.0; CHANNELS * h * w];
        for c in 0..CHANNELS {
            for y in 0..h {
                for x in 0..w {
                    data[(c * h + y) * w + x] = ((x + 2 * y + 5 * c) % 17) as f64 / 16.0;
                }
            }
        }
        Image::new(h, w, data).unwrap()
    }

    #[test]
    fn downsample_examples() {
        let img = Image::filled(12, 10, 0.7);
        let d = downsample(&img, 3, 5).unwrap();
        assert!(d.data().iter().all(|v| (v - 0.7).abs() < 1e-12));

        let mut img = Image::filled(2, 2, 0.0);
        for c in 0..3 {
            img.set(c, 0, 1, 1.0);
            img.set(c, 1, 0, 1.0);
        }
        let d = downsample(&img, 1, 1).unwrap();
        assert_eq!(d.data(), &[0.5, 0.5, 0.5]);

        assert!(downsample(&img, 0, 1).is_err());
        assert!(downsample(&img, 3, 1).is_err());
    }

    #[test]
    fn thumbnail_ratio_of_reference_geometry() {
        let kept = (30 * 30) as f64 / (299 * 299) as f64;
        assert!((kept - 0.01007).abs() < 1e-4);
        let d = downsample(&Image::filled(299, 299, 0.2), 30, 30).unwrap();
        assert_eq!((d.height(), d.width()), (30, 30));
    }

    #[test]
    fn upsample_examples() {
        let c = upsample_psi(&Image::filled(3, 4, 0.25), 9, 13).unwrap();
        assert!(c.data().iter().all(|v| (v - 0.25).abs() < 1e-12));

        let img = Image::new(1, 2, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        let u = upsample_psi(&img, 1, 3).unwrap();
        assert_eq!(&u.data()[..3], &[0.0, 0.5, 1.0]);
        assert!(upsample_psi(&img, 1, 1).is_err());
    }

    fn laplacian_energy(img: &Image) -> f64 {
        let mut e = 0.0;
        for c in 0..CHANNELS {
            for y in 1..img.height() - 1 {
                for x in 1..img.width() - 1 {
                    let l = 4.0 * img.get(c, y, x)
                        - img.get(c, y - 1, x)
                        - img.get(c, y + 1, x)
                        - img.get(c, y, x - 1)
                        - img.get(c, y, x + 1);
                    e += l * l;
                }
            }
        }
        e
    }

    #[test]
    fn down_then_up_removes_high_frequencies() {
        let img = gradient_image(64, 64);
        let back = upsample_psi(&downsample(&img, 8, 8).unwrap(), 64, 64).unwrap();
        assert!(laplacian_energy(&back) < laplacian_energy(&img));
    }

    #[test]
    fn denormalize_examples() {
        let g = denormalize_action(FixationAction::new(-1.0, -1.0, -1.0), 299, 299, 15.0, 75.0);
        assert_eq!(g, FixationGeometry::new(0.0, 0.0, 15.0));
        let g = denormalize_action(FixationAction::new(1.0, 1.0, 1.0), 299, 299, 15.0, 75.0);
        assert_eq!(g, FixationGeometry::new(299.0, 299.0, 75.0));
        let g = denormalize_action(FixationAction::new(0.0, 0.0, 0.0), 299, 299, 15.0, 75.0);
        assert_eq!(g, FixationGeometry::new(149.5, 149.5, 45.0));
        let g = denormalize_action(FixationAction::new(1.7, -3.0, 0.0), 299, 299, 15.0, 75.0);
        assert_eq!(g, FixationGeometry::new(299.0, 0.0, 45.0));
    }

    fn disc_count_brute(g: &FixationGeometry, h: usize, w: usize) -> usize {
        let mut n = 0;
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 - g.cx, y as f64 - g.cy);
                if dx * dx + dy * dy <= g.radius * g.radius {
                    n += 1;
                }
            }
        }
        n
    }

    #[test]
    fn reveal_counts_disc_and_is_idempotent() {
        let high = gradient_image(64, 64);
        let mut prev = 0;
        for r in [0.0, 1.0, 2.5, 4.0, 7.3, 12.0] {
            let mut m = MixedAcuityImage::from_canvas(Image::filled(64, 64, 0.5));
            let g = FixationGeometry::new(31.3, 30.8, r);
            let n = m.reveal_fixation(&g, &high).unwrap();
            assert_eq!(n, disc_count_brute(&g, 64, 64));
            assert!(n >= prev);
            prev = n;
            assert_eq!(m.reveal_fixation(&g, &high).unwrap(), 0);
            assert_eq!(m.revealed_count(), n);
        }
    }

    #[test]
    fn overlapping_discs_bill_the_union_once() {
        let high = gradient_image(40, 40);
        let mut m = MixedAcuityImage::from_canvas(Image::filled(40, 40, 0.5));
        let a = FixationGeometry::new(15.0, 20.0, 6.0);
        let b = FixationGeometry::new(21.0, 20.0, 6.0);
        let total = m.reveal_fixation(&a, &high).unwrap() + m.reveal_fixation(&b, &high).unwrap();
        let mut union = 0;
        for y in 0..40 {
            for x in 0..40 {
                if a.contains(x, y) || b.contains(x, y) {
                    union += 1;
                    assert!(m.is_revealed(x, y));
                    assert_eq!(m.canvas().pixel(y, x), high.pixel(y, x));
                } else {
                    assert!(!m.is_revealed(x, y));
                    assert_eq!(m.canvas().pixel(y, x), [0.5; 3]);
                }
            }
        }
        assert_eq!(total, union);
        assert_eq!(m.revealed_count(), union);
    }

    #[test]
    fn off_image_discs_are_clipped() {
        let high = gradient_image(16, 16);
        let mut m = MixedAcuityImage::from_canvas(Image::filled(16, 16, 0.0));
        let g = FixationGeometry::new(-2.0, 3.0, 4.0);
        assert_eq!(m.reveal_fixation(&g, &high).unwrap(), disc_count_brute(&g, 16, 16));
        let far = FixationGeometry::new(-40.0, -40.0, 4.0);
        assert_eq!(m.reveal_fixation(&far, &high).unwrap(), 0);
    }

    #[test]
    fn local_patch_examples() {
        let canvas = gradient_image(32, 32);
        let m = MixedAcuityImage::from_canvas(canvas.clone());
        let whole = crop_local_patch(&m, &FixationGeometry::new(16.0, 16.0, 16.0), 32, 32).unwrap();
        assert_eq!(whole, canvas);

        let flat = MixedAcuityImage::from_canvas(Image::filled(32, 32, 0.3));
        let p = crop_local_patch(&flat, &FixationGeometry::new(5.0, 9.0, 4.0), 20, 20).unwrap();
        assert!(p.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn local_patch_matches_pixel_copy_oracle() {
        let canvas = gradient_image(32, 32);
        let m = MixedAcuityImage::from_canvas(canvas.clone());
        let g = FixationGeometry::new(25.2, 6.6, 5.0);
        // window: x in [round(20.2), round(30.2)) = [20, 30), y in [round(1.6), round(11.6)) = [2, 12)
        let mut copy = Vec::new();
        for c in 0..CHANNELS {
            for y in 2..12 {
                for x in 20..30 {
                    copy.push(canvas.get(c, y, x));
                }
            }
        }
        let want = resize_bilinear(&Image::new(10, 10, copy).unwrap(), 32, 32).unwrap();
        assert_eq!(crop_local_patch(&m, &g, 32, 32).unwrap(), want);
    }

    #[test]
    fn degenerate_patch_uses_whole_canvas() {
        let canvas = gradient_image(16, 16);
        let m = MixedAcuityImage::from_canvas(canvas.clone());
        let p = crop_local_patch(&m, &FixationGeometry::new(-30.0, -30.0, 4.0), 16, 16).unwrap();
        assert_eq!(p, canvas);
    }

    #[test]
    fn bounding_box_examples() {
        let b = fit_bounding_box(&[FixationGeometry::new(50.0, 50.0, 10.0)], 100, 100).unwrap();
        assert_eq!(b, Rect::new(40.0, 40.0, 60.0, 60.0));
        let b = fit_bounding_box(&[FixationGeometry::new(5.0, 50.0, 10.0)], 100, 100).unwrap();
        assert_eq!(b.x0, 0.0);
        assert!(fit_bounding_box(&[], 10, 10).is_err());
    }

    #[test]
    fn bounding_box_matches_mask_extents() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let discs: Vec<_> = (0..2)
                .map(|_| {
                    FixationGeometry::new(
                        rng.random_range(10..54) as f64,
                        rng.random_range(10..54) as f64,
                        rng.random_range(2..10) as f64,
                    )
                })
                .collect();
            let b = fit_bounding_box(&discs, 64, 64).unwrap();
            let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
            for y in 0..64 {
                for x in 0..64 {
                    if discs.iter().any(|d| d.contains(x, y)) {
                        x0 = x0.min(x);
                        y0 = y0.min(y);
                        x1 = x1.max(x);
                        y1 = y1.max(y);
                    }
                }
            }
            assert_eq!(b, Rect::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64));
        }
    }

    #[test]
    fn render_constant_and_outline_only() {
        let img = Image::filled(24, 24, 0.5);
        assert!(render_rgb8(&img, &[], None).iter().all(|v| *v == 128));

        let g = FixationGeometry::new(12.0, 12.0, 6.0);
        let out = render_rgb8(&img, &[g], Some(Rect::new(2.0, 2.0, 20.0, 20.0)));
        let at = |x: usize, y: usize| [out[(y * 24 + x) * 3], out[(y * 24 + x) * 3 + 1], out[(y * 24 + x) * 3 + 2]];
        assert_eq!(at(12, 12), [128; 3]);
        assert_eq!(at(14, 11), [128; 3]);
        assert_eq!(at(18, 12), RED);
        assert_eq!(at(2, 10), GREEN);
    }

    #[test]
    fn rgb8_round_trip_error_bound() {
        let img = gradient_image(9, 7);
        let back = Image::from_rgb8(9, 7, &img.to_rgb8()).unwrap();
        let err = img.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1.0 / 255.0);
    }
}
