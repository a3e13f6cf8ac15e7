//! On-disk artifacts: PNG images, checkpoint files carrying their config, and
//! the dataset directory (manifest plus one PNG per sample).

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use fovea_core::checkpoint::Checkpoint;
use fovea_core::imaging::{self, FixationGeometry, Image, Rect};
use fovea_core::synth::SampleRecord;
use fovea_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};

/// Provenance block written at the top of every artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub config_hash: String,
    pub data_hash: String,
    pub config: String,
}

impl Header {
    pub fn new(kind: &str, cfg: &RunConfig) -> Self {
        Self { kind: kind.into(), config_hash: cfg.config_hash(), data_hash: cfg.data_hash(), config: cfg.to_ini_string() }
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::from_ini_str(&self.config)
    }

    /// Refuses to combine artifacts built from different data.
    pub fn require_data(&self, expected: &str, what: &str) -> Result<()> {
        if self.data_hash != expected {
            return Err(Error::HashMismatch { what: what.into(), expected: expected.into(), found: self.data_hash.clone() });
        }
        Ok(())
    }
}

fn create(path: &Path) -> Result<File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map_err(|e| Error::io(path, e))
}

pub fn write_png(path: &Path, width: usize, height: usize, rgb: &[u8], text: &[(&str, &str)]) -> Result<()> {
    let w = BufWriter::new(create(path)?);
    let mut enc = png::Encoder::new(w, width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    for (k, v) in text {
        enc.add_text_chunk(k.to_string(), v.to_string()).map_err(|e| Error::format(path, e.to_string()))?;
    }
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
    writer.write_image_data(rgb).map_err(|e| Error::format(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::format(path, e.to_string()))
}

pub struct PngImage {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
    pub text: Vec<(String, String)>,
}

pub fn read_png(path: &Path) -> Result<PngImage> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(f));
    dec.set_transformations(png::Transformations::EXPAND);
    let mut reader = dec.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(path, format!("expected 8-bit RGB, found {:?} {:?}", info.color_type, info.bit_depth)));
    }
    buf.truncate(info.buffer_size());
    let text = reader.info().uncompressed_latin1_text.iter().map(|t| (t.keyword.clone(), t.text.clone())).collect();
    Ok(PngImage { width: info.width as usize, height: info.height as usize, rgb: buf, text })
}

/// Writes `img` as an 8-bit PNG with red fixation outlines and an optional
/// green box.
pub fn render_png(img: &Image, path: &Path, fixations: &[FixationGeometry], bbox: Option<Rect>) -> Result<()> {
    let rgb = imaging::render_rgb8(img, fixations, bbox);
    write_png(path, img.width(), img.height(), &rgb, &[])
}

/// Places RGB8 panels of equal height side by side, separated by white
/// columns, then scales by an integer factor.
pub fn panel_strip(panels: &[(usize, usize, Vec<u8>)], gap: usize, scale: usize) -> (usize, usize, Vec<u8>) {
    let h = panels.iter().map(|p| p.0).max().unwrap_or(0);
    let w: usize = panels.iter().map(|p| p.1).sum::<usize>() + gap * panels.len().saturating_sub(1);
    let mut out = vec![255u8; h * w * 3];
    let mut x0 = 0;
    for (ph, pw, rgb) in panels {
        for y in 0..*ph {
            let src = &rgb[y * pw * 3..(y + 1) * pw * 3];
            out[(y * w + x0) * 3..(y * w + x0 + pw) * 3].copy_from_slice(src);
        }
        x0 += pw + gap;
    }
    let s = scale.max(1);
    let mut big = vec![0u8; h * s * w * s * 3];
    for y in 0..h * s {
        for x in 0..w * s {
            let i = ((y / s) * w + x / s) * 3;
            big[(y * w * s + x) * 3..(y * w * s + x) * 3 + 3].copy_from_slice(&out[i..i + 3]);
        }
    }
    (h * s, w * s, big)
}

const META_CONFIG: &str = "meta.config";
const META_DATA_HASH: &str = "meta.data_hash";
const META_KIND: &str = "meta.kind";

fn text_tensor(s: &str) -> Tensor {
    Tensor::from_slice(&s.bytes().map(f64::from).collect::<Vec<_>>())
}

fn tensor_text(t: &Tensor) -> Option<String> {
    let bytes: Option<Vec<u8>> = t.data().iter().map(|v| if (0.0..=255.0).contains(v) && v.fract() == 0.0 { Some(*v as u8) } else { None }).collect();
    String::from_utf8(bytes?).ok()
}

/// Writes `ck` with the provenance header stored as byte tensors.
pub fn save_checkpoint(path: &Path, ck: &Checkpoint, header: &Header) -> Result<()> {
    let mut ck = ck.clone();
    ck.insert(META_CONFIG, text_tensor(&header.config));
    ck.insert(META_DATA_HASH, text_tensor(&header.data_hash));
    ck.insert(META_KIND, text_tensor(&header.kind));
    let mut f = create(path)?;
    f.write_all(&ck.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Checkpoint, Header)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut ck = Checkpoint::from_bytes(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
    let field = |name: &str| ck.get(name).and_then(tensor_text).ok_or_else(|| Error::format(path, format!("missing or malformed `{name}`")));
    let config = field(META_CONFIG)?;
    let data_hash = field(META_DATA_HASH)?;
    let kind = field(META_KIND)?;
    let cfg = RunConfig::from_ini_str(&config)?;
    if cfg.data_hash() != data_hash {
        return Err(Error::format(path, "stored data hash disagrees with the stored config"));
    }
    ck.remove_prefix("meta.");
    Ok((ck, Header { kind, config_hash: cfg.config_hash(), data_hash, config }))
}

/// The three generated splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
    pub val: Vec<SampleRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRecord {
    split: String,
    index: usize,
    file: String,
    label: usize,
    gt_box: [f64; 4],
    class_cell: [usize; 2],
}

pub const MANIFEST: &str = "manifest.jsonl";

/// `dir/manifest.jsonl` (header line, then one record per sample) and
/// `dir/<split>/<index>.png`.
pub fn write_dataset(dir: &Path, splits: &Splits, header: &Header) -> Result<()> {
    let mpath = dir.join(MANIFEST);
    let mut m = BufWriter::new(create(&mpath)?);
    let io = |e| Error::io(&mpath, e);
    serde_json::to_writer(&mut m, header).map_err(|e| Error::format(&mpath, e.to_string()))?;
    m.write_all(b"\n").map_err(io)?;
    let text = [("config_hash", header.config_hash.as_str()), ("data_hash", header.data_hash.as_str())];
    for (name, split) in [("train", &splits.train), ("test", &splits.test), ("val", &splits.val)] {
        for (i, s) in split.iter().enumerate() {
            let file = format!("{name}/{i:05}.png");
            write_png(&dir.join(&file), s.size, s.size, &s.rgb, &text)?;
            let b = s.gt_box;
            let rec = ManifestRecord { split: name.into(), index: i, file, label: s.label, gt_box: [b.x0, b.y0, b.x1, b.y1], class_cell: [s.class_cell.0, s.class_cell.1] };
            serde_json::to_writer(&mut m, &rec).map_err(|e| Error::format(&mpath, e.to_string()))?;
            m.write_all(b"\n").map_err(io)?;
        }
    }
    m.flush().map_err(io)
}

pub fn read_dataset(dir: &Path) -> Result<(Splits, Header)> {
    let mpath = dir.join(MANIFEST);
    let f = File::open(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut lines = BufReader::new(f).lines();
    let first = lines.next().ok_or_else(|| Error::format(&mpath, "empty manifest"))?.map_err(|e| Error::io(&mpath, e))?;
    let header: Header = serde_json::from_str(&first).map_err(|e| Error::format(&mpath, format!("header: {e}")))?;
    let cfg = header.run_config()?;
    if cfg.data_hash() != header.data_hash {
        return Err(Error::format(&mpath, "header data hash disagrees with its config"));
    }
    let mut splits = Splits { train: Vec::new(), test: Vec::new(), val: Vec::new() };
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(&mpath, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::format(&mpath, format!("line {}: {e}", n + 2)))?;
        let path: PathBuf = dir.join(&rec.file);
        let img = read_png(&path)?;
        let tagged = img.text.iter().find(|(k, _)| k == "data_hash").map(|(_, v)| v.as_str());
        if tagged != Some(header.data_hash.as_str()) {
            return Err(Error::HashMismatch { what: path.display().to_string(), expected: header.data_hash.clone(), found: tagged.unwrap_or("none").into() });
        }
        if img.width != img.height || img.width != cfg.data.image_size {
            return Err(Error::format(&path, format!("{}x{} image, config says {}", img.width, img.height, cfg.data.image_size)));
        }
        let [x0, y0, x1, y1] = rec.gt_box;
        let s = SampleRecord { size: img.width, rgb: img.rgb, label: rec.label, gt_box: Rect::new(x0, y0, x1, y1), class_cell: (rec.class_cell[0], rec.class_cell[1]) };
        match rec.split.as_str() {
            "train" => splits.train.push(s),
            "test" => splits.test.push(s),
            "val" => splits.val.push(s),
            other => return Err(Error::format(&mpath, format!("unknown split `{other}`"))),
        }
    }
    Ok((splits, header))
}
