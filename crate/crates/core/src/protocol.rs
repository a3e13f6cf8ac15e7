//! Edge/cloud wire protocol and the two sans-IO session endpoints.
//!
//! Frame: `tag: u8`, `len: u32 LE`, then `len` payload bytes. The cloud opens
//! with `Hello`, the edge answers with its `Thumbnail`, then `T` strict
//! request/response rounds, then `Prediction` and `Done` from the cloud.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;

use crate::checkpoint::Checkpoint;
use crate::env::{thumbnail, EnvConfig, Foveator};
use crate::error::{Error, Result};
use crate::eval;
use crate::imaging::{self, dequantize, quantize, FixationAction, Image, MixedAcuityImage};
use crate::models::{self, Actor, BackboneConfig, Perception};

pub const TAG_HELLO: u8 = 1;
pub const TAG_THUMBNAIL: u8 = 2;
pub const TAG_REQUEST: u8 = 3;
pub const TAG_PATCH: u8 = 4;
pub const TAG_PREDICTION: u8 = 5;
pub const TAG_DONE: u8 = 6;

pub const HEADER: usize = 5;
pub const HELLO_FRAME: usize = HEADER + 8;
pub const REQUEST_FRAME: usize = HEADER + 12;
pub const PREDICTION_FRAME: usize = HEADER + 6;
pub const DONE_FRAME: usize = HEADER;
pub const PIXEL_BYTES: usize = 7;

/// Payloads above this are rejected before allocation.
pub const MAX_PAYLOAD: u32 = 1 << 26;

pub fn thumbnail_frame_len(th: usize, tw: usize) -> usize {
    HEADER + 3 * th * tw
}

pub fn patch_frame_len(pixels: usize) -> usize {
    HEADER + 4 + PIXEL_BYTES * pixels
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WirePixel {
    pub px: u16,
    pub py: u16,
    pub rgb: [u8; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    Hello { height: u16, width: u16, thumb_height: u16, thumb_width: u16 },
    /// Interleaved RGB8, row-major. Dimensions come from `Hello`.
    Thumbnail { rgb: Vec<u8> },
    FixationRequest { x: f32, y: f32, l: f32 },
    PatchResponse { pixels: Vec<WirePixel> },
    Prediction { class: u16, entropy: f32 },
    Done,
}

impl Message {
    pub fn tag(&self) -> u8 {
        match self {
            Message::Hello { .. } => TAG_HELLO,
            Message::Thumbnail { .. } => TAG_THUMBNAIL,
            Message::FixationRequest { .. } => TAG_REQUEST,
            Message::PatchResponse { .. } => TAG_PATCH,
            Message::Prediction { .. } => TAG_PREDICTION,
            Message::Done => TAG_DONE,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "Hello",
            Message::Thumbnail { .. } => "Thumbnail",
            Message::FixationRequest { .. } => "FixationRequest",
            Message::PatchResponse { .. } => "PatchResponse",
            Message::Prediction { .. } => "Prediction",
            Message::Done => "Done",
        }
    }

    /// Total framed size in bytes.
    pub fn frame_len(&self) -> usize {
        HEADER + self.payload_len()
    }

    fn payload_len(&self) -> usize {
        match self {
            Message::Hello { .. } => 8,
            Message::Thumbnail { rgb } => rgb.len(),
            Message::FixationRequest { .. } => 12,
            Message::PatchResponse { pixels } => 4 + PIXEL_BYTES * pixels.len(),
            Message::Prediction { .. } => 6,
            Message::Done => 0,
        }
    }
}

pub fn encode(msg: &Message) -> Vec<u8> {
    let mut out = Vec::with_capacity(msg.frame_len());
    encode_into(msg, &mut out);
    out
}

pub fn encode_into(msg: &Message, out: &mut Vec<u8>) {
    out.push(msg.tag());
    out.extend_from_slice(&(msg.payload_len() as u32).to_le_bytes());
    match msg {
        Message::Hello { height, width, thumb_height, thumb_width } => {
            for v in [height, width, thumb_height, thumb_width] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Message::Thumbnail { rgb } => out.extend_from_slice(rgb),
        Message::FixationRequest { x, y, l } => {
            for v in [x, y, l] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Message::PatchResponse { pixels } => {
            out.extend_from_slice(&(pixels.len() as u32).to_le_bytes());
            for p in pixels {
                out.extend_from_slice(&p.px.to_le_bytes());
                out.extend_from_slice(&p.py.to_le_bytes());
                out.extend_from_slice(&p.rgb);
            }
        }
        Message::Prediction { class, entropy } => {
            out.extend_from_slice(&class.to_le_bytes());
            out.extend_from_slice(&entropy.to_le_bytes());
        }
        Message::Done => {}
    }
}

fn perr(msg: impl Into<String>) -> Error {
    Error::Protocol(msg.into())
}

/// Parses the 5-byte header into `(tag, payload length)`.
pub fn decode_header(h: &[u8]) -> Result<(u8, u32)> {
    if h.len() < HEADER {
        return Err(perr("truncated header"));
    }
    let tag = h[0];
    if !(TAG_HELLO..=TAG_DONE).contains(&tag) {
        return Err(perr(format!("bad tag {}", tag)));
    }
    let len = u32::from_le_bytes([h[1], h[2], h[3], h[4]]);
    if len > MAX_PAYLOAD {
        return Err(perr(format!("payload length {} exceeds limit", len)));
    }
    Ok((tag, len))
}

/// Decodes exactly one frame; trailing bytes are an error.
pub fn decode(bytes: &[u8]) -> Result<Message> {
    let (msg, used) = decode_prefix(bytes)?.ok_or_else(|| perr("truncated frame"))?;
    if used != bytes.len() {
        return Err(perr(format!("{} trailing bytes after frame", bytes.len() - used)));
    }
    Ok(msg)
}

/// Decodes the first frame of `bytes` if it is complete, returning it with the
/// number of bytes consumed. `Ok(None)` means more input is needed.
pub fn decode_prefix(bytes: &[u8]) -> Result<Option<(Message, usize)>> {
    if bytes.len() < HEADER {
        return Ok(None);
    }
    let (tag, len) = decode_header(bytes)?;
    let end = HEADER + len as usize;
    if bytes.len() < end {
        return Ok(None);
    }
    Ok(Some((decode_payload(tag, &bytes[HEADER..end])?, end)))
}

fn fixed<const N: usize>(p: &[u8], name: &str) -> Result<[u8; N]> {
    p.try_into().map_err(|_| perr(format!("{} payload must be {} bytes, got {}", name, N, p.len())))
}

fn u16_at(p: &[u8], i: usize) -> u16 {
    u16::from_le_bytes([p[i], p[i + 1]])
}

fn f32_at(p: &[u8], i: usize) -> f32 {
    f32::from_le_bytes([p[i], p[i + 1], p[i + 2], p[i + 3]])
}

/// Decodes a payload whose header was already parsed.
pub fn decode_payload(tag: u8, p: &[u8]) -> Result<Message> {
    match tag {
        TAG_HELLO => {
            let p = fixed::<8>(p, "Hello")?;
            Ok(Message::Hello { height: u16_at(&p, 0), width: u16_at(&p, 2), thumb_height: u16_at(&p, 4), thumb_width: u16_at(&p, 6) })
        }
        TAG_THUMBNAIL => Ok(Message::Thumbnail { rgb: p.to_vec() }),
        TAG_REQUEST => {
            let p = fixed::<12>(p, "FixationRequest")?;
            Ok(Message::FixationRequest { x: f32_at(&p, 0), y: f32_at(&p, 4), l: f32_at(&p, 8) })
        }
        TAG_PATCH => {
            if p.len() < 4 {
                return Err(perr("truncated PatchResponse count"));
            }
            let count = u32::from_le_bytes([p[0], p[1], p[2], p[3]]) as usize;
            let body = &p[4..];
            if body.len() != count.saturating_mul(PIXEL_BYTES) {
                return Err(perr(format!("PatchResponse declares {} pixels but carries {} bytes", count, body.len())));
            }
            let pixels = body
                .chunks_exact(PIXEL_BYTES)
                .map(|c| WirePixel { px: u16_at(c, 0), py: u16_at(c, 2), rgb: [c[4], c[5], c[6]] })
                .collect();
            Ok(Message::PatchResponse { pixels })
        }
        TAG_PREDICTION => {
            let p = fixed::<6>(p, "Prediction")?;
            Ok(Message::Prediction { class: u16_at(&p, 0), entropy: f32_at(&p, 2) })
        }
        TAG_DONE => {
            if !p.is_empty() {
                return Err(perr("Done carries no payload"));
            }
            Ok(Message::Done)
        }
        t => Err(perr(format!("bad tag {}", t))),
    }
}

/// Per-session traffic counters. Both endpoints keep one and they agree at
/// the end of a clean session.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct SessionLedger {
    pub bytes_up: usize,
    pub bytes_down: usize,
    pub pixels_sent: usize,
    pub round_trips: usize,
}

impl SessionLedger {
    /// Edge-to-cloud frame.
    pub fn record_up(&mut self, msg: &Message) {
        self.bytes_up += msg.frame_len();
        if let Message::PatchResponse { pixels } = msg {
            self.pixels_sent += pixels.len();
            self.round_trips += 1;
        }
    }

    /// Cloud-to-edge frame.
    pub fn record_down(&mut self, msg: &Message) {
        self.bytes_down += msg.frame_len();
    }

    /// Ledger of a complete session from its per-step reveal counts.
    pub fn record_session(&mut self, th: usize, tw: usize, new_pixels: &[usize]) {
        self.bytes_down += HELLO_FRAME + REQUEST_FRAME * new_pixels.len() + PREDICTION_FRAME + DONE_FRAME;
        self.bytes_up += thumbnail_frame_len(th, tw) + new_pixels.iter().map(|&n| patch_frame_len(n)).sum::<usize>();
        self.pixels_sent += new_pixels.iter().sum::<usize>();
        self.round_trips += new_pixels.len();
    }
}

/// Deployed cloud model: perception plus actor, never a critic.
#[derive(Clone, Debug)]
pub struct CloudModel {
    pub perception: Perception,
    pub actor: Actor,
    pub env: EnvConfig,
}

impl CloudModel {
    /// Builds from a deployment checkpoint. Refuses checkpoints that still
    /// carry critic weights.
    pub fn from_checkpoint(ck: &Checkpoint, backbone: BackboneConfig, classes: usize, env: EnvConfig, actor_hidden: usize) -> Result<Self> {
        if ck.contains_prefix(models::PREFIX_CRITIC) || ck.contains_prefix(models::PREFIX_CRITIC_TARGET) {
            return Err(Error::Checkpoint("deployment checkpoint must not contain critic weights".into()));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut perception = Perception::new(backbone, classes, &mut rng)?;
        perception.load(ck)?;
        let mut actor = Actor::new(env.state_dim(perception.feature_dim()), actor_hidden, &mut rng)?;
        ck.load_set(models::PREFIX_ACTOR, &mut actor.params)?;
        Ok(Self { perception, actor, env })
    }

    /// Deployment checkpoint: perception and actor only.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        self.perception.save(&mut ck);
        ck.insert_set(models::PREFIX_ACTOR, &self.actor.params);
        ck
    }

    pub fn deployment(&self) -> eval::Deployment<'_> {
        eval::Deployment { perception: &self.perception, actor: Some(&self.actor), env: &self.env }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum CloudPhase {
    AwaitThumbnail,
    AwaitPatch,
    Finished,
}

/// Cloud endpoint. Feed it edge messages; it returns what to send back.
#[derive(Debug)]
pub struct CloudSession<'m> {
    model: &'m CloudModel,
    height: usize,
    width: usize,
    phase: CloudPhase,
    fov: Option<Foveator>,
    ledger: SessionLedger,
    prediction: Option<(usize, f64)>,
}

impl<'m> CloudSession<'m> {
    /// Starts a session for `height x width` images and returns the greeting.
    pub fn open(model: &'m CloudModel, height: usize, width: usize) -> Result<(Self, Message)> {
        model.env.validate()?;
        let hello = Message::Hello {
            height: dim16(height)?,
            width: dim16(width)?,
            thumb_height: dim16(model.env.thumb_size)?,
            thumb_width: dim16(model.env.thumb_size)?,
        };
        let mut s = Self { model, height, width, phase: CloudPhase::AwaitThumbnail, fov: None, ledger: SessionLedger::default(), prediction: None };
        s.ledger.record_down(&hello);
        Ok((s, hello))
    }

    pub fn ledger(&self) -> SessionLedger {
        self.ledger
    }

    pub fn is_finished(&self) -> bool {
        self.phase == CloudPhase::Finished
    }

    pub fn prediction(&self) -> Option<(usize, f64)> {
        self.prediction
    }

    pub fn canvas(&self) -> Option<&MixedAcuityImage> {
        self.fov.as_ref().map(|f| f.canvas())
    }

    pub fn foveator(&self) -> Option<&Foveator> {
        self.fov.as_ref()
    }

    /// Handles one edge message; returns the replies in send order.
    pub fn handle(&mut self, msg: Message) -> Result<Vec<Message>> {
        self.ledger.record_up(&msg);
        let m = self.model;
        match (self.phase, msg) {
            (CloudPhase::AwaitThumbnail, Message::Thumbnail { rgb }) => {
                let t = m.env.thumb_size;
                if rgb.len() != 3 * t * t {
                    return Err(perr(format!("thumbnail payload {} bytes, expected {}", rgb.len(), 3 * t * t)));
                }
                let thumb = Image::from_rgb8(t, t, &rgb)?;
                self.fov = Some(Foveator::new(&m.perception, &m.env, &thumb, self.height, self.width)?);
                self.phase = CloudPhase::AwaitPatch;
                Ok(alloc::vec![self.next_request()?])
            }
            (CloudPhase::AwaitPatch, Message::PatchResponse { pixels }) => {
                let fov = self.fov.as_mut().expect("foveator exists after thumbnail");
                let mut want = fov.requested_pixels()?;
                let mut got: Vec<(usize, usize)> = pixels.iter().map(|p| (p.px as usize, p.py as usize)).collect();
                want.sort_unstable();
                got.sort_unstable();
                if want != got {
                    return Err(perr(format!("patch has {} pixels, request covered {} unsent pixels", got.len(), want.len())));
                }
                for p in &pixels {
                    fov.paste(p.px as usize, p.py as usize, p.rgb.map(dequantize))?;
                }
                fov.finish_step(&m.perception)?;
                if fov.done() {
                    let obs = fov.observation();
                    let class = obs.predicted();
                    let entropy = obs.entropy();
                    self.prediction = Some((class, entropy));
                    self.phase = CloudPhase::Finished;
                    let out = alloc::vec![Message::Prediction { class: class as u16, entropy: entropy as f32 }, Message::Done];
                    out.iter().for_each(|o| self.ledger.record_down(o));
                    Ok(out)
                } else {
                    Ok(alloc::vec![self.next_request()?])
                }
            }
            (phase, msg) => Err(perr(format!("unexpected {} from edge in phase {:?}", msg.name(), phase))),
        }
    }

    fn next_request(&mut self) -> Result<Message> {
        let fov = self.fov.as_mut().expect("foveator exists");
        let a = eval::drift_action(&self.model.actor, fov)?;
        fov.begin_step(a)?;
        let req = Message::FixationRequest { x: a.x as f32, y: a.y as f32, l: a.l as f32 };
        self.ledger.record_down(&req);
        Ok(req)
    }
}

fn dim16(v: usize) -> Result<u16> {
    u16::try_from(v).map_err(|_| perr(format!("dimension {} does not fit in u16", v)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum EdgePhase {
    AwaitHello,
    AwaitRequest,
    AwaitDone,
    Finished,
}

/// Edge endpoint. Holds the high-acuity image and the radius bounds it needs
/// to turn requests into discs. It has no label to send.
#[derive(Debug)]
pub struct EdgeSession {
    high: Image,
    b1: f64,
    b2: f64,
    sent: Vec<bool>,
    phase: EdgePhase,
    ledger: SessionLedger,
    prediction: Option<(u16, f32)>,
}

impl EdgeSession {
    pub fn new(high: Image, b1: f64, b2: f64) -> Self {
        let n = high.height() * high.width();
        Self { high, b1, b2, sent: alloc::vec![false; n], phase: EdgePhase::AwaitHello, ledger: SessionLedger::default(), prediction: None }
    }

    pub fn ledger(&self) -> SessionLedger {
        self.ledger
    }

    pub fn is_finished(&self) -> bool {
        self.phase == EdgePhase::Finished
    }

    pub fn prediction(&self) -> Option<(u16, f32)> {
        self.prediction
    }

    pub fn sent_mask(&self) -> &[bool] {
        &self.sent
    }

    /// Handles one cloud message; returns the replies in send order.
    pub fn handle(&mut self, msg: Message) -> Result<Vec<Message>> {
        self.ledger.record_down(&msg);
        let (h, w) = (self.high.height(), self.high.width());
        let out = match (self.phase, msg) {
            (EdgePhase::AwaitHello, Message::Hello { height, width, thumb_height, thumb_width }) => {
                if (height as usize, width as usize) != (h, w) {
                    return Err(perr(format!("cloud expects {}x{} images, edge holds {}x{}", height, width, h, w)));
                }
                if thumb_height != thumb_width || thumb_height == 0 {
                    return Err(perr("thumbnail must be square and non-empty"));
                }
                let thumb = thumbnail(&self.high, thumb_height as usize)?;
                self.phase = EdgePhase::AwaitRequest;
                alloc::vec![Message::Thumbnail { rgb: thumb.to_rgb8() }]
            }
            (EdgePhase::AwaitRequest, Message::FixationRequest { x, y, l }) => {
                let a = FixationAction::new(x as f64, y as f64, l as f64);
                let g = imaging::denormalize_action(a, h, w, self.b1, self.b2);
                let mut pixels = Vec::new();
                for (px, py) in imaging::disc_pixels(&g, h, w) {
                    let i = py * w + px;
                    if !self.sent[i] {
                        self.sent[i] = true;
                        pixels.push(WirePixel { px: px as u16, py: py as u16, rgb: self.high.pixel(py, px).map(quantize) });
                    }
                }
                alloc::vec![Message::PatchResponse { pixels }]
            }
            (EdgePhase::AwaitRequest, Message::Prediction { class, entropy }) => {
                self.prediction = Some((class, entropy));
                self.phase = EdgePhase::AwaitDone;
                Vec::new()
            }
            (EdgePhase::AwaitDone, Message::Done) => {
                self.phase = EdgePhase::Finished;
                Vec::new()
            }
            (phase, msg) => return Err(perr(format!("unexpected {} from cloud in phase {:?}", msg.name(), phase))),
        };
        out.iter().for_each(|o| self.ledger.record_up(o));
        Ok(out)
    }
}

/// Outcome of a completed session.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionResult {
    pub class: usize,
    pub entropy: f32,
    pub ledger: SessionLedger,
    pub canvas: Image,
    pub fixations: Vec<imaging::FixationGeometry>,
}

/// Failure with the ledger as it stood when the session broke.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionError {
    pub error: Error,
    pub ledger: SessionLedger,
}

impl core::fmt::Display for SessionError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{} (after {} bytes up, {} down)", self.error, self.ledger.bytes_up, self.ledger.bytes_down)
    }
}

/// Runs both endpoints in-process, passing every message through the codec.
pub fn run_session(model: &CloudModel, high: &Image) -> core::result::Result<SessionResult, SessionError> {
    let (mut cloud, hello) = CloudSession::open(model, high.height(), high.width()).map_err(|e| SessionError { error: e, ledger: SessionLedger::default() })?;
    let mut edge = EdgeSession::new(high.clone(), model.env.b1, model.env.b2);
    let fail = |e: Error, l: SessionLedger| SessionError { error: e, ledger: l };
    let mut to_edge = alloc::collections::VecDeque::from([encode(&hello)]);
    while let Some(frame) = to_edge.pop_front() {
        let msg = decode(&frame).map_err(|e| fail(e, cloud.ledger()))?;
        for reply in edge.handle(msg).map_err(|e| fail(e, edge.ledger()))? {
            let msg = decode(&encode(&reply)).map_err(|e| fail(e, edge.ledger()))?;
            for down in cloud.handle(msg).map_err(|e| fail(e, cloud.ledger()))? {
                to_edge.push_back(encode(&down));
            }
        }
    }
    if !edge.is_finished() || !cloud.is_finished() {
        return Err(fail(perr("session ended early"), cloud.ledger()));
    }
    let (class, entropy) = edge.prediction().expect("finished edge has a prediction");
    let fov = cloud.foveator().expect("finished cloud has a foveator");
    debug_assert_eq!(edge.ledger(), cloud.ledger());
    Ok(SessionResult {
        class: class as usize,
        entropy,
        ledger: cloud.ledger(),
        canvas: fov.canvas().canvas().clone(),
        fixations: fov.fixations().to_vec(),
    })
}
