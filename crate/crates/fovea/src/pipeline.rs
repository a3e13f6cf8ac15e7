//! The end-to-end workflows behind the command line, usable from tests.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use fovea_core::env::{thumbnail, Environment};
use fovea_core::eval::{self, Deployment, EvalReport, PolicyKind};
use fovea_core::imaging::{self, upsample_psi};
use fovea_core::models::Perception;
use fovea_core::protocol::CloudModel;
use fovea_core::rng::stream;
use fovea_core::solvability::{solvability_check, SolvabilityConfig, SolvabilityReport};
use fovea_core::synth::{generate_dataset, generate_split, SampleRecord, SPLIT_VALIDATION};
use fovea_core::trainer::{self, EpochMetrics, TrainMode, TrainOutcome};
use serde::Serialize;

use crate::artifacts::{self, Header, Splits};
use crate::config::{Budget, RunConfig};
use crate::error::{Error, Result};

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

fn json_line<W: Write, T: Serialize>(w: &mut W, v: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, v).map_err(|e| Error::Config(format!("serialize: {e}")))?;
    w.write_all(b"\n")?;
    Ok(())
}

#[derive(Serialize)]
struct HeaderLine<'a> {
    header: &'a Header,
}

/// Writes the provenance header as the first JSON line.
pub fn write_header_line<W: Write>(w: &mut W, header: &Header) -> Result<()> {
    json_line(w, &HeaderLine { header })
}

pub fn generate(cfg: &RunConfig) -> Result<Splits> {
    cfg.validate()?;
    let d = generate_dataset(&cfg.data, cfg.data_seed, cfg.n_train, cfg.n_test)?;
    let val = generate_split(&cfg.data, &d.bank, cfg.data_seed, SPLIT_VALIDATION, cfg.n_val)?;
    Ok(Splits { train: d.train, test: d.test, val })
}

/// Samples used per gate; enough for a clear verdict without a full epoch budget.
pub const SOLVABILITY_TRAIN: usize = 2000;
pub const SOLVABILITY_TEST: usize = 500;

pub fn check_solvability(cfg: &RunConfig, splits: &Splits) -> Result<SolvabilityReport> {
    let train = &splits.train[..splits.train.len().min(SOLVABILITY_TRAIN)];
    let test = &splits.test[..splits.test.len().min(SOLVABILITY_TEST)];
    Ok(solvability_check(&cfg.data, train, test, &SolvabilityConfig::default(), cfg.seed)?)
}

pub fn pretrain(cfg: &RunConfig, train: &[SampleRecord]) -> Result<Perception> {
    let (p, _) = trainer::pretrain(&cfg.backbone, cfg.data.classes, train, &cfg.pretrain, cfg.seed, |e| {
        log::info!("pretrain epoch {} lr {:.4} loss {:.4} acc {:.3}", e.epoch, e.lr, e.loss, e.accuracy)
    })?;
    Ok(p)
}

pub fn perception_from(cfg: &RunConfig, ck: &fovea_core::checkpoint::Checkpoint) -> Result<Perception> {
    let mut p = Perception::new(cfg.backbone, cfg.data.classes, &mut stream(0, 0, 0))?;
    p.load(ck)?;
    Ok(p)
}

pub fn cloud_from(cfg: &RunConfig, ck: &fovea_core::checkpoint::Checkpoint) -> Result<CloudModel> {
    Ok(CloudModel::from_checkpoint(ck, cfg.backbone, cfg.data.classes, cfg.train.env.clone(), cfg.train.actor_hidden)?)
}

/// One metrics line per epoch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsLine {
    pub epoch: usize,
    pub mode: &'static str,
    pub mean_return: f64,
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

impl From<&EpochMetrics> for MetricsLine {
    fn from(m: &EpochMetrics) -> Self {
        Self {
            epoch: m.epoch,
            mode: m.mode.name(),
            mean_return: m.mean_return,
            accuracy: m.accuracy,
            mean_pixel_fraction: m.mean_pixel_fraction,
            epsilon: m.epsilon,
            critic_loss: m.critic_loss,
            actor_loss: m.actor_loss,
            classify_loss: m.classify_loss,
            ou_sigma: m.ou_sigma,
            buffer_len: m.buffer_len,
            updates: m.updates,
        }
    }
}

/// Trains one mode and streams the metrics log (header line first) into
/// `metrics`. The log holds no timings, so equal configs give equal bytes.
pub fn train<W: Write>(cfg: &RunConfig, mode: TrainMode, pretrained: &Perception, train: &[SampleRecord], metrics: &mut W) -> Result<TrainOutcome> {
    let mut run_cfg = cfg.clone();
    run_cfg.mode = mode;
    write_header_line(metrics, &Header::new("metrics", &run_cfg))?;
    let out = trainer::train(&cfg.train, mode, pretrained, train, cfg.seed, |m, _, _| {
        log::info!(
            "{} epoch {} return {:+.3} acc {:.3} pix {:.3} eps {:.3}",
            mode.name(),
            m.epoch,
            m.mean_return,
            m.accuracy,
            m.mean_pixel_fraction,
            m.epsilon
        );
        json_line(metrics, &MetricsLine::from(m)).map_err(|e| fovea_core::Error::InvalidArgument(e.to_string()))?;
        metrics.flush().map_err(|e| fovea_core::Error::InvalidArgument(e.to_string()))
    })?;
    Ok(out)
}

/// Deployment model of a finished run: backbone, classifier and actor, no critic.
pub fn deploy(cfg: &RunConfig, out: &TrainOutcome) -> CloudModel {
    CloudModel { perception: out.perception.clone(), actor: out.agent.actor.clone(), env: cfg.train.env.clone() }
}

/// Reports of one evaluation pass.
#[derive(Clone, Debug)]
pub struct EvalSuite {
    pub drift: EvalReport,
    pub reports: Vec<EvalReport>,
    pub budget: f64,
    pub threshold: f64,
    pub thumb_accuracy: f64,
    pub full_accuracy: f64,
}

impl EvalSuite {
    pub fn get(&self, kind: PolicyKind) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.policy == kind)
    }
}

/// Evaluates `policies` on the test split. DRIFT always runs first: it sets
/// the matched budget and is the reference for DRIFT_E, whose threshold is
/// calibrated on the validation split.
pub fn evaluate(cfg: &RunConfig, model: &CloudModel, splits: &Splits, policies: &[PolicyKind]) -> Result<EvalSuite> {
    let dep = model.deployment();
    let drift = eval::run_policy_eval(PolicyKind::Drift, &dep, &splits.test, 0.0, f64::INFINITY, cfg.seed)?;
    let budget = match cfg.budget {
        Budget::Matched => drift.mean_pixel_percent / 100.0,
        Budget::Fixed(b) => b,
    };
    let threshold = if policies.contains(&PolicyKind::DriftE) {
        let calib = if splits.val.is_empty() { &splits.train } else { &splits.val };
        eval::calibrate_threshold(&eval::drift_entropies(&dep, calib)?, cfg.fallback_fraction)?
    } else {
        f64::INFINITY
    };
    let mut reports = Vec::with_capacity(policies.len());
    for &k in policies {
        let r = if k == PolicyKind::Drift {
            drift.clone()
        } else {
            eval::run_policy_eval(k, &dep, &splits.test, budget, threshold, cfg.seed)?
        };
        log::info!("{}: acc {:.1}% pix {:.2}% hit {:.1}% fallback {:.1}%", k.name(), r.accuracy, r.mean_pixel_percent, r.hit_rate, r.fallback_rate);
        reports.push(r);
    }
    let (thumb_accuracy, full_accuracy) = eval::reference_accuracies(&model.perception, &model.env, &splits.test)?;
    Ok(EvalSuite { drift, reports, budget, threshold, thumb_accuracy, full_accuracy })
}

pub fn parse_policies(s: &str) -> Result<Vec<PolicyKind>> {
    if s == "all" {
        return Ok(PolicyKind::ALL.to_vec());
    }
    s.split(',').map(|p| PolicyKind::parse(p.trim()).map_err(|e| Error::Config(e.to_string()))).collect()
}

#[derive(Serialize)]
struct EvalRow<'a> {
    policy: &'a str,
    acc: f64,
    pix: f64,
    bytes: f64,
    hit_rate: f64,
    fallback_rate: f64,
}

/// `# config_hash=... data_hash=...`, then the CSV.
pub fn write_eval_csv(path: &Path, header: &Header, reports: &[EvalReport]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "# config_hash={} data_hash={}", header.config_hash, header.data_hash)?;
    let mut c = csv::Writer::from_writer(w);
    for r in reports {
        c.serialize(EvalRow { policy: r.policy.name(), acc: r.accuracy, pix: r.mean_pixel_percent, bytes: r.mean_bytes, hit_rate: r.hit_rate, fallback_rate: r.fallback_rate })
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    c.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct SampleLine<'a> {
    policy: &'a str,
    index: usize,
    label: usize,
    prediction: usize,
    correct: bool,
    pixel_fraction: f64,
    bytes: usize,
    hit: bool,
    entropy: f64,
    fallback: bool,
    fixations: Vec<[f64; 3]>,
}

pub fn write_samples_jsonl(path: &Path, header: &Header, reports: &[EvalReport]) -> Result<()> {
    let mut w = create(path)?;
    write_header_line(&mut w, header)?;
    for r in reports {
        for s in &r.records {
            json_line(
                &mut w,
                &SampleLine {
                    policy: r.policy.name(),
                    index: s.index,
                    label: s.label,
                    prediction: s.prediction,
                    correct: s.correct,
                    pixel_fraction: s.pixel_fraction,
                    bytes: s.bytes,
                    hit: s.hit,
                    entropy: s.entropy,
                    fallback: s.fallback,
                    fixations: s.fixations.iter().map(|g| [g.cx, g.cy, g.radius]).collect(),
                },
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct TraceLine {
    sample: usize,
    t: usize,
    x: f64,
    y: f64,
    l: f64,
    new_pixels: usize,
    pixel_fraction: f64,
    reward_accuracy: f64,
    reward_efficiency: f64,
    reward: f64,
    entropy: f64,
}

/// Per-step DRIFT traces (with rewards, so labels are read) for `samples`.
pub fn write_traces(path: &Path, header: &Header, model: &CloudModel, samples: &[SampleRecord]) -> Result<()> {
    let mut w = create(path)?;
    write_header_line(&mut w, header)?;
    for (i, s) in samples.iter().enumerate() {
        let (mut env, _) = Environment::reset(&model.perception, &model.env, s)?;
        for _ in 0..model.env.steps {
            let a = eval::drift_action(&model.actor, env.foveator())?;
            env.step(&model.perception, a)?;
        }
        for st in env.trace() {
            json_line(
                &mut w,
                &TraceLine {
                    sample: i,
                    t: st.t,
                    x: st.action.x,
                    y: st.action.y,
                    l: st.action.l,
                    new_pixels: st.new_pixels,
                    pixel_fraction: st.pixel_fraction,
                    reward_accuracy: st.reward.accuracy,
                    reward_efficiency: st.reward.efficiency,
                    reward: st.reward.total,
                    entropy: st.entropy,
                },
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Four panels per sample: the upsampled thumbnail, the full image with the
/// fixation circles, the final mixed-acuity canvas, and that canvas with the
/// tightest box around the fixations.
pub fn render_panels(dir: &Path, header: &Header, model: &CloudModel, samples: &[SampleRecord], scale: usize) -> Result<Vec<std::path::PathBuf>> {
    let dep: Deployment = model.deployment();
    let mut out = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let high = s.high();
        let (h, w) = (high.height(), high.width());
        let r = eval::run_episode(PolicyKind::Drift, &dep, &high, 0.0, f64::INFINITY, &mut stream(0, 0, i as u64))?;
        let low = upsample_psi(&thumbnail(&high, model.env.thumb_size)?, h, w)?;
        let bbox = imaging::fit_bounding_box(&r.fixations, h, w).ok();
        let panels = [
            (h, w, low.to_rgb8()),
            (h, w, imaging::render_rgb8(&high, &r.fixations, None)),
            (h, w, r.canvas.to_rgb8()),
            (h, w, imaging::render_rgb8(&r.canvas, &[], bbox)),
        ];
        let (ph, pw, rgb) = artifacts::panel_strip(&panels, 2, scale);
        let path = dir.join(format!("panel_{i:04}.png"));
        let verdict = format!("label={} prediction={}", s.label, r.prediction);
        artifacts::write_png(&path, pw, ph, &rgb, &[("config_hash", &header.config_hash), ("data_hash", &header.data_hash), ("sample", &verdict)])?;
        out.push(path);
    }
    Ok(out)
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub mode: &'static str,
    pub accuracy: f64,
    pub pixel_percent: f64,
    pub hit_rate: f64,
    pub train_accuracy: f64,
}

/// Trains all four modes from the same pretrained backbone and seed and
/// evaluates DRIFT for each. Per-mode metrics logs go to `dir/<mode>/`.
pub fn ablate(cfg: &RunConfig, pretrained: &Perception, splits: &Splits, dir: &Path) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(4);
    for mode in TrainMode::ALL {
        let mdir = dir.join(mode.name());
        let mut log = create(&mdir.join("metrics.jsonl"))?;
        let out = train(cfg, mode, pretrained, &splits.train, &mut log)?;
        log.flush()?;
        let mut mcfg = cfg.clone();
        mcfg.mode = mode;
        let model = deploy(cfg, &out);
        artifacts::save_checkpoint(&mdir.join("model.fvnn"), &model.to_checkpoint(), &Header::new("model", &mcfg))?;
        let r = eval::run_policy_eval(PolicyKind::Drift, &model.deployment(), &splits.test, 0.0, f64::INFINITY, cfg.seed)?;
        rows.push(AblationRow {
            mode: mode.name(),
            accuracy: r.accuracy,
            pixel_percent: r.mean_pixel_percent,
            hit_rate: r.hit_rate,
            train_accuracy: out.metrics.last().map_or(0.0, |m| 100.0 * m.accuracy),
        });
    }
    Ok(rows)
}

pub fn write_ablation_csv(path: &Path, header: &Header, rows: &[AblationRow]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "# config_hash={} data_hash={}", header.config_hash, header.data_hash)?;
    let mut c = csv::Writer::from_writer(w);
    for r in rows {
        c.serialize(r).map_err(|e| Error::format(path, e.to_string()))?;
    }
    c.flush().map_err(|e| Error::io(path, e))
}
