use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fovea::artifacts::{self, Header};
use fovea::config::{Budget, RunConfig};
use fovea::error::Error;
use fovea::{net, pipeline};
use fovea_core::eval::PolicyKind;

/// Cost-aware sequential fixations on GlyphWorld: data, training, evaluation
/// and the edge/cloud pair.
#[derive(Parser, Debug)]
#[command(name = "fovea", version)]
struct Cli {
    /// Sectioned key=value config; defaults to the config stored in the input artifact.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed (initialisation, training, stochastic baselines).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override one config key, e.g. `--set train.epochs=10`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a GlyphWorld dataset (manifest plus PNGs).
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Run the solvability gate first; exit 3 if it fails.
        #[arg(long)]
        check: bool,
    },
    /// Supervised pretraining of the backbone and classifier on full images.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the fixation policy from a pretrained checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// ddpg | cc | coach | full
        #[arg(long)]
        mode: Option<String>,
    },
    /// Train and evaluate all four modes from one pretrained checkpoint.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate policies on the test split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// drift | random | center | saliency | drift-e, comma-separated, or all
        #[arg(long)]
        policy: Option<String>,
        /// Pixel fraction for Random and Center, or `matched`.
        #[arg(long)]
        budget: Option<String>,
        /// Also write per-step DRIFT traces.
        #[arg(long)]
        trace: bool,
    },
    /// Write four-panel PNGs for the first test samples.
    Render {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 4)]
        scale: usize,
    },
    /// Run the cloud endpoint.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        address: Option<String>,
        /// Exit after this many sessions.
        #[arg(long)]
        sessions: Option<usize>,
    },
    /// Run the edge endpoint over test samples.
    Edge {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        address: Option<String>,
        #[arg(long)]
        count: Option<usize>,
        /// Per-session JSON lines.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
    Gate(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Usage(m),
            e => Failure::Runtime(e),
        }
    }
}

type Outcome = Result<(), Failure>;

fn resolve(cli: &Cli, base: Option<&Header>, extra: impl FnOnce(&mut RunConfig) -> Result<(), Error>) -> Result<RunConfig, Failure> {
    let mut cfg = match (&cli.config, base) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(h)) => h.run_config()?,
        (None, None) => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    for a in &cli.set {
        cfg.set_dotted(a)?;
    }
    extra(&mut cfg)?;
    cfg.validate().map_err(|e| match e {
        Error::Core(c) => Failure::Usage(c.to_string()),
        e => e.into(),
    })?;
    Ok(cfg)
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join("config.ini");
    fs::write(&p, cfg.to_ini_string()).map_err(|e| Error::io(&p, e))
}

fn load_data(path: &Path) -> Result<(artifacts::Splits, Header), Failure> {
    Ok(artifacts::read_dataset(path)?)
}

fn run(cli: &Cli) -> Outcome {
    match &cli.cmd {
        Cmd::GenData { out, check } => {
            let cfg = resolve(cli, None, |_| Ok(()))?;
            let splits = pipeline::generate(&cfg)?;
            if *check {
                let r = pipeline::check_solvability(&cfg, &splits)?;
                println!(
                    "solvability: thumbnail {:.1}% (limit {:.1}%), gt crop {:.1}% (floor {:.1}%)",
                    r.thumb_accuracy, r.thumb_limit, r.crop_accuracy, r.crop_floor
                );
                if !r.passed() {
                    return Err(Failure::Gate("dataset rejected by the solvability gate".into()));
                }
            }
            artifacts::write_dataset(out, &splits, &Header::new("dataset", &cfg))?;
            write_config(out, &cfg)?;
            println!("wrote {} train, {} test, {} val images to {}", splits.train.len(), splits.test.len(), splits.val.len(), out.display());
        }
        Cmd::Pretrain { data, out } => {
            let (splits, dh) = load_data(data)?;
            let cfg = resolve(cli, Some(&dh), |_| Ok(()))?;
            dh.require_data(&cfg.data_hash(), &data.display().to_string())?;
            let p = pipeline::pretrain(&cfg, &splits.train)?;
            let (low, full) = fovea_core::eval::reference_accuracies(&p, &cfg.train.env, &splits.test).map_err(Error::from)?;
            let mut ck = fovea_core::checkpoint::Checkpoint::new();
            p.save(&mut ck);
            artifacts::save_checkpoint(out, &ck, &Header::new("pretrain", &cfg))?;
            println!("test accuracy: thumbnail {low:.1}%, full image {full:.1}%");
        }
        Cmd::Train { data, checkpoint, out, mode } => {
            let (ck, ch) = artifacts::load_checkpoint(checkpoint)?;
            let cfg = resolve(cli, Some(&ch), |c| match mode {
                Some(m) => c.set("run", "mode", m),
                None => Ok(()),
            })?;
            let (splits, dh) = load_data(data)?;
            dh.require_data(&cfg.data_hash(), &data.display().to_string())?;
            ch.require_data(&cfg.data_hash(), &checkpoint.display().to_string())?;
            let p = pipeline::perception_from(&cfg, &ck)?;
            write_config(out, &cfg)?;
            let mpath = out.join("metrics.jsonl");
            let mut log = std::io::BufWriter::new(fs::File::create(&mpath).map_err(|e| Error::io(&mpath, e))?);
            let run = pipeline::train(&cfg, cfg.mode, &p, &splits.train, &mut log)?;
            log.flush().map_err(|e| Error::io(&mpath, e))?;
            let model = pipeline::deploy(&cfg, &run);
            artifacts::save_checkpoint(&out.join("model.fvnn"), &model.to_checkpoint(), &Header::new("model", &cfg))?;
            if let Some(m) = run.metrics.last() {
                println!("{}: epoch {} train accuracy {:.1}% pixels {:.2}%", cfg.mode.name(), m.epoch, 100.0 * m.accuracy, 100.0 * m.mean_pixel_fraction);
            }
        }
        Cmd::Ablate { data, checkpoint, out } => {
            let (ck, ch) = artifacts::load_checkpoint(checkpoint)?;
            let cfg = resolve(cli, Some(&ch), |_| Ok(()))?;
            let (splits, dh) = load_data(data)?;
            dh.require_data(&cfg.data_hash(), &data.display().to_string())?;
            ch.require_data(&cfg.data_hash(), &checkpoint.display().to_string())?;
            let p = pipeline::perception_from(&cfg, &ck)?;
            write_config(out, &cfg)?;
            let rows = pipeline::ablate(&cfg, &p, &splits, out)?;
            pipeline::write_ablation_csv(&out.join("ablation.csv"), &Header::new("ablation", &cfg), &rows)?;
            println!("{:<6} {:>8} {:>8} {:>8}", "mode", "acc", "pix", "hit");
            for r in &rows {
                println!("{:<6} {:>8.1} {:>8.2} {:>8.1}", r.mode, r.accuracy, r.pixel_percent, r.hit_rate);
            }
        }
        Cmd::Eval { data, checkpoint, out, policy, budget, trace } => {
            let (ck, ch) = artifacts::load_checkpoint(checkpoint)?;
            let cfg = resolve(cli, Some(&ch), |c| {
                if let Some(p) = policy {
                    c.set("run", "policy", p)?;
                }
                if let Some(b) = budget {
                    c.set("eval", "budget", b)?;
                }
                Ok(())
            })?;
            let policies = pipeline::parse_policies(&cfg.policy)?;
            let (splits, dh) = load_data(data)?;
            dh.require_data(&cfg.data_hash(), &data.display().to_string())?;
            ch.require_data(&cfg.data_hash(), &checkpoint.display().to_string())?;
            let model = pipeline::cloud_from(&cfg, &ck)?;
            let suite = pipeline::evaluate(&cfg, &model, &splits, &policies)?;
            let header = Header::new("eval", &cfg);
            write_config(out, &cfg)?;
            pipeline::write_eval_csv(&out.join("eval.csv"), &header, &suite.reports)?;
            pipeline::write_samples_jsonl(&out.join("samples.jsonl"), &header, &suite.reports)?;
            if *trace {
                pipeline::write_traces(&out.join("trace.jsonl"), &header, &model, &splits.test)?;
            }
            match cfg.budget {
                Budget::Matched => println!("budget matched to drift: {:.2}% pixels", 100.0 * suite.budget),
                Budget::Fixed(b) => println!("budget: {:.2}% pixels", 100.0 * b),
            }
            println!("{:<9} {:>7} {:>7} {:>9} {:>8} {:>13}", "policy", "acc", "pix", "bytes", "hit_rate", "fallback_rate");
            for r in &suite.reports {
                println!(
                    "{:<9} {:>7.1} {:>7.2} {:>9.0} {:>8.1} {:>13.1}",
                    r.policy.name(),
                    r.accuracy,
                    r.mean_pixel_percent,
                    r.mean_bytes,
                    r.hit_rate,
                    r.fallback_rate
                );
            }
            println!("reference: thumbnail only {:.1}%, full image {:.1}%", suite.thumb_accuracy, suite.full_accuracy);
            if policies.contains(&PolicyKind::DriftE) {
                println!("drift-e entropy threshold {:.4}", suite.threshold);
            }
        }
        Cmd::Render { data, checkpoint, out, count, scale } => {
            let (ck, ch) = artifacts::load_checkpoint(checkpoint)?;
            let cfg = resolve(cli, Some(&ch), |_| Ok(()))?;
            let (splits, dh) = load_data(data)?;
            dh.require_data(&cfg.data_hash(), &data.display().to_string())?;
            ch.require_data(&cfg.data_hash(), &checkpoint.display().to_string())?;
            let model = pipeline::cloud_from(&cfg, &ck)?;
            let n = (*count).min(splits.test.len());
            let paths = pipeline::render_panels(out, &Header::new("render", &cfg), &model, &splits.test[..n], *scale)?;
            println!("wrote {} panels to {}", paths.len(), out.display());
        }
        Cmd::Serve { checkpoint, address, sessions } => {
            let (ck, ch) = artifacts::load_checkpoint(checkpoint)?;
            let cfg = resolve(cli, Some(&ch), |c| match address {
                Some(a) => c.set("run", "address", a),
                None => Ok(()),
            })?;
            let model = pipeline::cloud_from(&cfg, &ck)?;
            let server = net::Server::bind(cfg.address.as_str(), model, cfg.data.image_size)?;
            log::info!("serving on {}", server.local_addr()?);
            println!("listening on {}", server.local_addr()?);
            server.run(*sessions, |r| match r {
                Ok(o) => log::info!(
                    "session {:?}: class {} entropy {:.3} pixels {} bytes {}",
                    o.peer,
                    o.class,
                    o.entropy,
                    o.ledger.pixels_sent,
                    o.ledger.bytes_up + o.ledger.bytes_down
                ),
                Err(e) => log::warn!("session failed: {e}"),
            })?;
        }
        Cmd::Edge { data, address, count, out } => {
            let (splits, dh) = load_data(data)?;
            let cfg = resolve(cli, Some(&dh), |c| match address {
                Some(a) => c.set("run", "address", a),
                None => Ok(()),
            })?;
            dh.require_data(&cfg.data_hash(), &data.display().to_string())?;
            let n = count.unwrap_or(splits.test.len()).min(splits.test.len());
            let mut log = match out {
                Some(p) => {
                    let mut w = std::io::BufWriter::new(fs::File::create(p).map_err(|e| Error::io(p, e))?);
                    pipeline::write_header_line(&mut w, &Header::new("edge", &cfg))?;
                    Some(w)
                }
                None => None,
            };
            let (mut correct, mut failed, mut pixels, mut bytes) = (0usize, 0usize, 0usize, 0usize);
            for (i, s) in splits.test[..n].iter().enumerate() {
                match net::edge_connect(cfg.address.as_str(), &s.high(), cfg.train.env.b1, cfg.train.env.b2) {
                    Ok(o) => {
                        correct += (o.class == s.label) as usize;
                        pixels += o.ledger.pixels_sent;
                        bytes += o.ledger.bytes_up + o.ledger.bytes_down;
                        if let Some(w) = log.as_mut() {
                            let line = serde_json::json!({
                                "index": i, "label": s.label, "prediction": o.class, "entropy": o.entropy,
                                "pixels_sent": o.ledger.pixels_sent, "bytes_up": o.ledger.bytes_up,
                                "bytes_down": o.ledger.bytes_down, "round_trips": o.ledger.round_trips,
                            });
                            writeln!(w, "{line}").map_err(Error::from)?;
                        }
                    }
                    Err(e) => {
                        failed += 1;
                        log::warn!("sample {i}: {e}");
                    }
                }
            }
            if let Some(w) = log.as_mut() {
                w.flush().map_err(Error::from)?;
            }
            let done = (n - failed).max(1) as f64;
            let hw = (cfg.data.image_size * cfg.data.image_size) as f64;
            println!(
                "{} sessions, {} failed: accuracy {:.1}%, pixels {:.2}%, {:.0} bytes per session",
                n,
                failed,
                100.0 * correct as f64 / done,
                100.0 * pixels as f64 / done / hw,
                bytes as f64 / done
            );
            if failed > 0 {
                return Err(Failure::Runtime(Error::Session(format!("{failed} of {n} sessions failed"))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FOVEATE_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Gate(m)) => {
            eprintln!("gate failed: {m}");
            ExitCode::from(3)
        }
    }
}
