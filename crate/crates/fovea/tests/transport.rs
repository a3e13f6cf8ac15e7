use std::io::Write;
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;

use fovea::error::Error;
use fovea::net::{edge_connect, read_message, serve_connection, write_message, CloudOutcome, Server};
use fovea_core::env::EnvConfig;
use fovea_core::imaging::Image;
use fovea_core::models::{Actor, BackboneConfig, Perception};
use fovea_core::protocol::{run_session, CloudModel, Message};
use fovea_core::synth::{generate_dataset, GlyphConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Untrained but non-degenerate model: the actor head is scaled up so
/// fixations move around.
fn model() -> CloudModel {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let perception = Perception::new(BackboneConfig { channels: [4, 6, 8], coords: true }, 10, &mut rng).unwrap();
    let env = EnvConfig::default();
    let mut actor = Actor::new(env.state_dim(perception.feature_dim()), 16, &mut rng).unwrap();
    for v in actor.params.get_mut("out.weight").unwrap().data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    CloudModel { perception, actor, env }
}

fn images(n: usize) -> Vec<Image> {
    generate_dataset(&GlyphConfig::default(), 2, 0, n).unwrap().test.iter().map(|s| s.high()).collect()
}

#[test]
fn loopback_matches_in_process() {
    let m = model();
    let imgs = images(20);
    let server = Server::bind("127.0.0.1:0", m.clone(), 64).unwrap();
    let addr = server.local_addr().unwrap();
    let outcomes: Arc<Mutex<Vec<CloudOutcome>>> = Arc::default();
    let sink = Arc::clone(&outcomes);
    let n = imgs.len();
    let srv = thread::spawn(move || server.run(Some(n), move |r| sink.lock().unwrap().push(r.unwrap())));
    let mut distinct = std::collections::HashSet::new();
    for img in &imgs {
        let local = run_session(&m, img).unwrap();
        let edge = edge_connect(addr, img, m.env.b1, m.env.b2).unwrap();
        assert_eq!(edge.class, local.class);
        assert_eq!(edge.entropy.to_bits(), local.entropy.to_bits());
        assert_eq!(edge.ledger, local.ledger);
        assert_eq!(edge.sent.iter().filter(|b| **b).count(), local.ledger.pixels_sent);
        distinct.insert(local.fixations.iter().map(|f| (f.cx.to_bits(), f.cy.to_bits())).collect::<Vec<_>>());
    }
    srv.join().unwrap().unwrap();
    let got = outcomes.lock().unwrap();
    assert_eq!(got.len(), imgs.len());
    // Sessions ran one after another, so outcomes arrive in order.
    for (o, img) in got.iter().zip(&imgs) {
        let local = run_session(&m, img).unwrap();
        assert_eq!(o.canvas, local.canvas);
        assert_eq!(o.fixations, local.fixations);
        assert_eq!(o.ledger, local.ledger);
        assert_eq!(o.class, local.class);
    }
    assert!(distinct.len() > 1, "every image got the same fixations");
}

#[test]
fn concurrent_sessions_keep_separate_ledgers() {
    let m = model();
    let imgs = images(8);
    let server = Server::bind("127.0.0.1:0", m.clone(), 64).unwrap();
    let addr = server.local_addr().unwrap();
    let srv = thread::spawn(move || server.run(Some(8), |r| assert!(r.is_ok())));
    let edges: Vec<_> = imgs
        .iter()
        .cloned()
        .map(|img| {
            let (b1, b2) = (m.env.b1, m.env.b2);
            thread::spawn(move || edge_connect(addr, &img, b1, b2).unwrap())
        })
        .collect();
    let results: Vec<_> = edges.into_iter().map(|h| h.join().unwrap()).collect();
    srv.join().unwrap().unwrap();
    for (r, img) in results.iter().zip(&imgs) {
        let local = run_session(&m, img).unwrap();
        assert_eq!(r.ledger, local.ledger);
        assert_eq!(r.class, local.class);
    }
}

#[test]
fn cloud_hangup_yields_no_prediction() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let m = model();
    let fake = thread::spawn(move || {
        let (mut s, _) = listener.accept().unwrap();
        write_message(&mut s, &Message::Hello { height: 64, width: 64, thumb_height: 8, thumb_width: 8 }).unwrap();
        s.flush().unwrap();
        // Read the thumbnail, send one request, then vanish.
        assert!(matches!(read_message(&mut s).unwrap(), Some(Message::Thumbnail { .. })));
        write_message(&mut s, &Message::FixationRequest { x: 0.0, y: 0.0, l: 0.0 }).unwrap();
    });
    let img = &images(1)[0];
    let r = edge_connect(addr, img, m.env.b1, m.env.b2);
    fake.join().unwrap();
    assert!(matches!(r, Err(Error::Session(_)) | Err(Error::Net(_))), "{r:?}");
}

#[test]
fn edge_hangup_fails_the_cloud_session() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let edge = thread::spawn(move || {
        let mut s = TcpStream::connect(addr).unwrap();
        assert!(matches!(read_message(&mut s).unwrap(), Some(Message::Hello { .. })));
        // Half a thumbnail frame, then close.
        let frame = fovea_core::protocol::encode(&Message::Thumbnail { rgb: vec![0; 192] });
        s.write_all(&frame[..40]).unwrap();
    });
    let (stream, _) = listener.accept().unwrap();
    let m = model();
    let r = serve_connection(stream, &m, 64);
    edge.join().unwrap();
    assert!(matches!(r, Err(Error::Session(_))), "{r:?}");
}

/// Field names of every frame. The match is exhaustive, so a new variant
/// cannot slip past this list.
fn fields(m: &Message) -> &'static [&'static str] {
    match m {
        Message::Hello { .. } => &["height", "width", "thumb_height", "thumb_width"],
        Message::Thumbnail { .. } => &["rgb"],
        Message::FixationRequest { .. } => &["x", "y", "l"],
        Message::PatchResponse { .. } => &["pixels"],
        Message::Prediction { .. } => &["class", "entropy"],
        Message::Done => &[],
    }
}

#[test]
fn no_frame_has_a_label_field() {
    let all = [
        Message::Hello { height: 1, width: 1, thumb_height: 1, thumb_width: 1 },
        Message::Thumbnail { rgb: vec![] },
        Message::FixationRequest { x: 0.0, y: 0.0, l: 0.0 },
        Message::PatchResponse { pixels: vec![] },
        Message::Prediction { class: 0, entropy: 0.0 },
        Message::Done,
    ];
    for m in &all {
        assert!(!fields(m).iter().any(|f| f.contains("label")), "{}", m.name());
    }
}
