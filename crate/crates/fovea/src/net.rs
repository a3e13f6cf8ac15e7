//! Blocking TCP transport for the edge/cloud protocol. One session per
//! connection; the server runs each connection on its own thread against a
//! shared, read-only model.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::Arc;
use std::thread;

use fovea_core::imaging::{FixationGeometry, Image};
use fovea_core::protocol::{self, CloudModel, CloudSession, EdgeSession, Message, SessionLedger, HEADER};

use crate::error::{Error, Result};

/// Reads one frame. `Ok(None)` on a clean end of stream before the header.
pub fn read_message<R: Read>(r: &mut R) -> Result<Option<Message>> {
    let mut h = [0u8; HEADER];
    let mut got = 0;
    while got < HEADER {
        match r.read(&mut h[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(Error::Session("connection closed inside a frame header".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let (tag, len) = protocol::decode_header(&h)?;
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Session(format!("connection closed inside a {len}-byte payload")),
        _ => e.into(),
    })?;
    Ok(Some(protocol::decode_payload(tag, &payload)?))
}

pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> Result<()> {
    w.write_all(&protocol::encode(msg))?;
    Ok(())
}

/// What the cloud knows when a session ends.
#[derive(Clone, Debug, PartialEq)]
pub struct CloudOutcome {
    pub peer: Option<SocketAddr>,
    pub class: usize,
    pub entropy: f64,
    pub ledger: SessionLedger,
    pub canvas: Image,
    pub fixations: Vec<FixationGeometry>,
}

/// Runs the cloud side of one session on `stream`.
pub fn serve_connection(stream: TcpStream, model: &CloudModel, image_size: usize) -> Result<CloudOutcome> {
    let peer = stream.peer_addr().ok();
    stream.set_nodelay(true)?;
    let mut rd = BufReader::new(stream.try_clone()?);
    let mut wr = BufWriter::new(stream);
    let (mut session, hello) = CloudSession::open(model, image_size, image_size)?;
    write_message(&mut wr, &hello)?;
    wr.flush()?;
    while !session.is_finished() {
        let msg = read_message(&mut rd)?.ok_or_else(|| Error::Session("edge disconnected mid-session".into()))?;
        for reply in session.handle(msg)? {
            write_message(&mut wr, &reply)?;
        }
        wr.flush()?;
    }
    let (class, entropy) = session.prediction().expect("finished session has a prediction");
    let fov = session.foveator().expect("finished session has a foveator");
    Ok(CloudOutcome { peer, class, entropy, ledger: session.ledger(), canvas: fov.canvas().canvas().clone(), fixations: fov.fixations().to_vec() })
}

pub struct Server {
    listener: TcpListener,
    model: Arc<CloudModel>,
    image_size: usize,
}

impl Server {
    pub fn bind(addr: impl ToSocketAddrs, model: CloudModel, image_size: usize) -> Result<Self> {
        Ok(Self { listener: TcpListener::bind(addr)?, model: Arc::new(model), image_size })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Serves the next connection on the calling thread.
    pub fn serve_one(&self) -> Result<CloudOutcome> {
        let (stream, _) = self.listener.accept()?;
        serve_connection(stream, &self.model, self.image_size)
    }

    /// Accepts connections, one thread each, until `limit` sessions have been
    /// accepted (forever with `None`); then waits for them to finish.
    /// `on_done` sees every outcome, failed sessions included.
    pub fn run(self, limit: Option<usize>, on_done: impl Fn(Result<CloudOutcome>) + Send + Sync + 'static) -> Result<()> {
        let on_done = Arc::new(on_done);
        let mut workers = Vec::new();
        let mut accepted = 0usize;
        while limit.is_none_or(|n| accepted < n) {
            let stream = match self.listener.accept() {
                Ok((s, _)) => s,
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    continue;
                }
            };
            accepted += 1;
            let model = Arc::clone(&self.model);
            let cb = Arc::clone(&on_done);
            let size = self.image_size;
            workers.push(thread::spawn(move || cb(serve_connection(stream, &model, size))));
            workers.retain(|w| !w.is_finished());
        }
        for w in workers {
            let _ = w.join();
        }
        Ok(())
    }
}

/// What the edge knows when a session ends.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeOutcome {
    pub class: usize,
    pub entropy: f32,
    pub ledger: SessionLedger,
    /// Pixels sent to the cloud, row-major.
    pub sent: Vec<bool>,
}

/// Runs the edge side of one session over an established stream. No
/// prediction is returned unless the cloud finishes with `Done`.
pub fn edge_session(stream: TcpStream, high: &Image, b1: f64, b2: f64) -> Result<EdgeOutcome> {
    stream.set_nodelay(true)?;
    let mut rd = BufReader::new(stream.try_clone()?);
    let mut wr = BufWriter::new(stream);
    let mut edge = EdgeSession::new(high.clone(), b1, b2);
    while !edge.is_finished() {
        let msg = read_message(&mut rd)?.ok_or_else(|| Error::Session("cloud disconnected mid-session".into()))?;
        for reply in edge.handle(msg)? {
            write_message(&mut wr, &reply)?;
        }
        wr.flush()?;
    }
    let (class, entropy) = edge.prediction().expect("finished edge has a prediction");
    Ok(EdgeOutcome { class: class as usize, entropy, ledger: edge.ledger(), sent: edge.sent_mask().to_vec() })
}

pub fn edge_connect(addr: impl ToSocketAddrs, high: &Image, b1: f64, b2: f64) -> Result<EdgeOutcome> {
    edge_session(TcpStream::connect(addr)?, high, b1, b2)
}
