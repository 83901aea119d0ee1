//! Framed message channels.
//!
//! Wire format of one frame, all integers big-endian:
//!
//! ```text
//! +-----------+----------+----------------+-----------+
//! | len: u32  | type: u8 | session: u64   | payload   |
//! +-----------+----------+----------------+-----------+
//! ```
//!
//! `len` counts everything after itself, so `len = 9 + payload.len()`.
//! The same framing is used by the in-memory channel and by TCP, which keeps
//! the two interchangeable. Channels carry no encryption or authentication:
//! the protocols running over them assume semi-honest peers and get their
//! privacy from the PSI layer.

use std::collections::VecDeque;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

pub const HEADER_LEN: usize = 4;
/// Bytes of the frame body that precede the payload (type + session id).
pub const META_LEN: usize = 9;
pub const MAX_PAYLOAD: usize = (u32::MAX as usize) - META_LEN - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    PsiMsg1 = 0x01,
    PsiMsg2 = 0x02,
    Intersection = 0x03,
    FreqSet = 0x04,
    Abort = 0x05,
}

impl TryFrom<u8> for MsgType {
    type Error = FrameError;
    fn try_from(b: u8) -> Result<Self, FrameError> {
        Ok(match b {
            0x01 => MsgType::PsiMsg1,
            0x02 => MsgType::PsiMsg2,
            0x03 => MsgType::Intersection,
            0x04 => MsgType::FreqSet,
            0x05 => MsgType::Abort,
            other => return Err(FrameError::UnknownType(other)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub msg_type: MsgType,
    pub session_id: u64,
    pub payload: Vec<u8>,
}

impl Envelope {
    pub fn new(msg_type: MsgType, session_id: u64, payload: Vec<u8>) -> Self {
        Envelope {
            msg_type,
            session_id,
            payload,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FrameError {
    #[error("payload of {0} bytes exceeds the frame limit")]
    Oversize(usize),
    #[error("unknown message type 0x{0:02x}")]
    UnknownType(u8),
    #[error("malformed frame: length field {0} < 9")]
    Malformed(u32),
}

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error("channel closed")]
    Closed,
    #[error("framing: {0}")]
    Frame(#[from] FrameError),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

pub fn frame_encode(e: &Envelope) -> Result<Vec<u8>, FrameError> {
    if e.payload.len() > MAX_PAYLOAD {
        return Err(FrameError::Oversize(e.payload.len()));
    }
    let len = (META_LEN + e.payload.len()) as u32;
    let mut out = Vec::with_capacity(HEADER_LEN + len as usize);
    out.extend_from_slice(&len.to_be_bytes());
    out.push(e.msg_type as u8);
    out.extend_from_slice(&e.session_id.to_be_bytes());
    out.extend_from_slice(&e.payload);
    Ok(out)
}

#[derive(Debug, PartialEq, Eq)]
pub enum Decoded<'a> {
    Frame {
        envelope: Envelope,
        rest: &'a [u8],
    },
    /// At least this many more bytes are required; nothing was consumed.
    NeedMore(usize),
}

pub fn frame_decode(bytes: &[u8]) -> Result<Decoded<'_>, FrameError> {
    if bytes.len() < HEADER_LEN {
        return Ok(Decoded::NeedMore(HEADER_LEN - bytes.len()));
    }
    let len = u32::from_be_bytes(bytes[..4].try_into().unwrap());
    if (len as usize) < META_LEN {
        return Err(FrameError::Malformed(len));
    }
    if bytes.len() > HEADER_LEN {
        MsgType::try_from(bytes[HEADER_LEN])?;
    }
    let total = HEADER_LEN + len as usize;
    if bytes.len() < total {
        return Ok(Decoded::NeedMore(total - bytes.len()));
    }
    let msg_type = MsgType::try_from(bytes[4])?;
    let session_id = u64::from_be_bytes(bytes[5..13].try_into().unwrap());
    Ok(Decoded::Frame {
        envelope: Envelope {
            msg_type,
            session_id,
            payload: bytes[13..total].to_vec(),
        },
        rest: &bytes[total..],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Sent,
    Received,
}

#[derive(Debug, Clone)]
pub struct TranscriptEntry {
    pub direction: Direction,
    pub party_id: usize,
    pub envelope: Envelope,
    pub at: Duration,
}

/// Append-only record of what one party sent and received. Cloning shares
/// the underlying log.
#[derive(Debug, Clone)]
pub struct TranscriptLog {
    origin: Instant,
    entries: Arc<Mutex<Vec<TranscriptEntry>>>,
}

impl Default for TranscriptLog {
    fn default() -> Self {
        TranscriptLog {
            origin: Instant::now(),
            entries: Arc::default(),
        }
    }
}

impl TranscriptLog {
    pub fn new() -> Self {
        Self::default()
    }

    fn append(&self, direction: Direction, party_id: usize, envelope: &Envelope) {
        let entry = TranscriptEntry {
            direction,
            party_id,
            envelope: envelope.clone(),
            at: self.origin.elapsed(),
        };
        self.entries.lock().expect("transcript poisoned").push(entry);
    }

    pub fn entries(&self) -> Vec<TranscriptEntry> {
        self.entries.lock().expect("transcript poisoned").clone()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("transcript poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn count(&self, direction: Direction) -> usize {
        self.entries
            .lock()
            .expect("transcript poisoned")
            .iter()
            .filter(|e| e.direction == direction)
            .count()
    }

    /// Encoded frames this party received, concatenated in arrival order.
    pub fn received_bytes(&self) -> Vec<u8> {
        self.bytes_where(|e| e.direction == Direction::Received)
    }

    pub fn received_bytes_of(&self, msg_type: MsgType) -> Vec<u8> {
        self.bytes_where(|e| e.direction == Direction::Received && e.envelope.msg_type == msg_type)
    }

    fn bytes_where(&self, keep: impl Fn(&TranscriptEntry) -> bool) -> Vec<u8> {
        self.entries
            .lock()
            .expect("transcript poisoned")
            .iter()
            .filter(|e| keep(e))
            .flat_map(|e| frame_encode(&e.envelope).expect("logged frames were encodable"))
            .collect()
    }
}

trait Link: Send {
    fn send_frame(&mut self, frame: Vec<u8>) -> Result<(), TransportError>;
    fn recv_envelope(&mut self) -> Result<Envelope, TransportError>;
}

struct MemLink {
    tx: mpsc::Sender<Vec<u8>>,
    rx: mpsc::Receiver<Vec<u8>>,
}

impl Link for MemLink {
    fn send_frame(&mut self, frame: Vec<u8>) -> Result<(), TransportError> {
        self.tx.send(frame).map_err(|_| TransportError::Closed)
    }

    fn recv_envelope(&mut self) -> Result<Envelope, TransportError> {
        let frame = self.rx.recv().map_err(|_| TransportError::Closed)?;
        match frame_decode(&frame)? {
            Decoded::Frame { envelope, .. } => Ok(envelope),
            Decoded::NeedMore(_) => unreachable!("in-memory frames are always whole"),
        }
    }
}

struct TcpLink {
    stream: TcpStream,
    buf: Vec<u8>,
}

impl Link for TcpLink {
    fn send_frame(&mut self, frame: Vec<u8>) -> Result<(), TransportError> {
        self.stream.write_all(&frame).map_err(closed_or_io)
    }

    fn recv_envelope(&mut self) -> Result<Envelope, TransportError> {
        let mut chunk = [0u8; 64 * 1024];
        loop {
            let need = match frame_decode(&self.buf)? {
                Decoded::Frame { envelope, rest } => {
                    let consumed = self.buf.len() - rest.len();
                    self.buf.drain(..consumed);
                    return Ok(envelope);
                }
                Decoded::NeedMore(n) => n,
            };
            let want = need.min(chunk.len());
            let got = self.stream.read(&mut chunk[..want]).map_err(closed_or_io)?;
            if got == 0 {
                return Err(TransportError::Closed);
            }
            self.buf.extend_from_slice(&chunk[..got]);
        }
    }
}

fn closed_or_io(e: io::Error) -> TransportError {
    match e.kind() {
        io::ErrorKind::BrokenPipe | io::ErrorKind::ConnectionReset | io::ErrorKind::UnexpectedEof => {
            TransportError::Closed
        }
        _ => TransportError::Io(e),
    }
}

/// One side of an ordered, reliable, bidirectional channel. Incoming frames
/// for sessions other than the one being waited on are buffered, so several
/// sessions can share one endpoint.
pub struct Endpoint {
    party_id: usize,
    link: Box<dyn Link>,
    transcript: Option<TranscriptLog>,
    pending: VecDeque<Envelope>,
    sent: usize,
    received: usize,
}

impl std::fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Endpoint")
            .field("party_id", &self.party_id)
            .field("pending", &self.pending.len())
            .finish()
    }
}

impl Endpoint {
    fn new(party_id: usize, link: Box<dyn Link>, transcript: Option<TranscriptLog>) -> Self {
        Endpoint {
            party_id,
            link,
            transcript,
            pending: VecDeque::new(),
            sent: 0,
            received: 0,
        }
    }

    pub fn tcp(stream: TcpStream, party_id: usize, transcript: Option<TranscriptLog>) -> io::Result<Self> {
        stream.set_nodelay(true)?;
        Ok(Self::new(
            party_id,
            Box::new(TcpLink {
                stream,
                buf: Vec::new(),
            }),
            transcript,
        ))
    }

    pub fn party_id(&self) -> usize {
        self.party_id
    }

    pub fn transcript(&self) -> Option<&TranscriptLog> {
        self.transcript.as_ref()
    }

    /// Envelopes (sent, received) through this endpoint.
    pub fn counts(&self) -> (usize, usize) {
        (self.sent, self.received)
    }

    pub fn send(&mut self, e: Envelope) -> Result<(), TransportError> {
        let frame = frame_encode(&e)?;
        self.link.send_frame(frame)?;
        self.sent += 1;
        if let Some(log) = &self.transcript {
            log.append(Direction::Sent, self.party_id, &e);
        }
        Ok(())
    }

    fn pull(&mut self) -> Result<Envelope, TransportError> {
        let e = self.link.recv_envelope()?;
        self.received += 1;
        if let Some(log) = &self.transcript {
            log.append(Direction::Received, self.party_id, &e);
        }
        Ok(e)
    }

    /// Puts an envelope back at the head of the receive queue.
    pub fn unread(&mut self, e: Envelope) {
        self.pending.push_front(e);
    }

    /// Next envelope of any session.
    pub fn recv(&mut self) -> Result<Envelope, TransportError> {
        match self.pending.pop_front() {
            Some(e) => Ok(e),
            None => self.pull(),
        }
    }

    /// Next envelope for `session_id`, buffering anything else.
    pub fn recv_session(&mut self, session_id: u64) -> Result<Envelope, TransportError> {
        if let Some(pos) = self.pending.iter().position(|e| e.session_id == session_id) {
            return Ok(self.pending.remove(pos).expect("position is in range"));
        }
        loop {
            let e = self.pull()?;
            if e.session_id == session_id {
                return Ok(e);
            }
            self.pending.push_back(e);
        }
    }
}

pub fn channel_pair(capture: bool) -> (Endpoint, Endpoint) {
    let logs = capture.then(|| (TranscriptLog::new(), TranscriptLog::new()));
    let (la, lb) = match logs {
        Some((a, b)) => (Some(a), Some(b)),
        None => (None, None),
    };
    mem_pair((0, la), (1, lb))
}

/// In-memory pair with explicit party ids and logs.
pub fn mem_pair(a: (usize, Option<TranscriptLog>), b: (usize, Option<TranscriptLog>)) -> (Endpoint, Endpoint) {
    let (tx_ab, rx_ab) = mpsc::channel();
    let (tx_ba, rx_ba) = mpsc::channel();
    (
        Endpoint::new(a.0, Box::new(MemLink { tx: tx_ab, rx: rx_ba }), a.1),
        Endpoint::new(b.0, Box::new(MemLink { tx: tx_ba, rx: rx_ab }), b.1),
    )
}

/// A connected pair of endpoints over loopback TCP.
pub fn tcp_pair(
    a: (usize, Option<TranscriptLog>),
    b: (usize, Option<TranscriptLog>),
) -> Result<(Endpoint, Endpoint), TransportError> {
    let listener = TcpListener::bind(SocketAddr::from(([127, 0, 0, 1], 0)))?;
    let addr = listener.local_addr()?;
    let client = TcpStream::connect(addr)?;
    let (server, _) = listener.accept()?;
    Ok((Endpoint::tcp(client, a.0, a.1)?, Endpoint::tcp(server, b.0, b.1)?))
}

/// Produces connected endpoint pairs for two clients, optionally capturing
/// a per-client transcript that spans every channel the client uses.
pub trait ChannelFactory: Sync {
    fn connect(&self, a: usize, b: usize) -> Result<(Endpoint, Endpoint), TransportError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    Mem,
    Tcp,
}

#[derive(Debug, Clone)]
pub struct LocalTransport {
    kind: TransportKind,
    logs: Option<Vec<TranscriptLog>>,
}

impl LocalTransport {
    pub fn new(kind: TransportKind) -> Self {
        LocalTransport { kind, logs: None }
    }

    /// Captures transcripts for clients `0..n`.
    pub fn with_capture(kind: TransportKind, n: usize) -> Self {
        LocalTransport {
            kind,
            logs: Some((0..n).map(|_| TranscriptLog::new()).collect()),
        }
    }

    pub fn transcript(&self, client: usize) -> Option<&TranscriptLog> {
        self.logs.as_ref().and_then(|l| l.get(client))
    }

    fn log(&self, client: usize) -> Option<TranscriptLog> {
        self.transcript(client).cloned()
    }
}

impl ChannelFactory for LocalTransport {
    fn connect(&self, a: usize, b: usize) -> Result<(Endpoint, Endpoint), TransportError> {
        let ends = ((a, self.log(a)), (b, self.log(b)));
        match self.kind {
            TransportKind::Mem => Ok(mem_pair(ends.0, ends.1)),
            TransportKind::Tcp => tcp_pair(ends.0, ends.1),
        }
    }
}
