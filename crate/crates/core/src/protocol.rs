//! Pairwise frequency exchange on top of PSI, and its all-pairs composition
//! into per-client global frequencies.
//!
//! In a pair the client with the lower id is the PSI sender (`P1`) and the
//! other is the receiver (`P2`). Message flow for one pair:
//!
//! 1. `P2 -> P1` `PSI_MSG1`, `P1 -> P2` `PSI_MSG2`; `P2` learns the
//!    intersection `I`.
//! 2. `P2 -> P1` `INTERSECTION` (`I`) then `FREQ_SET` (`F2`, `P2`'s local
//!    counts of the items in `I`).
//! 3. `P1 -> P2` `FREQ_SET` (`F1`).
//!
//! Both sides then hold, for each of their records, the peer's count (zero
//! outside `I`). Note that step 2 gives `P1` the intersection too.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::thread;
use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Digest, LocalDataset};
use crate::psi::{PsiError, PsiMsg1, PsiMsg2, PsiSession, Role};
use crate::scheduler::{validate_schedule, Pair, Schedule};
use crate::transport::{ChannelFactory, Endpoint, Envelope, MsgType, TransportError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Connect,
    Psi,
    Intersection,
    FreqExchange,
}

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("PSI: {0}")]
    Psi(#[from] PsiError),
    #[error("transport failure during {stage:?}: {source}")]
    Transport {
        stage: Stage,
        #[source]
        source: TransportError,
    },
    #[error("expected {expected:?}, got {got:?}")]
    UnexpectedMessage { expected: MsgType, got: MsgType },
    #[error("peer aborted the session")]
    Aborted,
    #[error("protocol violation: {0}")]
    Violation(String),
    #[error("client {client} already accumulated counts from peer {peer}")]
    DoubleAccumulation { client: usize, peer: usize },
    #[error("frequency vector of length {got} does not match {expected} records")]
    LengthMismatch { expected: usize, got: usize },
}

#[derive(Debug, thiserror::Error)]
#[error("round {round}, pair ({lo}, {hi}): {source}")]
pub struct RunError {
    pub round: usize,
    /// 1-based client indices as in the schedule.
    pub lo: usize,
    pub hi: usize,
    #[source]
    pub source: ProtocolError,
}

#[derive(Debug, thiserror::Error)]
pub enum PpmprError {
    #[error("schedule is for {schedule} clients but {clients} were given")]
    ScheduleSize { schedule: usize, clients: usize },
    #[error("schedule failed validation")]
    InvalidSchedule,
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("node setup: {0}")]
    Io(#[from] io::Error),
}

/// Peer counts for each of a client's records, in record order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyVector {
    pub client_id: usize,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalFrequencyVector {
    pub client_id: usize,
    pub counts: Vec<u64>,
    pub rounds_applied: BTreeSet<usize>,
}

/// `(digest, count)` entries sorted by digest.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FreqSet {
    pub entries: Vec<(Digest, u64)>,
}

impl FreqSet {
    /// Local counts of `intersection` items in `ds`; every item must be present.
    pub fn for_intersection(ds: &LocalDataset, intersection: &[Digest]) -> Result<Self, ProtocolError> {
        let mut entries = intersection
            .iter()
            .map(|d| {
                ds.position(d)
                    .map(|i| (*d, ds.records()[i].local_freq))
                    .ok_or_else(|| ProtocolError::Violation(format!("intersection item {d:?} is not held locally")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        entries.sort_unstable_by_key(|e| e.0);
        Ok(FreqSet { entries })
    }

    pub fn to_payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.entries.len() * 40);
        out.extend_from_slice(&(self.entries.len() as u32).to_be_bytes());
        for (d, c) in &self.entries {
            out.extend_from_slice(d.as_bytes());
            out.extend_from_slice(&c.to_be_bytes());
        }
        out
    }

    pub fn from_payload(bytes: &[u8]) -> Result<Self, ProtocolError> {
        let body = list_body(bytes, 40)?;
        let entries: Vec<(Digest, u64)> = body
            .chunks_exact(40)
            .map(|c| {
                (
                    Digest(c[..32].try_into().expect("32 bytes")),
                    u64::from_be_bytes(c[32..].try_into().expect("8 bytes")),
                )
            })
            .collect();
        if entries.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(ProtocolError::Violation(
                "frequency set not strictly sorted by digest".into(),
            ));
        }
        Ok(FreqSet { entries })
    }

    /// Rejects entries outside the agreed intersection.
    pub fn check_within(&self, intersection: &BTreeSet<Digest>) -> Result<(), ProtocolError> {
        match self.entries.iter().find(|(d, _)| !intersection.contains(d)) {
            Some((d, _)) => Err(ProtocolError::Violation(format!(
                "frequency set entry {d:?} outside the intersection"
            ))),
            None => Ok(()),
        }
    }

    /// Zero-filled vector aligned to `ds` records.
    pub fn materialize(&self, ds: &LocalDataset) -> Result<FrequencyVector, ProtocolError> {
        let mut counts = vec![0u64; ds.len()];
        for (d, c) in &self.entries {
            let i = ds
                .position(d)
                .ok_or_else(|| ProtocolError::Violation(format!("frequency set entry {d:?} is not held locally")))?;
            counts[i] = *c;
        }
        Ok(FrequencyVector {
            client_id: ds.client_id,
            counts,
        })
    }
}

fn list_body(bytes: &[u8], width: usize) -> Result<&[u8], ProtocolError> {
    let bad = || ProtocolError::Violation("malformed list payload".into());
    let (len, rest) = bytes.split_first_chunk::<4>().ok_or_else(bad)?;
    let k = u32::from_be_bytes(*len) as usize;
    if k.checked_mul(width) != Some(rest.len()) {
        return Err(bad());
    }
    Ok(rest)
}

pub fn intersection_payload(items: &[Digest]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + items.len() * 32);
    out.extend_from_slice(&(items.len() as u32).to_be_bytes());
    for d in items {
        out.extend_from_slice(d.as_bytes());
    }
    out
}

pub fn parse_intersection(bytes: &[u8]) -> Result<Vec<Digest>, ProtocolError> {
    let body = list_body(bytes, 32)?;
    Ok(body
        .chunks_exact(32)
        .map(|c| Digest(c.try_into().expect("32 bytes")))
        .collect())
}

/// Session id for one pair: both 1-based indices packed into a u64.
pub fn session_id(pair: Pair) -> u64 {
    ((pair.lo() as u64) << 32) | pair.hi() as u64
}

struct Party<'a> {
    ds: &'a LocalDataset,
    ep: &'a mut Endpoint,
    session: u64,
}

impl Party<'_> {
    fn send(&mut self, stage: Stage, t: MsgType, payload: Vec<u8>) -> Result<(), ProtocolError> {
        self.ep
            .send(Envelope::new(t, self.session, payload))
            .map_err(|source| ProtocolError::Transport { stage, source })
    }

    fn expect(&mut self, stage: Stage, t: MsgType) -> Result<Vec<u8>, ProtocolError> {
        let e = self
            .ep
            .recv_session(self.session)
            .map_err(|source| ProtocolError::Transport { stage, source })?;
        match e.msg_type {
            got if got == t => Ok(e.payload),
            MsgType::Abort => Err(ProtocolError::Aborted),
            got => Err(ProtocolError::UnexpectedMessage { expected: t, got }),
        }
    }

    fn abort_on_err<T>(&mut self, r: Result<T, ProtocolError>) -> Result<T, ProtocolError> {
        if let Err(e) = &r {
            if !matches!(e, ProtocolError::Aborted | ProtocolError::Transport { .. }) {
                let _ = self.ep.send(Envelope::new(MsgType::Abort, self.session, Vec::new()));
            }
        }
        r
    }

    fn run_sender(&mut self, mut psi: PsiSession) -> Result<FrequencyVector, ProtocolError> {
        let r = self.sender_steps(&mut psi);
        self.abort_on_err(r)
    }

    fn sender_steps(&mut self, psi: &mut PsiSession) -> Result<FrequencyVector, ProtocolError> {
        let m1 = PsiMsg1::from_payload(&self.expect(Stage::Psi, MsgType::PsiMsg1)?)?;
        let m2 = psi.sender_respond(&self.ds.digests(), &m1)?;
        self.send(Stage::Psi, MsgType::PsiMsg2, m2.to_payload())?;
        psi.sender_close()?;

        let inter = parse_intersection(&self.expect(Stage::Intersection, MsgType::Intersection)?)?;
        let inter_set: BTreeSet<Digest> = inter.iter().copied().collect();
        if inter_set.len() != inter.len() {
            return Err(ProtocolError::Violation("intersection repeats an item".into()));
        }
        let f2 = FreqSet::from_payload(&self.expect(Stage::FreqExchange, MsgType::FreqSet)?)?;
        f2.check_within(&inter_set)?;
        let f1 = FreqSet::for_intersection(self.ds, &inter)?;
        self.send(Stage::FreqExchange, MsgType::FreqSet, f1.to_payload())?;
        f2.materialize(self.ds)
    }

    fn run_receiver(&mut self, mut psi: PsiSession) -> Result<FrequencyVector, ProtocolError> {
        let r = self.receiver_steps(&mut psi);
        self.abort_on_err(r)
    }

    fn receiver_steps(&mut self, psi: &mut PsiSession) -> Result<FrequencyVector, ProtocolError> {
        let m1 = psi.receiver_msg1(&self.ds.digests())?;
        self.send(Stage::Psi, MsgType::PsiMsg1, m1.to_payload())?;
        let m2 = PsiMsg2::from_payload(&self.expect(Stage::Psi, MsgType::PsiMsg2)?)?;
        let result = psi.receiver_finish(&m2)?;

        // records are digest-sorted, so the intersection already is too
        let inter = result.intersection;
        let inter_set: BTreeSet<Digest> = inter.iter().copied().collect();
        let f2 = FreqSet::for_intersection(self.ds, &inter)?;
        self.send(Stage::Intersection, MsgType::Intersection, intersection_payload(&inter))?;
        self.send(Stage::FreqExchange, MsgType::FreqSet, f2.to_payload())?;
        let f1 = FreqSet::from_payload(&self.expect(Stage::FreqExchange, MsgType::FreqSet)?)?;
        f1.check_within(&inter_set)?;
        f1.materialize(self.ds)
    }
}

/// Sender (`P1`) side of one pairwise run over an established endpoint.
pub fn run_2pc_sender(
    ds: &LocalDataset,
    ep: &mut Endpoint,
    session: u64,
    psi: PsiSession,
) -> Result<FrequencyVector, ProtocolError> {
    Party { ds, ep, session }.run_sender(psi)
}

/// Receiver (`P2`) side of one pairwise run over an established endpoint.
pub fn run_2pc_receiver(
    ds: &LocalDataset,
    ep: &mut Endpoint,
    session: u64,
    psi: PsiSession,
) -> Result<FrequencyVector, ProtocolError> {
    Party { ds, ep, session }.run_receiver(psi)
}

/// Runs both sides of a pair, `p1` as PSI sender, on two threads over the
/// given endpoints. Returns `(C1, C2)`.
pub fn run_2pc(
    p1: &LocalDataset,
    p2: &LocalDataset,
    link: (Endpoint, Endpoint),
    session: u64,
    rng: &mut ChaCha20Rng,
) -> Result<(FrequencyVector, FrequencyVector), ProtocolError> {
    let s1 = PsiSession::new(Role::Sender, rng);
    let s2 = PsiSession::new(Role::Receiver, rng);
    run_2pc_with(p1, p2, link, session, (s1, s2))
}

/// As [`run_2pc`] with caller-built PSI sessions (sender, receiver).
pub fn run_2pc_with(
    p1: &LocalDataset,
    p2: &LocalDataset,
    link: (Endpoint, Endpoint),
    session: u64,
    psi: (PsiSession, PsiSession),
) -> Result<(FrequencyVector, FrequencyVector), ProtocolError> {
    let (mut e1, mut e2) = link;
    let (s1, s2) = psi;
    thread::scope(|scope| {
        let recv = scope.spawn(move || run_2pc_receiver(p2, &mut e2, session, s2));
        let c1 = run_2pc_sender(p1, &mut e1, session, s1);
        drop(e1);
        let c2 = recv.join().expect("receiver thread panicked");
        match (c1, c2) {
            (Ok(c1), Ok(c2)) => Ok((c1, c2)),
            // prefer the root cause over the peer's view of it
            (Err(e), Err(ProtocolError::Aborted)) | (Err(e), Err(ProtocolError::Transport { .. })) => Err(e),
            (_, Err(e)) | (Err(e), _) => Err(e),
        }
    })
}

pub fn ppmpr_init(ds: &LocalDataset) -> GlobalFrequencyVector {
    GlobalFrequencyVector {
        client_id: ds.client_id,
        counts: ds.local_freqs(),
        rounds_applied: BTreeSet::new(),
    }
}

impl GlobalFrequencyVector {
    /// Adds one peer's pairwise counts; each peer may be applied once.
    pub fn accumulate(&mut self, c: &FrequencyVector, peer: usize) -> Result<(), ProtocolError> {
        if self.rounds_applied.contains(&peer) {
            return Err(ProtocolError::DoubleAccumulation {
                client: self.client_id,
                peer,
            });
        }
        if c.counts.len() != self.counts.len() {
            return Err(ProtocolError::LengthMismatch {
                expected: self.counts.len(),
                got: c.counts.len(),
            });
        }
        for (g, x) in self.counts.iter_mut().zip(&c.counts) {
            *g += x;
        }
        self.rounds_applied.insert(peer);
        Ok(())
    }
}

pub fn ppmpr_accumulate(
    mut g: GlobalFrequencyVector,
    c: &FrequencyVector,
    peer: usize,
) -> Result<GlobalFrequencyVector, ProtocolError> {
    g.accumulate(c, peer)?;
    Ok(g)
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Seeds all PSI randomness; `None` draws from the OS.
    pub seed: Option<u64>,
    /// Extra latency added to every pairwise run (benchmarks only).
    pub per_pair_delay: Option<Duration>,
}

#[derive(Debug, Clone)]
pub struct PpmprOutput {
    pub vectors: Vec<GlobalFrequencyVector>,
    pub rounds: usize,
    pub elapsed: Duration,
}

type PairResult = Result<(FrequencyVector, FrequencyVector), ProtocolError>;

fn pair_rng(seed: Option<u64>, round: usize, pair: Pair) -> ChaCha20Rng {
    match seed {
        Some(s) => {
            let mut base = ChaCha20Rng::seed_from_u64(s);
            base.set_stream(session_id(pair) ^ ((round as u64) << 48));
            ChaCha20Rng::from_seed({
                let mut k = [0u8; 32];
                base.fill_bytes(&mut k);
                k
            })
        }
        None => ChaCha20Rng::from_rng(rand::rngs::OsRng).expect("OS entropy"),
    }
}

/// Runs the pairwise protocol for every pair of the schedule, round by
/// round, with the pairs inside a round executing concurrently. Client `k`
/// of `clients` is index `k + 1` in the schedule.
pub fn run_ppmpr(
    clients: &[LocalDataset],
    schedule: &Schedule,
    transport: &dyn ChannelFactory,
    opts: &RunOptions,
) -> Result<PpmprOutput, PpmprError> {
    if schedule.n != clients.len() {
        return Err(PpmprError::ScheduleSize {
            schedule: schedule.n,
            clients: clients.len(),
        });
    }
    let report = validate_schedule(schedule);
    if !(report.coverage_ok() && report.disjoint_ok()) {
        return Err(PpmprError::InvalidSchedule);
    }
    let start = Instant::now();
    let mut vectors: Vec<GlobalFrequencyVector> = clients.iter().map(ppmpr_init).collect();
    for (r, round) in schedule.rounds.iter().enumerate() {
        let results: Vec<(Pair, PairResult)> = thread::scope(|scope| {
            let handles: Vec<_> = round
                .pairs
                .iter()
                .map(|&pair| {
                    let (lo, hi) = (pair.lo() - 1, pair.hi() - 1);
                    let (p1, p2) = (&clients[lo], &clients[hi]);
                    scope.spawn(move || {
                        if let Some(d) = opts.per_pair_delay {
                            thread::sleep(d);
                        }
                        let link = transport.connect(lo, hi).map_err(|source| ProtocolError::Transport {
                            stage: Stage::Connect,
                            source,
                        })?;
                        let mut rng = pair_rng(opts.seed, r, pair);
                        run_2pc(p1, p2, link, session_id(pair), &mut rng)
                    })
                })
                .collect();
            round
                .pairs
                .iter()
                .copied()
                .zip(handles.into_iter().map(|h| h.join().expect("pair thread panicked")))
                .collect()
        });
        for (pair, res) in results {
            let err = |source| RunError {
                round: r,
                lo: pair.lo(),
                hi: pair.hi(),
                source,
            };
            let (c1, c2) = res.map_err(err)?;
            let (lo, hi) = (pair.lo() - 1, pair.hi() - 1);
            vectors[lo].accumulate(&c1, hi).map_err(err)?;
            vectors[hi].accumulate(&c2, lo).map_err(err)?;
        }
    }
    Ok(PpmprOutput {
        vectors,
        rounds: schedule.rounds.len(),
        elapsed: start.elapsed(),
    })
}

/// Plaintext reference: multiplicity of every record across all shards.
pub fn plaintext_global_counts(clients: &[LocalDataset]) -> Vec<Vec<u64>> {
    let mut total: HashMap<Digest, u64> = HashMap::new();
    for ds in clients {
        for r in ds.records() {
            *total.entry(r.sample.digest()).or_default() += r.local_freq;
        }
    }
    clients
        .iter()
        .map(|ds| ds.records().iter().map(|r| total[&r.sample.digest()]).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordOut {
    pub digest: Digest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    pub global_freq: u64,
}

/// Per-client result document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientResult {
    pub client_id: usize,
    pub records: Vec<RecordOut>,
    pub elapsed_ms: f64,
    pub rounds: usize,
}

impl ClientResult {
    pub fn new(
        ds: &LocalDataset,
        g: &GlobalFrequencyVector,
        elapsed: Duration,
        rounds: usize,
        include_text: bool,
    ) -> Self {
        let records = ds
            .records()
            .iter()
            .zip(&g.counts)
            .map(|(r, &global_freq)| RecordOut {
                digest: r.sample.digest(),
                text: include_text.then(|| r.sample.text().to_string()),
                global_freq,
            })
            .collect();
        ClientResult {
            client_id: ds.client_id,
            records,
            elapsed_ms: elapsed.as_secs_f64() * 1e3,
            rounds,
        }
    }
}

/// Runs one client of a multi-process deployment over TCP.
///
/// `index` is this client's 1-based schedule index and `peers[k]` the listen
/// address of client `k + 1`. Each node walks its own pairs in schedule
/// order. For a pair, the higher index connects to the lower index's
/// listener and opens with `PSI_MSG1`, whose session id identifies the pair;
/// connections that arrive early are parked until their turn.
pub fn run_tcp_node(
    ds: &LocalDataset,
    index: usize,
    peers: &[SocketAddr],
    listener: TcpListener,
    schedule: &Schedule,
    opts: &RunOptions,
    connect_timeout: Duration,
) -> Result<(GlobalFrequencyVector, Duration), PpmprError> {
    if schedule.n != peers.len() {
        return Err(PpmprError::ScheduleSize {
            schedule: schedule.n,
            clients: peers.len(),
        });
    }
    let start = Instant::now();
    let mut g = ppmpr_init(ds);
    let mut parked: BTreeMap<u64, Endpoint> = BTreeMap::new();
    for (r, pair) in schedule.peers_of(index) {
        let sid = session_id(pair);
        let err = |source| RunError {
            round: r,
            lo: pair.lo(),
            hi: pair.hi(),
            source,
        };
        let tr = |source: TransportError| {
            err(ProtocolError::Transport {
                stage: Stage::Connect,
                source,
            })
        };
        if let Some(d) = opts.per_pair_delay {
            thread::sleep(d);
        }
        let mut rng = pair_rng(opts.seed, r, pair);
        let (c, peer) = if pair.lo() == index {
            let mut ep = match parked.remove(&sid) {
                Some(ep) => ep,
                None => loop {
                    let (stream, _) = listener.accept().map_err(|e| tr(e.into()))?;
                    let mut ep = Endpoint::tcp(stream, index - 1, None).map_err(|e| tr(e.into()))?;
                    let first = ep.recv().map_err(tr)?;
                    let got = first.session_id;
                    ep.unread(first);
                    if got == sid {
                        break ep;
                    }
                    parked.insert(got, ep);
                },
            };
            let psi = PsiSession::new(Role::Sender, &mut rng);
            (run_2pc_sender(ds, &mut ep, sid, psi).map_err(err)?, pair.hi())
        } else {
            let addr = peers[pair.lo() - 1];
            let deadline = Instant::now() + connect_timeout;
            let stream = loop {
                match TcpStream::connect(addr) {
                    Ok(s) => break s,
                    Err(e) if Instant::now() >= deadline => return Err(tr(e.into()).into()),
                    Err(_) => thread::sleep(Duration::from_millis(20)),
                }
            };
            let mut ep = Endpoint::tcp(stream, index - 1, None).map_err(|e| tr(e.into()))?;
            let psi = PsiSession::new(Role::Receiver, &mut rng);
            (run_2pc_receiver(ds, &mut ep, sid, psi).map_err(err)?, pair.lo())
        };
        g.accumulate(&c, peer - 1).map_err(err)?;
    }
    Ok((g, start.elapsed()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_local_dataset, digest};
    use crate::scheduler::build_schedule;
    use crate::transport::{channel_pair, LocalTransport, TransportKind};

    fn ds(id: usize, raw: &[&str]) -> LocalDataset {
        build_local_dataset(id, raw)
    }

    fn count_of(d: &LocalDataset, v: &[u64], text: &str) -> u64 {
        v[d.position(&digest(text)).unwrap()]
    }

    fn pair(p1: &LocalDataset, p2: &LocalDataset) -> (FrequencyVector, FrequencyVector) {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        run_2pc(p1, p2, channel_pair(false), 7, &mut rng).unwrap()
    }

    #[test]
    fn two_party_example() {
        let x1 = ds(0, &["a", "b", "b"]);
        let x2 = ds(1, &["b", "b", "b", "c"]);
        let (c1, c2) = pair(&x1, &x2);
        assert_eq!(count_of(&x1, &c1.counts, "a"), 0);
        assert_eq!(count_of(&x1, &c1.counts, "b"), 3);
        assert_eq!(count_of(&x2, &c2.counts, "b"), 2);
        assert_eq!(count_of(&x2, &c2.counts, "c"), 0);
    }

    #[test]
    fn disjoint_and_identical() {
        let (c1, c2) = pair(&ds(0, &["a", "b"]), &ds(1, &["c"]));
        assert_eq!(c1.counts, vec![0, 0]);
        assert_eq!(c2.counts, vec![0]);
        let x = ds(0, &["x"; 5]);
        let (c1, c2) = pair(&x, &ds(1, &["x"; 5]));
        assert_eq!((c1.counts, c2.counts), (vec![5], vec![5]));
    }

    #[test]
    fn accumulate_and_guard() {
        let d = ds(0, &["a", "a", "b"]);
        let g = ppmpr_init(&d);
        assert_eq!(g.counts, d.local_freqs());
        assert!(g.rounds_applied.is_empty());
        let g = GlobalFrequencyVector {
            client_id: 0,
            counts: vec![2, 1],
            rounds_applied: BTreeSet::new(),
        };
        let c = FrequencyVector {
            client_id: 0,
            counts: vec![0, 3],
        };
        let g = ppmpr_accumulate(g, &c, 4).unwrap();
        assert_eq!(g.counts, vec![2, 4]);
        assert!(matches!(
            ppmpr_accumulate(g.clone(), &c, 4),
            Err(ProtocolError::DoubleAccumulation { .. })
        ));
        let short = FrequencyVector {
            client_id: 0,
            counts: vec![1],
        };
        assert!(matches!(
            ppmpr_accumulate(g, &short, 5),
            Err(ProtocolError::LengthMismatch { .. })
        ));
        assert!(ppmpr_init(&ds(3, &[])).counts.is_empty());
    }

    #[test]
    fn three_client_toy() {
        let clients = vec![ds(0, &["a", "a", "b"]), ds(1, &["a", "c"]), ds(2, &["b", "b", "c"])];
        let out = run_ppmpr(
            &clients,
            &build_schedule(3).unwrap(),
            &LocalTransport::new(TransportKind::Mem),
            &RunOptions {
                seed: Some(3),
                ..Default::default()
            },
        )
        .unwrap();
        let v = &out.vectors;
        assert_eq!(count_of(&clients[0], &v[0].counts, "a"), 3);
        assert_eq!(count_of(&clients[0], &v[0].counts, "b"), 3);
        assert_eq!(count_of(&clients[1], &v[1].counts, "a"), 3);
        assert_eq!(count_of(&clients[1], &v[1].counts, "c"), 2);
        assert_eq!(count_of(&clients[2], &v[2].counts, "b"), 3);
        assert_eq!(count_of(&clients[2], &v[2].counts, "c"), 2);
        for g in v {
            assert_eq!(g.rounds_applied.len(), 2);
        }
    }

    #[test]
    fn freq_set_outside_intersection_is_rejected() {
        let inter: BTreeSet<Digest> = [digest("a")].into();
        let fs = FreqSet {
            entries: vec![(digest("zzz"), 1)],
        };
        assert!(matches!(fs.check_within(&inter), Err(ProtocolError::Violation(_))));
    }

    #[test]
    fn malicious_freq_set_aborts_run() {
        // a receiver that reports a count for an item outside the intersection
        let x1 = ds(0, &["a", "b"]);
        let x2 = ds(1, &["b", "q"]);
        let (mut e1, mut e2) = channel_pair(false);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let s1 = PsiSession::new(Role::Sender, &mut rng);
        let mut s2 = PsiSession::new(Role::Receiver, &mut rng);
        let err = thread::scope(|scope| {
            let h = scope.spawn(|| run_2pc_sender(&x1, &mut e1, 1, s1));
            let m1 = s2.receiver_msg1(&x2.digests()).unwrap();
            e2.send(Envelope::new(MsgType::PsiMsg1, 1, m1.to_payload())).unwrap();
            let m2 = PsiMsg2::from_payload(&e2.recv().unwrap().payload).unwrap();
            let inter = s2.receiver_finish(&m2).unwrap().intersection;
            e2.send(Envelope::new(MsgType::Intersection, 1, intersection_payload(&inter)))
                .unwrap();
            let bogus = FreqSet {
                entries: vec![(digest("q"), 9)],
            };
            e2.send(Envelope::new(MsgType::FreqSet, 1, bogus.to_payload())).unwrap();
            assert_eq!(e2.recv().unwrap().msg_type, MsgType::Abort);
            h.join().unwrap()
        });
        assert!(matches!(err, Err(ProtocolError::Violation(_))));
    }

    #[test]
    fn payload_codecs_reject_garbage() {
        assert!(parse_intersection(&[0, 0, 0, 1, 0]).is_err());
        let fs = FreqSet {
            entries: vec![(Digest([2; 32]), 1), (Digest([1; 32]), 2)],
        };
        assert!(FreqSet::from_payload(&fs.to_payload()).is_err());
        let ok = FreqSet {
            entries: vec![(Digest([1; 32]), 1), (Digest([2; 32]), u64::MAX)],
        };
        assert_eq!(FreqSet::from_payload(&ok.to_payload()).unwrap(), ok);
    }

    #[test]
    fn schedule_size_mismatch() {
        let clients = vec![ds(0, &["a"]), ds(1, &["a"])];
        let s = build_schedule(3).unwrap();
        let r = run_ppmpr(
            &clients,
            &s,
            &LocalTransport::new(TransportKind::Mem),
            &RunOptions::default(),
        );
        assert!(matches!(r, Err(PpmprError::ScheduleSize { .. })));
    }
}
