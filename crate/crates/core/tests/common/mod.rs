#![allow(dead_code)]

use std::collections::{BTreeSet, HashSet};

use fedreweight::corpus::{
    build_local_dataset, inject_duplicates, Digest, DuplicationMode, DuplicationSpec, LocalDataset,
};
use fedreweight::protocol::{plaintext_global_counts, run_2pc, run_ppmpr, FreqSet, RunOptions};
use fedreweight::psi::{hash_to_group, GroupParams};
use fedreweight::scheduler::build_schedule;
use fedreweight::transport::{ChannelFactory, Direction, LocalTransport, MsgType, TranscriptLog, TransportKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub const DUP_RATES: [f64; 4] = [0.0, 0.1, 0.3, 0.5];

/// One client's raw shard: at most 64 samples after injection, drawn from a
/// pool small enough that clients overlap.
pub fn random_shard(rng: &mut ChaCha20Rng, pool: usize, rate: f64) -> Vec<String> {
    let cap = (64.0 * (1.0 - rate)).floor() as usize;
    let base: Vec<String> = (0..rng.gen_range(0..=cap))
        .map(|_| format!("sample {}", rng.gen_range(0..pool)))
        .collect();
    if base.is_empty() {
        return base;
    }
    let spec = DuplicationSpec {
        rate,
        seed: rng.gen(),
        mode: if rng.gen() {
            DuplicationMode::Concentrated
        } else {
            DuplicationMode::UniformResample
        },
    };
    let out = inject_duplicates(&base, &spec).unwrap();
    assert!(out.len() <= 64);
    out
}

pub fn random_instance(seed: u64) -> (Vec<LocalDataset>, f64) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=8);
    let rate = DUP_RATES[rng.gen_range(0..DUP_RATES.len())];
    let pool = rng.gen_range(8..=96);
    let clients = (0..n)
        .map(|k| build_local_dataset(k, &random_shard(&mut rng, pool, rate)))
        .collect();
    (clients, rate)
}

/// Runs the full multi-party protocol and compares against plaintext counts.
pub fn oracle_mismatch(clients: &[LocalDataset], kind: TransportKind, seed: u64) -> Option<String> {
    let schedule = build_schedule(clients.len()).unwrap();
    let opts = RunOptions {
        seed: Some(seed),
        per_pair_delay: None,
    };
    let out = match run_ppmpr(clients, &schedule, &LocalTransport::new(kind), &opts) {
        Ok(o) => o,
        Err(e) => return Some(format!("run failed: {e}")),
    };
    let want = plaintext_global_counts(clients);
    for (k, (g, w)) in out.vectors.iter().zip(&want).enumerate() {
        if &g.counts != w {
            return Some(format!("client {k}: got {:?}, want {:?}", g.counts, w));
        }
        if g.rounds_applied.len() != clients.len() - 1 {
            return Some(format!("client {k}: {} peers applied", g.rounds_applied.len()));
        }
    }
    None
}

fn windows_hit(bytes: &[u8], needles: &HashSet<[u8; 32]>) -> Option<usize> {
    if needles.is_empty() {
        return None;
    }
    bytes
        .windows(32)
        .position(|w| needles.contains(<&[u8; 32]>::try_from(w).unwrap()))
}

/// Raw digests plus their unblinded group encodings.
fn forbidden(items: impl IntoIterator<Item = Digest>) -> HashSet<[u8; 32]> {
    let g = GroupParams::RISTRETTO255;
    items
        .into_iter()
        .flat_map(|d| [d.0, g.encode(&hash_to_group(&d))])
        .collect()
}

fn freq_sets(log: &TranscriptLog) -> Vec<FreqSet> {
    log.entries()
        .into_iter()
        .filter(|e| e.envelope.msg_type == MsgType::FreqSet)
        .map(|e| FreqSet::from_payload(&e.envelope.payload).unwrap())
        .collect()
}

/// One captured pairwise run (client 0 sends, client 1 receives) checked
/// against what each side may learn.
pub fn leakage_violation(p1: &LocalDataset, p2: &LocalDataset, kind: TransportKind, seed: u64) -> Option<String> {
    let transport = LocalTransport::with_capture(kind, 2);
    let link = transport.connect(0, 1).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    if let Err(e) = run_2pc(p1, p2, link, 1, &mut rng) {
        return Some(format!("run failed: {e}"));
    }
    let (log1, log2) = (transport.transcript(0).unwrap(), transport.transcript(1).unwrap());
    let d1: BTreeSet<Digest> = p1.digests().into_iter().collect();
    let d2: BTreeSet<Digest> = p2.digests().into_iter().collect();
    let inter: BTreeSet<Digest> = d1.intersection(&d2).copied().collect();

    // sender, PSI phase: nothing of the receiver's set in the clear
    if let Some(at) = windows_hit(
        &log1.received_bytes_of(MsgType::PsiMsg1),
        &forbidden(d2.iter().copied()),
    ) {
        return Some(format!("receiver item visible to sender in PSI_MSG1 at byte {at}"));
    }
    // sender, whole run: only intersection items may appear
    if let Some(at) = windows_hit(&log1.received_bytes(), &forbidden(d2.difference(&inter).copied())) {
        return Some(format!("non-intersection receiver item visible to sender at byte {at}"));
    }
    if let Some(at) = windows_hit(&log2.received_bytes(), &forbidden(d1.difference(&inter).copied())) {
        return Some(format!("non-intersection sender item visible to receiver at byte {at}"));
    }
    for (who, log) in [("sender", log1), ("receiver", log2)] {
        for fs in freq_sets(log) {
            if let Some((d, _)) = fs.entries.iter().find(|(d, _)| !inter.contains(d)) {
                return Some(format!("{who} received a FreqSet entry outside the intersection: {d}"));
            }
        }
        if log.count(Direction::Received) == 0 {
            return Some(format!("{who} transcript is empty"));
        }
    }
    None
}

/// Random pair for leakage runs: up to 48 raw samples each, drawn from a
/// shared pool so the sets usually overlap.
pub fn random_pair(seed: u64) -> (LocalDataset, LocalDataset) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let pool = rng.gen_range(4..=64);
    let mut shard = || -> Vec<String> {
        (0..rng.gen_range(0..=48))
            .map(|_| format!("s{}", rng.gen_range(0..pool)))
            .collect::<Vec<_>>()
    };
    let (a, b) = (shard(), shard());
    (build_local_dataset(0, &a), build_local_dataset(1, &b))
}
