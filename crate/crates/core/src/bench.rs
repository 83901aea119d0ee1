//! Timing harness for the pairwise protocol and the round orchestration.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_local_dataset, LocalDataset};
use crate::protocol::{run_2pc_with, run_ppmpr, PpmprError, ProtocolError, RunOptions};
use crate::psi::{PsiSession, Role};
use crate::scheduler::{build_schedule, ScheduleError};
use crate::transport::{channel_pair, LocalTransport, TransportKind};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Ppmpr(#[from] PpmprError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("repetitions must be at least 1")]
    NoRepetitions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Setup,
    Execution,
    Total,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub phase: Phase,
    pub dataset_size: usize,
    pub duplication: f64,
    pub n_clients: usize,
    pub repetitions: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Two shards of `size` unique items each, of which `round(duplication *
/// size)` are shared. Local frequencies cycle through 1..=3.
pub fn pair_workload(size: usize, duplication: f64) -> (LocalDataset, LocalDataset) {
    let shared = (duplication * size as f64).round() as usize;
    let shard = |client: usize| {
        let mut raw = Vec::with_capacity(size * 2);
        for i in 0..size {
            let text = if i < shared {
                format!("shared-{i}")
            } else {
                format!("c{client}-{i}")
            };
            for _ in 0..=(i % 3) {
                raw.push(text.clone());
            }
        }
        build_local_dataset(client, &raw)
    };
    (shard(0), shard(1))
}

/// Setup (keys, hashing items into the group, channel) and execution
/// (messages plus frequency materialization) of one pairwise run.
pub fn time_2pc(p1: &LocalDataset, p2: &LocalDataset, seed: u64) -> Result<(Duration, Duration), BenchError> {
    let t0 = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut s1 = PsiSession::new(Role::Sender, &mut rng);
    let mut s2 = PsiSession::new(Role::Receiver, &mut rng);
    s1.precompute(&p1.digests());
    s2.precompute(&p2.digests());
    let link = channel_pair(false);
    let setup = t0.elapsed();
    let t1 = Instant::now();
    run_2pc_with(p1, p2, link, 1, (s1, s2))?;
    Ok((setup, t1.elapsed()))
}

/// `[setup, execution, total]` records for the pairwise protocol.
pub fn bench_2pc(size: usize, duplication: f64, repetitions: usize, seed: u64) -> Result<[BenchRecord; 3], BenchError> {
    if repetitions == 0 {
        return Err(BenchError::NoRepetitions);
    }
    let (p1, p2) = pair_workload(size, duplication);
    let (mut setup, mut exec, mut total) = (Vec::new(), Vec::new(), Vec::new());
    for r in 0..repetitions {
        let (s, e) = time_2pc(&p1, &p2, seed.wrapping_add(r as u64))?;
        setup.push(ms(s));
        exec.push(ms(e));
        total.push(ms(s + e));
    }
    let rec = |phase, xs: &[f64]| {
        let (mean_ms, std_ms) = mean_std(xs);
        BenchRecord {
            phase,
            dataset_size: size,
            duplication,
            n_clients: 2,
            repetitions,
            mean_ms,
            std_ms,
        }
    };
    Ok([
        rec(Phase::Setup, &setup),
        rec(Phase::Execution, &exec),
        rec(Phase::Total, &total),
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OrchestrationTiming {
    pub n_clients: usize,
    pub parallel_rounds: usize,
    pub sequential_rounds: usize,
    pub parallel: Duration,
    pub sequential: Duration,
}

impl OrchestrationTiming {
    pub fn speedup(&self) -> f64 {
        self.sequential.as_secs_f64() / self.parallel.as_secs_f64()
    }
}

/// Full multi-party run with every pairwise run padded by `delay`, once
/// with the parallel schedule and once one pair at a time.
pub fn bench_orchestration(
    n: usize,
    items_per_client: usize,
    delay: Duration,
    seed: u64,
) -> Result<OrchestrationTiming, BenchError> {
    let clients: Vec<LocalDataset> = (0..n)
        .map(|c| {
            let raw: Vec<String> = (0..items_per_client)
                .map(|i| format!("item-{}", (i * (c + 1)) % (2 * items_per_client)))
                .collect();
            build_local_dataset(c, &raw)
        })
        .collect();
    let schedule = build_schedule(n)?;
    let sequential = schedule.sequential();
    let transport = LocalTransport::new(TransportKind::Mem);
    let opts = RunOptions {
        seed: Some(seed),
        per_pair_delay: Some(delay),
    };
    let par = run_ppmpr(&clients, &schedule, &transport, &opts)?;
    let seq = run_ppmpr(&clients, &sequential, &transport, &opts)?;
    debug_assert_eq!(par.vectors, seq.vectors);
    Ok(OrchestrationTiming {
        n_clients: n,
        parallel_rounds: par.rounds,
        sequential_rounds: seq.rounds,
        parallel: par.elapsed,
        sequential: seq.elapsed,
    })
}

/// Multi-party run timed end to end for `n` clients with `size` items each.
pub fn bench_clients(
    n: usize,
    size: usize,
    duplication: f64,
    repetitions: usize,
    seed: u64,
) -> Result<BenchRecord, BenchError> {
    if repetitions == 0 {
        return Err(BenchError::NoRepetitions);
    }
    let shared = (duplication * size as f64).round() as usize;
    let clients: Vec<LocalDataset> = (0..n)
        .map(|c| {
            let raw: Vec<String> = (0..size)
                .map(|i| {
                    if i < shared {
                        format!("shared-{i}")
                    } else {
                        format!("c{c}-{i}")
                    }
                })
                .collect();
            build_local_dataset(c, &raw)
        })
        .collect();
    let schedule = build_schedule(n)?;
    let transport = LocalTransport::new(TransportKind::Mem);
    let mut times = Vec::with_capacity(repetitions);
    for r in 0..repetitions {
        let opts = RunOptions {
            seed: Some(seed.wrapping_add(r as u64)),
            per_pair_delay: None,
        };
        times.push(ms(run_ppmpr(&clients, &schedule, &transport, &opts)?.elapsed));
    }
    let (mean_ms, std_ms) = mean_std(&times);
    Ok(BenchRecord {
        phase: Phase::Total,
        dataset_size: size,
        duplication,
        n_clients: n,
        repetitions,
        mean_ms,
        std_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn workload_shape() {
        let (a, b) = pair_workload(30, 0.5);
        assert_eq!(a.len(), 30);
        assert_eq!(b.len(), 30);
        let shared = a.digests().iter().filter(|d| b.position(d).is_some()).count();
        assert_eq!(shared, 15);
        assert_eq!(a.raw_len(), 60);
    }

    #[test]
    fn stats() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - 1.2909944487358056).abs() < 1e-12);
        assert_eq!(mean_std(&[5.0]), (5.0, 0.0));
    }

    #[test]
    fn records_are_consistent() {
        let recs = bench_2pc(16, 0.3, 2, 1).unwrap();
        assert_eq!(recs[0].phase, Phase::Setup);
        assert!(recs[2].mean_ms >= recs[1].mean_ms);
        assert!(matches!(bench_2pc(4, 0.1, 0, 1), Err(BenchError::NoRepetitions)));
    }
}
