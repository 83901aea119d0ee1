//! Parallel orchestration of pairwise protocol runs.
//!
//! Clients are grouped into contiguous blocks that double in size at every
//! level. At level `l` each even block is paired with its odd neighbour and
//! the cross pairs are laid out as a pairing matrix: row `k` matches
//! `a[i]` with `rotl(b, k)[i]`. Rows with the same `k` from sibling block
//! pairs touch disjoint clients, so they are merged into a single round.
//! For `n` that is not a power of two, indices are padded with virtual
//! clients and any pair touching one is dropped.
//!
//! Client indices inside a [`Schedule`] are 1-based.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScheduleError {
    #[error("need at least 2 clients, got {0}")]
    TooFewClients(usize),
    #[error("pairing blocks differ in size ({0} vs {1})")]
    SizeMismatch(usize, usize),
    #[error("pairing blocks overlap at client {0}")]
    Overlap(usize),
    #[error("invalid pair ({0}, {1})")]
    InvalidPair(usize, usize),
}

/// Unordered client pair, stored with `i < j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "[usize; 2]", try_from = "[usize; 2]")]
pub struct Pair {
    i: usize,
    j: usize,
}

impl Pair {
    pub fn new(a: usize, b: usize) -> Result<Self, ScheduleError> {
        match a.cmp(&b) {
            std::cmp::Ordering::Less => Ok(Pair { i: a, j: b }),
            std::cmp::Ordering::Greater => Ok(Pair { i: b, j: a }),
            std::cmp::Ordering::Equal => Err(ScheduleError::InvalidPair(a, b)),
        }
    }

    pub fn lo(&self) -> usize {
        self.i
    }

    pub fn hi(&self) -> usize {
        self.j
    }

    pub fn touches(&self, c: usize) -> bool {
        self.i == c || self.j == c
    }
}

impl From<Pair> for [usize; 2] {
    fn from(p: Pair) -> Self {
        [p.i, p.j]
    }
}

impl TryFrom<[usize; 2]> for Pair {
    type Error = ScheduleError;
    fn try_from(v: [usize; 2]) -> Result<Self, Self::Error> {
        Pair::new(v[0], v[1])
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Round {
    pub pairs: Vec<Pair>,
}

impl Round {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn clients(&self) -> impl Iterator<Item = usize> + '_ {
        self.pairs.iter().flat_map(|p| [p.i, p.j])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSpan {
    pub level: usize,
    /// Half-open range of round indices belonging to this level.
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub n: usize,
    pub rounds: Vec<Round>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub levels: Vec<LevelSpan>,
}

impl Schedule {
    pub fn total_pairs(&self) -> usize {
        self.rounds.iter().map(Round::len).sum()
    }

    /// `2^ceil(log2 n) - 1`.
    pub fn round_bound(n: usize) -> usize {
        n.max(1).next_power_of_two() - 1
    }

    /// One pair per round in the order pairs appear here.
    pub fn sequential(&self) -> Schedule {
        Schedule {
            n: self.n,
            rounds: self
                .rounds
                .iter()
                .flat_map(|r| r.pairs.iter().map(|&p| Round { pairs: vec![p] }))
                .collect(),
            levels: Vec::new(),
        }
    }

    /// The rounds a given client takes part in, with its peer, in order.
    pub fn peers_of(&self, client: usize) -> Vec<(usize, Pair)> {
        self.rounds
            .iter()
            .enumerate()
            .flat_map(|(r, round)| {
                round
                    .pairs
                    .iter()
                    .filter(move |p| p.touches(client))
                    .map(move |&p| (r, p))
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Export<'a> {
            n: usize,
            rounds: &'a [Round],
        }
        serde_json::to_string_pretty(&Export {
            n: self.n,
            rounds: &self.rounds,
        })
        .expect("schedule serializes")
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}

/// Cyclic left rotation: `out[i] = v[(i + k) % v.len()]`.
pub fn rotl<T: Clone>(v: &[T], k: usize) -> Vec<T> {
    if v.is_empty() {
        return Vec::new();
    }
    let k = k % v.len();
    v[k..].iter().chain(&v[..k]).cloned().collect()
}

/// All `|b|` rows of the pairing matrix between blocks `a` and `b`.
pub fn pairing_matrix(a: &[usize], b: &[usize]) -> Result<Vec<Round>, ScheduleError> {
    if a.len() != b.len() {
        return Err(ScheduleError::SizeMismatch(a.len(), b.len()));
    }
    let a_set: BTreeSet<usize> = a.iter().copied().collect();
    if let Some(&c) = b.iter().find(|c| a_set.contains(c)) {
        return Err(ScheduleError::Overlap(c));
    }
    (0..b.len())
        .map(|k| {
            let rotated = rotl(b, k);
            let pairs = a
                .iter()
                .zip(&rotated)
                .map(|(&x, &y)| Pair::new(x, y))
                .collect::<Result<_, _>>()?;
            Ok(Round { pairs })
        })
        .collect()
}

pub fn build_schedule(n: usize) -> Result<Schedule, ScheduleError> {
    if n < 2 {
        return Err(ScheduleError::TooFewClients(n));
    }
    let padded = n.next_power_of_two();
    let levels = padded.trailing_zeros() as usize;
    let mut rounds = Vec::new();
    let mut spans = Vec::with_capacity(levels);
    for level in 1..=levels {
        let block = 1usize << (level - 1);
        let mut rows: Vec<Round> = vec![Round::default(); block];
        for start in (0..padded).step_by(2 * block) {
            let a: Vec<usize> = (start + 1..=start + block).collect();
            let b: Vec<usize> = (start + block + 1..=start + 2 * block).collect();
            if a[0] > n || b[0] > n {
                continue;
            }
            for (k, row) in pairing_matrix(&a, &b)?.into_iter().enumerate() {
                rows[k].pairs.extend(row.pairs.into_iter().filter(|p| p.j <= n));
            }
        }
        let begin = rounds.len();
        rounds.extend(rows.into_iter().filter(|r| !r.is_empty()));
        spans.push(LevelSpan {
            level,
            start: begin,
            end: rounds.len(),
        });
    }
    Ok(Schedule {
        n,
        rounds,
        levels: spans,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub n: usize,
    pub rounds: usize,
    pub pairs: usize,
    pub missing_pairs: Vec<Pair>,
    pub duplicate_pairs: Vec<Pair>,
    pub out_of_range: Vec<Pair>,
    /// (round index, client appearing more than once in it)
    pub overlapping: Vec<(usize, usize)>,
    pub round_bound: usize,
}

impl ValidationReport {
    pub fn coverage_ok(&self) -> bool {
        self.missing_pairs.is_empty() && self.duplicate_pairs.is_empty() && self.out_of_range.is_empty()
    }

    pub fn disjoint_ok(&self) -> bool {
        self.overlapping.is_empty()
    }

    pub fn bound_ok(&self) -> bool {
        self.rounds <= self.round_bound
    }

    pub fn passed(&self) -> bool {
        self.coverage_ok() && self.disjoint_ok() && self.bound_ok()
    }
}

pub fn validate_schedule(s: &Schedule) -> ValidationReport {
    let mut seen: BTreeMap<Pair, usize> = BTreeMap::new();
    let mut report = ValidationReport {
        n: s.n,
        rounds: s.rounds.len(),
        pairs: s.total_pairs(),
        round_bound: Schedule::round_bound(s.n),
        ..Default::default()
    };
    for (r, round) in s.rounds.iter().enumerate() {
        let mut in_round = BTreeSet::new();
        let mut flagged = BTreeSet::new();
        for p in &round.pairs {
            if p.i == 0 || p.j > s.n {
                report.out_of_range.push(*p);
            }
            *seen.entry(*p).or_default() += 1;
            for c in [p.i, p.j] {
                if !in_round.insert(c) && flagged.insert(c) {
                    report.overlapping.push((r, c));
                }
            }
        }
    }
    for i in 1..=s.n {
        for j in i + 1..=s.n {
            let p = Pair { i, j };
            match seen.get(&p) {
                None => report.missing_pairs.push(p),
                Some(&c) if c > 1 => report.duplicate_pairs.push(p),
                _ => {}
            }
        }
    }
    report
}
