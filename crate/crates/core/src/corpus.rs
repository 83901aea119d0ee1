//! Sample ingestion: canonical text, digests, local deduplication, synthetic
//! duplication and client partitioning.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("invalid UTF-8 at byte {position}")]
    InvalidUtf8 { position: usize },
    #[error("cannot inject duplicates into an empty corpus")]
    EmptyCorpus,
    #[error("duplication rate {0} outside [0, 1)")]
    InvalidRate(f64),
    #[error("partition needs at least 2 clients, got {0}")]
    TooFewClients(usize),
    #[error("invalid quantity-skew proportions: {0}")]
    InvalidProportions(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

/// A 256-bit SHA-256 digest of canonical sample text.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const LEN: usize = 32;

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        Some(Digest(bytes.try_into().ok()?))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({}..)", &self.to_hex()[..12])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).ok_or_else(|| serde::de::Error::custom("expected 64 hex chars"))
    }
}

/// NFC-normalize, unify line endings to LF and trim surrounding whitespace.
pub fn canonicalize(text: &str) -> String {
    let unified = text.replace("\r\n", "\n").replace('\r', "\n");
    unified.trim().nfc().collect()
}

/// Byte-level entry point: rejects invalid UTF-8 with the offending offset.
pub fn canonicalize_bytes(bytes: &[u8]) -> Result<String, CorpusError> {
    let text = std::str::from_utf8(bytes).map_err(|e| CorpusError::InvalidUtf8 {
        position: e.valid_up_to(),
    })?;
    Ok(canonicalize(text))
}

pub fn digest(canonical: &str) -> Digest {
    Digest(Sha256::digest(canonical.as_bytes()).into())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    text: String,
    digest: Digest,
}

impl Sample {
    pub fn new(raw: &str) -> Self {
        let text = canonicalize(raw);
        let digest = digest(&text);
        Sample { text, digest }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn digest(&self) -> Digest {
        self.digest
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UniqueRecord {
    pub sample: Sample,
    pub local_freq: u64,
}

/// A client's locally deduplicated shard, ordered ascending by digest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalDataset {
    pub client_id: usize,
    records: Vec<UniqueRecord>,
}

impl LocalDataset {
    pub fn records(&self) -> &[UniqueRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn digests(&self) -> Vec<Digest> {
        self.records.iter().map(|r| r.sample.digest).collect()
    }

    pub fn local_freqs(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.local_freq).collect()
    }

    /// Number of raw samples this shard was built from.
    pub fn raw_len(&self) -> u64 {
        self.records.iter().map(|r| r.local_freq).sum()
    }

    /// Position of `d` in canonical order.
    pub fn position(&self, d: &Digest) -> Option<usize> {
        self.records.binary_search_by(|r| r.sample.digest.cmp(d)).ok()
    }
}

pub fn build_local_dataset<S: AsRef<str>>(client_id: usize, raw_samples: &[S]) -> LocalDataset {
    let mut by_digest: BTreeMap<Digest, UniqueRecord> = BTreeMap::new();
    for raw in raw_samples {
        let sample = Sample::new(raw.as_ref());
        by_digest
            .entry(sample.digest)
            .and_modify(|r| r.local_freq += 1)
            .or_insert(UniqueRecord { sample, local_freq: 1 });
    }
    LocalDataset {
        client_id,
        records: by_digest.into_values().collect(),
    }
}

pub fn build_local_dataset_bytes(client_id: usize, raw_samples: &[Vec<u8>]) -> Result<LocalDataset, CorpusError> {
    let texts = raw_samples
        .iter()
        .map(|b| canonicalize_bytes(b))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(build_local_dataset(client_id, &texts))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DuplicationMode {
    UniformResample,
    /// Copies are drawn only from a designated 10% subset of the corpus.
    Concentrated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DuplicationSpec {
    pub rate: f64,
    pub seed: u64,
    pub mode: DuplicationMode,
}

/// Number of copies to add so that they make up `rate` of the final corpus.
pub fn duplicate_count(n: usize, rate: f64) -> usize {
    (rate * n as f64 / (1.0 - rate)).round() as usize
}

/// Appends duplicate copies and shuffles them into the corpus.
///
/// With `rate == 0` the input is returned unchanged (no shuffle).
pub fn inject_duplicates<T: Clone>(corpus: &[T], spec: &DuplicationSpec) -> Result<Vec<T>, CorpusError> {
    if !(0.0..1.0).contains(&spec.rate) {
        return Err(CorpusError::InvalidRate(spec.rate));
    }
    if corpus.is_empty() && spec.rate > 0.0 {
        return Err(CorpusError::EmptyCorpus);
    }
    let extra = duplicate_count(corpus.len(), spec.rate);
    if extra == 0 {
        return Ok(corpus.to_vec());
    }
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let pool: Vec<usize> = match spec.mode {
        DuplicationMode::UniformResample => (0..corpus.len()).collect(),
        DuplicationMode::Concentrated => {
            let k = (corpus.len() / 10).max(1);
            let mut idx: Vec<usize> = (0..corpus.len()).collect();
            idx.shuffle(&mut rng);
            idx.truncate(k);
            idx
        }
    };
    let mut out = corpus.to_vec();
    out.reserve(extra);
    for _ in 0..extra {
        let src = pool[rng.gen_range(0..pool.len())];
        out.push(corpus[src].clone());
    }
    out.shuffle(&mut rng);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "proportions")]
pub enum PartitionStrategy {
    Uniform,
    QuantitySkew(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub n_clients: usize,
    pub strategy: PartitionStrategy,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.n_clients < 2 {
            return Err(CorpusError::TooFewClients(self.n_clients));
        }
        if let PartitionStrategy::QuantitySkew(p) = &self.strategy {
            if p.len() != self.n_clients {
                return Err(CorpusError::InvalidProportions(format!(
                    "{} proportions for {} clients",
                    p.len(),
                    self.n_clients
                )));
            }
            if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(CorpusError::InvalidProportions(
                    "proportions must be finite and non-negative".into(),
                ));
            }
            let sum: f64 = p.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(CorpusError::InvalidProportions(format!(
                    "proportions sum to {sum}, expected 1"
                )));
            }
        }
        Ok(())
    }

    /// Shard sizes for a corpus of `n` samples.
    pub fn shard_sizes(&self, n: usize) -> Result<Vec<usize>, CorpusError> {
        self.validate()?;
        let k = self.n_clients;
        Ok(match &self.strategy {
            PartitionStrategy::Uniform => (0..k).map(|i| n / k + usize::from(i < n % k)).collect(),
            PartitionStrategy::QuantitySkew(p) => {
                let mut sizes: Vec<usize> = p.iter().map(|x| (x * n as f64).round() as usize).collect();
                let largest = p
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, x)| if *x > p[best] { i } else { best });
                let assigned: usize = sizes.iter().sum();
                if assigned <= n {
                    sizes[largest] += n - assigned;
                } else {
                    // rounding overshoot: take the excess back, largest shards first
                    let mut excess = assigned - n;
                    let mut order: Vec<usize> = (0..k).collect();
                    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]));
                    for i in order {
                        let take = excess.min(sizes[i]);
                        sizes[i] -= take;
                        excess -= take;
                        if excess == 0 {
                            break;
                        }
                    }
                }
                sizes
            }
        })
    }
}

/// Shuffles sample indices with the partition seed and slices them into shards.
pub fn partition<T: Clone>(corpus: &[T], spec: &PartitionSpec) -> Result<Vec<Vec<T>>, CorpusError> {
    let sizes = spec.shard_sizes(corpus.len())?;
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    idx.shuffle(&mut ChaCha20Rng::seed_from_u64(spec.seed));
    let mut shards = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for size in sizes {
        shards.push(idx[start..start + size].iter().map(|&i| corpus[i].clone()).collect());
        start += size;
    }
    Ok(shards)
}

/// Reads a corpus: `.csv` files as `id,text` (header row expected), anything
/// else as one sample per line. Blank lines are skipped.
pub fn read_corpus(path: &Path) -> Result<Vec<String>, CorpusError> {
    let ctx = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        let mut reader = csv::Reader::from_path(path).map_err(|source| CorpusError::Csv {
            path: path.display().to_string(),
            source,
        })?;
        let mut out = Vec::new();
        for row in reader.records() {
            let row = row.map_err(|source| CorpusError::Csv {
                path: path.display().to_string(),
                source,
            })?;
            if let Some(text) = row.get(1) {
                if !text.trim().is_empty() {
                    out.push(text.to_string());
                }
            }
        }
        return Ok(out);
    }
    let file = fs::File::open(path).map_err(ctx)?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).split(b'\n').enumerate() {
        let mut line = line.map_err(ctx)?;
        if line.last() == Some(&b'\r') {
            line.pop();
        }
        let text = String::from_utf8(line).map_err(|e| {
            ctx(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!(
                    "line {}: invalid UTF-8 at byte {}",
                    lineno + 1,
                    e.utf8_error().valid_up_to()
                ),
            ))
        })?;
        if !text.trim().is_empty() {
            out.push(text);
        }
    }
    Ok(out)
}

/// One-line-per-sample shard files: embedded newlines cannot round-trip, so
/// they are escaped to spaces.
pub fn write_lines(path: &Path, samples: &[String]) -> Result<(), CorpusError> {
    let mut body = String::new();
    for s in samples {
        body.push_str(&s.replace(['\n', '\r'], " "));
        body.push('\n');
    }
    fs::write(path, body).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardManifest {
    pub client_id: usize,
    pub n_raw: usize,
    pub n_unique: usize,
    pub seed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonicalize_examples() {
        assert_eq!(canonicalize("abc"), "abc");
        assert_eq!(canonicalize("  abc\r\n"), "abc");
        assert_eq!(canonicalize("a\r\nb\rc"), "a\nb\nc");
        let nfd = "e\u{0301}";
        assert_eq!(canonicalize(nfd), "\u{00e9}");
        assert_eq!(canonicalize(nfd).chars().count(), 1);
    }

    #[test]
    fn invalid_utf8_reports_position() {
        let err = canonicalize_bytes(b"ab\xffcd").unwrap_err();
        assert!(matches!(err, CorpusError::InvalidUtf8 { position: 2 }));
    }

    #[test]
    fn empty_digest_is_sha256_constant() {
        assert_eq!(
            digest("").to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn local_dataset_counts() {
        let ds = build_local_dataset(0, &["a", "a", "b"]);
        assert_eq!(ds.len(), 2);
        let a = ds.position(&digest("a")).unwrap();
        let b = ds.position(&digest("b")).unwrap();
        assert_eq!(ds.records()[a].local_freq, 2);
        assert_eq!(ds.records()[b].local_freq, 1);
        assert_eq!(ds.raw_len(), 3);
        assert!(build_local_dataset::<&str>(1, &[]).is_empty());
    }

    #[test]
    fn equivalent_texts_merge() {
        let ds = build_local_dataset(0, &["x\r\n", " x", "x"]);
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.records()[0].local_freq, 3);
    }

    #[test]
    fn injection_arithmetic() {
        let corpus: Vec<u32> = (0..700).collect();
        let spec = DuplicationSpec {
            rate: 0.3,
            seed: 9,
            mode: DuplicationMode::UniformResample,
        };
        let out = inject_duplicates(&corpus, &spec).unwrap();
        assert_eq!(out.len(), 1000);
        assert_eq!(out, inject_duplicates(&corpus, &spec).unwrap());
        let zero = DuplicationSpec { rate: 0.0, ..spec };
        assert_eq!(inject_duplicates(&corpus, &zero).unwrap(), corpus);
    }

    #[test]
    fn concentrated_copies_come_from_tenth() {
        let corpus: Vec<u32> = (0..500).collect();
        let spec = DuplicationSpec {
            rate: 0.5,
            seed: 3,
            mode: DuplicationMode::Concentrated,
        };
        let out = inject_duplicates(&corpus, &spec).unwrap();
        let mut counts = vec![0usize; 500];
        for x in &out {
            counts[*x as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c >= 1));
        assert!(counts.iter().filter(|&&c| c > 1).count() <= 50);
    }

    #[test]
    fn injection_errors() {
        let spec = DuplicationSpec {
            rate: 0.2,
            seed: 0,
            mode: DuplicationMode::UniformResample,
        };
        assert!(matches!(
            inject_duplicates::<u8>(&[], &spec),
            Err(CorpusError::EmptyCorpus)
        ));
        let bad = DuplicationSpec { rate: 1.0, ..spec };
        assert!(matches!(
            inject_duplicates(&[1u8], &bad),
            Err(CorpusError::InvalidRate(_))
        ));
    }

    #[test]
    fn partition_sizes() {
        let uni = |n| PartitionSpec {
            n_clients: n,
            strategy: PartitionStrategy::Uniform,
            seed: 1,
        };
        assert_eq!(uni(10).shard_sizes(1000).unwrap(), vec![100; 10]);
        let mut s = uni(3).shard_sizes(7).unwrap();
        s.sort();
        assert_eq!(s, vec![2, 2, 3]);
        let skew = PartitionSpec {
            n_clients: 5,
            strategy: PartitionStrategy::QuantitySkew(vec![0.4, 0.2, 0.2, 0.1, 0.1]),
            seed: 1,
        };
        assert_eq!(skew.shard_sizes(1000).unwrap(), vec![400, 200, 200, 100, 100]);
        assert_eq!(skew.shard_sizes(1003).unwrap().iter().sum::<usize>(), 1003);
        assert_eq!(skew.shard_sizes(1003).unwrap(), vec![401, 201, 201, 100, 100]);
        assert_eq!(skew.shard_sizes(999).unwrap(), vec![399, 200, 200, 100, 100]);
    }

    #[test]
    fn partition_rejects_bad_specs() {
        let one = PartitionSpec {
            n_clients: 1,
            strategy: PartitionStrategy::Uniform,
            seed: 0,
        };
        assert!(partition(&[1, 2], &one).is_err());
        let short = PartitionSpec {
            n_clients: 3,
            strategy: PartitionStrategy::QuantitySkew(vec![0.5, 0.5]),
            seed: 0,
        };
        assert!(short.validate().is_err());
        let off = PartitionSpec {
            n_clients: 2,
            strategy: PartitionStrategy::QuantitySkew(vec![0.5, 0.4]),
            seed: 0,
        };
        assert!(off.validate().is_err());
    }
}
