//! Federated training of a character bigram language model with per-sample
//! loss weights.
//!
//! The model predicts the next character from the previous one (or from a
//! begin-of-sequence context for the first character) through a softmax over
//! a row of logits. A sample's loss is its mean per-token negative
//! log-likelihood; a batch's loss is the weight-normalized mean of sample
//! losses. Local training is plain mini-batch SGD with global-norm gradient
//! clipping; rounds are aggregated by sample-count-weighted averaging.

use std::collections::BTreeSet;
use std::thread;

use rand::distributions::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::LocalDataset;
use crate::reweight::WeightVector;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("character {0:?} is not in the vocabulary")]
    OutOfVocab(char),
    #[error("sample is empty")]
    EmptySample,
    #[error("empty test set")]
    EmptyTestSet,
    #[error("{texts} samples but {weights} weights")]
    Misaligned { texts: usize, weights: usize },
    #[error("weights must be positive and finite (index {0})")]
    BadWeight(usize),
    #[error("no client updates to aggregate")]
    NoUpdates,
    #[error("client update has a different vocabulary")]
    VocabMismatch,
    #[error("update from client {0} reports zero samples")]
    ZeroSamples(usize),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{shards} shards but {weights} weight vectors")]
    ShardCount { shards: usize, weights: usize },
}

/// Character vocabulary, sorted and deduplicated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    chars: Vec<char>,
}

impl Vocab {
    pub fn new<I: IntoIterator<Item = char>>(chars: I) -> Self {
        let set: BTreeSet<char> = chars.into_iter().collect();
        Vocab {
            chars: set.into_iter().collect(),
        }
    }

    pub fn from_texts<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Self {
        Self::new(texts.into_iter().flat_map(str::chars))
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id(&self, c: char) -> Result<usize, TrainError> {
        self.chars.binary_search(&c).map_err(|_| TrainError::OutOfVocab(c))
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>, TrainError> {
        text.chars().map(|c| self.id(c)).collect()
    }
}

/// Logits with `V + 1` rows (row 0 is the begin-of-sequence context, row
/// `1 + c` the context "previous character was `c`") and `V` columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyLmParams {
    pub vocab: Vocab,
    pub logits: Vec<f64>,
}

impl TinyLmParams {
    pub fn zeros(vocab: Vocab) -> Self {
        let v = vocab.len();
        TinyLmParams {
            vocab,
            logits: vec![0.0; (v + 1) * v],
        }
    }

    pub fn v(&self) -> usize {
        self.vocab.len()
    }

    pub fn rows(&self) -> usize {
        self.v() + 1
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let v = self.v();
        &self.logits[r * v..(r + 1) * v]
    }

    /// Softmax of every row, same layout as `logits`.
    pub fn probabilities(&self) -> Vec<f64> {
        let v = self.v();
        let mut out = vec![0.0; self.logits.len()];
        for r in 0..self.rows() {
            softmax_into(self.row(r), &mut out[r * v..(r + 1) * v]);
        }
        out
    }

    fn log_probabilities(&self) -> Vec<f64> {
        let v = self.v();
        let mut out = vec![0.0; self.logits.len()];
        for r in 0..self.rows() {
            let row = self.row(r);
            let lse = log_sum_exp(row);
            for (o, x) in out[r * v..(r + 1) * v].iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("params serialize")
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, x) in out.iter_mut().zip(row) {
        *o = (x - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// (context row, target column) pairs for a token sequence.
fn transitions(tokens: &[usize]) -> impl Iterator<Item = (usize, usize)> + '_ {
    let ctx = std::iter::once(0).chain(tokens.iter().map(|t| t + 1));
    ctx.zip(tokens.iter().copied())
}

fn nll_sum(logp: &[f64], v: usize, tokens: &[usize]) -> f64 {
    transitions(tokens).map(|(r, c)| -logp[r * v + c]).sum()
}

/// Mean per-token negative log-likelihood of `text`.
pub fn sample_loss(params: &TinyLmParams, text: &str) -> Result<f64, TrainError> {
    let tokens = params.vocab.encode(text)?;
    if tokens.is_empty() {
        return Err(TrainError::EmptySample);
    }
    let logp = params.log_probabilities();
    Ok(nll_sum(&logp, params.v(), &tokens) / tokens.len() as f64)
}

/// Token-weighted perplexity over a test set; empty samples contribute no
/// tokens.
pub fn perplexity<S: AsRef<str>>(params: &TinyLmParams, test: &[S]) -> Result<f64, TrainError> {
    let logp = params.log_probabilities();
    let (mut nll, mut n) = (0.0, 0usize);
    for t in test {
        let tokens = params.vocab.encode(t.as_ref())?;
        nll += nll_sum(&logp, params.v(), &tokens);
        n += tokens.len();
    }
    if n == 0 {
        return Err(TrainError::EmptyTestSet);
    }
    Ok((nll / n as f64).exp())
}

/// Weighted batch loss and its gradient with respect to the logits.
pub fn weighted_loss_and_grad(params: &TinyLmParams, batch: &[&[usize]], weights: &[f64]) -> (f64, Vec<f64>) {
    let v = params.v();
    let probs = params.probabilities();
    let total_w: f64 = weights.iter().sum();
    let mut grad = vec![0.0; params.logits.len()];
    // per-row sum of token coefficients; the softmax part is added once per row
    let mut row_mass = vec![0.0; params.rows()];
    let mut loss = 0.0;
    for (tokens, &w) in batch.iter().zip(weights) {
        let coef = w / total_w / tokens.len() as f64;
        for (r, c) in transitions(tokens) {
            loss -= coef * probs[r * v + c].ln();
            row_mass[r] += coef;
            grad[r * v + c] -= coef;
        }
    }
    for (r, mass) in row_mass.iter().enumerate() {
        if *mass != 0.0 {
            for c in 0..v {
                grad[r * v + c] += mass * probs[r * v + c];
            }
        }
    }
    (loss, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub local_epochs: usize,
    pub rounds: usize,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5.0,
            local_epochs: 20,
            rounds: 3,
            batch_size: 32,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |f: &str| Err(TrainError::Config(format!("{f} must be positive")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate");
        }
        if self.local_epochs == 0 {
            return bad("local_epochs");
        }
        if self.rounds == 0 {
            return bad("rounds");
        }
        if self.batch_size == 0 {
            return bad("batch_size");
        }
        if !(self.grad_clip > 0.0 && self.grad_clip.is_finite()) {
            return bad("grad_clip");
        }
        Ok(())
    }
}

/// What one client trains on: texts with their loss weights, plus the raw
/// sample count used for aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainShard {
    pub client_id: usize,
    pub texts: Vec<String>,
    pub weights: Vec<f64>,
    pub n_samples: usize,
}

impl TrainShard {
    /// Unique records with frequency-derived weights.
    pub fn weighted(ds: &LocalDataset, w: &WeightVector) -> Result<Self, TrainError> {
        if w.weights.len() != ds.len() {
            return Err(TrainError::Misaligned {
                texts: ds.len(),
                weights: w.weights.len(),
            });
        }
        Self::new(
            ds.client_id,
            ds.records().iter().map(|r| r.sample.text().to_string()).collect(),
            w.weights.clone(),
            ds.raw_len() as usize,
        )
    }

    /// Every raw sample, duplicates included, with unit weight.
    pub fn raw(client_id: usize, texts: Vec<String>) -> Self {
        let n = texts.len();
        TrainShard {
            client_id,
            weights: vec![1.0; n],
            texts,
            n_samples: n,
        }
    }

    pub fn new(client_id: usize, texts: Vec<String>, weights: Vec<f64>, n_samples: usize) -> Result<Self, TrainError> {
        if texts.len() != weights.len() {
            return Err(TrainError::Misaligned {
                texts: texts.len(),
                weights: weights.len(),
            });
        }
        if let Some(i) = weights.iter().position(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(TrainError::BadWeight(i));
        }
        Ok(TrainShard {
            client_id,
            texts,
            weights,
            n_samples,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params_after: TinyLmParams,
    pub n_samples: usize,
}

fn client_rng(seed: u64, client_id: usize, round: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ client_id as u64);
    rng.set_stream(round as u64);
    rng
}

fn clip(grad: &mut [f64], max_norm: f64) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
}

/// Local SGD for `cfg.local_epochs` epochs over a shard, in training round
/// `round` (which selects the shuffling stream).
pub fn train_shard(
    params: &TinyLmParams,
    shard: &TrainShard,
    cfg: &TrainConfig,
    round: usize,
) -> Result<ClientUpdate, TrainError> {
    cfg.validate()?;
    let encoded = shard
        .texts
        .iter()
        .map(|t| params.vocab.encode(t))
        .collect::<Result<Vec<_>, _>>()?;
    // empty samples have no tokens to predict
    let order: Vec<usize> = (0..encoded.len()).filter(|&i| !encoded[i].is_empty()).collect();
    let mut params = params.clone();
    let mut rng = client_rng(cfg.seed, shard.client_id, round);
    let mut order = order;
    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&[usize]> = chunk.iter().map(|&i| encoded[i].as_slice()).collect();
            let w: Vec<f64> = chunk.iter().map(|&i| shard.weights[i]).collect();
            let (_, mut grad) = weighted_loss_and_grad(&params, &batch, &w);
            clip(&mut grad, cfg.grad_clip);
            for (p, g) in params.logits.iter_mut().zip(&grad) {
                *p -= cfg.learning_rate * g;
            }
        }
    }
    Ok(ClientUpdate {
        client_id: shard.client_id,
        params_after: params,
        n_samples: shard.n_samples,
    })
}

/// Local training on a deduplicated shard with its weight vector.
pub fn local_train(
    params: &TinyLmParams,
    shard: &LocalDataset,
    weights: &WeightVector,
    cfg: &TrainConfig,
) -> Result<ClientUpdate, TrainError> {
    train_shard(params, &TrainShard::weighted(shard, weights)?, cfg, 0)
}

/// Sample-count-weighted average of client parameters.
pub fn fedavg(updates: &[ClientUpdate]) -> Result<TinyLmParams, TrainError> {
    let first = updates.first().ok_or(TrainError::NoUpdates)?;
    if let Some(u) = updates
        .iter()
        .find(|u| u.params_after.vocab != first.params_after.vocab)
    {
        let _ = u;
        return Err(TrainError::VocabMismatch);
    }
    if let Some(u) = updates.iter().find(|u| u.n_samples == 0) {
        return Err(TrainError::ZeroSamples(u.client_id));
    }
    let total: f64 = updates.iter().map(|u| u.n_samples as f64).sum();
    let mut logits = vec![0.0; first.params_after.logits.len()];
    for u in updates {
        let share = u.n_samples as f64 / total;
        for (acc, x) in logits.iter_mut().zip(&u.params_after.logits) {
            *acc += share * x;
        }
    }
    Ok(TinyLmParams {
        vocab: first.params_after.vocab.clone(),
        logits,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub round: usize,
    pub test_perplexity: f64,
    pub mean_train_loss: f64,
}

/// Weighted training loss of `params` over a whole shard.
pub fn shard_loss(params: &TinyLmParams, shard: &TrainShard) -> Result<f64, TrainError> {
    let encoded = shard
        .texts
        .iter()
        .map(|t| params.vocab.encode(t))
        .collect::<Result<Vec<_>, _>>()?;
    let (batch, w): (Vec<&[usize]>, Vec<f64>) = encoded
        .iter()
        .zip(&shard.weights)
        .filter(|(t, _)| !t.is_empty())
        .map(|(t, w)| (t.as_slice(), *w))
        .unzip();
    if batch.is_empty() {
        return Err(TrainError::EmptySample);
    }
    Ok(weighted_loss_and_grad(params, &batch, &w).0)
}

/// Broadcast, train every client concurrently, aggregate; repeated for
/// `cfg.rounds` rounds. The trace records held-out perplexity after each
/// round.
pub fn run_federated<S: AsRef<str> + Sync>(
    init: &TinyLmParams,
    shards: &[TrainShard],
    cfg: &TrainConfig,
    test: &[S],
) -> Result<(TinyLmParams, Vec<TraceRow>), TrainError> {
    cfg.validate()?;
    let mut global = init.clone();
    let mut trace = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let updates: Vec<ClientUpdate> = thread::scope(|scope| {
            let handles: Vec<_> = shards
                .iter()
                .map(|s| {
                    let g = &global;
                    scope.spawn(move || train_shard(g, s, cfg, round))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("client thread panicked"))
                .collect::<Result<_, _>>()
        })?;
        global = fedavg(&updates)?;
        let total: f64 = shards.iter().map(|s| s.n_samples as f64).sum();
        let mut mean_train_loss = 0.0;
        for s in shards {
            mean_train_loss += s.n_samples as f64 / total * shard_loss(&global, s)?;
        }
        trace.push(TraceRow {
            round: round + 1,
            test_perplexity: perplexity(&global, test)?,
            mean_train_loss,
        });
    }
    Ok((global, trace))
}

/// Random character corpus in which every sample follows one of several
/// "styles", each its own sparse bigram chain, so individual samples differ
/// in a way that over-weighting a subset of them visibly distorts.
#[derive(Debug, Clone)]
pub struct SyntheticSource {
    pub vocab: Vocab,
    styles: Vec<Vec<rand::distributions::WeightedIndex<f64>>>,
    min_len: usize,
    max_len: usize,
}

impl SyntheticSource {
    pub fn new(vocab_size: usize, n_styles: usize, seed: u64) -> Self {
        assert!((1..=26).contains(&vocab_size), "vocab_size must be in 1..=26");
        let vocab = Vocab::new((0..vocab_size as u8).map(|i| (b'a' + i) as char));
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        // sparse rows: Gamma(0.2) weights concentrate mass on a few successors
        let gamma = rand_distr::Gamma::new(0.2, 1.0).expect("valid gamma");
        let styles = (0..n_styles.max(1))
            .map(|_| {
                (0..=vocab_size)
                    .map(|_| {
                        let w: Vec<f64> = (0..vocab_size).map(|_| gamma.sample(&mut rng) + 1e-6).collect();
                        rand::distributions::WeightedIndex::new(w).expect("positive weights")
                    })
                    .collect()
            })
            .collect();
        SyntheticSource {
            vocab,
            styles,
            min_len: 12,
            max_len: 24,
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> String {
        let style = &self.styles[rng.gen_range(0..self.styles.len())];
        let len = rng.gen_range(self.min_len..=self.max_len);
        let mut ctx = 0;
        let mut out = String::with_capacity(len);
        for _ in 0..len {
            let c = style[ctx].sample(rng);
            out.push(self.vocab.chars()[c]);
            ctx = c + 1;
        }
        out
    }

    pub fn generate(&self, n: usize, seed: u64) -> Vec<String> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..n).map(|_| self.sample(&mut rng)).collect()
    }
}
