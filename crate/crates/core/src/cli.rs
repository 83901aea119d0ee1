//! Command-line front end: corpus preparation, schedules, protocol runs,
//! benchmarks and training.
//!
//! Every subcommand reads an optional JSON config (`--config`), applies its
//! own flags on top, validates the merged [`RunConfig`] and only then touches
//! the file system. Outputs are assembled in memory and written at the end,
//! so a failing run leaves nothing behind.

use std::collections::BTreeMap;
use std::fs;
use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::bench::{self, BenchError, BenchRecord};
use crate::corpus::{
    build_local_dataset, inject_duplicates, partition, read_corpus, CorpusError, Digest, DuplicationMode,
    DuplicationSpec, LocalDataset, PartitionSpec, PartitionStrategy, ShardManifest,
};
use crate::protocol::{
    ppmpr_init, run_ppmpr, run_tcp_node, ClientResult, GlobalFrequencyVector, PpmprError, RunOptions,
};
use crate::reweight::{weight_map, weights_from_frequencies, ReweightError};
use crate::scheduler::{build_schedule, validate_schedule, ScheduleError};
use crate::trainer::{run_federated, SyntheticSource, TinyLmParams, TrainConfig, TrainError, TrainShard, Vocab};
use crate::transport::{LocalTransport, TransportKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Transport {
    Mem,
    Tcp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Uniform,
    Concentrated,
}

impl From<ModeArg> for DuplicationMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Uniform => DuplicationMode::UniformResample,
            ModeArg::Concentrated => DuplicationMode::Concentrated,
        }
    }
}

/// Merged settings for one invocation. Field names double as the JSON
/// config keys; missing keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub n_clients: usize,
    pub duplication_rate: f64,
    pub duplication_mode: DuplicationMode,
    /// Quantity-skew proportions, one per client; uniform split if absent.
    pub skew: Option<Vec<f64>>,
    pub epsilon: f64,
    pub transport: Transport,
    /// Listen addresses of all clients, for multi-process TCP runs.
    pub peers: Vec<String>,
    pub connect_timeout_ms: u64,
    pub learning_rate: f64,
    pub local_epochs: usize,
    pub rounds: usize,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub bench_sizes_log2: Vec<u32>,
    pub bench_duplications: Vec<f64>,
    pub bench_dup_size_log2: u32,
    pub bench_clients: Vec<usize>,
    pub bench_client_size_log2: u32,
    pub repetitions: usize,
    pub delay_ms: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            n_clients: 4,
            duplication_rate: 0.0,
            duplication_mode: DuplicationMode::UniformResample,
            skew: None,
            epsilon: crate::reweight::DEFAULT_EPSILON,
            transport: Transport::Mem,
            peers: Vec::new(),
            connect_timeout_ms: 30_000,
            learning_rate: t.learning_rate,
            local_epochs: t.local_epochs,
            rounds: t.rounds,
            batch_size: t.batch_size,
            grad_clip: t.grad_clip,
            bench_sizes_log2: (10..=16).collect(),
            bench_duplications: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            bench_dup_size_log2: 15,
            bench_clients: vec![4, 8, 16],
            bench_client_size_log2: 8,
            repetitions: 4,
            delay_ms: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid config field `{field}`: {reason}")]
pub struct ConfigError {
    pub field: &'static str,
    pub reason: String,
}

fn bad(field: &'static str, reason: impl Into<String>) -> Result<(), ConfigError> {
    Err(ConfigError {
        field,
        reason: reason.into(),
    })
}

/// Largest accepted benchmark exponent.
pub const MAX_BENCH_LOG2: u32 = 20;

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError {
            field: "config",
            reason: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.out_dir.as_os_str().is_empty() {
            bad("out_dir", "must not be empty")?;
        }
        if self.n_clients == 0 {
            bad("n_clients", "must be at least 1")?;
        }
        if !(0.0..1.0).contains(&self.duplication_rate) {
            bad(
                "duplication_rate",
                format!("must be in [0, 1), got {}", self.duplication_rate),
            )?;
        }
        if let Some(skew) = &self.skew {
            let spec = PartitionSpec {
                n_clients: self.n_clients,
                strategy: PartitionStrategy::QuantitySkew(skew.clone()),
                seed: self.seed,
            };
            if let Err(e) = spec.validate() {
                bad("skew", e.to_string())?;
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            bad("epsilon", format!("must be positive and finite, got {}", self.epsilon))?;
        }
        for p in &self.peers {
            if p.parse::<SocketAddr>().is_err() {
                bad("peers", format!("`{p}` is not a socket address"))?;
            }
        }
        if self.connect_timeout_ms == 0 {
            bad("connect_timeout_ms", "must be positive")?;
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bad("learning_rate", "must be positive and finite")?;
        }
        if self.local_epochs == 0 {
            bad("local_epochs", "must be at least 1")?;
        }
        if self.rounds == 0 {
            bad("rounds", "must be at least 1")?;
        }
        if self.batch_size == 0 {
            bad("batch_size", "must be at least 1")?;
        }
        if !(self.grad_clip > 0.0 && self.grad_clip.is_finite()) {
            bad("grad_clip", "must be positive and finite")?;
        }
        if self.bench_sizes_log2.iter().any(|&e| e > MAX_BENCH_LOG2) {
            bad(
                "bench_sizes_log2",
                format!("exponents must be at most {MAX_BENCH_LOG2}"),
            )?;
        }
        if self.bench_dup_size_log2 > MAX_BENCH_LOG2 {
            bad("bench_dup_size_log2", format!("must be at most {MAX_BENCH_LOG2}"))?;
        }
        if self.bench_client_size_log2 > MAX_BENCH_LOG2 {
            bad("bench_client_size_log2", format!("must be at most {MAX_BENCH_LOG2}"))?;
        }
        if self.bench_duplications.iter().any(|d| !(0.0..=1.0).contains(d)) {
            bad("bench_duplications", "values must be in [0, 1]")?;
        }
        if self.bench_clients.iter().any(|&n| n < 2) {
            bad("bench_clients", "client counts must be at least 2")?;
        }
        if self.repetitions == 0 {
            bad("repetitions", "must be at least 1")?;
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            local_epochs: self.local_epochs,
            rounds: self.rounds,
            batch_size: self.batch_size,
            grad_clip: self.grad_clip,
            seed: self.seed,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Protocol(#[from] PpmprError),
    #[error(transparent)]
    Reweight(#[from] ReweightError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error("{0}")]
    Input(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "fedreweight",
    version,
    about = "Private sample-frequency estimation and loss reweighting"
)]
pub struct Cli {
    /// Master seed for every random choice.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory receiving all outputs.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Inject duplicates into a corpus and split it into client shards.
    Inject(InjectArgs),
    /// Print and store the pairing schedule for n clients.
    Schedule(ScheduleArgs),
    /// Compute global frequencies and weights for all shards.
    Run(RunArgs),
    /// Run a single client of a multi-process TCP deployment.
    Node(NodeArgs),
    /// Time the pairwise protocol and the round orchestration.
    Bench(BenchArgs),
    /// Federated training, weighted or raw.
    Train(TrainArgs),
}

#[derive(Args, Debug)]
#[command(allow_negative_numbers = true)]
pub struct InjectArgs {
    /// Corpus file (one sample per line, or `id,text` CSV).
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    pub input: Option<PathBuf>,
    /// Generate this many synthetic samples instead of reading a file.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Synthetic vocabulary size.
    #[arg(long, default_value_t = 16)]
    pub vocab_size: usize,
    /// Synthetic style count.
    #[arg(long, default_value_t = 4)]
    pub styles: usize,
    /// Synthetic held-out samples written to `test.txt`.
    #[arg(long, default_value_t = 0)]
    pub test_samples: usize,
    #[arg(long)]
    pub rate: Option<f64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub n_clients: Option<usize>,
    /// Comma-separated shard proportions.
    #[arg(long, value_delimiter = ',')]
    pub skew: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
pub struct ScheduleArgs {
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Args, Debug)]
#[command(allow_negative_numbers = true)]
pub struct RunArgs {
    /// Shard directory; defaults to `<out-dir>/shards`.
    #[arg(long)]
    pub shards: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub transport: Option<Transport>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Include sample text in the frequency files.
    #[arg(long)]
    pub include_text: bool,
}

#[derive(Args, Debug)]
#[command(allow_negative_numbers = true)]
pub struct NodeArgs {
    /// This client's id (0-based position in `--peers`).
    #[arg(long)]
    pub client: usize,
    #[arg(long)]
    pub shard: PathBuf,
    /// Listen addresses of all clients, in client order.
    #[arg(long, value_delimiter = ',')]
    pub peers: Option<Vec<String>>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub connect_timeout_ms: Option<u64>,
    #[arg(long)]
    pub include_text: bool,
}

#[derive(Args, Debug)]
#[command(allow_negative_numbers = true)]
pub struct BenchArgs {
    /// Set-size exponents for the size sweep.
    #[arg(long, value_delimiter = ',')]
    pub sizes_log2: Option<Vec<u32>>,
    #[arg(long, value_delimiter = ',')]
    pub duplications: Option<Vec<f64>>,
    #[arg(long)]
    pub dup_size_log2: Option<u32>,
    #[arg(long, value_delimiter = ',')]
    pub clients: Option<Vec<usize>>,
    #[arg(long)]
    pub client_size_log2: Option<u32>,
    #[arg(long)]
    pub repetitions: Option<usize>,
    /// Per-pair delay for the orchestration comparison.
    #[arg(long)]
    pub delay_ms: Option<u64>,
}

#[derive(Args, Debug)]
#[command(allow_negative_numbers = true)]
pub struct TrainArgs {
    #[arg(long)]
    pub shards: Option<PathBuf>,
    /// Weight directory written by `run`; defaults to `<out-dir>/weights`.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Train on every raw sample with unit weight.
    #[arg(long)]
    pub raw: bool,
    /// Held-out corpus for perplexity.
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub local_epochs: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

/// Loads the config file (if any) and applies the flags of `cli`.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, ConfigError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| ConfigError {
                field: "config",
                reason: format!("{}: {e}", path.display()),
            })?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, cli.seed);
    set(&mut cfg.out_dir, cli.out_dir.clone());
    match &cli.command {
        Command::Inject(a) => {
            set(&mut cfg.duplication_rate, a.rate);
            set(&mut cfg.duplication_mode, a.mode.map(Into::into));
            set(&mut cfg.n_clients, a.n_clients);
            if a.skew.is_some() {
                cfg.skew = a.skew.clone();
            }
        }
        Command::Schedule(a) => set(&mut cfg.n_clients, a.n),
        Command::Run(a) => {
            set(&mut cfg.transport, a.transport);
            set(&mut cfg.epsilon, a.epsilon);
        }
        Command::Node(a) => {
            set(&mut cfg.peers, a.peers.clone());
            set(&mut cfg.epsilon, a.epsilon);
            set(&mut cfg.connect_timeout_ms, a.connect_timeout_ms);
            cfg.transport = Transport::Tcp;
        }
        Command::Bench(a) => {
            set(&mut cfg.bench_sizes_log2, a.sizes_log2.clone());
            set(&mut cfg.bench_duplications, a.duplications.clone());
            set(&mut cfg.bench_dup_size_log2, a.dup_size_log2);
            set(&mut cfg.bench_clients, a.clients.clone());
            set(&mut cfg.bench_client_size_log2, a.client_size_log2);
            set(&mut cfg.repetitions, a.repetitions);
            set(&mut cfg.delay_ms, a.delay_ms);
        }
        Command::Train(a) => {
            set(&mut cfg.learning_rate, a.learning_rate);
            set(&mut cfg.local_epochs, a.local_epochs);
            set(&mut cfg.rounds, a.rounds);
            set(&mut cfg.batch_size, a.batch_size);
            set(&mut cfg.grad_clip, a.grad_clip);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Files to write, assembled before anything touches the disk.
#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    fn add(&mut self, path: PathBuf, body: impl Into<Vec<u8>>) {
        self.files.push((path, body.into()));
    }

    fn add_json<T: Serialize>(&mut self, path: PathBuf, value: &T) {
        let mut body = serde_json::to_vec_pretty(value).expect("serializable output");
        body.push(b'\n');
        self.add(path, body);
    }

    pub fn paths(&self) -> impl Iterator<Item = &Path> {
        self.files.iter().map(|(p, _)| p.as_path())
    }

    fn write(self) -> Result<(), CliError> {
        for (path, body) in self.files {
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(io_err(dir))?;
            }
            fs::write(&path, body).map_err(io_err(&path))?;
        }
        Ok(())
    }
}

pub fn shard_file_name(client: usize) -> String {
    format!("client_{client}.txt")
}

fn lines_body(samples: &[String]) -> String {
    let mut body = String::new();
    for s in samples {
        body.push_str(&s.replace(['\n', '\r'], " "));
        body.push('\n');
    }
    body
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InjectManifest {
    pub source: String,
    pub n_input: usize,
    pub n_after_injection: usize,
    pub duplication: DuplicationSpec,
    pub partition: PartitionSpec,
    pub shards: Vec<ShardManifest>,
}

fn cmd_inject(cfg: &RunConfig, a: &InjectArgs) -> Result<Outputs, CliError> {
    let (source, corpus, test) = match (&a.input, a.synthetic) {
        (Some(path), _) => (path.display().to_string(), read_corpus(path)?, Vec::new()),
        (None, Some(n)) => {
            if !(1..=26).contains(&a.vocab_size) {
                return Err(ConfigError {
                    field: "vocab_size",
                    reason: "must be in 1..=26".into(),
                }
                .into());
            }
            let src = SyntheticSource::new(a.vocab_size, a.styles, cfg.seed);
            let test = src.generate(a.test_samples, cfg.seed ^ 0x7e57);
            (format!("synthetic:{n}"), src.generate(n, cfg.seed), test)
        }
        (None, None) => return Err(CliError::Input("one of --input or --synthetic is required".into())),
    };
    let dup = DuplicationSpec {
        rate: cfg.duplication_rate,
        seed: cfg.seed,
        mode: cfg.duplication_mode,
    };
    let injected = inject_duplicates(&corpus, &dup)?;
    let spec = PartitionSpec {
        n_clients: cfg.n_clients,
        strategy: match &cfg.skew {
            Some(p) => PartitionStrategy::QuantitySkew(p.clone()),
            None => PartitionStrategy::Uniform,
        },
        seed: cfg.seed,
    };
    let shards = partition(&injected, &spec)?;
    let dir = cfg.out_dir.join("shards");
    let mut out = Outputs::default();
    let mut manifests = Vec::with_capacity(shards.len());
    for (k, shard) in shards.iter().enumerate() {
        out.add(dir.join(shard_file_name(k)), lines_body(shard));
        manifests.push(ShardManifest {
            client_id: k,
            n_raw: shard.len(),
            n_unique: build_local_dataset(k, shard).len(),
            seed: cfg.seed,
        });
    }
    if !test.is_empty() {
        out.add(cfg.out_dir.join("test.txt"), lines_body(&test));
    }
    let manifest = InjectManifest {
        source,
        n_input: corpus.len(),
        n_after_injection: injected.len(),
        duplication: dup,
        partition: spec,
        shards: manifests,
    };
    out.add_json(dir.join("manifest.json"), &manifest);
    println!(
        "{} samples -> {} after injection, {} shards in {}",
        manifest.n_input,
        manifest.n_after_injection,
        shards.len(),
        dir.display()
    );
    Ok(out)
}

fn cmd_schedule(cfg: &RunConfig) -> Result<Outputs, CliError> {
    let schedule = build_schedule(cfg.n_clients)?;
    let report = validate_schedule(&schedule);
    for (r, round) in schedule.rounds.iter().enumerate() {
        let pairs: Vec<String> = round.pairs.iter().map(|p| format!("({},{})", p.lo(), p.hi())).collect();
        println!("round {:>3}: {}", r + 1, pairs.join(" "));
    }
    println!(
        "n={} rounds={} pairs={} {}",
        schedule.n,
        schedule.rounds.len(),
        schedule.total_pairs(),
        if report.passed() { "pass" } else { "FAIL" }
    );
    let mut out = Outputs::default();
    out.add(cfg.out_dir.join("schedule.json"), schedule.to_json() + "\n");
    out.add_json(cfg.out_dir.join("schedule_report.json"), &report);
    Ok(out)
}

/// Reads `client_0.txt`, `client_1.txt`, ... from `dir`; ids must be dense.
pub fn load_shards(dir: &Path) -> Result<Vec<Vec<String>>, CliError> {
    let mut found = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(k) = name.strip_prefix("client_").and_then(|s| s.strip_suffix(".txt")) {
            if let Ok(k) = k.parse::<usize>() {
                found.insert(k, entry.path());
            }
        }
    }
    if found.is_empty() {
        return Err(CliError::Input(format!(
            "{}: no client_<k>.txt shard files",
            dir.display()
        )));
    }
    let mut shards = Vec::with_capacity(found.len());
    for (expect, (k, path)) in found.into_iter().enumerate() {
        if k != expect {
            return Err(CliError::Input(format!(
                "{}: missing shard for client {expect}",
                dir.display()
            )));
        }
        shards.push(read_corpus(&path)?);
    }
    Ok(shards)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WeightFile {
    pub client_id: usize,
    pub epsilon: f64,
    pub weights: BTreeMap<Digest, f64>,
}

fn client_outputs(
    out: &mut Outputs,
    cfg: &RunConfig,
    ds: &LocalDataset,
    g: &GlobalFrequencyVector,
    elapsed: Duration,
    rounds: usize,
    include_text: bool,
) -> Result<(), CliError> {
    let k = ds.client_id;
    let result = ClientResult::new(ds, g, elapsed, rounds, include_text);
    out.add_json(cfg.out_dir.join("freq").join(format!("client_{k}.json")), &result);
    let w = weights_from_frequencies(g, cfg.epsilon)?;
    let file = WeightFile {
        client_id: k,
        epsilon: cfg.epsilon,
        weights: weight_map(ds, &w),
    };
    out.add_json(cfg.out_dir.join("weights").join(format!("client_{k}.json")), &file);
    Ok(())
}

fn cmd_run(cfg: &RunConfig, a: &RunArgs) -> Result<Outputs, CliError> {
    let dir = a.shards.clone().unwrap_or_else(|| cfg.out_dir.join("shards"));
    let shards = load_shards(&dir)?;
    let clients: Vec<LocalDataset> = shards
        .iter()
        .enumerate()
        .map(|(k, s)| build_local_dataset(k, s))
        .collect();
    let (vectors, rounds, elapsed) = if clients.len() == 1 {
        // nothing to exchange: local counts are already global
        (vec![ppmpr_init(&clients[0])], 0, Duration::ZERO)
    } else {
        let schedule = build_schedule(clients.len())?;
        let kind = match cfg.transport {
            Transport::Mem => TransportKind::Mem,
            Transport::Tcp => TransportKind::Tcp,
        };
        let opts = RunOptions {
            seed: Some(cfg.seed),
            per_pair_delay: None,
        };
        let res = run_ppmpr(&clients, &schedule, &LocalTransport::new(kind), &opts)?;
        (res.vectors, res.rounds, res.elapsed)
    };
    let mut out = Outputs::default();
    for (ds, g) in clients.iter().zip(&vectors) {
        client_outputs(&mut out, cfg, ds, g, elapsed, rounds, a.include_text)?;
    }
    println!(
        "{} clients, {} rounds, {:.1} ms; outputs in {}",
        clients.len(),
        rounds,
        elapsed.as_secs_f64() * 1e3,
        cfg.out_dir.display()
    );
    Ok(out)
}

fn cmd_node(cfg: &RunConfig, a: &NodeArgs) -> Result<Outputs, CliError> {
    let peers: Vec<SocketAddr> = cfg.peers.iter().map(|p| p.parse().expect("validated")).collect();
    if peers.len() < 2 {
        return Err(ConfigError {
            field: "peers",
            reason: "need at least two addresses".into(),
        }
        .into());
    }
    if a.client >= peers.len() {
        return Err(ConfigError {
            field: "client",
            reason: format!("must be below {}", peers.len()),
        }
        .into());
    }
    let raw = read_corpus(&a.shard)?;
    let ds = build_local_dataset(a.client, &raw);
    let schedule = build_schedule(peers.len())?;
    let addr = peers[a.client];
    let listener = TcpListener::bind(addr).map_err(|e| CliError::Io {
        path: addr.to_string(),
        source: e,
    })?;
    let opts = RunOptions {
        seed: Some(cfg.seed),
        per_pair_delay: None,
    };
    let timeout = Duration::from_millis(cfg.connect_timeout_ms);
    let (g, elapsed) = run_tcp_node(&ds, a.client + 1, &peers, listener, &schedule, &opts, timeout)?;
    let mut out = Outputs::default();
    client_outputs(&mut out, cfg, &ds, &g, elapsed, schedule.rounds.len(), a.include_text)?;
    println!("client {} done in {:.1} ms", a.client, elapsed.as_secs_f64() * 1e3);
    Ok(out)
}

#[derive(Debug, Serialize)]
struct BenchRow<'a> {
    sweep: &'a str,
    phase: bench::Phase,
    dataset_size: usize,
    duplication: f64,
    n_clients: usize,
    repetitions: usize,
    mean_ms: f64,
    std_ms: f64,
}

impl<'a> BenchRow<'a> {
    fn new(sweep: &'a str, r: &BenchRecord) -> Self {
        BenchRow {
            sweep,
            phase: r.phase,
            dataset_size: r.dataset_size,
            duplication: r.duplication,
            n_clients: r.n_clients,
            repetitions: r.repetitions,
            mean_ms: r.mean_ms,
            std_ms: r.std_ms,
        }
    }
}

#[derive(Debug, Serialize)]
struct OrchestrationRow {
    n_clients: usize,
    delay_ms: u64,
    parallel_rounds: usize,
    sequential_rounds: usize,
    parallel_ms: f64,
    sequential_ms: f64,
    speedup: f64,
}

fn csv_body<T: Serialize>(rows: &[T]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Input(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| CliError::Input(format!("csv: {e}")))
}

fn cmd_bench(cfg: &RunConfig) -> Result<Outputs, CliError> {
    let reps = cfg.repetitions;
    let mut rows = Vec::new();
    for &e in &cfg.bench_sizes_log2 {
        for r in bench::bench_2pc(1 << e, 0.3, reps, cfg.seed)? {
            eprintln!("size 2^{e}: {:?} {:.1} ± {:.1} ms", r.phase, r.mean_ms, r.std_ms);
            rows.push(("size", r));
        }
    }
    for &d in &cfg.bench_duplications {
        for r in bench::bench_2pc(1 << cfg.bench_dup_size_log2, d, reps, cfg.seed)? {
            eprintln!("duplication {d}: {:?} {:.1} ± {:.1} ms", r.phase, r.mean_ms, r.std_ms);
            rows.push(("duplication", r));
        }
    }
    for &n in &cfg.bench_clients {
        let r = bench::bench_clients(n, 1 << cfg.bench_client_size_log2, 0.3, reps, cfg.seed)?;
        eprintln!("clients {n}: {:.1} ± {:.1} ms", r.mean_ms, r.std_ms);
        rows.push(("clients", r));
    }
    let delay = Duration::from_millis(cfg.delay_ms);
    let mut orch = Vec::new();
    for &n in &cfg.bench_clients {
        let t = bench::bench_orchestration(n, 8, delay, cfg.seed)?;
        eprintln!("orchestration n={n}: speedup {:.2}", t.speedup());
        orch.push(OrchestrationRow {
            n_clients: n,
            delay_ms: cfg.delay_ms,
            parallel_rounds: t.parallel_rounds,
            sequential_rounds: t.sequential_rounds,
            parallel_ms: t.parallel.as_secs_f64() * 1e3,
            sequential_ms: t.sequential.as_secs_f64() * 1e3,
            speedup: t.speedup(),
        });
    }
    let rows: Vec<BenchRow> = rows.iter().map(|(s, r)| BenchRow::new(s, r)).collect();
    let mut out = Outputs::default();
    out.add(cfg.out_dir.join("bench.csv"), csv_body(&rows)?);
    out.add(cfg.out_dir.join("orchestration.csv"), csv_body(&orch)?);
    Ok(out)
}

fn read_weights(path: &Path) -> Result<WeightFile, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn cmd_train(cfg: &RunConfig, a: &TrainArgs) -> Result<Outputs, CliError> {
    let dir = a.shards.clone().unwrap_or_else(|| cfg.out_dir.join("shards"));
    let shards = load_shards(&dir)?;
    let test = read_corpus(&a.test)?;
    let train: Vec<TrainShard> = if a.raw {
        shards
            .iter()
            .enumerate()
            .map(|(k, s)| TrainShard::raw(k, s.clone()))
            .collect()
    } else {
        let wdir = a.weights.clone().unwrap_or_else(|| cfg.out_dir.join("weights"));
        let mut v = Vec::with_capacity(shards.len());
        for (k, s) in shards.iter().enumerate() {
            let ds = build_local_dataset(k, s);
            let path = wdir.join(format!("client_{k}.json"));
            let wf = read_weights(&path)?;
            let weights = ds
                .digests()
                .iter()
                .map(|d| {
                    wf.weights
                        .get(d)
                        .copied()
                        .ok_or_else(|| CliError::Input(format!("{}: no weight for sample {d}", path.display())))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let texts = ds.records().iter().map(|r| r.sample.text().to_string()).collect();
            v.push(TrainShard::new(k, texts, weights, ds.raw_len() as usize)?);
        }
        v
    };
    let vocab = Vocab::from_texts(
        train
            .iter()
            .flat_map(|s| s.texts.iter().map(String::as_str))
            .chain(test.iter().map(String::as_str)),
    );
    let init = TinyLmParams::zeros(vocab);
    let (model, trace) = run_federated(&init, &train, &cfg.train_config(), &test)?;
    for row in &trace {
        println!(
            "round {} test_perplexity {:.6} mean_train_loss {:.6}",
            row.round, row.test_perplexity, row.mean_train_loss
        );
    }
    let mut out = Outputs::default();
    out.add(cfg.out_dir.join("trace.csv"), csv_body(&trace)?);
    out.add(cfg.out_dir.join("model.json"), model.to_json() + "\n");
    Ok(out)
}

/// Runs one parsed invocation and writes its outputs.
pub fn execute(cli: &Cli) -> Result<Vec<PathBuf>, CliError> {
    let cfg = resolve_config(cli)?;
    let out = match &cli.command {
        Command::Inject(a) => cmd_inject(&cfg, a)?,
        Command::Schedule(_) => cmd_schedule(&cfg)?,
        Command::Run(a) => cmd_run(&cfg, a)?,
        Command::Node(a) => cmd_node(&cfg, a)?,
        Command::Bench(_) => cmd_bench(&cfg)?,
        Command::Train(a) => cmd_train(&cfg, a)?,
    };
    let paths = out.paths().map(Path::to_path_buf).collect();
    out.write()?;
    Ok(paths)
}

pub fn main() {
    let cli = Cli::parse();
    if let Err(e) = execute(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("fedreweight").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"seed": 3, "n_clients": 5, "epsilon": 0.5}"#).unwrap();
        let cli = parse(&["--config", path.to_str().unwrap(), "--seed", "9", "schedule"]);
        let cfg = resolve_config(&cli).unwrap();
        assert_eq!((cfg.seed, cfg.n_clients, cfg.epsilon), (9, 5, 0.5));
        let cli = parse(&["--config", path.to_str().unwrap(), "schedule", "--n", "7"]);
        assert_eq!(resolve_config(&cli).unwrap().n_clients, 7);
    }

    #[test]
    fn errors_name_the_field() {
        let cases: &[(&str, &str)] = &[
            (r#"{"epsilon": 0}"#, "epsilon"),
            (r#"{"duplication_rate": 1.0}"#, "duplication_rate"),
            (r#"{"n_clients": 0}"#, "n_clients"),
            (r#"{"skew": [0.5, 0.5]}"#, "skew"),
            (r#"{"peers": ["nope"]}"#, "peers"),
            (r#"{"learning_rate": -1}"#, "learning_rate"),
            (r#"{"batch_size": 0}"#, "batch_size"),
            (r#"{"repetitions": 0}"#, "repetitions"),
            (r#"{"bench_sizes_log2": [21]}"#, "bench_sizes_log2"),
            (r#"{"bench_clients": [1]}"#, "bench_clients"),
            (r#"{"unknown_key": 1}"#, "config"),
        ];
        for (json, field) in cases {
            let err = RunConfig::from_json(json).and_then(|c| c.validate()).unwrap_err();
            assert_eq!(err.field, *field, "{json}");
            assert!(err.to_string().contains(field));
        }
    }

    #[test]
    fn weight_file_round_trips() {
        let ds = build_local_dataset(0, &["a", "b", "b"]);
        let g = ppmpr_init(&ds);
        let w = weights_from_frequencies(&g, 1e-8).unwrap();
        let wf = WeightFile {
            client_id: 0,
            epsilon: 1e-8,
            weights: weight_map(&ds, &w),
        };
        let back: WeightFile = serde_json::from_str(&serde_json::to_string(&wf).unwrap()).unwrap();
        assert_eq!(back.weights, wf.weights);
    }
}
