//! Multi-agent search: N agents sample batches of M architectures, collect
//! rewards through the evaluator and exchange PPO gradients with a parameter
//! server, synchronously (a2c), asynchronously (a3c) or not at all (random).

use std::collections::{HashMap, VecDeque};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex};
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{
    adam_update, init_policy_with, ppo_gradient, sample_batch, write_checkpoint, ControllerError, GradientPacket,
    PolicyParams, PolicyShape, PpoConfig, Trajectory,
};
use crate::derive_seed;
use crate::evaluator::{
    Benchmark, ClusterModel, DurationModel, EvalError, EvalResult, EvalTask, Evaluator, LandscapeBenchmark, LocalPool,
    SimulatedEvaluator, TrainingBenchmark,
};
use crate::netbench::{generate_dataset, load_dataset, Clock, EvalStatus, FidelityBudget, SyntheticLandscape};
use crate::optim::{AdamConfig, AdamState};
use crate::space::{build_space, builtin_space, SpaceSpec};

pub const LOG_SCHEMA: &str = "nas-search-log";
pub const LOG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    A3c,
    A2c,
    Random,
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "a3c" => Ok(Strategy::A3c),
            "a2c" => Ok(Strategy::A2c),
            "random" | "rdm" => Ok(Strategy::Random),
            other => Err(format!("unknown strategy {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetSource {
    Preset { preset: String, seed: u64 },
    Manifest { manifest: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BenchmarkConfig {
    /// Deterministic synthetic reward over a flat product space.
    Landscape {
        arities: Vec<usize>,
        seed: u64,
        #[serde(default)]
        pairs: usize,
        #[serde(default)]
        strength: f64,
        durations: DurationModel,
    },
    /// Real training on a tabular dataset. `space` is a builtin name or a spec path.
    Training { space: String, dataset: DatasetSource, clock: Clock },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Backend {
    Simulated {
        #[serde(default)]
        dispatch_latency: f64,
    },
    Local,
}

fn default_window() -> usize {
    4
}

fn default_rounds() -> usize {
    3
}

fn default_adam_lr() -> f64 {
    1e-3
}

fn default_step_seconds() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub strategy: Strategy,
    pub num_agents: usize,
    pub workers_per_agent: usize,
    /// Seconds on the backend's clock.
    pub wall_clock_budget: f64,
    #[serde(default)]
    pub max_evaluations: Option<usize>,
    #[serde(default)]
    pub fidelity: FidelityBudget,
    #[serde(default)]
    pub ppo: PpoConfig,
    /// Parameter-server Adam step size.
    #[serde(default = "default_adam_lr")]
    pub ps_lr: f64,
    #[serde(default)]
    pub policy: PolicyShape,
    pub seed: u64,
    pub backend: Backend,
    pub benchmark: BenchmarkConfig,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_rounds")]
    pub convergence_rounds: usize,
    /// Write a policy checkpoint every this many PS updates.
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
    /// Simulated seconds an agent spends between collecting a batch and submitting the next.
    #[serde(default = "default_step_seconds")]
    pub agent_step_seconds: f64,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
}

impl SearchConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let c: SearchConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.num_agents == 0 {
            return bad("num_agents must be at least 1");
        }
        if self.workers_per_agent == 0 {
            return bad("workers_per_agent must be at least 1");
        }
        if !(self.wall_clock_budget > 0.0) {
            return bad("wall_clock_budget must be positive");
        }
        if self.max_evaluations == Some(0) {
            return bad("max_evaluations must be positive");
        }
        if self.window == 0 {
            return bad("window must be at least 1");
        }
        if self.convergence_rounds == 0 {
            return bad("convergence_rounds must be at least 1");
        }
        let f = &self.fidelity;
        if f.epochs == 0 || !(f.subset_fraction > 0.0 && f.subset_fraction <= 1.0) || f.batch_size == 0 {
            return bad("fidelity budget fields must be positive");
        }
        if f.timeout.is_some_and(|t| !(t > 0.0)) {
            return bad("timeout must be positive");
        }
        if !(self.ps_lr > 0.0) || !(self.ppo.lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if matches!(self.backend, Backend::Simulated { .. }) && !(self.agent_step_seconds > 0.0) {
            return bad("agent_step_seconds must be positive on the simulated backend");
        }
        if let BenchmarkConfig::Landscape { arities, .. } = &self.benchmark {
            if arities.is_empty() || arities.contains(&0) {
                return bad("landscape arities must be non-empty and positive");
            }
        }
        Ok(())
    }

    pub fn total_workers(&self) -> usize {
        self.num_agents * self.workers_per_agent
    }

    pub fn build_benchmark(&self) -> Result<Arc<dyn Benchmark>, ConfigError> {
        match &self.benchmark {
            BenchmarkConfig::Landscape { arities, seed, pairs, strength, durations } => {
                let landscape = SyntheticLandscape::new(arities, *seed, *pairs, *strength);
                Ok(Arc::new(LandscapeBenchmark { landscape, durations: *durations }))
            }
            BenchmarkConfig::Training { space, dataset, clock } => {
                let ds = match dataset {
                    DatasetSource::Preset { preset, seed } => generate_dataset(preset, *seed),
                    DatasetSource::Manifest { manifest } => load_dataset(manifest),
                }
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
                let spec = load_space_spec(space)?;
                let spec = spec.with_input_dims(&ds.dims()).map_err(|e| ConfigError::Invalid(e.to_string()))?;
                let space = build_space(spec).map_err(|e| ConfigError::Invalid(e.to_string()))?;
                Ok(Arc::new(TrainingBenchmark { space: Arc::new(space), dataset: Arc::new(ds), clock: *clock }))
            }
        }
    }
}

/// A builtin space name or a path to a JSON space spec.
pub fn load_space_spec(name_or_path: &str) -> Result<SpaceSpec, ConfigError> {
    if let Ok(spec) = builtin_space(name_or_path) {
        return Ok(spec);
    }
    let text = std::fs::read_to_string(name_or_path)
        .map_err(|_| ConfigError::Invalid(format!("unknown space {name_or_path:?}")))?;
    SpaceSpec::from_json(&text).map_err(|e| ConfigError::Invalid(e.to_string()))
}

// --- log -------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event")]
pub enum Event {
    EvalSubmitted {
        t: f64,
        agent: usize,
        task: u64,
        encoding: Vec<usize>,
    },
    EvalFinished {
        t: f64,
        agent: usize,
        task: u64,
        encoding: Vec<usize>,
        reward: f64,
        duration: f64,
        params: usize,
        status: EvalStatus,
        from_cache: bool,
    },
    GradientApplied {
        t: f64,
        agent: usize,
        version: u64,
        staleness: u64,
    },
    WorkerBusyInterval {
        t: f64,
        worker: usize,
        start: f64,
        end: f64,
    },
    SearchEnded {
        t: f64,
        reason: String,
    },
}

impl Event {
    pub fn time(&self) -> f64 {
        match self {
            Event::EvalSubmitted { t, .. }
            | Event::EvalFinished { t, .. }
            | Event::GradientApplied { t, .. }
            | Event::WorkerBusyInterval { t, .. }
            | Event::SearchEnded { t, .. } => *t,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub schema: String,
    pub version: u32,
    /// Identifies what was searched; logs with different benchmarks are not comparable.
    pub benchmark: String,
    pub workers: usize,
    pub config: Option<SearchConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchLog {
    pub header: LogHeader,
    pub events: Vec<Event>,
}

/// A log line that failed to parse.
#[derive(Clone, Debug, PartialEq)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

impl std::fmt::Display for LineError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("missing or invalid log header: {0}")]
    Header(String),
}

impl SearchLog {
    pub fn new(header: LogHeader) -> Self {
        Self { header, events: Vec::new() }
    }

    pub fn write_jsonl(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "{}", serde_json::to_string(&self.header).expect("header serializes"))?;
        for e in &self.events {
            writeln!(out, "{}", serde_json::to_string(e).expect("event serializes"))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(&mut f)?;
        f.flush()
    }

    /// Parse a JSON-lines log. Bad event lines are skipped and reported.
    pub fn parse(reader: impl BufRead) -> Result<(SearchLog, Vec<LineError>), LogError> {
        let mut lines = reader.lines();
        let first = lines.next().ok_or_else(|| LogError::Header("empty log".into()))??;
        let header: LogHeader = serde_json::from_str(&first).map_err(|e| LogError::Header(e.to_string()))?;
        if header.schema != LOG_SCHEMA || header.version != LOG_VERSION {
            return Err(LogError::Header(format!("unsupported schema {} v{}", header.schema, header.version)));
        }
        let mut log = SearchLog::new(header);
        let mut bad = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Event>(&line) {
                Ok(e) => log.events.push(e),
                Err(e) => bad.push(LineError { line: i + 2, message: e.to_string() }),
            }
        }
        Ok((log, bad))
    }

    pub fn load(path: &Path) -> Result<(SearchLog, Vec<LineError>), LogError> {
        Self::parse(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Events with time stripped, for comparing runs whose timestamps may differ.
    pub fn untimed(&self) -> Vec<Event> {
        self.events
            .iter()
            .map(|e| {
                let mut e = e.clone();
                match &mut e {
                    Event::EvalSubmitted { t, .. }
                    | Event::GradientApplied { t, .. }
                    | Event::SearchEnded { t, .. } => *t = 0.0,
                    Event::EvalFinished { t, duration, .. } => {
                        *t = 0.0;
                        *duration = 0.0;
                    }
                    Event::WorkerBusyInterval { t, start, end, .. } => {
                        *t = 0.0;
                        *start = 0.0;
                        *end = 0.0;
                    }
                }
                e
            })
            .collect()
    }

    pub fn end_reason(&self) -> Option<&str> {
        self.events.iter().rev().find_map(|e| match e {
            Event::SearchEnded { reason, .. } => Some(reason.as_str()),
            _ => None,
        })
    }
}

// --- parameter server ------------------------------------------------------------

#[derive(Debug, Error)]
pub enum PsError {
    #[error("expected {expected} packets, got {got}")]
    PacketCount { expected: usize, got: usize },
    #[error("packets carry different policy versions")]
    VersionMismatch,
    #[error("duplicate packet from agent {0}")]
    DuplicateAgent(usize),
    #[error("agent {0} out of range")]
    UnknownAgent(usize),
    #[error(transparent)]
    Controller(#[from] ControllerError),
}

/// Owner of the canonical policy and the single Adam state.
#[derive(Clone, Debug)]
pub struct ParameterServer {
    pub params: PolicyParams,
    pub adam: AdamState,
    pub window: usize,
    pub buffer: VecDeque<Vec<f64>>,
    /// Number of updates applied so far; equals the current policy version.
    pub counter: u64,
    pub served: Vec<u64>,
}

/// Coordinate-wise running mean; exact for identical or cancelling inputs.
fn running_mean<'a>(vs: impl IntoIterator<Item = &'a [f64]>) -> Vec<f64> {
    let mut mean: Vec<f64> = Vec::new();
    for (k, v) in vs.into_iter().enumerate() {
        if k == 0 {
            mean = v.to_vec();
        } else {
            let n = (k + 1) as f64;
            for (m, x) in mean.iter_mut().zip(v) {
                *m += (x - *m) / n;
            }
        }
    }
    mean
}

impl ParameterServer {
    pub fn new(params: PolicyParams, adam: AdamConfig, agents: usize, window: usize) -> Self {
        let n = params.len();
        Self { params, adam: AdamState::new(n, adam), window: window.max(1), buffer: VecDeque::new(), counter: 0, served: vec![0; agents] }
    }

    pub fn agents(&self) -> usize {
        self.served.len()
    }

    /// Average exactly one packet per agent (all at one version) and apply once.
    pub fn step_sync(&mut self, packets: &[GradientPacket]) -> Result<&PolicyParams, PsError> {
        let n = self.agents();
        if packets.len() != n {
            return Err(PsError::PacketCount { expected: n, got: packets.len() });
        }
        let mut seen = vec![false; n];
        for p in packets {
            if p.agent >= n {
                return Err(PsError::UnknownAgent(p.agent));
            }
            if std::mem::replace(&mut seen[p.agent], true) {
                return Err(PsError::DuplicateAgent(p.agent));
            }
            if p.version != packets[0].version {
                return Err(PsError::VersionMismatch);
            }
        }
        let mean = running_mean(packets.iter().map(|p| p.grad.as_slice()));
        adam_update(&mut self.params, &mut self.adam, &mean)?;
        self.counter += 1;
        self.served.iter_mut().for_each(|v| *v = self.counter);
        Ok(&self.params)
    }

    /// Push into the recency window, apply the window mean, serve the sender.
    /// Returns the new params and the packet's staleness.
    pub fn step_async(&mut self, packet: &GradientPacket) -> Result<(&PolicyParams, u64), PsError> {
        if packet.agent >= self.agents() {
            return Err(PsError::UnknownAgent(packet.agent));
        }
        if packet.grad.iter().any(|v| !v.is_finite()) {
            return Err(ControllerError::NonFiniteGradient.into());
        }
        let staleness = self.counter.saturating_sub(packet.version);
        self.buffer.push_back(packet.grad.clone());
        while self.buffer.len() > self.window {
            self.buffer.pop_front();
        }
        let mean = running_mean(self.buffer.iter().map(Vec::as_slice));
        adam_update(&mut self.params, &mut self.adam, &mean)?;
        self.counter += 1;
        self.served[packet.agent] = self.counter;
        Ok((&self.params, staleness))
    }
}

// --- convergence -----------------------------------------------------------------

/// Stops the search after K consecutive rounds in which every agent's whole
/// batch was served from its own cache. A round closes once every agent has
/// reported at least one batch; any fresh evaluation resets the streak.
#[derive(Clone, Debug)]
pub struct ConvergenceMonitor {
    pub k: usize,
    pub streak: usize,
    round: Vec<bool>,
}

impl ConvergenceMonitor {
    pub fn new(agents: usize, k: usize) -> Self {
        Self { k, streak: 0, round: vec![false; agents] }
    }

    /// Record one finished batch; returns true when the search should stop.
    pub fn record(&mut self, agent: usize, all_cached: bool) -> bool {
        if !all_cached {
            self.streak = 0;
            self.round.iter_mut().for_each(|r| *r = false);
            return false;
        }
        self.round[agent] = true;
        if self.round.iter().all(|&r| r) {
            self.streak += 1;
            self.round.iter_mut().for_each(|r| *r = false);
        }
        self.streak >= self.k
    }
}

// --- search ----------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("search failed: {message}")]
    Runtime { message: String, partial: Box<SearchLog> },
}

#[derive(Clone, Debug)]
pub struct SearchRun {
    pub log: SearchLog,
    pub policy: PolicyParams,
    pub updates: u64,
}

/// Where run artifacts go (checkpoints).
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub checkpoint_dir: Option<PathBuf>,
}

fn benchmark_label(c: &SearchConfig) -> String {
    match &c.benchmark {
        BenchmarkConfig::Landscape { arities, seed, pairs, strength, .. } => {
            format!("landscape:{arities:?}:{seed}:{pairs}:{strength}")
        }
        BenchmarkConfig::Training { space, dataset, .. } => match dataset {
            DatasetSource::Preset { preset, seed } => format!("training:{space}:{preset}:{seed}"),
            DatasetSource::Manifest { manifest } => format!("training:{space}:{}", manifest.display()),
        },
    }
}

fn header(c: &SearchConfig) -> LogHeader {
    LogHeader {
        schema: LOG_SCHEMA.into(),
        version: LOG_VERSION,
        benchmark: benchmark_label(c),
        workers: c.total_workers(),
        config: Some(c.clone()),
    }
}

fn task_seed(agent_seed: u64, encoding: &[usize]) -> u64 {
    encoding.iter().fold(agent_seed, |acc, &e| derive_seed(acc, e as u64))
}

fn agent_seed(global: u64, agent: usize) -> u64 {
    derive_seed(global, agent as u64 + 1)
}

fn uniform_batch(arities: &[usize], m: usize, rng: &mut impl Rng) -> Vec<Trajectory> {
    (0..m)
        .map(|_| Trajectory {
            encoding: arities.iter().map(|&a| rng.random_range(0..a)).collect(),
            log_probs: vec![0.0; arities.len()],
            values: vec![0.0; arities.len()],
            reward: None,
        })
        .collect()
}

fn finished_event(r: &EvalResult, t: f64) -> Event {
    Event::EvalFinished {
        t,
        agent: r.agent,
        task: r.task,
        encoding: r.encoding.clone(),
        reward: r.reward,
        duration: r.duration,
        params: r.params,
        status: r.status,
        from_cache: r.from_cache,
    }
}

fn maybe_checkpoint(opts: &RunOptions, every: Option<u64>, ps: &ParameterServer) -> Result<(), ControllerError> {
    if let (Some(dir), Some(r)) = (&opts.checkpoint_dir, every) {
        if r > 0 && ps.counter % r == 0 {
            write_checkpoint(&dir.join(format!("policy_{:06}.ckpt", ps.counter)), &ps.params, ps.counter)?;
        }
    }
    Ok(())
}

/// Run a search with the configured backend.
pub fn run_search(config: &SearchConfig) -> Result<SearchRun, SearchError> {
    run_search_with(config, &RunOptions::default())
}

pub fn run_search_with(config: &SearchConfig, opts: &RunOptions) -> Result<SearchRun, SearchError> {
    config.validate()?;
    let bench = config.build_benchmark()?;
    match config.backend {
        Backend::Simulated { dispatch_latency } => run_simulated_search(config, bench, dispatch_latency, opts),
        Backend::Local => run_local_search(config, bench, opts),
    }
}

struct SimAgent {
    rng: ChaCha8Rng,
    seed: u64,
    policy: PolicyParams,
    version: u64,
    batch: Vec<Trajectory>,
    slots: HashMap<u64, usize>,
    received: usize,
    all_cached: bool,
    ready_at: Option<f64>,
}

/// Discrete-event search on the simulated cluster. Fully deterministic.
pub fn run_simulated_search(
    config: &SearchConfig,
    bench: Arc<dyn Benchmark>,
    dispatch_latency: f64,
    opts: &RunOptions,
) -> Result<SearchRun, SearchError> {
    let n = config.num_agents;
    let m = config.workers_per_agent;
    let arities = bench.arities();
    let mut log = SearchLog::new(header(config));
    let fail = |log: &SearchLog, e: &dyn std::fmt::Display| SearchError::Runtime { message: e.to_string(), partial: Box::new(log.clone()) };

    let init = init_policy_with(&arities, derive_seed(config.seed, 0), config.policy);
    let mut ps = ParameterServer::new(init, AdamConfig::with_lr(config.ps_lr), n, config.window);
    let mut monitor = ConvergenceMonitor::new(n, config.convergence_rounds);
    let mut ev = SimulatedEvaluator::new(bench, ClusterModel { workers: config.total_workers(), dispatch_latency }, n);
    let mut agents: Vec<SimAgent> = (0..n)
        .map(|i| {
            let seed = agent_seed(config.seed, i);
            SimAgent {
                rng: ChaCha8Rng::seed_from_u64(seed),
                seed,
                policy: ps.params.clone(),
                version: 0,
                batch: Vec::new(),
                slots: HashMap::new(),
                received: 0,
                all_cached: true,
                ready_at: Some(0.0),
            }
        })
        .collect();
    let mut barrier: Vec<GradientPacket> = Vec::new();
    let mut next_task: u64 = 0;
    let budget = config.wall_clock_budget;
    let max_evals = config.max_evaluations.unwrap_or(usize::MAX);

    let reason = loop {
        let next_agent = agents.iter().filter_map(|a| a.ready_at).min_by(f64::total_cmp);
        let next = match (next_agent, ev.next_completion()) {
            (Some(a), Some(b)) => a.min(b),
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => break ("max_evaluations", ev.now()),
        };
        if next > budget {
            break ("budget", budget);
        }
        ev.advance_to(next);
        let now = ev.now();

        let mut stop = false;
        let mut finished = ev.get_finished_evals();
        finished.sort_by(|a, b| a.end.total_cmp(&b.end).then(a.task.cmp(&b.task)));
        for r in finished {
            if let Some(b) = r.busy_interval() {
                log.events.push(Event::WorkerBusyInterval { t: r.end, worker: b.worker, start: b.start, end: b.end });
            }
            log.events.push(finished_event(&r, r.end));
            let a = &mut agents[r.agent];
            let idx = a.slots.remove(&r.task).expect("result for a submitted task");
            a.batch[idx].reward = Some(r.reward);
            a.received += 1;
            a.all_cached &= r.from_cache;
            if a.received < a.batch.len() {
                continue;
            }
            let agent = r.agent;
            let all_cached = a.all_cached;
            let trajs = std::mem::take(&mut a.batch);
            a.received = 0;
            a.all_cached = true;
            match config.strategy {
                Strategy::Random => agents[agent].ready_at = Some(now + config.agent_step_seconds),
                Strategy::A3c => {
                    let a = &mut agents[agent];
                    let (packet, _) = ppo_gradient(&a.policy, &trajs, &config.ppo, agent, a.version).map_err(|e| fail(&log, &e))?;
                    let (params, staleness) = ps.step_async(&packet).map_err(|e| fail(&log, &e))?;
                    a.policy = params.clone();
                    a.version = ps.counter;
                    a.ready_at = Some(now + config.agent_step_seconds);
                    log.events.push(Event::GradientApplied { t: now, agent, version: ps.counter, staleness });
                    maybe_checkpoint(opts, config.checkpoint_every, &ps).map_err(|e| fail(&log, &e))?;
                }
                Strategy::A2c => {
                    let a = &agents[agent];
                    let (packet, _) = ppo_gradient(&a.policy, &trajs, &config.ppo, agent, a.version).map_err(|e| fail(&log, &e))?;
                    barrier.push(packet);
                    if barrier.len() == n {
                        barrier.sort_by_key(|p| p.agent);
                        let params = ps.step_sync(&barrier).map_err(|e| fail(&log, &e))?.clone();
                        for p in barrier.drain(..) {
                            log.events.push(Event::GradientApplied { t: now, agent: p.agent, version: ps.counter, staleness: 0 });
                        }
                        for a in agents.iter_mut() {
                            a.policy = params.clone();
                            a.version = ps.counter;
                            a.ready_at = Some(now + config.agent_step_seconds);
                        }
                        maybe_checkpoint(opts, config.checkpoint_every, &ps).map_err(|e| fail(&log, &e))?;
                    }
                }
            }
            if monitor.record(agent, all_cached) {
                stop = true;
                break;
            }
        }
        if stop {
            break ("converged", now);
        }

        for i in 0..n {
            if agents[i].ready_at != Some(now) {
                continue;
            }
            agents[i].ready_at = None;
            if next_task as usize + m > max_evals {
                continue;
            }
            let a = &mut agents[i];
            let batch = match config.strategy {
                Strategy::Random => uniform_batch(&arities, m, &mut a.rng),
                _ => sample_batch(&a.policy, m, &mut a.rng).map_err(|e| fail(&log, &e))?,
            };
            let mut tasks = Vec::with_capacity(m);
            for (k, traj) in batch.iter().enumerate() {
                let id = next_task;
                next_task += 1;
                a.slots.insert(id, k);
                log.events.push(Event::EvalSubmitted { t: now, agent: i, task: id, encoding: traj.encoding.clone() });
                tasks.push(EvalTask {
                    id,
                    agent: i,
                    encoding: traj.encoding.clone(),
                    budget: config.fidelity,
                    seed: task_seed(a.seed, &traj.encoding),
                });
            }
            a.batch = batch;
            ev.add_eval_batch(tasks).map_err(|e| fail(&log, &e))?;
        }
    };
    // Work cut off by the stop still occupied its worker up to the stop time.
    for r in ev.cancel_pending() {
        if let Some(b) = r.busy_interval() {
            if b.start < reason.1 {
                log.events.push(Event::WorkerBusyInterval { t: reason.1, worker: b.worker, start: b.start, end: b.end.min(reason.1) });
            }
        }
    }
    log.events.push(Event::SearchEnded { t: reason.1, reason: reason.0.into() });
    Ok(SearchRun { log, policy: ps.params, updates: ps.counter })
}

enum PsMsg {
    Batch { agent: usize, packet: Option<GradientPacket>, all_cached: bool, reply: Sender<PsReply> },
    Leave { agent: usize },
}

enum PsReply {
    Continue(Option<(PolicyParams, u64)>),
    Stop,
}

type SharedLog = Arc<Mutex<Vec<Event>>>;

/// Threaded search on the local pool: agents are threads, the PS is an actor
/// thread fed by a channel. Timestamps are wall-clock seconds.
pub fn run_local_search(config: &SearchConfig, bench: Arc<dyn Benchmark>, opts: &RunOptions) -> Result<SearchRun, SearchError> {
    let n = config.num_agents;
    let m = config.workers_per_agent;
    let arities = bench.arities();
    let pool = LocalPool::new(bench, config.total_workers());
    let events: SharedLog = Arc::new(Mutex::new(Vec::new()));
    let submitted = Arc::new(AtomicUsize::new(0));
    let stopped = Arc::new(AtomicBool::new(false));
    let init = init_policy_with(&arities, derive_seed(config.seed, 0), config.policy);
    let (tx, rx) = mpsc::channel::<PsMsg>();

    let ps_handle = {
        let events = Arc::clone(&events);
        let stopped = Arc::clone(&stopped);
        let config = config.clone();
        let opts = opts.clone();
        let start = std::time::Instant::now();
        let mut ps = ParameterServer::new(init.clone(), AdamConfig::with_lr(config.ps_lr), n, config.window);
        thread::spawn(move || -> Result<(PolicyParams, u64, bool), String> {
            let mut monitor = ConvergenceMonitor::new(n, config.convergence_rounds);
            let mut active = vec![true; n];
            let mut waiting: Vec<(GradientPacket, Sender<PsReply>)> = Vec::new();
            let mut converged = false;
            let flush_sync = |ps: &mut ParameterServer, waiting: &mut Vec<(GradientPacket, Sender<PsReply>)>, active: &[bool]| -> Result<(), String> {
                let live = active.iter().filter(|&&a| a).count();
                if waiting.is_empty() || waiting.len() < live {
                    return Ok(());
                }
                waiting.sort_by_key(|(p, _)| p.agent);
                let mut packets: Vec<GradientPacket> = waiting.iter().map(|(p, _)| p.clone()).collect();
                // Departed agents are represented by a zero packet so the barrier size stays N.
                for (agent, &on) in active.iter().enumerate() {
                    if !on {
                        packets.push(GradientPacket { grad: vec![0.0; ps.params.len()], agent, version: packets[0].version, batch: 0 });
                    }
                }
                packets.sort_by_key(|p| p.agent);
                let params = ps.step_sync(&packets).map_err(|e| e.to_string())?.clone();
                let t = start.elapsed().as_secs_f64();
                let mut log = events.lock().expect("log lock");
                for (p, reply) in waiting.drain(..) {
                    log.push(Event::GradientApplied { t, agent: p.agent, version: ps.counter, staleness: 0 });
                    let _ = reply.send(PsReply::Continue(Some((params.clone(), ps.counter))));
                }
                Ok(())
            };
            while let Ok(msg) = rx.recv() {
                match msg {
                    PsMsg::Leave { agent } => {
                        active[agent] = false;
                        flush_sync(&mut ps, &mut waiting, &active)?;
                        if active.iter().all(|a| !a) {
                            break;
                        }
                    }
                    PsMsg::Batch { agent, packet, all_cached, reply } => {
                        if monitor.record(agent, all_cached) && !converged {
                            converged = true;
                            stopped.store(true, Ordering::SeqCst);
                        }
                        if stopped.load(Ordering::SeqCst) {
                            let _ = reply.send(PsReply::Stop);
                            for (_, r) in waiting.drain(..) {
                                let _ = r.send(PsReply::Stop);
                            }
                            continue;
                        }
                        match (config.strategy, packet) {
                            (Strategy::A3c, Some(p)) => {
                                let (params, staleness) = ps.step_async(&p).map_err(|e| e.to_string())?;
                                let params = params.clone();
                                let t = start.elapsed().as_secs_f64();
                                events.lock().expect("log lock").push(Event::GradientApplied { t, agent, version: ps.counter, staleness });
                                maybe_checkpoint(&opts, config.checkpoint_every, &ps).map_err(|e| e.to_string())?;
                                let _ = reply.send(PsReply::Continue(Some((params, ps.counter))));
                            }
                            (Strategy::A2c, Some(p)) => {
                                waiting.push((p, reply));
                                let before = ps.counter;
                                flush_sync(&mut ps, &mut waiting, &active)?;
                                if ps.counter != before {
                                    maybe_checkpoint(&opts, config.checkpoint_every, &ps).map_err(|e| e.to_string())?;
                                }
                            }
                            _ => {
                                let _ = reply.send(PsReply::Continue(None));
                            }
                        }
                    }
                }
            }
            Ok((ps.params, ps.counter, converged))
        })
    };

    let budget = config.wall_clock_budget;
    let max_evals = config.max_evaluations.unwrap_or(usize::MAX);
    let mut handles = Vec::new();
    for i in 0..n {
        let mut evaluator = pool.handle(i);
        let tx = tx.clone();
        let events = Arc::clone(&events);
        let submitted = Arc::clone(&submitted);
        let stopped = Arc::clone(&stopped);
        let config = config.clone();
        let arities = arities.clone();
        let mut policy = init.clone();
        handles.push(thread::spawn(move || -> Result<(), String> {
            let seed = agent_seed(config.seed, i);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut version = 0u64;
            let res = (|| -> Result<(), String> {
                loop {
                    if stopped.load(Ordering::SeqCst) || evaluator.now() >= budget {
                        return Ok(());
                    }
                    let base = submitted.fetch_add(m, Ordering::SeqCst);
                    if base + m > max_evals {
                        return Ok(());
                    }
                    let mut batch = match config.strategy {
                        Strategy::Random => uniform_batch(&arities, m, &mut rng),
                        _ => sample_batch(&policy, m, &mut rng).map_err(|e| e.to_string())?,
                    };
                    let now = evaluator.now();
                    let mut tasks = Vec::with_capacity(m);
                    {
                        let mut log = events.lock().expect("log lock");
                        for (k, traj) in batch.iter().enumerate() {
                            let id = (base + k) as u64;
                            log.push(Event::EvalSubmitted { t: now, agent: i, task: id, encoding: traj.encoding.clone() });
                            tasks.push(EvalTask { id, agent: i, encoding: traj.encoding.clone(), budget: config.fidelity, seed: task_seed(seed, &traj.encoding) });
                        }
                    }
                    evaluator.add_eval_batch(tasks).map_err(|e: EvalError| e.to_string())?;
                    let mut all_cached = true;
                    let mut got = 0;
                    while got < m {
                        for r in evaluator.await_evals().map_err(|e| e.to_string())? {
                            let mut log = events.lock().expect("log lock");
                            if let Some(b) = r.busy_interval() {
                                log.push(Event::WorkerBusyInterval { t: r.end, worker: b.worker, start: b.start, end: b.end });
                            }
                            log.push(finished_event(&r, r.end.max(now)));
                            let k = (r.task as usize) - base;
                            batch[k].reward = Some(r.reward);
                            all_cached &= r.from_cache;
                            got += 1;
                        }
                    }
                    let packet = match config.strategy {
                        Strategy::Random => None,
                        _ => Some(ppo_gradient(&policy, &batch, &config.ppo, i, version).map_err(|e| e.to_string())?.0),
                    };
                    let (rtx, rrx) = mpsc::channel();
                    if tx.send(PsMsg::Batch { agent: i, packet, all_cached, reply: rtx }).is_err() {
                        return Ok(());
                    }
                    match rrx.recv() {
                        Ok(PsReply::Continue(Some((p, v)))) => {
                            policy = p;
                            version = v;
                        }
                        Ok(PsReply::Continue(None)) => {}
                        Ok(PsReply::Stop) | Err(_) => return Ok(()),
                    }
                }
            })();
            let _ = tx.send(PsMsg::Leave { agent: i });
            res
        }));
    }
    drop(tx);

    let mut first_err: Option<String> = None;
    for h in handles {
        if let Err(e) = h.join().unwrap_or_else(|_| Err("agent thread panicked".into())) {
            first_err.get_or_insert(e);
        }
    }
    let ps_out = ps_handle.join().unwrap_or_else(|_| Err("parameter server panicked".into()));
    let t_end = pool.elapsed();
    drop(pool);

    let mut ev = std::mem::take(&mut *events.lock().expect("log lock"));
    ev.sort_by(|a, b| a.time().total_cmp(&b.time()));
    let mut log = SearchLog::new(header(config));
    log.events = ev;
    let (params, updates, converged) = match (ps_out, first_err) {
        (Ok(x), None) => x,
        (Err(e), _) | (_, Some(e)) => {
            log.events.push(Event::SearchEnded { t: t_end, reason: format!("error: {e}") });
            return Err(SearchError::Runtime { message: e, partial: Box::new(log) });
        }
    };
    let reason = if converged {
        "converged"
    } else if t_end >= budget {
        "budget"
    } else {
        "max_evaluations"
    };
    log.events.push(Event::SearchEnded { t: t_end, reason: reason.into() });
    Ok(SearchRun { log, policy: params, updates })
}
