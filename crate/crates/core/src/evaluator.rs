//! Reward-estimation service: submit batches, poll or wait for results,
//! with a per-agent cache. Two backends share the API: a deterministic
//! simulated cluster driven by an explicit clock and a local thread pool.

use std::collections::{HashMap, VecDeque};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::derive_seed;
use crate::netbench::{
    compile, train_and_score, Clock, EvalStatus, FidelityBudget, SyntheticLandscape, TabularDataset,
};
use crate::space::{decode, ArchitectureEncoding, SearchSpace};

/// What a benchmark reports for one evaluation. `duration` is the true
/// (uncapped) cost in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub status: EvalStatus,
    pub reward: f64,
    pub duration: f64,
    pub params: usize,
}

/// Something that can score an architecture.
pub trait Benchmark: Send + Sync {
    fn evaluate(&self, encoding: &[usize], budget: &FidelityBudget, seed: u64) -> Outcome;

    /// Slot arities the benchmark accepts.
    fn arities(&self) -> Vec<usize>;
}

/// Deterministic per-architecture cost for synthetic benchmarks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DurationModel {
    Constant { seconds: f64 },
    /// Uniform on `[lo, hi]`, fixed per encoding by hashing it with `seed`.
    Uniform { lo: f64, hi: f64, seed: u64 },
}

impl DurationModel {
    pub fn duration(&self, encoding: &[usize]) -> f64 {
        match *self {
            DurationModel::Constant { seconds } => seconds,
            DurationModel::Uniform { lo, hi, seed } => {
                let h = encoding.iter().fold(seed, |acc, &e| derive_seed(acc, e as u64));
                let u = (h >> 11) as f64 / (1u64 << 53) as f64;
                lo + (hi - lo) * u
            }
        }
    }
}

/// Synthetic landscape reward with a modeled duration.
#[derive(Clone, Debug)]
pub struct LandscapeBenchmark {
    pub landscape: SyntheticLandscape,
    pub durations: DurationModel,
}

impl Benchmark for LandscapeBenchmark {
    fn evaluate(&self, encoding: &[usize], budget: &FidelityBudget, _seed: u64) -> Outcome {
        let duration = self.durations.duration(encoding);
        match self.landscape.reward(encoding) {
            Ok(_) if budget.timeout.is_some_and(|t| duration > t) => {
                Outcome { status: EvalStatus::Timeout, reward: -1.0, duration, params: 0 }
            }
            Ok(r) => Outcome { status: EvalStatus::Ok, reward: r, duration, params: 0 },
            Err(_) => Outcome { status: EvalStatus::Failed, reward: -1.0, duration: 0.0, params: 0 },
        }
    }

    fn arities(&self) -> Vec<usize> {
        self.landscape.arities.clone()
    }
}

/// Decode, compile and train on a tabular dataset.
#[derive(Clone, Debug)]
pub struct TrainingBenchmark {
    pub space: Arc<SearchSpace>,
    pub dataset: Arc<TabularDataset>,
    pub clock: Clock,
}

impl Benchmark for TrainingBenchmark {
    fn evaluate(&self, encoding: &[usize], budget: &FidelityBudget, seed: u64) -> Outcome {
        let failed = |params| Outcome { status: EvalStatus::Failed, reward: -1.0, duration: 0.0, params };
        let Ok(graph) = decode(&self.space, &ArchitectureEncoding(encoding.to_vec())) else {
            return failed(0);
        };
        let Ok(program) = compile(&graph, &self.dataset.dims(), self.dataset.task) else {
            return failed(0);
        };
        match train_and_score(&program, &self.dataset, budget, seed, &self.clock) {
            Ok(r) => Outcome { status: r.status, reward: r.reward, duration: r.duration, params: r.params },
            Err(_) => failed(crate::netbench::count_params(&program)),
        }
    }

    fn arities(&self) -> Vec<usize> {
        self.space.arities()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalTask {
    pub id: u64,
    pub agent: usize,
    pub encoding: Vec<usize>,
    pub budget: FidelityBudget,
    /// Seed for weight initialization and data subsetting.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub task: u64,
    pub agent: usize,
    pub encoding: Vec<usize>,
    pub status: EvalStatus,
    pub reward: f64,
    /// Worker time consumed; zero for cache hits.
    pub duration: f64,
    pub params: usize,
    pub from_cache: bool,
    pub worker: Option<usize>,
    pub submitted: f64,
    pub start: f64,
    pub end: f64,
}

/// A span during which one worker ran one task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BusyInterval {
    pub worker: usize,
    pub start: f64,
    pub end: f64,
}

impl EvalResult {
    pub fn busy_interval(&self) -> Option<BusyInterval> {
        self.worker.map(|worker| BusyInterval { worker, start: self.start, end: self.end })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("task id {0} is already live")]
    DuplicateTask(u64),
    #[error("agent {agent} out of range ({agents} agents)")]
    UnknownAgent { agent: usize, agents: usize },
    #[error("invalid budget for task {0}")]
    BadBudget(u64),
    #[error("evaluator backend stopped")]
    Disconnected,
}

/// Results already computed for one agent, keyed by encoding.
#[derive(Clone, Debug, Default)]
pub struct AgentCache {
    map: HashMap<Vec<usize>, EvalResult>,
}

impl AgentCache {
    pub fn get(&self, encoding: &[usize]) -> Option<&EvalResult> {
        self.map.get(encoding)
    }

    pub fn insert(&mut self, r: EvalResult) {
        self.map.entry(r.encoding.clone()).or_insert(r);
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

fn cached(task: &EvalTask, hit: &EvalResult, now: f64) -> EvalResult {
    EvalResult {
        task: task.id,
        agent: task.agent,
        encoding: task.encoding.clone(),
        status: hit.status,
        reward: hit.reward,
        duration: 0.0,
        params: hit.params,
        from_cache: true,
        worker: None,
        submitted: now,
        start: now,
        end: now,
    }
}

fn check_budget(t: &EvalTask) -> Result<(), EvalError> {
    let b = &t.budget;
    let ok = b.subset_fraction > 0.0
        && b.subset_fraction <= 1.0
        && b.batch_size > 0
        && b.timeout.is_none_or(|x| x > 0.0);
    if ok {
        Ok(())
    } else {
        Err(EvalError::BadBudget(t.id))
    }
}

/// The asynchronous evaluation API.
pub trait Evaluator {
    /// Submit tasks. Cache hits resolve immediately; misses queue FIFO.
    fn add_eval_batch(&mut self, tasks: Vec<EvalTask>) -> Result<(), EvalError>;

    /// Results completed since the previous call; never blocks.
    fn get_finished_evals(&mut self) -> Vec<EvalResult>;

    /// Block until at least one result is available (or nothing is outstanding).
    fn await_evals(&mut self) -> Result<Vec<EvalResult>, EvalError>;

    /// Tasks submitted but not yet returned.
    fn outstanding(&self) -> usize;

    /// Current time on the backend's clock.
    fn now(&self) -> f64;
}

// --- list scheduling ------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub workers: usize,
    #[serde(default)]
    pub dispatch_latency: f64,
}

/// One job for [`run_simulated`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub ready: f64,
    pub duration: f64,
    pub timeout: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobOutcome {
    pub worker: usize,
    pub start: f64,
    pub end: f64,
    pub timed_out: bool,
}

/// FIFO list scheduler: each job takes the earliest-free worker (lowest
/// index on ties).
#[derive(Clone, Debug)]
pub struct Scheduler {
    free: Vec<f64>,
    latency: f64,
}

impl Scheduler {
    pub fn new(cluster: ClusterModel) -> Self {
        assert!(cluster.workers >= 1, "cluster needs at least one worker");
        Self { free: vec![0.0; cluster.workers], latency: cluster.dispatch_latency }
    }

    pub fn assign(&mut self, job: Job) -> JobOutcome {
        let (worker, &free) = self
            .free
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)))
            .expect("non-empty");
        let start = free.max(job.ready + self.latency);
        let (busy, timed_out) = match job.timeout {
            Some(t) if job.duration > t => (t, true),
            _ => (job.duration, false),
        };
        let end = start + busy;
        self.free[worker] = end;
        JobOutcome { worker, start, end, timed_out }
    }
}

/// Schedule a fixed workload and return per-job outcomes plus busy intervals.
pub fn run_simulated(cluster: ClusterModel, workload: &[Job]) -> (Vec<JobOutcome>, Vec<BusyInterval>) {
    let mut s = Scheduler::new(cluster);
    let mut order: Vec<usize> = (0..workload.len()).collect();
    order.sort_by(|&a, &b| workload[a].ready.total_cmp(&workload[b].ready).then(a.cmp(&b)));
    let mut out = vec![JobOutcome { worker: 0, start: 0.0, end: 0.0, timed_out: false }; workload.len()];
    for i in order {
        out[i] = s.assign(workload[i]);
    }
    let busy = out.iter().map(|o| BusyInterval { worker: o.worker, start: o.start, end: o.end }).collect();
    (out, busy)
}

// --- simulated backend ------------------------------------------------------------

/// Single-threaded evaluator on a simulated clock. Benchmarks run eagerly at
/// submission; results become visible once the clock reaches their end time.
pub struct SimulatedEvaluator {
    bench: Arc<dyn Benchmark>,
    scheduler: Scheduler,
    clock: f64,
    caches: Vec<AgentCache>,
    live: HashMap<u64, ()>,
    pending: Vec<EvalResult>,
    /// In-flight fresh evaluations per (agent, encoding): duplicates wait on them.
    inflight: HashMap<(usize, Vec<usize>), Vec<EvalTask>>,
}

impl SimulatedEvaluator {
    pub fn new(bench: Arc<dyn Benchmark>, cluster: ClusterModel, agents: usize) -> Self {
        Self {
            bench,
            scheduler: Scheduler::new(cluster),
            clock: 0.0,
            caches: vec![AgentCache::default(); agents],
            live: HashMap::new(),
            pending: Vec::new(),
            inflight: HashMap::new(),
        }
    }

    pub fn cache(&self, agent: usize) -> &AgentCache {
        &self.caches[agent]
    }

    /// Move the clock forward (never backward).
    pub fn advance_to(&mut self, t: f64) {
        if t > self.clock {
            self.clock = t;
        }
    }

    /// Cancel everything not yet delivered, returning the dropped results.
    pub fn cancel_pending(&mut self) -> Vec<EvalResult> {
        self.live.clear();
        self.inflight.clear();
        let mut out: Vec<EvalResult> = self.pending.drain(..).collect();
        out.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.task.cmp(&b.task)));
        out
    }

    /// Earliest end time among results not yet delivered.
    pub fn next_completion(&self) -> Option<f64> {
        self.pending.iter().map(|r| r.end).min_by(f64::total_cmp)
    }
}

impl Evaluator for SimulatedEvaluator {
    fn add_eval_batch(&mut self, tasks: Vec<EvalTask>) -> Result<(), EvalError> {
        for t in &tasks {
            check_budget(t)?;
            if t.agent >= self.caches.len() {
                return Err(EvalError::UnknownAgent { agent: t.agent, agents: self.caches.len() });
            }
            if self.live.contains_key(&t.id) {
                return Err(EvalError::DuplicateTask(t.id));
            }
        }
        let now = self.clock;
        for t in tasks {
            self.live.insert(t.id, ());
            if let Some(hit) = self.caches[t.agent].get(&t.encoding) {
                let r = cached(&t, hit, now);
                self.pending.push(r);
                continue;
            }
            let key = (t.agent, t.encoding.clone());
            if let Some(waiters) = self.inflight.get_mut(&key) {
                waiters.push(t);
                continue;
            }
            let o = self.bench.evaluate(&t.encoding, &t.budget, t.seed);
            let j = self.scheduler.assign(Job { ready: now, duration: o.duration, timeout: t.budget.timeout });
            let (status, reward) = if j.timed_out { (EvalStatus::Timeout, -1.0) } else { (o.status, o.reward) };
            self.pending.push(EvalResult {
                task: t.id,
                agent: t.agent,
                encoding: t.encoding.clone(),
                status,
                reward,
                duration: j.end - j.start,
                params: o.params,
                from_cache: false,
                worker: Some(j.worker),
                submitted: now,
                start: j.start,
                end: j.end,
            });
            self.inflight.insert(key, Vec::new());
        }
        Ok(())
    }

    fn get_finished_evals(&mut self) -> Vec<EvalResult> {
        let clock = self.clock;
        let (mut done, rest): (Vec<_>, Vec<_>) = self.pending.drain(..).partition(|r| r.end <= clock);
        self.pending = rest;
        done.sort_by(|a, b| a.end.total_cmp(&b.end).then(a.task.cmp(&b.task)));
        let mut out = Vec::with_capacity(done.len());
        for r in done {
            self.live.remove(&r.task);
            if !r.from_cache {
                self.caches[r.agent].insert(r.clone());
                if let Some(waiters) = self.inflight.remove(&(r.agent, r.encoding.clone())) {
                    out.push(r.clone());
                    for w in waiters {
                        self.live.remove(&w.id);
                        let mut c = cached(&w, &r, r.end);
                        c.submitted = r.submitted;
                        out.push(c);
                    }
                    continue;
                }
            }
            out.push(r);
        }
        out
    }

    fn await_evals(&mut self) -> Result<Vec<EvalResult>, EvalError> {
        let ready = self.get_finished_evals();
        if !ready.is_empty() {
            return Ok(ready);
        }
        if let Some(t) = self.next_completion() {
            self.advance_to(t);
        }
        Ok(self.get_finished_evals())
    }

    fn outstanding(&self) -> usize {
        self.live.len()
    }

    fn now(&self) -> f64 {
        self.clock
    }
}

// --- local thread pool ------------------------------------------------------------

struct Work {
    task: EvalTask,
    reply: Sender<EvalResult>,
    submitted: f64,
}

/// A pool of OS threads executing benchmark evaluations on the wall clock.
pub struct LocalPool {
    tx: Option<Sender<Work>>,
    handles: Vec<JoinHandle<()>>,
    start: Instant,
    workers: usize,
}

impl LocalPool {
    pub fn new(bench: Arc<dyn Benchmark>, workers: usize) -> Self {
        assert!(workers >= 1, "pool needs at least one worker");
        let (tx, rx) = mpsc::channel::<Work>();
        let rx = Arc::new(Mutex::new(rx));
        let start = Instant::now();
        let handles = (0..workers)
            .map(|w| {
                let rx = Arc::clone(&rx);
                let bench = Arc::clone(&bench);
                thread::spawn(move || loop {
                    let job = {
                        let guard = rx.lock().expect("queue lock");
                        guard.recv()
                    };
                    let Ok(Work { task, reply, submitted }) = job else { break };
                    let t0 = start.elapsed().as_secs_f64();
                    let o = bench.evaluate(&task.encoding, &task.budget, task.seed);
                    let t1 = start.elapsed().as_secs_f64();
                    let timed_out = task.budget.timeout.is_some_and(|t| o.duration > t) || o.status == EvalStatus::Timeout;
                    let (status, reward) = if timed_out { (EvalStatus::Timeout, -1.0) } else { (o.status, o.reward) };
                    let _ = reply.send(EvalResult {
                        task: task.id,
                        agent: task.agent,
                        encoding: task.encoding,
                        status,
                        reward,
                        duration: t1 - t0,
                        params: o.params,
                        from_cache: false,
                        worker: Some(w),
                        submitted,
                        start: t0,
                        end: t1,
                    });
                })
            })
            .collect();
        Self { tx: Some(tx), handles, start, workers }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn elapsed(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    /// Evaluator front end for one agent; handles may live on other threads.
    pub fn handle(&self, agent: usize) -> LocalEvaluator {
        let (reply, rx) = mpsc::channel();
        LocalEvaluator {
            agent,
            queue: self.tx.clone().expect("pool running"),
            reply,
            rx,
            start: self.start,
            cache: AgentCache::default(),
            ready: VecDeque::new(),
            inflight: HashMap::new(),
            live: 0,
        }
    }
}

impl Drop for LocalPool {
    fn drop(&mut self) {
        self.tx.take();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

/// Per-agent view of a [`LocalPool`] holding that agent's cache.
pub struct LocalEvaluator {
    agent: usize,
    queue: Sender<Work>,
    reply: Sender<EvalResult>,
    rx: Receiver<EvalResult>,
    start: Instant,
    cache: AgentCache,
    ready: VecDeque<EvalResult>,
    inflight: HashMap<Vec<usize>, Vec<EvalTask>>,
    live: usize,
}

impl LocalEvaluator {
    pub fn cache(&self) -> &AgentCache {
        &self.cache
    }

    fn absorb(&mut self, r: EvalResult) {
        self.live -= 1;
        self.cache.insert(r.clone());
        let waiters = self.inflight.remove(&r.encoding).unwrap_or_default();
        self.ready.push_back(r.clone());
        for w in waiters {
            self.live -= 1;
            let mut c = cached(&w, &r, r.end);
            c.submitted = r.submitted;
            self.ready.push_back(c);
        }
    }
}

impl Evaluator for LocalEvaluator {
    fn add_eval_batch(&mut self, tasks: Vec<EvalTask>) -> Result<(), EvalError> {
        for t in &tasks {
            check_budget(t)?;
            if t.agent != self.agent {
                return Err(EvalError::UnknownAgent { agent: t.agent, agents: self.agent + 1 });
            }
        }
        let now = self.now();
        for t in tasks {
            if let Some(hit) = self.cache.get(&t.encoding) {
                let r = cached(&t, hit, now);
                self.ready.push_back(r);
                continue;
            }
            self.live += 1;
            if let Some(w) = self.inflight.get_mut(&t.encoding) {
                w.push(t);
                continue;
            }
            self.inflight.insert(t.encoding.clone(), Vec::new());
            self.queue
                .send(Work { task: t, reply: self.reply.clone(), submitted: now })
                .map_err(|_| EvalError::Disconnected)?;
        }
        Ok(())
    }

    fn get_finished_evals(&mut self) -> Vec<EvalResult> {
        while let Ok(r) = self.rx.try_recv() {
            self.absorb(r);
        }
        self.ready.drain(..).collect()
    }

    fn await_evals(&mut self) -> Result<Vec<EvalResult>, EvalError> {
        if self.ready.is_empty() && self.live > 0 {
            let r = self.rx.recv().map_err(|_| EvalError::Disconnected)?;
            self.absorb(r);
        }
        Ok(self.get_finished_evals())
    }

    fn outstanding(&self) -> usize {
        self.live + self.ready.len()
    }

    fn now(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bench(dur: DurationModel) -> Arc<dyn Benchmark> {
        Arc::new(LandscapeBenchmark { landscape: SyntheticLandscape::additive(&[4, 4, 4], 3), durations: dur })
    }

    fn task(id: u64, agent: usize, enc: Vec<usize>) -> EvalTask {
        EvalTask { id, agent, encoding: enc, budget: FidelityBudget::default(), seed: 0 }
    }

    #[test]
    fn two_workers_three_unit_tasks() {
        let jobs = [Job { ready: 0.0, duration: 1.0, timeout: None }; 3];
        let (out, busy) = run_simulated(ClusterModel { workers: 2, dispatch_latency: 0.0 }, &jobs);
        let makespan = out.iter().map(|o| o.end).fold(0.0, f64::max);
        assert_eq!(makespan, 2.0);
        let total: f64 = busy.iter().map(|b| b.end - b.start).sum();
        assert_eq!(total / (2.0 * makespan), 0.75);
    }

    #[test]
    fn single_task_fills_its_worker() {
        let (out, busy) = run_simulated(ClusterModel { workers: 1, dispatch_latency: 0.0 }, &[Job { ready: 0.0, duration: 3.5, timeout: None }]);
        assert_eq!(out[0].end, 3.5);
        assert_eq!(busy[0].end - busy[0].start, 3.5);
    }

    #[test]
    fn timeout_occupies_exactly_the_timeout() {
        let (out, busy) = run_simulated(ClusterModel { workers: 1, dispatch_latency: 0.0 }, &[Job { ready: 0.0, duration: 9.0, timeout: Some(4.0) }]);
        assert!(out[0].timed_out);
        assert_eq!(busy[0].end - busy[0].start, 4.0);
    }

    #[test]
    fn dispatch_latency_delays_start() {
        let (out, _) = run_simulated(ClusterModel { workers: 2, dispatch_latency: 0.5 }, &[Job { ready: 1.0, duration: 1.0, timeout: None }]);
        assert_eq!(out[0].start, 1.5);
    }

    #[test]
    fn same_agent_hits_cache_other_agent_does_not() {
        let mut ev = SimulatedEvaluator::new(bench(DurationModel::Constant { seconds: 2.0 }), ClusterModel { workers: 2, dispatch_latency: 0.0 }, 2);
        ev.add_eval_batch(vec![task(1, 0, vec![1, 2, 3])]).unwrap();
        assert!(ev.get_finished_evals().is_empty());
        let first = ev.await_evals().unwrap();
        assert_eq!(first.len(), 1);
        assert!(!first[0].from_cache);
        ev.add_eval_batch(vec![task(2, 0, vec![1, 2, 3]), task(3, 1, vec![1, 2, 3])]).unwrap();
        let hit = ev.get_finished_evals();
        assert_eq!(hit.len(), 1);
        assert!(hit[0].from_cache);
        assert_eq!(hit[0].reward, first[0].reward);
        assert_eq!(hit[0].duration, 0.0);
        assert!(hit[0].busy_interval().is_none());
        let other = ev.await_evals().unwrap();
        assert_eq!(other.len(), 1);
        assert!(!other[0].from_cache);
        assert_eq!(other[0].agent, 1);
        assert!(ev.get_finished_evals().is_empty());
    }

    #[test]
    fn empty_batch_and_duplicate_ids() {
        let mut ev = SimulatedEvaluator::new(bench(DurationModel::Constant { seconds: 1.0 }), ClusterModel { workers: 1, dispatch_latency: 0.0 }, 1);
        ev.add_eval_batch(vec![]).unwrap();
        assert!(ev.get_finished_evals().is_empty());
        ev.add_eval_batch(vec![task(5, 0, vec![0, 0, 0])]).unwrap();
        assert_eq!(ev.add_eval_batch(vec![task(5, 0, vec![1, 0, 0])]), Err(EvalError::DuplicateTask(5)));
    }

    #[test]
    fn results_delivered_once_in_completion_order() {
        let mut ev = SimulatedEvaluator::new(
            bench(DurationModel::Uniform { lo: 1.0, hi: 10.0, seed: 4 }),
            ClusterModel { workers: 3, dispatch_latency: 0.0 },
            1,
        );
        let tasks: Vec<EvalTask> = (0..6).map(|i| task(i, 0, vec![i as usize % 4, i as usize / 4, 1])).collect();
        ev.add_eval_batch(tasks).unwrap();
        let mut seen = Vec::new();
        while ev.outstanding() > 0 {
            let batch = ev.await_evals().unwrap();
            assert!(batch.windows(2).all(|w| w[0].end <= w[1].end));
            seen.extend(batch.into_iter().map(|r| r.task));
        }
        seen.sort();
        assert_eq!(seen, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn in_flight_duplicate_is_served_from_the_original() {
        let mut ev = SimulatedEvaluator::new(bench(DurationModel::Constant { seconds: 2.0 }), ClusterModel { workers: 4, dispatch_latency: 0.0 }, 1);
        ev.add_eval_batch(vec![task(1, 0, vec![2, 2, 2]), task(2, 0, vec![2, 2, 2])]).unwrap();
        let r = ev.await_evals().unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r.iter().filter(|x| x.from_cache).count(), 1);
        assert_eq!(r[0].reward, r[1].reward);
        assert_eq!(ev.outstanding(), 0);
    }

    #[test]
    fn local_pool_caches_per_agent() {
        let pool = LocalPool::new(bench(DurationModel::Constant { seconds: 0.0 }), 2);
        let mut a = pool.handle(0);
        let mut b = pool.handle(1);
        a.add_eval_batch(vec![task(1, 0, vec![3, 1, 0])]).unwrap();
        let r1 = a.await_evals().unwrap();
        assert_eq!(r1.len(), 1);
        assert!(!r1[0].from_cache);
        a.add_eval_batch(vec![task(2, 0, vec![3, 1, 0])]).unwrap();
        let r2 = a.get_finished_evals();
        assert!(r2[0].from_cache && r2[0].reward == r1[0].reward);
        b.add_eval_batch(vec![task(3, 1, vec![3, 1, 0])]).unwrap();
        let r3 = b.await_evals().unwrap();
        assert!(!r3[0].from_cache);
        assert_eq!(a.outstanding() + b.outstanding(), 0);
    }
}
