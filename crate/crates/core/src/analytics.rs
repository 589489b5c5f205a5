//! Log processing: reward trajectories, worker utilization, replication
//! bands, top-K selection, summary stats and full-fidelity post-training.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netbench::{compile, train, Clock, FidelityBudget, TabularDataset, Task};
use crate::orchestrator::{Event, SearchLog};
use crate::space::{decode, ArchGraph, ArchitectureEncoding, SearchSpace};

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("need at least {need} logs, got {got}")]
    TooFewLogs { need: usize, got: usize },
    #[error("logs come from different benchmarks: {0:?} vs {1:?}")]
    BenchmarkMismatch(String, String),
    #[error("bin width must be positive")]
    BadBin,
    #[error("quantile {0} outside [0, 1]")]
    BadQuantile(f64),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub time: f64,
    pub reward: f64,
    pub best: f64,
    pub agent: usize,
}

/// Reward events in log order with the running best.
pub fn trajectory_points(log: &SearchLog) -> Vec<TrajectoryPoint> {
    let mut best = f64::NEG_INFINITY;
    log.events
        .iter()
        .filter_map(|e| match e {
            Event::EvalFinished { t, agent, reward, .. } => {
                best = best.max(*reward);
                Some(TrajectoryPoint { time: *t, reward: *reward, best, agent: *agent })
            }
            _ => None,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryBin {
    pub start: f64,
    pub end: f64,
    pub count: usize,
    pub max: Option<f64>,
    pub mean: Option<f64>,
    /// Best reward at or before the end of the bin.
    pub best: Option<f64>,
}

fn bin_index(t: f64, bin: f64) -> usize {
    (t / bin).floor().max(0.0) as usize
}

/// Per-bin max and mean reward plus the running best, from time 0 to the last reward.
pub fn trajectory(log: &SearchLog, bin: f64) -> Result<Vec<TrajectoryBin>, AnalyticsError> {
    if !(bin > 0.0) {
        return Err(AnalyticsError::BadBin);
    }
    let pts = trajectory_points(log);
    let Some(last) = pts.iter().map(|p| p.time).max_by(f64::total_cmp) else {
        return Ok(Vec::new());
    };
    let nb = bin_index(last, bin) + 1;
    let mut sums = vec![(0usize, f64::NEG_INFINITY, 0.0f64); nb];
    for p in &pts {
        let s = &mut sums[bin_index(p.time, bin)];
        s.0 += 1;
        s.1 = s.1.max(p.reward);
        s.2 += p.reward;
    }
    let mut best: Option<f64> = None;
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(i, (count, max, sum))| {
            let (max, mean) = if count > 0 { (Some(max), Some(sum / count as f64)) } else { (None, None) };
            if let Some(m) = max {
                best = Some(best.map_or(m, |b: f64| b.max(m)));
            }
            TrajectoryBin { start: i as f64 * bin, end: (i + 1) as f64 * bin, count, max, mean, best }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilizationBin {
    pub start: f64,
    pub end: f64,
    pub value: f64,
}

fn busy_intervals(log: &SearchLog) -> Vec<(f64, f64)> {
    log.events
        .iter()
        .filter_map(|e| match e {
            Event::WorkerBusyInterval { start, end, .. } => Some((*start, *end)),
            _ => None,
        })
        .collect()
}

/// Last timestamp in the log.
pub fn horizon(log: &SearchLog) -> f64 {
    log.events
        .iter()
        .map(|e| match e {
            Event::WorkerBusyInterval { end, .. } => *end,
            other => other.time(),
        })
        .fold(0.0, f64::max)
}

/// Fraction of worker capacity busy in each bin.
pub fn utilization(log: &SearchLog, bin: f64, workers: usize) -> Result<Vec<UtilizationBin>, AnalyticsError> {
    if !(bin > 0.0) || workers == 0 {
        return Err(AnalyticsError::BadBin);
    }
    let iv = busy_intervals(log);
    let h = horizon(log);
    if h <= 0.0 {
        return Ok(Vec::new());
    }
    let nb = (h / bin).ceil().max(1.0) as usize;
    let mut busy = vec![0.0f64; nb];
    for (s, e) in iv {
        let first = bin_index(s, bin).min(nb - 1);
        let mut i = first;
        while i < nb && (i as f64) * bin < e {
            let lo = s.max(i as f64 * bin);
            let hi = e.min((i + 1) as f64 * bin);
            if hi > lo {
                busy[i] += hi - lo;
            }
            i += 1;
        }
    }
    let cap = bin * workers as f64;
    Ok(busy
        .into_iter()
        .enumerate()
        .map(|(i, b)| UtilizationBin { start: i as f64 * bin, end: (i + 1) as f64 * bin, value: (b / cap).clamp(0.0, 1.0) })
        .collect())
}

/// Busy time over `[0, until]` divided by `until × workers`.
pub fn mean_utilization(log: &SearchLog, workers: usize, until: f64) -> f64 {
    if until <= 0.0 || workers == 0 {
        return 0.0;
    }
    let busy: f64 = busy_intervals(log).iter().map(|&(s, e)| (e.min(until) - s).max(0.0)).sum();
    busy / (until * workers as f64)
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub time: f64,
    /// One value per requested quantile, in request order.
    pub values: Vec<f64>,
}

pub const DEFAULT_QUANTILES: [f64; 3] = [0.1, 0.5, 0.9];

fn best_at(points: &[TrajectoryPoint], t: f64) -> Option<f64> {
    let n = points.partition_point(|p| p.time <= t);
    n.checked_sub(1).map(|i| points[i].best)
}

/// Quantiles of best-so-far across replications at the end of each bin.
/// Bins before every replication has a reward are skipped.
pub fn quantile_bands(logs: &[SearchLog], bin: f64, qs: &[f64]) -> Result<Vec<Band>, AnalyticsError> {
    if logs.len() < 2 {
        return Err(AnalyticsError::TooFewLogs { need: 2, got: logs.len() });
    }
    if !(bin > 0.0) {
        return Err(AnalyticsError::BadBin);
    }
    if let Some(q) = qs.iter().find(|q| !(0.0..=1.0).contains(*q)) {
        return Err(AnalyticsError::BadQuantile(*q));
    }
    let name = &logs[0].header.benchmark;
    if let Some(other) = logs.iter().find(|l| &l.header.benchmark != name) {
        return Err(AnalyticsError::BenchmarkMismatch(name.clone(), other.header.benchmark.clone()));
    }
    let series: Vec<Vec<TrajectoryPoint>> = logs.iter().map(trajectory_points).collect();
    let h = logs.iter().map(horizon).fold(0.0, f64::max);
    let nb = (h / bin).ceil() as usize;
    let mut out = Vec::new();
    for i in 0..nb {
        let t = (i + 1) as f64 * bin;
        let Some(mut vals) = series.iter().map(|s| best_at(s, t)).collect::<Option<Vec<f64>>>() else {
            continue;
        };
        vals.sort_by(f64::total_cmp);
        out.push(Band { time: t, values: qs.iter().map(|&q| quantile(&vals, q)).collect() });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopEntry {
    pub encoding: Vec<usize>,
    pub reward: f64,
    /// Time the winning reward was first seen.
    pub time: f64,
    pub params: usize,
}

/// Highest-reward unique encodings. Ties go to the earlier time, then the
/// lexicographically smaller encoding.
pub fn top_k(log: &SearchLog, k: usize) -> Vec<TopEntry> {
    let mut best: HashMap<&[usize], TopEntry> = HashMap::new();
    for e in &log.events {
        if let Event::EvalFinished { t, encoding, reward, params, .. } = e {
            let cand = TopEntry { encoding: encoding.clone(), reward: *reward, time: *t, params: *params };
            match best.get_mut(encoding.as_slice()) {
                Some(cur) if cand.reward > cur.reward || (cand.reward == cur.reward && cand.time < cur.time) => *cur = cand,
                Some(_) => {}
                None => {
                    best.insert(encoding.as_slice(), cand);
                }
            }
        }
    }
    let mut v: Vec<TopEntry> = best.into_values().collect();
    v.sort_by(|a, b| {
        b.reward
            .total_cmp(&a.reward)
            .then(a.time.total_cmp(&b.time))
            .then_with(|| a.encoding.cmp(&b.encoding))
    });
    v.truncate(k);
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogStats {
    pub benchmark: String,
    pub submitted: usize,
    pub finished: usize,
    pub fresh: usize,
    pub cached: usize,
    pub unique_architectures: usize,
    pub timeouts: usize,
    pub failures: usize,
    pub gradient_updates: usize,
    pub best_reward: Option<f64>,
    pub horizon: f64,
    pub mean_utilization: f64,
    pub end_reason: Option<String>,
}

pub fn stats(log: &SearchLog) -> LogStats {
    use crate::netbench::EvalStatus;
    let mut s = LogStats {
        benchmark: log.header.benchmark.clone(),
        submitted: 0,
        finished: 0,
        fresh: 0,
        cached: 0,
        unique_architectures: 0,
        timeouts: 0,
        failures: 0,
        gradient_updates: 0,
        best_reward: None,
        horizon: horizon(log),
        mean_utilization: 0.0,
        end_reason: log.end_reason().map(str::to_string),
    };
    let mut seen = std::collections::HashSet::new();
    for e in &log.events {
        match e {
            Event::EvalSubmitted { .. } => s.submitted += 1,
            Event::EvalFinished { encoding, reward, status, from_cache, .. } => {
                s.finished += 1;
                if *from_cache {
                    s.cached += 1;
                } else {
                    s.fresh += 1;
                }
                match status {
                    EvalStatus::Timeout => s.timeouts += 1,
                    EvalStatus::Failed => s.failures += 1,
                    EvalStatus::Ok => {}
                }
                seen.insert(encoding.clone());
                s.best_reward = Some(s.best_reward.map_or(*reward, |b: f64| b.max(*reward)));
            }
            Event::GradientApplied { .. } => s.gradient_updates += 1,
            _ => {}
        }
    }
    s.unique_architectures = seen.len();
    s.mean_utilization = mean_utilization(log, log.header.workers, s.horizon);
    s
}

// --- post-training ---------------------------------------------------------------

/// Reference model figures: parameters, training seconds, accuracy (R² or ACC).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRecord {
    pub name: String,
    pub params: usize,
    pub train_seconds: f64,
    pub accuracy: f64,
}

pub const BASELINE_PRESETS: [&str; 3] = ["combo", "uno", "nt3"];

/// Published reference figures for the three benchmarks.
pub fn baseline_preset(name: &str) -> Option<BaselineRecord> {
    let (params, train_seconds, accuracy) = match name {
        "combo" => (13_772_001, 705.26, 0.926),
        "uno" => (19_274_001, 164.94, 0.649),
        "nt3" => (96_777_878, 247.63, 0.986),
        _ => return None,
    };
    Some(BaselineRecord { name: name.to_string(), params, train_seconds, accuracy })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub arch_id: String,
    /// Accuracy over baseline accuracy.
    pub accuracy_ratio: f64,
    /// Baseline parameters over architecture parameters.
    pub param_ratio: f64,
    /// Baseline training time over architecture training time.
    pub time_ratio: f64,
}

pub fn ratio_row(arch_id: &str, params: usize, seconds: f64, accuracy: f64, base: &BaselineRecord) -> RatioRow {
    RatioRow {
        arch_id: arch_id.to_string(),
        accuracy_ratio: accuracy / base.accuracy,
        param_ratio: base.params as f64 / params as f64,
        time_ratio: base.train_seconds / seconds,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub arch_id: String,
    pub encoding: String,
    pub search_reward: f64,
    pub status: String,
    pub params: usize,
    pub train_seconds: f64,
    /// Validation R² (regression) or accuracy (classification).
    pub accuracy: f64,
    pub final_loss: f64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostTrainReport {
    pub ratios: Vec<RatioRow>,
    pub metrics: Vec<MetricRow>,
}

/// Full-fidelity training protocol: all rows, no timeout.
pub fn full_budget(epochs: usize) -> FidelityBudget {
    FidelityBudget { epochs, subset_fraction: 1.0, timeout: None, ..FidelityBudget::default() }
}

/// Train one graph at full fidelity; returns (params, seconds, accuracy, final loss).
pub fn train_full(
    graph: &ArchGraph,
    dataset: &TabularDataset,
    epochs: usize,
    seed: u64,
    clock: &Clock,
) -> Result<(usize, f64, f64, f64), String> {
    let program = compile(graph, &dataset.dims(), dataset.task).map_err(|e| e.to_string())?;
    let (r, _) = train(&program, dataset, &full_budget(epochs), seed, clock).map_err(|e| e.to_string())?;
    if !r.metric.is_finite() {
        return Err(format!("training ended with status {:?}", r.status));
    }
    Ok((r.params, r.duration, r.metric, r.epoch_losses.last().copied().unwrap_or(f64::NAN)))
}

/// Measure a reference graph under the same protocol as [`post_train`].
pub fn measure_baseline(
    name: &str,
    graph: &ArchGraph,
    dataset: &TabularDataset,
    epochs: usize,
    seed: u64,
    clock: &Clock,
) -> Result<BaselineRecord, String> {
    let (params, train_seconds, accuracy, _) = train_full(graph, dataset, epochs, seed, clock)?;
    Ok(BaselineRecord { name: name.to_string(), params, train_seconds, accuracy })
}

pub fn arch_id(rank: usize) -> String {
    format!("arch_{rank:03}")
}

fn encoding_string(e: &[usize]) -> String {
    e.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("-")
}

/// Retrain each entry at full fidelity (in parallel over `threads`). Failures
/// are recorded in the metrics and produce no ratio row.
pub fn post_train(
    space: &SearchSpace,
    dataset: &TabularDataset,
    entries: &[TopEntry],
    epochs: usize,
    baseline: &BaselineRecord,
    seed: u64,
    clock: &Clock,
    threads: usize,
) -> PostTrainReport {
    let next = AtomicUsize::new(0);
    let results: Mutex<BTreeMap<usize, MetricRow>> = Mutex::new(BTreeMap::new());
    std::thread::scope(|s| {
        for _ in 0..threads.max(1).min(entries.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(entry) = entries.get(i) else { break };
                let id = arch_id(i + 1);
                let mut row = MetricRow {
                    arch_id: id,
                    encoding: encoding_string(&entry.encoding),
                    search_reward: entry.reward,
                    status: "ok".into(),
                    params: 0,
                    train_seconds: 0.0,
                    accuracy: f64::NAN,
                    final_loss: f64::NAN,
                    error: String::new(),
                };
                let res = decode(space, &ArchitectureEncoding(entry.encoding.clone()))
                    .map_err(|e| e.to_string())
                    .and_then(|g| train_full(&g, dataset, epochs, seed, clock));
                match res {
                    Ok((p, secs, acc, loss)) => {
                        row.params = p;
                        row.train_seconds = secs;
                        row.accuracy = acc;
                        row.final_loss = loss;
                    }
                    Err(e) => {
                        row.status = "failed".into();
                        row.error = e;
                    }
                }
                results.lock().expect("results lock").insert(i, row);
            });
        }
    });
    let metrics: Vec<MetricRow> = results.into_inner().expect("results lock").into_values().collect();
    let ratios = metrics
        .iter()
        .filter(|m| m.status == "ok")
        .map(|m| ratio_row(&m.arch_id, m.params, m.train_seconds, m.accuracy, baseline))
        .collect();
    PostTrainReport { ratios, metrics }
}

/// Name of the accuracy measure for a task.
pub fn accuracy_name(task: Task) -> &'static str {
    match task {
        Task::Regression => "r2",
        Task::Classification => "accuracy",
    }
}

// --- output ----------------------------------------------------------------------

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), AnalyticsError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trajectory_csv(path: &Path, bins: &[TrajectoryBin]) -> Result<(), AnalyticsError> {
    write_rows(
        path,
        &["start", "end", "count", "max", "mean", "best"],
        bins.iter().map(|b| vec![b.start.to_string(), b.end.to_string(), b.count.to_string(), opt(b.max), opt(b.mean), opt(b.best)]),
    )
}

pub fn write_points_csv(path: &Path, pts: &[TrajectoryPoint]) -> Result<(), AnalyticsError> {
    write_rows(
        path,
        &["time", "agent", "reward", "best"],
        pts.iter().map(|p| vec![p.time.to_string(), p.agent.to_string(), p.reward.to_string(), p.best.to_string()]),
    )
}

pub fn write_utilization_csv(path: &Path, bins: &[UtilizationBin]) -> Result<(), AnalyticsError> {
    write_rows(path, &["start", "end", "utilization"], bins.iter().map(|b| vec![b.start.to_string(), b.end.to_string(), b.value.to_string()]))
}

pub fn write_bands_csv(path: &Path, qs: &[f64], bands: &[Band]) -> Result<(), AnalyticsError> {
    let names: Vec<String> = std::iter::once("time".to_string()).chain(qs.iter().map(|q| format!("q{q}"))).collect();
    let header: Vec<&str> = names.iter().map(String::as_str).collect();
    write_rows(
        path,
        &header,
        bands.iter().map(|b| std::iter::once(b.time.to_string()).chain(b.values.iter().map(|v| v.to_string())).collect()),
    )
}

pub fn write_ratios_csv(path: &Path, rows: &[RatioRow]) -> Result<(), AnalyticsError> {
    write_rows(
        path,
        &["arch_id", "accuracy_ratio", "param_ratio", "time_ratio"],
        rows.iter().map(|r| vec![r.arch_id.clone(), r.accuracy_ratio.to_string(), r.param_ratio.to_string(), r.time_ratio.to_string()]),
    )
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<(), AnalyticsError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// One polyline for [`line_chart_svg`].
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Self-contained SVG line chart.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{pad} {pad} V{} H{}" fill="none" stroke="black"/>"#,
        h - pad,
        w - pad
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#, w / 2.0, h - 12.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 14 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        escape(y_label)
    );
    for (v, y) in [(y0, h - pad), (y1, pad)] {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="10">{:.3}</text>"#, pad - 4.0, y + 4.0, v);
    }
    for (v, x) in [(x0, pad), (x1, w - pad)] {
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="10">{:.1}</text>"#, h - pad + 14.0, v);
    }
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let d: Vec<String> = ser
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        if !d.is_empty() {
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, d.join(" "));
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="{color}">{}</text>"#,
            w - pad - 120.0,
            pad + 14.0 * (i as f64 + 1.0),
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
