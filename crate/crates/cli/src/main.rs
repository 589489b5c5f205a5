use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nas_core::analytics::{self, BaselineRecord, Series};
use nas_core::netbench::{compile, generate_dataset, load_dataset, write_dataset, Clock, TabularDataset, DATASET_PRESETS};
use nas_core::orchestrator::{
    load_space_spec, run_search_with, BenchmarkConfig, DatasetSource, RunOptions, SearchConfig, SearchError, SearchLog,
    Strategy,
};
use nas_core::space::{baseline_graph, build_space, decode, sample_random, ArchitectureEncoding, BaselineDims, SearchSpace};

#[derive(Parser)]
#[command(name = "nas", version, about = "Reinforcement-learning neural architecture search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect search spaces.
    #[command(subcommand)]
    Space(SpaceCmd),
    /// Run searches.
    #[command(subcommand)]
    Search(SearchCmd),
    /// Summarize search logs.
    #[command(subcommand)]
    Analyze(AnalyzeCmd),
    /// Retrain the best architectures of a log at full fidelity and compare them to a reference.
    PostTrain(PostTrainArgs),
    /// Train the dense reference network on a search's dataset and write its figures.
    Baseline(BaselineArgs),
    /// Synthetic datasets.
    #[command(subcommand)]
    Data(DataCmd),
}

#[derive(Subcommand)]
enum SpaceCmd {
    /// Exact number of architectures.
    Size { space: String },
    /// Uniformly sampled encodings, one per line.
    Sample {
        space: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Decision slots and their choices, or the decoded network for one encoding.
    Describe {
        space: String,
        /// Comma or dash separated choice indices.
        #[arg(long)]
        encoding: Option<String>,
    },
}

#[derive(Subcommand)]
enum SearchCmd {
    Run(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    agents: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum AnalyzeCmd {
    /// Binned reward trajectory (CSV).
    Trajectory {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value_t = 60.0)]
        bin: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fraction of busy workers per time bin (CSV).
    Utilization {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value_t = 60.0)]
        bin: f64,
        /// Defaults to the worker count recorded in the log.
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Quantile bands of the best-so-far reward across replications (CSV).
    Quantiles {
        #[arg(long = "log", required = true, num_args = 1..)]
        logs: Vec<PathBuf>,
        #[arg(long, default_value_t = 60.0)]
        bin: f64,
        #[arg(long, value_delimiter = ',', default_values_t = analytics::DEFAULT_QUANTILES)]
        quantiles: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Best distinct architectures (JSON).
    Topk {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Counts, best reward and utilization (JSON).
    Stats {
        #[arg(long)]
        log: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ClockChoice {
    /// Measured wall-clock seconds.
    Wall,
    /// The clock the search used.
    Search,
}

#[derive(Args)]
struct PostTrainArgs {
    #[arg(long)]
    log: PathBuf,
    #[arg(long, default_value_t = 50)]
    top: usize,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    /// Preset name (combo, uno, nt3) or a JSON file with name, params, train_seconds and accuracy.
    #[arg(long)]
    baseline: String,
    /// Defaults to the directory holding the log.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "wall")]
    clock: ClockChoice,
}

#[derive(Args)]
struct BaselineArgs {
    /// Search log whose configuration names the dataset.
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    log: Option<PathBuf>,
    /// Search configuration naming the dataset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Reference topology: combo, uno or nt3. Defaults to the prefix of the space name.
    #[arg(long)]
    name: Option<String>,
    #[arg(long, default_value_t = 1000)]
    width: usize,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "wall")]
    clock: ClockChoice,
    #[arg(long, default_value = "baseline.json")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum DataCmd {
    /// Generate a preset dataset and write its manifest and CSV files.
    Gen {
        #[arg(long)]
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

type Res<T> = Result<T, Failure>;

fn cfg<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Config(e.to_string())
}

fn rt<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Space(c) => space_cmd(c),
        Command::Search(SearchCmd::Run(a)) => search_run(a),
        Command::Analyze(c) => analyze_cmd(c),
        Command::PostTrain(a) => post_train(a),
        Command::Baseline(a) => baseline(a),
        Command::Data(DataCmd::Gen { preset, seed, out }) => data_gen(&preset, seed, &out),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}

fn load_space(name: &str) -> Res<SearchSpace> {
    build_space(load_space_spec(name).map_err(cfg)?).map_err(cfg)
}

fn parse_encoding(s: &str) -> Res<ArchitectureEncoding> {
    s.split([',', '-'])
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map(ArchitectureEncoding)
        .map_err(|e| Failure::Config(format!("bad encoding {s:?}: {e}")))
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("value serializes")
}

fn space_cmd(c: SpaceCmd) -> Res<()> {
    match c {
        SpaceCmd::Size { space } => println!("{}", load_space(&space)?.size()),
        SpaceCmd::Sample { space, seed, count } => {
            let s = load_space(&space)?;
            for i in 0..count {
                println!("{}", sample_random(&s, nas_core::derive_seed(seed, i as u64)));
            }
        }
        SpaceCmd::Describe { space, encoding: None } => {
            let s = load_space(&space)?;
            println!("space {space}: {} slots, {} architectures", s.num_slots(), s.size());
            for (k, slot) in s.slots().iter().enumerate() {
                let names: Vec<String> = s.choices(k).iter().map(|c| c.to_string()).collect();
                println!("slot {k:>3} {} arity {}: {}", slot.path, slot.arity, names.join(" | "));
            }
        }
        SpaceCmd::Describe { space, encoding: Some(e) } => {
            let s = load_space(&space)?;
            let enc = parse_encoding(&e)?;
            let graph = decode(&s, &enc).map_err(cfg)?;
            let program = compile(&graph, &graph.inputs(), nas_core::netbench::Task::Regression).map_err(rt)?;
            println!("{}", to_json(&program.summary()));
        }
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Res<()> {
    fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn search_run(a: RunArgs) -> Res<()> {
    let mut config = SearchConfig::load(&a.config).map_err(cfg)?;
    if let Some(s) = a.strategy {
        config.strategy = s;
    }
    if let Some(n) = a.agents {
        config.num_agents = n;
    }
    if let Some(m) = a.workers {
        config.workers_per_agent = m;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    config.validate().map_err(cfg)?;
    fs::create_dir_all(&a.out).map_err(rt)?;
    let opts = RunOptions { checkpoint_dir: config.checkpoint_every.map(|_| a.out.join("checkpoints")) };
    let started = std::time::Instant::now();
    let log = match run_search_with(&config, &opts) {
        Ok(run) => run.log,
        Err(SearchError::Config(e)) => return Err(cfg(e)),
        Err(SearchError::Runtime { message, partial }) => {
            let path = a.out.join("log.jsonl");
            partial.save(&path).map_err(rt)?;
            return Err(Failure::Runtime(format!("{message} (partial log in {})", path.display())));
        }
    };
    write_run_outputs(&log, &a.out)?;
    let st = analytics::stats(&log);
    eprintln!(
        "search ended ({}) after {:.1}s simulated / {:.1}s real: {} evaluations, best reward {}",
        st.end_reason.as_deref().unwrap_or("?"),
        st.horizon,
        started.elapsed().as_secs_f64(),
        st.finished,
        st.best_reward.map(|r| format!("{r:.4}")).unwrap_or_else(|| "-".into()),
    );
    println!("{}", a.out.display());
    Ok(())
}

fn default_bin(log: &SearchLog) -> f64 {
    let h = analytics::horizon(log);
    if h > 0.0 {
        h / 100.0
    } else {
        1.0
    }
}

fn write_run_outputs(log: &SearchLog, out: &Path) -> Res<()> {
    log.save(&out.join("log.jsonl")).map_err(rt)?;
    let bin = default_bin(log);
    let traj = analytics::trajectory(log, bin).map_err(rt)?;
    analytics::write_trajectory_csv(&out.join("trajectory.csv"), &traj).map_err(rt)?;
    let util = analytics::utilization(log, bin, log.header.workers).map_err(rt)?;
    analytics::write_utilization_csv(&out.join("utilization.csv"), &util).map_err(rt)?;
    write_text(&out.join("topk.json"), &to_json(&analytics::top_k(log, 50)))?;
    let best = Series { name: "best".into(), points: traj.iter().filter_map(|b| b.best.map(|v| (b.end, v))).collect() };
    let mean = Series { name: "bin mean".into(), points: traj.iter().filter_map(|b| b.mean.map(|v| (b.end, v))).collect() };
    write_text(&out.join("trajectory.svg"), &analytics::line_chart_svg("Reward", "time (s)", "reward", &[best, mean]))?;
    let u = Series { name: "utilization".into(), points: util.iter().map(|b| (b.start, b.value)).collect() };
    write_text(&out.join("utilization.svg"), &analytics::line_chart_svg("Worker utilization", "time (s)", "busy fraction", &[u]))
}

fn read_log(path: &Path) -> Res<SearchLog> {
    let (log, bad) = SearchLog::load(path).map_err(cfg)?;
    for b in &bad {
        eprintln!("warning: {}:{}: {}", path.display(), b.line, b.message);
    }
    Ok(log)
}

fn analyze_cmd(c: AnalyzeCmd) -> Res<()> {
    match c {
        AnalyzeCmd::Trajectory { log, bin, out } => {
            let bins = analytics::trajectory(&read_log(&log)?, bin).map_err(cfg)?;
            match out {
                Some(p) => analytics::write_trajectory_csv(&p, &bins).map_err(rt)?,
                None => println!("{}", to_json(&bins)),
            }
        }
        AnalyzeCmd::Utilization { log, bin, workers, out } => {
            let l = read_log(&log)?;
            let w = workers.unwrap_or(l.header.workers);
            let bins = analytics::utilization(&l, bin, w).map_err(cfg)?;
            match out {
                Some(p) => analytics::write_utilization_csv(&p, &bins).map_err(rt)?,
                None => println!("{}", to_json(&bins)),
            }
        }
        AnalyzeCmd::Quantiles { logs, bin, quantiles, out } => {
            let ls = logs.iter().map(|p| read_log(p)).collect::<Res<Vec<_>>>()?;
            let bands = analytics::quantile_bands(&ls, bin, &quantiles).map_err(cfg)?;
            match out {
                Some(p) => analytics::write_bands_csv(&p, &quantiles, &bands).map_err(rt)?,
                None => println!("{}", to_json(&bands)),
            }
        }
        AnalyzeCmd::Topk { log, k } => println!("{}", to_json(&analytics::top_k(&read_log(&log)?, k))),
        AnalyzeCmd::Stats { log } => println!("{}", to_json(&analytics::stats(&read_log(&log)?))),
    }
    Ok(())
}

/// Space, dataset and search clock of a training search.
fn training_setup(config: &SearchConfig) -> Res<(String, SearchSpace, TabularDataset, Clock)> {
    let BenchmarkConfig::Training { space, dataset, clock } = &config.benchmark else {
        return Err(Failure::Config("the search did not train networks (synthetic landscape)".into()));
    };
    let ds = match dataset {
        DatasetSource::Preset { preset, seed } => generate_dataset(preset, *seed),
        DatasetSource::Manifest { manifest } => load_dataset(manifest),
    }
    .map_err(cfg)?;
    let spec = load_space_spec(space).map_err(cfg)?.with_input_dims(&ds.dims()).map_err(cfg)?;
    Ok((space.clone(), build_space(spec).map_err(cfg)?, ds, *clock))
}

fn log_config(log: &SearchLog) -> Res<SearchConfig> {
    log.header.config.clone().ok_or_else(|| Failure::Config("log header carries no search configuration".into()))
}

fn pick_clock(choice: ClockChoice, search: Clock) -> Clock {
    match choice {
        ClockChoice::Wall => Clock::Wall,
        ClockChoice::Search => search,
    }
}

fn load_baseline(s: &str) -> Res<BaselineRecord> {
    if let Some(b) = analytics::baseline_preset(s) {
        return Ok(b);
    }
    let text = fs::read_to_string(s).map_err(|e| Failure::Config(format!("baseline {s:?}: {e}")))?;
    serde_json::from_str(&text).map_err(|e| Failure::Config(format!("baseline {s:?}: {e}")))
}

fn post_train(a: PostTrainArgs) -> Res<()> {
    let log = read_log(&a.log)?;
    let base = load_baseline(&a.baseline)?;
    let (_, space, ds, clock) = training_setup(&log_config(&log)?)?;
    let entries = analytics::top_k(&log, a.top);
    if entries.is_empty() {
        return Err(Failure::Runtime("log has no successful evaluations".into()));
    }
    let out = a.out.unwrap_or_else(|| a.log.parent().map(Path::to_path_buf).unwrap_or_default());
    fs::create_dir_all(&out).map_err(rt)?;
    eprintln!("post-training {} architectures for {} epochs", entries.len(), a.epochs);
    let report = analytics::post_train(&space, &ds, &entries, a.epochs, &base, a.seed, &pick_clock(a.clock, clock), a.threads);
    analytics::write_ratios_csv(&out.join("ratios.csv"), &report.ratios).map_err(rt)?;
    analytics::write_metrics_csv(&out.join("metrics.csv"), &report.metrics).map_err(rt)?;
    write_text(&out.join("posttrain.json"), &to_json(&report))?;
    let name = analytics::accuracy_name(ds.task);
    println!("arch_id,{name},params,{name}_ratio,param_ratio,time_ratio");
    for (m, r) in report.metrics.iter().filter(|m| m.status == "ok").zip(&report.ratios) {
        println!("{},{:.4},{},{:.4},{:.3},{:.3}", m.arch_id, m.accuracy, m.params, r.accuracy_ratio, r.param_ratio, r.time_ratio);
    }
    let failed = report.metrics.len() - report.ratios.len();
    if failed > 0 {
        eprintln!("{failed} architectures failed to train; see metrics.csv");
    }
    Ok(())
}

fn baseline(a: BaselineArgs) -> Res<()> {
    let config = match (&a.log, &a.config) {
        (Some(l), _) => log_config(&read_log(l)?)?,
        (None, Some(c)) => SearchConfig::load(c).map_err(cfg)?,
        (None, None) => unreachable!("clap requires one of --log or --config"),
    };
    let (space_name, _, ds, clock) = training_setup(&config)?;
    let name = a.name.unwrap_or_else(|| space_name.split('_').next().unwrap_or_default().to_string());
    let graph = baseline_graph(&name, &BaselineDims { inputs: ds.dims(), width: a.width }).map_err(cfg)?;
    let rec = analytics::measure_baseline(&name, &graph, &ds, a.epochs, a.seed, &pick_clock(a.clock, clock)).map_err(rt)?;
    write_text(&a.out, &to_json(&rec))?;
    println!("{}", to_json(&rec));
    Ok(())
}

fn data_gen(preset: &str, seed: u64, out: &Path) -> Res<()> {
    if !DATASET_PRESETS.contains(&preset) {
        return Err(Failure::Config(format!("unknown preset {preset:?}; choose one of {DATASET_PRESETS:?}")));
    }
    let ds = generate_dataset(preset, seed).map_err(cfg)?;
    let manifest = write_dataset(&ds, out).map_err(rt)?;
    println!("{}", manifest.display());
    Ok(())
}
