use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::Args;
use hrc_core::bench::{
    build_policy, generate_random_htm, run_benchmark, summarize, write_csv, BenchResult, PolicyKind, Scenario,
};
use hrc_core::demdp::TraceRecord;
use hrc_core::graph::{check_deterministic, plan, GraphOptions, TabularPolicy};
use hrc_core::intent::{
    map_goal, read_trajectory_csv, run_filter, simulate_trajectory, write_filter_csv, Belief, Goal, GoalSet,
    IntentParams, Reach,
};
use hrc_core::policy::{evaluate, run_episode_traced, RobotPolicy};
use hrc_core::rl::{train as train_q, write_curve, QTable, TrainConfig};
use hrc_core::{Env, HumanAction};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::task::TaskArgs;
use crate::{CliError, Format};

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn pool(workers: Option<usize>) -> Result<rayon::ThreadPool, CliError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        if w == 0 {
            return Err(CliError::Config("--workers must be at least 1".into()));
        }
        b = b.num_threads(w);
    }
    b.build().map_err(|e| CliError::Runtime(e.to_string()))
}

fn train_config(episodes: Option<u64>, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig { seed, ..Default::default() };
    if let Some(e) = episodes {
        cfg.episodes = e;
    }
    cfg
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long, default_value = "greedy")]
    policy: PolicyKind,
    /// Exported policy table to use instead of planning or training.
    #[arg(long, value_name = "FILE")]
    load: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training episodes for `rl`.
    #[arg(long)]
    episodes: Option<u64>,
    #[arg(long, default_value_t = 2_000_000)]
    max_nodes: usize,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

fn human_str(h: HumanAction) -> String {
    match h {
        HumanAction::Unknown => "?".into(),
        HumanAction::Idle => "idle".into(),
        HumanAction::Action(a) => a.0.to_string(),
    }
}

fn trace_rows(trace: &[TraceRecord]) -> Vec<[String; 8]> {
    trace
        .iter()
        .map(|r| {
            let s_a: Vec<String> = r.state.task.values().iter().map(|v| v.to_string()).collect();
            [
                r.k.to_string(),
                r.event.to_string(),
                r.dt.to_string(),
                r.time.to_string(),
                s_a.join(" "),
                human_str(r.state.human_action),
                if r.robot_action.is_idle() { "idle".into() } else { r.robot_action.0.to_string() },
                r.reward.to_string(),
            ]
        })
        .collect()
}

const TRACE_HEADER: [&str; 8] = ["k", "event", "dt", "time", "s_a", "human_action", "robot_action", "reward"];

fn load_policy(kind: PolicyKind, path: &Path) -> Result<Arc<dyn RobotPolicy>, CliError> {
    let text = std::fs::read_to_string(path)?;
    let bad = |e: String| CliError::Config(format!("{}: {e}", path.display()));
    Ok(match kind {
        PolicyKind::Graph => Arc::new(TabularPolicy::import(&text).map_err(|e| bad(e.to_string()))?),
        PolicyKind::Rl => Arc::new(QTable::import(&text).map_err(bad)?),
        _ => return Err(CliError::Config("--load needs --policy graph or rl".into())),
    })
}

pub fn simulate(a: SimulateArgs) -> Result<(), CliError> {
    let scenario = a.task.single()?;
    let policy = match &a.load {
        Some(p) => load_policy(a.policy, p)?,
        None => {
            let graph = GraphOptions { max_nodes: a.max_nodes, ..Default::default() };
            build_policy(a.policy, &scenario, &graph, &train_config(a.episodes, a.seed))?
        }
    };
    let env = Env::new(scenario.htm.clone(), scenario.cfg.clone());
    let (result, trace) = run_episode_traced(policy.as_ref(), &env, a.seed).map_err(|e| CliError::Runtime(e.to_string()))?;
    let text = match a.format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(&json!({ "result": result, "trace": trace })).unwrap();
            s.push('\n');
            s
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(TRACE_HEADER)?;
            for row in trace_rows(&trace) {
                w.write_record(&row)?;
            }
            String::from_utf8(w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?).unwrap()
        }
        Format::Table => {
            let mut s = format!("{:>4} {:>2} {:>4} {:>5}  {:<24} {:>6} {:>6}\n", "k", "ev", "dt", "time", "s_a", "human", "robot");
            for r in trace_rows(&trace) {
                s += &format!("{:>4} {:>2} {:>4} {:>5}  {:<24} {:>6} {:>6}\n", r[0], r[1], r[2], r[3], r[4], r[5], r[6]);
            }
            s += &format!(
                "makespan {} steps, {} events, {} changes of mind, {} failures\n",
                result.makespan, result.events, result.changes, result.failures
            );
            s
        }
    };
    emit(a.out.as_deref(), &text)
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long, default_value_t = 2_000_000)]
    max_nodes: usize,
    /// Write the policy table (JSON) here.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

pub fn solve_graph(a: SolveArgs) -> Result<(), CliError> {
    let scenario = a.task.single()?;
    let opts = GraphOptions { max_nodes: a.max_nodes, ..Default::default() };
    let (policy, stats) = plan(scenario.htm.clone(), &scenario.cfg, &opts)?;
    if let Some(p) = &a.out {
        std::fs::write(p, policy.export())?;
    }
    let text = match a.format {
        Format::Table => format!("{}: {stats}\nexpected makespan {:.3} steps\n", scenario.name, policy.root_value),
        Format::Csv => format!(
            "scenario,nodes,edges,branches,root_value\n{},{},{},{},{}\n",
            scenario.name, stats.nodes, stats.edges, stats.branches, policy.root_value
        ),
        Format::Json => {
            let v = json!({ "scenario": scenario.name, "stats": stats, "root_value": policy.root_value });
            format!("{}\n", serde_json::to_string_pretty(&v).unwrap())
        }
    };
    emit(None, &text)
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long)]
    episodes: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Evaluate every this many episodes for the training curve (0 = never).
    #[arg(long, default_value_t = 0)]
    eval_interval: u64,
    /// Full training configuration (JSON); the flags above override it.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Evaluation episodes after training.
    #[arg(long, default_value_t = 1000)]
    trials: u64,
    /// Write the Q-table (JSON) here.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Write the training curve (CSV) here.
    #[arg(long, value_name = "FILE")]
    curve: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
    #[arg(long)]
    workers: Option<usize>,
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let scenario = a.task.single()?;
    let mut cfg = match &a.config {
        Some(p) => serde_json::from_str::<TrainConfig>(&std::fs::read_to_string(p)?)
            .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
        None => TrainConfig::default(),
    };
    cfg.seed = a.seed;
    if let Some(e) = a.episodes {
        cfg.episodes = e;
    }
    if a.eval_interval > 0 {
        cfg.eval_interval = a.eval_interval;
    }
    let env = Env::new(scenario.htm.clone(), scenario.cfg.clone());
    let pool = pool(a.workers)?;
    let (trained, stats) = pool.install(|| -> Result<_, CliError> {
        let trained = train_q(&env, &cfg)?;
        let stats = evaluate(&trained.table, &env, a.trials.max(1), a.seed).map_err(|e| CliError::Runtime(e.to_string()))?;
        Ok((trained, stats))
    })?;
    if let Some(p) = &a.out {
        std::fs::write(p, trained.table.export())?;
    }
    if let Some(p) = &a.curve {
        write_curve(&trained.curve, std::fs::File::create(p)?)?;
    }
    let text = match a.format {
        Format::Table => format!(
            "{}: {} episodes, {} states, evaluation over {} trials: {stats}\n",
            scenario.name,
            cfg.episodes,
            trained.table.values.len(),
            stats.makespans.len()
        ),
        Format::Csv => format!("scenario,episodes,states,mean,std\n{},{},{},{},{}\n", scenario.name, cfg.episodes, trained.table.values.len(), stats.mean, stats.std),
        Format::Json => {
            let v = json!({
                "scenario": scenario.name,
                "episodes": cfg.episodes,
                "states": trained.table.values.len(),
                "mean": stats.mean,
                "std": stats.std,
                "curve": trained.curve,
            });
            format!("{}\n", serde_json::to_string_pretty(&v).unwrap())
        }
    };
    emit(None, &text)
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    task: TaskArgs,
    /// Policies to compare (repeatable). Defaults to all; the graph planner is then skipped on
    /// stochastic scenarios.
    #[arg(long)]
    policy: Vec<PolicyKind>,
    #[arg(long, default_value_t = 1000)]
    trials: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    workers: Option<usize>,
    /// Training episodes for `rl`.
    #[arg(long)]
    episodes: Option<u64>,
    #[arg(long, default_value_t = 2_000_000)]
    max_nodes: usize,
    /// Scenario sweep, e.g. `p_fail=0.1,0.2,0.3`. Keys: p_change, p_fail, duration_cv.
    #[arg(long, value_name = "KEY=V1,V2,..")]
    sweep: Option<String>,
    /// Per-trial CSV.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

fn sweep_scenarios(base: Vec<Scenario>, sweep: &str) -> Result<Vec<Scenario>, CliError> {
    let bad = || CliError::Config(format!("--sweep expects KEY=V1,V2,.., got {sweep:?}"));
    let (key, values) = sweep.split_once('=').ok_or_else(bad)?;
    let values: Vec<f64> = values.split(',').map(|v| v.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?;
    let mut out = Vec::new();
    for s in &base {
        for &v in &values {
            let mut cfg = s.cfg.clone();
            match key {
                "p_change" => cfg.p_change = v,
                "p_fail" => cfg.p_fail = Some(v),
                "duration_cv" => cfg.duration_cv = v,
                _ => return Err(CliError::Config(format!("cannot sweep {key:?}"))),
            }
            cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
            out.push(Scenario { name: format!("{} {key}={v}", s.name), htm: s.htm.clone(), cfg });
        }
    }
    Ok(out)
}

pub fn bench(a: BenchArgs) -> Result<(), CliError> {
    if a.trials == 0 {
        return Err(CliError::Config("--trials must be at least 1".into()));
    }
    let cfg = a.task.config()?;
    let mut scenarios: Vec<Scenario> =
        a.task.tasks()?.into_iter().map(|(name, htm)| Scenario { name, htm: Arc::new(htm), cfg: cfg.clone() }).collect();
    if let Some(sw) = &a.sweep {
        scenarios = sweep_scenarios(scenarios, sw)?;
    }
    let graph = GraphOptions { max_nodes: a.max_nodes, ..Default::default() };
    let train_cfg = train_config(a.episodes, a.seed);
    let pool = pool(a.workers)?;
    let results: Vec<BenchResult> = pool.install(|| -> Result<_, CliError> {
        let mut all = Vec::new();
        for s in &scenarios {
            let kinds: Vec<PolicyKind> = if a.policy.is_empty() {
                PolicyKind::ALL
                    .into_iter()
                    .filter(|&k| {
                        let skip = k == PolicyKind::Graph && check_deterministic(&s.htm, &s.cfg).is_err();
                        if skip {
                            log::warn!("skipping graph policy on stochastic scenario {}", s.name);
                        }
                        !skip
                    })
                    .collect()
            } else {
                a.policy.clone()
            };
            let mut policies = Vec::new();
            for k in kinds {
                log::info!("{}: preparing {} policy", s.name, k.name());
                policies.push((k.name().to_string(), build_policy(k, s, &graph, &train_cfg)?));
            }
            all.extend(run_benchmark(s, &policies, a.trials, a.seed)?);
        }
        Ok(all)
    })?;
    if let Some(p) = &a.out {
        write_csv(&results, std::fs::File::create(p)?)?;
    }
    match a.format {
        Format::Table => emit(None, &summarize(&results)),
        Format::Csv if a.out.is_none() => {
            write_csv(&results, std::io::stdout().lock())?;
            Ok(())
        }
        Format::Csv => Ok(()),
        Format::Json => {
            let v: Vec<_> = results
                .iter()
                .map(|r| json!({ "scenario": r.scenario, "policy": r.policy, "trials": r.trials, "mean": r.mean, "std": r.std }))
                .collect();
            emit(None, &format!("{}\n", serde_json::to_string_pretty(&v).unwrap()))
        }
    }
}

#[derive(Debug, Args)]
pub struct IntentArgs {
    /// Goal file (JSON). Defaults to three goals 10 m apart in the plane.
    #[arg(long, value_name = "FILE")]
    goals: Option<PathBuf>,
    /// Recorded trajectory `t,x,y[,z]`. Without it a reach is simulated.
    #[arg(long, value_name = "FILE")]
    trajectory: Option<PathBuf>,
    /// Goal of the simulated reach.
    #[arg(long, default_value_t = 1)]
    goal: u32,
    /// Switch the simulated reach to another goal, e.g. `10:2`.
    #[arg(long, value_name = "STEP:GOAL")]
    switch: Option<String>,
    #[arg(long, default_value_t = 0.5)]
    speed: f64,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    max_steps: u64,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 2.0)]
    kappa: f64,
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

fn default_goals() -> GoalSet {
    let g = |id, x, y| Goal { id, position: vec![x, y], action_id: None };
    GoalSet::new(vec![g(1, 10.0, 0.0), g(2, 0.0, 10.0), g(3, -10.0, 0.0)], 0.9).expect("valid goals")
}

pub fn intent_demo(a: IntentArgs) -> Result<(), CliError> {
    let goals = match &a.goals {
        Some(p) => GoalSet::parse(&std::fs::read_to_string(p)?)?,
        None => default_goals(),
    };
    let obs = match &a.trajectory {
        Some(p) => read_trajectory_csv(std::fs::File::open(p)?)?,
        None => {
            let switch = match &a.switch {
                Some(s) => {
                    let bad = || CliError::Config(format!("--switch expects STEP:GOAL, got {s:?}"));
                    let (t, g) = s.split_once(':').ok_or_else(bad)?;
                    Some((t.parse().map_err(|_| bad())?, g.parse().map_err(|_| bad())?))
                }
                None => None,
            };
            let reach = Reach {
                start: vec![0.0; goals.dim()],
                goal: a.goal,
                speed: a.speed,
                noise_std: a.noise,
                switch,
                max_steps: a.max_steps,
            };
            simulate_trajectory(&reach, &goals, &mut ChaCha8Rng::seed_from_u64(a.seed))?
        }
    };
    let params = IntentParams { lambda: a.lambda, kappa: a.kappa, ..Default::default() };
    let beliefs = run_filter(&obs, &goals, &params, Belief::uniform(goals.len()))?;
    if let Some(p) = &a.out {
        write_filter_csv(&obs, &beliefs, &goals, std::fs::File::create(p)?)?;
    }
    match a.format {
        Format::Csv if a.out.is_none() => {
            write_filter_csv(&obs, &beliefs, &goals, std::io::stdout().lock())?;
            Ok(())
        }
        Format::Csv => Ok(()),
        Format::Json => {
            let v: Vec<_> = obs
                .iter()
                .zip(&beliefs)
                .map(|(o, b)| json!({ "t": o.t, "posterior": b.probs(), "map_goal": map_goal(b, &goals) }))
                .collect();
            emit(None, &format!("{}\n", serde_json::to_string_pretty(&v).unwrap()))
        }
        Format::Table => {
            let mut s = format!("{:>5}", "t");
            for g in &goals.goals {
                s += &format!(" {:>8}", format!("p_{}", g.id));
            }
            s += "      map\n";
            for (o, b) in obs.iter().zip(&beliefs) {
                s += &format!("{:>5}", o.t);
                for p in b.probs() {
                    s += &format!(" {p:>8.4}");
                }
                s += &format!(" {:>8}\n", map_goal(b, &goals));
            }
            emit(None, &s)
        }
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

pub fn gen_htm(a: GenArgs) -> Result<(), CliError> {
    let htm = generate_random_htm(a.n, a.seed)?;
    let text = format!("{}\n", serde_json::to_string_pretty(&htm.to_document()).unwrap());
    emit(a.out.as_deref(), &text)
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Built UI bundle to serve under `/`.
    #[arg(long, value_name = "DIR")]
    static_dir: Option<PathBuf>,
    /// Training episodes for `rl` sessions.
    #[arg(long, default_value_t = 20_000)]
    train_episodes: u64,
    #[arg(long, default_value_t = 2_000_000)]
    max_nodes: usize,
}

pub fn serve(a: ServeArgs) -> Result<(), CliError> {
    let cfg = hrc_sandbox::ServerConfig {
        train_episodes: a.train_episodes,
        max_graph_nodes: a.max_nodes,
        static_dir: a.static_dir,
    };
    let rt = tokio::runtime::Runtime::new()?;
    eprintln!("listening on http://{}", a.addr);
    rt.block_on(hrc_sandbox::serve(a.addr, cfg))?;
    Ok(())
}

