use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use deepmon::goalnet::{self, GoalNetParams, GradMutation, GrowConfig, Hyper, TrainingPair};
use deepmon::harness::{
    self, emit_report, eval_curve, run_scenario, run_trial, trial_seed, AblationConfig, LoadedScenario, MetricsReport,
    Mode, PredictorConfig, ScenarioReport,
};
use deepmon::monitor::MonitorConfig;
use deepmon::pddl::{validate_library, PlanLibrary};
use deepmon::planner::{self, PlanOptions, Strategy};
use deepmon::symbolic::{herbrand_size, State, Vocabulary};

#[derive(Parser, Debug)]
#[command(name = "deepmon", version, about = "Vision-grounded execution monitor with a learned goal predictor")]
struct Cli {
    /// Base seed for every random choice.
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,
    /// TOML file with [monitor], [predictor] and [data] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Vocabulary commands.
    Vocab {
        #[command(subcommand)]
        cmd: VocabCmd,
    },
    /// Plan library commands.
    Lib {
        #[command(subcommand)]
        cmd: LibCmd,
    },
    /// Solve one library entry.
    Plan {
        library: PathBuf,
        entry: String,
        /// Use breadth-first search instead of greedy best-first.
        #[arg(long)]
        optimal: bool,
    },
    /// Find the library entry best matching a goal state.
    Match {
        library: PathBuf,
        /// Goal atoms, e.g. "Holding(robot_hand, brush)".
        #[arg(required = true)]
        atoms: Vec<String>,
    },
    /// Grow a training corpus from the library chains.
    Datagen {
        library: PathBuf,
        #[arg(long)]
        pairs: Option<usize>,
    },
    /// Train the goal predictor.
    Train {
        library: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        no_attention: bool,
    },
    /// Compare analytic and numeric gradients of a fresh network.
    Gradcheck {
        library: PathBuf,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long)]
        no_attention: bool,
    },
    /// Top-1/top-3 accuracy per input atom count.
    EvalCurve {
        library: PathBuf,
        /// Trained checkpoint.
        #[arg(long)]
        net: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Run trials of one scenario in one mode.
    Run {
        scenario: PathBuf,
        #[arg(long, default_value = "gpr")]
        mode: Mode,
        #[arg(long, default_value_t = 1)]
        trials: usize,
        #[command(flatten)]
        net: NetArgs,
    },
    /// Run scenarios in all three modes.
    Ablate {
        #[arg(required = true)]
        scenarios: Vec<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
        #[command(flatten)]
        net: NetArgs,
    },
    /// Check a report directory against the ordering gates.
    Report {
        /// Directory holding summary.json.
        dir: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum VocabCmd {
    Check { vocab: PathBuf },
}

#[derive(Subcommand, Debug)]
enum LibCmd {
    Validate { library: PathBuf },
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset file written by `datagen`; grown on the fly otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    pairs: Option<usize>,
}

#[derive(Args, Debug)]
struct NetArgs {
    /// Predictor checkpoint; trained from the library when omitted.
    #[arg(long)]
    net: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct Config {
    monitor: MonitorConfig,
    predictor: PredictorConfig,
    data: DataConfig,
    ablation: AblationDefaults,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DataConfig {
    keep_original: f64,
    min_atoms: usize,
    max_atoms: usize,
    /// Held-out pairs for `eval-curve`.
    test_pairs: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let g = GrowConfig::default();
        DataConfig { keep_original: g.keep_original, min_atoms: g.min_atoms, max_atoms: g.max_atoms, test_pairs: 4000 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct AblationDefaults {
    trials: usize,
}

impl Default for AblationDefaults {
    fn default() -> Self {
        AblationDefaults { trials: 50 }
    }
}

#[derive(Debug)]
enum Fail {
    Usage(String),
    Load(String),
    Threshold(String),
    Io(String),
}

impl Fail {
    fn code(&self) -> u8 {
        match self {
            Fail::Usage(_) => 1,
            Fail::Load(_) | Fail::Io(_) => 2,
            Fail::Threshold(_) => 3,
        }
    }
}

impl std::fmt::Display for Fail {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Fail::Usage(m) | Fail::Load(m) | Fail::Threshold(m) | Fail::Io(m) => f.write_str(m),
        }
    }
}

fn load<E: std::fmt::Display>(e: E) -> Fail {
    Fail::Load(e.to_string())
}

type Res<T> = Result<T, Fail>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}

fn read_config(path: Option<&Path>) -> Res<Config> {
    let Some(path) = path else { return Ok(Config::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| Fail::Load(format!("{}: {e}", path.display())))?;
    let cfg: Config = toml::from_str(&text).map_err(|e| Fail::Load(format!("{}: {e}", path.display())))?;
    cfg.monitor.validate().map_err(Fail::Usage)?;
    Ok(cfg)
}

fn write_out(dir: &Path, name: &str, text: &str) -> Res<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Fail::Io(format!("{}: {e}", dir.display())))?;
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| Fail::Io(format!("{}: {e}", path.display())))?;
    Ok(path)
}

fn load_lib(path: &Path) -> Res<PlanLibrary> {
    PlanLibrary::load(path).map_err(load)
}

fn grow_cfg(cfg: &Config, target: usize) -> GrowConfig {
    GrowConfig {
        target,
        keep_original: cfg.data.keep_original,
        min_atoms: cfg.data.min_atoms,
        max_atoms: cfg.data.max_atoms,
    }
}

fn dataset(lib: &PlanLibrary, cfg: &Config, args: &DataArgs, seed: u64) -> Res<Vec<TrainingPair>> {
    match &args.data {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Fail::Load(format!("{}: {e}", path.display())))?;
            goalnet::dataset_from_text(&text, &lib.vocab).map_err(load)
        }
        None => {
            let n = args.pairs.unwrap_or(cfg.predictor.pairs);
            goalnet::grow_dataset(lib, &grow_cfg(cfg, n), seed).map_err(load)
        }
    }
}

fn predictor(lib: &PlanLibrary, cfg: &Config, net: &NetArgs, seed: u64) -> Res<GoalNetParams> {
    match &net.net {
        Some(path) => GoalNetParams::load(path, &lib.vocab).map_err(load),
        None => harness::train_predictor(lib, &cfg.predictor, seed).map_err(load),
    }
}

fn dispatch(cli: Cli) -> Res<()> {
    let cfg = read_config(cli.config.as_deref())?;
    let seed = cli.seed;
    let out = cli.out.as_path();
    match cli.cmd {
        Cmd::Vocab { cmd: VocabCmd::Check { vocab } } => {
            let v = Vocabulary::load(&vocab).map_err(load)?;
            println!("sorts {}", v.sorts().len());
            println!("terms {}", v.terms().len());
            println!("predicates {}", v.predicates().len());
            println!("tasks {}", v.tasks().len());
            println!("tokens {}", v.size());
            println!("herbrand {}", herbrand_size(&v));
            println!("hash {}", v.hash());
        }
        Cmd::Lib { cmd: LibCmd::Validate { library } } => {
            let lib = load_lib(&library)?;
            let violations = validate_library(&lib);
            for v in &violations {
                println!("{v}");
            }
            if !violations.is_empty() {
                return Err(Fail::Load(format!("{} violation(s)", violations.len())));
            }
            println!("{} entries ok", lib.entries.len());
        }
        Cmd::Plan { library, entry, optimal } => {
            let lib = load_lib(&library)?;
            let e = lib.entry(&entry).ok_or_else(|| Fail::Usage(format!("no entry `{entry}`")))?;
            let strategy = if optimal { Strategy::UniformCost } else { Strategy::GreedyGoalCount };
            let p = planner::plan(e, &PlanOptions { strategy, ..PlanOptions::default() }).map_err(load)?;
            let mut text = String::new();
            for s in &p.steps {
                text.push_str(&format!("{s}\n"));
            }
            print!("{text}");
            write_out(out, &format!("plan_{entry}.txt"), &text)?;
        }
        Cmd::Match { library, atoms } => {
            let lib = load_lib(&library)?;
            let g = State::from_strs(&atoms).map_err(|e| Fail::Usage(e.to_string()))?;
            let m = planner::match_plan(&lib, &g).map_err(load)?;
            println!("entry {}", m.entry);
            println!("overlap {}", m.overlap);
            for (from, to) in &m.substitution {
                println!("{from} -> {to}");
            }
        }
        Cmd::Datagen { library, pairs } => {
            let lib = load_lib(&library)?;
            let data = goalnet::grow_dataset(&lib, &grow_cfg(&cfg, pairs.unwrap_or(cfg.predictor.pairs)), seed)
                .map_err(load)?;
            let text = goalnet::dataset_to_text(&data, &lib.vocab).map_err(load)?;
            write_out(out, "dataset.tsv", &text)?;
            println!("{} pairs -> dataset.tsv", data.len());
        }
        Cmd::Train { library, data, epochs, no_attention } => {
            let lib = load_lib(&library)?;
            let pairs = dataset(&lib, &cfg, &data, seed)?;
            let pc = &cfg.predictor;
            let hyper = Hyper { epochs: epochs.unwrap_or(pc.epochs), lr: pc.lr, batch: pc.batch, ..Hyper::default() };
            let attention = pc.attention && !no_attention;
            let r = goalnet::train(&pairs, &lib.vocab, &hyper, attention, seed, |e, l| eprintln!("epoch {e} loss {l:.6}"))
                .map_err(load)?;
            let mut loss = String::from("epoch,loss\n");
            for (e, l) in r.loss_history.iter().enumerate() {
                loss.push_str(&format!("{e},{l:.8}\n"));
            }
            write_out(out, "loss.csv", &loss)?;
            write_out(out, "checkpoint.json", &r.params.to_json())?;
            println!("final loss {:.6} -> checkpoint.json", r.loss_history.last().copied().unwrap_or(f64::NAN));
        }
        Cmd::Gradcheck { library, samples, no_attention } => {
            let lib = load_lib(&library)?;
            let pairs = goalnet::grow_dataset(&lib, &grow_cfg(&cfg, 1), seed).map_err(load)?;
            let (seq, target) = pairs[0].encode(&lib.vocab).map_err(load)?;
            let p = GoalNetParams::init(&lib.vocab, !no_attention, seed);
            let r = goalnet::grad_check(&p, &seq.tokens, &target, 1e-5, samples, seed, GradMutation::None);
            for (g, e) in &r.per_group {
                println!("{g:<16} {e:.3e}");
            }
            println!("max {:.3e} over {} weights", r.max_rel_error, r.checked);
            if r.max_rel_error >= 1e-4 {
                return Err(Fail::Threshold(format!("relative error {:.3e} >= 1e-4", r.max_rel_error)));
            }
        }
        Cmd::EvalCurve { library, net, data } => {
            let lib = load_lib(&library)?;
            let params = GoalNetParams::load(&net, &lib.vocab).map_err(load)?;
            let pairs = match data.data {
                Some(_) => dataset(&lib, &cfg, &data, seed)?,
                None => {
                    let n = data.pairs.unwrap_or(cfg.data.test_pairs);
                    let g = grow_cfg(&cfg, n);
                    goalnet::held_out(&lib, &g, seed.wrapping_add(1), &[]).map_err(load)?
                }
            };
            let rows = eval_curve(&params, &pairs, &lib.vocab, 1..=goalnet::MAX_INPUT_ATOMS);
            let text = harness::curve_csv(&rows);
            print!("{text}");
            write_out(out, "curve.csv", &text)?;
            if let Some(r) = rows.iter().find(|r| r.top3 < r.top1) {
                return Err(Fail::Threshold(format!("top-3 below top-1 at {} atoms", r.atoms)));
            }
        }
        Cmd::Run { scenario, mode, trials, net } => {
            if trials == 0 {
                return Err(Fail::Usage("trials must be at least 1".into()));
            }
            let sc = LoadedScenario::load(&scenario).map_err(load)?;
            let params = if mode == Mode::GPr { Some(predictor(&sc.lib, &cfg, &net, seed)?) } else { None };
            let mut traces = String::new();
            for i in 0..trials {
                let t = run_trial(&sc, mode, params.as_ref(), &cfg.monitor, trial_seed(seed, i));
                traces.push_str(&t.trace.to_jsonl());
            }
            write_out(out, "trace.jsonl", &traces)?;
            let rep = run_scenario(&sc, &cfg.monitor, &AblationConfig { mode, trials }, params.as_ref(), seed);
            print_rows(std::slice::from_ref(&rep));
            let report = MetricsReport::new(vec![rep], Vec::new(), seed, &cfg);
            emit_report(&report, out).map_err(|e| Fail::Io(e.to_string()))?;
        }
        Cmd::Ablate { scenarios, trials, net } => {
            let trials = trials.unwrap_or(cfg.ablation.trials);
            if trials == 0 {
                return Err(Fail::Usage("trials must be at least 1".into()));
            }
            let loaded: Vec<LoadedScenario> =
                scenarios.iter().map(|p| LoadedScenario::load(p).map_err(load)).collect::<Res<_>>()?;
            let lib: Arc<PlanLibrary> = loaded[0].lib.clone();
            if loaded.iter().any(|s| s.lib.vocab.hash() != lib.vocab.hash()) {
                return Err(Fail::Load("scenarios use different vocabularies".into()));
            }
            let params = predictor(&lib, &cfg, &net, seed)?;
            let mut rows = Vec::new();
            for sc in &loaded {
                for mode in Mode::ALL {
                    let net = (mode == Mode::GPr).then_some(&params);
                    rows.push(run_scenario(sc, &cfg.monitor, &AblationConfig { mode, trials }, net, sc.spec.seed ^ seed));
                }
            }
            print_rows(&rows);
            let report = MetricsReport::new(rows, Vec::new(), seed, &cfg);
            emit_report(&report, out).map_err(|e| Fail::Io(e.to_string()))?;
        }
        Cmd::Report { dir } => {
            let path = dir.join("summary.json");
            let text = std::fs::read_to_string(&path).map_err(|e| Fail::Load(format!("{}: {e}", path.display())))?;
            let v: serde_json::Value = serde_json::from_str(&text).map_err(load)?;
            let failures = check_report(&v);
            for f in &failures {
                println!("FAIL {f}");
            }
            if !failures.is_empty() {
                return Err(Fail::Threshold(format!("{} gate(s) failed", failures.len())));
            }
            println!("all gates pass");
        }
    }
    Ok(())
}

fn print_rows(rows: &[ScenarioReport]) {
    for r in rows {
        if r.supported {
            println!("{:<16} {:<4} {:>3}/{:<3} {:.2}  steps {:.1}", r.task, r.mode.name(), r.successes, r.trials, r.success_rate, r.mean_steps);
        } else {
            println!("{:<16} {:<4} unsupported", r.task, r.mode.name());
        }
    }
}

/// Ordering gates over a summary: per task GPr >= M >= Kn among supported
/// modes, GPr - Kn >= 0.2 on at least three tasks when five or more tasks
/// are present, and top-3 >= top-1 on every curve row.
fn check_report(v: &serde_json::Value) -> Vec<String> {
    let mut out = Vec::new();
    let rows = v["rows"].as_array().cloned().unwrap_or_default();
    let mut tasks: Vec<String> = rows.iter().filter_map(|r| r["task"].as_str().map(String::from)).collect();
    tasks.dedup();
    let rate = |task: &str, mode: &str| {
        rows.iter()
            .find(|r| r["task"] == task && r["mode"] == mode && r["supported"] == true)
            .and_then(|r| r["success_rate"].as_f64())
    };
    let mut wide = 0;
    for t in &tasks {
        let (kn, m, gpr) = (rate(t, "Kn"), rate(t, "M"), rate(t, "GPr"));
        if let (Some(a), Some(b)) = (gpr, m) {
            if a < b {
                out.push(format!("{t}: GPr {a:.2} < M {b:.2}"));
            }
        }
        if let (Some(a), Some(b)) = (m, kn) {
            if a < b {
                out.push(format!("{t}: M {a:.2} < Kn {b:.2}"));
            }
        }
        if let (Some(a), Some(b)) = (gpr, kn) {
            if a - b >= 0.2 - 1e-12 {
                wide += 1;
            }
        }
    }
    if tasks.len() >= 5 && wide < 3 {
        out.push(format!("GPr - Kn >= 0.2 on only {wide} task(s)"));
    }
    for r in v["curve"].as_array().into_iter().flatten() {
        if r["top3"].as_f64() < r["top1"].as_f64() {
            out.push(format!("curve: top-3 below top-1 at {} atoms", r["atoms"]));
        }
    }
    out
}
