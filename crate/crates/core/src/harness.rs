//! Experiment harness: scenario files, trial runner for the three
//! monitoring modes, the accuracy-versus-atom-count curve and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{Discrete, Hypergeometric};
use thiserror::Error;

use crate::goalnet::{self, infer_topk, GoalNetParams, GrowConfig, Hyper, TrainingPair};
use crate::monitor::{
    run_task, ExecutionTrace, KnowledgeWorld, MonitorConfig, Predictor, Relocation, Scripted, SimActuator, SimWorld,
    World,
};
use crate::pddl::PlanLibrary;
use crate::perception::{ground_truth_state, DetectorModel, NoiseProfile, RelationConfig, Scene, VisionConfig};
use crate::symbolic::{State, TaskSentence, Vocabulary};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("cannot load scenario: {0}")]
    ScenarioLoad(String),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    GoalNet(#[from] goalnet::GoalNetError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn load_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::ScenarioLoad(e.to_string())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActuatorProfile {
    #[serde(default)]
    pub failure_prob: f64,
}

/// Scenario file as written on disk. Paths are relative to the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub vocabulary: PathBuf,
    pub library: PathBuf,
    pub scene: PathBuf,
    pub task: String,
    /// Terminal goal of the task.
    pub goal: Vec<String>,
    /// Start state; defaults to the library's start for the task.
    #[serde(default)]
    pub start: Option<Vec<String>>,
    /// Goal order for the scripted modes; defaults to the library's
    /// heaviest chain for the task.
    #[serde(default)]
    pub script: Option<Vec<Vec<String>>>,
    /// The task needs visual search; not runnable from static knowledge.
    #[serde(default)]
    pub requires_search: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub noise: NoiseProfile,
    #[serde(default)]
    pub actuator: ActuatorProfile,
    #[serde(default)]
    pub relocation: Option<Relocation>,
}

/// A scenario with every reference resolved.
#[derive(Debug, Clone)]
pub struct LoadedScenario {
    pub spec: Scenario,
    pub lib: Arc<PlanLibrary>,
    pub scene: Scene,
    pub task: TaskSentence,
    pub start: State,
    pub goal: State,
    pub script: Vec<State>,
}

impl LoadedScenario {
    pub fn load(path: impl AsRef<Path>) -> Result<LoadedScenario> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| load_err(format!("{}: {e}", path.display())))?;
        let spec: Scenario = toml::from_str(&text).map_err(|e| load_err(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let lib = PlanLibrary::load(base.join(&spec.library)).map_err(load_err)?;
        Self::resolve(spec, Arc::new(lib), base)
    }

    /// Resolves a scenario against an already loaded library.
    pub fn resolve(spec: Scenario, lib: Arc<PlanLibrary>, base: &Path) -> Result<LoadedScenario> {
        let vocab = Vocabulary::load(base.join(&spec.vocabulary)).map_err(load_err)?;
        if vocab.hash() != lib.vocab.hash() {
            return Err(load_err("scenario vocabulary differs from the library's"));
        }
        let scene = Scene::load(base.join(&spec.scene)).map_err(load_err)?;
        let task = lib.vocab.task(&spec.task).cloned().ok_or_else(|| load_err(format!("unknown task `{}`", spec.task)))?;
        let goal = State::from_strs(&spec.goal).map_err(load_err)?;
        lib.vocab.check_state(&goal).map_err(load_err)?;
        let chains = lib.task_chains(&spec.task);
        let start = match &spec.start {
            Some(s) => State::from_strs(s).map_err(load_err)?,
            None => chains.map(|c| c.start.clone()).ok_or_else(|| load_err("no start state for the task"))?,
        };
        let script = match &spec.script {
            Some(goals) => goals.iter().map(|g| State::from_strs(g).map_err(load_err)).collect::<Result<Vec<_>>>()?,
            None => chains
                .and_then(|c| {
                    c.chains.iter().max_by(|a, b| a.weight.partial_cmp(&b.weight).expect("finite weights"))
                })
                .map(|c| c.goals.clone())
                .unwrap_or_default(),
        };
        for o in scene.objects.iter() {
            if lib.vocab.term(&o.id).is_none() {
                return Err(load_err(format!("scene object `{}` is not a term of the vocabulary", o.id)));
            }
        }
        if let Some(r) = &spec.relocation {
            if scene.object(&r.object).is_none() || scene.object(&r.onto).is_none() {
                return Err(load_err("relocation refers to objects missing from the scene"));
            }
        }
        Ok(LoadedScenario { spec, lib, scene, task, start, goal, script })
    }

    /// Same scenario with perception noise, actuator failures and
    /// relocation switched off.
    pub fn benign(&self) -> LoadedScenario {
        let mut s = self.clone();
        s.spec.noise = NoiseProfile::default();
        s.spec.actuator = ActuatorProfile::default();
        s.spec.relocation = None;
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    /// Static world knowledge, no perception.
    Kn,
    /// Live perception, scripted goal order.
    M,
    /// Live perception and goal prediction.
    GPr,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Kn, Mode::M, Mode::GPr];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Kn => "Kn",
            Mode::M => "M",
            Mode::GPr => "GPr",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Mode, String> {
        match s.to_ascii_lowercase().as_str() {
            "kn" => Ok(Mode::Kn),
            "m" => Ok(Mode::M),
            "gpr" => Ok(Mode::GPr),
            _ => Err(format!("unknown mode `{s}` (kn, m, gpr)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub mode: Mode,
    pub trials: usize,
}

/// Seed of trial `i`. Shared across modes so that paired trials see the
/// same relocations and actuator failures.
pub fn trial_seed(base: u64, i: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update((i as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub trace: ExecutionTrace,
    /// Monitor reported success and the task goal holds in the final scene.
    pub success: bool,
    pub relocated: bool,
    pub final_scene: Scene,
}

fn sim_world(sc: &LoadedScenario, cfg: &MonitorConfig, seed: u64) -> SimWorld {
    let vision = VisionConfig {
        relations: RelationConfig { mu: cfg.mu, ..RelationConfig::default() },
        batch: cfg.batch,
        tau: cfg.tau,
        ..VisionConfig::default()
    };
    SimWorld {
        scene: sc.scene.clone(),
        model: DetectorModel::new(sc.spec.noise.clone(), seed),
        vision,
        vocab: sc.lib.vocab.clone(),
        actuator: SimActuator::new(sc.spec.actuator.failure_prob, seed, sc.spec.relocation.clone()),
    }
}

/// One trial of a scenario. `net` is required in GPr mode.
pub fn run_trial(
    sc: &LoadedScenario,
    mode: Mode,
    net: Option<&GoalNetParams>,
    cfg: &MonitorConfig,
    seed: u64,
) -> TrialOutcome {
    let lib = &*sc.lib;
    let sim = sim_world(sc, cfg, seed);
    let run = |world: &mut dyn World| match mode {
        Mode::GPr => {
            let params = net.expect("GPr mode needs a predictor");
            let mut src = Predictor { params, vocab: &lib.vocab };
            run_task(&sc.task, &sc.start, &sc.goal, lib, world, &mut src, cfg)
        }
        _ => {
            let mut src = Scripted { goals: sc.script.clone() };
            run_task(&sc.task, &sc.start, &sc.goal, lib, world, &mut src, cfg)
        }
    };
    let (trace, sim) = if mode == Mode::Kn {
        let mut w = KnowledgeWorld::new(sim);
        let t = run(&mut w);
        (t, w.inner)
    } else {
        let mut w = sim;
        let t = run(&mut w);
        (t, w)
    };
    let holds = ground_truth_state(&sc.goal, &sim.scene, &lib.vocab, &RelationConfig::default());
    TrialOutcome {
        success: trace.outcome.is_success() && holds,
        trace,
        relocated: sim.actuator.relocated,
        final_scene: sim.scene,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub task: String,
    pub mode: Mode,
    pub supported: bool,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Mean monitor steps, the simulated execution time.
    pub mean_steps: f64,
    pub seed: u64,
}

pub fn run_scenario(
    sc: &LoadedScenario,
    cfg: &MonitorConfig,
    ab: &AblationConfig,
    net: Option<&GoalNetParams>,
    seed: u64,
) -> ScenarioReport {
    let mut rep = ScenarioReport {
        scenario: sc.spec.name.clone(),
        task: sc.spec.task.clone(),
        mode: ab.mode,
        supported: true,
        trials: ab.trials,
        successes: 0,
        success_rate: 0.0,
        mean_steps: 0.0,
        seed,
    };
    if ab.mode == Mode::Kn && sc.spec.requires_search {
        rep.supported = false;
        rep.trials = 0;
        return rep;
    }
    let mut steps = 0usize;
    for i in 0..ab.trials {
        let t = run_trial(sc, ab.mode, net, cfg, trial_seed(seed, i));
        rep.successes += t.success as usize;
        steps += t.trace.steps;
    }
    if ab.trials > 0 {
        rep.success_rate = rep.successes as f64 / ab.trials as f64;
        rep.mean_steps = steps as f64 / ab.trials as f64;
    }
    rep
}

/// One-sided Fisher exact test that group `a` succeeds more often than `b`.
pub fn fisher_greater(succ_a: usize, n_a: usize, succ_b: usize, n_b: usize) -> f64 {
    let total = (n_a + n_b) as u64;
    let succ = (succ_a + succ_b) as u64;
    if total == 0 || n_a == 0 {
        return 1.0;
    }
    let h = Hypergeometric::new(total, succ, n_a as u64).expect("valid table");
    let hi = succ.min(n_a as u64);
    (succ_a as u64..=hi).map(|x| h.pmf(x)).sum::<f64>().min(1.0)
}

// ---------------------------------------------------------------------------
// Goal predictor used by the GPr mode

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorConfig {
    pub pairs: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub attention: bool,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig { pairs: 2000, epochs: 30, lr: 0.005, batch: 5, attention: true }
    }
}

/// Grows a corpus from the library chains and trains a predictor on it.
pub fn train_predictor(lib: &PlanLibrary, pc: &PredictorConfig, seed: u64) -> Result<GoalNetParams> {
    let data = goalnet::grow_dataset(lib, &GrowConfig { target: pc.pairs, ..GrowConfig::default() }, seed)?;
    let hyper = Hyper { epochs: pc.epochs, lr: pc.lr, batch: pc.batch, ..Hyper::default() };
    Ok(goalnet::train(&data, &lib.vocab, &hyper, pc.attention, seed, |_, _| {})?.params)
}

// ---------------------------------------------------------------------------
// Accuracy curve

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub atoms: usize,
    pub n: usize,
    pub top1: f64,
    pub top3: f64,
}

impl CurveRow {
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

/// Exact-match accuracy of the rank-1 and top-3 proposals, per input atom
/// count in `counts`. Empty buckets are kept with `n = 0`.
pub fn eval_curve(
    net: &GoalNetParams,
    pairs: &[TrainingPair],
    vocab: &Vocabulary,
    counts: std::ops::RangeInclusive<usize>,
) -> Vec<CurveRow> {
    let mut buckets: BTreeMap<usize, (usize, usize, usize)> = counts.clone().map(|c| (c, (0, 0, 0))).collect();
    for p in pairs {
        let Some(b) = buckets.get_mut(&p.input.len()) else { continue };
        let props = infer_topk(&p.task, &p.input, net, vocab, 3).unwrap_or_default();
        b.0 += 1;
        if props.first().is_some_and(|x| x.goal == p.target) {
            b.1 += 1;
        }
        if props.iter().take(3).any(|x| x.goal == p.target) {
            b.2 += 1;
        }
    }
    buckets
        .into_iter()
        .map(|(atoms, (n, a, b))| {
            let r = |x: usize| if n == 0 { 0.0 } else { x as f64 / n as f64 };
            CurveRow { atoms, n, top1: r(a), top3: r(b) }
        })
        .collect()
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut s = String::from("atoms,n,top1,top3\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.4},{:.4}", r.atoms, r.n, r.top1, r.top3);
    }
    s
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Significance {
    pub task: String,
    pub better: Mode,
    pub worse: Mode,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub rows: Vec<ScenarioReport>,
    pub significance: Vec<Significance>,
    pub curve: Vec<CurveRow>,
    pub seed: u64,
    pub config_hash: String,
}

impl MetricsReport {
    pub fn new(rows: Vec<ScenarioReport>, curve: Vec<CurveRow>, seed: u64, config: &impl Serialize) -> MetricsReport {
        let significance = significance_tests(&rows);
        let json = serde_json::to_string(config).expect("config serialises");
        let config_hash = format!("{:x}", Sha256::digest(json.as_bytes()));
        MetricsReport { rows, significance, curve, seed, config_hash }
    }

    pub fn row(&self, task: &str, mode: Mode) -> Option<&ScenarioReport> {
        self.rows.iter().find(|r| r.task == task && r.mode == mode)
    }
}

/// Pairwise one-sided tests GPr > M, M > Kn and GPr > Kn per task.
pub fn significance_tests(rows: &[ScenarioReport]) -> Vec<Significance> {
    let mut out = Vec::new();
    let mut tasks: Vec<&str> = rows.iter().map(|r| r.task.as_str()).collect();
    tasks.dedup();
    for task in tasks {
        let get = |m: Mode| rows.iter().find(|r| r.task == task && r.mode == m && r.supported);
        for (a, b) in [(Mode::GPr, Mode::M), (Mode::M, Mode::Kn), (Mode::GPr, Mode::Kn)] {
            if let (Some(x), Some(y)) = (get(a), get(b)) {
                out.push(Significance {
                    task: task.to_string(),
                    better: a,
                    worse: b,
                    p_value: fisher_greater(x.successes, x.trials, y.successes, y.trials),
                });
            }
        }
    }
    out
}

pub fn table_csv(rows: &[ScenarioReport]) -> String {
    let mut s = String::from("scenario,task,mode,supported,trials,successes,success_rate,mean_steps\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{:.4},{:.2}",
            r.scenario,
            r.task,
            r.mode.name(),
            r.supported,
            r.trials,
            r.successes,
            r.success_rate,
            r.mean_steps
        );
    }
    s
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| HarnessError::Io { path: path.display().to_string(), message: e.to_string() })
}

/// Writes `table.csv` (one row per task and mode), `curve.csv` when a
/// curve is present, and `summary.json` into `dir`.
pub fn emit_report(report: &MetricsReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)
        .map_err(|e| HarnessError::Io { path: dir.display().to_string(), message: e.to_string() })?;
    let mut written = Vec::new();
    let table = dir.join("table.csv");
    write(&table, &table_csv(&report.rows))?;
    written.push(table);
    if !report.curve.is_empty() {
        let curve = dir.join("curve.csv");
        write(&curve, &curve_csv(&report.curve))?;
        written.push(curve);
    }
    let summary = dir.join("summary.json");
    let mut json = serde_json::to_string_pretty(report).expect("report serialises");
    json.push('\n');
    write(&summary, &json)?;
    written.push(summary);
    Ok(written)
}
