//! The execution monitor: a closed loop that verifies states through
//! perception, dispatches plan actions, detects goal achievement, asks the
//! predictor for the next goal and recovers from failed proposals.
//!
//! The loop is decomposed into [`Monitor::step`], one transition at a time.
//! Perception and actuation are injected through [`World`], goal proposals
//! through [`GoalSource`], so a step is a pure function of its inputs.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::goalnet::{infer_topk, GoalNetParams, GoalProposal};
use crate::pddl::{ActionClass, PlanEntry, PlanLibrary};
use crate::perception::{
    ground_truth_atom, query_vision, Aabb, DetectorModel, RelationConfig, Scene, VisionConfig,
};
use crate::planner::{match_plan, plan, GroundAction, MatchScore, PlanOptions};
use crate::symbolic::{State, TaskSentence, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonitorConfig {
    /// Detection confidence threshold.
    pub mu: f64,
    /// Search budget per vision query, in re-aim steps.
    pub tau: usize,
    /// Proposals retained per request.
    pub k: usize,
    pub max_goals: usize,
    /// Re-plans of the same entry after a world action fails.
    pub replans: usize,
    pub batch: usize,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig { mu: 0.7, tau: 8, k: 3, max_goals: 12, replans: 1, batch: 10 }
    }
}

impl MonitorConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.mu > 0.0 && self.mu < 1.0) {
            return Err(format!("mu must be in (0,1), got {}", self.mu));
        }
        if self.tau < 1 || self.k < 1 || self.max_goals < 1 || self.batch < 1 {
            return Err("tau, k, max_goals and batch must be at least 1".into());
        }
        Ok(())
    }

    /// Upper bound on monitor steps for plans of at most `max_plan_len`
    /// actions: per goal one selection, then up to `1 + replans` passes of
    /// three steps per action plus the goal check; plus start and task
    /// verification.
    pub fn step_bound(&self, max_plan_len: usize) -> usize {
        self.max_goals * (1 + (1 + self.replans) * (3 * max_plan_len + 1)) + 2
    }
}

// ---------------------------------------------------------------------------
// Events and traces

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryPurpose {
    Start,
    Precondition,
    Effect,
    Goal,
    Task,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    VisionQuery { purpose: QueryPurpose, state: Vec<String> },
    VisionResult { purpose: QueryPurpose, holds: bool, depth: f64, search_steps: usize },
    ActionDispatch { action: String, world: bool },
    ActionResult { action: String, succeeded: bool, reason: Option<String> },
    GoalReached { entry: String, goal: Vec<String> },
    ProposalRequested { from: Vec<String>, proposals: Vec<Vec<String>> },
    ProposalSelected { rank: usize, entry: String, overlap: usize, goal: Vec<String> },
    Recovery { failed_goal: Vec<String>, reason: String },
    EndTask { outcome: Outcome },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonitorEvent {
    pub t: usize,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "status", content = "reason", rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure(String),
}

impl Outcome {
    pub fn is_success(&self) -> bool {
        matches!(self, Outcome::Success)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GoalAttempt {
    pub rank: usize,
    pub entry: String,
    pub goal: Vec<String>,
    pub reached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExecutionTrace {
    pub task: String,
    pub events: Vec<MonitorEvent>,
    pub outcome: Outcome,
    pub goals: Vec<GoalAttempt>,
    pub steps: usize,
}

#[derive(Serialize)]
struct Summary<'a> {
    summary: SummaryBody<'a>,
}

#[derive(Serialize)]
struct SummaryBody<'a> {
    task: &'a str,
    outcome: &'a Outcome,
    steps: usize,
    goals: &'a [GoalAttempt],
}

impl ExecutionTrace {
    /// Verified start state followed by every reached goal state.
    pub fn verified_states(&self) -> Vec<Vec<String>> {
        let mut out = Vec::new();
        let mut pending_start: Option<Vec<String>> = None;
        for e in &self.events {
            match &e.kind {
                EventKind::VisionQuery { purpose: QueryPurpose::Start, state } => pending_start = Some(state.clone()),
                EventKind::VisionResult { purpose: QueryPurpose::Start, holds: true, .. } => {
                    out.extend(pending_start.take());
                }
                EventKind::GoalReached { goal, .. } => out.push(goal.clone()),
                _ => {}
            }
        }
        out
    }

    pub fn recoveries(&self) -> usize {
        self.events.iter().filter(|e| matches!(e.kind, EventKind::Recovery { .. })).count()
    }

    /// Ranks of the selected proposals, in order.
    pub fn selected_ranks(&self) -> Vec<usize> {
        self.events
            .iter()
            .filter_map(|e| match &e.kind {
                EventKind::ProposalSelected { rank, .. } => Some(*rank),
                _ => None,
            })
            .collect()
    }

    /// One JSON record per event, then a summary record.
    pub fn write_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut w, e)?;
            writeln!(w)?;
        }
        let s = Summary {
            summary: SummaryBody { task: &self.task, outcome: &self.outcome, steps: self.steps, goals: &self.goals },
        };
        serde_json::to_writer(&mut w, &s)?;
        writeln!(w)
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }
}

// ---------------------------------------------------------------------------
// Injected collaborators

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub holds: bool,
    /// −1 when the query timed out.
    pub depth: f64,
    pub search_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum ActionOutcome {
    Succeeded,
    Failed(String),
}

/// Perception plus actuation, as seen by the monitor.
pub trait World {
    fn query(&mut self, s: &State) -> Observation;
    fn execute(&mut self, action: &GroundAction) -> ActionOutcome;
}

pub trait GoalSource {
    /// Ranked proposals for the goal following `from`.
    fn propose(&mut self, task: &TaskSentence, from: &State, k: usize) -> Vec<GoalProposal>;
}

/// Goals from the trained predictor.
pub struct Predictor<'a> {
    pub params: &'a GoalNetParams,
    pub vocab: &'a Vocabulary,
}

impl GoalSource for Predictor<'_> {
    fn propose(&mut self, task: &TaskSentence, from: &State, k: usize) -> Vec<GoalProposal> {
        infer_topk(task, from, self.params, self.vocab, k).unwrap_or_default()
    }
}

/// A fixed goal order: the goal after `from` in the list, or the first one
/// when `from` is not in it.
#[derive(Debug, Clone)]
pub struct Scripted {
    pub goals: Vec<State>,
}

impl GoalSource for Scripted {
    fn propose(&mut self, _task: &TaskSentence, from: &State, _k: usize) -> Vec<GoalProposal> {
        let next = self.goals.iter().position(|g| g == from).map_or(0, |i| i + 1);
        self.goals
            .get(next)
            .map(|g| vec![GoalProposal { goal: g.clone(), log_prob: 0.0, rank: 1 }])
            .unwrap_or_default()
    }
}

/// Picks the best-ranked proposal not yet failed whose goal the library
/// can serve, and instantiates the matching entry.
pub fn recover(
    failed: &BTreeSet<State>,
    remaining: &[GoalProposal],
    lib: &PlanLibrary,
) -> Option<(PlanEntry, GoalProposal, MatchScore)> {
    let mut sorted: Vec<&GoalProposal> = remaining.iter().collect();
    sorted.sort_by_key(|p| p.rank);
    for p in sorted {
        if failed.contains(&p.goal) {
            continue;
        }
        let Ok(m) = match_plan(lib, &p.goal) else { continue };
        if m.overlap == 0 {
            continue;
        }
        let entry = lib.entries[m.entry_index].instantiate(&m.substitution);
        return Some((entry, p.clone(), m));
    }
    None
}

// ---------------------------------------------------------------------------
// The loop

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Pre,
    Dispatch,
    Effect,
    Goal,
}

#[derive(Debug, Clone)]
struct ActivePlan {
    proposal: GoalProposal,
    entry: String,
    steps: Vec<GroundAction>,
    idx: usize,
    stage: Stage,
    replans_left: usize,
}

#[derive(Debug, Clone)]
enum Phase {
    VerifyStart,
    Request { from: State },
    Execute(Box<ActivePlan>),
    VerifyTask,
    Done,
}

/// Single-task loop state.
pub struct Monitor<'a> {
    pub task: TaskSentence,
    pub start: State,
    /// Terminal goal of the task.
    pub goal: State,
    lib: &'a PlanLibrary,
    cfg: MonitorConfig,
    plan_opts: PlanOptions,
    phase: Phase,
    remaining: Vec<GoalProposal>,
    failed: BTreeSet<State>,
    goals_selected: usize,
    events: Vec<MonitorEvent>,
    attempts: Vec<GoalAttempt>,
    outcome: Option<Outcome>,
    steps: usize,
    bound: usize,
}

fn strings(s: &State) -> Vec<String> {
    s.to_strings()
}

impl<'a> Monitor<'a> {
    pub fn new(task: TaskSentence, start: State, goal: State, lib: &'a PlanLibrary, cfg: MonitorConfig) -> Self {
        let max_len = max_plan_len(lib);
        let bound = cfg.step_bound(max_len);
        Monitor {
            task,
            start,
            goal,
            lib,
            cfg,
            plan_opts: PlanOptions::default(),
            phase: Phase::VerifyStart,
            remaining: Vec::new(),
            failed: BTreeSet::new(),
            goals_selected: 0,
            events: Vec::new(),
            attempts: Vec::new(),
            outcome: None,
            steps: 0,
            bound,
        }
    }

    pub fn is_done(&self) -> bool {
        matches!(self.phase, Phase::Done)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn bound(&self) -> usize {
        self.bound
    }

    pub fn events(&self) -> &[MonitorEvent] {
        &self.events
    }

    fn emit(&mut self, kind: EventKind, out: &mut Vec<MonitorEvent>) {
        let e = MonitorEvent { t: self.events.len(), kind };
        out.push(e.clone());
        self.events.push(e);
    }

    fn end(&mut self, outcome: Outcome, out: &mut Vec<MonitorEvent>) {
        self.emit(EventKind::EndTask { outcome: outcome.clone() }, out);
        self.outcome = Some(outcome);
        self.phase = Phase::Done;
    }

    fn query(&mut self, world: &mut dyn World, purpose: QueryPurpose, s: &State, out: &mut Vec<MonitorEvent>) -> Observation {
        self.emit(EventKind::VisionQuery { purpose, state: strings(s) }, out);
        let obs = world.query(s);
        self.emit(
            EventKind::VisionResult { purpose, holds: obs.holds, depth: obs.depth, search_steps: obs.search_steps },
            out,
        );
        obs
    }

    /// Selects the next usable proposal from `self.remaining` and makes it
    /// the active plan; ends the task when none is left or the goal bound
    /// is reached.
    fn select_next(&mut self, out: &mut Vec<MonitorEvent>, reason: &str) {
        loop {
            if self.goals_selected >= self.cfg.max_goals {
                self.end(Outcome::Failure("goal_bound".into()), out);
                return;
            }
            let Some((entry, proposal, m)) = recover(&self.failed, &self.remaining, self.lib) else {
                self.end(Outcome::Failure(reason.to_string()), out);
                return;
            };
            self.remaining.retain(|p| p.rank != proposal.rank);
            self.goals_selected += 1;
            self.emit(
                EventKind::ProposalSelected {
                    rank: proposal.rank,
                    entry: m.entry.clone(),
                    overlap: m.overlap,
                    goal: strings(&proposal.goal),
                },
                out,
            );
            self.attempts.push(GoalAttempt {
                rank: proposal.rank,
                entry: m.entry.clone(),
                goal: strings(&proposal.goal),
                reached: false,
            });
            match plan(&entry, &self.plan_opts) {
                Ok(p) => {
                    self.phase = Phase::Execute(Box::new(ActivePlan {
                        proposal,
                        entry: m.entry,
                        steps: p.steps,
                        idx: 0,
                        stage: Stage::Pre,
                        replans_left: self.cfg.replans,
                    }));
                    return;
                }
                Err(e) => {
                    self.failed.insert(proposal.goal.clone());
                    self.emit(EventKind::Recovery { failed_goal: strings(&proposal.goal), reason: format!("no_plan: {e}") }, out);
                }
            }
        }
    }

    fn fail_goal(&mut self, goal: State, reason: &str, out: &mut Vec<MonitorEvent>) {
        self.failed.insert(goal.clone());
        self.emit(EventKind::Recovery { failed_goal: strings(&goal), reason: reason.to_string() }, out);
        self.select_next(out, reason);
    }

    /// Performs one transition of the loop and returns the events it emitted.
    pub fn step(&mut self, world: &mut dyn World, goals: &mut dyn GoalSource) -> Vec<MonitorEvent> {
        let mut out = Vec::new();
        if self.is_done() {
            return out;
        }
        self.steps += 1;
        if self.steps > self.bound {
            self.end(Outcome::Failure("step_bound".into()), &mut out);
            return out;
        }
        match self.phase.clone() {
            Phase::Done => {}
            Phase::VerifyStart => {
                let start = self.start.clone();
                let obs = self.query(world, QueryPurpose::Start, &start, &mut out);
                if obs.holds {
                    self.phase = Phase::Request { from: start };
                } else {
                    self.end(Outcome::Failure("start_not_verified".into()), &mut out);
                }
            }
            Phase::Request { from } => {
                let props = goals.propose(&self.task, &from, self.cfg.k);
                self.emit(
                    EventKind::ProposalRequested {
                        from: strings(&from),
                        proposals: props.iter().map(|p| strings(&p.goal)).collect(),
                    },
                    &mut out,
                );
                self.remaining = props;
                self.select_next(&mut out, "no_matching_proposal");
            }
            Phase::Execute(mut ap) => {
                let selected = self.goals_selected;
                self.exec_step(&mut ap, world, &mut out);
                // recovery may have installed another plan meanwhile
                if matches!(self.phase, Phase::Execute(_)) && self.goals_selected == selected {
                    self.phase = Phase::Execute(ap);
                }
            }
            Phase::VerifyTask => {
                let goal = self.goal.clone();
                let obs = self.query(world, QueryPurpose::Task, &goal, &mut out);
                if obs.holds {
                    self.end(Outcome::Success, &mut out);
                } else {
                    self.end(Outcome::Failure("task_goal_not_verified".into()), &mut out);
                }
            }
        }
        out
    }

    fn exec_step(&mut self, ap: &mut ActivePlan, world: &mut dyn World, out: &mut Vec<MonitorEvent>) {
        match ap.stage {
            Stage::Pre => {
                if ap.idx == ap.steps.len() {
                    ap.stage = Stage::Goal;
                    // falls through to the goal check on the same step
                    return self.exec_step(ap, world, out);
                }
                let pre = ap.steps[ap.idx].pre.clone();
                let obs = self.query(world, QueryPurpose::Precondition, &pre, out);
                if obs.holds {
                    ap.stage = Stage::Dispatch;
                } else {
                    let reason = if obs.depth < 0.0 { "vision_timeout" } else { "precondition_failed" };
                    self.fail_goal(ap.proposal.goal.clone(), reason, out);
                }
            }
            Stage::Dispatch => {
                let action = ap.steps[ap.idx].clone();
                let world_action = action.class == ActionClass::World;
                self.emit(EventKind::ActionDispatch { action: action.to_string(), world: world_action }, out);
                let res = world.execute(&action);
                let (succeeded, reason) = match &res {
                    ActionOutcome::Succeeded => (true, None),
                    ActionOutcome::Failed(r) => (false, Some(r.clone())),
                };
                self.emit(EventKind::ActionResult { action: action.to_string(), succeeded, reason }, out);
                if succeeded {
                    ap.stage = Stage::Effect;
                } else {
                    self.action_failed(ap, world_action, "action_failed", out);
                }
            }
            Stage::Effect => {
                let action = &ap.steps[ap.idx];
                let world_action = action.class == ActionClass::World;
                let add = action.add.clone();
                let obs = self.query(world, QueryPurpose::Effect, &add, out);
                if obs.holds {
                    ap.idx += 1;
                    ap.stage = Stage::Pre;
                } else {
                    let reason = if obs.depth < 0.0 { "vision_timeout" } else { "effect_not_verified" };
                    self.action_failed(ap, world_action, reason, out);
                }
            }
            Stage::Goal => {
                let goal = ap.proposal.goal.clone();
                let obs = self.query(world, QueryPurpose::Goal, &goal, out);
                if obs.holds {
                    if let Some(a) = self.attempts.last_mut() {
                        a.reached = true;
                    }
                    self.emit(EventKind::GoalReached { entry: ap.entry.clone(), goal: strings(&goal) }, out);
                    self.phase = if self.goal.is_subset(&goal) { Phase::VerifyTask } else { Phase::Request { from: goal } };
                } else {
                    let reason = if obs.depth < 0.0 { "vision_timeout" } else { "goal_not_verified" };
                    self.fail_goal(goal, reason, out);
                }
            }
        }
    }

    fn action_failed(&mut self, ap: &mut ActivePlan, world_action: bool, reason: &str, out: &mut Vec<MonitorEvent>) {
        if world_action && ap.replans_left > 0 {
            ap.replans_left -= 1;
            ap.idx = 0;
            ap.stage = Stage::Pre;
        } else {
            self.fail_goal(ap.proposal.goal.clone(), reason, out);
        }
    }

    pub fn finish(self) -> ExecutionTrace {
        ExecutionTrace {
            task: self.task.id.clone(),
            events: self.events,
            outcome: self.outcome.unwrap_or(Outcome::Failure("not_finished".into())),
            goals: self.attempts,
            steps: self.steps,
        }
    }
}

/// Longest plan among the library entries.
pub fn max_plan_len(lib: &PlanLibrary) -> usize {
    lib.entries.iter().filter_map(|e| plan(e, &PlanOptions::default()).ok()).map(|p| p.steps.len()).max().unwrap_or(1)
}

pub fn run_task(
    task: &TaskSentence,
    start: &State,
    goal: &State,
    lib: &PlanLibrary,
    world: &mut dyn World,
    goals: &mut dyn GoalSource,
    cfg: &MonitorConfig,
) -> ExecutionTrace {
    let mut m = Monitor::new(task.clone(), start.clone(), goal.clone(), lib, cfg.clone());
    while !m.is_done() {
        m.step(world, goals);
    }
    m.finish()
}

// ---------------------------------------------------------------------------
// Simulated world

/// An object moved to another support once, before the first action.
#[derive(Debug, Clone, PartialEq, serde::Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Relocation {
    pub object: String,
    pub onto: String,
    pub probability: f64,
}

/// Moves boxes and attachments for the warehouse action schemas.
#[derive(Debug, Clone)]
pub struct SimActuator {
    /// Transient failure probability of each world-action attempt.
    pub failure_prob: f64,
    pub seed: u64,
    pub relocation: Option<Relocation>,
    /// Distance kept from a target when approaching it.
    pub standoff: f64,
    /// Maximum robot-to-object distance for manipulation.
    pub reach: f64,
    attempts: BTreeMap<String, u64>,
    disturbed: bool,
    pub relocated: bool,
}

fn mix(mut h: u64, bytes: &[u8]) -> u64 {
    // FNV-1a
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

impl SimActuator {
    pub fn new(failure_prob: f64, seed: u64, relocation: Option<Relocation>) -> SimActuator {
        SimActuator {
            failure_prob,
            seed,
            relocation,
            standoff: 0.6,
            reach: 1.0,
            attempts: BTreeMap::new(),
            disturbed: false,
            relocated: false,
        }
    }

    /// Draw for the n-th attempt of one action. Keyed by the action text so
    /// runs that dispatch the same actions see the same failures.
    fn draw(&self, tag: &str, n: u64) -> f64 {
        let h = mix(mix(0xcbf2_9ce4_8422_2325 ^ self.seed, tag.as_bytes()), &n.to_le_bytes());
        ChaCha8Rng::seed_from_u64(h).random::<f64>()
    }

    fn disturb(&mut self, scene: &mut Scene) {
        if self.disturbed {
            return;
        }
        self.disturbed = true;
        let Some(r) = self.relocation.clone() else { return };
        if self.draw("relocation", 0) < r.probability && place_on(scene, &r.object, &r.onto) {
            scene.attachments.retain(|a| a.object != r.object);
            self.relocated = true;
        }
    }

    pub fn execute(&mut self, scene: &mut Scene, a: &GroundAction) -> ActionOutcome {
        self.disturb(scene);
        let args: Vec<&str> = a.args.iter().map(|x| &**x).collect();
        let fail = |m: String| ActionOutcome::Failed(m);
        if a.class == ActionClass::World {
            let key = a.to_string();
            let n = self.attempts.entry(key.clone()).or_default();
            *n += 1;
            let n = *n;
            if self.draw(&key, n) < self.failure_prob {
                return fail("transient failure".into());
            }
        }
        match (&*a.schema, args.as_slice()) {
            ("search", [_, x]) => match scene.object(x) {
                Some(o) => {
                    scene.camera = scene.camera.aimed_at(o.aabb.center());
                    ActionOutcome::Succeeded
                }
                None => fail(format!("{x} not present")),
            },
            ("approach", [r, s]) | ("go_to_person", [r, s]) => match scene.object(s).map(|o| o.aabb.center()) {
                Some(c) => {
                    move_robot(scene, r, c, self.standoff);
                    ActionOutcome::Succeeded
                }
                None => fail(format!("{s} not present")),
            },
            ("grasp", [r, h, o, s]) => {
                if scene.object(o).is_none() || scene.object(s).is_none() {
                    return fail(format!("{o} or {s} not present"));
                }
                if scene.attachments.iter().any(|x| x.hand == *h) {
                    return fail(format!("{h} is not free"));
                }
                if !rests_on(scene, o, s) {
                    return fail(format!("{o} is not on {s}"));
                }
                if distance(scene, r, o) > self.reach {
                    return fail(format!("{o} out of reach"));
                }
                attach(scene, h, o);
                ActionOutcome::Succeeded
            }
            ("handover", [r, h, th, _p, o]) => {
                if !scene.is_attached(h, o) {
                    return fail(format!("{h} does not hold {o}"));
                }
                if scene.object(th).is_none() || distance(scene, r, th) > self.reach {
                    return fail(format!("{th} out of reach"));
                }
                scene.attachments.retain(|x| !(x.hand == *h && x.object == *o));
                attach(scene, th, o);
                ActionOutcome::Succeeded
            }
            ("place", [r, h, o, s]) => {
                if !scene.is_attached(h, o) {
                    return fail(format!("{h} does not hold {o}"));
                }
                if scene.object(s).is_none() || distance(scene, r, s) > self.reach {
                    return fail(format!("{s} out of reach"));
                }
                scene.attachments.retain(|x| !(x.hand == *h && x.object == *o));
                place_on(scene, o, s);
                ActionOutcome::Succeeded
            }
            _ => fail(format!("no actuator routine for {a}")),
        }
    }
}

fn distance(scene: &Scene, a: &str, b: &str) -> f64 {
    match (scene.object(a), scene.object(b)) {
        (Some(x), Some(y)) => {
            let (p, q) = (x.aabb.center(), y.aabb.center());
            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
        }
        _ => f64::INFINITY,
    }
}

fn rests_on(scene: &Scene, o: &str, s: &str) -> bool {
    let (Some(a), Some(b)) = (scene.object(o), scene.object(s)) else { return false };
    a.supported_by.as_deref() == Some(s)
        || ((a.aabb.min[2] - b.aabb.max[2]).abs() <= 0.02 && a.aabb.footprint_overlap(&b.aabb) > 0.0)
}

fn set_center(scene: &mut Scene, id: &str, c: [f64; 3]) {
    if let Some(o) = scene.object_mut(id) {
        let old = o.aabb.center();
        o.aabb = o.aabb.translated([c[0] - old[0], c[1] - old[1], c[2] - old[2]]);
    }
}

fn attach(scene: &mut Scene, hand: &str, o: &str) {
    let Some(hc) = scene.object(hand).map(|h| h.aabb.center()) else { return };
    set_center(scene, o, hc);
    if let Some(obj) = scene.object_mut(o) {
        obj.supported_by = None;
    }
    scene.attachments.push(crate::perception::Attachment { hand: hand.to_string(), object: o.to_string() });
}

/// Puts `o` on top of `s`, centred. False when either is missing.
fn place_on(scene: &mut Scene, o: &str, s: &str) -> bool {
    let Some(sb) = scene.object(s).map(|x| x.aabb) else { return false };
    let Some(ob) = scene.object(o).map(|x| x.aabb) else { return false };
    let sc = sb.center();
    let h = ob.size()[2];
    set_center(scene, o, [sc[0], sc[1], sb.max[2] + h / 2.0]);
    if let Some(obj) = scene.object_mut(o) {
        obj.supported_by = Some(s.to_string());
    }
    true
}

/// Drives the robot body to `standoff` metres from `target`, facing it.
/// The camera, self parts and everything they hold move along.
fn move_robot(scene: &mut Scene, robot: &str, target: [f64; 3], standoff: f64) {
    let Some(rb) = scene.object(robot).map(|o| o.aabb) else { return };
    let rc = rb.center();
    let (dx, dy) = (target[0] - rc[0], target[1] - rc[1]);
    let len = (dx * dx + dy * dy).sqrt();
    let dir = if len < 1e-9 { [scene.camera.yaw.cos(), scene.camera.yaw.sin()] } else { [dx / len, dy / len] };
    let new_c = [target[0] - dir[0] * standoff, target[1] - dir[1] * standoff, rc[2]];
    let shift = [new_c[0] - rc[0], new_c[1] - rc[1], 0.0];
    let parts: Vec<String> = scene.objects.iter().filter(|o| o.is_self && o.id != robot).map(|o| o.id.clone()).collect();
    set_center(scene, robot, new_c);
    // self parts keep their offset along the new heading
    let heading = dir[1].atan2(dir[0]);
    // the current heading is where the first self part sits relative to the body
    let old_heading = parts
        .first()
        .and_then(|p| scene.object(p))
        .map(|o| {
            let c = o.aabb.center();
            (c[1] - rc[1]).atan2(c[0] - rc[0])
        })
        .unwrap_or(scene.camera.yaw);
    for p in &parts {
        let Some(pc) = scene.object(p).map(|o| o.aabb.center()) else { continue };
        let rel = [pc[0] - rc[0], pc[1] - rc[1]];
        let (s, c) = (heading - old_heading).sin_cos();
        let rot = [rel[0] * c - rel[1] * s, rel[0] * s + rel[1] * c];
        set_center(scene, p, [new_c[0] + rot[0], new_c[1] + rot[1], pc[2]]);
    }
    let held: Vec<(String, String)> =
        scene.attachments.iter().map(|a| (a.hand.clone(), a.object.clone())).collect();
    for (h, o) in held {
        if parts.contains(&h) || h == robot {
            if let Some(hc) = scene.object(&h).map(|x| x.aabb.center()) {
                set_center(scene, &o, hc);
            }
        }
    }
    let cam = &mut scene.camera;
    cam.position = [cam.position[0] + shift[0], cam.position[1] + shift[1], cam.position[2]];
    cam.yaw = heading;
}

/// Live perception over a simulated scene.
pub struct SimWorld {
    pub scene: Scene,
    pub model: DetectorModel,
    pub vision: VisionConfig,
    pub vocab: Arc<Vocabulary>,
    pub actuator: SimActuator,
}

impl World for SimWorld {
    fn query(&mut self, s: &State) -> Observation {
        let r = query_vision(s, &self.scene, &self.scene.camera, &mut self.model, &self.vocab, &self.vision);
        self.scene.camera = r.camera;
        Observation { holds: r.holds, depth: r.depth, search_steps: r.search_steps }
    }

    fn execute(&mut self, action: &GroundAction) -> ActionOutcome {
        self.actuator.execute(&mut self.scene, action)
    }
}

/// Full world knowledge taken once at the start, no perception: queries are
/// answered from that snapshot updated by the expected action effects, and
/// the actuator's reports are not observed.
pub struct KnowledgeWorld {
    pub inner: SimWorld,
    snapshot: Scene,
    added: State,
    deleted: State,
    relations: RelationConfig,
}

impl KnowledgeWorld {
    pub fn new(inner: SimWorld) -> KnowledgeWorld {
        let snapshot = inner.scene.clone();
        let relations = inner.vision.relations;
        KnowledgeWorld { inner, snapshot, added: State::new(), deleted: State::new(), relations }
    }

    fn believes(&self, a: &crate::symbolic::Atom) -> bool {
        let a = a.timeless();
        if self.added.contains(&a) {
            return true;
        }
        if self.deleted.contains(&a) {
            return false;
        }
        ground_truth_atom(&a, &self.snapshot, &self.inner.vocab, &self.relations)
    }
}

impl World for KnowledgeWorld {
    fn query(&mut self, s: &State) -> Observation {
        let holds = s.iter().all(|a| self.believes(a));
        Observation { holds, depth: if holds { 0.0 } else { -1.0 }, search_steps: 0 }
    }

    fn execute(&mut self, action: &GroundAction) -> ActionOutcome {
        let _ = self.inner.execute(action);
        for a in action.delete.iter() {
            self.added.remove(a);
            self.deleted.insert(a.clone());
        }
        for a in action.add.iter() {
            self.deleted.remove(a);
            self.added.insert(a.clone());
        }
        ActionOutcome::Succeeded
    }
}

/// Box of a scene object, for tests and reports.
pub fn object_box(scene: &Scene, id: &str) -> Option<Aabb> {
    scene.object(id).map(|o| o.aabb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symbolic::Atom;

    struct Scripted2 {
        answers: Vec<bool>,
        i: usize,
    }

    impl World for Scripted2 {
        fn query(&mut self, _s: &State) -> Observation {
            let h = self.answers.get(self.i).copied().unwrap_or(true);
            self.i += 1;
            Observation { holds: h, depth: if h { 1.0 } else { -1.0 }, search_steps: 0 }
        }
        fn execute(&mut self, _a: &GroundAction) -> ActionOutcome {
            ActionOutcome::Succeeded
        }
    }

    fn lib() -> PlanLibrary {
        PlanLibrary::load(concat!(env!("CARGO_MANIFEST_DIR"), "/data/warehouse/library.toml")).unwrap()
    }

    #[test]
    fn first_step_after_start_requests_goals() {
        let lib = lib();
        let task = lib.vocab.task("bring_brush").unwrap().clone();
        let tc = lib.task_chains("bring_brush").unwrap();
        let goals = tc.chains[0].goals.clone();
        let mut src = Scripted { goals: goals.clone() };
        let mut w = Scripted2 { answers: vec![], i: 0 };
        let mut m = Monitor::new(task, tc.start.clone(), goals.last().unwrap().clone(), &lib, MonitorConfig::default());
        let e1 = m.step(&mut w, &mut src);
        assert!(matches!(e1[0].kind, EventKind::VisionQuery { purpose: QueryPurpose::Start, .. }));
        let e2 = m.step(&mut w, &mut src);
        assert!(matches!(e2[0].kind, EventKind::ProposalRequested { .. }));
        assert!(matches!(e2[1].kind, EventKind::ProposalSelected { rank: 1, .. }));
    }

    #[test]
    fn all_true_world_reaches_the_scripted_goals() {
        let lib = lib();
        let task = lib.vocab.task("bring_brush").unwrap().clone();
        let tc = lib.task_chains("bring_brush").unwrap();
        let goals = tc.chains[0].goals.clone();
        let mut src = Scripted { goals: goals.clone() };
        let mut w = Scripted2 { answers: vec![], i: 0 };
        let t = run_task(&task, &tc.start, goals.last().unwrap(), &lib, &mut w, &mut src, &MonitorConfig::default());
        assert_eq!(t.outcome, Outcome::Success);
        assert_eq!(t.verified_states().len(), 5);
        assert!(matches!(t.events.last().unwrap().kind, EventKind::EndTask { .. }));
    }

    #[test]
    fn recover_skips_failed_and_unmatched() {
        let lib = lib();
        let g1 = State::from_strs(&["On(brush, table)", "Detected(brush)", "Detected(table)"]).unwrap();
        let g2 = State::from_strs(&["On(brush, ladder)", "Detected(brush)", "Detected(ladder)"]).unwrap();
        let props = vec![
            GoalProposal { goal: g1.clone(), log_prob: -0.1, rank: 1 },
            GoalProposal { goal: g2.clone(), log_prob: -0.5, rank: 2 },
        ];
        let failed: BTreeSet<State> = [g1].into_iter().collect();
        let (_, p, m) = recover(&failed, &props, &lib).unwrap();
        assert_eq!(p.rank, 2);
        assert_eq!(m.entry, "locate");
        let junk = vec![GoalProposal {
            goal: [Atom::new("HeadUp", &["robot"])].into_iter().collect(),
            log_prob: 0.0,
            rank: 1,
        }];
        assert!(recover(&BTreeSet::new(), &junk, &lib).is_none());
    }

    #[test]
    fn scripted_source_follows_the_list() {
        let a = State::from_strs(&["Free(robot_hand)"]).unwrap();
        let b = State::from_strs(&["VisionOn(robot)"]).unwrap();
        let mut s = Scripted { goals: vec![a.clone(), b.clone()] };
        let t = TaskSentence::new("x", "x");
        assert_eq!(s.propose(&t, &State::new(), 3)[0].goal, a);
        assert_eq!(s.propose(&t, &a, 3)[0].goal, b);
        assert!(s.propose(&t, &b, 3).is_empty());
    }
}
