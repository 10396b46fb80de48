//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `cargo test -p deepmon --test acceptance` runs everything (about half an
//! hour on one core). Pass criterion numbers to run a subset, e.g.
//! `cargo test -p deepmon --test acceptance -- 1 2 7`. The process exits 0
//! after printing unless `DEEPMON_ACCEPTANCE_STRICT=1` is set, in which case
//! any FAIL gives exit code 1.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use common::*;
use deepmon::goalnet::{self, grad_check, infer_topk, GoalNetParams, GradMutation, GrowConfig, Hyper, TrainingPair};
use deepmon::harness::{
    eval_curve, run_scenario, run_trial, train_predictor, AblationConfig, CurveRow, LoadedScenario, Mode,
    PredictorConfig,
};
use deepmon::monitor::{max_plan_len, EventKind, MonitorConfig, Relocation};
use deepmon::pddl::{parse_domain, parse_problem, PlanEntry, PlanLibrary};
use deepmon::perception::{ablation_accuracy, corpus_noise, ground_relation, Features, NoiseProfile, RelationConfig, View};
use deepmon::planner::{apply, plan, PlanOptions, PlannerError, Strategy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TASKS: [&str; 5] = ["remove_panel", "hold_guard", "clean_diverter", "bring_brush", "find_brush"];

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn data(p: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/warehouse").join(p)
}

fn scenario(name: &str) -> LoadedScenario {
    LoadedScenario::load(data(&format!("scenarios/{name}.toml"))).unwrap()
}

fn library() -> &'static PlanLibrary {
    static LIB: OnceLock<PlanLibrary> = OnceLock::new();
    LIB.get_or_init(|| PlanLibrary::load(data("library.toml")).unwrap())
}

/// Predictor used by the GPr mode, trained once with the default settings.
fn predictor() -> &'static GoalNetParams {
    static NET: OnceLock<GoalNetParams> = OnceLock::new();
    NET.get_or_init(|| train_predictor(library(), &PredictorConfig::default(), 7).unwrap())
}

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !($cond) {
            return Err(format!($($msg)+));
        }
    };
}

// 1 -------------------------------------------------------------------------

fn planner_oracle() -> Check {
    let t = Instant::now();
    let (mut solvable, mut unsolvable, mut max_states) = (0, 0, 0);
    let mut seed = 0u64;
    while solvable < 50 {
        let g = gen_domain(&mut ChaCha8Rng::seed_from_u64(seed));
        seed += 1;
        let (want, states) = g.bfs_oracle();
        ensure!(states <= 100_000, "domain {seed} explores {states} states");
        max_states = max_states.max(states);
        let d = Arc::new(parse_domain(&g.domain_pddl()).map_err(|e| e.to_string())?);
        let p = parse_problem(&g.problem_pddl(), &d).map_err(|e| e.to_string())?;
        let e = PlanEntry::new("gen", d, p);
        let got = plan(&e, &PlanOptions { strategy: Strategy::UniformCost, budget: 1_000_000 });
        match (want, got) {
            (Some(n), Ok(sol)) => {
                ensure!(sol.steps.len() == n, "domain {seed}: planner {} oracle {n}", sol.steps.len());
                let end = sol.steps.iter().try_fold(e.problem.init.clone(), |s, a| apply(&s, a)).map_err(|e| e.to_string())?;
                ensure!(e.goal_state.is_subset(&end), "domain {seed}: plan misses the goal");
                solvable += 1;
            }
            (None, Err(PlannerError::NoPlan { .. })) => unsolvable += 1,
            (w, g) => return Err(format!("domain {seed}: oracle {w:?} planner {:?}", g.map(|s| s.steps.len()))),
        }
    }
    let secs = t.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1}s");
    Ok(format!("{solvable}/50 lengths equal (+{unsolvable} unsolvable agree), max {max_states} states, {secs:.1}s"))
}

// 2 -------------------------------------------------------------------------

fn relation_fidelity() -> Check {
    let cfg = RelationConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0;
    for i in 0..10_000 {
        let (a, b) = rand_pair(&mut rng);
        let cam = rand_camera(&mut rng);
        let s = scene(cam, vec![obj("a", a.min, a.max), obj("b", b.min, b.max)]);
        let view = View::truth(&s);
        let g = |r: &str, x: &str, y: &str| ground_relation(r, &[x, y], &view, &cfg).map_err(|e| e.to_string());
        for rule in RULES2 {
            let got = g(rule, "a", "b")?;
            ensure!(got == oracle2(rule, &a, &b, &cam, &cfg), "config {i}: {rule} disagrees");
            ensure!(g(rule, "b", "a")? == oracle2(rule, &b, &a, &cam, &cfg), "config {i}: {rule} reversed disagrees");
            checked += 2;
        }
        for (p, q) in [("Left", "Right"), ("InFront", "Behind")] {
            for (x, y) in [("a", "b"), ("b", "a")] {
                ensure!(g(p, x, y)? == g(q, y, x)?, "config {i}: {p}({x},{y}) vs {q}({y},{x})");
                ensure!(!(g(p, x, y)? && g(q, x, y)?), "config {i}: {p} and {q} both hold");
            }
        }
    }
    Ok(format!("10000 configs, {checked} relation checks agree, antisymmetry holds"))
}

// 3 -------------------------------------------------------------------------

fn grounding_ablation() -> Check {
    let noise = corpus_noise();
    let acc = |f| ablation_accuracy(1000, 7, f, &noise, 10).mean();
    let (full, no_shape, no_depth) = (acc(Features::FULL), acc(Features::NO_SHAPE), acc(Features::NO_DEPTH));
    let line = format!("full {:.1}% > no-shape {:.1}% > no-depth {:.1}%", full * 100.0, no_shape * 100.0, no_depth * 100.0);
    ensure!(full - no_shape > 0.03 && no_shape - no_depth > 0.03, "{line}");
    Ok(line)
}

// 4 -------------------------------------------------------------------------

fn gradient_check() -> Check {
    let lib = library();
    let pairs = goalnet::grow_dataset(lib, &GrowConfig { target: 50, min_atoms: 6, ..GrowConfig::default() }, 4)
        .map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (i, attention) in [true, false].into_iter().enumerate() {
        for p in pairs.iter().skip(10).step_by(13).take(2) {
            let (seq, target) = p.encode(&lib.vocab).map_err(|e| e.to_string())?;
            let params = GoalNetParams::init(&lib.vocab, attention, 3 + i as u64);
            let r = grad_check(&params, &seq.tokens, &target, 1e-5, 200, 9, GradMutation::None);
            for (g, e) in &r.per_group {
                ensure!(*e < 1e-4, "attention={attention} group {g}: {e:.2e}");
            }
            worst = worst.max(r.max_rel_error);
        }
    }
    let (seq, target) = pairs[10].encode(&lib.vocab).map_err(|e| e.to_string())?;
    let params = GoalNetParams::init(&lib.vocab, true, 3);
    let bad = grad_check(&params, &seq.tokens, &target, 1e-5, 200, 9, GradMutation::AttentionSoftmax);
    ensure!(bad.max_rel_error > 1e-2, "mutation not detected: {:.2e}", bad.max_rel_error);
    Ok(format!("max rel error {worst:.2e}, corrupted gradient {:.2e}", bad.max_rel_error))
}

// 5 -------------------------------------------------------------------------

fn overfit() -> Check {
    let lib = library();
    // the first manifest transition, unaugmented
    let pair = goalnet::grow_dataset(lib, &GrowConfig { target: 1, ..GrowConfig::default() }, 5)
        .map_err(|e| e.to_string())?
        .remove(0);
    let h = Hyper { epochs: 100, lr: 0.1, final_lr: 1.0, ..Hyper::default() };
    let r = goalnet::train(std::slice::from_ref(&pair), &lib.vocab, &h, true, 1, |_, _| {}).map_err(|e| e.to_string())?;
    let (seq, target) = pair.encode(&lib.vocab).map_err(|e| e.to_string())?;
    let loss = goalnet::loss_and_grad(&r.params, &seq.tokens, &target, None, GradMutation::None);
    let props = infer_topk(&pair.task, &pair.input, &r.params, &lib.vocab, 3).map_err(|e| e.to_string())?;
    let recalled = props.first().map(|p| &p.goal) == Some(&pair.target);
    let line = format!("final loss {loss:.2e}, rank 1 recall {recalled}");
    ensure!(loss < 1e-2 && recalled, "{line}");
    Ok(line)
}

// 6 -------------------------------------------------------------------------

fn pooled_top1(rows: &[CurveRow], from: usize) -> f64 {
    let (n, hits) = rows
        .iter()
        .filter(|r| r.atoms >= from)
        .fold((0usize, 0.0), |(n, h), r| (n + r.n, h + r.top1 * r.n as f64));
    hits / n.max(1) as f64
}

fn peak_drop(rows: &[CurveRow]) -> f64 {
    let peak = rows.iter().filter(|r| !r.is_empty()).map(|r| r.top1).fold(0.0, f64::max);
    let last = rows.iter().find(|r| r.atoms == 19).map_or(0.0, |r| r.top1);
    peak - last
}

fn attention_curve() -> Check {
    let lib = library();
    let cfg = GrowConfig { target: 20_000, ..GrowConfig::default() };
    let train_set = goalnet::grow_dataset(lib, &cfg, 1).map_err(|e| e.to_string())?;
    let test: Vec<TrainingPair> =
        goalnet::held_out(lib, &GrowConfig { target: 6000, ..cfg }, 2, &train_set).map_err(|e| e.to_string())?;
    let h = Hyper { epochs: 30, lr: 0.005, ..Hyper::default() };
    let mut curves = Vec::new();
    for attention in [true, false] {
        let r = goalnet::train(&train_set, &lib.vocab, &h, attention, 1, |_, _| {}).map_err(|e| e.to_string())?;
        curves.push(eval_curve(&r.params, &test, &lib.vocab, 1..=19));
    }
    let (att, base) = (&curves[0], &curves[1]);
    for rows in &curves {
        for r in rows {
            ensure!(r.top3 >= r.top1, "top3 < top1 at {} atoms", r.atoms);
        }
    }
    let seven = &att[6];
    let (a13, b13) = (pooled_top1(att, 13), pooled_top1(base, 13));
    let (da, db) = (peak_drop(att), peak_drop(base));
    let line = format!(
        "top1 at 13+ atoms: attention {:.1}% vs mean-context {:.1}%; peak-to-19 drop {:.1} vs {:.1} pts; at 7 atoms {:.1}%/{:.1}%",
        a13 * 100.0,
        b13 * 100.0,
        da * 100.0,
        db * 100.0,
        seven.top1 * 100.0,
        seven.top3 * 100.0
    );
    ensure!(a13 - b13 >= 0.05 && da < db, "{line}");
    Ok(line)
}

// 7 -------------------------------------------------------------------------

fn trace_conformance() -> Check {
    let expected: Vec<Vec<&str>> = vec![
        vec!["VisionOn(robot)", "Free(robot_hand)"],
        vec!["Detected(brush)", "Detected(ladder)", "On(brush, ladder)"],
        vec!["At(robot, ladder)", "Holding(robot_hand, brush)"],
        vec!["Detected(technician)", "CloseTo(robot, technician)"],
        vec!["Detected(technician_hand)", "Holding(technician_hand, brush)", "Free(robot_hand)"],
    ];
    let sorted = |v: &[&str]| {
        let mut v: Vec<String> = v.iter().map(|s| s.to_string()).collect();
        v.sort();
        v
    };
    let want: Vec<Vec<String>> = expected.iter().map(|s| sorted(s)).collect();
    let cfg = MonitorConfig::default();
    let sc = scenario("bring_brush").benign();
    for mode in [Mode::GPr, Mode::M] {
        let t = run_trial(&sc, mode, Some(predictor()), &cfg, 1);
        ensure!(t.success, "bring_brush {mode:?}: {:?}", t.trace.outcome);
        let got: Vec<Vec<String>> = t
            .trace
            .verified_states()
            .into_iter()
            .map(|mut s| {
                s.sort();
                s
            })
            .collect();
        ensure!(got == want, "bring_brush {mode:?} states {got:?}");
    }

    let t = run_trial(&scenario("find_brush").benign(), Mode::GPr, Some(predictor()), &cfg, 1);
    ensure!(t.success, "find_brush: {:?}", t.trace.outcome);
    let ev = &t.trace.events;
    let rec: Vec<usize> = (0..ev.len()).filter(|&i| matches!(ev[i].kind, EventKind::Recovery { .. })).collect();
    ensure!(rec.len() == 1, "{} recovery events", rec.len());
    let EventKind::Recovery { failed_goal, .. } = &ev[rec[0]].kind else { unreachable!() };
    ensure!(failed_goal.iter().any(|a| a == "On(brush, table)"), "recovered from {failed_goal:?}");
    let next = ev[rec[0]..].iter().find_map(|e| match &e.kind {
        EventKind::ProposalSelected { rank, goal, .. } => Some((*rank, goal.clone())),
        _ => None,
    });
    let Some((rank, goal)) = next else { return Err("no proposal selected after recovery".into()) };
    ensure!(rank == 2 && goal.iter().any(|a| a == "On(brush, ladder)"), "selected rank {rank} {goal:?}");
    Ok("five verified states match; recovery selects rank 2 On(brush, ladder)".into())
}

// 8 -------------------------------------------------------------------------

fn mode_ordering() -> Check {
    let t = Instant::now();
    let cfg = MonitorConfig::default();
    let net = predictor();
    let mut cells = Vec::new();
    let mut wide = 0;
    let mut problems = Vec::new();
    for name in TASKS {
        let sc = scenario(name);
        let rate = |mode| run_scenario(&sc, &cfg, &AblationConfig { mode, trials: 50 }, Some(net), sc.spec.seed);
        let (kn, m, gpr) = (rate(Mode::Kn), rate(Mode::M), rate(Mode::GPr));
        if sc.spec.requires_search && kn.supported {
            problems.push(format!("{name}: search task runs in Kn"));
        }
        let kn_rate = if kn.supported { kn.success_rate } else { 0.0 };
        if !(gpr.success_rate >= m.success_rate && m.success_rate >= kn_rate) {
            problems.push(format!("{name}: ordering"));
        }
        if gpr.success_rate - kn_rate >= 0.2 {
            wide += 1;
        }
        let kn_txt = if kn.supported { format!("{:.2}", kn.success_rate) } else { "n/a".into() };
        cells.push(format!("{name} {kn_txt}/{:.2}/{:.2}", m.success_rate, gpr.success_rate));
    }
    let secs = t.elapsed().as_secs_f64();
    if wide < 3 {
        problems.push(format!("GPr-Kn >= 20 pts on {wide} tasks"));
    }
    if secs >= 1800.0 {
        problems.push(format!("took {secs:.0}s"));
    }
    let line = format!("Kn/M/GPr: {}; wide gaps {wide}/5; {secs:.0}s", cells.join(", "));
    ensure!(problems.is_empty(), "{}; {line}", problems.join("; "));
    Ok(line)
}

// 9 -------------------------------------------------------------------------

fn dir_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .map(|d| d.map(|e| e.unwrap()).map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())).collect())
        .unwrap_or_default();
    v.sort();
    v
}

fn cli_determinism() -> Check {
    let work = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = work.path().join("small.toml");
    std::fs::write(&config, "[predictor]\npairs = 80\nepochs = 2\n\n[ablation]\ntrials = 2\n").map_err(|e| e.to_string())?;
    let lib = data("library.toml");
    let vocab = data("vocab.toml");
    let s = |p: &Path| p.to_str().unwrap().to_string();

    // a checkpoint and dataset for the invocations that need them
    let prep = work.path().join("prep");
    let o = Command::new(env!("CARGO_BIN_EXE_deepmon"))
        .args(["--seed", "5", "--out", &s(&prep), "train", &s(&lib), "--pairs", "60", "--epochs", "2"])
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(o.status.success(), "train: {}", String::from_utf8_lossy(&o.stderr));
    let net = s(&prep.join("checkpoint.json"));
    let o = Command::new(env!("CARGO_BIN_EXE_deepmon"))
        .args(["--seed", "5", "--out", &s(&prep), "datagen", &s(&lib), "--pairs", "120"])
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(o.status.success(), "datagen: {}", String::from_utf8_lossy(&o.stderr));
    let dataset = s(&prep.join("dataset.tsv"));

    let sc = |n: &str| s(&data(&format!("scenarios/{n}.toml")));
    let report_dir = work.path().join("report_src");
    let invocations: Vec<Vec<String>> = vec![
        vec!["vocab".into(), "check".into(), s(&vocab)],
        vec!["lib".into(), "validate".into(), s(&lib)],
        vec!["plan".into(), s(&lib), "fetch".into()],
        vec!["plan".into(), s(&lib), "fetch".into(), "--optimal".into()],
        vec!["match".into(), s(&lib), "Holding(robot_hand, brush)".into()],
        vec!["datagen".into(), s(&lib), "--pairs".into(), "300".into()],
        vec!["train".into(), s(&lib), "--data".into(), dataset.clone(), "--epochs".into(), "2".into()],
        vec!["train".into(), s(&lib), "--pairs".into(), "50".into(), "--epochs".into(), "2".into(), "--no-attention".into()],
        vec!["gradcheck".into(), s(&lib), "--samples".into(), "16".into()],
        vec!["eval-curve".into(), s(&lib), "--net".into(), net.clone(), "--pairs".into(), "100".into()],
        vec!["run".into(), sc("bring_brush"), "--mode".into(), "m".into(), "--trials".into(), "3".into()],
        vec!["run".into(), sc("find_brush"), "--mode".into(), "gpr".into(), "--net".into(), net.clone()],
        vec!["run".into(), sc("remove_panel"), "--mode".into(), "kn".into(), "--trials".into(), "2".into()],
        vec!["ablate".into(), sc("hold_guard"), sc("find_brush"), "--net".into(), net.clone()],
        vec!["ablate".into(), sc("clean_diverter")],
    ];
    let mut n = 0;
    for (i, args) in invocations.iter().enumerate() {
        let mut outs = Vec::new();
        for rep in 0..2 {
            let out = work.path().join(format!("inv{i}_{rep}"));
            let o = Command::new(env!("CARGO_BIN_EXE_deepmon"))
                .args(["--seed", "11", "--config", &s(&config), "--out", &s(&out)])
                .args(args)
                .output()
                .map_err(|e| e.to_string())?;
            outs.push((o.status.code(), o.stdout, dir_files(&out)));
        }
        ensure!(matches!(outs[0].0, Some(0) | Some(3)), "{args:?} exited {:?}", outs[0].0);
        ensure!(!outs[0].1.is_empty() || !outs[0].2.is_empty(), "{args:?} produced nothing");
        ensure!(outs[0] == outs[1], "{args:?} differs between runs");
        if i == invocations.len() - 1 {
            std::fs::create_dir_all(&report_dir).map_err(|e| e.to_string())?;
            for (name, bytes) in &outs[0].2 {
                std::fs::write(report_dir.join(name), bytes).map_err(|e| e.to_string())?;
            }
        }
        n += 1;
    }
    let mut outs = Vec::new();
    for _ in 0..2 {
        let o = Command::new(env!("CARGO_BIN_EXE_deepmon")).args(["report", &s(&report_dir)]).output().map_err(|e| e.to_string())?;
        outs.push((o.status.code(), o.stdout));
    }
    ensure!(outs[0] == outs[1], "report differs between runs");
    Ok(format!("{} invocations byte-identical across repeats", n + 1))
}

// 10 ------------------------------------------------------------------------

fn fuzzed_scenario(rng: &mut ChaCha8Rng) -> LoadedScenario {
    static BASE: OnceLock<Vec<LoadedScenario>> = OnceLock::new();
    let base = BASE.get_or_init(|| TASKS.iter().map(|t| scenario(t)).collect());
    let mut sc = base[rng.random_range(0..base.len())].clone();
    sc.spec.noise = NoiseProfile {
        tp_rate: rng.random_range(0.3..=1.0),
        confusion: rng.random_range(0.0..0.4),
        bbox_jitter: rng.random_range(0.0..12.0),
        depth_sigma: rng.random_range(0.0..0.15),
        fg_noise: rng.random_range(0.0..0.4),
        ..NoiseProfile::default()
    };
    sc.spec.actuator.failure_prob = rng.random_range(0.0..0.6);
    let movable: Vec<String> = sc.scene.objects.iter().filter(|o| !o.is_self).map(|o| o.id.clone()).collect();
    sc.spec.relocation = if rng.random_bool(0.5) && movable.len() >= 2 {
        let object = movable[rng.random_range(0..movable.len())].clone();
        let onto = movable[rng.random_range(0..movable.len())].clone();
        (object != onto).then(|| Relocation { object, onto, probability: rng.random_range(0.0..=1.0) })
    } else {
        None
    };
    for o in sc.scene.objects.iter_mut().filter(|o| !o.is_self) {
        if rng.random_bool(0.3) {
            let (dx, dy) = (rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6));
            for p in [&mut o.aabb.min, &mut o.aabb.max] {
                p[0] += dx;
                p[1] += dy;
            }
        }
    }
    sc
}

fn monitor_termination() -> Check {
    let t = Instant::now();
    let net = predictor();
    let lib_len = max_plan_len(library());
    let (mut ok, mut panics, mut over, mut malformed) = (0usize, 0usize, 0usize, 0usize);
    for i in 0..10_000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0xF022 ^ (i << 8));
        let sc = fuzzed_scenario(&mut rng);
        let mode = Mode::ALL[rng.random_range(0..3)];
        let cfg = MonitorConfig {
            tau: rng.random_range(1..12),
            k: rng.random_range(1..5),
            max_goals: rng.random_range(1..16),
            replans: rng.random_range(0..3),
            mu: rng.random_range(0.3..0.95),
            batch: rng.random_range(1..12),
        };
        let seed = rng.random();
        match catch_unwind(AssertUnwindSafe(|| run_trial(&sc, mode, Some(net), &cfg, seed))) {
            Err(_) => panics += 1,
            Ok(out) => {
                let bound = cfg.step_bound(lib_len);
                let ends = out.trace.events.iter().filter(|e| matches!(e.kind, EventKind::EndTask { .. })).count();
                let last_is_end = matches!(out.trace.events.last().map(|e| &e.kind), Some(EventKind::EndTask { .. }));
                if out.trace.steps > bound {
                    over += 1;
                } else if ends != 1 || !last_is_end {
                    malformed += 1;
                } else {
                    ok += 1;
                }
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let line = format!("{ok}/10000 halted within bound; {panics} panics, {over} over bound, {malformed} malformed; {secs:.0}s");
    ensure!(ok == 10_000, "{line}");
    Ok(line)
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [Criterion; 10] = [
        ("planner oracle equivalence", planner_oracle),
        ("relation grounding fidelity", relation_fidelity),
        ("grounding ablation trend", grounding_ablation),
        ("gradient correctness", gradient_check),
        ("overfit sanity", overfit),
        ("accuracy curve shape", attention_curve),
        ("trace conformance", trace_conformance),
        ("mode ordering", mode_ordering),
        ("CLI determinism", cli_determinism),
        ("monitor termination", monitor_termination),
    ];
    // libtest flags such as --nocapture may be forwarded; keep only numbers
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let res = catch_unwind(f).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t.elapsed().as_secs_f64();
        match res {
            Ok(d) => println!("PASS {n:>2} {name}: {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {d} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 && std::env::var("DEEPMON_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
