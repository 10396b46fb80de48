//! Test-side geometry oracle and scene builders shared by the integration
//! tests. Written against raw coordinates, independent of the library's
//! box and camera helpers.
#![allow(dead_code)]

use deepmon::perception::{Aabb, Camera, RelationConfig, Scene, SceneObject};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn obj(id: &str, min: [f64; 3], max: [f64; 3]) -> SceneObject {
    SceneObject { id: id.into(), class: id.into(), aabb: Aabb::new(min, max), supported_by: None, is_self: false }
}

pub fn scene(camera: Camera, objects: Vec<SceneObject>) -> Scene {
    Scene { frame: 0, camera, objects, attachments: Vec::new(), internal: Vec::new() }
}

fn centre(b: &Aabb) -> [f64; 3] {
    [(b.min[0] + b.max[0]) * 0.5, (b.min[1] + b.max[1]) * 0.5, (b.min[2] + b.max[2]) * 0.5]
}

fn clip(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    let lo = if a0 > b0 { a0 } else { b0 };
    let hi = if a1 < b1 { a1 } else { b1 };
    if hi > lo {
        hi - lo
    } else {
        0.0
    }
}

fn dist(p: [f64; 3], q: [f64; 3]) -> f64 {
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
}

/// `a` rests on `b`: bottom face near the top face, footprint mostly over it.
pub fn on(a: &Aabb, b: &Aabb, cfg: &RelationConfig) -> bool {
    let area = (a.max[0] - a.min[0]) * (a.max[1] - a.min[1]);
    let over = clip(a.min[0], a.max[0], b.min[0], b.max[0]) * clip(a.min[1], a.max[1], b.min[1], b.max[1]);
    (a.min[2] - b.max[2]).abs() <= cfg.on_gap && area > 0.0 && over >= cfg.on_overlap * area
}

pub fn inside(a: &Aabb, c: &Aabb, cfg: &RelationConfig) -> bool {
    let vol = (0..3).map(|i| a.max[i] - a.min[i]).product::<f64>();
    let inter = (0..3).map(|i| clip(a.min[i], a.max[i], c.min[i], c.max[i])).product::<f64>();
    vol > 0.0 && inter >= cfg.inside_ratio * vol
}

pub fn close_to(a: &Aabb, b: &Aabb, cfg: &RelationConfig) -> bool {
    dist(centre(a), centre(b)) <= cfg.close_to
}

pub fn holds_geom(h: &Aabb, o: &Aabb, cfg: &RelationConfig) -> bool {
    let c = centre(o);
    (0..3).all(|i| c[i] >= h.min[i] - cfg.hold_dilation && c[i] <= h.max[i] + cfg.hold_dilation)
}

/// View-relative relation between box centres; `None` when either centre
/// is farther than the camera's reliable depth.
pub fn view_rel(rule: &str, a: &Aabb, b: &Aabb, cam: &Camera, cfg: &RelationConfig) -> bool {
    let (ca, cb) = (centre(a), centre(b));
    if dist(ca, cam.position) > cam.max_depth || dist(cb, cam.position) > cam.max_depth {
        return false;
    }
    let (s, c) = cam.yaw.sin_cos();
    let (sp, cp) = cam.pitch.sin_cos();
    let d = [cb[0] - ca[0], cb[1] - ca[1], cb[2] - ca[2]];
    let lateral = d[0] * s - d[1] * c;
    let depth = d[0] * c * cp + d[1] * s * cp + d[2] * sp;
    match rule {
        "Left" => lateral > cfg.dead_band,
        "Right" => -lateral > cfg.dead_band,
        "InFront" => depth > cfg.dead_band,
        "Behind" => -depth > cfg.dead_band,
        _ => panic!("not a view relation: {rule}"),
    }
}

/// Oracle for every two-place rule over a pair of boxes.
pub fn oracle2(rule: &str, a: &Aabb, b: &Aabb, cam: &Camera, cfg: &RelationConfig) -> bool {
    match rule {
        "On" => on(a, b, cfg),
        "Under" => on(b, a, cfg),
        "Inside" => inside(a, b, cfg),
        "CloseTo" => close_to(a, b, cfg),
        "Hold" => holds_geom(a, b, cfg),
        _ => view_rel(rule, a, b, cam, cfg),
    }
}

pub const RULES2: [&str; 9] = ["On", "Under", "Inside", "CloseTo", "Hold", "Left", "Right", "InFront", "Behind"];

fn rand_box(rng: &mut ChaCha8Rng) -> Aabb {
    let c = [rng.random_range(0.3..2.8), rng.random_range(-1.5..1.5), rng.random_range(0.0..1.4)];
    let s = [rng.random_range(0.05..0.8), rng.random_range(0.05..0.8), rng.random_range(0.05..0.8)];
    Aabb::new([c[0] - s[0] / 2.0, c[1] - s[1] / 2.0, c[2]], [c[0] + s[0] / 2.0, c[1] + s[1] / 2.0, c[2] + s[2]])
}

/// A pair of boxes biased toward contact, nesting and near misses so every
/// rule sees both outcomes.
pub fn rand_pair(rng: &mut ChaCha8Rng) -> (Aabb, Aabb) {
    let b = rand_box(rng);
    let sb = [b.max[0] - b.min[0], b.max[1] - b.min[1], b.max[2] - b.min[2]];
    let a = match rng.random_range(0..4) {
        0 => rand_box(rng),
        1 => {
            // resting on b, maybe overhanging, maybe hovering
            let s = [rng.random_range(0.05..0.5), rng.random_range(0.05..0.5), rng.random_range(0.05..0.4)];
            let x = rng.random_range(b.min[0] - s[0] / 2.0..b.max[0] + s[0] / 2.0);
            let y = rng.random_range(b.min[1] - s[1] / 2.0..b.max[1] + s[1] / 2.0);
            let z = b.max[2] + rng.random_range(-0.04..0.04);
            Aabb::new([x - s[0] / 2.0, y - s[1] / 2.0, z], [x + s[0] / 2.0, y + s[1] / 2.0, z + s[2]])
        }
        2 => {
            // mostly inside b
            let f = rng.random_range(0.2..0.9);
            let s = [sb[0] * f, sb[1] * f, sb[2] * f];
            let j = rng.random_range(0.0..0.3);
            let o = [
                b.min[0] + (sb[0] - s[0]) * rng.random_range(0.0..1.0) + j * s[0] * rng.random_range(-1.0..1.0),
                b.min[1] + (sb[1] - s[1]) * rng.random_range(0.0..1.0),
                b.min[2] + (sb[2] - s[2]) * rng.random_range(0.0..1.0),
            ];
            Aabb::new(o, [o[0] + s[0], o[1] + s[1], o[2] + s[2]])
        }
        _ => {
            // small offset copy: view relations near the dead band
            let d = [rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15), rng.random_range(-0.1..0.1)];
            b.translated(d)
        }
    };
    (a, b)
}

pub fn rand_camera(rng: &mut ChaCha8Rng) -> Camera {
    Camera {
        yaw: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        pitch: rng.random_range(-0.8..0.1),
        ..Camera::default()
    }
}

// ---------------------------------------------------------------------------
// Random STRIPS domains with a breadth-first oracle over string states

use std::collections::{BTreeSet, HashMap, VecDeque};

#[derive(Debug, Clone)]
pub struct GenAtom {
    pub pred: usize,
    /// Parameter indices.
    pub args: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct GenAction {
    pub params: Vec<usize>,
    pub pre: Vec<GenAtom>,
    pub add: Vec<GenAtom>,
    pub del: Vec<GenAtom>,
}

#[derive(Debug, Clone)]
pub struct GenDomain {
    /// Argument types of each predicate.
    pub preds: Vec<Vec<usize>>,
    pub actions: Vec<GenAction>,
    /// Type of each object.
    pub objects: Vec<usize>,
    pub init: Vec<(usize, Vec<usize>)>,
    pub goal: Vec<(usize, Vec<usize>)>,
}

fn gen_atom(rng: &mut ChaCha8Rng, preds: &[Vec<usize>], params: &[usize]) -> Option<GenAtom> {
    let pred = rng.random_range(0..preds.len());
    let mut args = Vec::new();
    for &t in &preds[pred] {
        let fits: Vec<usize> = (0..params.len()).filter(|&i| params[i] == t).collect();
        if fits.is_empty() {
            return None;
        }
        args.push(fits[rng.random_range(0..fits.len())]);
    }
    Some(GenAtom { pred, args })
}

fn ground_atoms_of(preds: &[Vec<usize>], objects: &[usize]) -> Vec<(usize, Vec<usize>)> {
    let mut out = Vec::new();
    for (p, types) in preds.iter().enumerate() {
        let mut combos: Vec<Vec<usize>> = vec![Vec::new()];
        for &t in types {
            let objs: Vec<usize> = (0..objects.len()).filter(|&o| objects[o] == t).collect();
            combos = combos.iter().flat_map(|c| objs.iter().map(move |&o| [c.clone(), vec![o]].concat())).collect();
        }
        out.extend(combos.into_iter().map(|c| (p, c)));
    }
    out
}

pub fn gen_domain(rng: &mut ChaCha8Rng) -> GenDomain {
    let n_types = rng.random_range(1..=2);
    let n_preds = rng.random_range(2..=4);
    let preds: Vec<Vec<usize>> =
        (0..n_preds).map(|_| (0..rng.random_range(1..=2)).map(|_| rng.random_range(0..n_types)).collect()).collect();
    let mut objects: Vec<usize> = (0..n_types).collect();
    for _ in 0..rng.random_range(0..=2) {
        objects.push(rng.random_range(0..n_types));
    }
    let mut actions = Vec::new();
    let n_actions = rng.random_range(2..=4);
    while actions.len() < n_actions {
        let params: Vec<usize> = (0..rng.random_range(1..=2)).map(|_| rng.random_range(0..n_types)).collect();
        let pick = |rng: &mut ChaCha8Rng, n: usize| -> Vec<GenAtom> {
            (0..n).filter_map(|_| gen_atom(rng, &preds, &params)).collect()
        };
        let (np, na, nd) = (rng.random_range(0..=2), rng.random_range(1..=2), rng.random_range(0..=1));
        let pre = pick(rng, np);
        let add = pick(rng, na);
        let mut del = pick(rng, nd);
        if !pre.is_empty() && rng.random::<f64>() < 0.5 {
            del.push(pre[0].clone());
        }
        del.retain(|d| !add.iter().any(|a| a.pred == d.pred && a.args == d.args));
        if !add.is_empty() {
            actions.push(GenAction { params, pre, add, del });
        }
    }
    let all = ground_atoms_of(&preds, &objects);
    let init = all.iter().filter(|_| rng.random::<f64>() < 0.3).cloned().collect();
    let goal = (0..rng.random_range(1..=2)).map(|_| all[rng.random_range(0..all.len())].clone()).collect();
    GenDomain { preds, actions, objects, init, goal }
}

fn pname(p: usize) -> String {
    format!("p{p}")
}

fn oname(o: usize) -> String {
    format!("o{o}")
}

pub fn ground_text(p: usize, args: &[usize]) -> String {
    let a: Vec<String> = args.iter().map(|&o| oname(o)).collect();
    format!("{}({})", pname(p), a.join(", "))
}

impl GenDomain {
    pub fn domain_pddl(&self) -> String {
        let n_types = self.objects.iter().max().unwrap() + 1;
        let types: Vec<String> = (0..n_types).map(|t| format!("t{t}")).collect();
        let mut s = format!("(define (domain gen)\n  (:requirements :strips :typing)\n  (:types {} - object)\n  (:predicates", types.join(" "));
        for (p, ts) in self.preds.iter().enumerate() {
            let args: Vec<String> = ts.iter().enumerate().map(|(i, t)| format!("?x{i} - t{t}")).collect();
            s += &format!(" ({} {})", pname(p), args.join(" "));
        }
        s += ")\n";
        let lifted = |a: &GenAtom| {
            let args: Vec<String> = a.args.iter().map(|i| format!("?v{i}")).collect();
            format!("({} {})", pname(a.pred), args.join(" "))
        };
        for (k, a) in self.actions.iter().enumerate() {
            let params: Vec<String> = a.params.iter().enumerate().map(|(i, t)| format!("?v{i} - t{t}")).collect();
            let pre: Vec<String> = a.pre.iter().map(lifted).collect();
            let mut eff: Vec<String> = a.add.iter().map(lifted).collect();
            eff.extend(a.del.iter().map(|d| format!("(not {})", lifted(d))));
            s += &format!(
                "  (:action a{k} :parameters ({}) :precondition (and {}) :effect (and {}))\n",
                params.join(" "),
                pre.join(" "),
                eff.join(" ")
            );
        }
        s + ")\n"
    }

    pub fn problem_pddl(&self) -> String {
        let objs: Vec<String> = self.objects.iter().enumerate().map(|(o, t)| format!("{} - t{t}", oname(o))).collect();
        let atom = |(p, args): &(usize, Vec<usize>)| {
            let a: Vec<String> = args.iter().map(|&o| oname(o)).collect();
            format!("({} {})", pname(*p), a.join(" "))
        };
        let init: Vec<String> = self.init.iter().map(atom).collect();
        let goal: Vec<String> = self.goal.iter().map(atom).collect();
        format!(
            "(define (problem gp) (:domain gen) (:objects {}) (:init {}) (:goal (and {})))",
            objs.join(" "),
            init.join(" "),
            goal.join(" ")
        )
    }

    /// Ground actions as (pre, add, del) sets of atom strings.
    fn oracle_actions(&self) -> Vec<(BTreeSet<String>, BTreeSet<String>, BTreeSet<String>)> {
        let mut out = Vec::new();
        for a in &self.actions {
            let mut bindings: Vec<Vec<usize>> = vec![Vec::new()];
            for &t in &a.params {
                let objs: Vec<usize> = (0..self.objects.len()).filter(|&o| self.objects[o] == t).collect();
                bindings = bindings.iter().flat_map(|b| objs.iter().map(move |&o| [b.clone(), vec![o]].concat())).collect();
            }
            for b in bindings {
                let g = |x: &GenAtom| ground_text(x.pred, &x.args.iter().map(|&i| b[i]).collect::<Vec<_>>());
                out.push((a.pre.iter().map(g).collect(), a.add.iter().map(g).collect(), a.del.iter().map(g).collect()));
            }
        }
        out
    }

    /// Shortest plan length by breadth-first search, and the number of
    /// reachable states explored. `None` when the goal is unreachable.
    pub fn bfs_oracle(&self) -> (Option<usize>, usize) {
        let actions = self.oracle_actions();
        let init: BTreeSet<String> = self.init.iter().map(|(p, a)| ground_text(*p, a)).collect();
        let goal: BTreeSet<String> = self.goal.iter().map(|(p, a)| ground_text(*p, a)).collect();
        let mut seen: HashMap<BTreeSet<String>, usize> = HashMap::new();
        let mut queue = VecDeque::new();
        seen.insert(init.clone(), 0);
        queue.push_back(init);
        while let Some(s) = queue.pop_front() {
            let d = seen[&s];
            if goal.is_subset(&s) {
                return (Some(d), seen.len());
            }
            for (pre, add, del) in &actions {
                if !pre.is_subset(&s) {
                    continue;
                }
                let next: BTreeSet<String> = s.difference(del).cloned().chain(add.iter().cloned()).collect();
                if !seen.contains_key(&next) {
                    seen.insert(next.clone(), d + 1);
                    queue.push_back(next);
                }
            }
        }
        (None, seen.len())
    }
}
