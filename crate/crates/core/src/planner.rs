//! Forward state-space search over grounded STRIPS actions and best-match
//! retrieval of a library entry for a predicted goal state.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, HashSet, VecDeque};
use std::fmt;

use thiserror::Error;

use crate::pddl::{ActionClass, ActionSchema, Condition, LiftedAtom, PlanDomain, PlanEntry, PlanLibrary, PlanProblem};
use crate::symbolic::{Atom, Name, State, TermKind};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlannerError {
    #[error("no plan: search space exhausted after {expansions} expansions")]
    NoPlan { expansions: usize },
    #[error("node budget exceeded after {0} expansions")]
    BudgetExceeded(usize),
    #[error("action {0} is not applicable")]
    NotApplicable(String),
    #[error("plan library is empty")]
    EmptyLibrary,
    #[error("no library entry overlaps the goal")]
    NoMatch,
}

pub type Result<T> = std::result::Result<T, PlannerError>;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GroundAction {
    pub schema: Name,
    pub args: Vec<Name>,
    pub class: ActionClass,
    pub pre: State,
    pub add: State,
    pub delete: State,
}

impl GroundAction {
    pub fn key(&self) -> (&str, &[Name]) {
        (&self.schema, &self.args)
    }
}

impl fmt::Display for GroundAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.schema)?;
        for (i, a) in self.args.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            f.write_str(a)?;
        }
        f.write_str(")")
    }
}

pub fn applicable(s: &State, a: &GroundAction) -> bool {
    a.pre.is_subset(s)
}

pub fn apply(s: &State, a: &GroundAction) -> Result<State> {
    if !applicable(s, a) {
        return Err(PlannerError::NotApplicable(a.to_string()));
    }
    let mut out = s.difference(&a.delete);
    for atom in &a.add {
        out.insert(atom.clone());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolvedPlan {
    pub entry: String,
    pub steps: Vec<GroundAction>,
    /// `states[i]` holds before step `i`; the last element is the final state.
    pub states: Vec<State>,
}

impl SolvedPlan {
    pub fn final_state(&self) -> &State {
        self.states.last().expect("at least the initial state")
    }

    pub fn world_actions(&self) -> usize {
        self.steps.iter().filter(|s| s.class == ActionClass::World).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Greedy best-first on the number of unsatisfied goal atoms.
    GreedyGoalCount,
    /// Breadth-first; optimal in step count.
    UniformCost,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanOptions {
    pub budget: usize,
    pub strategy: Strategy,
}

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions { budget: 200_000, strategy: Strategy::GreedyGoalCount }
    }
}

fn substitute(atom: &LiftedAtom, binding: &HashMap<&str, &Name>) -> Atom {
    let args: Vec<&str> = atom.args.iter().map(|v| binding[&**v].as_ref()).collect();
    Atom::new(&*atom.predicate, &args)
}

fn ground_schema(domain: &PlanDomain, problem: &PlanProblem, schema: &ActionSchema, out: &mut Vec<GroundAction>) {
    let candidates: Vec<Vec<&Name>> = schema
        .params
        .iter()
        .map(|p| {
            problem
                .objects
                .iter()
                .filter(|(_, t)| domain.is_subtype(t, &p.sort))
                .map(|(o, _)| o)
                .collect()
        })
        .collect();
    if candidates.iter().any(Vec::is_empty) && !schema.params.is_empty() {
        return;
    }
    let mut idx = vec![0usize; candidates.len()];
    loop {
        let binding: HashMap<&str, &Name> =
            schema.params.iter().zip(&idx).enumerate().map(|(k, (p, &i))| (&*p.name, candidates[k][i])).collect();
        let eq_ok = schema.precondition.iter().all(|c| match c {
            Condition::Eq(a, b) => binding[&**a] == binding[&**b],
            Condition::NotEq(a, b) => binding[&**a] != binding[&**b],
            Condition::Atom(_) => true,
        });
        if eq_ok {
            let pre = schema
                .precondition
                .iter()
                .filter_map(|c| match c {
                    Condition::Atom(l) => Some(substitute(l, &binding)),
                    _ => None,
                })
                .collect();
            let add: State = schema.add.iter().map(|l| substitute(l, &binding)).collect();
            let delete: State = schema.delete.iter().map(|l| substitute(l, &binding)).collect();
            // Grounding can collapse distinct lifted atoms into the same
            // ground atom; keep the add in that case.
            let delete = delete.difference(&add);
            out.push(GroundAction {
                schema: schema.name.clone(),
                args: schema.params.iter().map(|p| binding[&*p.name].clone()).collect(),
                class: schema.class,
                pre,
                add,
                delete,
            });
        }
        // odometer increment
        let mut k = idx.len();
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < candidates[k].len() {
                break;
            }
            idx[k] = 0;
        }
    }
}

/// All type-valid ground actions of `domain` over the objects of `problem`,
/// sorted by action name then arguments.
pub fn ground_actions(domain: &PlanDomain, problem: &PlanProblem) -> Vec<GroundAction> {
    let mut out = Vec::new();
    for schema in &domain.actions {
        ground_schema(domain, problem, schema, &mut out);
    }
    out.sort_by(|a, b| a.key().cmp(&b.key()));
    out
}

type Bits = Vec<u64>;

struct Compiled {
    atoms: Vec<Atom>,
    actions: Vec<(Vec<usize>, Vec<usize>, Vec<usize>)>,
    words: usize,
}

impl Compiled {
    fn new(init: &State, goal: &State, actions: &[GroundAction]) -> (Compiled, Bits, Vec<usize>) {
        let mut index: HashMap<Atom, usize> = HashMap::new();
        let mut atoms = Vec::new();
        let mut intern = |a: &Atom, atoms: &mut Vec<Atom>| -> usize {
            *index.entry(a.clone()).or_insert_with(|| {
                atoms.push(a.clone());
                atoms.len() - 1
            })
        };
        let init_ids: Vec<usize> = init.iter().map(|a| intern(a, &mut atoms)).collect();
        let goal_ids: Vec<usize> = goal.iter().map(|a| intern(a, &mut atoms)).collect();
        let mut compiled_actions = Vec::with_capacity(actions.len());
        for a in actions {
            let pre = a.pre.iter().map(|x| intern(x, &mut atoms)).collect();
            let add = a.add.iter().map(|x| intern(x, &mut atoms)).collect();
            let del = a.delete.iter().map(|x| intern(x, &mut atoms)).collect();
            compiled_actions.push((pre, add, del));
        }
        let words = atoms.len().div_ceil(64).max(1);
        let mut bits = vec![0u64; words];
        for i in init_ids {
            bits[i / 64] |= 1 << (i % 64);
        }
        (Compiled { atoms, actions: compiled_actions, words }, bits, goal_ids)
    }

    fn has(bits: &Bits, i: usize) -> bool {
        bits[i / 64] >> (i % 64) & 1 == 1
    }

    fn successor(&self, bits: &Bits, a: usize) -> Option<Bits> {
        let (pre, add, del) = &self.actions[a];
        if !pre.iter().all(|&p| Self::has(bits, p)) {
            return None;
        }
        let mut next = bits.clone();
        for &d in del {
            next[d / 64] &= !(1 << (d % 64));
        }
        for &x in add {
            next[x / 64] |= 1 << (x % 64);
        }
        Some(next)
    }

    fn unsatisfied(bits: &Bits, goal: &[usize]) -> usize {
        goal.iter().filter(|&&g| !Self::has(bits, g)).count()
    }

    fn to_state(&self, bits: &Bits) -> State {
        debug_assert_eq!(bits.len(), self.words);
        (0..self.atoms.len()).filter(|&i| Self::has(bits, i)).map(|i| self.atoms[i].clone()).collect()
    }
}

/// Plans from `init` to `goal` using the domain's actions grounded over the
/// problem's objects.
pub fn plan_from(
    domain: &PlanDomain,
    problem: &PlanProblem,
    init: &State,
    goal: &State,
    opts: &PlanOptions,
) -> Result<(Vec<GroundAction>, Vec<State>)> {
    let actions = ground_actions(domain, problem);
    let (comp, start, goal_ids) = Compiled::new(init, goal, &actions);

    // node: (bits, parent, action)
    let mut nodes: Vec<(Bits, usize, usize)> = vec![(start.clone(), usize::MAX, usize::MAX)];
    let mut seen: HashSet<Bits> = HashSet::new();
    seen.insert(start.clone());
    let mut expansions = 0usize;

    let found = match opts.strategy {
        Strategy::UniformCost => {
            let mut queue = VecDeque::from([0usize]);
            let mut found = None;
            while let Some(n) = queue.pop_front() {
                if Compiled::unsatisfied(&nodes[n].0, &goal_ids) == 0 {
                    found = Some(n);
                    break;
                }
                if expansions >= opts.budget {
                    return Err(PlannerError::BudgetExceeded(expansions));
                }
                expansions += 1;
                for a in 0..comp.actions.len() {
                    if let Some(next) = comp.successor(&nodes[n].0, a) {
                        if seen.insert(next.clone()) {
                            nodes.push((next, n, a));
                            queue.push_back(nodes.len() - 1);
                        }
                    }
                }
            }
            found
        }
        Strategy::GreedyGoalCount => {
            // Min-heap on (h, insertion counter); the counter gives FIFO
            // among equal h, and successors are generated in sorted action
            // order, so ties resolve by action name then arguments.
            let mut heap = BinaryHeap::new();
            heap.push(Reverse((Compiled::unsatisfied(&start, &goal_ids), 0usize)));
            let mut found = None;
            while let Some(Reverse((h, n))) = heap.pop() {
                if h == 0 {
                    found = Some(n);
                    break;
                }
                if expansions >= opts.budget {
                    return Err(PlannerError::BudgetExceeded(expansions));
                }
                expansions += 1;
                for a in 0..comp.actions.len() {
                    if let Some(next) = comp.successor(&nodes[n].0, a) {
                        if seen.insert(next.clone()) {
                            let h = Compiled::unsatisfied(&next, &goal_ids);
                            nodes.push((next, n, a));
                            heap.push(Reverse((h, nodes.len() - 1)));
                        }
                    }
                }
            }
            found
        }
    };
    let Some(mut n) = found else {
        return Err(PlannerError::NoPlan { expansions });
    };
    let mut steps = Vec::new();
    let mut states = vec![comp.to_state(&nodes[n].0)];
    while nodes[n].1 != usize::MAX {
        steps.push(actions[nodes[n].2].clone());
        n = nodes[n].1;
        states.push(comp.to_state(&nodes[n].0));
    }
    steps.reverse();
    states.reverse();
    Ok((steps, states))
}

pub fn plan(entry: &PlanEntry, opts: &PlanOptions) -> Result<SolvedPlan> {
    let (steps, states) = plan_from(&entry.domain, &entry.problem, &entry.problem.init, &entry.goal_state, opts)?;
    Ok(SolvedPlan { entry: entry.name.clone(), steps, states })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchScore {
    pub entry_index: usize,
    pub entry: String,
    pub overlap: usize,
    /// Entry object → term of the predicted goal. Unlisted objects keep their name.
    pub substitution: BTreeMap<Name, Name>,
}

/// World-kind objects mentioned in the entry goal, with their declared type.
fn substitutable_objects(lib: &PlanLibrary, entry: &PlanEntry) -> Vec<(Name, Name)> {
    let goal_terms = entry.goal_state.terms();
    goal_terms
        .into_iter()
        .filter(|o| lib.vocab.term(o).map(|t| t.kind) != Some(TermKind::Robot))
        .map(|o| {
            let t = entry.problem.object_type(&o).cloned().unwrap_or_else(|| "object".into());
            (o, t)
        })
        .collect()
}

/// Best overlap for one entry by exhaustive enumeration of injective,
/// sort-compatible renamings of its world objects into the terms of `g`.
fn best_for_entry(lib: &PlanLibrary, entry: &PlanEntry, g: &State) -> (usize, BTreeMap<Name, Name>) {
    let objects = substitutable_objects(lib, entry);
    let g_terms: Vec<Name> = g.terms().into_iter().collect();
    let compatible: Vec<Vec<Option<&Name>>> = objects
        .iter()
        .map(|(_, ty)| {
            let mut c: Vec<Option<&Name>> = g_terms
                .iter()
                .filter(|t| {
                    let Some(term) = lib.vocab.term(t) else { return false };
                    if term.kind == TermKind::Robot {
                        return false;
                    }
                    match lib.vocab.sort_id(ty) {
                        Some(want) => lib.vocab.is_subsort(term.sort, want),
                        None => &**ty == "object",
                    }
                })
                .map(Some)
                .collect();
            c.push(None);
            c
        })
        .collect();

    let mut best = (0usize, BTreeMap::new());
    let mut first = true;
    let mut choice: Vec<Option<&Name>> = vec![None; objects.len()];

    #[allow(clippy::too_many_arguments)]
    fn rec<'a>(
        k: usize,
        objects: &[(Name, Name)],
        compatible: &'a [Vec<Option<&'a Name>>],
        choice: &mut Vec<Option<&'a Name>>,
        entry_goal: &State,
        g: &State,
        best: &mut (usize, BTreeMap<Name, Name>),
        first: &mut bool,
    ) {
        if k == objects.len() {
            // The full renaming, identity included, must stay injective.
            let mut targets = BTreeSet::new();
            let mut map = BTreeMap::new();
            for (i, (o, _)) in objects.iter().enumerate() {
                let t = choice[i].unwrap_or(o);
                if !targets.insert(t.clone()) {
                    return;
                }
                if choice[i].is_some() {
                    map.insert(o.clone(), t.clone());
                }
            }
            let robot_fixed: BTreeSet<Name> =
                entry_goal.terms().into_iter().filter(|t| !objects.iter().any(|(o, _)| o == t)).collect();
            if robot_fixed.iter().any(|t| targets.contains(t)) {
                return;
            }
            let overlap = entry_goal.rename(&map).intersection_len(g);
            if *first || overlap > best.0 {
                *best = (overlap, map);
                *first = false;
            }
            return;
        }
        for c in &compatible[k] {
            choice[k] = *c;
            rec(k + 1, objects, compatible, choice, entry_goal, g, best, first);
        }
    }
    rec(0, &objects, &compatible, &mut choice, &entry.goal_state, g, &mut best, &mut first);
    best
}

pub fn match_plan(lib: &PlanLibrary, g: &State) -> Result<MatchScore> {
    if lib.entries.is_empty() {
        return Err(PlannerError::EmptyLibrary);
    }
    let g = g.timeless();
    let mut best: Option<MatchScore> = None;
    for (i, entry) in lib.entries.iter().enumerate() {
        let (overlap, substitution) = best_for_entry(lib, entry, &g);
        if best.as_ref().is_none_or(|b| overlap > b.overlap) {
            best = Some(MatchScore { entry_index: i, entry: entry.name.clone(), overlap, substitution });
        }
    }
    let best = best.expect("library nonempty");
    if best.overlap == 0 {
        return Err(PlannerError::NoMatch);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pddl::{parse_domain, parse_problem};
    use std::sync::Arc;

    const DOMAIN: &str = r#"
(define (domain toy)
  (:requirements :typing)
  (:types hand item place - object)
  (:predicates (On ?o - item ?p - place) (Holding ?h - hand ?o - item) (Free ?h - hand) (Near ?h - hand ?p - place))
  (:action approach :parameters (?h - hand ?p - place) :class ecological
    :precondition (and) :effect (Near ?h ?p))
  (:action grasp :parameters (?h - hand ?o - item ?p - place)
    :precondition (and (On ?o ?p) (Free ?h) (Near ?h ?p))
    :effect (and (Holding ?h ?o) (not (On ?o ?p)) (not (Free ?h))))
  (:action release :parameters (?h - hand ?o - item ?p - place)
    :precondition (and (Holding ?h ?o) (Near ?h ?p))
    :effect (and (On ?o ?p) (Free ?h) (not (Holding ?h ?o)))))
"#;

    fn entry(goal: &str, init: &str) -> PlanEntry {
        let d = Arc::new(parse_domain(DOMAIN).unwrap());
        let p = format!(
            "(define (problem p) (:domain toy) (:objects hand - hand b - item table shelf - place) (:init {init}) (:goal (and {goal})))"
        );
        let p = parse_problem(&p, &d).unwrap();
        PlanEntry::new("p", d, p)
    }

    #[test]
    fn goal_in_init_is_empty_plan() {
        let e = entry("(On b table)", "(On b table) (Free hand)");
        let sol = plan(&e, &PlanOptions::default()).unwrap();
        assert!(sol.steps.is_empty());
    }

    #[test]
    fn two_step_grasp() {
        let e = entry("(Holding hand b)", "(On b table) (Free hand)");
        for strategy in [Strategy::GreedyGoalCount, Strategy::UniformCost] {
            let sol = plan(&e, &PlanOptions { strategy, ..Default::default() }).unwrap();
            let names: Vec<String> = sol.steps.iter().map(|s| s.to_string()).collect();
            assert_eq!(names, ["approach(hand, table)", "grasp(hand, b, table)"]);
            assert!(e.goal_state.is_subset(sol.final_state()));
        }
    }

    #[test]
    fn unreachable_goal_is_no_plan() {
        let e = entry("(Holding hand b)", "(Free hand)");
        assert!(matches!(plan(&e, &PlanOptions::default()), Err(PlannerError::NoPlan { .. })));
    }

    #[test]
    fn budget_is_enforced() {
        let e = entry("(On b shelf)", "(On b table) (Free hand)");
        let opts = PlanOptions { budget: 1, strategy: Strategy::UniformCost };
        assert_eq!(plan(&e, &opts), Err(PlannerError::BudgetExceeded(1)));
    }

    #[test]
    fn apply_and_applicable() {
        let e = entry("(Holding hand b)", "(On b table) (Free hand)");
        let acts = ground_actions(&e.domain, &e.problem);
        let grasp = acts.iter().find(|a| a.to_string() == "grasp(hand, b, table)").unwrap();
        let s = State::parse("On(b, table) ∧ Free(hand)").unwrap();
        assert!(!applicable(&s, grasp));
        assert!(matches!(apply(&s, grasp), Err(PlannerError::NotApplicable(_))));
        let mut s2 = s.clone();
        s2.insert(Atom::new("Near", &["hand", "table"]));
        let after = apply(&s2, grasp).unwrap();
        assert_eq!(after, State::parse("Holding(hand, b) ∧ Near(hand, table)").unwrap());
        let release = acts.iter().find(|a| a.to_string() == "release(hand, b, table)").unwrap();
        assert_eq!(apply(&after, release).unwrap(), s2);
    }
}
