//! PDDL subset parser (typed STRIPS with equality) and the plan library.
//!
//! Accepted: `:requirements` limited to `:strips`, `:typing`, `:equality`;
//! `:types`, `:predicates` and `:action` blocks whose preconditions are
//! conjunctions of atoms and (possibly negated) equalities and whose effects
//! are conjunctions of atoms and negated atoms. Every action carries a
//! non-standard `:class world|ecological` annotation (default `world`).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;
use thiserror::Error;

use crate::planner::{self, PlanOptions};
use crate::symbolic::{Atom, Name, State, TermKind, Vocabulary};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PddlError {
    #[error("{line}:{column}: expected {expected}")]
    ParseError { line: usize, column: usize, expected: String },
    #[error("unsupported PDDL feature `{0}`")]
    UnsupportedFeature(String),
    #[error("type error in {atom}: {reason}")]
    TypeError { atom: String, reason: String },
    #[error("library error: {0}")]
    Library(String),
}

pub type Result<T> = std::result::Result<T, PddlError>;

// ---------------------------------------------------------------------------
// S-expressions

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pos {
    pub line: usize,
    pub column: usize,
}

#[derive(Debug, Clone)]
enum Sexp {
    Sym(String, Pos),
    List(Vec<Sexp>, Pos),
}

impl Sexp {
    fn pos(&self) -> Pos {
        match self {
            Sexp::Sym(_, p) | Sexp::List(_, p) => *p,
        }
    }

    fn sym(&self) -> Option<&str> {
        match self {
            Sexp::Sym(s, _) => Some(s),
            Sexp::List(..) => None,
        }
    }

    fn list(&self) -> Option<&[Sexp]> {
        match self {
            Sexp::List(items, _) => Some(items),
            Sexp::Sym(..) => None,
        }
    }
}

fn expected(pos: Pos, what: impl Into<String>) -> PddlError {
    PddlError::ParseError { line: pos.line, column: pos.column, expected: what.into() }
}

fn read_sexp(text: &str) -> Result<Sexp> {
    let mut stack: Vec<(Vec<Sexp>, Pos)> = Vec::new();
    let mut root: Option<Sexp> = None;
    let mut line = 1;
    let mut col = 1;
    let mut chars = text.chars().peekable();
    let mut last = Pos { line: 1, column: 1 };
    while let Some(&c) = chars.peek() {
        let pos = Pos { line, column: col };
        last = pos;
        match c {
            ';' => {
                while let Some(&c) = chars.peek() {
                    if c == '\n' {
                        break;
                    }
                    chars.next();
                    col += 1;
                }
            }
            '\n' => {
                chars.next();
                line += 1;
                col = 1;
            }
            c if c.is_whitespace() => {
                chars.next();
                col += 1;
            }
            '(' => {
                if root.is_some() {
                    return Err(expected(pos, "end of input"));
                }
                chars.next();
                col += 1;
                stack.push((Vec::new(), pos));
            }
            ')' => {
                chars.next();
                col += 1;
                let (items, start) = stack.pop().ok_or_else(|| expected(pos, "`(` before `)`"))?;
                let node = Sexp::List(items, start);
                match stack.last_mut() {
                    Some((parent, _)) => parent.push(node),
                    None => root = Some(node),
                }
            }
            _ => {
                let mut s = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_whitespace() || c == '(' || c == ')' || c == ';' {
                        break;
                    }
                    s.push(c);
                    chars.next();
                    col += 1;
                }
                match stack.last_mut() {
                    Some((parent, _)) => parent.push(Sexp::Sym(s, pos)),
                    None => return Err(expected(pos, "`(`")),
                }
            }
        }
    }
    if !stack.is_empty() {
        return Err(expected(Pos { line, column: col }, "`)`"));
    }
    root.ok_or_else(|| expected(last, "`(define ...)`"))
}

// ---------------------------------------------------------------------------
// Domain model

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ActionClass {
    World,
    Ecological,
}

impl fmt::Display for ActionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ActionClass::World => "world",
            ActionClass::Ecological => "ecological",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypedVar {
    /// Includes the leading `?` for variables.
    pub name: Name,
    pub sort: Name,
}

/// Atom over action parameters (`?x`).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LiftedAtom {
    pub predicate: Name,
    pub args: Vec<Name>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Condition {
    Atom(LiftedAtom),
    Eq(Name, Name),
    NotEq(Name, Name),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionSchema {
    pub name: Name,
    pub params: Vec<TypedVar>,
    pub class: ActionClass,
    pub precondition: Vec<Condition>,
    pub add: Vec<LiftedAtom>,
    pub delete: Vec<LiftedAtom>,
}

impl ActionSchema {
    pub fn param_sort(&self, var: &str) -> Option<&Name> {
        self.params.iter().find(|p| &*p.name == var).map(|p| &p.sort)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredicateDecl {
    pub name: Name,
    pub params: Vec<TypedVar>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanDomain {
    pub name: Name,
    pub requirements: Vec<String>,
    /// Declaration order; parent `None` means the implicit root `object`.
    pub types: Vec<(Name, Option<Name>)>,
    pub predicates: Vec<PredicateDecl>,
    pub actions: Vec<ActionSchema>,
}

impl PlanDomain {
    pub fn type_parent(&self, t: &str) -> Option<&Name> {
        self.types.iter().find(|(n, _)| &**n == t).and_then(|(_, p)| p.as_ref())
    }

    pub fn has_type(&self, t: &str) -> bool {
        t == "object" || self.types.iter().any(|(n, _)| &**n == t)
    }

    /// `sub` equals `sup` or descends from it. Everything descends from `object`.
    pub fn is_subtype(&self, sub: &str, sup: &str) -> bool {
        if sup == "object" {
            return true;
        }
        let mut cur: Option<&str> = Some(sub);
        let mut guard = 0;
        while let Some(t) = cur {
            if t == sup {
                return true;
            }
            guard += 1;
            if guard > self.types.len() + 1 {
                return false;
            }
            cur = self.type_parent(t).map(|p| &**p);
        }
        false
    }

    pub fn predicate(&self, name: &str) -> Option<&PredicateDecl> {
        self.predicates.iter().find(|p| &*p.name == name)
    }

    pub fn action(&self, name: &str) -> Option<&ActionSchema> {
        self.actions.iter().find(|a| &*a.name == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanProblem {
    pub name: Name,
    pub domain: Name,
    /// Object name → declared type, in declaration order.
    pub objects: Vec<(Name, Name)>,
    pub init: State,
    pub goal: State,
}

impl PlanProblem {
    pub fn object_type(&self, o: &str) -> Option<&Name> {
        self.objects.iter().find(|(n, _)| &**n == o).map(|(_, t)| t)
    }

    /// Applies an object renaming to objects, init and goal.
    pub fn renamed(&self, map: &BTreeMap<Name, Name>) -> PlanProblem {
        let rn = |n: &Name| map.get(n).cloned().unwrap_or_else(|| n.clone());
        PlanProblem {
            name: self.name.clone(),
            domain: self.domain.clone(),
            objects: self.objects.iter().map(|(o, t)| (rn(o), t.clone())).collect(),
            init: self.init.rename(map),
            goal: self.goal.rename(map),
        }
    }
}

// ---------------------------------------------------------------------------
// Parsing

const SUPPORTED_REQUIREMENTS: [&str; 3] = [":strips", ":typing", ":equality"];

fn expect_sym<'a>(s: &'a Sexp, what: &str) -> Result<&'a str> {
    s.sym().ok_or_else(|| expected(s.pos(), what))
}

fn expect_list<'a>(s: &'a Sexp, what: &str) -> Result<&'a [Sexp]> {
    s.list().ok_or_else(|| expected(s.pos(), what))
}

fn header<'a>(root: &'a Sexp, kind: &str) -> Result<(&'a str, &'a [Sexp])> {
    let items = expect_list(root, "`(define ...)`")?;
    let first = items.first().ok_or_else(|| expected(root.pos(), "`define`"))?;
    if !expect_sym(first, "`define`")?.eq_ignore_ascii_case("define") {
        return Err(expected(first.pos(), "`define`"));
    }
    let head = items.get(1).ok_or_else(|| expected(root.pos(), format!("`({kind} NAME)`")))?;
    let head_items = expect_list(head, &format!("`({kind} NAME)`"))?;
    match head_items {
        [k, n] if k.sym().is_some_and(|k| k.eq_ignore_ascii_case(kind)) => {
            Ok((expect_sym(n, "a name")?, &items[2..]))
        }
        _ => Err(expected(head.pos(), format!("`({kind} NAME)`"))),
    }
}

/// Parses `a b - t c - u d` into typed names; untyped names get `object`.
fn typed_list(items: &[Sexp], allow_untyped: bool) -> Result<Vec<(String, String, Pos)>> {
    let mut out = Vec::new();
    let mut pending: Vec<(String, Pos)> = Vec::new();
    let mut i = 0;
    while i < items.len() {
        let s = expect_sym(&items[i], "a name")?;
        if s == "-" {
            let t = items.get(i + 1).ok_or_else(|| expected(items[i].pos(), "a type after `-`"))?;
            let t = expect_sym(t, "a type name")?;
            if pending.is_empty() {
                return Err(expected(items[i].pos(), "a name before `-`"));
            }
            for (n, p) in pending.drain(..) {
                out.push((n, t.to_string(), p));
            }
            i += 2;
        } else {
            pending.push((s.to_string(), items[i].pos()));
            i += 1;
        }
    }
    if !pending.is_empty() {
        if !allow_untyped {
            return Err(expected(pending[0].1, "`- TYPE` for every name"));
        }
        for (n, p) in pending {
            out.push((n, "object".to_string(), p));
        }
    }
    Ok(out)
}

fn unsupported_section(key: &str) -> Option<&'static str> {
    match key {
        ":constants" => Some(":constants"),
        ":functions" => Some(":numeric-fluents"),
        ":durative-action" => Some(":durative-actions"),
        ":derived" => Some(":derived-predicates"),
        ":constraints" => Some(":constraints"),
        ":metric" => Some(":numeric-fluents"),
        ":timed-initial-literals" => Some(":timed-initial-literals"),
        _ => None,
    }
}

pub fn parse_domain(text: &str) -> Result<PlanDomain> {
    let root = read_sexp(text)?;
    let (name, sections) = header(&root, "domain")?;
    let mut dom = PlanDomain {
        name: Arc::from(name),
        requirements: Vec::new(),
        types: Vec::new(),
        predicates: Vec::new(),
        actions: Vec::new(),
    };
    for sec in sections {
        let items = expect_list(sec, "a domain section")?;
        let key_sexp = items.first().ok_or_else(|| expected(sec.pos(), "a section keyword"))?;
        let key = expect_sym(key_sexp, "a section keyword")?.to_ascii_lowercase();
        if let Some(feat) = unsupported_section(&key) {
            return Err(PddlError::UnsupportedFeature(feat.to_string()));
        }
        match key.as_str() {
            ":requirements" => {
                for r in &items[1..] {
                    let r = expect_sym(r, "a requirement flag")?.to_ascii_lowercase();
                    if !SUPPORTED_REQUIREMENTS.contains(&r.as_str()) {
                        return Err(PddlError::UnsupportedFeature(r));
                    }
                    dom.requirements.push(r);
                }
            }
            ":types" => {
                for (n, t, p) in typed_list(&items[1..], true)? {
                    if dom.types.iter().any(|(x, _)| **x == *n) {
                        return Err(expected(p, format!("a fresh type name (duplicate `{n}`)")));
                    }
                    let parent = if t == "object" { None } else { Some(Arc::from(t.as_str())) };
                    dom.types.push((Arc::from(n.as_str()), parent));
                }
                for (n, p) in &dom.types {
                    if let Some(p) = p {
                        if !dom.has_type(p) {
                            return Err(PddlError::TypeError {
                                atom: format!("type {n}"),
                                reason: format!("undeclared parent type `{p}`"),
                            });
                        }
                    }
                }
                for (n, _) in &dom.types {
                    let mut seen = BTreeSet::new();
                    let mut cur = Some(n.clone());
                    while let Some(t) = cur {
                        if !seen.insert(t.clone()) {
                            return Err(PddlError::TypeError {
                                atom: format!("type {n}"),
                                reason: "cyclic type hierarchy".into(),
                            });
                        }
                        cur = dom.type_parent(&t).cloned();
                    }
                }
            }
            ":predicates" => {
                for p in &items[1..] {
                    let parts = expect_list(p, "`(PREDICATE ?x - type ...)`")?;
                    let pname = expect_sym(parts.first().ok_or_else(|| expected(p.pos(), "a predicate name"))?, "a predicate name")?;
                    let params = typed_list(&parts[1..], false)?;
                    let mut decl = PredicateDecl { name: Arc::from(pname), params: Vec::new() };
                    for (v, t, pos) in params {
                        if !v.starts_with('?') {
                            return Err(expected(pos, "a `?variable`"));
                        }
                        if !dom.has_type(&t) {
                            return Err(PddlError::TypeError { atom: pname.to_string(), reason: format!("undeclared type `{t}`") });
                        }
                        decl.params.push(TypedVar { name: Arc::from(v.as_str()), sort: Arc::from(t.as_str()) });
                    }
                    if dom.predicate(pname).is_some() {
                        return Err(expected(p.pos(), format!("a fresh predicate (duplicate `{pname}`)")));
                    }
                    dom.predicates.push(decl);
                }
            }
            ":action" => {
                let action = parse_action(&dom, items, sec.pos())?;
                if dom.action(&action.name).is_some() {
                    return Err(expected(sec.pos(), format!("a fresh action name (duplicate `{}`)", action.name)));
                }
                dom.actions.push(action);
            }
            _ => return Err(expected(key_sexp.pos(), "`:requirements`, `:types`, `:predicates` or `:action`")),
        }
    }
    Ok(dom)
}

fn parse_action(dom: &PlanDomain, items: &[Sexp], pos: Pos) -> Result<ActionSchema> {
    let name = expect_sym(items.get(1).ok_or_else(|| expected(pos, "an action name"))?, "an action name")?;
    let mut schema = ActionSchema {
        name: Arc::from(name),
        params: Vec::new(),
        class: ActionClass::World,
        precondition: Vec::new(),
        add: Vec::new(),
        delete: Vec::new(),
    };
    let mut i = 2;
    let mut pre: Option<&Sexp> = None;
    let mut eff: Option<&Sexp> = None;
    while i < items.len() {
        let key_s = &items[i];
        let key = expect_sym(key_s, "an action keyword")?.to_ascii_lowercase();
        let val = items.get(i + 1).ok_or_else(|| expected(key_s.pos(), format!("a value after `{key}`")))?;
        match key.as_str() {
            ":parameters" => {
                for (v, t, p) in typed_list(expect_list(val, "a parameter list")?, false)? {
                    if !v.starts_with('?') {
                        return Err(expected(p, "a `?variable`"));
                    }
                    if !dom.has_type(&t) {
                        return Err(PddlError::TypeError { atom: format!("{name} {v}"), reason: format!("undeclared type `{t}`") });
                    }
                    if schema.params.iter().any(|x| *x.name == *v) {
                        return Err(expected(p, format!("a fresh parameter (duplicate `{v}`)")));
                    }
                    schema.params.push(TypedVar { name: Arc::from(v.as_str()), sort: Arc::from(t.as_str()) });
                }
            }
            ":class" => {
                schema.class = match expect_sym(val, "`world` or `ecological`")?.to_ascii_lowercase().as_str() {
                    "world" => ActionClass::World,
                    "ecological" => ActionClass::Ecological,
                    _ => return Err(expected(val.pos(), "`world` or `ecological`")),
                };
            }
            ":precondition" => pre = Some(val),
            ":effect" => eff = Some(val),
            ":duration" | ":condition" => return Err(PddlError::UnsupportedFeature(":durative-actions".into())),
            _ => return Err(expected(key_s.pos(), "`:parameters`, `:class`, `:precondition` or `:effect`")),
        }
        i += 2;
    }
    if let Some(p) = pre {
        parse_precondition(dom, &schema, p, &mut Vec::new()).map(|c| schema.precondition = c)?;
    }
    if let Some(e) = eff {
        let (add, del) = parse_effect(dom, &schema, e)?;
        schema.add = add;
        schema.delete = del;
    }
    let add: BTreeSet<_> = schema.add.iter().collect();
    if let Some(both) = schema.delete.iter().find(|d| add.contains(d)) {
        return Err(PddlError::TypeError {
            atom: format!("{} in {}", lifted_to_string(both), name),
            reason: "atom is both added and deleted".into(),
        });
    }
    Ok(schema)
}

fn lifted_to_string(a: &LiftedAtom) -> String {
    let mut s = format!("({}", a.predicate);
    for x in &a.args {
        s.push(' ');
        s.push_str(x);
    }
    s.push(')');
    s
}

fn parse_lifted(dom: &PlanDomain, schema: &ActionSchema, items: &[Sexp], pos: Pos) -> Result<LiftedAtom> {
    let pname = expect_sym(items.first().ok_or_else(|| expected(pos, "a predicate"))?, "a predicate")?;
    let decl = dom.predicate(pname).ok_or_else(|| PddlError::TypeError {
        atom: pname.to_string(),
        reason: "undeclared predicate".into(),
    })?;
    let mut args = Vec::new();
    for a in &items[1..] {
        let v = expect_sym(a, "a `?variable`")?;
        if !v.starts_with('?') {
            return Err(PddlError::UnsupportedFeature(format!("constant `{v}` in action schema")));
        }
        if schema.param_sort(v).is_none() {
            return Err(expected(a.pos(), format!("a declared parameter (got `{v}`)")));
        }
        args.push(Arc::<str>::from(v));
    }
    let atom = LiftedAtom { predicate: decl.name.clone(), args };
    if atom.args.len() != decl.params.len() {
        return Err(PddlError::TypeError {
            atom: lifted_to_string(&atom),
            reason: format!("expected {} arguments", decl.params.len()),
        });
    }
    for (v, want) in atom.args.iter().zip(&decl.params) {
        let have = schema.param_sort(v).expect("checked above");
        if !dom.is_subtype(have, &want.sort) {
            return Err(PddlError::TypeError {
                atom: lifted_to_string(&atom),
                reason: format!("`{v}` has type `{have}`, expected `{}`", want.sort),
            });
        }
    }
    Ok(atom)
}

fn parse_precondition(
    dom: &PlanDomain,
    schema: &ActionSchema,
    s: &Sexp,
    out: &mut Vec<Condition>,
) -> Result<Vec<Condition>> {
    let items = expect_list(s, "a precondition")?;
    if items.is_empty() {
        return Ok(std::mem::take(out));
    }
    let head = expect_sym(&items[0], "a predicate or `and`")?;
    match head.to_ascii_lowercase().as_str() {
        "and" => {
            for c in &items[1..] {
                let mut inner = Vec::new();
                out.extend(parse_precondition(dom, schema, c, &mut inner)?);
            }
        }
        "=" => out.push(parse_equality(schema, items, s.pos(), false)?),
        "not" => {
            let inner = items.get(1).ok_or_else(|| expected(s.pos(), "a negated equality"))?;
            let inner_items = expect_list(inner, "`(= ?a ?b)`")?;
            match inner_items.first().and_then(Sexp::sym) {
                Some("=") => out.push(parse_equality(schema, inner_items, inner.pos(), true)?),
                _ => return Err(PddlError::UnsupportedFeature(":negative-preconditions".into())),
            }
        }
        "or" | "imply" => return Err(PddlError::UnsupportedFeature(":disjunctive-preconditions".into())),
        "forall" | "exists" => return Err(PddlError::UnsupportedFeature(":quantified-preconditions".into())),
        ">" | "<" | ">=" | "<=" => return Err(PddlError::UnsupportedFeature(":numeric-fluents".into())),
        _ => out.push(Condition::Atom(parse_lifted(dom, schema, items, s.pos())?)),
    }
    Ok(std::mem::take(out))
}

fn parse_equality(schema: &ActionSchema, items: &[Sexp], pos: Pos, negated: bool) -> Result<Condition> {
    if items.len() != 3 {
        return Err(expected(pos, "`(= ?a ?b)`"));
    }
    let a = expect_sym(&items[1], "a `?variable`")?;
    let b = expect_sym(&items[2], "a `?variable`")?;
    for (v, s) in [(a, &items[1]), (b, &items[2])] {
        if schema.param_sort(v).is_none() {
            return Err(expected(s.pos(), format!("a declared parameter (got `{v}`)")));
        }
    }
    let (a, b) = (Arc::from(a), Arc::from(b));
    Ok(if negated { Condition::NotEq(a, b) } else { Condition::Eq(a, b) })
}

fn parse_effect(dom: &PlanDomain, schema: &ActionSchema, s: &Sexp) -> Result<(Vec<LiftedAtom>, Vec<LiftedAtom>)> {
    let mut add = Vec::new();
    let mut del = Vec::new();
    fn walk(
        dom: &PlanDomain,
        schema: &ActionSchema,
        s: &Sexp,
        add: &mut Vec<LiftedAtom>,
        del: &mut Vec<LiftedAtom>,
    ) -> Result<()> {
        let items = expect_list(s, "an effect")?;
        if items.is_empty() {
            return Ok(());
        }
        let head = expect_sym(&items[0], "a predicate, `and` or `not`")?;
        match head.to_ascii_lowercase().as_str() {
            "and" => items[1..].iter().try_for_each(|c| walk(dom, schema, c, add, del)),
            "not" => {
                let inner = items.get(1).ok_or_else(|| expected(s.pos(), "a negated atom"))?;
                let inner_items = expect_list(inner, "an atom")?;
                del.push(parse_lifted(dom, schema, inner_items, inner.pos())?);
                Ok(())
            }
            "when" | "forall" => Err(PddlError::UnsupportedFeature(":conditional-effects".into())),
            "increase" | "decrease" | "assign" | "scale-up" | "scale-down" => {
                Err(PddlError::UnsupportedFeature(":numeric-fluents".into()))
            }
            _ => {
                add.push(parse_lifted(dom, schema, items, s.pos())?);
                Ok(())
            }
        }
    }
    walk(dom, schema, s, &mut add, &mut del)?;
    Ok((add, del))
}

pub fn parse_problem(text: &str, domain: &PlanDomain) -> Result<PlanProblem> {
    let root = read_sexp(text)?;
    let (name, sections) = header(&root, "problem")?;
    let mut prob = PlanProblem {
        name: Arc::from(name),
        domain: Arc::from(""),
        objects: Vec::new(),
        init: State::new(),
        goal: State::new(),
    };
    let mut saw_domain = false;
    let mut goal: Option<&Sexp> = None;
    let mut init: Option<&[Sexp]> = None;
    for sec in sections {
        let items = expect_list(sec, "a problem section")?;
        let key_s = items.first().ok_or_else(|| expected(sec.pos(), "a section keyword"))?;
        let key = expect_sym(key_s, "a section keyword")?.to_ascii_lowercase();
        if let Some(feat) = unsupported_section(&key) {
            return Err(PddlError::UnsupportedFeature(feat.to_string()));
        }
        match key.as_str() {
            ":domain" => {
                let d = expect_sym(items.get(1).ok_or_else(|| expected(sec.pos(), "a domain name"))?, "a domain name")?;
                if d != &*domain.name {
                    return Err(PddlError::TypeError {
                        atom: format!("(:domain {d})"),
                        reason: format!("problem targets `{d}` but domain is `{}`", domain.name),
                    });
                }
                prob.domain = Arc::from(d);
                saw_domain = true;
            }
            ":requirements" => {
                for r in &items[1..] {
                    let r = expect_sym(r, "a requirement flag")?.to_ascii_lowercase();
                    if !SUPPORTED_REQUIREMENTS.contains(&r.as_str()) {
                        return Err(PddlError::UnsupportedFeature(r));
                    }
                }
            }
            ":objects" => {
                for (o, t, p) in typed_list(&items[1..], false)? {
                    if !domain.has_type(&t) {
                        return Err(PddlError::TypeError { atom: o, reason: format!("undeclared type `{t}`") });
                    }
                    if prob.objects.iter().any(|(x, _)| **x == *o) {
                        return Err(expected(p, format!("a fresh object (duplicate `{o}`)")));
                    }
                    prob.objects.push((Arc::from(o.as_str()), Arc::from(t.as_str())));
                }
            }
            ":init" => init = Some(&items[1..]),
            ":goal" => {
                goal = Some(items.get(1).ok_or_else(|| expected(sec.pos(), "a goal formula"))?);
            }
            _ => return Err(expected(key_s.pos(), "`:domain`, `:objects`, `:init` or `:goal`")),
        }
    }
    if !saw_domain {
        return Err(expected(root.pos(), "a `(:domain NAME)` section"));
    }
    for a in init.unwrap_or(&[]) {
        let atom = parse_ground(domain, &prob, a)?;
        prob.init.insert(atom);
    }
    if let Some(g) = goal {
        let items = expect_list(g, "a goal conjunction")?;
        let conj: Vec<&Sexp> = match items.first().and_then(Sexp::sym) {
            Some(h) if h.eq_ignore_ascii_case("and") => items[1..].iter().collect(),
            Some(h) if h.eq_ignore_ascii_case("not") || h.eq_ignore_ascii_case("or") => {
                return Err(PddlError::UnsupportedFeature(format!("`{h}` in goal")));
            }
            None if items.is_empty() => Vec::new(),
            _ => vec![g],
        };
        for a in conj {
            let atom = parse_ground(domain, &prob, a)?;
            prob.goal.insert(atom);
        }
    }
    Ok(prob)
}

fn parse_ground(domain: &PlanDomain, prob: &PlanProblem, s: &Sexp) -> Result<Atom> {
    let items = expect_list(s, "a ground atom")?;
    let pname = expect_sym(items.first().ok_or_else(|| expected(s.pos(), "a predicate"))?, "a predicate")?;
    if pname.eq_ignore_ascii_case("not") {
        return Err(PddlError::UnsupportedFeature("negative literal in a propositional state".into()));
    }
    let mut args = Vec::new();
    for a in &items[1..] {
        args.push(expect_sym(a, "an object name")?.to_string());
    }
    let atom = Atom::new(pname, &args);
    let decl = domain
        .predicate(pname)
        .ok_or_else(|| PddlError::TypeError { atom: atom.to_string(), reason: "undeclared predicate".into() })?;
    if decl.params.len() != args.len() {
        return Err(PddlError::TypeError {
            atom: atom.to_string(),
            reason: format!("expected {} arguments", decl.params.len()),
        });
    }
    for (a, want) in args.iter().zip(&decl.params) {
        let t = prob
            .object_type(a)
            .ok_or_else(|| PddlError::TypeError { atom: atom.to_string(), reason: format!("undeclared object `{a}`") })?;
        if !domain.is_subtype(t, &want.sort) {
            return Err(PddlError::TypeError {
                atom: atom.to_string(),
                reason: format!("`{a}` has type `{t}`, expected `{}`", want.sort),
            });
        }
    }
    Ok(atom)
}

// ---------------------------------------------------------------------------
// Printing

fn write_typed(out: &mut String, vars: &[TypedVar]) {
    for (i, v) in vars.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{} - {}", v.name, v.sort);
    }
}

fn write_lifted(out: &mut String, a: &LiftedAtom) {
    out.push_str(&lifted_to_string(a));
}

fn ground_to_pddl(a: &Atom) -> String {
    let mut s = format!("({}", a.predicate);
    for x in &a.args {
        s.push(' ');
        s.push_str(x);
    }
    s.push(')');
    s
}

impl PlanDomain {
    pub fn to_pddl(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "(define (domain {})", self.name);
        if !self.requirements.is_empty() {
            let _ = writeln!(out, "  (:requirements {})", self.requirements.join(" "));
        }
        if !self.types.is_empty() {
            out.push_str("  (:types");
            for (n, p) in &self.types {
                let _ = write!(out, "\n    {} - {}", n, p.as_deref().unwrap_or("object"));
            }
            out.push_str(")\n");
        }
        out.push_str("  (:predicates");
        for p in &self.predicates {
            let _ = write!(out, "\n    ({}", p.name);
            if !p.params.is_empty() {
                out.push(' ');
                write_typed(&mut out, &p.params);
            }
            out.push(')');
        }
        out.push_str(")\n");
        for a in &self.actions {
            let _ = writeln!(out, "  (:action {}", a.name);
            out.push_str("    :parameters (");
            write_typed(&mut out, &a.params);
            out.push_str(")\n");
            let _ = writeln!(out, "    :class {}", a.class);
            out.push_str("    :precondition (and");
            for c in &a.precondition {
                out.push(' ');
                match c {
                    Condition::Atom(l) => write_lifted(&mut out, l),
                    Condition::Eq(x, y) => {
                        let _ = write!(out, "(= {x} {y})");
                    }
                    Condition::NotEq(x, y) => {
                        let _ = write!(out, "(not (= {x} {y}))");
                    }
                }
            }
            out.push_str(")\n    :effect (and");
            for l in &a.add {
                out.push(' ');
                write_lifted(&mut out, l);
            }
            for l in &a.delete {
                out.push_str(" (not ");
                write_lifted(&mut out, l);
                out.push(')');
            }
            out.push_str("))\n");
        }
        out.push_str(")\n");
        out
    }
}

impl PlanProblem {
    pub fn to_pddl(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "(define (problem {})", self.name);
        let _ = writeln!(out, "  (:domain {})", self.domain);
        out.push_str("  (:objects");
        for (o, t) in &self.objects {
            let _ = write!(out, " {o} - {t}");
        }
        out.push_str(")\n  (:init");
        for a in &self.init {
            out.push(' ');
            out.push_str(&ground_to_pddl(a));
        }
        out.push_str(")\n  (:goal (and");
        for a in &self.goal {
            out.push(' ');
            out.push_str(&ground_to_pddl(a));
        }
        out.push_str(")))\n");
        out
    }
}

// ---------------------------------------------------------------------------
// Plan library

#[derive(Debug, Clone)]
pub struct PlanEntry {
    pub name: String,
    pub domain: Arc<PlanDomain>,
    pub problem: PlanProblem,
    /// Cached copy of `problem.goal`.
    pub goal_state: State,
}

impl PlanEntry {
    pub fn new(name: impl Into<String>, domain: Arc<PlanDomain>, problem: PlanProblem) -> Self {
        let goal_state = problem.goal.clone();
        PlanEntry { name: name.into(), domain, problem, goal_state }
    }

    /// Entry with its objects renamed. Targets that already name another
    /// object of the problem are swapped so the renaming stays injective.
    pub fn instantiate(&self, substitution: &BTreeMap<Name, Name>) -> PlanEntry {
        let mut map = substitution.clone();
        let sources: BTreeSet<Name> = substitution.keys().cloned().collect();
        for (from, to) in substitution {
            if !sources.contains(to) && self.problem.object_type(to).is_some() {
                map.insert(to.clone(), from.clone());
            }
        }
        let problem = self.problem.renamed(&map);
        PlanEntry::new(self.name.clone(), self.domain.clone(), problem)
    }
}

/// Weighted sequence of goal states observed for a task.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalChain {
    pub weight: f64,
    pub goals: Vec<State>,
}

/// Successor-goal annotations for one task sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskChains {
    pub task: String,
    pub start: State,
    pub chains: Vec<GoalChain>,
}

#[derive(Debug, Clone)]
pub struct PlanLibrary {
    pub entries: Vec<PlanEntry>,
    pub vocab: Arc<Vocabulary>,
    pub tasks: Vec<TaskChains>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    vocabulary: String,
    entries: Vec<ManifestEntry>,
    #[serde(default)]
    tasks: Vec<ManifestTask>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    domain: String,
    problem: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestTask {
    task: String,
    start: Vec<String>,
    chains: Vec<ManifestChain>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestChain {
    #[serde(default = "one")]
    weight: f64,
    goals: Vec<Vec<String>>,
}

fn one() -> f64 {
    1.0
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| PddlError::Library(format!("{}: {e}", path.display())))
}

impl PlanLibrary {
    pub fn new(entries: Vec<PlanEntry>, vocab: Arc<Vocabulary>) -> Result<PlanLibrary> {
        let lib = PlanLibrary { entries, vocab, tasks: Vec::new() };
        for e in &lib.entries {
            lib.check_entry(e)?;
        }
        Ok(lib)
    }

    /// Loads a manifest: vocabulary path, entries (domain + problem file per
    /// entry) and per-task successor-goal chains. Paths are relative to the
    /// manifest.
    pub fn load(manifest: impl AsRef<Path>) -> Result<PlanLibrary> {
        let manifest = manifest.as_ref();
        let base = manifest.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        let spec: ManifestFile =
            toml::from_str(&read(manifest)?).map_err(|e| PddlError::Library(format!("{}: {e}", manifest.display())))?;
        let vocab = Vocabulary::load(base.join(&spec.vocabulary)).map_err(|e| PddlError::Library(e.to_string()))?;
        let vocab = Arc::new(vocab);
        let mut domains: HashMap<PathBuf, Arc<PlanDomain>> = HashMap::new();
        let mut entries = Vec::new();
        for e in &spec.entries {
            let dpath = base.join(&e.domain);
            let domain = match domains.get(&dpath) {
                Some(d) => d.clone(),
                None => {
                    let d = Arc::new(
                        parse_domain(&read(&dpath)?).map_err(|err| PddlError::Library(format!("{}: {err}", dpath.display())))?,
                    );
                    domains.insert(dpath.clone(), d.clone());
                    d
                }
            };
            let ppath = base.join(&e.problem);
            let problem = parse_problem(&read(&ppath)?, &domain)
                .map_err(|err| PddlError::Library(format!("{}: {err}", ppath.display())))?;
            entries.push(PlanEntry::new(e.name.clone(), domain, problem));
        }
        let mut lib = PlanLibrary::new(entries, vocab)?;
        for t in &spec.tasks {
            if lib.vocab.task(&t.task).is_none() {
                return Err(PddlError::Library(format!("task `{}` is not declared in the vocabulary", t.task)));
            }
            let parse = |atoms: &[String]| -> Result<State> {
                let s = State::from_strs(atoms).map_err(|e| PddlError::Library(e.to_string()))?;
                lib.vocab.check_state(&s).map_err(|e| PddlError::Library(format!("task {}: {e}", t.task)))?;
                Ok(s)
            };
            let start = parse(&t.start)?;
            let chains = t
                .chains
                .iter()
                .map(|c| Ok(GoalChain { weight: c.weight, goals: c.goals.iter().map(|g| parse(g)).collect::<Result<_>>()? }))
                .collect::<Result<Vec<_>>>()?;
            lib.tasks.push(TaskChains { task: t.task.clone(), start, chains });
        }
        Ok(lib)
    }

    /// Checks an entry against the shared vocabulary: every type is a sort
    /// with the same parent, every predicate agrees, every object is a term
    /// whose sort descends from its declared type.
    fn check_entry(&self, e: &PlanEntry) -> Result<()> {
        let v = &self.vocab;
        let err = |m: String| PddlError::Library(format!("entry `{}`: {m}", e.name));
        for (t, parent) in &e.domain.types {
            let sid = v.sort_id(t).ok_or_else(|| err(format!("type `{t}` is not a vocabulary sort")))?;
            let vparent = v.sort(sid).parent.map(|p| v.sort(p).name.clone());
            if vparent.as_deref() != parent.as_deref() {
                return Err(err(format!("type `{t}` has a different parent than the vocabulary sort")));
            }
        }
        for p in &e.domain.predicates {
            let vp = v.predicate(&p.name).ok_or_else(|| err(format!("predicate `{}` missing from vocabulary", p.name)))?;
            let same = vp.arity() == p.params.len()
                && vp.arg_sorts.iter().zip(&p.params).all(|(s, tv)| *v.sort(*s).name == *tv.sort);
            if !same {
                return Err(err(format!("predicate `{}` disagrees with the vocabulary", p.name)));
            }
        }
        for (o, t) in &e.problem.objects {
            let term = v.term(o).ok_or_else(|| err(format!("object `{o}` is not a vocabulary term")))?;
            let want = v.sort_id(t).ok_or_else(|| err(format!("type `{t}` is not a vocabulary sort")))?;
            if !v.is_subsort(term.sort, want) {
                return Err(err(format!("object `{o}` is declared `{t}` but its vocabulary sort differs")));
            }
        }
        v.check_state(&e.problem.init).map_err(|x| err(x.to_string()))?;
        v.check_state(&e.problem.goal).map_err(|x| err(x.to_string()))?;
        Ok(())
    }

    pub fn entry(&self, name: &str) -> Option<&PlanEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn task_chains(&self, task: &str) -> Option<&TaskChains> {
        self.tasks.iter().find(|t| t.task == task)
    }
}

/// Cached goal states in library order.
pub fn goals_of(lib: &PlanLibrary) -> Vec<State> {
    lib.entries.iter().map(|e| e.goal_state.clone()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    TooManyWorldActions { entry: String, count: usize, actions: Vec<String> },
    EcologicalTouchesWorld { domain: String, schema: String, atom: String },
    Unsolvable { entry: String, reason: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::TooManyWorldActions { entry, count, actions } => {
                write!(f, "entry `{entry}`: solution uses {count} world actions ({})", actions.join(", "))
            }
            Violation::EcologicalTouchesWorld { domain, schema, atom } => {
                write!(f, "domain `{domain}`: ecological action `{schema}` has world effect {atom}")
            }
            Violation::Unsolvable { entry, reason } => write!(f, "entry `{entry}`: {reason}"),
        }
    }
}

/// Whether a lifted effect atom changes the world rather than the robot.
fn lifted_touches_world(vocab: &Vocabulary, schema: &ActionSchema, atom: &LiftedAtom) -> bool {
    if vocab.predicate(&atom.predicate).is_some_and(|p| p.robot_state) {
        return false;
    }
    let Some(first) = atom.args.first() else { return true };
    let kind = schema
        .param_sort(first)
        .and_then(|s| vocab.sort_id(s))
        .and_then(|sid| vocab.sort_kind(sid));
    kind != Some(TermKind::Robot)
}

/// Warnings, not errors: solutions with more than one world action and
/// ecological schemas whose effects reach world-sorted terms.
pub fn validate_library(lib: &PlanLibrary) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen_domains: Vec<*const PlanDomain> = Vec::new();
    for e in &lib.entries {
        let ptr = Arc::as_ptr(&e.domain);
        if seen_domains.contains(&ptr) {
            continue;
        }
        seen_domains.push(ptr);
        for a in e.domain.actions.iter().filter(|a| a.class == ActionClass::Ecological) {
            for atom in a.add.iter().chain(&a.delete) {
                if lifted_touches_world(&lib.vocab, a, atom) {
                    out.push(Violation::EcologicalTouchesWorld {
                        domain: e.domain.name.to_string(),
                        schema: a.name.to_string(),
                        atom: lifted_to_string(atom),
                    });
                }
            }
        }
    }
    for e in &lib.entries {
        match planner::plan(e, &PlanOptions::default()) {
            Ok(sol) => {
                let world: Vec<String> = sol
                    .steps
                    .iter()
                    .filter(|s| s.class == ActionClass::World)
                    .map(|s| s.to_string())
                    .collect();
                if world.len() > 1 {
                    out.push(Violation::TooManyWorldActions { entry: e.name.clone(), count: world.len(), actions: world });
                }
            }
            Err(err) => out.push(Violation::Unsolvable { entry: e.name.clone(), reason: err.to_string() }),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const DOMAIN: &str = r#"
; toy domain
(define (domain toy)
  (:requirements :typing :equality)
  (:types agent hand item place - object)
  (:predicates (On ?o - item ?p - place) (Holding ?h - hand ?o - item) (Free ?h - hand)
               (Seen ?o - item) (At ?a - agent ?p - place))
  (:action search
    :parameters (?a - agent ?o - item)
    :class ecological
    :precondition (and)
    :effect (Seen ?o))
  (:action grasp
    :parameters (?h - hand ?o - item ?p - place)
    :precondition (and (On ?o ?p) (Free ?h) (Seen ?o))
    :effect (and (Holding ?h ?o) (not (On ?o ?p)) (not (Free ?h))))
  (:action move
    :parameters (?a - agent ?from - place ?to - place)
    :class ecological
    :precondition (and (At ?a ?from) (not (= ?from ?to)))
    :effect (and (At ?a ?to) (not (At ?a ?from)))))
"#;

    const PROBLEM: &str = r#"
(define (problem p1) (:domain toy)
  (:objects r - agent h - hand b - item t - place)
  (:init (On b t) (Free h))
  (:goal (and (Holding h b))))
"#;

    #[test]
    fn parses_toy_domain() {
        let d = parse_domain(DOMAIN).unwrap();
        assert_eq!(d.actions.len(), 3);
        assert_eq!(d.action("search").unwrap().class, ActionClass::Ecological);
        assert_eq!(d.action("grasp").unwrap().class, ActionClass::World);
        let m = d.action("move").unwrap();
        assert_eq!(m.precondition.len(), 2);
        assert!(matches!(m.precondition[1], Condition::NotEq(..)));
    }

    #[test]
    fn single_ecological_search() {
        let text = "(define (domain d) (:requirements :typing) (:types robot_agent - object)
            (:predicates (VisionOn ?r - robot_agent))
            (:action search :parameters (?r - robot_agent) :class ecological :precondition () :effect (VisionOn ?r)))";
        let d = parse_domain(text).unwrap();
        assert_eq!(d.actions.len(), 1);
        assert_eq!(d.actions[0].name.as_ref(), "search");
    }

    #[test]
    fn rejects_unsupported_features() {
        let durative = "(define (domain d) (:durative-action go :parameters () :duration (= ?duration 1)))";
        assert_eq!(parse_domain(durative), Err(PddlError::UnsupportedFeature(":durative-actions".into())));
        let req = "(define (domain d) (:requirements :typing :conditional-effects))";
        assert_eq!(parse_domain(req), Err(PddlError::UnsupportedFeature(":conditional-effects".into())));
        let neg = DOMAIN.replace("(Free ?h) (Seen ?o))", "(Free ?h) (not (Seen ?o)))");
        assert_eq!(parse_domain(&neg), Err(PddlError::UnsupportedFeature(":negative-preconditions".into())));
        let disj = DOMAIN.replace("(and (On ?o ?p) (Free ?h) (Seen ?o))", "(or (On ?o ?p) (Free ?h))");
        assert_eq!(parse_domain(&disj), Err(PddlError::UnsupportedFeature(":disjunctive-preconditions".into())));
    }

    #[test]
    fn parse_errors_carry_positions() {
        let err = parse_domain("(define (domain d)\n  (:predicates (P ?x - t)))").unwrap_err();
        assert!(matches!(err, PddlError::TypeError { .. }));
        let err = parse_domain("(define (domain d)\n  (:predicates (P ?x)").unwrap_err();
        match err {
            PddlError::ParseError { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let err = parse_domain("(define (domain d)\n   (:bogus))").unwrap_err();
        assert_eq!(err, PddlError::ParseError { line: 2, column: 5, expected: "`:requirements`, `:types`, `:predicates` or `:action`".into() });
    }

    #[test]
    fn parses_problem_and_type_checks() {
        let d = parse_domain(DOMAIN).unwrap();
        let p = parse_problem(PROBLEM, &d).unwrap();
        assert_eq!(p.goal, State::parse("Holding(h, b)").unwrap());
        assert_eq!(p.init.len(), 2);

        let undeclared = PROBLEM.replace("(Holding h b)", "(Holding h x)");
        assert!(matches!(parse_problem(&undeclared, &d), Err(PddlError::TypeError { .. })));
        let wrong_sort = PROBLEM.replace("(Holding h b)", "(Holding b h)");
        assert!(matches!(parse_problem(&wrong_sort, &d), Err(PddlError::TypeError { .. })));
        let empty_init = PROBLEM.replace("(:init (On b t) (Free h))", "(:init)");
        assert!(parse_problem(&empty_init, &d).unwrap().init.is_empty());
    }

    #[test]
    fn round_trip_print_parse() {
        let d = parse_domain(DOMAIN).unwrap();
        let again = parse_domain(&d.to_pddl()).unwrap();
        assert_eq!(d, again);
        let p = parse_problem(PROBLEM, &d).unwrap();
        assert_eq!(p, parse_problem(&p.to_pddl(), &d).unwrap());
    }

    #[test]
    fn add_delete_must_be_disjoint() {
        let bad = DOMAIN.replace("(and (Holding ?h ?o) (not (On ?o ?p))", "(and (Holding ?h ?o) (not (Holding ?h ?o))");
        assert!(matches!(parse_domain(&bad), Err(PddlError::TypeError { .. })));
    }
}
