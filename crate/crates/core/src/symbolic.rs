//! The robot language: sorts, terms, predicates, ground atoms, conjunctive
//! states, task sentences and the token encoding consumed by the goal
//! predictor.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Interned-ish symbol. Cloning is a refcount bump.
pub type Name = Arc<str>;

/// Default cap on the number of atoms accepted by [`encode_state`].
pub const MAX_STATE_ATOMS: usize = 17;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SymbolicError {
    #[error("state has {len} atoms, the encoder accepts at most {max}")]
    StateTooLong { len: usize, max: usize },
    #[error("malformed token sequence at position {position}: {reason}")]
    MalformedSequence { position: usize, reason: String },
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("unknown predicate `{0}`")]
    UnknownPredicate(String),
    #[error("unknown term `{0}`")]
    UnknownTerm(String),
    #[error("unknown sort `{0}`")]
    UnknownSort(String),
    #[error("atom {atom}: {reason}")]
    IllTyped { atom: String, reason: String },
    #[error("cannot parse atom `{0}`")]
    AtomSyntax(String),
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, SymbolicError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TermKind {
    World,
    Robot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SortId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Sort {
    pub name: Name,
    pub parent: Option<SortId>,
    /// Partition annotation; a sort without one inherits from its ancestors.
    pub kind: Option<TermKind>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub name: Name,
    pub sort: SortId,
    pub kind: TermKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predicate {
    pub name: Name,
    pub arg_sorts: Vec<SortId>,
    /// Name of the perception rule that grounds this predicate, or `internal`
    /// for robot proprioceptive state.
    pub grounding: Name,
    /// Atoms of this predicate describe the robot's own (epistemic) state.
    pub robot_state: bool,
}

impl Predicate {
    pub fn arity(&self) -> usize {
        self.arg_sorts.len()
    }
}

/// A ground literal `R(v1, .., vk)` with an optional frame index.
///
/// Field order gives the canonical ordering: predicate name, then argument
/// names, lexicographically.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Atom {
    pub predicate: Name,
    pub args: Vec<Name>,
    pub time: Option<u32>,
}

impl Atom {
    pub fn new<P: AsRef<str>, A: AsRef<str>>(predicate: P, args: &[A]) -> Self {
        Atom {
            predicate: Arc::from(predicate.as_ref()),
            args: args.iter().map(|a| Arc::from(a.as_ref())).collect(),
            time: None,
        }
    }

    pub fn at_time(mut self, t: u32) -> Self {
        self.time = Some(t);
        self
    }

    pub fn timeless(&self) -> Atom {
        Atom { time: None, ..self.clone() }
    }

    pub fn mentions(&self, term: &str) -> bool {
        self.args.iter().any(|a| &**a == term)
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.predicate)?;
        for (i, a) in self.args.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{a}")?;
        }
        if let Some(t) = self.time {
            write!(f, ", t{t}")?;
        }
        write!(f, ")")
    }
}

impl FromStr for Atom {
    type Err = SymbolicError;

    /// Parses `On(brush, ladder)` or `On(brush,ladder,t_1)`. A trailing
    /// `t<N>` / `t_<N>` argument is read as the frame index.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || SymbolicError::AtomSyntax(s.to_string());
        let open = s.find('(').ok_or_else(bad)?;
        if !s.ends_with(')') {
            return Err(bad());
        }
        let pred = s[..open].trim();
        if pred.is_empty() || !is_identifier(pred) {
            return Err(bad());
        }
        let inner = &s[open + 1..s.len() - 1];
        let mut args: Vec<&str> = inner.split(',').map(str::trim).collect();
        if args.iter().any(|a| a.is_empty()) {
            return Err(bad());
        }
        let mut time = None;
        if args.len() > 1 {
            if let Some(t) = parse_frame(args[args.len() - 1]) {
                time = Some(t);
                args.pop();
            }
        }
        if args.iter().any(|a| !is_identifier(a)) {
            return Err(bad());
        }
        let mut atom = Atom::new(pred, &args);
        atom.time = time;
        Ok(atom)
    }
}

fn parse_frame(s: &str) -> Option<u32> {
    let rest = s.strip_prefix('t')?;
    let rest = rest.strip_prefix('_').unwrap_or(rest);
    if rest.is_empty() {
        return None;
    }
    rest.parse().ok()
}

pub(crate) fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_alphanumeric() || c == '_' || c == '-')
}

/// Conjunction of ground atoms. Backed by an ordered set, so iteration is
/// always in canonical order and duplicates are impossible.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct State {
    atoms: BTreeSet<Atom>,
}

impl State {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn insert(&mut self, atom: Atom) -> bool {
        self.atoms.insert(atom)
    }

    pub fn remove(&mut self, atom: &Atom) -> bool {
        self.atoms.remove(atom)
    }

    pub fn contains(&self, atom: &Atom) -> bool {
        self.atoms.contains(atom)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Atom> {
        self.atoms.iter()
    }

    pub fn atoms(&self) -> &BTreeSet<Atom> {
        &self.atoms
    }

    pub fn is_subset(&self, other: &State) -> bool {
        self.atoms.is_subset(&other.atoms)
    }

    pub fn union(&self, other: &State) -> State {
        self.atoms.union(&other.atoms).cloned().collect()
    }

    pub fn difference(&self, other: &State) -> State {
        self.atoms.difference(&other.atoms).cloned().collect()
    }

    pub fn intersection_len(&self, other: &State) -> usize {
        self.atoms.intersection(&other.atoms).count()
    }

    /// Same atoms with frame indices stripped.
    pub fn timeless(&self) -> State {
        self.atoms.iter().map(Atom::timeless).collect()
    }

    /// Every term name mentioned by an atom, sorted.
    pub fn terms(&self) -> BTreeSet<Name> {
        self.atoms.iter().flat_map(|a| a.args.iter().cloned()).collect()
    }

    pub fn rename(&self, map: &BTreeMap<Name, Name>) -> State {
        self.atoms
            .iter()
            .map(|a| Atom {
                predicate: a.predicate.clone(),
                args: a.args.iter().map(|x| map.get(x).cloned().unwrap_or_else(|| x.clone())).collect(),
                time: a.time,
            })
            .collect()
    }

    /// Parses `A(x) ; B(x, y)` style text. Separators may be `;` or `&` or
    /// `∧`, and an empty string is the empty conjunction.
    pub fn parse(text: &str) -> Result<State> {
        let mut out = State::new();
        let normalized = text.replace(['∧', '&'], ";");
        for chunk in split_atoms(&normalized) {
            out.insert(chunk.parse()?);
        }
        Ok(out)
    }

    pub fn from_strs<S: AsRef<str>>(items: &[S]) -> Result<State> {
        items.iter().map(|s| s.as_ref().parse::<Atom>()).collect()
    }

    pub fn to_strings(&self) -> Vec<String> {
        self.atoms.iter().map(|a| a.to_string()).collect()
    }
}

/// Splits on `;` at paren depth zero.
fn split_atoms(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, c) in text.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth -= 1,
            ';' if depth == 0 => {
                out.push(text[start..i].trim());
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(text[start..].trim());
    out.into_iter().filter(|s| !s.is_empty()).collect()
}

impl FromIterator<Atom> for State {
    fn from_iter<I: IntoIterator<Item = Atom>>(iter: I) -> Self {
        State { atoms: iter.into_iter().collect() }
    }
}

impl<'a> IntoIterator for &'a State {
    type Item = &'a Atom;
    type IntoIter = std::collections::btree_set::Iter<'a, Atom>;
    fn into_iter(self) -> Self::IntoIter {
        self.atoms.iter()
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.atoms.is_empty() {
            return write!(f, "⊤");
        }
        for (i, a) in self.atoms.iter().enumerate() {
            if i > 0 {
                write!(f, " ∧ ")?;
            }
            write!(f, "{a}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TaskSentence {
    pub id: String,
    pub words: Vec<String>,
}

impl TaskSentence {
    pub fn new(id: impl Into<String>, text: &str) -> Self {
        TaskSentence { id: id.into(), words: text.split_whitespace().map(str::to_string).collect() }
    }

    pub fn text(&self) -> String {
        self.words.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Separators {
    pub eoa: String,
    pub ets: String,
    pub eos: String,
}

impl Default for Separators {
    fn default() -> Self {
        Separators { eoa: "<eoa>".into(), ets: "<ets>".into(), eos: "<eos>".into() }
    }
}

/// Integer id of a token in the shared index space.
pub type TokenId = u32;

/// Token layout: `task words, ETS, (pred args.. EOA)*, EOS`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    pub tokens: Vec<TokenId>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Vocabulary file

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabularyFile {
    #[serde(default)]
    pub separators: Option<SeparatorSpec>,
    pub sorts: Vec<SortSpec>,
    pub terms: Vec<TermSpec>,
    pub predicates: Vec<PredicateSpec>,
    #[serde(default)]
    pub tasks: Vec<TaskSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeparatorSpec {
    pub eoa: String,
    pub ets: String,
    pub eos: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SortSpec {
    pub name: String,
    #[serde(default)]
    pub parent: Option<String>,
    #[serde(default)]
    pub kind: Option<TermKind>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermSpec {
    pub name: String,
    pub sort: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredicateSpec {
    pub name: String,
    pub args: Vec<String>,
    #[serde(default)]
    pub grounding: Option<String>,
    #[serde(default)]
    pub robot_state: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub id: String,
    pub text: String,
}

/// The language `L ∪ {T}` plus its token index.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    sorts: Vec<Sort>,
    sort_index: HashMap<Name, SortId>,
    terms: Vec<Term>,
    term_index: HashMap<Name, usize>,
    predicates: Vec<Predicate>,
    predicate_index: HashMap<Name, usize>,
    tasks: Vec<TaskSentence>,
    separators: Separators,
    tokens: Vec<String>,
    token_index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn from_file_spec(spec: &VocabularyFile) -> Result<Vocabulary> {
        let separators = spec
            .separators
            .as_ref()
            .map(|s| Separators { eoa: s.eoa.clone(), ets: s.ets.clone(), eos: s.eos.clone() })
            .unwrap_or_default();
        let mut b = VocabularyBuilder::new(separators);
        for s in &spec.sorts {
            b.sort(&s.name, s.parent.as_deref(), s.kind)?;
        }
        for t in &spec.terms {
            b.term(&t.name, &t.sort)?;
        }
        for p in &spec.predicates {
            let args: Vec<&str> = p.args.iter().map(String::as_str).collect();
            b.predicate_with(&p.name, &args, p.grounding.as_deref().unwrap_or(&p.name), p.robot_state)?;
        }
        for t in &spec.tasks {
            b.task(&t.id, &t.text)?;
        }
        b.build()
    }

    pub fn parse_toml(text: &str) -> Result<Vocabulary> {
        let spec: VocabularyFile =
            toml::from_str(text).map_err(|e| SymbolicError::InvalidVocabulary(e.to_string()))?;
        Vocabulary::from_file_spec(&spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Vocabulary> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| SymbolicError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Vocabulary::parse_toml(&text)
    }

    pub fn sorts(&self) -> &[Sort] {
        &self.sorts
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn predicates(&self) -> &[Predicate] {
        &self.predicates
    }

    pub fn tasks(&self) -> &[TaskSentence] {
        &self.tasks
    }

    pub fn separators(&self) -> &Separators {
        &self.separators
    }

    pub fn sort_id(&self, name: &str) -> Option<SortId> {
        self.sort_index.get(name).copied()
    }

    pub fn sort(&self, id: SortId) -> &Sort {
        &self.sorts[id.0]
    }

    pub fn term(&self, name: &str) -> Option<&Term> {
        self.term_index.get(name).map(|&i| &self.terms[i])
    }

    pub fn predicate(&self, name: &str) -> Option<&Predicate> {
        self.predicate_index.get(name).map(|&i| &self.predicates[i])
    }

    pub fn task(&self, id: &str) -> Option<&TaskSentence> {
        self.tasks.iter().find(|t| t.id == id)
    }

    /// `true` when `sort` equals `ancestor` or descends from it.
    pub fn is_subsort(&self, sort: SortId, ancestor: SortId) -> bool {
        let mut cur = Some(sort);
        while let Some(s) = cur {
            if s == ancestor {
                return true;
            }
            cur = self.sorts[s.0].parent;
        }
        false
    }

    /// Partition of a sort, inherited from the nearest annotated ancestor.
    pub fn sort_kind(&self, sort: SortId) -> Option<TermKind> {
        let mut cur = Some(sort);
        while let Some(s) = cur {
            if let Some(k) = self.sorts[s.0].kind {
                return Some(k);
            }
            cur = self.sorts[s.0].parent;
        }
        None
    }

    /// Terms whose sort is `sort` or one of its descendants, in declaration order.
    pub fn terms_of_sort(&self, sort: SortId) -> impl Iterator<Item = &Term> {
        self.terms.iter().filter(move |t| self.is_subsort(t.sort, sort))
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token_id(&self, token: &str) -> Option<TokenId> {
        self.token_index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn eoa(&self) -> TokenId {
        self.token_index[&self.separators.eoa]
    }

    pub fn ets(&self) -> TokenId {
        self.token_index[&self.separators.ets]
    }

    pub fn eos(&self) -> TokenId {
        self.token_index[&self.separators.eos]
    }

    pub fn is_separator(&self, id: TokenId) -> bool {
        id == self.eoa() || id == self.ets() || id == self.eos()
    }

    /// Stable digest of the token index, used to pin checkpoints to a vocabulary.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        for p in &self.predicates {
            h.update(p.name.as_bytes());
            h.update([p.arity() as u8]);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Checks that an atom names a declared predicate, has the right arity and
    /// that every argument's sort descends from the declared argument sort.
    pub fn check_atom(&self, atom: &Atom) -> Result<()> {
        let pred = self
            .predicate(&atom.predicate)
            .ok_or_else(|| SymbolicError::UnknownPredicate(atom.predicate.to_string()))?;
        if pred.arity() != atom.args.len() {
            return Err(SymbolicError::IllTyped {
                atom: atom.to_string(),
                reason: format!("expected {} arguments, got {}", pred.arity(), atom.args.len()),
            });
        }
        for (arg, &want) in atom.args.iter().zip(&pred.arg_sorts) {
            let term = self.term(arg).ok_or_else(|| SymbolicError::UnknownTerm(arg.to_string()))?;
            if !self.is_subsort(term.sort, want) {
                return Err(SymbolicError::IllTyped {
                    atom: atom.to_string(),
                    reason: format!(
                        "`{}` has sort `{}`, expected `{}`",
                        arg,
                        self.sorts[term.sort.0].name,
                        self.sorts[want.0].name
                    ),
                });
            }
        }
        Ok(())
    }

    pub fn check_state(&self, state: &State) -> Result<()> {
        state.iter().try_for_each(|a| self.check_atom(a))
    }

    /// Resolves task words to a declared sentence when one matches, otherwise
    /// builds an ad-hoc sentence whose id is the text itself.
    pub fn task_from_words(&self, words: Vec<String>) -> TaskSentence {
        match self.tasks.iter().find(|t| t.words == words) {
            Some(t) => t.clone(),
            None => TaskSentence { id: words.join(" "), words },
        }
    }

    /// Whether an atom describes robot-internal state rather than the world.
    pub fn is_robot_state_atom(&self, atom: &Atom) -> bool {
        let Some(pred) = self.predicate(&atom.predicate) else { return false };
        if pred.robot_state {
            return true;
        }
        atom.args
            .first()
            .and_then(|a| self.term(a))
            .map(|t| t.kind == TermKind::Robot)
            .unwrap_or(false)
    }
}

/// Incremental constructor used by the file loader and by tests.
#[derive(Debug)]
pub struct VocabularyBuilder {
    sorts: Vec<Sort>,
    sort_index: HashMap<Name, SortId>,
    terms: Vec<Term>,
    term_index: HashMap<Name, usize>,
    predicates: Vec<Predicate>,
    predicate_index: HashMap<Name, usize>,
    tasks: Vec<TaskSentence>,
    separators: Separators,
}

impl Default for VocabularyBuilder {
    fn default() -> Self {
        Self::new(Separators::default())
    }
}

impl VocabularyBuilder {
    pub fn new(separators: Separators) -> Self {
        VocabularyBuilder {
            sorts: Vec::new(),
            sort_index: HashMap::new(),
            terms: Vec::new(),
            term_index: HashMap::new(),
            predicates: Vec::new(),
            predicate_index: HashMap::new(),
            tasks: Vec::new(),
            separators,
        }
    }

    pub fn sort(&mut self, name: &str, parent: Option<&str>, kind: Option<TermKind>) -> Result<SortId> {
        if !is_identifier(name) {
            return Err(SymbolicError::InvalidVocabulary(format!("bad sort name `{name}`")));
        }
        if self.sort_index.contains_key(name) {
            return Err(SymbolicError::InvalidVocabulary(format!("duplicate sort `{name}`")));
        }
        // Parents must be declared first, which also rules out cycles.
        let parent = match parent {
            Some(p) => Some(*self.sort_index.get(p).ok_or_else(|| SymbolicError::UnknownSort(p.to_string()))?),
            None => None,
        };
        let id = SortId(self.sorts.len());
        self.sorts.push(Sort { name: Arc::from(name), parent, kind });
        self.sort_index.insert(Arc::from(name), id);
        Ok(id)
    }

    fn kind_of(&self, sort: SortId) -> Option<TermKind> {
        let mut cur = Some(sort);
        while let Some(s) = cur {
            if let Some(k) = self.sorts[s.0].kind {
                return Some(k);
            }
            cur = self.sorts[s.0].parent;
        }
        None
    }

    pub fn term(&mut self, name: &str, sort: &str) -> Result<()> {
        if !is_identifier(name) {
            return Err(SymbolicError::InvalidVocabulary(format!("bad term name `{name}`")));
        }
        if self.term_index.contains_key(name) {
            return Err(SymbolicError::InvalidVocabulary(format!("duplicate term `{name}`")));
        }
        let sort = *self.sort_index.get(sort).ok_or_else(|| SymbolicError::UnknownSort(sort.to_string()))?;
        let kind = self.kind_of(sort).unwrap_or(TermKind::World);
        self.term_index.insert(Arc::from(name), self.terms.len());
        self.terms.push(Term { name: Arc::from(name), sort, kind });
        Ok(())
    }

    pub fn predicate(&mut self, name: &str, args: &[&str]) -> Result<()> {
        self.predicate_with(name, args, name, false)
    }

    pub fn predicate_with(&mut self, name: &str, args: &[&str], grounding: &str, robot_state: bool) -> Result<()> {
        if !is_identifier(name) {
            return Err(SymbolicError::InvalidVocabulary(format!("bad predicate name `{name}`")));
        }
        if !(1..=2).contains(&args.len()) {
            return Err(SymbolicError::InvalidVocabulary(format!(
                "predicate `{name}` has arity {}, only 1 or 2 are allowed",
                args.len()
            )));
        }
        if self.predicate_index.contains_key(name) {
            return Err(SymbolicError::InvalidVocabulary(format!("duplicate predicate `{name}`")));
        }
        let arg_sorts = args
            .iter()
            .map(|s| self.sort_index.get(*s).copied().ok_or_else(|| SymbolicError::UnknownSort(s.to_string())))
            .collect::<Result<Vec<_>>>()?;
        self.predicate_index.insert(Arc::from(name), self.predicates.len());
        self.predicates.push(Predicate {
            name: Arc::from(name),
            arg_sorts,
            grounding: Arc::from(grounding),
            robot_state,
        });
        Ok(())
    }

    pub fn task(&mut self, id: &str, text: &str) -> Result<()> {
        let t = TaskSentence::new(id, text);
        if t.words.is_empty() {
            return Err(SymbolicError::InvalidVocabulary(format!("task `{id}` has no words")));
        }
        if self.tasks.iter().any(|x| x.id == id) {
            return Err(SymbolicError::InvalidVocabulary(format!("duplicate task `{id}`")));
        }
        self.tasks.push(t);
        Ok(())
    }

    pub fn build(self) -> Result<Vocabulary> {
        if !self.sorts.is_empty() && self.sorts.iter().filter(|s| s.parent.is_none()).count() != 1 {
            return Err(SymbolicError::InvalidVocabulary("sort graph must have exactly one root".into()));
        }
        let seps = [&self.separators.eos, &self.separators.ets, &self.separators.eoa];
        if seps[0] == seps[1] || seps[1] == seps[2] || seps[0] == seps[2] {
            return Err(SymbolicError::InvalidVocabulary("separators must be distinct".into()));
        }
        let mut tokens: Vec<String> = seps.iter().map(|s| s.to_string()).collect();
        let mut token_index: HashMap<String, TokenId> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as TokenId)).collect();
        let mut push = |tok: &str, tokens: &mut Vec<String>| -> Result<()> {
            if seps.iter().any(|s| s.as_str() == tok) {
                return Err(SymbolicError::InvalidVocabulary(format!("`{tok}` collides with a separator")));
            }
            if !token_index.contains_key(tok) {
                token_index.insert(tok.to_string(), tokens.len() as TokenId);
                tokens.push(tok.to_string());
            }
            Ok(())
        };
        for p in &self.predicates {
            if self.term_index.contains_key(&p.name) {
                return Err(SymbolicError::InvalidVocabulary(format!("`{}` is both a term and a predicate", p.name)));
            }
            push(&p.name, &mut tokens)?;
        }
        for t in &self.terms {
            push(&t.name, &mut tokens)?;
        }
        // Task words share the index space with the language tokens.
        for task in &self.tasks {
            for w in &task.words {
                push(w, &mut tokens)?;
            }
        }
        Ok(Vocabulary {
            sorts: self.sorts,
            sort_index: self.sort_index,
            terms: self.terms,
            term_index: self.term_index,
            predicates: self.predicates,
            predicate_index: self.predicate_index,
            tasks: self.tasks,
            separators: self.separators,
            tokens,
            token_index,
        })
    }
}

// ---------------------------------------------------------------------------
// Operations

/// Every predicate applied to every arity-matching tuple of terms, before
/// any type filtering.
pub fn herbrand_universe(vocab: &Vocabulary) -> BTreeSet<Atom> {
    let mut out = BTreeSet::new();
    let names: Vec<&Name> = vocab.terms().iter().map(|t| &t.name).collect();
    for p in vocab.predicates() {
        match p.arity() {
            1 => {
                for a in &names {
                    out.insert(Atom { predicate: p.name.clone(), args: vec![(*a).clone()], time: None });
                }
            }
            2 => {
                for a in &names {
                    for b in &names {
                        out.insert(Atom {
                            predicate: p.name.clone(),
                            args: vec![(*a).clone(), (*b).clone()],
                            time: None,
                        });
                    }
                }
            }
            _ => unreachable!("arity is validated at construction"),
        }
    }
    out
}

/// Closed-form size of [`herbrand_universe`]: `Σ_p |terms|^arity(p)`.
pub fn herbrand_size(vocab: &Vocabulary) -> u64 {
    let n = vocab.terms().len() as u64;
    vocab.predicates().iter().map(|p| n.pow(p.arity() as u32)).sum()
}

/// Keeps exactly the atoms that respect the sort hierarchy.
pub fn filter_by_types(atoms: &BTreeSet<Atom>, vocab: &Vocabulary) -> BTreeSet<Atom> {
    atoms.iter().filter(|a| vocab.check_atom(a).is_ok()).cloned().collect()
}

pub fn encode_state(task: &TaskSentence, state: &State, vocab: &Vocabulary) -> Result<TokenSeq> {
    encode_state_bounded(task, state, vocab, MAX_STATE_ATOMS)
}

/// [`encode_state`] with an explicit atom cap.
pub fn encode_state_bounded(
    task: &TaskSentence,
    state: &State,
    vocab: &Vocabulary,
    max_atoms: usize,
) -> Result<TokenSeq> {
    if state.len() > max_atoms {
        return Err(SymbolicError::StateTooLong { len: state.len(), max: max_atoms });
    }
    if task.words.is_empty() {
        return Err(SymbolicError::MalformedSequence { position: 0, reason: "empty task sentence".into() });
    }
    let lookup = |tok: &str| vocab.token_id(tok).ok_or_else(|| SymbolicError::UnknownToken(tok.to_string()));
    let mut tokens = Vec::with_capacity(task.words.len() + state.len() * 4 + 2);
    for w in &task.words {
        tokens.push(lookup(w)?);
    }
    tokens.push(vocab.ets());
    // Frame indices never reach the token stream; the state iterator is
    // already canonical.
    let state = state.timeless();
    for atom in &state {
        vocab.check_atom(atom)?;
        tokens.push(lookup(&atom.predicate)?);
        for a in &atom.args {
            tokens.push(lookup(a)?);
        }
        tokens.push(vocab.eoa());
    }
    tokens.push(vocab.eos());
    Ok(TokenSeq { tokens })
}

/// Atom-only encoding used as the decoder target: `(pred args.. EOA)* EOS`.
pub fn encode_goal_tokens(state: &State, vocab: &Vocabulary) -> Result<Vec<TokenId>> {
    let lookup = |tok: &str| vocab.token_id(tok).ok_or_else(|| SymbolicError::UnknownToken(tok.to_string()));
    let mut tokens = Vec::new();
    for atom in &state.timeless() {
        vocab.check_atom(atom)?;
        tokens.push(lookup(&atom.predicate)?);
        for a in &atom.args {
            tokens.push(lookup(a)?);
        }
        tokens.push(vocab.eoa());
    }
    tokens.push(vocab.eos());
    Ok(tokens)
}

/// Exact inverse of [`encode_state`] on its image. Sequences out of canonical
/// order, with duplicate atoms, ill-typed atoms or trailing tokens are
/// rejected.
pub fn decode_state(seq: &TokenSeq, vocab: &Vocabulary) -> Result<(TaskSentence, State)> {
    let toks = &seq.tokens;
    let malformed = |position: usize, reason: &str| SymbolicError::MalformedSequence {
        position,
        reason: reason.to_string(),
    };
    let name = |i: usize| -> Result<&str> {
        vocab.token(toks[i]).ok_or_else(|| malformed(i, "token id out of vocabulary"))
    };
    let mut i = 0;
    let mut words = Vec::new();
    loop {
        if i >= toks.len() {
            return Err(malformed(i, "missing end-of-task separator"));
        }
        let t = toks[i];
        if t == vocab.ets() {
            break;
        }
        if vocab.is_separator(t) {
            return Err(malformed(i, "separator inside task sentence"));
        }
        words.push(name(i)?.to_string());
        i += 1;
    }
    if words.is_empty() {
        return Err(malformed(i, "empty task sentence"));
    }
    let state = decode_atoms(toks, i + 1, vocab)?;
    Ok((vocab.task_from_words(words), state))
}

/// Inverse of [`encode_goal_tokens`], with the same strictness as [`decode_state`].
pub fn decode_goal_tokens(tokens: &[TokenId], vocab: &Vocabulary) -> Result<State> {
    decode_atoms(tokens, 0, vocab)
}

fn decode_atoms(toks: &[TokenId], mut i: usize, vocab: &Vocabulary) -> Result<State> {
    let malformed = |position: usize, reason: &str| SymbolicError::MalformedSequence {
        position,
        reason: reason.to_string(),
    };
    let name = |i: usize| -> Result<&str> {
        vocab.token(toks[i]).ok_or_else(|| malformed(i, "token id out of vocabulary"))
    };
    let mut state = State::new();
    let mut last: Option<Atom> = None;
    loop {
        if i >= toks.len() {
            return Err(malformed(i, "missing end-of-state separator"));
        }
        let t = toks[i];
        if t == vocab.eos() {
            i += 1;
            break;
        }
        if vocab.is_separator(t) {
            return Err(malformed(i, "expected a predicate"));
        }
        let start = i;
        let pname = name(i)?;
        let pred = vocab.predicate(pname).ok_or_else(|| malformed(i, "expected a predicate"))?;
        i += 1;
        let mut args = Vec::with_capacity(pred.arity());
        for _ in 0..pred.arity() {
            if i >= toks.len() || vocab.is_separator(toks[i]) {
                return Err(malformed(i, "too few arguments"));
            }
            let a = name(i)?;
            if vocab.term(a).is_none() {
                return Err(malformed(i, "expected a term"));
            }
            args.push(Arc::<str>::from(a));
            i += 1;
        }
        if i >= toks.len() || toks[i] != vocab.eoa() {
            return Err(malformed(i, "expected end-of-atom separator"));
        }
        i += 1;
        let atom = Atom { predicate: pred.name.clone(), args, time: None };
        vocab.check_atom(&atom).map_err(|e| malformed(start, &e.to_string()))?;
        if let Some(prev) = &last {
            if *prev >= atom {
                return Err(malformed(start, "atoms out of canonical order or duplicated"));
            }
        }
        last = Some(atom.clone());
        state.insert(atom);
    }
    if i != toks.len() {
        return Err(malformed(i, "trailing tokens after end-of-state"));
    }
    Ok(state)
}

pub fn tokens_to_text(seq: &[TokenId], vocab: &Vocabulary) -> String {
    seq.iter().map(|&t| vocab.token(t).unwrap_or("<?>")).collect::<Vec<_>>().join(" ")
}

pub fn text_to_tokens(text: &str, vocab: &Vocabulary) -> Result<Vec<TokenId>> {
    text.split_whitespace()
        .map(|w| vocab.token_id(w).ok_or_else(|| SymbolicError::UnknownToken(w.to_string())))
        .collect()
}
