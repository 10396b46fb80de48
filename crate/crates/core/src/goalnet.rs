//! Sequence-to-sequence next-goal predictor with atom-level additive
//! attention, trained with hand-written reverse-mode gradients and Adam.
//!
//! Encoder: embedding (20) → bidirectional LSTM (10 + 10) → LSTM (10) whose
//! final state initialises the decoder. The bidirectional outputs are averaged
//! per segment (task segment up to `<ets>`, then one segment per atom up to its
//! `<eoa>`); the decoder attends over those segment vectors.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::ops::Range;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pddl::PlanLibrary;
use crate::symbolic::{
    self, decode_goal_tokens, encode_goal_tokens, encode_state_bounded, Atom, Name, State, SymbolicError,
    TaskSentence, TermKind, TokenId, TokenSeq, Vocabulary,
};

pub const EMB: usize = 20;
pub const HID: usize = 10;
pub const SEG: usize = 2 * HID;
pub const ATT: usize = 16;
/// Query: previous output atom (mean embedding), task segment, decoder hidden.
pub const QUERY: usize = EMB + SEG + HID;
pub const DEFAULT_MAX_LEN: usize = 24;
/// Input cap used by the predictor; the accuracy curve runs to 19 atoms.
pub const MAX_INPUT_ATOMS: usize = 19;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GoalNetError {
    #[error("token id {0} is outside the vocabulary")]
    IndexOutOfVocab(TokenId),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("no beam entry decodes to a valid goal state")]
    NoValidProposal,
    #[error("the library yields no base training pairs")]
    InsufficientBase,
    #[error("vocabulary hash mismatch: checkpoint {expected}, vocabulary {found}")]
    VocabMismatch { expected: String, found: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Symbolic(#[from] SymbolicError),
}

pub type Result<T> = std::result::Result<T, GoalNetError>;

// ---------------------------------------------------------------------------
// Parameters

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    emb: Block,
    ef_w: Block,
    ef_b: Block,
    eb_w: Block,
    eb_b: Block,
    top_w: Block,
    top_b: Block,
    w1: Block,
    w2: Block,
    att_b: Block,
    v: Block,
    dec_w: Block,
    dec_b: Block,
    out_w: Block,
    out_b: Block,
    total: usize,
}

impl Layout {
    fn new(vocab: usize) -> Layout {
        let mut off = 0;
        let mut b = |rows: usize, cols: usize| {
            let blk = Block { offset: off, rows, cols };
            off += rows * cols;
            blk
        };
        let emb = b(vocab, EMB);
        let ef_w = b(4 * HID, EMB + HID);
        let ef_b = b(4 * HID, 1);
        let eb_w = b(4 * HID, EMB + HID);
        let eb_b = b(4 * HID, 1);
        let top_w = b(4 * HID, SEG + HID);
        let top_b = b(4 * HID, 1);
        let w1 = b(ATT, SEG);
        let w2 = b(ATT, QUERY);
        let att_b = b(ATT, 1);
        let v = b(ATT, 1);
        let dec_w = b(4 * HID, EMB + SEG + HID);
        let dec_b = b(4 * HID, 1);
        let out_w = b(vocab, HID + SEG);
        let out_b = b(vocab, 1);
        Layout { emb, ef_w, ef_b, eb_w, eb_b, top_w, top_b, w1, w2, att_b, v, dec_w, dec_b, out_w, out_b, total: off }
    }

    fn groups(&self) -> [(&'static str, Block); 15] {
        [
            ("embedding", self.emb),
            ("encoder.forward.w", self.ef_w),
            ("encoder.forward.b", self.ef_b),
            ("encoder.backward.w", self.eb_w),
            ("encoder.backward.b", self.eb_b),
            ("encoder.top.w", self.top_w),
            ("encoder.top.b", self.top_b),
            ("attention.w1", self.w1),
            ("attention.w2", self.w2),
            ("attention.b", self.att_b),
            ("attention.v", self.v),
            ("decoder.w", self.dec_w),
            ("decoder.b", self.dec_b),
            ("output.w", self.out_w),
            ("output.b", self.out_b),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoalNetParams {
    pub vocab_size: usize,
    pub vocab_hash: String,
    pub eos: TokenId,
    pub ets: TokenId,
    pub eoa: TokenId,
    /// When false, the context is the mean of the segment vectors.
    pub attention: bool,
    pub weights: Vec<f64>,
}

impl GoalNetParams {
    pub fn init(vocab: &Vocabulary, attention: bool, seed: u64) -> GoalNetParams {
        let layout = Layout::new(vocab.size());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..layout.total).map(|_| rng.random_range(-0.08..0.08)).collect();
        GoalNetParams {
            vocab_size: vocab.size(),
            vocab_hash: vocab.hash(),
            eos: vocab.eos(),
            ets: vocab.ets(),
            eoa: vocab.eoa(),
            attention,
            weights,
        }
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.weights.len()]
    }

    fn layout(&self) -> Layout {
        Layout::new(self.vocab_size)
    }

    /// Named parameter groups in storage order.
    pub fn groups(&self) -> Vec<(&'static str, Block)> {
        self.layout().groups().to_vec()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        let found = vocab.hash();
        if found != self.vocab_hash || vocab.size() != self.vocab_size {
            return Err(GoalNetError::VocabMismatch { expected: self.vocab_hash.clone(), found });
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            Some(&t) => Err(GoalNetError::IndexOutOfVocab(t)),
            None => Ok(()),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    vocab_hash: String,
    vocab_size: usize,
    separators: [TokenId; 3],
    attention: bool,
    groups: Vec<CheckpointGroup>,
    weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointGroup {
    name: String,
    rows: usize,
    cols: usize,
}

impl GoalNetParams {
    pub fn to_json(&self) -> String {
        let file = CheckpointFile {
            version: CHECKPOINT_VERSION,
            vocab_hash: self.vocab_hash.clone(),
            vocab_size: self.vocab_size,
            separators: [self.eos, self.ets, self.eoa],
            attention: self.attention,
            groups: self
                .groups()
                .into_iter()
                .map(|(n, b)| CheckpointGroup { name: n.to_string(), rows: b.rows, cols: b.cols })
                .collect(),
            weights: self.weights.clone(),
        };
        serde_json::to_string(&file).expect("checkpoint serialises")
    }

    pub fn from_json(text: &str, vocab: &Vocabulary) -> Result<GoalNetParams> {
        let file: CheckpointFile = serde_json::from_str(text).map_err(|e| GoalNetError::Checkpoint(e.to_string()))?;
        if file.version != CHECKPOINT_VERSION {
            return Err(GoalNetError::Checkpoint(format!("unsupported version {}", file.version)));
        }
        let found = vocab.hash();
        if file.vocab_hash != found {
            return Err(GoalNetError::VocabMismatch { expected: file.vocab_hash, found });
        }
        let layout = Layout::new(file.vocab_size);
        let shapes_ok = file.groups.len() == 15
            && layout.groups().iter().zip(&file.groups).all(|((n, b), g)| *n == g.name && b.rows == g.rows && b.cols == g.cols);
        if !shapes_ok || file.weights.len() != layout.total || file.vocab_size != vocab.size() {
            return Err(GoalNetError::Checkpoint("parameter shapes do not match".into()));
        }
        let [eos, ets, eoa] = file.separators;
        let params = GoalNetParams {
            vocab_size: file.vocab_size,
            vocab_hash: file.vocab_hash,
            eos,
            ets,
            eoa,
            attention: file.attention,
            weights: file.weights,
        };
        if !params.is_finite() {
            return Err(GoalNetError::Checkpoint("non-finite weights".into()));
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_json()).map_err(|e| GoalNetError::Checkpoint(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<GoalNetParams> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| GoalNetError::Checkpoint(e.to_string()))?;
        Self::from_json(&text, vocab)
    }
}

// ---------------------------------------------------------------------------
// Dense helpers. Matrices are row-major.

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// y = W x (+ b)
#[inline]
fn affine(w: &[f64], b: Option<&[f64]>, x: &[f64], y: &mut [f64]) {
    let cols = x.len();
    for (r, out) in y.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = b.map_or(0.0, |b| b[r]);
        for (a, bb) in row.iter().zip(x) {
            acc += a * bb;
        }
        *out = acc;
    }
}

/// dx += Wᵀ dy
#[inline]
fn back_input(w: &[f64], dy: &[f64], dx: &mut [f64]) {
    let cols = dx.len();
    for (r, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (d, a) in dx.iter_mut().zip(row) {
            *d += a * g;
        }
    }
}

/// dW += dy xᵀ
#[inline]
fn back_weight(dw: &mut [f64], dy: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &mut dw[r * cols..(r + 1) * cols];
        for (d, a) in row.iter_mut().zip(x) {
            *d += g * a;
        }
    }
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    log_softmax(z).into_iter().map(f64::exp).collect()
}

// ---------------------------------------------------------------------------
// LSTM cell (gate order i, f, g, o)

struct Cell<'a> {
    w: &'a [f64],
    b: &'a [f64],
}

impl Cell<'_> {
    /// Writes gates (post-activation), new cell and hidden state.
    fn step(&self, xh: &[f64], c_prev: &[f64], gates: &mut [f64], c: &mut [f64], h: &mut [f64]) {
        affine(self.w, Some(self.b), xh, gates);
        for k in 0..HID {
            gates[k] = sigmoid(gates[k]);
            gates[HID + k] = sigmoid(gates[HID + k]);
            gates[2 * HID + k] = gates[2 * HID + k].tanh();
            gates[3 * HID + k] = sigmoid(gates[3 * HID + k]);
            c[k] = gates[HID + k] * c_prev[k] + gates[k] * gates[2 * HID + k];
            h[k] = gates[3 * HID + k] * c[k].tanh();
        }
    }
}

/// Backward through one cell step. Accumulates into `dw`/`db`, writes `dxh`
/// (input then previous hidden) and returns the gradient for the previous cell.
#[allow(clippy::too_many_arguments)]
fn cell_back(
    w: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    xh: &[f64],
    gates: &[f64],
    c_prev: &[f64],
    c: &[f64],
    dh: &[f64],
    dc: &[f64],
    dxh: &mut [f64],
) -> [f64; HID] {
    let mut dz = [0.0; 4 * HID];
    let mut dc_prev = [0.0; HID];
    for k in 0..HID {
        let (i, f, g, o) = (gates[k], gates[HID + k], gates[2 * HID + k], gates[3 * HID + k]);
        let tc = c[k].tanh();
        let d_o = dh[k] * tc;
        let dct = dc[k] + dh[k] * o * (1.0 - tc * tc);
        dz[k] = dct * g * i * (1.0 - i);
        dz[HID + k] = dct * c_prev[k] * f * (1.0 - f);
        dz[2 * HID + k] = dct * i * (1.0 - g * g);
        dz[3 * HID + k] = d_o * o * (1.0 - o);
        dc_prev[k] = dct * f;
    }
    back_weight(dw, &dz, xh);
    for (d, z) in db.iter_mut().zip(&dz) {
        *d += z;
    }
    dxh.iter_mut().for_each(|v| *v = 0.0);
    back_input(w, &dz, dxh);
    dc_prev
}

/// Stored activations of an unrolled cell.
struct Trace {
    width: usize,
    xh: Vec<f64>,
    gates: Vec<f64>,
    c: Vec<f64>,
    h: Vec<f64>,
}

impl Trace {
    fn new(steps: usize, input: usize) -> Trace {
        Trace {
            width: input + HID,
            xh: vec![0.0; steps * (input + HID)],
            gates: vec![0.0; steps * 4 * HID],
            c: vec![0.0; steps * HID],
            h: vec![0.0; steps * HID],
        }
    }

    fn xh(&self, t: usize) -> &[f64] {
        &self.xh[t * self.width..(t + 1) * self.width]
    }

    fn gates(&self, t: usize) -> &[f64] {
        &self.gates[t * 4 * HID..(t + 1) * 4 * HID]
    }

    fn c(&self, t: usize) -> &[f64] {
        &self.c[t * HID..(t + 1) * HID]
    }

    fn h(&self, t: usize) -> &[f64] {
        &self.h[t * HID..(t + 1) * HID]
    }

    /// Runs step `t` with `x` as input and the given previous state.
    fn run(&mut self, cell: &Cell, t: usize, x: &[f64], h_prev: &[f64], c_prev: &[f64]) {
        let w = self.width;
        let input = w - HID;
        let xh = &mut self.xh[t * w..(t + 1) * w];
        xh[..input].copy_from_slice(x);
        xh[input..].copy_from_slice(h_prev);
        let gates = &mut self.gates[t * 4 * HID..(t + 1) * 4 * HID];
        let c = &mut self.c[t * HID..(t + 1) * HID];
        let h = &mut self.h[t * HID..(t + 1) * HID];
        cell.step(&self.xh[t * w..(t + 1) * w], c_prev, gates, c, h);
    }
}

// ---------------------------------------------------------------------------
// Encoder

/// Per-token embeddings and the segment partition of an input sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedState {
    pub vectors: Vec<[f64; EMB]>,
    /// Token ranges: the task segment (through `<ets>`) then one per atom
    /// (through its `<eoa>`). The trailing `<eos>` belongs to none.
    pub segments: Vec<Range<usize>>,
}

/// Splits a token sequence at `<ets>` and `<eoa>`.
pub fn segment_bounds(tokens: &[TokenId], ets: TokenId, eoa: TokenId) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, &t) in tokens.iter().enumerate() {
        if t == ets || t == eoa {
            out.push(start..i + 1);
            start = i + 1;
        }
    }
    out
}

pub fn embed(seq: &TokenSeq, params: &GoalNetParams) -> Result<EncodedState> {
    params.check_tokens(&seq.tokens)?;
    let l = params.layout();
    let emb = &params.weights[l.emb.range()];
    let vectors = seq
        .tokens
        .iter()
        .map(|&t| {
            let mut v = [0.0; EMB];
            v.copy_from_slice(&emb[t as usize * EMB..(t as usize + 1) * EMB]);
            v
        })
        .collect();
    Ok(EncodedState { vectors, segments: segment_bounds(&seq.tokens, params.ets, params.eoa) })
}

struct Encoder {
    tokens: Vec<TokenId>,
    fwd: Trace,
    bwd: Trace,
    top: Trace,
    /// Bidirectional outputs, T × SEG.
    out: Vec<f64>,
    segments: Vec<Range<usize>>,
    /// Segment means, K × SEG.
    segs: Vec<f64>,
    /// W1 seg_k + b, K × ATT.
    proj: Vec<f64>,
}

impl Encoder {
    fn k(&self) -> usize {
        self.segments.len()
    }

    fn seg(&self, k: usize) -> &[f64] {
        &self.segs[k * SEG..(k + 1) * SEG]
    }

    fn summary(&self) -> (Vec<f64>, Vec<f64>) {
        let t = self.tokens.len() - 1;
        (self.top.h(t).to_vec(), self.top.c(t).to_vec())
    }
}

fn encode(p: &GoalNetParams, l: &Layout, tokens: &[TokenId]) -> Encoder {
    let w = &p.weights;
    let n = tokens.len();
    let emb = |t: TokenId| &w[l.emb.offset + t as usize * EMB..l.emb.offset + (t as usize + 1) * EMB];
    let zero = [0.0; HID];
    let fcell = Cell { w: &w[l.ef_w.range()], b: &w[l.ef_b.range()] };
    let bcell = Cell { w: &w[l.eb_w.range()], b: &w[l.eb_b.range()] };
    let tcell = Cell { w: &w[l.top_w.range()], b: &w[l.top_b.range()] };
    let mut fwd = Trace::new(n, EMB);
    let mut bwd = Trace::new(n, EMB);
    let mut top = Trace::new(n, SEG);
    for (t, &tok) in tokens.iter().enumerate() {
        let (hp, cp) = if t == 0 { (zero.to_vec(), zero.to_vec()) } else { (fwd.h(t - 1).to_vec(), fwd.c(t - 1).to_vec()) };
        fwd.run(&fcell, t, emb(tok), &hp, &cp);
    }
    for t in (0..n).rev() {
        let (hp, cp) =
            if t == n - 1 { (zero.to_vec(), zero.to_vec()) } else { (bwd.h(t + 1).to_vec(), bwd.c(t + 1).to_vec()) };
        bwd.run(&bcell, t, emb(tokens[t]), &hp, &cp);
    }
    let mut out = vec![0.0; n * SEG];
    for t in 0..n {
        out[t * SEG..t * SEG + HID].copy_from_slice(fwd.h(t));
        out[t * SEG + HID..(t + 1) * SEG].copy_from_slice(bwd.h(t));
    }
    for t in 0..n {
        let (hp, cp) = if t == 0 { (zero.to_vec(), zero.to_vec()) } else { (top.h(t - 1).to_vec(), top.c(t - 1).to_vec()) };
        top.run(&tcell, t, &out[t * SEG..(t + 1) * SEG], &hp, &cp);
    }
    let segments = segment_bounds(tokens, p.ets, p.eoa);
    let k = segments.len();
    let mut segs = vec![0.0; k * SEG];
    for (s, r) in segments.iter().enumerate() {
        let inv = 1.0 / r.len() as f64;
        for t in r.clone() {
            for d in 0..SEG {
                segs[s * SEG + d] += out[t * SEG + d] * inv;
            }
        }
    }
    let mut proj = vec![0.0; k * ATT];
    if p.attention {
        for s in 0..k {
            affine(&w[l.w1.range()], Some(&w[l.att_b.range()]), &segs[s * SEG..(s + 1) * SEG], &mut proj[s * ATT..(s + 1) * ATT]);
        }
    }
    Encoder { tokens: tokens.to_vec(), fwd, bwd, top, out, segments, segs, proj }
}

// ---------------------------------------------------------------------------
// Attention

/// Attention distribution over segments and its context vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub probs: Vec<f64>,
}

/// Additive scoring over precomputed segment projections. Returns the
/// tanh activations (K × ATT) and the weights.
fn attention_scores(p: &GoalNetParams, l: &Layout, enc: &Encoder, q: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let k = enc.k();
    if !p.attention {
        return (Vec::new(), vec![1.0 / k as f64; k]);
    }
    let w = &p.weights;
    let mut wq = [0.0; ATT];
    affine(&w[l.w2.range()], None, q, &mut wq);
    let v = &w[l.v.range()];
    let mut u = vec![0.0; k * ATT];
    let mut scores = vec![0.0; k];
    for s in 0..k {
        let mut e = 0.0;
        for a in 0..ATT {
            let x = (enc.proj[s * ATT + a] + wq[a]).tanh();
            u[s * ATT + a] = x;
            e += v[a] * x;
        }
        scores[s] = e;
    }
    (u, softmax(&scores))
}

fn context(enc: &Encoder, alpha: &[f64]) -> [f64; SEG] {
    let mut ctx = [0.0; SEG];
    for (s, a) in alpha.iter().enumerate() {
        for (c, x) in ctx.iter_mut().zip(enc.seg(s)) {
            *c += a * x;
        }
    }
    ctx
}

/// Scores segment vectors against a query with explicit weights; standalone
/// form of the decoder's attention step.
pub fn attend(segments: &[Vec<f64>], query: &[f64], params: &GoalNetParams) -> (AttentionWeights, Vec<f64>) {
    assert!(!segments.is_empty(), "attention needs at least one segment");
    let l = params.layout();
    let k = segments.len();
    let segs: Vec<f64> = segments.iter().flat_map(|s| s.iter().copied()).collect();
    let mut proj = vec![0.0; k * ATT];
    if params.attention {
        for s in 0..k {
            affine(
                &params.weights[l.w1.range()],
                Some(&params.weights[l.att_b.range()]),
                &segs[s * SEG..(s + 1) * SEG],
                &mut proj[s * ATT..(s + 1) * ATT],
            );
        }
    }
    let enc = Encoder {
        tokens: Vec::new(),
        fwd: Trace::new(0, EMB),
        bwd: Trace::new(0, EMB),
        top: Trace::new(0, SEG),
        out: Vec::new(),
        segments: (0..k).map(|i| i..i + 1).collect(),
        segs,
        proj,
    };
    let (_, alpha) = attention_scores(params, &l, &enc, query);
    let ctx = context(&enc, &alpha).to_vec();
    (AttentionWeights { probs: alpha }, ctx)
}

// ---------------------------------------------------------------------------
// Decoder

/// Tracks the tokens of the most recently completed output atom.
#[derive(Debug, Clone, Default)]
struct AtomTracker {
    current: Vec<TokenId>,
    last: Vec<TokenId>,
}

impl AtomTracker {
    fn push(&mut self, tok: TokenId, p: &GoalNetParams) {
        if tok == p.eoa {
            if !self.current.is_empty() {
                self.last = std::mem::take(&mut self.current);
            }
        } else if tok != p.eos && tok != p.ets {
            self.current.push(tok);
        }
    }

    fn mean_embedding(&self, p: &GoalNetParams, l: &Layout) -> [f64; EMB] {
        let mut out = [0.0; EMB];
        if self.last.is_empty() {
            return out;
        }
        let inv = 1.0 / self.last.len() as f64;
        for &t in &self.last {
            let row = &p.weights[l.emb.offset + t as usize * EMB..][..EMB];
            for (o, x) in out.iter_mut().zip(row) {
                *o += x * inv;
            }
        }
        out
    }
}

fn build_query(prev_atom: &[f64; EMB], enc: &Encoder, h: &[f64]) -> [f64; QUERY] {
    let mut q = [0.0; QUERY];
    q[..EMB].copy_from_slice(prev_atom);
    q[EMB..EMB + SEG].copy_from_slice(enc.seg(0));
    q[EMB + SEG..].copy_from_slice(h);
    q
}

/// Decoder state carried between inference steps.
#[derive(Debug, Clone)]
struct DecState {
    h: Vec<f64>,
    c: Vec<f64>,
    prev: TokenId,
    atoms: AtomTracker,
}

/// One inference step: log-probabilities over the vocabulary and the next state.
fn dec_step(p: &GoalNetParams, l: &Layout, enc: &Encoder, st: &DecState) -> (Vec<f64>, DecState, Vec<f64>) {
    let w = &p.weights;
    let q = build_query(&st.atoms.mean_embedding(p, l), enc, &st.h);
    let (_, alpha) = attention_scores(p, l, enc, &q);
    let ctx = context(enc, &alpha);
    let mut xh = [0.0; EMB + SEG + HID];
    xh[..EMB].copy_from_slice(&w[l.emb.offset + st.prev as usize * EMB..][..EMB]);
    xh[EMB..EMB + SEG].copy_from_slice(&ctx);
    xh[EMB + SEG..].copy_from_slice(&st.h);
    let cell = Cell { w: &w[l.dec_w.range()], b: &w[l.dec_b.range()] };
    let mut gates = [0.0; 4 * HID];
    let mut c = vec![0.0; HID];
    let mut h = vec![0.0; HID];
    cell.step(&xh, &st.c, &mut gates, &mut c, &mut h);
    let mut hc = [0.0; HID + SEG];
    hc[..HID].copy_from_slice(&h);
    hc[HID..].copy_from_slice(&ctx);
    let mut logits = vec![0.0; p.vocab_size];
    affine(&w[l.out_w.range()], Some(&w[l.out_b.range()]), &hc, &mut logits);
    let next = DecState { h, c, prev: st.prev, atoms: st.atoms.clone() };
    (log_softmax(&logits), next, alpha)
}

fn start_state(p: &GoalNetParams, enc: &Encoder) -> DecState {
    let (h, c) = enc.summary();
    DecState { h, c, prev: p.ets, atoms: AtomTracker::default() }
}

fn advance(mut st: DecState, tok: TokenId, p: &GoalNetParams) -> DecState {
    st.prev = tok;
    st.atoms.push(tok, p);
    st
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<TokenId>,
    pub step_log_probs: Vec<f64>,
    pub log_prob: f64,
    /// Hit `max_len` without emitting `<eos>`.
    pub truncated: bool,
}

fn input_tokens(p: &GoalNetParams, seq: &TokenSeq) -> Result<()> {
    p.check_tokens(&seq.tokens)?;
    if seq.tokens.is_empty() {
        return Err(SymbolicError::MalformedSequence { position: 0, reason: "empty input".into() }.into());
    }
    Ok(())
}

/// Greedy autoregressive decoding from `<ets>` until `<eos>` or `max_len`.
pub fn decode_greedy(seq: &TokenSeq, p: &GoalNetParams, max_len: usize) -> Result<Decoded> {
    input_tokens(p, seq)?;
    let l = p.layout();
    let enc = encode(p, &l, &seq.tokens);
    let mut st = start_state(p, &enc);
    let mut out = Decoded { tokens: Vec::new(), step_log_probs: Vec::new(), log_prob: 0.0, truncated: true };
    for _ in 0..max_len {
        let (lp, next, _) = dec_step(p, &l, &enc, &st);
        let (tok, &best) = lp
            .iter()
            .enumerate()
            .fold((0, &f64::NEG_INFINITY), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
        let tok = tok as TokenId;
        out.tokens.push(tok);
        out.step_log_probs.push(best);
        out.log_prob += best;
        st = advance(next, tok, p);
        if tok == p.eos {
            out.truncated = false;
            break;
        }
    }
    Ok(out)
}

/// Beam search over whole sequences. Finished hypotheses are returned in
/// descending log-probability; hypotheses cut at `max_len` are flagged.
pub fn decode_beam(seq: &TokenSeq, p: &GoalNetParams, width: usize, max_len: usize) -> Result<Vec<Decoded>> {
    input_tokens(p, seq)?;
    let width = width.max(1);
    let l = p.layout();
    let enc = encode(p, &l, &seq.tokens);
    struct Hyp {
        dec: Decoded,
        st: DecState,
    }
    let mut live = vec![Hyp {
        dec: Decoded { tokens: Vec::new(), step_log_probs: Vec::new(), log_prob: 0.0, truncated: false },
        st: start_state(p, &enc),
    }];
    let mut done: Vec<Decoded> = Vec::new();
    for step in 0..max_len {
        let mut cands: Vec<(f64, usize, TokenId, f64)> = Vec::new();
        let mut nexts = Vec::with_capacity(live.len());
        for (hi, h) in live.iter().enumerate() {
            let (lp, next, _) = dec_step(p, &l, &enc, &h.st);
            let mut order: Vec<usize> = (0..lp.len()).collect();
            order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
            for &t in order.iter().take(width) {
                cands.push((h.dec.log_prob + lp[t], hi, t as TokenId, lp[t]));
            }
            nexts.push(next);
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(width);
        let mut new_live = Vec::new();
        for (total, hi, tok, lp) in cands {
            let mut dec = live[hi].dec.clone();
            dec.tokens.push(tok);
            dec.step_log_probs.push(lp);
            dec.log_prob = total;
            if tok == p.eos {
                done.push(dec);
            } else {
                let st = advance(nexts[hi].clone(), tok, p);
                new_live.push(Hyp { dec, st });
            }
        }
        live = new_live;
        if live.is_empty() {
            break;
        }
        if step + 1 == max_len {
            for h in live.drain(..) {
                let mut dec = h.dec;
                dec.truncated = true;
                done.push(dec);
            }
        }
    }
    done.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob).then(a.tokens.cmp(&b.tokens)));
    Ok(done)
}

/// Teacher-forced log-probability of `target` (Eq. 2 sum), via the
/// inference path.
pub fn score_sequence(seq: &TokenSeq, target: &[TokenId], p: &GoalNetParams) -> Result<Vec<f64>> {
    input_tokens(p, seq)?;
    p.check_tokens(target)?;
    let l = p.layout();
    let enc = encode(p, &l, &seq.tokens);
    let mut st = start_state(p, &enc);
    let mut out = Vec::with_capacity(target.len());
    for &t in target {
        let (lp, next, _) = dec_step(p, &l, &enc, &st);
        out.push(lp[t as usize]);
        st = advance(next, t, p);
    }
    Ok(out)
}

/// Attention weights at each teacher-forced step.
pub fn attention_trace(seq: &TokenSeq, target: &[TokenId], p: &GoalNetParams) -> Result<Vec<AttentionWeights>> {
    input_tokens(p, seq)?;
    let l = p.layout();
    let enc = encode(p, &l, &seq.tokens);
    let mut st = start_state(p, &enc);
    let mut out = Vec::new();
    for &t in target {
        let (_, next, alpha) = dec_step(p, &l, &enc, &st);
        out.push(AttentionWeights { probs: alpha });
        st = advance(next, t, p);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoalProposal {
    pub goal: State,
    pub log_prob: f64,
    pub rank: usize,
}

/// Top-k distinct, well-formed, nonempty goal states from a beam of width
/// `max(2k, 8)`.
pub fn infer_topk(
    task: &TaskSentence,
    s: &State,
    p: &GoalNetParams,
    vocab: &Vocabulary,
    k: usize,
) -> Result<Vec<GoalProposal>> {
    let seq = encode_state_bounded(task, s, vocab, MAX_INPUT_ATOMS)?;
    let beams = decode_beam(&seq, p, (2 * k).max(8), DEFAULT_MAX_LEN)?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for d in beams {
        if d.truncated {
            continue;
        }
        let Ok(goal) = decode_goal_tokens(&d.tokens, vocab) else { continue };
        if goal.is_empty() || !seen.insert(goal.clone()) {
            continue;
        }
        out.push(GoalProposal { goal, log_prob: d.log_prob, rank: out.len() + 1 });
        if out.len() == k {
            break;
        }
    }
    if out.is_empty() {
        return Err(GoalNetError::NoValidProposal);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Loss and gradient

/// Gradient corruptions used to confirm the gradient check has teeth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradMutation {
    #[default]
    None,
    /// Drops the normalisation term of the softmax Jacobian in attention.
    AttentionSoftmax,
}

struct StepTrace {
    prev: TokenId,
    prev_atom: Vec<TokenId>,
    q: [f64; QUERY],
    u: Vec<f64>,
    alpha: Vec<f64>,
    xh: [f64; EMB + SEG + HID],
    gates: [f64; 4 * HID],
    c_prev: [f64; HID],
    c: [f64; HID],
    hc: [f64; HID + SEG],
    probs: Vec<f64>,
}

/// Mean token cross-entropy of `target` given `input`; when `grad` is given
/// the gradient is added into it.
pub fn loss_and_grad(
    p: &GoalNetParams,
    input: &[TokenId],
    target: &[TokenId],
    grad: Option<&mut [f64]>,
    mutation: GradMutation,
) -> f64 {
    let l = p.layout();
    let w = &p.weights;
    let enc = encode(p, &l, input);
    let (mut h, mut c) = enc.summary();
    let mut prev = p.ets;
    let mut atoms = AtomTracker::default();
    let dcell = Cell { w: &w[l.dec_w.range()], b: &w[l.dec_b.range()] };
    let mut steps = Vec::with_capacity(target.len());
    let mut loss = 0.0;
    let n = target.len() as f64;
    for &y in target {
        let q = build_query(&atoms.mean_embedding(p, &l), &enc, &h);
        let (u, alpha) = attention_scores(p, &l, &enc, &q);
        let ctx = context(&enc, &alpha);
        let mut xh = [0.0; EMB + SEG + HID];
        xh[..EMB].copy_from_slice(&w[l.emb.offset + prev as usize * EMB..][..EMB]);
        xh[EMB..EMB + SEG].copy_from_slice(&ctx);
        xh[EMB + SEG..].copy_from_slice(&h);
        let mut gates = [0.0; 4 * HID];
        let mut c_new = [0.0; HID];
        let mut h_new = [0.0; HID];
        dcell.step(&xh, &c, &mut gates, &mut c_new, &mut h_new);
        let mut hc = [0.0; HID + SEG];
        hc[..HID].copy_from_slice(&h_new);
        hc[HID..].copy_from_slice(&ctx);
        let mut logits = vec![0.0; p.vocab_size];
        affine(&w[l.out_w.range()], Some(&w[l.out_b.range()]), &hc, &mut logits);
        let lp = log_softmax(&logits);
        loss -= lp[y as usize] / n;
        let mut c_prev = [0.0; HID];
        c_prev.copy_from_slice(&c);
        steps.push(StepTrace {
            prev,
            prev_atom: atoms.last.clone(),
            q,
            u,
            alpha,
            xh,
            gates,
            c_prev,
            c: c_new,
            hc,
            probs: lp.iter().map(|v| v.exp()).collect(),
        });
        h = h_new.to_vec();
        c = c_new.to_vec();
        prev = y;
        atoms.push(y, p);
    }
    let Some(g) = grad else { return loss };
    backward(p, &l, &enc, target, &steps, g, mutation);
    loss
}

#[allow(clippy::too_many_arguments)]
fn backward(
    p: &GoalNetParams,
    l: &Layout,
    enc: &Encoder,
    target: &[TokenId],
    steps: &[StepTrace],
    g: &mut [f64],
    mutation: GradMutation,
) {
    let w = &p.weights;
    let n = target.len() as f64;
    let k = enc.k();
    let mut dsegs = vec![0.0; k * SEG];
    let mut dproj = vec![0.0; k * ATT];
    let mut dh = [0.0; HID];
    let mut dc = [0.0; HID];
    let mut dxh = [0.0; EMB + SEG + HID];

    for (j, st) in steps.iter().enumerate().rev() {
        // output layer
        let mut dlogits = st.probs.clone();
        dlogits[target[j] as usize] -= 1.0;
        dlogits.iter_mut().for_each(|v| *v /= n);
        back_weight(&mut g[l.out_w.range()], &dlogits, &st.hc);
        for (d, v) in g[l.out_b.range()].iter_mut().zip(&dlogits) {
            *d += v;
        }
        let mut dhc = [0.0; HID + SEG];
        back_input(&w[l.out_w.range()], &dlogits, &mut dhc);
        let mut dh_step = dh;
        for k2 in 0..HID {
            dh_step[k2] += dhc[k2];
        }
        let mut dctx = [0.0; SEG];
        dctx.copy_from_slice(&dhc[HID..]);

        // decoder cell
        let (dw, rest) = g.split_at_mut(l.dec_b.offset);
        let dw = &mut dw[l.dec_w.range()];
        let db = &mut rest[..l.dec_b.len()];
        let dc_prev = cell_back(&w[l.dec_w.range()], dw, db, &st.xh, &st.gates, &st.c_prev, &st.c, &dh_step, &dc, &mut dxh);
        let erow = l.emb.offset + st.prev as usize * EMB;
        for (d, v) in g[erow..erow + EMB].iter_mut().zip(&dxh[..EMB]) {
            *d += v;
        }
        for (d, v) in dctx.iter_mut().zip(&dxh[EMB..EMB + SEG]) {
            *d += v;
        }
        let mut dh_prev = [0.0; HID];
        dh_prev.copy_from_slice(&dxh[EMB + SEG..]);

        // context = Σ α_k seg_k
        let mut dalpha = vec![0.0; k];
        for s in 0..k {
            let seg = enc.seg(s);
            let mut acc = 0.0;
            for d in 0..SEG {
                dsegs[s * SEG + d] += st.alpha[s] * dctx[d];
                acc += dctx[d] * seg[d];
            }
            dalpha[s] = acc;
        }

        if p.attention {
            let dot: f64 = st.alpha.iter().zip(&dalpha).map(|(a, b)| a * b).sum();
            let v = &w[l.v.range()];
            let mut dq = [0.0; QUERY];
            let mut dwq = [0.0; ATT];
            for s in 0..k {
                let de = match mutation {
                    GradMutation::None => st.alpha[s] * (dalpha[s] - dot),
                    GradMutation::AttentionSoftmax => st.alpha[s] * dalpha[s],
                };
                for a in 0..ATT {
                    let u = st.u[s * ATT + a];
                    g[l.v.offset + a] += de * u;
                    let dpre = de * v[a] * (1.0 - u * u);
                    dproj[s * ATT + a] += dpre;
                    dwq[a] += dpre;
                }
            }
            back_weight(&mut g[l.w2.range()], &dwq, &st.q);
            back_input(&w[l.w2.range()], &dwq, &mut dq);
            if !st.prev_atom.is_empty() {
                let inv = 1.0 / st.prev_atom.len() as f64;
                for &t in &st.prev_atom {
                    let row = l.emb.offset + t as usize * EMB;
                    for d in 0..EMB {
                        g[row + d] += dq[d] * inv;
                    }
                }
            }
            for d in 0..SEG {
                dsegs[d] += dq[EMB + d];
            }
            for k2 in 0..HID {
                dh_prev[k2] += dq[EMB + SEG + k2];
            }
        }
        dh = dh_prev;
        dc = dc_prev;
    }

    // projections W1 seg_k + b
    if p.attention {
        for s in 0..k {
            let dp = &dproj[s * ATT..(s + 1) * ATT];
            back_weight(&mut g[l.w1.range()], dp, enc.seg(s));
            for (d, v) in g[l.att_b.range()].iter_mut().zip(dp) {
                *d += v;
            }
            back_input(&w[l.w1.range()], dp, &mut dsegs[s * SEG..(s + 1) * SEG]);
        }
    }

    // segment means → bidirectional outputs
    let nt = enc.tokens.len();
    let mut dout = vec![0.0; nt * SEG];
    for (s, r) in enc.segments.iter().enumerate() {
        let inv = 1.0 / r.len() as f64;
        for t in r.clone() {
            for d in 0..SEG {
                dout[t * SEG + d] += dsegs[s * SEG + d] * inv;
            }
        }
    }

    // top encoder, from the decoder's initial state gradient
    let zero = [0.0; HID];
    let mut dxh_top = [0.0; SEG + HID];
    for t in (0..nt).rev() {
        let c_prev = if t == 0 { &zero[..] } else { enc.top.c(t - 1) };
        let (dw, rest) = g.split_at_mut(l.top_b.offset);
        let dc_prev = cell_back(
            &w[l.top_w.range()],
            &mut dw[l.top_w.range()],
            &mut rest[..l.top_b.len()],
            enc.top.xh(t),
            enc.top.gates(t),
            c_prev,
            enc.top.c(t),
            &dh,
            &dc,
            &mut dxh_top,
        );
        for d in 0..SEG {
            dout[t * SEG + d] += dxh_top[d];
        }
        dh.copy_from_slice(&dxh_top[SEG..]);
        dc = dc_prev;
    }

    // bidirectional layer
    let mut dxh_e = [0.0; EMB + HID];
    let mut dh = [0.0; HID];
    let mut dc = [0.0; HID];
    for t in (0..nt).rev() {
        let mut dht = dh;
        for k2 in 0..HID {
            dht[k2] += dout[t * SEG + k2];
        }
        let c_prev = if t == 0 { &zero[..] } else { enc.fwd.c(t - 1) };
        let (dw, rest) = g.split_at_mut(l.ef_b.offset);
        let dc_prev = cell_back(
            &w[l.ef_w.range()],
            &mut dw[l.ef_w.range()],
            &mut rest[..l.ef_b.len()],
            enc.fwd.xh(t),
            enc.fwd.gates(t),
            c_prev,
            enc.fwd.c(t),
            &dht,
            &dc,
            &mut dxh_e,
        );
        let row = l.emb.offset + enc.tokens[t] as usize * EMB;
        for d in 0..EMB {
            g[row + d] += dxh_e[d];
        }
        dh.copy_from_slice(&dxh_e[EMB..]);
        dc = dc_prev;
    }
    let mut dh = [0.0; HID];
    let mut dc = [0.0; HID];
    for t in 0..nt {
        let mut dht = dh;
        for k2 in 0..HID {
            dht[k2] += dout[t * SEG + HID + k2];
        }
        let c_prev = if t == nt - 1 { &zero[..] } else { enc.bwd.c(t + 1) };
        let (dw, rest) = g.split_at_mut(l.eb_b.offset);
        let dc_prev = cell_back(
            &w[l.eb_w.range()],
            &mut dw[l.eb_w.range()],
            &mut rest[..l.eb_b.len()],
            enc.bwd.xh(t),
            enc.bwd.gates(t),
            c_prev,
            enc.bwd.c(t),
            &dht,
            &dc,
            &mut dxh_e,
        );
        let row = l.emb.offset + enc.tokens[t] as usize * EMB;
        for d in 0..EMB {
            g[row + d] += dxh_e[d];
        }
        dh.copy_from_slice(&dxh_e[EMB..]);
        dc = dc_prev;
    }
    let _ = &enc.out;
}

// ---------------------------------------------------------------------------
// Gradient check

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Worst relative error per parameter group.
    pub per_group: Vec<(String, f64)>,
    pub checked: usize,
}

/// Compares the analytic gradient with central differences on `samples`
/// weights drawn across all groups (stratified, at least one per group).
pub fn grad_check(
    p: &GoalNetParams,
    input: &[TokenId],
    target: &[TokenId],
    eps: f64,
    samples: usize,
    seed: u64,
    mutation: GradMutation,
) -> GradCheckReport {
    let mut grad = p.zeros_like();
    loss_and_grad(p, input, target, Some(&mut grad), mutation);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = p.groups();
    let per = samples.div_ceil(groups.len()).max(1);
    let mut work = p.clone();
    let mut per_group = Vec::new();
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    for (name, blk) in groups {
        let mut worst: f64 = 0.0;
        for _ in 0..per {
            let i = blk.offset + rng.random_range(0..blk.len());
            let orig = work.weights[i];
            work.weights[i] = orig + eps;
            let lp = loss_and_grad(&work, input, target, None, GradMutation::None);
            work.weights[i] = orig - eps;
            let lm = loss_and_grad(&work, input, target, None, GradMutation::None);
            work.weights[i] = orig;
            let num = (lp - lm) / (2.0 * eps);
            let ana = grad[i];
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
        }
        max_rel = max_rel.max(worst);
        per_group.push((name.to_string(), worst));
    }
    GradCheckReport { max_rel_error: max_rel, per_group, checked }
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub task: TaskSentence,
    pub input: State,
    pub target: State,
}

impl TrainingPair {
    pub fn encode(&self, vocab: &Vocabulary) -> Result<(TokenSeq, Vec<TokenId>)> {
        let seq = encode_state_bounded(&self.task, &self.input, vocab, MAX_INPUT_ATOMS)?;
        let target = encode_goal_tokens(&self.target, vocab)?;
        Ok((seq, target))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyper {
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip.
    pub clip: f64,
    /// Learning rate of the last epoch as a fraction of `lr`; the rate
    /// falls linearly between.
    pub final_lr: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper { batch: 5, epochs: 100, lr: 0.005, beta1: 0.9, beta2: 0.999, adam_eps: 1e-8, clip: 5.0, final_lr: 0.1 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: GoalNetParams,
    /// Mean example loss per epoch, measured before each update.
    pub loss_history: Vec<f64>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn step(&mut self, w: &mut [f64], g: &[f64], h: &Hyper, lr: f64) {
        self.t += 1;
        let b1t = 1.0 - h.beta1.powi(self.t);
        let b2t = 1.0 - h.beta2.powi(self.t);
        for i in 0..w.len() {
            self.m[i] = h.beta1 * self.m[i] + (1.0 - h.beta1) * g[i];
            self.v[i] = h.beta2 * self.v[i] + (1.0 - h.beta2) * g[i] * g[i];
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            w[i] -= lr * mh / (vh.sqrt() + h.adam_eps);
        }
    }
}

/// Teacher-forced minibatch training. Deterministic given the seed: the
/// seed drives initialisation and the per-epoch shuffle.
pub fn train(
    pairs: &[TrainingPair],
    vocab: &Vocabulary,
    hyper: &Hyper,
    attention: bool,
    seed: u64,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    if pairs.is_empty() {
        return Err(GoalNetError::EmptyDataset);
    }
    let encoded: Vec<(Vec<TokenId>, Vec<TokenId>)> = pairs
        .iter()
        .map(|p| p.encode(vocab).map(|(s, t)| (s.tokens, t)))
        .collect::<Result<_>>()?;
    let params = GoalNetParams::init(vocab, attention, seed);
    train_encoded(&encoded, params, hyper, seed, &mut progress)
}

/// Training on pre-encoded (input, target) token pairs from given params.
pub fn train_encoded(
    data: &[(Vec<TokenId>, Vec<TokenId>)],
    mut params: GoalNetParams,
    hyper: &Hyper,
    seed: u64,
    progress: &mut dyn FnMut(usize, f64),
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(GoalNetError::EmptyDataset);
    }
    for (i, t) in data {
        params.check_tokens(i)?;
        params.check_tokens(t)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_ba7c);
    let mut adam = Adam { m: params.zeros_like(), v: params.zeros_like(), t: 0 };
    let mut grad = params.zeros_like();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(hyper.epochs);
    let batch = hyper.batch.max(1);
    for epoch in 0..hyper.epochs {
        let frac = if hyper.epochs > 1 { epoch as f64 / (hyper.epochs - 1) as f64 } else { 0.0 };
        let lr = hyper.lr * (1.0 - frac * (1.0 - hyper.final_lr));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (bi, chunk) in order.chunks(batch).enumerate() {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut batch_loss = 0.0;
            for &i in chunk {
                let (inp, tgt) = &data[i];
                batch_loss += loss_and_grad(&params, inp, tgt, Some(&mut grad), GradMutation::None);
            }
            if !batch_loss.is_finite() {
                return Err(GoalNetError::NonFiniteLoss { epoch, batch: bi });
            }
            total += batch_loss;
            let scale = 1.0 / chunk.len() as f64;
            let mut norm = 0.0;
            for g in grad.iter_mut() {
                *g *= scale;
                norm += *g * *g;
            }
            let norm = norm.sqrt();
            if norm > hyper.clip {
                let s = hyper.clip / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
            adam.step(&mut params.weights, &grad, hyper, lr);
        }
        let mean = total / data.len() as f64;
        history.push(mean);
        progress(epoch, mean);
    }
    Ok(TrainReport { params, loss_history: history })
}

// ---------------------------------------------------------------------------
// Dataset growth

/// One successor-goal transition from the manifest.
#[derive(Debug, Clone)]
struct BasePair {
    task: TaskSentence,
    input: State,
    target: State,
    weight: f64,
}

fn base_pairs(lib: &PlanLibrary) -> Vec<BasePair> {
    let mut out = Vec::new();
    for tc in &lib.tasks {
        let Some(task) = lib.vocab.task(&tc.task) else { continue };
        let total: f64 = tc.chains.iter().map(|c| c.weight).sum();
        for chain in &tc.chains {
            let mut prev = tc.start.clone();
            for g in &chain.goals {
                out.push(BasePair {
                    task: task.clone(),
                    input: prev.clone(),
                    target: g.clone(),
                    weight: chain.weight / total.max(f64::MIN_POSITIVE),
                });
                prev = g.clone();
            }
        }
    }
    out
}

/// Words of declared task sentences that name vocabulary terms.
fn declared_task_terms(vocab: &Vocabulary) -> BTreeSet<Name> {
    vocab
        .tasks()
        .iter()
        .flat_map(|t| t.words.iter())
        .filter_map(|w| vocab.term(w).map(|t| t.name.clone()))
        .collect()
}

/// Random injective, sort-preserving renaming of the world terms named by a
/// pair's input or task words. At least one task-word term must leave the set of terms named
/// in declared sentences, so renamed pairs never reuse a declared sentence.
fn sample_substitution(
    vocab: &Vocabulary,
    base: &BasePair,
    declared: &BTreeSet<Name>,
    rng: &mut ChaCha8Rng,
) -> Option<BTreeMap<Name, Name>> {
    let is_world = |n: &Name| vocab.term(n).is_some_and(|t| t.kind == TermKind::World);
    let mut mentioned: BTreeSet<Name> = base.input.terms();
    for w in &base.task.words {
        if let Some(t) = vocab.term(w) {
            mentioned.insert(t.name.clone());
        }
    }
    // terms only the target names cannot be inferred from the input, so they stay put
    let fixed: BTreeSet<Name> =
        base.target.terms().into_iter().filter(|n| is_world(n) && !mentioned.contains(n)).collect();
    let world: Vec<Name> = mentioned.into_iter().filter(|n| is_world(n)).collect();
    let task_terms: Vec<&Name> = world.iter().filter(|n| base.task.words.iter().any(|w| w == &***n)).collect();
    for _ in 0..32 {
        let mut used = fixed.clone();
        let mut map: BTreeMap<Name, Name> = fixed.iter().map(|n| (n.clone(), n.clone())).collect();
        let mut ok = true;
        for n in &world {
            let sort = vocab.term(n).expect("mentioned term").sort;
            let pool: Vec<&Name> =
                vocab.terms_of_sort(sort).filter(|t| t.sort == sort).map(|t| &t.name).filter(|t| !used.contains(*t)).collect();
            let Some(&pick) = pool.choose(rng) else {
                ok = false;
                break;
            };
            used.insert(pick.clone());
            map.insert(n.clone(), pick.clone());
        }
        if !ok {
            continue;
        }
        if task_terms.iter().any(|t| !declared.contains(&map[*t])) {
            return Some(map);
        }
    }
    None
}

fn rename_words(words: &[String], map: &BTreeMap<Name, Name>) -> Vec<String> {
    words.iter().map(|w| map.get(w.as_str()).map_or_else(|| w.clone(), |n| n.to_string())).collect()
}

/// Configuration for corpus growth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowConfig {
    pub target: usize,
    /// Probability that a sample keeps the declared task's own terms.
    pub keep_original: f64,
    pub min_atoms: usize,
    pub max_atoms: usize,
}

impl Default for GrowConfig {
    fn default() -> Self {
        GrowConfig { target: 20_000, keep_original: 0.3, min_atoms: 1, max_atoms: MAX_INPUT_ATOMS }
    }
}

/// Grows the manifest's successor-goal pairs into a corpus: the base pairs
/// first, then samples that rename terms consistently across task words,
/// input and target, shrink the input to a random subset or pad it with
/// distractor atoms over unrelated terms. Duplicates are skipped.
pub fn grow_dataset(lib: &PlanLibrary, cfg: &GrowConfig, seed: u64) -> Result<Vec<TrainingPair>> {
    let base = base_pairs(lib);
    if base.is_empty() {
        return Err(GoalNetError::InsufficientBase);
    }
    let vocab = &lib.vocab;
    let declared = declared_task_terms(vocab);
    let universe: Vec<Atom> = symbolic::filter_by_types(&symbolic::herbrand_universe(vocab), vocab).into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: HashSet<(Vec<String>, State, State)> = HashSet::new();
    let mut out = Vec::with_capacity(cfg.target);
    let mut push = |pair: TrainingPair, out: &mut Vec<TrainingPair>| {
        if out.len() < cfg.target && seen.insert((pair.task.words.clone(), pair.input.clone(), pair.target.clone())) {
            out.push(pair);
        }
    };
    for b in &base {
        push(TrainingPair { task: b.task.clone(), input: b.input.clone(), target: b.target.clone() }, &mut out);
    }
    let weights: Vec<f64> = base.iter().map(|b| b.weight).collect();
    let total_w: f64 = weights.iter().sum();
    let mut attempts = 0usize;
    while out.len() < cfg.target && attempts < cfg.target.saturating_mul(50) {
        attempts += 1;
        // weighted pick of a base transition
        let mut r = rng.random::<f64>() * total_w;
        let mut idx = 0;
        for (i, w) in weights.iter().enumerate() {
            if r < *w {
                idx = i;
                break;
            }
            r -= w;
            idx = i;
        }
        let b = &base[idx];
        let (task, input, target) = if rng.random::<f64>() < cfg.keep_original {
            (b.task.clone(), b.input.clone(), b.target.clone())
        } else {
            let Some(map) = sample_substitution(vocab, b, &declared, &mut rng) else { continue };
            let words = rename_words(&b.task.words, &map);
            (vocab.task_from_words(words), b.input.rename(&map), b.target.rename(&map))
        };
        let n = rng.random_range(cfg.min_atoms..=cfg.max_atoms);
        let input = resize_input(&input, &target, &task, n, &universe, vocab, &mut rng);
        let pair = TrainingPair { task, input, target };
        if vocab.check_state(&pair.input).is_err() || vocab.check_state(&pair.target).is_err() {
            continue;
        }
        push(pair, &mut out);
    }
    Ok(out)
}

/// Random subset of `n` atoms, or the full input padded with distractors.
/// Distractors never name a task-word term or a robot term and never
/// repeat a target atom, but may share one term with the pair, as clutter
/// on the same surface or near the same person does.
fn resize_input(
    input: &State,
    target: &State,
    task: &TaskSentence,
    n: usize,
    universe: &[Atom],
    vocab: &Vocabulary,
    rng: &mut ChaCha8Rng,
) -> State {
    let atoms: Vec<&Atom> = input.iter().collect();
    if n <= atoms.len() {
        return atoms.choose_multiple(rng, n).map(|a| (*a).clone()).collect();
    }
    let mut shared: BTreeSet<Name> = input.terms();
    shared.extend(target.terms());
    let named: BTreeSet<Name> = task.words.iter().filter_map(|w| vocab.term(w).map(|t| t.name.clone())).collect();
    let mut out = input.clone();
    let mut guard = 0;
    while out.len() < n && guard < 10_000 {
        guard += 1;
        let a = &universe[rng.random_range(0..universe.len())];
        let clean = a.args.iter().all(|x| !named.contains(x) && vocab.term(x).is_some_and(|t| t.kind == TermKind::World))
            && a.args.iter().filter(|x| shared.contains(*x)).count() <= 1
            && !target.contains(a)
            && !vocab.predicate(&a.predicate).is_some_and(|p| p.robot_state);
        if clean {
            out.insert(a.clone());
        }
    }
    out
}

/// Held-out pairs: same generator, different seed, excluding training pairs.
pub fn held_out(lib: &PlanLibrary, cfg: &GrowConfig, seed: u64, train: &[TrainingPair]) -> Result<Vec<TrainingPair>> {
    let seen: HashSet<(Vec<String>, State, State)> =
        train.iter().map(|p| (p.task.words.clone(), p.input.clone(), p.target.clone())).collect();
    let more = GrowConfig { target: cfg.target + seen.len().min(cfg.target * 4), ..*cfg };
    let n_base = base_pairs(lib).len();
    Ok(grow_dataset(lib, &more, seed)?
        .into_iter()
        .skip(n_base)
        .filter(|p| !seen.contains(&(p.task.words.clone(), p.input.clone(), p.target.clone())))
        .take(cfg.target)
        .collect())
}

/// One record per line: `task id<TAB>input tokens<TAB>target tokens`.
pub fn dataset_to_text(pairs: &[TrainingPair], vocab: &Vocabulary) -> Result<String> {
    let mut out = String::new();
    for p in pairs {
        let (seq, tgt) = p.encode(vocab)?;
        out.push_str(&p.task.id);
        out.push('\t');
        out.push_str(&symbolic::tokens_to_text(&seq.tokens, vocab));
        out.push('\t');
        out.push_str(&symbolic::tokens_to_text(&tgt, vocab));
        out.push('\n');
    }
    Ok(out)
}

pub fn dataset_from_text(text: &str, vocab: &Vocabulary) -> Result<Vec<TrainingPair>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(SymbolicError::MalformedSequence { position: ln + 1, reason: "expected three tab-separated columns".into() }
                .into());
        }
        let seq = TokenSeq { tokens: symbolic::text_to_tokens(cols[1], vocab)? };
        let (task, input) = symbolic::decode_state(&seq, vocab)?;
        let target = decode_goal_tokens(&symbolic::text_to_tokens(cols[2], vocab)?, vocab)?;
        out.push(TrainingPair { task, input, target });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symbolic::tests::tiny_vocab;

    fn pair(v: &Vocabulary) -> (Vec<TokenId>, Vec<TokenId>) {
        let task = v.tasks()[0].clone();
        let input = State::new();
        let seq = encode_state_bounded(&task, &input, v, MAX_INPUT_ATOMS).unwrap();
        let target = encode_goal_tokens(&State::new(), v).unwrap();
        (seq.tokens, target)
    }

    #[test]
    fn segment_bounds_follow_separators() {
        // T ETS a b EOA c EOA EOS with ets=1, eoa=2, eos=0
        let toks = [10, 1, 5, 6, 2, 7, 2, 0];
        assert_eq!(segment_bounds(&toks, 1, 2), vec![0..2, 2..5, 5..7]);
    }

    #[test]
    fn params_shape_matches_vocab() {
        let v = tiny_vocab();
        let p = GoalNetParams::init(&v, true, 1);
        let groups = p.groups();
        assert_eq!(groups[0].1.rows, v.size());
        let total: usize = groups.iter().map(|(_, b)| b.len()).sum();
        assert_eq!(total, p.weights.len());
        assert!(p.weights.iter().all(|w| (-0.08..0.08).contains(w)));
    }

    #[test]
    fn teacher_forced_score_equals_loss() {
        let v = tiny_vocab();
        let p = GoalNetParams::init(&v, true, 3);
        let (inp, tgt) = pair(&v);
        let lp = score_sequence(&TokenSeq { tokens: inp.clone() }, &tgt, &p).unwrap();
        let loss = loss_and_grad(&p, &inp, &tgt, None, GradMutation::None);
        let mean = -lp.iter().sum::<f64>() / tgt.len() as f64;
        assert!((loss - mean).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let v = tiny_vocab();
        let p = GoalNetParams::init(&v, false, 9);
        let back = GoalNetParams::from_json(&p.to_json(), &v).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let v = tiny_vocab();
        let err = train(&[], &v, &Hyper::default(), true, 0, |_, _| {}).unwrap_err();
        assert!(matches!(err, GoalNetError::EmptyDataset));
    }

    fn sample(v: &Vocabulary) -> (Vec<TokenId>, Vec<TokenId>) {
        let task = v.tasks()[0].clone();
        let input = State::parse("On(brush, ladder) ∧ Free(robot_hand)").unwrap();
        let target = State::parse("Hold(robot_hand, brush)").unwrap();
        let seq = encode_state_bounded(&task, &input, v, MAX_INPUT_ATOMS).unwrap();
        (seq.tokens, encode_goal_tokens(&target, v).unwrap())
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let v = tiny_vocab();
        let (inp, tgt) = sample(&v);
        for attention in [true, false] {
            let mut p = GoalNetParams::init(&v, attention, 11);
            // larger weights make every path matter
            p.weights.iter_mut().for_each(|w| *w *= 5.0);
            let r = grad_check(&p, &inp, &tgt, 1e-5, 300, 4, GradMutation::None);
            assert!(r.max_rel_error < 1e-4, "{attention}: {:?}", r.per_group);
        }
        let mut p = GoalNetParams::init(&v, true, 11);
        p.weights.iter_mut().for_each(|w| *w *= 5.0);
        let r = grad_check(&p, &inp, &tgt, 1e-5, 300, 4, GradMutation::AttentionSoftmax);
        assert!(r.max_rel_error > 1e-2, "{:?}", r.per_group);
    }
}
