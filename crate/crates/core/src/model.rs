//! Transformer encoder–decoder with language-token control, the sequence
//! critics, and autoregressive decoding.
//!
//! Blocks are pre-LN. Encoder and decoder share one embedding table (scaled
//! by √d and summed with sinusoidal positions); the output projection is a
//! separate matrix. Every sequence starts with a language token: the source
//! language token on the encoder side, the target language token on the
//! decoder side.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autodiff::{BoundParams, ParamId, ParamStore, Segments, Tape, Var};
use crate::corpus::{EOS, FIXED_SPECIALS};
use crate::error::{Error, Result};
use crate::math;
use crate::rng;
use crate::tensor::{self, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub vocab: usize,
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn: usize,
}

impl ModelDims {
    pub fn new(vocab: usize) -> Self {
        Self {
            vocab,
            d_model: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ffn: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.d_model == 0 || self.heads == 0 || self.ffn == 0 {
            return Err(Error::InvalidConfig("model dimensions must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    /// `(name, value)` pairs for checkpoint headers.
    pub fn fields(&self) -> [(&'static str, u64); 6] {
        [
            ("vocab", self.vocab as u64),
            ("d_model", self.d_model as u64),
            ("heads", self.heads as u64),
            ("enc_layers", self.enc_layers as u64),
            ("dec_layers", self.dec_layers as u64),
            ("ffn", self.ffn as u64),
        ]
    }
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct AttnParams {
    q: Dense,
    k: Dense,
    v: Dense,
    o: Dense,
}

#[derive(Clone, Copy, Debug)]
struct FeedForward {
    up: Dense,
    down: Dense,
}

#[derive(Clone, Copy, Debug)]
struct EncLayer {
    ln1: Norm,
    attn: AttnParams,
    ln2: Norm,
    ff: FeedForward,
}

#[derive(Clone, Copy, Debug)]
struct DecLayer {
    ln1: Norm,
    self_attn: AttnParams,
    ln2: Norm,
    cross: AttnParams,
    ln3: Norm,
    ff: FeedForward,
}

enum Init {
    Xavier,
    Zeros,
    Ones,
    Normal(f64),
    Uniform(f64),
}

fn make<R: Rng>(store: &mut ParamStore, name: String, rows: usize, cols: usize, init: Init, r: &mut R) -> ParamId {
    let data: Vec<f64> = match init {
        Init::Zeros => vec![0.0; rows * cols],
        Init::Ones => vec![1.0; rows * cols],
        Init::Xavier => {
            let a = math::sqrt(6.0 / (rows + cols) as f64);
            let u = Uniform::new_inclusive(-a, a).expect("finite bound");
            (0..rows * cols).map(|_| u.sample(r)).collect()
        }
        Init::Uniform(a) => {
            let u = Uniform::new_inclusive(-a, a).expect("finite bound");
            (0..rows * cols).map(|_| u.sample(r)).collect()
        }
        Init::Normal(sd) => {
            let n = Normal::new(0.0, sd).expect("positive deviation");
            (0..rows * cols).map(|_| n.sample(r)).collect()
        }
    };
    store.push(name, Matrix::from_vec(rows, cols, data))
}

fn norm<R: Rng>(s: &mut ParamStore, name: &str, d: usize, r: &mut R) -> Norm {
    Norm {
        g: make(s, format!("{name}.g"), 1, d, Init::Ones, r),
        b: make(s, format!("{name}.b"), 1, d, Init::Zeros, r),
    }
}

fn dense<R: Rng>(s: &mut ParamStore, name: &str, i: usize, o: usize, r: &mut R) -> Dense {
    Dense {
        w: make(s, format!("{name}.w"), i, o, Init::Xavier, r),
        b: make(s, format!("{name}.b"), 1, o, Init::Zeros, r),
    }
}

fn attn<R: Rng>(s: &mut ParamStore, name: &str, d: usize, r: &mut R) -> AttnParams {
    AttnParams {
        q: dense(s, &format!("{name}.q"), d, d, r),
        k: dense(s, &format!("{name}.k"), d, d, r),
        v: dense(s, &format!("{name}.v"), d, d, r),
        o: dense(s, &format!("{name}.o"), d, d, r),
    }
}

fn ff<R: Rng>(s: &mut ParamStore, name: &str, d: usize, h: usize, r: &mut R) -> FeedForward {
    FeedForward {
        up: dense(s, &format!("{name}.up"), d, h, r),
        down: dense(s, &format!("{name}.down"), h, d, r),
    }
}

/// Encoder output for a packed batch.
#[derive(Clone, Copy, Debug)]
pub struct Encoded<'s> {
    pub z: Var,
    pub segs: &'s Segments,
}

/// The translation network.
#[derive(Clone, Debug)]
pub struct Model {
    dims: ModelDims,
    store: ParamStore,
    emb: ParamId,
    enc: Vec<EncLayer>,
    enc_ln: Norm,
    dec: Vec<DecLayer>,
    dec_ln: Norm,
    out: Dense,
    /// Ids at or above this index belong to the decoder.
    first_decoder_param: u32,
}

fn packed(seqs: &[&[u32]]) -> (Vec<u32>, Segments) {
    let ids: Vec<u32> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
    (ids, Segments::from_lengths(seqs.iter().map(|s| s.len())))
}

fn positions(segs: &Segments, d: usize) -> Matrix {
    let longest = segs.lengths().max().unwrap_or(0);
    let table = tensor::sinusoidal_positions(longest, d);
    let mut out = Matrix::zeros(segs.total(), d);
    for s in 0..segs.count() {
        for (t, r) in segs.range(s).enumerate() {
            out.row_mut(r).copy_from_slice(table.row(t));
        }
    }
    out
}

impl Model {
    /// Fresh parameters drawn from a seeded stream.
    pub fn new(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut r = rng::stream(seed, rng::domain("model-init"), 0);
        let d = dims.d_model;
        let mut s = ParamStore::new();
        let emb = make(&mut s, "emb".into(), dims.vocab, d, Init::Normal(1.0 / math::sqrt(d as f64)), &mut r);
        let enc = (0..dims.enc_layers)
            .map(|l| EncLayer {
                ln1: norm(&mut s, &format!("enc.{l}.ln1"), d, &mut r),
                attn: attn(&mut s, &format!("enc.{l}.attn"), d, &mut r),
                ln2: norm(&mut s, &format!("enc.{l}.ln2"), d, &mut r),
                ff: ff(&mut s, &format!("enc.{l}.ff"), d, dims.ffn, &mut r),
            })
            .collect();
        let enc_ln = norm(&mut s, "enc.ln", d, &mut r);
        let first_decoder_param = s.len() as u32;
        let dec = (0..dims.dec_layers)
            .map(|l| DecLayer {
                ln1: norm(&mut s, &format!("dec.{l}.ln1"), d, &mut r),
                self_attn: attn(&mut s, &format!("dec.{l}.self"), d, &mut r),
                ln2: norm(&mut s, &format!("dec.{l}.ln2"), d, &mut r),
                cross: attn(&mut s, &format!("dec.{l}.cross"), d, &mut r),
                ln3: norm(&mut s, &format!("dec.{l}.ln3"), d, &mut r),
                ff: ff(&mut s, &format!("dec.{l}.ff"), d, dims.ffn, &mut r),
            })
            .collect();
        let dec_ln = norm(&mut s, "dec.ln", d, &mut r);
        let out = dense(&mut s, "out", d, dims.vocab, &mut r);
        Ok(Self {
            dims,
            store: s,
            emb,
            enc,
            enc_ln,
            dec,
            dec_ln,
            out,
            first_decoder_param,
        })
    }

    /// Fresh parameters with the embedding row of `to` copied from `from`
    /// (the LRL language token starts as the HRL one).
    pub fn init(dims: ModelDims, seed: u64, from: u32, to: u32) -> Result<Self> {
        let mut m = Self::new(dims, seed)?;
        m.copy_embedding_row(from, to);
        Ok(m)
    }

    pub fn copy_embedding_row(&mut self, from: u32, to: u32) {
        let e = self.store.get_mut(self.emb);
        let row = e.row(from as usize).to_vec();
        e.row_mut(to as usize).copy_from_slice(&row);
    }

    pub fn embedding_row(&self, id: u32) -> &[f64] {
        self.store.get(self.emb).row(id as usize)
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Replaces the parameters; names and shapes must match.
    pub fn set_params(&mut self, store: ParamStore) -> Result<()> {
        check_same_layout(&self.store, &store)?;
        self.store = store;
        Ok(())
    }

    /// Whether a parameter is used only by the decoder side.
    pub fn is_decoder_param(&self, id: ParamId) -> bool {
        id.0 >= self.first_decoder_param
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>, trainable: bool) -> BoundParams {
        self.store.bind(tape, trainable)
    }

    fn embed<'p>(&self, tape: &mut Tape<'p>, p: &BoundParams, ids: &[u32], segs: &Segments) -> Var {
        let e = tape.gather(p.var(self.emb), ids);
        let e = tape.scale(e, math::sqrt(self.dims.d_model as f64));
        let pos = tape.leaf(positions(segs, self.dims.d_model));
        tape.add(e, pos)
    }

    fn dense(tape: &mut Tape<'_>, p: &BoundParams, d: Dense, x: Var) -> Var {
        tape.linear(x, p.var(d.w), Some(p.var(d.b)))
    }

    fn norm(tape: &mut Tape<'_>, p: &BoundParams, n: Norm, x: Var) -> Var {
        tape.layer_norm(x, p.var(n.g), p.var(n.b))
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        tape: &mut Tape<'_>,
        p: &BoundParams,
        a: AttnParams,
        x: Var,
        mem: Var,
        q_segs: &Segments,
        k_segs: &Segments,
        causal: bool,
    ) -> Var {
        let q = Self::dense(tape, p, a.q, x);
        let k = Self::dense(tape, p, a.k, mem);
        let v = Self::dense(tape, p, a.v, mem);
        let o = tape.attention(q, k, v, self.dims.heads, q_segs, k_segs, causal);
        Self::dense(tape, p, a.o, o)
    }

    fn feed_forward(tape: &mut Tape<'_>, p: &BoundParams, f: FeedForward, x: Var) -> Var {
        let h = Self::dense(tape, p, f.up, x);
        let h = tape.relu(h);
        Self::dense(tape, p, f.down, h)
    }

    /// Encodes packed inputs, each already prefixed with its language token.
    pub fn encode<'s>(&self, tape: &mut Tape<'_>, p: &BoundParams, ids: &[u32], segs: &'s Segments) -> Encoded<'s> {
        let mut x = self.embed(tape, p, ids, segs);
        for l in &self.enc {
            let h = Self::norm(tape, p, l.ln1, x);
            let a = self.attention(tape, p, l.attn, h, h, segs, segs, false);
            x = tape.add(x, a);
            let h = Self::norm(tape, p, l.ln2, x);
            let f = Self::feed_forward(tape, p, l.ff, h);
            x = tape.add(x, f);
        }
        Encoded {
            z: Self::norm(tape, p, self.enc_ln, x),
            segs,
        }
    }

    /// Teacher-forced logits for packed decoder inputs (each prefixed with
    /// the target language token), one row per input position.
    pub fn decode_logits(&self, tape: &mut Tape<'_>, p: &BoundParams, enc: Encoded<'_>, ids: &[u32], segs: &Segments) -> Var {
        let mut x = self.embed(tape, p, ids, segs);
        for l in &self.dec {
            let h = Self::norm(tape, p, l.ln1, x);
            let a = self.attention(tape, p, l.self_attn, h, h, segs, segs, true);
            x = tape.add(x, a);
            let h = Self::norm(tape, p, l.ln2, x);
            let c = self.attention(tape, p, l.cross, h, enc.z, segs, enc.segs, false);
            x = tape.add(x, c);
            let h = Self::norm(tape, p, l.ln3, x);
            let f = Self::feed_forward(tape, p, l.ff, h);
            x = tape.add(x, f);
        }
        let h = Self::norm(tape, p, self.dec_ln, x);
        Self::dense(tape, p, self.out, h)
    }

    /// Latents of `tokens` prefixed with `lang`, without gradients.
    pub fn encode_one(&self, lang: u32, tokens: &[u32]) -> Result<Matrix> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut batch = self.encode_batch(lang, &[tokens])?;
        Ok(batch.pop().expect("one sequence"))
    }

    /// Latents of every sequence in `batch`, each prefixed with `lang`.
    pub fn encode_batch(&self, lang: u32, batch: &[&[u32]]) -> Result<Vec<Matrix>> {
        if batch.iter().any(|t| t.is_empty()) {
            return Err(Error::EmptyInput);
        }
        let inputs: Vec<Vec<u32>> = batch.iter().map(|t| with_prefix(lang, t)).collect();
        let refs: Vec<&[u32]> = inputs.iter().map(Vec::as_slice).collect();
        let (ids, segs) = packed(&refs);
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let enc = self.encode(&mut tape, &p, &ids, &segs);
        let z = tape.value(enc.z);
        Ok((0..segs.count()).map(|s| {
            let r = segs.range(s);
            z.slice_rows(r.start, r.end)
        }).collect())
    }

    /// Incremental decoder over fixed encoder latents.
    pub fn decoder<'m>(&'m self, z: &Matrix) -> IncrementalDecoder<'m> {
        let layers = self
            .dec
            .iter()
            .map(|l| {
                let k = tensor::linear(z, self.store.get(l.cross.k.w), Some(self.store.get(l.cross.k.b)));
                let v = tensor::linear(z, self.store.get(l.cross.v.w), Some(self.store.get(l.cross.v.b)));
                (k, v)
            })
            .collect();
        IncrementalDecoder { model: self, cross: layers }
    }
}

pub(crate) fn check_same_layout(a: &ParamStore, b: &ParamStore) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Checkpoint(format!("expected {} tensors, found {}", a.len(), b.len())));
    }
    for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
        if na != nb || ta.shape() != tb.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {nb} {:?} does not match {na} {:?}",
                tb.shape(),
                ta.shape()
            )));
        }
    }
    Ok(())
}

pub fn with_prefix(lang: u32, tokens: &[u32]) -> Vec<u32> {
    let mut v = Vec::with_capacity(tokens.len() + 1);
    v.push(lang);
    v.extend_from_slice(tokens);
    v
}

/// Packs sequences row-wise for the tape.
pub fn pack(seqs: &[&[u32]]) -> (Vec<u32>, Segments) {
    packed(seqs)
}

/// Cached decoding state of one sequence.
#[derive(Clone, Debug)]
pub struct DecoderState {
    /// Self-attention keys and values per layer, one row per step so far.
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    pos: usize,
}

/// Decoder with cross-attention keys and values precomputed.
pub struct IncrementalDecoder<'m> {
    model: &'m Model,
    cross: Vec<(Matrix, Matrix)>,
}

fn ln_row(x: &[f64], g: &Matrix, b: &Matrix) -> Vec<f64> {
    let m = Matrix::from_vec(1, x.len(), x.to_vec());
    tensor::layer_norm(&m, g.data(), b.data()).0.into_vec()
}

fn dense_row(x: &[f64], w: &Matrix, b: &Matrix) -> Vec<f64> {
    let mut out = b.data().to_vec();
    tensor::matmul_acc(x, w.data(), &mut out, 1, x.len(), w.cols());
    out
}

/// Single-query multi-head attention over `n` cached key/value rows.
fn attend(q: &[f64], keys: &[f64], values: &[f64], n: usize, heads: usize) -> Vec<f64> {
    let d = q.len();
    let dh = d / heads;
    let scale = 1.0 / math::sqrt(dh as f64);
    let mut out = vec![0.0; d];
    let mut w = vec![0.0; n];
    for h in 0..heads {
        let c = h * dh..(h + 1) * dh;
        for (j, wj) in w.iter_mut().enumerate() {
            *wj = tensor::dot(&q[c.clone()], &keys[j * d..(j + 1) * d][c.clone()]) * scale;
        }
        tensor::softmax_in_place(&mut w);
        for (j, wj) in w.iter().enumerate() {
            tensor::axpy(*wj, &values[j * d..(j + 1) * d][c.clone()], &mut out[c.clone()]);
        }
    }
    out
}

impl IncrementalDecoder<'_> {
    pub fn start(&self) -> DecoderState {
        DecoderState {
            keys: vec![Vec::new(); self.model.dec.len()],
            values: vec![Vec::new(); self.model.dec.len()],
            pos: 0,
        }
    }

    /// Feeds `token` and returns next-token logits.
    pub fn step(&self, state: &mut DecoderState, token: u32) -> Vec<f64> {
        let m = self.model;
        let s = &m.store;
        let d = m.dims.d_model;
        let pe = tensor::sinusoidal_positions(state.pos + 1, d);
        let mut x: Vec<f64> = s.get(m.emb).row(token as usize).iter().map(|v| v * math::sqrt(d as f64)).collect();
        tensor::axpy(1.0, pe.row(state.pos), &mut x);
        for (li, l) in m.dec.iter().enumerate() {
            let h = ln_row(&x, s.get(l.ln1.g), s.get(l.ln1.b));
            let q = dense_row(&h, s.get(l.self_attn.q.w), s.get(l.self_attn.q.b));
            let k = dense_row(&h, s.get(l.self_attn.k.w), s.get(l.self_attn.k.b));
            let v = dense_row(&h, s.get(l.self_attn.v.w), s.get(l.self_attn.v.b));
            state.keys[li].extend_from_slice(&k);
            state.values[li].extend_from_slice(&v);
            let a = attend(&q, &state.keys[li], &state.values[li], state.pos + 1, m.dims.heads);
            let a = dense_row(&a, s.get(l.self_attn.o.w), s.get(l.self_attn.o.b));
            tensor::axpy(1.0, &a, &mut x);

            let h = ln_row(&x, s.get(l.ln2.g), s.get(l.ln2.b));
            let q = dense_row(&h, s.get(l.cross.q.w), s.get(l.cross.q.b));
            let (ck, cv) = &self.cross[li];
            let c = attend(&q, ck.data(), cv.data(), ck.rows(), m.dims.heads);
            let c = dense_row(&c, s.get(l.cross.o.w), s.get(l.cross.o.b));
            tensor::axpy(1.0, &c, &mut x);

            let h = ln_row(&x, s.get(l.ln3.g), s.get(l.ln3.b));
            let mut u = dense_row(&h, s.get(l.ff.up.w), s.get(l.ff.up.b));
            u.iter_mut().for_each(|v| *v = if *v > 0.0 { *v } else { 0.0 });
            let f = dense_row(&u, s.get(l.ff.down.w), s.get(l.ff.down.b));
            tensor::axpy(1.0, &f, &mut x);
        }
        state.pos += 1;
        let h = ln_row(&x, s.get(m.dec_ln.g), s.get(m.dec_ln.b));
        dense_row(&h, s.get(m.out.w), s.get(m.out.b))
    }
}

/// A left-to-right next-token scorer.
pub trait StepScorer {
    type State: Clone;
    fn start(&self) -> Self::State;
    /// Feeds one token and returns logits over the vocabulary.
    fn step(&self, state: &mut Self::State, token: u32) -> Vec<f64>;
}

impl StepScorer for IncrementalDecoder<'_> {
    type State = DecoderState;

    fn start(&self) -> DecoderState {
        IncrementalDecoder::start(self)
    }

    fn step(&self, state: &mut DecoderState, token: u32) -> Vec<f64> {
        IncrementalDecoder::step(self, state, token)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Greedy,
    Beam(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    /// Maximum number of output tokens, EOS excluded.
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Greedy,
            max_len: 40,
        }
    }
}

fn masked(mut logits: Vec<f64>, ban: Option<&[bool]>) -> Vec<f64> {
    if let Some(b) = ban {
        for (l, banned) in logits.iter_mut().zip(b) {
            if *banned {
                *l = f64::NEG_INFINITY;
            }
        }
    }
    logits
}

fn argmax(v: &[f64]) -> Option<u32> {
    let mut best: Option<(u32, f64)> = None;
    for (i, &x) in v.iter().enumerate() {
        if x == f64::NEG_INFINITY || x.is_nan() {
            continue;
        }
        if best.map_or(true, |(_, b)| x > b) {
            best = Some((i as u32, x));
        }
    }
    best.map(|(i, _)| i)
}

/// Decodes after feeding `first` (the target language token). Banned ids
/// never appear in the output. The returned tokens exclude EOS.
pub fn generate<S: StepScorer>(scorer: &S, first: u32, cfg: &DecodeConfig, ban: Option<&[bool]>) -> Result<Vec<u32>> {
    if let Some(b) = ban {
        if b.iter().all(|x| *x) {
            return Err(Error::AllTokensBanned);
        }
    }
    match cfg.strategy {
        Strategy::Greedy => greedy(scorer, first, cfg.max_len, ban),
        Strategy::Beam(k) => beam(scorer, first, cfg.max_len, k.max(1), ban),
    }
}

fn greedy<S: StepScorer>(scorer: &S, first: u32, max_len: usize, ban: Option<&[bool]>) -> Result<Vec<u32>> {
    let mut state = scorer.start();
    let mut logits = scorer.step(&mut state, first);
    let mut out = Vec::new();
    while out.len() < max_len {
        let tok = argmax(&masked(logits, ban)).ok_or(Error::AllTokensBanned)?;
        if tok == EOS {
            break;
        }
        out.push(tok);
        if out.len() == max_len {
            break;
        }
        logits = scorer.step(&mut state, tok);
    }
    Ok(out)
}

struct Hyp<St> {
    score: f64,
    tokens: Vec<u32>,
    state: St,
    logp: Vec<f64>,
}

fn beam<S: StepScorer>(scorer: &S, first: u32, max_len: usize, k: usize, ban: Option<&[bool]>) -> Result<Vec<u32>> {
    let mut state = scorer.start();
    let logits = masked(scorer.step(&mut state, first), ban);
    if argmax(&logits).is_none() {
        return Err(Error::AllTokensBanned);
    }
    let mut live = vec![Hyp {
        score: 0.0,
        tokens: Vec::new(),
        state,
        logp: tensor::log_softmax(&logits),
    }];
    let mut done: Vec<(f64, Vec<u32>)> = Vec::new();
    while !live.is_empty() {
        // (score, hypothesis index, token)
        let mut cands: Vec<(f64, usize, u32)> = Vec::new();
        for (h, hyp) in live.iter().enumerate() {
            for (t, &lp) in hyp.logp.iter().enumerate() {
                if lp > f64::NEG_INFINITY {
                    cands.push((hyp.score + lp, h, t as u32));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(k);
        let mut next = Vec::with_capacity(k);
        for (score, h, t) in cands {
            let hyp = &live[h];
            if t == EOS {
                done.push((score, hyp.tokens.clone()));
                continue;
            }
            let mut tokens = hyp.tokens.clone();
            tokens.push(t);
            if tokens.len() == max_len {
                done.push((score, tokens));
                continue;
            }
            let mut st = hyp.state.clone();
            let logits = masked(scorer.step(&mut st, t), ban);
            next.push(Hyp {
                score,
                tokens,
                state: st,
                logp: tensor::log_softmax(&logits),
            });
        }
        live = next;
    }
    if max_len == 0 {
        return Ok(Vec::new());
    }
    done.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(done.into_iter().next().map(|(_, t)| t).unwrap_or_default())
}

/// Mask over the vocabulary banning structural specials (everything below
/// the first ordinary token except EOS).
pub fn structural_ban(vocab_len: usize, special_count: u32) -> Vec<bool> {
    (0..vocab_len as u32).map(|i| i < special_count && i != EOS).collect()
}

/// Decodes every latent sequence in `latents`.
pub fn translate_latents(model: &Model, latents: &[Matrix], target_lang: u32, cfg: &DecodeConfig, ban: &[bool]) -> Result<Vec<Vec<u32>>> {
    latents
        .iter()
        .map(|z| generate(&model.decoder(z), target_lang, cfg, Some(ban)))
        .collect()
}

/// Translates token sequences: encode with `source_lang`, decode after
/// `target_lang`. Work is chunked to bound memory.
pub fn translate(
    model: &Model,
    inputs: &[&[u32]],
    source_lang: u32,
    target_lang: u32,
    cfg: &DecodeConfig,
    ban: &[bool],
) -> Result<Vec<Vec<u32>>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(256) {
        // Empty inputs translate to empty outputs.
        let nonempty: Vec<&[u32]> = chunk.iter().copied().filter(|s| !s.is_empty()).collect();
        let latents = if nonempty.is_empty() { Vec::new() } else { model.encode_batch(source_lang, &nonempty)? };
        let mut it = latents.iter();
        for s in chunk {
            if s.is_empty() {
                out.push(Vec::new());
            } else {
                let z = it.next().expect("one latent per non-empty input");
                out.push(generate(&model.decoder(z), target_lang, cfg, Some(ban))?);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CriticDims {
    pub input: usize,
    pub fc1: usize,
    pub fc2: usize,
    pub gru: usize,
}

impl CriticDims {
    pub fn new(input: usize) -> Self {
        Self {
            input,
            fc1: 512,
            fc2: 512,
            gru: 128,
        }
    }

    pub fn fields(&self) -> [(&'static str, u64); 4] {
        [
            ("input", self.input as u64),
            ("fc1", self.fc1 as u64),
            ("fc2", self.fc2 as u64),
            ("gru", self.gru as u64),
        ]
    }
}

#[derive(Clone, Copy, Debug)]
struct GruParams {
    w_ih: ParamId,
    b_ih: ParamId,
    w_hh: ParamId,
    b_hh: ParamId,
}

/// Sequence critic: FC–SELU–FC–SELU–BiGRU–SELU–FC(1). The score of a
/// sequence is read from the concatenated final states of both GRU
/// directions.
#[derive(Clone, Debug)]
pub struct Critic {
    dims: CriticDims,
    store: ParamStore,
    fc1: Dense,
    fc2: Dense,
    fwd: GruParams,
    bwd: GruParams,
    out: Dense,
}

impl Critic {
    pub fn new(dims: CriticDims, seed: u64) -> Result<Self> {
        if dims.input == 0 || dims.fc1 == 0 || dims.fc2 == 0 || dims.gru == 0 {
            return Err(Error::InvalidConfig("critic widths must be positive".into()));
        }
        let mut r = rng::stream(seed, rng::domain("critic-init"), 0);
        let mut s = ParamStore::new();
        let fan = |n: usize| Init::Uniform(1.0 / math::sqrt(n as f64));
        let lin = |s: &mut ParamStore, name: &str, i: usize, o: usize, r: &mut rng::Rng| Dense {
            w: make(s, format!("{name}.w"), i, o, fan(i), r),
            b: make(s, format!("{name}.b"), 1, o, fan(i), r),
        };
        let fc1 = lin(&mut s, "fc1", dims.input, dims.fc1, &mut r);
        let fc2 = lin(&mut s, "fc2", dims.fc1, dims.fc2, &mut r);
        let h = dims.gru;
        let gru = |s: &mut ParamStore, name: &str, r: &mut rng::Rng| GruParams {
            w_ih: make(s, format!("{name}.w_ih"), dims.fc2, 3 * h, fan(h), r),
            b_ih: make(s, format!("{name}.b_ih"), 1, 3 * h, fan(h), r),
            w_hh: make(s, format!("{name}.w_hh"), h, 3 * h, fan(h), r),
            b_hh: make(s, format!("{name}.b_hh"), 1, 3 * h, fan(h), r),
        };
        let fwd = gru(&mut s, "gru.fwd", &mut r);
        let bwd = gru(&mut s, "gru.bwd", &mut r);
        let out = lin(&mut s, "out", 2 * h, 1, &mut r);
        Ok(Self {
            dims,
            store: s,
            fc1,
            fc2,
            fwd,
            bwd,
            out,
        })
    }

    pub fn dims(&self) -> CriticDims {
        self.dims
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn set_params(&mut self, store: ParamStore) -> Result<()> {
        check_same_layout(&self.store, &store)?;
        self.store = store;
        Ok(())
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>, trainable: bool) -> BoundParams {
        self.store.bind(tape, trainable)
    }

    /// One score per segment of `z` (`segments × 1`).
    pub fn score(&self, tape: &mut Tape<'_>, p: &BoundParams, z: Var, segs: &Segments) -> Var {
        let h = tape.linear(z, p.var(self.fc1.w), Some(p.var(self.fc1.b)));
        let h = tape.selu(h);
        let h = tape.linear(h, p.var(self.fc2.w), Some(p.var(self.fc2.b)));
        let h = tape.selu(h);
        let mut dir = |g: GruParams, reverse: bool| {
            let gi = tape.linear(h, p.var(g.w_ih), Some(p.var(g.b_ih)));
            tape.gru(gi, p.var(g.w_hh), p.var(g.b_hh), segs, reverse)
        };
        let f = dir(self.fwd, false);
        let b = dir(self.bwd, true);
        let c = tape.concat_cols(f, b);
        let c = tape.selu(c);
        tape.linear(c, p.var(self.out.w), Some(p.var(self.out.b)))
    }

    /// Score of a single latent sequence.
    pub fn score_one(&self, z: &Matrix) -> f64 {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let zv = tape.leaf(z.clone());
        let segs = Segments::from_lengths([z.rows()]);
        let s = self.score(&mut tape, &p, zv, &segs);
        tape.value(s).item()
    }

    /// Clamps every weight to `[-c, c]`.
    pub fn clip(&mut self, c: f64) {
        for t in self.store.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = x.clamp(-c, c));
        }
    }
}

/// Ids of the first ordinary (non-special) token given `languages` language tokens.
pub fn first_ordinary(languages: usize) -> u32 {
    FIXED_SPECIALS + languages as u32
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model {
        Model::new(
            ModelDims {
                vocab: 11,
                d_model: 8,
                heads: 2,
                enc_layers: 1,
                dec_layers: 2,
                ffn: 12,
            },
            3,
        )
        .unwrap()
    }

    fn forward(m: &Model, src: &[&[u32]], tgt: &[&[u32]]) -> Matrix {
        let (sids, ssegs) = pack(src);
        let (tids, tsegs) = pack(tgt);
        let mut tape = Tape::new();
        let p = m.bind(&mut tape, false);
        let enc = m.encode(&mut tape, &p, &sids, &ssegs);
        let l = m.decode_logits(&mut tape, &p, enc, &tids, &tsegs);
        tape.value(l).clone()
    }

    #[test]
    fn lrl_row_copied_at_init() {
        let m = Model::init(ModelDims::new(20), 9, 6, 7).unwrap();
        assert_eq!(m.embedding_row(6), m.embedding_row(7));
        let a = Model::new(ModelDims::new(20), 9).unwrap();
        let b = Model::new(ModelDims::new(20), 9).unwrap();
        let c = Model::new(ModelDims::new(20), 10).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn encoder_length_contract() {
        let m = tiny();
        let z = m.encode_one(5, &[8]).unwrap();
        assert_eq!(z.shape(), (2, 8));
        assert_eq!(m.encode_one(5, &[]), Err(Error::EmptyInput));
    }

    #[test]
    fn batching_does_not_change_results() {
        let m = tiny();
        let a: &[u32] = &[5, 8, 9];
        let b: &[u32] = &[6, 10, 9, 8, 7];
        let t1: &[u32] = &[5, 9];
        let t2: &[u32] = &[6, 8, 8];
        let both = forward(&m, &[a, b], &[t1, t2]);
        let only = forward(&m, &[b], &[t2]);
        for r in 0..3 {
            for c in 0..11 {
                assert!((both.get(2 + r, c) - only.get(r, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_output_projection_gives_uniform_softmax() {
        let mut m = tiny();
        for id in [m.out.w, m.out.b] {
            m.params_mut().get_mut(id).fill(0.0);
        }
        let l = forward(&m, &[&[5, 8]], &[&[6, 9, 10]]);
        for r in 0..l.rows() {
            let p = tensor::log_softmax(l.row(r));
            for x in p {
                assert!((x + math::ln(11.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn incremental_decoder_matches_teacher_forcing() {
        let m = tiny();
        let src = [5u32, 8, 9, 10];
        let tgt = [6u32, 9, 8, 10, 7];
        let full = forward(&m, &[&src], &[&tgt]);
        let z = m.encode_one(5, &src[1..]).unwrap();
        let dec = m.decoder(&z);
        let mut st = dec.start();
        for (t, tok) in tgt.iter().enumerate() {
            let logits = dec.step(&mut st, *tok);
            for (c, v) in logits.iter().enumerate() {
                assert!((v - full.get(t, c)).abs() < 1e-10);
            }
        }
    }

    struct Table {
        /// Logits as a function of the number of tokens fed so far.
        rows: Vec<Vec<f64>>,
    }

    impl StepScorer for Table {
        type State = usize;
        fn start(&self) -> usize {
            0
        }
        fn step(&self, s: &mut usize, _t: u32) -> Vec<f64> {
            *s += 1;
            self.rows[(*s - 1).min(self.rows.len() - 1)].clone()
        }
    }

    #[test]
    fn greedy_repeats_argmax_until_max_len() {
        let t = Table {
            rows: vec![vec![0.0, 0.0, 0.0, 0.0, 0.0, 3.0]],
        };
        let cfg = DecodeConfig {
            strategy: Strategy::Greedy,
            max_len: 4,
        };
        assert_eq!(generate(&t, 1, &cfg, None).unwrap(), vec![5, 5, 5, 5]);
    }

    #[test]
    fn ban_all_but_eos_gives_empty_output() {
        let t = Table {
            rows: vec![vec![0.0, 0.0, -5.0, 0.0, 0.0, 3.0]],
        };
        let mut ban = vec![true; 6];
        ban[EOS as usize] = false;
        for strategy in [Strategy::Greedy, Strategy::Beam(3)] {
            let cfg = DecodeConfig { strategy, max_len: 5 };
            assert!(generate(&t, 1, &cfg, Some(&ban)).unwrap().is_empty());
        }
        let all = vec![true; 6];
        let cfg = DecodeConfig::default();
        assert_eq!(generate(&t, 1, &cfg, Some(&all)), Err(Error::AllTokensBanned));
    }

    #[test]
    fn zero_critic_scores_zero() {
        let mut c = Critic::new(
            CriticDims {
                input: 4,
                fc1: 6,
                fc2: 5,
                gru: 3,
            },
            1,
        )
        .unwrap();
        for t in c.params_mut().tensors_mut() {
            t.fill(0.0);
        }
        assert_eq!(c.score_one(&Matrix::filled(3, 4, 0.7)), 0.0);
    }

    #[test]
    fn critic_handles_short_and_long_inputs() {
        let c = Critic::new(CriticDims::new(4), 1).unwrap();
        for len in [3, 50] {
            let z = Matrix::from_vec(len, 4, (0..len * 4).map(|i| math::sin(i as f64)).collect());
            assert!(c.score_one(&z).is_finite());
        }
    }

    #[test]
    fn clipping_bounds_every_weight() {
        let mut c = Critic::new(CriticDims::new(4), 1).unwrap();
        c.clip(0.01);
        assert!(c.params().iter().all(|(_, t)| t.max_abs() <= 0.01));
    }
}
