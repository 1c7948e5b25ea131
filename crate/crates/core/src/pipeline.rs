//! Backtranslation synthesis, script-ban masks and the iterative training
//! loop that alternates the two translation directions.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::corpus::{build_vocab, Sentence, VocabConfig, Vocabulary, OTHER_CLASS, SPECIAL_CLASS};
use crate::error::{Error, Result};
use crate::eval::{bleu, BleuConfig};
use crate::metrics::MetricsRecord;
use crate::model::{structural_ban, translate, Critic, CriticDims, DecodeConfig, Model, ModelDims};
use crate::objectives::{Direction, LossWeights};
use crate::rng::{domain, mix64};
use crate::synthlang::{DatasetBundle, EN, HRL, LRL};
use crate::trainer::{
    finetune_bt, pretrain_denoising, train_en2lrl, train_lrl2en, LangTokens, Pair, TaskData, TrainConfig, TrainLog,
};

/// A tokenized bundle ready for training.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub vocab: Vocabulary,
    pub langs: LangTokens,
    /// `(En, HRL)` pairs.
    pub parallel: Vec<Pair>,
    pub mono_en: Vec<Vec<u32>>,
    pub mono_hrl: Vec<Vec<u32>>,
    pub mono_lrl: Vec<Vec<u32>>,
    pub dev: HeldOut,
    pub test: HeldOut,
}

/// Held-out `(En, LRL)` pairs, tokenized and as text for BLEU references.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HeldOut {
    pub en: Vec<Vec<u32>>,
    pub lrl: Vec<Vec<u32>>,
    pub en_text: Vec<String>,
    pub lrl_text: Vec<String>,
}

impl HeldOut {
    fn new(vocab: &Vocabulary, pairs: &[(Sentence, Sentence)]) -> Self {
        let mut h = HeldOut::default();
        for (en, lrl) in pairs {
            h.en.push(vocab.tokenize(en.as_str(), EN).tokens);
            h.lrl.push(vocab.tokenize(lrl.as_str(), LRL).tokens);
            h.en_text.push(en.as_str().to_string());
            h.lrl_text.push(lrl.as_str().to_string());
        }
        h
    }

    pub fn len(&self) -> usize {
        self.en.len()
    }

    pub fn is_empty(&self) -> bool {
        self.en.is_empty()
    }
}

fn lang_tokens(vocab: &Vocabulary) -> Result<LangTokens> {
    let get = |l: &str| vocab.lang_token(l).ok_or_else(|| Error::InvalidConfig(format!("vocabulary lacks language {l:?}")));
    Ok(LangTokens {
        en: get(EN)?,
        hrl: get(HRL)?,
        lrl: get(LRL)?,
    })
}

impl Prepared {
    /// Builds the vocabulary over the training corpora (held-out text is
    /// excluded) and tokenizes everything.
    pub fn new(bundle: &DatasetBundle, vocab_cfg: &VocabConfig) -> Result<Self> {
        let b = bundle;
        let corpora: [Vec<&str>; 5] = [
            b.en_hrl.pairs.iter().map(|(e, _)| e.as_str()).collect(),
            b.en_hrl.pairs.iter().map(|(_, h)| h.as_str()).collect(),
            b.mono_en.sentences.iter().map(Sentence::as_str).collect(),
            b.mono_hrl.sentences.iter().map(Sentence::as_str).collect(),
            b.mono_lrl.sentences.iter().map(Sentence::as_str).collect(),
        ];
        let vocab = build_vocab(corpora.iter().map(|c| c.iter().copied()), &b.languages, vocab_cfg)?;
        Self::with_vocab(bundle, vocab)
    }

    /// Tokenizes `bundle` with an existing vocabulary.
    pub fn with_vocab(bundle: &DatasetBundle, vocab: Vocabulary) -> Result<Self> {
        let b = bundle;
        let langs = lang_tokens(&vocab)?;
        let mono = |c: &[Sentence], lang: &str| -> Vec<Vec<u32>> { c.iter().map(|s| vocab.tokenize(s.as_str(), lang).tokens).collect() };
        let parallel = b
            .en_hrl
            .pairs
            .iter()
            .map(|(e, h)| (vocab.tokenize(e.as_str(), EN).tokens, vocab.tokenize(h.as_str(), HRL).tokens))
            .collect();
        Ok(Self {
            langs,
            parallel,
            mono_en: mono(&b.mono_en.sentences, EN),
            mono_hrl: mono(&b.mono_hrl.sentences, HRL),
            mono_lrl: mono(&b.mono_lrl.sentences, LRL),
            dev: HeldOut::new(&vocab, &b.dev_en_lrl.pairs),
            test: HeldOut::new(&vocab, &b.test_en_lrl.pairs),
            vocab,
        })
    }

    pub fn script_classes_disjoint(&self) -> bool {
        match (self.vocab.language_class(HRL), self.vocab.language_class(LRL)) {
            (Some(h), Some(l)) => h != l,
            _ => false,
        }
    }

    /// Script classes an En→LRL decoder must avoid: every declared class
    /// except the LRL's own (punctuation-like `other` stays allowed).
    pub fn foreign_classes(&self) -> Vec<String> {
        let lrl = self.vocab.language_class(LRL).unwrap_or_default();
        self.vocab
            .known_classes()
            .filter(|c| *c != lrl && *c != OTHER_CLASS && *c != SPECIAL_CLASS)
            .map(ToString::to_string)
            .collect()
    }

    pub fn mono_en_side(&self) -> Vec<&[u32]> {
        self.parallel.iter().map(|(e, _)| e.as_slice()).collect()
    }
}

/// Bans every ordinary token whose surface contains a character of one of
/// `classes`. Specials are never banned here.
pub fn build_ban_mask<S: AsRef<str>>(vocab: &Vocabulary, classes: &[S]) -> Result<Vec<bool>> {
    let known: BTreeSet<&str> = vocab.known_classes().collect();
    for c in classes {
        if !known.contains(c.as_ref()) {
            return Err(Error::UnknownScriptClass(c.as_ref().to_string()));
        }
    }
    Ok((0..vocab.len() as u32)
        .map(|id| !vocab.is_special(id) && vocab.token(id).chars().any(|ch| classes.iter().any(|c| vocab.char_class(ch) == c.as_ref())))
        .collect())
}

/// Structural specials OR-ed with an optional script ban.
pub fn decode_ban(vocab: &Vocabulary, script: Option<&[bool]>) -> Vec<bool> {
    let mut ban = structural_ban(vocab.len(), vocab.special_count());
    if let Some(s) = script {
        for (b, s) in ban.iter_mut().zip(s) {
            *b |= *s;
        }
    }
    ban
}

/// Provenance of a backtranslated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct BtMeta {
    /// The direction the pairs train.
    pub direction: Direction,
    /// Name of the model that produced the synthetic side.
    pub producer: String,
    pub decode: DecodeConfig,
    pub iteration: usize,
    /// Inputs whose generation came out empty.
    pub dropped: usize,
}

/// `(synthetic source, genuine target)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct BtDataset {
    pub pairs: Vec<Pair>,
    pub meta: BtMeta,
}

impl BtDataset {
    pub fn record(&self, run: &str) -> MetricsRecord {
        MetricsRecord::new(run, self.meta.iteration as u64)
            .with("bt.pairs", self.pairs.len() as f64)
            .with("bt.dropped", self.meta.dropped as f64)
    }
}

fn synthesize(
    model: &Model,
    genuine: &[&[u32]],
    src_lang: u32,
    tgt_lang: u32,
    decode: &DecodeConfig,
    ban: &[bool],
    meta: BtMeta,
) -> Result<BtDataset> {
    let outputs = translate(model, genuine, src_lang, tgt_lang, decode, ban)?;
    let mut pairs = Vec::with_capacity(genuine.len());
    let mut dropped = 0;
    for (y, x) in outputs.into_iter().zip(genuine) {
        if y.is_empty() || x.is_empty() {
            dropped += 1;
        } else {
            pairs.push((y, x.to_vec()));
        }
    }
    Ok(BtDataset {
        pairs,
        meta: BtMeta { dropped, ..meta },
    })
}

/// Pairs `(Y_En, X_LRL)` for En→LRL training: each LRL sentence is encoded
/// as if it were HRL and decoded into English.
pub fn synthesize_bt_for_en2lrl(
    lrl2en: &Model,
    producer: &str,
    mono_lrl: &[Vec<u32>],
    langs: LangTokens,
    vocab: &Vocabulary,
    decode: &DecodeConfig,
    iteration: usize,
) -> Result<BtDataset> {
    let inputs: Vec<&[u32]> = mono_lrl.iter().map(Vec::as_slice).collect();
    let ban = decode_ban(vocab, None);
    let meta = BtMeta {
        direction: Direction::En2Lrl,
        producer: producer.to_string(),
        decode: *decode,
        iteration,
        dropped: 0,
    };
    synthesize(lrl2en, &inputs, langs.hrl, langs.en, decode, &ban, meta)
}

/// Pairs `(Y_LRL, X_En)` for LRL→En training from the English side of the
/// parallel corpus. `script_ban` restricts the generated LRL.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_bt_for_lrl2en(
    en2lrl: &Model,
    producer: &str,
    english: &[&[u32]],
    langs: LangTokens,
    vocab: &Vocabulary,
    decode: &DecodeConfig,
    script_ban: Option<&[bool]>,
    iteration: usize,
) -> Result<BtDataset> {
    let ban = decode_ban(vocab, script_ban);
    let meta = BtMeta {
        direction: Direction::Lrl2En,
        producer: producer.to_string(),
        decode: *decode,
        iteration,
        dropped: 0,
    };
    synthesize(en2lrl, english, langs.en, langs.lrl, decode, &ban, meta)
}

/// Number of genuine-side sentences of `bt` that occur in `held_out`.
/// The synthetic side is machine output and may coincide with a held-out
/// sentence without any data having leaked, so it is not checked.
pub fn held_out_overlap(bt: &BtDataset, held_out: &HeldOut) -> usize {
    let genuine: BTreeSet<&[u32]> = match bt.meta.direction {
        Direction::En2Lrl => held_out.lrl.iter().map(Vec::as_slice).collect(),
        Direction::Lrl2En => held_out.en.iter().map(Vec::as_slice).collect(),
    };
    bt.pairs.iter().filter(|(_, x)| genuine.contains(x.as_slice())).count()
}

/// When to restrict En→LRL decoding to the LRL script.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BanPolicy {
    /// On exactly when HRL and LRL use different script classes.
    #[default]
    Auto,
    On,
    Off,
}

/// Settings of the whole iterative pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    /// Model shape; `vocab` is replaced by the vocabulary size.
    pub model: ModelDims,
    /// Critic widths; `input` is replaced by `d_model`.
    pub critic: CriticDims,
    pub pretrain: TrainConfig,
    /// Also denoise LRL monolingual text during pretraining.
    pub pretrain_lrl: bool,
    /// The iteration-0 HRL→En model and the un-adapted En→HRL baseline.
    pub supervised: TrainConfig,
    pub en2lrl: TrainConfig,
    pub lrl2en: TrainConfig,
    /// Epochs of both directions from iteration 2 on.
    pub later_epochs: usize,
    pub finetune: bool,
    /// Learning rate of the fine-tune pass; `None` keeps the En→LRL rate.
    pub finetune_lr: Option<f64>,
    pub bt_decode: DecodeConfig,
    pub eval_decode: DecodeConfig,
    pub bleu: BleuConfig,
    pub ban: BanPolicy,
    pub k_max: usize,
    /// Stop once both directions improve dev BLEU by less than this.
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            model: ModelDims::new(0),
            critic: CriticDims::new(0),
            pretrain: TrainConfig {
                epochs: 1,
                ..TrainConfig::default()
            },
            pretrain_lrl: false,
            supervised: TrainConfig {
                epochs: 5,
                weights: supervised_weights(),
                ..TrainConfig::default()
            },
            en2lrl: TrainConfig::default(),
            lrl2en: TrainConfig::lrl2en(),
            later_epochs: 10,
            finetune: true,
            finetune_lr: None,
            bt_decode: DecodeConfig::default(),
            eval_decode: DecodeConfig::default(),
            bleu: BleuConfig::default(),
            ban: BanPolicy::Auto,
            k_max: 3,
            epsilon: 0.2,
            seed: 1,
        }
    }
}

/// Translation loss only.
pub fn supervised_weights() -> LossWeights {
    LossWeights {
        translation: 1.0,
        denoising: 0.0,
        backtranslation: 0.0,
        adv_generator: 0.0,
        adv_critic: 0.0,
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        for c in [&self.pretrain, &self.supervised, &self.en2lrl, &self.lrl2en] {
            c.validate()?;
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::InvalidConfig("epsilon must be non-negative".into()));
        }
        if self.finetune_lr.is_some_and(|lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::InvalidConfig("finetune_lr must be positive".into()));
        }
        self.bleu.validate()
    }

    pub fn model_dims(&self, vocab: &Vocabulary) -> ModelDims {
        ModelDims {
            vocab: vocab.len(),
            ..self.model
        }
    }

    pub fn critic_dims(&self) -> CriticDims {
        CriticDims {
            input: self.model.d_model,
            ..self.critic
        }
    }

    /// Seed for a named phase of iteration `k`.
    pub fn phase_seed(&self, phase: &str, k: usize) -> u64 {
        mix64(self.seed ^ domain(phase) ^ mix64(k as u64))
    }

    pub fn script_ban(&self, prepared: &Prepared) -> bool {
        match self.ban {
            BanPolicy::Auto => prepared.script_classes_disjoint(),
            BanPolicy::On => true,
            BanPolicy::Off => false,
        }
    }

    fn phase_cfg(&self, base: &TrainConfig, phase: &str, k: usize) -> TrainConfig {
        TrainConfig {
            epochs: if k >= 2 { self.later_epochs } else { base.epochs },
            seed: self.phase_seed(phase, k),
            ..*base
        }
    }
}

/// Receives artifacts as the pipeline produces them. Every method defaults
/// to doing nothing.
pub trait Observer {
    fn train_log(&mut self, _phase: &str, _log: &TrainLog) -> Result<()> {
        Ok(())
    }
    fn model(&mut self, _name: &str, _model: &Model) -> Result<()> {
        Ok(())
    }
    fn dataset(&mut self, _name: &str, _data: &BtDataset) -> Result<()> {
        Ok(())
    }
    fn metrics(&mut self, _record: &MetricsRecord) -> Result<()> {
        Ok(())
    }
}

/// Ignores everything.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoObserver;

impl Observer for NoObserver {}

/// Scores `model` on held-out text: encode `inputs` with `src`, decode after
/// `tgt`, compare with `refs`. Returns BLEU and the outputs.
#[allow(clippy::too_many_arguments)]
pub fn score(
    model: &Model,
    vocab: &Vocabulary,
    inputs: &[Vec<u32>],
    refs: &[String],
    src: u32,
    tgt: u32,
    decode: &DecodeConfig,
    ban: &[bool],
    cfg: &BleuConfig,
) -> Result<(f64, Vec<Vec<u32>>)> {
    let ins: Vec<&[u32]> = inputs.iter().map(Vec::as_slice).collect();
    let out = translate(model, &ins, src, tgt, decode, ban)?;
    let hyps: Vec<String> = out.iter().map(|o| vocab.detokenize(o)).collect();
    let refs: Vec<&str> = refs.iter().map(String::as_str).collect();
    let hyps: Vec<&str> = hyps.iter().map(String::as_str).collect();
    Ok((bleu(&hyps, &refs, cfg)?, out))
}

/// En→LRL BLEU of `model` on `split`, decoding after `tgt`.
pub fn bleu_en2lrl(model: &Model, p: &Prepared, split: &HeldOut, tgt: u32, cfg: &PipelineConfig, script_ban: Option<&[bool]>) -> Result<f64> {
    let ban = decode_ban(&p.vocab, script_ban);
    Ok(score(model, &p.vocab, &split.en, &split.lrl_text, p.langs.en, tgt, &cfg.eval_decode, &ban, &cfg.bleu)?.0)
}

/// LRL→En BLEU of `model` on `split`; LRL is encoded as HRL.
pub fn bleu_lrl2en(model: &Model, p: &Prepared, split: &HeldOut, cfg: &PipelineConfig) -> Result<f64> {
    let ban = decode_ban(&p.vocab, None);
    Ok(score(model, &p.vocab, &split.lrl, &split.en_text, p.langs.hrl, p.langs.en, &cfg.eval_decode, &ban, &cfg.bleu)?.0)
}

/// The pretrained base that every first-iteration model starts from.
pub fn pretrained_base(p: &Prepared, cfg: &PipelineConfig, obs: &mut dyn Observer) -> Result<Model> {
    let dims = cfg.model_dims(&p.vocab);
    let mut base = Model::init(dims, cfg.phase_seed("init", 0), p.langs.hrl, p.langs.lrl)?;
    let mut corpora: Vec<(&[Vec<u32>], u32)> = Vec::new();
    for (c, lang) in [(&p.mono_en, p.langs.en), (&p.mono_hrl, p.langs.hrl)] {
        if !c.is_empty() {
            corpora.push((c.as_slice(), lang));
        }
    }
    if cfg.pretrain_lrl && !p.mono_lrl.is_empty() {
        corpora.push((p.mono_lrl.as_slice(), p.langs.lrl));
    }
    if cfg.pretrain.epochs > 0 && !corpora.is_empty() {
        let pc = TrainConfig {
            seed: cfg.phase_seed("pretrain", 0),
            ..cfg.pretrain
        };
        let log = pretrain_denoising(&mut base, &corpora, &pc)?;
        obs.train_log("pretrain", &log)?;
        // Pretraining trains the LRL row only if LRL text was included.
        if !cfg.pretrain_lrl {
            base.copy_embedding_row(p.langs.hrl, p.langs.lrl);
        }
    }
    obs.model("base", &base)?;
    Ok(base)
}

/// Supervised HRL→En model (iteration 0).
pub fn supervised_hrl2en(base: &Model, p: &Prepared, cfg: &PipelineConfig, obs: &mut dyn Observer) -> Result<Model> {
    let mut m = base.clone();
    let tc = TrainConfig {
        seed: cfg.phase_seed("hrl2en", 0),
        weights: supervised_weights(),
        ..cfg.supervised
    };
    let data = TaskData {
        parallel: &p.parallel,
        ..TaskData::default()
    };
    let log = train_lrl2en(&mut m, &mut [], &data, p.langs, &tc)?;
    obs.train_log("hrl2en-0", &log)?;
    Ok(m)
}

/// Supervised En→HRL model: the un-adapted baseline for En→LRL.
pub fn supervised_en2hrl(base: &Model, p: &Prepared, cfg: &PipelineConfig, obs: &mut dyn Observer) -> Result<Model> {
    let mut m = base.clone();
    let tc = TrainConfig {
        seed: cfg.phase_seed("en2hrl", 0),
        weights: supervised_weights(),
        ..cfg.supervised
    };
    let data = TaskData {
        parallel: &p.parallel,
        ..TaskData::default()
    };
    let log = train_en2lrl(&mut m, &mut [], &data, p.langs, &tc)?;
    obs.train_log("en2hrl-0", &log)?;
    Ok(m)
}

fn fresh_critics(cfg: &PipelineConfig, n: usize, phase: &str, k: usize) -> Result<Vec<Critic>> {
    (0..n)
        .map(|i| Critic::new(cfg.critic_dims(), cfg.phase_seed(phase, k) ^ mix64(i as u64 + 1)))
        .collect()
}

/// Trains an En→LRL model from `init` with the given BT data, followed by
/// the BT fine-tune pass when enabled. `weights` overrides the configured
/// loss weights (used by ablations).
#[allow(clippy::too_many_arguments)]
pub fn en2lrl_phase(
    init: &Model,
    p: &Prepared,
    mono_lrl: &[Vec<u32>],
    bt: &[Pair],
    cfg: &PipelineConfig,
    weights: Option<LossWeights>,
    finetune: bool,
    k: usize,
    obs: &mut dyn Observer,
) -> Result<Model> {
    let mut m = init.clone();
    let mut tc = cfg.phase_cfg(&cfg.en2lrl, "en2lrl", k);
    if let Some(w) = weights {
        tc.weights = w;
    }
    let mut critics = fresh_critics(cfg, 2, "en2lrl-critic", k)?;
    let data = TaskData {
        parallel: &p.parallel,
        mono_hrl: &p.mono_hrl,
        mono_lrl,
        bt,
    };
    let log = train_en2lrl(&mut m, &mut critics, &data, p.langs, &tc)?;
    obs.train_log(&format!("en2lrl-{k}"), &log)?;
    if finetune && !bt.is_empty() {
        finetune_phase(&mut m, p, bt, cfg, cfg.script_ban(p), k, obs)?;
    }
    Ok(m)
}

/// The backtranslation-only pass that closes an En→LRL phase. It is a no-op
/// when `script_ban` is set.
pub fn finetune_phase(
    m: &mut Model,
    p: &Prepared,
    bt: &[Pair],
    cfg: &PipelineConfig,
    script_ban: bool,
    k: usize,
    obs: &mut dyn Observer,
) -> Result<()> {
    let mut fc = TrainConfig {
        seed: cfg.phase_seed("finetune", k),
        ..cfg.phase_cfg(&cfg.en2lrl, "en2lrl", k)
    };
    if let Some(lr) = cfg.finetune_lr {
        fc.adam.lr = lr;
    }
    let log = finetune_bt(m, bt, Direction::En2Lrl, p.langs, &fc, script_ban)?;
    obs.train_log(&format!("finetune-{k}"), &log)
}

/// Trains an LRL→En model from `init`.
pub fn lrl2en_phase(
    init: &Model,
    p: &Prepared,
    bt: &[Pair],
    cfg: &PipelineConfig,
    weights: Option<LossWeights>,
    k: usize,
    obs: &mut dyn Observer,
) -> Result<Model> {
    let mut m = init.clone();
    let mut tc = cfg.phase_cfg(&cfg.lrl2en, "lrl2en", k);
    if let Some(w) = weights {
        tc.weights = w;
    }
    let mut critics = fresh_critics(cfg, 1, "lrl2en-critic", k)?;
    let data = TaskData {
        parallel: &p.parallel,
        mono_hrl: &p.mono_hrl,
        mono_lrl: &p.mono_lrl,
        bt,
    };
    let log = train_lrl2en(&mut m, &mut critics, &data, p.langs, &tc)?;
    obs.train_log(&format!("lrl2en-{k}"), &log)?;
    Ok(m)
}

/// Dev BLEU of both directions after one iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationBleu {
    pub k: usize,
    /// Absent at iteration 0, which has no En→LRL model.
    pub en2lrl: Option<f64>,
    pub lrl2en: f64,
}

/// Models and dev scores of the iterations run so far.
#[derive(Clone, Debug)]
pub struct IterationState {
    /// Last completed iteration.
    pub k: usize,
    pub base: Model,
    /// The supervised HRL→En model.
    pub m0: Model,
    /// `en2lrl[i]` is the En→LRL model of iteration `i + 1`.
    pub en2lrl: Vec<Model>,
    pub lrl2en: Vec<Model>,
    pub history: Vec<IterationBleu>,
    pub converged: bool,
}

impl IterationState {
    /// Latest LRL→En model; the supervised one before iteration 1.
    pub fn latest_lrl2en(&self) -> &Model {
        self.lrl2en.last().unwrap_or(&self.m0)
    }
}

/// Whether both directions improved by less than `epsilon`.
pub fn converged(prev: &IterationBleu, cur: &IterationBleu, epsilon: f64) -> bool {
    let Some(prev_e) = prev.en2lrl else { return false };
    let Some(cur_e) = cur.en2lrl else { return false };
    cur_e - prev_e < epsilon && cur.lrl2en - prev.lrl2en < epsilon
}

fn dev_record(k: usize, direction: Direction, b: f64) -> MetricsRecord {
    MetricsRecord::new(direction.as_str(), k as u64).with("bleu.dev", b)
}

/// The iterative loop. Iteration 0 trains the supervised HRL→En model;
/// each iteration `k ≥ 1` then backtranslates LRL monolingual text with
/// the latest LRL→En model, trains En→LRL, backtranslates the English side
/// of the parallel data with the new En→LRL model and trains LRL→En.
pub fn run_iterations(p: &Prepared, cfg: &PipelineConfig, obs: &mut dyn Observer) -> Result<IterationState> {
    cfg.validate()?;
    let base = pretrained_base(p, cfg, obs)?;
    let m0 = supervised_hrl2en(&base, p, cfg, obs)?;
    obs.model("lrl2en-0", &m0)?;
    let b0 = bleu_lrl2en(&m0, p, &p.dev, cfg)?;
    obs.metrics(&dev_record(0, Direction::Lrl2En, b0))?;
    let mut st = IterationState {
        k: 0,
        base,
        m0,
        en2lrl: Vec::new(),
        lrl2en: Vec::new(),
        history: alloc::vec![IterationBleu {
            k: 0,
            en2lrl: None,
            lrl2en: b0,
        }],
        converged: false,
    };
    let ban_on = cfg.script_ban(p);
    let script = if ban_on { Some(build_ban_mask(&p.vocab, &p.foreign_classes())?) } else { None };
    let english = p.mono_en_side();

    for k in 1..=cfg.k_max {
        let producer = format!("lrl2en-{}", k - 1);
        let bt_e = synthesize_bt_for_en2lrl(st.latest_lrl2en(), &producer, &p.mono_lrl, p.langs, &p.vocab, &cfg.bt_decode, k)?;
        check_leak(&bt_e, p)?;
        obs.dataset(&format!("bt-en2lrl-{k}"), &bt_e)?;
        obs.metrics(&bt_e.record("bt-en2lrl"))?;
        let init = if k == 1 { &st.base } else { &st.en2lrl[k - 2] };
        let e2l = en2lrl_phase(init, p, &p.mono_lrl, &bt_e.pairs, cfg, None, cfg.finetune, k, obs)?;
        obs.model(&format!("en2lrl-{k}"), &e2l)?;

        let producer = format!("en2lrl-{k}");
        let bt_l = synthesize_bt_for_lrl2en(&e2l, &producer, &english, p.langs, &p.vocab, &cfg.bt_decode, script.as_deref(), k)?;
        check_leak(&bt_l, p)?;
        obs.dataset(&format!("bt-lrl2en-{k}"), &bt_l)?;
        obs.metrics(&bt_l.record("bt-lrl2en"))?;
        let init = if k == 1 { &st.base } else { &st.lrl2en[k - 2] };
        let l2e = lrl2en_phase(init, p, &bt_l.pairs, cfg, None, k, obs)?;
        obs.model(&format!("lrl2en-{k}"), &l2e)?;

        let be = bleu_en2lrl(&e2l, p, &p.dev, p.langs.lrl, cfg, script.as_deref())?;
        let bl = bleu_lrl2en(&l2e, p, &p.dev, cfg)?;
        obs.metrics(&dev_record(k, Direction::En2Lrl, be))?;
        obs.metrics(&dev_record(k, Direction::Lrl2En, bl))?;
        let cur = IterationBleu {
            k,
            en2lrl: Some(be),
            lrl2en: bl,
        };
        st.en2lrl.push(e2l);
        st.lrl2en.push(l2e);
        st.k = k;
        let prev = *st.history.last().expect("iteration 0 is recorded");
        st.history.push(cur);
        if k >= 2 && converged(&prev, &cur, cfg.epsilon) {
            log::info!("converged after iteration {k}");
            st.converged = true;
            break;
        }
    }
    Ok(st)
}

fn check_leak(bt: &BtDataset, p: &Prepared) -> Result<()> {
    let n = held_out_overlap(bt, &p.test);
    if n > 0 {
        return Err(Error::InvalidConfig(format!("{n} test sentences entered backtranslation data")));
    }
    Ok(())
}

/// Iteration-1 En→LRL BLEU on the test set for growing prefixes of the LRL
/// monolingual corpus. Everything else (base model, supervised model,
/// parallel data, seeds) is shared across sizes.
pub fn run_mono_ablation(
    p: &Prepared,
    base: &Model,
    m0: &Model,
    sizes: &[usize],
    cfg: &PipelineConfig,
    obs: &mut dyn Observer,
) -> Result<Vec<(usize, f64)>> {
    if sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidConfig("ablation sizes must be ascending".into()));
    }
    let available = p.mono_lrl.len();
    if let Some(&size) = sizes.iter().find(|&&s| s > available || s == 0) {
        return Err(Error::SizeExceedsCorpus { size, available });
    }
    let largest = sizes.last().copied().unwrap_or(0);
    // Greedy generation is per sentence, so prefixes of one synthesis over
    // the largest prefix equal separate syntheses.
    let inputs: Vec<&[u32]> = p.mono_lrl[..largest].iter().map(Vec::as_slice).collect();
    let ban = decode_ban(&p.vocab, None);
    let outputs = translate(m0, &inputs, p.langs.hrl, p.langs.en, &cfg.bt_decode, &ban)?;
    let script = if cfg.script_ban(p) { Some(build_ban_mask(&p.vocab, &p.foreign_classes())?) } else { None };
    let mut table = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let bt: Vec<Pair> = outputs[..size]
            .iter()
            .zip(&p.mono_lrl)
            .filter(|(y, x)| !y.is_empty() && !x.is_empty())
            .map(|(y, x)| (y.clone(), x.clone()))
            .collect();
        let m = en2lrl_phase(base, p, &p.mono_lrl[..size], &bt, cfg, None, cfg.finetune, 1, obs)?;
        let b = bleu_en2lrl(&m, p, &p.test, p.langs.lrl, cfg, script.as_deref())?;
        obs.metrics(&MetricsRecord::new("ablation", size as u64).with("size", size as f64).with("bleu", b))?;
        table.push((size, b));
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{LanguageTag, TokenMode};
    use crate::model::Strategy;
    use crate::synthlang::{gen_family, FamilyConfig};
    use alloc::vec;

    fn vocab_of(words: &[&str]) -> Vocabulary {
        let langs = [
            LanguageTag::new("en", "ab".chars(), "latin").unwrap(),
            LanguageTag::new("x", "κλ".chars(), "greek").unwrap(),
        ];
        build_vocab([words.iter().copied()], &langs, &VocabConfig::default()).unwrap()
    }

    #[test]
    fn ban_mask_scans_every_character() {
        let v = vocab_of(&["ab", "κλ", "aκ", "."]);
        assert!(build_ban_mask::<&str>(&v, &[]).unwrap().iter().all(|b| !b));
        let m = build_ban_mask(&v, &["latin"]).unwrap();
        let banned: Vec<&str> = (0..v.len() as u32).filter(|&i| m[i as usize]).map(|i| v.token(i)).collect();
        assert_eq!(banned, vec!["ab", "aκ"]);
        for i in 0..v.special_count() {
            assert!(!m[i as usize]);
        }
        assert_eq!(build_ban_mask(&v, &["cyrillic"]), Err(Error::UnknownScriptClass("cyrillic".into())));
    }

    fn tiny() -> (Prepared, PipelineConfig) {
        let fam = FamilyConfig {
            n_parallel: 60,
            n_mono: 40,
            n_mono_lrl: 40,
            n_dev: 10,
            n_test: 10,
            ..FamilyConfig::default()
        };
        let bundle = gen_family(&fam).unwrap();
        let p = Prepared::new(&bundle, &VocabConfig { mode: TokenMode::Word, min_count: 1 }).unwrap();
        let quick = TrainConfig {
            epochs: 1,
            accumulation: 1,
            batch_tokens: 400,
            critic_every: 1,
            ..TrainConfig::default()
        };
        let cfg = PipelineConfig {
            model: ModelDims {
                vocab: 0,
                d_model: 8,
                heads: 2,
                enc_layers: 1,
                dec_layers: 1,
                ffn: 16,
            },
            critic: CriticDims { input: 0, fc1: 8, fc2: 8, gru: 4 },
            pretrain: quick,
            supervised: TrainConfig { weights: supervised_weights(), ..quick },
            en2lrl: quick,
            lrl2en: TrainConfig { weights: LossWeights { denoising: 0.0, ..quick.weights }, ..quick },
            later_epochs: 1,
            bt_decode: DecodeConfig { strategy: Strategy::Greedy, max_len: 8 },
            eval_decode: DecodeConfig { strategy: Strategy::Greedy, max_len: 8 },
            k_max: 2,
            epsilon: 0.0,
            ..PipelineConfig::default()
        };
        (p, cfg)
    }

    #[derive(Default)]
    struct Names(Vec<String>);

    impl Observer for Names {
        fn model(&mut self, name: &str, _: &Model) -> Result<()> {
            self.0.push(name.to_string());
            Ok(())
        }
        fn dataset(&mut self, name: &str, _: &BtDataset) -> Result<()> {
            self.0.push(name.to_string());
            Ok(())
        }
    }

    #[test]
    fn prepared_excludes_held_out_text_from_vocab() {
        let (p, _) = tiny();
        assert_eq!(p.parallel.len(), 60);
        assert_eq!(p.test.len(), 10);
        assert!(!p.script_classes_disjoint());
    }

    #[test]
    fn empty_inputs_give_empty_datasets() {
        let (p, cfg) = tiny();
        let m = Model::init(cfg.model_dims(&p.vocab), 3, p.langs.hrl, p.langs.lrl).unwrap();
        let a = synthesize_bt_for_en2lrl(&m, "m", &[], p.langs, &p.vocab, &cfg.bt_decode, 1).unwrap();
        assert!(a.pairs.is_empty());
        let b = synthesize_bt_for_lrl2en(&m, "m", &[], p.langs, &p.vocab, &cfg.bt_decode, None, 1).unwrap();
        assert!(b.pairs.is_empty());
        assert_eq!(b.meta.dropped, 0);
    }

    #[test]
    fn bt_accounting_and_ban() {
        let (p, cfg) = tiny();
        let m = Model::init(cfg.model_dims(&p.vocab), 3, p.langs.hrl, p.langs.lrl).unwrap();
        let en = p.mono_en_side();
        let ban = build_ban_mask(&p.vocab, &["latin"]).unwrap();
        let d = synthesize_bt_for_lrl2en(&m, "m", &en, p.langs, &p.vocab, &cfg.bt_decode, Some(&ban), 2).unwrap();
        assert_eq!(d.pairs.len() + d.meta.dropped, en.len());
        assert_eq!(d.meta.iteration, 2);
        // Every ordinary token is latin, so the only legal output is EOS.
        assert!(d.pairs.is_empty());
        let d = synthesize_bt_for_en2lrl(&m, "m", &p.mono_lrl, p.langs, &p.vocab, &cfg.bt_decode, 1).unwrap();
        assert_eq!(d.pairs.len() + d.meta.dropped, p.mono_lrl.len());
        for (_, x) in &d.pairs {
            assert!(p.mono_lrl.contains(x));
        }
    }

    #[test]
    fn zero_iterations_yield_only_the_supervised_model() {
        let (p, mut cfg) = tiny();
        cfg.k_max = 0;
        let mut names = Names::default();
        let st = run_iterations(&p, &cfg, &mut names).unwrap();
        assert_eq!(st.k, 0);
        assert!(st.en2lrl.is_empty() && st.lrl2en.is_empty());
        assert_eq!(names.0, vec!["base", "lrl2en-0"]);
    }

    #[test]
    fn two_iterations_produce_both_directions_in_order() {
        let (p, cfg) = tiny();
        let mut names = Names::default();
        let st = run_iterations(&p, &cfg, &mut names).unwrap();
        assert_eq!(st.k, 2);
        assert_eq!(
            names.0,
            vec![
                "base",
                "lrl2en-0",
                "bt-en2lrl-1",
                "en2lrl-1",
                "bt-lrl2en-1",
                "lrl2en-1",
                "bt-en2lrl-2",
                "en2lrl-2",
                "bt-lrl2en-2",
                "lrl2en-2",
            ]
        );
        assert_eq!(st.history.len(), 3);
    }

    #[test]
    fn convergence_needs_both_directions_flat() {
        let a = IterationBleu { k: 1, en2lrl: Some(10.0), lrl2en: 10.0 };
        let flat = IterationBleu { k: 2, en2lrl: Some(10.1), lrl2en: 10.1 };
        let up = IterationBleu { k: 2, en2lrl: Some(10.1), lrl2en: 11.0 };
        assert!(converged(&a, &flat, 0.2));
        assert!(!converged(&a, &up, 0.2));
    }

    #[test]
    fn ablation_rejects_oversized_and_repeats_duplicates() {
        let (p, cfg) = tiny();
        let base = Model::init(cfg.model_dims(&p.vocab), 3, p.langs.hrl, p.langs.lrl).unwrap();
        let err = run_mono_ablation(&p, &base, &base, &[10, 1000], &cfg, &mut NoObserver).unwrap_err();
        assert_eq!(err, Error::SizeExceedsCorpus { size: 1000, available: 40 });
        let t = run_mono_ablation(&p, &base, &base, &[20, 20], &cfg, &mut NoObserver).unwrap();
        assert_eq!(t[0].1, t[1].1);
    }
}
