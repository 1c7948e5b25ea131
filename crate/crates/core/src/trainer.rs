//! Multi-task training loops.
//!
//! One *micro-step* draws one batch from every active task stream and
//! back-propagates the weighted sum of their losses. `accumulation`
//! micro-steps form one *update*: gradients are averaged over the window
//! and applied once. The critics are stepped every `critic_every` updates
//! and the adversarial term enters the generator objective on every
//! `generator_adv_every`-th update.
//!
//! An epoch is one pass over the primary stream (translation when active,
//! otherwise backtranslation, otherwise the first monolingual stream). Other
//! streams reshuffle and restart whenever they run out, so each task sees
//! the same number of batches.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::autodiff::{BoundParams, Gradients, Segments, Tape, Var};
use crate::corpus::MASK;
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;
use crate::model::{Critic, Model};
use crate::noise::{apply_noise, NoiseParams};
use crate::objectives::{self, Direction, LossReport, LossWeights, PackedPairs, PackedSeqs};
use crate::optim::{Adam, AdamConfig, Lipschitz, RmsProp, RmsPropConfig};
use crate::rng::{self, domain};

/// Source and target token ids (language tokens excluded).
pub type Pair = (Vec<u32>, Vec<u32>);

/// Language-token ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LangTokens {
    pub en: u32,
    pub hrl: u32,
    pub lrl: u32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Micro-batches per parameter update.
    pub accumulation: usize,
    pub critic_every: usize,
    pub generator_adv_every: usize,
    /// Approximate token budget of one task batch (source plus target).
    pub batch_tokens: usize,
    pub adam: AdamConfig,
    pub rmsprop: RmsPropConfig,
    pub lipschitz: Lipschitz,
    pub weights: LossWeights,
    pub noise: NoiseParams,
    pub seed: u64,
    /// Stops early after this many updates.
    pub max_updates: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            accumulation: 8,
            critic_every: 1,
            generator_adv_every: 3,
            batch_tokens: 512,
            adam: AdamConfig::default(),
            rmsprop: RmsPropConfig::default(),
            lipschitz: Lipschitz::default(),
            weights: LossWeights::default(),
            noise: NoiseParams::default(),
            seed: 1,
            max_updates: None,
        }
    }
}

impl TrainConfig {
    /// Defaults for the LRL→En direction, which has no denoising task.
    pub fn lrl2en() -> Self {
        Self {
            epochs: 10,
            weights: LossWeights {
                denoising: 0.0,
                ..LossWeights::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.accumulation == 0 || self.critic_every == 0 || self.generator_adv_every == 0 {
            return Err(Error::InvalidConfig("accumulation and cadences must be at least 1".into()));
        }
        if self.batch_tokens == 0 {
            return Err(Error::InvalidConfig("batch_tokens must be positive".into()));
        }
        if let Lipschitz::Clip(c) = self.lipschitz {
            if !(c > 0.0) {
                return Err(Error::InvalidConfig("clip value must be positive".into()));
            }
        }
        self.noise.validate()
    }

    fn adversarial(&self) -> bool {
        self.weights.adv_generator != 0.0
    }
}

/// Corpora available to a training run.
#[derive(Clone, Copy, Debug, Default)]
pub struct TaskData<'a> {
    /// En–HRL parallel pairs.
    pub parallel: &'a [Pair],
    pub mono_hrl: &'a [Vec<u32>],
    pub mono_lrl: &'a [Vec<u32>],
    /// Backtranslation pairs: machine-generated source, genuine target.
    pub bt: &'a [Pair],
}

/// Which sub-objectives one update stepped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UpdateAudit {
    /// 1-based update index.
    pub update: usize,
    pub critic: bool,
    pub generator_adv: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<MetricsRecord>,
    pub audit: Vec<UpdateAudit>,
    pub skipped: bool,
}

impl TrainLog {
    pub fn updates(&self) -> usize {
        self.audit.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bucket {
    Translation,
    Denoising,
    Backtranslation,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Group {
    Hrl,
    Lrl,
    En,
}

#[derive(Clone, Copy)]
enum Items<'a> {
    Pairs { pairs: &'a [Pair], swap: bool },
    Mono(&'a [Vec<u32>]),
}

impl<'a> Items<'a> {
    fn len(&self) -> usize {
        match self {
            Items::Pairs { pairs, .. } => pairs.len(),
            Items::Mono(m) => m.len(),
        }
    }

    fn get(&self, i: usize) -> (&'a [u32], &'a [u32]) {
        match *self {
            Items::Pairs { pairs, swap: false } => (&pairs[i].0, &pairs[i].1),
            Items::Pairs { pairs, swap: true } => (&pairs[i].1, &pairs[i].0),
            Items::Mono(m) => (&m[i], &m[i]),
        }
    }
}

struct Stream<'a> {
    name: &'static str,
    items: Items<'a>,
    enc_lang: u32,
    /// `None` for encoder-only streams feeding the critics.
    dec_lang: Option<u32>,
    noised: bool,
    bucket: Bucket,
    group: Option<Group>,
    order: Vec<usize>,
    cursor: usize,
    cycle: u64,
    seed: u64,
}

impl<'a> Stream<'a> {
    #[allow(clippy::too_many_arguments)]
    fn new(
        name: &'static str,
        items: Items<'a>,
        enc_lang: u32,
        dec_lang: Option<u32>,
        noised: bool,
        bucket: Bucket,
        group: Option<Group>,
        seed: u64,
    ) -> Self {
        let mut s = Self {
            name,
            items,
            enc_lang,
            dec_lang,
            noised,
            bucket,
            group,
            order: Vec::new(),
            cursor: 0,
            cycle: 0,
            seed,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.items.len()).collect();
        let mut r = rng::stream(self.seed, domain(self.name), self.cycle);
        self.order.shuffle(&mut r);
        self.cursor = 0;
        self.cycle += 1;
    }

    fn cost(&self, i: usize) -> usize {
        let (s, t) = self.items.get(i);
        match self.dec_lang {
            Some(_) => s.len() + t.len() + 2,
            None => s.len() + 1,
        }
    }

    /// Next batch, restarting the stream when exhausted.
    fn next_cycling(&mut self, budget: usize) -> Vec<usize> {
        let mut batch = Vec::new();
        let mut tokens = 0;
        while tokens < budget {
            if self.cursor == self.order.len() {
                if !batch.is_empty() {
                    break;
                }
                self.reshuffle();
            }
            let i = self.order[self.cursor];
            self.cursor += 1;
            tokens += self.cost(i);
            batch.push(i);
        }
        batch
    }

    /// Batches of one pass over the stream.
    fn epoch_batches(&mut self, budget: usize) -> Vec<Vec<usize>> {
        if self.cursor != 0 {
            self.reshuffle();
        }
        let mut out = Vec::new();
        while self.cursor < self.order.len() {
            out.push(self.next_cycling(budget));
        }
        self.reshuffle();
        out
    }
}

/// A drawn batch ready for the tape.
enum Packed {
    Pairs(PackedPairs),
    Seqs(PackedSeqs),
}

fn prepare(stream: &Stream<'_>, idx: &[usize], noise: &NoiseParams, step: u64) -> Result<Packed> {
    if let Some(dec) = stream.dec_lang {
        let mut owned: Vec<(Vec<u32>, &[u32])> = Vec::with_capacity(idx.len());
        for (k, &i) in idx.iter().enumerate() {
            let (s, t) = stream.items.get(i);
            let src = if stream.noised {
                let mut r = rng::stream(stream.seed ^ domain("noise"), domain(stream.name) ^ step, k as u64);
                apply_noise(s, noise, MASK, &mut r)
            } else {
                s.to_vec()
            };
            owned.push((src, t));
        }
        let pairs: Vec<(&[u32], &[u32])> = owned.iter().map(|(s, t)| (s.as_slice(), *t)).collect();
        Ok(Packed::Pairs(PackedPairs::new(&pairs, stream.enc_lang, dec)?))
    } else {
        let seqs: Vec<&[u32]> = idx.iter().map(|&i| stream.items.get(i).0).collect();
        Ok(Packed::Seqs(PackedSeqs::new(&seqs, stream.enc_lang)?))
    }
}

/// Which critic consumes which latent groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum AdvLayout {
    None,
    /// D1: HRL vs LRL; D2: HRL ∪ LRL vs En.
    TwoCritics,
    /// D: HRL vs LRL.
    OneCritic,
}

struct Plan<'a> {
    direction: Option<Direction>,
    streams: Vec<Stream<'a>>,
    primary: usize,
    adv: AdvLayout,
}

fn plan<'a>(direction: Direction, data: &TaskData<'a>, langs: LangTokens, cfg: &TrainConfig) -> Result<Plan<'a>> {
    let w = &cfg.weights;
    let adversarial = cfg.adversarial();
    let seed = cfg.seed;
    let mut streams = Vec::new();
    let need = |ok: bool, what: &'static str| if ok { Ok(()) } else { Err(Error::MissingStream(what)) };
    let bt_active = w.backtranslation != 0.0 && !data.bt.is_empty();
    if w.backtranslation != 0.0 && data.bt.is_empty() {
        log::warn!("{}: backtranslation stream is empty; task disabled", direction.as_str());
    }
    match direction {
        Direction::En2Lrl => {
            if w.translation != 0.0 {
                need(!data.parallel.is_empty(), "En–HRL parallel")?;
                let items = Items::Pairs { pairs: data.parallel, swap: false };
                streams.push(Stream::new("translation", items, langs.en, Some(langs.hrl), false, Bucket::Translation, Some(Group::En), seed));
            }
            if bt_active {
                let items = Items::Pairs { pairs: data.bt, swap: false };
                streams.push(Stream::new("backtranslation", items, langs.en, Some(langs.lrl), false, Bucket::Backtranslation, Some(Group::En), seed));
            }
            if w.denoising != 0.0 || adversarial {
                need(!data.mono_hrl.is_empty(), "HRL monolingual")?;
                need(!data.mono_lrl.is_empty(), "LRL monolingual")?;
                let bucket = if w.denoising != 0.0 { Bucket::Denoising } else { Bucket::None };
                streams.push(Stream::new("denoise-hrl", Items::Mono(data.mono_hrl), langs.hrl, Some(langs.hrl), true, bucket, Some(Group::Hrl), seed));
                streams.push(Stream::new("denoise-lrl", Items::Mono(data.mono_lrl), langs.hrl, Some(langs.lrl), true, bucket, Some(Group::Lrl), seed));
            }
        }
        Direction::Lrl2En => {
            if w.denoising != 0.0 {
                log::warn!("lrl2en: denoising is not part of this direction; weight ignored");
            }
            if w.translation != 0.0 {
                need(!data.parallel.is_empty(), "En–HRL parallel")?;
                let items = Items::Pairs { pairs: data.parallel, swap: true };
                streams.push(Stream::new("translation", items, langs.hrl, Some(langs.en), false, Bucket::Translation, None, seed));
            }
            if bt_active {
                let items = Items::Pairs { pairs: data.bt, swap: false };
                streams.push(Stream::new("backtranslation", items, langs.hrl, Some(langs.en), false, Bucket::Backtranslation, None, seed));
            }
            if adversarial {
                need(!data.mono_hrl.is_empty(), "HRL monolingual")?;
                need(!data.mono_lrl.is_empty(), "LRL monolingual")?;
                streams.push(Stream::new("adv-hrl", Items::Mono(data.mono_hrl), langs.hrl, None, false, Bucket::None, Some(Group::Hrl), seed));
                streams.push(Stream::new("adv-lrl", Items::Mono(data.mono_lrl), langs.hrl, None, false, Bucket::None, Some(Group::Lrl), seed));
            }
        }
    }
    if streams.is_empty() {
        return Err(Error::MissingStream("no active task"));
    }
    let adv = match (adversarial, direction) {
        (false, _) => AdvLayout::None,
        (true, Direction::En2Lrl) => AdvLayout::TwoCritics,
        (true, Direction::Lrl2En) => AdvLayout::OneCritic,
    };
    Ok(Plan {
        direction: Some(direction),
        streams,
        primary: 0,
        adv,
    })
}

/// Latents of one micro-step, by group.
#[derive(Default)]
struct Latents {
    hrl: Vec<(Var, usize)>,
    lrl: Vec<(Var, usize)>,
    en: Vec<(Var, usize)>,
}

fn segs_of(p: &Packed) -> &Segments {
    match p {
        Packed::Pairs(b) => &b.enc_segs,
        Packed::Seqs(s) => &s.segs,
    }
}

/// Adversarial terms on `tape` for the given critic bindings.
fn adversarial_terms(
    tape: &mut Tape<'_>,
    layout: AdvLayout,
    critics: &[Critic],
    bound: &[BoundParams],
    lat: &Latents,
    packs: &[Packed],
) -> Result<(Option<Var>, Option<Var>)> {
    let score = |tape: &mut Tape<'_>, c: usize, group: &[(Var, usize)]| -> Vec<Var> {
        group
            .iter()
            .map(|&(z, i)| objectives::critic_scores(tape, &critics[c], &bound[c], z, segs_of(&packs[i])))
            .collect()
    };
    match layout {
        AdvLayout::None => Ok((None, None)),
        AdvLayout::TwoCritics | AdvLayout::OneCritic => {
            let h = score(tape, 0, &lat.hrl);
            let l = score(tape, 0, &lat.lrl);
            let a1 = objectives::loss_adv_english(tape, &h, &l)?;
            if layout == AdvLayout::OneCritic {
                return Ok((Some(a1), None));
            }
            let mut non_en = score(tape, 1, &lat.hrl);
            non_en.extend(score(tape, 1, &lat.lrl));
            let en = score(tape, 1, &lat.en);
            let a2 = if en.is_empty() { None } else { Some(objectives::loss_adv_english(tape, &non_en, &en)?) };
            Ok((Some(a1), a2))
        }
    }
}

#[derive(Default, Clone, Copy)]
struct WindowSums {
    report: LossReport,
    generator: f64,
    critic: f64,
    steps: usize,
}

fn check_finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(String::from(what)))
    }
}

fn run(
    run_name: &str,
    model: &mut Model,
    critics: &mut [Critic],
    mut plan: Plan<'_>,
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<TrainLog> {
    cfg.validate()?;
    let needed = match plan.adv {
        AdvLayout::None => 0,
        AdvLayout::OneCritic => 1,
        AdvLayout::TwoCritics => 2,
    };
    if critics.len() < needed {
        return Err(Error::InvalidConfig(format!("{needed} critics required, {} given", critics.len())));
    }
    let critics = &mut critics[..needed];
    let mut adam = Adam::new(cfg.adam);
    let mut rms: Vec<RmsProp> = (0..needed).map(|_| RmsProp::new(cfg.rmsprop)).collect();
    let mut log = TrainLog::default();
    let w = cfg.weights;
    let mut step: u64 = 0;

    'epochs: for _ in 0..epochs {
        let primary = plan.primary;
        let batches = plan.streams[primary].epoch_batches(cfg.batch_tokens);
        for window in batches.chunks(cfg.accumulation) {
            let update = log.audit.len() + 1;
            let adv_on = plan.adv != AdvLayout::None;
            let critic_step = adv_on && update % cfg.critic_every == 0;
            let gen_adv = adv_on && update % cfg.generator_adv_every == 0;
            let mut grads = Gradients::zeros_like(model.params());
            let mut cgrads: Vec<Gradients> = critics.iter().map(|c| Gradients::zeros_like(c.params())).collect();
            let mut sums = WindowSums::default();
            let scale = 1.0 / window.len() as f64;

            for primary_batch in window {
                step += 1;
                let mut packs = Vec::with_capacity(plan.streams.len());
                for (si, s) in plan.streams.iter_mut().enumerate() {
                    let idx = if si == primary { primary_batch.clone() } else { s.next_cycling(cfg.batch_tokens) };
                    packs.push(prepare(s, &idx, &cfg.noise, step)?);
                }

                // Generator side.
                let mut tape = Tape::new();
                let p = model.bind(&mut tape, true);
                let frozen: Vec<BoundParams> = critics.iter().map(|c| c.bind(&mut tape, false)).collect();
                let mut lat = Latents::default();
                let mut bucket_vars: [Vec<Var>; 3] = [Vec::new(), Vec::new(), Vec::new()];
                for (i, (s, pk)) in plan.streams.iter().zip(&packs).enumerate() {
                    let z = match pk {
                        Packed::Pairs(b) => {
                            let out = objectives::seq2seq_loss(&mut tape, model, &p, b);
                            match s.bucket {
                                Bucket::Translation => bucket_vars[0].push(out.loss),
                                Bucket::Denoising => bucket_vars[1].push(out.loss),
                                Bucket::Backtranslation => bucket_vars[2].push(out.loss),
                                Bucket::None => {}
                            }
                            out.z
                        }
                        Packed::Seqs(sq) => model.encode(&mut tape, &p, &sq.ids, &sq.segs).z,
                    };
                    match s.group {
                        Some(Group::Hrl) => lat.hrl.push((z, i)),
                        Some(Group::Lrl) => lat.lrl.push((z, i)),
                        Some(Group::En) => lat.en.push((z, i)),
                        None => {}
                    }
                }
                let sum_of = |tape: &mut Tape<'_>, v: &[Var]| -> Option<Var> {
                    let mut it = v.iter().copied();
                    let first = it.next()?;
                    Some(it.fold(first, |a, b| tape.add(a, b)))
                };
                let lt = sum_of(&mut tape, &bucket_vars[0]);
                let lda = sum_of(&mut tape, &bucket_vars[1]);
                let lbt = sum_of(&mut tape, &bucket_vars[2]);
                let (a1, a2) = if gen_adv {
                    adversarial_terms(&mut tape, plan.adv, critics, &frozen, &lat, &packs)?
                } else {
                    (None, None)
                };
                let gen = objectives::weighted_sum(
                    &mut tape,
                    &[
                        (lt, w.translation),
                        (lda, w.denoising),
                        (lbt, w.backtranslation),
                        (a1, w.adv_generator),
                        (a2, w.adv_generator),
                    ],
                );
                let val = |tape: &Tape<'_>, v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
                sums.report.translation += val(&tape, lt);
                sums.report.denoising += val(&tape, lda);
                sums.report.backtranslation += val(&tape, lbt);
                if let Some(g) = gen {
                    sums.generator += check_finite(tape.value(g).item(), "generator objective")?;
                    let back = tape.backward(g);
                    grads.accumulate(&p.gradients(&back), scale);
                }

                // Critic side, on detached latents.
                if adv_on {
                    let detached = |g: &[(Var, usize)]| -> Vec<(crate::tensor::Matrix, usize)> {
                        g.iter().map(|&(z, i)| (tape.value(z).clone(), i)).collect()
                    };
                    let (dh, dl, de) = (detached(&lat.hrl), detached(&lat.lrl), detached(&lat.en));
                    drop(tape);
                    let mut ct = Tape::new();
                    let cb: Vec<BoundParams> = critics.iter().map(|c| c.bind(&mut ct, critic_step)).collect();
                    let mut leaf = |v: Vec<(crate::tensor::Matrix, usize)>| -> Vec<(Var, usize)> {
                        v.into_iter().map(|(m, i)| (ct.leaf(m), i)).collect()
                    };
                    let clat = Latents {
                        hrl: leaf(dh),
                        lrl: leaf(dl),
                        en: leaf(de),
                    };
                    let (c1, c2) = adversarial_terms(&mut ct, plan.adv, critics, &cb, &clat, &packs)?;
                    let v1 = val(&ct, c1);
                    let v2 = val(&ct, c2);
                    match plan.adv {
                        AdvLayout::OneCritic => sums.report.adv += v1,
                        _ => {
                            sums.report.adv1 += v1;
                            sums.report.adv2 += v2;
                        }
                    }
                    let cobj = objectives::weighted_sum(&mut ct, &[(c1, w.adv_critic), (c2, w.adv_critic)]);
                    if let Some(o) = cobj {
                        sums.critic += check_finite(ct.value(o).item(), "critic objective")?;
                        if critic_step {
                            let back = ct.backward(o);
                            for (g, b) in cgrads.iter_mut().zip(&cb) {
                                g.accumulate(&b.gradients(&back), scale);
                            }
                        }
                    }
                }
                sums.steps += 1;
            }

            if !grads.all_finite() {
                return Err(Error::NonFinite(String::from("model gradients")));
            }
            let lr = adam.current_lr();
            adam.step(model.params_mut(), &grads);
            if critic_step {
                for ((c, g), opt) in critics.iter_mut().zip(&cgrads).zip(&mut rms) {
                    opt.step(c.params_mut(), g);
                    if let Lipschitz::Clip(v) = cfg.lipschitz {
                        c.clip(v);
                    }
                }
            }
            log.audit.push(UpdateAudit {
                update,
                critic: critic_step,
                generator_adv: gen_adv,
            });
            let n = sums.steps as f64;
            let r = sums.report;
            let mut rec = MetricsRecord::new(run_name, update as u64)
                .with("loss.translation", r.translation / n)
                .with("loss.backtranslation", r.backtranslation / n);
            match plan.direction {
                Some(Direction::Lrl2En) => rec.push("loss.adv", r.adv / n),
                _ => {
                    rec.push("loss.denoising", r.denoising / n);
                    rec.push("loss.adv1", r.adv1 / n);
                    rec.push("loss.adv2", r.adv2 / n);
                }
            }
            rec.push("loss.generator", sums.generator / n);
            rec.push("loss.critic", sums.critic / n);
            rec.push("adv.generator_step", if gen_adv { 1.0 } else { 0.0 });
            rec.push("lr", lr);
            log.records.push(rec);
            if cfg.max_updates.is_some_and(|m| log.audit.len() >= m) {
                break 'epochs;
            }
        }
    }
    if !model.params().all_finite() {
        return Err(Error::NonFinite(String::from("model parameters")));
    }
    Ok(log)
}

/// En→LRL training: translation, denoising, backtranslation and two
/// critics. `critics[0]` separates HRL from LRL latents, `critics[1]`
/// non-English from English latents.
pub fn train_en2lrl(
    model: &mut Model,
    critics: &mut [Critic],
    data: &TaskData<'_>,
    langs: LangTokens,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    let p = plan(Direction::En2Lrl, data, langs, cfg)?;
    run(Direction::En2Lrl.as_str(), model, critics, p, cfg, cfg.epochs)
}

/// LRL→En training: translation, backtranslation and one critic over
/// un-noised HRL and LRL latents.
pub fn train_lrl2en(
    model: &mut Model,
    critic: &mut [Critic],
    data: &TaskData<'_>,
    langs: LangTokens,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    let p = plan(Direction::Lrl2En, data, langs, cfg)?;
    run(Direction::Lrl2En.as_str(), model, critic, p, cfg, cfg.epochs)
}

/// Denoising autoencoder pretraining: each corpus is reconstructed under its
/// own language token on both sides.
pub fn pretrain_denoising(model: &mut Model, corpora: &[(&[Vec<u32>], u32)], cfg: &TrainConfig) -> Result<TrainLog> {
    const NAMES: [&str; 4] = ["pretrain-0", "pretrain-1", "pretrain-2", "pretrain-3"];
    if corpora.is_empty() || corpora.iter().any(|(c, _)| c.is_empty()) {
        return Err(Error::EmptyCorpus);
    }
    if corpora.len() > NAMES.len() {
        return Err(Error::InvalidConfig("at most four pretraining corpora".into()));
    }
    if cfg.epochs == 0 {
        return Ok(TrainLog::default());
    }
    let streams = corpora
        .iter()
        .zip(NAMES)
        .map(|(&(c, lang), name)| Stream::new(name, Items::Mono(c), lang, Some(lang), true, Bucket::Denoising, None, cfg.seed))
        .collect();
    let cfg = TrainConfig {
        weights: LossWeights {
            translation: 0.0,
            backtranslation: 0.0,
            adv_generator: 0.0,
            ..cfg.weights
        },
        ..*cfg
    };
    let p = Plan {
        direction: None,
        streams,
        primary: 0,
        adv: AdvLayout::None,
    };
    run("pretrain", model, &mut [], p, &cfg, cfg.epochs)
}

/// One epoch over `bt` with the backtranslation loss only. Skipped (model
/// unchanged) when output decoding is script-restricted.
pub fn finetune_bt(
    model: &mut Model,
    bt: &[Pair],
    direction: Direction,
    langs: LangTokens,
    cfg: &TrainConfig,
    script_ban: bool,
) -> Result<TrainLog> {
    if bt.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if script_ban {
        let rec = MetricsRecord::new("finetune", 0).with("finetune.skipped", 1.0);
        return Ok(TrainLog {
            records: vec![rec],
            audit: Vec::new(),
            skipped: true,
        });
    }
    let cfg = TrainConfig {
        weights: LossWeights {
            translation: 0.0,
            denoising: 0.0,
            backtranslation: 1.0,
            adv_generator: 0.0,
            adv_critic: 0.0,
        },
        ..*cfg
    };
    let data = TaskData {
        bt,
        ..TaskData::default()
    };
    let p = plan(direction, &data, langs, &cfg)?;
    run("finetune", model, &mut [], p, &cfg, 1)
}

/// Mean reconstruction loss of noised `seqs` under `lang`, for monitoring.
pub fn denoising_loss(model: &Model, seqs: &[Vec<u32>], lang: u32, noise: &NoiseParams, seed: u64) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut total = 0.0;
    let mut n = 0.0;
    for (ci, chunk) in seqs.chunks(64).enumerate() {
        let noised: Vec<Vec<u32>> = chunk
            .iter()
            .enumerate()
            .map(|(k, s)| apply_noise(s, noise, MASK, &mut rng::stream(seed, ci as u64, k as u64)))
            .collect();
        let pairs: Vec<(&[u32], &[u32])> = noised.iter().zip(chunk).map(|(a, b)| (a.as_slice(), b.as_slice())).collect();
        let batch = PackedPairs::new(&pairs, lang, lang)?;
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, false);
        let out = objectives::seq2seq_loss(&mut tape, model, &p, &batch);
        let tokens = batch.targets.len() as f64;
        total += tape.value(out.loss).item() * tokens;
        n += tokens;
    }
    Ok(total / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CriticDims, ModelDims};

    const LANGS: LangTokens = LangTokens { en: 5, hrl: 6, lrl: 7 };

    fn seqs(n: usize, off: u32) -> Vec<Vec<u32>> {
        (0..n).map(|i| (0..3 + i % 3).map(|j| 8 + (off + i as u32 * 3 + j as u32) % 12).collect()).collect()
    }

    fn tiny() -> (Model, Vec<Critic>) {
        let dims = ModelDims {
            vocab: 20,
            d_model: 8,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ffn: 16,
        };
        let cd = CriticDims {
            input: 8,
            fc1: 8,
            fc2: 8,
            gru: 4,
        };
        (Model::init(dims, 1, 6, 7).unwrap(), vec![Critic::new(cd, 2).unwrap(), Critic::new(cd, 3).unwrap()])
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            accumulation: 2,
            batch_tokens: 20,
            adam: AdamConfig {
                lr: 1e-3,
                warmup: 0,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn cadence_audit_over_twelve_updates() {
        let (mut m, mut c) = tiny();
        let src = seqs(200, 0);
        let tgt = seqs(200, 5);
        let parallel: Vec<Pair> = src.into_iter().zip(tgt).collect();
        let mono_h = seqs(50, 1);
        let mono_l = seqs(50, 2);
        let data = TaskData {
            parallel: &parallel,
            mono_hrl: &mono_h,
            mono_lrl: &mono_l,
            bt: &parallel[..40],
        };
        let cfg = TrainConfig {
            max_updates: Some(12),
            ..small_cfg()
        };
        let log = train_en2lrl(&mut m, &mut c, &data, LANGS, &cfg).unwrap();
        assert_eq!(log.updates(), 12);
        let gen: Vec<usize> = log.audit.iter().filter(|a| a.generator_adv).map(|a| a.update).collect();
        assert_eq!(gen, vec![3, 6, 9, 12]);
        assert!(log.audit.iter().all(|a| a.critic));
        for r in &log.records {
            assert!(r.values.iter().all(|(_, v)| v.is_finite()));
        }
    }

    #[test]
    fn no_adversary_and_no_bt_degenerates() {
        let (mut m, mut c) = tiny();
        let parallel: Vec<Pair> = seqs(30, 0).into_iter().zip(seqs(30, 4)).collect();
        let mono = seqs(20, 1);
        let data = TaskData {
            parallel: &parallel,
            mono_hrl: &mono,
            mono_lrl: &mono,
            bt: &[],
        };
        let cfg = TrainConfig {
            weights: LossWeights {
                adv_generator: 0.0,
                ..LossWeights::default()
            },
            ..small_cfg()
        };
        let log = train_en2lrl(&mut m, &mut c, &data, LANGS, &cfg).unwrap();
        for r in &log.records {
            assert_eq!(r.get("loss.adv1"), Some(0.0));
            assert_eq!(r.get("loss.adv2"), Some(0.0));
            assert_eq!(r.get("loss.backtranslation"), Some(0.0));
            assert!(r.get("loss.translation").unwrap() > 0.0);
        }
        assert!(log.audit.iter().all(|a| !a.critic && !a.generator_adv));
    }

    #[test]
    fn missing_streams_are_errors() {
        let (mut m, mut c) = tiny();
        let mono = seqs(5, 0);
        let data = TaskData {
            parallel: &[],
            mono_hrl: &mono,
            mono_lrl: &mono,
            bt: &[],
        };
        let e = train_en2lrl(&mut m, &mut c, &data, LANGS, &small_cfg()).unwrap_err();
        assert!(matches!(e, Error::MissingStream(_)));
    }

    #[test]
    fn zero_epoch_pretraining_changes_nothing() {
        let (mut m, _) = tiny();
        let before = m.params().clone();
        let mono = seqs(10, 0);
        let cfg = TrainConfig {
            epochs: 0,
            ..small_cfg()
        };
        pretrain_denoising(&mut m, &[(&mono, 5)], &cfg).unwrap();
        assert_eq!(m.params(), &before);
    }

    #[test]
    fn finetune_contract() {
        let (mut m, _) = tiny();
        let bt: Vec<Pair> = seqs(10, 0).into_iter().zip(seqs(10, 3)).collect();
        assert_eq!(
            finetune_bt(&mut m, &[], Direction::En2Lrl, LANGS, &small_cfg(), false),
            Err(Error::EmptyCorpus)
        );
        let before = m.params().clone();
        let log = finetune_bt(&mut m, &bt, Direction::En2Lrl, LANGS, &small_cfg(), true).unwrap();
        assert!(log.skipped);
        assert_eq!(m.params(), &before);
        let log = finetune_bt(&mut m, &bt, Direction::En2Lrl, LANGS, &small_cfg(), false).unwrap();
        assert!(!log.skipped && log.updates() > 0);
        assert_ne!(m.params(), &before);
    }
}
