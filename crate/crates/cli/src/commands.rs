use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Subcommand, ValueEnum};
use serde::Serialize;

use nmt_adapt_core::checkpoint::{decode_model, encode_model};
use nmt_adapt_core::corpus::{filter_corpus, parse_parallel_tsv, Vocabulary};
use nmt_adapt_core::eval::{pooled_latents, probe_alignment, script_purity, PROBE_MIN_SAMPLES};
use nmt_adapt_core::metrics::MetricsRecord;
use nmt_adapt_core::model::Model;
use nmt_adapt_core::pipeline::{
    bleu_en2lrl, bleu_lrl2en, build_ban_mask, decode_ban, en2lrl_phase, lrl2en_phase, pretrained_base, run_iterations,
    run_mono_ablation, score, supervised_hrl2en, synthesize_bt_for_en2lrl, synthesize_bt_for_lrl2en, BtDataset, Observer,
    PipelineConfig, Prepared,
};
use nmt_adapt_core::synthlang::{gen_family, EN, HRL, LRL};
use nmt_adapt_core::trainer::{Pair, TrainLog};

use crate::config::RunConfig;
use crate::store::{get_bundle, has_bundle, pairs_tsv, put_bundle, RunDir};
use crate::{report, Missing};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Dir {
    En2lrl,
    Lrl2en,
}

#[derive(Clone, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a synthetic En / HRL / LRL family into data/.
    SynthData,
    /// Filter monolingual text, build the vocabulary, write prepared/.
    Prepare,
    /// Denoising pretraining of the base model.
    Pretrain,
    /// Train the En→LRL model of one iteration from its backtranslations.
    TrainEn2lrl {
        #[arg(long, default_value_t = 1)]
        iteration: usize,
    },
    /// Train the LRL→En model of one iteration; iteration 0 is the
    /// supervised HRL→En model.
    TrainLrl2en {
        #[arg(long, default_value_t = 0)]
        iteration: usize,
    },
    /// Generate backtranslation pairs for one direction and iteration.
    Backtranslate {
        #[arg(long, value_enum)]
        direction: Dir,
        #[arg(long, default_value_t = 1)]
        iteration: usize,
    },
    /// Run the whole iterative loop.
    Iterate,
    /// Score checkpoints on the test set.
    Evaluate {
        /// Defaults to the latest iteration with a checkpoint.
        #[arg(long)]
        iteration: Option<usize>,
    },
    /// Iteration-1 En→LRL BLEU for several LRL monolingual corpus sizes.
    Ablate,
    /// Charts from the metrics stream.
    Report,
}

pub struct Ctx {
    pub cfg: RunConfig,
    pub dir: RunDir,
}

fn model_name(dir: Dir, k: usize) -> String {
    match dir {
        Dir::En2lrl => format!("en2lrl-{k}"),
        Dir::Lrl2en => format!("lrl2en-{k}"),
    }
}

/// Writes models, datasets and metrics into the run directory as the
/// pipeline produces them.
struct Persist<'a> {
    dir: &'a mut RunDir,
    vocab: &'a Vocabulary,
}

impl Persist<'_> {
    fn wrap<T>(r: anyhow::Result<T>) -> nmt_adapt_core::Result<T> {
        r.map_err(|e| nmt_adapt_core::Error::Checkpoint(format!("{e:#}")))
    }
}

impl Observer for Persist<'_> {
    fn train_log(&mut self, phase: &str, log: &TrainLog) -> nmt_adapt_core::Result<()> {
        let records: Vec<MetricsRecord> = log
            .records
            .iter()
            .map(|r| MetricsRecord {
                run: phase.to_string(),
                ..r.clone()
            })
            .collect();
        Self::wrap(self.dir.log(&records))
    }

    fn model(&mut self, name: &str, model: &Model) -> nmt_adapt_core::Result<()> {
        let bytes = encode_model(model, &self.vocab.digest());
        Self::wrap(self.dir.put(&format!("models/{name}"), &format!("models/{name}.ckpt"), &bytes))
    }

    fn dataset(&mut self, name: &str, data: &BtDataset) -> nmt_adapt_core::Result<()> {
        Self::wrap(put_dataset(self.dir, self.vocab, name, data))
    }

    fn metrics(&mut self, record: &MetricsRecord) -> nmt_adapt_core::Result<()> {
        Self::wrap(self.dir.log(std::slice::from_ref(record)))
    }
}

#[derive(Serialize)]
struct BtSidecar<'a> {
    direction: &'a str,
    producer: &'a str,
    iteration: usize,
    beam: usize,
    max_len: usize,
    pairs: usize,
    dropped: usize,
}

fn put_dataset(dir: &mut RunDir, vocab: &Vocabulary, name: &str, data: &BtDataset) -> anyhow::Result<()> {
    let m = &data.meta;
    let side = BtSidecar {
        direction: m.direction.as_str(),
        producer: &m.producer,
        iteration: m.iteration,
        beam: match m.decode.strategy {
            nmt_adapt_core::model::Strategy::Greedy => 1,
            nmt_adapt_core::model::Strategy::Beam(k) => k,
        },
        max_len: m.decode.max_len,
        pairs: data.pairs.len(),
        dropped: m.dropped,
    };
    dir.put(&format!("bt/{name}"), &format!("bt/{name}.tsv"), pairs_tsv(vocab, &data.pairs)?.as_bytes())?;
    let json = serde_json::to_string_pretty(&side)? + "\n";
    dir.put(&format!("bt/{name}.meta"), &format!("bt/{name}.meta.json"), json.as_bytes())?;
    dir.log(&[data.record(&format!("bt/{name}"))])
}

impl Ctx {
    pub fn run(&mut self, cmd: &Command) -> anyhow::Result<()> {
        match cmd {
            Command::SynthData => self.synth_data(),
            Command::Prepare => self.prepare(),
            Command::Pretrain => self.pretrain(),
            Command::TrainEn2lrl { iteration } => self.train_en2lrl(*iteration),
            Command::TrainLrl2en { iteration } => self.train_lrl2en(*iteration),
            Command::Backtranslate { direction, iteration } => self.backtranslate(*direction, *iteration),
            Command::Iterate => self.iterate(),
            Command::Evaluate { iteration } => self.evaluate(*iteration),
            Command::Ablate => self.ablate(),
            Command::Report => report::write_charts(&mut self.dir),
        }
    }

    fn pcfg(&self) -> PipelineConfig {
        self.cfg.pipeline_config()
    }

    pub fn synth_data(&mut self) -> anyhow::Result<()> {
        let bundle = gen_family(&self.cfg.family_config())?;
        let leaks = bundle.held_out_leaks();
        if leaks > 0 {
            bail!("{leaks} held-out sentences occur in training corpora");
        }
        put_bundle(&mut self.dir, "data", &bundle)?;
        log::info!(
            "wrote {} parallel pairs, {} / {} / {} monolingual sentences",
            bundle.en_hrl.pairs.len(),
            bundle.mono_en.sentences.len(),
            bundle.mono_hrl.sentences.len(),
            bundle.mono_lrl.sentences.len()
        );
        Ok(())
    }

    pub fn prepare(&mut self) -> anyhow::Result<()> {
        if !has_bundle(&self.dir, "data") {
            return Err(Missing("data (run synth-data)".into()).into());
        }
        let mut bundle = get_bundle(&self.dir, "data")?;
        let mut stats = BTreeMap::new();
        if let Some(f) = self.cfg.filter_config() {
            for (id, corpus) in [(EN, &mut bundle.mono_en), (HRL, &mut bundle.mono_hrl), (LRL, &mut bundle.mono_lrl)] {
                let lang = bundle.languages.iter().find(|l| l.id == id).expect("bundle declares all languages");
                let (kept, s) = filter_corpus(corpus, lang, &f);
                *corpus = kept;
                stats.insert(id, [s.kept, s.rejected_length, s.rejected_alphabet]);
            }
        }
        let prepared = Prepared::new(&bundle, &self.cfg.vocab_config())?;
        put_bundle(&mut self.dir, "prepared", &bundle)?;
        self.dir.put("prepared/vocab", "prepared/vocab.txt", prepared.vocab.to_file_string().as_bytes())?;
        let json = serde_json::to_string_pretty(&stats)? + "\n";
        self.dir.put("prepared/filter", "prepared/filter.json", json.as_bytes())?;
        log::info!("vocabulary of {} entries", prepared.vocab.len());
        Ok(())
    }

    pub fn load_prepared(&self) -> anyhow::Result<Prepared> {
        if !has_bundle(&self.dir, "prepared") || !self.dir.has("prepared/vocab") {
            return Err(Missing("prepared corpora (run prepare)".into()).into());
        }
        let vocab = Vocabulary::from_file_string(&self.dir.get_text("prepared/vocab")?)?;
        Ok(Prepared::with_vocab(&get_bundle(&self.dir, "prepared")?, vocab)?)
    }

    pub fn load_model(&self, name: &str, vocab: &Vocabulary) -> anyhow::Result<Model> {
        let key = format!("models/{name}");
        if !self.dir.has(&key) {
            return Err(Missing(key).into());
        }
        decode_model(&self.dir.get(&key)?, Some(&vocab.digest())).with_context(|| format!("loading {name}"))
    }

    fn load_dataset(&self, name: &str, vocab: &Vocabulary, dir: Dir) -> anyhow::Result<Vec<Pair>> {
        let key = format!("bt/{name}");
        if !self.dir.has(&key) {
            return Err(Missing(key).into());
        }
        let (src, tgt) = match dir {
            Dir::En2lrl => (EN, LRL),
            Dir::Lrl2en => (LRL, EN),
        };
        Ok(parse_parallel_tsv(&self.dir.get_text(&key)?)?
            .iter()
            .map(|(a, b)| (vocab.tokenize(a.as_str(), src).tokens, vocab.tokenize(b.as_str(), tgt).tokens))
            .collect())
    }

    pub fn pretrain(&mut self) -> anyhow::Result<()> {
        let p = self.load_prepared()?;
        let cfg = self.pcfg();
        let mut obs = Persist { dir: &mut self.dir, vocab: &p.vocab };
        pretrained_base(&p, &cfg, &mut obs)?;
        Ok(())
    }

    fn train_lrl2en(&mut self, k: usize) -> anyhow::Result<()> {
        let p = self.load_prepared()?;
        let cfg = self.pcfg();
        let init = if k <= 1 { self.load_model("base", &p.vocab)? } else { self.load_model(&model_name(Dir::Lrl2en, k - 1), &p.vocab)? };
        let bt = if k == 0 { Vec::new() } else { self.load_dataset(&format!("bt-lrl2en-{k}"), &p.vocab, Dir::Lrl2en)? };
        let mut obs = Persist { dir: &mut self.dir, vocab: &p.vocab };
        let m = if k == 0 {
            supervised_hrl2en(&init, &p, &cfg, &mut obs)?
        } else {
            lrl2en_phase(&init, &p, &bt, &cfg, None, k, &mut obs)?
        };
        obs.model(&model_name(Dir::Lrl2en, k), &m)?;
        let b = bleu_lrl2en(&m, &p, &p.dev, &cfg)?;
        obs.metrics(&MetricsRecord::new("lrl2en", k as u64).with("bleu.dev", b))?;
        Ok(())
    }

    fn train_en2lrl(&mut self, k: usize) -> anyhow::Result<()> {
        if k == 0 {
            bail!(crate::ConfigError("En→LRL iterations start at 1".into()));
        }
        let p = self.load_prepared()?;
        let cfg = self.pcfg();
        let init = if k == 1 { self.load_model("base", &p.vocab)? } else { self.load_model(&model_name(Dir::En2lrl, k - 1), &p.vocab)? };
        let bt = self.load_dataset(&format!("bt-en2lrl-{k}"), &p.vocab, Dir::En2lrl)?;
        let mut obs = Persist { dir: &mut self.dir, vocab: &p.vocab };
        let m = en2lrl_phase(&init, &p, &p.mono_lrl, &bt, &cfg, None, cfg.finetune, k, &mut obs)?;
        obs.model(&model_name(Dir::En2lrl, k), &m)?;
        let script = script_mask(&p, &cfg)?;
        let b = bleu_en2lrl(&m, &p, &p.dev, p.langs.lrl, &cfg, script.as_deref())?;
        obs.metrics(&MetricsRecord::new("en2lrl", k as u64).with("bleu.dev", b))?;
        Ok(())
    }

    fn backtranslate(&mut self, dir: Dir, k: usize) -> anyhow::Result<()> {
        if k == 0 {
            bail!(crate::ConfigError("backtranslation iterations start at 1".into()));
        }
        let p = self.load_prepared()?;
        let cfg = self.pcfg();
        let data = match dir {
            Dir::En2lrl => {
                let producer = model_name(Dir::Lrl2en, k - 1);
                let m = self.load_model(&producer, &p.vocab)?;
                synthesize_bt_for_en2lrl(&m, &producer, &p.mono_lrl, p.langs, &p.vocab, &cfg.bt_decode, k)?
            }
            Dir::Lrl2en => {
                let producer = model_name(Dir::En2lrl, k);
                let m = self.load_model(&producer, &p.vocab)?;
                let script = script_mask(&p, &cfg)?;
                synthesize_bt_for_lrl2en(&m, &producer, &p.mono_en_side(), p.langs, &p.vocab, &cfg.bt_decode, script.as_deref(), k)?
            }
        };
        let name = match dir {
            Dir::En2lrl => format!("bt-en2lrl-{k}"),
            Dir::Lrl2en => format!("bt-lrl2en-{k}"),
        };
        put_dataset(&mut self.dir, &p.vocab, &name, &data)
    }

    pub fn iterate(&mut self) -> anyhow::Result<()> {
        if !has_bundle(&self.dir, "prepared") {
            if !has_bundle(&self.dir, "data") {
                return Err(Missing("data (run synth-data)".into()).into());
            }
            self.prepare()?;
        }
        let p = self.load_prepared()?;
        let cfg = self.pcfg();
        let mut obs = Persist { dir: &mut self.dir, vocab: &p.vocab };
        let st = run_iterations(&p, &cfg, &mut obs)?;
        #[derive(Serialize)]
        struct Row {
            k: usize,
            en2lrl_dev_bleu: Option<f64>,
            lrl2en_dev_bleu: f64,
        }
        let rows: Vec<Row> = st
            .history
            .iter()
            .map(|h| Row {
                k: h.k,
                en2lrl_dev_bleu: h.en2lrl,
                lrl2en_dev_bleu: h.lrl2en,
            })
            .collect();
        let json = serde_json::to_string_pretty(&serde_json::json!({ "iterations": rows, "converged": st.converged }))? + "\n";
        self.dir.put("iterations", "iterations.json", json.as_bytes())?;
        Ok(())
    }

    fn latest(&self, dir: Dir) -> Option<usize> {
        (0..=self.cfg.pipeline.k_max.max(16)).rev().find(|&k| self.dir.has(&format!("models/{}", model_name(dir, k))))
    }

    pub fn evaluate(&mut self, iteration: Option<usize>) -> anyhow::Result<()> {
        let p = self.load_prepared()?;
        let cfg = self.pcfg();
        let k_e = iteration.or_else(|| self.latest(Dir::En2lrl)).filter(|&k| k >= 1);
        let k_l = iteration.or_else(|| self.latest(Dir::Lrl2en));
        let e2l = match k_e {
            Some(k) if self.dir.has(&format!("models/{}", model_name(Dir::En2lrl, k))) => Some((k, self.load_model(&model_name(Dir::En2lrl, k), &p.vocab)?)),
            _ => None,
        };
        let l2e = match k_l {
            Some(k) if self.dir.has(&format!("models/{}", model_name(Dir::Lrl2en, k))) => Some((k, self.load_model(&model_name(Dir::Lrl2en, k), &p.vocab)?)),
            _ => None,
        };
        if e2l.is_none() && l2e.is_none() {
            return Err(Missing("a model checkpoint (run iterate or a train command)".into()).into());
        }
        let mut out = serde_json::Map::new();
        let mut records = Vec::new();
        if let Some((k, m)) = &e2l {
            let script = script_mask(&p, &cfg)?;
            let ban = decode_ban(&p.vocab, script.as_deref());
            let (b, outputs) = score(m, &p.vocab, &p.test.en, &p.test.lrl_text, p.langs.en, p.langs.lrl, &cfg.eval_decode, &ban, &cfg.bleu)?;
            let class = p.vocab.language_class(LRL).unwrap_or_default().to_string();
            let purity = script_purity(&outputs, &p.vocab, &class);
            out.insert("en2lrl".into(), serde_json::json!({ "iteration": k, "test_bleu": b, "purity": purity }));
            records.push(MetricsRecord::new("eval/en2lrl", *k as u64).with("bleu.test", b).with("purity", purity));
            let n = self.cfg.eval.probe_samples.min(p.mono_hrl.len()).min(p.mono_lrl.len());
            if n >= PROBE_MIN_SAMPLES {
                let h: Vec<&[u32]> = p.mono_hrl[..n].iter().map(Vec::as_slice).collect();
                let l: Vec<&[u32]> = p.mono_lrl[..n].iter().map(Vec::as_slice).collect();
                let r = probe_alignment(&pooled_latents(m, p.langs.hrl, &h)?, &pooled_latents(m, p.langs.hrl, &l)?)?;
                out.insert("probe".into(), serde_json::json!({ "accuracy": r.probe_accuracy, "wasserstein_gap": r.wasserstein_gap }));
                records.push(MetricsRecord::new("eval/probe", *k as u64).with("probe.accuracy", r.probe_accuracy).with("probe.wasserstein_gap", r.wasserstein_gap));
            } else {
                log::warn!("probe skipped: {n} sentences per side, need {PROBE_MIN_SAMPLES}");
            }
        }
        if let Some((k, m)) = &l2e {
            let b = bleu_lrl2en(m, &p, &p.test, &cfg)?;
            out.insert("lrl2en".into(), serde_json::json!({ "iteration": k, "test_bleu": b }));
            records.push(MetricsRecord::new("eval/lrl2en", *k as u64).with("bleu.test", b));
        }
        self.dir.log(&records)?;
        let json = serde_json::to_string_pretty(&out)? + "\n";
        self.dir.put("eval", "eval.json", json.as_bytes())?;
        println!("{}", json.trim_end());
        Ok(())
    }

    pub fn ablate(&mut self) -> anyhow::Result<()> {
        let p = self.load_prepared()?;
        let cfg = self.pcfg();
        let base = self.load_model("base", &p.vocab)?;
        let m0 = self.load_model(&model_name(Dir::Lrl2en, 0), &p.vocab)?;
        let sizes = self.cfg.eval.ablation_sizes.clone();
        let mut obs = Persist { dir: &mut self.dir, vocab: &p.vocab };
        let table = run_mono_ablation(&p, &base, &m0, &sizes, &cfg, &mut obs)?;
        let mut csv = String::from("size,bleu\n");
        for (size, b) in &table {
            writeln!(csv, "{size},{b}")?;
        }
        self.dir.put("ablation", "ablation.csv", csv.as_bytes())?;
        print!("{csv}");
        Ok(())
    }
}

/// The En→LRL script ban, when the configuration turns it on.
pub fn script_mask(p: &Prepared, cfg: &PipelineConfig) -> anyhow::Result<Option<Vec<bool>>> {
    Ok(if cfg.script_ban(p) { Some(build_ban_mask(&p.vocab, &p.foreign_classes())?) } else { None })
}

/// Output directory precedence: `--out`, then the environment variable,
/// then the configuration file.
pub fn resolve_out(flag: Option<PathBuf>, env: Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    flag.or(env).unwrap_or_else(|| cfg.out_dir.clone())
}
