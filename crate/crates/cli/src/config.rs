//! The run configuration file.
//!
//! Every section and key is optional; missing keys take the defaults below.
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use nmt_adapt_core::corpus::{FilterConfig, TokenMode, VocabConfig};
use nmt_adapt_core::eval::{BleuConfig, Smoothing, Tokenization};
use nmt_adapt_core::model::{CriticDims, DecodeConfig, ModelDims, Strategy};
use nmt_adapt_core::noise::NoiseParams;
use nmt_adapt_core::objectives::LossWeights;
use nmt_adapt_core::optim::{AdamConfig, Lipschitz, RmsPropConfig};
use nmt_adapt_core::pipeline::{supervised_weights, BanPolicy, PipelineConfig};
use nmt_adapt_core::synthlang::{FamilyConfig, LexicalMode, ScriptRemap};
use nmt_adapt_core::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds data generation, initialization, batching and noise.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub family: FamilySection,
    pub filter: FilterSection,
    pub vocab: VocabSection,
    pub model: ModelSection,
    pub critic: CriticSection,
    pub pretrain: TrainSection,
    pub supervised: TrainSection,
    pub en2lrl: TrainSection,
    pub lrl2en: TrainSection,
    pub pipeline: PipelineSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("runs/default"),
            family: FamilySection::default(),
            filter: FilterSection::default(),
            vocab: VocabSection::default(),
            model: ModelSection::default(),
            critic: CriticSection::default(),
            pretrain: TrainSection {
                epochs: 1,
                ..TrainSection::default()
            },
            supervised: TrainSection {
                epochs: 5,
                weights: WeightsSection::from(supervised_weights()),
                ..TrainSection::default()
            },
            en2lrl: TrainSection::default(),
            lrl2en: TrainSection::from(TrainConfig::lrl2en()),
            pipeline: PipelineSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Remap {
    #[default]
    None,
    Greek,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Lexical {
    #[default]
    PerType,
    PerToken,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FamilySection {
    pub vocab_size: usize,
    pub n_parallel: usize,
    pub n_mono: usize,
    pub n_mono_lrl: usize,
    pub lex_sub_rate: f64,
    pub spell_noise_rate: f64,
    pub lexical_mode: Lexical,
    pub script_remap: Remap,
    pub n_dev: usize,
    pub n_test: usize,
}

impl Default for FamilySection {
    fn default() -> Self {
        let f = FamilyConfig::default();
        Self {
            vocab_size: f.vocab_size,
            n_parallel: f.n_parallel,
            n_mono: f.n_mono,
            n_mono_lrl: f.n_mono_lrl,
            lex_sub_rate: f.lex_sub_rate,
            spell_noise_rate: f.spell_noise_rate,
            lexical_mode: Lexical::PerType,
            script_remap: Remap::None,
            n_dev: f.n_dev,
            n_test: f.n_test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    /// Synthetic sentences are often shorter than the length floor, so the
    /// filter is opt-in.
    pub enabled: bool,
    pub max_foreign_ratio: f64,
    pub min_chars: usize,
    pub max_chars: usize,
}

impl Default for FilterSection {
    fn default() -> Self {
        let f = FilterConfig::default();
        Self {
            enabled: false,
            max_foreign_ratio: f.max_foreign_ratio,
            min_chars: f.min_chars,
            max_chars: f.max_chars,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Word,
    Char,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabSection {
    pub mode: Mode,
    pub min_count: usize,
}

impl Default for VocabSection {
    fn default() -> Self {
        Self {
            mode: Mode::Word,
            min_count: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelDims::new(0);
        Self {
            d_model: d.d_model,
            heads: d.heads,
            enc_layers: d.enc_layers,
            dec_layers: d.dec_layers,
            ffn: d.ffn,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticSection {
    pub fc1: usize,
    pub fc2: usize,
    pub gru: usize,
}

impl Default for CriticSection {
    fn default() -> Self {
        let c = CriticDims::new(0);
        Self {
            fc1: c.fc1,
            fc2: c.fc2,
            gru: c.gru,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightsSection {
    pub translation: f64,
    pub denoising: f64,
    pub backtranslation: f64,
    pub adv_generator: f64,
    pub adv_critic: f64,
}

impl Default for WeightsSection {
    fn default() -> Self {
        Self::from(LossWeights::default())
    }
}

impl From<LossWeights> for WeightsSection {
    fn from(w: LossWeights) -> Self {
        Self {
            translation: w.translation,
            denoising: w.denoising,
            backtranslation: w.backtranslation,
            adv_generator: w.adv_generator,
            adv_critic: w.adv_critic,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub accumulation: usize,
    pub critic_every: usize,
    pub generator_adv_every: usize,
    pub batch_tokens: usize,
    pub lr: f64,
    pub warmup: u64,
    pub critic_lr: f64,
    /// Critic weight clip; 0 disables clipping.
    pub clip: f64,
    pub max_updates: Option<usize>,
    pub max_shift: usize,
    pub p_mask: f64,
    pub weights: WeightsSection,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self::from(TrainConfig::default())
    }
}

impl From<TrainConfig> for TrainSection {
    fn from(t: TrainConfig) -> Self {
        Self {
            epochs: t.epochs,
            accumulation: t.accumulation,
            critic_every: t.critic_every,
            generator_adv_every: t.generator_adv_every,
            batch_tokens: t.batch_tokens,
            lr: t.adam.lr,
            warmup: t.adam.warmup,
            critic_lr: t.rmsprop.lr,
            clip: match t.lipschitz {
                Lipschitz::Clip(c) => c,
                Lipschitz::Off => 0.0,
            },
            max_updates: t.max_updates,
            max_shift: t.noise.max_shift,
            p_mask: t.noise.p_mask,
            weights: WeightsSection::from(t.weights),
        }
    }
}

impl TrainSection {
    pub fn to_core(&self, seed: u64) -> TrainConfig {
        let w = &self.weights;
        TrainConfig {
            epochs: self.epochs,
            accumulation: self.accumulation,
            critic_every: self.critic_every,
            generator_adv_every: self.generator_adv_every,
            batch_tokens: self.batch_tokens,
            adam: AdamConfig {
                lr: self.lr,
                warmup: self.warmup,
                ..AdamConfig::default()
            },
            rmsprop: RmsPropConfig {
                lr: self.critic_lr,
                ..RmsPropConfig::default()
            },
            lipschitz: if self.clip > 0.0 { Lipschitz::Clip(self.clip) } else { Lipschitz::Off },
            weights: LossWeights {
                translation: w.translation,
                denoising: w.denoising,
                backtranslation: w.backtranslation,
                adv_generator: w.adv_generator,
                adv_critic: w.adv_critic,
            },
            noise: NoiseParams {
                max_shift: self.max_shift,
                p_mask: self.p_mask,
            },
            seed,
            max_updates: self.max_updates,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ban {
    #[default]
    Auto,
    On,
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    /// 1 decodes greedily.
    pub beam: usize,
    pub max_len: usize,
}

impl Default for DecodeSection {
    fn default() -> Self {
        Self { beam: 1, max_len: 40 }
    }
}

impl DecodeSection {
    pub fn to_core(&self) -> DecodeConfig {
        DecodeConfig {
            strategy: if self.beam <= 1 { Strategy::Greedy } else { Strategy::Beam(self.beam) },
            max_len: self.max_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub k_max: usize,
    pub epsilon: f64,
    pub later_epochs: usize,
    pub finetune: bool,
    /// Learning rate of the fine-tune pass; absent keeps the en2lrl rate.
    pub finetune_lr: Option<f64>,
    pub pretrain_lrl: bool,
    pub ban: Ban,
    pub bt_decode: DecodeSection,
}

impl Default for PipelineSection {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            k_max: p.k_max,
            epsilon: p.epsilon,
            later_epochs: p.later_epochs,
            finetune: p.finetune,
            finetune_lr: p.finetune_lr,
            pretrain_lrl: p.pretrain_lrl,
            ban: Ban::Auto,
            bt_decode: DecodeSection::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BleuSmoothing {
    #[default]
    AddOne,
    None,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BleuTokens {
    #[default]
    Whitespace,
    Char,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub max_order: usize,
    pub smoothing: BleuSmoothing,
    pub tokenization: BleuTokens,
    pub decode: DecodeSection,
    /// Sentences per side for the latent probe.
    pub probe_samples: usize,
    pub ablation_sizes: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            max_order: 4,
            smoothing: BleuSmoothing::AddOne,
            tokenization: BleuTokens::Whitespace,
            decode: DecodeSection::default(),
            probe_samples: 1000,
            ablation_sizes: vec![1_000, 10_000, 100_000],
        }
    }
}

fn overlay(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => overlay(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    /// Reads and validates `path`. An empty file gives the defaults.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        // Overlay on the serialized defaults so a partial section keeps the
        // defaults of its own phase, not those of the section type.
        let mut merged = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
        overlay(&mut merged, toml::from_str(text)?);
        let cfg: RunConfig = merged.try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.family_config().validate().context("[family]")?;
        self.pipeline_config().validate().context("[pipeline]")?;
        self.model_dims(1).validate().context("[model]")?;
        if self.critic.fc1 == 0 || self.critic.fc2 == 0 || self.critic.gru == 0 {
            bail!("[critic]: widths must be positive");
        }
        if self.eval.ablation_sizes.windows(2).any(|w| w[0] > w[1]) {
            bail!("[eval] ablation_sizes: must be ascending");
        }
        if self.filter.min_chars > self.filter.max_chars {
            bail!("[filter]: min_chars exceeds max_chars");
        }
        Ok(())
    }

    pub fn family_config(&self) -> FamilyConfig {
        let f = &self.family;
        FamilyConfig {
            seed: self.seed,
            vocab_size: f.vocab_size,
            n_parallel: f.n_parallel,
            n_mono: f.n_mono,
            n_mono_lrl: f.n_mono_lrl,
            lex_sub_rate: f.lex_sub_rate,
            spell_noise_rate: f.spell_noise_rate,
            lexical_mode: match f.lexical_mode {
                Lexical::PerType => LexicalMode::PerType,
                Lexical::PerToken => LexicalMode::PerToken,
            },
            script_remap: match f.script_remap {
                Remap::None => None,
                Remap::Greek => Some(ScriptRemap::greek()),
            },
            n_dev: f.n_dev,
            n_test: f.n_test,
        }
    }

    pub fn filter_config(&self) -> Option<FilterConfig> {
        self.filter.enabled.then_some(FilterConfig {
            max_foreign_ratio: self.filter.max_foreign_ratio,
            min_chars: self.filter.min_chars,
            max_chars: self.filter.max_chars,
        })
    }

    pub fn vocab_config(&self) -> VocabConfig {
        VocabConfig {
            mode: match self.vocab.mode {
                Mode::Word => TokenMode::Word,
                Mode::Char => TokenMode::Char,
            },
            min_count: self.vocab.min_count,
        }
    }

    pub fn model_dims(&self, vocab: usize) -> ModelDims {
        let m = &self.model;
        ModelDims {
            vocab,
            d_model: m.d_model,
            heads: m.heads,
            enc_layers: m.enc_layers,
            dec_layers: m.dec_layers,
            ffn: m.ffn,
        }
    }

    pub fn bleu_config(&self) -> BleuConfig {
        BleuConfig {
            max_order: self.eval.max_order,
            smoothing: match self.eval.smoothing {
                BleuSmoothing::AddOne => Smoothing::AddOne,
                BleuSmoothing::None => Smoothing::None,
            },
            tokenization: match self.eval.tokenization {
                BleuTokens::Whitespace => Tokenization::Whitespace,
                BleuTokens::Char => Tokenization::Char,
            },
        }
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        let p = &self.pipeline;
        PipelineConfig {
            model: self.model_dims(0),
            critic: CriticDims {
                input: 0,
                fc1: self.critic.fc1,
                fc2: self.critic.fc2,
                gru: self.critic.gru,
            },
            pretrain: self.pretrain.to_core(self.seed),
            pretrain_lrl: p.pretrain_lrl,
            supervised: self.supervised.to_core(self.seed),
            en2lrl: self.en2lrl.to_core(self.seed),
            lrl2en: self.lrl2en.to_core(self.seed),
            later_epochs: p.later_epochs,
            finetune: p.finetune,
            finetune_lr: p.finetune_lr,
            bt_decode: p.bt_decode.to_core(),
            eval_decode: self.eval.decode.to_core(),
            bleu: self.bleu_config(),
            ban: match p.ban {
                Ban::Auto => BanPolicy::Auto,
                Ban::On => BanPolicy::On,
                Ban::Off => BanPolicy::Off,
            },
            k_max: p.k_max,
            epsilon: p.epsilon,
            seed: self.seed,
        }
    }
}
