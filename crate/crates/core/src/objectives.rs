//! Task losses and their composition into generator and critic objectives.
//!
//! Every loss is built on a caller-owned [`Tape`]. Critic scores enter the
//! generator objective with the critic bound as constants, so generator
//! gradients never reach critic weights; the critic objective is built from
//! detached latents, so critic gradients never reach the translation model.

use alloc::vec::Vec;

use crate::autodiff::{BoundParams, Segments, Tape, Var};
use crate::corpus::{EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{pack, Critic, Model};

/// Training direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    En2Lrl,
    Lrl2En,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::En2Lrl => "en2lrl",
            Direction::Lrl2En => "lrl2en",
        }
    }
}

/// Source/target pairs with their language tokens, packed for the tape.
#[derive(Clone, Debug)]
pub struct PackedPairs {
    pub enc_ids: Vec<u32>,
    pub enc_segs: Segments,
    pub dec_ids: Vec<u32>,
    pub dec_segs: Segments,
    /// Next-token targets aligned with `dec_ids`: the target followed by EOS.
    pub targets: Vec<u32>,
}

impl PackedPairs {
    /// Encoder input `[src_lang] + src`, decoder input `[tgt_lang] + tgt`.
    pub fn new(pairs: &[(&[u32], &[u32])], src_lang: u32, tgt_lang: u32) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let enc: Vec<Vec<u32>> = pairs.iter().map(|(s, _)| crate::model::with_prefix(src_lang, s)).collect();
        let dec: Vec<Vec<u32>> = pairs.iter().map(|(_, t)| crate::model::with_prefix(tgt_lang, t)).collect();
        let targets = pairs
            .iter()
            .flat_map(|(_, t)| t.iter().copied().chain(core::iter::once(EOS)))
            .collect();
        let e: Vec<&[u32]> = enc.iter().map(Vec::as_slice).collect();
        let d: Vec<&[u32]> = dec.iter().map(Vec::as_slice).collect();
        let (enc_ids, enc_segs) = pack(&e);
        let (dec_ids, dec_segs) = pack(&d);
        Ok(Self {
            enc_ids,
            enc_segs,
            dec_ids,
            dec_segs,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.enc_segs.count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Encoder-only input `[lang] + seq` for each sequence.
#[derive(Clone, Debug)]
pub struct PackedSeqs {
    pub ids: Vec<u32>,
    pub segs: Segments,
}

impl PackedSeqs {
    pub fn new(seqs: &[&[u32]], lang: u32) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let v: Vec<Vec<u32>> = seqs.iter().map(|s| crate::model::with_prefix(lang, s)).collect();
        let r: Vec<&[u32]> = v.iter().map(Vec::as_slice).collect();
        let (ids, segs) = pack(&r);
        Ok(Self { ids, segs })
    }
}

/// Output of one sequence-to-sequence forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Seq2SeqOut {
    pub loss: Var,
    /// Encoder latents, one row per encoder input position.
    pub z: Var,
}

/// Mean token cross entropy of `batch` (PAD targets never occur in packed
/// batches but are ignored all the same).
pub fn seq2seq_loss(tape: &mut Tape<'_>, model: &Model, p: &BoundParams, batch: &PackedPairs) -> Seq2SeqOut {
    let enc = model.encode(tape, p, &batch.enc_ids, &batch.enc_segs);
    let logits = model.decode_logits(tape, p, enc, &batch.dec_ids, &batch.dec_segs);
    let loss = tape.cross_entropy(logits, &batch.targets, Some(PAD));
    Seq2SeqOut { loss, z: enc.z }
}

/// Supervised translation loss; the batch's language tokens select the
/// direction.
pub fn loss_translation(tape: &mut Tape<'_>, model: &Model, p: &BoundParams, batch: &PackedPairs) -> Seq2SeqOut {
    seq2seq_loss(tape, model, p, batch)
}

/// Backtranslation loss: same formula with the synthesized side as source.
/// Gradients flow only into `model`; the model that produced the pairs is
/// not on the tape.
pub fn loss_backtranslation(tape: &mut Tape<'_>, model: &Model, p: &BoundParams, batch: &PackedPairs) -> Seq2SeqOut {
    seq2seq_loss(tape, model, p, batch)
}

/// Sum of the HRL and LRL reconstruction losses. Each batch's encoder side
/// holds noised text under the HRL token, its decoder side the clean text
/// under the language's own token.
pub fn loss_denoising(
    tape: &mut Tape<'_>,
    model: &Model,
    p: &BoundParams,
    hrl: Option<&PackedPairs>,
    lrl: Option<&PackedPairs>,
) -> Result<(Var, Seq2SeqOut, Seq2SeqOut)> {
    let hrl = hrl.ok_or(Error::MissingStream("denoising HRL sub-batch"))?;
    let lrl = lrl.ok_or(Error::MissingStream("denoising LRL sub-batch"))?;
    let h = seq2seq_loss(tape, model, p, hrl);
    let l = seq2seq_loss(tape, model, p, lrl);
    let sum = tape.add(h.loss, l.loss);
    Ok((sum, h, l))
}

/// One critic score per latent sequence.
pub fn critic_scores(tape: &mut Tape<'_>, critic: &Critic, cp: &BoundParams, z: Var, segs: &Segments) -> Var {
    critic.score(tape, cp, z, segs)
}

fn nonempty(tape: &Tape<'_>, v: Var) -> Result<()> {
    if tape.value(v).rows() == 0 {
        Err(Error::EmptyBatch)
    } else {
        Ok(())
    }
}

/// `mean(scores_a) − mean(scores_b)`; with HRL scores as `a` and LRL scores
/// as `b` this is the HRL/LRL Wasserstein estimate used in both directions.
pub fn loss_adv_pair(tape: &mut Tape<'_>, scores_a: Var, scores_b: Var) -> Result<Var> {
    nonempty(tape, scores_a)?;
    nonempty(tape, scores_b)?;
    let a = tape.mean(scores_a);
    let b = tape.mean(scores_b);
    Ok(tape.sub(a, b))
}

/// `mean(non-English pool) − mean(English pool)`, each pool being the
/// concatenation of its score vectors.
pub fn loss_adv_english(tape: &mut Tape<'_>, non_english: &[Var], english: &[Var]) -> Result<Var> {
    if non_english.is_empty() || english.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let a = tape.concat_rows(non_english);
    let b = tape.concat_rows(english);
    loss_adv_pair(tape, a, b)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub translation: f64,
    pub denoising: f64,
    pub backtranslation: f64,
    /// Multiplier of the adversarial terms in the generator objective.
    pub adv_generator: f64,
    /// Multiplier of the adversarial terms in the critic objective.
    pub adv_critic: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            translation: 1.0,
            denoising: 1.0,
            backtranslation: 1.0,
            adv_generator: -60.0,
            adv_critic: 1.0,
        }
    }
}

/// Per-task scalar losses of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub translation: f64,
    pub denoising: f64,
    pub backtranslation: f64,
    pub adv1: f64,
    pub adv2: f64,
    /// Single-critic term of the LRL→En direction.
    pub adv: f64,
}

impl LossReport {
    pub fn all_finite(&self) -> bool {
        [self.translation, self.denoising, self.backtranslation, self.adv1, self.adv2, self.adv]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Adversarial total for `direction`.
    pub fn adversarial(&self, direction: Direction) -> f64 {
        match direction {
            Direction::En2Lrl => self.adv1 + self.adv2,
            Direction::Lrl2En => self.adv,
        }
    }
}

/// `(generator objective, critic objective)`.
///
/// En→LRL: `wt·L_t + wd·L_da + wb·L_bt + m·(L_adv1 + L_adv2)`; LRL→En:
/// `wt·L_t + wb·L_bt + m·L_adv`, with `m` the generator multiplier. The
/// critic objective is `c·(adversarial total)`, descended by the critics.
pub fn compose_losses(report: &LossReport, weights: &LossWeights, direction: Direction) -> (f64, f64) {
    let adv = report.adversarial(direction);
    let ce = match direction {
        Direction::En2Lrl => {
            weights.translation * report.translation
                + weights.denoising * report.denoising
                + weights.backtranslation * report.backtranslation
        }
        Direction::Lrl2En => weights.translation * report.translation + weights.backtranslation * report.backtranslation,
    };
    (ce + weights.adv_generator * adv, weights.adv_critic * adv)
}

/// Weighted sum `Σ wᵢ·termᵢ` on the tape, skipping absent terms and zero
/// weights. Returns `None` when nothing contributes.
pub fn weighted_sum(tape: &mut Tape<'_>, terms: &[(Option<Var>, f64)]) -> Option<Var> {
    let mut acc: Option<Var> = None;
    for &(t, w) in terms {
        let Some(t) = t else { continue };
        if w == 0.0 {
            continue;
        }
        acc = Some(match acc {
            None => tape.scale(t, w),
            Some(a) => tape.add_scaled(a, t, w),
        });
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math;
    use crate::tensor::Matrix;

    #[test]
    fn composition_matches_documented_sums() {
        let w = LossWeights::default();
        let r = LossReport {
            adv1: 0.5,
            ..LossReport::default()
        };
        assert_eq!(compose_losses(&r, &w, Direction::En2Lrl), (-30.0, 0.5));
        let r = LossReport {
            translation: 1.0,
            denoising: 2.0,
            backtranslation: 3.0,
            ..LossReport::default()
        };
        assert_eq!(compose_losses(&r, &w, Direction::En2Lrl).0, 6.0);
        assert_eq!(compose_losses(&r, &w, Direction::Lrl2En).0, 4.0);
        let r = LossReport {
            adv: 0.25,
            adv1: 9.0,
            ..LossReport::default()
        };
        assert_eq!(compose_losses(&r, &w, Direction::Lrl2En), (-15.0, 0.25));
    }

    #[test]
    fn adversarial_arithmetic() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::from_vec(2, 1, alloc::vec![0.6, 0.8]));
        let b = t.leaf(Matrix::from_vec(3, 1, alloc::vec![0.1, 0.2, 0.3]));
        let l = loss_adv_pair(&mut t, a, b).unwrap();
        assert!((t.value(l).item() - 0.5).abs() < 1e-15);
        let e = t.leaf(Matrix::from_vec(1, 1, alloc::vec![0.25]));
        let one = t.leaf(Matrix::from_vec(2, 1, alloc::vec![1.0, 1.0]));
        let l2 = loss_adv_english(&mut t, &[one], &[e]).unwrap();
        assert_eq!(t.value(l2).item(), 0.75);
        let empty = t.leaf(Matrix::zeros(0, 1));
        assert_eq!(loss_adv_pair(&mut t, a, empty), Err(Error::EmptyBatch));
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut t = Tape::new();
        let l = t.leaf(Matrix::zeros(4, 10));
        let ce = t.cross_entropy(l, &[1, 2, 3, 4], Some(PAD));
        assert!((t.value(ce).item() - math::ln(10.0)).abs() < 1e-12);
    }

    #[test]
    fn empty_batches_rejected() {
        assert!(matches!(PackedPairs::new(&[], 5, 6), Err(Error::EmptyBatch)));
        assert!(matches!(PackedSeqs::new(&[], 5), Err(Error::EmptyBatch)));
    }
}
