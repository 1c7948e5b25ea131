//! BLEU, latent-alignment probes and output-script purity.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::{self, domain};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Smoothing {
    /// Plain modified precisions; any zero precision gives BLEU 0.
    None,
    /// `(m + 1) / (t + 1)` for orders 2 and above.
    AddOne,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tokenization {
    Whitespace,
    Char,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BleuConfig {
    pub max_order: usize,
    pub smoothing: Smoothing,
    pub tokenization: Tokenization,
}

impl Default for BleuConfig {
    fn default() -> Self {
        Self {
            max_order: 4,
            smoothing: Smoothing::AddOne,
            tokenization: Tokenization::Whitespace,
        }
    }
}

impl BleuConfig {
    pub fn exact() -> Self {
        Self {
            smoothing: Smoothing::None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_order == 0 {
            return Err(Error::InvalidConfig("BLEU order must be at least 1".into()));
        }
        Ok(())
    }
}

fn ngram_counts<T: Ord>(seq: &[T], n: usize) -> BTreeMap<&[T], usize> {
    let mut m = BTreeMap::new();
    if seq.len() >= n {
        for g in seq.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU over pre-tokenized sequences, in [0, 100].
pub fn bleu_tokens<T: Ord>(hyps: &[Vec<T>], refs: &[Vec<T>], cfg: &BleuConfig) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::LengthMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if cfg.max_order == 0 {
        return Err(Error::InvalidConfig("BLEU order must be at least 1".into()));
    }
    let n_max = cfg.max_order;
    let mut matches = alloc::vec![0usize; n_max];
    let mut totals = alloc::vec![0usize; n_max];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=n_max {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..n_max {
        let (m, t) = (matches[n] as f64, totals[n] as f64);
        let p = match cfg.smoothing {
            Smoothing::AddOne if n >= 1 => (m + 1.0) / (t + 1.0),
            _ if t == 0.0 => 0.0,
            _ => m / t,
        };
        if p == 0.0 {
            return Ok(0.0);
        }
        log_sum += libm::log(p);
    }
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        libm::exp(1.0 - ref_len as f64 / hyp_len as f64)
    };
    Ok(100.0 * bp * libm::exp(log_sum / n_max as f64))
}

fn split(s: &str, t: Tokenization) -> Vec<&str> {
    match t {
        Tokenization::Whitespace => s.split_whitespace().collect(),
        Tokenization::Char => s.char_indices().filter(|(_, c)| !c.is_whitespace()).map(|(i, c)| &s[i..i + c.len_utf8()]).collect(),
    }
}

/// Corpus BLEU over detokenized text, tokenized per `cfg.tokenization`.
pub fn bleu<S: AsRef<str>>(hyps: &[S], refs: &[S], cfg: &BleuConfig) -> Result<f64> {
    let h: Vec<Vec<&str>> = hyps.iter().map(|s| split(s.as_ref(), cfg.tokenization)).collect();
    let r: Vec<Vec<&str>> = refs.iter().map(|s| split(s.as_ref(), cfg.tokenization)).collect();
    bleu_tokens(&h, &r, cfg)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeReport {
    /// Held-out balanced accuracy of a logistic probe.
    pub probe_accuracy: f64,
    /// Held-out mean score difference of a 1-Lipschitz linear critic.
    pub wasserstein_gap: f64,
}

pub const PROBE_MIN_SAMPLES: usize = 100;
const PROBE_SEED: u64 = 0x5eed;
const PROBE_ITERS: usize = 400;
const PROBE_LR: f64 = 0.5;
const PROBE_L2: f64 = 1e-3;

/// Mean-pooled encoder output of each sequence, one row per input.
pub fn pooled_latents(model: &Model, lang: u32, seqs: &[&[u32]]) -> Result<Matrix> {
    let d = model.dims().d_model;
    let mut out = Matrix::zeros(seqs.len(), d);
    for (ci, chunk) in seqs.chunks(256).enumerate() {
        for (k, z) in model.encode_batch(lang, chunk)?.iter().enumerate() {
            let row = out.row_mut(ci * 256 + k);
            for r in 0..z.rows() {
                for (o, v) in row.iter_mut().zip(z.row(r)) {
                    *o += v;
                }
            }
            let inv = 1.0 / z.rows() as f64;
            row.iter_mut().for_each(|o| *o *= inv);
        }
    }
    Ok(out)
}

fn split_80_20(n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(PROBE_SEED, domain("probe-split"), n as u64));
    let cut = n * 4 / 5;
    let test = idx.split_off(cut);
    (idx, test)
}

/// How separable two sets of pooled latents are. Both sides use the same
/// fixed-seed 80/20 split; the probe and critic are fitted on the training
/// rows and scored on the held-out rows.
pub fn probe_alignment(a: &Matrix, b: &Matrix) -> Result<ProbeReport> {
    for m in [a, b] {
        if m.rows() < PROBE_MIN_SAMPLES {
            return Err(Error::InsufficientSamples {
                need: PROBE_MIN_SAMPLES,
                got: m.rows(),
            });
        }
    }
    if a.cols() != b.cols() {
        return Err(Error::InvalidConfig("latent widths differ".into()));
    }
    let d = a.cols();
    let (tr_a, te_a) = split_80_20(a.rows());
    let (tr_b, te_b) = split_80_20(b.rows());

    // Standardize on the training rows.
    let train: Vec<(&[f64], f64)> = tr_a
        .iter()
        .map(|&i| (a.row(i), 1.0))
        .chain(tr_b.iter().map(|&i| (b.row(i), 0.0)))
        .collect();
    let n = train.len() as f64;
    let mut mu = alloc::vec![0.0; d];
    for (x, _) in &train {
        for (m, v) in mu.iter_mut().zip(*x) {
            *m += v / n;
        }
    }
    let mut sd = alloc::vec![0.0; d];
    for (x, _) in &train {
        for j in 0..d {
            sd[j] += (x[j] - mu[j]) * (x[j] - mu[j]) / n;
        }
    }
    for s in &mut sd {
        *s = if *s > 1e-24 { libm::sqrt(*s) } else { 1.0 };
    }
    let norm = |x: &[f64]| -> Vec<f64> { x.iter().zip(&mu).zip(&sd).map(|((v, m), s)| (v - m) / s).collect() };
    let xs: Vec<(Vec<f64>, f64)> = train.iter().map(|(x, y)| (norm(x), *y)).collect();

    // Class-balanced full-batch logistic regression.
    let (na, nb) = (tr_a.len() as f64, tr_b.len() as f64);
    let mut w = alloc::vec![0.0; d];
    let mut bias = 0.0;
    for _ in 0..PROBE_ITERS {
        let mut gw = alloc::vec![0.0; d];
        let mut gb = 0.0;
        for (x, y) in &xs {
            let z = bias + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let weight = if *y > 0.5 { 0.5 / na } else { 0.5 / nb };
            let g = (crate::math::sigmoid(z) - y) * weight;
            gb += g;
            for (gj, xj) in gw.iter_mut().zip(x) {
                *gj += g * xj;
            }
        }
        for (wj, gj) in w.iter_mut().zip(&gw) {
            *wj -= PROBE_LR * (gj + PROBE_L2 * *wj);
        }
        bias -= PROBE_LR * gb;
    }
    let predict = |x: &[f64]| bias + norm(x).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() > 0.0;
    let acc_a = te_a.iter().filter(|&&i| predict(a.row(i))).count() as f64 / te_a.len() as f64;
    let acc_b = te_b.iter().filter(|&&i| !predict(b.row(i))).count() as f64 / te_b.len() as f64;

    // The best 1-Lipschitz linear critic on the training rows points along
    // the difference of class means.
    let mean_of = |m: &Matrix, rows: &[usize]| -> Vec<f64> {
        let mut out = alloc::vec![0.0; d];
        for &i in rows {
            for (o, v) in out.iter_mut().zip(m.row(i)) {
                *o += v / rows.len() as f64;
            }
        }
        out
    };
    let diff: Vec<f64> = mean_of(a, &tr_a).iter().zip(mean_of(b, &tr_b)).map(|(x, y)| x - y).collect();
    let len = libm::sqrt(diff.iter().map(|v| v * v).sum::<f64>());
    let gap = if len > 0.0 {
        let (ma, mb) = (mean_of(a, &te_a), mean_of(b, &te_b));
        let s: f64 = diff.iter().zip(ma.iter().zip(&mb)).map(|(u, (x, y))| u * (x - y)).sum();
        libm::fabs(s / len)
    } else {
        0.0
    };
    Ok(ProbeReport {
        probe_accuracy: 0.5 * (acc_a + acc_b),
        wasserstein_gap: gap,
    })
}

/// Fraction of non-special output tokens written purely in `allowed`.
/// An output set without such tokens counts as pure.
pub fn script_purity(outputs: &[Vec<u32>], vocab: &Vocabulary, allowed: &str) -> f64 {
    let (mut pure, mut total) = (0usize, 0usize);
    for &id in outputs.iter().flatten() {
        if vocab.is_special(id) {
            continue;
        }
        total += 1;
        if vocab.script_class(id) == allowed {
            pure += 1;
        }
    }
    if total == 0 {
        log::warn!("script purity of an empty output set is taken as 1");
        return 1.0;
    }
    pure as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn identical_corpora_score_100() {
        let h = ["the cat sat on the mat", "a b"];
        for cfg in [BleuConfig::default(), BleuConfig { max_order: 2, ..BleuConfig::exact() }] {
            assert!((bleu(&h, &h, &cfg).unwrap() - 100.0).abs() < 1e-12);
        }
    }

    #[test]
    fn no_four_gram_overlap_without_smoothing_is_zero() {
        let h = ["a b c d e"];
        let r = ["a b c x d e"];
        assert_eq!(bleu(&h, &r, &BleuConfig::exact()).unwrap(), 0.0);
        assert!(bleu(&h, &r, &BleuConfig::default()).unwrap() > 0.0);
    }

    #[test]
    fn hand_computed_value() {
        // p1 = 3/4, p2 = (1+1)/(3+1) with add-one, bp = exp(1 - 5/4).
        let cfg = BleuConfig {
            max_order: 2,
            ..BleuConfig::default()
        };
        let s = bleu(&["a b c d"], &["a b x c e"], &cfg).unwrap();
        let expect = 100.0 * libm::exp(1.0 - 5.0 / 4.0) * libm::sqrt(0.75 * 0.5);
        assert!((s - expect).abs() < 1e-12);
    }

    #[test]
    fn bleu_errors() {
        let cfg = BleuConfig::default();
        assert!(matches!(bleu(&["a"], &["a", "b"], &cfg), Err(Error::LengthMismatch { .. })));
        let empty: [&str; 0] = [];
        assert_eq!(bleu(&empty, &empty, &cfg), Err(Error::EmptyCorpus));
    }

    #[test]
    fn order_invariance() {
        let h = ["a b c", "d e f g", "h"];
        let r = ["a b d", "d e f", "h i"];
        let h2 = [h[2], h[0], h[1]];
        let r2 = [r[2], r[0], r[1]];
        let cfg = BleuConfig::default();
        assert_eq!(bleu(&h, &r, &cfg).unwrap(), bleu(&h2, &r2, &cfg).unwrap());
    }

    fn rows(n: usize, f: impl Fn(usize, usize) -> f64) -> Matrix {
        let mut m = Matrix::zeros(n, 6);
        for i in 0..n {
            for j in 0..6 {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    #[test]
    fn probe_on_identical_sets_is_chance() {
        let a = rows(200, |i, j| libm::sin((i * 7 + j * 3) as f64));
        let r = probe_alignment(&a, &a).unwrap();
        assert!((r.probe_accuracy - 0.5).abs() <= 0.05);
        assert!(r.wasserstein_gap < 1e-12);
    }

    #[test]
    fn probe_on_constant_sets_separates() {
        let a = rows(150, |_, _| 1.0);
        let b = rows(120, |_, _| 0.0);
        let r = probe_alignment(&a, &b).unwrap();
        assert!(r.probe_accuracy >= 0.99);
        assert!((r.wasserstein_gap - libm::sqrt(6.0)).abs() < 1e-9);
    }

    #[test]
    fn probe_needs_samples() {
        let a = rows(99, |_, _| 0.0);
        let b = rows(200, |_, _| 0.0);
        assert!(matches!(probe_alignment(&a, &b), Err(Error::InsufficientSamples { need: 100, got: 99 })));
    }

    #[test]
    fn purity_counts_non_specials() {
        use crate::corpus::{build_vocab, LanguageTag, VocabConfig};
        let langs = [
            LanguageTag::new("x", "ab".chars(), "latin").unwrap(),
            LanguageTag::new("y", "κλ".chars(), "greek").unwrap(),
        ];
        let v = build_vocab([["ab κλ aκ"].as_slice()], &langs, &VocabConfig::default()).unwrap();
        let (ab, kl, mixed) = (v.id("ab").unwrap(), v.id("κλ").unwrap(), v.id("aκ").unwrap());
        assert_eq!(script_purity(&[vec![kl, kl, crate::corpus::EOS]], &v, "greek"), 1.0);
        assert_eq!(script_purity(&[vec![kl, ab], vec![mixed, kl]], &v, "greek"), 0.5);
        assert_eq!(script_purity(&[], &v, "greek"), 1.0);
    }
}
