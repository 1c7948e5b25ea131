//! A synthetic English / HRL / LRL family.
//!
//! English comes from a subject–verb–object template grammar with
//! selectional preferences (each noun takes a few adjectives and verbs, each
//! verb a few objects and one adverb), so word meaning is recoverable from
//! distribution alone. The HRL is a word-level bijection of English into
//! fresh pseudo-words. The LRL is derived from HRL text by dialect
//! substitution, spelling perturbation, and an optional script remap.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::corpus::{LanguageTag, MonolingualCorpus, ParallelCorpus, Sentence};
use crate::error::{Error, Result};
use crate::rng::{self, domain};

pub const EN: &str = "en";
pub const HRL: &str = "hrl";
pub const LRL: &str = "lrl";

const CONSONANTS: &[u8] = b"bcdfghjklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const CODAS: &[u8] = b"nrs";
/// Spelling confusions used for dialect orthography.
const CONFUSIONS: [(char, char); 3] = [('e', 'i'), ('o', 'u'), ('a', 'e')];

/// How lexical substitution rate is realised.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LexicalMode {
    /// A fixed subset of content-word types always takes its dialect form;
    /// the subset is chosen so that its share of running words is close to
    /// the substitution rate.
    #[default]
    PerType,
    /// Every occurrence of a lexicon word is substituted independently with
    /// the substitution rate; every HRL word has a dialect form.
    PerToken,
}

/// Character bijection applied to LRL text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScriptRemap {
    map: BTreeMap<char, char>,
}

impl ScriptRemap {
    pub fn new(pairs: impl IntoIterator<Item = (char, char)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut image = BTreeSet::new();
        for (a, b) in pairs {
            if map.insert(a, b).is_some() || !image.insert(b) {
                return Err(Error::InvalidConfig("script remap is not a bijection".into()));
            }
        }
        if map.is_empty() {
            return Err(Error::InvalidConfig("script remap is empty".into()));
        }
        Ok(Self { map })
    }

    /// `a..z` onto consecutive Greek lower-case code points from `α`.
    pub fn greek() -> Self {
        Self::new(('a'..='z').enumerate().map(|(i, c)| (c, char::from_u32(0x3b1 + i as u32).unwrap())))
            .expect("consecutive code points are distinct")
    }

    pub fn apply(&self, s: &str) -> String {
        s.chars().map(|c| self.map.get(&c).copied().unwrap_or(c)).collect()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (char, char)> + '_ {
        self.map.iter().map(|(a, b)| (*a, *b))
    }

    pub fn image(&self) -> impl Iterator<Item = char> + '_ {
        self.map.values().copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FamilyConfig {
    pub seed: u64,
    /// Number of English word types.
    pub vocab_size: usize,
    pub n_parallel: usize,
    /// English and HRL monolingual sentences each.
    pub n_mono: usize,
    pub n_mono_lrl: usize,
    pub lex_sub_rate: f64,
    pub spell_noise_rate: f64,
    pub lexical_mode: LexicalMode,
    pub script_remap: Option<ScriptRemap>,
    pub n_dev: usize,
    pub n_test: usize,
}

impl Default for FamilyConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            vocab_size: 93,
            n_parallel: 20_000,
            n_mono: 20_000,
            n_mono_lrl: 20_000,
            lex_sub_rate: 0.3,
            spell_noise_rate: 0.1,
            lexical_mode: LexicalMode::PerType,
            script_remap: None,
            n_dev: 500,
            n_test: 1000,
        }
    }
}

impl FamilyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.lex_sub_rate) || !(0.0..=1.0).contains(&self.spell_noise_rate) {
            return bad("rates must lie in [0, 1]");
        }
        if self.vocab_size < 20 {
            return bad("vocab_size must be at least 20");
        }
        if self.n_parallel == 0 || self.n_mono == 0 || self.n_mono_lrl == 0 || self.n_dev == 0 || self.n_test == 0 {
            return bad("corpus sizes must be positive");
        }
        Ok(())
    }
}

/// Word-level HRL→LRL transform.
#[derive(Clone, Debug, PartialEq)]
pub struct LrlTransform {
    pub mode: LexicalMode,
    pub lex_rate: f64,
    pub spell_rate: f64,
    /// HRL word → dialect word.
    pub lexicon: BTreeMap<String, String>,
    /// HRL word → its single-character spelling variant.
    pub spelling: BTreeMap<String, String>,
    pub remap: Option<ScriptRemap>,
}

impl LrlTransform {
    pub fn apply<R: Rng + ?Sized>(&self, s: &str, rng: &mut R) -> String {
        let mut out = String::with_capacity(s.len() + 8);
        for (i, w) in s.split_whitespace().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let word = self.transform_word(w, rng);
            match &self.remap {
                Some(r) => out.push_str(&r.apply(word)),
                None => out.push_str(word),
            }
        }
        out
    }

    fn transform_word<'a, R: Rng + ?Sized>(&'a self, w: &'a str, rng: &mut R) -> &'a str {
        if let Some(d) = self.lexicon.get(w) {
            let hit = match self.mode {
                LexicalMode::PerType => true,
                LexicalMode::PerToken => rng.random::<f64>() < self.lex_rate,
            };
            if hit {
                return d;
            }
        }
        if self.spell_rate > 0.0 && rng.random::<f64>() < self.spell_rate {
            if let Some(v) = self.spelling.get(w) {
                return v;
            }
        }
        w
    }
}

/// Applies `t` to one HRL sentence.
pub fn hrl_to_lrl<R: Rng + ?Sized>(s: &Sentence, t: &LrlTransform, rng: &mut R) -> Sentence {
    Sentence::new(t.apply(s.as_str(), rng)).expect("words contain no line breaks")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Pos {
    Det,
    Prep,
    Noun,
    Verb,
    Adj,
    Adv,
}

/// The generated lexicon and grammar of one family.
#[derive(Clone, Debug)]
pub struct Family {
    dets: Vec<String>,
    preps: Vec<String>,
    nouns: Vec<String>,
    verbs: Vec<String>,
    noun_adjs: Vec<[usize; 2]>,
    noun_verbs: Vec<[usize; 3]>,
    verb_objs: Vec<[usize; 3]>,
    verb_adv: Vec<usize>,
    adjs: Vec<String>,
    advs: Vec<String>,
    to_hrl: BTreeMap<String, String>,
    transform: LrlTransform,
    languages: [LanguageTag; 3],
}

fn pseudo_word<R: Rng + ?Sized>(rng: &mut R, used: &mut BTreeSet<String>, syllables: (usize, usize)) -> String {
    loop {
        let n = rng.random_range(syllables.0..=syllables.1);
        let mut w = String::new();
        for _ in 0..n {
            w.push(*CONSONANTS.choose(rng).unwrap() as char);
            w.push(*VOWELS.choose(rng).unwrap() as char);
        }
        if rng.random::<bool>() {
            w.push(*CODAS.choose(rng).unwrap() as char);
        }
        if used.insert(w.clone()) {
            return w;
        }
    }
}

fn fnv(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// One-character confusion of `w` at a position fixed by the word itself,
/// avoiding collisions with existing words.
fn spelling_variant(w: &str, used: &BTreeSet<String>) -> Option<String> {
    let chars: Vec<char> = w.chars().collect();
    let positions: Vec<usize> = (0..chars.len())
        .filter(|&i| CONFUSIONS.iter().any(|(a, _)| *a == chars[i]))
        .collect();
    if positions.is_empty() {
        return None;
    }
    let start = (fnv(w) % positions.len() as u64) as usize;
    for k in 0..positions.len() {
        let i = positions[(start + k) % positions.len()];
        let mut v = chars.clone();
        v[i] = CONFUSIONS.iter().find(|(a, _)| *a == chars[i]).unwrap().1;
        let v: String = v.into_iter().collect();
        if !used.contains(&v) {
            return Some(v);
        }
    }
    None
}

fn pick_distinct<const N: usize, R: Rng + ?Sized>(n: usize, rng: &mut R) -> [usize; N] {
    let idx = rand::seq::index::sample(rng, n, N);
    core::array::from_fn(|i| idx.index(i))
}

impl Family {
    pub fn new(cfg: &FamilyConfig) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(cfg.seed, domain("family"), 0);
        let mut used = BTreeSet::new();
        let content = cfg.vocab_size - 5;
        let n_noun = (content * 45 / 100).max(3);
        let n_verb = (content * 22 / 100).max(3);
        let n_adj = (content * 22 / 100).max(2);
        let n_adv = (content - n_noun - n_verb - n_adj).max(1);
        let mut words = |n: usize, syl: (usize, usize)| -> Vec<String> {
            (0..n).map(|_| pseudo_word(&mut r, &mut used, syl)).collect()
        };
        let dets = words(2, (1, 1));
        let preps = words(3, (1, 1));
        let nouns = words(n_noun, (2, 3));
        let verbs = words(n_verb, (2, 3));
        let adjs = words(n_adj, (2, 3));
        let advs = words(n_adv, (2, 3));
        let noun_adjs = (0..n_noun).map(|_| pick_distinct(n_adj, &mut r)).collect();
        let noun_verbs = (0..n_noun).map(|_| pick_distinct(n_verb, &mut r)).collect();
        let verb_objs = (0..n_verb).map(|_| pick_distinct(n_noun, &mut r)).collect();
        let verb_adv = (0..n_verb).map(|_| r.random_range(0..n_adv)).collect();

        let mut tagged: Vec<(Pos, String)> = Vec::new();
        for (pos, list) in [
            (Pos::Det, &dets),
            (Pos::Prep, &preps),
            (Pos::Noun, &nouns),
            (Pos::Verb, &verbs),
            (Pos::Adj, &adjs),
            (Pos::Adv, &advs),
        ] {
            tagged.extend(list.iter().map(|w| (pos, w.clone())));
        }
        let mut to_hrl = BTreeMap::new();
        for (pos, w) in &tagged {
            let syl = if matches!(pos, Pos::Det | Pos::Prep) { (1, 1) } else { (2, 3) };
            to_hrl.insert(w.clone(), pseudo_word(&mut r, &mut used, syl));
        }

        let mut fam = Self {
            dets,
            preps,
            nouns,
            verbs,
            noun_adjs,
            noun_verbs,
            verb_objs,
            verb_adv,
            adjs,
            advs,
            to_hrl,
            transform: LrlTransform {
                mode: cfg.lexical_mode,
                lex_rate: cfg.lex_sub_rate,
                spell_rate: cfg.spell_noise_rate,
                lexicon: BTreeMap::new(),
                spelling: BTreeMap::new(),
                remap: cfg.script_remap.clone(),
            },
            languages: languages(cfg.script_remap.as_ref()),
        };

        let lexicon_types: Vec<String> = match cfg.lexical_mode {
            LexicalMode::PerToken => tagged.iter().map(|(_, w)| fam.to_hrl[w].clone()).collect(),
            LexicalMode::PerType => fam.mass_matched_types(cfg, &tagged, &mut r),
        };
        for h in lexicon_types {
            let syl = (2, 3);
            let d = pseudo_word(&mut r, &mut used, syl);
            fam.transform.lexicon.insert(h, d);
        }
        let hrl_words: Vec<String> = fam.to_hrl.values().cloned().collect();
        for h in hrl_words {
            if let Some(v) = spelling_variant(&h, &used) {
                used.insert(v.clone());
                fam.transform.spelling.insert(h, v);
            }
        }
        Ok(fam)
    }

    /// Content-word HRL types whose share of running words is as close as
    /// possible to the lexical rate, by greedy selection in random order.
    fn mass_matched_types<R: Rng + ?Sized>(&self, cfg: &FamilyConfig, tagged: &[(Pos, String)], r: &mut R) -> Vec<String> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        let mut total = 0usize;
        let mut sr = rng::stream(cfg.seed, domain("lexicon-sample"), 0);
        for _ in 0..20_000 {
            for w in self.english_words(&mut sr) {
                *counts.entry(w).or_default() += 1;
                total += 1;
            }
        }
        let mut content: Vec<&str> = tagged
            .iter()
            .filter(|(p, _)| !matches!(p, Pos::Det | Pos::Prep))
            .map(|(_, w)| w.as_str())
            .collect();
        content.shuffle(r);
        let target = cfg.lex_sub_rate * total as f64;
        let mut mass = 0.0;
        let mut chosen = Vec::new();
        for w in content {
            let m = counts.get(w).copied().unwrap_or(0) as f64;
            if (mass + m - target).abs() < (mass - target).abs() {
                mass += m;
                chosen.push(self.to_hrl[w].clone());
            }
        }
        chosen
    }

    fn noun_phrase<'a, R: Rng + ?Sized>(&'a self, noun: usize, rng: &mut R, out: &mut Vec<&'a str>) {
        out.push(self.dets.choose(rng).unwrap());
        if rng.random::<bool>() {
            out.push(&self.adjs[*self.noun_adjs[noun].choose(rng).unwrap()]);
        }
        out.push(&self.nouns[noun]);
    }

    fn english_words<'a, R: Rng + ?Sized>(&'a self, rng: &mut R) -> Vec<&'a str> {
        let mut out = Vec::with_capacity(12);
        let s = rng.random_range(0..self.nouns.len());
        let v = *self.noun_verbs[s].choose(rng).unwrap();
        let o = *self.verb_objs[v].choose(rng).unwrap();
        self.noun_phrase(s, rng, &mut out);
        out.push(&self.verbs[v]);
        self.noun_phrase(o, rng, &mut out);
        if rng.random::<f64>() < 0.4 {
            out.push(&self.advs[self.verb_adv[v]]);
        }
        if rng.random::<f64>() < 0.3 {
            out.push(self.preps.choose(rng).unwrap());
            let n = rng.random_range(0..self.nouns.len());
            self.noun_phrase(n, rng, &mut out);
        }
        out
    }

    pub fn english_sentence<R: Rng + ?Sized>(&self, rng: &mut R) -> Sentence {
        Sentence::new(self.english_words(rng).join(" ")).expect("no line breaks")
    }

    pub fn to_hrl(&self, en: &Sentence) -> Sentence {
        let words: Vec<&str> = en
            .as_str()
            .split_whitespace()
            .map(|w| self.to_hrl.get(w).map_or(w, String::as_str))
            .collect();
        Sentence::new(words.join(" ")).expect("no line breaks")
    }

    pub fn transform(&self) -> &LrlTransform {
        &self.transform
    }

    pub fn languages(&self) -> &[LanguageTag; 3] {
        &self.languages
    }

    pub fn english_vocab_size(&self) -> usize {
        self.to_hrl.len()
    }
}

fn languages(remap: Option<&ScriptRemap>) -> [LanguageTag; 3] {
    let latin = || LanguageTag::new(EN, 'a'..='z', "latin").unwrap();
    let mut hrl = latin();
    hrl.id = HRL.to_string();
    let lrl = match remap {
        Some(r) => {
            let class = if r.image().all(|c| ('\u{370}'..='\u{3ff}').contains(&c)) { "greek" } else { "remapped" };
            LanguageTag::new(LRL, r.image(), class).unwrap()
        }
        None => {
            let mut l = latin();
            l.id = LRL.to_string();
            l
        }
    };
    [latin(), hrl, lrl]
}

/// All corpora of one synthetic family.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub languages: [LanguageTag; 3],
    pub en_hrl: ParallelCorpus,
    pub mono_en: MonolingualCorpus,
    pub mono_hrl: MonolingualCorpus,
    pub mono_lrl: MonolingualCorpus,
    /// Held-out pairs for model selection and convergence checks.
    pub dev_en_lrl: ParallelCorpus,
    /// Held-out pairs used only for reporting.
    pub test_en_lrl: ParallelCorpus,
}

impl DatasetBundle {
    pub fn language(&self, id: &str) -> Option<&LanguageTag> {
        self.languages.iter().find(|l| l.id == id)
    }

    /// Whether any held-out English or LRL sentence occurs in a training
    /// corpus.
    pub fn held_out_leaks(&self) -> usize {
        let mut train: BTreeSet<&str> = BTreeSet::new();
        for (a, b) in &self.en_hrl.pairs {
            train.insert(a.as_str());
            train.insert(b.as_str());
        }
        for c in [&self.mono_en, &self.mono_hrl, &self.mono_lrl] {
            train.extend(c.sentences.iter().map(Sentence::as_str));
        }
        self.dev_en_lrl
            .pairs
            .iter()
            .chain(&self.test_en_lrl.pairs)
            .filter(|(a, b)| train.contains(a.as_str()) || train.contains(b.as_str()))
            .count()
    }
}

/// Generates every corpus of a family. Sentence `i` of each corpus uses its
/// own random stream, so corpora are independent of generation order.
pub fn gen_family(cfg: &FamilyConfig) -> Result<DatasetBundle> {
    let fam = Family::new(cfg)?;
    let seed = cfg.seed;
    let mut held_out: BTreeSet<String> = BTreeSet::new();

    let draw = |label: &str, i: usize, exclude: &BTreeSet<String>| -> (Sentence, u64) {
        for attempt in 0.. {
            let mut r = rng::stream(seed, domain(label) ^ attempt, i as u64);
            let s = fam.english_sentence(&mut r);
            if !exclude.contains(s.as_str()) {
                return (s, attempt);
            }
        }
        unreachable!()
    };
    let lrl_of = |label: &str, i: usize, hrl: &Sentence| {
        let mut r = rng::stream(seed, domain(label), i as u64);
        hrl_to_lrl(hrl, &fam.transform, &mut r)
    };

    let held = |label: &str, n: usize, held_out: &mut BTreeSet<String>| -> Vec<(Sentence, Sentence)> {
        let mut pairs = Vec::with_capacity(n);
        for i in 0..n {
            let (en, _) = draw(label, i, held_out);
            held_out.insert(en.as_str().to_string());
            let l = lrl_of(&format!("{label}-lrl"), i, &fam.to_hrl(&en));
            pairs.push((en, l));
        }
        pairs
    };
    let test = held("test", cfg.n_test, &mut held_out);
    let dev = held("dev", cfg.n_dev, &mut held_out);

    let en_hrl: Vec<(Sentence, Sentence)> = (0..cfg.n_parallel)
        .map(|i| {
            let (en, _) = draw("parallel", i, &held_out);
            let h = fam.to_hrl(&en);
            (en, h)
        })
        .collect();
    let mono_en = (0..cfg.n_mono).map(|i| draw("mono-en", i, &held_out).0).collect();
    let mono_hrl = (0..cfg.n_mono).map(|i| fam.to_hrl(&draw("mono-hrl", i, &held_out).0)).collect();
    let mono_lrl = (0..cfg.n_mono_lrl)
        .map(|i| lrl_of("mono-lrl-noise", i, &fam.to_hrl(&draw("mono-lrl", i, &held_out).0)))
        .collect();

    let pc = |pairs, t: &str| ParallelCorpus {
        source_lang: EN.to_string(),
        target_lang: t.to_string(),
        pairs,
    };
    let mc = |sentences, lang: &str| MonolingualCorpus {
        lang: lang.to_string(),
        sentences,
    };
    Ok(DatasetBundle {
        languages: fam.languages.clone(),
        en_hrl: pc(en_hrl, HRL),
        mono_en: mc(mono_en, EN),
        mono_hrl: mc(mono_hrl, HRL),
        mono_lrl: mc(mono_lrl, LRL),
        dev_en_lrl: pc(dev, LRL),
        test_en_lrl: pc(test, LRL),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn small(mode: LexicalMode) -> FamilyConfig {
        FamilyConfig {
            n_parallel: 300,
            n_mono: 200,
            n_mono_lrl: 200,
            n_dev: 50,
            n_test: 100,
            lexical_mode: mode,
            ..FamilyConfig::default()
        }
    }

    #[test]
    fn zero_rates_make_lrl_equal_hrl() {
        let cfg = FamilyConfig {
            lex_sub_rate: 0.0,
            spell_noise_rate: 0.0,
            ..small(LexicalMode::PerToken)
        };
        let fam = Family::new(&cfg).unwrap();
        let mut r = rng::stream(3, 0, 0);
        for _ in 0..50 {
            let h = fam.to_hrl(&fam.english_sentence(&mut r));
            assert_eq!(hrl_to_lrl(&h, fam.transform(), &mut r), h);
        }
    }

    #[test]
    fn forced_singleton_lexicon() {
        let t = LrlTransform {
            mode: LexicalMode::PerToken,
            lex_rate: 1.0,
            spell_rate: 0.0,
            lexicon: [("w".to_string(), "v".to_string())].into_iter().collect(),
            spelling: BTreeMap::new(),
            remap: None,
        };
        let mut r = rng::stream(0, 0, 0);
        assert_eq!(t.apply("w w", &mut r), "v v");
    }

    #[test]
    fn substitution_fraction_near_rate_in_both_modes() {
        for mode in [LexicalMode::PerType, LexicalMode::PerToken] {
            let cfg = FamilyConfig {
                spell_noise_rate: 0.0,
                ..small(mode)
            };
            let fam = Family::new(&cfg).unwrap();
            let mut r = rng::stream(11, 0, 0);
            let (mut words, mut subs) = (0usize, 0usize);
            while words < 10_000 {
                let h = fam.to_hrl(&fam.english_sentence(&mut r));
                let l = fam.transform().apply(h.as_str(), &mut r);
                for (a, b) in h.as_str().split_whitespace().zip(l.split_whitespace()) {
                    words += 1;
                    subs += usize::from(a != b);
                }
            }
            let frac = subs as f64 / words as f64;
            assert!((frac - 0.3).abs() <= 0.02, "{mode:?}: {frac}");
        }
    }

    #[test]
    fn bundle_is_deterministic_and_disjoint() {
        let cfg = small(LexicalMode::PerType);
        let a = gen_family(&cfg).unwrap();
        let b = gen_family(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.held_out_leaks(), 0);
        assert_eq!(a.en_hrl.pairs.len(), 300);
        assert_eq!(a.test_en_lrl.pairs.len(), 100);
        for (en, h) in &a.en_hrl.pairs {
            assert_eq!(en.as_str().split_whitespace().count(), h.as_str().split_whitespace().count());
        }
        let other = gen_family(&FamilyConfig { seed: 2, ..cfg }).unwrap();
        assert_ne!(a.en_hrl, other.en_hrl);
    }

    #[test]
    fn remapped_lrl_uses_only_remapped_script() {
        let remap = ScriptRemap::greek();
        let cfg = FamilyConfig {
            script_remap: Some(remap.clone()),
            ..small(LexicalMode::PerType)
        };
        let b = gen_family(&cfg).unwrap();
        let image: BTreeSet<char> = remap.image().collect();
        for s in b.mono_lrl.sentences.iter().chain(b.test_en_lrl.targets()) {
            assert!(s.as_str().chars().all(|c| c == ' ' || image.contains(&c)), "{s}");
        }
        let lrl = b.language(LRL).unwrap();
        assert_eq!(lrl.script_class, "greek");
        assert!(b.language(HRL).unwrap().alphabet.is_disjoint(&lrl.alphabet));
    }

    #[test]
    fn remap_must_be_bijective() {
        assert!(ScriptRemap::new([('a', 'x'), ('b', 'x')]).is_err());
        assert!(ScriptRemap::new([('a', 'x'), ('a', 'y')]).is_err());
        assert!(ScriptRemap::new(vec![]).is_err());
    }

    #[test]
    fn invalid_rates_rejected() {
        let cfg = FamilyConfig {
            lex_sub_rate: 1.2,
            ..FamilyConfig::default()
        };
        assert!(gen_family(&cfg).is_err());
    }
}
