//! Sentences, filtering, vocabulary and the plain-text corpus formats.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const MASK: u32 = 3;
pub const UNK: u32 = 4;
/// Number of specials that precede the language tokens.
pub const FIXED_SPECIALS: u32 = 5;

pub const UNK_SURFACE: &str = "⟨unk⟩";
const FIXED_SURFACES: [&str; 5] = ["⟨pad⟩", "⟨s⟩", "⟨/s⟩", "⟨mask⟩", UNK_SURFACE];

/// Script class of special tokens.
pub const SPECIAL_CLASS: &str = "special";
/// Script class of characters outside every declared alphabet.
pub const OTHER_CLASS: &str = "other";

const VOCAB_MAGIC: &str = "#nmt-adapt-vocab";
const VOCAB_VERSION: u32 = 1;

/// A language taking part in a run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LanguageTag {
    pub id: String,
    pub alphabet: BTreeSet<char>,
    pub script_class: String,
}

impl LanguageTag {
    pub fn new(
        id: impl Into<String>,
        alphabet: impl IntoIterator<Item = char>,
        script_class: impl Into<String>,
    ) -> Result<Self> {
        let tag = Self {
            id: id.into(),
            alphabet: alphabet.into_iter().collect(),
            script_class: script_class.into(),
        };
        tag.validate()?;
        Ok(tag)
    }

    fn validate(&self) -> Result<()> {
        let bad_label = |s: &str| s.is_empty() || s.chars().any(|c| c.is_whitespace() || c == '+');
        if bad_label(&self.id) {
            return Err(Error::InvalidConfig(format!("bad language id {:?}", self.id)));
        }
        if bad_label(&self.script_class) || self.script_class == SPECIAL_CLASS || self.script_class == OTHER_CLASS {
            return Err(Error::InvalidConfig(format!("bad script class {:?}", self.script_class)));
        }
        if self.alphabet.is_empty() {
            return Err(Error::InvalidConfig(format!("language {} has an empty alphabet", self.id)));
        }
        if self.alphabet.iter().any(|c| c.is_whitespace()) {
            return Err(Error::InvalidConfig(format!("alphabet of {} contains whitespace", self.id)));
        }
        Ok(())
    }

    pub fn contains(&self, c: char) -> bool {
        self.alphabet.contains(&c)
    }
}

/// One line of text.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Sentence(String);

impl Sentence {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.contains(['\n', '\r']) {
            return Err(Error::MalformedLine {
                line: 0,
                reason: "line break inside sentence".to_string(),
            });
        }
        Ok(Self(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn into_string(self) -> String {
        self.0
    }

    pub fn char_len(&self) -> usize {
        self.0.chars().count()
    }
}

impl core::fmt::Display for Sentence {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MonolingualCorpus {
    pub lang: String,
    pub sentences: Vec<Sentence>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParallelCorpus {
    pub source_lang: String,
    pub target_lang: String,
    pub pairs: Vec<(Sentence, Sentence)>,
}

impl ParallelCorpus {
    pub fn sources(&self) -> impl Iterator<Item = &Sentence> {
        self.pairs.iter().map(|p| &p.0)
    }

    pub fn targets(&self) -> impl Iterator<Item = &Sentence> {
        self.pairs.iter().map(|p| &p.1)
    }

    /// Same pairs with the two sides swapped.
    pub fn reversed(&self) -> ParallelCorpus {
        ParallelCorpus {
            source_lang: self.target_lang.clone(),
            target_lang: self.source_lang.clone(),
            pairs: self.pairs.iter().map(|(a, b)| (b.clone(), a.clone())).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterConfig {
    pub max_foreign_ratio: f64,
    pub min_chars: usize,
    pub max_chars: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            max_foreign_ratio: 0.40,
            min_chars: 30,
            max_chars: 200,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Rejection {
    /// Raw character count outside the configured bounds.
    Length { chars: usize },
    /// Too many non-whitespace characters outside the language alphabet.
    Alphabet { foreign_ratio: f64 },
}

impl core::fmt::Display for Rejection {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Rejection::Length { chars } => write!(f, "length {chars} outside bounds"),
            Rejection::Alphabet { foreign_ratio } => write!(f, "foreign-character ratio {foreign_ratio:.3}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FilterOutcome {
    Keep,
    Reject(Rejection),
}

/// Length and alphabet filter for monolingual text.
///
/// The length bound is checked first, on raw characters. The foreign ratio
/// counts non-whitespace characters only; a sentence with no such
/// characters has ratio 1.
pub fn filter_sentence(s: &str, lang: &LanguageTag, cfg: &FilterConfig) -> FilterOutcome {
    let chars = s.chars().count();
    if chars < cfg.min_chars || chars > cfg.max_chars {
        return FilterOutcome::Reject(Rejection::Length { chars });
    }
    let (mut visible, mut foreign) = (0usize, 0usize);
    for c in s.chars().filter(|c| !c.is_whitespace()) {
        visible += 1;
        if !lang.contains(c) {
            foreign += 1;
        }
    }
    let foreign_ratio = if visible == 0 { 1.0 } else { foreign as f64 / visible as f64 };
    if foreign_ratio > cfg.max_foreign_ratio {
        FilterOutcome::Reject(Rejection::Alphabet { foreign_ratio })
    } else {
        FilterOutcome::Keep
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FilterStats {
    pub kept: usize,
    pub rejected_length: usize,
    pub rejected_alphabet: usize,
}

/// Filters a corpus, preserving input order.
pub fn filter_corpus(corpus: &MonolingualCorpus, lang: &LanguageTag, cfg: &FilterConfig) -> (MonolingualCorpus, FilterStats) {
    let mut stats = FilterStats::default();
    let mut kept = Vec::new();
    for s in &corpus.sentences {
        match filter_sentence(s.as_str(), lang, cfg) {
            FilterOutcome::Keep => {
                stats.kept += 1;
                kept.push(s.clone());
            }
            FilterOutcome::Reject(Rejection::Length { .. }) => stats.rejected_length += 1,
            FilterOutcome::Reject(Rejection::Alphabet { .. }) => stats.rejected_alphabet += 1,
        }
    }
    (
        MonolingualCorpus {
            lang: corpus.lang.clone(),
            sentences: kept,
        },
        stats,
    )
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TokenMode {
    /// Whitespace-separated words.
    #[default]
    Word,
    /// One token per character, spaces included.
    Char,
}

impl TokenMode {
    fn as_str(self) -> &'static str {
        match self {
            TokenMode::Word => "word",
            TokenMode::Char => "char",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "word" => Some(TokenMode::Word),
            "char" => Some(TokenMode::Char),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct VocabConfig {
    pub mode: TokenMode,
    /// Tokens seen fewer times are left to UNK.
    pub min_count: usize,
}

/// Integer ids of a sentence in one language.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub lang: String,
}

/// Token ↔ id map with specials and per-token script classes.
///
/// Ids are laid out as the five fixed specials, one language token per
/// declared language, then ordinary tokens in lexicographic order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    mode: TokenMode,
    tokens: Vec<String>,
    classes: Vec<String>,
    index: BTreeMap<String, u32>,
    /// `(language id, script class)` in declaration order.
    languages: Vec<(String, String)>,
    /// Alphabet per script class.
    alphabets: BTreeMap<String, BTreeSet<char>>,
    char_class: BTreeMap<char, String>,
}

impl Vocabulary {
    fn with_languages(mode: TokenMode, languages: &[LanguageTag]) -> Result<Self> {
        let mut ids = BTreeSet::new();
        let mut alphabets: BTreeMap<String, BTreeSet<char>> = BTreeMap::new();
        for l in languages {
            l.validate()?;
            if !ids.insert(l.id.clone()) {
                return Err(Error::InvalidConfig(format!("duplicate language id {}", l.id)));
            }
            alphabets.entry(l.script_class.clone()).or_default().extend(l.alphabet.iter().copied());
        }
        let pairs: Vec<(String, String)> =
            languages.iter().map(|l| (l.id.clone(), l.script_class.clone())).collect();
        Self::from_parts(mode, pairs, alphabets)
    }

    fn from_parts(
        mode: TokenMode,
        languages: Vec<(String, String)>,
        alphabets: BTreeMap<String, BTreeSet<char>>,
    ) -> Result<Self> {
        let mut char_class = BTreeMap::new();
        for (class, chars) in &alphabets {
            for &c in chars {
                if let Some(prev) = char_class.insert(c, class.clone()) {
                    if &prev != class {
                        return Err(Error::InvalidConfig(format!(
                            "character {c:?} belongs to both {prev} and {class}"
                        )));
                    }
                }
            }
        }
        let mut v = Self {
            mode,
            tokens: Vec::new(),
            classes: Vec::new(),
            index: BTreeMap::new(),
            languages,
            alphabets,
            char_class,
        };
        for s in FIXED_SURFACES {
            v.push_raw(s.to_string(), SPECIAL_CLASS.to_string());
        }
        for i in 0..v.languages.len() {
            let surface = format!("⟨{}⟩", v.languages[i].0);
            v.push_raw(surface, SPECIAL_CLASS.to_string());
        }
        Ok(v)
    }

    fn push_raw(&mut self, token: String, class: String) -> u32 {
        let id = self.tokens.len() as u32;
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        self.classes.push(class);
        id
    }

    pub fn mode(&self) -> TokenMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn script_class(&self, id: u32) -> &str {
        &self.classes[id as usize]
    }

    pub fn is_special(&self, id: u32) -> bool {
        id < self.special_count()
    }

    pub fn special_count(&self) -> u32 {
        FIXED_SPECIALS + self.languages.len() as u32
    }

    /// Id of the language token for `lang`.
    pub fn lang_token(&self, lang: &str) -> Option<u32> {
        self.languages
            .iter()
            .position(|(id, _)| id == lang)
            .map(|i| FIXED_SPECIALS + i as u32)
    }

    pub fn languages(&self) -> impl Iterator<Item = (&str, &str)> {
        self.languages.iter().map(|(a, b)| (a.as_str(), b.as_str()))
    }

    /// Script class declared for a language.
    pub fn language_class(&self, lang: &str) -> Option<&str> {
        self.languages.iter().find(|(id, _)| id == lang).map(|(_, c)| c.as_str())
    }

    /// Declared script classes plus [`OTHER_CLASS`].
    pub fn known_classes(&self) -> impl Iterator<Item = &str> {
        self.alphabets.keys().map(String::as_str).chain(core::iter::once(OTHER_CLASS))
    }

    /// Script class of a single character.
    pub fn char_class(&self, c: char) -> &str {
        self.char_class.get(&c).map_or(OTHER_CLASS, String::as_str)
    }

    /// Sorted, `+`-joined classes of the characters of `token`.
    pub fn classify(&self, token: &str) -> String {
        let set: BTreeSet<&str> = token.chars().map(|c| self.char_class(c)).collect();
        if set.is_empty() {
            return OTHER_CLASS.to_string();
        }
        let mut out = String::new();
        for (i, c) in set.iter().enumerate() {
            if i > 0 {
                out.push('+');
            }
            out.push_str(c);
        }
        out
    }

    /// Whether any character of token `id` is in `class`. Specials never are.
    pub fn token_has_class(&self, id: u32, class: &str) -> bool {
        !self.is_special(id) && self.classes[id as usize].split('+').any(|c| c == class)
    }

    pub fn tokenize(&self, s: &str, lang: &str) -> TokenSequence {
        let lookup = |t: &str| self.id(t).filter(|&id| !self.is_special(id)).unwrap_or(UNK);
        let tokens = match self.mode {
            TokenMode::Word => s.split_whitespace().map(lookup).collect(),
            TokenMode::Char => {
                let mut buf = [0u8; 4];
                s.chars().map(|c| lookup(c.encode_utf8(&mut buf))).collect()
            }
        };
        TokenSequence {
            tokens,
            lang: lang.to_string(),
        }
    }

    /// Surface text; special tokens other than UNK are dropped.
    pub fn detokenize(&self, tokens: &[u32]) -> String {
        let mut out = String::new();
        let mut first = true;
        for &id in tokens {
            if self.is_special(id) && id != UNK {
                continue;
            }
            if self.mode == TokenMode::Word && !first {
                out.push(' ');
            }
            out.push_str(self.token(id));
            first = false;
        }
        out
    }

    /// Versioned line-oriented encoding: header lines starting with `#`,
    /// then `token<TAB>id<TAB>script_class` with specials first.
    pub fn to_file_string(&self) -> String {
        let mut out = format!("{VOCAB_MAGIC}\t{VOCAB_VERSION}\t{}\n", self.mode.as_str());
        for (id, class) in &self.languages {
            out.push_str(&format!("#language\t{id}\t{class}\n"));
        }
        for (class, chars) in &self.alphabets {
            let s: String = chars.iter().map(|c| escape(&c.to_string())).collect();
            out.push_str(&format!("#alphabet\t{class}\t{s}\n"));
        }
        for (id, (tok, class)) in self.tokens.iter().zip(&self.classes).enumerate() {
            out.push_str(&format!("{}\t{id}\t{class}\n", escape(tok)));
        }
        out
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let bad = |line: usize, reason: &str| Error::MalformedLine {
            line,
            reason: reason.to_string(),
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines.next().ok_or_else(|| bad(1, "missing header"))?;
        let h: Vec<&str> = header.split('\t').collect();
        if h.len() != 3 || h[0] != VOCAB_MAGIC {
            return Err(bad(1, "not a vocabulary file"));
        }
        if h[1].parse::<u32>().ok() != Some(VOCAB_VERSION) {
            return Err(bad(1, "unsupported vocabulary version"));
        }
        let mode = TokenMode::parse(h[2]).ok_or_else(|| bad(1, "unknown token mode"))?;
        let mut languages = Vec::new();
        let mut alphabets = BTreeMap::new();
        let mut entries = Vec::new();
        for (n, line) in lines {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(bad(n, "expected three tab-separated fields"));
            }
            match f[0] {
                "#language" => languages.push((f[1].to_string(), f[2].to_string())),
                "#alphabet" => {
                    let chars = unescape(f[2]).ok_or_else(|| bad(n, "bad escape"))?;
                    alphabets.insert(f[1].to_string(), chars.chars().collect::<BTreeSet<char>>());
                }
                tok => {
                    let id: u32 = f[1].parse().map_err(|_| bad(n, "bad id"))?;
                    let tok = unescape(tok).ok_or_else(|| bad(n, "bad escape"))?;
                    entries.push((n, tok, id, f[2].to_string()));
                }
            }
        }
        let mut v = Self::from_parts(mode, languages, alphabets)?;
        let specials = v.len();
        for (i, (n, tok, id, class)) in entries.into_iter().enumerate() {
            if id as usize != i {
                return Err(bad(n, "ids must be sequential from 0"));
            }
            if i < specials {
                if v.tokens[i] != tok || class != SPECIAL_CLASS {
                    return Err(bad(n, "specials must come first in canonical order"));
                }
            } else {
                if v.index.contains_key(&tok) {
                    return Err(bad(n, "duplicate token"));
                }
                v.push_raw(tok, class);
            }
        }
        if v.tokens.len() < specials {
            return Err(bad(0, "missing special tokens"));
        }
        Ok(v)
    }

    /// SHA-256 of the file encoding.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_file_string().as_bytes()).into()
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Option<String> {
    let mut out = String::with_capacity(s.len());
    let mut it = s.chars();
    while let Some(c) = it.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        out.push(match it.next()? {
            '\\' => '\\',
            't' => '\t',
            'n' => '\n',
            'r' => '\r',
            _ => return None,
        });
    }
    Some(out)
}

/// Builds a vocabulary over every token of `corpora`.
pub fn build_vocab<'a, C, S>(corpora: C, languages: &[LanguageTag], cfg: &VocabConfig) -> Result<Vocabulary>
where
    C: IntoIterator,
    C::Item: IntoIterator<Item = &'a S>,
    S: AsRef<str> + ?Sized + 'a,
{
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut any = false;
    for corpus in corpora {
        for s in corpus {
            any = true;
            let s = s.as_ref();
            match cfg.mode {
                TokenMode::Word => {
                    for w in s.split_whitespace() {
                        *counts.entry(w.to_string()).or_default() += 1;
                    }
                }
                TokenMode::Char => {
                    for c in s.chars() {
                        *counts.entry(c.to_string()).or_default() += 1;
                    }
                }
            }
        }
    }
    if !any {
        return Err(Error::EmptyCorpora);
    }
    let mut v = Vocabulary::with_languages(cfg.mode, languages)?;
    for (tok, n) in counts {
        if n >= cfg.min_count.max(1) && !v.index.contains_key(&tok) {
            let class = v.classify(&tok);
            v.push_raw(tok, class);
        }
    }
    Ok(v)
}

/// One sentence per line, LF terminated.
pub fn parse_monolingual(text: &str) -> Result<Vec<Sentence>> {
    text.lines().map(|l| Sentence::new(l)).collect()
}

pub fn format_monolingual<'a>(sentences: impl IntoIterator<Item = &'a Sentence>) -> String {
    let mut out = String::new();
    for s in sentences {
        out.push_str(s.as_str());
        out.push('\n');
    }
    out
}

/// Two-column TSV; any other column count is a malformed line.
pub fn parse_parallel_tsv(text: &str) -> Result<Vec<(Sentence, Sentence)>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let mut cols = line.split('\t');
            match (cols.next(), cols.next(), cols.next()) {
                (Some(a), Some(b), None) => Ok((Sentence::new(a)?, Sentence::new(b)?)),
                _ => Err(Error::MalformedLine {
                    line: i + 1,
                    reason: format!("expected 2 tab-separated columns, found {}", line.split('\t').count()),
                }),
            }
        })
        .collect()
}

/// Two aligned one-sentence-per-line texts.
pub fn parse_parallel_pair(source: &str, target: &str) -> Result<Vec<(Sentence, Sentence)>> {
    let a = parse_monolingual(source)?;
    let b = parse_monolingual(target)?;
    if a.len() != b.len() {
        return Err(Error::SideLengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(a.into_iter().zip(b).collect())
}

pub fn format_parallel_tsv<'a>(pairs: impl IntoIterator<Item = &'a (Sentence, Sentence)>) -> Result<String> {
    let mut out = String::new();
    for (i, (a, b)) in pairs.into_iter().enumerate() {
        if a.as_str().contains('\t') || b.as_str().contains('\t') {
            return Err(Error::MalformedLine {
                line: i + 1,
                reason: "tab inside a field".to_string(),
            });
        }
        out.push_str(a.as_str());
        out.push('\t');
        out.push_str(b.as_str());
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn latin(id: &str) -> LanguageTag {
        LanguageTag::new(id, 'a'..='z', "latin").unwrap()
    }

    fn greek() -> LanguageTag {
        LanguageTag::new("lrl", 'α'..='ω', "greek").unwrap()
    }

    #[test]
    fn filter_examples() {
        let en = latin("en");
        let cfg = FilterConfig::default();
        let short = "abcdefghij abcdefghij abcdefghi";
        assert_eq!(short.chars().count(), 31);
        assert_eq!(filter_sentence(&short[..25], &en, &cfg), FilterOutcome::Reject(Rejection::Length { chars: 25 }));
        let half: String = "ab12".repeat(25);
        assert!(matches!(
            filter_sentence(&half, &en, &cfg),
            FilterOutcome::Reject(Rejection::Alphabet { foreign_ratio }) if foreign_ratio == 0.5
        ));
        assert_eq!(filter_sentence(&"abcd".repeat(25), &en, &cfg), FilterOutcome::Keep);
        assert!(matches!(filter_sentence(&"a".repeat(201), &en, &cfg), FilterOutcome::Reject(Rejection::Length { .. })));
        // Whitespace is not counted towards the ratio.
        let spaced = "ab1 ".repeat(10);
        assert!(matches!(filter_sentence(&spaced, &en, &cfg), FilterOutcome::Keep));
    }

    #[test]
    fn vocab_word_mode_and_round_trip() {
        let corpus = ["a b", "b c"];
        let v = build_vocab([corpus.iter().copied()], &[latin("en")], &VocabConfig::default()).unwrap();
        let words: Vec<&str> = (v.special_count()..v.len() as u32).map(|i| v.token(i)).collect();
        assert_eq!(words, vec!["a", "b", "c"]);
        assert_eq!(v.lang_token("en"), Some(FIXED_SPECIALS));
        let t = v.tokenize("a b", "en");
        assert_eq!(t.tokens, vec![v.id("a").unwrap(), v.id("b").unwrap()]);
        assert_eq!(v.detokenize(&t.tokens), "a b");
        assert!(v.tokenize("", "en").tokens.is_empty());
        let u = v.tokenize("a zz", "en");
        assert_eq!(u.tokens[1], UNK);
        assert_eq!(v.detokenize(&u.tokens), "a ⟨unk⟩");
    }

    #[test]
    fn surfaces_matching_specials_are_unknown() {
        let corpus = ["⟨en⟩ a"];
        let v = build_vocab([corpus.iter().copied()], &[latin("en")], &VocabConfig::default()).unwrap();
        assert_eq!(v.tokenize("⟨en⟩", "en").tokens, vec![UNK]);
    }

    #[test]
    fn char_mode_round_trip() {
        let corpus = ["ab ba"];
        let cfg = VocabConfig {
            mode: TokenMode::Char,
            min_count: 1,
        };
        let v = build_vocab([corpus.iter().copied()], &[latin("en")], &cfg).unwrap();
        let t = v.tokenize("ab ba", "en");
        assert_eq!(t.tokens.len(), 5);
        assert_eq!(v.detokenize(&t.tokens), "ab ba");
    }

    #[test]
    fn mixed_scripts_are_classified_per_character() {
        let corpus = ["ab κλ aκ 12"];
        let v = build_vocab([corpus.iter().copied()], &[latin("en"), greek()], &VocabConfig::default()).unwrap();
        assert_eq!(v.script_class(v.id("ab").unwrap()), "latin");
        assert_eq!(v.script_class(v.id("κλ").unwrap()), "greek");
        assert_eq!(v.script_class(v.id("aκ").unwrap()), "greek+latin");
        assert_eq!(v.script_class(v.id("12").unwrap()), "other");
        assert!(v.token_has_class(v.id("aκ").unwrap(), "latin"));
        assert!(!v.token_has_class(EOS, "special"));
    }

    #[test]
    fn empty_corpora_rejected() {
        let none: [[&str; 0]; 0] = [];
        assert_eq!(build_vocab(none, &[latin("en")], &VocabConfig::default()), Err(Error::EmptyCorpora));
    }

    #[test]
    fn conflicting_alphabets_rejected() {
        let a = latin("en");
        let b = LanguageTag::new("x", ['a'], "other-script").unwrap();
        assert!(build_vocab([["a"].iter().copied()], &[a, b], &VocabConfig::default()).is_err());
    }

    #[test]
    fn vocab_file_round_trip() {
        let corpus = ["a b\tc", "κ x\\y"];
        let cfg = VocabConfig {
            mode: TokenMode::Char,
            min_count: 1,
        };
        let v = build_vocab([corpus.iter().copied()], &[latin("en"), greek()], &cfg).unwrap();
        let text = v.to_file_string();
        assert!(text.starts_with("#nmt-adapt-vocab\t1\tchar\n"));
        let back = Vocabulary::from_file_string(&text).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.digest(), v.digest());
    }

    #[test]
    fn vocab_file_rejects_reordered_specials() {
        let v = build_vocab([["a"].iter().copied()], &[latin("en")], &VocabConfig::default()).unwrap();
        let text = v.to_file_string().replace("⟨pad⟩\t0", "⟨s⟩\t0");
        assert!(Vocabulary::from_file_string(&text).is_err());
    }

    #[test]
    fn parallel_formats() {
        assert_eq!(parse_parallel_pair("a\nb\nc\n", "x\ny\nz\n").unwrap().len(), 3);
        assert_eq!(
            parse_parallel_pair("a\nb\nc\n", "x\ny\nz\nw\n"),
            Err(Error::SideLengthMismatch { left: 3, right: 4 })
        );
        let err = parse_parallel_tsv("a\tb\nc\td\te\n").unwrap_err();
        assert!(matches!(err, Error::MalformedLine { line: 2, .. }));
        let pairs = parse_parallel_tsv("a b\tc d\n").unwrap();
        assert_eq!(format_parallel_tsv(&pairs).unwrap(), "a b\tc d\n");
    }
}
