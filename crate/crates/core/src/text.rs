//! Mandarin text normalization and tokenization.
//!
//! Normalization rewrites raw text into speakable tokens: tone-numbered pinyin
//! syllables (`ni3`), single uppercase Latin letters (`W`), and a short list
//! of literal word units (`com`). Digits are read one by one, runs of three
//! or more identical letters are read as count + letter (`www` → `san1 W`),
//! a dot between alphanumerics is read `dian3`, and hanzi go through a
//! pronunciation lexicon.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const BUILTIN_LEXICON: &str = include_str!("../data/lexicon.tsv");

#[derive(Debug, Error, PartialEq)]
pub enum TextError {
    #[error("empty input")]
    Empty,
    #[error("no pronunciation for hanzi: {0}")]
    UnmappedHanzi(String),
    #[error("unsupported character {0:?}")]
    Unsupported(char),
    #[error("out-of-vocabulary token {0:?}")]
    OutOfVocabulary(String),
    #[error("lexicon line {line}: {reason}")]
    Lexicon { line: usize, reason: String },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("{0}")]
    Io(String),
}

const INITIALS: &[&str] = &[
    "zh", "ch", "sh", "b", "p", "m", "f", "d", "t", "n", "l", "g", "k", "h", "j", "q", "x", "r", "z", "c", "s",
    "y", "w",
];

const FINALS: &[&str] = &[
    "a", "o", "e", "i", "u", "v", "ai", "ei", "ao", "ou", "an", "en", "ang", "eng", "ong", "er", "ia", "ie",
    "iao", "iu", "ian", "in", "iang", "ing", "iong", "ua", "uo", "uai", "ui", "uan", "un", "uang", "ue", "ve",
    "van", "vn", "io", "m", "n", "ng", "hm", "hng",
];

/// True for `initial? + final + tone` with tone in 1..=5.
pub fn is_pinyin_syllable(tok: &str) -> bool {
    let Some(last) = tok.chars().last() else { return false };
    if !('1'..='5').contains(&last) {
        return false;
    }
    let body = &tok[..tok.len() - 1];
    if body.is_empty() || !body.bytes().all(|b| b.is_ascii_lowercase()) {
        return false;
    }
    if FINALS.contains(&body) {
        return true;
    }
    INITIALS
        .iter()
        .any(|ini| body.strip_prefix(ini).is_some_and(|fin| FINALS.contains(&fin)))
}

fn digit_reading(d: char) -> &'static str {
    match d {
        '0' => "ling2",
        '1' => "yi1",
        '2' => "er4",
        '3' => "san1",
        '4' => "si4",
        '5' => "wu3",
        '6' => "liu4",
        '7' => "qi1",
        '8' => "ba1",
        '9' => "jiu3",
        _ => unreachable!("not a digit: {d}"),
    }
}

fn is_hanzi(c: char) -> bool {
    matches!(c, '\u{4e00}'..='\u{9fff}' | '\u{3400}'..='\u{4dbf}')
}

/// Punctuation dropped without a reading.
fn is_silent_punct(c: char) -> bool {
    ",.!?;:'\"()-，。！？；：、“”‘’（）《》…—".contains(c)
}

/// Hanzi → tone-numbered pinyin. The first reading listed for a character
/// wins, so lexicon files list the most frequent reading first.
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    readings: HashMap<char, String>,
}

impl Lexicon {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_LEXICON).expect("bundled lexicon is well-formed")
    }

    pub fn load(path: &Path) -> Result<Self, TextError> {
        let text = std::fs::read_to_string(path).map_err(|e| TextError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// One `hanzi<TAB>pinyin` entry per line; blank lines and `#` comments skipped.
    pub fn parse(text: &str) -> Result<Self, TextError> {
        let mut readings = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: &str| TextError::Lexicon { line: i + 1, reason: reason.to_string() };
            let (h, p) = line.split_once('\t').ok_or_else(|| err("expected hanzi<TAB>pinyin"))?;
            let mut chars = h.chars();
            let (Some(c), None) = (chars.next(), chars.next()) else {
                return Err(err("entry key must be a single character"));
            };
            if !is_pinyin_syllable(p) {
                return Err(err("reading is not a tone-numbered pinyin syllable"));
            }
            readings.entry(c).or_insert_with(|| p.to_string());
        }
        Ok(Self { readings })
    }

    pub fn get(&self, c: char) -> Option<&str> {
        self.readings.get(&c).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.readings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.readings.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NormalizedText {
    pub tokens: Vec<String>,
}

impl NormalizedText {
    pub fn new<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Self {
        Self { tokens: tokens.into_iter().map(Into::into).collect() }
    }

    /// Splits already-normalized text on whitespace.
    pub fn from_spaced(s: &str) -> Self {
        Self::new(s.split_whitespace())
    }
}

impl fmt::Display for NormalizedText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tokens.join(" "))
    }
}

/// Lowercase words kept as literal tokens.
pub const DEFAULT_WORD_UNITS: &[&str] = &["com", "net", "org"];

#[derive(Debug, Clone)]
pub struct Normalizer {
    lexicon: Lexicon,
    units: BTreeSet<String>,
}

impl Default for Normalizer {
    fn default() -> Self {
        Self::new(Lexicon::builtin())
    }
}

impl Normalizer {
    pub fn new(lexicon: Lexicon) -> Self {
        Self { lexicon, units: DEFAULT_WORD_UNITS.iter().map(|s| s.to_string()).collect() }
    }

    pub fn with_units<S: Into<String>>(mut self, units: impl IntoIterator<Item = S>) -> Self {
        self.units = units.into_iter().map(Into::into).collect();
        self
    }

    pub fn is_unit(&self, tok: &str) -> bool {
        self.units.contains(tok)
    }

    pub fn normalize(&self, raw: &str) -> Result<NormalizedText, TextError> {
        if raw.trim().is_empty() {
            return Err(TextError::Empty);
        }
        let mut out = Vec::new();
        let mut unmapped = String::new();
        for chunk in raw.split_whitespace() {
            if is_pinyin_syllable(chunk) || is_single_upper(chunk) || self.units.contains(chunk) {
                out.push(chunk.to_string());
                continue;
            }
            let chars: Vec<char> = chunk.chars().collect();
            let mut i = 0;
            while i < chars.len() {
                let c = chars[i];
                if c.is_ascii_digit() {
                    out.push(digit_reading(c).to_string());
                    i += 1;
                } else if c.is_ascii_alphabetic() {
                    let start = i;
                    while i < chars.len() && chars[i].is_ascii_alphabetic() {
                        i += 1;
                    }
                    let run: String = chars[start..i].iter().collect();
                    self.read_letters(&run, &mut out);
                } else if c == '.'
                    && i > 0
                    && chars[i - 1].is_ascii_alphanumeric()
                    && chars.get(i + 1).is_some_and(char::is_ascii_alphanumeric)
                {
                    out.push("dian3".to_string());
                    i += 1;
                } else if is_silent_punct(c) {
                    i += 1;
                } else if is_hanzi(c) {
                    match self.lexicon.get(c) {
                        Some(p) => out.push(p.to_string()),
                        None if !unmapped.contains(c) => unmapped.push(c),
                        None => {}
                    }
                    i += 1;
                } else {
                    return Err(TextError::Unsupported(c));
                }
            }
        }
        if !unmapped.is_empty() {
            return Err(TextError::UnmappedHanzi(unmapped));
        }
        if out.is_empty() {
            return Err(TextError::Empty);
        }
        Ok(NormalizedText { tokens: out })
    }

    fn read_letters(&self, run: &str, out: &mut Vec<String>) {
        if self.units.contains(run) {
            out.push(run.to_string());
            return;
        }
        let upper: Vec<char> = run.chars().map(|c| c.to_ascii_uppercase()).collect();
        let mut i = 0;
        while i < upper.len() {
            let mut j = i;
            while j < upper.len() && upper[j] == upper[i] {
                j += 1;
            }
            let count = j - i;
            if count >= 3 {
                out.extend(count.to_string().chars().map(|d| digit_reading(d).to_string()));
                out.push(upper[i].to_string());
            } else {
                out.extend(std::iter::repeat(upper[i].to_string()).take(count));
            }
            i = j;
        }
    }
}

fn is_single_upper(s: &str) -> bool {
    s.len() == 1 && s.as_bytes()[0].is_ascii_uppercase()
}

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OovPolicy {
    Strict,
    MapToUnk,
}

/// Token ↔ id bijection with reserved ids `PAD=0, BOS=1, EOS=2, UNK=3`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Ids are assigned in lexicographic token order after the reserved ids.
    pub fn build(corpus: &[NormalizedText]) -> Result<Self, TextError> {
        if corpus.is_empty() {
            return Err(TextError::EmptyCorpus);
        }
        let set: BTreeSet<&str> = corpus.iter().flat_map(|t| t.tokens.iter().map(String::as_str)).collect();
        Ok(Self::from_tokens(RESERVED.iter().copied().chain(set).map(String::from).collect()))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    /// Rebuilds the reverse index after deserialization.
    pub fn reindexed(self) -> Self {
        Self::from_tokens(self.tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, tok: &str) -> Option<usize> {
        self.index.get(tok).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokenize(&self, t: &NormalizedText, policy: OovPolicy) -> Result<TokenSequence, TextError> {
        let mut ids = Vec::with_capacity(t.tokens.len() + 2);
        ids.push(BOS);
        for tok in &t.tokens {
            match (self.id(tok), policy) {
                (Some(id), _) if id >= RESERVED.len() => ids.push(id),
                (_, OovPolicy::MapToUnk) => ids.push(UNK),
                _ => return Err(TextError::OutOfVocabulary(tok.clone())),
            }
        }
        ids.push(EOS);
        Ok(TokenSequence { ids })
    }

    pub fn detokenize(&self, seq: &TokenSequence) -> NormalizedText {
        NormalizedText::new(
            seq.ids
                .iter()
                .filter(|&&id| !matches!(id, PAD | BOS | EOS))
                .map(|&id| self.token(id).unwrap_or("<unk>").to_string()),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    /// Count of non-PAD ids.
    pub fn length(&self) -> usize {
        self.ids.iter().filter(|&&id| id != PAD).count()
    }
}

/// `raw<TAB>expected` pairs from a golden TN file.
pub fn parse_golden(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .filter_map(|l| l.split_once('\t'))
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect()
}

pub const GOLDEN_TN: &str = include_str!("../data/tn_golden.tsv");

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    fn norm(s: &str) -> String {
        Normalizer::default().normalize(s).unwrap().to_string()
    }

    #[test]
    fn examples_from_corpus_rules() {
        assert_eq!(norm("123"), "yi1 er4 san1");
        assert_eq!(norm("www.abc.com"), "san1 W dian3 A B C dian3 com");
        assert_eq!(norm("vip"), "V I P");
        assert_eq!(norm("CCTV"), "C C T V");
        assert_eq!(norm("ni3 hao3"), "ni3 hao3");
        assert_eq!(norm("你好"), "ni3 hao3");
    }

    #[test]
    fn golden_file() {
        let n = Normalizer::default();
        for (raw, expected) in parse_golden(GOLDEN_TN) {
            assert_eq!(n.normalize(&raw).unwrap().to_string(), expected, "raw {raw:?}");
        }
    }

    #[test]
    fn errors() {
        let n = Normalizer::default();
        assert_eq!(n.normalize("  "), Err(TextError::Empty));
        assert_eq!(n.normalize("a@b"), Err(TextError::Unsupported('@')));
        let tiny = Normalizer::new(Lexicon::parse("你\tni3\n").unwrap());
        assert_eq!(tiny.normalize("你好吗好"), Err(TextError::UnmappedHanzi("好吗".into())));
    }

    #[test]
    fn lexicon_parse_errors_and_first_reading() {
        assert!(matches!(Lexicon::parse("你 ni3"), Err(TextError::Lexicon { line: 1, .. })));
        assert!(matches!(Lexicon::parse("\n你好\tni3"), Err(TextError::Lexicon { line: 2, .. })));
        let l = Lexicon::parse("了\tle5\n了\tliao3\n").unwrap();
        assert_eq!(l.get('了'), Some("le5"));
    }

    #[test]
    fn builtin_lexicon_is_valid() {
        assert!(Lexicon::builtin().len() > 3000);
    }

    #[test]
    fn pinyin_pattern() {
        for ok in ["ni3", "hao3", "dian3", "zhuang4", "lv4", "er2", "a1", "ma5", "xiong2"] {
            assert!(is_pinyin_syllable(ok), "{ok}");
        }
        for bad in ["ni", "ni6", "xyz3", "Ni3", "3", "com"] {
            assert!(!is_pinyin_syllable(bad), "{bad}");
        }
    }

    #[test]
    fn vocab_assignment() {
        let v = Vocab::build(&[NormalizedText::new(["b"]), NormalizedText::new(["a", "b"])]).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!((v.id("<pad>"), v.id("<bos>"), v.id("<eos>"), v.id("<unk>")), (Some(0), Some(1), Some(2), Some(3)));
        assert_eq!((v.id("a"), v.id("b")), (Some(4), Some(5)));
        assert_eq!(Vocab::build(&[]), Err(TextError::EmptyCorpus));
    }

    #[test]
    fn tokenize_and_oov() {
        let v = Vocab::build(&[NormalizedText::new(["ni3", "hao3"])]).unwrap();
        // sorted: hao3 < ni3
        let seq = v.tokenize(&NormalizedText::new(["ni3", "hao3"]), OovPolicy::Strict).unwrap();
        assert_eq!(seq.ids, vec![BOS, 5, 4, EOS]);
        assert_eq!(seq.length(), 4);
        assert_eq!(
            v.tokenize(&NormalizedText::new(["ma5"]), OovPolicy::Strict),
            Err(TextError::OutOfVocabulary("ma5".into()))
        );
        let unk = v.tokenize(&NormalizedText::new(["ma5"]), OovPolicy::MapToUnk).unwrap();
        assert_eq!(unk.ids, vec![BOS, UNK, EOS]);
    }

    #[test]
    fn roundtrip_over_golden_corpus() {
        let n = Normalizer::default();
        let corpus: Vec<_> = parse_golden(GOLDEN_TN).iter().map(|(r, _)| n.normalize(r).unwrap()).collect();
        let v = Vocab::build(&corpus).unwrap();
        for t in &corpus {
            assert_eq!(&v.detokenize(&v.tokenize(t, OovPolicy::Strict).unwrap()), t);
        }
    }

    #[test]
    fn vocab_is_order_independent() {
        let n = Normalizer::default();
        let corpus: Vec<_> = parse_golden(GOLDEN_TN).iter().map(|(r, _)| n.normalize(r).unwrap()).collect();
        let base = Vocab::build(&corpus).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let mut c = corpus.clone();
            c.shuffle(&mut rng);
            assert_eq!(Vocab::build(&c).unwrap(), base);
        }
    }

    proptest! {
        #[test]
        fn idempotent_and_clean(raw in "[a-zA-Z0-9.你好中国 ]{1,24}") {
            let n = Normalizer::default();
            if let Ok(once) = n.normalize(&raw) {
                let twice = n.normalize(&once.to_string()).unwrap();
                prop_assert_eq!(&twice, &once);
                for tok in &once.tokens {
                    let ok = is_pinyin_syllable(tok) || is_single_upper(tok) || n.is_unit(tok);
                    prop_assert!(ok, "unexpected token {}", tok);
                    if !is_pinyin_syllable(tok) {
                        prop_assert!(!tok.chars().any(|c| c.is_ascii_digit()));
                    }
                }
            }
        }
    }
}
