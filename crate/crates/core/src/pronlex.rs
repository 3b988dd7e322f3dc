//! CMUdict-style pronouncing dictionary: parsing, phrase pronunciation and
//! disjoint keyword vocabulary splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{KwsError, Result};

/// The lexicon excerpt shipped with the crate.
pub const BUNDLED_LEXICON: &str = include_str!("../data/cmudict-excerpt.dict");

/// Reserved id for padding; never part of a real pronunciation.
pub const PAD_ID: usize = 0;

/// Phoneme symbols (with stress digits unless stripped) and their ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhonemeVocab {
    symbols: Vec<String>,
    ids: BTreeMap<String, usize>,
}

impl PhonemeVocab {
    fn from_symbols(set: BTreeSet<String>) -> Self {
        let mut symbols = vec!["<pad>".to_string()];
        symbols.extend(set);
        let ids = symbols.iter().enumerate().skip(1).map(|(i, s)| (s.clone(), i)).collect();
        PhonemeVocab { symbols, ids }
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.ids.get(symbol).copied()
    }

    pub fn symbol(&self, id: usize) -> Result<&str> {
        if id == PAD_ID {
            return Err(KwsError::UnknownPhoneme(id));
        }
        self.symbols.get(id).map(String::as_str).ok_or(KwsError::UnknownPhoneme(id))
    }

    /// Number of ids including padding.
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.len() <= 1
    }

    /// Real (non-padding) symbols in id order.
    pub fn symbols(&self) -> &[String] {
        &self.symbols[1..]
    }
}

/// All known pronunciations of one word.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pronunciation {
    pub word: String,
    pub variants: Vec<Vec<usize>>,
}

impl Pronunciation {
    pub fn min_np(&self) -> usize {
        self.variants.iter().map(Vec::len).min().unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParseOptions {
    /// Fold `AE0/AE1/AE2` into `AE`.
    pub strip_stress: bool,
}

#[derive(Clone, Debug)]
pub struct Lexicon {
    vocab: PhonemeVocab,
    entries: BTreeMap<String, Pronunciation>,
    digest: String,
    malformed: usize,
}

/// Canonical lookup key: lowercase, alternate marker removed.
pub fn canonical(word: &str) -> String {
    let w = word.trim();
    let base = match w.find('(') {
        Some(i) if w.ends_with(')') && w[i + 1..w.len() - 1].chars().all(|c| c.is_ascii_digit()) => &w[..i],
        _ => w,
    };
    base.to_lowercase()
}

fn valid_phoneme(tok: &str) -> bool {
    let letters = tok.trim_end_matches(|c: char| c.is_ascii_digit());
    !letters.is_empty()
        && letters.chars().all(|c| c.is_ascii_uppercase())
        && tok.len() - letters.len() <= 1
}

pub fn strip_stress(symbol: &str) -> &str {
    symbol.trim_end_matches(|c: char| c.is_ascii_digit())
}

/// Parses CMUdict flat text. Malformed lines are counted, not fatal.
pub fn parse_lexicon(text: &str, opts: ParseOptions) -> Result<Lexicon> {
    let mut raw: Vec<(String, Vec<String>)> = Vec::new();
    let mut malformed = 0;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with(";;;") {
            continue;
        }
        let line = line.split('#').next().unwrap_or("").trim();
        let mut toks = line.split_whitespace();
        let Some(word) = toks.next() else {
            malformed += 1;
            continue;
        };
        let phones: Vec<&str> = toks.collect();
        if phones.is_empty() || !phones.iter().all(|p| valid_phoneme(p)) {
            malformed += 1;
            continue;
        }
        let key = canonical(word);
        if key.is_empty() {
            malformed += 1;
            continue;
        }
        let phones = phones
            .iter()
            .map(|p| if opts.strip_stress { strip_stress(p) } else { p }.to_string())
            .collect();
        raw.push((key, phones));
    }
    if raw.is_empty() {
        return Err(KwsError::EmptyLexicon { malformed });
    }
    let symbols: BTreeSet<String> = raw.iter().flat_map(|(_, p)| p.iter().cloned()).collect();
    let vocab = PhonemeVocab::from_symbols(symbols);
    let mut entries: BTreeMap<String, Pronunciation> = BTreeMap::new();
    for (word, phones) in raw {
        let ids: Vec<usize> = phones.iter().map(|p| vocab.ids[p]).collect();
        let entry = entries.entry(word.clone()).or_insert_with(|| Pronunciation {
            word,
            variants: Vec::new(),
        });
        if !entry.variants.contains(&ids) {
            entry.variants.push(ids);
        }
    }
    let digest = hex::encode(Sha256::digest(text.as_bytes()));
    Ok(Lexicon {
        vocab,
        entries,
        digest,
        malformed,
    })
}

impl Lexicon {
    pub fn bundled() -> Result<Lexicon> {
        parse_lexicon(BUNDLED_LEXICON, ParseOptions::default())
    }

    pub fn vocab(&self) -> &PhonemeVocab {
        &self.vocab
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn malformed(&self) -> usize {
        self.malformed
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<&Pronunciation> {
        self.entries.get(&canonical(word))
    }

    pub fn lookup(&self, word: &str) -> Result<&Pronunciation> {
        self.get(word).ok_or_else(|| KwsError::OutOfVocabulary(word.to_string()))
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn entries(&self) -> impl Iterator<Item = &Pronunciation> {
        self.entries.values()
    }

    pub fn symbols_of(&self, ids: &[usize]) -> Result<Vec<&str>> {
        ids.iter().map(|&i| self.vocab.symbol(i)).collect()
    }

    /// Serializes back to CMUdict flat text (`WORD  PH ...`, `WORD(2)  ...`).
    pub fn to_cmudict(&self) -> String {
        let mut out = String::new();
        for p in self.entries.values() {
            for (i, v) in p.variants.iter().enumerate() {
                let key = if i == 0 {
                    p.word.to_uppercase()
                } else {
                    format!("{}({})", p.word.to_uppercase(), i + 1)
                };
                let syms: Vec<&str> = v.iter().map(|&id| self.vocab.symbols[id].as_str()).collect();
                let _ = writeln!(out, "{key}  {}", syms.join(" "));
            }
        }
        out
    }
}

/// Pronunciation variants of a word or whitespace-separated phrase. Phrases
/// yield the cross product of per-word variants, each concatenated in order.
pub fn pronounce(query: &str, lexicon: &Lexicon) -> Result<Vec<Vec<usize>>> {
    let words: Vec<&str> = query.split_whitespace().collect();
    if words.is_empty() {
        return Err(KwsError::OutOfVocabulary(query.to_string()));
    }
    let mut acc: Vec<Vec<usize>> = vec![Vec::new()];
    for w in words {
        let p = lexicon.lookup(w)?;
        acc = acc
            .iter()
            .flat_map(|prefix| {
                p.variants.iter().map(move |v| {
                    let mut s = prefix.clone();
                    s.extend_from_slice(v);
                    s
                })
            })
            .collect();
    }
    Ok(acc)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VocabSplit {
    pub train: BTreeSet<String>,
    pub test: BTreeSet<String>,
    /// Words seen in the corpus whose shortest variant is below `min_np`.
    pub excluded_short: BTreeSet<String>,
}

/// Splits the distinct words of `transcripts` into disjoint train and test
/// keyword vocabularies. A word is eligible when its shortest variant has at
/// least `min_np` phonemes; `test_size` eligible words are drawn by seed and
/// the rest form the training vocabulary.
pub fn split_vocabulary<S: AsRef<str>>(transcripts: &[Vec<S>], lexicon: &Lexicon, min_np: usize, test_size: usize, seed: u64) -> Result<VocabSplit> {
    if min_np == 0 {
        return Err(KwsError::Size("min_np must be at least 1".into()));
    }
    let mut eligible = BTreeSet::new();
    let mut excluded_short = BTreeSet::new();
    for w in transcripts.iter().flatten() {
        let p = lexicon.lookup(w.as_ref())?;
        if p.min_np() >= min_np {
            eligible.insert(p.word.clone());
        } else {
            excluded_short.insert(p.word.clone());
        }
    }
    if test_size > eligible.len() {
        return Err(KwsError::Size(format!(
            "requested {test_size} test keywords but only {} words have n_p >= {min_np}",
            eligible.len()
        )));
    }
    let pool: Vec<&String> = eligible.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let test: BTreeSet<String> = pool.choose_multiple(&mut rng, test_size).map(|w| (*w).clone()).collect();
    let train = eligible.difference(&test).cloned().collect();
    Ok(VocabSplit {
        train,
        test,
        excluded_short,
    })
}

/// One word per line.
pub fn write_word_list<'a>(words: impl IntoIterator<Item = &'a String>) -> String {
    let mut out = String::new();
    for w in words {
        out.push_str(w);
        out.push('\n');
    }
    out
}

pub fn read_word_list(text: &str) -> BTreeSet<String> {
    text.lines().map(str::trim).filter(|l| !l.is_empty()).map(canonical).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn happy_parses_to_stressed_tokens() {
        let lex = parse_lexicon("HAPPY  HH AE1 P IY0\n", ParseOptions::default()).unwrap();
        let p = lex.lookup("happy").unwrap();
        assert_eq!(p.word, "happy");
        assert_eq!(lex.symbols_of(&p.variants[0]).unwrap(), ["HH", "AE1", "P", "IY0"]);
    }

    #[test]
    fn comment_only_input_is_empty() {
        let err = parse_lexicon(";;; nothing here\n;;; at all\n", ParseOptions::default()).unwrap_err();
        assert!(matches!(err, KwsError::EmptyLexicon { malformed: 0 }));
    }

    #[test]
    fn alternates_fold_into_variants() {
        let lex = parse_lexicon("A  AH0\nA(2)  EY1\n", ParseOptions::default()).unwrap();
        let p = lex.lookup("A").unwrap();
        let syms: Vec<Vec<&str>> = p.variants.iter().map(|v| lex.symbols_of(v).unwrap()).collect();
        assert_eq!(syms, vec![vec!["AH0"], vec!["EY1"]]);
    }

    #[test]
    fn malformed_lines_are_counted() {
        let lex = parse_lexicon("GOOD  G UH1 D\nBAD\nWORSE  w er1 s\nOK  OW2 K EY1\n", ParseOptions::default()).unwrap();
        assert_eq!(lex.len(), 2);
        assert_eq!(lex.malformed(), 2);
    }

    #[test]
    fn strip_stress_folds_tokens() {
        let lex = parse_lexicon("A  AH0\nB  AH1 B\n", ParseOptions { strip_stress: true }).unwrap();
        assert_eq!(lex.vocab().symbols(), ["AH", "B"]);
    }

    #[test]
    fn pad_id_is_reserved() {
        let lex = parse_lexicon("A  AH0\n", ParseOptions::default()).unwrap();
        assert!(lex.vocab().symbol(PAD_ID).is_err());
        assert_eq!(lex.vocab().id("AH0"), Some(1));
    }

    #[test]
    fn phrase_concatenates_and_crosses_variants() {
        let lex = parse_lexicon("A  AH0\nA(2)  EY1\nCAT  K AE1 T\nDOG  D AO1 G\n", ParseOptions::default()).unwrap();
        let one = pronounce("cat dog", &lex).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].len(), 6);
        let two = pronounce("a cat", &lex).unwrap();
        assert_eq!(two.len(), 2);
        assert_eq!(lex.symbols_of(&two[1]).unwrap(), ["EY1", "K", "AE1", "T"]);
        assert!(matches!(pronounce("cat zebra", &lex), Err(KwsError::OutOfVocabulary(w)) if w == "zebra"));
    }

    #[test]
    fn short_words_are_never_eligible() {
        let lex = Lexicon::bundled().unwrap();
        let t = vec![vec!["happy", "abhorrent"]];
        let s = split_vocabulary(&t, &lex, 6, 0, 1).unwrap();
        assert!(!s.train.contains("happy") && !s.test.contains("happy"));
        assert!(s.excluded_short.contains("happy"));
    }

    #[test]
    fn oversized_test_request_fails() {
        let lex = Lexicon::bundled().unwrap();
        let t = vec![vec!["happy"]];
        assert!(matches!(split_vocabulary(&t, &lex, 6, 1, 1), Err(KwsError::Size(_))));
    }
}
