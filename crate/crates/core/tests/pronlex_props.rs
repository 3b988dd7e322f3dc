use std::collections::BTreeSet;

use kwsnet_core::pronlex::{parse_lexicon, pronounce, read_word_list, split_vocabulary, write_word_list, Lexicon, ParseOptions, BUNDLED_LEXICON};
use proptest::prelude::*;

fn bundled() -> Lexicon {
    Lexicon::bundled().unwrap()
}

#[test]
fn happy_matches_the_documented_tokens() {
    let lex = parse_lexicon("HAPPY HH AE1 P IY0\n", ParseOptions::default()).unwrap();
    let v = pronounce("happy", &lex).unwrap();
    assert_eq!(v.len(), 1);
    assert_eq!(lex.symbols_of(&v[0]).unwrap(), ["HH", "AE1", "P", "IY0"]);
}

#[test]
fn thousand_line_excerpt_round_trips() {
    let excerpt: String = BUNDLED_LEXICON
        .lines()
        .filter(|l| !l.starts_with(";;;"))
        .take(1000)
        .map(|l| format!("{l}\n"))
        .collect();
    let a = parse_lexicon(&excerpt, ParseOptions::default()).unwrap();
    assert_eq!(a.malformed(), 0);
    let b = parse_lexicon(&a.to_cmudict(), ParseOptions::default()).unwrap();
    assert_eq!(a.len(), b.len());
    for p in a.entries() {
        let q = b.lookup(&p.word).unwrap();
        let sa: Vec<Vec<&str>> = p.variants.iter().map(|v| a.symbols_of(v).unwrap()).collect();
        let sb: Vec<Vec<&str>> = q.variants.iter().map(|v| b.symbols_of(v).unwrap()).collect();
        assert_eq!(sa, sb, "{}", p.word);
    }
}

#[test]
fn full_bundle_round_trips_and_is_clean() {
    let a = bundled();
    assert_eq!(a.malformed(), 0);
    assert!(a.len() > 4000);
    let b = parse_lexicon(&a.to_cmudict(), ParseOptions::default()).unwrap();
    assert_eq!(a.to_cmudict(), b.to_cmudict());
}

#[test]
fn lookup_is_case_insensitive() {
    let lex = bundled();
    assert_eq!(lex.lookup("HaPpY").unwrap().word, "happy");
    assert_eq!(lex.digest().len(), 64);
}

#[test]
fn single_variant_phrase_lengths_add() {
    let lex = bundled();
    let words: Vec<&str> = lex.words().filter(|w| lex.lookup(w).unwrap().variants.len() == 1).take(60).collect();
    for pair in words.chunks(2) {
        let (a, b) = (pair[0], pair[1]);
        let na = lex.lookup(a).unwrap().variants[0].len();
        let nb = lex.lookup(b).unwrap().variants[0].len();
        let v = pronounce(&format!("{a} {b}"), &lex).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].len(), na + nb);
    }
}

#[test]
fn cross_product_matches_enumeration() {
    let lex = bundled();
    let multi: Vec<&str> = lex.words().filter(|w| lex.lookup(w).unwrap().variants.len() > 1).take(5).collect();
    let single: Vec<&str> = lex.words().filter(|w| lex.lookup(w).unwrap().variants.len() == 1).take(3).collect();
    for a in &multi {
        for b in &single {
            for q in [format!("{a} {b}"), format!("{b} {a}")] {
                let got = pronounce(&q, &lex).unwrap();
                let ws: Vec<&str> = q.split(' ').collect();
                let mut expect = Vec::new();
                for va in &lex.lookup(ws[0]).unwrap().variants {
                    for vb in &lex.lookup(ws[1]).unwrap().variants {
                        expect.push([va.clone(), vb.clone()].concat());
                    }
                }
                assert_eq!(got, expect);
            }
        }
    }
}

fn eligible_words(lex: &Lexicon, min_np: usize, n: usize) -> Vec<String> {
    lex.entries().filter(|p| p.min_np() >= min_np).take(n).map(|p| p.word.clone()).collect()
}

#[test]
fn hundred_eligible_twenty_test() {
    let lex = bundled();
    let words = eligible_words(&lex, 6, 100);
    assert_eq!(words.len(), 100);
    let s = split_vocabulary(&[words.clone()], &lex, 6, 20, 7).unwrap();
    assert_eq!(s.test.len(), 20);
    assert_eq!(s.train.len(), 80);
    for w in &words {
        assert!(s.train.contains(w) ^ s.test.contains(w), "{w}");
    }
}

#[test]
fn empty_test_request_keeps_everything_in_train() {
    let lex = bundled();
    let words = eligible_words(&lex, 6, 30);
    let s = split_vocabulary(&[words.clone()], &lex, 6, 0, 3).unwrap();
    assert!(s.test.is_empty());
    assert_eq!(s.train, words.into_iter().collect::<BTreeSet<_>>());
}

#[test]
fn word_lists_round_trip() {
    let set: BTreeSet<String> = ["alpha", "beta"].iter().map(|s| s.to_string()).collect();
    assert_eq!(read_word_list(&write_word_list(&set)), set);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn splits_are_disjoint_for_every_seed(seed in any::<u64>(), test in 0usize..40) {
        let lex = bundled();
        let mut words = eligible_words(&lex, 6, 60);
        words.extend(lex.entries().filter(|p| p.min_np() < 6).take(20).map(|p| p.word.clone()));
        let s = split_vocabulary(&[words], &lex, 6, test, seed).unwrap();
        prop_assert!(s.train.is_disjoint(&s.test));
        prop_assert_eq!(s.test.len(), test);
        prop_assert_eq!(s.train.len() + s.test.len(), 60);
        prop_assert_eq!(s.excluded_short.len(), 20);
    }
}
