mod common;

use std::collections::BTreeSet;

use common::{randn, rng};
use kwsnet_core::gradcore::Tensor;
use kwsnet_core::pronlex::{parse_lexicon, Lexicon, ParseOptions};
use kwsnet_core::synthcorpus::*;
use kwsnet_core::KwsError;
use rand::Rng;

fn small_spec() -> (VocabSpec, CorpusSpec) {
    let v = VocabSpec {
        train_keywords: 30,
        val_keywords: 5,
        test_keywords: 10,
        test_short: 6,
        ..Default::default()
    };
    let c = CorpusSpec {
        pretrain_clips: 10,
        train_clips: 40,
        val_clips: 10,
        test_clips: 30,
        probe_pairs: 5,
        ..Default::default()
    };
    (v, c)
}

fn corpus(seed: u64) -> (Lexicon, Corpus) {
    let lex = Lexicon::bundled().unwrap();
    let (vs, cs) = small_spec();
    let plan = plan_vocabulary(&lex, &vs, seed).unwrap();
    let c = build_corpus(&lex, &plan, &cs, seed).unwrap();
    (lex, c)
}

#[test]
fn bilabials_collapse_and_identity_preserves() {
    let lex = Lexicon::bundled().unwrap();
    let v = lex.vocab();
    let std = VisemeMap::standard(v).unwrap();
    assert!(std.count() < v.len() - 1);
    let ids: Vec<usize> = ["M", "P", "B"].iter().map(|s| v.id(s).unwrap()).collect();
    let vis = std.phoneme_to_viseme(&ids).unwrap();
    assert!(vis.iter().all(|&x| x == vis[0]));

    let id = VisemeMap::identity(v);
    let track: Vec<usize> = (1..v.len()).collect();
    assert_eq!(id.phoneme_to_viseme(&track).unwrap(), track);

    // counting oracle on random tracks
    let mut r = rng(4);
    for _ in 0..50 {
        let track: Vec<usize> = (0..30).map(|_| r.random_range(1..v.len())).collect();
        let collapsed = std.phoneme_to_viseme(&track).unwrap();
        let a: BTreeSet<_> = track.iter().collect();
        let b: BTreeSet<_> = collapsed.iter().collect();
        assert!(b.len() <= a.len());
        assert_eq!(collapsed.len(), track.len());
    }
}

#[test]
fn noiseless_frames_are_constant_within_a_phoneme() {
    let lex = Lexicon::bundled().unwrap();
    let e = Emitter::new(lex.vocab(), 16, 0.0, false, 1).unwrap();
    let c = synth_clip("c", &["happy", "baghdad"], &lex, Timing { mean: 3, jitter: 0 }, &e, 7).unwrap();
    for p in &c.phonemes {
        assert_eq!(p.end - p.start, 3);
        for t in p.start + 1..p.end {
            assert_eq!(c.visual.row(t), c.visual.row(p.start));
            assert_eq!(c.audio.row(t), c.audio.row(p.start));
        }
    }
}

#[test]
fn duration_arithmetic() {
    let lex = parse_lexicon("AAAA K AE1 T S\nBBBB D AO1 G Z\nCCCC M AY1 S T\nDDDD B EH1 L Z\nEEEE P IH1 N Z\n", ParseOptions::default()).unwrap();
    let words = ["aaaa", "bbbb", "cccc", "dddd", "eeee"];
    let fixed = Emitter::new(lex.vocab(), 8, 0.0, false, 1).unwrap();
    let c = synth_clip("c", &words, &lex, Timing { mean: 3, jitter: 0 }, &fixed, 1).unwrap();
    assert_eq!(c.t_v(), 60);
    for seed in 0..20 {
        let c = synth_clip("c", &words, &lex, Timing { mean: 3, jitter: 1 }, &fixed, seed).unwrap();
        assert!((40..=80).contains(&c.t_v()));
        let sum: usize = c.boundaries.iter().map(|b| b.end - b.start).sum();
        assert_eq!(sum, c.t_v());
        let per_phone: usize = c.phonemes.iter().map(|p| p.end - p.start).sum();
        assert_eq!(per_phone, c.t_v());
    }
}

#[test]
fn same_seed_same_clip_and_oov_rejected() {
    let lex = Lexicon::bundled().unwrap();
    let e = Emitter::new(lex.vocab(), 32, 0.5, true, 3).unwrap();
    let a = synth_clip("c", &["happy", "balding"], &lex, Timing::default(), &e, 11).unwrap();
    let b = synth_clip("c", &["happy", "balding"], &lex, Timing::default(), &e, 11).unwrap();
    assert_eq!(a, b);
    let c = synth_clip("c", &["happy", "balding"], &lex, Timing::default(), &e, 12).unwrap();
    assert_ne!(a.visual, c.visual);
    assert!(matches!(
        synth_clip("c", &["happy", "zzqx"], &lex, Timing::default(), &e, 1),
        Err(KwsError::OutOfVocabulary(_))
    ));
}

#[test]
fn snr_mixing_is_exact() {
    let mut r = rng(9);
    let s = randn(&[50, 32], &mut r);
    let n = randn(&[50, 32], &mut r).map(|v| 3.0 * v + 0.2);
    for snr in -10..=20 {
        let y = mix_noise_at_snr(&s, &n, snr as f64).unwrap();
        // recover the added noise and measure the ratio directly
        let added: Vec<f64> = y.data().iter().zip(s.data()).map(|(a, b)| a - b).collect();
        let pn: f64 = added.iter().map(|v| v * v).sum::<f64>() / added.len() as f64;
        let ps: f64 = s.data().iter().map(|v| v * v).sum::<f64>() / added.len() as f64;
        let want = 10f64.powf(snr as f64 / 10.0);
        assert!(((ps / pn) / want - 1.0).abs() < 1e-9, "snr {snr}");
    }
    let y = mix_noise_at_snr(&s, &n, 60.0).unwrap();
    let rel = y.max_abs_diff(&s) / s.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(rel < 1e-2);
    let zero = Tensor::zeros(&[50, 32]);
    assert!(matches!(mix_noise_at_snr(&s, &zero, 0.0), Err(KwsError::Numeric(_))));
}

#[test]
fn babble_tiles_and_sums() {
    let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let b = Tensor::from_rows(&[vec![10.0, 20.0], vec![30.0, 40.0], vec![50.0, 60.0]]).unwrap();
    let x = babble(&[&a, &b], 5).unwrap();
    let want = [[11.0, 22.0], [33.0, 44.0], [51.0, 62.0], [13.0, 24.0], [31.0, 42.0]];
    for (t, w) in want.iter().enumerate() {
        assert_eq!(x.row(t), w);
    }
}

#[test]
fn noise_spec_guards_and_excludes_own_clip() {
    let bad = NoiseSpec { apply_prob: 1.5, ..Default::default() };
    assert!(bad.validate().is_err());
    let mut r = rng(2);
    let own = randn(&[20, 4], &mut r);
    let pool: Vec<Tensor> = (0..5).map(|_| randn(&[20, 4], &mut r)).collect();
    let mut refs: Vec<&Tensor> = pool.iter().collect();
    refs.push(&own);
    let (_, hit) = NoiseSpec::off().apply(&own, &refs, Some(5), &mut r).unwrap();
    assert!(!hit);
    let spec = NoiseSpec { k: 5, ..NoiseSpec::always(0.0) };
    let (y, hit) = spec.apply(&own, &refs, Some(5), &mut r).unwrap();
    assert!(hit);
    // the only admissible talkers are the five others
    let noise = babble(&pool.iter().collect::<Vec<_>>(), 20).unwrap();
    assert!(y.max_abs_diff(&mix_noise_at_snr(&own, &noise, 0.0).unwrap()) < 1e-12);
    let six = NoiseSpec { k: 6, ..NoiseSpec::always(0.0) };
    assert!(six.apply(&own, &refs, Some(5), &mut r).is_err());
}

#[test]
fn corpus_scans_hold() {
    let (lex, c) = corpus(5);
    let test: BTreeSet<&str> = c.vocab.test_keywords.iter().map(String::as_str).collect();
    let held = c.vocab.held_out();
    assert_eq!(c.test.len(), 30);
    for clip in &c.test {
        assert!(clip.words.iter().any(|w| test.contains(w.as_str())), "{}", clip.id);
    }
    for clip in c.train.iter().chain(&c.pretrain) {
        assert!(clip.words.iter().all(|w| !held.contains(w.as_str())), "{}", clip.id);
    }
    for w in &c.vocab.test_keywords {
        assert!(lex.lookup(w).unwrap().min_np() >= 6);
    }
    for w in &c.vocab.test_short {
        let n = lex.lookup(w).unwrap().min_np();
        assert!((4..6).contains(&n));
    }
    for clip in c.pretrain.iter() {
        assert_eq!(clip.words.len(), 1);
    }
    for clip in c.train.iter().chain(&c.test) {
        let mut t = 0;
        for b in &clip.boundaries {
            assert_eq!(b.start, t);
            t = b.end;
        }
        assert_eq!(t, clip.t_v());
        assert_eq!(clip.audio.shape(), clip.visual.shape());
    }
}

#[test]
fn zero_test_keywords_gives_empty_test_split() {
    let lex = Lexicon::bundled().unwrap();
    let (mut vs, cs) = small_spec();
    vs.test_keywords = 0;
    let plan = plan_vocabulary(&lex, &vs, 1).unwrap();
    let c = build_corpus(&lex, &plan, &cs, 1).unwrap();
    assert!(c.test.is_empty());
}

#[test]
fn unreachable_vocab_is_a_generation_error() {
    let lex = Lexicon::bundled().unwrap();
    let vs = VocabSpec {
        train_keywords: 100_000,
        ..Default::default()
    };
    assert!(matches!(plan_vocabulary(&lex, &vs, 1), Err(KwsError::Generation(_))));
}

#[test]
fn probe_pairs_are_visually_identical() {
    let (lex, c) = corpus(6);
    let vm = VisemeMap::standard(lex.vocab()).unwrap();
    assert_eq!(c.probes.len(), 5);
    for p in &c.probes {
        let a = &lex.lookup(&p.word).unwrap().variants[0];
        let b = &lex.lookup(&p.sibling).unwrap().variants[0];
        assert_ne!(a, b);
        assert_eq!(vm.phoneme_to_viseme(a).unwrap(), vm.phoneme_to_viseme(b).unwrap());
        let span = p.clip.occurrences(&p.word)[0];
        assert_eq!(span, p.sibling_clip.occurrences(&p.sibling)[0]);
        let mut audio_differs = false;
        for t in span.0..span.1 {
            assert_eq!(p.clip.visual.row(t), p.sibling_clip.visual.row(t));
            audio_differs |= p.clip.audio.row(t) != p.sibling_clip.audio.row(t);
        }
        assert!(audio_differs);
    }
}

#[test]
fn corpus_round_trips_through_disk() {
    let (_, c) = corpus(7);
    let dir = tempfile::tempdir().unwrap();
    let info = save_corpus(dir.path(), &c).unwrap();
    let total: usize = info.clips.iter().map(|(_, n)| n).sum();
    let lines: usize = ["pretrain", "train", "val", "test", "probe_clips"]
        .iter()
        .map(|s| std::fs::read_to_string(dir.path().join(format!("{s}.tsv"))).unwrap().lines().filter(|l| !l.starts_with('#')).count())
        .sum();
    assert_eq!(total, lines);
    let back = load_corpus(dir.path()).unwrap();
    assert_eq!(back.vocab, c.vocab);
    for (a, b) in back.test.iter().zip(&c.test) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.boundaries, b.boundaries);
        assert_eq!(a.visual, b.visual);
        assert_eq!(a.audio, b.audio);
    }
    assert_eq!(back.probes.len(), c.probes.len());
    assert_eq!(back.probes[0].sibling_clip.visual, c.probes[0].sibling_clip.visual);
}

#[test]
fn manifest_lines_parse() {
    let text = "c1\tfeatures/c1.kwt\tthe cat\tthe:0:4,cat:4:13\n";
    let recs = parse_manifest(text, std::path::Path::new("m.tsv")).unwrap();
    assert_eq!(recs[0].boundaries[1], WordSpan { word: "cat".into(), start: 4, end: 13 });
    assert_eq!(format_manifest(&recs), text);
    assert!(parse_manifest("a\tb\n", std::path::Path::new("m.tsv")).is_err());
}
