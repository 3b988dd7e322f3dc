use kwsnet_core::encoders::{Modality, ModelConfig};
use kwsnet_core::kwsnet::KwsNet;
use kwsnet_core::pronlex::Lexicon;
use kwsnet_core::synthcorpus::{build_corpus, plan_vocabulary, Corpus, CorpusSpec, NoiseSpec, VocabPlan, VocabSpec};
use kwsnet_core::trainer::*;
use kwsnet_core::KwsError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn setup(seed: u64) -> (Lexicon, VocabPlan, Corpus) {
    let lex = Lexicon::bundled().unwrap();
    let vs = VocabSpec {
        train_keywords: 20,
        val_keywords: 4,
        test_keywords: 6,
        test_short: 4,
        ..Default::default()
    };
    let cs = CorpusSpec {
        pretrain_clips: 8,
        train_clips: 24,
        val_clips: 4,
        test_clips: 6,
        probe_pairs: 2,
        ..Default::default()
    };
    let plan = plan_vocabulary(&lex, &vs, seed).unwrap();
    let c = build_corpus(&lex, &plan, &cs, seed).unwrap();
    (lex, plan, c)
}

fn model(lex: &Lexicon, modality: Modality, scale: f64) -> KwsNet {
    KwsNet::new(ModelConfig {
        modality,
        channel_scale: scale,
        vocab_size: lex.vocab().len(),
        seed: 3,
        ..Default::default()
    })
    .unwrap()
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_clips: 8,
        patience: 100,
        seed: 11,
        ..Default::default()
    }
}

#[test]
fn batches_are_balanced_and_negatives_absent() {
    let (lex, plan, c) = setup(1);
    let clips: Vec<_> = c.train.iter().collect();
    let b = build_batch(&clips, &plan.train_keywords, &lex, 6, 24, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(b.positives() > 0);
    assert_eq!(b.positives() * 2, b.pairs.len());
    for p in &b.pairs {
        let clip = clips[p.clip];
        assert_eq!(clip.contains(&p.keyword), p.label.y == 1.0, "{} in {}", p.keyword, clip.transcript());
        assert!(p.ids.len() >= 6);
        if let Some((s, e)) = p.label.boundaries {
            assert!(clip.boundaries.iter().any(|w| w.word == p.keyword && w.start == s && w.end == e));
        }
    }
}

#[test]
fn phrase_pairs_share_the_keyword_and_stay_balanced() {
    let (lex, plan, c) = setup(4);
    let clips: Vec<_> = c.train.iter().collect();
    let mut b = build_batch(&clips, &plan.train_keywords, &lex, 6, 40, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let before = b.pairs.len();
    add_phrase_pairs(&mut b, &clips, &lex, 40, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(b.pairs.len(), before);
    add_phrase_pairs(&mut b, &clips, &lex, 40, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let added = &b.pairs[before..];
    assert!(!added.is_empty());
    assert_eq!(b.positives() * 2, b.pairs.len());
    for pair in added.chunks(2) {
        let (pos, neg) = (&pair[0], &pair[1]);
        let clip = clips[pos.clip];
        assert_eq!(pos.clip, neg.clip);
        assert!(pos.keyword.contains(' ') && neg.keyword.contains(' '));
        let (s, e) = pos.label.boundaries.unwrap();
        assert_eq!(clip.occurrences(&pos.keyword), vec![(s, e)]);
        assert!(clip.occurrences(&neg.keyword).is_empty() && neg.label.y == 0.0);
        // the swapped phrase keeps the uttered keyword
        let shared = neg.keyword.split(' ').zip(pos.keyword.split(' ')).filter(|(a, b)| a == b).count();
        assert!(shared >= 1 && shared < pos.keyword.split(' ').count());
        assert!(pos.ids.len() <= 40 && neg.ids.len() <= 40);
    }
    let mut cfg = TrainConfig::default();
    cfg.phrase_rate = 1.5;
    assert!(cfg.validate().is_err());
}

#[test]
fn three_keywords_make_six_pairs() {
    let (lex, plan, c) = setup(2);
    // a clip holding three training keywords, built from the corpus emitter's words
    let words: Vec<&str> = plan.train_keywords.iter().take(3).map(String::as_str).collect();
    let em = kwsnet_core::synthcorpus::Emitter::new(lex.vocab(), 32, 0.5, false, 0).unwrap();
    let clip = kwsnet_core::synthcorpus::synth_clip("x", &words, &lex, Default::default(), &em, 0).unwrap();
    let b = build_batch(&[&clip], &plan.train_keywords, &lex, 6, 24, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(b.positives(), 3);
    assert_eq!(b.pairs.len(), 6);
    drop(c);
}

#[test]
fn identical_seeds_reproduce_the_loss_curve() {
    let (lex, plan, c) = setup(3);
    let data = TrainData {
        clips: &c.train,
        vocab: &plan.train_keywords,
        lexicon: &lex,
    };
    let run = |_: ()| {
        let mut m = model(&lex, Modality::Visual, 0.125);
        train(&mut m, &data, &cfg(2), None, None, |_| {}).unwrap().losses()
    };
    let (a, b) = (run(()), run(()));
    assert_eq!(a.len(), 2);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-12);
    }
}

#[test]
fn checkpoints_round_trip_byte_identically() {
    let (lex, plan, c) = setup(4);
    let data = TrainData {
        clips: &c.train,
        vocab: &plan.train_keywords,
        lexicon: &lex,
    };
    let dir = tempfile::tempdir().unwrap();
    let mut m = model(&lex, Modality::Visual, 0.125);
    let run = train(&mut m, &data, &cfg(1), Some(dir.path()), None, |_| {}).unwrap();
    let first = &run.checkpoints[0];
    let ck = load_checkpoint(first, Some(&m.cfg)).unwrap();
    let again = dir.path().join("again.kwt");
    save_checkpoint(&again, &ck).unwrap();
    assert_eq!(std::fs::read(first).unwrap(), std::fs::read(&again).unwrap());
    assert_eq!(
        std::fs::read(kwsnet_core::kwsnet::sidecar_path(first)).unwrap(),
        std::fs::read(kwsnet_core::kwsnet::sidecar_path(&again)).unwrap()
    );
    assert!(dir.path().join("loss.csv").exists());

    let other = model(&lex, Modality::Visual, 0.25);
    assert!(matches!(load_checkpoint(first, Some(&other.cfg)), Err(KwsError::ConfigMismatch { .. })));
    assert!(matches!(load_checkpoint(&dir.path().join("nope.kwt"), None), Err(KwsError::Missing(_))));
}

#[test]
fn resumed_training_matches_unbroken_training() {
    let (lex, plan, c) = setup(5);
    let data = TrainData {
        clips: &c.train,
        vocab: &plan.train_keywords,
        lexicon: &lex,
    };
    let mut whole = model(&lex, Modality::Visual, 0.125);
    let full = train(&mut whole, &data, &cfg(2), None, None, |_| {}).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut half = model(&lex, Modality::Visual, 0.125);
    let first = train(&mut half, &data, &cfg(1), Some(dir.path()), None, |_| {}).unwrap();
    let ck = load_checkpoint(&first.checkpoints[0], None).unwrap();
    let mut resumed = ck.model;
    let rest = train(&mut resumed, &data, &cfg(2), None, Some(ck.state), |_| {}).unwrap();

    let (a, b) = (full.losses(), rest.losses());
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-10, "{x} vs {y}");
    }
    for ((n, x), (_, y)) in whole.tensors().iter().zip(resumed.tensors().iter()) {
        let d = x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(d <= 1e-10, "{n} differs by {d}");
    }
}

#[test]
fn without_localization_boundaries_do_not_matter() {
    let (lex, plan, c) = setup(6);
    let mut shifted = c.train.clone();
    for clip in &mut shifted {
        for b in &mut clip.boundaries {
            b.start = 0;
            b.end = 1;
        }
    }
    let go = |clips: &[kwsnet_core::synthcorpus::SyntheticClip]| {
        let data = TrainData {
            clips,
            vocab: &plan.train_keywords,
            lexicon: &lex,
        };
        let mut m = model(&lex, Modality::Visual, 0.125);
        let tc = TrainConfig {
            use_boundaries: false,
            ..cfg(1)
        };
        train(&mut m, &data, &tc, None, None, |_| {}).unwrap().losses()
    };
    assert_eq!(go(&c.train)[0].to_bits(), go(&shifted)[0].to_bits());
}

#[test]
fn noise_touches_audio_only() {
    let (lex, plan, c) = setup(7);
    let data = TrainData {
        clips: &c.train,
        vocab: &plan.train_keywords,
        lexicon: &lex,
    };
    let noisy = TrainConfig {
        noise: NoiseSpec::always(0.0),
        ..cfg(1)
    };
    let v = |tc: &TrainConfig| {
        let mut m = model(&lex, Modality::Visual, 0.125);
        train(&mut m, &data, tc, None, None, |_| {}).unwrap().state.curve[0].clone()
    };
    let (clean, loud) = (v(&cfg(1)), v(&noisy));
    assert_eq!(clean.train_loss.to_bits(), loud.train_loss.to_bits());
    assert_eq!(loud.noised_clips, 0);

    let mut m = model(&lex, Modality::Audio, 0.125);
    let log = train(&mut m, &data, &noisy, None, None, |_| {}).unwrap().state.curve[0].clone();
    assert!(log.noised_clips > 0);
}

#[test]
fn schedule_and_config_guards() {
    assert_eq!(learning_rate(Stage::Pretrain, 9), 1e-3);
    assert_eq!(learning_rate(Stage::Pretrain, 10), 5e-4);
    assert_eq!(learning_rate(Stage::Finetune, 39), 5e-5);
    let bad = TrainConfig {
        epochs: MAX_EPOCHS + 1,
        ..Default::default()
    };
    assert!(bad.validate().is_err());
    let mut rc = RunConfig::default();
    rc.set("train.epochs", "7").unwrap();
    rc.set("vocab.short_np", "[3,5]").unwrap();
    rc.set("corpus.timing.mean", "4").unwrap();
    assert_eq!(rc.vocab.short_np, (3, 5));
    assert!(rc.set("train.nope", "1").is_err());
    assert!(rc.set("train.epochs", "x").is_err());
    assert_eq!(RunConfig::from_kv(&rc.to_kv()).unwrap(), rc);
}
