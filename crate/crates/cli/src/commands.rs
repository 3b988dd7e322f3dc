use std::path::{Path, PathBuf};

use kwsnet_core::encoders::Modality;
use kwsnet_core::evalharness::{
    compute_traces, eval_streams, evaluate_checkpoint, fuse_tables, make_queries, parse_grid, report, retrieve, score_dump, sweep_csv, MetricsReport, Query,
    RankedRetrieval, TraceTable, REPORT_CHECKPOINTS,
};
use kwsnet_core::kwsnet::{fuse_modalities, similarity_map, DetectionTrace, KwsNet, StrideMode};
use kwsnet_core::pronlex::{parse_lexicon, pronounce, read_word_list, Lexicon, ParseOptions};
use kwsnet_core::synthcorpus::{build_corpus, load_manifest, load_vocab, plan_vocabulary, save_corpus, NoiseSpec, SyntheticClip, VocabPlan, SPLITS};
use kwsnet_core::trainer::{list_checkpoints, load_checkpoint, stream_of, train as run_training, Stage, TrainData};
use kwsnet_core::{KwsError, Result};

use crate::{load_config, EvalArgs, GenArgs, ModalityArg, Models, SpotArgs, SweepArgs, TrainArgs};

const LEXICON_FILE: &str = "lexicon.dict";
const EVAL_NOISE_TAG: u64 = 17;

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => KwsError::Missing(path.display().to_string()),
        _ => KwsError::Io(e),
    })
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => Ok(std::fs::write(p, text)?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// The corpus's own lexicon if it was generated from one, else the bundled one.
fn corpus_lexicon(corpus: &Path) -> Result<Lexicon> {
    let p = corpus.join(LEXICON_FILE);
    if p.exists() {
        parse_lexicon(&read(&p)?, ParseOptions::default())
    } else {
        Lexicon::bundled()
    }
}

// ------------------------------------------------------------------- gen

pub fn gen(a: GenArgs) -> Result<()> {
    let mut rc = load_config(&a.common)?;
    if let Some(n) = a.train_vocab {
        rc.vocab.train_keywords = n;
    }
    if let Some(n) = a.test_vocab {
        rc.vocab.test_keywords = n;
    }
    if let Some(n) = a.min_np {
        rc.vocab.min_np = n;
    }
    if let Some(n) = a.clips {
        rc.corpus.train_clips = n;
    }
    if rc.corpus.train_clips == 0 {
        return Err(KwsError::Size("empty corpus: at least one training clip is required".into()));
    }
    let seed = a.common.seed.unwrap_or(0);
    let lex_text = a.lexicon.as_deref().map(read).transpose()?;
    let lex = match &lex_text {
        Some(t) => parse_lexicon(t, ParseOptions::default())?,
        None => Lexicon::bundled()?,
    };
    if lex.malformed() > 0 {
        eprintln!("warning: skipped {} malformed lexicon line(s)", lex.malformed());
    }
    if a.out.exists() && std::fs::read_dir(&a.out)?.next().is_some() {
        return Err(KwsError::Config(format!("output directory {} is not empty", a.out.display())));
    }
    let plan = plan_vocabulary(&lex, &rc.vocab, seed)?;
    let corpus = build_corpus(&lex, &plan, &rc.corpus, seed)?;

    // build next to the destination and move into place once complete
    let parent = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(parent)?;
    let tmp = tempfile::Builder::new().prefix(".kwsnet-gen").tempdir_in(parent)?;
    let info = save_corpus(tmp.path(), &corpus)?;
    if let Some(t) = &lex_text {
        std::fs::write(tmp.path().join(LEXICON_FILE), t)?;
    }
    std::fs::write(tmp.path().join("config.kv"), rc.to_kv())?;
    if a.out.exists() {
        std::fs::remove_dir(&a.out)?;
    }
    std::fs::rename(tmp.keep(), &a.out)?;

    let fr = info.frame_rate;
    println!("{:<10} {:>7} {:>8}", "split", "clips", "hours");
    for s in SPLITS {
        let clips = corpus.split(s).expect("known split");
        let frames: usize = clips.iter().map(SyntheticClip::t_v).sum();
        println!("{s:<10} {:>7} {:>8.3}", clips.len(), frames as f64 / fr / 3600.0);
    }
    let probe_frames: usize = corpus.probes.iter().map(|p| p.clip.t_v() + p.sibling_clip.t_v()).sum();
    println!("{:<10} {:>7} {:>8.3}", "probe", 2 * corpus.probes.len(), probe_frames as f64 / fr / 3600.0);
    let total: usize = info.clips.iter().map(|(_, n)| n).sum();
    println!("{:<10} {:>7} {:>8.3}", "total", total, (info.frames + probe_frames) as f64 / fr / 3600.0);
    println!(
        "vocabulary: {} train, {} val, {} test, {} short test keywords (min {} phonemes)",
        plan.train_keywords.len(),
        plan.val_keywords.len(),
        plan.test_keywords.len(),
        plan.test_short.len(),
        rc.vocab.min_np
    );
    Ok(())
}

// ----------------------------------------------------------------- train

fn modality_of(m: ModalityArg) -> Result<Modality> {
    match m {
        ModalityArg::V => Ok(Modality::Visual),
        ModalityArg::A => Ok(Modality::Audio),
        ModalityArg::Av => Err(KwsError::Config("train one modality at a time; fuse them at eval".into())),
    }
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut rc = load_config(&a.common)?;
    let lex = corpus_lexicon(&a.corpus)?;
    rc.model.modality = modality_of(a.modality)?;
    rc.model.vocab_size = lex.vocab().len();
    if a.no_shortcut {
        rc.model.shortcut = false;
    }
    if a.no_loc {
        rc.train.use_boundaries = false;
    }
    let vocab = load_vocab(&a.corpus)?;
    let split = match rc.train.stage {
        Stage::Pretrain => "pretrain",
        Stage::Finetune => "train",
    };
    let clips = load_manifest(&a.corpus.join(format!("{split}.tsv")))?;

    let (mut model, state) = if a.resume {
        let newest = list_checkpoints(&a.out)?.pop().ok_or_else(|| KwsError::Missing(format!("no checkpoint in {}", a.out.display())))?;
        let ck = load_checkpoint(&newest, None)?;
        eprintln!("resuming after epoch {}", ck.epoch);
        (ck.model, Some(ck.state))
    } else if let Some(init) = &a.init {
        let ck = load_checkpoint(&checkpoint_files(init)?.pop().expect("non-empty"), None)?;
        if ck.model.cfg.modality != rc.model.modality {
            return Err(KwsError::Config("--init checkpoint has a different modality".into()));
        }
        (ck.model, None)
    } else {
        (KwsNet::new(rc.model.clone())?, None)
    };
    rc.model = model.cfg.clone();

    let data = TrainData {
        clips: &clips,
        vocab: &vocab.train_keywords,
        lexicon: &lex,
    };
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("config.kv"), rc.to_kv())?;
    let run = run_training(&mut model, &data, &rc.train, Some(&a.out), state, |e| {
        let val = e.val_loss.map(|v| format!("{v:.5}")).unwrap_or_else(|| "-".into());
        eprintln!("epoch {:3}  lr {:.2e}  train {:.5}  val {val}  pairs {}", e.epoch, e.lr, e.train_loss, e.pairs);
    })?;
    let last = run.state.curve.last();
    println!(
        "{} epoch(s), final train loss {}, {} checkpoint(s) in {}{}",
        run.state.curve.len(),
        last.map(|e| format!("{:.5}", e.train_loss)).unwrap_or_else(|| "-".into()),
        run.checkpoints.len(),
        a.out.display(),
        if run.state.stopped { " (early stop)" } else { "" }
    );
    Ok(())
}

// ------------------------------------------------------------- evaluation

fn checkpoint_files(p: &Path) -> Result<Vec<PathBuf>> {
    if p.is_dir() {
        let v = list_checkpoints(p)?;
        if v.is_empty() {
            return Err(KwsError::Missing(format!("no checkpoint in {}", p.display())));
        }
        Ok(v)
    } else if p.exists() {
        Ok(vec![p.to_path_buf()])
    } else {
        Err(KwsError::Missing(p.display().to_string()))
    }
}

type Labelled = Vec<(String, KwsNet)>;

fn load_last(p: &Path, keep: usize) -> Result<Labelled> {
    let files = checkpoint_files(p)?;
    let start = files.len().saturating_sub(keep);
    files[start..]
        .iter()
        .map(|f| {
            let label = f.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint").to_string();
            Ok((label, load_checkpoint(f, None)?.model))
        })
        .collect()
}

struct Loaded {
    visual: Option<Labelled>,
    audio: Option<Labelled>,
}

fn load_models(m: &Models, keep: usize) -> Result<Loaded> {
    fn need<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
        p.as_deref().ok_or_else(|| KwsError::Missing(format!("{flag} checkpoint (required by --modality)")))
    }
    let (v, a) = match m.modality {
        ModalityArg::V => (Some(need(&m.visual, "--visual")?), None),
        ModalityArg::A => (None, Some(need(&m.audio, "--audio")?)),
        ModalityArg::Av => (Some(need(&m.visual, "--visual")?), Some(need(&m.audio, "--audio")?)),
    };
    let l = Loaded {
        visual: v.map(|p| load_last(p, keep)).transpose()?,
        audio: a.map(|p| load_last(p, keep)).transpose()?,
    };
    for (set, want) in [(&l.visual, Modality::Visual), (&l.audio, Modality::Audio)] {
        if set.iter().flatten().any(|(_, m)| m.cfg.modality != want) {
            return Err(KwsError::Config(format!("a {want:?} checkpoint was expected")));
        }
    }
    Ok(l)
}

struct EvalSet {
    clips: Vec<SyntheticClip>,
    queries: Vec<Query>,
}

fn eval_set(corpus: &Path, split: &str, queries: Option<&Path>, lex: &Lexicon, max_np: usize) -> Result<EvalSet> {
    let clips = load_manifest(&corpus.join(format!("{split}.tsv")))?;
    let words: Vec<String> = match queries {
        Some(p) => read_word_list(&read(p)?).into_iter().collect(),
        None => {
            let v: VocabPlan = load_vocab(corpus)?;
            match split {
                "test" => v.test_keywords,
                "val" => v.val_keywords,
                _ => v.train_keywords,
            }
        }
    };
    let (queries, skipped) = make_queries(&words, lex, max_np);
    if skipped > 0 {
        eprintln!("warning: skipped {skipped} query word(s) without a usable pronunciation");
    }
    if queries.is_empty() {
        return Err(KwsError::Size("no usable query keywords".into()));
    }
    // homophones stay separate queries but cannot be told apart by the model
    for (i, q) in queries.iter().enumerate() {
        for r in &queries[i + 1..] {
            if q.variants.iter().any(|v| r.variants.contains(v)) {
                eprintln!("note: `{}` and `{}` share a pronunciation", q.text, r.text);
            }
        }
    }
    Ok(EvalSet { clips, queries })
}

fn tables(models: &Option<Labelled>, set: &EvalSet, modality: Modality, noise: Option<&NoiseSpec>, seed: u64) -> Result<Option<Vec<TraceTable>>> {
    let Some(models) = models else { return Ok(None) };
    let streams = eval_streams(&set.clips, modality, noise, seed)?;
    models.iter().map(|(_, m)| compute_traces(m, &streams, &set.queries)).collect::<Result<_>>().map(Some)
}

/// Pairs visual and audio checkpoints newest-last; fused evaluation uses as
/// many as both sides have.
fn score(loaded: &Loaded, v: &Option<Vec<TraceTable>>, a: &Option<Vec<TraceTable>>, w_a: f64, set: &EvalSet, loc: bool) -> Result<(MetricsReport, Vec<RankedRetrieval>)> {
    let label = |l: &Option<Labelled>, i: usize, n: usize| l.as_ref().map(|x| x[x.len() - n + i].0.clone());
    let digest = |l: &Option<Labelled>| l.as_ref().map(|x| x[0].1.cfg.digest());
    let (tabs, n): (Vec<TraceTable>, usize) = match (v, a) {
        (Some(v), Some(a)) => {
            let n = v.len().min(a.len());
            let t = (0..n).map(|i| fuse_tables(&a[a.len() - n + i], &v[v.len() - n + i], w_a)).collect::<Result<_>>()?;
            (t, n)
        }
        (Some(t), None) | (None, Some(t)) => (t.clone(), t.len()),
        (None, None) => return Err(KwsError::Missing("no model to evaluate".into())),
    };
    let mut evals = Vec::new();
    let mut last = Vec::new();
    for (i, t) in tabs.iter().enumerate() {
        let rs = retrieve(t, &set.clips)?;
        let name: Vec<String> = [label(&loaded.visual, i, n), label(&loaded.audio, i, n)].into_iter().flatten().collect();
        evals.push(evaluate_checkpoint(&name.join("+"), &rs, loc)?);
        last = rs;
    }
    let d: Vec<String> = [digest(&loaded.visual), digest(&loaded.audio)].into_iter().flatten().collect();
    Ok((report(evals, &d.join("+"))?, last))
}

fn max_np(l: &Loaded) -> usize {
    l.visual.iter().chain(&l.audio).flatten().map(|(_, m)| m.cfg.max_np).min().unwrap_or(24)
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let rc = load_config(&a.common)?;
    let loaded = load_models(&a.models, REPORT_CHECKPOINTS)?;
    let lex = corpus_lexicon(&a.corpus)?;
    let set = eval_set(&a.corpus, &a.split, a.queries.as_deref(), &lex, max_np(&loaded))?;
    let noise = a.snr.map(NoiseSpec::always);
    let seed = rc.train.seed.wrapping_add(EVAL_NOISE_TAG);
    let v = tables(&loaded.visual, &set, Modality::Visual, None, seed)?;
    let au = tables(&loaded.audio, &set, Modality::Audio, noise.as_ref(), seed)?;
    let (rep, last) = score(&loaded, &v, &au, a.models.fusion_weight, &set, !a.no_localization)?;
    if let Some(w) = &rep.warning {
        eprintln!("warning: {w}");
    }
    eprint!("{}", rep.summary());
    if let Some(p) = &a.scores {
        std::fs::write(p, score_dump(&last, !a.no_localization))?;
    }
    write_or_print(a.out.as_deref(), &rep.to_csv())
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let rc = load_config(&a.common)?;
    let loaded = load_models(&a.models, REPORT_CHECKPOINTS)?;
    let lex = corpus_lexicon(&a.corpus)?;
    let set = eval_set(&a.corpus, &a.split, a.queries.as_deref(), &lex, max_np(&loaded))?;
    let seed = rc.train.seed.wrapping_add(EVAL_NOISE_TAG);
    let loc = !a.no_localization;
    let v = tables(&loaded.visual, &set, Modality::Visual, None, seed)?;
    let mut rows = Vec::new();
    let kind = if let Some(g) = &a.snr {
        if loaded.audio.is_none() {
            return Err(KwsError::Config("an SNR sweep needs an audio model (--modality a or av)".into()));
        }
        for snr in parse_grid(g)? {
            let au = tables(&loaded.audio, &set, Modality::Audio, Some(&NoiseSpec::always(snr)), seed)?;
            rows.push((snr, score(&loaded, &v, &au, a.models.fusion_weight, &set, loc)?.0.mean));
        }
        "snr"
    } else {
        let g = a.fusion.as_deref().expect("clap requires --snr or --fusion");
        if a.models.modality != ModalityArg::Av {
            return Err(KwsError::Config("a fusion sweep needs --modality av".into()));
        }
        let noise = a.at_snr.map(NoiseSpec::always);
        let au = tables(&loaded.audio, &set, Modality::Audio, noise.as_ref(), seed)?;
        for w in parse_grid(g)? {
            rows.push((w, score(&loaded, &v, &au, w, &set, loc)?.0.mean));
        }
        "fusion"
    };
    write_or_print(a.out.as_deref(), &sweep_csv(kind, &rows))
}

// ------------------------------------------------------------------ spot

fn find_clip(corpus: &Path, id: &str) -> Result<SyntheticClip> {
    let manifests = SPLITS.iter().rev().map(|s| format!("{s}.tsv")).chain(["probe_clips.tsv".to_string()]);
    for m in manifests {
        let p = corpus.join(m);
        if p.exists() {
            if let Some(c) = load_manifest(&p)?.into_iter().find(|c| c.id == id) {
                return Ok(c);
            }
        }
    }
    Err(KwsError::Missing(format!("clip {id} in {}", corpus.display())))
}

pub fn spot(a: SpotArgs) -> Result<()> {
    let rc = load_config(&a.common)?;
    let loaded = load_models(&a.models, 1)?;
    let lex = corpus_lexicon(&a.corpus)?;
    let mut clip = find_clip(&a.corpus, &a.clip)?;
    if let Some(snr) = a.snr {
        let others: Vec<SyntheticClip> = load_manifest(&a.corpus.join("test.tsv"))?.into_iter().filter(|c| c.id != clip.id).collect();
        let pool: Vec<_> = others.iter().map(|c| &c.audio).collect();
        let mut r = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(rc.train.seed.wrapping_add(EVAL_NOISE_TAG));
        clip.audio = NoiseSpec::always(snr).apply(&clip.audio, &pool, None, &mut r)?.0;
    }
    let variants = pronounce(&a.keyword, &lex)?;
    let model = |l: &Option<Labelled>| l.as_ref().map(|x| x[0].1.clone());
    let (vm, am) = (model(&loaded.visual), model(&loaded.audio));
    let feats = |m: &Option<KwsNet>| m.as_ref().map(|m| m.encode_clip(stream_of(&clip, m.cfg.modality))).transpose();
    let (vf, af) = (feats(&vm)?, feats(&am)?);

    let mut best: Option<(f64, usize, DetectionTrace)> = None;
    for (i, ids) in variants.iter().enumerate() {
        let trace = |m: &Option<KwsNet>, f: &Option<_>| -> Result<Option<DetectionTrace>> {
            match (m, f) {
                (Some(m), Some(f)) => Ok(Some(m.detect(f, &m.encode_keyword(ids)?, StrideMode::Test)?)),
                _ => Ok(None),
            }
        };
        let t = match (trace(&vm, &vf)?, trace(&am, &af)?) {
            (Some(v), Some(au)) => fuse_modalities(&au, &v, a.models.fusion_weight)?,
            (Some(t), None) | (None, Some(t)) => t,
            (None, None) => unreachable!("load_models guarantees a model"),
        };
        let s = t.clip_score();
        if best.as_ref().is_none_or(|b| s > b.0) {
            best = Some((s, i, t));
        }
    }
    let (score, variant, trace) = best.ok_or_else(|| KwsError::Length("keyword has no pronunciation".into()))?;
    println!("{} {score:.6} {}", score >= a.threshold, trace.location(trace.peak_index()));

    if let Some(p) = &a.trace_csv {
        let mut s = String::from("frame,probability\n");
        for (i, q) in trace.probs().iter().enumerate() {
            s.push_str(&format!("{},{q}\n", trace.location(i)));
        }
        std::fs::write(p, s)?;
    }
    if let Some(p) = &a.map_csv {
        let (m, f) = match (&vm, &vf) {
            (Some(m), Some(f)) => (m, f),
            _ => (am.as_ref().expect("a model"), af.as_ref().expect("features")),
        };
        let map = similarity_map(f, &m.encode_keyword(&variants[variant])?)?;
        let [t, n] = [map.grid.shape()[0], map.grid.shape()[1]];
        let c = map.channels();
        let g = map.grid.data();
        let mut s = String::from("frame");
        for j in 0..n {
            s.push_str(&format!(",p{j}"));
        }
        s.push('\n');
        for i in 0..t {
            s.push_str(&i.to_string());
            for j in 0..n {
                let x = g[(i * n + j) * c];
                s.push_str(&format!(",{}", 1.0 / (1.0 + (-x).exp())));
            }
            s.push('\n');
        }
        std::fs::write(p, s)?;
    }
    Ok(())
}
