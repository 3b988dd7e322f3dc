//! Training loop: positive/negative pairing, the two-stage learning-rate
//! schedule, babble augmentation of the audio stream, early stopping and
//! resumable checkpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::encoders::{Modality, ModelConfig, StreamInput};
use crate::error::{KwsError, Result};
use crate::gradcore::{container, update_running_stats, AdamConfig, Graph, Tensor};
use crate::kwsnet::{batch_loss, KwsNet, Pair, SampleLabel};
use crate::pronlex::Lexicon;
use crate::synthcorpus::{clip_seed, CorpusSpec, NoiseSpec, SyntheticClip, VocabSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Single-word clips, no boundary supervision.
    Pretrain,
    /// Multi-word clips.
    Finetune,
}

/// Base rate halved every `interval` epochs (epochs count from 0).
pub fn learning_rate(stage: Stage, epoch: usize) -> f64 {
    let (base, interval) = match stage {
        Stage::Pretrain => (1e-3, 10),
        Stage::Finetune => (1e-4, 20),
    };
    base * 0.5f64.powi((epoch / interval) as i32)
}

pub const MAX_EPOCHS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub batch_clips: usize,
    pub epochs: usize,
    pub use_boundaries: bool,
    /// Shortest keyword (in phonemes) used as a positive.
    pub min_np: usize,
    pub val_fraction: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub bn_momentum: f64,
    /// Checkpoints retained (older ones are deleted / dropped).
    pub keep: usize,
    pub noise: NoiseSpec,
    /// Chance that a positive also yields a phrase pair, see [`add_phrase_pairs`].
    pub phrase_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Finetune,
            batch_clips: 40,
            epochs: 40,
            use_boundaries: true,
            min_np: 6,
            val_fraction: 0.1,
            patience: 5,
            bn_momentum: 0.1,
            keep: 5,
            noise: NoiseSpec::off(),
            phrase_rate: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_clips == 0 || self.epochs == 0 || self.epochs > MAX_EPOCHS {
            return Err(KwsError::Config(format!("need batch_clips >= 1 and 1 <= epochs <= {MAX_EPOCHS}")));
        }
        if !(0.0..1.0).contains(&self.val_fraction) || self.patience == 0 || self.keep == 0 {
            return Err(KwsError::Config("need 0 <= val_fraction < 1, patience >= 1, keep >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.phrase_rate) {
            return Err(KwsError::Config("phrase_rate must lie in [0, 1]".into()));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(KwsError::Config("bn_momentum must lie in (0, 1]".into()));
        }
        self.noise.validate()
    }

    pub fn uses_boundaries(&self) -> bool {
        self.use_boundaries && self.stage == Stage::Finetune
    }
}

// --------------------------------------------------------------- config

/// Every pipeline setting, readable from flat `key=value` text.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab: VocabSpec,
    pub corpus: CorpusSpec,
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

impl RunConfig {
    /// Every setting as sorted `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut pairs = Vec::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut pairs);
        pairs.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Defaults overridden by the lines of `text`. Blank lines and `#`
    /// comments are skipped.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| KwsError::Config(format!("expected key=value, got `{line}`")))?;
            c.set(k.trim(), v.trim())?;
        }
        Ok(c)
    }

    /// Sets one dotted key. The value is parsed as the type the key already has.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut root = serde_json::to_value(&*self).expect("config serializes");
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| KwsError::Config(format!("unknown key `{key}`")))?;
        }
        let bad = || KwsError::Config(format!("bad value `{value}` for `{key}`"));
        *slot = match slot {
            Value::Bool(_) => Value::Bool(value.parse().map_err(|_| bad())?),
            Value::Number(n) if n.is_u64() => Value::from(value.parse::<u64>().map_err(|_| bad())?),
            Value::Number(_) => Value::from(value.parse::<f64>().map_err(|_| bad())?),
            Value::String(_) => Value::String(value.to_string()),
            Value::Array(_) => serde_json::from_str(value).map_err(|_| bad())?,
            _ => return Err(KwsError::Config(format!("`{key}` is not a leaf setting"))),
        };
        *self = serde_json::from_value(root).map_err(|e| KwsError::Config(format!("`{key}`: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

// ---------------------------------------------------------------- pairs

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    /// Index into the batch's clip list.
    pub clip: usize,
    pub keyword: String,
    pub ids: Vec<usize>,
    pub label: SampleLabel,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub pairs: Vec<SamplePair>,
    /// Clips that had no eligible keyword and contributed no pairs.
    pub skipped_clips: usize,
}

impl Batch {
    pub fn positives(&self) -> usize {
        self.pairs.iter().filter(|p| p.label.y == 1.0).count()
    }
}

/// Pairs every clip with each training keyword it contains (positives,
/// labelled with the word's first span) and with as many keywords drawn
/// without replacement from the rest of the vocabulary (negatives).
pub fn build_batch(clips: &[&SyntheticClip], vocab: &[String], lexicon: &Lexicon, min_np: usize, max_np: usize, rng: &mut impl Rng) -> Result<Batch> {
    if vocab.is_empty() {
        return Err(KwsError::Size("training vocabulary is empty".into()));
    }
    let in_vocab: BTreeSet<&str> = vocab.iter().map(String::as_str).collect();
    let pron = |w: &str, rng: &mut dyn rand::RngCore| -> Result<Option<Vec<usize>>> {
        let p = lexicon.lookup(w)?;
        let ok: Vec<&Vec<usize>> = p.variants.iter().filter(|v| v.len() >= min_np && v.len() <= max_np).collect();
        Ok(ok.choose(rng).map(|v| (*v).clone()))
    };
    let mut batch = Batch::default();
    for (ci, clip) in clips.iter().enumerate() {
        let mut seen = BTreeSet::new();
        let mut pos = Vec::new();
        for b in &clip.boundaries {
            if in_vocab.contains(b.word.as_str()) && seen.insert(b.word.as_str()) {
                if let Some(ids) = pron(&b.word, rng)? {
                    pos.push(SamplePair {
                        clip: ci,
                        keyword: b.word.clone(),
                        ids,
                        label: SampleLabel {
                            y: 1.0,
                            boundaries: Some((b.start, b.end)),
                        },
                    });
                }
            }
        }
        if pos.is_empty() {
            batch.skipped_clips += 1;
            continue;
        }
        let own: BTreeSet<&str> = clip.words.iter().map(String::as_str).collect();
        let pool: Vec<&String> = vocab.iter().filter(|w| !own.contains(w.as_str())).collect();
        let mut neg = Vec::new();
        for w in pool.choose_multiple(rng, pos.len()) {
            if let Some(ids) = pron(w, rng)? {
                neg.push(SamplePair {
                    clip: ci,
                    keyword: (*w).clone(),
                    ids,
                    label: SampleLabel { y: 0.0, boundaries: None },
                });
            }
        }
        // keep the classes balanced even if a negative had no usable variant
        pos.truncate(neg.len());
        batch.pairs.extend(pos);
        batch.pairs.extend(neg);
    }
    Ok(batch)
}

/// Adds, for a `rate` fraction of the positives, the uttered phrase around
/// the keyword (the keyword plus its neighbouring words) as a positive, and
/// the same keyword with one or both neighbours swapped for other words of
/// the batch as a negative. The negative phrase is not uttered in the clip
/// but shares the keyword with it, so the detector has to match the whole
/// query rather than any long stretch of it.
pub fn add_phrase_pairs(batch: &mut Batch, clips: &[&SyntheticClip], lexicon: &Lexicon, max_np: usize, rate: f64, rng: &mut impl Rng) -> Result<()> {
    if rate == 0.0 {
        return Ok(());
    }
    let pool: Vec<&str> = clips.iter().flat_map(|c| c.words.iter().map(String::as_str)).collect::<BTreeSet<_>>().into_iter().collect();
    let pron = |w: &str, rng: &mut ChaCha8Rng| -> Result<Vec<usize>> { Ok(lexicon.lookup(w)?.variants.choose(rng).expect("lexicon entries have a variant").clone()) };
    let mut sub = ChaCha8Rng::seed_from_u64(rng.random());
    let mut extra = Vec::new();
    for p in batch.pairs.iter().filter(|p| p.label.y == 1.0) {
        if !sub.random_bool(rate) {
            continue;
        }
        let clip = clips[p.clip];
        let Some(i) = clip.boundaries.iter().position(|b| b.word == p.keyword && Some((b.start, b.end)) == p.label.boundaries) else { continue };
        let (lo, hi) = (i.saturating_sub(1), (i + 1).min(clip.boundaries.len() - 1));
        if hi == lo {
            continue;
        }
        let words: Vec<&str> = clip.boundaries[lo..=hi].iter().map(|b| b.word.as_str()).collect();
        let mut ids = Vec::new();
        for (j, w) in words.iter().enumerate() {
            ids.extend(if lo + j == i { p.ids.clone() } else { pron(w, &mut sub)? });
        }
        // at least one neighbour is swapped
        let flanks: Vec<usize> = (0..words.len()).filter(|&j| lo + j != i).collect();
        let swap: Vec<usize> = match flanks.len() {
            1 => flanks,
            _ => match sub.random_range(0..3) {
                0 => vec![flanks[0]],
                1 => vec![flanks[1]],
                _ => flanks,
            },
        };
        let mut neg = words.clone();
        for &j in &swap {
            let Some(&w) = pool.iter().filter(|&&w| w != words[j]).collect::<Vec<_>>().choose(&mut sub) else { continue };
            neg[j] = w;
        }
        let neg_text = neg.join(" ");
        if !clip.occurrences(&neg_text).is_empty() {
            continue;
        }
        let mut neg_ids = Vec::new();
        for (j, w) in neg.iter().enumerate() {
            neg_ids.extend(if lo + j == i { p.ids.clone() } else { pron(w, &mut sub)? });
        }
        if ids.len() > max_np || neg_ids.len() > max_np {
            continue;
        }
        let (start, end) = (clip.boundaries[lo].start, clip.boundaries[hi].end);
        extra.push(SamplePair {
            clip: p.clip,
            keyword: words.join(" "),
            ids,
            label: SampleLabel {
                y: 1.0,
                boundaries: Some((start, end)),
            },
        });
        extra.push(SamplePair {
            clip: p.clip,
            keyword: neg_text,
            ids: neg_ids,
            label: SampleLabel { y: 0.0, boundaries: None },
        });
    }
    batch.pairs.extend(extra);
    Ok(())
}

/// Keyword id lists deduplicated, plus the `Pair`s indexing them.
pub fn index_pairs(pairs: &[SamplePair]) -> (Vec<Vec<usize>>, Vec<Pair>) {
    let mut kw: Vec<Vec<usize>> = Vec::new();
    let mut index: BTreeMap<&[usize], usize> = BTreeMap::new();
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        let k = *index.entry(&p.ids).or_insert_with(|| {
            kw.push(p.ids.clone());
            kw.len() - 1
        });
        out.push(Pair {
            clip: p.clip,
            keyword: k,
            label: p.label,
        });
    }
    (kw, out)
}

pub fn stream_of(clip: &SyntheticClip, m: Modality) -> &Tensor {
    match m {
        Modality::Visual => &clip.visual,
        Modality::Audio => &clip.audio,
    }
}

// ----------------------------------------------------------------- loop

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub pairs: usize,
    pub skipped_clips: usize,
    pub noised_clips: usize,
    /// Positives whose boundary mask fell back to a single output.
    pub mask_warnings: usize,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub curve: Vec<EpochLog>,
    pub best: Option<f64>,
    pub bad_epochs: usize,
    pub stopped: bool,
}

impl TrainState {
    pub fn next_epoch(&self) -> usize {
        self.curve.len()
    }
}

pub struct TrainData<'a> {
    pub clips: &'a [SyntheticClip],
    /// Keywords that may serve as positives and negatives.
    pub vocab: &'a [String],
    pub lexicon: &'a Lexicon,
}

pub struct TrainRun {
    pub state: TrainState,
    /// The last `keep` epochs' models, oldest first.
    pub snapshots: Vec<(usize, KwsNet)>,
    /// Checkpoint files still on disk, oldest first.
    pub checkpoints: Vec<PathBuf>,
}

impl TrainRun {
    pub fn losses(&self) -> Vec<f64> {
        self.state.curve.iter().map(|e| e.train_loss).collect()
    }
}

/// Deterministic split of clip indices into (train, validation).
pub fn validation_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(clip_seed(seed, 7, 0)));
    let n_val = (n as f64 * fraction).round() as usize;
    let mut val = idx[..n_val].to_vec();
    let mut tr = idx[n_val..].to_vec();
    val.sort_unstable();
    tr.sort_unstable();
    (tr, val)
}

struct StepOut {
    loss: f64,
    pairs: usize,
    warnings: usize,
}

fn run_batch(model: &mut KwsNet, inputs: &[Tensor], valid: &[usize], batch: &Batch, cfg: &TrainConfig, lr: Option<f64>) -> Result<Option<StepOut>> {
    if batch.pairs.is_empty() {
        return Ok(None);
    }
    let (kw, pairs) = index_pairs(&batch.pairs);
    let training = lr.is_some();
    let mut g = Graph::new(&model.store, training);
    let streams: Vec<StreamInput> = inputs
        .iter()
        .zip(valid)
        .map(|(x, &v)| StreamInput {
            data: g.tape.constant(x.clone()),
            valid: v,
        })
        .collect();
    let mut warnings = 0;
    let out = batch_loss(&mut g, &model.cfg, &streams, &kw, &pairs, cfg.uses_boundaries(), &mut warnings)?;
    let loss = g.tape.value(out.loss).item();
    if !loss.is_finite() {
        return Err(KwsError::Numeric(format!("loss is {loss}")));
    }
    if let Some(lr) = lr {
        let grads = g.tape.backward(out.loss);
        let pg = g.param_grads(&grads);
        let stats = std::mem::take(&mut g.bn_stats);
        drop(g);
        model.store.adam_step(&pg, lr, AdamConfig::default())?;
        update_running_stats(&mut model.store, &stats, cfg.bn_momentum)?;
    }
    Ok(Some(StepOut {
        loss,
        pairs: batch.pairs.len(),
        warnings,
    }))
}

fn valid_len(model: &KwsNet, x: &Tensor) -> usize {
    match (model.cfg.frontend, model.cfg.modality) {
        (crate::encoders::FrontendMode::ConvStack, Modality::Audio) => x.shape()[0] / 4,
        _ => x.shape()[0],
    }
}

/// Mean validation loss over fixed pairs, evaluation-mode batchnorm, no noise.
fn validation_loss(model: &mut KwsNet, data: &TrainData, val: &[usize], cfg: &TrainConfig) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(clip_seed(cfg.seed, 8, 0));
    let (mut total, mut n) = (0.0, 0);
    for chunk in val.chunks(cfg.batch_clips) {
        let clips: Vec<&SyntheticClip> = chunk.iter().map(|&i| &data.clips[i]).collect();
        let batch = build_batch(&clips, data.vocab, data.lexicon, cfg.min_np, model.cfg.max_np, &mut rng)?;
        let inputs: Vec<Tensor> = clips.iter().map(|c| stream_of(c, model.cfg.modality).clone()).collect();
        let valid: Vec<usize> = inputs.iter().map(|x| valid_len(model, x)).collect();
        if let Some(s) = run_batch(model, &inputs, &valid, &batch, cfg, None)? {
            total += s.loss * s.pairs as f64;
            n += s.pairs;
        }
    }
    Ok((n > 0).then(|| total / n as f64))
}

/// One full epoch; returns its log line.
fn run_epoch(model: &mut KwsNet, data: &TrainData, train_idx: &[usize], val_idx: &[usize], cfg: &TrainConfig, epoch: usize) -> Result<EpochLog> {
    let lr = learning_rate(cfg.stage, epoch);
    let mut rng = ChaCha8Rng::seed_from_u64(clip_seed(cfg.seed, 6, epoch as u64));
    let mut order = train_idx.to_vec();
    order.shuffle(&mut rng);
    let audio = model.cfg.modality == Modality::Audio;
    let pool: Vec<&Tensor> = if audio { train_idx.iter().map(|&i| &data.clips[i].audio).collect() } else { Vec::new() };
    let mut log = EpochLog {
        epoch,
        lr,
        train_loss: 0.0,
        val_loss: None,
        pairs: 0,
        skipped_clips: 0,
        noised_clips: 0,
        mask_warnings: 0,
    };
    let mut total = 0.0;
    for chunk in order.chunks(cfg.batch_clips) {
        let clips: Vec<&SyntheticClip> = chunk.iter().map(|&i| &data.clips[i]).collect();
        let mut batch = build_batch(&clips, data.vocab, data.lexicon, cfg.min_np, model.cfg.max_np, &mut rng)?;
        add_phrase_pairs(&mut batch, &clips, data.lexicon, model.cfg.max_np, cfg.phrase_rate, &mut rng)?;
        log.skipped_clips += batch.skipped_clips;
        let mut inputs = Vec::with_capacity(clips.len());
        for (&i, c) in chunk.iter().zip(&clips) {
            if audio {
                let own = train_idx.binary_search(&i).ok();
                let (x, hit) = cfg.noise.apply(&c.audio, &pool, own, &mut rng)?;
                log.noised_clips += hit as usize;
                inputs.push(x);
            } else {
                inputs.push(c.visual.clone());
            }
        }
        let valid: Vec<usize> = inputs.iter().map(|x| valid_len(model, x)).collect();
        if let Some(s) = run_batch(model, &inputs, &valid, &batch, cfg, Some(lr))? {
            total += s.loss * s.pairs as f64;
            log.pairs += s.pairs;
            log.mask_warnings += s.warnings;
        }
    }
    if log.pairs == 0 {
        return Err(KwsError::Size("epoch produced no training pairs".into()));
    }
    log.train_loss = total / log.pairs as f64;
    log.val_loss = validation_loss(model, data, val_idx, cfg)?;
    Ok(log)
}

/// Trains `model` in place until `cfg.epochs` epochs have run in total or
/// validation loss stalls for `cfg.patience` epochs. `resume` continues a
/// previous run (its model state must already be in `model`). With `out`,
/// a checkpoint and `loss.csv` are written after every epoch.
///
/// A non-finite loss aborts with a numeric error after restoring the model
/// to the last completed epoch.
pub fn train(model: &mut KwsNet, data: &TrainData, cfg: &TrainConfig, out: Option<&Path>, resume: Option<TrainState>, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainRun> {
    cfg.validate()?;
    if data.vocab.is_empty() || data.clips.is_empty() {
        return Err(KwsError::Size("training needs clips and a keyword vocabulary".into()));
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    let (train_idx, val_idx) = validation_split(data.clips.len(), cfg.val_fraction, cfg.seed);
    let mut state = resume.unwrap_or_default();
    let mut run = TrainRun {
        state: TrainState::default(),
        snapshots: Vec::new(),
        checkpoints: Vec::new(),
    };
    let mut epoch = state.next_epoch();
    while epoch < cfg.epochs && !state.stopped {
        let before = model.clone();
        let log = match run_epoch(model, data, &train_idx, &val_idx, cfg, epoch) {
            Ok(l) => l,
            Err(e @ KwsError::Numeric(_)) => {
                *model = before;
                return Err(KwsError::Numeric(format!("training diverged in epoch {epoch}: {e}")));
            }
            Err(e) => return Err(e),
        };
        let score = log.val_loss.unwrap_or(log.train_loss);
        if state.best.is_none_or(|b| score < b) {
            state.best = Some(score);
            state.bad_epochs = 0;
        } else {
            state.bad_epochs += 1;
        }
        state.stopped = state.bad_epochs >= cfg.patience;
        state.curve.push(log.clone());
        on_epoch(&log);

        run.snapshots.push((epoch, model.clone()));
        if run.snapshots.len() > cfg.keep {
            run.snapshots.remove(0);
        }
        if let Some(dir) = out {
            let path = dir.join(format!("ckpt_{epoch:03}.kwt"));
            let ck = Checkpoint {
                epoch,
                val_loss: log.val_loss,
                model: model.clone(),
                state: state.clone(),
            };
            save_checkpoint(&path, &ck)?;
            run.checkpoints.push(path);
            if run.checkpoints.len() > cfg.keep {
                let old = run.checkpoints.remove(0);
                std::fs::remove_file(&old)?;
                std::fs::remove_file(crate::kwsnet::sidecar_path(&old))?;
            }
            std::fs::write(dir.join("loss.csv"), loss_csv(&state.curve))?;
        }
        epoch += 1;
    }
    run.state = state;
    Ok(run)
}

pub fn loss_csv(curve: &[EpochLog]) -> String {
    let mut s = String::from("epoch,lr,train_loss,val_loss\n");
    for e in curve {
        let v = e.val_loss.map(|v| v.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{},{}\n", e.epoch, e.lr, e.train_loss, v));
    }
    s
}

// ----------------------------------------------------------- checkpoints

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub epoch: usize,
    pub val_loss: Option<f64>,
    /// Parameters, buffers and Adam moments.
    pub model: KwsNet,
    pub state: TrainState,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    epoch: usize,
    val_loss: Option<f64>,
    digest: String,
    config: ModelConfig,
    state: TrainState,
}

/// Writes the tensors (`param/`, `buffer/`, `adam.m/`, `adam.v/`,
/// `adam.step/` prefixes) to `path` and the metadata to `path.json`.
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let s = &ck.model.store;
    let mut ts: Vec<(String, Tensor)> = Vec::new();
    for (n, t) in s.params() {
        ts.push((format!("param/{n}"), t.clone()));
    }
    for (n, t) in s.buffers() {
        ts.push((format!("buffer/{n}"), t.clone()));
    }
    for (n, _) in s.params() {
        let a = s.adam_state(n).expect("every param has adam state");
        ts.push((format!("adam.m/{n}"), a.m.clone()));
        ts.push((format!("adam.v/{n}"), a.v.clone()));
        ts.push((format!("adam.step/{n}"), Tensor::scalar(a.step as f64)));
    }
    container::save(path, &ts)?;
    let meta = CheckpointMeta {
        epoch: ck.epoch,
        val_loss: ck.val_loss,
        digest: ck.model.cfg.digest(),
        config: ck.model.cfg.clone(),
        state: ck.state.clone(),
    };
    std::fs::write(crate::kwsnet::sidecar_path(path), serde_json::to_string_pretty(&meta).expect("meta serializes"))?;
    Ok(())
}

/// Reads a checkpoint. With `expected`, the stored config digest must match.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let side = crate::kwsnet::sidecar_path(path);
    if !path.exists() || !side.exists() {
        return Err(KwsError::Missing(path.display().to_string()));
    }
    let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(&side)?).map_err(|e| KwsError::format(&side, e.to_string()))?;
    if meta.digest != meta.config.digest() {
        return Err(KwsError::format(&side, "digest does not match the stored config"));
    }
    if let Some(cfg) = expected {
        if cfg.digest() != meta.digest {
            return Err(KwsError::ConfigMismatch {
                expected: cfg.digest(),
                found: meta.digest,
            });
        }
    }
    let ts = container::load(path)?;
    let mut model = KwsNet::new(meta.config)?;
    let names: Vec<String> = model.store.names().map(str::to_string).collect();
    for n in &names {
        let t = container::find(&ts, &format!("param/{n}"), path)?;
        let dst = model.store.get_mut(n)?;
        if dst.shape() != t.shape() {
            return Err(KwsError::format(path, format!("`{n}` has shape {:?}, expected {:?}", t.shape(), dst.shape())));
        }
        *dst = t.clone();
        let m = container::find(&ts, &format!("adam.m/{n}"), path)?.clone();
        let v = container::find(&ts, &format!("adam.v/{n}"), path)?.clone();
        let step = container::find(&ts, &format!("adam.step/{n}"), path)?.item() as u64;
        let a = model.store.adam_state_mut(n).expect("every param has adam state");
        if m.shape() != a.m.shape() || v.shape() != a.v.shape() {
            return Err(KwsError::format(path, format!("adam moments of `{n}` have the wrong shape")));
        }
        a.m = m;
        a.v = v;
        a.step = step;
    }
    let bufs: Vec<String> = model.store.buffers().map(|(n, _)| n.to_string()).collect();
    for n in bufs {
        *model.store.buffer_mut(&n)? = container::find(&ts, &format!("buffer/{n}"), path)?.clone();
    }
    Ok(Checkpoint {
        epoch: meta.epoch,
        val_loss: meta.val_loss,
        model,
        state: meta.state,
    })
}

/// Checkpoint files in a directory, by epoch.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(KwsError::Missing(dir.display().to_string()));
    }
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("ckpt_") && n.ends_with(".kwt"))
        })
        .collect();
    v.sort();
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_halves() {
        assert_eq!(learning_rate(Stage::Pretrain, 0), 1e-3);
        assert_eq!(learning_rate(Stage::Pretrain, 9), 1e-3);
        assert_eq!(learning_rate(Stage::Pretrain, 10), 5e-4);
        assert_eq!(learning_rate(Stage::Pretrain, 25), 2.5e-4);
        assert_eq!(learning_rate(Stage::Finetune, 45), 2.5e-5);
    }

    #[test]
    fn kv_round_trip_and_unknown_keys() {
        let mut c = RunConfig::default();
        c.set("train.noise.snr_db", "-5").unwrap();
        c.set("model.shortcut", "false").unwrap();
        c.set("model.modality", "audio").unwrap();
        c.set("train.stage", "pretrain").unwrap();
        let back = RunConfig::from_kv(&c.to_kv()).unwrap();
        assert_eq!(back, c);
        assert!(c.set("train.nope", "1").is_err());
        assert!(c.set("train.epochs", "many").is_err());
        assert!(c.set("model.modality", "smell").is_err());
    }

    #[test]
    fn validation_split_is_disjoint_and_seeded() {
        let (a, b) = validation_split(50, 0.1, 3);
        assert_eq!(b.len(), 5);
        assert_eq!(a.len(), 45);
        assert!(a.iter().all(|i| !b.contains(i)));
        assert_eq!(validation_split(50, 0.1, 3), (a, b));
    }
}
