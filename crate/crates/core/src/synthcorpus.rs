//! Synthetic audio-visual corpora with planted keywords.
//!
//! Each word is expanded to its phonemes, each phoneme held for a few
//! frames. The visual stream emits one embedding per viseme class and the
//! audio stream one per (stress-free) phoneme, both with Gaussian noise, so
//! the visual stream carries strictly less information than the audio.
//! Word boundaries are exact by construction.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{KwsError, Result};
use crate::gradcore::{container, Tensor};
use crate::par;
use crate::pronlex::{strip_stress, Lexicon, PhonemeVocab};

/// Coarse viseme classes over stress-free ARPAbet symbols.
pub const STANDARD_GROUPS: [&[&str]; 12] = [
    &["B", "P", "M"],
    &["F", "V"],
    &["D", "T", "S", "Z", "N", "L"],
    &["K", "G", "NG", "HH"],
    &["CH", "JH", "SH", "ZH"],
    &["TH", "DH"],
    &["R", "W"],
    &["AA", "AE", "AH", "AY", "AW"],
    &["EH", "EY", "ER"],
    &["IH", "IY", "Y"],
    &["AO", "OW", "OY"],
    &["UH", "UW"],
];

const UNMAPPED: usize = usize::MAX;

/// Many-to-one relabeling of phoneme ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VisemeMap {
    class: Vec<usize>,
    count: usize,
}

impl VisemeMap {
    /// The standard viseme classes. Every symbol of `vocab` must belong to one.
    pub fn standard(vocab: &PhonemeVocab) -> Result<Self> {
        let mut class = vec![UNMAPPED; vocab.len()];
        for (i, sym) in vocab.symbols().iter().enumerate() {
            let base = strip_stress(sym);
            let g = STANDARD_GROUPS
                .iter()
                .position(|g| g.contains(&base))
                .ok_or(KwsError::Unmapped(i + 1))?;
            class[i + 1] = g;
        }
        Ok(VisemeMap {
            class,
            count: STANDARD_GROUPS.len(),
        })
    }

    /// Every phoneme is its own class; ids are preserved.
    pub fn identity(vocab: &PhonemeVocab) -> Self {
        let mut class: Vec<usize> = (0..vocab.len()).collect();
        class[0] = UNMAPPED;
        VisemeMap {
            class,
            count: vocab.len(),
        }
    }

    /// One class per stress-free symbol: the phoneme identity the audio
    /// stream carries.
    pub fn base_phonemes(vocab: &PhonemeVocab) -> Self {
        let bases: BTreeSet<&str> = vocab.symbols().iter().map(|s| strip_stress(s)).collect();
        let bases: Vec<&str> = bases.into_iter().collect();
        let mut class = vec![UNMAPPED; vocab.len()];
        for (i, sym) in vocab.symbols().iter().enumerate() {
            class[i + 1] = bases.binary_search(&strip_stress(sym)).expect("base collected above");
        }
        VisemeMap {
            class,
            count: bases.len(),
        }
    }

    /// Number of classes (upper bound on class ids).
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn class_of(&self, phoneme: usize) -> Result<usize> {
        match self.class.get(phoneme) {
            Some(&c) if c != UNMAPPED => Ok(c),
            _ => Err(KwsError::Unmapped(phoneme)),
        }
    }

    /// Relabels a phoneme track; timing is untouched.
    pub fn phoneme_to_viseme(&self, track: &[usize]) -> Result<Vec<usize>> {
        track.iter().map(|&p| self.class_of(p)).collect()
    }

    /// Size of the largest class.
    pub fn largest_group(&self) -> usize {
        let mut sizes = vec![0usize; self.count];
        for &c in self.class.iter().filter(|&&c| c != UNMAPPED) {
            sizes[c] += 1;
        }
        sizes.into_iter().max().unwrap_or(0)
    }
}

/// Per-phoneme duration: uniform over `mean ± jitter`, at least one frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub mean: usize,
    pub jitter: usize,
}

impl Default for Timing {
    fn default() -> Self {
        Timing { mean: 3, jitter: 1 }
    }
}

impl Timing {
    fn draw(&self, rng: &mut impl Rng) -> usize {
        let lo = self.mean.saturating_sub(self.jitter).max(1);
        let hi = (self.mean + self.jitter).max(lo);
        rng.random_range(lo..=hi)
    }
}

/// Emission tables for both streams plus the noise model.
#[derive(Clone, Debug)]
pub struct Emitter {
    pub visemes: VisemeMap,
    pub phones: VisemeMap,
    /// `[visemes, d_syn]`
    pub visual_table: Tensor,
    /// `[base phonemes, d_syn]`
    pub audio_table: Tensor,
    pub sigma: f64,
    /// Blend each phoneme's edge frames a quarter of the way toward the
    /// neighbouring phoneme.
    pub crossfade: bool,
}

impl Emitter {
    pub fn new(vocab: &PhonemeVocab, d_syn: usize, sigma: f64, crossfade: bool, seed: u64) -> Result<Self> {
        Self::with_map(VisemeMap::standard(vocab)?, vocab, d_syn, sigma, crossfade, seed)
    }

    pub fn with_map(visemes: VisemeMap, vocab: &PhonemeVocab, d_syn: usize, sigma: f64, crossfade: bool, seed: u64) -> Result<Self> {
        if d_syn == 0 || !(sigma >= 0.0) {
            return Err(KwsError::Config("d_syn must be positive and sigma non-negative".into()));
        }
        let phones = VisemeMap::base_phonemes(vocab);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut table = |rows: usize| {
            let data = (0..rows * d_syn).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            Tensor::new(&[rows, d_syn], data).expect("shape matches")
        };
        let visual_table = table(visemes.count());
        let audio_table = table(phones.count());
        Ok(Emitter {
            visemes,
            phones,
            visual_table,
            audio_table,
            sigma,
            crossfade,
        })
    }

    pub fn d_syn(&self) -> usize {
        self.visual_table.shape()[1]
    }

    fn emit(&self, table: &Tensor, classes: &[usize], spans: &[PhonemeSpan], t_v: usize, rng: &mut impl Rng) -> Tensor {
        let d = self.d_syn();
        let mut out = vec![0.0; t_v * d];
        for (s, &c) in spans.iter().zip(classes) {
            for t in s.start..s.end {
                out[t * d..(t + 1) * d].copy_from_slice(table.row(c));
            }
        }
        if self.crossfade {
            let clean = out.clone();
            for (i, s) in spans.iter().enumerate().skip(1) {
                let b = s.start;
                let (prev, next) = (spans[i - 1].start, s.start);
                // last frame of the previous phoneme and first of this one
                for j in 0..d {
                    out[(b - 1) * d + j] = 0.75 * clean[(b - 1) * d + j] + 0.25 * clean[next * d + j];
                    out[b * d + j] = 0.75 * clean[b * d + j] + 0.25 * clean[prev * d + j];
                }
            }
        }
        if self.sigma > 0.0 {
            for v in &mut out {
                *v += self.sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Tensor::new(&[t_v, d], out).expect("shape matches")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PhonemeSpan {
    pub id: usize,
    pub start: usize,
    /// Exclusive.
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordSpan {
    pub word: String,
    pub start: usize,
    /// Exclusive.
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    pub id: String,
    pub words: Vec<String>,
    /// Empty for clips read back from disk.
    pub phonemes: Vec<PhonemeSpan>,
    pub boundaries: Vec<WordSpan>,
    /// `[t_v, d_syn]`
    pub visual: Tensor,
    /// `[t_v, d_syn]`
    pub audio: Tensor,
    pub seed: u64,
}

impl SyntheticClip {
    pub fn t_v(&self) -> usize {
        self.visual.shape()[0]
    }

    pub fn transcript(&self) -> String {
        self.words.join(" ")
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.iter().any(|w| w == word)
    }

    /// Spans of every occurrence of `query` (one word or a space-separated
    /// phrase) as consecutive words.
    pub fn occurrences(&self, query: &str) -> Vec<(usize, usize)> {
        let q: Vec<&str> = query.split_whitespace().collect();
        if q.is_empty() || q.len() > self.boundaries.len() {
            return Vec::new();
        }
        self.boundaries
            .windows(q.len())
            .filter(|w| w.iter().zip(&q).all(|(b, q)| b.word == *q))
            .map(|w| (w[0].start, w[w.len() - 1].end))
            .collect()
    }
}

/// Generates one clip. The pronunciation variant of each word, every phoneme
/// duration and the emission noise are drawn from `seed`.
pub fn synth_clip<S: AsRef<str>>(id: &str, transcript: &[S], lexicon: &Lexicon, timing: Timing, emitter: &Emitter, seed: u64) -> Result<SyntheticClip> {
    if timing.mean == 0 {
        return Err(KwsError::Config("mean phoneme duration must be at least one frame".into()));
    }
    if transcript.is_empty() {
        return Err(KwsError::Generation(format!("clip {id} has an empty transcript")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut phonemes = Vec::new();
    let mut boundaries = Vec::with_capacity(transcript.len());
    let mut t = 0;
    for w in transcript {
        let p = lexicon.lookup(w.as_ref())?;
        let variant = p.variants.choose(&mut rng).expect("lexicon entries have a variant");
        let start = t;
        for &ph in variant {
            let dur = timing.draw(&mut rng);
            phonemes.push(PhonemeSpan { id: ph, start: t, end: t + dur });
            t += dur;
        }
        boundaries.push(WordSpan {
            word: p.word.clone(),
            start,
            end: t,
        });
    }
    let ids: Vec<usize> = phonemes.iter().map(|s| s.id).collect();
    let vis = emitter.visemes.phoneme_to_viseme(&ids)?;
    let aud = emitter.phones.phoneme_to_viseme(&ids)?;
    let visual = emitter.emit(&emitter.visual_table, &vis, &phonemes, t, &mut rng);
    let audio = emitter.emit(&emitter.audio_table, &aud, &phonemes, t, &mut rng);
    Ok(SyntheticClip {
        id: id.to_string(),
        words: boundaries.iter().map(|b| b.word.clone()).collect(),
        phonemes,
        boundaries,
        visual,
        audio,
        seed,
    })
}

// ---------------------------------------------------------------- noise

pub fn mean_power(x: &Tensor) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.data().iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// `signal + α·noise` with α chosen so the power ratio is exactly `snr_db`.
pub fn mix_noise_at_snr(signal: &Tensor, noise: &Tensor, snr_db: f64) -> Result<Tensor> {
    if signal.shape() != noise.shape() {
        return Err(KwsError::dim("mix_noise_at_snr", signal.shape(), noise.shape()));
    }
    let pn = mean_power(noise);
    if !(pn > 0.0) {
        return Err(KwsError::Numeric("noise has zero power".into()));
    }
    let ps = mean_power(signal);
    let alpha = (ps / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    let data = signal.data().iter().zip(noise.data()).map(|(s, n)| s + alpha * n).collect();
    Tensor::new(signal.shape(), data)
}

/// Sum of several streams, each tiled cyclically to `len` frames.
pub fn babble(streams: &[&Tensor], len: usize) -> Result<Tensor> {
    let d = streams.first().map(|s| s.shape()[1]).ok_or_else(|| KwsError::Size("babble needs at least one talker".into()))?;
    let mut out = vec![0.0; len * d];
    for s in streams {
        if s.shape()[1] != d || s.shape()[0] == 0 {
            return Err(KwsError::dim("babble", s.shape(), &[1, d]));
        }
        let n = s.shape()[0];
        for t in 0..len {
            for (o, v) in out[t * d..(t + 1) * d].iter_mut().zip(s.row(t % n)) {
                *o += v;
            }
        }
    }
    Tensor::new(&[len, d], out)
}

/// Babble augmentation of the audio stream.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Talkers summed into the babble.
    pub k: usize,
    pub snr_db: f64,
    pub apply_prob: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            k: 4,
            snr_db: 0.0,
            apply_prob: 0.5,
        }
    }
}

impl NoiseSpec {
    pub fn off() -> Self {
        NoiseSpec {
            apply_prob: 0.0,
            ..Default::default()
        }
    }

    pub fn always(snr_db: f64) -> Self {
        NoiseSpec {
            snr_db,
            apply_prob: 1.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.apply_prob) {
            return Err(KwsError::Config(format!("apply_prob {} outside [0, 1]", self.apply_prob)));
        }
        if self.k == 0 && self.apply_prob > 0.0 {
            return Err(KwsError::Config("babble needs k >= 1 talkers".into()));
        }
        Ok(())
    }

    /// With probability `apply_prob`, mixes babble from `k` streams of
    /// `pool` (never index `own`) into `audio`. Returns whether noise was added.
    pub fn apply(&self, audio: &Tensor, pool: &[&Tensor], own: Option<usize>, rng: &mut impl Rng) -> Result<(Tensor, bool)> {
        self.validate()?;
        if self.apply_prob == 0.0 || !rng.random_bool(self.apply_prob) {
            return Ok((audio.clone(), false));
        }
        let others: Vec<usize> = (0..pool.len()).filter(|&i| Some(i) != own).collect();
        if others.len() < self.k {
            return Err(KwsError::Size(format!("babble needs {} other clips, pool has {}", self.k, others.len())));
        }
        let talkers: Vec<&Tensor> = others.choose_multiple(rng, self.k).map(|&i| pool[i]).collect();
        let noise = babble(&talkers, audio.shape()[0])?;
        Ok((mix_noise_at_snr(audio, &noise, self.snr_db)?, true))
    }
}

// ---------------------------------------------------------------- corpus

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub train_keywords: usize,
    /// Held out from training, used for model selection.
    pub val_keywords: usize,
    pub test_keywords: usize,
    /// Unseen words with `short_np.0 ..= short_np.1` phonemes planted next to
    /// test keywords, for length-controlled evaluation.
    pub test_short: usize,
    pub min_np: usize,
    pub short_np: (usize, usize),
    /// Longest pronunciation allowed for any word.
    pub max_np: usize,
}

impl Default for VocabSpec {
    fn default() -> Self {
        VocabSpec {
            train_keywords: 200,
            val_keywords: 20,
            test_keywords: 50,
            test_short: 25,
            min_np: 6,
            short_np: (4, 5),
            max_np: 12,
        }
    }
}

/// Disjoint word lists the corpus draws from.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct VocabPlan {
    pub train_keywords: Vec<String>,
    pub val_keywords: Vec<String>,
    pub test_keywords: Vec<String>,
    pub test_short: Vec<String>,
    /// Short words (below `min_np`) used as context in training clips.
    pub train_fillers: Vec<String>,
    /// Shorter context words (below `short_np.0`) for held-out clips.
    pub eval_fillers: Vec<String>,
}

impl VocabPlan {
    /// Every word that must never occur in a training clip.
    pub fn held_out(&self) -> BTreeSet<&str> {
        self.val_keywords
            .iter()
            .chain(&self.test_keywords)
            .chain(&self.test_short)
            .map(String::as_str)
            .collect()
    }
}

fn max_np_of(lexicon: &Lexicon, word: &str) -> usize {
    lexicon.get(word).map(|p| p.variants.iter().map(Vec::len).max().unwrap_or(0)).unwrap_or(0)
}

/// Draws the keyword and filler lists from the lexicon. Only purely
/// alphabetic words whose variants all fit the length class are used.
pub fn plan_vocabulary(lexicon: &Lexicon, spec: &VocabSpec, seed: u64) -> Result<VocabPlan> {
    if spec.min_np == 0 || spec.short_np.0 > spec.short_np.1 || spec.short_np.1 >= spec.min_np {
        return Err(KwsError::Config("need 1 <= short_np.0 <= short_np.1 < min_np".into()));
    }
    let mut long = Vec::new();
    let mut short = Vec::new();
    let mut filler = Vec::new();
    for p in lexicon.entries() {
        if !p.word.chars().all(|c| c.is_ascii_alphabetic()) {
            continue;
        }
        let (lo, hi) = (p.min_np(), max_np_of(lexicon, &p.word));
        if hi > spec.max_np {
            continue;
        }
        if lo >= spec.min_np {
            long.push(p.word.clone());
        } else if lo >= spec.short_np.0 && hi <= spec.short_np.1 {
            short.push(p.word.clone());
        } else if hi < spec.short_np.0 && lo >= 2 {
            filler.push(p.word.clone());
        }
    }
    let need = spec.train_keywords + spec.val_keywords + spec.test_keywords;
    if need > long.len() {
        return Err(KwsError::Generation(format!(
            "requested {need} keywords with n_p >= {} but the lexicon has {}",
            spec.min_np,
            long.len()
        )));
    }
    if spec.test_short > short.len() {
        return Err(KwsError::Generation(format!("requested {} short test words, lexicon has {}", spec.test_short, short.len())));
    }
    if filler.is_empty() {
        return Err(KwsError::Generation("lexicon has no filler words".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    long.shuffle(&mut rng);
    short.shuffle(&mut rng);
    let take = |v: &mut Vec<String>, n: usize| {
        let mut out: Vec<String> = v.drain(..n).collect();
        out.sort();
        out
    };
    let test_keywords = take(&mut long, spec.test_keywords);
    let val_keywords = take(&mut long, spec.val_keywords);
    let train_keywords = take(&mut long, spec.train_keywords);
    let test_short = take(&mut short, spec.test_short);
    let mut train_fillers: Vec<String> = short.into_iter().chain(filler.iter().cloned()).collect();
    train_fillers.sort();
    filler.sort();
    Ok(VocabPlan {
        train_keywords,
        val_keywords,
        test_keywords,
        test_short,
        train_fillers,
        eval_fillers: filler,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    /// Single-word clips of training keywords.
    pub pretrain_clips: usize,
    pub train_clips: usize,
    pub val_clips: usize,
    pub test_clips: usize,
    /// Pairs of viseme-identical words, each planted in its own clip.
    pub probe_pairs: usize,
    /// Context words on each side of the planted keyword.
    pub context: usize,
    /// Probability that a test clip's context word is a short test word.
    pub short_rate: f64,
    pub timing: Timing,
    pub d_syn: usize,
    pub sigma: f64,
    pub crossfade: bool,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            pretrain_clips: 1000,
            train_clips: 2000,
            val_clips: 100,
            test_clips: 200,
            probe_pairs: 40,
            context: 1,
            short_rate: 0.5,
            timing: Timing::default(),
            d_syn: 32,
            sigma: 0.5,
            crossfade: false,
        }
    }
}

/// Two words whose viseme sequences are identical, planted in otherwise
/// identical noiseless clips.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbePair {
    pub word: String,
    pub sibling: String,
    pub clip: SyntheticClip,
    pub sibling_clip: SyntheticClip,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub vocab: VocabPlan,
    pub spec: CorpusSpec,
    pub seed: u64,
    pub pretrain: Vec<SyntheticClip>,
    pub train: Vec<SyntheticClip>,
    pub val: Vec<SyntheticClip>,
    pub test: Vec<SyntheticClip>,
    pub probes: Vec<ProbePair>,
}

pub const SPLITS: [&str; 4] = ["pretrain", "train", "val", "test"];

impl Corpus {
    pub fn split(&self, name: &str) -> Option<&[SyntheticClip]> {
        match name {
            "pretrain" => Some(&self.pretrain),
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    pub fn total_frames(&self) -> usize {
        SPLITS.iter().flat_map(|s| self.split(s).unwrap()).map(SyntheticClip::t_v).sum()
    }
}

/// Seed of clip `index` in split `tag`: a splitmix64 finalizer over the
/// corpus seed, the split and the index.
pub fn clip_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[allow(clippy::too_many_arguments)]
fn planted_transcripts(
    n: usize,
    centers: &[String],
    cycle: bool,
    context: usize,
    fillers: &[String],
    extra: &[String],
    extra_rate: f64,
    rng: &mut impl Rng,
) -> Vec<Vec<String>> {
    let side = |rng: &mut ChaCha8Rng| -> String {
        if !extra.is_empty() && rng.random_bool(extra_rate) {
            extra.choose(rng).unwrap().clone()
        } else {
            fillers.choose(rng).unwrap().clone()
        }
    };
    let mut local = ChaCha8Rng::seed_from_u64(rng.random());
    (0..n)
        .map(|i| {
            let center = if cycle { centers[i % centers.len()].clone() } else { centers.choose(&mut local).unwrap().clone() };
            let mut words: Vec<String> = (0..context).map(|_| side(&mut local)).collect();
            words.push(center);
            words.extend((0..context).map(|_| side(&mut local)));
            words
        })
        .collect()
}

fn synth_split(prefix: &str, tag: u64, transcripts: &[Vec<String>], lexicon: &Lexicon, spec: &CorpusSpec, emitter: &Emitter, seed: u64) -> Result<Vec<SyntheticClip>> {
    par::map_range(transcripts.len(), |i| {
        let id = format!("{prefix}{i:05}");
        synth_clip(&id, &transcripts[i], lexicon, spec.timing, emitter, clip_seed(seed, tag, i as u64))
    })
    .into_iter()
    .collect()
}

/// Viseme-identical pairs of single-pronunciation words outside `exclude`,
/// fewest differing phonemes first.
pub fn confusable_pairs(lexicon: &Lexicon, map: &VisemeMap, min_np: usize, exclude: &BTreeSet<&str>) -> Result<Vec<(String, String)>> {
    use std::collections::BTreeMap;
    let mut by_visemes: BTreeMap<Vec<usize>, Vec<(&str, &[usize])>> = BTreeMap::new();
    for p in lexicon.entries() {
        if p.variants.len() != 1 || p.variants[0].len() < min_np || exclude.contains(p.word.as_str()) || !p.word.chars().all(|c| c.is_ascii_alphabetic()) {
            continue;
        }
        let v = &p.variants[0];
        by_visemes.entry(map.phoneme_to_viseme(v)?).or_default().push((&p.word, v));
    }
    let mut pairs = Vec::new();
    for group in by_visemes.values() {
        for (i, a) in group.iter().enumerate() {
            for b in &group[i + 1..] {
                let diff = a.1.iter().zip(b.1).filter(|(x, y)| strip_stress_id(lexicon, **x) != strip_stress_id(lexicon, **y)).count();
                if diff > 0 {
                    pairs.push((diff, a.0.to_string(), b.0.to_string()));
                }
            }
        }
    }
    pairs.sort();
    Ok(pairs.into_iter().map(|(_, a, b)| (a, b)).collect())
}

fn strip_stress_id(lexicon: &Lexicon, id: usize) -> &str {
    lexicon.vocab().symbol(id).map(strip_stress).unwrap_or("")
}

/// Generates every split of a corpus. Clips are pure functions of
/// `(spec, seed, split, index)`.
pub fn build_corpus(lexicon: &Lexicon, vocab: &VocabPlan, spec: &CorpusSpec, seed: u64) -> Result<Corpus> {
    let held = vocab.held_out();
    if vocab.train_keywords.iter().chain(&vocab.train_fillers).any(|w| held.contains(w.as_str())) {
        return Err(KwsError::Generation("training and held-out vocabularies overlap".into()));
    }
    if (spec.train_clips > 0 || spec.pretrain_clips > 0) && vocab.train_keywords.is_empty() {
        return Err(KwsError::Generation("training clips requested without training keywords".into()));
    }
    if spec.val_clips > 0 && vocab.val_keywords.is_empty() {
        return Err(KwsError::Generation("validation clips requested without validation keywords".into()));
    }
    if spec.context > 0 && (vocab.train_fillers.is_empty() || vocab.eval_fillers.is_empty()) {
        return Err(KwsError::Generation("context words requested without fillers".into()));
    }
    let emitter = Emitter::new(lexicon.vocab(), spec.d_syn, spec.sigma, spec.crossfade, clip_seed(seed, 99, 0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let pre_t = planted_transcripts(spec.pretrain_clips, &vocab.train_keywords, false, 0, &[], &[], 0.0, &mut rng);
    let train_t = planted_transcripts(spec.train_clips, &vocab.train_keywords, false, spec.context, &vocab.train_fillers, &[], 0.0, &mut rng);
    let val_t = planted_transcripts(spec.val_clips, &vocab.val_keywords, true, spec.context, &vocab.eval_fillers, &[], 0.0, &mut rng);
    // zero test keywords: nothing to plant, so no test clips
    let n_test = if vocab.test_keywords.is_empty() { 0 } else { spec.test_clips };
    let test_t = planted_transcripts(n_test, &vocab.test_keywords, true, spec.context, &vocab.eval_fillers, &vocab.test_short, spec.short_rate, &mut rng);

    let pretrain = synth_split("pre", 1, &pre_t, lexicon, spec, &emitter, seed)?;
    let train = synth_split("tr", 2, &train_t, lexicon, spec, &emitter, seed)?;
    let val = synth_split("va", 3, &val_t, lexicon, spec, &emitter, seed)?;
    let test = synth_split("te", 4, &test_t, lexicon, spec, &emitter, seed)?;

    let probes = if spec.probe_pairs > 0 {
        let mut exclude = held.clone();
        exclude.extend(vocab.train_keywords.iter().map(String::as_str));
        let mut cands = confusable_pairs(lexicon, &emitter.visemes, 4, &exclude)?;
        // one pair per word keeps probes independent
        let mut used = BTreeSet::new();
        cands.retain(|(a, b)| used.insert(a.clone()) & used.insert(b.clone()));
        if cands.len() < spec.probe_pairs {
            return Err(KwsError::Generation(format!("requested {} probe pairs, lexicon yields {}", spec.probe_pairs, cands.len())));
        }
        cands.shuffle(&mut rng);
        cands.truncate(spec.probe_pairs);
        cands.sort();
        let quiet = Emitter { sigma: 0.0, ..emitter.clone() };
        let mut probes = Vec::with_capacity(cands.len());
        for (i, (a, b)) in cands.into_iter().enumerate() {
            let ctx = planted_transcripts(1, &[String::new()], true, spec.context, &vocab.eval_fillers, &[], 0.0, &mut rng)
                .pop()
                .unwrap();
            let with = |w: &str| -> Vec<String> { ctx.iter().map(|c| if c.is_empty() { w.to_string() } else { c.clone() }).collect() };
            let s = clip_seed(seed, 5, i as u64);
            probes.push(ProbePair {
                clip: synth_clip(&format!("pr{i:04}a"), &with(&a), lexicon, spec.timing, &quiet, s)?,
                sibling_clip: synth_clip(&format!("pr{i:04}b"), &with(&b), lexicon, spec.timing, &quiet, s)?,
                word: a,
                sibling: b,
            });
        }
        probes
    } else {
        Vec::new()
    };

    let corpus = Corpus {
        vocab: vocab.clone(),
        spec: spec.clone(),
        seed,
        pretrain,
        train,
        val,
        test,
        probes,
    };
    verify_corpus(&corpus)?;
    Ok(corpus)
}

/// Transcript scans: training clips avoid held-out words, every test clip
/// carries a test keyword, boundaries tile each clip.
pub fn verify_corpus(c: &Corpus) -> Result<()> {
    let held = c.vocab.held_out();
    for clip in c.pretrain.iter().chain(&c.train) {
        if let Some(w) = clip.words.iter().find(|w| held.contains(w.as_str())) {
            return Err(KwsError::Generation(format!("training clip {} contains held-out word `{w}`", clip.id)));
        }
    }
    let test: BTreeSet<&str> = c.vocab.test_keywords.iter().map(String::as_str).collect();
    for clip in &c.test {
        if !clip.words.iter().any(|w| test.contains(w.as_str())) {
            return Err(KwsError::Generation(format!("test clip {} has no test keyword", clip.id)));
        }
    }
    for clip in SPLITS.iter().flat_map(|s| c.split(s).unwrap()) {
        let mut t = 0;
        for b in &clip.boundaries {
            if b.start != t || b.end <= b.start {
                return Err(KwsError::Generation(format!("clip {} boundaries do not tile", clip.id)));
            }
            t = b.end;
        }
        if t != clip.t_v() || clip.audio.shape() != clip.visual.shape() {
            return Err(KwsError::Generation(format!("clip {} streams and boundaries disagree", clip.id)));
        }
    }
    Ok(())
}

// ------------------------------------------------------------------- io

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub clip_id: String,
    /// Relative to the manifest's directory.
    pub feature_path: String,
    pub words: Vec<String>,
    pub boundaries: Vec<WordSpan>,
}

pub fn format_manifest(records: &[ManifestRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let b: Vec<String> = r.boundaries.iter().map(|b| format!("{}:{}:{}", b.word, b.start, b.end)).collect();
        let _ = writeln!(out, "{}\t{}\t{}\t{}", r.clip_id, r.feature_path, r.words.join(" "), b.join(","));
    }
    out
}

pub fn parse_manifest(text: &str, origin: &Path) -> Result<Vec<ManifestRecord>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |why: &str| KwsError::format(origin, format!("line {}: {why}", n + 1));
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(bad("expected 4 tab-separated fields"));
        }
        let mut boundaries = Vec::new();
        for item in cols[3].split(',').filter(|s| !s.is_empty()) {
            let mut it = item.rsplitn(3, ':');
            let (end, start, word) = (it.next(), it.next(), it.next());
            let (Some(end), Some(start), Some(word)) = (end, start, word) else {
                return Err(bad("boundary is not word:start:end"));
            };
            let start = start.parse().map_err(|_| bad("bad boundary start"))?;
            let end = end.parse().map_err(|_| bad("bad boundary end"))?;
            boundaries.push(WordSpan {
                word: word.to_string(),
                start,
                end,
            });
        }
        out.push(ManifestRecord {
            clip_id: cols[0].to_string(),
            feature_path: cols[1].to_string(),
            words: cols[2].split_whitespace().map(str::to_string).collect(),
            boundaries,
        });
    }
    Ok(out)
}

fn record_of(clip: &SyntheticClip) -> ManifestRecord {
    ManifestRecord {
        clip_id: clip.id.clone(),
        feature_path: format!("features/{}.kwt", clip.id),
        words: clip.words.clone(),
        boundaries: clip.boundaries.clone(),
    }
}

fn save_clip(dir: &Path, clip: &SyntheticClip) -> Result<()> {
    container::save(
        &dir.join(record_of(clip).feature_path),
        &[("visual".to_string(), clip.visual.clone()), ("audio".to_string(), clip.audio.clone())],
    )
}

/// Summary written next to the manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusInfo {
    pub seed: u64,
    pub spec: CorpusSpec,
    pub clips: Vec<(String, usize)>,
    pub frames: usize,
    pub frame_rate: f64,
}

impl CorpusInfo {
    pub fn hours(&self) -> f64 {
        self.frames as f64 / self.frame_rate / 3600.0
    }
}

const VOCAB_FILES: [&str; 6] = ["train_keywords", "val_keywords", "test_keywords", "test_short", "train_fillers", "eval_fillers"];

/// Writes `{split}.tsv` manifests, `features/*.kwt`, `probes.tsv`, the
/// `vocab/` word lists and `corpus.json`.
pub fn save_corpus(dir: &Path, c: &Corpus) -> Result<CorpusInfo> {
    std::fs::create_dir_all(dir.join("features"))?;
    std::fs::create_dir_all(dir.join("vocab"))?;
    let mut clips = Vec::new();
    for s in SPLITS {
        let split = c.split(s).unwrap();
        for clip in split {
            save_clip(dir, clip)?;
        }
        let recs: Vec<ManifestRecord> = split.iter().map(record_of).collect();
        let header = format!("# seed={} split={s}\n", c.seed);
        std::fs::write(dir.join(format!("{s}.tsv")), header + &format_manifest(&recs))?;
        clips.push((s.to_string(), split.len()));
    }
    let mut probes = String::new();
    let mut probe_recs = Vec::new();
    for p in &c.probes {
        save_clip(dir, &p.clip)?;
        save_clip(dir, &p.sibling_clip)?;
        let _ = writeln!(probes, "{}\t{}\t{}\t{}", p.word, p.sibling, p.clip.id, p.sibling_clip.id);
        probe_recs.push(record_of(&p.clip));
        probe_recs.push(record_of(&p.sibling_clip));
    }
    std::fs::write(dir.join("probes.tsv"), probes)?;
    std::fs::write(dir.join("probe_clips.tsv"), format_manifest(&probe_recs))?;
    clips.push(("probe".to_string(), 2 * c.probes.len()));
    let lists = [
        &c.vocab.train_keywords,
        &c.vocab.val_keywords,
        &c.vocab.test_keywords,
        &c.vocab.test_short,
        &c.vocab.train_fillers,
        &c.vocab.eval_fillers,
    ];
    for (name, words) in VOCAB_FILES.iter().zip(lists) {
        std::fs::write(dir.join("vocab").join(format!("{name}.txt")), crate::pronlex::write_word_list(words.iter()))?;
    }
    let info = CorpusInfo {
        seed: c.seed,
        spec: c.spec.clone(),
        clips,
        frames: c.total_frames(),
        frame_rate: 25.0,
    };
    std::fs::write(dir.join("corpus.json"), serde_json::to_string_pretty(&info).expect("info serializes"))?;
    Ok(info)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => KwsError::Missing(path.display().to_string()),
        _ => KwsError::Io(e),
    })
}

pub fn read_corpus_info(dir: &Path) -> Result<CorpusInfo> {
    let p = dir.join("corpus.json");
    serde_json::from_str(&read_text(&p)?).map_err(|e| KwsError::format(&p, e.to_string()))
}

/// Loads the clips of one manifest (paths resolved against its directory).
pub fn load_manifest(path: &Path) -> Result<Vec<SyntheticClip>> {
    let recs = parse_manifest(&read_text(path)?, path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    par::map(&recs, |r| load_clip(&base, r)).into_iter().collect()
}

fn load_clip(base: &Path, r: &ManifestRecord) -> Result<SyntheticClip> {
    let fp: PathBuf = base.join(&r.feature_path);
    if !fp.exists() {
        return Err(KwsError::Missing(fp.display().to_string()));
    }
    let ts = container::load(&fp)?;
    let visual = container::find(&ts, "visual", &fp)?.clone();
    let audio = container::find(&ts, "audio", &fp)?.clone();
    Ok(SyntheticClip {
        id: r.clip_id.clone(),
        words: r.words.clone(),
        phonemes: Vec::new(),
        boundaries: r.boundaries.clone(),
        visual,
        audio,
        seed: 0,
    })
}

pub fn load_vocab(dir: &Path) -> Result<VocabPlan> {
    let mut lists: Vec<Vec<String>> = Vec::new();
    for name in VOCAB_FILES {
        let text = read_text(&dir.join("vocab").join(format!("{name}.txt")))?;
        lists.push(crate::pronlex::read_word_list(&text).into_iter().collect());
    }
    let mut it = lists.into_iter();
    let mut next = || it.next().unwrap();
    Ok(VocabPlan {
        train_keywords: next(),
        val_keywords: next(),
        test_keywords: next(),
        test_short: next(),
        train_fillers: next(),
        eval_fillers: next(),
    })
}

/// Reloads a saved corpus. Probe pairs come back with their clips.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let info = read_corpus_info(dir)?;
    let vocab = load_vocab(dir)?;
    let mut splits = Vec::new();
    for s in SPLITS {
        splits.push(load_manifest(&dir.join(format!("{s}.tsv")))?);
    }
    let probe_clips = load_manifest(&dir.join("probe_clips.tsv"))?;
    let find = |id: &str| probe_clips.iter().find(|c| c.id == id).cloned().ok_or_else(|| KwsError::Missing(format!("probe clip {id}")));
    let mut probes = Vec::new();
    for line in read_text(&dir.join("probes.tsv"))?.lines().filter(|l| !l.is_empty()) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(KwsError::format(dir.join("probes.tsv"), "expected 4 fields"));
        }
        probes.push(ProbePair {
            word: cols[0].to_string(),
            sibling: cols[1].to_string(),
            clip: find(cols[2])?,
            sibling_clip: find(cols[3])?,
        });
    }
    let mut it = splits.into_iter();
    Ok(Corpus {
        vocab,
        spec: info.spec,
        seed: info.seed,
        pretrain: it.next().unwrap(),
        train: it.next().unwrap(),
        val: it.next().unwrap(),
        test: it.next().unwrap(),
        probes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pronlex::ParseOptions;

    fn lex() -> Lexicon {
        crate::pronlex::parse_lexicon("MAY M EY1\nPAY P EY1\nBAY B EY1\nDAY D EY1\n", ParseOptions::default()).unwrap()
    }

    #[test]
    fn bilabials_share_a_viseme() {
        let l = lex();
        let m = VisemeMap::standard(l.vocab()).unwrap();
        let id = |s: &str| l.vocab().id(s).unwrap();
        let v = m.phoneme_to_viseme(&[id("M"), id("P"), id("B"), id("D")]).unwrap();
        assert_eq!(v[0], v[1]);
        assert_eq!(v[1], v[2]);
        assert_ne!(v[2], v[3]);
        assert!(m.largest_group() >= 3);
    }

    #[test]
    fn unmapped_symbol_is_an_error() {
        let l = crate::pronlex::parse_lexicon("QUUX QX EY1\n", ParseOptions::default()).unwrap();
        assert!(matches!(VisemeMap::standard(l.vocab()), Err(KwsError::Unmapped(_))));
        let m = VisemeMap::identity(l.vocab());
        assert!(matches!(m.class_of(0), Err(KwsError::Unmapped(0))));
    }

    #[test]
    fn clip_seed_separates_splits() {
        assert_ne!(clip_seed(1, 2, 3), clip_seed(1, 3, 3));
        assert_ne!(clip_seed(1, 2, 3), clip_seed(1, 2, 4));
        assert_eq!(clip_seed(1, 2, 3), clip_seed(1, 2, 3));
    }

    #[test]
    fn crossfade_blends_edges_only() {
        let l = lex();
        let e = Emitter::new(l.vocab(), 4, 0.0, true, 3).unwrap();
        let t = Timing { mean: 3, jitter: 0 };
        let c = synth_clip("c", &["day", "may"], &l, t, &e, 1).unwrap();
        let plain = synth_clip("c", &["day", "may"], &l, t, &Emitter { crossfade: false, ..e.clone() }, 1).unwrap();
        // middle frame of a 3-frame phoneme is untouched
        assert_eq!(c.visual.row(1), plain.visual.row(1));
        assert_ne!(c.visual.row(2), plain.visual.row(2));
    }
}
