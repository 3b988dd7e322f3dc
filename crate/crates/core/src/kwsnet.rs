//! Similarity map, phonetic shortcut, CNN detector, localization-aware
//! loss and late fusion.
//!
//! The detector subsamples time by 8. At test time it is evaluated densely:
//! for every phase `r` in `0..8` the strided layers are re-run with their
//! sampling grid shifted so that output `k` of phase `r` is the train-mode
//! output a clip starting `r` frames later would produce, but with the true
//! left context instead of zero padding. Output `j = 8k + r` then belongs to
//! the 8-frame window starting at `j`, and phase 0 reproduces train mode
//! exactly.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{self, FeatureSequence, KeywordEmbedding, ModelConfig, StreamInput};
use crate::error::{KwsError, Result};
use crate::gradcore::{container, init_batchnorm, init_linear, kernels, sigmoid, Graph, ParamStore, PoolKind, Tensor, Var};
use crate::par;
use crate::pronlex::{pronounce, Lexicon};

/// Temporal subsampling of the detector.
pub const HOP: usize = 8;
/// Input frames credited to one test-mode output.
pub const WINDOW: usize = 8;
/// Input frames that can influence one detector output.
pub const RECEPTIVE_SPAN: usize = 27;

#[derive(Clone, Debug)]
pub struct SimilarityMap {
    /// `[t_v, n_p, C]`; channel 0 holds the raw dot products.
    pub grid: Tensor,
    pub valid_t: usize,
    pub valid_p: usize,
}

impl SimilarityMap {
    pub fn channels(&self) -> usize {
        self.grid.shape()[2]
    }
}

/// `grid[t, p, 0] = <V_t, P_p>`.
pub fn similarity_map(v: &FeatureSequence, p: &KeywordEmbedding) -> Result<SimilarityMap> {
    let (sv, sp) = (v.frames.shape(), p.rows.shape());
    if sv[1] != sp[1] {
        return Err(KwsError::dim("similarity_map", sv, sp));
    }
    let (t, n, d) = (sv[0], sp[0], sv[1]);
    let mut pt = vec![0.0; d * n];
    for i in 0..n {
        for c in 0..d {
            pt[c * n + i] = p.rows.data()[i * d + c];
        }
    }
    let grid = kernels::matmul(v.frames.data(), &pt, t, d, n);
    Ok(SimilarityMap {
        grid: Tensor::new(&[t, n, 1], grid)?,
        valid_t: v.valid_len.min(t),
        valid_p: n,
    })
}

/// Appends `P_p` as channels `1..=d` at every time step.
pub fn attach_shortcut(map: &SimilarityMap, p: &KeywordEmbedding) -> Result<SimilarityMap> {
    let s = map.grid.shape();
    let (t, n, c) = (s[0], s[1], s[2]);
    let d = p.rows.shape()[1];
    if p.rows.shape()[0] != n {
        return Err(KwsError::dim("attach_shortcut", s, p.rows.shape()));
    }
    let mut out = Vec::with_capacity(t * n * (c + d));
    for ti in 0..t {
        for pi in 0..n {
            out.extend_from_slice(&map.grid.data()[(ti * n + pi) * c..][..c]);
            out.extend_from_slice(p.rows.row(pi));
        }
    }
    Ok(SimilarityMap {
        grid: Tensor::new(&[t, n, c + d], out)?,
        ..map.clone()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StrideMode {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionTrace {
    pub logits: Vec<f64>,
    pub mode: StrideMode,
}

impl DetectionTrace {
    pub fn probs(&self) -> Vec<f64> {
        self.logits.iter().map(|&l| sigmoid(l)).collect()
    }

    /// First index of the largest logit.
    pub fn peak_index(&self) -> usize {
        let mut best = 0;
        for (i, &l) in self.logits.iter().enumerate() {
            if l > self.logits[best] {
                best = i;
            }
        }
        best
    }

    pub fn max_logit(&self) -> f64 {
        self.logits[self.peak_index()]
    }

    pub fn clip_score(&self) -> f64 {
        sigmoid(self.max_logit())
    }

    /// Input frame of an output index: the middle of its window.
    pub fn location(&self, index: usize) -> usize {
        match self.mode {
            StrideMode::Train => index * HOP + HOP / 2,
            StrideMode::Test => index + WINDOW / 2,
        }
    }
}

/// Per-frame weighted average of logits; sigmoid and max come after fusion.
pub fn fuse_modalities(a: &DetectionTrace, v: &DetectionTrace, w_a: f64) -> Result<DetectionTrace> {
    if a.mode != v.mode || a.logits.len() != v.logits.len() {
        return Err(KwsError::Alignment {
            audio: a.logits.len(),
            video: v.logits.len(),
        });
    }
    if !(0.0..=1.0).contains(&w_a) {
        return Err(KwsError::Config(format!("fusion weight {w_a} outside [0, 1]")));
    }
    let logits = a.logits.iter().zip(&v.logits).map(|(x, y)| w_a * x + (1.0 - w_a) * y).collect();
    Ok(DetectionTrace { logits, mode: a.mode })
}

// ------------------------------------------------------------- detector

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Widths {
    c1: usize,
    c2: usize,
    c3: usize,
    f1: usize,
    f2: usize,
}

fn widths(cfg: &ModelConfig) -> Widths {
    Widths {
        c1: cfg.ch(32),
        c2: cfg.ch(128),
        c3: cfg.ch(256),
        f1: cfg.ch(512),
        f2: cfg.ch(256),
    }
}

pub fn init_detector(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<()> {
    let w = widths(cfg);
    let d = cfg.d();
    store.init_uniform("det.conv1.w", &[5, 5, 1, 1, w.c1], 25, rng)?;
    if cfg.shortcut {
        store.init_uniform("det.conv1.w_sc", &[5, 5, d, w.c1], 25 * d, rng)?;
    }
    init_batchnorm(store, "det.conv1.bn", w.c1)?;
    store.init_uniform("det.conv2.w", &[5, 5, 1, w.c1, w.c2], 25 * w.c1, rng)?;
    init_batchnorm(store, "det.conv2.bn", w.c2)?;
    store.init_uniform("det.conv3.w", &[5, 5, 1, w.c2, w.c3], 25 * w.c2, rng)?;
    init_batchnorm(store, "det.conv3.bn", w.c3)?;
    store.init_uniform("det.fc1.w", &[w.c3, w.f1], w.c3, rng)?;
    init_batchnorm(store, "det.fc1.bn", w.f1)?;
    store.init_uniform("det.fc2.w", &[w.f1, w.f2], w.f1, rng)?;
    init_batchnorm(store, "det.fc2.bn", w.f2)?;
    init_linear(store, "det.fc3", w.f2, 1, rng)
}

/// One clip-keyword pair entering the detector.
#[derive(Clone, Copy, Debug)]
pub struct MapInput {
    /// `[t_v, n_p]` raw similarity grid.
    pub sim: Var,
    /// `[n_p, d]` keyword embedding (shortcut source).
    pub kw: Var,
}

fn check_map(g: &Graph, m: &MapInput, cfg: &ModelConfig) -> Result<(usize, usize)> {
    let s = g.tape.shape(m.sim);
    if s.len() != 2 {
        return Err(KwsError::dim("detector map", s, &[0, 0]));
    }
    let (t, n) = (s[0], s[1]);
    if t < HOP {
        return Err(KwsError::Length(format!("t_v = {t} is below the minimum window of {HOP} frames")));
    }
    if n < 2 {
        return Err(KwsError::Length(format!("n_p = {n}; the detector needs at least 2 phonemes")));
    }
    if cfg.shortcut && g.tape.shape(m.kw) != [n, cfg.d()] {
        return Err(KwsError::dim("shortcut", g.tape.shape(m.kw), &[n, cfg.d()]));
    }
    Ok((t, n))
}

/// conv1 over the map with the shortcut channels folded in, before batchnorm.
fn conv1(g: &mut Graph, cfg: &ModelConfig, m: &MapInput, t: usize, n: usize) -> Result<Var> {
    let w = g.param("det.conv1.w")?;
    let x = g.tape.reshape(m.sim, &[t, n, 1, 1])?;
    let y = g.tape.conv(x, w, [1, 1, 1])?;
    if !cfg.shortcut {
        return Ok(y);
    }
    let wsc = g.param("det.conv1.w_sc")?;
    // Adam steps every weight by about the learning rate regardless of fan-in,
    // so without this damping the d shortcut channels swamp the single map
    // channel and the detector learns keyword priors instead of reading the map
    let kw = g.tape.scale(m.kw, 1.0 / cfg.d() as f64);
    let sc = g.tape.broadcast_conv(kw, wsc, t)?;
    g.tape.add(y, sc)
}

fn bn_relu(g: &mut Graph, xs: &[Var], prefix: &str) -> Result<Vec<Var>> {
    let ys = g.batchnorm_joint(xs, prefix)?;
    Ok(ys.into_iter().map(|y| g.tape.relu(y)).collect())
}

/// Shifts the time sampling grid of a strided layer by `phase` input rows
/// (`0 < phase < stride`): pads `stride - phase` zero rows in front; the
/// caller drops the first output row.
fn shift_in(g: &mut Graph, x: Var, stride: usize, phase: usize) -> Result<Var> {
    if phase == 0 {
        return Ok(x);
    }
    let mut s = g.tape.shape(x).to_vec();
    s[0] = stride - phase;
    let z = g.tape.constant(Tensor::zeros(&s));
    g.tape.concat_rows(&[z, x])
}

fn shift_out(g: &mut Graph, y: Var, phase: usize) -> Result<Option<Var>> {
    if phase == 0 {
        return Ok(Some(y));
    }
    let rows = g.tape.shape(y)[0];
    if rows <= 1 {
        return Ok(None);
    }
    g.tape.slice_rows(y, 1, rows - 1).map(Some)
}

fn phased_conv(g: &mut Graph, x: Var, w: &str, stride: [usize; 3], phase: usize) -> Result<Option<Var>> {
    let w = g.param(w)?;
    let x = shift_in(g, x, stride[0], phase)?;
    let y = g.tape.conv(x, w, stride)?;
    shift_out(g, y, phase)
}

fn phased_pool(g: &mut Graph, x: Var, phase: usize) -> Result<Option<Var>> {
    let x = shift_in(g, x, 2, phase)?;
    let y = g.tape.pool(x, PoolKind::Max, [2, 2, 1], [2, 1, 1])?;
    shift_out(g, y, phase)
}

/// conv3 output to per-frame logits `[rows, 1]`.
fn head(g: &mut Graph, xs: &[Var]) -> Result<Vec<Var>> {
    let mut flat = Vec::with_capacity(xs.len());
    for &x in xs {
        let s = g.tape.shape(x).to_vec();
        let pooled = g.tape.pool(x, PoolKind::Avg, [1, s[1], 1], [1, s[1], 1])?;
        flat.push(g.tape.reshape(pooled, &[s[0], s[3]])?);
    }
    let w1 = g.param("det.fc1.w")?;
    let h = flat.iter().map(|&x| g.tape.matmul(x, w1)).collect::<Result<Vec<_>>>()?;
    let h = bn_relu(g, &h, "det.fc1.bn")?;
    let w2 = g.param("det.fc2.w")?;
    let h = h.iter().map(|&x| g.tape.matmul(x, w2)).collect::<Result<Vec<_>>>()?;
    let h = bn_relu(g, &h, "det.fc2.bn")?;
    h.into_iter().map(|x| g.linear(x, "det.fc3")).collect()
}

/// Train-stride detector over a batch of maps with batchnorm statistics
/// pooled across the batch. Returns `[floor(t_v / 8), 1]` logits per map.
pub fn detect_train(g: &mut Graph, cfg: &ModelConfig, maps: &[MapInput]) -> Result<Vec<Var>> {
    let mut h = Vec::with_capacity(maps.len());
    let mut t_out = Vec::with_capacity(maps.len());
    for m in maps {
        let (t, n) = check_map(g, m, cfg)?;
        h.push(conv1(g, cfg, m, t, n)?);
        t_out.push(t / HOP);
    }
    let h = bn_relu(g, &h, "det.conv1.bn")?;
    let w2 = g.param("det.conv2.w")?;
    let h = h.iter().map(|&x| g.tape.conv(x, w2, [2, 2, 1])).collect::<Result<Vec<_>>>()?;
    let h = bn_relu(g, &h, "det.conv2.bn")?;
    let h = h.iter().map(|&x| g.tape.pool(x, PoolKind::Max, [2, 2, 1], [2, 1, 1])).collect::<Result<Vec<_>>>()?;
    let w3 = g.param("det.conv3.w")?;
    let h = h.iter().map(|&x| g.tape.conv(x, w3, [2, 1, 1])).collect::<Result<Vec<_>>>()?;
    let h = bn_relu(g, &h, "det.conv3.bn")?;
    let logits = head(g, &h)?;
    logits.into_iter().zip(t_out).map(|(l, n)| g.tape.slice_rows(l, 0, n)).collect()
}

/// Dense (stride-1) detector output for one map: `t_v - 7` logits, output
/// `j` covering input frames `j..j + 8`. Batchnorm uses whatever mode the
/// graph is in; evaluation graphs use running statistics.
pub fn detect_test(g: &mut Graph, cfg: &ModelConfig, m: &MapInput) -> Result<Vec<f64>> {
    let (t, n) = check_map(g, m, cfg)?;
    let h1 = conv1(g, cfg, m, t, n)?;
    let h1 = bn_relu(g, &[h1], "det.conv1.bn")?[0];
    let n_out = t + 1 - WINDOW;
    let mut out = vec![f64::NAN; n_out];
    for o2 in 0..2 {
        let Some(h2) = phased_conv(g, h1, "det.conv2.w", [2, 2, 1], o2)? else { continue };
        let h2 = bn_relu(g, &[h2], "det.conv2.bn")?[0];
        for o3 in 0..2 {
            let Some(h3) = phased_pool(g, h2, o3)? else { continue };
            for o4 in 0..2 {
                let Some(h4) = phased_conv(g, h3, "det.conv3.w", [2, 1, 1], o4)? else { continue };
                let h4 = bn_relu(g, &[h4], "det.conv3.bn")?[0];
                let l = head(g, &[h4])?[0];
                let r = o2 + 2 * o3 + 4 * o4;
                for (k, &v) in g.tape.value(l).data().iter().enumerate() {
                    let j = HOP * k + r;
                    if j < n_out {
                        out[j] = v;
                    }
                }
            }
        }
    }
    if out.iter().any(|v| v.is_nan()) {
        return Err(KwsError::Length(format!("dense detector left gaps for t_v = {t}")));
    }
    Ok(out)
}

// ----------------------------------------------------------------- loss

/// Label and optional word boundaries `[start, end)` in input frames.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleLabel {
    pub y: f64,
    pub boundaries: Option<(usize, usize)>,
}

/// Output indices the clip-level max is taken over. Returns the mask and
/// whether it had to be widened to a single nearest index.
pub fn loss_mask(t_out: usize, label: &SampleLabel, use_boundaries: bool) -> (Vec<usize>, bool) {
    match (use_boundaries && label.y > 0.5, label.boundaries) {
        (true, Some((s, e))) => {
            let lo = s / HOP;
            let hi = (e.div_ceil(HOP)).saturating_sub(1).min(t_out - 1);
            if lo <= hi {
                ((lo..=hi).collect(), false)
            } else {
                (vec![lo.min(t_out - 1)], true)
            }
        }
        _ => ((0..t_out).collect(), false),
    }
}

/// Binary cross-entropy of the masked max logit. `warnings` counts masks
/// that were empty after clamping.
pub fn kws_loss(g: &mut Graph, logits: Var, label: &SampleLabel, use_boundaries: bool, warnings: &mut usize) -> Result<Var> {
    let t_out = g.tape.value(logits).len();
    let (mask, warned) = loss_mask(t_out, label, use_boundaries);
    *warnings += warned as usize;
    let m = g.tape.max_select(logits, &mask)?;
    g.tape.sigmoid_bce(m, label.y)
}

/// Loss of a finished trace (no gradients).
pub fn kws_loss_value(trace: &DetectionTrace, label: &SampleLabel, use_boundaries: bool) -> f64 {
    let (mask, _) = loss_mask(trace.logits.len(), label, use_boundaries);
    let m = mask.iter().map(|&i| trace.logits[i]).fold(f64::NEG_INFINITY, f64::max);
    crate::gradcore::bce_with_logit(m, label.y)
}

/// A clip-keyword pair inside a batch, by index into the batch's clip and
/// keyword lists.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pair {
    pub clip: usize,
    pub keyword: usize,
    pub label: SampleLabel,
}

pub struct BatchOutput {
    /// Mean loss over the pairs.
    pub loss: Var,
    pub per_sample: Vec<Var>,
    /// Train-stride logits per pair.
    pub logits: Vec<Var>,
}

/// Full forward pass for one batch: every clip and keyword is encoded once,
/// each pair gets its own similarity map, and the detector runs over all
/// maps with pooled batch statistics.
pub fn batch_loss(
    g: &mut Graph,
    cfg: &ModelConfig,
    clips: &[StreamInput],
    keywords: &[Vec<usize>],
    pairs: &[Pair],
    use_boundaries: bool,
    warnings: &mut usize,
) -> Result<BatchOutput> {
    if pairs.is_empty() {
        return Err(KwsError::Size("batch has no pairs".into()));
    }
    let feats = encoders::encode_streams(g, cfg, clips)?;
    let mut kws = Vec::with_capacity(keywords.len());
    for ids in keywords {
        let k = encoders::encode_keyword(g, cfg, ids)?;
        let kt = g.tape.transpose(k)?;
        kws.push((k, kt));
    }
    let mut maps = Vec::with_capacity(pairs.len());
    for p in pairs {
        let (k, kt) = kws[p.keyword];
        let sim = g.tape.matmul(feats[p.clip], kt)?;
        maps.push(MapInput { sim, kw: k });
    }
    let logits = detect_train(g, cfg, &maps)?;
    let per_sample = logits
        .iter()
        .zip(pairs)
        .map(|(&l, p)| kws_loss(g, l, &p.label, use_boundaries, warnings))
        .collect::<Result<Vec<_>>>()?;
    let total = g.tape.add_n(&per_sample)?;
    let loss = g.tape.scale(total, 1.0 / pairs.len() as f64);
    Ok(BatchOutput { loss, per_sample, logits })
}

// ---------------------------------------------------------------- model

#[derive(Clone, Debug)]
pub struct KwsNet {
    pub cfg: ModelConfig,
    pub store: ParamStore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpotResult {
    pub present: bool,
    pub score: f64,
    /// Input frame of the peak.
    pub location: usize,
    /// Winning pronunciation variant.
    pub variant: usize,
    pub trace: DetectionTrace,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    config: ModelConfig,
    digest: String,
    channel_scale: f64,
    shortcut: bool,
    seed: u64,
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

impl KwsNet {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        encoders::init_stream_encoder(&mut store, &cfg, &mut rng)?;
        encoders::init_keyword_encoder(&mut store, &cfg, &mut rng)?;
        init_detector(&mut store, &cfg, &mut rng)?;
        Ok(KwsNet { cfg, store })
    }

    /// Clip features in evaluation mode.
    pub fn encode_clip(&self, input: &Tensor) -> Result<FeatureSequence> {
        let mut g = Graph::new(&self.store, false);
        let x = g.tape.constant(input.clone());
        let valid = match self.cfg.frontend {
            encoders::FrontendMode::ConvStack if self.cfg.modality == encoders::Modality::Audio => input.shape()[0] / 4,
            _ => input.shape()[0],
        };
        let v = encoders::encode_streams(&mut g, &self.cfg, &[StreamInput { data: x, valid }])?[0];
        Ok(FeatureSequence {
            frames: g.tape.value(v).clone(),
            frame_rate: self.cfg.frame_rate,
            valid_len: valid,
        })
    }

    pub fn encode_keyword(&self, ids: &[usize]) -> Result<KeywordEmbedding> {
        let mut g = Graph::new(&self.store, false);
        let k = encoders::encode_keyword(&mut g, &self.cfg, ids)?;
        Ok(KeywordEmbedding {
            rows: g.tape.value(k).clone(),
            n_p: ids.len(),
        })
    }

    /// Detector on precomputed features, evaluation-mode batchnorm.
    pub fn detect(&self, v: &FeatureSequence, p: &KeywordEmbedding, mode: StrideMode) -> Result<DetectionTrace> {
        let mut g = Graph::new(&self.store, false);
        let vv = g.tape.constant(v.frames.clone());
        let pv = g.tape.constant(p.rows.clone());
        let pt = g.tape.transpose(pv)?;
        let sim = g.tape.matmul(vv, pt)?;
        let m = MapInput { sim, kw: pv };
        let logits = match mode {
            StrideMode::Train => {
                let l = detect_train(&mut g, &self.cfg, &[m])?[0];
                g.tape.value(l).data().to_vec()
            }
            StrideMode::Test => detect_test(&mut g, &self.cfg, &m)?,
        };
        Ok(DetectionTrace { logits, mode })
    }

    /// Test-mode score of every variant; the best one wins.
    pub fn spot_features(&self, v: &FeatureSequence, variants: &[KeywordEmbedding], threshold: f64) -> Result<SpotResult> {
        let traces = par::map(variants, |p| self.detect(v, p, StrideMode::Test));
        let mut best: Option<SpotResult> = None;
        for (i, t) in traces.into_iter().enumerate() {
            let t = t?;
            let score = t.clip_score();
            if best.as_ref().is_none_or(|b| score > b.score) {
                best = Some(SpotResult {
                    present: score >= threshold,
                    score,
                    location: t.location(t.peak_index()),
                    variant: i,
                    trace: t,
                });
            }
        }
        best.ok_or_else(|| KwsError::Length("keyword has no pronunciation".into()))
    }

    pub fn spot(&self, clip: &Tensor, keyword: &str, lexicon: &Lexicon, threshold: f64) -> Result<SpotResult> {
        let variants = pronounce(keyword, lexicon)?;
        let embs = variants.iter().map(|ids| self.encode_keyword(ids)).collect::<Result<Vec<_>>>()?;
        let v = self.encode_clip(clip)?;
        self.spot_features(&v, &embs, threshold)
    }

    /// Parameters and batchnorm buffers in name order.
    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        let mut all: Vec<(String, Tensor)> = self.store.params().map(|(n, t)| (n.to_string(), t.clone())).collect();
        all.extend(self.store.buffers().map(|(n, t)| (n.to_string(), t.clone())));
        all
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::save(path, &self.tensors())?;
        let side = Sidecar {
            config: self.cfg.clone(),
            digest: self.cfg.digest(),
            channel_scale: self.cfg.channel_scale,
            shortcut: self.cfg.shortcut,
            seed: self.cfg.seed,
        };
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&side).expect("sidecar serializes"))?;
        Ok(())
    }

    /// Reads the config recorded next to a checkpoint.
    pub fn read_config(path: &Path) -> Result<ModelConfig> {
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|_| KwsError::Missing(side.display().to_string()))?;
        let s: Sidecar = serde_json::from_str(&text).map_err(|e| KwsError::format(&side, e.to_string()))?;
        Ok(s.config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(KwsError::Missing(path.display().to_string()));
        }
        let cfg = Self::read_config(path)?;
        let mut net = KwsNet::new(cfg)?;
        net.assign(&container::load(path)?, path)?;
        Ok(net)
    }

    /// Loads a checkpoint, requiring its config to equal `expected`.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let found = Self::read_config(path)?;
        if found.digest() != expected.digest() {
            return Err(KwsError::ConfigMismatch {
                expected: expected.digest(),
                found: found.digest(),
            });
        }
        Self::load(path)
    }

    /// Overwrites every parameter and buffer from a loaded container.
    pub fn assign(&mut self, tensors: &[(String, Tensor)], origin: &Path) -> Result<()> {
        let names: Vec<String> = self.store.names().map(str::to_string).collect();
        for n in names {
            let t = container::find(tensors, &n, origin)?;
            let dst = self.store.get_mut(&n)?;
            if dst.shape() != t.shape() {
                return Err(KwsError::format(origin, format!("`{n}` has shape {:?}, expected {:?}", t.shape(), dst.shape())));
            }
            *dst = t.clone();
        }
        let bufs: Vec<String> = self.store.buffers().map(|(n, _)| n.to_string()).collect();
        for n in bufs {
            let t = container::find(tensors, &n, origin)?;
            *self.store.buffer_mut(&n)? = t.clone();
        }
        Ok(())
    }
}
