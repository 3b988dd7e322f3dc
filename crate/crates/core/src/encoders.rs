//! Feature-sequence encoders (audio, visual) and the phonetic keyword
//! encoder. Both sides end at width `d` so they can meet in a dot product.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{KwsError, Result};
use crate::gradcore::{init_batchnorm, init_bilstm, init_linear, Graph, ParamStore, PoolKind, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Audio,
}

impl Modality {
    pub fn prefix(self) -> &'static str {
        match self {
            Modality::Visual => "enc.visual",
            Modality::Audio => "enc.audio",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = KwsError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "v" | "visual" => Ok(Modality::Visual),
            "a" | "audio" => Ok(Modality::Audio),
            _ => Err(KwsError::Config(format!("unknown modality `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrontendMode {
    /// Learned convolutional front-end on raw inputs (mel frames or mouth crops).
    ConvStack,
    /// A single affine map from precomputed `d_syn`-wide features.
    Bypass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioParams {
    pub sample_rate: usize,
    pub window: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for AudioParams {
    fn default() -> Self {
        AudioParams {
            sample_rate: 16_000,
            window: 512,
            hop: 160,
            n_mels: 80,
            f_min: 0.0,
            f_max: 8000.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub modality: Modality,
    pub frontend: FrontendMode,
    /// Multiplier on every layer width; one of 1, 1/2, 1/4, 1/8.
    pub channel_scale: f64,
    /// Width of bypass-mode input features.
    pub d_syn: usize,
    /// Side of the square mouth crops in conv-stack visual mode.
    pub image_size: usize,
    /// Phoneme ids including padding.
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub max_np: usize,
    pub shortcut: bool,
    pub frame_rate: f64,
    pub audio: AudioParams,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            modality: Modality::Visual,
            frontend: FrontendMode::Bypass,
            channel_scale: 0.25,
            d_syn: 32,
            image_size: 32,
            vocab_size: 2,
            embed_dim: 64,
            max_np: 24,
            shortcut: true,
            frame_rate: 25.0,
            audio: AudioParams::default(),
            seed: 0,
        }
    }
}

const SCALES: [f64; 4] = [1.0, 0.5, 0.25, 0.125];

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !SCALES.contains(&self.channel_scale) {
            return Err(KwsError::Config(format!("channel_scale {} not in {{1, 1/2, 1/4, 1/8}}", self.channel_scale)));
        }
        if self.vocab_size < 2 || self.embed_dim == 0 || self.max_np == 0 || self.d_syn == 0 {
            return Err(KwsError::Config("vocab_size, embed_dim, max_np and d_syn must be positive".into()));
        }
        if self.d() % 2 != 0 {
            return Err(KwsError::Config(format!("d = {} must be even", self.d())));
        }
        Ok(())
    }

    /// Scaled width of a layer that has `full` channels at scale 1.
    pub fn ch(&self, full: usize) -> usize {
        ((full as f64 * self.channel_scale).floor() as usize).max(1)
    }

    /// Shared embedding width of features and keyword rows.
    pub fn d(&self) -> usize {
        self.ch(512)
    }

    pub fn kw_hidden(&self) -> usize {
        self.ch(250)
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Per-frame features of one clip at video rate.
#[derive(Clone, Debug)]
pub struct FeatureSequence {
    /// `[t_v, d]`
    pub frames: Tensor,
    pub frame_rate: f64,
    pub valid_len: usize,
}

/// One `d`-vector per phoneme of a keyword.
#[derive(Clone, Debug)]
pub struct KeywordEmbedding {
    /// `[n_p, d]`
    pub rows: Tensor,
    pub n_p: usize,
}

// ---------------------------------------------------------------- audio

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Center frequencies of the triangular filters.
pub fn mel_centers(p: &AudioParams) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(p.f_min), hz_to_mel(p.f_max));
    (1..=p.n_mels).map(|m| mel_to_hz(lo + (hi - lo) * m as f64 / (p.n_mels + 1) as f64)).collect()
}

/// Triangular filters evaluated at the DFT bin frequencies, `[n_mels][window/2 + 1]`.
pub fn mel_filterbank(p: &AudioParams) -> Vec<Vec<f64>> {
    let (lo, hi) = (hz_to_mel(p.f_min), hz_to_mel(p.f_max));
    let edges: Vec<f64> = (0..p.n_mels + 2).map(|m| mel_to_hz(lo + (hi - lo) * m as f64 / (p.n_mels + 1) as f64)).collect();
    let bins = p.window / 2 + 1;
    (0..p.n_mels)
        .map(|m| {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * p.sample_rate as f64 / p.window as f64;
                    if f <= l || f >= r {
                        0.0
                    } else if f <= c {
                        (f - l) / (c - l)
                    } else {
                        (r - f) / (r - c)
                    }
                })
                .collect()
        })
        .collect()
}

pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()).collect()
}

/// Number of STFT frames before rounding to a multiple of four.
pub fn stft_frames(samples: usize, p: &AudioParams) -> usize {
    1 + (samples - p.window) / p.hop
}

/// Log-mel spectrogram `[4k, n_mels]`: Hann window, DFT magnitudes, mel
/// projection, `ln(x + 1e-10)`. The frame count is trimmed down to a
/// multiple of four (padded with silence to four if shorter), so that
/// every video frame owns four acoustic frames.
pub fn stft_mel(wave: &[f64], p: &AudioParams) -> Result<Tensor> {
    if wave.len() < p.window {
        return Err(KwsError::Length(format!("waveform has {} samples, one window needs {}", wave.len(), p.window)));
    }
    let frames = stft_frames(wave.len(), p);
    let kept = if frames >= 4 { frames / 4 * 4 } else { 4 };
    let bank = mel_filterbank(p);
    let win = hann(p.window);
    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(p.window);
    let silence = (1e-10f64).ln();
    let mut out = vec![silence; kept * p.n_mels];
    let mut buf = vec![Complex::new(0.0, 0.0); p.window];
    for f in 0..frames.min(kept) {
        let seg = &wave[f * p.hop..][..p.window];
        for ((b, &s), &w) in buf.iter_mut().zip(seg).zip(&win) {
            *b = Complex::new(s * w, 0.0);
        }
        fft.process(&mut buf);
        let mag: Vec<f64> = buf[..p.window / 2 + 1].iter().map(|c| c.norm()).collect();
        for (m, filt) in bank.iter().enumerate() {
            let e: f64 = filt.iter().zip(&mag).map(|(a, b)| a * b).sum();
            out[f * p.n_mels + m] = (e + 1e-10).ln();
        }
    }
    Tensor::new(&[kept, p.n_mels], out)
}

/// Headerless mono 16-bit little-endian PCM, scaled to [-1, 1).
pub fn read_pcm16(path: &Path) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() % 2 != 0 {
        return Err(KwsError::format(path, "odd byte count for 16-bit PCM"));
    }
    Ok(bytes.chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0).collect())
}

fn conv_w(store: &mut ParamStore, name: &str, k: [usize; 3], cin: usize, cout: usize, rng: &mut impl Rng) -> Result<()> {
    store.init_uniform(name, &[k[0], k[1], k[2], cin, cout], k[0] * k[1] * k[2] * cin, rng)
}

/// Conv, joint batchnorm, ReLU over a batch of volumes.
fn conv_bn_relu(g: &mut Graph, xs: &[Var], prefix: &str, stride: [usize; 3]) -> Result<Vec<Var>> {
    let w = g.param(&format!("{prefix}.w"))?;
    let ys = xs.iter().map(|&x| g.tape.conv(x, w, stride)).collect::<Result<Vec<_>>>()?;
    let ys = g.batchnorm_joint(&ys, &format!("{prefix}.bn"))?;
    Ok(ys.into_iter().map(|y| g.tape.relu(y)).collect())
}

fn init_conv_bn(store: &mut ParamStore, prefix: &str, k: [usize; 3], cin: usize, cout: usize, rng: &mut impl Rng) -> Result<()> {
    conv_w(store, &format!("{prefix}.w"), k, cin, cout, rng)?;
    init_batchnorm(store, &format!("{prefix}.bn"), cout)
}

fn init_audio_frontend(store: &mut ParamStore, cfg: &ModelConfig, prefix: &str, rng: &mut impl Rng) -> Result<()> {
    let c1 = cfg.ch(256);
    init_conv_bn(store, &format!("{prefix}.conv1"), [5, 1, 1], cfg.audio.n_mels, c1, rng)?;
    init_conv_bn(store, &format!("{prefix}.conv2"), [5, 1, 1], c1, cfg.d(), rng)
}

/// Two stride-2 temporal convolutions: `[4 t_v, n_mels]` mel frames to
/// `[t_v, d]` features, one output per video frame.
pub fn audio_frontend(g: &mut Graph, cfg: &ModelConfig, prefix: &str, mels: &[Var]) -> Result<Vec<Var>> {
    let mut xs = Vec::with_capacity(mels.len());
    for &m in mels {
        let s = g.tape.shape(m).to_vec();
        if s.len() != 2 || s[1] != cfg.audio.n_mels {
            return Err(KwsError::dim("audio_frontend", &s, &[4, cfg.audio.n_mels]));
        }
        if s[0] % 4 != 0 {
            return Err(KwsError::Length(format!("{} mel frames is not a multiple of 4", s[0])));
        }
        xs.push(g.tape.reshape(m, &[s[0], 1, 1, s[1]])?);
    }
    let h = conv_bn_relu(g, &xs, &format!("{prefix}.conv1"), [2, 1, 1])?;
    let h = conv_bn_relu(g, &h, &format!("{prefix}.conv2"), [2, 1, 1])?;
    h.into_iter()
        .map(|v| {
            let s = g.tape.shape(v).to_vec();
            g.tape.reshape(v, &[s[0], s[3]])
        })
        .collect()
}

// --------------------------------------------------------------- visual

const BLOCKS: [(usize, usize); 8] = [(64, 1), (64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2), (512, 1)];

fn init_visual_frontend(store: &mut ParamStore, cfg: &ModelConfig, prefix: &str, rng: &mut impl Rng) -> Result<()> {
    let mut cin = cfg.ch(64);
    init_conv_bn(store, &format!("{prefix}.stem"), [5, 7, 7], 1, cin, rng)?;
    for (i, &(full, stride)) in BLOCKS.iter().enumerate() {
        let cout = cfg.ch(full);
        let b = format!("{prefix}.block{}", i + 1);
        init_conv_bn(store, &format!("{b}.a"), [1, 3, 3], cin, cout, rng)?;
        init_conv_bn(store, &format!("{b}.b"), [1, 3, 3], cout, cout, rng)?;
        if stride != 1 || cin != cout {
            init_conv_bn(store, &format!("{b}.skip"), [1, 1, 1], cin, cout, rng)?;
        }
        cin = cout;
    }
    Ok(())
}

/// Spatio-temporal stem plus eight residual 2-D blocks and global spatial
/// averaging: `[t_v, H, W, 1]` crops to `[t_v, d]`. Time is never strided.
pub fn visual_frontend(g: &mut Graph, cfg: &ModelConfig, prefix: &str, crops: &[Var]) -> Result<Vec<Var>> {
    for &c in crops {
        let s = g.tape.shape(c);
        if s.len() != 4 || s[3] != 1 || s[1].div_ceil(2) < 8 || s[2].div_ceil(2) < 8 {
            return Err(KwsError::dim("visual_frontend needs [t_v, H>=15, W>=15, 1]", s, &[0, 16, 16, 1]));
        }
    }
    let mut h = conv_bn_relu(g, crops, &format!("{prefix}.stem"), [1, 2, 2])?;
    let mut cin = cfg.ch(64);
    for (i, &(full, stride)) in BLOCKS.iter().enumerate() {
        let cout = cfg.ch(full);
        let b = format!("{prefix}.block{}", i + 1);
        let st = [1, stride, stride];
        let a = conv_bn_relu(g, &h, &format!("{b}.a"), st)?;
        let wb = g.param(&format!("{b}.b.w"))?;
        let pre = a.iter().map(|&x| g.tape.conv(x, wb, [1, 1, 1])).collect::<Result<Vec<_>>>()?;
        let pre = g.batchnorm_joint(&pre, &format!("{b}.b.bn"))?;
        let skip = if stride != 1 || cin != cout {
            let ws = g.param(&format!("{b}.skip.w"))?;
            let s = h.iter().map(|&x| g.tape.conv(x, ws, st)).collect::<Result<Vec<_>>>()?;
            g.batchnorm_joint(&s, &format!("{b}.skip.bn"))?
        } else {
            h.clone()
        };
        h = pre
            .iter()
            .zip(&skip)
            .map(|(&p, &s)| {
                let y = g.tape.add(p, s)?;
                Ok(g.tape.relu(y))
            })
            .collect::<Result<Vec<_>>>()?;
        cin = cout;
    }
    h.into_iter()
        .map(|v| {
            let s = g.tape.shape(v).to_vec();
            let area = s[1] * s[2];
            let flat = g.tape.reshape(v, &[s[0], area, 1, s[3]])?;
            let pooled = g.tape.pool(flat, PoolKind::Avg, [1, area, 1], [1, area, 1])?;
            g.tape.reshape(pooled, &[s[0], s[3]])
        })
        .collect()
}

// ------------------------------------------------------------- sequence

/// BiLSTM with `d/2` units per direction, concatenated and projected back
/// to width `d`. Frames at or beyond `valid` never influence valid frames.
pub fn sequence_bilstm(g: &mut Graph, prefix: &str, x: Var, valid: usize) -> Result<Var> {
    let h = g.bilstm(x, &format!("{prefix}.lstm"), valid)?;
    g.linear(h, &format!("{prefix}.fc"))
}

/// Registers every parameter of the feature-side encoder for `cfg.modality`.
pub fn init_stream_encoder(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<()> {
    let prefix = cfg.modality.prefix();
    let d = cfg.d();
    let front = format!("{prefix}.front");
    match (cfg.frontend, cfg.modality) {
        (FrontendMode::Bypass, _) => init_linear(store, &format!("{front}.proj"), cfg.d_syn, d, rng)?,
        (FrontendMode::ConvStack, Modality::Audio) => init_audio_frontend(store, cfg, &front, rng)?,
        (FrontendMode::ConvStack, Modality::Visual) => init_visual_frontend(store, cfg, &front, rng)?,
    }
    init_bilstm(store, &format!("{prefix}.seq.lstm"), d, d / 2, rng)?;
    init_linear(store, &format!("{prefix}.seq.fc"), d, d, rng)
}

/// One clip's raw input with its valid frame count (video rate).
#[derive(Clone, Copy, Debug)]
pub struct StreamInput {
    pub data: Var,
    pub valid: usize,
}

/// The configured front-end alone: raw clip inputs to `[t_v, d]`.
pub fn frontend(g: &mut Graph, cfg: &ModelConfig, data: &[Var]) -> Result<Vec<Var>> {
    let front = format!("{}.front", cfg.modality.prefix());
    match (cfg.frontend, cfg.modality) {
        (FrontendMode::Bypass, _) => {
            let mut out = Vec::with_capacity(data.len());
            for &x in data {
                let s = g.tape.shape(x);
                if s.len() != 2 || s[1] != cfg.d_syn {
                    return Err(KwsError::dim("bypass front-end", s, &[0, cfg.d_syn]));
                }
                out.push(g.linear(x, &format!("{front}.proj"))?);
            }
            Ok(out)
        }
        (FrontendMode::ConvStack, Modality::Audio) => audio_frontend(g, cfg, &front, data),
        (FrontendMode::ConvStack, Modality::Visual) => visual_frontend(g, cfg, &front, data),
    }
}

/// Front-end plus sequence BiLSTM for a batch of clips; returns `[t_v, d]` per clip.
pub fn encode_streams(g: &mut Graph, cfg: &ModelConfig, inputs: &[StreamInput]) -> Result<Vec<Var>> {
    let prefix = cfg.modality.prefix();
    let data: Vec<Var> = inputs.iter().map(|i| i.data).collect();
    frontend(g, cfg, &data)?
        .into_iter()
        .zip(inputs)
        .map(|(f, i)| sequence_bilstm(g, &format!("{prefix}.seq"), f, i.valid))
        .collect()
}

// -------------------------------------------------------------- keyword

pub fn init_keyword_encoder(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<()> {
    let e = cfg.embed_dim;
    store.init_uniform("enc.kw.embed", &[cfg.vocab_size, e], 1, rng)?;
    let h = cfg.kw_hidden();
    init_bilstm(store, "enc.kw.lstm", e, h, rng)?;
    init_linear(store, "enc.kw.fc1", 2 * h, cfg.ch(128), rng)?;
    init_linear(store, "enc.kw.fc2", cfg.ch(128), cfg.d(), rng)
}

/// Phoneme ids to `[n_p, d]`: embedding lookup, BiLSTM, then two row-wise
/// linear layers with a ReLU between them.
pub fn encode_keyword(g: &mut Graph, cfg: &ModelConfig, ids: &[usize]) -> Result<Var> {
    if ids.is_empty() || ids.len() > cfg.max_np {
        return Err(KwsError::Length(format!("keyword has {} phonemes, allowed 1..={}", ids.len(), cfg.max_np)));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i == 0 || i >= cfg.vocab_size) {
        return Err(KwsError::UnknownPhoneme(bad));
    }
    let table = g.param("enc.kw.embed")?;
    let x = g.tape.gather(table, ids)?;
    let h = g.bilstm(x, "enc.kw.lstm", ids.len())?;
    let h = g.linear(h, "enc.kw.fc1")?;
    let h = g.tape.relu(h);
    g.linear(h, "enc.kw.fc2")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scale_widths() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.d(), 128);
        assert_eq!(cfg.kw_hidden(), 62);
        assert_eq!(ModelConfig { channel_scale: 1.0, ..cfg.clone() }.d(), 512);
        assert!(ModelConfig { channel_scale: 0.3, ..cfg }.validate().is_err());
    }

    #[test]
    fn one_second_gives_96_frames() {
        let p = AudioParams::default();
        assert_eq!(stft_frames(16_000, &p), 97);
        assert_eq!(stft_mel(&vec![0.0; 16_000], &p).unwrap().shape(), &[96, 80]);
    }

    #[test]
    fn silence_is_log_floor() {
        let m = stft_mel(&[0.0; 2000], &AudioParams::default()).unwrap();
        assert!(m.data().iter().all(|&v| v == (1e-10f64).ln()));
    }

    #[test]
    fn short_waveform_is_rejected() {
        assert!(matches!(stft_mel(&[0.0; 100], &AudioParams::default()), Err(KwsError::Length(_))));
    }

    #[test]
    fn digest_tracks_config() {
        let a = ModelConfig::default();
        let b = ModelConfig { channel_scale: 0.5, ..a.clone() };
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest(), a.clone().digest());
    }

    #[test]
    fn keyword_id_checks() {
        let cfg = ModelConfig { vocab_size: 5, ..Default::default() };
        let mut store = ParamStore::new();
        init_keyword_encoder(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut g = Graph::new(&store, false);
        assert!(matches!(encode_keyword(&mut g, &cfg, &[1, 0]), Err(KwsError::UnknownPhoneme(0))));
        assert!(matches!(encode_keyword(&mut g, &cfg, &[5]), Err(KwsError::UnknownPhoneme(5))));
        assert!(matches!(encode_keyword(&mut g, &cfg, &[1; 25]), Err(KwsError::Length(_))));
    }
}
