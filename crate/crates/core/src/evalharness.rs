//! Retrieval evaluation: every query is scored against every clip, clips are
//! ranked per query, and R@N, mAP and EER are computed from the rankings.
//!
//! A keyword-clip pair is a correct match when the clip contains the query
//! and (unless localization is ignored) the detector's peak falls inside
//! one of the query's occurrences.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::{FeatureSequence, KeywordEmbedding, Modality};
use crate::error::{KwsError, Result};
use crate::gradcore::Tensor;
use crate::kwsnet::{fuse_modalities, DetectionTrace, KwsNet, StrideMode};
use crate::par;
use crate::pronlex::{pronounce, Lexicon};
use crate::synthcorpus::{clip_seed, NoiseSpec, SyntheticClip};

#[derive(Clone, Debug, PartialEq)]
pub struct ClipHit {
    pub clip_id: String,
    pub score: f64,
    /// Input frame of the detection peak.
    pub peak: usize,
    /// The clip contains the query.
    pub positive: bool,
    /// The peak lies inside an occurrence of the query.
    pub localized: bool,
}

impl ClipHit {
    pub fn correct(&self, localization: bool) -> bool {
        self.positive && (self.localized || !localization)
    }
}

/// One query's clips, best score first, ties broken by clip id.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedRetrieval {
    pub keyword: String,
    pub hits: Vec<ClipHit>,
}

impl RankedRetrieval {
    pub fn new(keyword: &str, mut hits: Vec<ClipHit>) -> Self {
        hits.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.clip_id.cmp(&b.clip_id)));
        RankedRetrieval {
            keyword: keyword.to_string(),
            hits,
        }
    }

    pub fn positives(&self) -> usize {
        self.hits.iter().filter(|h| h.positive).count()
    }
}

// -------------------------------------------------------------- metrics

/// Percentage of the query's positive clips that are correct matches in
/// the top `n`. `None` when the query has no positive clip.
pub fn recall_at_n(r: &RankedRetrieval, n: usize, localization: bool) -> Option<f64> {
    let pos = r.positives();
    if pos == 0 {
        return None;
    }
    let hit = r.hits.iter().take(n).filter(|h| h.correct(localization)).count();
    Some(100.0 * hit as f64 / pos as f64)
}

/// Non-interpolated average precision: the mean, over correct matches, of
/// the precision at their rank. Zero when nothing is correct.
pub fn average_precision(r: &RankedRetrieval, localization: bool) -> Option<f64> {
    if r.positives() == 0 {
        return None;
    }
    let (mut correct, mut sum) = (0usize, 0.0);
    for (i, h) in r.hits.iter().enumerate() {
        if h.correct(localization) {
            correct += 1;
            sum += correct as f64 / (i + 1) as f64;
        }
    }
    Some(if correct == 0 { 0.0 } else { 100.0 * sum / correct as f64 })
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>, what: &str) -> Result<f64> {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        return Err(KwsError::UndefinedMetric(format!("{what}: no query has a positive clip")));
    }
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Unweighted mean of [`recall_at_n`] over queries with a positive clip.
pub fn aggregate_recall(rs: &[RankedRetrieval], n: usize, localization: bool) -> Result<f64> {
    mean_defined(rs.iter().map(|r| recall_at_n(r, n, localization)), "recall")
}

pub fn mean_average_precision(rs: &[RankedRetrieval], localization: bool) -> Result<f64> {
    mean_defined(rs.iter().map(|r| average_precision(r, localization)), "mAP")
}

/// Equal error rate in percent over `(score, correct)` pairs.
///
/// Every threshold in the score set (plus one above the maximum) yields an
/// operating point `FAR(θ)` = share of incorrect pairs scoring `≥ θ`,
/// `FRR(θ)` = share of correct pairs scoring `< θ`. The error rate is read
/// where `FAR = FRR` on the lower convex hull of those points, linearly
/// interpolating between the two bracketing thresholds.
pub fn equal_error_rate(pairs: &[(f64, bool)]) -> Result<f64> {
    let n_pos = pairs.iter().filter(|p| p.1).count();
    let n_neg = pairs.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(KwsError::UndefinedMetric("EER needs both correct and incorrect pairs".into()));
    }
    if pairs.iter().any(|p| !p.0.is_finite()) {
        return Err(KwsError::Numeric("non-finite score".into()));
    }
    let mut sorted: Vec<(f64, bool)> = pairs.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    // walk thresholds from above the maximum downwards
    let mut pts = vec![(0.0, 1.0)];
    let (mut fa, mut fr) = (0usize, n_pos);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 {
                fr -= 1;
            } else {
                fa += 1;
            }
            i += 1;
        }
        pts.push((fa as f64 / n_neg as f64, fr as f64 / n_pos as f64));
    }
    // lower hull in (FAR, FRR); FAR is non-decreasing along the walk
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for p in pts {
        while hull.len() >= 2 {
            let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
            if cross <= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        if hull.last().is_some_and(|h| h.0 == p.0) {
            // same FAR: keep the lower FRR
            let h = hull.last_mut().unwrap();
            h.1 = h.1.min(p.1);
            continue;
        }
        hull.push(p);
    }
    for w in hull.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (da, db) = (a.0 - a.1, b.0 - b.1);
        if da <= 0.0 && db >= 0.0 {
            if da == db {
                return Ok(100.0 * a.0);
            }
            let t = da / (da - db);
            return Ok(100.0 * (a.0 + t * (b.0 - a.0)));
        }
    }
    let last = hull.last().unwrap();
    Ok(100.0 * (last.0 + last.1) / 2.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub map: f64,
    pub eer: f64,
}

pub const METRIC_NAMES: [&str; 5] = ["R@1", "R@5", "R@10", "mAP", "EER"];

impl Metrics {
    pub fn values(&self) -> [f64; 5] {
        [self.r1, self.r5, self.r10, self.map, self.eer]
    }

    fn from_values(v: [f64; 5]) -> Self {
        Metrics {
            r1: v[0],
            r5: v[1],
            r10: v[2],
            map: v[3],
            eer: v[4],
        }
    }
}

/// All five aggregate metrics of one evaluation. EER is NaN when no pair
/// (or every pair) is correct, e.g. an untrained model that never localizes.
pub fn compute_metrics(rs: &[RankedRetrieval], localization: bool) -> Result<Metrics> {
    let pairs: Vec<(f64, bool)> = rs.iter().flat_map(|r| r.hits.iter().map(move |h| (h.score, h.correct(localization)))).collect();
    let eer = match equal_error_rate(&pairs) {
        Err(KwsError::UndefinedMetric(_)) => f64::NAN,
        other => other?,
    };
    Ok(Metrics {
        r1: aggregate_recall(rs, 1, localization)?,
        r5: aggregate_recall(rs, 5, localization)?,
        r10: aggregate_recall(rs, 10, localization)?,
        map: mean_average_precision(rs, localization)?,
        eer,
    })
}

// ------------------------------------------------------------ retrieval

/// A query word or phrase with every pronunciation to try.
#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub text: String,
    pub variants: Vec<Vec<usize>>,
}

/// Queries that the lexicon can pronounce within `max_np` phonemes, plus
/// the number skipped.
pub fn make_queries<S: AsRef<str>>(texts: &[S], lexicon: &Lexicon, max_np: usize) -> (Vec<Query>, usize) {
    let mut out = Vec::new();
    let mut skipped = 0;
    for t in texts {
        match pronounce(t.as_ref(), lexicon) {
            Ok(v) => {
                let v: Vec<Vec<usize>> = v.into_iter().filter(|p| (2..=max_np).contains(&p.len())).collect();
                if v.is_empty() {
                    skipped += 1;
                } else {
                    out.push(Query {
                        text: t.as_ref().to_string(),
                        variants: v,
                    });
                }
            }
            Err(_) => skipped += 1,
        }
    }
    (out, skipped)
}

/// Test-mode detector outputs for every (query, clip, variant).
#[derive(Clone, Debug)]
pub struct TraceTable {
    pub queries: Vec<String>,
    /// `[query][clip][variant]`
    pub traces: Vec<Vec<Vec<DetectionTrace>>>,
}

/// The clip stream a model reads, with optional evaluation-time noise on
/// audio. Noise draws depend only on `(seed, clip index)`.
pub fn eval_streams(clips: &[SyntheticClip], modality: Modality, noise: Option<&NoiseSpec>, seed: u64) -> Result<Vec<Tensor>> {
    match (modality, noise) {
        (Modality::Visual, _) | (Modality::Audio, None) => Ok(clips.iter().map(|c| crate::trainer::stream_of(c, modality).clone()).collect()),
        (Modality::Audio, Some(spec)) => {
            let pool: Vec<&Tensor> = clips.iter().map(|c| &c.audio).collect();
            par::map_range(clips.len(), |i| {
                let mut rng = ChaCha8Rng::seed_from_u64(clip_seed(seed, 9, i as u64));
                spec.apply(&clips[i].audio, &pool, Some(i), &mut rng).map(|x| x.0)
            })
            .into_iter()
            .collect()
        }
    }
}

pub fn compute_traces(model: &KwsNet, streams: &[Tensor], queries: &[Query]) -> Result<TraceTable> {
    let feats: Vec<FeatureSequence> = par::map(streams, |s| model.encode_clip(s)).into_iter().collect::<Result<_>>()?;
    let mut embs: Vec<Vec<KeywordEmbedding>> = Vec::with_capacity(queries.len());
    for q in queries {
        embs.push(q.variants.iter().map(|v| model.encode_keyword(v)).collect::<Result<_>>()?);
    }
    let jobs: Vec<(usize, usize)> = (0..queries.len()).flat_map(|q| (0..feats.len()).map(move |c| (q, c))).collect();
    let results = par::map(&jobs, |&(q, c)| -> Result<Vec<DetectionTrace>> {
        embs[q].iter().map(|e| model.detect(&feats[c], e, StrideMode::Test)).collect()
    });
    let mut traces: Vec<Vec<Vec<DetectionTrace>>> = vec![Vec::with_capacity(feats.len()); queries.len()];
    for ((q, _), r) in jobs.iter().zip(results) {
        traces[*q].push(r?);
    }
    Ok(TraceTable {
        queries: queries.iter().map(|q| q.text.clone()).collect(),
        traces,
    })
}

/// Late fusion of two tables computed over the same queries and clips.
pub fn fuse_tables(audio: &TraceTable, visual: &TraceTable, w_a: f64) -> Result<TraceTable> {
    if audio.queries != visual.queries {
        return Err(KwsError::Config("fused tables disagree on queries".into()));
    }
    let mut traces = Vec::with_capacity(audio.traces.len());
    for (qa, qv) in audio.traces.iter().zip(&visual.traces) {
        let mut per_clip = Vec::with_capacity(qa.len());
        for (ca, cv) in qa.iter().zip(qv) {
            per_clip.push(ca.iter().zip(cv).map(|(a, v)| fuse_modalities(a, v, w_a)).collect::<Result<Vec<_>>>()?);
        }
        traces.push(per_clip);
    }
    Ok(TraceTable {
        queries: audio.queries.clone(),
        traces,
    })
}

/// Ranks the clips for every query. The best-scoring variant stands for
/// the pair.
pub fn retrieve(table: &TraceTable, clips: &[SyntheticClip]) -> Result<Vec<RankedRetrieval>> {
    let mut out = Vec::with_capacity(table.queries.len());
    for (q, per_clip) in table.queries.iter().zip(&table.traces) {
        if per_clip.len() != clips.len() {
            return Err(KwsError::Size(format!("trace table has {} clips, manifest {}", per_clip.len(), clips.len())));
        }
        let hits = per_clip
            .iter()
            .zip(clips)
            .map(|(variants, clip)| {
                let best = variants
                    .iter()
                    .fold(None::<&DetectionTrace>, |b, t| match b {
                        Some(b) if b.clip_score() >= t.clip_score() => Some(b),
                        _ => Some(t),
                    })
                    .expect("queries have a variant");
                let peak = best.location(best.peak_index());
                let occ = clip.occurrences(q);
                ClipHit {
                    clip_id: clip.id.clone(),
                    score: best.clip_score(),
                    peak,
                    positive: !occ.is_empty(),
                    localized: occ.iter().any(|&(s, e)| (s..e).contains(&peak)),
                }
            })
            .collect();
        out.push(RankedRetrieval::new(q, hits));
    }
    Ok(out)
}

/// Chance baseline: like [`retrieve`], but each query's (score, peak)
/// results are reassigned to clips by a random permutation, which breaks
/// every keyword-clip association while keeping the score distribution.
pub fn shuffled_retrieve(table: &TraceTable, clips: &[SyntheticClip], seed: u64) -> Result<Vec<RankedRetrieval>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = retrieve(table, clips)?;
    for r in &mut out {
        let mut by_clip: BTreeMap<&str, (f64, usize)> = r.hits.iter().map(|h| (h.clip_id.as_str(), (h.score, h.peak))).collect::<BTreeMap<_, _>>();
        let mut results: Vec<(f64, usize)> = clips.iter().map(|c| by_clip.remove(c.id.as_str()).expect("every clip scored")).collect();
        results.shuffle(&mut rng);
        let hits = clips
            .iter()
            .zip(results)
            .map(|(clip, (score, peak))| {
                let occ = clip.occurrences(&r.keyword);
                ClipHit {
                    clip_id: clip.id.clone(),
                    score,
                    peak,
                    positive: !occ.is_empty(),
                    localized: occ.iter().any(|&(s, e)| (s..e).contains(&peak)),
                }
            })
            .collect();
        *r = RankedRetrieval::new(&r.keyword, hits);
    }
    Ok(out)
}

/// `keyword TAB clip_id TAB score TAB peak_frame TAB correct`
pub fn score_dump(rs: &[RankedRetrieval], localization: bool) -> String {
    let mut s = String::new();
    for r in rs {
        for h in &r.hits {
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", r.keyword, h.clip_id, h.score, h.peak, h.correct(localization) as u8);
        }
    }
    s
}

/// Share of correct-keyword detections (positive clips scoring at least
/// `threshold`) whose peak falls inside the keyword.
pub fn localization_rate(rs: &[RankedRetrieval], threshold: f64) -> Option<f64> {
    let tp: Vec<&ClipHit> = rs.iter().flat_map(|r| &r.hits).filter(|h| h.positive && h.score >= threshold).collect();
    if tp.is_empty() {
        return None;
    }
    Some(100.0 * tp.iter().filter(|h| h.localized).count() as f64 / tp.len() as f64)
}

// --------------------------------------------------------------- report

#[derive(Clone, Debug, PartialEq)]
pub struct KeywordMetrics {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub ap: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMetrics {
    pub checkpoint: String,
    pub per_keyword: BTreeMap<String, KeywordMetrics>,
    /// Queries without any positive clip (excluded from aggregates).
    pub no_positives: Vec<String>,
    pub aggregate: Metrics,
}

pub fn evaluate_checkpoint(label: &str, rs: &[RankedRetrieval], localization: bool) -> Result<CheckpointMetrics> {
    let mut per_keyword = BTreeMap::new();
    let mut no_positives = Vec::new();
    for r in rs {
        match (recall_at_n(r, 1, localization), average_precision(r, localization)) {
            (Some(r1), Some(ap)) => {
                per_keyword.insert(
                    r.keyword.clone(),
                    KeywordMetrics {
                        r1,
                        r5: recall_at_n(r, 5, localization).unwrap(),
                        r10: recall_at_n(r, 10, localization).unwrap(),
                        ap,
                    },
                );
            }
            _ => no_positives.push(r.keyword.clone()),
        }
    }
    Ok(CheckpointMetrics {
        checkpoint: label.to_string(),
        per_keyword,
        no_positives,
        aggregate: compute_metrics(rs, localization)?,
    })
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

pub const REPORT_CHECKPOINTS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub digest: String,
    pub checkpoints: Vec<CheckpointMetrics>,
    pub mean: Metrics,
    pub std: Metrics,
    pub warning: Option<String>,
}

/// Summarizes the last five checkpoint evaluations (all of them, with a
/// warning, when fewer exist).
pub fn report(mut evals: Vec<CheckpointMetrics>, digest: &str) -> Result<MetricsReport> {
    if evals.is_empty() {
        return Err(KwsError::Missing("no checkpoints to report".into()));
    }
    let mut warnings = Vec::new();
    if evals.len() < REPORT_CHECKPOINTS {
        warnings.push(format!("only {} checkpoint(s) available, expected {REPORT_CHECKPOINTS}", evals.len()));
    }
    if evals.len() > REPORT_CHECKPOINTS {
        evals.drain(..evals.len() - REPORT_CHECKPOINTS);
    }
    if evals.iter().any(|e| e.aggregate.eer.is_nan()) {
        warnings.push("EER undefined: no correct (or no incorrect) keyword-clip pair".into());
    }
    let warning = (!warnings.is_empty()).then(|| warnings.join("; "));
    let mut mean = [0.0; 5];
    let mut std = [0.0; 5];
    for k in 0..5 {
        let v: Vec<f64> = evals.iter().map(|e| e.aggregate.values()[k]).collect();
        (mean[k], std[k]) = mean_std(&v);
    }
    Ok(MetricsReport {
        digest: digest.to_string(),
        checkpoints: evals,
        mean: Metrics::from_values(mean),
        std: Metrics::from_values(std),
        warning,
    })
}

impl MetricsReport {
    /// `metric,keyword,checkpoint,value` rows: per-keyword values, then
    /// `__ALL__` aggregates per checkpoint, then `mean` and `std` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,keyword,checkpoint,value\n");
        for c in &self.checkpoints {
            for (k, m) in &c.per_keyword {
                for (name, v) in [("R@1", m.r1), ("R@5", m.r5), ("R@10", m.r10), ("AP", m.ap)] {
                    let _ = writeln!(s, "{name},{k},{},{v}", c.checkpoint);
                }
            }
        }
        for c in &self.checkpoints {
            for (name, v) in METRIC_NAMES.iter().zip(c.aggregate.values()) {
                let _ = writeln!(s, "{name},__ALL__,{},{v}", c.checkpoint);
            }
        }
        for (label, m) in [("mean", &self.mean), ("std", &self.std)] {
            for (name, v) in METRIC_NAMES.iter().zip(m.values()) {
                let _ = writeln!(s, "{name},__ALL__,{label},{v}");
            }
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for (i, name) in METRIC_NAMES.iter().enumerate() {
            let _ = writeln!(s, "{name:>5}: {:6.2} ± {:.2}", self.mean.values()[i], self.std.values()[i]);
        }
        s
    }
}

/// A sweep grid `a:b:step`, inclusive of `b` up to rounding.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<f64> = spec
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| KwsError::Config(format!("grid `{spec}` is not a:b:step")))?;
    let [a, b, step] = parts[..] else {
        return Err(KwsError::Config(format!("grid `{spec}` is not a:b:step")));
    };
    if !(step > 0.0) || b < a {
        return Err(KwsError::Config(format!("grid `{spec}` is empty")));
    }
    let n = ((b - a) / step + 1e-9).floor() as usize + 1;
    // round away accumulated binary error (0.1 * 3 -> 0.3)
    Ok((0..n).map(|i| ((a + i as f64 * step) * 1e9).round() / 1e9).collect())
}

/// Plot-ready rows `sweep,setting,metric,value`.
pub fn sweep_csv(kind: &str, rows: &[(f64, Metrics)]) -> String {
    let mut s = String::from("sweep,setting,metric,value\n");
    for (x, m) in rows {
        for (name, v) in METRIC_NAMES.iter().zip(m.values()) {
            let _ = writeln!(s, "{kind},{x},{name},{v}");
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hit(id: &str, score: f64, positive: bool) -> ClipHit {
        ClipHit {
            clip_id: id.into(),
            score,
            peak: 0,
            positive,
            localized: positive,
        }
    }

    #[test]
    fn ap_closed_forms() {
        let r = RankedRetrieval::new("k", vec![hit("a", 0.9, false), hit("b", 0.8, true)]);
        assert_eq!(average_precision(&r, true), Some(50.0));
        let hits: Vec<ClipHit> = (0..6).map(|i| hit(&format!("c{i}"), 1.0 - i as f64 * 0.1, [0, 2, 5].contains(&i))).collect();
        let r = RankedRetrieval::new("k", hits);
        let want = 100.0 * (1.0 + 2.0 / 3.0 + 3.0 / 6.0) / 3.0;
        assert!((average_precision(&r, true).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn eer_hand_cases() {
        let e = equal_error_rate(&[(0.9, true), (0.6, true), (0.7, false), (0.2, false)]).unwrap();
        assert!((e - 25.0).abs() < 1e-12);
        assert_eq!(equal_error_rate(&[(0.9, true), (0.8, true), (0.1, false)]).unwrap(), 0.0);
        assert!(equal_error_rate(&[(0.9, true)]).is_err());
    }

    #[test]
    fn ties_break_by_clip_id() {
        let r = RankedRetrieval::new("k", vec![hit("b", 0.5, false), hit("a", 0.5, true)]);
        assert_eq!(r.hits[0].clip_id, "a");
    }

    #[test]
    fn grids() {
        assert_eq!(parse_grid("-10:20:5").unwrap().len(), 7);
        let f = parse_grid("0:1:0.1").unwrap();
        assert_eq!(f.len(), 11);
        assert_eq!(f[3], 0.3);
        assert!(parse_grid("1:0:1").is_err());
    }
}
