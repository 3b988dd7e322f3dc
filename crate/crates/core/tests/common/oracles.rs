//! Brute-force metric oracles shared by the contract and acceptance suites.

use kwsnet_core::evalharness::{ClipHit, RankedRetrieval};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Up to 50 clips on a coarse score grid, so ties are common.
pub fn random_instance(r: &mut ChaCha8Rng) -> RankedRetrieval {
    let n = r.random_range(1..=50);
    let hits = (0..n)
        .map(|i| {
            let positive = r.random_bool(0.3);
            ClipHit {
                clip_id: format!("c{i:02}"),
                score: r.random_range(0..12) as f64 / 4.0 - 1.5,
                peak: 0,
                positive,
                localized: positive && r.random_bool(0.8),
            }
        })
        .collect();
    RankedRetrieval::new("k", hits)
}

/// Rank of `h` computed by comparison against every other hit.
pub fn rank_of(all: &[ClipHit], h: &ClipHit) -> usize {
    all.iter().filter(|o| o.score > h.score || (o.score == h.score && o.clip_id < h.clip_id)).count()
}

pub fn recall_oracle(all: &[ClipHit], n: usize, loc: bool) -> Option<f64> {
    let pos = all.iter().filter(|h| h.positive).count();
    (pos > 0).then(|| 100.0 * all.iter().filter(|h| h.correct(loc) && rank_of(all, h) < n).count() as f64 / pos as f64)
}

pub fn ap_oracle(all: &[ClipHit], loc: bool) -> Option<f64> {
    if !all.iter().any(|h| h.positive) {
        return None;
    }
    let correct: Vec<&ClipHit> = all.iter().filter(|h| h.correct(loc)).collect();
    if correct.is_empty() {
        return Some(0.0);
    }
    let sum: f64 = correct
        .iter()
        .map(|h| {
            let k = rank_of(all, h);
            let above = correct.iter().filter(|o| rank_of(all, o) <= k).count();
            above as f64 / (k + 1) as f64
        })
        .sum();
    Some(100.0 * sum / correct.len() as f64)
}

/// Every achievable (FAR, FRR) point, then the best diagonal crossing of
/// any segment joining points on opposite sides of FAR = FRR.
pub fn eer_oracle(pairs: &[(f64, bool)]) -> f64 {
    let np = pairs.iter().filter(|p| p.1).count() as f64;
    let nn = pairs.len() as f64 - np;
    let mut thr: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    thr.push(f64::INFINITY);
    let pts: Vec<(f64, f64)> = thr
        .iter()
        .map(|&t| {
            let far = pairs.iter().filter(|p| !p.1 && p.0 >= t).count() as f64 / nn;
            let frr = pairs.iter().filter(|p| p.1 && p.0 < t).count() as f64 / np;
            (far, frr)
        })
        .collect();
    let mut best = f64::INFINITY;
    for a in &pts {
        for b in &pts {
            let (da, db) = (a.0 - a.1, b.0 - b.1);
            if da >= 0.0 && db <= 0.0 {
                let e = if da == db { a.0 } else { a.0 + da / (da - db) * (b.0 - a.0) };
                best = best.min(e);
            }
        }
    }
    100.0 * best
}

