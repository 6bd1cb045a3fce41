//! Shared oracles for integration tests.
#![allow(dead_code)]

use lafs::eval::ScoreSet;
use lafs::rng::CounterRng;

/// Pair-ordered `(score, genuine)` records with up to `max_len` entries.
/// Half of the sets are quantized so that ties are common.
pub fn random_records(rng: &mut CounterRng, max_len: u64) -> Vec<(f32, bool)> {
    let n = 1 + rng.below(max_len) as usize;
    let p_gen = rng.range(0.1, 0.9);
    let quantize = rng.bernoulli(0.5);
    (0..n)
        .map(|_| {
            let genuine = rng.bernoulli(p_gen);
            let mut s = (rng.normal() * 0.2 + if genuine { 0.3 } else { 0.0 }) as f32;
            if quantize {
                s = (s * 20.0).round() / 20.0;
            }
            (s, genuine)
        })
        .collect()
}

/// Best TAR over every threshold at which the impostor accept rate stays
/// within `far`; a score is accepted when it is at least the threshold.
pub fn oracle_tar(s: &ScoreSet, far: f64) -> f64 {
    let mut candidates = vec![f32::NEG_INFINITY, f32::INFINITY];
    for &v in s.genuine.iter().chain(&s.impostor) {
        candidates.push(v);
        candidates.push(v.next_up());
    }
    let n = s.impostor.len() as f64;
    let mut best = 0.0f64;
    for t in candidates {
        let fa = s.impostor.iter().filter(|&&v| v >= t).count() as f64;
        if fa / n <= far {
            let tar = if s.genuine.is_empty() {
                0.0
            } else {
                s.genuine.iter().filter(|&&v| v >= t).count() as f64 / s.genuine.len() as f64
            };
            best = best.max(tar);
        }
    }
    best
}

fn accuracy(records: &[(f32, bool)], t: f32) -> f64 {
    records.iter().filter(|(s, g)| (*s >= t) == *g).count() as f64 / records.len() as f64
}

/// Threshold chosen by exhaustive evaluation of every candidate: `±inf` and
/// the midpoints of adjacent distinct scores. Ties prefer balanced error
/// counts, then the smaller threshold.
pub fn oracle_threshold(records: &[(f32, bool)]) -> f32 {
    let mut v: Vec<f32> = records.iter().map(|r| r.0).collect();
    v.sort_by(f32::total_cmp);
    v.dedup();
    let mut candidates = vec![f32::NEG_INFINITY];
    for w in v.windows(2) {
        let mid = ((w[0] as f64 + w[1] as f64) / 2.0) as f32;
        candidates.push(if mid <= w[0] { w[1] } else { mid });
    }
    candidates.push(f32::INFINITY);
    let n_gen = records.iter().filter(|r| r.1).count() as i64;
    let n_imp = records.len() as i64 - n_gen;
    let mut best: Option<(i64, i64, f32)> = None;
    for t in candidates {
        let fp = records.iter().filter(|r| !r.1 && r.0 >= t).count() as i64;
        let fn_ = records.iter().filter(|r| r.1 && r.0 < t).count() as i64;
        let correct = records.len() as i64 - fp - fn_;
        let imbalance = (fp * n_gen - fn_ * n_imp).abs();
        let key = (correct, -imbalance);
        if best.map_or(true, |(c, i, _)| key > (c, -i)) {
            best = Some((correct, imbalance, t));
        }
    }
    best.unwrap().2
}

/// Per-fold accuracies over contiguous folds.
pub fn oracle_kfold(records: &[(f32, bool)], k: usize) -> Vec<f64> {
    let n = records.len();
    (0..k)
        .map(|f| {
            let (lo, hi) = (f * n / k, (f + 1) * n / k);
            let train: Vec<(f32, bool)> = records[..lo].iter().chain(&records[hi..]).copied().collect();
            accuracy(&records[lo..hi], oracle_threshold(&train))
        })
        .collect()
}
