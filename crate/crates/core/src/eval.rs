//! Verification metrics and few-shot protocol construction.
//!
//! Scores are cosine similarities; a pair is accepted when its score is at
//! least the threshold.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::finetune::FaceModel;
use crate::geometry::Image;
use crate::rng::{derive_seed, CounterRng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub genuine: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ScoreSet {
    pub genuine: Vec<f32>,
    pub impostor: Vec<f32>,
}

impl ScoreSet {
    /// Splits pair-ordered `(score, genuine)` records.
    pub fn from_records(records: &[(f32, bool)]) -> Self {
        let mut s = ScoreSet::default();
        for &(score, genuine) in records {
            if genuine {
                s.genuine.push(score);
            } else {
                s.impostor.push(score);
            }
        }
        s
    }
}

/// Unit-norm embeddings `[N × d]`, computed in chunks of `batch`.
pub fn embed_all(model: &FaceModel, images: &[Image], batch: usize) -> Result<Tensor> {
    let d = model.vit.dim();
    let mut data = Vec::with_capacity(images.len() * d);
    for chunk in images.chunks(batch.max(1)) {
        let refs: Vec<&Image> = chunk.iter().collect();
        data.extend_from_slice(model.embed(&refs)?.data());
    }
    Tensor::new(&[images.len(), d], data)
}

pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    (dot / (na * nb).max(1e-12)) as f32
}

/// Pair-ordered `(score, genuine)` records from row embeddings.
pub fn score_pairs(embeddings: &Tensor, pairs: &[Pair]) -> Result<Vec<(f32, bool)>> {
    let n = embeddings.shape()[0];
    pairs
        .iter()
        .map(|p| {
            if p.a >= n || p.b >= n {
                return Err(Error::Parameter(format!("pair ({}, {}) outside {n} embeddings", p.a, p.b)));
            }
            Ok((cosine(embeddings.row(p.a), embeddings.row(p.b)), p.genuine))
        })
        .collect()
}

/// Draws `n_genuine` same-label and `n_impostor` different-label pairs, never
/// pairing an image with itself. The two kinds alternate while both last, so
/// contiguous folds stay balanced.
pub fn make_pairs(labels: &[usize], n_genuine: usize, n_impostor: usize, seed: u64) -> Result<Vec<Pair>> {
    let n = labels.len();
    let mut by_label: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &l) in labels.iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    let multi: Vec<&Vec<usize>> = by_label.values().filter(|v| v.len() >= 2).collect();
    if n_genuine > 0 && multi.is_empty() {
        return Err(Error::Parameter("no label has two images for genuine pairs".into()));
    }
    if n_impostor > 0 && by_label.len() < 2 {
        return Err(Error::Parameter("impostor pairs need at least two labels".into()));
    }
    let mut rng = CounterRng::from_parts(&[seed, 0x9A1]);
    let mut genuine = Vec::with_capacity(n_genuine);
    for _ in 0..n_genuine {
        let group = multi[rng.below(multi.len() as u64) as usize];
        let ij = rng.sample_indices(group.len(), 2);
        genuine.push(Pair { a: group[ij[0]], b: group[ij[1]], genuine: true });
    }
    let mut impostor = Vec::with_capacity(n_impostor);
    while impostor.len() < n_impostor {
        let (a, b) = (rng.below(n as u64) as usize, rng.below(n as u64) as usize);
        if labels[a] != labels[b] {
            impostor.push(Pair { a, b, genuine: false });
        }
    }
    let mut pairs = Vec::with_capacity(n_genuine + n_impostor);
    let (mut g, mut i) = (genuine.into_iter(), impostor.into_iter());
    loop {
        match (g.next(), i.next()) {
            (None, None) => break,
            (x, y) => pairs.extend(x.into_iter().chain(y)),
        }
    }
    Ok(pairs)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TarAtFar {
    pub far: f64,
    pub tar: f64,
    /// Smallest float threshold meeting the FAR budget; `-inf` when all
    /// impostors may be accepted.
    pub threshold: f32,
}

/// Largest `a` with `a/n ≤ far`.
fn allowed_false_accepts(far: f64, n: usize) -> usize {
    let nf = n as f64;
    let mut a = ((far * nf).floor().max(0.0) as usize).min(n);
    while a < n && (a + 1) as f64 / nf <= far {
        a += 1;
    }
    while a > 0 && a as f64 / nf > far {
        a -= 1;
    }
    a
}

/// True-accept rate at the smallest threshold whose false-accept rate is at
/// most `far`.
pub fn tar_at_far(scores: &ScoreSet, far: f64) -> Result<TarAtFar> {
    if !(far > 0.0 && far <= 1.0) {
        return Err(Error::Parameter(format!("FAR {far} outside (0, 1]")));
    }
    if scores.impostor.is_empty() {
        return Err(Error::Parameter("TAR@FAR needs impostor scores".into()));
    }
    let n = scores.impostor.len();
    let a = allowed_false_accepts(far, n);
    if a == 0 {
        log::warn!("FAR {far} is below 1/{n}; the threshold rejects every impostor");
    }
    let tar_above = |pred: &dyn Fn(f32) -> bool| -> f64 {
        if scores.genuine.is_empty() {
            return 0.0;
        }
        scores.genuine.iter().filter(|g| pred(**g)).count() as f64 / scores.genuine.len() as f64
    };
    if a >= n {
        return Ok(TarAtFar { far, tar: tar_above(&|_| true), threshold: f32::NEG_INFINITY });
    }
    let mut desc = scores.impostor.clone();
    desc.sort_unstable_by(|x, y| y.total_cmp(x));
    let v = desc[a];
    Ok(TarAtFar {
        far,
        tar: tar_above(&|g| g > v),
        threshold: v.next_up(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KFold {
    pub mean: f64,
    pub std: f64,
    pub folds: Vec<f64>,
    pub thresholds: Vec<f32>,
}

/// Candidate thresholds: `-inf`, the midpoint between each pair of adjacent
/// distinct scores, and `+inf`. A midpoint that rounds onto the lower score
/// is replaced by the upper one, which induces the same split.
pub fn candidate_thresholds(scores: &[f32]) -> Vec<f32> {
    let mut v: Vec<f32> = scores.to_vec();
    v.sort_unstable_by(|x, y| x.total_cmp(y));
    v.dedup();
    let mut out = Vec::with_capacity(v.len() + 1);
    out.push(f32::NEG_INFINITY);
    for w in v.windows(2) {
        let mid = ((w[0] as f64 + w[1] as f64) / 2.0) as f32;
        out.push(if mid <= w[0] { w[1] } else { mid });
    }
    out.push(f32::INFINITY);
    out
}

/// Accuracy-maximizing threshold on `records`. Accuracy ties go to the
/// threshold with the most balanced error rates (smallest |FAR − FRR|), then
/// to the smaller threshold.
pub fn best_threshold(records: &[(f32, bool)]) -> f32 {
    let mut sorted: Vec<(f32, bool)> = records.to_vec();
    sorted.sort_unstable_by(|x, y| x.0.total_cmp(&y.0));
    let n_gen = sorted.iter().filter(|r| r.1).count() as i64;
    let n_imp = sorted.len() as i64 - n_gen;
    let scores: Vec<f32> = sorted.iter().map(|r| r.0).collect();
    let mut best: Option<(i64, i64, f32)> = None;
    // Rejected counts below the current candidate; candidates ascend.
    let (mut fn_, mut tn, mut i) = (0i64, 0i64, 0usize);
    for t in candidate_thresholds(&scores) {
        while i < sorted.len() && sorted[i].0 < t {
            if sorted[i].1 {
                fn_ += 1;
            } else {
                tn += 1;
            }
            i += 1;
        }
        let (tp, fp) = (n_gen - fn_, n_imp - tn);
        let correct = tp + tn;
        let imbalance = (fp * n_gen - fn_ * n_imp).abs();
        let better = match best {
            None => true,
            Some((c, imb, _)) => correct > c || (correct == c && imbalance < imb),
        };
        if better {
            best = Some((correct, imbalance, t));
        }
    }
    best.map_or(f32::INFINITY, |b| b.2)
}

fn accuracy_at(records: &[(f32, bool)], t: f32) -> f64 {
    let correct = records.iter().filter(|(s, g)| (*s >= t) == *g).count();
    correct as f64 / records.len() as f64
}

/// `k`-fold verification accuracy over contiguous folds of pair-ordered
/// records; the threshold for each fold is fit on the other `k−1` folds.
pub fn kfold_accuracy(records: &[(f32, bool)], k: usize) -> Result<KFold> {
    if k < 2 {
        return Err(Error::Parameter(format!("k-fold needs k ≥ 2, got {k}")));
    }
    let n = records.len();
    if n < k {
        return Err(Error::Parameter(format!("{n} pairs cannot fill {k} folds")));
    }
    let mut folds = Vec::with_capacity(k);
    let mut thresholds = Vec::with_capacity(k);
    for f in 0..k {
        let (lo, hi) = (f * n / k, (f + 1) * n / k);
        let train: Vec<(f32, bool)> = records[..lo].iter().chain(&records[hi..]).copied().collect();
        let t = best_threshold(&train);
        thresholds.push(t);
        folds.push(accuracy_at(&records[lo..hi], t));
    }
    let mean = folds.iter().sum::<f64>() / k as f64;
    let std = (folds.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / k as f64).sqrt();
    Ok(KFold { mean, std, folds, thresholds })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerificationReport {
    pub kfold: KFold,
    pub tar_at_far: Vec<TarAtFar>,
    pub pairs: usize,
    pub folds: usize,
    pub protocol: String,
    pub seed: u64,
}

/// Scores `pairs` over `images` with `model` and summarizes them.
pub fn verify(
    model: &FaceModel,
    images: &[Image],
    pairs: &[Pair],
    k: usize,
    fars: &[f64],
    protocol: &str,
    seed: u64,
) -> Result<VerificationReport> {
    let emb = embed_all(model, images, 64)?;
    let records = score_pairs(&emb, pairs)?;
    let scores = ScoreSet::from_records(&records);
    Ok(VerificationReport {
        kfold: kfold_accuracy(&records, k)?,
        tar_at_far: fars.iter().map(|f| tar_at_far(&scores, *f)).collect::<Result<_>>()?,
        pairs: pairs.len(),
        folds: k,
        protocol: protocol.to_string(),
        seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shots {
    Count(usize),
    All,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FewShot {
    /// Indices into the source dataset, grouped by selected label.
    pub indices: Vec<usize>,
    /// Contiguous labels `0..selected.len()` aligned with `indices`.
    pub labels: Vec<usize>,
    /// Original label of each new label.
    pub selected: Vec<usize>,
}

/// Samples `⌈fraction·L⌉` of the `L` labels and keeps up to `shots` images of
/// each. For a fixed seed, smaller shot counts give subsets of larger ones.
pub fn build_few_shot(labels: &[usize], fraction: f64, shots: Shots, seed: u64) -> Result<FewShot> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Parameter(format!("label fraction {fraction} outside (0, 1]")));
    }
    if shots == Shots::Count(0) {
        return Err(Error::Parameter("shots must be at least 1".into()));
    }
    let mut by_label: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &l) in labels.iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    let distinct: Vec<usize> = by_label.keys().copied().collect();
    let want = ((fraction * distinct.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    let want = want.min(distinct.len());
    if want == 0 {
        return Err(Error::Parameter("few-shot selection is empty".into()));
    }
    let mut picked: Vec<usize> = CounterRng::from_parts(&[seed, 0xF5])
        .sample_indices(distinct.len(), want)
        .into_iter()
        .map(|i| distinct[i])
        .collect();
    picked.sort_unstable();
    let mut out = FewShot { indices: Vec::new(), labels: Vec::new(), selected: picked.clone() };
    for (new, orig) in picked.iter().enumerate() {
        let mut items = by_label[orig].clone();
        CounterRng::new(derive_seed(&[seed, 0x5E, *orig as u64])).shuffle(&mut items);
        let keep = match shots {
            Shots::All => items.len(),
            Shots::Count(s) => s.min(items.len()),
        };
        out.indices.extend_from_slice(&items[..keep]);
        out.labels.extend(std::iter::repeat(new).take(keep));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn worked() -> ScoreSet {
        ScoreSet { genuine: vec![0.9, 0.5, 0.3], impostor: vec![0.6, 0.4, 0.2, 0.1] }
    }

    #[test]
    fn tar_worked_example() {
        let r = tar_at_far(&worked(), 0.25).unwrap();
        assert_eq!(r.tar, 2.0 / 3.0);
        assert!(r.threshold > 0.4 && r.threshold <= 0.6);
    }

    #[test]
    fn far_one_accepts_everything() {
        let s = ScoreSet { genuine: vec![0.9, 0.8], impostor: vec![0.1, 0.2] };
        let r = tar_at_far(&s, 1.0).unwrap();
        assert_eq!(r.tar, 1.0);
        assert!(r.threshold <= 0.1);
    }

    #[test]
    fn tiny_far_rejects_all_impostors() {
        let r = tar_at_far(&worked(), 1e-6).unwrap();
        assert!(r.threshold > 0.6);
        assert_eq!(r.tar, 1.0 / 3.0);
        assert!(tar_at_far(&worked(), 0.0).is_err());
        assert!(tar_at_far(&ScoreSet { genuine: vec![0.5], impostor: vec![] }, 0.1).is_err());
    }

    #[test]
    fn worked_threshold_and_accuracy() {
        let s = worked();
        let records: Vec<(f32, bool)> = s
            .genuine
            .iter()
            .map(|g| (*g, true))
            .chain(s.impostor.iter().map(|i| (*i, false)))
            .collect();
        let t = best_threshold(&records);
        assert!(t > 0.4 && t <= 0.5, "{t}");
        assert_eq!(accuracy_at(&records, t), 5.0 / 7.0);
    }

    #[test]
    fn separable_scores_are_perfect() {
        let records: Vec<(f32, bool)> = (0..40).map(|i| if i % 2 == 0 { (0.8 + i as f32 * 1e-3, true) } else { (-0.5 + i as f32 * 1e-3, false) }).collect();
        let k = kfold_accuracy(&records, 10).unwrap();
        assert!(k.folds.iter().all(|a| *a == 1.0));
        assert_eq!(k.std, 0.0);
        assert!(kfold_accuracy(&records[..5], 10).is_err());
    }

    #[test]
    fn few_shot_identity_and_cardinality() {
        let labels: Vec<usize> = (0..40).map(|i| i / 4).collect();
        let all = build_few_shot(&labels, 1.0, Shots::All, 3).unwrap();
        let mut idx = all.indices.clone();
        idx.sort_unstable();
        assert_eq!(idx, (0..40).collect::<Vec<_>>());
        let one = build_few_shot(&labels, 1.0, Shots::Count(1), 3).unwrap();
        assert_eq!(one.indices.len(), 10);
        assert_eq!(one.labels, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn few_shot_fraction_and_nesting() {
        let labels: Vec<usize> = (0..1000).map(|i| i / 5).collect();
        let a = build_few_shot(&labels, 0.1, Shots::Count(1), 42).unwrap();
        assert_eq!(a.selected.len(), 20);
        assert_eq!(a, build_few_shot(&labels, 0.1, Shots::Count(1), 42).unwrap());
        let b = build_few_shot(&labels, 0.1, Shots::Count(2), 42).unwrap();
        assert_eq!(a.selected, b.selected);
        assert!(a.indices.iter().all(|i| b.indices.contains(i)));
        assert!(build_few_shot(&labels, 0.0, Shots::All, 1).is_err());
    }

    #[test]
    fn pairs_respect_labels() {
        let labels: Vec<usize> = (0..30).map(|i| i / 3).collect();
        let pairs = make_pairs(&labels, 50, 50, 1).unwrap();
        assert_eq!(pairs.len(), 100);
        assert!(pairs.chunks(10).all(|c| c.iter().filter(|p| p.genuine).count() == 5));
        for p in pairs {
            assert_ne!(p.a, p.b);
            assert_eq!(labels[p.a] == labels[p.b], p.genuine);
        }
    }
}
