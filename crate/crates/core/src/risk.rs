//! Privacy-risk evaluation: singling-out (local cloaking and hidden rate),
//! inner/outer linkability verification, membership inference, and utility
//! preservation scoring.
//!
//! All similarity judgments run in cosine space over identity embeddings;
//! ranking ties break by gallery index, and medians are lower medians, so
//! every reported number is reproducible bit for bit.

use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anonymize::cosine_similarity;
use crate::nets::{AuxTrainOpts, EmbedderConfig, EmbeddingVector, UtilityEmbedder};
use crate::tensor::Scalar;
use crate::{Error, Result};

/// Denominator guard of every cosine computed by the risk suite.
pub const COSINE_EPS: f64 = 1e-8;

fn cos_distance(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    Ok(1.0 - cosine_similarity(a, b, COSINE_EPS)?)
}

// ---------------------------------------------------------------------------
// Singling out: ranks, local cloaking, hidden rate
// ---------------------------------------------------------------------------

/// Number of gallery items strictly closer to `query` than
/// `gallery[target_index]`; equal distances count when their index precedes
/// the target (stable tie-breaking).
pub fn distance_rank(
    query: &EmbeddingVector,
    gallery: &[EmbeddingVector],
    target_index: usize,
) -> Result<usize> {
    if gallery.is_empty() {
        return Err(Error::Config("distance_rank: empty gallery".into()));
    }
    if target_index >= gallery.len() {
        return Err(Error::Config(format!(
            "distance_rank: target index {target_index} out of range for gallery of {}",
            gallery.len()
        )));
    }
    let d_t = cos_distance(query, &gallery[target_index])?;
    let mut rank = 0;
    for (i, g) in gallery.iter().enumerate() {
        if i == target_index {
            continue;
        }
        let d = cos_distance(query, g)?;
        if d < d_t || (d == d_t && i < target_index) {
            rank += 1;
        }
    }
    Ok(rank)
}

/// Lower median: for even counts the smaller of the two central values, so
/// the result stays an achievable integer rank.
fn lower_median(mut ranks: Vec<usize>) -> usize {
    ranks.sort_unstable();
    ranks[(ranks.len() - 1) / 2]
}

fn check_aligned(real: &[EmbeddingVector], anon: &[EmbeddingVector]) -> Result<()> {
    if real.len() != anon.len() {
        return Err(Error::shape(format!("{} embeddings", real.len()), format!("{}", anon.len())));
    }
    if real.is_empty() {
        return Err(Error::Config("empty embedding sets".into()));
    }
    Ok(())
}

/// Median rank of each image's own counterpart: `lc_nr` ranks the real
/// source within the real gallery as seen from its anonymization, `lc_na`
/// ranks the anonymization within the anonymized gallery as seen from its
/// real source.
pub fn local_cloaking(
    real: &[EmbeddingVector],
    anon: &[EmbeddingVector],
) -> Result<(usize, usize)> {
    check_aligned(real, anon)?;
    let mut ranks_nr = Vec::with_capacity(real.len());
    let mut ranks_na = Vec::with_capacity(real.len());
    for i in 0..real.len() {
        ranks_nr.push(distance_rank(&anon[i], real, i)?);
        ranks_na.push(distance_rank(&real[i], anon, i)?);
    }
    Ok((lower_median(ranks_nr), lower_median(ranks_na)))
}

/// Fraction of real images whose own anonymization is not their nearest
/// anonymized image.
pub fn hidden_rate(real: &[EmbeddingVector], anon: &[EmbeddingVector]) -> Result<f64> {
    check_aligned(real, anon)?;
    let mut hidden = 0usize;
    for i in 0..real.len() {
        if distance_rank(&real[i], anon, i)? > 0 {
            hidden += 1;
        }
    }
    Ok(hidden as f64 / real.len() as f64)
}

// ---------------------------------------------------------------------------
// Linkability verification
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairKind {
    /// Both images real.
    RealReal,
    /// Both images anonymized.
    Inner,
    /// Left real, right anonymized.
    Outer,
}

impl std::fmt::Display for PairKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PairKind::RealReal => "real-real",
            PairKind::Inner => "inner",
            PairKind::Outer => "outer",
        })
    }
}

/// Index pair into the (real, anon) image lists, with ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationPair {
    pub a: usize,
    pub b: usize,
    pub same_patient: bool,
    pub kind: PairKind,
}

/// Builds a balanced, seed-deterministic pair list. Anonymized images are
/// assumed aligned index-by-index with their real sources, so one patient-id
/// list covers both sides. Outer positives pair every image with its own
/// anonymization; outer negatives draw a different patient's anonymization.
pub fn build_pairs(
    patient_ids: &[usize],
    kind: PairKind,
    seed: u64,
) -> Result<Vec<VerificationPair>> {
    let n = patient_ids.len();
    let mut distinct: Vec<usize> = patient_ids.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Config("pair construction needs at least 2 patients".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (kind as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    match kind {
        PairKind::RealReal | PairKind::Inner => {
            let mut pos = Vec::new();
            let mut neg = Vec::new();
            for i in 0..n {
                for j in (i + 1)..n {
                    if patient_ids[i] == patient_ids[j] {
                        pos.push((i, j));
                    } else {
                        neg.push((i, j));
                    }
                }
            }
            if pos.is_empty() {
                return Err(Error::Config("no same-patient pairs available".into()));
            }
            let k = pos.len().min(neg.len());
            pos.shuffle(&mut rng);
            neg.shuffle(&mut rng);
            pos.truncate(k);
            neg.truncate(k);
            let mut pairs = Vec::with_capacity(2 * k);
            for (a, b) in pos {
                pairs.push(VerificationPair { a, b, same_patient: true, kind });
            }
            for (a, b) in neg {
                pairs.push(VerificationPair { a, b, same_patient: false, kind });
            }
            Ok(pairs)
        }
        PairKind::Outer => {
            let mut pairs = Vec::with_capacity(2 * n);
            for i in 0..n {
                pairs.push(VerificationPair { a: i, b: i, same_patient: true, kind });
            }
            for i in 0..n {
                let others: Vec<usize> =
                    (0..n).filter(|&j| patient_ids[j] != patient_ids[i]).collect();
                let j = others[rng.gen_range(0..others.len())];
                pairs.push(VerificationPair { a: i, b: j, same_patient: false, kind });
            }
            Ok(pairs)
        }
    }
}

/// Identity-embedding cosine between the two sides of a pair.
pub fn pair_score(
    pair: &VerificationPair,
    real: &[EmbeddingVector],
    anon: &[EmbeddingVector],
) -> Result<f64> {
    let (ea, eb) = match pair.kind {
        PairKind::RealReal => (&real[pair.a], &real[pair.b]),
        PairKind::Inner => (&anon[pair.a], &anon[pair.b]),
        PairKind::Outer => (&real[pair.a], &anon[pair.b]),
    };
    cosine_similarity(ea, eb, COSINE_EPS)
}

/// Confusion-matrix metrics of a verification run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationMetrics {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub f1: f64,
    pub acc: f64,
    /// True accept rate TP/(TP+FN).
    pub tar: f64,
    /// False accept rate FP/(FP+TN).
    pub far: f64,
}

/// Aggregates accept/reject decisions against ground truth.
pub fn verification_eval(labels: &[bool], decisions: &[bool]) -> Result<VerificationMetrics> {
    if labels.is_empty() {
        return Err(Error::Config("verification_eval: empty pair list".into()));
    }
    if labels.len() != decisions.len() {
        return Err(Error::shape(format!("{} labels", labels.len()), format!("{}", decisions.len())));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&y, &d) in labels.iter().zip(decisions) {
        match (y, d) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
            (true, false) => fn_ += 1,
        }
    }
    if tp + fn_ == 0 || fp + tn == 0 {
        return Err(Error::Config("verification_eval: pairs must contain both classes".into()));
    }
    let n = labels.len() as f64;
    Ok(VerificationMetrics {
        tp,
        fp,
        tn,
        fn_,
        f1: if 2 * tp + fp + fn_ == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 },
        acc: (tp + tn) as f64 / n,
        tar: tp as f64 / (tp + fn_) as f64,
        far: fp as f64 / (fp + tn) as f64,
    })
}

/// Scores every pair and thresholds at `threshold` (cosine ≥ threshold
/// means "same patient").
pub fn evaluate_pairs(
    pairs: &[VerificationPair],
    real: &[EmbeddingVector],
    anon: &[EmbeddingVector],
    threshold: f64,
) -> Result<VerificationMetrics> {
    let mut labels = Vec::with_capacity(pairs.len());
    let mut decisions = Vec::with_capacity(pairs.len());
    for p in pairs {
        labels.push(p.same_patient);
        decisions.push(pair_score(p, real, anon)? >= threshold);
    }
    verification_eval(&labels, &decisions)
}

/// F1-maximizing accept threshold over calibration scores. Candidates are
/// midpoints between adjacent distinct scores plus the two outer extremes;
/// ties prefer the lowest threshold (most permissive verifier).
pub fn calibrate_threshold(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Config("calibration needs aligned, non-empty scores and labels".into()));
    }
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(Error::Config("calibration needs both classes".into()));
    }
    let mut sorted: Vec<f64> = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    sorted.dedup();
    let mut candidates = vec![sorted[0] - 1.0];
    for w in sorted.windows(2) {
        candidates.push(0.5 * (w[0] + w[1]));
    }
    candidates.push(sorted[sorted.len() - 1] + 1.0);

    let mut best = (f64::NEG_INFINITY, 0.0);
    for &t in &candidates {
        let decisions: Vec<bool> = scores.iter().map(|&s| s >= t).collect();
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (&y, &d) in labels.iter().zip(&decisions) {
            match (y, d) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                _ => {}
            }
        }
        let f1 = if 2 * tp + fp + fn_ == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
        if f1 > best.0 {
            best = (f1, t);
        }
    }
    Ok(best.1)
}

// ---------------------------------------------------------------------------
// Membership inference
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MiaConfig {
    pub steps: usize,
    pub lr: f64,
}

impl Default for MiaConfig {
    fn default() -> Self {
        MiaConfig { steps: 500, lr: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiaOutcome {
    pub train_acc: f64,
    pub target_acc: f64,
}

/// Per-image attacker features: reconstruction error of the projection
/// round-trip and cosine distance to the nearest training-gallery identity.
pub fn mia_features<E: Scalar>(
    x: &ArrayD<E>,
    enc: &crate::nets::Encoder<E>,
    gen: &crate::nets::Generator<E>,
    e_id: &crate::nets::IdentityEmbedder<E>,
    train_gallery: &[EmbeddingVector],
) -> Result<Vec<f64>> {
    if train_gallery.is_empty() {
        return Err(Error::Config("mia_features: empty training gallery".into()));
    }
    let recon = gen.generate(&enc.encode(x)?)?;
    let n = x.len() as f64;
    let err = x
        .iter()
        .zip(recon.iter())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum::<f64>()
        / n;
    let emb = e_id.embed_identity(x)?;
    let mut min_d = f64::INFINITY;
    for g in train_gallery {
        min_d = min_d.min(cos_distance(&emb, g)?);
    }
    Ok(vec![err, min_d])
}

/// Trains a logistic-regression attacker on member/non-member features and
/// evaluates it on the target set with inherited membership labels.
/// Features are standardized by training-set statistics; optimization is
/// full-batch gradient descent, so the outcome is deterministic.
pub fn mia_eval(
    train_feats: &[Vec<f64>],
    train_labels: &[bool],
    target_feats: &[Vec<f64>],
    target_labels: &[bool],
    cfg: &MiaConfig,
) -> Result<MiaOutcome> {
    if train_feats.is_empty() || train_feats.len() != train_labels.len() {
        return Err(Error::Config("mia_eval: empty or misaligned training set".into()));
    }
    if target_feats.len() != target_labels.len() {
        return Err(Error::Config("mia_eval: misaligned target set".into()));
    }
    if train_labels.iter().all(|&l| l) || train_labels.iter().all(|&l| !l) {
        return Err(Error::Config("mia_eval: training set must contain both classes".into()));
    }
    let d = train_feats[0].len();
    if train_feats.iter().chain(target_feats).any(|f| f.len() != d) {
        return Err(Error::Config("mia_eval: inconsistent feature dimensions".into()));
    }

    // Standardize with training statistics.
    let n = train_feats.len() as f64;
    let mut mean = vec![0.0; d];
    for f in train_feats {
        for (m, &v) in mean.iter_mut().zip(f) {
            *m += v / n;
        }
    }
    let mut std = vec![0.0; d];
    for f in train_feats {
        for k in 0..d {
            std[k] += (f[k] - mean[k]).powi(2) / n;
        }
    }
    for s in &mut std {
        *s = s.sqrt().max(1e-12);
    }
    let norm = |f: &[f64]| -> Vec<f64> {
        f.iter().zip(mean.iter().zip(&std)).map(|(&v, (m, s))| (v - m) / s).collect()
    };
    let xs: Vec<Vec<f64>> = train_feats.iter().map(|f| norm(f)).collect();

    // Full-batch logistic regression from zero weights.
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    for _ in 0..cfg.steps {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, &y) in xs.iter().zip(train_labels) {
            let z: f64 = w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>() + b;
            let p = 1.0 / (1.0 + (-z).exp());
            let err = p - if y { 1.0 } else { 0.0 };
            for (g, &xi) in gw.iter_mut().zip(x) {
                *g += err * xi / n;
            }
            gb += err / n;
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= cfg.lr * g;
        }
        b -= cfg.lr * gb;
    }

    let accuracy = |feats: &[Vec<f64>], labels: &[bool]| -> f64 {
        if feats.is_empty() {
            return f64::NAN;
        }
        let mut correct = 0usize;
        for (f, &y) in feats.iter().zip(labels) {
            let x = norm(f);
            let z: f64 = w.iter().zip(&x).map(|(wi, xi)| wi * xi).sum::<f64>() + b;
            if (z >= 0.0) == y {
                correct += 1;
            }
        }
        correct as f64 / feats.len() as f64
    };
    Ok(MiaOutcome {
        train_acc: accuracy(train_feats, train_labels),
        target_acc: accuracy(target_feats, target_labels),
    })
}

// ---------------------------------------------------------------------------
// Utility preservation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityScores {
    pub acc: f64,
    pub ap: f64,
    pub auroc: f64,
    pub f1: f64,
}

fn class_ap(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).expect("finite scores").then(i.cmp(&j)));
    let mut tp = 0usize;
    let mut ap = 0.0;
    for (k, &i) in order.iter().enumerate() {
        if labels[i] {
            tp += 1;
            ap += tp as f64 / (k + 1) as f64;
        }
    }
    Some(ap / n_pos as f64)
}

fn class_auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    // Average ranks (1-based, ties averaged), then the Mann-Whitney statistic.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].partial_cmp(&scores[j]).expect("finite scores"));
    let mut ranks = vec![0.0; scores.len()];
    let mut k = 0;
    while k < order.len() {
        let mut m = k;
        while m + 1 < order.len() && scores[order[m + 1]] == scores[order[k]] {
            m += 1;
        }
        let avg = (k + m + 2) as f64 / 2.0;
        for &i in &order[k..=m] {
            ranks[i] = avg;
        }
        k = m + 1;
    }
    let rank_sum: f64 = labels.iter().zip(&ranks).filter(|(&l, _)| l).map(|(_, &r)| r).sum();
    Some((rank_sum - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0) / (n_pos as f64 * n_neg as f64))
}

/// Macro-averaged multi-label scores at a 0.5 decision threshold. Classes
/// whose ground truth is single-class are skipped for AP/AUROC/F1.
pub fn utility_scores(probs: &[Vec<f64>], labels: &[Vec<u8>]) -> Result<UtilityScores> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::Config("utility_scores: empty or misaligned inputs".into()));
    }
    let c = probs[0].len();
    if c == 0 || probs.iter().any(|p| p.len() != c) || labels.iter().any(|l| l.len() != c) {
        return Err(Error::Config("utility_scores: inconsistent class counts".into()));
    }
    let mut acc_sum = 0.0;
    let mut ap_sum = 0.0;
    let mut auroc_sum = 0.0;
    let mut f1_sum = 0.0;
    let mut ranked_classes = 0usize;
    for k in 0..c {
        let s: Vec<f64> = probs.iter().map(|p| p[k]).collect();
        let y: Vec<bool> = labels.iter().map(|l| l[k] != 0).collect();
        let correct = s.iter().zip(&y).filter(|(&p, &t)| (p >= 0.5) == t).count();
        acc_sum += correct as f64 / s.len() as f64;
        if let (Some(ap), Some(auroc)) = (class_ap(&s, &y), class_auroc(&s, &y)) {
            let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
            for (&p, &t) in s.iter().zip(&y) {
                match (t, p >= 0.5) {
                    (true, true) => tp += 1,
                    (false, true) => fp += 1,
                    (true, false) => fn_ += 1,
                    _ => {}
                }
            }
            f1_sum += if 2 * tp + fp + fn_ == 0 {
                0.0
            } else {
                2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
            };
            ap_sum += ap;
            auroc_sum += auroc;
            ranked_classes += 1;
        }
    }
    if ranked_classes == 0 {
        return Err(Error::Config("utility_scores: every class is single-class".into()));
    }
    let r = ranked_classes as f64;
    Ok(UtilityScores {
        acc: acc_sum / c as f64,
        ap: ap_sum / r,
        auroc: auroc_sum / r,
        f1: f1_sum / r,
    })
}

/// One named training variant for utility preservation.
pub struct UtilityVariant<'a, E: Scalar> {
    pub name: String,
    pub images: &'a [ArrayD<E>],
    pub labels: &'a [Vec<f64>],
}

/// Trains a fresh utility classifier per variant under one shared
/// architecture and budget, then scores each on the same real test split.
pub fn utility_preservation_eval<E: Scalar>(
    variants: &[UtilityVariant<'_, E>],
    test_images: &[ArrayD<E>],
    test_labels: &[Vec<u8>],
    cfg: &EmbedderConfig,
    opts: &AuxTrainOpts,
) -> Result<Vec<(String, UtilityScores)>> {
    if test_images.is_empty() || test_images.len() != test_labels.len() {
        return Err(Error::Config("utility eval: empty or misaligned test set".into()));
    }
    for x in test_images {
        if x.shape() != [1, cfg.resolution, cfg.resolution] {
            return Err(Error::shape(
                format!("[1, {0}, {0}]", cfg.resolution),
                format!("{:?}", x.shape()),
            ));
        }
    }
    let mut out = Vec::with_capacity(variants.len());
    for v in variants {
        let net = UtilityEmbedder::train(cfg.clone(), v.images, v.labels, opts)?;
        let mut probs = Vec::with_capacity(test_images.len());
        for x in test_images {
            probs.push(net.classify_utility(x)?);
        }
        out.push((v.name.clone(), utility_scores(&probs, test_labels)?));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Report container
// ---------------------------------------------------------------------------

/// Assembled privacy-risk numbers for one anonymization variant.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RiskReport {
    pub hr: f64,
    pub lc_nr: usize,
    pub lc_na: usize,
    /// Verification metrics keyed by pair kind name.
    pub linkability: std::collections::BTreeMap<String, VerificationMetrics>,
    pub mia: Option<MiaOutcome>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(theta_deg: f64) -> EmbeddingVector {
        let t = theta_deg.to_radians();
        EmbeddingVector { v: vec![t.cos(), t.sin()] }
    }

    fn rand_unit(rng: &mut ChaCha8Rng, d: usize) -> EmbeddingVector {
        use rand_distr::StandardNormal;
        let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        EmbeddingVector { v: v.into_iter().map(|x| x / n).collect() }
    }

    #[test]
    fn distance_rank_basics_and_oracle() {
        let q = unit(0.0);
        // Self-match gallery.
        assert_eq!(distance_rank(&q, &[q.clone()], 0).unwrap(), 0);
        // Target farthest of n.
        let gallery = vec![unit(5.0), unit(10.0), unit(170.0)];
        assert_eq!(distance_rank(&q, &gallery, 2).unwrap(), 2);
        // Errors.
        assert!(distance_rank(&q, &[], 0).is_err());
        assert!(distance_rank(&q, &gallery, 3).is_err());

        // Brute-force stable-sort oracle on random 20-item galleries.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let query = rand_unit(&mut rng, 6);
            let gallery: Vec<EmbeddingVector> = (0..20).map(|_| rand_unit(&mut rng, 6)).collect();
            let dists: Vec<f64> = gallery
                .iter()
                .map(|g| 1.0 - cosine_similarity(&query, g, COSINE_EPS).unwrap())
                .collect();
            for target in 0..gallery.len() {
                let mut order: Vec<usize> = (0..gallery.len()).collect();
                order.sort_by(|&i, &j| dists[i].partial_cmp(&dists[j]).unwrap().then(i.cmp(&j)));
                let oracle = order.iter().position(|&i| i == target).unwrap();
                assert_eq!(distance_rank(&query, &gallery, target).unwrap(), oracle);
            }
        }
    }

    #[test]
    fn identity_anonymizer_has_zero_lc_and_hr() {
        let real: Vec<EmbeddingVector> = (0..7).map(|i| unit(10.0 * i as f64)).collect();
        let anon = real.clone();
        let (lc_nr, lc_na) = local_cloaking(&real, &anon).unwrap();
        assert_eq!((lc_nr, lc_na), (0, 0));
        assert_eq!(hidden_rate(&real, &anon).unwrap(), 0.0);
    }

    #[test]
    fn negated_embeddings_are_fully_hidden() {
        let real: Vec<EmbeddingVector> = (0..5).map(|i| unit(10.0 + 13.0 * i as f64)).collect();
        let anon: Vec<EmbeddingVector> = real
            .iter()
            .map(|e| EmbeddingVector { v: e.v.iter().map(|x| -x).collect() })
            .collect();
        assert_eq!(hidden_rate(&real, &anon).unwrap(), 1.0);
    }

    /// Five images with hand-placed angular embeddings; ranks enumerated by
    /// hand in the module tests' derivation notes.
    #[test]
    fn five_image_fixture_matches_hand_enumeration() {
        let real: Vec<EmbeddingVector> =
            [0.0, 10.0, 20.0, 30.0, 40.0].iter().map(|&t| unit(t)).collect();
        let anon: Vec<EmbeddingVector> =
            [2.0, 39.0, 6.0, 37.0, 16.0].iter().map(|&t| unit(t)).collect();
        // Ranks of the real source seen from each anonymization: 0,3,2,1,4
        // -> lower median 2. Ranks of the anonymization seen from each real
        // image: 0,4,1,0,2 -> lower median 1. Hidden: 3 of 5.
        let (lc_nr, lc_na) = local_cloaking(&real, &anon).unwrap();
        assert_eq!((lc_nr, lc_na), (2, 1));
        assert!((hidden_rate(&real, &anon).unwrap() - 0.6).abs() < 1e-15);
        assert!(local_cloaking(&real, &anon[..4]).is_err());
    }

    #[test]
    fn unrelated_anonymizations_have_median_rank_near_half() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 100;
            let real: Vec<EmbeddingVector> = (0..n).map(|_| rand_unit(&mut rng, 8)).collect();
            let anon: Vec<EmbeddingVector> = (0..n).map(|_| rand_unit(&mut rng, 8)).collect();
            let (lc_nr, lc_na) = local_cloaking(&real, &anon).unwrap();
            for lc in [lc_nr, lc_na] {
                assert!((30..=70).contains(&lc), "seed {seed}: median rank {lc} outside [30,70]");
            }
        }
    }

    #[test]
    fn lc_and_hr_are_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let real: Vec<EmbeddingVector> = (0..12).map(|_| rand_unit(&mut rng, 5)).collect();
        let anon: Vec<EmbeddingVector> = (0..12).map(|_| rand_unit(&mut rng, 5)).collect();
        let base_lc = local_cloaking(&real, &anon).unwrap();
        let base_hr = hidden_rate(&real, &anon).unwrap();
        let mut perm: Vec<usize> = (0..12).collect();
        for _ in 0..5 {
            perm.shuffle(&mut rng);
            let r: Vec<EmbeddingVector> = perm.iter().map(|&i| real[i].clone()).collect();
            let a: Vec<EmbeddingVector> = perm.iter().map(|&i| anon[i].clone()).collect();
            assert_eq!(local_cloaking(&r, &a).unwrap(), base_lc);
            assert_eq!(hidden_rate(&r, &a).unwrap(), base_hr);
        }
    }

    #[test]
    fn build_pairs_small_inner_case_is_exhaustive_and_balanced() {
        // 2 patients x 2 images: indices 0,1 belong to patient 3 and 2,3 to
        // patient 8.
        let ids = [3, 3, 8, 8];
        let pairs = build_pairs(&ids, PairKind::Inner, 0).unwrap();
        let pos: Vec<(usize, usize)> =
            pairs.iter().filter(|p| p.same_patient).map(|p| (p.a, p.b)).collect();
        let neg: Vec<(usize, usize)> =
            pairs.iter().filter(|p| !p.same_patient).map(|p| (p.a, p.b)).collect();
        assert_eq!(pos.len(), 2);
        assert_eq!(neg.len(), 2);
        let mut sorted_pos = pos.clone();
        sorted_pos.sort_unstable();
        assert_eq!(sorted_pos, vec![(0, 1), (2, 3)]);
        for (a, b) in neg {
            assert_ne!(ids[a], ids[b]);
        }
        assert!(pairs.iter().all(|p| p.kind == PairKind::Inner));
    }

    #[test]
    fn build_pairs_outer_counts_and_determinism() {
        let ids = [0, 0, 1, 1, 2, 2];
        let pairs = build_pairs(&ids, PairKind::Outer, 42).unwrap();
        let pos: Vec<&VerificationPair> = pairs.iter().filter(|p| p.same_patient).collect();
        assert_eq!(pos.len(), ids.len(), "outer positives count = test-set size");
        assert!(pos.iter().all(|p| p.a == p.b));
        for p in pairs.iter().filter(|p| !p.same_patient) {
            assert_ne!(ids[p.a], ids[p.b]);
        }
        // Determinism under the same seed; single-patient sets are rejected.
        assert_eq!(pairs, build_pairs(&ids, PairKind::Outer, 42).unwrap());
        assert_ne!(pairs, build_pairs(&ids, PairKind::Outer, 43).unwrap());
        assert!(build_pairs(&[5, 5, 5], PairKind::Outer, 0).is_err());
    }

    #[test]
    fn verification_eval_matches_hand_confusion() {
        // 10 hand-labeled pairs with fixed scores, threshold 0.5.
        let scores = [0.9, 0.8, 0.75, 0.6, 0.55, 0.45, 0.4, 0.3, 0.2, 0.1];
        let labels = [true, true, false, true, false, true, false, false, true, false];
        let decisions: Vec<bool> = scores.iter().map(|&s| s >= 0.5).collect();
        let m = verification_eval(&labels, &decisions).unwrap();
        // By hand: TP {0.9,0.8,0.6}, FP {0.75,0.55}, FN {0.45,0.2}, TN rest.
        assert_eq!((m.tp, m.fp, m.tn, m.fn_), (3, 2, 3, 2));
        assert!((m.tar - 0.6).abs() < 1e-15);
        assert!((m.far - 0.4).abs() < 1e-15);
        assert!((m.acc - 0.6).abs() < 1e-15);
        assert!((m.f1 - 6.0 / 10.0).abs() < 1e-15);
        // TAR/FAR recomputed from released counts match exactly.
        assert_eq!(m.tar, m.tp as f64 / (m.tp + m.fn_) as f64);
        assert_eq!(m.far, m.fp as f64 / (m.fp + m.tn) as f64);
    }

    #[test]
    fn degenerate_verifiers_have_expected_metrics() {
        let labels = [true, true, false, false, false];
        // Always "same".
        let all_yes = verification_eval(&labels, &[true; 5]).unwrap();
        assert_eq!(all_yes.tar, 1.0);
        assert_eq!(all_yes.far, 1.0);
        assert!((all_yes.acc - 0.4).abs() < 1e-15, "accuracy = positive prevalence");
        // Ground-truth verifier.
        let oracle = verification_eval(&labels, &labels).unwrap();
        assert_eq!((oracle.f1, oracle.acc, oracle.tar, oracle.far), (1.0, 1.0, 1.0, 0.0));
        // Empty and single-class inputs are rejected.
        assert!(verification_eval(&[], &[]).is_err());
        assert!(verification_eval(&[true, true], &[true, false]).is_err());
    }

    #[test]
    fn verification_metrics_invariant_under_pair_shuffling() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let real: Vec<EmbeddingVector> = (0..10).map(|_| rand_unit(&mut rng, 4)).collect();
        let anon: Vec<EmbeddingVector> = (0..10).map(|_| rand_unit(&mut rng, 4)).collect();
        let ids = [0, 0, 1, 1, 2, 2, 3, 3, 4, 4];
        let mut pairs = build_pairs(&ids, PairKind::Outer, 3).unwrap();
        let base = evaluate_pairs(&pairs, &real, &anon, 0.2).unwrap();
        for _ in 0..5 {
            pairs.shuffle(&mut rng);
            assert_eq!(evaluate_pairs(&pairs, &real, &anon, 0.2).unwrap(), base);
        }
    }

    #[test]
    fn threshold_calibration_maximizes_f1() {
        // Separable scores: any threshold in (0.4, 0.6) gives F1 = 1.
        let scores = [0.9, 0.8, 0.6, 0.4, 0.2, 0.1];
        let labels = [true, true, true, false, false, false];
        let t = calibrate_threshold(&scores, &labels).unwrap();
        assert!((0.4..0.6).contains(&t), "{t}");
        let decisions: Vec<bool> = scores.iter().map(|&s| s >= t).collect();
        assert_eq!(verification_eval(&labels, &decisions).unwrap().f1, 1.0);
        // Single-class calibration is rejected.
        assert!(calibrate_threshold(&scores, &[true; 6]).is_err());
    }

    #[test]
    fn mia_on_separable_features_transfers_to_identical_target() {
        // Members: low reconstruction error, small identity distance.
        let members: Vec<Vec<f64>> = (0..20).map(|i| vec![0.01 + 1e-4 * i as f64, 0.1]).collect();
        let non: Vec<Vec<f64>> = (0..20).map(|i| vec![0.09 + 1e-4 * i as f64, 0.9]).collect();
        let mut feats = members.clone();
        feats.extend(non.clone());
        let mut labels = vec![true; 20];
        labels.extend(vec![false; 20]);
        let out = mia_eval(&feats, &labels, &feats, &labels, &MiaConfig::default()).unwrap();
        assert_eq!(out.train_acc, 1.0);
        // Identity-map anonymization: the attack transfers unchanged.
        assert_eq!(out.target_acc, out.train_acc);
        // Degenerate single-class training set.
        assert!(mia_eval(&members, &vec![true; 20], &feats, &labels, &MiaConfig::default()).is_err());
    }

    #[test]
    fn mia_on_shuffled_labels_is_chance_level() {
        let mut accs = Vec::new();
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let feats: Vec<Vec<f64>> =
                (0..60).map(|_| vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]).collect();
            let mut labels: Vec<bool> = (0..60).map(|i| i % 2 == 0).collect();
            labels.shuffle(&mut rng);
            let out = mia_eval(&feats, &labels, &feats, &labels, &MiaConfig::default()).unwrap();
            accs.push(out.target_acc);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 0.5).abs() < 0.15, "chance-level check failed: {accs:?}");
    }

    #[test]
    fn utility_scores_match_hand_computation() {
        // Single class, four samples: scores 0.9,0.8,0.7,0.6 with labels
        // 1,0,1,0. By hand: AP = (1 + 2/3)/2 = 5/6, AUROC = 3/4. All four
        // scores clear the 0.5 threshold, so TP=2, FP=2, FN=0:
        // acc = 2/4, F1 = 2*2/(2*2+2+0) = 2/3.
        let probs = vec![vec![0.9], vec![0.8], vec![0.7], vec![0.6]];
        let labels = vec![vec![1], vec![0], vec![1], vec![0]];
        let s = utility_scores(&probs, &labels).unwrap();
        assert!((s.ap - 5.0 / 6.0).abs() < 1e-12);
        assert!((s.auroc - 0.75).abs() < 1e-12);
        assert!((s.acc - 0.5).abs() < 1e-12);
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-12);
        // Perfect separation on a second class joins the macro average.
        let probs2 = vec![vec![0.9, 0.9], vec![0.8, 0.1], vec![0.7, 0.8], vec![0.6, 0.2]];
        let labels2 = vec![vec![1, 1], vec![0, 0], vec![1, 1], vec![0, 0]];
        let s2 = utility_scores(&probs2, &labels2).unwrap();
        assert!((s2.auroc - (0.75 + 1.0) / 2.0).abs() < 1e-12);
        assert!((s2.ap - (5.0 / 6.0 + 1.0) / 2.0).abs() < 1e-12);
        // Degenerate: single-class everywhere.
        let flat = vec![vec![1u8], vec![1], vec![1], vec![1]];
        assert!(utility_scores(&probs, &flat).is_err());
    }

    #[test]
    fn random_scores_have_chance_auroc() {
        let mut aurocs = Vec::new();
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let probs: Vec<Vec<f64>> = (0..200).map(|_| vec![rng.gen_range(0.0..1.0)]).collect();
            let labels: Vec<Vec<u8>> = (0..200).map(|_| vec![u8::from(rng.gen_bool(0.5))]).collect();
            aurocs.push(utility_scores(&probs, &labels).unwrap().auroc);
        }
        let mean = aurocs.iter().sum::<f64>() / aurocs.len() as f64;
        assert!((mean - 0.5).abs() < 0.1, "{aurocs:?}");
    }
}
