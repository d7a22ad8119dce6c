//! Verification metrics and the privacy measurement suite: threshold
//! matching, EER / best-F1 / ROC / PR over similarity score sets,
//! intra/inter distance distributions, cross-key correlation conditions,
//! histogram entropy / mutual information estimates, and the closed-form
//! privacy-accuracy trade-off model.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("score set has an empty {0} list")]
    EmptyScores(&'static str),
    #[error("zero-norm template")]
    ZeroNormTemplate,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Genuine and impostor cosine similarities.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl ScoreSet {
    fn check(&self) -> Result<(), EvalError> {
        if self.genuine.is_empty() {
            return Err(EvalError::EmptyScores("genuine"));
        }
        if self.impostor.is_empty() {
            return Err(EvalError::EmptyScores("impostor"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Match,
    NonMatch,
}

/// Threshold decision on cosine similarity; Match strictly above `theta`.
pub fn match_templates(
    query: &[f64],
    enrolled: &[f64],
    theta: f64,
) -> Result<(Decision, f64), EvalError> {
    if query.len() != enrolled.len() {
        return Err(EvalError::ShapeMismatch(format!(
            "{} vs {}",
            query.len(),
            enrolled.len()
        )));
    }
    if crate::linalg::norm(query) == 0.0 || crate::linalg::norm(enrolled) == 0.0 {
        return Err(EvalError::ZeroNormTemplate);
    }
    let s = crate::linalg::cosine(query, enrolled);
    Ok((if s > theta { Decision::Match } else { Decision::NonMatch }, s))
}

fn far_frr(scores: &ScoreSet, theta: f64) -> (f64, f64) {
    let far =
        scores.impostor.iter().filter(|&&s| s > theta).count() as f64 / scores.impostor.len() as f64;
    let frr =
        scores.genuine.iter().filter(|&&s| s <= theta).count() as f64 / scores.genuine.len() as f64;
    (far, frr)
}

fn sorted_union(scores: &ScoreSet) -> Vec<f64> {
    let mut all: Vec<f64> = scores.genuine.iter().chain(&scores.impostor).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    all
}

/// Equal error rate by threshold sweep over the score union, linearly
/// interpolated between the bracketing thresholds where FAR crosses FRR.
/// Returns `(eer, threshold_at_eer)`.
pub fn compute_eer(scores: &ScoreSet) -> Result<(f64, f64), EvalError> {
    scores.check()?;
    let mut thresholds = sorted_union(scores);
    // Sentinel below every score: FAR = 1 (or less), FRR = 0.
    thresholds.insert(0, thresholds[0] - 1.0);

    let mut prev_theta = thresholds[0];
    let (mut prev_far, mut prev_frr) = far_frr(scores, prev_theta);
    if (prev_far - prev_frr).abs() < 1e-15 {
        return Ok((prev_far, prev_theta));
    }
    for &theta in &thresholds[1..] {
        let (far, frr) = far_frr(scores, theta);
        let diff = far - frr;
        if diff.abs() < 1e-15 {
            return Ok((far, theta));
        }
        if (prev_far - prev_frr) > 0.0 && diff < 0.0 {
            // Linear interpolation on both curves between the brackets.
            let denom = (far - prev_far) - (frr - prev_frr);
            let alpha = if denom.abs() < 1e-300 {
                0.5
            } else {
                (prev_frr - prev_far) / denom
            };
            let eer = prev_far + alpha * (far - prev_far);
            let theta_at = prev_theta + alpha * (theta - prev_theta);
            return Ok((eer, theta_at));
        }
        prev_far = far;
        prev_frr = frr;
        prev_theta = theta;
    }
    // FAR stayed above FRR through the sweep (cannot happen with the
    // sentinel, but keep a defined answer).
    Ok((prev_far.max(prev_frr), prev_theta))
}

fn f1_at(scores: &ScoreSet, theta: f64) -> f64 {
    let tp = scores.genuine.iter().filter(|&&s| s > theta).count() as f64;
    let fp = scores.impostor.iter().filter(|&&s| s > theta).count() as f64;
    let fn_ = scores.genuine.len() as f64 - tp;
    if 2.0 * tp + fp + fn_ == 0.0 {
        0.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fn_)
    }
}

/// Threshold maximizing F1 (genuine pairs are the positive class), ties
/// broken toward the largest threshold. Returns `(theta, f1)`.
pub fn best_f1(scores: &ScoreSet) -> Result<(f64, f64), EvalError> {
    scores.check()?;
    let mut thresholds = sorted_union(scores);
    thresholds.insert(0, thresholds[0] - 1.0);
    let mut best = (thresholds[0], f1_at(scores, thresholds[0]));
    for &theta in &thresholds[1..] {
        let f1 = f1_at(scores, theta);
        if f1 >= best.1 {
            best = (theta, f1);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

/// ROC curve over descending thresholds: FPR non-decreasing, TPR
/// non-decreasing.
pub fn roc_points(scores: &ScoreSet) -> Result<Vec<RocPoint>, EvalError> {
    scores.check()?;
    let mut thresholds = sorted_union(scores);
    thresholds.insert(0, thresholds[0] - 1.0);
    let mut points: Vec<RocPoint> = thresholds
        .iter()
        .rev()
        .map(|&theta| {
            let (far, frr) = far_frr(scores, theta);
            RocPoint { threshold: theta, fpr: far, tpr: 1.0 - frr }
        })
        .collect();
    points.insert(
        0,
        RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 },
    );
    Ok(points)
}

pub fn pr_points(scores: &ScoreSet) -> Result<Vec<PrPoint>, EvalError> {
    scores.check()?;
    let mut thresholds = sorted_union(scores);
    thresholds.insert(0, thresholds[0] - 1.0);
    Ok(thresholds
        .iter()
        .rev()
        .map(|&theta| {
            let tp = scores.genuine.iter().filter(|&&s| s > theta).count() as f64;
            let fp = scores.impostor.iter().filter(|&&s| s > theta).count() as f64;
            let recall = tp / scores.genuine.len() as f64;
            let precision = if tp + fp == 0.0 { 1.0 } else { tp / (tp + fp) };
            PrPoint { threshold: theta, recall, precision }
        })
        .collect())
}

pub const DISTANCE_BINS: usize = 50;

/// Cosine-distance (`1 - S`) histograms over `[0, 2]` with 50 uniform bins.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistanceDistributions {
    pub intra_hist: Vec<usize>,
    pub inter_hist: Vec<usize>,
    pub intra_mean: f64,
    pub inter_mean: f64,
    /// `inter_mean - intra_mean`; larger is better separated.
    pub gap: f64,
}

pub fn distance_distributions(scores: &ScoreSet) -> Result<DistanceDistributions, EvalError> {
    scores.check()?;
    let hist = |sims: &[f64]| {
        let mut h = vec![0usize; DISTANCE_BINS];
        for &s in sims {
            let d = (1.0 - s).clamp(0.0, 2.0);
            let bin = ((d / 2.0) * DISTANCE_BINS as f64) as usize;
            h[bin.min(DISTANCE_BINS - 1)] += 1;
        }
        h
    };
    let mean_dist =
        |sims: &[f64]| sims.iter().map(|s| 1.0 - s).sum::<f64>() / sims.len() as f64;
    let intra_mean = mean_dist(&scores.genuine);
    let inter_mean = mean_dist(&scores.impostor);
    Ok(DistanceDistributions {
        intra_hist: hist(&scores.genuine),
        inter_hist: hist(&scores.impostor),
        intra_mean,
        inter_mean,
        gap: inter_mean - intra_mean,
    })
}

/// Mean Pearson correlation across template coordinates, one mean per
/// (same subject?, same key?) condition. `None` where a condition has no
/// pairs.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CorrelationByCondition {
    pub same_subject_same_key: Option<f64>,
    pub same_subject_diff_key: Option<f64>,
    pub diff_subject_same_key: Option<f64>,
    pub diff_subject_diff_key: Option<f64>,
}

/// `templates[i] = (subject, key, coordinates)`; correlation is computed per
/// unordered pair and averaged within each condition.
pub fn key_correlation_matrix(templates: &[(usize, u64, Vec<f64>)]) -> CorrelationByCondition {
    let mut sums = [(0.0, 0usize); 4];
    for i in 0..templates.len() {
        for j in (i + 1)..templates.len() {
            let (sa, ka, va) = &templates[i];
            let (sb, kb, vb) = &templates[j];
            let idx = match (sa == sb, ka == kb) {
                (true, true) => 0,
                (true, false) => 1,
                (false, true) => 2,
                (false, false) => 3,
            };
            sums[idx].0 += crate::linalg::pearson(va, vb);
            sums[idx].1 += 1;
        }
    }
    let mean = |s: (f64, usize)| if s.1 == 0 { None } else { Some(s.0 / s.1 as f64) };
    CorrelationByCondition {
        same_subject_same_key: mean(sums[0]),
        same_subject_diff_key: mean(sums[1]),
        diff_subject_same_key: mean(sums[2]),
        diff_subject_diff_key: mean(sums[3]),
    }
}

/// Mean absolute Pearson correlation over same-subject different-key pairs.
pub fn mean_abs_cross_key_correlation(templates: &[(usize, u64, Vec<f64>)]) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..templates.len() {
        for j in (i + 1)..templates.len() {
            let (sa, ka, va) = &templates[i];
            let (sb, kb, vb) = &templates[j];
            if sa == sb && ka != kb {
                sum += crate::linalg::pearson(va, vb).abs();
                count += 1;
            }
        }
    }
    if count == 0 {
        None
    } else {
        Some(sum / count as f64)
    }
}

pub const ENTROPY_BINS: usize = 32;

/// Histogram entropy / mutual-information summary. Values are in bits;
/// the estimator is a per-dimension fixed-bin histogram, averaged over
/// dimensions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntropyMiReport {
    pub h_z: f64,
    pub h_zt: f64,
    pub mi: f64,
    pub info_loss: f64,
    pub info_preservation: f64,
    pub bins: usize,
    pub widened_bins: bool,
    pub estimator: String,
    pub units: String,
}

fn column(rows: &[Vec<f64>], dim: usize) -> Vec<f64> {
    rows.iter().map(|r| r[dim]).collect()
}

fn bin_index(x: f64, lo: f64, hi: f64, bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    (((x - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1)
}

fn hist_entropy(values: &[f64], bins: usize) -> f64 {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-300 {
        return 0.0;
    }
    let mut counts = vec![0usize; bins];
    for &x in values {
        counts[bin_index(x, lo, hi, bins)] += 1;
    }
    let n = values.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

fn hist_mi(x: &[f64], y: &[f64], bins: usize) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let lo_x = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi_x = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo_y = y.iter().copied().fold(f64::INFINITY, f64::min);
    let hi_y = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi_x - lo_x < 1e-300 || hi_y - lo_y < 1e-300 {
        return 0.0;
    }
    let mut joint = vec![0usize; bins * bins];
    for (&xi, &yi) in x.iter().zip(y) {
        let bx = bin_index(xi, lo_x, hi_x, bins);
        let by = bin_index(yi, lo_y, hi_y, bins);
        joint[bx * bins + by] += 1;
    }
    let n = x.len() as f64;
    let mut px = vec![0.0; bins];
    let mut py = vec![0.0; bins];
    for bx in 0..bins {
        for by in 0..bins {
            let p = joint[bx * bins + by] as f64 / n;
            px[bx] += p;
            py[by] += p;
        }
    }
    let mut mi = 0.0;
    for bx in 0..bins {
        for by in 0..bins {
            let p = joint[bx * bins + by] as f64 / n;
            if p > 0.0 {
                mi += p * (p / (px[bx] * py[by])).log2();
            }
        }
    }
    mi
}

/// Per-dimension histogram entropies of `z` and `z_t` plus the mutual
/// information between corresponding dimensions, all averaged over
/// dimensions. Fewer than `ENTROPY_BINS` samples fall back to wider bins
/// (and flag it).
pub fn entropy_mi_report(z: &[Vec<f64>], z_t: &[Vec<f64>]) -> Result<EntropyMiReport, EvalError> {
    if z.is_empty() || z.len() != z_t.len() {
        return Err(EvalError::ShapeMismatch(format!(
            "{} z samples vs {} z_t samples",
            z.len(),
            z_t.len()
        )));
    }
    let d = z[0].len();
    if z_t[0].len() != d {
        return Err(EvalError::ShapeMismatch(format!(
            "dimension {} vs {}",
            d,
            z_t[0].len()
        )));
    }
    let n = z.len();
    let (bins, widened) = if n < ENTROPY_BINS {
        log::warn!("entropy estimate over {n} samples: widening bins");
        ((n / 2).max(2), true)
    } else {
        (ENTROPY_BINS, false)
    };

    let mut h_z = 0.0;
    let mut h_zt = 0.0;
    let mut mi = 0.0;
    for dim in 0..d {
        let zc = column(z, dim);
        let tc = column(z_t, dim);
        h_z += hist_entropy(&zc, bins);
        h_zt += hist_entropy(&tc, bins);
        mi += hist_mi(&zc, &tc, bins);
    }
    let inv = 1.0 / d as f64;
    let (h_z, h_zt, mi) = (h_z * inv, h_zt * inv, mi * inv);
    Ok(EntropyMiReport {
        h_z,
        h_zt,
        mi,
        info_loss: h_z - mi,
        info_preservation: if h_z > 0.0 { mi / h_z } else { 0.0 },
        bins,
        widened_bins: widened,
        estimator: "per-dimension fixed-bin histogram".into(),
        units: "bits".into(),
    })
}

/// Parameters of the closed-form privacy/accuracy trade-off model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffParams {
    /// Noise accumulation rate per diffusion step.
    pub c: f64,
    /// Weight of the truncation information-loss term.
    pub big_c: f64,
    /// EER scale.
    pub a: f64,
    /// Sensitivity of EER to the retained spectral dimensions.
    pub alpha: f64,
    /// Vertex count `N`.
    pub n_vertices: f64,
}

impl Default for TradeoffParams {
    fn default() -> Self {
        Self { c: 0.1, big_c: 1.0, a: 0.1, alpha: 0.1, n_vertices: 642.0 }
    }
}

/// `delta_h = K/2 ln(1 + cT) + C ln(N/K)`,
/// `delta_eer = A exp(-alpha K / (1 + cT))`.
pub fn tradeoff_model(k: usize, t: usize, p: &TradeoffParams) -> (f64, f64) {
    let kf = k as f64;
    let tf = t as f64;
    let delta_h = kf / 2.0 * (1.0 + p.c * tf).ln() + p.big_c * (p.n_vertices / kf).ln();
    let delta_eer = p.a * (-p.alpha * kf / (1.0 + p.c * tf)).exp();
    (delta_h, delta_eer)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub k: usize,
    pub t: usize,
    pub delta_h: f64,
    pub delta_eer: f64,
}

pub fn tradeoff_grid(ks: &[usize], ts: &[usize], p: &TradeoffParams) -> Vec<TradeoffPoint> {
    let mut out = Vec::with_capacity(ks.len() * ts.len());
    for &k in ks {
        for &t in ts {
            let (delta_h, delta_eer) = tradeoff_model(k, t, p);
            out.push(TradeoffPoint { k, t, delta_h, delta_eer });
        }
    }
    out
}

/// Accuracy metrics for one matching domain (unprotected or protected).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccuracyMetrics {
    pub eer: f64,
    pub eer_threshold: f64,
    pub best_threshold: f64,
    pub f1: f64,
    pub genuine_mean: f64,
    pub impostor_mean: f64,
    pub roc: Vec<RocPoint>,
    pub pr: Vec<PrPoint>,
    pub distances: DistanceDistributions,
}

pub fn accuracy_metrics(scores: &ScoreSet) -> Result<AccuracyMetrics, EvalError> {
    let (eer, eer_threshold) = compute_eer(scores)?;
    let (best_threshold, f1) = best_f1(scores)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(AccuracyMetrics {
        eer,
        eer_threshold,
        best_threshold,
        f1,
        genuine_mean: mean(&scores.genuine),
        impostor_mean: mean(&scores.impostor),
        roc: roc_points(scores)?,
        pr: pr_points(scores)?,
        distances: distance_distributions(scores)?,
    })
}

/// Full evaluation output; assembled by the pipeline stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub k: usize,
    pub t: usize,
    pub d: usize,
    pub test_subjects: usize,
    pub pair_count: usize,
    pub unprotected: AccuracyMetrics,
    pub protected: AccuracyMetrics,
    pub correlation: CorrelationByCondition,
    pub cross_key_abs_correlation: Option<f64>,
    pub cross_key_abs_cosine: Option<f64>,
    pub entropy_by_t: Vec<(usize, EntropyMiReport)>,
}

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut s = String::from("threshold,fpr,tpr\n");
    for p in points {
        s.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.tpr));
    }
    s
}

pub fn pr_csv(points: &[PrPoint]) -> String {
    let mut s = String::from("threshold,recall,precision\n");
    for p in points {
        s.push_str(&format!("{},{},{}\n", p.threshold, p.recall, p.precision));
    }
    s
}

pub fn distance_csv(d: &DistanceDistributions) -> String {
    let mut s = String::from("bin_lo,bin_hi,intra_count,inter_count\n");
    let width = 2.0 / DISTANCE_BINS as f64;
    for i in 0..DISTANCE_BINS {
        s.push_str(&format!(
            "{},{},{},{}\n",
            i as f64 * width,
            (i + 1) as f64 * width,
            d.intra_hist[i],
            d.inter_hist[i]
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn match_decision_examples() {
        let a = vec![0.6, 0.8, 0.0];
        let (d, s) = match_templates(&a, &a, 0.99).unwrap();
        assert_eq!(d, Decision::Match);
        assert!((s - 1.0).abs() < 1e-12);

        // Orthogonal at theta = 0: similarity 0 is NOT > 0.
        let (d, s) = match_templates(&[1.0, 0.0], &[0.0, 1.0], 0.0).unwrap();
        assert_eq!(d, Decision::NonMatch);
        assert_eq!(s, 0.0);

        // S = 0.95 against theta = 0.99.
        let b = vec![0.95, (1.0f64 - 0.95 * 0.95).sqrt()];
        let (d, s) = match_templates(&[1.0, 0.0], &b, 0.99).unwrap();
        assert_eq!(d, Decision::NonMatch);
        assert!((s - 0.95).abs() < 1e-12);

        assert!(matches!(
            match_templates(&[0.0, 0.0], &[1.0, 0.0], 0.5),
            Err(EvalError::ZeroNormTemplate)
        ));
    }

    #[test]
    fn eer_perfect_separation() {
        let s = ScoreSet { genuine: vec![0.9, 0.8], impostor: vec![0.1, 0.2] };
        let (eer, _) = compute_eer(&s).unwrap();
        assert!(eer.abs() < 1e-12);
    }

    #[test]
    fn eer_quarter_example() {
        let s = ScoreSet {
            genuine: vec![0.9, 0.8, 0.7, 0.3],
            impostor: vec![0.6, 0.2, 0.1, 0.05],
        };
        let (eer, _) = compute_eer(&s).unwrap();
        assert!((eer - 0.25).abs() < 1e-12, "eer {eer}");
    }

    #[test]
    fn eer_indistinguishable_is_half() {
        let s = ScoreSet {
            genuine: vec![0.1, 0.4, 0.6, 0.9],
            impostor: vec![0.1, 0.4, 0.6, 0.9],
        };
        let (eer, _) = compute_eer(&s).unwrap();
        assert!((eer - 0.5).abs() < 1e-9, "eer {eer}");
    }

    #[test]
    fn eer_empty_rejected() {
        let s = ScoreSet { genuine: vec![], impostor: vec![0.2] };
        assert!(matches!(compute_eer(&s), Err(EvalError::EmptyScores("genuine"))));
    }

    /// Brute-force oracle: evaluate FAR/FRR on a 10^4-point dense grid and
    /// report `(FAR + FRR) / 2` where `|FAR - FRR|` is smallest. On balanced
    /// score sets without ties the difference steps through zero exactly, so
    /// this agrees with the interpolated sweep to full precision.
    fn eer_dense_oracle(scores: &ScoreSet, grid: usize) -> f64 {
        let lo = scores
            .genuine
            .iter()
            .chain(&scores.impostor)
            .copied()
            .fold(f64::INFINITY, f64::min)
            - 1e-3;
        let hi = scores
            .genuine
            .iter()
            .chain(&scores.impostor)
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
            + 1e-3;
        let mut best = (f64::INFINITY, 0.5);
        for i in 0..=grid {
            let theta = lo + (hi - lo) * i as f64 / grid as f64;
            let (far, frr) = far_frr(scores, theta);
            let gap = (far - frr).abs();
            if gap < best.0 {
                best = (gap, (far + frr) / 2.0);
            }
        }
        best.1
    }

    #[test]
    fn eer_matches_dense_oracle_on_balanced_random_sets() {
        let mut rng = SplitMix64::new(17);
        for trial in 0..10 {
            let genuine: Vec<f64> =
                (0..120).map(|_| 0.4 + 0.6 * rng.next_f64() * rng.next_f64()).collect();
            let impostor: Vec<f64> = (0..120).map(|_| rng.uniform(-0.2, 0.75)).collect();
            let s = ScoreSet { genuine, impostor };
            let (eer, _) = compute_eer(&s).unwrap();
            let oracle = eer_dense_oracle(&s, 10_000);
            assert!(
                (eer - oracle).abs() < 1e-6,
                "trial {trial}: {eer} vs oracle {oracle}"
            );
        }
    }

    #[test]
    fn best_f1_perfect_and_singleton() {
        let s = ScoreSet { genuine: vec![0.9, 0.8], impostor: vec![0.1, 0.2] };
        let (_, f1) = best_f1(&s).unwrap();
        assert_eq!(f1, 1.0);

        let s = ScoreSet { genuine: vec![1.0], impostor: vec![0.0] };
        let (theta, f1) = best_f1(&s).unwrap();
        assert_eq!(f1, 1.0);
        assert!(theta >= 0.0 && theta < 1.0);
    }

    #[test]
    fn roc_is_monotone() {
        let mut rng = SplitMix64::new(23);
        let s = ScoreSet {
            genuine: (0..80).map(|_| rng.uniform(0.0, 1.0)).collect(),
            impostor: (0..80).map(|_| rng.uniform(-0.5, 0.8)).collect(),
        };
        let roc = roc_points(&s).unwrap();
        for w in roc.windows(2) {
            assert!(w[1].fpr >= w[0].fpr - 1e-12);
            assert!(w[1].tpr >= w[0].tpr - 1e-12);
        }
        assert_eq!(roc.first().map(|p| (p.fpr, p.tpr)), Some((0.0, 0.0)));
        let last = roc.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
    }

    #[test]
    fn duplicated_scans_put_intra_mass_at_zero() {
        let s = ScoreSet { genuine: vec![1.0; 10], impostor: vec![0.0; 10] };
        let d = distance_distributions(&s).unwrap();
        assert_eq!(d.intra_hist[0], 10);
        assert!(d.intra_mean.abs() < 1e-12);
    }

    #[test]
    fn random_unit_vectors_inter_mean_near_one() {
        let mut rng = SplitMix64::new(29);
        let mut sims = Vec::with_capacity(10_000);
        for _ in 0..10_000 {
            let a = rng.normal_vec(64);
            let b = rng.normal_vec(64);
            sims.push(crate::linalg::cosine(&a, &b));
        }
        let s = ScoreSet { genuine: vec![0.0], impostor: sims };
        let d = distance_distributions(&s).unwrap();
        assert!((d.inter_mean - 1.0).abs() < 0.05, "inter mean {}", d.inter_mean);
    }

    #[test]
    fn correlation_identical_and_negated() {
        let v: Vec<f64> = (0..16).map(|i| (i as f64 * 0.71).sin()).collect();
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let templates =
            vec![(0usize, 1u64, v.clone()), (0usize, 1u64, v.clone()), (0usize, 2u64, neg)];
        let c = key_correlation_matrix(&templates);
        assert!((c.same_subject_same_key.unwrap() - 1.0).abs() < 1e-12);
        assert!((c.same_subject_diff_key.unwrap() + 1.0).abs() < 1e-12);
        assert!(c.diff_subject_same_key.is_none());
    }

    #[test]
    fn entropy_of_constant_is_zero() {
        let z = vec![vec![0.7; 4]; 100];
        let r = entropy_mi_report(&z, &z).unwrap();
        assert_eq!(r.h_z, 0.0);
        assert_eq!(r.mi, 0.0);
    }

    #[test]
    fn mi_of_identity_equals_entropy() {
        let mut rng = SplitMix64::new(31);
        let z: Vec<Vec<f64>> = (0..500).map(|_| rng.normal_vec(6)).collect();
        let r = entropy_mi_report(&z, &z).unwrap();
        assert!((r.mi - r.h_z).abs() < 1e-6, "mi {} vs h {}", r.mi, r.h_z);
        assert!((r.info_preservation - 1.0).abs() < 1e-6);
    }

    #[test]
    fn shuffled_pairing_has_low_mi() {
        let mut rng = SplitMix64::new(37);
        let z: Vec<Vec<f64>> = (0..5000).map(|_| rng.normal_vec(4)).collect();
        // Decouple by pairing each z with another sample's value.
        let mut z_t = z.clone();
        z_t.rotate_left(1);
        let r = entropy_mi_report(&z, &z_t).unwrap();
        assert!(r.mi < 0.2, "mi {}", r.mi);
        assert!(r.h_z > 3.0);
    }

    #[test]
    fn small_sample_widens_bins() {
        let mut rng = SplitMix64::new(41);
        let z: Vec<Vec<f64>> = (0..20).map(|_| rng.normal_vec(3)).collect();
        let r = entropy_mi_report(&z, &z).unwrap();
        assert!(r.widened_bins);
        assert_eq!(r.bins, 10);
    }

    #[test]
    fn tradeoff_zero_t_edge_case() {
        let p = TradeoffParams::default();
        let k = 10;
        let (dh, _) = tradeoff_model(k, 0, &p);
        let expected = p.big_c * (p.n_vertices / k as f64).ln();
        assert!((dh - expected).abs() < 1e-12);
    }

    #[test]
    fn tradeoff_monotonicities() {
        let p = TradeoffParams::default();
        let ks = [10usize, 20, 25];
        let ts = [25usize, 50, 75];
        // dH increasing in T for fixed K.
        for &k in &ks {
            let mut prev = tradeoff_model(k, 0, &p).0;
            for &t in &ts {
                let (dh, _) = tradeoff_model(k, t, &p);
                assert!(dh > prev, "dH not increasing at k={k}, t={t}");
                prev = dh;
            }
        }
        // dEER decreasing in K for fixed T, increasing in T for fixed K.
        for &t in &ts {
            let mut prev = f64::INFINITY;
            for &k in &ks {
                let (_, de) = tradeoff_model(k, t, &p);
                assert!(de < prev, "dEER not decreasing in K at k={k}, t={t}");
                prev = de;
            }
        }
        for &k in &ks {
            let mut prev = 0.0;
            for &t in &ts {
                let (_, de) = tradeoff_model(k, t, &p);
                assert!(de > prev, "dEER not increasing in T at k={k}, t={t}");
                prev = de;
            }
        }
        assert_eq!(tradeoff_grid(&ks, &ts, &p).len(), 9);
    }

    #[test]
    fn accuracy_metrics_bundle() {
        let s = ScoreSet {
            genuine: vec![0.95, 0.9, 0.85, 0.6],
            impostor: vec![0.5, 0.3, 0.2, 0.7],
        };
        let m = accuracy_metrics(&s).unwrap();
        assert!(m.eer >= 0.0 && m.eer <= 0.5);
        assert!(m.f1 > 0.0 && m.f1 <= 1.0);
        assert!(!m.roc.is_empty());
        assert!(!m.pr.is_empty());
        let csv = roc_csv(&m.roc);
        assert!(csv.starts_with("threshold,fpr,tpr\n"));
        assert!(distance_csv(&m.distances).lines().count() == DISTANCE_BINS + 1);
    }
}
