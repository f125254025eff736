//! Keypoint accuracy metrics: PCK, PCKh, OKS and OKS-based AP, plus the
//! occlusion-stratified report.
//!
//! Conventions: a joint is correct when its normalised error is `≤` the
//! threshold; invisible joints are left out of both numerator and denominator
//! unless [`InvisiblePolicy::Include`] is chosen.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::skeleton::{JointGroup, SkeletonGraph};

pub type Pose = Vec<[f64; 2]>;

/// OKS thresholds `0.50, 0.55, …, 0.95`.
pub fn oks_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub enum InvisiblePolicy {
    #[default]
    Exclude,
    Include,
}

/// Per-joint correctness rates for one subset of samples.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub label: String,
    pub threshold: f64,
    pub n_samples: usize,
    /// `None` where no joint of that index was scored.
    pub per_joint: Vec<Option<f64>>,
    pub counts: Vec<usize>,
    /// Mean of the defined per-joint rates.
    pub mean: Option<f64>,
}

impl EvalResult {
    /// Rates averaged within each table column group.
    pub fn group_rates(&self, skeleton: &SkeletonGraph) -> Vec<(JointGroup, Option<f64>)> {
        JointGroup::TABLE
            .iter()
            .map(|&g| {
                let rates: Vec<f64> = (0..self.per_joint.len())
                    .filter(|&j| skeleton.group(j) == g)
                    .filter_map(|j| self.per_joint[j])
                    .collect();
                let mean = (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64);
                (g, mean)
            })
            .collect()
    }
}

fn check_lengths(preds: &[Pose], gts: &[Pose], vis: &[Vec<bool>], norms: &[f64]) -> Result<usize> {
    let n = gts.first().map_or(0, Vec::len);
    if preds.len() != gts.len() || vis.len() != gts.len() || norms.len() != gts.len() {
        return Err(Error::invalid(format!(
            "sample counts differ: {} predictions, {} ground truths, {} visibility rows, {} normalisers",
            preds.len(),
            gts.len(),
            vis.len(),
            norms.len()
        )));
    }
    for (i, ((p, g), v)) in preds.iter().zip(gts).zip(vis).enumerate() {
        if p.len() != n || g.len() != n || v.len() != n {
            return Err(Error::invalid(format!("sample {i}: joint counts differ")));
        }
    }
    if let Some(bad) = norms.iter().find(|&&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::invalid(format!("normaliser {bad} must be positive")));
    }
    Ok(n)
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Fraction of joints within `threshold · normaliser` of the ground truth.
pub fn pck(
    preds: &[Pose],
    gts: &[Pose],
    vis: &[Vec<bool>],
    normalizers: &[f64],
    threshold: f64,
    policy: InvisiblePolicy,
) -> Result<EvalResult> {
    if !(threshold > 0.0) {
        return Err(Error::invalid(format!("threshold {threshold} must be positive")));
    }
    let n = check_lengths(preds, gts, vis, normalizers)?;
    let mut hits = vec![0usize; n];
    let mut counts = vec![0usize; n];
    for (((p, g), v), &s) in preds.iter().zip(gts).zip(vis).zip(normalizers) {
        for j in 0..n {
            if v[j] || policy == InvisiblePolicy::Include {
                counts[j] += 1;
                if dist(p[j], g[j]) / s <= threshold {
                    hits[j] += 1;
                }
            }
        }
    }
    let per_joint: Vec<Option<f64>> = hits
        .iter()
        .zip(&counts)
        .map(|(&h, &c)| (c > 0).then(|| h as f64 / c as f64))
        .collect();
    let defined: Vec<f64> = per_joint.iter().flatten().copied().collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(EvalResult {
        label: "all".into(),
        threshold,
        n_samples: gts.len(),
        per_joint,
        counts,
        mean,
    })
}

/// PCK normalised by each sample's head segment length.
pub fn pckh(
    preds: &[Pose],
    gts: &[Pose],
    vis: &[Vec<bool>],
    head_sizes: &[f64],
    threshold: f64,
    policy: InvisiblePolicy,
) -> Result<EvalResult> {
    pck(preds, gts, vis, head_sizes, threshold, policy)
}

/// Mean PCK at each threshold.
pub fn pck_curve(
    preds: &[Pose],
    gts: &[Pose],
    vis: &[Vec<bool>],
    normalizers: &[f64],
    thresholds: &[f64],
    policy: InvisiblePolicy,
) -> Result<Vec<(f64, Option<f64>)>> {
    thresholds
        .iter()
        .map(|&t| Ok((t, pck(preds, gts, vis, normalizers, t, policy)?.mean)))
        .collect()
}

/// Object keypoint similarity of one pose; 0 when no joint is visible.
pub fn oks(pred: &[[f64; 2]], gt: &[[f64; 2]], vis: &[bool], scale: f64, k: &[f64]) -> Result<f64> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid(format!("OKS scale {scale} must be positive")));
    }
    if pred.len() != gt.len() || vis.len() != gt.len() || k.len() != gt.len() {
        return Err(Error::invalid("OKS inputs have different joint counts"));
    }
    if let Some(bad) = k.iter().find(|&&k| !(k > 0.0)) {
        return Err(Error::invalid(format!("OKS constant {bad} must be positive")));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for j in 0..gt.len() {
        if vis[j] {
            let d = dist(pred[j], gt[j]);
            total += (-d * d / (2.0 * scale * scale * k[j] * k[j])).exp();
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Fraction of poses with OKS `≥ t`, averaged over [`oks_thresholds`].
pub fn oks_ap(oks_values: &[f64]) -> f64 {
    if oks_values.is_empty() {
        return 0.0;
    }
    let ts = oks_thresholds();
    let total: f64 = ts
        .iter()
        .map(|&t| oks_values.iter().filter(|&&o| o >= t).count() as f64 / oks_values.len() as f64)
        .sum();
    total / ts.len() as f64
}

/// OKS of every sample, then [`oks_ap`].
pub fn oks_ap_poses(
    preds: &[Pose],
    gts: &[Pose],
    vis: &[Vec<bool>],
    scales: &[f64],
    k: &[f64],
) -> Result<f64> {
    check_lengths(preds, gts, vis, scales)?;
    let values = preds
        .iter()
        .zip(gts)
        .zip(vis)
        .zip(scales)
        .map(|(((p, g), v), &s)| oks(p, g, v, s, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(oks_ap(&values))
}

/// Per-joint OKS constants: twice the COCO keypoint sigmas, with joints
/// absent from COCO mapped to their nearest COCO counterpart.
pub fn default_oks_k(skeleton: &SkeletonGraph) -> Vec<f64> {
    skeleton
        .names()
        .iter()
        .map(|name| {
            let base = name
                .strip_prefix("r-")
                .or_else(|| name.strip_prefix("l-"))
                .unwrap_or(name);
            let sigma = match base {
                "shoulder" | "neck" | "thorax" => 0.079,
                "elbow" => 0.072,
                "wrist" => 0.062,
                "hip" | "pelvis" => 0.107,
                "knee" => 0.087,
                "ankle" => 0.089,
                "head-top" | "upper-neck" | "head" => 0.035,
                "nose" => 0.026,
                "eye" => 0.025,
                "ear" => 0.035,
                _ => 0.079,
            };
            2.0 * sigma
        })
        .collect()
}

/// PCKh on the samples with at least `min_invisible` invisible joints.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OcclusionReport {
    pub min_invisible: usize,
    pub subset_size: usize,
    /// `None` for an empty subset, whose rates are undefined.
    pub result: Option<EvalResult>,
}

pub fn occlusion_report(
    preds: &[Pose],
    gts: &[Pose],
    vis: &[Vec<bool>],
    head_sizes: &[f64],
    min_invisible: usize,
    threshold: f64,
    policy: InvisiblePolicy,
) -> Result<OcclusionReport> {
    check_lengths(preds, gts, vis, head_sizes)?;
    let keep: Vec<usize> = (0..gts.len())
        .filter(|&i| vis[i].iter().filter(|&&v| !v).count() >= min_invisible)
        .collect();
    let pick = |xs: &[Pose]| keep.iter().map(|&i| xs[i].clone()).collect::<Vec<_>>();
    let result = if keep.is_empty() {
        None
    } else {
        let v: Vec<Vec<bool>> = keep.iter().map(|&i| vis[i].clone()).collect();
        let h: Vec<f64> = keep.iter().map(|&i| head_sizes[i]).collect();
        let mut r = pckh(&pick(preds), &pick(gts), &v, &h, threshold, policy)?;
        r.label = format!("invisible>={min_invisible}");
        Some(r)
    };
    Ok(OcclusionReport {
        min_invisible,
        subset_size: keep.len(),
        result,
    })
}

/// Header of the per-joint CSV tables.
pub fn csv_header() -> String {
    let mut s = String::from("metric,subset,n_samples");
    for g in JointGroup::TABLE {
        s.push(',');
        s.push_str(g.label());
    }
    s.push_str(",Mean");
    s
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

/// One CSV row; undefined rates are written as `NA`.
pub fn csv_row(metric: &str, r: &EvalResult, skeleton: &SkeletonGraph) -> String {
    let mut s = format!("{metric},{},{}", r.label, r.n_samples);
    for (_, v) in r.group_rates(skeleton) {
        let _ = write!(s, ",{}", cell(v));
    }
    let _ = write!(s, ",{}", cell(r.mean));
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_joint(d: f64) -> (Pose, Pose) {
        (vec![[d, 0.0]], vec![[0.0, 0.0]])
    }

    #[test]
    fn exact_predictions_score_one() {
        let g: Vec<Pose> = vec![vec![[1.0, 2.0], [3.0, 4.0]]; 3];
        let v = vec![vec![true, true]; 3];
        let r = pck(&g, &g, &v, &[1.0; 3], 0.2, InvisiblePolicy::Exclude).unwrap();
        assert_eq!(r.per_joint, vec![Some(1.0), Some(1.0)]);
        assert_eq!(r.mean, Some(1.0));
        assert_eq!(oks(&g[0], &g[0], &v[0], 5.0, &[0.1, 0.1]).unwrap(), 1.0);
    }

    #[test]
    fn boundary_distance_counts_as_correct() {
        let (p, g) = one_joint(0.2 * 10.0);
        let r = pck(&[p], &[g], &[vec![true]], &[10.0], 0.2, InvisiblePolicy::Exclude).unwrap();
        assert_eq!(r.mean, Some(1.0));
        let (p, g) = one_joint(0.4 * 6.0);
        let r = pckh(&[p], &[g], &[vec![true]], &[6.0], 0.5, InvisiblePolicy::Exclude).unwrap();
        assert_eq!(r.mean, Some(1.0));
    }

    #[test]
    fn four_sample_fixture() {
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for f in [0.1, 0.15, 0.25, 0.3] {
            let (p, g) = one_joint(f * 8.0);
            preds.push(p);
            gts.push(g);
        }
        let r = pck(&preds, &gts, &vec![vec![true]; 4], &[8.0; 4], 0.2, InvisiblePolicy::Exclude).unwrap();
        assert_eq!(r.mean, Some(0.5));
    }

    #[test]
    fn invisible_joints_follow_the_policy() {
        let preds = vec![vec![[0.0, 0.0], [9.0, 0.0]]];
        let gts = vec![vec![[0.0, 0.0], [0.0, 0.0]]];
        let vis = vec![vec![true, false]];
        let r = pck(&preds, &gts, &vis, &[1.0], 0.5, InvisiblePolicy::Exclude).unwrap();
        assert_eq!(r.per_joint, vec![Some(1.0), None]);
        assert_eq!(r.mean, Some(1.0));
        let r = pck(&preds, &gts, &vis, &[1.0], 0.5, InvisiblePolicy::Include).unwrap();
        assert_eq!(r.mean, Some(0.5));
    }

    #[test]
    fn bad_normalisers_rejected() {
        let g: Vec<Pose> = vec![vec![[0.0, 0.0]]];
        let v = vec![vec![true]];
        for bad in [0.0, -1.0, f64::NAN] {
            assert!(pck(&g, &g, &v, &[bad], 0.2, InvisiblePolicy::Exclude).is_err());
            assert!(oks(&g[0], &g[0], &v[0], bad, &[0.1]).is_err());
        }
        assert!(pck(&g, &g, &v, &[1.0, 1.0], 0.2, InvisiblePolicy::Exclude).is_err());
    }

    #[test]
    fn oks_fixtures() {
        let (s, k) = (10.0, 0.2);
        let (p, g) = one_joint(s * k * 2f64.sqrt());
        assert!((oks(&p, &g, &[true], s, &[k]).unwrap() - (-1.0f64).exp()).abs() < 1e-9);
        assert_eq!(oks(&p, &g, &[false], s, &[k]).unwrap(), 0.0);
    }

    #[test]
    fn ap_counts_thresholds() {
        assert_eq!(oks_ap(&[1.0; 5]), 1.0);
        assert_eq!(oks_ap(&[0.7; 5]), 0.5);
        assert_eq!(oks_ap(&[0.49; 5]), 0.0);
    }

    #[test]
    fn ap_matches_a_recount() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let values: Vec<f64> = (0..r.gen_range(1..40)).map(|_| r.gen::<f64>()).collect();
            // Count (pose, threshold) pairs that pass, over the full grid at once.
            let grid = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];
            let passes = values
                .iter()
                .flat_map(|v| grid.iter().map(move |t| v >= t))
                .filter(|&b| b)
                .count();
            let expected = passes as f64 / (values.len() * grid.len()) as f64;
            assert!((oks_ap(&values) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn occlusion_subsets() {
        let g: Vec<Pose> = vec![vec![[0.0, 0.0]; 4]; 6];
        let vis_rows = [0, 2, 1, 3, 2, 0];
        let vis: Vec<Vec<bool>> = vis_rows.iter().map(|&k| (0..4).map(|j| j >= k).collect()).collect();
        let r = occlusion_report(&g, &g, &vis, &[1.0; 6], 2, 0.5, InvisiblePolicy::Exclude).unwrap();
        assert_eq!(r.subset_size, 3);
        let clean = vec![vec![true; 4]; 6];
        let r = occlusion_report(&g, &g, &clean, &[1.0; 6], 2, 0.5, InvisiblePolicy::Exclude).unwrap();
        assert_eq!((r.subset_size, r.result), (0, None));
    }

    #[test]
    fn default_k_is_positive_for_builtins() {
        for g in [SkeletonGraph::mpii_16(), SkeletonGraph::lsp_14()] {
            let k = default_oks_k(&g);
            assert_eq!(k.len(), g.n_nodes());
            assert!(k.iter().all(|&k| k > 0.0));
        }
    }

    #[test]
    fn csv_rows_follow_the_table_columns() {
        let g = SkeletonGraph::mpii_16();
        let poses: Vec<Pose> = vec![vec![[0.0, 0.0]; 16]];
        let r = pck(&poses, &poses, &[vec![true; 16]], &[1.0], 0.2, InvisiblePolicy::Exclude).unwrap();
        assert_eq!(csv_header(), "metric,subset,n_samples,Head,Sho,Elb,Wri,Hip,Kne,Ank,Mean");
        assert_eq!(
            csv_row("pck@0.2", &r, &g),
            "pck@0.2,all,1,1.000000,1.000000,1.000000,1.000000,1.000000,1.000000,1.000000,1.000000"
        );
    }
}
