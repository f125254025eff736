//! Model evaluation: prediction with an optional flip test, the standard
//! metric set and the occlusion-stratified subsets.

use std::fmt::Write as _;

use serde::Serialize;

use crate::data::{shuffle_pose, Dataset, PoseSample};
use crate::error::{Error, Result};
use crate::heatmap::{decode, flip_heatmaps, DecodeOptions, HeatmapStack};
use crate::metrics::{
    csv_header, csv_row, default_oks_k, oks_ap_poses, occlusion_report, pck, pckh, EvalResult, InvisiblePolicy,
    OcclusionReport, Pose,
};
use crate::models::{Discriminator, Generator};
use crate::skeleton::SkeletonGraph;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalOptions {
    /// Average heatmaps of the image and its mirror before decoding.
    pub flip_test: bool,
    pub decode: DecodeOptions,
    pub pck_threshold: f64,
    pub pckh_threshold: f64,
    /// One occlusion subset per entry: samples with at least this many
    /// invisible joints.
    pub subset_min_invisible: Vec<usize>,
    /// Scoring of invisible joints on the full set.
    pub policy: InvisiblePolicy,
    /// Scoring of invisible joints on occlusion subsets.
    pub subset_policy: InvisiblePolicy,
    /// Worker threads for prediction; results do not depend on it.
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            flip_test: false,
            decode: DecodeOptions::default(),
            pck_threshold: 0.2,
            pckh_threshold: 0.5,
            subset_min_invisible: vec![2, 4],
            policy: InvisiblePolicy::Exclude,
            subset_policy: InvisiblePolicy::Include,
            threads: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub flip_test: bool,
    pub pck: EvalResult,
    pub pckh: EvalResult,
    pub oks_ap: f64,
    pub subsets: Vec<OcclusionReport>,
}

impl EvalReport {
    /// Per-group table: PCK and PCKh on all samples, then one PCKh row per
    /// occlusion subset, then OKS-AP in the `Mean` column.
    pub fn csv(&self, skeleton: &SkeletonGraph) -> String {
        let mut s = csv_header();
        s.push('\n');
        let pck_name = format!("PCK@{}", self.pck.threshold);
        let pckh_name = format!("PCKh@{}", self.pckh.threshold);
        let _ = writeln!(s, "{}", csv_row(&pck_name, &self.pck, skeleton));
        let _ = writeln!(s, "{}", csv_row(&pckh_name, &self.pckh, skeleton));
        for sub in &self.subsets {
            match &sub.result {
                Some(r) => {
                    let _ = writeln!(s, "{}", csv_row(&pckh_name, r, skeleton));
                }
                None => {
                    let na = vec!["NA"; crate::skeleton::JointGroup::TABLE.len() + 1].join(",");
                    let _ = writeln!(s, "{pckh_name},invisible>={},0,{na}", sub.min_invisible);
                }
            }
        }
        let na = vec!["NA"; crate::skeleton::JointGroup::TABLE.len()].join(",");
        let _ = writeln!(s, "OKS-AP,all,{},{na},{:.6}", self.n_samples, self.oks_ap);
        s
    }

    /// Mean subset PCKh for `min_invisible`, if that subset was evaluated
    /// and is non-empty.
    pub fn subset_mean(&self, min_invisible: usize) -> Option<f64> {
        self.subsets
            .iter()
            .find(|s| s.min_invisible == min_invisible)
            .and_then(|s| s.result.as_ref())
            .and_then(|r| r.mean)
    }
}

/// Mirrors a `…×H×W` image tensor left to right.
pub fn flip_image(img: &Tensor) -> Tensor {
    let w = *img.shape().last().expect("image has a width");
    let src = img.data();
    let data = src
        .chunks(w)
        .flat_map(|row| row.iter().rev().copied())
        .collect();
    Tensor::new(img.shape().to_vec(), data).expect("same shape")
}

fn flip_pair_map(skeleton: &SkeletonGraph) -> Result<Vec<usize>> {
    if skeleton.flip_pairs().is_empty() {
        return Err(Error::invalid(
            "the flip test needs left/right joint pairs, but this skeleton defines none",
        ));
    }
    skeleton.flip_permutation()
}

/// Heatmaps for every sample, batched through the generator.
pub fn predict_heatmaps(g: &Generator, data: &Dataset, flip_test: bool, batch: usize) -> Result<Vec<HeatmapStack>> {
    let pair_map = if flip_test { Some(flip_pair_map(&data.skeleton)?) } else { None };
    let s = data.image_size;
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.samples.chunks(batch.max(1)) {
        let mut px = Vec::with_capacity(chunk.len() * s * s);
        for smp in chunk {
            px.extend_from_slice(smp.image()?.data());
        }
        let imgs = Tensor::new([chunk.len(), 1, s, s], px)?;
        let plain = g.predict(&imgs)?;
        match &pair_map {
            None => out.extend(plain),
            Some(map) => {
                let mirrored = g.predict(&flip_image(&imgs))?;
                for (a, b) in plain.into_iter().zip(mirrored) {
                    let back = flip_heatmaps(&b, map)?;
                    let avg = a
                        .values()
                        .data()
                        .iter()
                        .zip(back.values().data())
                        .map(|(x, y)| 0.5 * (x + y))
                        .collect();
                    out.push(HeatmapStack::new(
                        Tensor::new(a.values().shape().to_vec(), avg)?,
                        a.stride(),
                    )?);
                }
            }
        }
    }
    Ok(out)
}

/// [`predict_heatmaps`] over contiguous slices of `data` on `threads`
/// workers, concatenated in sample order.
pub fn predict_heatmaps_parallel(
    g: &Generator,
    data: &Dataset,
    flip_test: bool,
    threads: usize,
) -> Result<Vec<HeatmapStack>> {
    if threads <= 1 || data.len() < 2 {
        return predict_heatmaps(g, data, flip_test, 32);
    }
    let parts: Vec<Dataset> = data
        .samples
        .chunks(data.len().div_ceil(threads))
        .map(|c| Dataset {
            skeleton: data.skeleton.clone(),
            image_size: data.image_size,
            stride: data.stride,
            samples: c.to_vec(),
        })
        .collect();
    let results: Vec<Result<Vec<HeatmapStack>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = parts
            .iter()
            .map(|p| scope.spawn(move || predict_heatmaps(g, p, flip_test, 32)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("prediction worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(data.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

pub fn decode_poses(heatmaps: &[HeatmapStack], opts: DecodeOptions) -> Vec<Pose> {
    heatmaps
        .iter()
        .map(|h| decode(h, opts).iter().map(|j| [j.x, j.y]).collect())
        .collect()
}

/// Poses decoded from the ground-truth heatmaps themselves; scoring these
/// isolates the codec's quantisation from model error.
pub fn oracle_poses(data: &Dataset, sigma: f64, opts: DecodeOptions) -> Result<Vec<Pose>> {
    let hms = data
        .samples
        .iter()
        .map(|s| data.target(s, sigma))
        .collect::<Result<Vec<_>>>()?;
    Ok(decode_poses(&hms, opts))
}

/// Scores `preds` against the annotations of `data`. PCK is normalised by
/// person scale, PCKh by head size, OKS by person scale.
pub fn evaluate_poses(data: &Dataset, preds: &[Pose], opts: &EvalOptions) -> Result<EvalReport> {
    if preds.len() != data.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} samples",
            preds.len(),
            data.len()
        )));
    }
    let gts: Vec<Pose> = data.samples.iter().map(PoseSample::coords).collect();
    let vis: Vec<Vec<bool>> = data.samples.iter().map(PoseSample::visibility).collect();
    let scales: Vec<f64> = data.samples.iter().map(|s| s.person_scale).collect();
    let heads: Vec<f64> = data.samples.iter().map(|s| s.head_size).collect();
    let pck = pck(preds, &gts, &vis, &scales, opts.pck_threshold, opts.policy)?;
    let pckh = pckh(preds, &gts, &vis, &heads, opts.pckh_threshold, opts.policy)?;
    let oks_ap = oks_ap_poses(preds, &gts, &vis, &scales, &default_oks_k(&data.skeleton))?;
    let subsets = opts
        .subset_min_invisible
        .iter()
        .map(|&m| occlusion_report(preds, &gts, &vis, &heads, m, opts.pckh_threshold, opts.subset_policy))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        n_samples: data.len(),
        flip_test: opts.flip_test,
        pck,
        pckh,
        oks_ap,
        subsets,
    })
}

pub fn evaluate_generator(g: &Generator, data: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    if g.config.n_joints != data.skeleton.n_nodes() {
        return Err(Error::invalid(format!(
            "model predicts {} joints but the dataset skeleton has {}",
            g.config.n_joints,
            data.skeleton.n_nodes()
        )));
    }
    let hms = predict_heatmaps_parallel(g, data, opts.flip_test, opts.threads)?;
    evaluate_poses(data, &decode_poses(&hms, opts.decode), opts)
}

/// Mean discriminator scores on ground-truth heatmaps, on heatmaps of
/// joint-shuffled poses and, when a generator is given, on its predictions.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Separation {
    pub real: f64,
    pub shuffled: f64,
    pub generated: Option<f64>,
}

impl Separation {
    pub fn margin(&self) -> f64 {
        self.real - self.shuffled
    }
}

/// Sample `i` is shuffled with seed `seed + i`.
pub fn discriminator_separation(
    d: &Discriminator,
    g: Option<&Generator>,
    data: &Dataset,
    sigma: f64,
    seed: u64,
) -> Result<Separation> {
    if data.is_empty() {
        return Err(Error::invalid("separation needs at least one sample"));
    }
    let mean = |t: &Tensor| t.sum() / t.numel() as f64;
    let (mut real, mut shuffled, mut generated) = (0.0, 0.0, 0.0);
    for (i, s) in data.samples.iter().enumerate() {
        let gt = data.target(s, sigma)?;
        real += mean(&d.scores(gt.values(), &data.skeleton)?);
        let sh = data.target(&shuffle_pose(s, seed.wrapping_add(i as u64)), sigma)?;
        shuffled += mean(&d.scores(sh.values(), &data.skeleton)?);
        if let Some(g) = g {
            let p = g.predict_one(s.image()?)?;
            generated += mean(&d.scores(p.values(), &data.skeleton)?);
        }
    }
    let n = data.len() as f64;
    Ok(Separation {
        real: real / n,
        shuffled: shuffled / n,
        generated: g.map(|_| generated / n),
    })
}
