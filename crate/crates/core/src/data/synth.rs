//! Synthetic stick-figure people.
//!
//! Poses are sampled bone by bone down the kinematic tree: each bone's
//! direction is its parent's direction plus a fixed rest offset and a bounded
//! random deviation. Right-side limbs are drawn brighter than left-side ones
//! and the spine sits in between, so a single grey channel still tells left
//! from right.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, PoseSample};
use crate::error::{Error, Result};
use crate::heatmap::Joint;
use crate::skeleton::SkeletonGraph;
use crate::tensor::Tensor;

/// Joint coordinates are snapped to this grid so mirroring is exact.
pub const COORD_QUANTUM: f64 = 1.0 / 256.0;

const RIGHT_INTENSITY: f64 = 1.0;
const LEFT_INTENSITY: f64 = 0.55;
const CENTER_INTENSITY: f64 = 0.8;
const LIMB_HALF_WIDTH: f64 = 0.8;
const JOINT_RADIUS: f64 = 1.4;
const PATCH_HALF: f64 = 3.5;
const EXTREME_POSE_PROB: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bone {
    pub parent: usize,
    /// Length in body units (standing height ≈ 1).
    pub length: f64,
    /// Rest direction relative to the parent bone, degrees (image y points down).
    pub rest_deg: f64,
    pub min_deg: f64,
    pub max_deg: f64,
}

/// Bone lengths and joint-angle priors for one skeleton.
#[derive(Clone, Debug, PartialEq)]
pub struct BodyModel {
    root: usize,
    /// Indexed by child joint; `None` for the root.
    bones: Vec<Option<Bone>>,
    /// Parents before children.
    order: Vec<usize>,
    max_tilt_deg: f64,
}

fn bone(parent: usize, length: f64, rest_deg: f64, min_deg: f64, max_deg: f64) -> Bone {
    Bone {
        parent,
        length,
        rest_deg,
        min_deg,
        max_deg,
    }
}

impl BodyModel {
    /// Priors for the built-in MPII and LSP skeletons.
    pub fn for_skeleton(g: &SkeletonGraph) -> Result<Self> {
        let idx = |n: &str| {
            g.index_of(n)
                .ok_or_else(|| Error::invalid(format!("no body model for a skeleton without {n:?}")))
        };
        let n = g.n_nodes();
        let mut bones = vec![None; n];
        // (child, parent, length, rest, min, max) for the right side; the left
        // side mirrors rest and range.
        let mut sided = |side_bones: &[(&str, &str, f64, f64, f64, f64)]| -> Result<()> {
            for &(child, parent, len, rest, lo, hi) in side_bones {
                for (prefix, sign) in [("r-", 1.0), ("l-", -1.0)] {
                    let c = idx(&child.replace("*", prefix))?;
                    let p = idx(&parent.replace("*", prefix))?;
                    let (a, b) = (sign * lo, sign * hi);
                    bones[c] = Some(bone(p, len, sign * rest, a.min(b), a.max(b)));
                }
            }
            Ok(())
        };
        let limbs = [
            ("*elbow", "*shoulder", 0.15, -90.0, -70.0, 70.0),
            ("*wrist", "*elbow", 0.14, 0.0, -110.0, 30.0),
            ("*knee", "*hip", 0.22, -90.0, -25.0, 25.0),
            ("*ankle", "*knee", 0.21, 0.0, -25.0, 25.0),
        ];
        let root = if g.index_of("pelvis").is_some() {
            sided(&limbs)?;
            sided(&[
                ("*shoulder", "thorax", 0.10, -90.0, -8.0, 8.0),
                ("*hip", "pelvis", 0.08, -90.0, -8.0, 8.0),
            ])?;
            let (pelvis, thorax, neck, head) =
                (idx("pelvis")?, idx("thorax")?, idx("upper-neck")?, idx("head-top")?);
            bones[thorax] = Some(bone(pelvis, 0.30, 0.0, -5.0, 5.0));
            bones[neck] = Some(bone(thorax, 0.06, 0.0, -10.0, 10.0));
            bones[head] = Some(bone(neck, 0.12, 0.0, -20.0, 20.0));
            pelvis
        } else {
            sided(&limbs)?;
            sided(&[
                ("*shoulder", "neck", 0.11, -90.0, -8.0, 8.0),
                ("*hip", "neck", 0.34, -165.0, -4.0, 4.0),
            ])?;
            let (neck, head) = (idx("neck")?, idx("head-top")?);
            bones[head] = Some(bone(neck, 0.16, 0.0, -20.0, 20.0));
            neck
        };
        let model = BodyModel {
            root,
            bones,
            order: Vec::new(),
            max_tilt_deg: 15.0,
        };
        model.with_order(g)
    }

    fn with_order(mut self, g: &SkeletonGraph) -> Result<Self> {
        let n = self.bones.len();
        for (child, b) in self.bones.iter().enumerate() {
            match b {
                None if child != self.root => {
                    return Err(Error::invalid(format!("joint {child} has no bone")))
                }
                Some(b) if !g.neighbors(child)?.contains(&b.parent) => {
                    return Err(Error::invalid(format!("bone {child}->{} is not a graph edge", b.parent)))
                }
                _ => {}
            }
        }
        let dist = g.hop_distances(self.root);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&j| dist[j].unwrap_or(usize::MAX));
        self.order = order;
        Ok(self)
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn bone(&self, child: usize) -> Option<&Bone> {
        self.bones[child].as_ref()
    }

    /// Samples joint positions in body units, root at the origin.
    pub fn sample_pose(&self, rng: &mut impl Rng) -> Vec<[f64; 2]> {
        let widen = if rng.gen::<f64>() < EXTREME_POSE_PROB { 1.5 } else { 1.0 };
        let n = self.bones.len();
        let mut pos = vec![[0.0; 2]; n];
        let mut dir = vec![0.0f64; n];
        dir[self.root] = -90.0 + rng.gen_range(-self.max_tilt_deg..=self.max_tilt_deg);
        for &j in &self.order {
            let Some(b) = self.bones[j] else { continue };
            let deviation = rng.gen_range(b.min_deg * widen..=b.max_deg * widen);
            let d = dir[b.parent] + b.rest_deg + deviation;
            dir[j] = d;
            let r = d.to_radians();
            pos[j] = [
                pos[b.parent][0] + b.length * r.cos(),
                pos[b.parent][1] + b.length * r.sin(),
            ];
        }
        pos
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub count: usize,
    pub image_size: usize,
    pub stride: usize,
    pub occlusion_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            count: 500,
            image_size: 64,
            stride: 4,
            occlusion_rate: 0.0,
        }
    }
}

fn snap(v: f64) -> f64 {
    (v / COORD_QUANTUM).round() * COORD_QUANTUM
}

/// Per-sample seed derived from the dataset seed.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates `cfg.count` stick-figure samples, deterministic in `cfg.seed`.
pub fn synth_generate(cfg: &SynthConfig, skeleton: &SkeletonGraph) -> Result<Dataset> {
    if cfg.count == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    if !(0.0..=1.0).contains(&cfg.occlusion_rate) {
        return Err(Error::invalid(format!(
            "occlusion rate {} outside [0, 1]",
            cfg.occlusion_rate
        )));
    }
    if cfg.stride == 0 || cfg.image_size % cfg.stride != 0 || cfg.image_size < 16 {
        return Err(Error::invalid(format!(
            "image size {} must be ≥ 16 and divisible by stride {}",
            cfg.image_size, cfg.stride
        )));
    }
    let model = BodyModel::for_skeleton(skeleton)?;
    let samples = (0..cfg.count as u64)
        .map(|i| {
            let seed = sample_seed(cfg.seed, i);
            generate_sample(&model, skeleton, cfg, i, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        skeleton: skeleton.clone(),
        image_size: cfg.image_size,
        stride: cfg.stride,
        samples,
    })
}

fn generate_sample(
    model: &BodyModel,
    skeleton: &SkeletonGraph,
    cfg: &SynthConfig,
    id: u64,
    seed: u64,
) -> Result<PoseSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = cfg.image_size as f64;
    let body = model.sample_pose(&mut rng);

    let (min, max) = bbox(&body);
    let extent = (max[0] - min[0]).max(max[1] - min[1]);
    let target = rng.gen_range(0.55..0.85) * size;
    let scale = target / extent;
    let margin = 2.0;
    let (w, h) = ((max[0] - min[0]) * scale, (max[1] - min[1]) * scale);
    let ox = rng.gen_range(margin..=(size - margin - w).max(margin));
    let oy = rng.gen_range(margin..=(size - margin - h).max(margin));
    let mut joints: Vec<Joint> = body
        .iter()
        .map(|p| {
            let x = snap(ox + (p[0] - min[0]) * scale).clamp(0.0, size - COORD_QUANTUM);
            let y = snap(oy + (p[1] - min[1]) * scale).clamp(0.0, size - COORD_QUANTUM);
            Joint::new(x, y, true)
        })
        .collect();
    for j in &mut joints {
        j.visible = rng.gen::<f64>() >= cfg.occlusion_rate;
    }

    let image = render(skeleton, &joints, cfg.image_size, &mut rng);
    let pts: Vec<[f64; 2]> = joints.iter().map(|j| [j.x, j.y]).collect();
    let (lo, hi) = bbox(&pts);
    let person_scale = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    Ok(PoseSample {
        id,
        seed,
        image: Some(image),
        head_size: head_size(skeleton, &joints, person_scale),
        person_scale,
        joints,
    })
}

fn bbox(pts: &[[f64; 2]]) -> ([f64; 2], [f64; 2]) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in pts {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    (lo, hi)
}

/// Length of the head segment (head-top to upper-neck, or to neck for LSP).
pub fn head_size(skeleton: &SkeletonGraph, joints: &[Joint], person_scale: f64) -> f64 {
    let top = skeleton.index_of("head-top");
    let base = skeleton
        .index_of("upper-neck")
        .or_else(|| skeleton.index_of("neck"));
    match (top, base) {
        (Some(a), Some(b)) => {
            let (ja, jb) = (joints[a], joints[b]);
            (ja.x - jb.x).hypot(ja.y - jb.y).max(1e-6)
        }
        _ => person_scale / 6.0,
    }
}

fn side_intensity(name: &str) -> f64 {
    if name.starts_with("r-") {
        RIGHT_INTENSITY
    } else if name.starts_with("l-") {
        LEFT_INTENSITY
    } else {
        CENTER_INTENSITY
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p[0] - a[0] - t * dx).hypot(p[1] - a[1] - t * dy)
}

/// Renders the figure: noisy dark background, anti-aliased limbs and joint
/// discs, then a textured blocking patch over every invisible joint.
/// Pixels are quantised to 8-bit levels.
pub fn render(skeleton: &SkeletonGraph, joints: &[Joint], size: usize, rng: &mut impl Rng) -> Tensor {
    let mut img: Vec<f64> = (0..size * size).map(|_| rng.gen_range(0.0..0.08)).collect();
    let names = skeleton.names();
    let paint = |img: &mut [f64], lo: [f64; 2], hi: [f64; 2], value: &dyn Fn([f64; 2]) -> f64| {
        let r0 = lo[1].floor().max(0.0) as usize;
        let r1 = (hi[1].ceil().max(0.0) as usize).min(size);
        let c0 = lo[0].floor().max(0.0) as usize;
        let c1 = (hi[0].ceil().max(0.0) as usize).min(size);
        for r in r0..r1 {
            for c in c0..c1 {
                let v = value([c as f64 + 0.5, r as f64 + 0.5]);
                let px = &mut img[r * size + c];
                *px = px.max(v);
            }
        }
    };

    let pad = LIMB_HALF_WIDTH + 1.0;
    for &(a, b) in skeleton.edges() {
        let (pa, pb) = ([joints[a].x, joints[a].y], [joints[b].x, joints[b].y]);
        let side = |n: &str| n.starts_with("r-") || n.starts_with("l-");
        let name = if side(&names[a]) { &names[a] } else { &names[b] };
        let intensity = side_intensity(name);
        let lo = [pa[0].min(pb[0]) - pad, pa[1].min(pb[1]) - pad];
        let hi = [pa[0].max(pb[0]) + pad, pa[1].max(pb[1]) + pad];
        paint(&mut img, lo, hi, &|p| {
            let cover = (LIMB_HALF_WIDTH + 0.5 - segment_distance(p, pa, pb)).clamp(0.0, 1.0);
            intensity * cover
        });
    }
    let pad = JOINT_RADIUS + 1.0;
    for (j, name) in joints.iter().zip(names) {
        let c = [j.x, j.y];
        let intensity = side_intensity(name);
        paint(&mut img, [c[0] - pad, c[1] - pad], [c[0] + pad, c[1] + pad], &|p| {
            let d = (p[0] - c[0]).hypot(p[1] - c[1]);
            intensity * (JOINT_RADIUS + 0.5 - d).clamp(0.0, 1.0)
        });
    }

    for j in joints.iter().filter(|j| !j.visible) {
        let cx = j.x + rng.gen_range(-1.0..1.0);
        let cy = j.y + rng.gen_range(-1.0..1.0);
        let base = rng.gen_range(0.25..0.45);
        let r0 = (cy - PATCH_HALF).floor().max(0.0) as usize;
        let r1 = ((cy + PATCH_HALF).ceil().max(0.0) as usize).min(size);
        let c0 = (cx - PATCH_HALF).floor().max(0.0) as usize;
        let c1 = ((cx + PATCH_HALF).ceil().max(0.0) as usize).min(size);
        for r in r0..r1 {
            for c in c0..c1 {
                let checker = if (r / 2 + c / 2) % 2 == 0 { 0.08 } else { -0.08 };
                img[r * size + c] = base + checker;
            }
        }
    }

    for v in &mut img {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
    Tensor::new([1, size, size], img).expect("square image")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gen(seed: u64, count: usize, occ: f64) -> Dataset {
        let cfg = SynthConfig {
            seed,
            count,
            occlusion_rate: occ,
            ..Default::default()
        };
        synth_generate(&cfg, &SkeletonGraph::mpii_16()).unwrap()
    }

    #[test]
    fn no_occlusion_means_all_visible() {
        let d = gen(1, 50, 0.0);
        assert!(d.samples.iter().all(|s| s.joints.iter().all(|j| j.visible)));
    }

    #[test]
    fn same_seed_same_dataset() {
        assert_eq!(gen(7, 20, 0.2), gen(7, 20, 0.2));
        assert_ne!(gen(7, 20, 0.2), gen(8, 20, 0.2));
    }

    #[test]
    fn occlusion_fraction_concentrates() {
        let d = gen(3, 1000, 0.2);
        let f = d.occlusion_fraction();
        assert!((0.17..=0.23).contains(&f), "{f}");
    }

    #[test]
    fn joints_stay_in_bounds_and_normalisers_positive() {
        for g in [SkeletonGraph::mpii_16(), SkeletonGraph::lsp_14()] {
            let cfg = SynthConfig {
                seed: 5,
                count: 200,
                ..Default::default()
            };
            let d = synth_generate(&cfg, &g).unwrap();
            for s in &d.samples {
                assert!(s.head_size > 0.0 && s.person_scale > 0.0);
                for j in &s.joints {
                    assert!(j.x >= 0.0 && j.x < 64.0 && j.y >= 0.0 && j.y < 64.0);
                    assert_eq!(j.x, snap(j.x));
                }
            }
        }
    }

    #[test]
    fn limb_lengths_follow_the_body_model() {
        for g in [SkeletonGraph::mpii_16(), SkeletonGraph::lsp_14()] {
            let model = BodyModel::for_skeleton(&g).unwrap();
            let cfg = SynthConfig { seed: 11, count: 100, ..Default::default() };
            let d = synth_generate(&cfg, &g).unwrap();
            for s in &d.samples {
                let ratios: Vec<f64> = (0..g.n_nodes())
                    .filter_map(|c| model.bone(c).map(|b| (c, b)))
                    .map(|(c, b)| {
                        let (jc, jp) = (s.joints[c], s.joints[b.parent]);
                        (jc.x - jp.x).hypot(jc.y - jp.y) / b.length
                    })
                    .collect();
                let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
                for r in ratios {
                    assert!((r / mean - 1.0).abs() <= 0.01, "{r} vs {mean}");
                }
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let g = SkeletonGraph::mpii_16();
        let bad = [
            SynthConfig { count: 0, ..Default::default() },
            SynthConfig { occlusion_rate: 1.5, ..Default::default() },
            SynthConfig { image_size: 66, ..Default::default() },
        ];
        for cfg in bad {
            assert!(synth_generate(&cfg, &g).is_err());
        }
    }

    #[test]
    fn visible_joints_are_drawn_bright() {
        let d = gen(13, 30, 0.0);
        for s in &d.samples {
            let img = s.image.as_ref().unwrap();
            for j in &s.joints {
                let v = img.get(&[0, j.y as usize, j.x as usize]);
                assert!(v >= 0.45, "joint pixel {v}");
            }
        }
    }
}
