//! Similarity-transform augmentation and implausible-pose construction.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::PoseSample;
use crate::error::{Error, Result};
use crate::heatmap::Joint;
use crate::skeleton::SkeletonGraph;
use crate::tensor::Tensor;

/// Rotation and isotropic scaling about the image centre, optionally followed
/// by a horizontal mirror.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityTransform {
    pub angle_deg: f64,
    pub scale: f64,
    pub flip: bool,
    pub image_size: usize,
}

impl SimilarityTransform {
    pub fn identity(image_size: usize) -> Self {
        SimilarityTransform {
            angle_deg: 0.0,
            scale: 1.0,
            flip: false,
            image_size,
        }
    }

    fn center(&self) -> f64 {
        self.image_size as f64 / 2.0
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let c = self.center();
        let (sin, cos) = self.angle_deg.to_radians().sin_cos();
        let (dx, dy) = (p[0] - c, p[1] - c);
        let x = self.scale * (cos * dx - sin * dy) + c;
        let y = self.scale * (sin * dx + cos * dy) + c;
        if self.flip {
            [self.image_size as f64 - x, y]
        } else {
            [x, y]
        }
    }

    pub fn invert(&self, p: [f64; 2]) -> [f64; 2] {
        let c = self.center();
        let x = if self.flip { self.image_size as f64 - p[0] } else { p[0] };
        let (sin, cos) = self.angle_deg.to_radians().sin_cos();
        let (dx, dy) = ((x - c) / self.scale, (p[1] - c) / self.scale);
        [cos * dx + sin * dy + c, -sin * dx + cos * dy + c]
    }

    /// Maps joints (swapping flip partners when mirrored) and images.
    pub fn apply_to(&self, sample: &PoseSample, skeleton: &SkeletonGraph) -> Result<PoseSample> {
        let n = skeleton.n_nodes();
        if sample.joints.len() != n {
            return Err(Error::invalid(format!(
                "sample has {} joints, skeleton has {n}",
                sample.joints.len()
            )));
        }
        let perm: Vec<usize> = if self.flip {
            skeleton.flip_permutation()?
        } else {
            (0..n).collect()
        };
        let size = self.image_size as f64;
        let mut joints = vec![Joint::new(0.0, 0.0, false); n];
        for (j, joint) in sample.joints.iter().enumerate() {
            let [x, y] = self.apply([joint.x, joint.y]);
            let inside = (0.0..size).contains(&x) && (0.0..size).contains(&y);
            joints[perm[j]] = Joint::new(x, y, joint.visible && inside);
        }
        let image = match &sample.image {
            Some(img) => Some(self.warp(img)?),
            None => None,
        };
        Ok(PoseSample {
            id: sample.id,
            seed: sample.seed,
            image,
            joints,
            head_size: sample.head_size * self.scale,
            person_scale: sample.person_scale * self.scale,
        })
    }

    /// Bilinear inverse warp; samples outside the source are black.
    pub fn warp(&self, img: &Tensor) -> Result<Tensor> {
        let s = self.image_size;
        if img.shape() != [1, s, s] {
            return Err(Error::shape("warp", img.shape(), &[1, s, s]));
        }
        let src = img.data();
        let at = |r: isize, c: isize| -> f64 {
            if r < 0 || c < 0 || r >= s as isize || c >= s as isize {
                0.0
            } else {
                src[r as usize * s + c as usize]
            }
        };
        let mut out = vec![0.0; s * s];
        for r in 0..s {
            for c in 0..s {
                let [x, y] = self.invert([c as f64 + 0.5, r as f64 + 0.5]);
                let (u, v) = (x - 0.5, y - 0.5);
                let (c0, r0) = (u.floor(), v.floor());
                let (fu, fv) = (u - c0, v - r0);
                let (c0, r0) = (c0 as isize, r0 as isize);
                let top = at(r0, c0) * (1.0 - fu) + at(r0, c0 + 1) * fu;
                let bottom = at(r0 + 1, c0) * (1.0 - fu) + at(r0 + 1, c0 + 1) * fu;
                out[r * s + c] = if fv == 0.0 { top } else { top * (1.0 - fv) + bottom * fv };
            }
        }
        Tensor::new([1, s, s], out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip_prob: f64,
    pub max_rotation_deg: f64,
    pub scale_range: (f64, f64),
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            flip_prob: 0.5,
            max_rotation_deg: 30.0,
            scale_range: (0.75, 1.25),
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(0.0..=1.0).contains(&self.flip_prob)
            || !(0.0..=180.0).contains(&self.max_rotation_deg)
            || !(lo > 0.0 && lo <= hi && hi.is_finite())
        {
            return Err(Error::invalid(format!("augmentation parameters out of range: {self:?}")));
        }
        Ok(())
    }

    /// Draws a transform; all randomness comes from `seed`.
    pub fn draw(&self, image_size: usize, seed: u64) -> Result<SimilarityTransform> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flip = rng.gen::<f64>() < self.flip_prob;
        let angle_deg = rng.gen_range(-self.max_rotation_deg..=self.max_rotation_deg);
        let scale = rng.gen_range(self.scale_range.0..=self.scale_range.1);
        Ok(SimilarityTransform {
            angle_deg,
            scale,
            flip,
            image_size,
        })
    }
}

pub fn augment(
    sample: &PoseSample,
    skeleton: &SkeletonGraph,
    image_size: usize,
    params: &AugmentParams,
    seed: u64,
) -> Result<PoseSample> {
    params.draw(image_size, seed)?.apply_to(sample, skeleton)
}

/// Moves every joint record to another joint's slot (a random cyclic
/// permutation, so no joint keeps its place). The image is left untouched.
pub fn shuffle_pose(sample: &PoseSample, seed: u64) -> PoseSample {
    let n = sample.joints.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Sattolo's algorithm: a uniformly random n-cycle.
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..i);
        perm.swap(i, j);
    }
    let mut out = sample.clone();
    out.joints = perm.iter().map(|&p| sample.joints[p]).collect();
    out
}

/// Uniformly shuffles the order of sample indices.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}
