//! Pose samples: synthetic generation, augmentation and annotation files.

pub mod annotation;
pub mod augment;
pub mod pgm;
pub mod synth;

use crate::error::{Error, Result};
use crate::heatmap::{encode_gaussian, HeatmapStack, Joint};
use crate::skeleton::SkeletonGraph;
use crate::tensor::Tensor;

pub use annotation::{read_annotations, write_annotations, ImageStorage};
pub use augment::{augment, shuffle_pose, AugmentParams, SimilarityTransform};
pub use synth::{synth_generate, BodyModel, SynthConfig};

/// One annotated person image.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSample {
    pub id: u64,
    pub seed: u64,
    /// `1×S×S` grey image in `[0, 1]`, absent for annotation-only datasets.
    pub image: Option<Tensor>,
    pub joints: Vec<Joint>,
    pub head_size: f64,
    pub person_scale: f64,
}

impl PoseSample {
    pub fn image(&self) -> Result<&Tensor> {
        self.image
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("sample {} has no image", self.id)))
    }

    pub fn n_invisible(&self) -> usize {
        self.joints.iter().filter(|j| !j.visible).count()
    }

    pub fn visibility(&self) -> Vec<bool> {
        self.joints.iter().map(|j| j.visible).collect()
    }

    pub fn coords(&self) -> Vec<[f64; 2]> {
        self.joints.iter().map(|j| [j.x, j.y]).collect()
    }
}

/// Samples sharing a skeleton and image geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub skeleton: SkeletonGraph,
    pub image_size: usize,
    pub stride: usize,
    pub samples: Vec<PoseSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn heatmap_size(&self) -> usize {
        self.image_size / self.stride
    }

    /// Ground-truth heatmaps of one sample.
    pub fn target(&self, sample: &PoseSample, sigma: f64) -> Result<HeatmapStack> {
        encode_gaussian(
            &sample.joints,
            self.skeleton.n_nodes(),
            self.heatmap_size(),
            self.stride,
            sigma,
        )
    }

    /// Fraction of joints marked invisible.
    pub fn occlusion_fraction(&self) -> f64 {
        let total: usize = self.samples.iter().map(|s| s.joints.len()).sum();
        let hidden: usize = self.samples.iter().map(PoseSample::n_invisible).sum();
        if total == 0 {
            0.0
        } else {
            hidden as f64 / total as f64
        }
    }
}
