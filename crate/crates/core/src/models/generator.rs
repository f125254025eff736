//! Cascade feature network: a strided conv encoder and a transposed-conv
//! decoder whose stages receive 1×1-projected encoder features by addition.
//!
//! ```text
//! image 1×S×S
//!   stem  4×4/2          → C0 × S/2
//!   enc1  4×4/2          → 16 × S/4   ─┐ lat1 1×1
//!   enc2  4×4/2          → 32 × S/8   ─┼─┐ lat2 1×1
//!   enc3  4×4/2          → 64 × S/16   │ │
//!   dec1  4×4/2 transp.  → 32 × S/8  + ┘ lat2
//!   dec2  4×4/2 transp.  → 32 × S/4  + lat1
//!   head  1×1            → N × S/4
//! ```

use rand::Rng;

use super::var;
use crate::autodiff::{ConvSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::heatmap::HeatmapStack;
use crate::params::{uniform_fan_in, ParamSet};
use crate::tensor::Tensor;

/// Total downsampling of the encoder.
pub const ENCODER_STRIDE: usize = 16;
/// Heatmap stride relative to the input image.
pub const OUTPUT_STRIDE: usize = 4;

const DOWN: ConvSpec = ConvSpec { stride: 2, pad: 1 };
const POINT: ConvSpec = ConvSpec { stride: 1, pad: 0 };
const SAME3: ConvSpec = ConvSpec { stride: 1, pad: 1 };

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub n_joints: usize,
    pub in_channels: usize,
    pub stem_channels: usize,
    /// Encoder stage widths, shallowest first.
    pub stages: [usize; 3],
    pub decoder_channels: usize,
    /// Lateral (cascade) connections from encoder to decoder.
    pub lateral: bool,
    /// Extra 3×3 convolutions on the S/4 decoder output before the head.
    pub refine: usize,
}

impl GeneratorConfig {
    pub fn new(n_joints: usize) -> Self {
        GeneratorConfig {
            n_joints,
            in_channels: 1,
            stem_channels: 8,
            stages: [16, 32, 64],
            decoder_channels: 32,
            lateral: true,
            refine: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub params: ParamSet,
}

impl Generator {
    pub fn new(config: GeneratorConfig, rng: &mut impl Rng) -> Result<Self> {
        let c = &config;
        if c.n_joints == 0 || c.in_channels == 0 || c.stem_channels == 0 || c.decoder_channels == 0 {
            return Err(Error::invalid("generator widths must be positive"));
        }
        let mut p = ParamSet::new();
        let mut conv = |p: &mut ParamSet, name: &str, o: usize, i: usize, k: usize| {
            p.push(format!("{name}.w"), uniform_fan_in(rng, &[o, i, k, k], i * k * k));
            p.push(format!("{name}.b"), Tensor::zeros([o]));
        };
        let [s1, s2, s3] = c.stages;
        let dc = c.decoder_channels;
        conv(&mut p, "stem", c.stem_channels, c.in_channels, 4);
        conv(&mut p, "enc1", s1, c.stem_channels, 4);
        conv(&mut p, "enc2", s2, s1, 4);
        conv(&mut p, "enc3", s3, s2, 4);
        if c.lateral {
            conv(&mut p, "lat1", dc, s1, 1);
            conv(&mut p, "lat2", dc, s2, 1);
        }
        for r in 0..c.refine {
            conv(&mut p, &format!("refine{r}"), dc, dc, 3);
        }
        conv(&mut p, "head", c.n_joints, dc, 1);
        // Transposed kernels are laid out input-major; each output pixel of a
        // stride-2, 4×4 transposed conv sees 2×2 taps per input channel.
        p.push("dec1.w", uniform_fan_in(rng, &[s3, dc, 4, 4], s3 * 4));
        p.push("dec1.b", Tensor::zeros([dc]));
        p.push("dec2.w", uniform_fan_in(rng, &[dc, dc, 4, 4], dc * 4));
        p.push("dec2.b", Tensor::zeros([dc]));
        Ok(Generator { config, params: p })
    }

    /// Sets the head weights and bias to zero.
    pub fn zero_head(&mut self) {
        for name in ["head.w", "head.b"] {
            let i = self.params.index_of(name).expect("head exists");
            self.params.tensors_mut()[i].fill(0.0);
        }
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let (c, h, w) = match *shape {
            [c, h, w] | [_, c, h, w] => (c, h, w),
            _ => return Err(Error::invalid(format!("generator input must be 3D or 4D, got {shape:?}"))),
        };
        if c != self.config.in_channels {
            return Err(Error::shape("generator input", shape, &[self.config.in_channels, h, w]));
        }
        if h != w || h == 0 || h % ENCODER_STRIDE != 0 {
            return Err(Error::Geometry {
                op: "generator",
                detail: format!("input {h}×{w} must be square and divisible by {ENCODER_STRIDE}"),
            });
        }
        Ok(())
    }

    /// Forward pass on bound parameters; `x` is `B×C×S×S` (or `C×S×S`) and the
    /// result `B×N×S/4×S/4` (or `N×S/4×S/4`).
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        self.check_input(tape.shape(x))?;
        let p = |name: &str| var(&self.params, vars, name);
        let conv = |tape: &mut Tape, x: Var, name: &str, spec: ConvSpec| -> Result<Var> {
            tape.conv2d(x, p(&format!("{name}.w"))?, Some(p(&format!("{name}.b"))?), spec)
        };
        let stem = conv(tape, x, "stem", DOWN)?;
        let stem = tape.relu(stem);
        let e1 = conv(tape, stem, "enc1", DOWN)?;
        let e1 = tape.relu(e1);
        let e2 = conv(tape, e1, "enc2", DOWN)?;
        let e2 = tape.relu(e2);
        let e3 = conv(tape, e2, "enc3", DOWN)?;
        let e3 = tape.relu(e3);

        let mut d = tape.conv_transpose2d(e3, p("dec1.w")?, Some(p("dec1.b")?), DOWN)?;
        if self.config.lateral {
            let l = conv(tape, e2, "lat2", POINT)?;
            d = tape.add(d, l)?;
        }
        let d = tape.relu(d);
        let mut d = tape.conv_transpose2d(d, p("dec2.w")?, Some(p("dec2.b")?), DOWN)?;
        if self.config.lateral {
            let l = conv(tape, e1, "lat1", POINT)?;
            d = tape.add(d, l)?;
        }
        let mut d = tape.relu(d);
        for r in 0..self.config.refine {
            let y = conv(tape, d, &format!("refine{r}"), SAME3)?;
            d = tape.relu(y);
        }
        conv(tape, d, "head", POINT)
    }

    /// Heatmaps for a batch of images (`B×C×S×S`), without gradient tracking.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<HeatmapStack>> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let x = tape.leaf(images.clone());
        let out = self.forward(&mut tape, &vars, x)?;
        split_batch(tape.value(out), OUTPUT_STRIDE)
    }

    pub fn predict_one(&self, image: &Tensor) -> Result<HeatmapStack> {
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        let batch = image.clone().reshape(shape)?;
        Ok(self.predict(&batch)?.remove(0))
    }
}

/// Splits a `B×N×H×W` tensor into per-sample heatmap stacks.
pub fn split_batch(t: &Tensor, stride: usize) -> Result<Vec<HeatmapStack>> {
    let &[b, n, h, w] = t.shape() else {
        return Err(Error::invalid(format!("expected B×N×H×W, got {:?}", t.shape())));
    };
    t.data()
        .chunks(n * h * w)
        .take(b)
        .map(|c| HeatmapStack::new(Tensor::new([n, h, w], c.to_vec())?, stride))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(9)
    }

    fn random_image(seed: u64, s: usize) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new([1, s, s], (0..s * s).map(|_| r.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn output_is_a_quarter_of_the_input() {
        let g = Generator::new(GeneratorConfig::new(16), &mut rng()).unwrap();
        let h = g.predict_one(&random_image(1, 64)).unwrap();
        assert_eq!(h.values().shape(), &[16, 16, 16]);
        assert_eq!(h.stride(), 4);
    }

    #[test]
    fn zero_image_and_zero_head_give_zero_heatmaps() {
        let mut g = Generator::new(GeneratorConfig::new(5), &mut rng()).unwrap();
        g.zero_head();
        let h = g.predict_one(&Tensor::zeros([1, 32, 32])).unwrap();
        assert!(h.values().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let g = Generator::new(GeneratorConfig::new(4), &mut rng()).unwrap();
        assert!(g.predict_one(&Tensor::zeros([1, 40, 40])).is_err());
        assert!(g.predict_one(&Tensor::zeros([2, 32, 32])).is_err());
    }

    #[test]
    fn lateral_connections_matter() {
        let with = Generator::new(GeneratorConfig::new(4), &mut rng()).unwrap();
        // Same weights for every shared layer, laterals dropped.
        let mut cfg = GeneratorConfig::new(4);
        cfg.lateral = false;
        let mut without = Generator::new(cfg, &mut rng()).unwrap();
        for (name, t) in with.params.iter() {
            if let Some(i) = without.params.index_of(name) {
                without.params.tensors_mut()[i] = t.clone();
            }
        }
        assert!(without.params.len() < with.params.len());
        for seed in 0..3 {
            let img = random_image(seed, 32);
            let a = with.predict_one(&img).unwrap();
            let b = without.predict_one(&img).unwrap();
            assert!(a.values().max_abs_diff(b.values()) > 1e-6);
        }
    }

    #[test]
    fn batch_matches_single_predictions() {
        let g = Generator::new(GeneratorConfig::new(3), &mut rng()).unwrap();
        let (a, b) = (random_image(1, 32), random_image(2, 32));
        let mut data = a.data().to_vec();
        data.extend_from_slice(b.data());
        let batch = g.predict(&Tensor::new([2, 1, 32, 32], data).unwrap()).unwrap();
        assert_eq!(batch[0], g.predict_one(&a).unwrap());
        assert_eq!(batch[1], g.predict_one(&b).unwrap());
    }
}
