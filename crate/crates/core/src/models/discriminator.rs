//! Graph structure network: every heatmap channel is embedded by a shared
//! conv encoder into a node state, the states are propagated over the
//! skeleton by the GGNN, and each node is read out to one plausibility logit.

use rand::Rng;

use super::var;
use crate::autodiff::{ConvSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::ggnn::{propagate, GgnnParams, GgnnVars, MessageGraph, MessageTying};
use crate::params::{uniform_fan_in, ParamSet};
use crate::skeleton::SkeletonGraph;
use crate::tensor::Tensor;

const DOWN: ConvSpec = ConvSpec { stride: 2, pad: 1 };
const SAME3: ConvSpec = ConvSpec { stride: 1, pad: 1 };
const GGNN_PREFIX: &str = "ggnn.";

/// How one heatmap channel becomes a node feature vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HeatmapEncoder {
    /// Two 3×3 convs, then soft-argmax pooling: every feature map is reduced
    /// to the expected (x, y) of its spatial softmax.
    #[default]
    SoftArgmax,
    /// Two stride-2 4×4 convs, flattened.
    Strided,
    /// No learned encoder: the expected (x, y) of each channel's spatial
    /// softmax at a fixed inverse temperature, so only joint positions
    /// reach the graph network.
    Coordinates,
}

/// Inverse temperature of the [`HeatmapEncoder::Coordinates`] softmax.
pub const COORDINATE_BETA: f64 = 10.0;

impl HeatmapEncoder {
    pub fn name(self) -> &'static str {
        match self {
            HeatmapEncoder::SoftArgmax => "soft-argmax",
            HeatmapEncoder::Strided => "strided",
            HeatmapEncoder::Coordinates => "coordinates",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "soft-argmax" => Some(HeatmapEncoder::SoftArgmax),
            "strided" => Some(HeatmapEncoder::Strided),
            "coordinates" => Some(HeatmapEncoder::Coordinates),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiscriminatorConfig {
    pub n_joints: usize,
    /// Side length of the input heatmaps; must be divisible by 4.
    pub hm_size: usize,
    pub encoder: HeatmapEncoder,
    pub encoder_channels: [usize; 2],
    pub hidden_dim: usize,
    pub steps: usize,
    pub tying: MessageTying,
}

impl DiscriminatorConfig {
    pub fn new(n_joints: usize, hm_size: usize) -> Self {
        DiscriminatorConfig {
            n_joints,
            hm_size,
            encoder: HeatmapEncoder::default(),
            encoder_channels: [8, 16],
            hidden_dim: 64,
            steps: 3,
            tying: MessageTying::Shared,
        }
    }

    fn feature_len(&self) -> usize {
        match self.encoder {
            HeatmapEncoder::SoftArgmax => 2 * self.encoder_channels[1],
            HeatmapEncoder::Coordinates => 2,
            HeatmapEncoder::Strided => {
                let s = self.hm_size / 4;
                self.encoder_channels[1] * s * s
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub params: ParamSet,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, rng: &mut impl Rng) -> Result<Self> {
        let c = &config;
        if c.hm_size == 0 || c.hm_size % 4 != 0 {
            return Err(Error::Geometry {
                op: "discriminator",
                detail: format!("heatmap size {} must be a positive multiple of 4", c.hm_size),
            });
        }
        if c.n_joints == 0 || c.hidden_dim == 0 || c.encoder_channels.contains(&0) {
            return Err(Error::invalid("discriminator sizes must be positive"));
        }
        let [c1, c2] = c.encoder_channels;
        let d = c.hidden_dim;
        let mut p = ParamSet::new();
        let k = match c.encoder {
            HeatmapEncoder::SoftArgmax => Some(3),
            HeatmapEncoder::Strided => Some(4),
            HeatmapEncoder::Coordinates => None,
        };
        if let Some(k) = k {
            p.push("enc1.w", uniform_fan_in(rng, &[c1, 1, k, k], k * k));
            p.push("enc1.b", Tensor::zeros([c1]));
            p.push("enc2.w", uniform_fan_in(rng, &[c2, c1, k, k], c1 * k * k));
            p.push("enc2.b", Tensor::zeros([c2]));
        }
        let f = c.feature_len();
        p.push("embed.w", uniform_fan_in(rng, &[f, d], f));
        p.push("embed.b", Tensor::zeros([d]));
        GgnnParams::random(d, c.tying, rng).append_to(&mut p, GGNN_PREFIX);
        p.push("readout.w", uniform_fan_in(rng, &[d, 1], d));
        p.push("readout.b", Tensor::zeros([1]));
        Ok(Discriminator { config, params: p })
    }

    pub fn message_graph(&self, graph: &SkeletonGraph) -> Result<MessageGraph> {
        if graph.n_nodes() != self.config.n_joints {
            return Err(Error::invalid(format!(
                "discriminator expects {} joints, skeleton has {}",
                self.config.n_joints,
                graph.n_nodes()
            )));
        }
        Ok(MessageGraph::new(graph, self.config.tying))
    }

    /// Per-joint logits for heatmaps `B×N×H×W` (result `B×N`) or `N×H×W`
    /// (result `N`).
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], heatmaps: Var, graph: &MessageGraph) -> Result<Var> {
        let c = &self.config;
        let shape = tape.shape(heatmaps).to_vec();
        let (batch, n, h, w) = match shape[..] {
            [n, h, w] => (None, n, h, w),
            [b, n, h, w] => (Some(b), n, h, w),
            _ => return Err(Error::invalid(format!("discriminator input must be 3D or 4D, got {shape:?}"))),
        };
        if n != graph.n_nodes() || n != c.n_joints {
            return Err(Error::invalid(format!(
                "{n} heatmap channels for a {}-node skeleton",
                graph.n_nodes()
            )));
        }
        if (h, w) != (c.hm_size, c.hm_size) {
            return Err(Error::shape("discriminator", &shape, &[n, c.hm_size, c.hm_size]));
        }
        let rows = batch.unwrap_or(1) * n;
        let p = |name: &str| var(&self.params, vars, name);

        let x = tape.reshape(heatmaps, [rows, 1, h, w])?;
        let x = match c.encoder {
            HeatmapEncoder::SoftArgmax => {
                let x = tape.conv2d(x, p("enc1.w")?, Some(p("enc1.b")?), SAME3)?;
                let x = tape.relu(x);
                let x = tape.conv2d(x, p("enc2.w")?, Some(p("enc2.b")?), SAME3)?;
                let c2 = c.encoder_channels[1];
                let x = tape.reshape(x, [rows * c2, h * w])?;
                let attn = tape.softmax_rows(x)?;
                let grid = tape.leaf(coordinate_grid(h));
                let xy = tape.matmul(attn, grid)?;
                tape.reshape(xy, [rows, c.feature_len()])?
            }
            HeatmapEncoder::Strided => {
                let x = tape.conv2d(x, p("enc1.w")?, Some(p("enc1.b")?), DOWN)?;
                let x = tape.relu(x);
                let x = tape.conv2d(x, p("enc2.w")?, Some(p("enc2.b")?), DOWN)?;
                let x = tape.relu(x);
                tape.reshape(x, [rows, c.feature_len()])?
            }
            HeatmapEncoder::Coordinates => {
                let x = tape.reshape(x, [rows, h * w])?;
                let x = tape.mul_scalar(x, COORDINATE_BETA);
                let attn = tape.softmax_rows(x)?;
                let grid = tape.leaf(coordinate_grid(h));
                tape.matmul(attn, grid)?
            }
        };
        let x = tape.matmul(x, p("embed.w")?)?;
        let x = tape.add_row_bias(x, p("embed.b")?)?;
        let s0 = tape.tanh(x);

        let gv = GgnnVars::lookup(&self.params, vars, GGNN_PREFIX, c.tying)?;
        let s = propagate(tape, graph, s0, &gv, c.steps)?;
        let logits = tape.matmul(s, p("readout.w")?)?;
        let logits = tape.add_row_bias(logits, p("readout.b")?)?;
        match batch {
            Some(b) => tape.reshape(logits, [b, n]),
            None => tape.reshape(logits, [n]),
        }
    }

    pub fn logits(&self, heatmaps: &Tensor, graph: &SkeletonGraph) -> Result<Tensor> {
        let mg = self.message_graph(graph)?;
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let x = tape.leaf(heatmaps.clone());
        let out = self.forward(&mut tape, &vars, x, &mg)?;
        Ok(tape.value(out).clone())
    }

    /// Per-joint plausibility scores in `(0, 1)`.
    pub fn scores(&self, heatmaps: &Tensor, graph: &SkeletonGraph) -> Result<Tensor> {
        Ok(self.logits(heatmaps, graph)?.map(|z| {
            // Clamp so the score stays strictly inside (0, 1) in floating point.
            let s = 1.0 / (1.0 + (-z).exp());
            s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
        }))
    }
}

/// Cell-centre coordinates of an `s×s` grid, scaled to `[-1, 1]`, one row
/// `(x, y)` per cell in row-major order.
fn coordinate_grid(s: usize) -> Tensor {
    let c = |i: usize| (2 * i + 1) as f64 / s as f64 - 1.0;
    let data = (0..s * s).flat_map(|k| [c(k % s), c(k / s)]).collect();
    Tensor::new([s * s, 2], data).expect("grid shape")
}
