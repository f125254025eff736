//! Alternating adversarial training.
//!
//! Every generator step consumes one batch. After each `g_steps_per_d`
//! generator steps, one discriminator step runs on the batch of the last
//! generator step, so the step sequence is `G,G,G,D,G,G,G,D,…` and the
//! generator sees every training sample once per epoch.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::data::augment::{shuffled_indices, AugmentParams};
use crate::data::synth::sample_seed;
use crate::data::{augment, Dataset, PoseSample};
use crate::error::{Error, Result};
use crate::ggnn::{MessageGraph, MessageTying};
use crate::heatmap::{decode, DecodeOptions, DEFAULT_SIGMA};
use crate::metrics::{pck, InvisiblePolicy, Pose};
use crate::models::generator::OUTPUT_STRIDE;
use crate::models::{
    adversarial_loss, discriminator_loss, generator_loss, Discriminator, DiscriminatorConfig, Generator,
    GeneratorConfig, HeatmapEncoder, HeatmapLoss,
};
use crate::optim::{scheduled_lr, Adam};
use crate::params::ParamSet;
use crate::skeleton::SkeletonGraph;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Weight of the adversarial term in the generator objective.
    pub alpha: f64,
    pub lr: f64,
    /// Discriminator learning rate as a multiple of `lr`.
    pub d_lr_scale: f64,
    /// 0-based epochs at which the learning rate drops by 10×.
    pub lr_drop_epochs: Vec<usize>,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub g_steps_per_d: usize,
    pub seed: u64,
    pub sigma: f64,
    pub ggnn_steps: usize,
    pub hidden_dim: usize,
    pub tying: MessageTying,
    pub d_encoder: HeatmapEncoder,
    /// Lateral encoder-to-decoder connections in the generator.
    pub cascade: bool,
    pub heatmap_loss: HeatmapLoss,
    pub augment: bool,
    pub augment_params: AugmentParams,
    /// Build and train the discriminator. Off means the generator is trained
    /// on the heatmap loss alone and no discriminator exists at all.
    pub use_discriminator: bool,
    pub val_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.01,
            lr: 1e-3,
            d_lr_scale: 3.0,
            lr_drop_epochs: vec![20, 27],
            batch_size: 16,
            max_epochs: 30,
            g_steps_per_d: 3,
            seed: 0,
            sigma: DEFAULT_SIGMA,
            ggnn_steps: 3,
            hidden_dim: 64,
            tying: MessageTying::Shared,
            d_encoder: HeatmapEncoder::default(),
            cascade: true,
            heatmap_loss: HeatmapLoss::Norm,
            augment: true,
            augment_params: AugmentParams {
                flip_prob: 0.0,
                ..AugmentParams::default()
            },
            use_discriminator: true,
            val_threshold: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha {} must be ≥ 0", self.alpha));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if !(self.d_lr_scale > 0.0 && self.d_lr_scale.is_finite()) {
            return bad(format!("d_lr_scale {} must be positive", self.d_lr_scale));
        }
        if self.g_steps_per_d == 0 {
            return bad("g_steps_per_d must be at least 1".into());
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch size and epoch count must be positive".into());
        }
        if !(self.sigma > 0.0) || self.hidden_dim == 0 {
            return bad("sigma and hidden dimension must be positive".into());
        }
        if self.alpha > 0.0 && !self.use_discriminator {
            return bad("a positive alpha needs the discriminator".into());
        }
        if self.augment {
            self.augment_params.validate()?;
        }
        Ok(())
    }

    /// Every configuration key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let a = &self.augment_params;
        vec![
            ("alpha", self.alpha.to_string()),
            ("lr", self.lr.to_string()),
            ("d_lr_scale", self.d_lr_scale.to_string()),
            ("lr_drop_epochs", join(&self.lr_drop_epochs)),
            ("batch_size", self.batch_size.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("g_steps_per_d", self.g_steps_per_d.to_string()),
            ("seed", self.seed.to_string()),
            ("sigma", self.sigma.to_string()),
            ("ggnn_steps", self.ggnn_steps.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("tying", self.tying.name().to_string()),
            ("d_encoder", self.d_encoder.name().to_string()),
            ("cascade", self.cascade.to_string()),
            ("heatmap_loss", self.heatmap_loss.name().to_string()),
            ("augment", self.augment.to_string()),
            ("flip_prob", a.flip_prob.to_string()),
            ("max_rotation_deg", a.max_rotation_deg.to_string()),
            ("scale_min", a.scale_range.0.to_string()),
            ("scale_max", a.scale_range.1.to_string()),
            ("use_discriminator", self.use_discriminator.to_string()),
            ("val_threshold", self.val_threshold.to_string()),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        Self::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    /// Sets one field from its textual form.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::invalid(format!("{key}: cannot parse {v:?}")))
        }
        fn named<T>(key: &str, v: &str, parsed: Option<T>) -> Result<T> {
            parsed.ok_or_else(|| Error::invalid(format!("{key}: unknown value {v:?}")))
        }
        let v = value.trim();
        match key {
            "alpha" => self.alpha = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "d_lr_scale" => self.d_lr_scale = num(key, v)?,
            "lr_drop_epochs" => self.lr_drop_epochs = split_usizes(v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "max_epochs" => self.max_epochs = num(key, v)?,
            "g_steps_per_d" => self.g_steps_per_d = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "sigma" => self.sigma = num(key, v)?,
            "ggnn_steps" => self.ggnn_steps = num(key, v)?,
            "hidden_dim" => self.hidden_dim = num(key, v)?,
            "tying" => self.tying = named(key, v, MessageTying::parse(v))?,
            "d_encoder" => self.d_encoder = named(key, v, HeatmapEncoder::parse(v))?,
            "cascade" => self.cascade = num(key, v)?,
            "heatmap_loss" => self.heatmap_loss = named(key, v, HeatmapLoss::parse(v))?,
            "augment" => self.augment = num(key, v)?,
            "flip_prob" => self.augment_params.flip_prob = num(key, v)?,
            "max_rotation_deg" => self.augment_params.max_rotation_deg = num(key, v)?,
            "scale_min" => self.augment_params.scale_range.0 = num(key, v)?,
            "scale_max" => self.augment_params.scale_range.1 = num(key, v)?,
            "use_discriminator" => self.use_discriminator = num(key, v)?,
            "val_threshold" => self.val_threshold = num(key, v)?,
            _ => return Err(Error::invalid(format!("unknown training option {key:?}"))),
        }
        Ok(())
    }

    /// Header entries describing the run; stored in checkpoints.
    pub fn to_header(&self, c: &mut Checkpoint) {
        for (k, v) in self.entries() {
            c.set(k, v);
        }
    }

    pub fn from_header(c: &Checkpoint) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for key in Self::keys() {
            let v = c
                .get(key)
                .ok_or_else(|| Error::invalid(format!("checkpoint header lacks {key:?}")))?;
            cfg.set_key(key, v)?;
        }
        Ok(cfg)
    }
}

pub(crate) fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

pub(crate) fn split_usizes(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| Error::invalid(format!("bad epoch list entry {t:?}"))))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepKind {
    Generator,
    Discriminator,
}

impl StepKind {
    pub fn letter(self) -> &'static str {
        match self {
            StepKind::Generator => "G",
            StepKind::Discriminator => "D",
        }
    }
}

/// One optimizer step. Quantities a step does not compute are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub kind: StepKind,
    pub lr: f64,
    pub l_g: Option<f64>,
    pub l_adv: Option<f64>,
    pub l_d: Option<f64>,
    pub d_real: Option<f64>,
    pub d_fake: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub val_pck: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

pub const STEP_CSV_HEADER: &str = "epoch,step,kind,lr,l_g,l_adv,l_d,d_real,d_fake";
pub const EPOCH_CSV_HEADER: &str = "epoch,lr,val_pck";

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:e}")).unwrap_or_default()
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse().map(Some).map_err(|_| Error::invalid(format!("bad number {s:?}")))
    }
}

impl TrainLog {
    pub fn steps_csv(&self) -> String {
        let mut s = String::from(STEP_CSV_HEADER);
        s.push('\n');
        for r in &self.steps {
            let _ = writeln!(
                s,
                "{},{},{},{:e},{},{},{},{},{}",
                r.epoch,
                r.step,
                r.kind.letter(),
                r.lr,
                opt(r.l_g),
                opt(r.l_adv),
                opt(r.l_d),
                opt(r.d_real),
                opt(r.d_fake)
            );
        }
        s
    }

    pub fn epochs_csv(&self) -> String {
        let mut s = String::from(EPOCH_CSV_HEADER);
        s.push('\n');
        for r in &self.epochs {
            let _ = writeln!(s, "{},{:e},{}", r.epoch, r.lr, opt(r.val_pck));
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let p = dir.join("train_log.csv");
        fs::write(&p, self.steps_csv()).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("val_log.csv");
        fs::write(&p, self.epochs_csv()).map_err(|e| Error::io(&p, e))
    }

    /// Reads logs written by [`TrainLog::write`].
    pub fn read(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        let mut log = TrainLog::default();
        for line in read("train_log.csv")?.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(Error::invalid(format!("bad train log row {line:?}")));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|_| Error::invalid(format!("bad integer {s:?}")));
            log.steps.push(StepRecord {
                epoch: int(f[0])?,
                step: int(f[1])?,
                kind: match f[2] {
                    "G" => StepKind::Generator,
                    "D" => StepKind::Discriminator,
                    k => return Err(Error::invalid(format!("bad step kind {k:?}"))),
                },
                lr: parse_opt(f[3])?.unwrap_or(0.0),
                l_g: parse_opt(f[4])?,
                l_adv: parse_opt(f[5])?,
                l_d: parse_opt(f[6])?,
                d_real: parse_opt(f[7])?,
                d_fake: parse_opt(f[8])?,
            });
        }
        for line in read("val_log.csv")?.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(Error::invalid(format!("bad validation log row {line:?}")));
            }
            log.epochs.push(EpochRecord {
                epoch: f[0].parse().map_err(|_| Error::invalid("bad epoch"))?,
                lr: parse_opt(f[1])?.unwrap_or(0.0),
                val_pck: parse_opt(f[2])?,
            });
        }
        Ok(log)
    }

    pub fn truncate_to_epoch(&mut self, last_epoch: usize) {
        self.steps.retain(|r| r.epoch <= last_epoch);
        self.epochs.retain(|r| r.epoch <= last_epoch);
    }
}

/// A training batch: images `B×1×S×S`, targets `B×N×H×W`, flags `B·N`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub targets: Tensor,
    pub visible: Vec<bool>,
}

impl Batch {
    pub fn from_samples(data: &Dataset, samples: &[PoseSample], sigma: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let s = data.image_size;
        let mut images = Vec::with_capacity(samples.len() * s * s);
        let mut targets = Vec::new();
        let mut visible = Vec::new();
        for smp in samples {
            let img = smp.image()?;
            if img.shape() != [1, s, s] {
                return Err(Error::shape("batch image", img.shape(), &[1, s, s]));
            }
            images.extend_from_slice(img.data());
            targets.extend_from_slice(data.target(smp, sigma)?.values().data());
            visible.extend(smp.joints.iter().map(|j| j.visible));
        }
        let (b, n, h) = (samples.len(), data.skeleton.n_nodes(), data.heatmap_size());
        Ok(Batch {
            images: Tensor::new([b, 1, s, s], images)?,
            targets: Tensor::new([b, n, h, h], targets)?,
            visible,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Models, optimizers and schedule position.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub skeleton: SkeletonGraph,
    pub image_size: usize,
    pub generator: Generator,
    pub discriminator: Option<Discriminator>,
    pub adam_g: Adam,
    pub adam_d: Option<Adam>,
    message_graph: Option<MessageGraph>,
    /// Epochs completed so far.
    pub epoch: usize,
    pub step: usize,
    pub g_since_d: usize,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, skeleton: &SkeletonGraph, image_size: usize) -> Result<Self> {
        cfg.validate()?;
        let n = skeleton.n_nodes();
        let mut gcfg = GeneratorConfig::new(n);
        gcfg.lateral = cfg.cascade;
        let generator = Generator::new(gcfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
        let discriminator = if cfg.use_discriminator {
            let mut dcfg = DiscriminatorConfig::new(n, image_size / OUTPUT_STRIDE);
            dcfg.hidden_dim = cfg.hidden_dim;
            dcfg.steps = cfg.ggnn_steps;
            dcfg.tying = cfg.tying;
            dcfg.encoder = cfg.d_encoder;
            // A separate stream keeps the generator's initial weights independent
            // of whether a discriminator exists.
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(1);
            Some(Discriminator::new(dcfg, &mut rng)?)
        } else {
            None
        };
        Self::assemble(cfg, skeleton, image_size, generator, discriminator)
    }

    fn assemble(
        cfg: &TrainConfig,
        skeleton: &SkeletonGraph,
        image_size: usize,
        generator: Generator,
        discriminator: Option<Discriminator>,
    ) -> Result<Self> {
        let adam_g = Adam::new(&generator.params, cfg.lr);
        let adam_d = discriminator.as_ref().map(|d| Adam::new(&d.params, cfg.lr));
        let message_graph = discriminator
            .as_ref()
            .map(|d| d.message_graph(skeleton))
            .transpose()?;
        Ok(TrainState {
            config: cfg.clone(),
            skeleton: skeleton.clone(),
            image_size,
            generator,
            discriminator,
            adam_g,
            adam_d,
            message_graph,
            epoch: 0,
            step: 0,
            g_since_d: 0,
        })
    }

    fn set_lr(&mut self, lr: f64) {
        self.adam_g.lr = lr;
        if let Some(a) = &mut self.adam_d {
            a.lr = lr * self.config.d_lr_scale;
        }
    }

    pub fn lr(&self) -> f64 {
        self.adam_g.lr
    }

    /// Full training state as a checkpoint.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        self.config.to_header(&mut c);
        c.set("format", "gsnpose-train");
        c.set("skeleton_joints", self.skeleton.names().join(","));
        if let Some(name) = self.skeleton.builtin_name() {
            c.set("skeleton", name);
        }
        c.set("image_size", self.image_size);
        c.set("heatmap_stride", OUTPUT_STRIDE);
        c.set("n_joints", self.skeleton.n_nodes());
        c.set("epoch", self.epoch);
        c.set("step", self.step);
        c.set("g_since_d", self.g_since_d);
        let g = &self.generator.config;
        c.set("g_stem", g.stem_channels);
        c.set("g_stages", join(&g.stages));
        c.set("g_decoder", g.decoder_channels);
        c.set("g_refine", g.refine);
        c.push_params("g.", &self.generator.params);
        push_adam(&mut c, "adam_g", &self.adam_g, &self.generator.params);
        if let (Some(d), Some(a)) = (&self.discriminator, &self.adam_d) {
            c.set("d_encoder_channels", join(&d.config.encoder_channels));
            c.push_params("d.", &d.params);
            push_adam(&mut c, "adam_d", a, &d.params);
        }
        c
    }

    /// Restores a state written by [`TrainState::to_checkpoint`].
    pub fn from_checkpoint(c: &Checkpoint, skeleton: &SkeletonGraph) -> Result<Self> {
        let cfg = TrainConfig::from_header(c)?;
        let image_size: usize = c.parse("image_size")?;
        check_skeleton(c, skeleton)?;
        let mut s = Self::new(&cfg, skeleton, image_size)?;
        let generator = load_generator(c, skeleton.n_nodes())?;
        s.generator = generator;
        s.adam_g = Adam::new(&s.generator.params, cfg.lr);
        restore_adam(c, "adam_g", &mut s.adam_g, &s.generator.params)?;
        if let (Some(d), Some(a)) = (&mut s.discriminator, &mut s.adam_d) {
            c.load_params("d.", &mut d.params)?;
            restore_adam(c, "adam_d", a, &d.params)?;
        }
        s.epoch = c.parse("epoch")?;
        s.step = c.parse("step")?;
        s.g_since_d = c.parse("g_since_d")?;
        Ok(s)
    }
}

fn push_adam(c: &mut Checkpoint, prefix: &str, a: &Adam, params: &ParamSet) {
    c.set(&format!("{prefix}_step"), a.step_count());
    let (m, v) = a.moments();
    for ((name, m), v) in params.names().iter().zip(m).zip(v) {
        c.push(format!("{prefix}.m.{name}"), m.clone());
        c.push(format!("{prefix}.v.{name}"), v.clone());
    }
}

fn restore_adam(c: &Checkpoint, prefix: &str, a: &mut Adam, params: &ParamSet) -> Result<()> {
    let get = |kind: &str, name: &str| {
        let full = format!("{prefix}.{kind}.{name}");
        c.tensor(&full)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("checkpoint lacks {full:?}")))
    };
    let m = params.names().iter().map(|n| get("m", n)).collect::<Result<Vec<_>>>()?;
    let v = params.names().iter().map(|n| get("v", n)).collect::<Result<Vec<_>>>()?;
    a.restore(c.parse(&format!("{prefix}_step"))?, m, v)
}

/// Rejects a checkpoint whose joint list differs from `skeleton`'s.
pub fn check_skeleton(c: &Checkpoint, skeleton: &SkeletonGraph) -> Result<()> {
    let want = skeleton.names().join(",");
    match c.get("skeleton_joints") {
        Some(found) if found == want => Ok(()),
        found => {
            let count = found.map_or(0, |f| f.split(',').count());
            Err(Error::invalid(format!(
                "skeleton mismatch: the checkpoint was trained on {count} joints ({}) but the data has {} joints ({want})",
                found.unwrap_or("none recorded"),
                skeleton.n_nodes()
            )))
        }
    }
}

/// Rebuilds the generator recorded in a checkpoint.
pub fn load_generator(c: &Checkpoint, n_joints: usize) -> Result<Generator> {
    let found: usize = c.parse("n_joints")?;
    if found != n_joints {
        return Err(Error::invalid(format!(
            "checkpoint generator predicts {found} joints, skeleton has {n_joints}"
        )));
    }
    let stages = split_usizes(c.get("g_stages").unwrap_or(""))?;
    let stages: [usize; 3] = stages
        .try_into()
        .map_err(|_| Error::invalid("checkpoint g_stages must list three widths"))?;
    let cfg = GeneratorConfig {
        n_joints,
        in_channels: 1,
        stem_channels: c.parse("g_stem")?,
        stages,
        decoder_channels: c.parse("g_decoder")?,
        lateral: c.parse("cascade")?,
        refine: c.parse("g_refine")?,
    };
    let mut g = Generator::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    c.load_params("g.", &mut g.params)?;
    Ok(g)
}

fn finite(what: &str, v: f64, state: &TrainState) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!(
            "{what} = {v} at epoch {}, step {}",
            state.epoch, state.step
        )))
    }
}

fn mean_sigmoid(t: &Tensor) -> f64 {
    t.data().iter().map(|&z| 1.0 / (1.0 + (-z).exp())).sum::<f64>() / t.numel() as f64
}

/// One generator update on `L_G + α·L_adv`; discriminator weights are read only.
pub fn train_step_g(state: &mut TrainState, batch: &Batch) -> Result<StepRecord> {
    let cfg = &state.config;
    let mut tape = Tape::new();
    let gv = state.generator.params.bind(&mut tape, true);
    let x = tape.leaf(batch.images.clone());
    let pred = state.generator.forward(&mut tape, &gv, x)?;
    let l_g = generator_loss(&mut tape, pred, &batch.targets, &batch.visible, cfg.heatmap_loss)?;
    let mut total = l_g;
    let mut adv = None;
    if cfg.alpha > 0.0 {
        let d = state
            .discriminator
            .as_ref()
            .ok_or_else(|| Error::invalid("alpha > 0 without a discriminator"))?;
        let mg = state.message_graph.as_ref().expect("built with the discriminator");
        let dv = d.params.bind(&mut tape, false);
        let logits = d.forward(&mut tape, &dv, pred, mg)?;
        let l_adv = adversarial_loss(&mut tape, logits)?;
        let weighted = tape.mul_scalar(l_adv, cfg.alpha);
        total = tape.add(l_g, weighted)?;
        adv = Some((tape.value(l_adv).item(), mean_sigmoid(tape.value(logits))));
    }
    let l_g_value = finite("L_G", tape.value(l_g).item(), state)?;
    finite("generator objective", tape.value(total).item(), state)?;
    let mut grads = tape.backward(total)?;
    let g = state.generator.params.collect_grads(&mut grads, &gv);
    state.adam_g.step(&mut state.generator.params, &g)?;
    let rec = StepRecord {
        epoch: state.epoch,
        step: state.step,
        kind: StepKind::Generator,
        lr: state.adam_g.lr,
        l_g: Some(l_g_value),
        l_adv: adv.map(|a| a.0),
        l_d: None,
        d_real: None,
        d_fake: adv.map(|a| a.1),
    };
    state.step += 1;
    Ok(rec)
}

/// One discriminator update: ground-truth heatmaps are real, current
/// generator outputs (detached) are fake.
pub fn train_step_d(state: &mut TrainState, batch: &Batch) -> Result<StepRecord> {
    let d = state
        .discriminator
        .as_ref()
        .ok_or_else(|| Error::invalid("no discriminator to train"))?;
    let mg = state.message_graph.as_ref().expect("built with the discriminator");
    let mut tape = Tape::new();
    let gv = state.generator.params.bind(&mut tape, false);
    let x = tape.leaf(batch.images.clone());
    let pred = state.generator.forward(&mut tape, &gv, x)?;
    let fake = tape.detach(pred);
    let real = tape.leaf(batch.targets.clone());
    let dv = d.params.bind(&mut tape, true);
    let real_logits = d.forward(&mut tape, &dv, real, mg)?;
    let fake_logits = d.forward(&mut tape, &dv, fake, mg)?;
    let loss = discriminator_loss(&mut tape, real_logits, fake_logits)?;
    let l_d = finite("L_D", tape.value(loss).item(), state)?;
    let d_real = mean_sigmoid(tape.value(real_logits));
    let d_fake = mean_sigmoid(tape.value(fake_logits));
    let mut grads = tape.backward(loss)?;
    let g = d.params.collect_grads(&mut grads, &dv);
    let d = state.discriminator.as_mut().expect("checked above");
    let adam = state.adam_d.as_mut().expect("paired with the discriminator");
    adam.step(&mut d.params, &g)?;
    let rec = StepRecord {
        epoch: state.epoch,
        step: state.step,
        kind: StepKind::Discriminator,
        lr: adam.lr,
        l_g: None,
        l_adv: None,
        l_d: Some(l_d),
        d_real: Some(d_real),
        d_fake: Some(d_fake),
    };
    state.step += 1;
    Ok(rec)
}

/// Seed of the augmentation draw for one sample in one epoch.
pub fn augment_seed(seed: u64, epoch: usize, sample_id: u64) -> u64 {
    sample_seed(sample_seed(seed ^ 0xA5A5_5A5A, epoch as u64), sample_id)
}

/// Sample order of one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    shuffled_indices(n, sample_seed(seed, 0x5EED_0000 + epoch as u64))
}

fn epoch_batches(state: &TrainState, train: &Dataset, epoch: usize) -> Result<Vec<Vec<PoseSample>>> {
    let cfg = &state.config;
    let order = epoch_order(train.len(), cfg.seed, epoch);
    order
        .chunks(cfg.batch_size)
        .map(|chunk| {
            chunk
                .iter()
                .map(|&i| {
                    let s = &train.samples[i];
                    if cfg.augment {
                        augment(
                            s,
                            &train.skeleton,
                            train.image_size,
                            &cfg.augment_params,
                            augment_seed(cfg.seed, epoch, s.id),
                        )
                    } else {
                        Ok(s.clone())
                    }
                })
                .collect()
        })
        .collect()
}

/// Predicted joint coordinates for every sample of `data`.
pub fn predict_poses(g: &Generator, data: &Dataset, opts: DecodeOptions, batch: usize) -> Result<Vec<Pose>> {
    let s = data.image_size;
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.samples.chunks(batch.max(1)) {
        let mut px = Vec::with_capacity(chunk.len() * s * s);
        for smp in chunk {
            px.extend_from_slice(smp.image()?.data());
        }
        let imgs = Tensor::new([chunk.len(), 1, s, s], px)?;
        for h in g.predict(&imgs)? {
            out.push(decode(&h, opts).iter().map(|j| [j.x, j.y]).collect());
        }
    }
    Ok(out)
}

/// PCK of the generator on `data`, normalised by person scale.
pub fn validation_pck(g: &Generator, data: &Dataset, threshold: f64) -> Result<f64> {
    let preds = predict_poses(g, data, DecodeOptions::default(), 32)?;
    let gts: Vec<Pose> = data.samples.iter().map(PoseSample::coords).collect();
    let vis: Vec<Vec<bool>> = data.samples.iter().map(PoseSample::visibility).collect();
    let norms: Vec<f64> = data.samples.iter().map(|s| s.person_scale).collect();
    let r = pck(&preds, &gts, &vis, &norms, threshold, InvisiblePolicy::Exclude)?;
    Ok(r.mean.unwrap_or(0.0))
}

/// Trains for one epoch (the state's current one) and returns its records.
pub fn train_epoch(state: &mut TrainState, train: &Dataset) -> Result<Vec<StepRecord>> {
    let epoch = state.epoch;
    let lr = scheduled_lr(state.config.lr, &state.config.lr_drop_epochs, epoch);
    state.set_lr(lr);
    let mut records = Vec::new();
    for samples in epoch_batches(state, train, epoch)? {
        let batch = Batch::from_samples(train, &samples, state.config.sigma)?;
        records.push(train_step_g(state, &batch)?);
        state.g_since_d += 1;
        if state.g_since_d == state.config.g_steps_per_d && state.discriminator.is_some() {
            records.push(train_step_d(state, &batch)?);
            state.g_since_d = 0;
        }
        state.g_since_d %= state.config.g_steps_per_d;
    }
    Ok(records)
}

/// Hooks called by [`train_loop`] after every epoch.
pub trait EpochHook {
    fn after_epoch(&mut self, state: &TrainState, log: &TrainLog) -> Result<()>;
}

impl EpochHook for () {
    fn after_epoch(&mut self, _: &TrainState, _: &TrainLog) -> Result<()> {
        Ok(())
    }
}

/// Writes checkpoints and logs under a run directory.
pub struct RunDirHook<'a> {
    pub dir: &'a Path,
    pub verbose: bool,
}

impl EpochHook for RunDirHook<'_> {
    fn after_epoch(&mut self, state: &TrainState, log: &TrainLog) -> Result<()> {
        let ck = self.dir.join("checkpoints");
        fs::create_dir_all(&ck).map_err(|e| Error::io(&ck, e))?;
        let c = state.to_checkpoint();
        c.write(&ck.join(format!("epoch_{:03}.ckpt", state.epoch)))?;
        c.write(&ck.join("last.ckpt"))?;
        log.write(self.dir)?;
        if self.verbose {
            if let Some(e) = log.epochs.last() {
                eprintln!(
                    "epoch {:>3}/{}  lr {:.1e}  val PCK@{} {}",
                    e.epoch + 1,
                    state.config.max_epochs,
                    e.lr,
                    state.config.val_threshold,
                    e.val_pck.map_or("-".into(), |v| format!("{v:.4}"))
                );
            }
        }
        Ok(())
    }
}

/// Runs epochs `state.epoch..max_epochs`, validating after each one.
pub fn train_loop(
    state: &mut TrainState,
    train: &Dataset,
    val: Option<&Dataset>,
    log: &mut TrainLog,
    hook: &mut dyn EpochHook,
) -> Result<()> {
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if train.skeleton != state.skeleton || train.image_size != state.image_size {
        return Err(Error::invalid("training data does not match the model's skeleton or image size"));
    }
    while state.epoch < state.config.max_epochs {
        let records = train_epoch(state, train)?;
        log.steps.extend(records);
        let val_pck = match val {
            Some(v) => Some(validation_pck(&state.generator, v, state.config.val_threshold)?),
            None => None,
        };
        log.epochs.push(EpochRecord {
            epoch: state.epoch,
            lr: state.lr(),
            val_pck,
        });
        // From here on `state.epoch` counts completed epochs.
        state.epoch += 1;
        hook.after_epoch(state, log)?;
    }
    Ok(())
}

/// Checkpoint file name of the latest epoch inside a run directory.
pub const LAST_CHECKPOINT: &str = "checkpoints/last.ckpt";

/// Reloads a run directory written by [`RunDirHook`]: the last checkpoint
/// and the log rows of the epochs it contains.
pub fn resume_run(dir: &Path, skeleton: &SkeletonGraph) -> Result<(TrainState, TrainLog)> {
    let state = TrainState::from_checkpoint(&Checkpoint::read(&dir.join(LAST_CHECKPOINT))?, skeleton)?;
    let mut log = TrainLog::read(dir)?;
    match state.epoch.checked_sub(1) {
        Some(last) => log.truncate_to_epoch(last),
        None => log = TrainLog::default(),
    }
    Ok((state, log))
}

/// Trains from scratch and returns the final state and log.
pub fn train(cfg: &TrainConfig, train: &Dataset, val: Option<&Dataset>) -> Result<(TrainState, TrainLog)> {
    let mut state = TrainState::new(cfg, &train.skeleton, train.image_size)?;
    let mut log = TrainLog::default();
    train_loop(&mut state, train, val, &mut log, &mut ())?;
    Ok((state, log))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub val_pck: f64,
    pub all_finite: bool,
}

/// Trains once per α with the same seed and data order.
pub fn alpha_sweep(cfg: &TrainConfig, train_set: &Dataset, val: &Dataset, alphas: &[f64]) -> Result<Vec<SweepRow>> {
    if alphas.is_empty() {
        return Err(Error::invalid("alpha list is empty"));
    }
    alphas
        .iter()
        .map(|&alpha| {
            let c = TrainConfig { alpha, ..cfg.clone() };
            let (state, log) = train(&c, train_set, Some(val))?;
            let all_finite = log.steps.iter().all(|r| {
                [r.l_g, r.l_adv, r.l_d, r.d_real, r.d_fake]
                    .iter()
                    .flatten()
                    .all(|v| v.is_finite())
            });
            Ok(SweepRow {
                alpha,
                val_pck: validation_pck(&state.generator, val, c.val_threshold)?,
                all_finite,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("alpha,val_pck,all_finite\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.6},{}", r.alpha, r.val_pck, r.all_finite);
    }
    s
}
