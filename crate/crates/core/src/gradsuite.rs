//! Central-difference gradient checks over every differentiable op and
//! over both training losses end to end.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check_with, ConvSpec, GradCheckOptions, OpKind, Tape, Var};
use crate::error::Result;
use crate::ggnn::MessageTying;
use crate::models::{
    adversarial_loss, discriminator_loss, generator_loss, Discriminator, DiscriminatorConfig, Generator,
    GeneratorConfig, HeatmapEncoder, HeatmapLoss,
};
use crate::params::ParamSet;
use crate::skeleton::SkeletonGraph;
use crate::tensor::Tensor;

/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, serde::Serialize)]
pub struct SuiteItem {
    pub name: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

impl SuiteItem {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

type Check = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape product")
}

/// `Σ y ⊙ w` for a fixed random `w`, so every output coordinate carries a
/// distinct weight into the checked gradient.
fn project(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let w = tape.leaf(w.clone());
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

struct Case {
    name: String,
    input: Tensor,
    f: Check,
}

fn case(name: &str, input: Tensor, f: impl Fn(&mut Tape, Var) -> Result<Var> + 'static) -> Case {
    Case {
        name: name.to_string(),
        input,
        f: Box::new(f),
    }
}

/// A unary check `x ↦ Σ op(x) ⊙ w` with the output shape given.
fn unary(
    rng: &mut ChaCha8Rng,
    name: &str,
    in_shape: &[usize],
    range: (f64, f64),
    out_shape: &[usize],
    op: impl Fn(&mut Tape, Var) -> Result<Var> + 'static,
) -> Case {
    let input = rand_tensor(rng, in_shape, range.0, range.1);
    let w = rand_tensor(rng, out_shape, -1.0, 1.0);
    case(name, input, move |t, x| {
        let y = op(t, x)?;
        project(t, y, &w)
    })
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut cases = Vec::new();
    let m = |rng: &mut ChaCha8Rng, s: &[usize]| rand_tensor(rng, s, -1.0, 1.0);

    let b = m(rng, &[3, 4]);
    cases.push(unary(rng, "add", &[3, 4], (-1.0, 1.0), &[3, 4], move |t, x| {
        let b = t.leaf(b.clone());
        t.add(x, b)
    }));
    let b = m(rng, &[3, 4]);
    cases.push(unary(rng, "sub", &[3, 4], (-1.0, 1.0), &[3, 4], move |t, x| {
        let b = t.leaf(b.clone());
        t.sub(b, x)
    }));
    let b = m(rng, &[3, 4]);
    cases.push(unary(rng, "mul", &[3, 4], (-1.0, 1.0), &[3, 4], move |t, x| {
        let b = t.leaf(b.clone());
        let y = t.mul(x, b)?;
        t.mul(y, x)
    }));
    cases.push(unary(rng, "add_scalar", &[5], (-1.0, 1.0), &[5], |t, x| Ok(t.add_scalar(x, 0.7))));
    cases.push(unary(rng, "mul_scalar", &[5], (-1.0, 1.0), &[5], |t, x| Ok(t.mul_scalar(x, -1.3))));
    let b = m(rng, &[4, 2]);
    cases.push(unary(rng, "matmul (left)", &[3, 4], (-1.0, 1.0), &[3, 2], move |t, x| {
        let b = t.leaf(b.clone());
        t.matmul(x, b)
    }));
    let a = m(rng, &[3, 4]);
    cases.push(unary(rng, "matmul (right)", &[4, 2], (-1.0, 1.0), &[3, 2], move |t, x| {
        let a = t.leaf(a.clone());
        t.matmul(a, x)
    }));
    cases.push(unary(rng, "transpose", &[3, 4], (-1.0, 1.0), &[4, 3], |t, x| t.transpose(x)));
    let xb = m(rng, &[3, 4]);
    cases.push(unary(rng, "add_row_bias (bias)", &[4], (-1.0, 1.0), &[3, 4], move |t, b| {
        let x = t.leaf(xb.clone());
        t.add_row_bias(x, b)
    }));
    cases.push(unary(rng, "sigmoid", &[6], (-3.0, 3.0), &[6], |t, x| Ok(t.sigmoid(x))));
    cases.push(unary(rng, "tanh", &[6], (-2.0, 2.0), &[6], |t, x| Ok(t.tanh(x))));
    // Kept away from the kink so the finite difference is well defined.
    let relu_in = {
        let mut v = m(rng, &[8]);
        v.data_mut().iter_mut().for_each(|a| *a += 0.05f64.copysign(*a));
        v
    };
    let w = m(rng, &[8]);
    cases.push(case("relu", relu_in, move |t, x| {
        let y = t.relu(x);
        project(t, y, &w)
    }));
    cases.push(unary(rng, "log", &[6], (0.5, 2.0), &[6], |t, x| t.log(x)));
    cases.push(case("sum", m(rng, &[2, 3]), |t, x| {
        let sq = t.mul(x, x)?;
        Ok(t.sum(sq))
    }));
    cases.push(case("mean", m(rng, &[2, 3]), |t, x| {
        let sq = t.mul(x, x)?;
        Ok(t.mean(sq))
    }));
    cases.push(unary(rng, "reshape", &[2, 6], (-1.0, 1.0), &[3, 4], |t, x| t.reshape(x, [3, 4])));
    cases.push(unary(rng, "row_norms", &[3, 5], (-1.0, 1.0), &[3], |t, x| t.row_norms(x)));
    cases.push(unary(rng, "softmax_rows", &[3, 5], (-2.0, 2.0), &[3, 5], |t, x| {
        t.softmax_rows(x)
    }));

    let w = m(rng, &[3, 2, 3, 3]);
    let bias = m(rng, &[3]);
    cases.push(unary(rng, "conv2d (input)", &[2, 2, 7, 7], (-1.0, 1.0), &[2, 3, 4, 4], move |t, x| {
        let w = t.leaf(w.clone());
        let b = t.leaf(bias.clone());
        t.conv2d(x, w, Some(b), ConvSpec::new(2, 1))
    }));
    let xi = m(rng, &[2, 2, 6, 6]);
    cases.push(unary(rng, "conv2d (weight)", &[3, 2, 3, 3], (-1.0, 1.0), &[2, 3, 6, 6], move |t, w| {
        let x = t.leaf(xi.clone());
        t.conv2d(x, w, None, ConvSpec::new(1, 1))
    }));
    let xi = m(rng, &[1, 2, 5, 5]);
    let w = m(rng, &[3, 2, 1, 1]);
    cases.push(unary(rng, "conv2d (bias)", &[3], (-1.0, 1.0), &[1, 3, 5, 5], move |t, b| {
        let x = t.leaf(xi.clone());
        let w = t.leaf(w.clone());
        t.conv2d(x, w, Some(b), ConvSpec::new(1, 0))
    }));
    let w = m(rng, &[2, 3, 4, 4]);
    let bias = m(rng, &[3]);
    cases.push(unary(rng, "conv_transpose2d (input)", &[2, 2, 3, 3], (-1.0, 1.0), &[2, 3, 6, 6], move |t, x| {
        let w = t.leaf(w.clone());
        let b = t.leaf(bias.clone());
        t.conv_transpose2d(x, w, Some(b), ConvSpec::new(2, 1))
    }));
    let xi = m(rng, &[1, 2, 3, 3]);
    cases.push(unary(rng, "conv_transpose2d (weight)", &[2, 3, 4, 4], (-1.0, 1.0), &[1, 3, 6, 6], move |t, w| {
        let x = t.leaf(xi.clone());
        t.conv_transpose2d(x, w, None, ConvSpec::new(2, 1))
    }));
    let nbrs = Arc::new(vec![vec![1], vec![0, 2], vec![1, 3], vec![2]]);
    cases.push(unary(rng, "graph_aggregate", &[8, 3], (-1.0, 1.0), &[8, 3], move |t, x| {
        t.graph_aggregate(x, nbrs.clone())
    }));
    let targets = Tensor::new([6], vec![1.0, 0.0, 1.0, 0.0, 0.25, 0.75]).expect("six targets");
    cases.push(case("bce_with_logits", rand_tensor(rng, &[6], -4.0, 4.0), move |t, x| {
        t.bce_with_logits(x, &targets)
    }));
    cases
}

/// Binds `params` as constants except entry `i`, which is replaced by `x`.
fn bind_with(tape: &mut Tape, params: &ParamSet, i: usize, x: Var) -> Vec<Var> {
    params
        .tensors()
        .iter()
        .enumerate()
        .map(|(j, t)| if j == i { x } else { tape.leaf(t.clone()) })
        .collect()
}

fn small_generator(n_joints: usize, rng: &mut ChaCha8Rng) -> Result<Generator> {
    let cfg = GeneratorConfig {
        n_joints,
        in_channels: 1,
        stem_channels: 2,
        stages: [3, 3, 4],
        decoder_channels: 3,
        lateral: true,
        refine: 1,
    };
    Generator::new(cfg, rng)
}

fn small_discriminator(n_joints: usize, hm: usize, encoder: HeatmapEncoder, rng: &mut ChaCha8Rng) -> Result<Discriminator> {
    let cfg = DiscriminatorConfig {
        encoder,
        encoder_channels: [2, 3],
        hidden_dim: 4,
        steps: 2,
        tying: MessageTying::PerDirection,
        ..DiscriminatorConfig::new(n_joints, hm)
    };
    Discriminator::new(cfg, rng)
}

fn model_cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    let skeleton = SkeletonGraph::mpii_16();
    let n = skeleton.n_nodes();
    let (s, hm) = (16, 4);
    let mut cases = Vec::new();

    let g = Arc::new(small_generator(n, rng)?);
    let image = rand_tensor(rng, &[1, 1, s, s], 0.0, 1.0);
    let target = rand_tensor(rng, &[1, n, hm, hm], 0.0, 1.0);
    let visible: Vec<bool> = (0..n).map(|j| j % 5 != 2).collect();

    {
        let (g, target, visible) = (g.clone(), target.clone(), visible.clone());
        cases.push(case("generator loss (image)", image.clone(), move |t, x| {
            let vars = g.params.bind(t, false);
            let pred = g.forward(t, &vars, x)?;
            generator_loss(t, pred, &target, &visible, HeatmapLoss::Norm)
        }));
    }
    for pname in ["stem.w", "lat1.w", "dec1.w", "head.w"] {
        let i = g.params.index_of(pname).expect("generator parameter");
        let (g, target, visible, image) = (g.clone(), target.clone(), visible.clone(), image.clone());
        let name = format!("generator loss ({pname})");
        cases.push(case(&name, g.params.get(i).clone(), move |t, w| {
            let vars = bind_with(t, &g.params, i, w);
            let x = t.leaf(image.clone());
            let pred = g.forward(t, &vars, x)?;
            generator_loss(t, pred, &target, &visible, HeatmapLoss::Norm)
        }));
    }

    let real = rand_tensor(rng, &[2, n, hm, hm], 0.0, 1.0);
    let fake = rand_tensor(rng, &[2, n, hm, hm], 0.0, 1.0);
    for encoder in [HeatmapEncoder::SoftArgmax, HeatmapEncoder::Strided, HeatmapEncoder::Coordinates] {
        let d = Arc::new(small_discriminator(n, hm, encoder, rng)?);
        let mg = Arc::new(d.message_graph(&skeleton)?);
        {
            let (d, mg, real) = (d.clone(), mg.clone(), real.clone());
            let name = format!("discriminator loss, {} encoder (fake heatmaps)", encoder.name());
            cases.push(case(&name, fake.clone(), move |t, x| {
                let vars = d.params.bind(t, false);
                let r = t.leaf(real.clone());
                let rl = d.forward(t, &vars, r, &mg)?;
                let fl = d.forward(t, &vars, x, &mg)?;
                discriminator_loss(t, rl, fl)
            }));
        }
        let pnames: &[&str] = match encoder {
            HeatmapEncoder::SoftArgmax => &["enc2.w", "ggnn.w_msg_up", "ggnn.w_msg_down", "ggnn.u_z", "ggnn.w_h", "ggnn.b_r", "readout.w"],
            HeatmapEncoder::Strided => &["enc1.w", "embed.w"],
            HeatmapEncoder::Coordinates => &["embed.w", "ggnn.w_h"],
        };
        for &pname in pnames {
            let Some(i) = d.params.index_of(pname) else {
                continue;
            };
            let (d, mg, real, fake) = (d.clone(), mg.clone(), real.clone(), fake.clone());
            let name = format!("discriminator loss, {} encoder ({pname})", encoder.name());
            cases.push(case(&name, d.params.get(i).clone(), move |t, w| {
                let vars = bind_with(t, &d.params, i, w);
                let r = t.leaf(real.clone());
                let f = t.leaf(fake.clone());
                let rl = d.forward(t, &vars, r, &mg)?;
                let fl = d.forward(t, &vars, f, &mg)?;
                discriminator_loss(t, rl, fl)
            }));
        }
    }

    let d = Arc::new(small_discriminator(n, hm, HeatmapEncoder::SoftArgmax, rng)?);
    let mg = Arc::new(d.message_graph(&skeleton)?);
    let i = g.params.index_of("enc3.w").expect("generator parameter");
    cases.push(case("generator objective with adversarial term (enc3.w)", g.params.get(i).clone(), move |t, w| {
        let vars = bind_with(t, &g.params, i, w);
        let x = t.leaf(image.clone());
        let pred = g.forward(t, &vars, x)?;
        let l_g = generator_loss(t, pred, &target, &visible, HeatmapLoss::Norm)?;
        let dv = d.params.bind(t, false);
        let logits = d.forward(t, &dv, pred, &mg)?;
        let adv = adversarial_loss(t, logits)?;
        let adv = t.mul_scalar(adv, 0.5);
        t.add(l_g, adv)
    }));
    Ok(cases)
}

/// Runs the whole suite. `fault` corrupts one op's backward rule on the
/// analytic pass, as a negative control.
pub fn run_suite(fault: Option<OpKind>) -> Result<Vec<SuiteItem>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6AD);
    let mut cases = op_cases(&mut rng);
    cases.extend(model_cases(&mut rng)?);
    let opts = GradCheckOptions {
        eps: 1e-5,
        max_coords: Some(48),
        seed: 7,
        fault,
    };
    cases
        .into_iter()
        .map(|c| {
            let r = grad_check_with(&c.f, &c.input, &opts)?;
            Ok(SuiteItem {
                name: c.name,
                max_rel_error: r.max_rel_error,
                coords_checked: r.coords_checked,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_names_parameters() {
        let items = run_suite(None).unwrap();
        assert!(items.len() >= 12);
        for it in &items {
            assert!(it.passed(), "{} {:e}", it.name, it.max_rel_error);
            assert!(it.coords_checked > 0, "{}", it.name);
        }
        assert!(items.iter().any(|i| i.name.contains("ggnn.w_msg_down")));
    }

    #[test]
    fn corrupted_backward_rule_is_named() {
        let items = run_suite(Some(OpKind::SoftmaxRows)).unwrap();
        let failed: Vec<_> = items.iter().filter(|i| !i.passed()).map(|i| i.name.as_str()).collect();
        assert!(failed.contains(&"softmax_rows"), "{failed:?}");
        assert!(failed.iter().all(|n| n.contains("softmax") || n.contains("soft-argmax") || n.contains("coordinates") || n.contains("adversarial")));
    }
}
