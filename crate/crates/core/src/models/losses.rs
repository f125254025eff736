//! Heatmap regression and adversarial losses.
//!
//! The `*_loss` functions build differentiable graphs on a tape and take
//! discriminator logits. The `loss_*` functions evaluate the same quantities
//! on plain values, with discriminator outputs given as probabilities.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::heatmap::HeatmapStack;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HeatmapLoss {
    /// Mean over joints of the visibility-masked Euclidean norm of each
    /// channel's difference.
    #[default]
    Norm,
    /// Visibility-masked mean squared error per pixel.
    Mse,
}

impl HeatmapLoss {
    pub fn name(self) -> &'static str {
        match self {
            HeatmapLoss::Norm => "norm",
            HeatmapLoss::Mse => "mse",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "norm" => Some(HeatmapLoss::Norm),
            "mse" => Some(HeatmapLoss::Mse),
            _ => None,
        }
    }
}

/// `pred` is `N×H×W` or `B×N×H×W`; `visible` has one flag per channel row.
pub fn generator_loss(
    tape: &mut Tape,
    pred: Var,
    target: &Tensor,
    visible: &[bool],
    mode: HeatmapLoss,
) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    if shape != target.shape() {
        return Err(Error::shape("generator_loss", &shape, target.shape()));
    }
    if shape.len() < 3 {
        return Err(Error::invalid(format!("heatmaps must be N×H×W or B×N×H×W, got {shape:?}")));
    }
    let plane: usize = shape[shape.len() - 2..].iter().product();
    let rows = target.numel() / plane;
    if visible.len() != rows {
        return Err(Error::invalid(format!(
            "{} visibility flags for {rows} heatmap channels",
            visible.len()
        )));
    }
    let pred = tape.reshape(pred, [rows, plane])?;
    let target = tape.leaf(target.clone().reshape([rows, plane])?);
    let diff = tape.sub(pred, target)?;
    let mask: Vec<f64> = visible.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    match mode {
        HeatmapLoss::Norm => {
            let norms = tape.row_norms(diff)?;
            let mask = tape.leaf(Tensor::new([rows], mask)?);
            let masked = tape.mul(norms, mask)?;
            let total = tape.sum(masked);
            Ok(tape.mul_scalar(total, 1.0 / rows as f64))
        }
        HeatmapLoss::Mse => {
            let full: Vec<f64> = mask.iter().flat_map(|&m| std::iter::repeat(m).take(plane)).collect();
            let mask = tape.leaf(Tensor::new([rows, plane], full)?);
            let masked = tape.mul(diff, mask)?;
            let sq = tape.mul(masked, masked)?;
            let total = tape.sum(sq);
            Ok(tape.mul_scalar(total, 1.0 / (rows * plane) as f64))
        }
    }
}

/// Non-saturating generator term: BCE of fake logits against "real".
pub fn adversarial_loss(tape: &mut Tape, fake_logits: Var) -> Result<Var> {
    let ones = Tensor::ones(tape.shape(fake_logits).to_vec());
    tape.bce_with_logits(fake_logits, &ones)
}

/// BCE with target 1 on real logits plus BCE with target 0 on fake logits,
/// each averaged over joints and batch.
pub fn discriminator_loss(tape: &mut Tape, real_logits: Var, fake_logits: Var) -> Result<Var> {
    let ones = Tensor::ones(tape.shape(real_logits).to_vec());
    let zeros = Tensor::zeros(tape.shape(fake_logits).to_vec());
    let real = tape.bce_with_logits(real_logits, &ones)?;
    let fake = tape.bce_with_logits(fake_logits, &zeros)?;
    tape.add(real, fake)
}

/// Visibility-masked norm loss between two heatmap stacks.
pub fn loss_generator(pred: &HeatmapStack, gt: &HeatmapStack, visible: &[bool]) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.leaf(pred.values().clone());
    let l = generator_loss(&mut tape, p, gt.values(), visible, HeatmapLoss::Norm)?;
    Ok(tape.value(l).item())
}

fn check_probabilities(what: &str, scores: &Tensor) -> Result<()> {
    match scores.data().iter().find(|&&s| !(s > 0.0 && s < 1.0)) {
        Some(s) => Err(Error::invalid(format!("{what} score {s} outside (0, 1)"))),
        None => Ok(()),
    }
}

fn mean_log(scores: &Tensor, positive: bool) -> f64 {
    let total: f64 = scores
        .data()
        .iter()
        .map(|&s| if positive { -s.ln() } else { -(-s).ln_1p() })
        .sum();
    total / scores.numel() as f64
}

/// Discriminator BCE from probabilities.
pub fn loss_discriminator(real: &Tensor, fake: &Tensor) -> Result<f64> {
    check_probabilities("real", real)?;
    check_probabilities("fake", fake)?;
    Ok(mean_log(real, true) + mean_log(fake, false))
}

/// Generator adversarial BCE from probabilities.
pub fn loss_generator_adversarial(fake: &Tensor) -> Result<f64> {
    check_probabilities("fake", fake)?;
    Ok(mean_log(fake, true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stack(n: usize, vals: Vec<f64>) -> HeatmapStack {
        let hw = vals.len() / n;
        HeatmapStack::new(Tensor::new([n, 1, hw], vals).unwrap(), 4).unwrap()
    }

    #[test]
    fn generator_loss_fixtures() {
        let gt = stack(2, vec![0.0; 4]);
        assert_eq!(loss_generator(&gt, &gt, &[true, true]).unwrap(), 0.0);
        let pred = stack(2, vec![3.0, 0.0, 0.0, 4.0]);
        assert_eq!(loss_generator(&pred, &gt, &[false, false]).unwrap(), 0.0);
        assert_eq!(loss_generator(&pred, &gt, &[true, true]).unwrap(), 3.5);
        // Channel norms: (3,0)→3, (0,4)→4.
        let pred = stack(2, vec![3.0, 0.0, 0.0, 4.0]);
        assert_eq!(loss_generator(&pred, &gt, &[true, false]).unwrap(), 1.5);
    }

    #[test]
    fn generator_loss_ignores_invisible_channels() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let gt = stack(3, (0..12).map(|_| r.gen()).collect());
        let mut a: Vec<f64> = (0..12).map(|_| r.gen()).collect();
        let la = loss_generator(&stack(3, a.clone()), &gt, &[true, false, true]).unwrap();
        a[4..8].iter_mut().for_each(|v| *v = r.gen_range(-9.0..9.0));
        let lb = loss_generator(&stack(3, a), &gt, &[true, false, true]).unwrap();
        assert_eq!(la, lb);
        assert!(la > 0.0);
    }

    #[test]
    fn shapes_and_flags_are_checked() {
        let gt = stack(2, vec![0.0; 4]);
        assert!(loss_generator(&stack(2, vec![0.0; 6]), &gt, &[true, true]).is_err());
        assert!(loss_generator(&gt, &gt, &[true]).is_err());
    }

    #[test]
    fn mse_mode_is_a_masked_pixel_mean() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::new([2, 1, 2], vec![1.0, 2.0, 5.0, 5.0]).unwrap());
        let gt = Tensor::zeros([2, 1, 2]);
        let l = generator_loss(&mut tape, p, &gt, &[true, false], HeatmapLoss::Mse).unwrap();
        assert_eq!(tape.value(l).item(), 5.0 / 4.0);
    }

    #[test]
    fn bce_at_one_half_is_log_two() {
        let half = Tensor::full([3, 16], 0.5);
        let ln2 = std::f64::consts::LN_2;
        assert!((loss_generator_adversarial(&half).unwrap() - ln2).abs() < 1e-12);
        assert!((loss_discriminator(&half, &half).unwrap() - 2.0 * ln2).abs() < 1e-12);
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::zeros([3, 16]));
        let l = discriminator_loss(&mut tape, z, z).unwrap();
        assert!((tape.value(l).item() - 2.0 * ln2).abs() < 1e-12);
    }

    #[test]
    fn perfect_discrimination_drives_loss_to_zero() {
        let eps = 1e-12;
        let real = Tensor::full([16], 1.0 - eps);
        let fake = Tensor::full([16], eps);
        assert!(loss_discriminator(&real, &fake).unwrap() < 1e-10);
        assert!(loss_generator_adversarial(&real).unwrap() < 1e-10);
    }

    #[test]
    fn out_of_range_scores_rejected() {
        let ok = Tensor::full([2], 0.5);
        for bad in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            let t = Tensor::new([2], vec![0.5, bad]).unwrap();
            assert!(loss_discriminator(&t, &ok).is_err());
            assert!(loss_discriminator(&ok, &t).is_err());
            assert!(loss_generator_adversarial(&t).is_err());
        }
    }

    #[test]
    fn adversarial_loss_decreases_as_scores_rise() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let a: Vec<f64> = (0..8).map(|_| r.gen_range(0.01..0.98)).collect();
            let b: Vec<f64> = a.iter().map(|&s| s + r.gen_range(0.0..(0.99 - s))).collect();
            let la = loss_generator_adversarial(&Tensor::from_vec(a)).unwrap();
            let lb = loss_generator_adversarial(&Tensor::from_vec(b)).unwrap();
            assert!(lb <= la);
        }
    }

    #[test]
    fn logit_and_probability_forms_agree() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let zr: Vec<f64> = (0..10).map(|_| r.gen_range(-4.0..4.0)).collect();
        let zf: Vec<f64> = (0..10).map(|_| r.gen_range(-4.0..4.0)).collect();
        let sig = |z: &Vec<f64>| Tensor::from_vec(z.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect());
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(zr.clone()));
        let b = tape.leaf(Tensor::from_vec(zf.clone()));
        let d = discriminator_loss(&mut tape, a, b).unwrap();
        let g = adversarial_loss(&mut tape, b).unwrap();
        assert!((tape.value(d).item() - loss_discriminator(&sig(&zr), &sig(&zf)).unwrap()).abs() < 1e-12);
        assert!((tape.value(g).item() - loss_generator_adversarial(&sig(&zf)).unwrap()).abs() < 1e-12);
    }
}
