use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{OpKind, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Check at most this many coordinates (chosen with `seed`); `None`
    /// checks all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Negative-control fixture, see [`Tape::inject_backward_fault`].
    pub fault: Option<OpKind>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            max_coords: None,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub coords_checked: usize,
}

/// Max over coordinates of `|analytic − numeric| / max(1, |analytic|, |numeric|)`,
/// with the numeric gradient from central differences.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let opts = GradCheckOptions {
        eps,
        ..Default::default()
    };
    Ok(grad_check_with(f, x, &opts)?.max_rel_error)
}

pub fn grad_check_with<F>(f: F, x: &Tensor, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some(kind) = opts.fault {
        tape.inject_backward_fault(kind);
    }
    let xv = tape.param(x.clone());
    let y = f(&mut tape, xv)?;
    let grads = tape.backward(y)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let eval = |point: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(point);
        let out = f(&mut t, v)?;
        let value = t.value(out);
        if !value.is_scalar() {
            return Err(Error::invalid("grad_check function must return a scalar"));
        }
        Ok(value.item())
    };

    let n = x.numel();
    let coords: Vec<usize> = match opts.max_coords {
        Some(k) if k < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut c = sample(&mut rng, n, k).into_vec();
            c.sort_unstable();
            c
        }
        _ => (0..n).collect(),
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coord: 0,
        coords_checked: coords.len(),
    };
    for &i in &coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += opts.eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= opts.eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * opts.eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        if !(err <= report.max_rel_error) {
            report.max_rel_error = err;
            report.worst_coord = i;
        }
    }
    Ok(report)
}
