//! Heatmap generator, graph-structured discriminator and their losses.

pub mod discriminator;
pub mod generator;
pub mod losses;

pub use discriminator::{Discriminator, DiscriminatorConfig, HeatmapEncoder};
pub use generator::{Generator, GeneratorConfig};
pub use losses::{
    adversarial_loss, discriminator_loss, generator_loss, loss_discriminator, loss_generator,
    loss_generator_adversarial, HeatmapLoss,
};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::ParamSet;

/// Looks up a bound parameter by name.
pub(crate) fn var(set: &ParamSet, vars: &[Var], name: &str) -> Result<Var> {
    if vars.len() != set.len() {
        return Err(Error::invalid(format!(
            "expected {} bound parameters, got {}",
            set.len(),
            vars.len()
        )));
    }
    set.index_of(name)
        .map(|i| vars[i])
        .ok_or_else(|| Error::invalid(format!("missing parameter {name:?}")))
}
