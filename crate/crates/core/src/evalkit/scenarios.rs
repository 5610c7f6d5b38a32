//! Standard seeded worlds used by the experiment harnesses.

use crate::error::Result;
use crate::synthworld::{generate, Split, WorldParams, WorldSpec};

use super::Dataset;

/// A world recipe plus split sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: &'static str,
    pub world: WorldParams,
    pub n_train: usize,
    pub n_eval: usize,
    /// Head/tail boundary scaled to the training-set size.
    pub head_threshold: u64,
}

/// A scenario with its world built and both splits sampled.
#[derive(Debug, Clone)]
pub struct Materialized {
    pub spec: WorldSpec,
    pub train: Dataset,
    pub eval: Dataset,
}

impl Scenario {
    pub fn materialize(&self) -> Result<Materialized> {
        let spec = self.world.build()?;
        let split = |n, split| -> Result<Dataset> {
            let obs = generate(&spec, n, split)?;
            Dataset::from_observations(spec.classes, spec.dim, split, &obs)
        };
        Ok(Materialized {
            train: split(self.n_train, Split::Train)?,
            eval: split(self.n_eval, Split::Eval)?,
            spec,
        })
    }
}

fn base(name: &'static str, world: WorldParams) -> Scenario {
    Scenario {
        name,
        world,
        n_train: 5000,
        n_eval: 2000,
        head_threshold: 300,
    }
}

/// Visually confusable pairs living in far-apart, single-blob habitats.
pub fn geo_separable(seed: u64) -> Scenario {
    base(
        "geo_separable",
        WorldParams {
            zipf_exponent: 0.5,
            components_per_label: 1,
            habitat_sigma_min_deg: 8.0,
            habitat_sigma_max_deg: 12.0,
            seed,
            ..WorldParams::default()
        },
    )
}

/// Every label shares one habitat, so location carries no label information.
pub fn geo_noise(seed: u64) -> Scenario {
    base(
        "geo_noise",
        WorldParams {
            shared_habitat: true,
            zipf_exponent: 0.5,
            seed,
            ..WorldParams::default()
        },
    )
}

/// Zipf-distributed label frequencies with a pronounced tail.
pub fn long_tail(seed: u64) -> Scenario {
    base(
        "long_tail",
        WorldParams {
            zipf_exponent: 1.5,
            seed,
            ..WorldParams::default()
        },
    )
}

/// Eval locations mixed with a uniform global distribution at weight `epsilon`.
pub fn mismatch(epsilon: f64, seed: u64) -> Scenario {
    base(
        "mismatch",
        WorldParams {
            zipf_exponent: 0.5,
            mismatch_epsilon: epsilon,
            seed,
            ..WorldParams::default()
        },
    )
}
