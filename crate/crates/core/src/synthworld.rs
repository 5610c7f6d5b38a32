//! Synthetic worlds with known generative structure.
//!
//! Each label has a Zipf frequency, a Gaussian appearance prototype and a
//! habitat made of planar Gaussian components over (lat, lon) degrees with
//! longitude wraparound. Appearance and location are sampled independently
//! given the label, so the exact posterior `P(L | I, G)` is available in closed
//! form and can be compared against logit fusion.

use std::f64::consts::PI;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodesy::GeoPoint;
use crate::micronet::{argmax, log_sum_exp, logistic};

/// Density of the uniform lat/lon rectangle, per square degree.
const UNIFORM_GEO_DENSITY: f64 = 1.0 / (180.0 * 360.0);

/// Longitude images summed when evaluating a wrapped Gaussian.
const WRAP_IMAGES: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Eval => 2,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            other => Err(Error::Data(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HabitatComponent {
    pub lat_deg: f64,
    pub lon_deg: f64,
    pub sigma_deg: f64,
    pub weight: f64,
}

impl HabitatComponent {
    fn log_density(&self, lat: f64, lon: f64) -> f64 {
        let s2 = self.sigma_deg * self.sigma_deg;
        let norm = -(2.0 * PI * s2).ln();
        let dlat = lat - self.lat_deg;
        let images: Vec<f64> = (-WRAP_IMAGES..=WRAP_IMAGES)
            .map(|k| {
                let dlon = lon - self.lon_deg + 360.0 * k as f64;
                -(dlat * dlat + dlon * dlon) / (2.0 * s2)
            })
            .collect();
        norm + log_sum_exp(&images)
    }
}

/// Fully materialised world parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub classes: usize,
    pub dim: usize,
    pub appearance_sigma: f64,
    pub zipf_exponent: f64,
    pub mismatch_epsilon: f64,
    pub seed: u64,
    pub confusion_pairs: Vec<(usize, usize)>,
    pub prototypes: Vec<Vec<f64>>,
    pub habitats: Vec<Vec<HabitatComponent>>,
}

/// One sampled (label, location, appearance) triple.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub label: usize,
    pub geo: GeoPoint,
    pub features: Vec<f64>,
}

/// Exact Bayes quantities for one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutputs {
    /// `P(L | I)`, including the label prior.
    pub p_label_given_image: Vec<f64>,
    /// `P(G | L)` densities per square degree for the requested split.
    pub p_geo_given_label: Vec<f64>,
    /// `log P(G | L) - log P(G | not L, I)`.
    pub log_r: Vec<f64>,
    /// `P(L | I, G)` by joint normalisation.
    pub posterior: Vec<f64>,
    /// `σ(σ⁻¹(P(L | I)) + log R)` evaluated label by label.
    pub posterior_via_ratio: Vec<f64>,
}

impl OracleOutputs {
    /// Largest absolute difference between the two posterior computations.
    pub fn dual_path_gap(&self) -> f64 {
        self.posterior
            .iter()
            .zip(&self.posterior_via_ratio)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("world spec: {m}")));
        if self.classes == 0 || self.dim == 0 {
            return bad("classes and dim must be positive".into());
        }
        if self.prototypes.len() != self.classes || self.habitats.len() != self.classes {
            return bad("need one prototype and one habitat per label".into());
        }
        if self
            .prototypes
            .iter()
            .any(|p| p.len() != self.dim || p.iter().any(|v| !v.is_finite()))
        {
            return bad(format!("prototypes must be finite {}-vectors", self.dim));
        }
        if !(self.appearance_sigma.is_finite() && self.appearance_sigma >= 0.0) {
            return bad("appearance_sigma must be >= 0".into());
        }
        if !self.zipf_exponent.is_finite() || self.zipf_exponent < 0.0 {
            return bad("zipf_exponent must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.mismatch_epsilon) {
            return bad("mismatch_epsilon must be in [0, 1]".into());
        }
        for (l, comps) in self.habitats.iter().enumerate() {
            if comps.is_empty() {
                return bad(format!("label {l} has no habitat components"));
            }
            let total: f64 = comps.iter().map(|c| c.weight).sum();
            if (total - 1.0).abs() > 1e-9 {
                return bad(format!("label {l} habitat weights sum to {total}"));
            }
            for c in comps {
                if !(c.sigma_deg > 0.0 && c.weight >= 0.0)
                    || GeoPoint::new(c.lat_deg, c.lon_deg).is_err()
                {
                    return bad(format!("label {l} has an invalid habitat component"));
                }
            }
        }
        for &(a, b) in &self.confusion_pairs {
            if a >= self.classes || b >= self.classes || a == b {
                return bad(format!("invalid confusion pair ({a}, {b})"));
            }
        }
        Ok(())
    }

    /// Zipf label prior `π_k ∝ (k + 1)^-s`.
    pub fn label_frequencies(&self) -> Vec<f64> {
        zipf(self.classes, self.zipf_exponent)
    }

    /// `ln P(G | L)` per square degree under the given split's geography.
    pub fn log_geo_density(&self, label: usize, geo: GeoPoint, split: Split) -> f64 {
        let (lat, lon) = (geo.lat_deg(), geo.lon_deg());
        let terms: Vec<f64> = self.habitats[label]
            .iter()
            .filter(|c| c.weight > 0.0)
            .map(|c| c.weight.ln() + c.log_density(lat, lon))
            .collect();
        let habitat = log_sum_exp(&terms);
        let eps = self.mismatch_epsilon;
        match split {
            Split::Eval if eps > 0.0 => {
                if eps >= 1.0 {
                    UNIFORM_GEO_DENSITY.ln()
                } else {
                    log_sum_exp(&[
                        (1.0 - eps).ln() + habitat,
                        eps.ln() + UNIFORM_GEO_DENSITY.ln(),
                    ])
                }
            }
            _ => habitat,
        }
    }

    /// `ln f(I | L)` up to a label-independent constant.
    fn log_appearance(&self, label: usize, features: &[f64]) -> f64 {
        let proto = &self.prototypes[label];
        let d2: f64 = proto
            .iter()
            .zip(features)
            .map(|(p, x)| (x - p) * (x - p))
            .sum();
        if self.appearance_sigma == 0.0 {
            if d2 <= 1e-24 {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        } else {
            -d2 / (2.0 * self.appearance_sigma * self.appearance_sigma)
        }
    }

    /// `ln P(L | I)` for every label.
    pub fn log_label_given_image(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "expected {} features, got {}",
                self.dim,
                features.len()
            )));
        }
        let prior = self.label_frequencies();
        let joint: Vec<f64> = (0..self.classes)
            .map(|l| prior[l].ln() + self.log_appearance(l, features))
            .collect();
        let z = log_sum_exp(&joint);
        if z == f64::NEG_INFINITY {
            return Err(Error::DegenerateDensity);
        }
        Ok(joint.iter().map(|j| j - z).collect())
    }
}

/// Zipf probabilities over `n` ranks.
pub fn zipf(n: usize, s: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=n).map(|k| (k as f64).powf(-s)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|r| r / total).collect()
}

/// Generator settings from which a [`WorldSpec`] is materialised.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldParams {
    pub classes: usize,
    pub dim: usize,
    pub zipf_exponent: f64,
    pub appearance_sigma: f64,
    /// Standard deviation of prototype coordinates.
    pub prototype_scale: f64,
    /// Labels `2i` and `2i + 1` share a prototype and get far-apart habitats.
    pub confusion_pairs: bool,
    pub components_per_label: usize,
    pub habitat_sigma_min_deg: f64,
    pub habitat_sigma_max_deg: f64,
    /// Habitat means are drawn with |lat| below this bound.
    pub max_abs_lat_deg: f64,
    /// Minimum wrapped lat/lon distance between components of paired labels.
    pub pair_separation_deg: f64,
    /// Every label gets the same habitat, making geography uninformative.
    pub shared_habitat: bool,
    pub mismatch_epsilon: f64,
    pub seed: u64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 4,
            zipf_exponent: 1.5,
            appearance_sigma: 1.0,
            prototype_scale: 1.5,
            confusion_pairs: true,
            components_per_label: 2,
            habitat_sigma_min_deg: 6.0,
            habitat_sigma_max_deg: 10.0,
            max_abs_lat_deg: 50.0,
            pair_separation_deg: 50.0,
            shared_habitat: false,
            mismatch_epsilon: 0.0,
            seed: 0,
        }
    }
}

impl WorldParams {
    pub fn build(&self) -> Result<WorldSpec> {
        if self.classes == 0 || self.dim == 0 || self.components_per_label == 0 {
            return Err(Error::Config(
                "classes, dim and components_per_label must be positive".into(),
            ));
        }
        if !(self.habitat_sigma_min_deg > 0.0
            && self.habitat_sigma_max_deg >= self.habitat_sigma_min_deg)
        {
            return Err(Error::Config("habitat sigma range is empty".into()));
        }
        if !(0.0..90.0).contains(&self.max_abs_lat_deg) {
            return Err(Error::Config("max_abs_lat_deg must be in [0, 90)".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(0);

        let pairs: Vec<(usize, usize)> = if self.confusion_pairs {
            (0..self.classes / 2).map(|i| (2 * i, 2 * i + 1)).collect()
        } else {
            Vec::new()
        };

        let mut prototypes: Vec<Vec<f64>> = (0..self.classes)
            .map(|_| {
                (0..self.dim)
                    .map(|_| self.prototype_scale * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        for &(a, b) in &pairs {
            prototypes[b] = prototypes[a].clone();
        }

        let habitats = if self.shared_habitat {
            let h = self.random_habitat(&mut rng);
            vec![h; self.classes]
        } else {
            let mut habitats: Vec<Vec<HabitatComponent>> = Vec::with_capacity(self.classes);
            for l in 0..self.classes {
                let partner = pairs.iter().find(|&&(_, b)| b == l).map(|&(a, _)| a);
                let mut h = self.random_habitat(&mut rng);
                if let Some(a) = partner {
                    let mut tries = 0;
                    while !separated(&h, &habitats[a], self.pair_separation_deg) {
                        tries += 1;
                        if tries > 10_000 {
                            return Err(Error::Config(format!(
                                "could not place habitats {} degrees apart",
                                self.pair_separation_deg
                            )));
                        }
                        h = self.random_habitat(&mut rng);
                    }
                }
                habitats.push(h);
            }
            habitats
        };

        let spec = WorldSpec {
            classes: self.classes,
            dim: self.dim,
            appearance_sigma: self.appearance_sigma,
            zipf_exponent: self.zipf_exponent,
            mismatch_epsilon: self.mismatch_epsilon,
            seed: self.seed,
            confusion_pairs: pairs,
            prototypes,
            habitats,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn random_habitat<R: Rng>(&self, rng: &mut R) -> Vec<HabitatComponent> {
        let k = self.components_per_label;
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..1.5)).collect();
        let total: f64 = raw.iter().sum();
        let mut comps: Vec<HabitatComponent> = raw
            .iter()
            .map(|w| HabitatComponent {
                lat_deg: rng.random_range(-self.max_abs_lat_deg..=self.max_abs_lat_deg),
                lon_deg: rng.random_range(-180.0..180.0),
                sigma_deg: rng
                    .random_range(self.habitat_sigma_min_deg..=self.habitat_sigma_max_deg),
                weight: w / total,
            })
            .collect();
        // make the weights sum to one exactly
        let rest: f64 = comps[..k - 1].iter().map(|c| c.weight).sum();
        comps[k - 1].weight = 1.0 - rest;
        comps
    }
}

fn wrapped_deg_distance(a: &HabitatComponent, b: &HabitatComponent) -> f64 {
    let dlat = a.lat_deg - b.lat_deg;
    let mut dlon = (a.lon_deg - b.lon_deg).abs() % 360.0;
    if dlon > 180.0 {
        dlon = 360.0 - dlon;
    }
    (dlat * dlat + dlon * dlon).sqrt()
}

fn separated(a: &[HabitatComponent], b: &[HabitatComponent], min_deg: f64) -> bool {
    a.iter()
        .all(|x| b.iter().all(|y| wrapped_deg_distance(x, y) >= min_deg))
}

fn wrap_lon(lon: f64) -> f64 {
    let w = (lon + 180.0).rem_euclid(360.0) - 180.0;
    if w >= 180.0 {
        -180.0
    } else {
        w
    }
}

/// Samples `n` observations. Deterministic for a given spec seed and split.
pub fn generate(spec: &WorldSpec, n: usize, split: Split) -> Result<Vec<Observation>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument(
            "observation count must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(split.stream());
    let labels = WeightedIndex::new(spec.label_frequencies())
        .map_err(|e| Error::Config(format!("label frequencies: {e}")))?;
    let components: Vec<WeightedIndex<f64>> = spec
        .habitats
        .iter()
        .map(|h| WeightedIndex::new(h.iter().map(|c| c.weight)))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config(format!("habitat weights: {e}")))?;
    let uniform_share = match split {
        Split::Train => 0.0,
        Split::Eval => spec.mismatch_epsilon,
    };

    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let label = labels.sample(&mut rng);
        let (lat, lon) = if uniform_share > 0.0 && rng.random::<f64>() < uniform_share {
            (
                rng.random_range(-90.0..=90.0),
                rng.random_range(-180.0..180.0),
            )
        } else {
            let c = &spec.habitats[label][components[label].sample(&mut rng)];
            let lat = loop {
                let lat = c.lat_deg + c.sigma_deg * rng.sample::<f64, _>(StandardNormal);
                if (-90.0..=90.0).contains(&lat) {
                    break lat;
                }
            };
            let lon = wrap_lon(c.lon_deg + c.sigma_deg * rng.sample::<f64, _>(StandardNormal));
            (lat, lon)
        };
        let features = spec.prototypes[label]
            .iter()
            .map(|&p| p + spec.appearance_sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        out.push(Observation {
            label,
            geo: GeoPoint::new(lat, lon)?,
            features,
        });
    }
    Ok(out)
}

/// Exact Bayes quantities at one observation.
pub fn oracle(
    spec: &WorldSpec,
    features: &[f64],
    geo: GeoPoint,
    split: Split,
) -> Result<OracleOutputs> {
    let c = spec.classes;
    let log_p_image = spec.log_label_given_image(features)?;
    let log_geo: Vec<f64> = (0..c)
        .map(|l| spec.log_geo_density(l, geo, split))
        .collect();

    let log_joint: Vec<f64> = log_p_image
        .iter()
        .zip(&log_geo)
        .map(|(a, b)| a + b)
        .collect();
    let z = log_sum_exp(&log_joint);
    if z == f64::NEG_INFINITY || z.is_nan() {
        return Err(Error::DegenerateDensity);
    }
    let posterior: Vec<f64> = log_joint.iter().map(|j| (j - z).exp()).collect();

    let mut log_r = vec![0.0; c];
    let mut posterior_via_ratio = vec![0.0; c];
    for l in 0..c {
        let others_joint: Vec<f64> = (0..c).filter(|&k| k != l).map(|k| log_joint[k]).collect();
        let others_image: Vec<f64> = (0..c).filter(|&k| k != l).map(|k| log_p_image[k]).collect();
        let log_not_image = log_sum_exp(&others_image);
        if log_not_image == f64::NEG_INFINITY {
            // no competing label is possible given the image
            posterior_via_ratio[l] = 1.0;
            continue;
        }
        // P(G | not L, I) = Σ_{k≠l} P(k|I) P(G|k) / (1 - P(l|I))
        log_r[l] = log_geo[l] - (log_sum_exp(&others_joint) - log_not_image);
        let logit_image = log_p_image[l] - log_not_image;
        posterior_via_ratio[l] = logistic(logit_image + log_r[l]);
    }

    Ok(OracleOutputs {
        p_label_given_image: log_p_image.iter().map(|v| v.exp()).collect(),
        p_geo_given_label: log_geo.iter().map(|v| v.exp()).collect(),
        log_r,
        posterior,
        posterior_via_ratio,
    })
}

/// Accuracy of the exact posterior argmax: the ceiling for any learned model.
pub fn bayes_accuracy(spec: &WorldSpec, data: &[Observation], split: Split) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut correct = 0usize;
    for obs in data {
        let out = oracle(spec, &obs.features, obs.geo, split)?;
        if argmax(&out.posterior) == obs.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Accuracy of argmax `P(L | I)`, ignoring location.
pub fn image_only_bayes_accuracy(spec: &WorldSpec, data: &[Observation]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut correct = 0usize;
    for obs in data {
        if argmax(&spec.log_label_given_image(&obs.features)?) == obs.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}
