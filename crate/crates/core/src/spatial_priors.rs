//! Location priors built from training observations near a query point.
//!
//! Every training observation within the radius counts once, irrespective of
//! distance. The resulting label histogram either rescales the image
//! classifier's probabilities (MAP with a local prior) or acts as a whitelist
//! that zeroes labels never observed nearby.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodesy::{GeoPoint, SpatialIndex};
use crate::micronet::argmax;

#[derive(Debug, Clone, PartialEq)]
pub struct LabelHistogram {
    pub counts: Vec<u64>,
    pub total: u64,
    pub theta_miles: f64,
    pub center: GeoPoint,
}

impl LabelHistogram {
    /// Labels with at least one observation inside the radius.
    pub fn present(&self) -> Vec<usize> {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(l, _)| l)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    Bayesian,
    Whitelist,
}

/// What to do when no training observation falls inside the radius.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyFallback {
    #[default]
    ImageOnly,
    Abstain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub mode: PriorMode,
    pub theta_miles: f64,
    #[serde(default)]
    pub smoothing_alpha: f64,
    #[serde(default)]
    pub empty_fallback: EmptyFallback,
}

impl PriorConfig {
    pub fn new(mode: PriorMode, theta_miles: f64) -> Self {
        Self {
            mode,
            theta_miles,
            smoothing_alpha: 0.0,
            empty_fallback: EmptyFallback::ImageOnly,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta_miles > 0.0) {
            return Err(Error::Config(format!(
                "prior radius must be > 0, got {}",
                self.theta_miles
            )));
        }
        if !(self.smoothing_alpha.is_finite() && self.smoothing_alpha >= 0.0) {
            return Err(Error::Config(format!(
                "smoothing_alpha must be >= 0, got {}",
                self.smoothing_alpha
            )));
        }
        Ok(())
    }
}

/// Training locations and their labels, ready for radius queries.
#[derive(Debug, Clone)]
pub struct PriorIndex {
    index: SpatialIndex,
    labels: HashMap<u64, usize>,
    classes: usize,
}

/// Grid resolution used when indexing training locations.
pub const DEFAULT_CELL_DEG: f64 = 2.0;

impl PriorIndex {
    pub fn new(index: SpatialIndex, labels: HashMap<u64, usize>, classes: usize) -> Result<Self> {
        if let Some((&id, &l)) = labels.iter().find(|(_, &l)| l >= classes) {
            return Err(Error::Data(format!(
                "observation {id} has label {l}, outside {classes} classes"
            )));
        }
        Ok(Self {
            index,
            labels,
            classes,
        })
    }

    /// Indexes `(location, label)` pairs, using the position as observation id.
    pub fn from_observations(
        points: impl IntoIterator<Item = (GeoPoint, usize)>,
        classes: usize,
    ) -> Result<Self> {
        let mut locs = Vec::new();
        let mut labels = HashMap::new();
        for (i, (geo, label)) in points.into_iter().enumerate() {
            locs.push((i as u64, geo));
            labels.insert(i as u64, label);
        }
        Self::new(
            SpatialIndex::build(&locs, DEFAULT_CELL_DEG)?,
            labels,
            classes,
        )
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn histogram(&self, g: GeoPoint, theta_miles: f64) -> Result<LabelHistogram> {
        local_histogram(&self.index, &self.labels, self.classes, g, theta_miles)
    }

    pub fn predict(
        &self,
        base_probs: &[f64],
        g: GeoPoint,
        config: &PriorConfig,
    ) -> Result<PriorPrediction> {
        predict_with_prior(
            base_probs,
            &self.index,
            &self.labels,
            self.classes,
            g,
            config,
        )
    }
}

/// Equal-weight label counts of training observations within `theta_miles`.
pub fn local_histogram(
    index: &SpatialIndex,
    labels: &HashMap<u64, usize>,
    classes: usize,
    g: GeoPoint,
    theta_miles: f64,
) -> Result<LabelHistogram> {
    let mut counts = vec![0u64; classes];
    for id in index.radius_query(g, theta_miles)? {
        let &label = labels.get(&id).ok_or(Error::UnmappedId(id))?;
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        counts[label] += 1;
    }
    Ok(LabelHistogram {
        total: counts.iter().sum(),
        counts,
        theta_miles,
        center: g,
    })
}

fn check_probs(base_probs: &[f64], hist: &LabelHistogram) -> Result<()> {
    if base_probs.len() != hist.counts.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} probabilities for {} labels",
            base_probs.len(),
            hist.counts.len()
        )));
    }
    if base_probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidArgument(
            "probabilities must be finite and non-negative".into(),
        ));
    }
    let s: f64 = base_probs.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!(
            "probabilities sum to {s}, not 1"
        )));
    }
    Ok(())
}

fn fallback(base_probs: &[f64], fallback: EmptyFallback) -> Option<Vec<f64>> {
    match fallback {
        EmptyFallback::ImageOnly => Some(base_probs.to_vec()),
        EmptyFallback::Abstain => None,
    }
}

/// `p(l) · (count(l) + α) / (total + α·C)`. `None` means abstain.
pub fn bayes_rescore(
    base_probs: &[f64],
    hist: &LabelHistogram,
    alpha: f64,
    empty: EmptyFallback,
) -> Result<Option<Vec<f64>>> {
    check_probs(base_probs, hist)?;
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "smoothing alpha must be >= 0, got {alpha}"
        )));
    }
    let c = hist.counts.len() as f64;
    let denom = hist.total as f64 + alpha * c;
    if denom == 0.0 {
        return Ok(fallback(base_probs, empty));
    }
    let scores: Vec<f64> = base_probs
        .iter()
        .zip(&hist.counts)
        .map(|(&p, &n)| p * (n as f64 + alpha) / denom)
        .collect();
    if empty == EmptyFallback::Abstain && scores.iter().all(|&s| s == 0.0) {
        return Ok(None);
    }
    Ok(Some(scores))
}

/// Keeps `p(l)` only for labels observed within the radius. `None` means abstain.
pub fn whitelist_gate(
    base_probs: &[f64],
    hist: &LabelHistogram,
    empty: EmptyFallback,
) -> Result<Option<Vec<f64>>> {
    check_probs(base_probs, hist)?;
    if hist.total == 0 {
        return Ok(fallback(base_probs, empty));
    }
    let scores: Vec<f64> = base_probs
        .iter()
        .zip(&hist.counts)
        .map(|(&p, &n)| if n > 0 { p } else { 0.0 })
        .collect();
    if empty == EmptyFallback::Abstain && scores.iter().all(|&s| s == 0.0) {
        return Ok(None);
    }
    Ok(Some(scores))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorPrediction {
    /// `None` when the configuration abstains.
    pub label: Option<usize>,
    pub scores: Option<Vec<f64>>,
    /// Training observations inside the radius.
    pub neighbours: u64,
}

/// Rescores `base_probs` with the local prior and takes the argmax.
///
/// `base_probs` may be any non-negative vector with a positive sum; it is
/// normalised first, so positive rescaling never changes the prediction.
pub fn predict_with_prior(
    base_probs: &[f64],
    index: &SpatialIndex,
    labels: &HashMap<u64, usize>,
    classes: usize,
    g: GeoPoint,
    config: &PriorConfig,
) -> Result<PriorPrediction> {
    config.validate()?;
    let s: f64 = base_probs.iter().sum();
    if !(s.is_finite() && s > 0.0) {
        return Err(Error::InvalidArgument(format!("base scores sum to {s}")));
    }
    let probs: Vec<f64> = base_probs.iter().map(|p| p / s).collect();
    let hist = local_histogram(index, labels, classes, g, config.theta_miles)?;
    let scores = match config.mode {
        PriorMode::Bayesian => {
            bayes_rescore(&probs, &hist, config.smoothing_alpha, config.empty_fallback)?
        }
        PriorMode::Whitelist => whitelist_gate(&probs, &hist, config.empty_fallback)?,
    };
    Ok(PriorPrediction {
        label: scores.as_deref().map(argmax),
        scores,
        neighbours: hist.total,
    })
}
