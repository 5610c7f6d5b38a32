//! Metrics and experiment harnesses: top-k accuracy, head/tail breakdowns,
//! radius sweeps and side-by-side model comparisons.

pub mod scenarios;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feat_mod::ModulatedNet;
use crate::geo_fusion::{base_probabilities, FusionModel};
use crate::geodesy::{GeoPoint, NormalizedGeo};
use crate::micronet::{softmax, Network, Tensor};
use crate::spatial_priors::{PriorConfig, PriorIndex, PriorMode};
use crate::synthworld::{Observation, Split};

/// Head/tail boundary on training-set label counts.
pub const DEFAULT_HEAD_THRESHOLD: u64 = 100;

/// Labelled observations in columnar form.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub split: Split,
    pub features: Tensor,
    pub geos: Vec<GeoPoint>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn from_observations(
        classes: usize,
        dim: usize,
        split: Split,
        obs: &[Observation],
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(obs.len() * dim);
        for (i, o) in obs.iter().enumerate() {
            if o.label >= classes {
                return Err(Error::LabelOutOfRange {
                    label: o.label,
                    classes,
                });
            }
            if o.features.len() != dim {
                return Err(Error::Data(format!(
                    "observation {i} has {} features, expected {dim}",
                    o.features.len()
                )));
            }
            data.extend_from_slice(&o.features);
        }
        Ok(Self {
            classes,
            split,
            features: Tensor::matrix(obs.len(), dim, data)?,
            geos: obs.iter().map(|o| o.geo).collect(),
            labels: obs.iter().map(|o| o.label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn normalized_geos(&self) -> Vec<NormalizedGeo> {
        self.geos.iter().map(GeoPoint::normalize).collect()
    }

    pub fn label_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn observations(&self) -> Vec<Observation> {
        (0..self.len())
            .map(|i| Observation {
                label: self.labels[i],
                geo: self.geos[i],
                features: self.features.row(i).to_vec(),
            })
            .collect()
    }
}

/// Per-example scores; `None` marks an abstention, which never counts as correct.
pub type ScoreRows = Vec<Option<Vec<f64>>>;

/// Whether `label` is among the `k` highest scores, ties going to the lower index.
fn in_top_k(scores: &[f64], label: usize, k: usize) -> Result<bool> {
    if label >= scores.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: scores.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let target = scores[label];
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > target || (s == target && j < label))
        .count();
    Ok(ahead < k)
}

fn topk_hits(scores: &[Option<Vec<f64>>], labels: &[usize], k: usize) -> Result<Vec<bool>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if scores.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} score rows for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    scores
        .iter()
        .zip(labels)
        .map(|(s, &l)| match s {
            Some(s) => in_top_k(s, l, k),
            None => Ok(false),
        })
        .collect()
}

fn fraction(hits: &[bool]) -> f64 {
    hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64
}

/// Fraction of examples whose label ranks within the top `k` scores.
pub fn topk_accuracy<S: AsRef<[f64]>>(scores: &[S], labels: &[usize], k: usize) -> Result<f64> {
    let rows: ScoreRows = scores.iter().map(|s| Some(s.as_ref().to_vec())).collect();
    topk_accuracy_with_abstain(&rows, labels, k)
}

/// [`topk_accuracy`] where `None` rows are abstentions.
pub fn topk_accuracy_with_abstain(
    scores: &[Option<Vec<f64>>],
    labels: &[usize],
    k: usize,
) -> Result<f64> {
    Ok(fraction(&topk_hits(scores, labels, k)?))
}

/// Splits labels into head (`count >= threshold`) and tail.
pub fn head_tail_split(train_counts: &[u64], threshold: u64) -> (Vec<usize>, Vec<usize>) {
    (0..train_counts.len()).partition(|&l| train_counts[l] >= threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub top1: f64,
    pub top5: f64,
    /// `None` when no evaluated example has a head label.
    pub head_top1: Option<f64>,
    pub tail_top1: Option<f64>,
    pub n_examples: usize,
    pub n_head: usize,
    pub n_tail: usize,
    pub n_abstained: usize,
    pub head_threshold: u64,
}

impl EvalReport {
    pub fn from_scores(
        model: impl Into<String>,
        scores: &[Option<Vec<f64>>],
        labels: &[usize],
        train_counts: &[u64],
        head_threshold: u64,
    ) -> Result<Self> {
        let top1 = topk_hits(scores, labels, 1)?;
        let top5 = topk_hits(scores, labels, 5)?;
        if let Some(&l) = labels.iter().find(|&&l| l >= train_counts.len()) {
            return Err(Error::LabelOutOfRange {
                label: l,
                classes: train_counts.len(),
            });
        }
        let (head, tail): (Vec<usize>, Vec<usize>) =
            (0..labels.len()).partition(|&i| train_counts[labels[i]] >= head_threshold);
        let subset = |idx: &[usize]| -> Option<f64> {
            (!idx.is_empty())
                .then(|| idx.iter().filter(|&&i| top1[i]).count() as f64 / idx.len() as f64)
        };
        Ok(Self {
            model: model.into(),
            top1: fraction(&top1),
            top5: fraction(&top5),
            head_top1: subset(&head),
            tail_top1: subset(&tail),
            n_examples: labels.len(),
            n_head: head.len(),
            n_tail: tail.len(),
            n_abstained: scores.iter().filter(|s| s.is_none()).count(),
            head_threshold,
        })
    }
}

/// Several models evaluated on the same data, in the order given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub n_examples: usize,
    pub head_threshold: u64,
    pub rows: Vec<EvalReport>,
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v))
}

impl ComparisonReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("report serialisation: {e}")))?;
        s.push('\n');
        Ok(s)
    }

    /// Aligned plain-text table, accuracies in percent.
    pub fn to_table(&self) -> String {
        let header = [
            "model",
            "top1",
            "top5",
            "head_top1",
            "tail_top1",
            "abstained",
        ];
        let body: Vec<[String; 6]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.model.clone(),
                    pct(Some(r.top1)),
                    pct(Some(r.top5)),
                    pct(r.head_top1),
                    pct(r.tail_top1),
                    r.n_abstained.to_string(),
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for row in &body {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let mut out = String::new();
        let mut line = |cells: &[&str]| {
            for (i, (c, w)) in cells.iter().zip(widths).enumerate() {
                if i == 0 {
                    let _ = write!(out, "{c:<w$}");
                } else {
                    let _ = write!(out, "  {c:>w$}");
                }
            }
            out.push('\n');
        };
        line(&header);
        for row in &body {
            line(&row.iter().map(String::as_str).collect::<Vec<_>>());
        }
        let _ = writeln!(
            out,
            "({} examples, head = labels with >= {} training examples)",
            self.n_examples, self.head_threshold
        );
        out
    }
}

/// A model that scores every label of a dataset example.
pub trait ScoreModel {
    fn name(&self) -> String;
    fn classes(&self) -> usize;
    fn score(&self, data: &Dataset) -> Result<ScoreRows>;
}

fn prob_rows(t: &Tensor) -> ScoreRows {
    (0..t.rows()).map(|r| Some(t.row(r).to_vec())).collect()
}

/// The appearance classifier on its own.
#[derive(Debug, Clone)]
pub struct ImageOnlyModel {
    pub base: Network,
}

impl ScoreModel for ImageOnlyModel {
    fn name(&self) -> String {
        "image_only".into()
    }

    fn classes(&self) -> usize {
        self.base.output_dim()
    }

    fn score(&self, data: &Dataset) -> Result<ScoreRows> {
        Ok(prob_rows(&base_probabilities(&self.base, &data.features)?))
    }
}

/// Base classifier rescored by a training-set label prior around each location.
#[derive(Debug, Clone)]
pub struct PriorModel {
    pub base: Network,
    pub prior: PriorIndex,
    pub config: PriorConfig,
}

impl PriorModel {
    /// Builds the prior from `train` locations and labels.
    pub fn new(base: Network, train: &Dataset, config: PriorConfig) -> Result<Self> {
        config.validate()?;
        let prior = PriorIndex::from_observations(
            train.geos.iter().copied().zip(train.labels.iter().copied()),
            train.classes,
        )?;
        Ok(Self {
            base,
            prior,
            config,
        })
    }
}

fn prior_scores(
    probs: &Tensor,
    prior: &PriorIndex,
    geos: &[GeoPoint],
    config: &PriorConfig,
) -> Result<ScoreRows> {
    (0..probs.rows())
        .map(|i| Ok(prior.predict(probs.row(i), geos[i], config)?.scores))
        .collect()
}

impl ScoreModel for PriorModel {
    fn name(&self) -> String {
        match self.config.mode {
            PriorMode::Bayesian => "bayes_prior".into(),
            PriorMode::Whitelist => "whitelist".into(),
        }
    }

    fn classes(&self) -> usize {
        self.base.output_dim()
    }

    fn score(&self, data: &Dataset) -> Result<ScoreRows> {
        let probs = base_probabilities(&self.base, &data.features)?;
        prior_scores(&probs, &self.prior, &data.geos, &self.config)
    }
}

impl ScoreModel for FusionModel {
    fn name(&self) -> String {
        "postproc".into()
    }

    fn classes(&self) -> usize {
        FusionModel::classes(self)
    }

    fn score(&self, data: &Dataset) -> Result<ScoreRows> {
        let probs = base_probabilities(self.base(), &data.features)?;
        (0..data.len())
            .map(|i| {
                Ok(Some(
                    self.predict_fused(probs.row(i), data.geos[i].normalize())?
                        .probs,
                ))
            })
            .collect()
    }
}

impl ScoreModel for ModulatedNet {
    fn name(&self) -> String {
        format!("featmod:{}", self.variant())
    }

    fn classes(&self) -> usize {
        ModulatedNet::classes(self)
    }

    fn score(&self, data: &Dataset) -> Result<ScoreRows> {
        let logits = self.predict(&data.features, &data.normalized_geos())?;
        Ok((0..logits.rows())
            .map(|r| Some(softmax(logits.row(r))))
            .collect())
    }
}

fn check_label_map(model_classes: usize, name: &str, data: &Dataset) -> Result<()> {
    if model_classes != data.classes {
        return Err(Error::LabelMapMismatch(format!(
            "model `{name}` predicts {model_classes} labels, dataset has {}",
            data.classes
        )));
    }
    Ok(())
}

pub fn evaluate(
    model: &dyn ScoreModel,
    data: &Dataset,
    train_counts: &[u64],
    head_threshold: u64,
) -> Result<EvalReport> {
    check_label_map(model.classes(), &model.name(), data)?;
    if train_counts.len() != data.classes {
        return Err(Error::LabelMapMismatch(format!(
            "training counts cover {} labels, dataset has {}",
            train_counts.len(),
            data.classes
        )));
    }
    let scores = model.score(data)?;
    EvalReport::from_scores(
        model.name(),
        &scores,
        &data.labels,
        train_counts,
        head_threshold,
    )
}

/// One report row per model, in the order given.
pub fn compare_models(
    models: &[&dyn ScoreModel],
    data: &Dataset,
    train_counts: &[u64],
    head_threshold: u64,
) -> Result<ComparisonReport> {
    if models.is_empty() {
        return Err(Error::Empty("model list"));
    }
    for m in models {
        check_label_map(m.classes(), &m.name(), data)?;
    }
    let rows = models
        .iter()
        .map(|m| evaluate(*m, data, train_counts, head_threshold))
        .collect::<Result<Vec<_>>>()?;
    Ok(ComparisonReport {
        n_examples: data.len(),
        head_threshold,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub theta_miles: f64,
    pub top1: f64,
    pub top5: f64,
    pub n_abstained: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub mode: PriorMode,
    pub image_only_top1: f64,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// Row with the highest top-1; the smallest radius wins ties.
    pub fn best(&self) -> &SweepRow {
        self.rows
            .iter()
            .reduce(|best, r| if r.top1 > best.top1 { r } else { best })
            .expect("sweeps have at least one radius")
    }

    /// Whether the best top-1 is strictly above both endpoint radii.
    pub fn interior_optimum(&self) -> bool {
        let n = self.rows.len();
        if n < 3 {
            return false;
        }
        let best = self.rows[1..n - 1]
            .iter()
            .map(|r| r.top1)
            .fold(f64::NEG_INFINITY, f64::max);
        best > self.rows[0].top1 && best > self.rows[n - 1].top1
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("report serialisation: {e}")))?;
        s.push('\n');
        Ok(s)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:>12}  {:>7}  {:>7}  {:>9}\n",
            "radius_mi", "top1", "top5", "abstained"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>12}  {:>7}  {:>7}  {:>9}",
                r.theta_miles,
                pct(Some(r.top1)),
                pct(Some(r.top5)),
                r.n_abstained
            );
        }
        let _ = writeln!(
            out,
            "(mode {:?}; image-only top1 {})",
            self.mode,
            pct(Some(self.image_only_top1))
        );
        out
    }
}

/// Evaluates the prior-rescored base on `eval` for each radius. Priors come
/// from `train` only; `config.theta_miles` is replaced by each radius.
pub fn radius_sweep(
    base: &Network,
    train: &Dataset,
    eval: &Dataset,
    radii: &[f64],
    config: &PriorConfig,
) -> Result<SweepReport> {
    if radii.is_empty() {
        return Err(Error::InvalidArgument("radius list is empty".into()));
    }
    if let Some(r) = radii.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "radius {r} must be positive"
        )));
    }
    check_label_map(base.output_dim(), "base", eval)?;
    if train.classes != eval.classes {
        return Err(Error::LabelMapMismatch(format!(
            "train split has {} labels, eval split {}",
            train.classes, eval.classes
        )));
    }
    let prior = PriorIndex::from_observations(
        train.geos.iter().copied().zip(train.labels.iter().copied()),
        train.classes,
    )?;
    let probs = base_probabilities(base, &eval.features)?;
    let image_only_top1 = topk_accuracy_with_abstain(&prob_rows(&probs), &eval.labels, 1)?;
    let rows = radii
        .iter()
        .map(|&theta| {
            let cfg = PriorConfig {
                theta_miles: theta,
                ..config.clone()
            };
            let scores = prior_scores(&probs, &prior, &eval.geos, &cfg)?;
            Ok(SweepRow {
                theta_miles: theta,
                top1: topk_accuracy_with_abstain(&scores, &eval.labels, 1)?,
                top5: topk_accuracy_with_abstain(&scores, &eval.labels, 5)?,
                n_abstained: scores.iter().filter(|s| s.is_none()).count(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport {
        mode: config.mode,
        image_only_top1,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial_priors::EmptyFallback;

    #[test]
    fn topk_trivial_cases() {
        let scores = vec![vec![0.9, 0.1], vec![0.2, 0.8]];
        assert_eq!(topk_accuracy(&scores, &[0, 1], 1).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&scores, &[1, 0], 2).unwrap(), 1.0);
        assert!(topk_accuracy::<Vec<f64>>(&[], &[], 1).is_err());
        assert!(topk_accuracy(&scores, &[0, 1], 0).is_err());
    }

    #[test]
    fn topk_hand_counted() {
        let scores = vec![
            vec![0.5, 0.3, 0.2],   // label 1: rank 2
            vec![0.1, 0.1, 0.8],   // label 1: tie with 0, loses, rank 3
            vec![0.4, 0.4, 0.2],   // label 0: tie, wins, rank 1
            vec![0.2, 0.3, 0.5],   // label 2: rank 1
            vec![0.6, 0.25, 0.15], // label 2: rank 3
        ];
        let labels = [1, 1, 0, 2, 2];
        assert_eq!(topk_accuracy(&scores, &labels, 1).unwrap(), 2.0 / 5.0);
        assert_eq!(topk_accuracy(&scores, &labels, 2).unwrap(), 3.0 / 5.0);
        assert_eq!(topk_accuracy(&scores, &labels, 3).unwrap(), 1.0);
    }

    #[test]
    fn abstentions_count_as_wrong() {
        let scores = vec![Some(vec![1.0, 0.0]), None];
        assert_eq!(
            topk_accuracy_with_abstain(&scores, &[0, 0], 2).unwrap(),
            0.5
        );
    }

    #[test]
    fn head_tail_examples() {
        assert_eq!(head_tail_split(&[150, 20, 99], 100), (vec![0], vec![1, 2]));
        assert_eq!(head_tail_split(&[3, 1, 0], 1), (vec![0, 1], vec![2]));
        assert_eq!(head_tail_split(&[3, 1], u64::MAX), (vec![], vec![0, 1]));
    }

    #[test]
    fn report_partitions_examples() {
        let scores: ScoreRows = vec![
            Some(vec![0.9, 0.1]),
            Some(vec![0.9, 0.1]),
            Some(vec![0.2, 0.8]),
            None,
        ];
        let r = EvalReport::from_scores("m", &scores, &[0, 1, 1, 0], &[200, 5], 100).unwrap();
        assert_eq!(r.n_head + r.n_tail, r.n_examples);
        assert_eq!(r.head_top1, Some(0.5));
        assert_eq!(r.tail_top1, Some(0.5));
        assert_eq!(r.top1, 0.5);
        assert_eq!(r.n_abstained, 1);
    }

    fn tiny_world() -> (Network, Dataset, Dataset) {
        let obs = |label: usize, lat: f64, f: f64| Observation {
            label,
            geo: GeoPoint::new(lat, 0.0).unwrap(),
            features: vec![f],
        };
        let train = Dataset::from_observations(
            2,
            1,
            Split::Train,
            &[obs(0, 10.0, 1.0), obs(1, -10.0, -1.0), obs(0, 11.0, 1.0)],
        )
        .unwrap();
        let eval = Dataset::from_observations(
            2,
            1,
            Split::Eval,
            &[obs(0, 10.5, -0.2), obs(1, -10.5, -1.0), obs(1, 40.0, 0.5)],
        )
        .unwrap();
        let base = Network::new(vec![crate::micronet::DenseLayer::new(
            Tensor::matrix(2, 1, vec![1.0, -1.0]).unwrap(),
            Tensor::new(vec![2], vec![0.0, 0.0]).unwrap(),
            crate::micronet::Activation::Identity,
        )
        .unwrap()])
        .unwrap();
        (base, train, eval)
    }

    #[test]
    fn global_whitelist_equals_image_only() {
        let (base, train, eval) = tiny_world();
        let cfg = PriorConfig::new(PriorMode::Whitelist, 13_000.0);
        let sweep = radius_sweep(&base, &train, &eval, &[13_000.0], &cfg).unwrap();
        assert_eq!(sweep.rows[0].top1, sweep.image_only_top1);
        assert_eq!(sweep.image_only_top1, 1.0 / 3.0);
    }

    #[test]
    fn tiny_radius_with_abstain_scores_zero() {
        let (base, train, eval) = tiny_world();
        let cfg = PriorConfig {
            empty_fallback: EmptyFallback::Abstain,
            ..PriorConfig::new(PriorMode::Whitelist, 1.0)
        };
        let sweep = radius_sweep(&base, &train, &eval, &[1.0], &cfg).unwrap();
        assert_eq!(sweep.rows[0].top1, 0.0);
        assert_eq!(sweep.rows[0].n_abstained, 3);
        assert!(radius_sweep(&base, &train, &eval, &[], &cfg).is_err());
        assert!(radius_sweep(&base, &train, &eval, &[-1.0], &cfg).is_err());
    }

    #[test]
    fn compare_single_model_matches_topk() {
        let (base, train, eval) = tiny_world();
        let m = ImageOnlyModel { base };
        let rep = compare_models(&[&m], &eval, &train.label_counts(), 2).unwrap();
        assert_eq!(rep.rows.len(), 1);
        let scores = m.score(&eval).unwrap();
        assert_eq!(
            rep.rows[0].top1,
            topk_accuracy_with_abstain(&scores, &eval.labels, 1).unwrap()
        );
        assert_eq!(rep.to_json().unwrap(), rep.to_json().unwrap());
        assert!(rep.to_table().starts_with("model"));
    }

    #[test]
    fn label_map_mismatch_is_an_error() {
        let (base, train, mut eval) = tiny_world();
        eval.classes = 3;
        let m = ImageOnlyModel { base };
        let err = compare_models(&[&m], &eval, &[1, 1, 1], 2).unwrap_err();
        assert!(matches!(err, Error::LabelMapMismatch(_)));
        let _ = train;
    }

    #[test]
    fn interior_optimum_detection() {
        let row = |t: f64, a: f64| SweepRow {
            theta_miles: t,
            top1: a,
            top5: a,
            n_abstained: 0,
        };
        let mut s = SweepReport {
            mode: PriorMode::Whitelist,
            image_only_top1: 0.5,
            rows: vec![row(1.0, 0.5), row(2.0, 0.7), row(3.0, 0.5)],
        };
        assert!(s.interior_optimum());
        assert_eq!(s.best().theta_miles, 2.0);
        s.rows[2].top1 = 0.7;
        assert!(!s.interior_optimum());
    }
}
