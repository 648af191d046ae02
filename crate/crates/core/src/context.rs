//! Whole-image presence prior used to reject detections of categories the
//! image probably does not contain.

use std::collections::BTreeSet;

use rayon::prelude::*;

use crate::classify::{train_svm, LinearModel, SvmParams};
use crate::error::{Error, Result};
use crate::geometry::Detection;
use crate::persist::{ModelReader, ModelWriter, Persist};

/// One image: its whole-image feature and the categories it contains.
#[derive(Debug, Clone, PartialEq)]
pub struct PresenceSample {
    pub image_id: String,
    pub feature: Vec<f64>,
    pub labels: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PresencePrior {
    pub dim: usize,
    pub models: Vec<LinearModel>,
    /// Minimum presence score for a category's detections to survive.
    /// `-inf` disables the gate.
    pub thresholds: Vec<f64>,
    /// False for categories whose training labels were constant.
    pub enabled: Vec<bool>,
}

impl PresencePrior {
    pub fn num_categories(&self) -> usize {
        self.models.len()
    }

    /// Sets every enabled category's threshold to `tau`.
    pub fn set_shared_threshold(&mut self, tau: f64) {
        for (t, on) in self.thresholds.iter_mut().zip(&self.enabled) {
            *t = if *on { tau } else { f64::NEG_INFINITY };
        }
    }
}

/// Trains one present-vs-absent classifier per category.
///
/// Samples are sorted by image id first, so the result does not depend on
/// input order. Categories that are present in every image or in none get a
/// constant model and a disabled gate. Thresholds start at `-inf`; see
/// [`calibrate_thresholds`].
pub fn train_presence_prior(samples: &[PresenceSample], num_categories: usize, params: &SvmParams) -> Result<PresencePrior> {
    if samples.is_empty() {
        return Err(Error::Empty("presence prior needs at least one image"));
    }
    let mut sorted: Vec<&PresenceSample> = samples.iter().collect();
    sorted.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let dim = sorted[0].feature.len();
    if let Some(bad) = sorted.iter().find(|s| s.feature.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: bad.feature.len(),
        });
    }
    if let Some(c) = sorted.iter().flat_map(|s| s.labels.iter()).find(|&&c| c >= num_categories) {
        return Err(Error::CategoryOutOfRange {
            index: *c,
            count: num_categories,
        });
    }
    let features: Vec<&[f64]> = sorted.iter().map(|s| s.feature.as_slice()).collect();
    let trained: Vec<(LinearModel, bool)> = (0..num_categories)
        .into_par_iter()
        .map(|c| {
            let y: Vec<f64> = sorted
                .iter()
                .map(|s| if s.labels.contains(&c) { 1.0 } else { -1.0 })
                .collect();
            let present = y.iter().filter(|&&v| v > 0.0).count();
            if present == 0 || present == y.len() {
                log::warn!(
                    "category {c}: present in {present} of {} images, presence gate disabled",
                    y.len()
                );
                let mut m = LinearModel::zeros(dim);
                m.bias = if present == 0 { -1.0 } else { 1.0 };
                return Ok((m, false));
            }
            train_svm(&features, &y, params)
                .map(|m| (m, true))
                .map_err(|e| Error::Category {
                    category: c,
                    source: Box::new(e),
                })
        })
        .collect::<Result<_>>()?;
    let (models, enabled): (Vec<_>, Vec<_>) = trained.into_iter().unzip();
    Ok(PresencePrior {
        dim,
        thresholds: vec![f64::NEG_INFINITY; num_categories],
        models,
        enabled,
    })
}

/// Raw margins `w_i . x + b_i`.
pub fn presence_scores(feature: &[f64], prior: &PresencePrior) -> Result<Vec<f64>> {
    if prior.num_categories() > 0 && feature.len() != prior.dim {
        return Err(Error::DimensionMismatch {
            expected: prior.dim,
            got: feature.len(),
        });
    }
    Ok(prior.models.iter().map(|m| m.decision(feature)).collect())
}

/// Per-category thresholds keeping at least `recall` of the held-out images
/// that contain each category. Categories that are disabled or absent from
/// the held-out set get `-inf`.
pub fn calibrate_thresholds(prior: &PresencePrior, holdout: &[PresenceSample], recall: f64) -> Result<Vec<f64>> {
    let scores = holdout
        .iter()
        .map(|s| presence_scores(&s.feature, prior))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<&BTreeSet<usize>> = holdout.iter().map(|s| &s.labels).collect();
    thresholds_from_scores(&scores, &labels, &prior.enabled, recall)
}

/// Per-category threshold keeping at least `recall` of the images that
/// contain the category, given their presence scores. Disabled categories
/// and categories without positive images get `-inf`.
pub fn thresholds_from_scores(
    scores: &[Vec<f64>],
    labels: &[&BTreeSet<usize>],
    enabled: &[bool],
    recall: f64,
) -> Result<Vec<f64>> {
    if !(recall > 0.0 && recall <= 1.0) {
        return Err(Error::Invalid(format!("recall target must be in (0, 1], got {recall}")));
    }
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            got: scores.len(),
        });
    }
    Ok((0..enabled.len())
        .map(|c| {
            if !enabled[c] {
                return f64::NEG_INFINITY;
            }
            let mut pos: Vec<f64> = labels
                .iter()
                .zip(scores)
                .filter(|(l, _)| l.contains(&c))
                .map(|(_, sc)| sc[c])
                .collect();
            if pos.is_empty() {
                return f64::NEG_INFINITY;
            }
            pos.sort_by(|a, b| b.total_cmp(a));
            let keep = ((recall * pos.len() as f64) - 1e-9).ceil().max(1.0) as usize;
            pos[keep.min(pos.len()) - 1]
        })
        .collect())
}

/// Keeps a detection iff `presence[c] >= tau[c]` for its category `c`.
/// Categories outside the vectors are kept. Order is preserved.
pub fn filter_detections(detections: &[Detection], presence: &[f64], tau: &[f64]) -> Vec<Detection> {
    detections
        .iter()
        .filter(|d| match (presence.get(d.category_id), tau.get(d.category_id)) {
            (Some(p), Some(t)) => p >= t,
            _ => true,
        })
        .cloned()
        .collect()
}

impl Persist for PresencePrior {
    const KIND: &'static str = "presence-prior";

    fn write_body(&self, w: &mut ModelWriter) {
        let rows: Vec<Vec<f64>> = self.models.iter().map(|m| m.weights.clone()).collect();
        let biases: Vec<f64> = self.models.iter().map(|m| m.bias).collect();
        let enabled: Vec<f64> = self.enabled.iter().map(|&e| if e { 1.0 } else { 0.0 }).collect();
        w.field("categories", self.num_categories())
            .field("dim", self.dim)
            .matrix("weights", &rows)
            .vector("biases", &biases)
            .vector("enabled", &enabled)
            .vector("thresholds", &self.thresholds);
    }

    fn read_body(r: &mut ModelReader<'_>) -> Result<Self> {
        let n: usize = r.parse_field("categories")?;
        let dim: usize = r.parse_field("dim")?;
        let rows = r.matrix("weights")?;
        let biases = r.vector("biases")?;
        let enabled = r.vector("enabled")?;
        let thresholds = r.vector("thresholds")?;
        if rows.len() != n
            || rows.iter().any(|row| row.len() != dim)
            || biases.len() != n
            || enabled.len() != n
            || thresholds.len() != n
        {
            return Err(Error::Invalid("presence prior dimensions disagree".into()));
        }
        Ok(PresencePrior {
            dim,
            models: rows
                .into_iter()
                .zip(biases)
                .map(|(weights, bias)| LinearModel { weights, bias })
                .collect(),
            thresholds,
            enabled: enabled.into_iter().map(|v| v != 0.0).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn sample(id: &str, feature: Vec<f64>, labels: &[usize]) -> PresenceSample {
        PresenceSample {
            image_id: id.into(),
            feature,
            labels: labels.iter().copied().collect(),
        }
    }

    fn det(cat: usize, score: f64) -> Detection {
        Detection {
            image_id: "img".into(),
            bbox: BBox::new(0.0, 0.0, 1.0 + score.abs(), 1.0).unwrap(),
            category_id: cat,
            score,
        }
    }

    fn params() -> SvmParams {
        SvmParams { lambda: 1e-2, epochs: 20, seed: 3 }
    }

    #[test]
    fn constant_category_is_disabled_and_positive() {
        let samples = vec![sample("a", vec![1.0, 0.0], &[0]), sample("b", vec![0.0, 1.0], &[0])];
        let prior = train_presence_prior(&samples, 2, &params()).unwrap();
        assert_eq!(prior.enabled, vec![false, false]);
        for s in &samples {
            assert!(presence_scores(&s.feature, &prior).unwrap()[0] > 0.0);
        }
        assert!(prior.thresholds.iter().all(|t| *t == f64::NEG_INFINITY));
    }

    fn separable() -> Vec<PresenceSample> {
        (0..20)
            .map(|i| {
                let c = i % 2;
                let mut f = vec![0.1 * (i as f64 % 3.0), 0.0];
                f[1] = if c == 0 { 1.0 } else { -1.0 };
                sample(&format!("img{i:02}"), f, &[c])
            })
            .collect()
    }

    #[test]
    fn separable_two_categories() {
        let samples = separable();
        let prior = train_presence_prior(&samples, 2, &params()).unwrap();
        for s in &samples {
            let sc = presence_scores(&s.feature, &prior).unwrap();
            for c in 0..2 {
                assert_eq!(sc[c] > 0.0, s.labels.contains(&c));
            }
        }
    }

    #[test]
    fn order_independent() {
        let samples = separable();
        let mut rev = samples.clone();
        rev.reverse();
        assert_eq!(
            train_presence_prior(&samples, 2, &params()).unwrap(),
            train_presence_prior(&rev, 2, &params()).unwrap()
        );
    }

    #[test]
    fn scores_examples() {
        let prior = PresencePrior {
            dim: 2,
            models: vec![
                LinearModel { weights: vec![1.0, 2.0], bias: 0.5 },
                LinearModel { weights: vec![-1.0, 0.0], bias: -0.25 },
            ],
            thresholds: vec![0.0, 0.0],
            enabled: vec![true, true],
        };
        assert_eq!(presence_scores(&[0.0, 0.0], &prior).unwrap(), vec![0.5, -0.25]);
        assert_eq!(presence_scores(&[3.0, -1.0], &prior).unwrap(), vec![1.5, -3.25]);
        assert!(presence_scores(&[1.0], &prior).is_err());
        let empty = PresencePrior { dim: 0, models: vec![], thresholds: vec![], enabled: vec![] };
        assert!(presence_scores(&[1.0, 2.0], &empty).unwrap().is_empty());
    }

    #[test]
    fn filter_examples() {
        let dets = vec![det(0, 1.0), det(1, 2.0), det(2, 3.0), det(1, 0.5), det(7, 1.0)];
        let inf = vec![f64::NEG_INFINITY; 3];
        assert_eq!(filter_detections(&dets, &[0.0, -5.0, 1.0], &inf), dets);
        let kept = filter_detections(&dets, &[0.0, -5.0, 1.0], &[0.0, 0.0, 0.0]);
        assert_eq!(kept, vec![dets[0].clone(), dets[2].clone(), dets[4].clone()]);
        let again = filter_detections(&kept, &[0.0, -5.0, 1.0], &[0.0, 0.0, 0.0]);
        assert_eq!(again, kept);
    }

    #[test]
    fn calibration_reaches_recall() {
        let samples = separable();
        let prior = train_presence_prior(&samples, 2, &params()).unwrap();
        let tau = calibrate_thresholds(&prior, &samples, 0.95).unwrap();
        for c in 0..2 {
            let pos: Vec<f64> = samples
                .iter()
                .filter(|s| s.labels.contains(&c))
                .map(|s| presence_scores(&s.feature, &prior).unwrap()[c])
                .collect();
            let kept = pos.iter().filter(|&&p| p >= tau[c]).count();
            assert!(kept as f64 >= 0.95 * pos.len() as f64);
        }
    }

    #[test]
    fn persist_round_trip() {
        let prior = PresencePrior {
            dim: 1,
            models: vec![LinearModel { weights: vec![0.3], bias: 0.1 }, LinearModel { weights: vec![0.0], bias: 1.0 }],
            thresholds: vec![-0.125, f64::NEG_INFINITY],
            enabled: vec![true, false],
        };
        assert_eq!(PresencePrior::from_text(&prior.to_text()).unwrap(), prior);
    }
}
