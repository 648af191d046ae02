//! Linear SVMs: per-channel category banks and the stacked fusion model.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::Channel;
use crate::persist::{ModelReader, ModelWriter, Persist};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearModel {
    pub fn zeros(dim: usize) -> Self {
        LinearModel {
            weights: vec![0.0; dim],
            bias: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    #[inline]
    pub fn decision(&self, x: &[f64]) -> f64 {
        dot(&self.weights, x) + self.bias
    }

    pub fn weight_norm(&self) -> f64 {
        dot(&self.weights, &self.weights).sqrt()
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmParams {
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvmParams {
    fn default() -> Self {
        SvmParams {
            lambda: 1e-4,
            epochs: 15,
            seed: 0,
        }
    }
}

/// `lambda/2 * (|w|^2 + b^2)` plus the mean hinge loss.
///
/// The bias is trained as the weight of a constant unit feature, so it shares
/// the regularizer.
pub fn svm_objective(model: &LinearModel, features: &[&[f64]], labels: &[f64], lambda: f64) -> f64 {
    let hinge: f64 = features
        .iter()
        .zip(labels)
        .map(|(x, y)| (1.0 - y * model.decision(x)).max(0.0))
        .sum::<f64>()
        / features.len() as f64;
    let reg = dot(&model.weights, &model.weights) + model.bias * model.bias;
    0.5 * lambda * reg + hinge
}

/// Trained model plus per-epoch objectives.
///
/// `averaged_objectives[e]` belongs to epoch `e`'s averaged iterate;
/// `epoch_objectives[e]` to the model retained after epoch `e`.
#[derive(Debug, Clone)]
pub struct SvmTrace {
    pub model: LinearModel,
    pub epoch_objectives: Vec<f64>,
    pub averaged_objectives: Vec<f64>,
}

fn validate(features: &[&[f64]], labels: &[f64]) -> Result<usize> {
    if features.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: features.len(),
            got: labels.len(),
        });
    }
    let dim = features.first().map_or(0, |f| f.len());
    if let Some(bad) = features.iter().find(|f| f.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: bad.len(),
        });
    }
    if let Some(bad) = labels.iter().find(|&&y| y != 1.0 && y != -1.0) {
        return Err(Error::Invalid(format!("SVM labels must be +1 or -1, got {bad}")));
    }
    let pos = labels.iter().any(|&y| y > 0.0);
    let neg = labels.iter().any(|&y| y < 0.0);
    if !(pos && neg) {
        return Err(Error::SingleClass);
    }
    Ok(dim)
}

/// Primal subgradient SVM with step `1 / (lambda * t)` and a seeded
/// reshuffle every epoch.
///
/// Each epoch's iterates are averaged. After every epoch the retained model is
/// replaced by the new average only if that lowers the objective, starting
/// from the zero model.
pub fn train_svm_traced(features: &[&[f64]], labels: &[f64], params: &SvmParams) -> Result<SvmTrace> {
    let dim = validate(features, labels)?;
    if !(params.lambda > 0.0) {
        return Err(Error::Invalid(format!("SVM lambda must be positive, got {}", params.lambda)));
    }
    let lambda = params.lambda;
    let radius = 1.0 / lambda.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut order: Vec<usize> = (0..features.len()).collect();

    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut t = 0u64;
    let mut best = LinearModel::zeros(dim);
    let mut best_obj = svm_objective(&best, features, labels, lambda);
    let mut trace = Vec::with_capacity(params.epochs);
    let mut averaged = Vec::with_capacity(params.epochs);

    for _ in 0..params.epochs {
        order.shuffle(&mut rng);
        let mut avg_w = vec![0.0; dim];
        let mut avg_b = 0.0;
        for &i in &order {
            t += 1;
            let eta = 1.0 / (lambda * t as f64);
            let (x, y) = (features[i], labels[i]);
            let margin = y * (dot(&w, x) + b);
            let shrink = 1.0 - eta * lambda;
            if margin < 1.0 {
                for (wj, xj) in w.iter_mut().zip(x) {
                    *wj = shrink * *wj + eta * y * xj;
                }
                b = shrink * b + eta * y;
            } else {
                w.iter_mut().for_each(|wj| *wj *= shrink);
                b *= shrink;
            }
            let norm = (dot(&w, &w) + b * b).sqrt();
            if norm > radius {
                let s = radius / norm;
                w.iter_mut().for_each(|wj| *wj *= s);
                b *= s;
            }
            for (a, wj) in avg_w.iter_mut().zip(&w) {
                *a += wj;
            }
            avg_b += b;
        }
        let n = order.len() as f64;
        let candidate = LinearModel {
            weights: avg_w.into_iter().map(|v| v / n).collect(),
            bias: avg_b / n,
        };
        let obj = svm_objective(&candidate, features, labels, lambda);
        averaged.push(obj);
        if obj < best_obj {
            best_obj = obj;
            best = candidate;
        }
        trace.push(best_obj);
    }
    Ok(SvmTrace {
        model: best,
        epoch_objectives: trace,
        averaged_objectives: averaged,
    })
}

pub fn train_svm(features: &[&[f64]], labels: &[f64], params: &SvmParams) -> Result<LinearModel> {
    train_svm_traced(features, labels, params).map(|t| t.model)
}

/// One linear scorer per category over a single feature channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmBank {
    pub channel: Channel,
    pub models: Vec<LinearModel>,
}

impl SvmBank {
    pub fn new(channel: Channel, models: Vec<LinearModel>) -> Result<Self> {
        if let Some(first) = models.first() {
            if let Some(bad) = models.iter().find(|m| m.dim() != first.dim()) {
                return Err(Error::DimensionMismatch {
                    expected: first.dim(),
                    got: bad.dim(),
                });
            }
        }
        Ok(SvmBank { channel, models })
    }

    pub fn num_categories(&self) -> usize {
        self.models.len()
    }

    pub fn dim(&self) -> usize {
        self.models.first().map_or(0, LinearModel::dim)
    }
}

/// Entry `i` is `w_i . x + b_i`.
pub fn score_bank(feature: &[f64], bank: &SvmBank) -> Result<Vec<f64>> {
    if feature.len() != bank.dim() && bank.num_categories() > 0 {
        return Err(Error::DimensionMismatch {
            expected: bank.dim(),
            got: feature.len(),
        });
    }
    Ok(bank.models.iter().map(|m| m.decision(feature)).collect())
}

/// Trains one-vs-rest models for `num_categories` categories in parallel.
/// `labels[i]` is the category of sample `i`, `None` for background.
/// All categories share `params.seed`.
pub fn train_one_vs_rest(
    features: &[&[f64]],
    labels: &[Option<usize>],
    num_categories: usize,
    params: &SvmParams,
) -> Result<Vec<LinearModel>> {
    if features.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: features.len(),
            got: labels.len(),
        });
    }
    if let Some(c) = labels.iter().flatten().find(|&&c| c >= num_categories) {
        return Err(Error::CategoryOutOfRange {
            index: *c,
            count: num_categories,
        });
    }
    (0..num_categories)
        .into_par_iter()
        .map(|c| {
            let y: Vec<f64> = labels
                .iter()
                .map(|l| if *l == Some(c) { 1.0 } else { -1.0 })
                .collect();
            train_svm(features, &y, params).map_err(|e| Error::Category {
                category: c,
                source: Box::new(e),
            })
        })
        .collect()
}

/// Concatenates the three per-channel score vectors in `cnn, hog, ifv` order.
pub fn fuse_scores(cnn: &[f64], hog: &[f64], ifv: &[f64]) -> Result<Vec<f64>> {
    if hog.len() != cnn.len() || ifv.len() != cnn.len() {
        let got = if hog.len() != cnn.len() { hog.len() } else { ifv.len() };
        return Err(Error::DimensionMismatch {
            expected: cnn.len(),
            got,
        });
    }
    let mut out = Vec::with_capacity(3 * cnn.len());
    out.extend_from_slice(cnn);
    out.extend_from_slice(hog);
    out.extend_from_slice(ifv);
    Ok(out)
}

/// Per-coordinate affine map to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Standardizer {
    pub fn fit(vectors: &[&[f64]]) -> Standardizer {
        let dim = vectors.first().map_or(0, |v| v.len());
        let n = vectors.len().max(1) as f64;
        let mut means = vec![0.0; dim];
        for v in vectors {
            for (m, x) in means.iter_mut().zip(v.iter()) {
                *m += x / n;
            }
        }
        let mut var = vec![0.0; dim];
        for v in vectors {
            for ((s, x), m) in var.iter_mut().zip(v.iter()).zip(&means) {
                *s += (x - m) * (x - m) / n;
            }
        }
        let scales = var
            .into_iter()
            .map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 })
            .collect();
        Standardizer { means, scales }
    }

    pub fn identity(dim: usize) -> Standardizer {
        Standardizer {
            means: vec![0.0; dim],
            scales: vec![1.0; dim],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.means)
            .zip(&self.scales)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

/// N one-vs-rest models over standardized `3N` score vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub models: Vec<LinearModel>,
    pub standardizer: Standardizer,
}

impl FusionModel {
    pub fn num_categories(&self) -> usize {
        self.models.len()
    }
}

/// Trains the stacked fusion SVMs. Standardization constants are fitted on
/// `fused` and stored with the model.
pub fn train_fusion(fused: &[Vec<f64>], labels: &[Option<usize>], num_categories: usize, params: &SvmParams) -> Result<FusionModel> {
    if let Some(bad) = fused.iter().find(|v| v.len() != 3 * num_categories) {
        return Err(Error::DimensionMismatch {
            expected: 3 * num_categories,
            got: bad.len(),
        });
    }
    let raw: Vec<&[f64]> = fused.iter().map(Vec::as_slice).collect();
    let standardizer = Standardizer::fit(&raw);
    let std_vectors: Vec<Vec<f64>> = fused.iter().map(|v| standardizer.apply(v)).collect();
    let refs: Vec<&[f64]> = std_vectors.iter().map(Vec::as_slice).collect();
    let models = train_one_vs_rest(&refs, labels, num_categories, params)?;
    Ok(FusionModel {
        models,
        standardizer,
    })
}

/// Detection score of `category` for one raw fused score vector.
pub fn final_score(fused: &[f64], fusion: &FusionModel, category: usize) -> Result<f64> {
    let model = fusion
        .models
        .get(category)
        .ok_or(Error::CategoryOutOfRange {
            index: category,
            count: fusion.num_categories(),
        })?;
    if fused.len() != fusion.standardizer.means.len() {
        return Err(Error::DimensionMismatch {
            expected: fusion.standardizer.means.len(),
            got: fused.len(),
        });
    }
    Ok(model.decision(&fusion.standardizer.apply(fused)))
}

fn write_models(w: &mut ModelWriter, models: &[LinearModel]) {
    let rows: Vec<Vec<f64>> = models.iter().map(|m| m.weights.clone()).collect();
    let biases: Vec<f64> = models.iter().map(|m| m.bias).collect();
    w.matrix("weights", &rows).vector("biases", &biases);
}

fn read_models(r: &mut ModelReader<'_>, n: usize, dim: usize) -> Result<Vec<LinearModel>> {
    let rows = r.matrix("weights")?;
    let biases = r.vector("biases")?;
    if rows.len() != n || biases.len() != n || rows.iter().any(|row| row.len() != dim) {
        return Err(Error::Invalid("linear model block dimensions disagree".into()));
    }
    Ok(rows
        .into_iter()
        .zip(biases)
        .map(|(weights, bias)| LinearModel { weights, bias })
        .collect())
}

impl Persist for SvmBank {
    const KIND: &'static str = "svm-bank";

    fn write_body(&self, w: &mut ModelWriter) {
        w.field("channel", self.channel)
            .field("categories", self.num_categories())
            .field("dim", self.dim());
        write_models(w, &self.models);
    }

    fn read_body(r: &mut ModelReader<'_>) -> Result<Self> {
        let channel: Channel = r.field("channel")?.parse()?;
        let n: usize = r.parse_field("categories")?;
        let dim: usize = r.parse_field("dim")?;
        SvmBank::new(channel, read_models(r, n, dim)?)
    }
}

impl Persist for FusionModel {
    const KIND: &'static str = "fusion";

    fn write_body(&self, w: &mut ModelWriter) {
        w.field("categories", self.num_categories())
            .vector("means", &self.standardizer.means)
            .vector("scales", &self.standardizer.scales);
        write_models(w, &self.models);
    }

    fn read_body(r: &mut ModelReader<'_>) -> Result<Self> {
        let n: usize = r.parse_field("categories")?;
        let means = r.vector("means")?;
        let scales = r.vector("scales")?;
        if means.len() != 3 * n || scales.len() != 3 * n {
            return Err(Error::Invalid("fusion standardization must have 3N entries".into()));
        }
        let models = read_models(r, n, 3 * n)?;
        Ok(FusionModel {
            models,
            standardizer: Standardizer { means, scales },
        })
    }
}
