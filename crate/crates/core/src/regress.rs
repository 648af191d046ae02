//! Per-category bounding-box refinement by ridge regression.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::classify::LinearModel;
use crate::error::{Error, Result};
use crate::geometry::{clip_box, iou, BBox, Detection, GroundTruth};
use crate::persist::{ModelReader, ModelWriter, Persist};

/// Normalized center offsets and log size ratios.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxTargets {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxTargets {
    pub const ZERO: BoxTargets = BoxTargets {
        tx: 0.0,
        ty: 0.0,
        tw: 0.0,
        th: 0.0,
    };

    pub fn to_array(self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BoxTargets {
            tx: a[0],
            ty: a[1],
            tw: a[2],
            th: a[3],
        }
    }
}

pub fn bbox_targets(proposal: &BBox, gt: &BBox) -> BoxTargets {
    let (px, py) = proposal.center();
    let (gx, gy) = gt.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    BoxTargets {
        tx: (gx - px) / pw,
        ty: (gy - py) / ph,
        tw: (gt.width() / pw).ln(),
        th: (gt.height() / ph).ln(),
    }
}

pub fn apply_targets(proposal: &BBox, t: &BoxTargets) -> Result<BBox> {
    let (px, py) = proposal.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    BBox::from_center(
        pw * t.tx + px,
        ph * t.ty + py,
        pw * t.tw.exp(),
        ph * t.th.exp(),
    )
}

/// Solves `(X'X + lambda*I) w = X't` for each target column, with an
/// unregularized bias on an appended constant feature.
///
/// `targets[j]` holds the j-th output for every sample.
pub fn ridge(features: &[&[f64]], targets: &[Vec<f64>], lambda: f64) -> Result<Vec<LinearModel>> {
    let n = features.len();
    if n == 0 {
        return Err(Error::Empty("ridge regression needs at least one sample"));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Invalid(format!("ridge lambda must be non-negative, got {lambda}")));
    }
    let dim = features[0].len();
    if let Some(bad) = features.iter().find(|f| f.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: bad.len(),
        });
    }
    if let Some(bad) = targets.iter().find(|t| t.len() != n) {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: bad.len(),
        });
    }
    let a = normal_matrix(features, lambda);
    let chol = a.cholesky().ok_or_else(|| {
        Error::Invalid("ridge normal matrix is not positive definite; increase lambda".into())
    })?;
    Ok(targets
        .iter()
        .map(|t| {
            let sol = chol.solve(&normal_rhs(features, t));
            LinearModel {
                weights: sol.as_slice()[..dim].to_vec(),
                bias: sol[dim],
            }
        })
        .collect())
}

/// `X'X + lambda*I` over the augmented design, with no penalty on the last
/// (bias) coordinate.
pub fn normal_matrix(features: &[&[f64]], lambda: f64) -> DMatrix<f64> {
    let dim = features.first().map_or(0, |f| f.len());
    let mut a = DMatrix::<f64>::zeros(dim + 1, dim + 1);
    for x in features {
        for i in 0..dim {
            for j in i..dim {
                a[(i, j)] += x[i] * x[j];
            }
            a[(i, dim)] += x[i];
        }
        a[(dim, dim)] += 1.0;
    }
    for i in 0..=dim {
        for j in 0..i {
            a[(i, j)] = a[(j, i)];
        }
    }
    for i in 0..dim {
        a[(i, i)] += lambda;
    }
    a
}

pub fn normal_rhs(features: &[&[f64]], targets: &[f64]) -> DVector<f64> {
    let dim = features.first().map_or(0, |f| f.len());
    let mut b = DVector::<f64>::zeros(dim + 1);
    for (x, t) in features.iter().zip(targets) {
        for i in 0..dim {
            b[i] += x[i] * t;
        }
        b[dim] += t;
    }
    b
}

/// One training pair: a proposal, its matched ground truth and its feature.
#[derive(Debug, Clone, Copy)]
pub struct RegressionSample<'a> {
    pub feature: &'a [f64],
    pub proposal: BBox,
    pub gt: BBox,
    pub category_id: usize,
}

/// Highest-IoU ground truth with IoU at least `min_iou`; ties go to the
/// earlier ground truth.
pub fn match_ground_truth<'g>(proposal: &BBox, gts: &'g [GroundTruth], min_iou: f64) -> Option<&'g GroundTruth> {
    let mut best: Option<(&GroundTruth, f64)> = None;
    for g in gts {
        let o = iou(proposal, &g.bbox);
        if o >= min_iou && best.map_or(true, |(_, b)| o > b) {
            best = Some((g, o));
        }
    }
    best.map(|(g, _)| g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxRegressor {
    pub dim: usize,
    /// Per category: `tx, ty, tw, th` predictors, or `None` when untrained.
    pub models: Vec<Option<[LinearModel; 4]>>,
}

impl BoxRegressor {
    pub fn num_categories(&self) -> usize {
        self.models.len()
    }

    pub fn predict(&self, feature: &[f64], category: usize) -> Result<Option<BoxTargets>> {
        let slot = self.models.get(category).ok_or(Error::CategoryOutOfRange {
            index: category,
            count: self.num_categories(),
        })?;
        let Some(m) = slot else { return Ok(None) };
        if feature.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: feature.len(),
            });
        }
        Ok(Some(BoxTargets::from_array([
            m[0].decision(feature),
            m[1].decision(feature),
            m[2].decision(feature),
            m[3].decision(feature),
        ])))
    }
}

/// Fits the four ridge predictors of every category that has samples;
/// categories without samples stay untrained.
pub fn train_bbox_regressor(
    samples: &[RegressionSample<'_>],
    dim: usize,
    num_categories: usize,
    lambda: f64,
) -> Result<BoxRegressor> {
    if let Some(s) = samples.iter().find(|s| s.feature.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: s.feature.len(),
        });
    }
    if let Some(s) = samples.iter().find(|s| s.category_id >= num_categories) {
        return Err(Error::CategoryOutOfRange {
            index: s.category_id,
            count: num_categories,
        });
    }
    let models = (0..num_categories)
        .into_par_iter()
        .map(|c| {
            let own: Vec<&RegressionSample> = samples.iter().filter(|s| s.category_id == c).collect();
            if own.is_empty() {
                log::warn!("category {c}: no matched pairs, box regressor left untrained");
                return Ok(None);
            }
            let x: Vec<&[f64]> = own.iter().map(|s| s.feature).collect();
            let mut cols = vec![Vec::with_capacity(own.len()); 4];
            for s in &own {
                for (col, v) in cols.iter_mut().zip(bbox_targets(&s.proposal, &s.gt).to_array()) {
                    col.push(v);
                }
            }
            let fitted = ridge(&x, &cols, lambda).map_err(|e| Error::Category {
                category: c,
                source: Box::new(e),
            })?;
            let arr: [LinearModel; 4] = fitted.try_into().expect("four target columns");
            Ok(Some(arr))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BoxRegressor { dim, models })
}

/// Moves each detection's box by its category's predicted targets and clips
/// it to the image. Untrained categories pass through unchanged.
pub fn refine(
    detections: &[Detection],
    features: &[&[f64]],
    regressor: &BoxRegressor,
    width: u32,
    height: u32,
) -> Result<Vec<Detection>> {
    if detections.len() != features.len() {
        return Err(Error::DimensionMismatch {
            expected: detections.len(),
            got: features.len(),
        });
    }
    detections
        .iter()
        .zip(features)
        .map(|(d, f)| {
            let bbox = match regressor.predict(f, d.category_id)? {
                Some(t) => clip_box(&apply_targets(&d.bbox, &t)?, width, height)?,
                None => d.bbox,
            };
            Ok(Detection { bbox, ..d.clone() })
        })
        .collect()
}

impl Persist for BoxRegressor {
    const KIND: &'static str = "box-regressor";

    fn write_body(&self, w: &mut ModelWriter) {
        w.field("categories", self.num_categories()).field("dim", self.dim);
        for (c, slot) in self.models.iter().enumerate() {
            match slot {
                None => {
                    w.field(&format!("category_{c}"), "untrained");
                }
                Some(m) => {
                    let rows: Vec<Vec<f64>> = m
                        .iter()
                        .map(|lm| {
                            let mut r = lm.weights.clone();
                            r.push(lm.bias);
                            r
                        })
                        .collect();
                    w.field(&format!("category_{c}"), "trained")
                        .matrix(&format!("coefficients_{c}"), &rows);
                }
            }
        }
    }

    fn read_body(r: &mut ModelReader<'_>) -> Result<Self> {
        let n: usize = r.parse_field("categories")?;
        let dim: usize = r.parse_field("dim")?;
        let mut models = Vec::with_capacity(n);
        for c in 0..n {
            match r.field(&format!("category_{c}"))? {
                "untrained" => models.push(None),
                "trained" => {
                    let rows = r.matrix(&format!("coefficients_{c}"))?;
                    if rows.len() != 4 || rows.iter().any(|row| row.len() != dim + 1) {
                        return Err(Error::Invalid(format!(
                            "category {c}: expected 4 x {} coefficients",
                            dim + 1
                        )));
                    }
                    let lms: Vec<LinearModel> = rows
                        .into_iter()
                        .map(|mut row| {
                            let bias = row.pop().unwrap_or(0.0);
                            LinearModel { weights: row, bias }
                        })
                        .collect();
                    models.push(Some(lms.try_into().expect("four rows")));
                }
                other => {
                    return Err(Error::Invalid(format!("category {c}: unknown state {other:?}")))
                }
            }
        }
        Ok(BoxRegressor { dim, models })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn target_examples() {
        let p = b(0.0, 0.0, 10.0, 20.0);
        assert_eq!(bbox_targets(&p, &p), BoxTargets::ZERO);
        let t = bbox_targets(&p, &b(5.0, 0.0, 15.0, 20.0));
        assert_eq!(t.to_array(), [0.5, 0.0, 0.0, 0.0]);
        let t = bbox_targets(&p, &b(-5.0, 0.0, 15.0, 20.0));
        assert_eq!(t.to_array(), [0.0, 0.0, 2f64.ln(), 0.0]);
    }

    #[test]
    fn apply_examples() {
        let p = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(apply_targets(&p, &BoxTargets::ZERO).unwrap(), p);
        let moved = apply_targets(&p, &BoxTargets::from_array([0.5, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(moved.center(), (10.0, 5.0));
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-100.0..100.0f64, -100.0..100.0f64, 0.5..80.0f64, 0.5..80.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
    }

    proptest! {
        #[test]
        fn round_trip(p in arb_box(), g in arb_box()) {
            let back = apply_targets(&p, &bbox_targets(&p, &g)).unwrap();
            for (u, v) in back.to_array().iter().zip(g.to_array()) {
                prop_assert!((u - v).abs() < 1e-9);
            }
        }
    }

    fn random_design(seed: u64, n: usize, dim: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
        v.iter().map(Vec::as_slice).collect()
    }

    #[test]
    fn zero_targets_predict_zero() {
        let x = random_design(1, 30, 5);
        let m = ridge(&refs(&x), &[vec![0.0; 30]], 1.0).unwrap();
        for row in &x {
            assert!(m[0].decision(row).abs() < 1e-6);
        }
    }

    #[test]
    fn exact_linear_targets_recovered() {
        let x = random_design(2, 40, 4);
        let a = [0.3, -1.2, 2.0, 0.05];
        let t: Vec<f64> = x.iter().map(|r| r.iter().zip(&a).map(|(u, v)| u * v).sum::<f64>() + 0.7).collect();
        let m = ridge(&refs(&x), &[t.clone()], 1e-12).unwrap();
        for (row, ti) in x.iter().zip(&t) {
            assert!((m[0].decision(row) - ti).abs() < 1e-6);
        }
    }

    #[test]
    fn huge_lambda_gives_mean() {
        let x = random_design(3, 25, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t: Vec<f64> = (0..25).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mean = t.iter().sum::<f64>() / 25.0;
        let m = ridge(&refs(&x), &[t], 1e12).unwrap();
        for row in &x {
            assert!((m[0].decision(row) - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn normal_equation_residual() {
        for seed in 0..20 {
            let x = random_design(seed, 50, 8);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let t: Vec<f64> = (0..50).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let lambda = 0.5;
            let m = &ridge(&refs(&x), &[t.clone()], lambda).unwrap()[0];
            let mut w = m.weights.clone();
            w.push(m.bias);
            let a = normal_matrix(&refs(&x), lambda);
            let rhs = normal_rhs(&refs(&x), &t);
            let res = &a * DVector::from_vec(w) - &rhs;
            assert!(res.norm() / rhs.norm() < 1e-8);
        }
    }

    #[test]
    fn synthetic_shift_refines_to_gt() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let feature = vec![1.0, 0.5];
        let mut pairs = Vec::new();
        for _ in 0..30 {
            let x = rng.gen_range(10.0..50.0);
            let y = rng.gen_range(10.0..50.0);
            let p = b(x, y, x + 20.0, y + 20.0);
            pairs.push((p, b(x + 5.0, y, x + 25.0, y + 20.0)));
        }
        let samples: Vec<RegressionSample> = pairs
            .iter()
            .map(|(p, g)| RegressionSample { feature: &feature, proposal: *p, gt: *g, category_id: 0 })
            .collect();
        let reg = train_bbox_regressor(&samples, 2, 2, 1.0).unwrap();
        assert!(reg.models[1].is_none());
        let dets: Vec<Detection> = pairs
            .iter()
            .map(|(p, _)| Detection { image_id: "i".into(), bbox: *p, category_id: 0, score: 1.0 })
            .collect();
        let feats = vec![feature.as_slice(); dets.len()];
        let refined = refine(&dets, &feats, &reg, 200, 200).unwrap();
        for (r, (p, g)) in refined.iter().zip(&pairs) {
            for (u, v) in r.bbox.to_array().iter().zip(g.to_array()) {
                assert!((u - v).abs() < 0.1);
            }
            assert!(iou(&r.bbox, g) >= iou(p, g));
        }
        let other = Detection { category_id: 1, ..dets[0].clone() };
        assert_eq!(refine(&[other.clone()], &feats[..1], &reg, 200, 200).unwrap()[0], other);
        // pushed off the right edge
        let edge = Detection { bbox: b(180.0, 0.0, 199.0, 20.0), ..dets[0].clone() };
        let r = refine(&[edge], &feats[..1], &reg, 200, 200).unwrap();
        assert_eq!(r[0].bbox.x_max(), 200.0);
    }

    #[test]
    fn match_picks_best_above_threshold() {
        let gts = vec![
            GroundTruth { image_id: "a".into(), bbox: b(0.0, 0.0, 10.0, 10.0), category_id: 0 },
            GroundTruth { image_id: "a".into(), bbox: b(1.0, 0.0, 11.0, 10.0), category_id: 1 },
        ];
        let p = b(1.0, 0.0, 11.0, 10.0);
        assert_eq!(match_ground_truth(&p, &gts, 0.6).unwrap().category_id, 1);
        assert!(match_ground_truth(&b(50.0, 50.0, 60.0, 60.0), &gts, 0.6).is_none());
    }

    #[test]
    fn persist_round_trip() {
        let lm = |s: f64| LinearModel { weights: vec![s, 1.0 / 3.0], bias: -s };
        let reg = BoxRegressor {
            dim: 2,
            models: vec![None, Some([lm(0.1), lm(0.2), lm(0.3), lm(1e-17)])],
        };
        assert_eq!(BoxRegressor::from_text(&reg.to_text()).unwrap(), reg);
    }
}
