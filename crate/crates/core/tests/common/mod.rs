//! Brute-force reference implementations and random instance generators
//! shared by the integration suites.

#![allow(dead_code)]

use fusiondet::{BBox, Detection, GroundTruth};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Integer-cornered box on a small grid, so areas are exact.
pub fn grid_box(rng: &mut ChaCha8Rng, grid: i32) -> BBox {
    let x0 = rng.gen_range(0..grid - 1);
    let y0 = rng.gen_range(0..grid - 1);
    let x1 = rng.gen_range(x0 + 1..=grid);
    let y1 = rng.gen_range(y0 + 1..=grid);
    BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64).unwrap()
}

fn cells(b: &BBox) -> Vec<(i64, i64)> {
    let mut out = Vec::new();
    for y in b.y_min() as i64..b.y_max() as i64 {
        for x in b.x_min() as i64..b.x_max() as i64 {
            out.push((x, y));
        }
    }
    out
}

/// IoU by counting unit cells of integer boxes.
pub fn iou_oracle(a: &BBox, b: &BBox) -> f64 {
    let ca = cells(a);
    let cb = cells(b);
    let inter = ca.iter().filter(|c| cb.contains(c)).count();
    let union = ca.len() + cb.len() - inter;
    if inter == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Ranking key: score descending, then corners ascending.
pub fn rank(dets: &[Detection]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| {
        let ka = (-dets[a].score, dets[a].bbox.to_array());
        let kb = (-dets[b].score, dets[b].bbox.to_array());
        ka.partial_cmp(&kb).unwrap()
    });
    idx
}

/// Greedy NMS characterized as the unique subset `S` of the ranked list in
/// which a detection belongs to `S` iff no higher-ranked member of `S`
/// overlaps it by more than the threshold. Found by enumerating subsets.
pub fn nms_oracle(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let order = rank(dets);
    let n = order.len();
    let mut found = None;
    for mask in 0u32..(1 << n) {
        let member = |i: usize| mask & (1 << i) != 0;
        let consistent = (0..n).all(|i| {
            let blocked = (0..i).any(|j| member(j) && iou_oracle(&dets[order[j]].bbox, &dets[order[i]].bbox) > thr);
            member(i) == !blocked
        });
        if consistent {
            assert!(found.is_none(), "fixed point must be unique");
            found = Some(mask);
        }
    }
    let mask = found.expect("a fixed point always exists");
    (0..n).filter(|i| mask & (1 << i) != 0).map(|i| dets[order[i]].clone()).collect()
}

/// TP flags per detection (input order) by scanning every ground truth.
pub fn match_oracle(dets: &[Detection], gts: &[GroundTruth], thr: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    let mut flags = vec![false; dets.len()];
    let mut order = rank(dets);
    // equal keys keep input order
    order.sort_by(|&a, &b| {
        let ka = (-dets[a].score, dets[a].bbox.to_array(), a);
        let kb = (-dets[b].score, dets[b].bbox.to_array(), b);
        ka.partial_cmp(&kb).unwrap()
    });
    for i in order {
        let d = &dets[i];
        let mut best: Option<usize> = None;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] || gt.image_id != d.image_id || gt.category_id != d.category_id {
                continue;
            }
            let better = match best {
                None => true,
                Some(b) => iou_oracle(&d.bbox, &gt.bbox) > iou_oracle(&d.bbox, &gts[b].bbox),
            };
            if better {
                best = Some(g);
            }
        }
        if let Some(g) = best {
            if iou_oracle(&d.bbox, &gts[g].bbox) >= thr {
                used[g] = true;
                flags[i] = true;
            }
        }
    }
    flags
}

fn gcd(a: i128, b: i128) -> i128 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

/// All-point interpolated AP as a reduced fraction, converted once.
///
/// For each true positive at rank k, the interpolated precision is the
/// maximum precision over ranks >= k; AP is their sum divided by `num_gt`.
pub fn ap_oracle(flags: &[bool], num_gt: usize) -> f64 {
    let (mut num, mut den) = (0i128, 1i128);
    for k in 0..flags.len() {
        if !flags[k] {
            continue;
        }
        let mut best = (0i128, 1i128);
        for j in k..flags.len() {
            let tp = flags[..=j].iter().filter(|f| **f).count() as i128;
            let p = (tp, j as i128 + 1);
            if p.0 * best.1 > best.0 * p.1 {
                best = p;
            }
        }
        num = num * best.1 + best.0 * den;
        den *= best.1;
        let g = gcd(num, den);
        num /= g;
        den /= g;
    }
    den *= num_gt as i128;
    let g = gcd(num, den).max(1);
    (num / g) as f64 / (den / g) as f64
}

pub fn random_detections(rng: &mut ChaCha8Rng, n: usize, images: usize, categories: usize) -> Vec<Detection> {
    (0..n)
        .map(|_| Detection {
            image_id: format!("im{}", rng.gen_range(0..images)),
            bbox: grid_box(rng, 8),
            category_id: rng.gen_range(0..categories),
            // coarse scores so ties occur
            score: rng.gen_range(0..4) as f64 / 2.0,
        })
        .collect()
}

pub fn random_ground_truths(rng: &mut ChaCha8Rng, n: usize, images: usize, categories: usize) -> Vec<GroundTruth> {
    (0..n)
        .map(|_| GroundTruth {
            image_id: format!("im{}", rng.gen_range(0..images)),
            bbox: grid_box(rng, 8),
            category_id: rng.gen_range(0..categories),
        })
        .collect()
}
