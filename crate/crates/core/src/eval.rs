//! Detection matching, average precision and cross-run comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::{detection_order, iou, Detection, GroundTruth};

/// Ranked TP/FP flags of one category.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CategoryMatches {
    pub flags: Vec<bool>,
    pub scores: Vec<f64>,
    pub num_gt: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    /// TP flag of every input detection, in input order.
    pub detection_flags: Vec<bool>,
    pub categories: BTreeMap<usize, CategoryMatches>,
}

impl MatchResult {
    pub fn category(&self, c: usize) -> CategoryMatches {
        self.categories.get(&c).cloned().unwrap_or_default()
    }
}

/// Greedy matching in descending score order. A detection is a true
/// positive when the highest-IoU ground truth of its image and category that
/// is still unmatched overlaps it by at least `iou_threshold`; that ground
/// truth is then consumed.
pub fn match_detections(detections: &[Detection], ground_truths: &[GroundTruth], iou_threshold: f64) -> MatchResult {
    let mut result = MatchResult {
        detection_flags: vec![false; detections.len()],
        categories: BTreeMap::new(),
    };
    let mut gt_index: BTreeMap<(&str, usize), Vec<usize>> = BTreeMap::new();
    for (i, g) in ground_truths.iter().enumerate() {
        gt_index.entry((g.image_id.as_str(), g.category_id)).or_default().push(i);
        result.categories.entry(g.category_id).or_default().num_gt += 1;
    }
    let mut used = vec![false; ground_truths.len()];
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detection_order(&detections[a], &detections[b]).then(a.cmp(&b)));

    for i in order {
        let d = &detections[i];
        let mut best: Option<(usize, f64)> = None;
        if let Some(candidates) = gt_index.get(&(d.image_id.as_str(), d.category_id)) {
            for &g in candidates {
                if used[g] {
                    continue;
                }
                let o = iou(&d.bbox, &ground_truths[g].bbox);
                if best.map_or(true, |(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
        }
        let tp = match best {
            Some((g, o)) if o >= iou_threshold => {
                used[g] = true;
                true
            }
            _ => false,
        };
        result.detection_flags[i] = tp;
        let entry = result.categories.entry(d.category_id).or_default();
        entry.flags.push(tp);
        entry.scores.push(d.score);
    }
    result
}

/// All-point interpolated AP of flags ranked by descending score.
///
/// The sum is carried as an exact fraction while it fits in 128 bits, so
/// small inputs give the correctly rounded value (e.g. exactly `5.0 / 6.0`
/// for `[TP, FP, TP]` with two ground truths).
pub fn average_precision(flags: &[bool], num_gt: usize) -> Result<f64> {
    if num_gt == 0 {
        return Err(Error::Empty("average precision needs at least one ground truth"));
    }
    // (tp, rank) of the interpolated precision at each rank
    let mut precision: Vec<(u64, u64)> = Vec::with_capacity(flags.len());
    let mut tp = 0u64;
    for (rank, &f) in flags.iter().enumerate() {
        tp += f as u64;
        precision.push((tp, rank as u64 + 1));
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        let (a, b) = (precision[i], precision[i + 1]);
        if (b.0 as u128) * (a.1 as u128) > (a.0 as u128) * (b.1 as u128) {
            precision[i] = b;
        }
    }
    let terms = flags.iter().zip(&precision).filter(|(f, _)| **f).map(|(_, p)| *p);

    let mut exact = Some((0u128, 1u128));
    for (n, d) in terms.clone() {
        exact = exact.and_then(|(an, ad)| add_fraction(an, ad, n as u128, d as u128));
    }
    match exact.and_then(|(n, d)| Some((n, d.checked_mul(num_gt as u128)?))) {
        Some((n, d)) => Ok(n as f64 / d as f64),
        None => {
            let step = 1.0 / num_gt as f64;
            Ok(terms.map(|(n, d)| step * n as f64 / d as f64).sum())
        }
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn add_fraction(an: u128, ad: u128, bn: u128, bd: u128) -> Option<(u128, u128)> {
    let g = gcd(ad, bd);
    let den = (ad / g).checked_mul(bd)?;
    let num = an.checked_mul(bd / g)?.checked_add(bn.checked_mul(ad / g)?)?;
    let r = gcd(num, den).max(1);
    Some((num / r, den / r))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub category: String,
    /// `None` when the category has no ground truth.
    pub ap: Option<f64>,
    pub num_gt: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerClassReport {
    pub rows: Vec<ReportRow>,
    pub map: f64,
}

/// Mean of the APs of categories with ground truth.
pub fn mean_ap(rows: &[ReportRow]) -> Result<f64> {
    let aps: Vec<f64> = rows.iter().filter_map(|r| r.ap).collect();
    if aps.is_empty() {
        return Err(Error::Empty("no category has ground truth to evaluate"));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

pub fn per_class_report(names: &[String], matches: &MatchResult) -> Result<PerClassReport> {
    if let Some(&c) = matches.categories.keys().find(|&&c| c >= names.len()) {
        return Err(Error::CategoryOutOfRange {
            index: c,
            count: names.len(),
        });
    }
    let rows = names
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let m = matches.category(c);
            let ap = if m.num_gt == 0 {
                None
            } else {
                Some(average_precision(&m.flags, m.num_gt)?)
            };
            Ok(ReportRow {
                category: name.clone(),
                ap,
                num_gt: m.num_gt,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let map = mean_ap(&rows)?;
    Ok(PerClassReport { rows, map })
}

/// Matches and reports in one call.
pub fn evaluate(detections: &[Detection], ground_truths: &[GroundTruth], names: &[String], iou_threshold: f64) -> Result<PerClassReport> {
    per_class_report(names, &match_detections(detections, ground_truths, iou_threshold))
}

/// `category ap num_gt` header, one row per category (`-` for categories
/// without ground truth) and a closing `mAP` line.
pub fn format_report(report: &PerClassReport) -> String {
    let mut out = String::from("category ap num_gt\n");
    for r in &report.rows {
        match r.ap {
            Some(ap) => {
                let _ = writeln!(out, "{} {} {}", r.category, ap, r.num_gt);
            }
            None => {
                let _ = writeln!(out, "{} - {}", r.category, r.num_gt);
            }
        }
    }
    let _ = writeln!(out, "mAP {}", report.map);
    out
}

pub fn parse_report(text: &str) -> Result<PerClassReport> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, l)) if l.split_whitespace().collect::<Vec<_>>() == ["category", "ap", "num_gt"] => {}
        Some((i, _)) => return Err(Error::parse(i + 1, "expected header `category ap num_gt`")),
        None => return Err(Error::parse(1, "empty report")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = |m: String| Error::parse(i + 1, m);
        match f.as_slice() {
            ["mAP", v] => {
                let map = v.parse::<f64>().map_err(|e| bad(format!("mAP: {e}")))?;
                return Ok(PerClassReport { rows, map });
            }
            [name, ap, n] => {
                let ap = match *ap {
                    "-" => None,
                    s => Some(s.parse::<f64>().map_err(|e| bad(format!("ap: {e}")))?),
                };
                let num_gt = n.parse::<usize>().map_err(|e| bad(format!("num_gt: {e}")))?;
                rows.push(ReportRow {
                    category: name.to_string(),
                    ap,
                    num_gt,
                });
            }
            _ => return Err(bad(format!("malformed report line {line:?}"))),
        }
    }
    Err(Error::parse(text.lines().count() + 1, "missing `mAP` line"))
}

/// Number of categories each named report wins with a strictly highest AP.
/// Ties and categories without ground truth award nobody.
pub fn categories_won(reports: &[(String, PerClassReport)]) -> Result<Vec<(String, usize)>> {
    let mut counts: Vec<(String, usize)> = reports.iter().map(|(n, _)| (n.clone(), 0)).collect();
    let Some((_, first)) = reports.first() else {
        return Ok(counts);
    };
    let names: Vec<&str> = first.rows.iter().map(|r| r.category.as_str()).collect();
    for (name, r) in reports {
        let other: Vec<&str> = r.rows.iter().map(|r| r.category.as_str()).collect();
        if other != names {
            return Err(Error::Invalid(format!(
                "report {name:?} covers a different category set"
            )));
        }
    }
    for c in 0..names.len() {
        let mut best: Option<(usize, f64)> = None;
        let mut tied = false;
        for (i, (_, r)) in reports.iter().enumerate() {
            let Some(ap) = r.rows[c].ap else { continue };
            match best {
                Some((_, b)) if ap == b => tied = true,
                Some((_, b)) if ap < b => {}
                _ => {
                    best = Some((i, ap));
                    tied = false;
                }
            }
        }
        if let (Some((i, _)), false) = (best, tied) {
            counts[i].1 += 1;
        }
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn det(img: &str, bbox: BBox, score: f64) -> Detection {
        Detection { image_id: img.into(), bbox, category_id: 0, score }
    }

    fn gt(img: &str, bbox: BBox) -> GroundTruth {
        GroundTruth { image_id: img.into(), bbox, category_id: 0 }
    }

    #[test]
    fn matching_examples() {
        let g = vec![gt("a", b(0.0, 0.0, 10.0, 10.0))];
        let m = match_detections(&[det("a", b(0.0, 0.0, 10.0, 10.0), 1.0)], &g, 0.5);
        assert_eq!(m.detection_flags, vec![true]);

        let dets = vec![det("a", b(0.0, 0.0, 10.0, 10.0), 0.4), det("a", b(0.0, 0.0, 10.0, 10.0), 0.9)];
        let m = match_detections(&dets, &g, 0.5);
        assert_eq!(m.detection_flags, vec![false, true]);
        assert_eq!(m.category(0).flags, vec![true, false]);

        // IoU = 40 / 100
        let m = match_detections(&[det("a", b(0.0, 0.0, 4.0, 10.0), 1.0)], &g, 0.5);
        assert_eq!(m.detection_flags, vec![false]);

        // wrong image never matches
        let m = match_detections(&[det("b", b(0.0, 0.0, 10.0, 10.0), 1.0)], &g, 0.5);
        assert_eq!(m.category(0).num_gt, 1);
        assert_eq!(m.detection_flags, vec![false]);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true, true], 2).unwrap(), 1.0);
        assert_eq!(average_precision(&[false, false], 2).unwrap(), 0.0);
        assert_eq!(average_precision(&[], 3).unwrap(), 0.0);
        assert_eq!(average_precision(&[true, false, true], 2).unwrap(), 5.0 / 6.0);
        assert!(average_precision(&[true], 0).is_err());
    }

    #[test]
    fn map_examples() {
        let row = |ap: Option<f64>| ReportRow { category: "x".into(), ap, num_gt: 1 };
        assert_eq!(mean_ap(&[row(Some(0.5))]).unwrap(), 0.5);
        assert_eq!(mean_ap(&[row(Some(1.0)), row(Some(0.0)), row(None)]).unwrap(), 0.5);
        assert!(mean_ap(&[row(None)]).is_err());
    }

    #[test]
    fn report_round_trip() {
        let names: Vec<String> = vec!["disk".into(), "square".into(), "cross".into()];
        let g = vec![
            gt("a", b(0.0, 0.0, 10.0, 10.0)),
            GroundTruth { category_id: 1, ..gt("a", b(20.0, 20.0, 30.0, 30.0)) },
        ];
        let dets = vec![
            det("a", b(0.0, 0.0, 10.0, 10.0), 0.9),
            det("a", b(50.0, 50.0, 60.0, 60.0), 0.95),
            Detection { category_id: 1, ..det("a", b(21.0, 20.0, 30.0, 30.0), 0.3) },
        ];
        let report = evaluate(&dets, &g, &names, 0.5).unwrap();
        assert_eq!(report.rows[0].ap, Some(0.5));
        assert_eq!(report.rows[1].ap, Some(1.0));
        assert_eq!(report.rows[2].ap, None);
        assert_eq!(report.map, 0.75);
        let text = format_report(&report);
        assert!(text.starts_with("category ap num_gt\n"));
        assert!(text.ends_with("mAP 0.75\n"));
        assert_eq!(parse_report(&text).unwrap(), report);
        assert!(parse_report("category ap num_gt\ndisk 1 2\n").is_err());
    }

    fn report(aps: &[f64]) -> PerClassReport {
        PerClassReport {
            rows: aps
                .iter()
                .enumerate()
                .map(|(i, &ap)| ReportRow { category: format!("c{i}"), ap: Some(ap), num_gt: 1 })
                .collect(),
            map: aps.iter().sum::<f64>() / aps.len() as f64,
        }
    }

    #[test]
    fn categories_won_examples() {
        let a = report(&[0.9, 0.5, 0.3]);
        let bb = report(&[0.8, 0.5, 0.3]);
        let won = categories_won(&[("A".into(), a.clone()), ("B".into(), bb)]).unwrap();
        assert_eq!(won, vec![("A".into(), 1), ("B".into(), 0)]);
        let won = categories_won(&[("A".into(), a.clone()), ("B".into(), a.clone())]).unwrap();
        assert_eq!(won, vec![("A".into(), 0), ("B".into(), 0)]);
        let short = report(&[0.1]);
        assert!(categories_won(&[("A".into(), a), ("B".into(), short)]).is_err());
        // a tie at the top is not broken by a lower third report
        let won = categories_won(&[
            ("A".into(), report(&[0.7])),
            ("B".into(), report(&[0.7])),
            ("C".into(), report(&[0.2])),
        ])
        .unwrap();
        assert!(won.iter().all(|(_, n)| *n == 0));
    }
}
