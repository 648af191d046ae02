//! Boxes, detection records, overlap and greedy non-maximum suppression.

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Axis-aligned box with continuous corners, origin at the top-left of the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let finite = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite());
        // Negated form so NaN corners fail too.
        if !(finite && x_min < x_max && y_min < y_max) {
            return Err(Error::InvalidBox {
                x_min,
                y_min,
                x_max,
                y_max,
            });
        }
        Ok(BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Builds a box from center and size.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    /// Smallest box containing both.
    pub fn union(&self, other: &BBox) -> BBox {
        BBox {
            x_min: self.x_min.min(other.x_min),
            y_min: self.y_min.min(other.y_min),
            x_max: self.x_max.max(other.x_max),
            y_max: self.y_max.max(other.y_max),
        }
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

/// Intersection over union. Boxes that only share an edge have IoU 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    if a == b {
        return 1.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Clamps a box into `[0, width] x [0, height]`, failing when nothing is left.
pub fn clip_box(b: &BBox, width: u32, height: u32) -> Result<BBox> {
    let (w, h) = (width as f64, height as f64);
    BBox::new(
        b.x_min.clamp(0.0, w),
        b.y_min.clamp(0.0, h),
        b.x_max.clamp(0.0, w),
        b.y_max.clamp(0.0, h),
    )
    .map_err(|_| Error::BoxOutsideImage { width, height })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: String,
    pub bbox: BBox,
    pub category_id: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub image_id: String,
    pub bbox: BBox,
    pub category_id: usize,
}

/// Total order used everywhere detections are ranked: score descending, then
/// `x_min`, `y_min`, `x_max`, `y_max` ascending.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.x_min.total_cmp(&b.bbox.x_min))
        .then(a.bbox.y_min.total_cmp(&b.bbox.y_min))
        .then(a.bbox.x_max.total_cmp(&b.bbox.x_max))
        .then(a.bbox.y_max.total_cmp(&b.bbox.y_max))
}

/// Greedy NMS over detections of a single image and category.
///
/// The highest ranked remaining detection is kept and everything overlapping
/// it by more than `iou_threshold` is discarded. Output is in ranking order.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut sorted: Vec<&Detection> = detections.iter().collect();
    sorted.sort_by(|a, b| detection_order(a, b));

    let mut suppressed = vec![false; sorted.len()];
    let mut kept = Vec::new();
    for i in 0..sorted.len() {
        if suppressed[i] {
            continue;
        }
        kept.push(sorted[i].clone());
        for j in (i + 1)..sorted.len() {
            if !suppressed[j] && iou(&sorted[i].bbox, &sorted[j].bbox) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    kept
}

/// Runs [`nms`] independently for every (image, category) group. Groups are
/// emitted in order of first appearance in `detections`.
pub fn nms_grouped(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut groups: Vec<((&str, usize), Vec<Detection>)> = Vec::new();
    let mut index = std::collections::HashMap::new();
    for d in detections {
        let key = (d.image_id.as_str(), d.category_id);
        let slot = *index.entry(key).or_insert_with(|| {
            groups.push((key, Vec::new()));
            groups.len() - 1
        });
        groups[slot].1.push(d.clone());
    }
    groups
        .into_iter()
        .flat_map(|(_, group)| nms(&group, iou_threshold))
        .collect()
}

/// Serializes detections in the dump format, one per line:
/// `image_id category_id score x_min y_min x_max y_max`.
pub fn format_detections(detections: &[Detection]) -> String {
    let mut out = String::new();
    for d in detections {
        let _ = writeln!(
            out,
            "{} {} {:.6} {:.6} {:.6} {:.6} {:.6}",
            d.image_id,
            d.category_id,
            d.score,
            d.bbox.x_min,
            d.bbox.y_min,
            d.bbox.x_max,
            d.bbox.y_max
        );
    }
    out
}

pub fn parse_detections(text: &str) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(Error::parse(
                line_no,
                format!("expected 7 fields, found {}", fields.len()),
            ));
        }
        let category_id = fields[1]
            .parse::<usize>()
            .map_err(|e| Error::parse(line_no, format!("category id: {e}")))?;
        let mut nums = [0.0f64; 5];
        for (slot, field) in nums.iter_mut().zip(&fields[2..]) {
            *slot = field
                .parse::<f64>()
                .map_err(|e| Error::parse(line_no, format!("{field:?}: {e}")))?;
        }
        let bbox = BBox::new(nums[1], nums[2], nums[3], nums[4])
            .map_err(|e| Error::parse(line_no, e.to_string()))?;
        out.push(Detection {
            image_id: fields[0].to_string(),
            bbox,
            category_id,
            score: nums[0],
        });
    }
    Ok(out)
}
