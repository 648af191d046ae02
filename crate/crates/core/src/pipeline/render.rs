use crate::geometry::{BBox, Detection, GroundTruth};
use crate::image::Image;

const PALETTE: [[u8; 3]; 6] = [
    [255, 64, 64],
    [64, 255, 64],
    [64, 128, 255],
    [255, 224, 32],
    [255, 64, 255],
    [32, 224, 224],
];

fn outline(img: &mut Image, b: &BBox, color: [u8; 3], thickness: u32) {
    let (w, h) = (img.width(), img.height());
    if w == 0 || h == 0 {
        return;
    }
    let clamp = |v: f64, hi: u32| (v.max(0.0) as u32).min(hi - 1);
    let x0 = clamp(b.x_min(), w);
    let y0 = clamp(b.y_min(), h);
    let x1 = clamp(b.x_max() - 1.0, w);
    let y1 = clamp(b.y_max() - 1.0, h);
    let mut paint = |x: u32, y: u32| {
        if img.channels() == 3 {
            for (c, v) in color.iter().enumerate() {
                img.set(x, y, c as u8, *v);
            }
        } else {
            img.set(x, y, 0, 255);
        }
    };
    for t in 0..thickness {
        for x in x0..=x1 {
            paint(x, (y0 + t).min(y1));
            paint(x, y1.saturating_sub(t).max(y0));
        }
        for y in y0..=y1 {
            paint((x0 + t).min(x1), y);
            paint(x1.saturating_sub(t).max(x0), y);
        }
    }
}

/// Copy of `img` with ground truths outlined in white (one pixel) and
/// detections in their category color (two pixels).
pub fn render_detections(img: &Image, gts: &[GroundTruth], dets: &[&Detection]) -> Image {
    let mut out = img.clone();
    for g in gts {
        outline(&mut out, &g.bbox, [255, 255, 255], 1);
    }
    for d in dets {
        outline(&mut out, &d.bbox, PALETTE[d.category_id % PALETTE.len()], 2);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outlines_only_the_border() {
        let img = Image::filled(20, 20, 3, 0).unwrap();
        let det = Detection {
            image_id: "a".into(),
            bbox: BBox::new(2.0, 2.0, 12.0, 12.0).unwrap(),
            category_id: 0,
            score: 1.0,
        };
        let out = render_detections(&img, &[], &[&det]);
        assert_eq!(out.get(2, 5, 0), 255);
        assert_eq!(out.get(11, 5, 0), 255);
        assert_eq!(out.get(6, 6, 0), 0);
        assert_eq!(out.get(15, 15, 0), 0);
    }
}
