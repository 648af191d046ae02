//! Region descriptors and hierarchical grouping.

use std::collections::{BTreeSet, HashSet};

use crate::geometry::BBox;
use crate::image::Image;

use super::segment::SegmentationMap;

pub const COLOR_BINS: usize = 25;
pub const TEXTURE_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub id: usize,
    pub pixel_count: usize,
    pub bbox: BBox,
    /// `COLOR_BINS` per channel, L1-normalized over all channels.
    pub color_hist: Vec<f64>,
    /// `TEXTURE_BINS` unsigned orientation bins per channel, L1-normalized.
    pub texture_hist: Vec<f64>,
}

impl Region {
    /// Region formed by merging `a` and `b`; histograms are size-weighted means.
    pub fn merge(id: usize, a: &Region, b: &Region) -> Region {
        let total = a.pixel_count + b.pixel_count;
        let (wa, wb) = (
            a.pixel_count as f64 / total as f64,
            b.pixel_count as f64 / total as f64,
        );
        let mix = |ha: &[f64], hb: &[f64]| ha.iter().zip(hb).map(|(x, y)| wa * x + wb * y).collect();
        Region {
            id,
            pixel_count: total,
            bbox: a.bbox.union(&b.bbox),
            color_hist: mix(&a.color_hist, &b.color_hist),
            texture_hist: mix(&a.texture_hist, &b.texture_hist),
        }
    }
}

fn normalize_or_uniform(hist: &mut [f64]) {
    let sum: f64 = hist.iter().sum();
    if sum > 0.0 {
        hist.iter_mut().for_each(|v| *v /= sum);
    } else {
        let u = 1.0 / hist.len() as f64;
        hist.iter_mut().for_each(|v| *v = u);
    }
}

/// One [`Region`] per segmentation label with exact counts and tight boxes.
pub fn region_descriptors(img: &Image, seg: &SegmentationMap) -> Vec<Region> {
    let n = seg.num_regions;
    let channels = img.channels() as usize;
    let (w, h) = (img.width() as usize, img.height() as usize);

    let mut counts = vec![0usize; n];
    let mut extents = vec![[usize::MAX, usize::MAX, 0usize, 0usize]; n];
    let mut color = vec![vec![0.0; COLOR_BINS * channels]; n];
    let mut texture = vec![vec![0.0; TEXTURE_BINS * channels]; n];

    let planes = img.to_planes();
    let grads: Vec<_> = planes.iter().map(|p| p.gradients()).collect();

    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let r = seg.labels[p] as usize;
            counts[r] += 1;
            let e = &mut extents[r];
            e[0] = e[0].min(x);
            e[1] = e[1].min(y);
            e[2] = e[2].max(x);
            e[3] = e[3].max(y);
            for c in 0..channels {
                let v = img.get(x as u32, y as u32, c as u8) as usize;
                color[r][c * COLOR_BINS + v * COLOR_BINS / 256] += 1.0;

                let (dx, dy) = (grads[c].0[p], grads[c].1[p]);
                let mag = dx.hypot(dy);
                if mag > 0.0 {
                    let theta = dy.atan2(dx).rem_euclid(std::f64::consts::PI);
                    let bin = ((theta / std::f64::consts::PI * TEXTURE_BINS as f64) as usize)
                        .min(TEXTURE_BINS - 1);
                    texture[r][c * TEXTURE_BINS + bin] += mag;
                }
            }
        }
    }

    (0..n)
        .map(|r| {
            normalize_or_uniform(&mut color[r]);
            normalize_or_uniform(&mut texture[r]);
            let e = extents[r];
            Region {
                id: r,
                pixel_count: counts[r],
                bbox: BBox::new(e[0] as f64, e[1] as f64, (e[2] + 1) as f64, (e[3] + 1) as f64)
                    .expect("non-empty region has a positive extent"),
                color_hist: std::mem::take(&mut color[r]),
                texture_hist: std::mem::take(&mut texture[r]),
            }
        })
        .collect()
}

fn intersection(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.min(*y)).sum()
}

/// Sum of color, texture, size and fill similarities, each in `[0, 1]`.
pub fn similarity(a: &Region, b: &Region, image_area: f64) -> f64 {
    let s_color = intersection(&a.color_hist, &b.color_hist).clamp(0.0, 1.0);
    let s_texture = intersection(&a.texture_hist, &b.texture_hist).clamp(0.0, 1.0);
    let sizes = (a.pixel_count + b.pixel_count) as f64;
    let s_size = (1.0 - sizes / image_area).clamp(0.0, 1.0);
    let s_fill = (1.0 - (a.bbox.union(&b.bbox).area() - sizes) / image_area).clamp(0.0, 1.0);
    s_color + s_texture + s_size + s_fill
}

/// 8-connected adjacency between segmentation labels, as sorted pairs `(a, b)`, `a < b`.
pub fn region_adjacency(seg: &SegmentationMap) -> BTreeSet<(usize, usize)> {
    let (w, h) = (seg.width as usize, seg.height as usize);
    let mut pairs = BTreeSet::new();
    for y in 0..h {
        for x in 0..w {
            let a = seg.labels[y * w + x] as usize;
            let mut check = |q: usize| {
                let b = seg.labels[q] as usize;
                if a != b {
                    pairs.insert((a.min(b), a.max(b)));
                }
            };
            if x + 1 < w {
                check(y * w + x + 1);
            }
            if y + 1 < h {
                check((y + 1) * w + x);
                if x + 1 < w {
                    check((y + 1) * w + x + 1);
                }
                if x > 0 {
                    check((y + 1) * w + x - 1);
                }
            }
        }
    }
    pairs
}

/// Full merge history: every region ever formed, indexed by creation order,
/// and the `(a, b)` child pair of each merge.
#[derive(Debug, Clone)]
pub struct Hierarchy {
    pub regions: Vec<Region>,
    pub merges: Vec<(usize, usize)>,
}

/// Greedily merges the most similar adjacent pair until no pairs remain.
/// Ties go to the lexicographically smallest `(a, b)`.
pub fn hierarchical_grouping(
    initial: Vec<Region>,
    adjacency: &BTreeSet<(usize, usize)>,
    image_area: f64,
) -> Hierarchy {
    let mut regions = initial;
    let mut neighbors: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); regions.len()];
    for &(a, b) in adjacency {
        neighbors[a].insert(b);
        neighbors[b].insert(a);
    }
    let mut alive = vec![true; regions.len()];
    let mut pairs: Vec<(usize, usize, f64)> = adjacency
        .iter()
        .map(|&(a, b)| (a, b, similarity(&regions[a], &regions[b], image_area)))
        .collect();
    let mut merges = Vec::new();

    while !pairs.is_empty() {
        let mut best = 0;
        for i in 1..pairs.len() {
            let (a, b, s) = pairs[i];
            let (ba, bb, bs) = pairs[best];
            if s > bs || (s == bs && (a, b) < (ba, bb)) {
                best = i;
            }
        }
        let (a, b, _) = pairs[best];
        let id = regions.len();
        let merged = Region::merge(id, &regions[a], &regions[b]);
        regions.push(merged);
        alive.push(true);
        alive[a] = false;
        alive[b] = false;
        merges.push((a, b));

        let mut joined: BTreeSet<usize> = neighbors[a].union(&neighbors[b]).copied().collect();
        joined.remove(&a);
        joined.remove(&b);
        for &n in &joined {
            neighbors[n].remove(&a);
            neighbors[n].remove(&b);
            neighbors[n].insert(id);
        }
        pairs.retain(|&(p, q, _)| p != a && p != b && q != a && q != b);
        for &n in &joined {
            debug_assert!(alive[n]);
            pairs.push((n, id, similarity(&regions[n], &regions[id], image_area)));
        }
        neighbors.push(joined);
    }
    Hierarchy { regions, merges }
}

/// Boxes of every region in the hierarchy, newest first, exact duplicates removed.
pub fn hierarchy_boxes(hierarchy: &Hierarchy) -> Vec<BBox> {
    let mut seen = HashSet::new();
    hierarchy
        .regions
        .iter()
        .rev()
        .filter(|r| seen.insert(r.bbox.to_array().map(f64::to_bits)))
        .map(|r| r.bbox)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proposals::segment::segment_graph;

    fn half_split() -> Image {
        Image::from_rgb_fn(64, 64, |x, _| if x < 32 { [0, 0, 0] } else { [255, 255, 255] })
    }

    #[test]
    fn single_region_descriptor() {
        let img = Image::filled(12, 9, 3, 0).unwrap();
        let seg = segment_graph(&img, 300.0, 1, 0.8).unwrap();
        let regions = region_descriptors(&img, &seg);
        assert_eq!(regions.len(), 1);
        let r = &regions[0];
        assert_eq!(r.pixel_count, 108);
        assert_eq!(r.bbox, BBox::new(0.0, 0.0, 12.0, 9.0).unwrap());
        // all black: each channel's mass sits in its bin 0
        for c in 0..3 {
            assert!((r.color_hist[c * COLOR_BINS] - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!((r.color_hist.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((r.texture_hist.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn half_split_counts() {
        let img = half_split();
        let seg = segment_graph(&img, 1.0, 1, 0.0).unwrap();
        let regions = region_descriptors(&img, &seg);
        assert_eq!(regions.len(), 2);
        for r in &regions {
            assert_eq!(r.pixel_count, 64 * 64 / 2);
        }
        assert_eq!(regions[0].bbox, BBox::new(0.0, 0.0, 32.0, 64.0).unwrap());
        assert_eq!(regions[1].bbox, BBox::new(32.0, 0.0, 64.0, 64.0).unwrap());
    }

    fn fixture_region(id: usize, count: usize, bbox: [f64; 4], color: Vec<f64>, texture: Vec<f64>) -> Region {
        Region {
            id,
            pixel_count: count,
            bbox: BBox::new(bbox[0], bbox[1], bbox[2], bbox[3]).unwrap(),
            color_hist: color,
            texture_hist: texture,
        }
    }

    #[test]
    fn similarity_fixture_matches_scalar_terms() {
        // Two histograms over 4 bins each.
        let a = fixture_region(0, 30, [0., 0., 6., 5.], vec![0.5, 0.5, 0.0, 0.0], vec![0.25; 4]);
        let b = fixture_region(1, 20, [6., 0., 10., 5.], vec![0.1, 0.2, 0.3, 0.4], vec![0.7, 0.1, 0.1, 0.1]);
        let area = 100.0;
        let s_color = 0.1 + 0.2 + 0.0 + 0.0;
        let s_texture = 0.25 + 0.1 + 0.1 + 0.1;
        let s_size = 1.0 - 50.0 / 100.0;
        let s_fill = 1.0 - (50.0 - 30.0 - 20.0) / 100.0;
        let expected = s_color + s_texture + s_size + s_fill;
        assert!((similarity(&a, &b, area) - expected).abs() < 1e-12);
        assert_eq!(similarity(&a, &b, area), similarity(&b, &a, area));
    }

    #[test]
    fn identical_and_covering_regions() {
        let a = fixture_region(0, 50, [0., 0., 10., 5.], vec![0.3, 0.7], vec![0.4, 0.6]);
        let b = fixture_region(1, 50, [0., 5., 10., 10.], vec![0.3, 0.7], vec![0.4, 0.6]);
        // identical histograms, jointly covering the image
        let s = similarity(&a, &b, 100.0);
        assert!((s - (1.0 + 1.0 + 0.0 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn merged_region_statistics() {
        let img = Image::from_rgb_fn(30, 20, |x, y| {
            if x < 10 {
                [200, 10, 10]
            } else if y < 10 {
                [10, 200, 10]
            } else {
                [10, 10, 200]
            }
        });
        let seg = segment_graph(&img, 1.0, 1, 0.0).unwrap();
        let regions = region_descriptors(&img, &seg);
        let m = Region::merge(99, &regions[0], &regions[1]);
        assert_eq!(m.pixel_count, regions[0].pixel_count + regions[1].pixel_count);
        let (na, nb) = (regions[0].pixel_count as f64, regions[1].pixel_count as f64);
        for i in 0..m.color_hist.len() {
            let expect = (na * regions[0].color_hist[i] + nb * regions[1].color_hist[i]) / (na + nb);
            assert!((m.color_hist[i] - expect).abs() < 1e-9);
        }
        assert!((m.color_hist.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn three_regions_merge_twice() {
        let img = Image::from_rgb_fn(30, 20, |x, y| {
            if x < 10 {
                [200, 10, 10]
            } else if y < 10 {
                [10, 200, 10]
            } else {
                [10, 10, 200]
            }
        });
        let seg = segment_graph(&img, 1.0, 1, 0.0).unwrap();
        assert_eq!(seg.num_regions, 3);
        let regions = region_descriptors(&img, &seg);
        let adjacency = region_adjacency(&seg);
        let h = hierarchical_grouping(regions, &adjacency, 600.0);
        assert_eq!(h.merges.len(), 2);
        assert_eq!(h.regions.len(), 5);
        let boxes = hierarchy_boxes(&h);
        assert!(boxes.len() <= 5 && !boxes.is_empty());
        assert_eq!(boxes[0], BBox::new(0., 0., 30., 20.).unwrap());
        assert_eq!(h.regions.last().unwrap().pixel_count, 600);
    }
}
