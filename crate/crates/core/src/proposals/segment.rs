//! Graph-based over-segmentation with the adaptive merge threshold of
//! Felzenszwalb and Huttenlocher.

use crate::error::{Error, Result};
use crate::image::Image;

/// Per-pixel partition labels, contiguous from 0 in raster order of first
/// appearance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMap {
    pub width: u32,
    pub height: u32,
    pub labels: Vec<u32>,
    pub num_regions: usize,
}

impl SegmentationMap {
    pub fn label(&self, x: u32, y: u32) -> u32 {
        self.labels[y as usize * self.width as usize + x as usize]
    }
}

struct DisjointSet {
    parent: Vec<usize>,
    size: Vec<usize>,
    threshold: Vec<f64>,
}

impl DisjointSet {
    fn new(n: usize, k: f64) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
            size: vec![1; n],
            threshold: vec![k; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Joins two roots, returning the surviving root.
    fn join(&mut self, a: usize, b: usize) -> usize {
        let (big, small) = if self.size[a] >= self.size[b] { (a, b) } else { (b, a) };
        self.parent[small] = big;
        self.size[big] += self.size[small];
        big
    }
}

struct Edge {
    a: u32,
    b: u32,
    weight: f64,
}

/// Over-segments `img` on an 8-connected pixel graph.
///
/// Edge weights are Euclidean color distances after Gaussian smoothing with
/// `sigma`. Components merge when the connecting edge is no heavier than
/// either side's internal maximum plus `k / size`. Components smaller than
/// `min_size` are then absorbed along their lightest boundary edge.
pub fn segment_graph(img: &Image, k: f64, min_size: usize, sigma: f64) -> Result<SegmentationMap> {
    if img.is_empty() {
        return Err(Error::InvalidImage("zero-dimension image".into()));
    }
    if !(k > 0.0) {
        return Err(Error::Invalid(format!("segmentation k must be positive, got {k}")));
    }
    if min_size == 0 {
        return Err(Error::Invalid("segmentation min_size must be at least 1".into()));
    }

    let (w, h) = (img.width() as usize, img.height() as usize);
    let planes: Vec<_> = img.to_planes().iter().map(|p| p.gaussian_blur(sigma)).collect();
    let dist = |p: usize, q: usize| -> f64 {
        planes
            .iter()
            .map(|pl| {
                let d = pl.data[p] - pl.data[q];
                d * d
            })
            .sum::<f64>()
            .sqrt()
    };

    let mut edges = Vec::with_capacity(w * h * 4);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let mut push = |q: usize| {
                edges.push(Edge {
                    a: p as u32,
                    b: q as u32,
                    weight: dist(p, q),
                })
            };
            if x + 1 < w {
                push(p + 1);
            }
            if y + 1 < h {
                push(p + w);
                if x + 1 < w {
                    push(p + w + 1);
                }
                if x > 0 {
                    push(p + w - 1);
                }
            }
        }
    }
    // Stable sort keeps generation order among equal weights.
    edges.sort_by(|e, f| e.weight.total_cmp(&f.weight));

    let mut sets = DisjointSet::new(w * h, k);
    for e in &edges {
        let ra = sets.find(e.a as usize);
        let rb = sets.find(e.b as usize);
        if ra != rb && e.weight <= sets.threshold[ra] && e.weight <= sets.threshold[rb] {
            let root = sets.join(ra, rb);
            sets.threshold[root] = e.weight + k / sets.size[root] as f64;
        }
    }
    for e in &edges {
        let ra = sets.find(e.a as usize);
        let rb = sets.find(e.b as usize);
        if ra != rb && (sets.size[ra] < min_size || sets.size[rb] < min_size) {
            sets.join(ra, rb);
        }
    }

    let mut relabel = vec![u32::MAX; w * h];
    let mut labels = Vec::with_capacity(w * h);
    let mut next = 0u32;
    for p in 0..w * h {
        let root = sets.find(p);
        if relabel[root] == u32::MAX {
            relabel[root] = next;
            next += 1;
        }
        labels.push(relabel[root]);
    }
    Ok(SegmentationMap {
        width: img.width(),
        height: img.height(),
        labels,
        num_regions: next as usize,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn half_split(w: u32, h: u32) -> Image {
        Image::from_rgb_fn(w, h, |x, _| if x < w / 2 { [0, 0, 0] } else { [255, 255, 255] })
    }

    /// Flood fill over equal colors with 8-connectivity.
    fn equal_color_components(img: &Image) -> usize {
        let (w, h) = (img.width() as i64, img.height() as i64);
        let mut seen = vec![false; (w * h) as usize];
        let px = |x: i64, y: i64| (0..img.channels()).map(|c| img.get(x as u32, y as u32, c)).collect::<Vec<_>>();
        let mut count = 0;
        for start in 0..(w * h) {
            if seen[start as usize] {
                continue;
            }
            count += 1;
            let color = px(start % w, start / w);
            let mut stack = vec![start];
            seen[start as usize] = true;
            while let Some(p) = stack.pop() {
                let (x, y) = (p % w, p / w);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (nx, ny) = (x + dx, y + dy);
                        if nx < 0 || ny < 0 || nx >= w || ny >= h {
                            continue;
                        }
                        let q = ny * w + nx;
                        if !seen[q as usize] && px(nx, ny) == color {
                            seen[q as usize] = true;
                            stack.push(q);
                        }
                    }
                }
            }
        }
        count
    }

    #[test]
    fn uniform_image_is_one_region() {
        let img = Image::filled(64, 64, 3, 128).unwrap();
        let seg = segment_graph(&img, 300.0, 50, 0.8).unwrap();
        assert_eq!(seg.num_regions, 1);
        assert!(seg.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn half_split_gives_two_halves() {
        let img = half_split(64, 64);
        assert_eq!(equal_color_components(&img), 2);
        let seg = segment_graph(&img, 1.0, 1, 0.0).unwrap();
        assert_eq!(seg.num_regions, 2);
        for y in 0..64 {
            for x in 0..64 {
                assert_eq!(seg.label(x, y), if x < 32 { 0 } else { 1 });
            }
        }
    }

    #[test]
    fn smoothed_half_split_merges_boundary_slivers() {
        let img = half_split(64, 64);
        let seg = segment_graph(&img, 1.0, 200, 0.8).unwrap();
        assert_eq!(seg.num_regions, 2);
    }

    #[test]
    fn min_size_of_whole_image_forces_one_region() {
        let img = Image::from_rgb_fn(20, 16, |x, y| [(x * 13 % 256) as u8, (y * 31 % 256) as u8, ((x * y) % 256) as u8]);
        let seg = segment_graph(&img, 5.0, 20 * 16, 0.8).unwrap();
        assert_eq!(seg.num_regions, 1);
    }

    #[test]
    fn labels_partition_and_are_deterministic() {
        let img = Image::from_rgb_fn(40, 30, |x, y| [((x / 7) * 60 % 256) as u8, ((y / 5) * 40 % 256) as u8, 90]);
        let a = segment_graph(&img, 50.0, 10, 0.5).unwrap();
        let b = segment_graph(&img, 50.0, 10, 0.5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.labels.len(), 40 * 30);
        let mut present = vec![false; a.num_regions];
        for &l in &a.labels {
            present[l as usize] = true;
        }
        assert!(present.iter().all(|&p| p));
    }

    #[test]
    fn errors() {
        let empty = Image::new(0, 5, 1, vec![]).unwrap();
        assert!(segment_graph(&empty, 1.0, 1, 0.8).is_err());
        let img = Image::filled(4, 4, 1, 0).unwrap();
        assert!(segment_graph(&img, 0.0, 1, 0.8).is_err());
        assert!(segment_graph(&img, 1.0, 0, 0.8).is_err());
    }
}
