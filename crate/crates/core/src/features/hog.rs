//! Root-filter HOG templates.
//!
//! Each cell carries 9 unsigned orientation bins normalized against each of
//! the four 2x2 blocks that contain it, giving 36 values per cell.

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::{Image, Plane};

pub const CELL_SIZE: usize = 8;
pub const ORIENTATIONS: usize = 9;
pub const CLAMP: f64 = 0.2;
const EPS: f64 = 1e-6;

/// Descriptor length for a `cells_x x cells_y` template.
pub fn hog_len(cells_x: usize, cells_y: usize) -> usize {
    cells_x * cells_y * ORIENTATIONS * 4
}

/// Per-cell orientation histograms, `cells_y` rows of `cells_x` cells.
pub fn cell_histograms(plane: &Plane, cells_x: usize, cells_y: usize) -> Vec<[f64; ORIENTATIONS]> {
    let (w, h) = (plane.width, plane.height);
    let (dx, dy) = plane.gradients();
    let mut cells = vec![[0.0; ORIENTATIONS]; cells_x * cells_y];
    let bin_width = std::f64::consts::PI / ORIENTATIONS as f64;

    for y in 0..h {
        for x in 0..w {
            let (gx, gy) = (dx[y * w + x], dy[y * w + x]);
            let mag = gx.hypot(gy);
            if mag == 0.0 {
                continue;
            }
            // Bins are centered on multiples of 20 degrees.
            let pos = gy.atan2(gx).rem_euclid(std::f64::consts::PI) / bin_width;
            let b0 = pos.floor() as usize % ORIENTATIONS;
            let b1 = (b0 + 1) % ORIENTATIONS;
            let fb = pos - pos.floor();

            // Spatial bilinear split between the four nearest cell centers.
            let cxf = (x as f64 + 0.5) / CELL_SIZE as f64 - 0.5;
            let cyf = (y as f64 + 0.5) / CELL_SIZE as f64 - 0.5;
            let cx0 = cxf.floor();
            let cy0 = cyf.floor();
            let fx = cxf - cx0;
            let fy = cyf - cy0;
            for (ox, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                for (oy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
                    let cx = cx0 as isize + ox;
                    let cy = cy0 as isize + oy;
                    if cx < 0 || cy < 0 || cx >= cells_x as isize || cy >= cells_y as isize {
                        continue;
                    }
                    let cell = &mut cells[cy as usize * cells_x + cx as usize];
                    let v = mag * wx * wy;
                    cell[b0] += v * (1.0 - fb);
                    cell[b1] += v * fb;
                }
            }
        }
    }
    cells
}

/// HOG descriptor of `window`, resampled to `cells_x * 8` by `cells_y * 8` gray pixels.
pub fn hog(img: &Image, window: &BBox, cells_x: usize, cells_y: usize) -> Result<Vec<f64>> {
    if cells_x == 0 || cells_y == 0 {
        return Err(Error::Invalid("HOG needs at least one cell per axis".into()));
    }
    let inside = window.intersection_area(&img.full_box()?);
    if inside <= 0.0 {
        return Err(Error::Invalid(format!(
            "degenerate HOG window {:?} for {}x{} image",
            window.to_array(),
            img.width(),
            img.height()
        )));
    }
    let plane = img
        .to_gray()
        .resample(window, cells_x * CELL_SIZE, cells_y * CELL_SIZE);
    Ok(hog_plane(&plane, cells_x, cells_y))
}

/// HOG of a plane whose size is already `cells * 8` per axis.
pub fn hog_plane(plane: &Plane, cells_x: usize, cells_y: usize) -> Vec<f64> {
    let cells = cell_histograms(plane, cells_x, cells_y);
    let block_start = |i: usize, n: usize| -> [usize; 2] {
        if n < 2 {
            [0, 0]
        } else {
            [i.saturating_sub(1).min(n - 2), i.min(n - 2)]
        }
    };

    let mut out = Vec::with_capacity(hog_len(cells_x, cells_y));
    for cy in 0..cells_y {
        for cx in 0..cells_x {
            for by in block_start(cy, cells_y) {
                for bx in block_start(cx, cells_x) {
                    // 2x2 block anchored at (bx, by), truncated at 1-cell grids.
                    let mut block = Vec::with_capacity(4 * ORIENTATIONS);
                    let mut own = 0;
                    for yy in by..(by + 2).min(cells_y) {
                        for xx in bx..(bx + 2).min(cells_x) {
                            if (xx, yy) == (cx, cy) {
                                own = block.len();
                            }
                            block.extend_from_slice(&cells[yy * cells_x + xx]);
                        }
                    }
                    let norm = (block.iter().map(|v| v * v).sum::<f64>() + EPS * EPS).sqrt();
                    block.iter_mut().for_each(|v| *v = (*v / norm).min(CLAMP));
                    let norm = (block.iter().map(|v| v * v).sum::<f64>() + EPS * EPS).sqrt();
                    out.extend(block[own..own + ORIENTATIONS].iter().map(|v| v / norm));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(w: u32, h: u32, f: impl Fn(u32, u32) -> u8) -> Image {
        let mut px = Vec::new();
        for y in 0..h {
            for x in 0..w {
                px.push(f(x, y));
            }
        }
        Image::new(w, h, 1, px).unwrap()
    }

    #[test]
    fn length_formula() {
        let img = gray(40, 40, |x, y| ((x * 7 + y * 3) % 256) as u8);
        let d = hog(&img, &BBox::new(2.0, 3.0, 30.0, 37.0).unwrap(), 4, 3).unwrap();
        assert_eq!(d.len(), 4 * 3 * 36);
        assert_eq!(hog_len(4, 3), 432);
    }

    #[test]
    fn uniform_window_is_zero() {
        let img = gray(32, 32, |_, _| 128);
        let d = hog(&img, &img.full_box().unwrap(), 4, 4).unwrap();
        assert!(d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vertical_edge_votes_horizontal_gradient_bin() {
        let img = gray(32, 32, |x, _| if x < 16 { 20 } else { 220 });
        let plane = img.to_gray();
        let cells = cell_histograms(&plane, 4, 4);
        let mut totals = [0.0; ORIENTATIONS];
        for c in &cells {
            for (t, v) in totals.iter_mut().zip(c) {
                *t += v;
            }
        }
        // Gradient (dx > 0, dy = 0) has orientation 0, which is bin 0's center.
        assert!(totals[0] > 0.0);
        assert!(totals[1..].iter().all(|&v| v == 0.0));

        let d = hog(&img, &img.full_box().unwrap(), 4, 4).unwrap();
        for chunk in d.chunks(ORIENTATIONS) {
            let max = chunk.iter().cloned().fold(0.0, f64::max);
            if max > 0.0 {
                assert_eq!(chunk[0], max);
            }
        }
    }

    #[test]
    fn entries_bounded_and_finite() {
        let img = gray(50, 45, |x, y| ((x * x + 3 * y * y + x * y) % 251) as u8);
        let d = hog(&img, &BBox::new(-4.0, 1.0, 47.5, 44.0).unwrap(), 5, 5).unwrap();
        assert!(d.iter().all(|v| v.is_finite() && *v >= 0.0 && *v <= 1.0 + 1e-12));
    }

    #[test]
    fn offset_invariance() {
        let base = |x: u32, y: u32| ((x * 5 + y * 9) % 120) as u8;
        let a = gray(40, 40, base);
        let b = gray(40, 40, |x, y| base(x, y) + 60);
        let w = BBox::new(3.0, 4.0, 35.0, 38.0).unwrap();
        let da = hog(&a, &w, 4, 4).unwrap();
        let db = hog(&b, &w, 4, 4).unwrap();
        for (x, y) in da.iter().zip(&db) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_window_rejected() {
        let img = gray(10, 10, |_, _| 0);
        assert!(hog(&img, &BBox::new(20.0, 20.0, 30.0, 30.0).unwrap(), 2, 2).is_err());
        assert!(hog(&img, &img.full_box().unwrap(), 0, 2).is_err());
    }
}
