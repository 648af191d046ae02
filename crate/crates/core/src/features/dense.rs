//! Dense gradient-patch local descriptors for the Fisher vector channel.

use crate::geometry::BBox;
use crate::image::{Image, Plane};

/// Raw descriptor length for a square patch.
pub fn raw_dim(patch: usize) -> usize {
    2 * patch * patch
}

/// Number of patches a `w x h` window yields.
pub fn grid_count(w: usize, h: usize, stride: usize, patch: usize) -> usize {
    if w < patch || h < patch || stride == 0 {
        return 0;
    }
    ((w - patch) / stride + 1) * ((h - patch) / stride + 1)
}

fn contrast_normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 1e-9 {
        v.iter_mut().for_each(|x| *x /= norm);
    } else {
        v.iter_mut().for_each(|x| *x = 0.0);
    }
}

/// Descriptors over a whole plane: `(dx, dy)` of every patch pixel,
/// L2-normalized, in raster order of patch positions.
pub fn dense_descriptors_plane(plane: &Plane, stride: usize, patch: usize) -> Vec<Vec<f64>> {
    let (dx, dy) = plane.gradients();
    patch_grid(&dx, &dy, plane.width, 0, 0, plane.width, plane.height, stride, patch)
}

#[allow(clippy::too_many_arguments)]
fn patch_grid(
    dx: &[f64],
    dy: &[f64],
    row_len: usize,
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    stride: usize,
    patch: usize,
) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(grid_count(w, h, stride, patch));
    if grid_count(w, h, stride, patch) == 0 {
        return out;
    }
    let mut py = 0;
    while py + patch <= h {
        let mut px = 0;
        while px + patch <= w {
            let mut d = Vec::with_capacity(raw_dim(patch));
            for y in 0..patch {
                for x in 0..patch {
                    let i = (y0 + py + y) * row_len + x0 + px + x;
                    d.push(dx[i]);
                    d.push(dy[i]);
                }
            }
            contrast_normalize(&mut d);
            out.push(d);
            px += stride;
        }
        py += stride;
    }
    out
}

/// Descriptors on the integer pixel grid of `window`, clipped to the image.
/// Returns an empty list when the clipped window is smaller than `patch`.
pub fn dense_descriptors(img: &Image, window: &BBox, stride: usize, patch: usize) -> Vec<Vec<f64>> {
    let x0 = window.x_min().round().max(0.0) as usize;
    let y0 = window.y_min().round().max(0.0) as usize;
    let x1 = (window.x_max().round().max(0.0) as usize).min(img.width() as usize);
    let y1 = (window.y_max().round().max(0.0) as usize).min(img.height() as usize);
    if x1 <= x0 || y1 <= y0 {
        return Vec::new();
    }
    let plane = img.to_gray();
    let (dx, dy) = plane.gradients();
    patch_grid(&dx, &dy, plane.width, x0, y0, x1 - x0, y1 - y0, stride, patch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(w: u32, h: u32) -> Image {
        Image::from_rgb_fn(w, h, |x, y| {
            let v = ((x * 37 + y * 91 + x * y) % 256) as u8;
            [v, v / 2, 255 - v]
        })
    }

    #[test]
    fn grid_counts() {
        let img = textured(64, 64);
        let d = dense_descriptors(&img, &BBox::new(0., 0., 32., 32.).unwrap(), 16, 16);
        assert_eq!(d.len(), 4);
        let d = dense_descriptors(&img, &BBox::new(5., 5., 53., 53.).unwrap(), 8, 16);
        // floor((48 - 16) / 8 + 1)^2
        assert_eq!(grid_count(48, 48, 8, 16), 25);
        assert_eq!(d.len(), 25);
        assert!(d.iter().all(|v| v.len() == raw_dim(16)));
    }

    #[test]
    fn uniform_window_gives_zero_descriptors() {
        let img = Image::filled(40, 40, 3, 90).unwrap();
        let d = dense_descriptors(&img, &img.full_box().unwrap(), 8, 16);
        assert!(!d.is_empty());
        assert!(d.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn small_window_is_empty() {
        let img = textured(64, 64);
        assert!(dense_descriptors(&img, &BBox::new(0., 0., 10., 40.).unwrap(), 4, 16).is_empty());
        assert!(dense_descriptors(&img, &BBox::new(60., 60., 90., 90.).unwrap(), 4, 16).is_empty());
    }

    #[test]
    fn descriptors_are_unit_or_zero() {
        let img = textured(40, 40);
        for d in dense_descriptors(&img, &img.full_box().unwrap(), 6, 8) {
            let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9 || n == 0.0);
        }
    }
}
