//! Synthetic detection dataset: colored, textured shapes on cluttered
//! low-saturation backgrounds.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{BBox, GroundTruth};
use crate::image::{write_image, Image};
use crate::manifest::{format_manifest, DatasetManifest, ManifestEntry};

pub const CLASS_NAMES: [&str; 5] = ["disk", "square", "triangle", "diamond", "cross"];

const BASE_COLORS: [[f64; 3]; 5] = [
    [205.0, 55.0, 45.0],
    [45.0, 175.0, 65.0],
    [55.0, 85.0, 215.0],
    [225.0, 195.0, 35.0],
    [185.0, 55.0, 195.0],
];

pub const MIN_SHAPE: u32 = 18;
pub const MAX_SHAPE: u32 = 44;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub train_images: usize,
    pub test_images: usize,
    pub max_shapes: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Side of the square images.
    pub size: u32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 3,
            train_images: 200,
            test_images: 50,
            max_shapes: 3,
            noise: 6.0,
            size: 128,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.classes > CLASS_NAMES.len() {
            return Err(Error::Config(format!(
                "synthetic class count must be in 1..={}, got {}",
                CLASS_NAMES.len(),
                self.classes
            )));
        }
        if self.max_shapes == 0 {
            return Err(Error::Config("synthetic images need at least one shape".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be finite and non-negative, got {}", self.noise)));
        }
        if self.size < 2 * MAX_SHAPE {
            return Err(Error::Config(format!("image size must be at least {}", 2 * MAX_SHAPE)));
        }
        Ok(())
    }

    pub fn category_names(&self) -> Vec<String> {
        CLASS_NAMES[..self.classes].iter().map(|s| s.to_string()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }
}

fn inside(class: usize, u: f64, v: f64) -> bool {
    // u, v in [-1, 1] relative to the shape's square extent
    match class {
        0 => u * u + v * v <= 1.0,
        1 => u.abs() <= 0.9 && v.abs() <= 0.9,
        2 => v >= -1.0 && v <= 1.0 && u.abs() <= (v + 1.0) / 2.0,
        3 => u.abs() + v.abs() <= 1.0,
        _ => (u.abs() <= 0.34 && v.abs() <= 1.0) || (v.abs() <= 0.34 && u.abs() <= 1.0),
    }
}

fn texture(class: usize, x: f64, y: f64, u: f64, v: f64) -> f64 {
    match class {
        0 => -28.0 * (u * u + v * v),
        1 => if (y / 3.0).floor() as i64 % 2 == 0 { 18.0 } else { -18.0 },
        2 => if ((x / 3.0).floor() + (y / 3.0).floor()) as i64 % 2 == 0 { 16.0 } else { -16.0 },
        3 => if (x / 3.0).floor() as i64 % 2 == 0 { 16.0 } else { -16.0 },
        _ => if ((x + y) / 4.0).floor() as i64 % 2 == 0 { 16.0 } else { -16.0 },
    }
}

fn overlaps(a: &(u32, u32, u32), b: &(u32, u32, u32), margin: u32) -> bool {
    let (ax, ay, asz) = *a;
    let (bx, by, bsz) = *b;
    ax < bx + bsz + margin && bx < ax + asz + margin && ay < by + bsz + margin && by < ay + asz + margin
}

/// Generates image `index` of `split`. Each image draws from its own seeded
/// stream, so images can be produced in any order.
pub fn generate_image(spec: &SynthSpec, split: Split, index: usize) -> Result<(Image, Vec<(usize, BBox)>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream((split.stream() << 40) | index as u64);
    let n = spec.size as usize;

    // background: gray level with smooth variation and low-saturation clutter
    let base: f64 = rng.gen_range(95.0..165.0);
    let tint: [f64; 3] = [rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0)];
    let (fx, fy, phase) = (rng.gen_range(0.01..0.05), rng.gen_range(0.01..0.05), rng.gen_range(0.0..6.3));
    let mut canvas = vec![[0.0f64; 3]; n * n];
    for y in 0..n {
        for x in 0..n {
            let g = base + 14.0 * (fx * x as f64 + fy * y as f64 + phase).sin();
            canvas[y * n + x] = [g + tint[0], g + tint[1], g + tint[2]];
        }
    }
    for _ in 0..rng.gen_range(6..14) {
        let (w, h) = (rng.gen_range(4..26) as usize, rng.gen_range(4..26) as usize);
        let (x0, y0) = (rng.gen_range(0..n - w), rng.gen_range(0..n - h));
        let shift: f64 = rng.gen_range(-30.0..30.0);
        let elliptic = rng.gen_bool(0.5);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                let u = (x - x0) as f64 / w as f64 * 2.0 - 1.0;
                let v = (y - y0) as f64 / h as f64 * 2.0 - 1.0;
                if !elliptic || u * u + v * v <= 1.0 {
                    for c in &mut canvas[y * n + x] {
                        *c += shift;
                    }
                }
            }
        }
    }

    // shapes
    let count = rng.gen_range(1..=spec.max_shapes);
    let mut placed: Vec<(u32, u32, u32)> = Vec::new();
    let mut objects = Vec::new();
    for _ in 0..count {
        let mut slot = None;
        for _ in 0..200 {
            let s = rng.gen_range(MIN_SHAPE..=MAX_SHAPE);
            let cand = (rng.gen_range(1..spec.size - s), rng.gen_range(1..spec.size - s), s);
            if placed.iter().all(|p| !overlaps(p, &cand, 3)) {
                slot = Some(cand);
                break;
            }
        }
        let Some((sx, sy, s)) = slot else { break };
        placed.push((sx, sy, s));
        let class = rng.gen_range(0..spec.classes);
        let color: Vec<f64> = BASE_COLORS[class].iter().map(|c| c + rng.gen_range(-22.0..22.0)).collect();
        let half = s as f64 / 2.0;
        let (mut x_lo, mut y_lo, mut x_hi, mut y_hi) = (u32::MAX, u32::MAX, 0, 0);
        for y in sy..sy + s {
            for x in sx..sx + s {
                let u = (x as f64 + 0.5 - sx as f64 - half) / half;
                let v = (y as f64 + 0.5 - sy as f64 - half) / half;
                if !inside(class, u, v) {
                    continue;
                }
                let t = texture(class, x as f64, y as f64, u, v);
                let px = &mut canvas[y as usize * n + x as usize];
                for (c, base) in px.iter_mut().zip(&color) {
                    *c = base + t;
                }
                x_lo = x_lo.min(x);
                y_lo = y_lo.min(y);
                x_hi = x_hi.max(x);
                y_hi = y_hi.max(y);
            }
        }
        let bbox = BBox::new(x_lo as f64, y_lo as f64, (x_hi + 1) as f64, (y_hi + 1) as f64)?;
        objects.push((class, bbox));
    }

    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).map_err(|e| Error::Config(e.to_string()))?;
    let mut pixels = Vec::with_capacity(n * n * 3);
    for px in &canvas {
        for c in px {
            let v = if spec.noise > 0.0 { c + noise.sample(&mut rng) } else { *c };
            pixels.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok((Image::new(spec.size, spec.size, 3, pixels)?, objects))
}

pub fn image_id(split: Split, index: usize) -> String {
    format!("{}_{index:04}", split.as_str())
}

/// Writes `images/*.ppm` plus `train.txt` and `test.txt` manifests under
/// `out_dir`; returns the two manifest paths.
pub fn synth_generate(spec: &SynthSpec, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    spec.validate()?;
    let image_dir = out_dir.join("images");
    std::fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let mut paths = Vec::new();
    for (split, count) in [(Split::Train, spec.train_images), (Split::Test, spec.test_images)] {
        let images = (0..count)
            .into_par_iter()
            .map(|i| {
                let id = image_id(split, i);
                let (img, objects) = generate_image(spec, split, i)?;
                let path = image_dir.join(format!("{id}.ppm"));
                write_image(&img, &path)?;
                let ground_truths = objects
                    .into_iter()
                    .map(|(category_id, bbox)| GroundTruth {
                        image_id: id.clone(),
                        bbox,
                        category_id,
                    })
                    .collect();
                Ok(ManifestEntry {
                    image_id: id,
                    path,
                    ground_truths,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = DatasetManifest {
            categories: spec.category_names(),
            images,
        };
        let path = out_dir.join(format!("{}.txt", split.as_str()));
        std::fs::write(&path, format_manifest(&manifest, out_dir)).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok((paths.remove(0), paths.remove(0)))
}
