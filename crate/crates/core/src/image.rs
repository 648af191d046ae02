//! 8-bit raster images and binary PPM (P6) / PGM (P5) codecs.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Row-major interleaved 8-bit image with 1 or 3 channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: u32,
    height: u32,
    channels: u8,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: u32, height: u32, channels: u8, pixels: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!(
                "unsupported channel count {channels}"
            )));
        }
        let expected = width as usize * height as usize * channels as usize;
        if pixels.len() != expected {
            return Err(Error::InvalidImage(format!(
                "pixel buffer holds {} samples, expected {expected}",
                pixels.len()
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, channels: u8, value: u8) -> Result<Self> {
        let len = width as usize * height as usize * channels as usize;
        Image::new(width, height, channels, vec![value; len])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn full_box(&self) -> Result<BBox> {
        BBox::new(0.0, 0.0, self.width as f64, self.height as f64)
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32, c: u8) -> u8 {
        let idx = (y as usize * self.width as usize + x as usize) * self.channels as usize;
        self.pixels[idx + c as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, c: u8, value: u8) {
        let idx = (y as usize * self.width as usize + x as usize) * self.channels as usize;
        self.pixels[idx + c as usize] = value;
    }

    /// Converts to planar f64 channels.
    pub fn to_planes(&self) -> Vec<Plane> {
        (0..self.channels)
            .map(|c| {
                let data = self
                    .pixels
                    .iter()
                    .skip(c as usize)
                    .step_by(self.channels as usize)
                    .map(|&v| v as f64)
                    .collect();
                Plane {
                    width: self.width as usize,
                    height: self.height as usize,
                    data,
                }
            })
            .collect()
    }

    /// Luminance plane (Rec. 601 weights for color input).
    pub fn to_gray(&self) -> Plane {
        let data = if self.channels == 1 {
            self.pixels.iter().map(|&v| v as f64).collect()
        } else {
            self.pixels
                .chunks_exact(3)
                .map(|px| 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64)
                .collect()
        };
        Plane {
            width: self.width as usize,
            height: self.height as usize,
            data,
        }
    }

    pub fn from_rgb_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> [u8; 3]) -> Image {
        let mut pixels = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        Image {
            width,
            height,
            channels: 3,
            pixels,
        }
    }
}

/// Single-channel floating point raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Sample with coordinates clamped to the border.
    #[inline]
    pub fn at_clamped(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.at(x, y)
    }

    /// Bilinear sample at continuous pixel-center coordinates.
    pub fn bilinear(&self, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let top = self.at(x0, y0) * (1.0 - fx) + self.at(x1, y0) * fx;
        let bottom = self.at(x0, y1) * (1.0 - fx) + self.at(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Resamples the region `window` to `out_w x out_h` with bilinear interpolation.
    pub fn resample(&self, window: &BBox, out_w: usize, out_h: usize) -> Plane {
        let sx = window.width() / out_w as f64;
        let sy = window.height() / out_h as f64;
        let mut data = Vec::with_capacity(out_w * out_h);
        for j in 0..out_h {
            let y = window.y_min() + (j as f64 + 0.5) * sy - 0.5;
            for i in 0..out_w {
                let x = window.x_min() + (i as f64 + 0.5) * sx - 0.5;
                data.push(self.bilinear(x, y));
            }
        }
        Plane {
            width: out_w,
            height: out_h,
            data,
        }
    }

    /// Separable Gaussian blur. `sigma <= 0` returns a copy.
    pub fn gaussian_blur(&self, sigma: f64) -> Plane {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (4.0 * sigma).ceil() as isize;
        let mut kernel: Vec<f64> = (-radius..=radius)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let sum: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= sum);

        let (w, h) = (self.width, self.height);
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, weight) in kernel.iter().enumerate() {
                    acc += weight * self.at_clamped(x as isize + k as isize - radius, y as isize);
                }
                tmp[y * w + x] = acc;
            }
        }
        let tmp = Plane {
            width: w,
            height: h,
            data: tmp,
        };
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, weight) in kernel.iter().enumerate() {
                    acc += weight * tmp.at_clamped(x as isize, y as isize + k as isize - radius);
                }
                out[y * w + x] = acc;
            }
        }
        Plane {
            width: w,
            height: h,
            data: out,
        }
    }

    /// Centered-difference gradients `(dx, dy)` with replicated borders.
    pub fn gradients(&self) -> (Vec<f64>, Vec<f64>) {
        let (w, h) = (self.width, self.height);
        let mut dx = vec![0.0; w * h];
        let mut dy = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let (xi, yi) = (x as isize, y as isize);
                dx[y * w + x] = self.at_clamped(xi + 1, yi) - self.at_clamped(xi - 1, yi);
                dy[y * w + x] = self.at_clamped(xi, yi + 1) - self.at_clamped(xi, yi - 1);
            }
        }
        (dx, dy)
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Decodes a binary PPM (P6) or PGM (P5) with maxval 255.
pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<Image> {
    let mut pos = 0usize;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        // Skip whitespace and comments.
        while pos < bytes.len() {
            if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "truncated header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| format_err(path, "non-ASCII header"))?);
    }
    let channels = match tokens[0] {
        "P6" => 3u8,
        "P5" => 1u8,
        other => return Err(format_err(path, format!("unsupported magic {other:?}"))),
    };
    let parse_num = |t: &str, what: &str| {
        t.parse::<u32>()
            .map_err(|_| format_err(path, format!("bad {what} {t:?}")))
    };
    let width = parse_num(tokens[1], "width")?;
    let height = parse_num(tokens[2], "height")?;
    let maxval = parse_num(tokens[3], "maxval")?;
    if maxval != 255 {
        return Err(format_err(path, format!("only 8-bit maxval 255 is supported, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(format_err(path, "zero image dimension"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(format_err(path, "missing raster separator"));
    }
    pos += 1;
    let len = width as usize * height as usize * channels as usize;
    if bytes.len() - pos < len {
        return Err(format_err(
            path,
            format!("raster truncated: {} of {len} bytes", bytes.len() - pos),
        ));
    }
    Image::new(width, height, channels, bytes[pos..pos + len].to_vec())
}

pub fn encode_pnm(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes, path)
}

pub fn write_image(img: &Image, path: &Path) -> Result<()> {
    std::fs::write(path, encode_pnm(img)).map_err(|e| Error::io(path, e))
}
