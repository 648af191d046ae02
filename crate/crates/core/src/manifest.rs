//! Dataset manifests.
//!
//! ```text
//! N name_0 ... name_{N-1}
//! image_id path gt_count
//! category_id x_min y_min x_max y_max [difficult]
//! ...
//! ```
//!
//! Relative image paths are resolved against the manifest's directory.
//! The optional trailing ground-truth field is accepted and ignored.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{BBox, GroundTruth};

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub image_id: String,
    pub path: PathBuf,
    pub ground_truths: Vec<GroundTruth>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub categories: Vec<String>,
    pub images: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn ground_truths(&self) -> Vec<GroundTruth> {
        self.images
            .iter()
            .flat_map(|e| e.ground_truths.iter().cloned())
            .collect()
    }

    pub fn find(&self, image_id: &str) -> Option<&ManifestEntry> {
        self.images.iter().find(|e| e.image_id == image_id)
    }
}

/// Parses manifest text; relative paths are joined onto `base_dir`.
pub fn parse_manifest(text: &str, base_dir: &Path) -> Result<DatasetManifest> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (hl, header) = lines.next().ok_or_else(|| Error::parse(1, "empty manifest"))?;
    let mut head = header.split_whitespace();
    let n: usize = head
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::parse(hl, "header must start with the category count"))?;
    let categories: Vec<String> = head.map(str::to_string).collect();
    if categories.len() != n {
        return Err(Error::parse(
            hl,
            format!("header declares {n} categories but names {}", categories.len()),
        ));
    }
    if categories.iter().collect::<BTreeSet<_>>().len() != n {
        return Err(Error::parse(hl, "duplicate category name"));
    }

    let mut images = Vec::new();
    let mut seen = BTreeSet::new();
    while let Some((ln, line)) = lines.next() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(Error::parse(ln, "expected `image_id path gt_count`"));
        }
        let image_id = f[0].to_string();
        if !seen.insert(image_id.clone()) {
            return Err(Error::parse(ln, format!("duplicate image id {image_id:?}")));
        }
        let count: usize = f[2]
            .parse()
            .map_err(|e| Error::parse(ln, format!("gt_count: {e}")))?;
        let path = Path::new(f[1]);
        let path = if path.is_absolute() {
            path.to_path_buf()
        } else {
            base_dir.join(path)
        };
        let mut ground_truths = Vec::with_capacity(count);
        for _ in 0..count {
            let (gl, gline) = lines
                .next()
                .ok_or_else(|| Error::parse(ln, format!("image {image_id:?} is missing ground truth lines")))?;
            ground_truths.push(parse_gt(&image_id, gline, gl, n)?);
        }
        images.push(ManifestEntry {
            image_id,
            path,
            ground_truths,
        });
    }
    Ok(DatasetManifest { categories, images })
}

fn parse_gt(image_id: &str, line: &str, ln: usize, n: usize) -> Result<GroundTruth> {
    let f: Vec<&str> = line.split_whitespace().collect();
    if f.len() != 5 && f.len() != 6 {
        return Err(Error::parse(
            ln,
            "expected `category_id x_min y_min x_max y_max [difficult]`",
        ));
    }
    let category_id: usize = f[0]
        .parse()
        .map_err(|e| Error::parse(ln, format!("category_id: {e}")))?;
    if category_id >= n {
        return Err(Error::parse(ln, format!("category {category_id} out of range for {n} categories")));
    }
    let mut v = [0.0; 4];
    for (slot, s) in v.iter_mut().zip(&f[1..5]) {
        *slot = s
            .parse()
            .map_err(|e| Error::parse(ln, format!("{s:?}: {e}")))?;
    }
    let bbox = BBox::new(v[0], v[1], v[2], v[3]).map_err(|e| Error::parse(ln, e.to_string()))?;
    Ok(GroundTruth {
        image_id: image_id.to_string(),
        bbox,
        category_id,
    })
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, base).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Serializes with paths written relative to `base_dir` where possible.
pub fn format_manifest(manifest: &DatasetManifest, base_dir: &Path) -> String {
    let mut out = format!("{}", manifest.num_categories());
    for c in &manifest.categories {
        out.push(' ');
        out.push_str(c);
    }
    out.push('\n');
    for e in &manifest.images {
        let path = e.path.strip_prefix(base_dir).unwrap_or(&e.path);
        let _ = writeln!(out, "{} {} {}", e.image_id, path.display(), e.ground_truths.len());
        for g in &e.ground_truths {
            let [x0, y0, x1, y1] = g.bbox.to_array();
            let _ = writeln!(out, "{} {x0} {y0} {x1} {y1}", g.category_id);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = "2 disk square\nimg0 images/img0.ppm 2\n0 1 2 10 12\n1 20 20 30.5 40 1\nimg1 /abs/img1.ppm 0\n";

    #[test]
    fn parse_and_resolve() {
        let m = parse_manifest(TEXT, Path::new("/data")).unwrap();
        assert_eq!(m.categories, vec!["disk", "square"]);
        assert_eq!(m.images.len(), 2);
        assert_eq!(m.images[0].path, PathBuf::from("/data/images/img0.ppm"));
        assert_eq!(m.images[1].path, PathBuf::from("/abs/img1.ppm"));
        assert_eq!(m.images[0].ground_truths[1].bbox.x_max(), 30.5);
        assert_eq!(m.ground_truths().len(), 2);
    }

    #[test]
    fn round_trip() {
        let m = parse_manifest(TEXT, Path::new("/data")).unwrap();
        let again = parse_manifest(&format_manifest(&m, Path::new("/data")), Path::new("/data")).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn errors_name_lines() {
        let cases = [
            ("2 disk\n", 1),
            ("1 a\nx p 1\n", 2),
            ("1 a\nx p 1\n3 0 0 1 1\n", 3),
            ("1 a\nx p 1\n0 5 0 1 1\n", 3),
            ("1 a\nx p 0\nx q 0\n", 3),
        ];
        for (text, line) in cases {
            match parse_manifest(text, Path::new(".")) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }
}
