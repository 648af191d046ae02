//! Selective-search object proposals.

mod grouping;
mod segment;

pub use grouping::{
    hierarchical_grouping, hierarchy_boxes, region_adjacency, region_descriptors, similarity,
    Hierarchy, Region, COLOR_BINS, TEXTURE_BINS,
};
pub use segment::{segment_graph, SegmentationMap};

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalConfig {
    pub k: f64,
    pub sigma: f64,
    pub min_size: usize,
    /// Upper bound on emitted proposals per image.
    pub max_proposals: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            k: 300.0,
            sigma: 0.8,
            min_size: 50,
            max_proposals: 2000,
        }
    }
}

/// Proposal boxes for one image, largest hierarchy levels first.
pub fn selective_search(img: &Image, cfg: &ProposalConfig) -> Result<Vec<BBox>> {
    let seg = segment_graph(img, cfg.k, cfg.min_size, cfg.sigma)?;
    let regions = region_descriptors(img, &seg);
    let adjacency = region_adjacency(&seg);
    let area = img.width() as f64 * img.height() as f64;
    let hierarchy = hierarchical_grouping(regions, &adjacency, area);
    let mut boxes = hierarchy_boxes(&hierarchy);
    boxes.truncate(cfg.max_proposals);
    Ok(boxes)
}

/// Formats proposals as `image_id x_min y_min x_max y_max` lines.
pub fn format_proposals<'a>(entries: impl IntoIterator<Item = (&'a str, &'a [BBox])>) -> String {
    let mut out = String::new();
    for (id, boxes) in entries {
        for b in boxes {
            let _ = writeln!(
                out,
                "{id} {} {} {} {}",
                b.x_min(),
                b.y_min(),
                b.x_max(),
                b.y_max()
            );
        }
    }
    out
}

/// Parses a proposals dump, grouping consecutive lines by image id in file order.
pub fn parse_proposals(text: &str) -> Result<Vec<(String, Vec<BBox>)>> {
    let mut out: Vec<(String, Vec<BBox>)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::parse(i + 1, format!("expected 5 fields, found {}", fields.len())));
        }
        let mut v = [0.0; 4];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f
                .parse()
                .map_err(|e| Error::parse(i + 1, format!("{f:?}: {e}")))?;
        }
        let b = BBox::new(v[0], v[1], v[2], v[3]).map_err(|e| Error::parse(i + 1, e.to_string()))?;
        match out.last_mut() {
            Some((id, boxes)) if id == fields[0] => boxes.push(b),
            _ => out.push((fields[0].to_string(), vec![b])),
        }
    }
    Ok(out)
}
