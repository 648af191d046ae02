//! Pipeline configuration: `key = value` lines, `#` comments.
//!
//! Every key has a default, so an empty file is a valid configuration.
//! Unknown keys and out-of-range values are rejected with the offending line.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::Channel;
use crate::synth::SynthSpec;

/// Threshold policy of the presence prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TauPolicy {
    /// Per-category value reaching `prior.recall` on the held-out split.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,

    pub synth: SynthSpec,

    pub seg_k: f64,
    pub seg_sigma: f64,
    pub seg_min_size: usize,
    pub max_proposals: usize,
    pub min_proposal_side: f64,

    pub hog_cells_x: usize,
    pub hog_cells_y: usize,
    pub cnn_grid: usize,
    /// External CNN vectors; `{dataset}` is replaced by the manifest stem.
    pub cnn_features: Option<PathBuf>,
    pub ifv_window: usize,
    pub ifv_patch: usize,
    pub ifv_stride: usize,
    pub pca_dim: usize,
    pub pca_samples: usize,
    pub gmm_k: usize,
    pub gmm_iters: usize,
    pub gmm_tol: f64,
    pub gmm_samples: usize,

    pub svm_lambda: f64,
    pub svm_epochs: usize,
    pub svm_pos_iou: f64,
    pub svm_neg_iou: f64,
    pub svm_hard_negatives: usize,

    pub fusion_lambda: f64,
    pub fusion_epochs: usize,
    pub fusion_folds: usize,

    pub regress_lambda: f64,
    pub regress_match_iou: f64,
    pub regress_channel: Channel,

    pub nms_iou: f64,
    pub eval_iou: f64,

    pub prior_lambda: f64,
    pub prior_epochs: usize,
    pub prior_tau: TauPolicy,
    pub prior_recall: f64,
    /// Cross-validation folds used to calibrate automatic thresholds.
    pub prior_folds: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            synth: SynthSpec::default(),
            seg_k: 300.0,
            seg_sigma: 0.8,
            seg_min_size: 50,
            max_proposals: 2000,
            min_proposal_side: 8.0,
            hog_cells_x: 4,
            hog_cells_y: 4,
            cnn_grid: 8,
            cnn_features: None,
            ifv_window: 32,
            ifv_patch: 8,
            ifv_stride: 4,
            pca_dim: 64,
            pca_samples: 20000,
            gmm_k: 16,
            gmm_iters: 100,
            gmm_tol: 1e-6,
            gmm_samples: 20000,
            svm_lambda: 1e-4,
            svm_epochs: 20,
            svm_pos_iou: 0.5,
            svm_neg_iou: 0.3,
            svm_hard_negatives: 0,
            fusion_lambda: 1e-3,
            fusion_epochs: 20,
            fusion_folds: 3,
            regress_lambda: 1.0,
            regress_match_iou: 0.6,
            regress_channel: Channel::Cnn,
            nms_iou: 0.3,
            eval_iou: 0.5,
            prior_lambda: 1e-3,
            prior_epochs: 20,
            prior_tau: TauPolicy::Auto,
            prior_recall: 0.95,
            prior_folds: 5,
        }
    }
}

fn num<T: FromStr>(value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| format!("{value:?}: {e}"))
}

fn positive(value: &str) -> std::result::Result<f64, String> {
    let v: f64 = num(value)?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{value} must be a positive finite number"))
    }
}

fn non_negative(value: &str) -> std::result::Result<f64, String> {
    let v: f64 = num(value)?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{value} must be a non-negative finite number"))
    }
}

fn at_least(value: &str, min: usize) -> std::result::Result<usize, String> {
    let v: usize = num(value)?;
    if v >= min {
        Ok(v)
    } else {
        Err(format!("{value} must be at least {min}"))
    }
}

fn in_range(value: &str, min: usize, max: usize) -> std::result::Result<usize, String> {
    let v = at_least(value, min)?;
    if v <= max {
        Ok(v)
    } else {
        Err(format!("{value} must be at most {max}"))
    }
}

/// A real in the half-open unit interval `(0, 1]`.
fn unit(value: &str) -> std::result::Result<f64, String> {
    let v: f64 = num(value)?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("{value} must be in (0, 1]"))
    }
}

impl PipelineConfig {
    /// Assigns one key; the error text does not include the line number.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "seed" => self.seed = num(value)?,
            "synth.classes" => self.synth.classes = in_range(value, 1, crate::synth::CLASS_NAMES.len())?,
            "synth.train_images" => self.synth.train_images = at_least(value, 1)?,
            "synth.test_images" => self.synth.test_images = at_least(value, 1)?,
            "synth.max_shapes" => self.synth.max_shapes = in_range(value, 1, 8)?,
            "synth.noise" => self.synth.noise = non_negative(value)?,
            "synth.size" => self.synth.size = in_range(value, 2 * crate::synth::MAX_SHAPE as usize, 4096)? as u32,
            "seg.k" => self.seg_k = positive(value)?,
            "seg.sigma" => self.seg_sigma = non_negative(value)?,
            "seg.min_size" => self.seg_min_size = at_least(value, 1)?,
            "proposals.max_per_image" => self.max_proposals = at_least(value, 1)?,
            "proposals.min_side" => self.min_proposal_side = non_negative(value)?,
            "hog.cells_x" => self.hog_cells_x = in_range(value, 1, 64)?,
            "hog.cells_y" => self.hog_cells_y = in_range(value, 1, 64)?,
            "cnn.grid" => self.cnn_grid = in_range(value, 1, 64)?,
            "cnn.features" => {
                self.cnn_features = match value {
                    "" | "none" => None,
                    p => Some(PathBuf::from(p)),
                }
            }
            "ifv.window" => self.ifv_window = in_range(value, 2, 512)?,
            "ifv.patch" => self.ifv_patch = in_range(value, 2, 64)?,
            "ifv.stride" => self.ifv_stride = in_range(value, 1, 64)?,
            "pca.dim" => self.pca_dim = at_least(value, 1)?,
            "pca.samples" => self.pca_samples = at_least(value, 1)?,
            "gmm.k" => self.gmm_k = at_least(value, 1)?,
            "gmm.iters" => self.gmm_iters = at_least(value, 1)?,
            "gmm.tol" => self.gmm_tol = non_negative(value)?,
            "gmm.samples" => self.gmm_samples = at_least(value, 1)?,
            "svm.lambda" => self.svm_lambda = positive(value)?,
            "svm.epochs" => self.svm_epochs = at_least(value, 1)?,
            "svm.pos_iou" => self.svm_pos_iou = unit(value)?,
            "svm.neg_iou" => self.svm_neg_iou = unit(value)?,
            "svm.hard_negatives" => self.svm_hard_negatives = num(value)?,
            "fusion.lambda" => self.fusion_lambda = positive(value)?,
            "fusion.epochs" => self.fusion_epochs = at_least(value, 1)?,
            "fusion.folds" => self.fusion_folds = in_range(value, 1, 20)?,
            "regress.lambda" => self.regress_lambda = positive(value)?,
            "regress.match_iou" => self.regress_match_iou = unit(value)?,
            "regress.channel" => self.regress_channel = value.parse().map_err(|e: Error| e.to_string())?,
            "nms.iou" => self.nms_iou = unit(value)?,
            "eval.iou" => self.eval_iou = unit(value)?,
            "prior.lambda" => self.prior_lambda = positive(value)?,
            "prior.epochs" => self.prior_epochs = at_least(value, 1)?,
            "prior.tau" => {
                self.prior_tau = match value {
                    "auto" => TauPolicy::Auto,
                    v => {
                        let t: f64 = num(v)?;
                        if !t.is_finite() {
                            return Err(format!("{v} must be finite or `auto`"));
                        }
                        TauPolicy::Fixed(t)
                    }
                }
            }
            "prior.recall" => self.prior_recall = unit(value)?,
            "prior.folds" => self.prior_folds = in_range(value, 2, 20)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Cross-key constraints.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.svm_neg_iou > self.svm_pos_iou {
            return Err("svm.neg_iou must not exceed svm.pos_iou".into());
        }
        if self.ifv_patch > self.ifv_window {
            return Err("ifv.patch must not exceed ifv.window".into());
        }
        if self.pca_dim > 2 * self.ifv_patch * self.ifv_patch {
            return Err(format!(
                "pca.dim must not exceed the raw descriptor length {}",
                2 * self.ifv_patch * self.ifv_patch
            ));
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let tau = match self.prior_tau {
            TauPolicy::Auto => "auto".to_string(),
            TauPolicy::Fixed(t) => format!("{t:?}"),
        };
        vec![
            ("seed", self.seed.to_string()),
            ("synth.classes", self.synth.classes.to_string()),
            ("synth.train_images", self.synth.train_images.to_string()),
            ("synth.test_images", self.synth.test_images.to_string()),
            ("synth.max_shapes", self.synth.max_shapes.to_string()),
            ("synth.noise", format!("{:?}", self.synth.noise)),
            ("synth.size", self.synth.size.to_string()),
            ("seg.k", format!("{:?}", self.seg_k)),
            ("seg.sigma", format!("{:?}", self.seg_sigma)),
            ("seg.min_size", self.seg_min_size.to_string()),
            ("proposals.max_per_image", self.max_proposals.to_string()),
            ("proposals.min_side", format!("{:?}", self.min_proposal_side)),
            ("hog.cells_x", self.hog_cells_x.to_string()),
            ("hog.cells_y", self.hog_cells_y.to_string()),
            ("cnn.grid", self.cnn_grid.to_string()),
            (
                "cnn.features",
                self.cnn_features
                    .as_ref()
                    .map_or("none".to_string(), |p| p.display().to_string()),
            ),
            ("ifv.window", self.ifv_window.to_string()),
            ("ifv.patch", self.ifv_patch.to_string()),
            ("ifv.stride", self.ifv_stride.to_string()),
            ("pca.dim", self.pca_dim.to_string()),
            ("pca.samples", self.pca_samples.to_string()),
            ("gmm.k", self.gmm_k.to_string()),
            ("gmm.iters", self.gmm_iters.to_string()),
            ("gmm.tol", format!("{:?}", self.gmm_tol)),
            ("gmm.samples", self.gmm_samples.to_string()),
            ("svm.lambda", format!("{:?}", self.svm_lambda)),
            ("svm.epochs", self.svm_epochs.to_string()),
            ("svm.pos_iou", format!("{:?}", self.svm_pos_iou)),
            ("svm.neg_iou", format!("{:?}", self.svm_neg_iou)),
            ("svm.hard_negatives", self.svm_hard_negatives.to_string()),
            ("fusion.lambda", format!("{:?}", self.fusion_lambda)),
            ("fusion.epochs", self.fusion_epochs.to_string()),
            ("fusion.folds", self.fusion_folds.to_string()),
            ("regress.lambda", format!("{:?}", self.regress_lambda)),
            ("regress.match_iou", format!("{:?}", self.regress_match_iou)),
            ("regress.channel", self.regress_channel.to_string()),
            ("nms.iou", format!("{:?}", self.nms_iou)),
            ("eval.iou", format!("{:?}", self.eval_iou)),
            ("prior.lambda", format!("{:?}", self.prior_lambda)),
            ("prior.epochs", self.prior_epochs.to_string()),
            ("prior.tau", tau),
            ("prior.recall", format!("{:?}", self.prior_recall)),
            ("prior.folds", self.prior_folds.to_string()),
        ]
    }

    /// Canonical `key = value` text; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// First 16 hex digits of the SHA-256 of [`PipelineConfig::to_text`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        hex::encode(digest)[..16].to_string()
    }
}

pub fn parse_config(text: &str) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::default();
    let mut last_line = 0;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        last_line = line_no;
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(line_no, format!("expected `key = value`, found {line:?}")))?;
        cfg.set(key.trim(), value.trim())
            .map_err(|m| Error::parse(line_no, format!("{}: {m}", key.trim())))?;
    }
    cfg.validate().map_err(|m| Error::parse(last_line.max(1), m))?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_is_default() {
        assert_eq!(parse_config("").unwrap(), PipelineConfig::default());
        assert_eq!(parse_config("# only a comment\n\n").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn sets_values() {
        let cfg = parse_config("gmm.k = 16\nprior.tau = -0.5  # fixed\nregress.channel = hog\n").unwrap();
        assert_eq!(cfg.gmm_k, 16);
        assert_eq!(cfg.prior_tau, TauPolicy::Fixed(-0.5));
        assert_eq!(cfg.regress_channel, Channel::Hog);
    }

    #[test]
    fn errors_name_lines() {
        for (text, line) in [
            ("gmm.k = 0\n", 1),
            ("\nseed = 1\nbogus = 3\n", 3),
            ("nms.iou = 1.5\n", 1),
            ("seed 4\n", 1),
            ("svm.lambda = -1\n", 1),
        ] {
            match parse_config(text) {
                Err(Error::Parse { line: l, message }) => assert_eq!(l, line, "{text:?}: {message}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn canonical_text_round_trips_and_hash_tracks_changes() {
        let mut cfg = PipelineConfig::default();
        cfg.prior_tau = TauPolicy::Fixed(0.25);
        cfg.cnn_features = Some(PathBuf::from("/tmp/f.txt"));
        assert_eq!(parse_config(&cfg.to_text()).unwrap(), cfg);
        let h = cfg.hash();
        assert_eq!(h.len(), 16);
        cfg.seed = 9;
        assert_ne!(cfg.hash(), h);
    }
}
