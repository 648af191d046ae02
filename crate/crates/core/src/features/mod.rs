//! Per-proposal feature channels: HOG templates, improved Fisher vectors over
//! dense gradient patches, and ingested CNN vectors.

mod cnn;
mod dense;
mod fisher;
mod gmm;
mod hog;
mod pca;

pub use cnn::{format_cnn_features, load_cnn_features, parse_cnn_features, CnnFeatureTable};
pub use dense::{dense_descriptors, dense_descriptors_plane, grid_count, raw_dim};
pub use fisher::{fisher_encode, fisher_gradients, fisher_len, FisherVector};
pub use gmm::{gmm_fit, GmmFit, GmmModel, GmmParams, DEFAULT_VARIANCE_FLOOR};
pub use hog::{cell_histograms, hog, hog_len, hog_plane, CELL_SIZE, CLAMP, ORIENTATIONS};
pub use pca::{pca_apply, pca_fit, PcaModel};

use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// The three recognition channels, in fusion order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Channel {
    Cnn,
    Hog,
    Ifv,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Cnn, Channel::Hog, Channel::Ifv];

    pub fn as_str(&self) -> &'static str {
        match self {
            Channel::Cnn => "cnn",
            Channel::Hog => "hog",
            Channel::Ifv => "ifv",
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cnn" => Ok(Channel::Cnn),
            "hog" => Ok(Channel::Hog),
            "ifv" => Ok(Channel::Ifv),
            other => Err(Error::Invalid(format!(
                "unknown channel {other:?} (expected cnn, hog or ifv)"
            ))),
        }
    }
}
