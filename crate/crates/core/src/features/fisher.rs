//! Improved Fisher vector encoding.

use crate::error::{Error, Result};

use super::gmm::GmmModel;

/// Power- and L2-normalized Fisher vector, laid out as `[weights (K) | means (K*D) | variances (K*D)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherVector(Vec<f64>);

impl FisherVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn fisher_len(dim: usize, k: usize) -> usize {
    (2 * dim + 1) * k
}

/// Unnormalized gradient statistics, normalized by descriptor count and the
/// diagonal Fisher information approximation.
pub fn fisher_gradients(descriptors: &[Vec<f64>], gmm: &GmmModel) -> Result<Vec<f64>> {
    if descriptors.is_empty() {
        return Err(Error::Empty("Fisher encoding needs at least one descriptor"));
    }
    let (k, dim) = (gmm.k(), gmm.dim());
    if let Some(bad) = descriptors.iter().find(|d| d.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: bad.len(),
        });
    }
    let t = descriptors.len() as f64;
    let mut g_weight = vec![0.0; k];
    let mut g_mean = vec![0.0; k * dim];
    let mut g_var = vec![0.0; k * dim];
    let sigmas: Vec<Vec<f64>> = gmm
        .variances
        .iter()
        .map(|v| v.iter().map(|x| x.sqrt()).collect())
        .collect();

    for x in descriptors {
        let gamma = gmm.posteriors(x);
        for j in 0..k {
            g_weight[j] += gamma[j] - gmm.weights[j];
            if gamma[j] == 0.0 {
                continue;
            }
            for d in 0..dim {
                let u = (x[d] - gmm.means[j][d]) / sigmas[j][d];
                g_mean[j * dim + d] += gamma[j] * u;
                g_var[j * dim + d] += gamma[j] * (u * u - 1.0);
            }
        }
    }

    let mut out = Vec::with_capacity(fisher_len(dim, k));
    for j in 0..k {
        out.push(g_weight[j] / (t * gmm.weights[j].sqrt()));
    }
    for j in 0..k {
        let s = 1.0 / (t * gmm.weights[j].sqrt());
        out.extend(g_mean[j * dim..(j + 1) * dim].iter().map(|v| v * s));
    }
    for j in 0..k {
        let s = 1.0 / (t * (2.0 * gmm.weights[j]).sqrt());
        out.extend(g_var[j * dim..(j + 1) * dim].iter().map(|v| v * s));
    }
    Ok(out)
}

/// Encodes local descriptors against `gmm`, then applies signed square-root
/// and global L2 normalization.
pub fn fisher_encode(descriptors: &[Vec<f64>], gmm: &GmmModel) -> Result<FisherVector> {
    let mut v = fisher_gradients(descriptors, gmm)?;
    v.iter_mut().for_each(|z| *z = z.signum() * z.abs().sqrt());
    let norm = v.iter().map(|z| z * z).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroFisherVector);
    }
    v.iter_mut().for_each(|z| *z /= norm);
    Ok(FisherVector(v))
}
