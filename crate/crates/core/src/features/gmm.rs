//! Diagonal-covariance Gaussian mixtures trained by EM.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-4;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    /// `k` rows of `dim` means.
    pub means: Vec<Vec<f64>>,
    /// `k` rows of `dim` diagonal variances.
    pub variances: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct GmmParams {
    pub k: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
    pub variance_floor: f64,
}

impl Default for GmmParams {
    fn default() -> Self {
        GmmParams {
            k: 16,
            max_iters: 100,
            tol: 1e-6,
            seed: 0,
            variance_floor: DEFAULT_VARIANCE_FLOOR,
        }
    }
}

/// Result of [`gmm_fit`] with the mean log-likelihood after every E-step.
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub model: GmmModel,
    pub log_likelihoods: Vec<f64>,
}

impl GmmModel {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    /// Per-component `ln w_k + ln N(x | mu_k, sigma_k)`.
    fn joint_log_densities(&self, x: &[f64], out: &mut [f64]) {
        for (k, slot) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for ((xi, mi), vi) in x.iter().zip(&self.means[k]).zip(&self.variances[k]) {
                let d = xi - mi;
                acc += d * d / vi + vi.ln();
            }
            *slot = self.weights[k].ln() - 0.5 * (acc + self.dim() as f64 * LN_2PI);
        }
    }

    /// Normalizes joint log-densities in place into posteriors, returning the
    /// sample log-likelihood.
    fn normalize_posteriors(logs: &mut [f64]) -> f64 {
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logs.iter().map(|l| (l - max).exp()).sum();
        let lse = max + sum.ln();
        logs.iter_mut().for_each(|l| *l = (*l - lse).exp());
        lse
    }

    /// Soft assignment of `x` to each component; sums to one.
    pub fn posteriors(&self, x: &[f64]) -> Vec<f64> {
        let mut p = vec![0.0; self.k()];
        self.joint_log_densities(x, &mut p);
        Self::normalize_posteriors(&mut p);
        p
    }

    /// Mean per-sample log-likelihood.
    pub fn log_likelihood(&self, samples: &[Vec<f64>]) -> f64 {
        let mut buf = vec![0.0; self.k()];
        samples
            .iter()
            .map(|x| {
                self.joint_log_densities(x, &mut buf);
                Self::normalize_posteriors(&mut buf)
            })
            .sum::<f64>()
            / samples.len() as f64
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding: first center uniform, the rest by squared-distance sampling.
fn kmeans_pp(samples: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![samples[rng.gen_range(0..samples.len())].clone()];
    let mut d2: Vec<f64> = samples.iter().map(|s| sq_dist(s, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = samples.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.gen_range(0..samples.len())
        };
        let c = samples[idx].clone();
        for (d, s) in d2.iter_mut().zip(samples) {
            *d = d.min(sq_dist(s, &c));
        }
        centers.push(c);
    }
    centers
}

/// Initial mixture from hard nearest-center assignment.
fn initial_model(samples: &[Vec<f64>], centers: Vec<Vec<f64>>, floor: f64) -> GmmModel {
    let k = centers.len();
    let dim = samples[0].len();
    let n = samples.len() as f64;

    let mut global_mean = vec![0.0; dim];
    for s in samples {
        for (m, v) in global_mean.iter_mut().zip(s) {
            *m += v / n;
        }
    }
    let mut global_var = vec![0.0; dim];
    for s in samples {
        for ((g, v), m) in global_var.iter_mut().zip(s).zip(&global_mean) {
            *g += (v - m) * (v - m) / n;
        }
    }

    let mut counts = vec![0usize; k];
    let mut sums = vec![vec![0.0; dim]; k];
    let mut sq = vec![vec![0.0; dim]; k];
    for s in samples {
        let j = (0..k)
            .min_by(|&a, &b| sq_dist(s, &centers[a]).total_cmp(&sq_dist(s, &centers[b])))
            .unwrap_or(0);
        counts[j] += 1;
        for d in 0..dim {
            sums[j][d] += s[d];
            sq[j][d] += s[d] * s[d];
        }
    }

    let mut weights = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    for j in 0..k {
        let c = counts[j];
        weights.push(c.max(1) as f64);
        if c >= 2 {
            let mean: Vec<f64> = sums[j].iter().map(|v| v / c as f64).collect();
            let var = (0..dim)
                .map(|d| (sq[j][d] / c as f64 - mean[d] * mean[d]).max(floor))
                .collect();
            means.push(mean);
            variances.push(var);
        } else {
            means.push(centers[j].clone());
            variances.push(global_var.iter().map(|v| v.max(floor)).collect());
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    GmmModel {
        weights,
        means,
        variances,
    }
}

/// Fits a `k`-component diagonal GMM with EM from a k-means++ start.
///
/// Stops after `max_iters` EM steps or once the mean log-likelihood improves by
/// less than `tol`. Variances never drop below `variance_floor`.
pub fn gmm_fit(samples: &[Vec<f64>], params: &GmmParams) -> Result<GmmFit> {
    let k = params.k;
    if k == 0 {
        return Err(Error::Invalid("GMM needs at least one component".into()));
    }
    if samples.len() < k {
        return Err(Error::NotEnoughSamples {
            needed: k,
            got: samples.len(),
        });
    }
    let dim = samples[0].len();
    if let Some(bad) = samples.iter().find(|s| s.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: bad.len(),
        });
    }
    let floor = params.variance_floor;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let centers = kmeans_pp(samples, k, &mut rng);
    let mut model = initial_model(samples, centers, floor);
    let n = samples.len() as f64;

    let mut trace: Vec<f64> = Vec::new();
    let mut post = vec![0.0; k];
    for _ in 0..params.max_iters.max(1) {
        // E-step, accumulating sufficient statistics.
        let mut nk = vec![0.0; k];
        let mut s1 = vec![vec![0.0; dim]; k];
        let mut s2 = vec![vec![0.0; dim]; k];
        let mut ll = 0.0;
        for x in samples {
            model.joint_log_densities(x, &mut post);
            ll += GmmModel::normalize_posteriors(&mut post);
            for j in 0..k {
                let g = post[j];
                if g == 0.0 {
                    continue;
                }
                nk[j] += g;
                for d in 0..dim {
                    let gx = g * x[d];
                    s1[j][d] += gx;
                    s2[j][d] += gx * x[d];
                }
            }
        }
        ll /= n;
        let converged = trace.last().is_some_and(|prev| ll - prev < params.tol);
        trace.push(ll);
        if converged {
            break;
        }

        // M-step.
        for j in 0..k {
            if nk[j] <= 1e-12 * n {
                // Starved component: keep its parameters, minimal weight.
                model.weights[j] = 1e-12;
                continue;
            }
            let mean: Vec<f64> = s1[j].iter().map(|v| v / nk[j]).collect();
            model.variances[j] = (0..dim)
                .map(|d| (s2[j][d] / nk[j] - mean[d] * mean[d]).max(floor))
                .collect();
            model.means[j] = mean;
            model.weights[j] = nk[j] / n;
        }
        let total: f64 = model.weights.iter().sum();
        model.weights.iter_mut().for_each(|w| *w /= total);
    }
    Ok(GmmFit {
        model,
        log_likelihoods: trace,
    })
}
