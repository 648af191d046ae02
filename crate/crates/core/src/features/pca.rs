use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Mean-centering followed by projection onto the top principal directions.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `dim` rows of orthonormal directions, each `mean.len()` long.
    pub components: Vec<Vec<f64>>,
    /// Sample covariance eigenvalue of each retained direction.
    pub variances: Vec<f64>,
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.components.len()
    }
}

/// Fits `dim` principal directions of `samples`.
///
/// Fails with [`Error::RankDeficient`] when the centered data spans fewer
/// than `dim` directions.
pub fn pca_fit(samples: &[Vec<f64>], dim: usize) -> Result<PcaModel> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::NotEnoughSamples { needed: 2, got: n });
    }
    let d = samples[0].len();
    if let Some(bad) = samples.iter().find(|s| s.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: bad.len(),
        });
    }
    if dim == 0 || dim > d {
        return Err(Error::Invalid(format!(
            "PCA target dimension {dim} must be in 1..={d}"
        )));
    }

    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut centered = vec![0.0; d];
    for s in samples {
        for ((c, v), m) in centered.iter_mut().zip(s).zip(&mean) {
            *c = v - m;
        }
        for i in 0..d {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            for j in i..d {
                cov[(i, j)] += ci * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / (n - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let tol = top * 1e-10 * d as f64;
    let rank = order
        .iter()
        .filter(|&&i| eig.eigenvalues[i] > tol && eig.eigenvalues[i] > 0.0)
        .count();
    if rank < dim {
        return Err(Error::RankDeficient {
            requested: dim,
            rank,
        });
    }

    let mut components = Vec::with_capacity(dim);
    let mut variances = Vec::with_capacity(dim);
    for &i in order.iter().take(dim) {
        let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        // Sign convention: the largest-magnitude entry is positive.
        let pivot = v
            .iter()
            .cloned()
            .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        variances.push(eig.eigenvalues[i]);
    }
    Ok(PcaModel {
        mean,
        components,
        variances,
    })
}

pub fn pca_apply(model: &PcaModel, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            got: x.len(),
        });
    }
    Ok(model
        .components
        .iter()
        .map(|c| {
            c.iter()
                .zip(x)
                .zip(&model.mean)
                .map(|((ci, xi), mi)| ci * (xi - mi))
                .sum()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
        // Box-Muller
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn exact_subspace_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // 2-dim data embedded in 5 dims
        let basis = [[1.0, 2.0, 0.0, -1.0, 0.5], [0.0, 1.0, 1.0, 1.0, -2.0]];
        let offset = [3.0, -1.0, 0.0, 2.0, 1.0];
        let samples: Vec<Vec<f64>> = (0..40)
            .map(|_| {
                let (a, b) = (gaussian(&mut rng), gaussian(&mut rng));
                (0..5).map(|i| offset[i] + a * basis[0][i] + b * basis[1][i]).collect()
            })
            .collect();
        let model = pca_fit(&samples, 2).unwrap();
        for s in &samples {
            let y = pca_apply(&model, s).unwrap();
            let mut rec = model.mean.clone();
            for (c, yc) in model.components.iter().zip(&y) {
                for (r, ci) in rec.iter_mut().zip(c) {
                    *r += yc * ci;
                }
            }
            for (r, v) in rec.iter().zip(s) {
                assert!((r - v).abs() < 1e-8);
            }
        }
        // a third direction does not exist
        match pca_fit(&samples, 3) {
            Err(Error::RankDeficient { requested: 3, rank: 2 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn projected_mean_is_zero_and_basis_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..6).map(|i| gaussian(&mut rng) * (i + 1) as f64 + i as f64).collect())
            .collect();
        let model = pca_fit(&samples, 4).unwrap();
        let mut mean = vec![0.0; 4];
        for s in &samples {
            for (m, v) in mean.iter_mut().zip(pca_apply(&model, s).unwrap()) {
                *m += v / samples.len() as f64;
            }
        }
        assert!(mean.iter().all(|m| m.abs() < 1e-9));
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot(&model.components[i], &model.components[j]) - expect).abs() < 1e-6);
            }
        }
    }

    /// Independent oracle: power iteration with deflation on the sample covariance.
    fn power_iteration_eigenvalues(samples: &[Vec<f64>], count: usize) -> Vec<f64> {
        let n = samples.len() as f64;
        let d = samples[0].len();
        let mean: Vec<f64> = (0..d).map(|j| samples.iter().map(|s| s[j]).sum::<f64>() / n).collect();
        let mut cov = vec![vec![0.0; d]; d];
        for s in samples {
            for i in 0..d {
                for j in 0..d {
                    cov[i][j] += (s[i] - mean[i]) * (s[j] - mean[j]) / (n - 1.0);
                }
            }
        }
        let mut out = Vec::new();
        for _ in 0..count {
            let mut v = vec![1.0; d];
            let mut lambda = 0.0;
            for _ in 0..5000 {
                let w: Vec<f64> = (0..d).map(|i| dot(&cov[i], &v)).collect();
                let norm = dot(&w, &w).sqrt();
                v = w.iter().map(|x| x / norm).collect();
                lambda = norm;
            }
            for i in 0..d {
                for j in 0..d {
                    cov[i][j] -= lambda * v[i] * v[j];
                }
            }
            out.push(lambda);
        }
        out
    }

    #[test]
    fn projected_variance_matches_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scales = [4.0, 2.5, 1.5, 0.7, 0.3];
        let samples: Vec<Vec<f64>> = (0..500)
            .map(|_| {
                let z: Vec<f64> = scales.iter().map(|s| s * gaussian(&mut rng)).collect();
                // mix coordinates so the principal axes are not the canonical ones
                vec![z[0] + z[1], z[0] - z[1], z[2] + 0.5 * z[3], z[3] - 0.5 * z[2], z[4]]
            })
            .collect();
        let model = pca_fit(&samples, 3).unwrap();
        let oracle = power_iteration_eigenvalues(&samples, 3);
        let n = samples.len() as f64;
        for k in 0..3 {
            let var = samples
                .iter()
                .map(|s| pca_apply(&model, s).unwrap()[k].powi(2))
                .sum::<f64>()
                / (n - 1.0);
            assert!((var - oracle[k]).abs() < 1e-6 * oracle[k], "{var} vs {}", oracle[k]);
            assert!((model.variances[k] - oracle[k]).abs() < 1e-6 * oracle[k]);
        }
    }

    #[test]
    fn preserves_inner_products_in_subspace() {
        let model = pca_fit(
            &[
                vec![0.0, 0.0, 0.0],
                vec![1.0, 1.0, 0.0],
                vec![2.0, -1.0, 0.0],
                vec![-1.0, 3.0, 0.0],
            ],
            2,
        )
        .unwrap();
        let a = [model.mean[0] + 0.3, model.mean[1] - 1.2, model.mean[2]];
        let b = [model.mean[0] - 2.0, model.mean[1] + 0.4, model.mean[2]];
        let pa = pca_apply(&model, &a).unwrap();
        let pb = pca_apply(&model, &b).unwrap();
        let ca: Vec<f64> = a.iter().zip(&model.mean).map(|(x, m)| x - m).collect();
        let cb: Vec<f64> = b.iter().zip(&model.mean).map(|(x, m)| x - m).collect();
        assert!((dot(&pa, &pb) - dot(&ca, &cb)).abs() < 1e-6);
    }

    #[test]
    fn dimension_errors() {
        let model = pca_fit(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![2.0, 2.5]], 1).unwrap();
        assert!(pca_apply(&model, &[1.0]).is_err());
        assert!(pca_fit(&[vec![0.0, 1.0]], 1).is_err());
    }
}
