//! Seeded draws from finite Gaussian mixtures.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::Deserialize;

use crate::components::linalg::{mvn_ln_pdf, sample_mvn, Spd};
use crate::data::{relabel_contiguous, Dataset, Partition};
use crate::error::{Error, Result};
use crate::special::log_sum_exp;

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covs: Vec<Spd>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecFile {
    weights: Vec<f64>,
    component: Vec<ComponentFile>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ComponentFile {
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

impl MixtureSpec {
    pub fn new(weights: Vec<f64>, means: Vec<DVector<f64>>, covs: Vec<DMatrix<f64>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || covs.len() != k {
            return Err(Error::invalid("a mixture needs matching numbers of weights, means and covariances"));
        }
        if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::invalid("mixture weights must be positive"));
        }
        if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("mixture weights must sum to 1"));
        }
        let p = means[0].len();
        if p == 0 {
            return Err(Error::invalid("mixture dimension must be positive"));
        }
        let mut spd = Vec::with_capacity(k);
        for (m, c) in means.iter().zip(covs) {
            if m.len() != p || c.nrows() != p || c.ncols() != p {
                return Err(Error::Dimension {
                    expected: p,
                    got: m.len().max(c.nrows()).max(c.ncols()),
                });
            }
            if (&c - c.transpose()).amax() > 1e-12 * c.amax().max(1.0) {
                return Err(Error::invalid("mixture covariances must be symmetric"));
            }
            let cov = nalgebra::Cholesky::new(c.clone())
                .map(|_| Spd::new(c))
                .ok_or_else(|| Error::invalid("mixture covariances must be positive definite"))??;
            spd.push(cov);
        }
        Ok(MixtureSpec {
            weights,
            means,
            covs: spd,
        })
    }

    /// Reads a TOML spec: `weights = [...]` and one `[[component]]` table with
    /// `mean` and row-wise `cov` per weight.
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        let f: SpecFile = toml::from_str(text).map_err(|e| Error::parse(origin, e.to_string()))?;
        let mut means = Vec::new();
        let mut covs = Vec::new();
        for c in f.component {
            let p = c.mean.len();
            if c.cov.len() != p || c.cov.iter().any(|r| r.len() != p) {
                return Err(Error::parse(origin, "each cov must be a square matrix matching its mean"));
            }
            means.push(DVector::from_vec(c.mean));
            covs.push(DMatrix::from_row_iterator(p, p, c.cov.into_iter().flatten()));
        }
        MixtureSpec::new(f.weights, means, covs)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        MixtureSpec::from_toml_str(&std::fs::read_to_string(path)?, &path.display().to_string())
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, k: usize) -> &DVector<f64> {
        &self.means[k]
    }

    pub fn cov(&self, k: usize) -> &DMatrix<f64> {
        &self.covs[k].matrix
    }
}

/// 45° rotation in the plane.
pub fn rotation_45() -> DMatrix<f64> {
    let (s, c) = std::f64::consts::FRAC_PI_4.sin_cos();
    DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
}

/// Four bivariate components with weights (0.44, 0.30, 0.25, 0.01).
///
/// The second covariance is a rotated `2I`, which is `2I` itself.
pub fn benchmark_spec() -> MixtureSpec {
    let v = |a: f64, b: f64| DVector::from_vec(vec![a, b]);
    let diag = |a: f64, b: f64| DMatrix::from_row_slice(2, 2, &[a, 0.0, 0.0, b]);
    MixtureSpec::new(
        vec![0.44, 0.30, 0.25, 0.01],
        vec![v(4.0, 4.0), v(7.0, 4.0), v(6.0, 2.0), v(8.0, 11.0)],
        vec![diag(2.0, 2.0), diag(2.0, 2.0), diag(3.0, 0.1), diag(0.1, 0.1)],
    )
    .expect("benchmark spec is valid")
}

/// Draws `n` labelled observations. The returned truth is relabelled by first
/// appearance, so components with no draws are absent.
pub fn generate<R: Rng + ?Sized>(spec: &MixtureSpec, n: usize, rng: &mut R) -> Result<(Dataset, Partition)> {
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    let cat = WeightedIndex::new(&spec.weights).map_err(|e| Error::invalid(e.to_string()))?;
    let p = spec.dim();
    let mut values = Vec::with_capacity(n * p);
    let mut raw = Vec::with_capacity(n);
    for _ in 0..n {
        let k = cat.sample(rng);
        raw.push(k);
        values.extend(sample_mvn(&spec.means[k], &spec.covs[k], rng).iter());
    }
    Ok((Dataset::new(values, n, p)?, relabel_contiguous(&raw)))
}

/// `log Σ_k π_k N(x | μ_k, Σ_k)`.
pub fn mixture_logdensity(spec: &MixtureSpec, x: &[f64]) -> Result<f64> {
    if x.len() != spec.dim() {
        return Err(Error::Dimension {
            expected: spec.dim(),
            got: x.len(),
        });
    }
    let terms: Vec<f64> = (0..spec.k())
        .map(|k| spec.weights[k].ln() + mvn_ln_pdf(x, &spec.means[k], &spec.covs[k]))
        .collect();
    Ok(log_sum_exp(&terms))
}
