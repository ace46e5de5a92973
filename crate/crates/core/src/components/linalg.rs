//! Dense Gaussian / Wishart helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::special::{ln_multi_gamma, LN_2PI};

/// A symmetric positive-definite matrix with its lower Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct Spd {
    pub matrix: DMatrix<f64>,
    pub chol: DMatrix<f64>,
    pub log_det: f64,
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

impl Spd {
    /// Factorises `m`, retrying once with jitter `1e-10 * trace / p` on the diagonal.
    pub fn new(m: DMatrix<f64>) -> Result<Spd> {
        let m = symmetrize(&m);
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("matrix has non-finite entries"));
        }
        if let Some(c) = Cholesky::new(m.clone()) {
            return Ok(Spd::from_cholesky(m, c));
        }
        let p = m.nrows();
        let jitter = 1e-10 * m.trace().abs().max(f64::MIN_POSITIVE) / p as f64;
        let jittered = &m + DMatrix::identity(p, p) * jitter;
        match Cholesky::new(jittered.clone()) {
            Some(c) => Ok(Spd::from_cholesky(jittered, c)),
            None => Err(Error::numeric("matrix is not positive definite even after jitter")),
        }
    }

    fn from_cholesky(matrix: DMatrix<f64>, c: Cholesky<f64, Dyn>) -> Spd {
        let chol = c.l();
        let log_det = 2.0 * chol.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Spd { matrix, chol, log_det }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Solves `L y = b`.
    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol
            .solve_lower_triangular(b)
            .expect("Cholesky factor has a positive diagonal")
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let p = self.dim();
        let linv = self
            .chol
            .solve_lower_triangular(&DMatrix::identity(p, p))
            .expect("Cholesky factor has a positive diagonal");
        symmetrize(&(linv.transpose() * linv))
    }

    /// `A^{-1} b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let y = self.solve_lower(b);
        self.chol
            .tr_solve_lower_triangular(&y)
            .expect("Cholesky factor has a positive diagonal")
    }

    /// `tr(A^{-1} B)`.
    pub fn trace_solve(&self, b: &DMatrix<f64>) -> f64 {
        let y = self
            .chol
            .solve_lower_triangular(b)
            .expect("Cholesky factor has a positive diagonal");
        let z = self
            .chol
            .tr_solve_lower_triangular(&y)
            .expect("Cholesky factor has a positive diagonal");
        z.trace()
    }

    /// `(x - mean)^T A^{-1} (x - mean)`.
    pub fn mahalanobis(&self, x: &[f64], mean: &DVector<f64>) -> f64 {
        let diff = DVector::from_iterator(x.len(), x.iter().zip(mean.iter()).map(|(a, b)| a - b));
        self.solve_lower(&diff).norm_squared()
    }
}

pub fn mvn_ln_pdf(x: &[f64], mean: &DVector<f64>, cov: &Spd) -> f64 {
    let p = x.len() as f64;
    -0.5 * (p * LN_2PI + cov.log_det + cov.mahalanobis(x, mean))
}

pub fn sample_mvn<R: Rng + ?Sized>(mean: &DVector<f64>, cov: &Spd, rng: &mut R) -> DVector<f64> {
    let p = mean.len();
    let z = DVector::from_iterator(p, (0..p).map(|_| StandardNormal.sample(rng)));
    mean + &cov.chol * z
}

/// Bartlett draw from Wishart(`df`, `scale`).
pub fn sample_wishart<R: Rng + ?Sized>(df: f64, scale: &Spd, rng: &mut R) -> Result<DMatrix<f64>> {
    let p = scale.dim();
    if !(df > p as f64 - 1.0) {
        return Err(Error::numeric(format!("Wishart degrees of freedom {df} must exceed {}", p - 1)));
    }
    let mut a = DMatrix::<f64>::zeros(p, p);
    for i in 0..p {
        let chi = ChiSquared::new(df - i as f64).map_err(|e| Error::numeric(e.to_string()))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = StandardNormal.sample(rng);
        }
    }
    let la = &scale.chol * a;
    Ok(symmetrize(&(&la * la.transpose())))
}

/// Draw from InverseWishart(`df`, `scale`) as the inverse of a Wishart(`df`, `scale^{-1}`) draw.
pub fn sample_inv_wishart<R: Rng + ?Sized>(df: f64, scale: &Spd, rng: &mut R) -> Result<Spd> {
    let inv_scale = Spd::new(scale.inverse())?;
    let w = Spd::new(sample_wishart(df, &inv_scale, rng)?)?;
    Spd::new(w.inverse())
}

pub fn inv_wishart_ln_pdf(x: &Spd, df: f64, scale: &Spd) -> f64 {
    let p = x.dim() as f64;
    0.5 * df * scale.log_det
        - 0.5 * df * p * std::f64::consts::LN_2
        - ln_multi_gamma(x.dim(), 0.5 * df)
        - 0.5 * (df + p + 1.0) * x.log_det
        - 0.5 * x.trace_solve(&scale.matrix)
}

pub fn wishart_ln_pdf(x: &Spd, df: f64, scale: &Spd) -> f64 {
    let p = x.dim() as f64;
    0.5 * (df - p - 1.0) * x.log_det
        - 0.5 * scale.trace_solve(&x.matrix)
        - 0.5 * df * p * std::f64::consts::LN_2
        - 0.5 * df * scale.log_det
        - ln_multi_gamma(x.dim(), 0.5 * df)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn spd2(a: f64, b: f64, c: f64) -> Spd {
        Spd::new(DMatrix::from_row_slice(2, 2, &[a, b, b, c])).unwrap()
    }

    #[test]
    fn mvn_density_hand_expansion() {
        // Σ = [[2, 0.5], [0.5, 1]], μ = (1, -1), x = (0.3, 0.2)
        let cov = spd2(2.0, 0.5, 1.0);
        let mean = DVector::from_vec(vec![1.0, -1.0]);
        let x = [0.3, 0.2];
        let det: f64 = 2.0 * 1.0 - 0.25;
        // Σ^{-1} = [[1, -0.5], [-0.5, 2]] / det
        let (d0, d1) = (x[0] - 1.0, x[1] + 1.0);
        let quad = (d0 * d0 * 1.0 - 2.0 * 0.5 * d0 * d1 + 2.0 * d1 * d1) / det;
        let expected = -LN_2PI - 0.5 * det.ln() - 0.5 * quad;
        assert!((mvn_ln_pdf(&x, &mean, &cov) - expected).abs() < 1e-13);
    }

    #[test]
    fn jitter_rescues_rank_deficient_once() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let s = Spd::new(m).unwrap();
        assert!(s.log_det.is_finite());
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(Spd::new(bad).unwrap_err().is_numeric());
    }

    #[test]
    fn wishart_mean_matches_df_times_scale() {
        let scale = spd2(1.5, 0.3, 0.7);
        let df = 5.5;
        let mut rng = RngStream::new(3, 0).rng();
        let reps = 40_000;
        let mut acc = DMatrix::<f64>::zeros(2, 2);
        for _ in 0..reps {
            acc += sample_wishart(df, &scale, &mut rng).unwrap();
        }
        acc /= reps as f64;
        let expected = &scale.matrix * df;
        for (a, e) in acc.iter().zip(expected.iter()) {
            assert!((a - e).abs() < 0.05 * e.abs().max(1.0), "{acc} vs {expected}");
        }
    }

    #[test]
    fn inverse_wishart_mean() {
        // E[Σ] = Ψ / (ν - p - 1)
        let scale = spd2(2.0, -0.4, 1.0);
        let df = 9.0;
        let mut rng = RngStream::new(4, 0).rng();
        let reps = 40_000;
        let mut acc = DMatrix::<f64>::zeros(2, 2);
        for _ in 0..reps {
            acc += sample_inv_wishart(df, &scale, &mut rng).unwrap().matrix;
        }
        acc /= reps as f64;
        let expected = &scale.matrix / (df - 3.0);
        for (a, e) in acc.iter().zip(expected.iter()) {
            assert!((a - e).abs() < 0.03, "{acc} vs {expected}");
        }
    }

    #[test]
    fn one_dimensional_densities_reduce() {
        // IW(ν, ψ) in 1-D is InverseGamma(ν/2, ψ/2)
        let x = Spd::new(DMatrix::from_element(1, 1, 0.8)).unwrap();
        let psi = Spd::new(DMatrix::from_element(1, 1, 1.3)).unwrap();
        let nu = 3.0;
        let (a, b) = (nu / 2.0, 1.3 / 2.0);
        let inv_gamma = a * f64::ln(b) - crate::special::ln_gamma(a) - (a + 1.0) * f64::ln(0.8) - b / 0.8;
        assert!((inv_wishart_ln_pdf(&x, nu, &psi) - inv_gamma).abs() < 1e-12);
        // Wishart(ν, v) in 1-D is Gamma(ν/2, rate 1/(2v))
        let gamma = crate::special::gamma_ln_pdf(0.8, nu / 2.0, 1.0 / (2.0 * 1.3));
        assert!((wishart_ln_pdf(&x, nu, &psi) - gamma).abs() < 1e-12);
    }
}
