//! Gaussian component models.
//!
//! * [`ModelKind::Full`]: `μ ~ N(μ̂, Ĉ)`, `Σ ~ IW(p, Ĉ)` with the empirical
//!   mean and covariance of the data.
//! * [`ModelKind::Hier`]: per-cluster hyper-state `(m, C, ν, W)` with
//!   `m ~ N(μ̂, Ĉ)`, `C ~ IW(p, Ĉ)`, `ν - p + 1 ~ Gamma(2, rate 2)`,
//!   `W ~ IW(p, Ĉ)`, then `μ ~ N(m, C)`, `Σ ~ IW(ν, W)`.
//! * [`ModelKind::Diag`]: independent dimensions with `λ ~ Gamma(1, 1)`,
//!   `μ | λ ~ N(0, 1/λ)`; data must be standardized.
//!
//! A parameter update is one fixed-order sweep of block-wise draws.
//! The `ν` and `W` blocks of the hierarchical model are Metropolis-Hastings
//! steps in [`gibbs_draw`], which leaves the conditional invariant.
//! [`gibbs_update`] is the proposal kernel of split-merge moves and needs a
//! density without atoms, so the hierarchical model uses a different
//! proposal there, see [`gibbs_update`].
//! [`transition_logdensity`] evaluates that kernel exactly.

pub mod linalg;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::special::{gamma_ln_pdf, ln_gamma, normal_ln_pdf, LN_2PI};
use linalg::{inv_wishart_ln_pdf, mvn_ln_pdf, sample_inv_wishart, sample_mvn, sample_wishart, wishart_ln_pdf, Spd};

/// Proposal sd of the random walk on `log(ν - p + 1)`.
pub const NU_STEP_SD: f64 = 0.5;
const NU_SHAPE: f64 = 2.0;
const NU_RATE: f64 = 2.0;

/// Empirical mean `μ̂` and covariance `Ĉ` (denominator `N`).
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalPrior {
    pub mean: DVector<f64>,
    pub cov: Spd,
    cov_inv: DMatrix<f64>,
}

impl EmpiricalPrior {
    pub fn from_dataset(data: &Dataset) -> Result<Self> {
        let p = data.dim();
        let mean = DVector::from_iterator(p, (0..p).map(|d| data.column_mean(d)));
        let mut cov = DMatrix::<f64>::zeros(p, p);
        for row in data.rows() {
            let diff = DVector::from_iterator(p, row.iter().zip(mean.iter()).map(|(x, m)| x - m));
            cov += &diff * diff.transpose();
        }
        cov /= data.n() as f64;
        Self::new(mean, cov)
    }

    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::Dimension {
                expected: mean.len(),
                got: cov.nrows(),
            });
        }
        let cov = Spd::new(cov).map_err(|_| Error::numeric("empirical covariance is not positive definite"))?;
        let cov_inv = cov.inverse();
        Ok(EmpiricalPrior { mean, cov, cov_inv })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Full,
    Hier,
    Diag,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Full => "mvn-full",
            ModelKind::Hier => "mvn-full-hier",
            ModelKind::Diag => "mvn-diag",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mvn-full" => Ok(ModelKind::Full),
            "mvn-full-hier" => Ok(ModelKind::Hier),
            "mvn-diag" => Ok(ModelKind::Diag),
            other => Err(Error::invalid(format!(
                "unknown model '{other}'; expected mvn-full, mvn-full-hier or mvn-diag"
            ))),
        }
    }
}

/// An initialised component model. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentModel {
    kind: ModelKind,
    dim: usize,
    base: Option<EmpiricalPrior>,
}

impl ComponentModel {
    /// The diagonal model requires standardized data.
    pub fn from_dataset(kind: ModelKind, data: &Dataset) -> Result<Self> {
        match kind {
            ModelKind::Diag => {
                if !data.is_standardized() {
                    return Err(Error::invalid("the diagonal model expects standardized data"));
                }
                Ok(Self::diag(data.dim()))
            }
            _ => Ok(Self::with_prior(kind, EmpiricalPrior::from_dataset(data)?)),
        }
    }

    pub fn diag(dim: usize) -> Self {
        ComponentModel {
            kind: ModelKind::Diag,
            dim,
            base: None,
        }
    }

    /// `kind` must be `Full` or `Hier`.
    pub fn with_prior(kind: ModelKind, base: EmpiricalPrior) -> Self {
        assert!(kind != ModelKind::Diag, "the diagonal model has a fixed prior");
        ComponentModel {
            kind,
            dim: base.dim(),
            base: Some(base),
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn base(&self) -> &EmpiricalPrior {
        self.base.as_ref().expect("full-covariance models carry an empirical prior")
    }
}

/// Per-cluster hyper-state of the hierarchical model.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperState {
    pub m: DVector<f64>,
    pub c: Spd,
    pub nu: f64,
    pub w: Spd,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Scale {
    Full(Spd),
    /// Per-dimension precisions.
    Diag(DVector<f64>),
}

/// Parameters of one cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterParams {
    pub mean: DVector<f64>,
    pub scale: Scale,
    pub hyper: Option<HyperState>,
}

impl ClusterParams {
    pub fn full(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        Ok(ClusterParams {
            mean,
            scale: Scale::Full(Spd::new(cov)?),
            hyper: None,
        })
    }

    pub fn diag(mean: Vec<f64>, precision: Vec<f64>) -> Result<Self> {
        if mean.len() != precision.len() {
            return Err(Error::Dimension {
                expected: mean.len(),
                got: precision.len(),
            });
        }
        if precision.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::invalid("precisions must be positive and finite"));
        }
        Ok(ClusterParams {
            mean: DVector::from_vec(mean),
            scale: Scale::Diag(DVector::from_vec(precision)),
            hyper: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn cov(&self) -> Option<&Spd> {
        match &self.scale {
            Scale::Full(s) => Some(s),
            Scale::Diag(_) => None,
        }
    }

    pub fn precision(&self) -> Option<&DVector<f64>> {
        match &self.scale {
            Scale::Diag(l) => Some(l),
            Scale::Full(_) => None,
        }
    }

    fn full_cov(&self) -> Result<&Spd> {
        self.cov().ok_or_else(|| Error::invalid("expected full-covariance parameters"))
    }

    fn diag_precision(&self) -> Result<&DVector<f64>> {
        self.precision().ok_or_else(|| Error::invalid("expected diagonal parameters"))
    }

    fn hyper_state(&self) -> Result<&HyperState> {
        self.hyper
            .as_ref()
            .ok_or_else(|| Error::invalid("hierarchical parameters need a hyper-state"))
    }
}

/// Count, sum and sum of outer products of a member set.
#[derive(Debug, Clone, PartialEq)]
pub struct SuffStats {
    pub n: usize,
    pub sum: DVector<f64>,
    pub outer: DMatrix<f64>,
}

impl SuffStats {
    pub fn empty(p: usize) -> Self {
        SuffStats {
            n: 0,
            sum: DVector::zeros(p),
            outer: DMatrix::zeros(p, p),
        }
    }

    pub fn from_members(data: &Dataset, members: &[usize]) -> Self {
        let mut s = SuffStats::empty(data.dim());
        for &i in members {
            s.add(data.row(i));
        }
        s
    }

    pub fn add(&mut self, x: &[f64]) {
        self.n += 1;
        for a in 0..x.len() {
            self.sum[a] += x[a];
            for b in 0..x.len() {
                self.outer[(a, b)] += x[a] * x[b];
            }
        }
    }

    /// `Σ (x - μ)(x - μ)^T` over the members.
    pub fn scatter_about(&self, mu: &DVector<f64>) -> DMatrix<f64> {
        let s_mu = &self.sum * mu.transpose();
        &self.outer - &s_mu - s_mu.transpose() + mu * mu.transpose() * self.n as f64
    }

    fn sq_dev(&self, d: usize, mu: f64) -> f64 {
        (self.outer[(d, d)] - 2.0 * mu * self.sum[d] + self.n as f64 * mu * mu).max(0.0)
    }
}

/// Component log-density `log f(x | θ)`.
pub fn loglik(x: &[f64], params: &ClusterParams) -> f64 {
    match &params.scale {
        Scale::Full(cov) => mvn_ln_pdf(x, &params.mean, cov),
        Scale::Diag(prec) => x
            .iter()
            .zip(params.mean.iter())
            .zip(prec.iter())
            .map(|((&xi, &m), &l)| 0.5 * (l.ln() - LN_2PI - l * (xi - m) * (xi - m)))
            .sum(),
    }
}

/// [`loglik`] with dimension and finiteness checks.
pub fn checked_loglik(x: &[f64], params: &ClusterParams) -> Result<f64> {
    if x.len() != params.dim() {
        return Err(Error::Dimension {
            expected: params.dim(),
            got: x.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) || params.mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite input to the component density"));
    }
    Ok(loglik(x, params))
}

fn nu_offset(p: usize) -> f64 {
    p as f64 - 1.0
}

fn nu_prior_ln_pdf(nu: f64, p: usize) -> f64 {
    gamma_ln_pdf(nu - nu_offset(p), NU_SHAPE, NU_RATE)
}

/// Draw of all cluster parameters from the prior.
pub fn sample_prior<R: Rng + ?Sized>(model: &ComponentModel, rng: &mut R) -> Result<ClusterParams> {
    let p = model.dim();
    match model.kind {
        ModelKind::Full => {
            let base = model.base();
            let mean = sample_mvn(&base.mean, &base.cov, rng);
            let cov = sample_inv_wishart(p as f64, &base.cov, rng)?;
            Ok(ClusterParams {
                mean,
                scale: Scale::Full(cov),
                hyper: None,
            })
        }
        ModelKind::Hier => {
            let base = model.base();
            let m = sample_mvn(&base.mean, &base.cov, rng);
            let c = sample_inv_wishart(p as f64, &base.cov, rng)?;
            let g = Gamma::new(NU_SHAPE, 1.0 / NU_RATE).expect("valid gamma");
            let nu = nu_offset(p) + g.sample(rng);
            let w = sample_inv_wishart(p as f64, &base.cov, rng)?;
            let mean = sample_mvn(&m, &c, rng);
            let cov = sample_inv_wishart(nu, &w, rng)?;
            Ok(ClusterParams {
                mean,
                scale: Scale::Full(cov),
                hyper: Some(HyperState { m, c, nu, w }),
            })
        }
        ModelKind::Diag => {
            let g = Gamma::new(1.0, 1.0).expect("valid gamma");
            let mut mean = Vec::with_capacity(p);
            let mut prec = Vec::with_capacity(p);
            for _ in 0..p {
                let l: f64 = g.sample(rng);
                let z: f64 = StandardNormal.sample(rng);
                prec.push(l);
                mean.push(z / l.sqrt());
            }
            ClusterParams::diag(mean, prec)
        }
    }
}

/// Prior log-density of all cluster parameters.
pub fn prior_logdensity(model: &ComponentModel, params: &ClusterParams) -> Result<f64> {
    let p = model.dim();
    match model.kind {
        ModelKind::Full => {
            let base = model.base();
            Ok(mvn_ln_pdf(params.mean.as_slice(), &base.mean, &base.cov)
                + inv_wishart_ln_pdf(params.full_cov()?, p as f64, &base.cov))
        }
        ModelKind::Hier => {
            let base = model.base();
            let h = params.hyper_state()?;
            Ok(mvn_ln_pdf(h.m.as_slice(), &base.mean, &base.cov)
                + inv_wishart_ln_pdf(&h.c, p as f64, &base.cov)
                + nu_prior_ln_pdf(h.nu, p)
                + inv_wishart_ln_pdf(&h.w, p as f64, &base.cov)
                + mvn_ln_pdf(params.mean.as_slice(), &h.m, &h.c)
                + inv_wishart_ln_pdf(params.full_cov()?, h.nu, &h.w))
        }
        ModelKind::Diag => {
            let prec = params.diag_precision()?;
            Ok(params
                .mean
                .iter()
                .zip(prec.iter())
                .map(|(&mu, &l)| gamma_ln_pdf(l, 1.0, 1.0) + normal_ln_pdf(mu, 0.0, 1.0 / l))
                .sum())
        }
    }
}

/// Normal full conditional of a mean with prior `N(prior_mean, prior_cov)`
/// given `n` observations of covariance `cov` summing to `sum`.
fn mean_conditional(
    prior_mean: &DVector<f64>,
    prior_cov_inv: &DMatrix<f64>,
    cov: &Spd,
    n: usize,
    sum: &DVector<f64>,
) -> Result<(DVector<f64>, Spd)> {
    let cov_inv = cov.inverse();
    let precision = Spd::new(prior_cov_inv + &cov_inv * n as f64)?;
    let rhs = prior_cov_inv * prior_mean + &cov_inv * sum;
    let mean = precision.solve(&rhs);
    Ok((mean, Spd::new(precision.inverse())?))
}

fn nu_target(nu: f64, sigma: &Spd, w: &Spd, p: usize) -> f64 {
    nu_prior_ln_pdf(nu, p) + inv_wishart_ln_pdf(sigma, nu, w)
}

/// `log min(1, ratio)` for the `ν` random walk; NaN counts as rejection.
fn nu_log_accept(from: f64, to: f64, sigma: &Spd, w: &Spd, p: usize) -> f64 {
    let off = nu_offset(p);
    let r = nu_target(to, sigma, w, p) - nu_target(from, sigma, w, p) + (to - off).ln() - (from - off).ln();
    if r.is_nan() {
        f64::NEG_INFINITY
    } else {
        r.min(0.0)
    }
}

fn w_log_accept(from: &Spd, to: &Spd, base: &EmpiricalPrior, p: usize) -> f64 {
    let r = inv_wishart_ln_pdf(to, p as f64, &base.cov) - inv_wishart_ln_pdf(from, p as f64, &base.cov);
    if r.is_nan() {
        f64::NEG_INFINITY
    } else {
        r.min(0.0)
    }
}

/// `μ | Σ` then `Σ | μ` under the empirical `N(μ̂, Ĉ)`, `IW(p, Ĉ)` prior.
fn base_mean_cov_draw<R: Rng + ?Sized>(
    base: &EmpiricalPrior,
    cov_from: &Spd,
    stats: &SuffStats,
    rng: &mut R,
) -> Result<(DVector<f64>, Spd)> {
    let p = base.mean.len();
    let (mm, mc) = mean_conditional(&base.mean, &base.cov_inv, cov_from, stats.n, &stats.sum)?;
    let mean = sample_mvn(&mm, &mc, rng);
    let scale = Spd::new(&base.cov.matrix + stats.scatter_about(&mean))?;
    let cov = sample_inv_wishart((p + stats.n) as f64, &scale, rng)?;
    Ok((mean, cov))
}

fn base_mean_cov_ln_pdf(base: &EmpiricalPrior, cov_from: &Spd, stats: &SuffStats, mean: &DVector<f64>, cov: &Spd) -> Result<f64> {
    let p = base.mean.len();
    let (mm, mc) = mean_conditional(&base.mean, &base.cov_inv, cov_from, stats.n, &stats.sum)?;
    let scale = Spd::new(&base.cov.matrix + stats.scatter_about(mean))?;
    Ok(mvn_ln_pdf(mean.as_slice(), &mm, &mc) + inv_wishart_ln_pdf(cov, (p + stats.n) as f64, &scale))
}

/// Gibbs blocks for `m` and `C`, MH blocks for `ν` and `W`; leaves the
/// hyper-state conditional invariant.
fn invariant_hyper<R: Rng + ?Sized>(
    base: &EmpiricalPrior,
    h: &HyperState,
    mean: &DVector<f64>,
    sigma: &Spd,
    rng: &mut R,
) -> Result<HyperState> {
    let p = mean.len();
    let (hm, hc) = mean_conditional(&base.mean, &base.cov_inv, &h.c, 1, mean)?;
    let m = sample_mvn(&hm, &hc, rng);
    let d = mean - &m;
    let c_scale = Spd::new(&base.cov.matrix + &d * d.transpose())?;
    let c = sample_inv_wishart((p + 1) as f64, &c_scale, rng)?;

    let eps: f64 = StandardNormal.sample(rng);
    let u: f64 = rng.random();
    let off = nu_offset(p);
    let nu_prop = off + (h.nu - off) * (NU_STEP_SD * eps).exp();
    let nu = if u.ln() < nu_log_accept(h.nu, nu_prop, sigma, &h.w, p) {
        nu_prop
    } else {
        h.nu
    };

    let w_prop = Spd::new(sample_wishart(nu + p as f64 + 1.0, sigma, rng)?)?;
    let u: f64 = rng.random();
    let w = if u.ln() < w_log_accept(&h.w, &w_prop, base, p) {
        w_prop
    } else {
        h.w.clone()
    };
    Ok(HyperState { m, c, nu, w })
}

/// Hyper-state proposal that depends only on the new `μ` and `Σ`:
/// `C ~ IW(p + 1, Ĉ + e eᵀ)` with `e = μ - μ̂`, `m | μ, C` exactly,
/// `ν` from its prior and `W ~ Wishart(ν + p + 1, Σ)`.
fn proposal_hyper<R: Rng + ?Sized>(
    base: &EmpiricalPrior,
    mean: &DVector<f64>,
    sigma: &Spd,
    rng: &mut R,
) -> Result<HyperState> {
    let p = mean.len();
    let c = sample_inv_wishart((p + 1) as f64, &proposal_c_scale(base, mean)?, rng)?;
    let (hm, hc) = mean_conditional(&base.mean, &base.cov_inv, &c, 1, mean)?;
    let m = sample_mvn(&hm, &hc, rng);
    let g = Gamma::new(NU_SHAPE, 1.0 / NU_RATE).expect("valid gamma");
    let nu = nu_offset(p) + g.sample(rng);
    let w = Spd::new(sample_wishart(nu + p as f64 + 1.0, sigma, rng)?)?;
    Ok(HyperState { m, c, nu, w })
}

fn proposal_c_scale(base: &EmpiricalPrior, mean: &DVector<f64>) -> Result<Spd> {
    let e = mean - &base.mean;
    Spd::new(&base.cov.matrix + &e * e.transpose())
}

fn proposal_hyper_ln_pdf(base: &EmpiricalPrior, mean: &DVector<f64>, sigma: &Spd, h: &HyperState) -> Result<f64> {
    let p = mean.len();
    let (hm, hc) = mean_conditional(&base.mean, &base.cov_inv, &h.c, 1, mean)?;
    Ok(inv_wishart_ln_pdf(&h.c, (p + 1) as f64, &proposal_c_scale(base, mean)?)
        + mvn_ln_pdf(h.m.as_slice(), &hm, &hc)
        + nu_prior_ln_pdf(h.nu, p)
        + wishart_ln_pdf(&h.w, h.nu + p as f64 + 1.0, sigma))
}

/// One invariant sweep without evaluating its density.
pub fn gibbs_draw<R: Rng + ?Sized>(
    model: &ComponentModel,
    params: &ClusterParams,
    stats: &SuffStats,
    rng: &mut R,
) -> Result<ClusterParams> {
    sweep_draw(model, params, stats, true, rng)
}

fn sweep_draw<R: Rng + ?Sized>(
    model: &ComponentModel,
    params: &ClusterParams,
    stats: &SuffStats,
    mh_accept: bool,
    rng: &mut R,
) -> Result<ClusterParams> {
    if stats.n == 0 {
        return sample_prior(model, rng);
    }
    let p = model.dim();
    match model.kind {
        ModelKind::Full => {
            let (mean, cov) = base_mean_cov_draw(model.base(), params.full_cov()?, stats, rng)?;
            Ok(ClusterParams {
                mean,
                scale: Scale::Full(cov),
                hyper: None,
            })
        }
        ModelKind::Hier if !mh_accept => {
            let base = model.base();
            let (mean, sigma) = base_mean_cov_draw(base, params.full_cov()?, stats, rng)?;
            let hyper = proposal_hyper(base, &mean, &sigma, rng)?;
            Ok(ClusterParams {
                mean,
                scale: Scale::Full(sigma),
                hyper: Some(hyper),
            })
        }
        ModelKind::Hier => {
            let base = model.base();
            let h = params.hyper_state()?;
            let (mm, mc) = mean_conditional(&h.m, &h.c.inverse(), params.full_cov()?, stats.n, &stats.sum)?;
            let mean = sample_mvn(&mm, &mc, rng);
            let s_scale = Spd::new(&h.w.matrix + stats.scatter_about(&mean))?;
            let sigma = sample_inv_wishart(h.nu + stats.n as f64, &s_scale, rng)?;
            let hyper = invariant_hyper(base, h, &mean, &sigma, rng)?;
            Ok(ClusterParams {
                mean,
                scale: Scale::Full(sigma),
                hyper: Some(hyper),
            })
        }
        ModelKind::Diag => {
            let mu_from = &params.mean;
            let shape = 1.0 + (stats.n as f64 + 1.0) / 2.0;
            let kappa = 1.0 + stats.n as f64;
            let mut mean = Vec::with_capacity(p);
            let mut prec = Vec::with_capacity(p);
            for d in 0..p {
                let rate = 1.0 + 0.5 * (mu_from[d] * mu_from[d] + stats.sq_dev(d, mu_from[d]));
                let g = Gamma::new(shape, 1.0 / rate).map_err(|e| Error::numeric(e.to_string()))?;
                let l: f64 = g.sample(rng);
                let z: f64 = StandardNormal.sample(rng);
                mean.push(stats.sum[d] / kappa + z / (l * kappa).sqrt());
                prec.push(l);
            }
            ClusterParams::diag(mean, prec)
        }
    }
}

/// One proposal sweep plus the log-density of the realised transition.
/// Identical to [`gibbs_draw`] except for the hierarchical model, where `μ`
/// and `Σ` are drawn as in the full model and the hyper-state is drawn given
/// the new `μ` and `Σ` alone. The launch hyper-state is barely informed by
/// data, and conditioning on it makes forward and reverse densities compare
/// unrelated draws.
pub fn gibbs_update<R: Rng + ?Sized>(
    model: &ComponentModel,
    params: &ClusterParams,
    stats: &SuffStats,
    rng: &mut R,
) -> Result<(ClusterParams, f64)> {
    let next = sweep_draw(model, params, stats, false, rng)?;
    let logdens = transition_logdensity(model, params, &next, stats)?;
    Ok((next, logdens))
}

/// Log-density of reaching `to` from `from` in one sweep given the members.
pub fn transition_logdensity(
    model: &ComponentModel,
    from: &ClusterParams,
    to: &ClusterParams,
    stats: &SuffStats,
) -> Result<f64> {
    if from.dim() != model.dim() || to.dim() != model.dim() {
        return Err(Error::Dimension {
            expected: model.dim(),
            got: if from.dim() != model.dim() { from.dim() } else { to.dim() },
        });
    }
    if stats.n == 0 {
        return prior_logdensity(model, to);
    }
    let p = model.dim();
    match model.kind {
        ModelKind::Full => base_mean_cov_ln_pdf(model.base(), from.full_cov()?, stats, &to.mean, to.full_cov()?),
        ModelKind::Hier => {
            let sigma = to.full_cov()?;
            Ok(base_mean_cov_ln_pdf(model.base(), from.full_cov()?, stats, &to.mean, sigma)?
                + proposal_hyper_ln_pdf(model.base(), &to.mean, sigma, to.hyper_state()?)?)
        }
        ModelKind::Diag => {
            let mu_from = &from.mean;
            let prec = to.diag_precision()?;
            let shape = 1.0 + (stats.n as f64 + 1.0) / 2.0;
            let kappa = 1.0 + stats.n as f64;
            let mut out = 0.0;
            for d in 0..p {
                let rate = 1.0 + 0.5 * (mu_from[d] * mu_from[d] + stats.sq_dev(d, mu_from[d]));
                out += gamma_ln_pdf(prec[d], shape, rate);
                out += normal_ln_pdf(to.mean[d], stats.sum[d] / kappa, 1.0 / (prec[d] * kappa));
            }
            Ok(out)
        }
    }
}

/// Normal-Gamma evidence of the members under the diagonal model; empty set gives 0.
pub fn marginal_loglik(model: &ComponentModel, stats: &SuffStats) -> Result<f64> {
    if model.kind != ModelKind::Diag {
        return Err(Error::invalid("closed-form marginal likelihood requires the diagonal model"));
    }
    if stats.n == 0 {
        return Ok(0.0);
    }
    let n = stats.n as f64;
    let kappa = 1.0 + n;
    let a_n = 1.0 + n / 2.0;
    let mut out = 0.0;
    for d in 0..model.dim() {
        let m_n = stats.sum[d] / kappa;
        let b_n = 1.0 + 0.5 * (stats.outer[(d, d)] - kappa * m_n * m_n).max(0.0);
        out += ln_gamma(a_n) - a_n * b_n.ln() - 0.5 * kappa.ln() - 0.5 * n * LN_2PI;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn stats_1d(xs: &[f64]) -> SuffStats {
        let mut s = SuffStats::empty(1);
        for &x in xs {
            s.add(&[x]);
        }
        s
    }

    fn hier_model() -> ComponentModel {
        let base = EmpiricalPrior::new(
            DVector::from_vec(vec![0.5, -0.2]),
            DMatrix::from_row_slice(2, 2, &[1.5, 0.3, 0.3, 0.8]),
        )
        .unwrap();
        ComponentModel::with_prior(ModelKind::Hier, base)
    }

    fn batch_sd(batch: &[f64]) -> f64 {
        let k = batch.len() as f64;
        let m = batch.iter().sum::<f64>() / k;
        (batch.iter().map(|b| (b - m).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt()
    }

    #[test]
    fn loglik_reference_values() {
        let p = ClusterParams::full(DVector::from_vec(vec![0.0]), DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert!((loglik(&[0.0], &p) + 0.918_938_533_204_672_7).abs() < 1e-14);
        let p = ClusterParams::diag(vec![0.4, -1.0], vec![1.0, 1.0]).unwrap();
        assert!((loglik(&[0.4, -1.0], &p) + LN_2PI).abs() < 1e-14);
        let p = ClusterParams::full(DVector::from_vec(vec![0.4, -1.0]), DMatrix::identity(2, 2)).unwrap();
        assert!((loglik(&[0.4, -1.0], &p) + LN_2PI).abs() < 1e-14);
        assert!(checked_loglik(&[f64::NAN, 0.0], &p).is_err());
        assert!(checked_loglik(&[0.0], &p).is_err());
    }

    #[test]
    fn loglik_integrates_to_one() {
        let p = ClusterParams::full(
            DVector::from_vec(vec![0.2, -0.1]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 0.9]),
        )
        .unwrap();
        let h = 0.02;
        let mut mass = 0.0;
        for i in 0..800 {
            for j in 0..800 {
                let x = -8.0 + (i as f64 + 0.5) * h;
                let y = -8.0 + (j as f64 + 0.5) * h;
                mass += loglik(&[x, y], &p).exp() * h * h;
            }
        }
        assert!((0.999..1.0001).contains(&mass), "mass {mass}");
    }

    #[test]
    fn diag_prior_precision_mean() {
        let model = ComponentModel::diag(1);
        let mut rng = RngStream::new(1, 0).rng();
        let reps = 100_000;
        let mut acc = 0.0;
        for _ in 0..reps {
            acc += sample_prior(&model, &mut rng).unwrap().precision().unwrap()[0];
        }
        assert!((acc / reps as f64 - 1.0).abs() < 0.01);
    }

    #[test]
    fn full_prior_mean_draws_centre_on_empirical_mean() {
        let data = Dataset::from_rows(&[vec![0.0, 1.0], vec![2.0, 0.5], vec![1.0, 3.0], vec![-1.0, 2.0]]).unwrap();
        let model = ComponentModel::from_dataset(ModelKind::Full, &data).unwrap();
        let mut rng = RngStream::new(2, 0).rng();
        let reps = 100_000;
        let mut acc = DVector::zeros(2);
        for _ in 0..reps {
            let draw = sample_prior(&model, &mut rng).unwrap();
            assert!(draw.cov().unwrap().log_det.is_finite());
            acc += draw.mean;
        }
        acc /= reps as f64;
        for d in 0..2 {
            assert!((acc[d] - data.column_mean(d)).abs() < 0.01 * data.column_sd(d));
        }
    }

    #[test]
    fn hier_prior_draws_respect_support() {
        let model = hier_model();
        let mut rng = RngStream::new(3, 0).rng();
        for _ in 0..2_000 {
            let d = sample_prior(&model, &mut rng).unwrap();
            assert!(d.hyper.as_ref().unwrap().nu > 1.0);
            assert!(prior_logdensity(&model, &d).unwrap().is_finite());
        }
    }

    #[test]
    fn diag_model_requires_standardized_data() {
        let data = Dataset::from_rows(&[vec![0.0], vec![2.0], vec![5.0]]).unwrap();
        assert!(ComponentModel::from_dataset(ModelKind::Diag, &data).is_err());
        let z = data.standardize().unwrap();
        assert!(ComponentModel::from_dataset(ModelKind::Diag, &z).is_ok());
    }

    #[test]
    fn empty_update_is_prior_draw() {
        let mut rng = RngStream::new(4, 0).rng();
        for model in [ComponentModel::diag(2), hier_model()] {
            let start = sample_prior(&model, &mut rng).unwrap();
            let stats = SuffStats::empty(2);
            let (next, logdens) = gibbs_update(&model, &start, &stats, &mut rng).unwrap();
            let prior = prior_logdensity(&model, &next).unwrap();
            assert!((logdens - prior).abs() < 1e-12);
            assert_eq!(transition_logdensity(&model, &start, &next, &stats).unwrap(), prior);
        }
    }

    #[test]
    fn returned_density_matches_reevaluation() {
        let mut rng = RngStream::new(5, 0).rng();
        let data = Dataset::from_rows(&[vec![0.1, 1.0], vec![2.0, 0.4], vec![1.2, 2.7], vec![-0.6, 1.9]]).unwrap();
        let stats = SuffStats::from_members(&data, &[0, 2, 3]);
        for model in [
            ComponentModel::from_dataset(ModelKind::Full, &data).unwrap(),
            ComponentModel::from_dataset(ModelKind::Hier, &data).unwrap(),
            ComponentModel::diag(2),
        ] {
            let mut cur = sample_prior(&model, &mut rng).unwrap();
            for _ in 0..50 {
                let (next, logdens) = gibbs_update(&model, &cur, &stats, &mut rng).unwrap();
                let again = transition_logdensity(&model, &cur, &next, &stats).unwrap();
                assert!(logdens == again || (logdens - again).abs() < 1e-12);
                cur = next;
            }
        }
    }

    #[test]
    fn hier_proposal_sweep_has_no_atoms() {
        let model = hier_model();
        let mut rng = RngStream::new(6, 0).rng();
        let mut stats = SuffStats::empty(2);
        stats.add(&[0.3, 0.1]);
        stats.add(&[0.9, -0.4]);
        let cur = sample_prior(&model, &mut rng).unwrap();
        let (mut kept, mut moved) = (0, 0);
        for _ in 0..200 {
            let (next, logdens) = gibbs_update(&model, &cur, &stats, &mut rng).unwrap();
            assert!(logdens.is_finite());
            let h = next.hyper.as_ref().unwrap();
            assert_ne!(h.nu, cur.hyper.as_ref().unwrap().nu);
            // the invariant sweep still rejects some steps
            let drawn = gibbs_draw(&model, &cur, &stats, &mut rng).unwrap();
            if drawn.hyper.as_ref().unwrap().nu == cur.hyper.as_ref().unwrap().nu {
                kept += 1;
            } else {
                moved += 1;
            }
        }
        assert!(kept > 0 && moved > 0);
    }

    #[test]
    fn diag_mean_conditional_matches_quadrature() {
        let xs = [0.7, 1.4, -0.2, 0.9];
        let lambda: f64 = 1.7;
        let n = xs.len() as f64;
        let xbar = xs.iter().sum::<f64>() / n;
        let closed = n * lambda * xbar / (n * lambda + lambda);
        let (mut num, mut den) = (0.0, 0.0);
        let h = 1e-4;
        for i in 0..200_000 {
            let mu = -10.0 + (i as f64 + 0.5) * h;
            let lw = normal_ln_pdf(mu, 0.0, 1.0 / lambda)
                + xs.iter().map(|x| normal_ln_pdf(*x, mu, 1.0 / lambda)).sum::<f64>();
            num += mu * lw.exp();
            den += lw.exp();
        }
        assert!((num / den - closed).abs() < 1e-8);
        let stats = stats_1d(&xs);
        assert!((stats.sum[0] / (1.0 + n) - closed).abs() < 1e-14);
    }

    #[test]
    fn diag_sweeps_leave_posterior_invariant() {
        let xs = [0.7, 1.4, -0.2, 0.9, 1.1];
        let stats = stats_1d(&xs);
        let model = ComponentModel::diag(1);
        let n = xs.len() as f64;
        let kappa = 1.0 + n;
        let m_n = stats.sum[0] / kappa;
        let a_n = 1.0 + n / 2.0;
        let b_n = 1.0 + 0.5 * (stats.outer[(0, 0)] - kappa * m_n * m_n);
        let var_mu = b_n / (kappa * (a_n - 1.0));
        let mean_lambda = a_n / b_n;

        let mut rng = RngStream::new(7, 0).rng();
        let mut cur = ClusterParams::diag(vec![0.0], vec![1.0]).unwrap();
        let sweeps = 100_000;
        let mut batch = vec![0.0; 100];
        let (mut s1, mut s2, mut sl) = (0.0, 0.0, 0.0);
        for it in 0..sweeps {
            cur = gibbs_draw(&model, &cur, &stats, &mut rng).unwrap();
            let mu = cur.mean[0];
            s1 += mu;
            s2 += mu * mu;
            sl += cur.precision().unwrap()[0];
            batch[it * 100 / sweeps] += mu / (sweeps / 100) as f64;
        }
        let mean = s1 / sweeps as f64;
        let var = s2 / sweeps as f64 - mean * mean;
        let sd = batch_sd(&batch);
        assert!((mean - m_n).abs() < 3.0 * sd, "{mean} vs {m_n}, sd {sd}");
        assert!((var - var_mu).abs() < 0.03 * var_mu, "{var} vs {var_mu}");
        assert!((sl / sweeps as f64 - mean_lambda).abs() < 0.02 * mean_lambda);
    }

    #[test]
    fn diag_transition_density_matches_histogram() {
        let stats = stats_1d(&[0.5, 1.2, 0.8]);
        let model = ComponentModel::diag(1);
        let from = ClusterParams::diag(vec![0.6], vec![2.0]).unwrap();
        let mut rng = RngStream::new(8, 0).rng();
        let reps = 200_000;
        let bins = [((0.4, 0.7), (1.0, 2.0)), ((0.7, 1.0), (2.0, 3.5)), ((0.2, 0.9), (0.3, 1.0))];
        let mut counts = [0usize; 3];
        for _ in 0..reps {
            let d = gibbs_draw(&model, &from, &stats, &mut rng).unwrap();
            let (mu, l) = (d.mean[0], d.precision().unwrap()[0]);
            for (b, ((m0, m1), (l0, l1))) in bins.iter().enumerate() {
                if mu >= *m0 && mu < *m1 && l >= *l0 && l < *l1 {
                    counts[b] += 1;
                }
            }
        }
        let g = 200;
        for (b, ((m0, m1), (l0, l1))) in bins.iter().enumerate() {
            let (hm, hl) = ((m1 - m0) / g as f64, (l1 - l0) / g as f64);
            let mut prob = 0.0;
            for i in 0..g {
                for j in 0..g {
                    let to = ClusterParams::diag(vec![m0 + (i as f64 + 0.5) * hm], vec![l0 + (j as f64 + 0.5) * hl])
                        .unwrap();
                    prob += transition_logdensity(&model, &from, &to, &stats).unwrap().exp() * hm * hl;
                }
            }
            let freq = counts[b] as f64 / reps as f64;
            let sd = (prob * (1.0 - prob) / reps as f64).sqrt();
            assert!((freq - prob).abs() < 4.0 * sd + 1e-4, "bin {b}: {freq} vs {prob}");
        }
    }

    #[test]
    fn nu_block_targets_its_conditional() {
        let sigma = Spd::new(DMatrix::from_element(1, 1, 0.7)).unwrap();
        let w = Spd::new(DMatrix::from_element(1, 1, 1.1)).unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        let h = 1e-4;
        for i in 0..400_000 {
            let nu = (i as f64 + 0.5) * h;
            let t = nu_target(nu, &sigma, &w, 1).exp();
            num += nu * t;
            den += t;
        }
        let exact = num / den;

        let mut rng = RngStream::new(9, 0).rng();
        let mut nu = 1.0;
        let reps = 400_000;
        let mut acc = 0.0;
        let mut batch = vec![0.0; 100];
        for it in 0..reps {
            let eps: f64 = StandardNormal.sample(&mut rng);
            let u: f64 = rng.random();
            let prop = nu * (NU_STEP_SD * eps).exp();
            if u.ln() < nu_log_accept(nu, prop, &sigma, &w, 1) {
                nu = prop;
            }
            acc += nu;
            batch[it * 100 / reps] += nu / (reps / 100) as f64;
        }
        let est = acc / reps as f64;
        let sd = batch_sd(&batch);
        assert!((est - exact).abs() < 4.0 * sd, "{est} vs {exact} (sd {sd})");
    }

    #[test]
    fn w_block_targets_its_conditional() {
        let base = EmpiricalPrior::new(DVector::from_vec(vec![0.0]), DMatrix::from_element(1, 1, 0.9)).unwrap();
        let sigma = Spd::new(DMatrix::from_element(1, 1, 0.6)).unwrap();
        let nu = 2.5;
        let target = |x: f64| {
            let wx = Spd::new(DMatrix::from_element(1, 1, x)).unwrap();
            inv_wishart_ln_pdf(&wx, 1.0, &base.cov) + inv_wishart_ln_pdf(&sigma, nu, &wx)
        };
        let (mut num, mut den) = (0.0, 0.0);
        let h = 1e-3;
        for i in 0..60_000 {
            let x = (i as f64 + 0.5) * h;
            let t = target(x).exp();
            num += x * t;
            den += t;
        }
        let exact = num / den;

        let mut rng = RngStream::new(10, 0).rng();
        let mut w = Spd::new(DMatrix::from_element(1, 1, 1.0)).unwrap();
        let reps = 200_000;
        let mut acc = 0.0;
        let mut batch = vec![0.0; 100];
        for it in 0..reps {
            let prop = Spd::new(sample_wishart(nu + 2.0, &sigma, &mut rng).unwrap()).unwrap();
            let u: f64 = rng.random();
            if u.ln() < w_log_accept(&w, &prop, &base, 1) {
                w = prop;
            }
            let v = w.matrix[(0, 0)];
            acc += v;
            batch[it * 100 / reps] += v / (reps / 100) as f64;
        }
        let est = acc / reps as f64;
        let sd = batch_sd(&batch);
        assert!((est - exact).abs() < 4.0 * sd, "{est} vs {exact} (sd {sd})");
    }

    #[test]
    fn marginal_empty_is_zero_and_rejects_full_model() {
        let model = ComponentModel::diag(3);
        assert_eq!(marginal_loglik(&model, &SuffStats::empty(3)).unwrap(), 0.0);
        assert!(marginal_loglik(&hier_model(), &SuffStats::empty(2)).is_err());
    }

    #[test]
    fn marginal_single_point_matches_double_integral() {
        let x = 0.8;
        let model = ComponentModel::diag(1);
        let closed = marginal_loglik(&model, &stats_1d(&[x])).unwrap();
        let hl = 2e-3;
        let mut total = 0.0;
        for i in 0..20_000 {
            let l = (i as f64 + 0.5) * hl;
            // μ range widens as the precision shrinks
            let half = 12.0 / l.sqrt().min(1.0);
            let hm = 2.0 * half / 6_000.0;
            for j in 0..6_000 {
                let mu = -half + (j as f64 + 0.5) * hm;
                let lw = gamma_ln_pdf(l, 1.0, 1.0) + normal_ln_pdf(mu, 0.0, 1.0 / l) + normal_ln_pdf(x, mu, 1.0 / l);
                total += lw.exp() * hl * hm;
            }
        }
        assert!((total.ln() - closed).abs() < 1e-4, "{} vs {closed}", total.ln());
    }

    /// Student-t predictive of the Normal-Gamma posterior after `seen`.
    fn predictive(seen: &[f64], x: f64) -> f64 {
        let n = seen.len() as f64;
        let kappa = 1.0 + n;
        let s: f64 = seen.iter().sum();
        let ss: f64 = seen.iter().map(|v| v * v).sum();
        let m = s / kappa;
        let a = 1.0 + n / 2.0;
        let b = 1.0 + 0.5 * (ss - kappa * m * m);
        let nu = 2.0 * a;
        let scale2 = b * (kappa + 1.0) / (a * kappa);
        ln_gamma((nu + 1.0) / 2.0)
            - ln_gamma(nu / 2.0)
            - 0.5 * (nu * std::f64::consts::PI * scale2).ln()
            - (nu + 1.0) / 2.0 * (1.0 + (x - m).powi(2) / (nu * scale2)).ln()
    }

    #[test]
    fn marginal_follows_sequential_predictive_chain() {
        let model = ComponentModel::diag(1);
        let a = [0.3, -1.2];
        let b = [2.1, 0.4, 0.9];
        let mut seen = a.to_vec();
        let mut chain = marginal_loglik(&model, &stats_1d(&a)).unwrap();
        for &x in &b {
            chain += predictive(&seen, x);
            seen.push(x);
        }
        let joint = marginal_loglik(&model, &stats_1d(&seen)).unwrap();
        assert!((joint - chain).abs() < 1e-10);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::seq::SliceRandom;

        proptest! {
            #[test]
            fn marginal_is_exchangeable(
                xs in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..12),
                seed in 0u64..1000,
            ) {
                let model = ComponentModel::diag(2);
                let rows: Vec<Vec<f64>> = xs.iter().map(|(a, b)| vec![*a, *b]).collect();
                let mut perm = rows.clone();
                perm.shuffle(&mut RngStream::new(seed, 0).rng());
                let (mut s1, mut s2) = (SuffStats::empty(2), SuffStats::empty(2));
                rows.iter().for_each(|r| s1.add(r));
                perm.iter().for_each(|r| s2.add(r));
                let a = marginal_loglik(&model, &s1).unwrap();
                let b = marginal_loglik(&model, &s2).unwrap();
                prop_assert!((a - b).abs() < 1e-10);
            }

            #[test]
            fn draws_stay_in_support(seed in 0u64..200) {
                let mut rng = RngStream::new(seed, 0).rng();
                let data = Dataset::from_rows(&[vec![0.1, 1.0], vec![2.0, 0.4], vec![1.2, 2.7]]).unwrap();
                let stats = SuffStats::from_members(&data, &[1]);
                let models = [
                    ComponentModel::from_dataset(ModelKind::Full, &data).unwrap(),
                    ComponentModel::from_dataset(ModelKind::Hier, &data).unwrap(),
                    ComponentModel::diag(2),
                ];
                for model in models {
                    let start = sample_prior(&model, &mut rng).unwrap();
                    let next = gibbs_draw(&model, &start, &stats, &mut rng).unwrap();
                    match &next.scale {
                        Scale::Full(s) => prop_assert!(s.log_det.is_finite()),
                        Scale::Diag(l) => prop_assert!(l.iter().all(|v| *v > 0.0)),
                    }
                }
            }
        }
    }
}
