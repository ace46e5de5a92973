//! Allocation priors in urn (collapsed) form.
//!
//! The Dirichlet process prior is parameterised by its concentration `alpha`.
//! The mixture-of-finite-mixtures prior uses a symmetric Dirichlet weight
//! `gamma` and a prior on the number of components `K`; its partition law
//! depends on the coefficients
//!
//! ```text
//! V_n(t) = sum_{k >= t} k!/(k-t)! * Γ(γk)/Γ(γk+n) * p_K(k)
//! ```
//!
//! which are tabulated in log-space by [`VnTable`].

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::Partition;
use crate::error::{Error, Result};
use crate::special::{ln_gamma, log_add_exp, softmax};

/// Relative tail tolerance used when none is given.
pub const DEFAULT_TAIL_TOL: f64 = 1e-12;

/// Proposal standard deviation of the log-scale random walk on `alpha`.
pub const ALPHA_STEP_SD: f64 = 0.5;

const MAX_VN_TERMS: usize = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KPrior {
    /// `p(k) = p (1-p)^(k-1)` on `k = 1, 2, ...`.
    Geometric { p: f64 },
    PointMass { k: usize },
    /// `K - 1 ~ Poisson(lambda)`.
    ShiftedPoisson { lambda: f64 },
}

impl KPrior {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            KPrior::Geometric { p } => p > 0.0 && p <= 1.0,
            KPrior::PointMass { k } => k >= 1,
            KPrior::ShiftedPoisson { lambda } => lambda > 0.0 && lambda.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("K prior {self:?} is not a normalisable distribution on K >= 1")))
        }
    }

    pub fn ln_pmf(&self, k: usize) -> f64 {
        if k == 0 {
            return f64::NEG_INFINITY;
        }
        match *self {
            KPrior::Geometric { p } => {
                if p == 1.0 {
                    return if k == 1 { 0.0 } else { f64::NEG_INFINITY };
                }
                p.ln() + (k - 1) as f64 * (1.0 - p).ln()
            }
            KPrior::PointMass { k: k0 } => {
                if k == k0 {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            KPrior::ShiftedPoisson { lambda } => {
                let j = (k - 1) as f64;
                -lambda + j * lambda.ln() - ln_gamma(j + 1.0)
            }
        }
    }

    /// Upper bound on `p(j+1)/p(j)` over all `j >= k`.
    fn ratio_bound(&self, k: usize) -> f64 {
        match *self {
            KPrior::Geometric { p } => 1.0 - p,
            KPrior::PointMass { k: k0 } => {
                if k >= k0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            KPrior::ShiftedPoisson { lambda } => lambda / k as f64,
        }
    }

    fn support_max(&self) -> Option<usize> {
        match *self {
            KPrior::PointMass { k } => Some(k),
            KPrior::Geometric { p } if p == 1.0 => Some(1),
            _ => None,
        }
    }

    /// A rough guess of the prior mode, used for table sizing only.
    pub fn mode_guess(&self) -> usize {
        match *self {
            KPrior::Geometric { .. } => 1,
            KPrior::PointMass { k } => k,
            KPrior::ShiftedPoisson { lambda } => lambda.floor() as usize + 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpPrior {
    pub alpha: f64,
    /// Rate of an Exponential hyperprior on `alpha`, when `alpha` is sampled.
    pub alpha_rate: Option<f64>,
}

impl DpPrior {
    pub fn fixed(alpha: f64) -> Self {
        DpPrior { alpha, alpha_rate: None }
    }

    pub fn with_hyperprior(alpha: f64, rate: f64) -> Self {
        DpPrior {
            alpha,
            alpha_rate: Some(rate),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha must be positive, got {}", self.alpha)));
        }
        if let Some(rate) = self.alpha_rate {
            if !(rate > 0.0 && rate.is_finite()) {
                return Err(Error::invalid(format!("alpha prior rate must be positive, got {rate}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MfmPrior {
    pub gamma: f64,
    pub k_prior: KPrior,
}

impl MfmPrior {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid(format!("gamma must be positive, got {}", self.gamma)));
        }
        self.k_prior.validate()
    }
}

impl Default for MfmPrior {
    fn default() -> Self {
        MfmPrior {
            gamma: 1.0,
            k_prior: KPrior::Geometric { p: 0.1 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AllocationPrior {
    Dp(DpPrior),
    Mfm(MfmPrior),
}

impl AllocationPrior {
    pub fn validate(&self) -> Result<()> {
        match self {
            AllocationPrior::Dp(p) => p.validate(),
            AllocationPrior::Mfm(p) => p.validate(),
        }
    }

    /// Log of the restricted-Gibbs count weight for a cluster of `count` others.
    pub fn ln_count_weight(&self, count: usize) -> f64 {
        match self {
            AllocationPrior::Dp(_) => (count as f64).ln(),
            AllocationPrior::Mfm(p) => (count as f64 + p.gamma).ln(),
        }
    }
}

/// Tabulated `log V_n(t)` for `t = 0..=t_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct VnTable {
    n: usize,
    gamma: f64,
    k_prior: KPrior,
    tail_tol: f64,
    log_v: Vec<f64>,
    /// Largest `k` summed for each `t`.
    last_k: Vec<usize>,
    /// Log of the bound on the omitted tail, relative to the partial sum.
    log_rel_tail: Vec<f64>,
}

fn vn_log_term(n: usize, gamma: f64, k_prior: &KPrior, t: usize, k: usize) -> f64 {
    let lp = k_prior.ln_pmf(k);
    if lp == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let kf = k as f64;
    ln_gamma(kf + 1.0) - ln_gamma((k - t) as f64 + 1.0) + ln_gamma(gamma * kf) - ln_gamma(gamma * kf + n as f64) + lp
}

/// Sums the series for one `t` until the tail bound drops below `tail_tol`.
fn vn_adaptive(n: usize, gamma: f64, k_prior: &KPrior, t: usize, tail_tol: f64) -> Result<(f64, usize, f64)> {
    let ln_tol = tail_tol.ln();
    let mut acc = f64::NEG_INFINITY;
    let mut k = t;
    loop {
        if let Some(kmax) = k_prior.support_max() {
            if k > kmax {
                return Ok((acc, kmax.max(t), f64::NEG_INFINITY));
            }
        }
        let term = vn_log_term(n, gamma, k_prior, t, k);
        acc = log_add_exp(acc, term);
        // Later term ratios are bounded by falling-factorial and prior ratios;
        // the Γ(γk)/Γ(γk+n) ratio never exceeds 1.
        let rho = (k + 1) as f64 / (k + 1 - t) as f64 * k_prior.ratio_bound(k);
        if rho < 1.0 && acc > f64::NEG_INFINITY {
            let log_tail = term + (rho / (1.0 - rho)).ln();
            let rel = log_tail - acc;
            if rel < ln_tol {
                return Ok((acc, k, rel));
            }
        }
        if k - t >= MAX_VN_TERMS {
            return Err(Error::numeric(format!(
                "V_n({t}) series did not converge within {MAX_VN_TERMS} terms"
            )));
        }
        k += 1;
    }
}

impl VnTable {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn k_prior(&self) -> KPrior {
        self.k_prior
    }

    pub fn t_max(&self) -> usize {
        self.log_v.len() - 1
    }

    /// `log V_n(t)`; `-inf` for `t > n` or where the prior excludes `K >= t`.
    pub fn log_v(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.t_max(), "V_n({t}) outside table range 1..={}", self.t_max());
        self.log_v[t]
    }

    pub fn last_k(&self, t: usize) -> usize {
        self.last_k[t]
    }

    pub fn log_rel_tail(&self, t: usize) -> f64 {
        self.log_rel_tail[t]
    }

    pub fn max_last_k(&self) -> usize {
        self.last_k.iter().copied().max().unwrap_or(0)
    }

    /// Grows the table so that it covers `t_max`.
    pub fn ensure(&mut self, t_max: usize) -> Result<()> {
        if t_max <= self.t_max() {
            return Ok(());
        }
        if t_max > self.n {
            return Err(Error::invalid(format!("t_max {t_max} exceeds n {}", self.n)));
        }
        for t in self.t_max() + 1..=t_max {
            let (v, k, rel) = vn_adaptive(self.n, self.gamma, &self.k_prior, t, self.tail_tol)?;
            self.log_v.push(v);
            self.last_k.push(k);
            self.log_rel_tail.push(rel);
        }
        Ok(())
    }

    /// `log V_n(t+1) - log V_n(t)`, growing the table when needed.
    pub fn log_ratio(&mut self, t: usize) -> Result<f64> {
        if t + 1 > self.n {
            return Ok(f64::NEG_INFINITY);
        }
        self.ensure(t + 1)?;
        Ok(self.log_v[t + 1] - self.log_v[t])
    }
}

/// Tabulates `log V_n(t)` for `t = 1..=t_max` by log-space summation over `k >= t`.
pub fn compute_vn_table(n: usize, gamma: f64, k_prior: KPrior, t_max: usize, tail_tol: f64) -> Result<VnTable> {
    k_prior.validate()?;
    if n == 0 {
        return Err(Error::invalid("V_n needs n >= 1"));
    }
    if !(gamma > 0.0) {
        return Err(Error::invalid(format!("gamma must be positive, got {gamma}")));
    }
    if t_max > n {
        return Err(Error::invalid(format!("t_max {t_max} exceeds n {n}: cannot occupy more clusters than observations")));
    }
    if !(tail_tol > 0.0) {
        return Err(Error::invalid("tail tolerance must be positive"));
    }
    let mut table = VnTable {
        n,
        gamma,
        k_prior,
        tail_tol,
        // t = 0 is a placeholder; V_n(0) is never used.
        log_v: vec![f64::NAN],
        last_k: vec![0],
        log_rel_tail: vec![f64::NEG_INFINITY],
    };
    table.ensure(t_max)?;
    Ok(table)
}

/// Same series truncated at a fixed `last_k` for every `t`; used to check
/// truncation stability.
pub fn compute_vn_truncated(n: usize, gamma: f64, k_prior: KPrior, t_max: usize, last_k: usize) -> Vec<f64> {
    let mut out = vec![f64::NAN; t_max + 1];
    for (t, slot) in out.iter_mut().enumerate().skip(1) {
        let mut acc = f64::NEG_INFINITY;
        for k in t..=last_k {
            acc = log_add_exp(acc, vn_log_term(n, gamma, &k_prior, t, k));
        }
        *slot = acc;
    }
    out
}

/// Unnormalised urn log-weights for the existing clusters and a new cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct UrnWeights {
    /// `(label, log weight)` for each cluster that stays occupied.
    pub existing: Vec<(usize, f64)>,
    pub new_cluster: f64,
}

impl UrnWeights {
    /// Normalised probabilities: existing clusters first, new cluster last.
    pub fn probabilities(&self) -> Vec<f64> {
        let mut lw: Vec<f64> = self.existing.iter().map(|&(_, w)| w).collect();
        lw.push(self.new_cluster);
        softmax(&lw)
    }
}

/// Cluster sizes of `partition` with observation `exclude` removed.
/// Returns `(label, size)` for clusters that remain occupied.
fn sizes_after_exclusion(partition: &Partition, exclude: Option<usize>) -> Result<Vec<(usize, usize)>> {
    let mut sizes: Vec<usize> = partition.sizes().to_vec();
    if let Some(i) = exclude {
        if i >= partition.n() {
            return Err(Error::invalid(format!(
                "excluded observation {i} out of range for n = {}",
                partition.n()
            )));
        }
        sizes[partition.label(i)] -= 1;
    }
    Ok(sizes.into_iter().enumerate().filter(|&(_, s)| s > 0).collect())
}

/// Pólya urn weights: `log n_k` for existing clusters and `log alpha` for a new one.
pub fn dp_urn_logweights(partition: &Partition, exclude: Option<usize>, alpha: f64) -> Result<UrnWeights> {
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    let sizes = sizes_after_exclusion(partition, exclude)?;
    Ok(UrnWeights {
        existing: sizes.iter().map(|&(k, s)| (k, (s as f64).ln())).collect(),
        new_cluster: alpha.ln(),
    })
}

/// Urn weights of the mixture-of-finite-mixtures prior: `log(n_k + gamma)`
/// for existing clusters and `log gamma + log V(t+1) - log V(t)` for a new one.
///
/// `vn` must be tabulated for the sample size reached once the allocated
/// observation is added, i.e. the number of conditioned-on observations plus one.
pub fn mfm_urn_logweights(partition: &Partition, exclude: Option<usize>, gamma: f64, vn: &VnTable) -> Result<UrnWeights> {
    let sizes = sizes_after_exclusion(partition, exclude)?;
    let conditioned: usize = sizes.iter().map(|&(_, s)| s).sum();
    if vn.n() != conditioned + 1 {
        return Err(Error::Dimension {
            expected: conditioned + 1,
            got: vn.n(),
        });
    }
    if (vn.gamma() - gamma).abs() > 0.0 {
        return Err(Error::invalid("V table was computed for a different gamma"));
    }
    let t = sizes.len();
    let new_cluster = if t == 0 {
        gamma.ln()
    } else {
        if t + 1 > vn.t_max() {
            return Err(Error::invalid(format!("V table covers t <= {}, need {}", vn.t_max(), t + 1)));
        }
        gamma.ln() + vn.log_v(t + 1) - vn.log_v(t)
    };
    Ok(UrnWeights {
        existing: sizes.iter().map(|&(k, s)| (k, (s as f64 + gamma).ln())).collect(),
        new_cluster,
    })
}

/// Prior expected number of occupied clusters under a Dirichlet process.
pub fn dp_expected_components(n: usize, alpha: f64) -> f64 {
    (1..=n).map(|i| alpha / (alpha + i as f64 - 1.0)).sum()
}

/// Log of the exchangeable partition probability of the given cluster sizes.
pub fn log_eppf(sizes: &[usize], prior: &AllocationPrior, vn: Option<&VnTable>) -> Result<f64> {
    let n: usize = sizes.iter().sum();
    match prior {
        AllocationPrior::Dp(dp) => Ok(dp_log_eppf(sizes, n, dp.alpha)),
        AllocationPrior::Mfm(mfm) => {
            let vn = vn.ok_or_else(|| Error::invalid("MFM prior needs a V table"))?;
            mfm_log_eppf(sizes, n, mfm.gamma, vn)
        }
    }
}

pub fn dp_log_eppf(sizes: &[usize], n: usize, alpha: f64) -> f64 {
    let t = sizes.len() as f64;
    t * alpha.ln() + sizes.iter().map(|&s| ln_gamma(s as f64)).sum::<f64>() + ln_gamma(alpha) - ln_gamma(alpha + n as f64)
}

pub fn mfm_log_eppf(sizes: &[usize], n: usize, gamma: f64, vn: &VnTable) -> Result<f64> {
    if vn.n() != n {
        return Err(Error::Dimension {
            expected: n,
            got: vn.n(),
        });
    }
    let t = sizes.len();
    if t > vn.t_max() {
        return Err(Error::invalid(format!("V table covers t <= {}, need {t}", vn.t_max())));
    }
    let lg = ln_gamma(gamma);
    Ok(vn.log_v(t) + sizes.iter().map(|&s| ln_gamma(s as f64 + gamma) - lg).sum::<f64>())
}

/// Log allocation prior `log p(z)` of a partition.
pub fn allocation_log_prior(partition: &Partition, prior: &AllocationPrior, vn: Option<&VnTable>) -> Result<f64> {
    log_eppf(partition.sizes(), prior, vn)
}

/// Posterior of `K` given `t` occupied clusters, truncated once the
/// cumulative mass reaches `1 - 1e-10`.
#[derive(Debug, Clone, PartialEq)]
pub struct KPosterior {
    pub t: usize,
    /// `probs[i]` is `p(K = t + i | T = t)`.
    pub probs: Vec<f64>,
}

impl KPosterior {
    pub fn support(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.probs.iter().enumerate().map(move |(i, &p)| (self.t + i, p))
    }

    pub fn prob(&self, k: usize) -> f64 {
        if k < self.t {
            return 0.0;
        }
        self.probs.get(k - self.t).copied().unwrap_or(0.0)
    }

    pub fn mode(&self) -> usize {
        let mut best = (self.t, f64::NEG_INFINITY);
        for (k, p) in self.support() {
            if p > best.1 {
                best = (k, p);
            }
        }
        best.0
    }
}

pub fn k_posterior_given_t(t: usize, vn: &VnTable) -> Result<KPosterior> {
    if t == 0 || t > vn.t_max() {
        return Err(Error::invalid(format!("t = {t} outside V table range 1..={}", vn.t_max())));
    }
    let log_norm = vn.log_v(t);
    if log_norm == f64::NEG_INFINITY {
        return Err(Error::invalid(format!("prior on K gives zero mass to K >= {t}")));
    }
    // stop once the mass is reached and the terms are below double resolution
    let mut probs = Vec::new();
    let mut cum = 0.0;
    let mut k = t;
    loop {
        let p = (vn_log_term(vn.n(), vn.gamma(), &vn.k_prior(), t, k) - log_norm).exp();
        probs.push(p);
        cum += p;
        if cum >= 1.0 - 1e-10 && p < 1e-17 * cum {
            break;
        }
        if let Some(kmax) = vn.k_prior().support_max() {
            if k >= kmax {
                break;
            }
        }
        k += 1;
        if k - t > MAX_VN_TERMS {
            return Err(Error::numeric("K posterior did not reach its mass target"));
        }
    }
    Ok(KPosterior { t, probs })
}

/// Unnormalised `log p(alpha | T)` with an Exponential(`rate`) prior.
pub fn alpha_log_conditional(alpha: f64, t: usize, n: usize, rate: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    Ok(t as f64 * alpha.ln() + ln_gamma(alpha) - ln_gamma(alpha + n as f64) + rate.ln() - rate * alpha)
}

/// One random-walk Metropolis step on `log alpha`.
pub fn alpha_update<R: Rng + ?Sized>(alpha: f64, t: usize, n: usize, rate: f64, rng: &mut R) -> f64 {
    let eps: f64 = StandardNormal.sample(rng);
    let proposal = alpha * (ALPHA_STEP_SD * eps).exp();
    let u: f64 = rng.random();
    if alpha_accept(alpha, proposal, t, n, rate, u) {
        proposal
    } else {
        alpha
    }
}

/// Acceptance decision for a proposed `alpha`, given the uniform `u`.
fn alpha_accept(alpha: f64, proposal: f64, t: usize, n: usize, rate: f64, u: f64) -> bool {
    let (Ok(cur), Ok(prop)) = (
        alpha_log_conditional(alpha, t, n, rate),
        alpha_log_conditional(proposal, t, n, rate),
    ) else {
        return false;
    };
    // log-Jacobian of the log transform
    let log_ratio = prop - cur + proposal.ln() - alpha.ln();
    log_ratio.is_finite() && u.ln() < log_ratio || log_ratio >= 0.0
}
