//! Split-merge MCMC over `(z, θ)` with launch states, restricted Gibbs
//! scans and conditional-conjugate parameter sweeps.
//!
//! One iteration is a single split-merge proposal for a random pair, then
//! `allocation_scans` reallocation scans among the occupied clusters, then
//! `param_refresh_per_iter` parameter sweeps over every cluster, then the
//! concentration update when the Dirichlet-process prior has a hyperprior.
//! The reallocation scan conditions on `θ` and never opens or closes a
//! cluster, so `T` only changes through split-merge moves.
//! Both launch states are built from `(i, j, S)` alone and never read the
//! current parameters, so the reverse transition can be evaluated from them.

pub mod trace;

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;

use crate::components::{
    gibbs_draw, gibbs_update, loglik, prior_logdensity, sample_prior, transition_logdensity, ClusterParams,
    ComponentModel, SuffStats,
};
use crate::data::{Dataset, Partition, SampleTrace, TraceRecord};
use crate::error::{Error, Result};
use crate::priors::{
    alpha_update, compute_vn_table, dp_log_eppf, k_posterior_given_t, mfm_log_eppf, AllocationPrior, VnTable,
    DEFAULT_TAIL_TOL,
};
use crate::rng::RngStream;
use crate::special::log_add_exp;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitMergeConfig {
    /// Restricted-Gibbs launch sweeps for splits.
    pub n_split: usize,
    /// Parameter launch sweeps for merges.
    pub n_merge: usize,
    pub param_refresh_per_iter: usize,
    /// Conditional reallocation scans among occupied clusters; singletons stay put.
    pub allocation_scans: usize,
    pub iters: usize,
    pub burnin: usize,
    pub thin: usize,
    pub chains: usize,
    pub seed: u64,
}

impl Default for SplitMergeConfig {
    fn default() -> Self {
        SplitMergeConfig {
            n_split: 5,
            n_merge: 5,
            param_refresh_per_iter: 1,
            allocation_scans: 1,
            iters: 2000,
            burnin: 100,
            thin: 2,
            chains: 4,
            seed: 1,
        }
    }
}

impl SplitMergeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thin == 0 {
            return Err(Error::invalid("thin must be at least 1"));
        }
        if self.burnin >= self.iters {
            return Err(Error::invalid(format!(
                "burnin ({}) must be smaller than iters ({})",
                self.burnin, self.iters
            )));
        }
        if self.chains == 0 {
            return Err(Error::invalid("at least one chain is required"));
        }
        Ok(())
    }

    /// Whether iteration `iter` (1-based) is kept: burn-in is dropped first, then thinning applies.
    pub fn is_retained(&self, iter: usize) -> bool {
        iter > self.burnin && (iter - self.burnin) % self.thin == 0
    }

    pub fn retained_per_chain(&self) -> usize {
        (self.iters - self.burnin) / self.thin
    }
}

/// Move counters of one chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MoveStats {
    pub split_proposed: u64,
    pub split_accepted: u64,
    pub merge_proposed: u64,
    pub merge_accepted: u64,
    /// Proposals rejected because the acceptance ratio was not a number.
    pub nonfinite: u64,
}

impl MoveStats {
    pub fn split_rate(&self) -> f64 {
        ratio(self.split_accepted, self.split_proposed)
    }

    pub fn merge_rate(&self) -> f64 {
        ratio(self.merge_accepted, self.merge_proposed)
    }

    pub fn merge_with(&mut self, other: &MoveStats) {
        self.split_proposed += other.split_proposed;
        self.split_accepted += other.split_accepted;
        self.merge_proposed += other.merge_proposed;
        self.merge_accepted += other.merge_accepted;
        self.nonfinite += other.nonfinite;
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// The MCMC state `φ = (z, θ)` with cached posterior terms.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    labels: Vec<usize>,
    sizes: Vec<usize>,
    params: Vec<ClusterParams>,
    alpha: Option<f64>,
    cl_prior: Vec<f64>,
    cl_loglik: Vec<f64>,
    log_eppf: f64,
    log_post: f64,
}

impl ChainState {
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn t(&self) -> usize {
        self.sizes.len()
    }

    pub fn params(&self) -> &[ClusterParams] {
        &self.params
    }

    pub fn alpha(&self) -> Option<f64> {
        self.alpha
    }

    /// Cached `log p(z) + log p(θ) + log p(X | θ, z)`; the `α` hyperprior is excluded.
    pub fn log_post(&self) -> f64 {
        self.log_post
    }

    pub fn partition(&self) -> Partition {
        Partition::from_contiguous(self.labels.clone()).expect("chain labels stay contiguous")
    }

    /// Relabels clusters by first appearance, permuting the per-cluster caches.
    fn canonicalize(&mut self) {
        let t = self.t();
        let mut map = vec![usize::MAX; t];
        let mut order = Vec::with_capacity(t);
        for l in self.labels.iter_mut() {
            if map[*l] == usize::MAX {
                map[*l] = order.len();
                order.push(*l);
            }
            *l = map[*l];
        }
        self.sizes = order.iter().map(|&k| self.sizes[k]).collect();
        self.params = order.iter().map(|&k| self.params[k].clone()).collect();
        self.cl_prior = order.iter().map(|&k| self.cl_prior[k]).collect();
        self.cl_loglik = order.iter().map(|&k| self.cl_loglik[k]).collect();
    }

    fn refresh_total(&mut self) {
        self.log_post = self.log_eppf + self.cl_prior.iter().sum::<f64>() + self.cl_loglik.iter().sum::<f64>();
    }
}

/// Pair and member set of one split-merge move.
#[derive(Debug, Clone, PartialEq)]
pub struct Scratch {
    pub i: usize,
    pub j: usize,
    pub ci: usize,
    pub cj: usize,
    /// Members of clusters `ci` and `cj`, ascending.
    pub s: Vec<usize>,
    pi: usize,
    pj: usize,
}

impl Scratch {
    /// Orients the pair so that `z_i <= z_j`.
    pub fn new(state: &ChainState, i: usize, j: usize) -> Self {
        let (i, j) = if state.labels[i] > state.labels[j] { (j, i) } else { (i, j) };
        let (ci, cj) = (state.labels[i], state.labels[j]);
        let s: Vec<usize> = (0..state.labels.len())
            .filter(|&l| state.labels[l] == ci || state.labels[l] == cj)
            .collect();
        let pi = s.binary_search(&i).expect("anchor in S");
        let pj = s.binary_search(&j).expect("anchor in S");
        Scratch { i, j, ci, cj, s, pi, pj }
    }

    pub fn is_split(&self) -> bool {
        self.ci == self.cj
    }

    /// Number of free members `|S| - 2`.
    pub fn free(&self) -> usize {
        self.s.len() - 2
    }
}

/// Launch state for a split: side 0 holds `i`, side 1 holds `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitLaunch {
    /// Side of each member of `S`, aligned with [`Scratch::s`].
    pub side: Vec<u8>,
    pub theta: [ClusterParams; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeLaunch {
    pub theta: ClusterParams,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Proposal {
    Split {
        side: Vec<u8>,
        theta: [ClusterParams; 2],
        forward: f64,
    },
    Merge {
        theta: ClusterParams,
        forward: f64,
    },
}

impl Proposal {
    pub fn forward(&self) -> f64 {
        match self {
            Proposal::Split { forward, .. } | Proposal::Merge { forward, .. } => *forward,
        }
    }
}

/// How a restricted scan picks labels.
pub enum ScanMode<'a, R: Rng + ?Sized> {
    Draw(&'a mut R),
    /// Evaluate the probability of reaching the given sides.
    Force(&'a [u8]),
}

/// Draws a uniformly random unordered pair of distinct indices, returned ascending.
pub fn choose_pair<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<(usize, usize)> {
    if n < 2 {
        return Err(Error::invalid("a split-merge move needs at least two observations"));
    }
    let i = rng.random_range(0..n);
    let mut j = rng.random_range(0..n - 1);
    if j >= i {
        j += 1;
    }
    Ok((i.min(j), i.max(j)))
}

/// Result of an accept/reject decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub log_ratio: f64,
    pub accepted: bool,
}

/// Changes to the cached terms implied by a proposal.
struct Delta {
    sizes: Vec<usize>,
    log_eppf: f64,
    /// `(prior, loglik)` of the proposed clusters.
    terms: Vec<(f64, f64)>,
    log_post_diff: f64,
}

/// Kernel for one chain: data, model, prior and the lazily grown V table.
#[derive(Debug, Clone)]
pub struct Kernel<'a> {
    data: &'a Dataset,
    model: &'a ComponentModel,
    prior: AllocationPrior,
    vn: Option<VnTable>,
    config: SplitMergeConfig,
    audit: bool,
}

impl<'a> Kernel<'a> {
    pub fn new(
        data: &'a Dataset,
        model: &'a ComponentModel,
        prior: AllocationPrior,
        config: SplitMergeConfig,
    ) -> Result<Self> {
        config.validate()?;
        prior.validate()?;
        if model.dim() != data.dim() {
            return Err(Error::Dimension {
                expected: data.dim(),
                got: model.dim(),
            });
        }
        let vn = match prior {
            AllocationPrior::Mfm(m) => {
                let t_max = data.n().min(3 * m.k_prior.mode_guess() + 50);
                Some(compute_vn_table(data.n(), m.gamma, m.k_prior, t_max, DEFAULT_TAIL_TOL)?)
            }
            AllocationPrior::Dp(_) => None,
        };
        Ok(Kernel {
            data,
            model,
            prior,
            vn,
            config,
            audit: false,
        })
    }

    /// Re-derives the cached log-posterior after every sweep and checks locality of accepted moves.
    pub fn set_audit(&mut self, on: bool) {
        self.audit = on;
    }

    pub fn config(&self) -> &SplitMergeConfig {
        &self.config
    }

    pub fn prior(&self) -> &AllocationPrior {
        &self.prior
    }

    pub fn vn_table(&self) -> Option<&VnTable> {
        self.vn.as_ref()
    }

    fn log_eppf(&mut self, sizes: &[usize], alpha: Option<f64>) -> Result<f64> {
        let n = self.data.n();
        match self.prior {
            AllocationPrior::Dp(dp) => Ok(dp_log_eppf(sizes, n, alpha.unwrap_or(dp.alpha))),
            AllocationPrior::Mfm(m) => {
                let vn = self.vn.as_mut().expect("MFM kernel carries a V table");
                vn.ensure(sizes.len())?;
                mfm_log_eppf(sizes, n, m.gamma, vn)
            }
        }
    }

    fn cluster_loglik(&self, members: impl Iterator<Item = usize>, params: &ClusterParams) -> f64 {
        members.map(|i| loglik(self.data.row(i), params)).sum()
    }

    /// Builds a state from a partition and per-cluster parameters.
    pub fn state_from(
        &mut self,
        partition: &Partition,
        params: Vec<ClusterParams>,
        alpha: Option<f64>,
    ) -> Result<ChainState> {
        if partition.n() != self.data.n() {
            return Err(Error::Dimension {
                expected: self.data.n(),
                got: partition.n(),
            });
        }
        if params.len() != partition.t() {
            return Err(Error::Dimension {
                expected: partition.t(),
                got: params.len(),
            });
        }
        let alpha = match self.prior {
            AllocationPrior::Dp(dp) => Some(alpha.unwrap_or(dp.alpha)),
            AllocationPrior::Mfm(_) => None,
        };
        let members = partition.members();
        let mut cl_prior = Vec::with_capacity(params.len());
        let mut cl_loglik = Vec::with_capacity(params.len());
        for (k, theta) in params.iter().enumerate() {
            cl_prior.push(prior_logdensity(self.model, theta)?);
            cl_loglik.push(self.cluster_loglik(members[k].iter().copied(), theta));
        }
        let log_eppf = self.log_eppf(partition.sizes(), alpha)?;
        let mut state = ChainState {
            labels: partition.labels().to_vec(),
            sizes: partition.sizes().to_vec(),
            params,
            alpha,
            cl_prior,
            cl_loglik,
            log_eppf,
            log_post: 0.0,
        };
        state.refresh_total();
        Ok(state)
    }

    /// One cluster, parameters from the prior, `α` from its hyperprior when present.
    pub fn init_state<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<ChainState> {
        let alpha = match self.prior {
            AllocationPrior::Dp(dp) => Some(match dp.alpha_rate {
                Some(rate) => Exp::new(rate).map_err(|e| Error::invalid(e.to_string()))?.sample(rng),
                None => dp.alpha,
            }),
            AllocationPrior::Mfm(_) => None,
        };
        let theta = sample_prior(self.model, rng)?;
        self.state_from(&Partition::one_cluster(self.data.n()), vec![theta], alpha)
    }

    /// Full recomputation of the unnormalised log-posterior.
    pub fn recompute_log_post(&mut self, state: &ChainState) -> Result<f64> {
        let partition = state.partition();
        let members = partition.members();
        let mut out = self.log_eppf(partition.sizes(), state.alpha)?;
        for (k, theta) in state.params.iter().enumerate() {
            out += prior_logdensity(self.model, theta)?;
            out += self.cluster_loglik(members[k].iter().copied(), theta);
        }
        Ok(out)
    }

    fn side_stats(&self, scratch: &Scratch, side: &[u8]) -> [SuffStats; 2] {
        let p = self.data.dim();
        let mut out = [SuffStats::empty(p), SuffStats::empty(p)];
        for (q, &l) in scratch.s.iter().enumerate() {
            out[side[q] as usize].add(self.data.row(l));
        }
        out
    }

    fn all_stats(&self, scratch: &Scratch) -> SuffStats {
        SuffStats::from_members(self.data, &scratch.s)
    }

    /// Restricted Gibbs scan over `S` minus the anchors, in ascending index order.
    /// Returns the summed log-probability of the realised (or forced) sides.
    pub fn restricted_scan<R: Rng + ?Sized>(
        &self,
        scratch: &Scratch,
        side: &mut [u8],
        theta: [&ClusterParams; 2],
        mode: ScanMode<'_, R>,
    ) -> Result<f64> {
        let mut counts = [0usize; 2];
        for &sd in side.iter() {
            counts[sd as usize] += 1;
        }
        let mut mode = mode;
        let mut total = 0.0;
        for (q, &l) in scratch.s.iter().enumerate() {
            if q == scratch.pi || q == scratch.pj {
                continue;
            }
            counts[side[q] as usize] -= 1;
            let x = self.data.row(l);
            let w0 = self.prior.ln_count_weight(counts[0]) + loglik(x, theta[0]);
            let w1 = self.prior.ln_count_weight(counts[1]) + loglik(x, theta[1]);
            let norm = log_add_exp(w0, w1);
            if !norm.is_finite() {
                return Err(Error::numeric("restricted Gibbs weights are both zero"));
            }
            let lp0 = w0 - norm;
            let lp1 = w1 - norm;
            let chosen = match &mut mode {
                ScanMode::Draw(rng) => {
                    let u: f64 = rng.random();
                    u64::from(u >= lp0.exp()) as u8
                }
                ScanMode::Force(target) => target[q],
            };
            total += if chosen == 0 { lp0 } else { lp1 };
            side[q] = chosen;
            counts[chosen as usize] += 1;
        }
        Ok(total)
    }

    /// All of `S` in one cluster with a prior draw refined by `n_merge` sweeps.
    pub fn build_merge_launch<R: Rng + ?Sized>(&self, scratch: &Scratch, rng: &mut R) -> Result<MergeLaunch> {
        let stats = self.all_stats(scratch);
        let mut theta = sample_prior(self.model, rng)?;
        for _ in 0..self.config.n_merge {
            theta = gibbs_draw(self.model, &theta, &stats, rng)?;
        }
        Ok(MergeLaunch { theta })
    }

    /// Uniform random sides for free members, prior draws for both clusters,
    /// then `n_split` rounds of restricted scan and parameter sweeps.
    pub fn build_split_launch<R: Rng + ?Sized>(&self, scratch: &Scratch, rng: &mut R) -> Result<SplitLaunch> {
        let mut side: Vec<u8> = (0..scratch.s.len())
            .map(|q| {
                if q == scratch.pi {
                    0
                } else if q == scratch.pj {
                    1
                } else {
                    u8::from(rng.random::<bool>())
                }
            })
            .collect();
        let mut theta = [sample_prior(self.model, rng)?, sample_prior(self.model, rng)?];
        for _ in 0..self.config.n_split {
            self.restricted_scan(scratch, &mut side, [&theta[0], &theta[1]], ScanMode::Draw(rng))?;
            let stats = self.side_stats(scratch, &side);
            for c in 0..2 {
                theta[c] = gibbs_draw(self.model, &theta[c], &stats[c], rng)?;
            }
        }
        Ok(SplitLaunch { side, theta })
    }

    /// One restricted scan and one parameter sweep from the split launch.
    pub fn propose_split<R: Rng + ?Sized>(
        &self,
        scratch: &Scratch,
        launch: &SplitLaunch,
        rng: &mut R,
    ) -> Result<Proposal> {
        let mut side = launch.side.clone();
        let scan = self.restricted_scan(scratch, &mut side, [&launch.theta[0], &launch.theta[1]], ScanMode::Draw(rng))?;
        let stats = self.side_stats(scratch, &side);
        let (t0, d0) = gibbs_update(self.model, &launch.theta[0], &stats[0], rng)?;
        let (t1, d1) = gibbs_update(self.model, &launch.theta[1], &stats[1], rng)?;
        Ok(Proposal::Split {
            side,
            theta: [t0, t1],
            forward: scan + d0 + d1,
        })
    }

    /// One parameter sweep from the merge launch.
    pub fn propose_merge<R: Rng + ?Sized>(
        &self,
        scratch: &Scratch,
        launch: &MergeLaunch,
        rng: &mut R,
    ) -> Result<Proposal> {
        let (theta, forward) = gibbs_update(self.model, &launch.theta, &self.all_stats(scratch), rng)?;
        Ok(Proposal::Merge { theta, forward })
    }

    /// Reverse transition log-density evaluated at the current state.
    pub fn reverse_log_q(
        &self,
        state: &ChainState,
        scratch: &Scratch,
        proposal: &Proposal,
        merge_launch: &MergeLaunch,
        split_launch: &SplitLaunch,
    ) -> Result<f64> {
        match proposal {
            Proposal::Split { .. } => transition_logdensity(
                self.model,
                &merge_launch.theta,
                &state.params[scratch.ci],
                &self.all_stats(scratch),
            ),
            Proposal::Merge { .. } => {
                let target: Vec<u8> = scratch
                    .s
                    .iter()
                    .map(|&l| u8::from(state.labels[l] == scratch.cj))
                    .collect();
                let mut side = split_launch.side.clone();
                let scan = self.restricted_scan::<crate::rng::ChainRng>(
                    scratch,
                    &mut side,
                    [&split_launch.theta[0], &split_launch.theta[1]],
                    ScanMode::Force(&target),
                )?;
                let stats = self.side_stats(scratch, &target);
                let d0 = transition_logdensity(self.model, &split_launch.theta[0], &state.params[scratch.ci], &stats[0])?;
                let d1 = transition_logdensity(self.model, &split_launch.theta[1], &state.params[scratch.cj], &stats[1])?;
                Ok(scan + d0 + d1)
            }
        }
    }

    fn delta(&mut self, state: &ChainState, scratch: &Scratch, proposal: &Proposal) -> Result<Delta> {
        let (sizes, terms, old) = match proposal {
            Proposal::Split { side, theta, .. } => {
                let mut sizes = state.sizes.clone();
                let n1 = side.iter().filter(|&&s| s == 1).count();
                sizes[scratch.ci] = scratch.s.len() - n1;
                sizes.push(n1);
                let mut terms = Vec::with_capacity(2);
                for c in 0..2u8 {
                    let members = scratch.s.iter().zip(side).filter(|(_, &sd)| sd == c).map(|(&l, _)| l);
                    terms.push((
                        prior_logdensity(self.model, &theta[c as usize])?,
                        self.cluster_loglik(members, &theta[c as usize]),
                    ));
                }
                (sizes, terms, state.cl_prior[scratch.ci] + state.cl_loglik[scratch.ci])
            }
            Proposal::Merge { theta, .. } => {
                let mut sizes = state.sizes.clone();
                sizes[scratch.ci] = scratch.s.len();
                sizes.remove(scratch.cj);
                let terms = vec![(
                    prior_logdensity(self.model, theta)?,
                    self.cluster_loglik(scratch.s.iter().copied(), theta),
                )];
                let old = state.cl_prior[scratch.ci]
                    + state.cl_loglik[scratch.ci]
                    + state.cl_prior[scratch.cj]
                    + state.cl_loglik[scratch.cj];
                (sizes, terms, old)
            }
        };
        let log_eppf = self.log_eppf(&sizes, state.alpha)?;
        let new: f64 = terms.iter().map(|(a, b)| a + b).sum();
        Ok(Delta {
            log_post_diff: log_eppf - state.log_eppf + new - old,
            sizes,
            log_eppf,
            terms,
        })
    }

    /// Difference in log-posterior between the proposal and the current state, over `S` only.
    pub fn log_post_diff(&mut self, state: &ChainState, scratch: &Scratch, proposal: &Proposal) -> Result<f64> {
        Ok(self.delta(state, scratch, proposal)?.log_post_diff)
    }

    /// The state that results from accepting `proposal`.
    pub fn apply(&mut self, state: &ChainState, scratch: &Scratch, proposal: &Proposal) -> Result<ChainState> {
        let delta = self.delta(state, scratch, proposal)?;
        Ok(self.apply_delta(state, scratch, proposal, delta))
    }

    fn apply_delta(&self, state: &ChainState, scratch: &Scratch, proposal: &Proposal, delta: Delta) -> ChainState {
        let mut next = state.clone();
        match proposal {
            Proposal::Split { side, theta, .. } => {
                let new_label = state.t();
                for (q, &l) in scratch.s.iter().enumerate() {
                    next.labels[l] = if side[q] == 1 { new_label } else { scratch.ci };
                }
                next.params[scratch.ci] = theta[0].clone();
                next.params.push(theta[1].clone());
                next.cl_prior[scratch.ci] = delta.terms[0].0;
                next.cl_loglik[scratch.ci] = delta.terms[0].1;
                next.cl_prior.push(delta.terms[1].0);
                next.cl_loglik.push(delta.terms[1].1);
            }
            Proposal::Merge { theta, .. } => {
                for &l in &scratch.s {
                    next.labels[l] = scratch.ci;
                }
                for l in next.labels.iter_mut() {
                    if *l > scratch.cj {
                        *l -= 1;
                    }
                }
                next.params[scratch.ci] = theta.clone();
                next.cl_prior[scratch.ci] = delta.terms[0].0;
                next.cl_loglik[scratch.ci] = delta.terms[0].1;
                next.params.remove(scratch.cj);
                next.cl_prior.remove(scratch.cj);
                next.cl_loglik.remove(scratch.cj);
            }
        }
        next.sizes = delta.sizes;
        next.log_eppf = delta.log_eppf;
        canonicalize(&mut next);
        next.refresh_total();
        next
    }

    /// Metropolis-Hastings decision; `u` is the uniform draw.
    pub fn decide(&self, forward: f64, reverse: f64, log_post_diff: f64, u: f64) -> Decision {
        let log_ratio = reverse - forward + log_post_diff;
        let accepted = !log_ratio.is_nan() && log_ratio != f64::INFINITY && u.ln() < log_ratio;
        Decision { log_ratio, accepted }
    }

    /// Steps 1 to 8: one split or merge proposal, accepted or rejected.
    pub fn split_merge_move<R: Rng + ?Sized>(
        &mut self,
        state: &mut ChainState,
        stats: &mut MoveStats,
        rng: &mut R,
    ) -> Result<bool> {
        let (i, j) = choose_pair(self.data.n(), rng)?;
        let scratch = Scratch::new(state, i, j);
        let merge_launch = self.build_merge_launch(&scratch, rng)?;
        let split_launch = self.build_split_launch(&scratch, rng)?;
        let proposal = if scratch.is_split() {
            stats.split_proposed += 1;
            self.propose_split(&scratch, &split_launch, rng)?
        } else {
            stats.merge_proposed += 1;
            self.propose_merge(&scratch, &merge_launch, rng)?
        };
        let reverse = self.reverse_log_q(state, &scratch, &proposal, &merge_launch, &split_launch)?;
        let delta = self.delta(state, &scratch, &proposal)?;
        let u: f64 = rng.random();
        let decision = self.decide(proposal.forward(), reverse, delta.log_post_diff, u);
        if decision.log_ratio.is_nan() || decision.log_ratio == f64::INFINITY {
            stats.nonfinite += 1;
            warn!(
                "non-finite split-merge ratio (forward {}, reverse {}); proposal rejected",
                proposal.forward(),
                reverse
            );
        }
        if !decision.accepted {
            return Ok(false);
        }
        let next = self.apply_delta(state, &scratch, &proposal, delta);
        if self.audit {
            check_locality(state, &next, &scratch)?;
        }
        *state = next;
        if scratch.is_split() {
            stats.split_accepted += 1;
        } else {
            stats.merge_accepted += 1;
        }
        Ok(true)
    }

    /// Gibbs reallocation of each non-singleton observation among the occupied
    /// clusters given `θ`, with weights `n_{k,-i}` (DP) or `n_{k,-i} + γ` (MFM)
    /// times the component density. `T` and the `V` term are unchanged.
    pub fn allocation_scan<R: Rng + ?Sized>(&mut self, state: &mut ChainState, rng: &mut R) -> Result<()> {
        let t = state.t();
        if t < 2 {
            return Ok(());
        }
        let offset = match self.prior {
            AllocationPrior::Dp(_) => 0.0,
            AllocationPrior::Mfm(m) => m.gamma,
        };
        let mut logw = vec![0.0; t];
        for i in 0..self.data.n() {
            let cur = state.labels[i];
            if state.sizes[cur] < 2 {
                continue;
            }
            let x = self.data.row(i);
            for k in 0..t {
                let n = state.sizes[k] - usize::from(k == cur);
                logw[k] = (n as f64 + offset).ln() + loglik(x, &state.params[k]);
            }
            let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(Error::numeric(format!("reallocation weights for observation {i} are not finite")));
            }
            let total: f64 = logw.iter().map(|w| (w - max).exp()).sum();
            let mut u = rng.random::<f64>() * total;
            let mut next = t - 1;
            for (k, w) in logw.iter().enumerate() {
                u -= (w - max).exp();
                if u < 0.0 {
                    next = k;
                    break;
                }
            }
            if next != cur {
                state.labels[i] = next;
                state.sizes[cur] -= 1;
                state.sizes[next] += 1;
            }
        }
        state.canonicalize();
        for k in 0..t {
            state.cl_loglik[k] = 0.0;
        }
        for (i, &l) in state.labels.iter().enumerate() {
            state.cl_loglik[l] += loglik(self.data.row(i), &state.params[l]);
        }
        state.log_eppf = self.log_eppf(&state.sizes, state.alpha)?;
        state.refresh_total();
        Ok(())
    }

    /// One parameter sweep over every cluster.
    pub fn refresh_params<R: Rng + ?Sized>(&self, state: &mut ChainState, rng: &mut R) -> Result<()> {
        let p = self.data.dim();
        let mut stats: Vec<SuffStats> = (0..state.t()).map(|_| SuffStats::empty(p)).collect();
        for (i, &l) in state.labels.iter().enumerate() {
            stats[l].add(self.data.row(i));
        }
        for k in 0..state.t() {
            state.params[k] = gibbs_draw(self.model, &state.params[k], &stats[k], rng)?;
            state.cl_prior[k] = prior_logdensity(self.model, &state.params[k])?;
            state.cl_loglik[k] = 0.0;
        }
        for (i, &l) in state.labels.iter().enumerate() {
            state.cl_loglik[l] += loglik(self.data.row(i), &state.params[l]);
        }
        state.refresh_total();
        Ok(())
    }

    /// One full iteration: move, parameter refresh, then `α`.
    pub fn sweep<R: Rng + ?Sized>(&mut self, state: &mut ChainState, stats: &mut MoveStats, rng: &mut R) -> Result<()> {
        if self.data.n() >= 2 {
            self.split_merge_move(state, stats, rng)?;
        }
        for _ in 0..self.config.allocation_scans {
            self.allocation_scan(state, rng)?;
        }
        for _ in 0..self.config.param_refresh_per_iter {
            self.refresh_params(state, rng)?;
        }
        if let AllocationPrior::Dp(dp) = self.prior {
            if let (Some(rate), Some(alpha)) = (dp.alpha_rate, state.alpha) {
                let next = alpha_update(alpha, state.t(), self.data.n(), rate, rng);
                state.alpha = Some(next);
                state.log_eppf = self.log_eppf(&state.sizes, state.alpha)?;
                state.refresh_total();
            }
        }
        if self.audit {
            let full = self.recompute_log_post(state)?;
            if (full - state.log_post).abs() > 1e-8 * full.abs().max(1.0) {
                return Err(Error::numeric(format!(
                    "cached log-posterior {} drifted from recomputation {}",
                    state.log_post, full
                )));
            }
        }
        Ok(())
    }

    /// Runs one chain on stream `chain` of the configured seed.
    pub fn run_chain(&mut self, chain: usize) -> ChainOutcome {
        let mut rng = RngStream::chain(self.config.seed, chain).rng();
        let mut trace = SampleTrace::new(chain);
        let mut stats = MoveStats::default();
        let error = (|| -> Result<()> {
            let mut state = self.init_state(&mut rng)?;
            for iter in 1..=self.config.iters {
                self.sweep(&mut state, &mut stats, &mut rng)?;
                if self.config.is_retained(iter) {
                    trace.push(TraceRecord {
                        iter,
                        partition: state.partition(),
                        log_post: state.log_post,
                        alpha: state.alpha,
                    })?;
                }
            }
            Ok(())
        })()
        .err();
        ChainOutcome {
            trace,
            stats,
            error,
        }
    }
}

/// Relabels clusters by order of first appearance.
fn canonicalize(state: &mut ChainState) {
    let t = state.sizes.len();
    let mut map = vec![usize::MAX; t];
    let mut next = 0;
    for &l in &state.labels {
        if map[l] == usize::MAX {
            map[l] = next;
            next += 1;
        }
    }
    if map.iter().enumerate().all(|(a, &b)| a == b) {
        return;
    }
    let mut order = vec![0; t];
    for (old, &new) in map.iter().enumerate() {
        order[new] = old;
    }
    for l in state.labels.iter_mut() {
        *l = map[*l];
    }
    state.sizes = order.iter().map(|&o| state.sizes[o]).collect();
    state.params = order.iter().map(|&o| state.params[o].clone()).collect();
    state.cl_prior = order.iter().map(|&o| state.cl_prior[o]).collect();
    state.cl_loglik = order.iter().map(|&o| state.cl_loglik[o]).collect();
}

/// Observations outside `S` keep their set partition.
fn check_locality(before: &ChainState, after: &ChainState, scratch: &Scratch) -> Result<()> {
    let outside: Vec<usize> = (0..before.labels.len()).filter(|l| scratch.s.binary_search(l).is_err()).collect();
    let a: Vec<usize> = outside.iter().map(|&l| before.labels[l]).collect();
    let b: Vec<usize> = outside.iter().map(|&l| after.labels[l]).collect();
    if !a.is_empty() && crate::data::relabel_contiguous(&a) != crate::data::relabel_contiguous(&b) {
        return Err(Error::numeric("accepted move changed labels outside the selected set"));
    }
    Ok(())
}

/// Result of one chain; a numeric failure ends only that chain.
#[derive(Debug)]
pub struct ChainOutcome {
    pub trace: SampleTrace,
    pub stats: MoveStats,
    pub error: Option<Error>,
}

#[derive(Debug)]
pub struct RunOutput {
    pub chains: Vec<ChainOutcome>,
}

impl RunOutput {
    pub fn traces(&self) -> Vec<SampleTrace> {
        self.chains.iter().map(|c| c.trace.clone()).collect()
    }

    pub fn all_ok(&self) -> bool {
        self.chains.iter().all(|c| c.error.is_none())
    }

    pub fn stats(&self) -> MoveStats {
        let mut out = MoveStats::default();
        for c in &self.chains {
            out.merge_with(&c.stats);
        }
        out
    }
}

/// Runs all chains in parallel, chain `k` on stream `k`.
pub fn run(
    data: &Dataset,
    model: &ComponentModel,
    prior: AllocationPrior,
    config: SplitMergeConfig,
) -> Result<RunOutput> {
    let kernel = Kernel::new(data, model, prior, config)?;
    let chains = (0..config.chains)
        .into_par_iter()
        .map(|c| kernel.clone().run_chain(c))
        .collect();
    Ok(RunOutput { chains })
}

/// Posterior over the number of components, indexed by `k` (entry 0 unused).
///
/// MFM mixes `p(K | T)` over the sampled `T`; DP reports the law of `T`.
pub fn posterior_num_components(traces: &[SampleTrace], prior: &AllocationPrior, n: usize) -> Result<Vec<f64>> {
    let ts: Vec<usize> = traces.iter().flat_map(|tr| tr.records.iter().map(|r| r.t())).collect();
    if ts.is_empty() {
        return Err(Error::invalid("no samples to summarise"));
    }
    let m = ts.len() as f64;
    let t_max = *ts.iter().max().expect("nonempty");
    match prior {
        AllocationPrior::Dp(_) => {
            let mut out = vec![0.0; t_max + 1];
            for &t in &ts {
                out[t] += 1.0 / m;
            }
            Ok(out)
        }
        AllocationPrior::Mfm(mfm) => {
            let mut vn = compute_vn_table(n, mfm.gamma, mfm.k_prior, t_max, DEFAULT_TAIL_TOL)?;
            vn.ensure(t_max)?;
            let mut counts = vec![0usize; t_max + 1];
            for &t in &ts {
                counts[t] += 1;
            }
            let mut out = vec![0.0; t_max + 1];
            for (t, &c) in counts.iter().enumerate().skip(1) {
                if c == 0 {
                    continue;
                }
                let post = k_posterior_given_t(t, &vn)?;
                for (k, p) in post.support() {
                    if k >= out.len() {
                        out.resize(k + 1, 0.0);
                    }
                    out[k] += p * c as f64 / m;
                }
            }
            Ok(out)
        }
    }
}

/// Mode of a distribution indexed by `k`; ties go to the smaller `k`.
pub fn mode_of(probs: &[f64]) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, &p) in probs.iter().enumerate() {
        if p > best.1 {
            best = (k, p);
        }
    }
    best.0
}
