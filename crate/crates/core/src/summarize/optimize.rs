use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use super::{
    binder_from_sums, check_psm, pear_from_sums, vi_distance, vi_lb_from_rows, within_pair_sum, within_row_sums,
    BinderConfig, Psm,
};
use crate::data::{relabel_contiguous, Partition, SampleTrace};
use crate::error::{Error, Result};

/// Medvedovic threshold parameter; clusters merge below height `1 - ε`.
pub const DEFAULT_EPSILON: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Linkage {
    Average,
    Complete,
}

/// Merge sequence sorted by height. Each merge joins the clusters holding the two observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Dendrogram {
    n: usize,
    merges: Vec<(usize, usize, f64)>,
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.0[hi] = lo;
        }
    }
}

impl Dendrogram {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn merges(&self) -> &[(usize, usize, f64)] {
        &self.merges
    }

    pub fn heights(&self) -> Vec<f64> {
        self.merges.iter().map(|m| m.2).collect()
    }

    fn apply(&self, count: usize) -> Partition {
        let mut uf = UnionFind((0..self.n).collect());
        for &(a, b, _) in &self.merges[..count] {
            uf.union(a, b);
        }
        let roots: Vec<usize> = (0..self.n).map(|i| uf.find(i)).collect();
        relabel_contiguous(&roots)
    }

    /// Partition with `k` clusters, `1 <= k <= n`.
    pub fn cut(&self, k: usize) -> Partition {
        let k = k.clamp(1, self.n);
        self.apply(self.n - k)
    }

    /// Partition after every merge strictly below `height`.
    pub fn cut_below(&self, height: f64) -> Partition {
        let count = self.merges.iter().take_while(|m| m.2 < height).count();
        self.apply(count)
    }
}

/// Agglomerative clustering on `D = 1 - P` by the nearest-neighbour chain
/// with Lance–Williams updates.
pub fn hclust(psm: &Psm, linkage: Linkage) -> Dendrogram {
    let n = psm.n();
    let mut d: Vec<f64> = psm.values().iter().map(|p| 1.0 - p).collect();
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    let mut chain: Vec<usize> = Vec::new();
    let mut remaining = n;
    while remaining > 1 {
        if chain.is_empty() {
            chain.push(active.iter().position(|&a| a).expect("an active cluster"));
        }
        let a = *chain.last().expect("non-empty chain");
        let prev = chain.len().checked_sub(2).map(|k| chain[k]);
        // nearest neighbour of a; ties prefer the chain predecessor, then the lowest index
        let mut best = prev;
        let mut best_d = prev.map_or(f64::INFINITY, |p| d[a * n + p]);
        for c in 0..n {
            if c != a && active[c] && d[a * n + c] < best_d {
                best = Some(c);
                best_d = d[a * n + c];
            }
        }
        let b = best.expect("another active cluster");
        if Some(b) != prev {
            chain.push(b);
            continue;
        }
        chain.pop();
        chain.pop();
        let (keep, drop) = (a.min(b), a.max(b));
        merges.push((keep, drop, best_d));
        let (sk, sd) = (size[keep] as f64, size[drop] as f64);
        for c in 0..n {
            if !active[c] || c == keep || c == drop {
                continue;
            }
            let (dk, dd) = (d[keep * n + c], d[drop * n + c]);
            let v = match linkage {
                Linkage::Complete => dk.max(dd),
                Linkage::Average => (sk * dk + sd * dd) / (sk + sd),
            };
            d[keep * n + c] = v;
            d[c * n + keep] = v;
        }
        active[drop] = false;
        size[keep] += size[drop];
        remaining -= 1;
    }
    merges.sort_by(|x, y| x.2.total_cmp(&y.2));
    Dendrogram { n, merges }
}

/// One hierarchical cut per `k = 1..=k_max`.
pub fn hclust_candidates(psm: &Psm, linkage: Linkage, k_max: usize) -> Vec<Partition> {
    let tree = hclust(psm, linkage);
    (1..=k_max.clamp(1, psm.n())).map(|k| tree.cut(k)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryResult {
    pub partition: Partition,
    pub num_clusters: usize,
    pub method: String,
    pub loss: String,
    /// Expected loss, or score for PEAR, or log-posterior for MAP; NaN when not applicable.
    pub value: f64,
    pub candidates: usize,
    /// PEAR denominator vanished for the selected candidate.
    pub degenerate: bool,
}

impl SummaryResult {
    fn new(partition: Partition, method: String, loss: &str, value: f64, candidates: usize) -> Self {
        SummaryResult {
            num_clusters: partition.t(),
            partition,
            method,
            loss: loss.to_string(),
            value,
            candidates,
            degenerate: false,
        }
    }
}

/// Complete-linkage tree cut at height `1 - epsilon`.
pub fn medvedovic(psm: &Psm, epsilon: f64) -> Result<SummaryResult> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::invalid(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    let z = hclust(psm, Linkage::Complete).cut_below(1.0 - epsilon);
    Ok(SummaryResult::new(z, "medvedovic".into(), "none", f64::NAN, 1))
}

/// Retained sample with the largest log-posterior; ties go to the earliest record.
pub fn map_sample(traces: &[SampleTrace]) -> Result<SummaryResult> {
    let mut best: Option<(&Partition, f64)> = None;
    let mut m = 0;
    for tr in traces {
        for r in &tr.records {
            m += 1;
            if best.is_none_or(|(_, lp)| r.log_post > lp) {
                best = Some((&r.partition, r.log_post));
            }
        }
    }
    let (z, lp) = best.ok_or_else(|| Error::invalid("no samples to summarise"))?;
    Ok(SummaryResult::new(z.canonical(), "map".into(), "0-1", lp, m))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PamResult {
    pub medoids: Vec<usize>,
    pub partition: Partition,
    pub cost: f64,
    pub build_cost: f64,
}

struct Nearest {
    d1: Vec<f64>,
    n1: Vec<usize>,
    d2: Vec<f64>,
}

fn nearest(psm: &Psm, medoids: &[usize]) -> Nearest {
    let n = psm.n();
    let mut out = Nearest {
        d1: vec![f64::INFINITY; n],
        n1: vec![0; n],
        d2: vec![f64::INFINITY; n],
    };
    for j in 0..n {
        for (pos, &m) in medoids.iter().enumerate() {
            let dj = 1.0 - psm.get(m, j);
            if dj < out.d1[j] {
                out.d2[j] = out.d1[j];
                out.d1[j] = dj;
                out.n1[j] = pos;
            } else if dj < out.d2[j] {
                out.d2[j] = dj;
            }
        }
    }
    out
}

/// k-medoids on `D = 1 - P`: greedy BUILD, then best-improvement SWAP until no
/// swap lowers the cost. Ties go to the lowest index.
pub fn pam(psm: &Psm, k: usize) -> Result<PamResult> {
    let n = psm.n();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k must lie in 1..={n}, got {k}")));
    }
    let dist = |i: usize, j: usize| 1.0 - psm.get(i, j);
    let mut is_medoid = vec![false; n];
    let mut medoids = Vec::with_capacity(k);
    let mut d1 = vec![f64::INFINITY; n];
    // BUILD
    for _ in 0..k {
        let mut best = usize::MAX;
        let mut best_gain = f64::NEG_INFINITY;
        for h in 0..n {
            if is_medoid[h] {
                continue;
            }
            let gain: f64 = if medoids.is_empty() {
                -(0..n).map(|j| dist(h, j)).sum::<f64>()
            } else {
                (0..n).map(|j| (d1[j] - dist(h, j)).max(0.0)).sum()
            };
            if gain > best_gain {
                best_gain = gain;
                best = h;
            }
        }
        is_medoid[best] = true;
        medoids.push(best);
        for (j, dj) in d1.iter_mut().enumerate() {
            *dj = dj.min(dist(best, j));
        }
    }
    let build_cost: f64 = d1.iter().sum();
    // SWAP
    let mut near = nearest(psm, &medoids);
    let mut cost = build_cost;
    loop {
        let mut best: Option<(usize, usize)> = None;
        let mut best_delta = -1e-12 * cost.max(1.0);
        let mut delta = vec![0.0; k];
        for h in 0..n {
            if is_medoid[h] {
                continue;
            }
            delta.iter_mut().for_each(|x| *x = 0.0);
            let mut shared = 0.0;
            for j in 0..n {
                let dhj = dist(h, j);
                let (dn, ds) = (near.d1[j], near.d2[j]);
                let gain = (dhj - dn).min(0.0);
                shared += gain;
                delta[near.n1[j]] += dhj.min(ds) - dn - gain;
            }
            for (pos, &dm) in delta.iter().enumerate() {
                if shared + dm < best_delta {
                    best_delta = shared + dm;
                    best = Some((pos, h));
                }
            }
        }
        let Some((pos, h)) = best else { break };
        is_medoid[medoids[pos]] = false;
        is_medoid[h] = true;
        medoids[pos] = h;
        near = nearest(psm, &medoids);
        cost = near.d1.iter().sum();
    }
    // ties between medoids go to the lower observation index
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by_key(|&p| medoids[p]);
    let sorted: Vec<usize> = order.iter().map(|&p| medoids[p]).collect();
    let mut near = nearest(psm, &sorted);
    // a medoid always represents itself
    for (pos, &m) in sorted.iter().enumerate() {
        near.n1[m] = pos;
        near.d1[m] = 1.0 - psm.get(m, m);
    }
    let partition = relabel_contiguous(&near.n1);
    Ok(PamResult {
        medoids: sorted,
        partition,
        cost: near.d1.iter().sum(),
        build_cost,
    })
}

pub fn pam_candidates(psm: &Psm, k_max: usize) -> Result<Vec<Partition>> {
    (1..=k_max.clamp(1, psm.n()))
        .map(|k| pam(psm, k).map(|r| r.partition))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Loss {
    Binder(BinderConfig),
    Pear,
    ViLb,
    /// Monte Carlo expected VI; sample search only.
    Vi,
}

impl Loss {
    pub fn name(&self) -> &'static str {
        match self {
            Loss::Binder(_) => "binder",
            Loss::Pear => "pear",
            Loss::ViLb => "vilb",
            Loss::Vi => "vi",
        }
    }

    pub fn parse(s: &str) -> Result<Loss> {
        match s {
            "binder" => Ok(Loss::Binder(BinderConfig::default())),
            "pear" => Ok(Loss::Pear),
            "vilb" => Ok(Loss::ViLb),
            "vi" => Ok(Loss::Vi),
            _ => Err(Error::invalid(format!("unknown loss '{s}' (expected binder, pear, vilb or vi)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Average,
    Complete,
    Pam,
    Samples,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Average => "average",
            Strategy::Complete => "complete",
            Strategy::Pam => "pam",
            Strategy::Samples => "samples",
        }
    }

    pub fn parse(s: &str) -> Result<Strategy> {
        match s {
            "average" | "hclust-avg" => Ok(Strategy::Average),
            "complete" | "hclust-comp" => Ok(Strategy::Complete),
            "pam" => Ok(Strategy::Pam),
            "samples" => Ok(Strategy::Samples),
            _ => Err(Error::invalid(format!(
                "unknown strategy '{s}' (expected average, complete, pam or samples)"
            ))),
        }
    }
}

/// Distinct retained samples in order of first appearance, with multiplicities.
fn distinct_samples(traces: &[SampleTrace]) -> Vec<(Partition, usize)> {
    let mut index: HashMap<&[usize], usize> = HashMap::new();
    let mut out: Vec<(Partition, usize)> = Vec::new();
    for tr in traces {
        for r in &tr.records {
            let z = &r.partition;
            match index.get(z.labels()) {
                Some(&k) => out[k].1 += 1,
                None => {
                    index.insert(z.labels(), out.len());
                    out.push((z.canonical(), 1));
                }
            }
        }
    }
    out
}

fn lexicographic_key(z: &Partition) -> Vec<usize> {
    z.canonical().labels().to_vec()
}

/// Whether `(obj_a, a)` beats `(obj_b, b)` under minimisation with tie rules.
fn better(obj_a: f64, a: &Partition, obj_b: f64, b: &Partition) -> bool {
    let tol = 1e-12 * obj_a.abs().max(obj_b.abs()).max(1.0);
    if (obj_a - obj_b).abs() > tol {
        return obj_a < obj_b;
    }
    if a.t() != b.t() {
        return a.t() < b.t();
    }
    lexicographic_key(a) < lexicographic_key(b)
}

/// Minimises the posterior expected loss over a candidate set; PEAR is maximised.
///
/// `k_max` defaults to `max(1, ⌊N/8⌋)`. Ties go to fewer clusters, then to the
/// lexicographically smallest canonical labelling.
pub fn optimize_summary(
    traces: &[SampleTrace],
    psm: &Psm,
    loss: Loss,
    strategy: Strategy,
    k_max: Option<usize>,
) -> Result<SummaryResult> {
    let n = psm.n();
    let k_max = k_max.unwrap_or((n / 8).max(1));
    if let Loss::Binder(cfg) = loss {
        cfg.validate()?;
    }
    if loss == Loss::Vi && strategy != Strategy::Samples {
        return Err(Error::invalid("the exact expected VI loss is only available with sample search"));
    }
    let samples = distinct_samples(traces);
    let candidates: Vec<Partition> = match strategy {
        Strategy::Average => hclust_candidates(psm, Linkage::Average, k_max),
        Strategy::Complete => hclust_candidates(psm, Linkage::Complete, k_max),
        Strategy::Pam => pam_candidates(psm, k_max)?,
        Strategy::Samples => samples.iter().map(|(z, _)| z.clone()).collect(),
    };
    if candidates.is_empty() {
        return Err(Error::invalid("empty candidate set"));
    }
    for z in &candidates {
        check_psm(z, psm)?;
    }
    let upper = psm.upper_sum();
    let m: usize = samples.iter().map(|s| s.1).sum();
    // (objective to minimise, reported value, degenerate)
    let scored: Vec<(f64, f64, bool)> = candidates
        .par_iter()
        .map(|z| -> Result<(f64, f64, bool)> {
            Ok(match loss {
                Loss::Binder(cfg) => {
                    let v = binder_from_sums(z, upper, within_pair_sum(z, psm), cfg);
                    (v, v, false)
                }
                Loss::Pear => {
                    let s = pear_from_sums(z, upper, within_pair_sum(z, psm));
                    (-s.score, s.score, s.degenerate)
                }
                Loss::ViLb => {
                    let v = vi_lb_from_rows(z, &within_row_sums(z, psm));
                    (v, v, false)
                }
                Loss::Vi => {
                    let mut total = 0.0;
                    for (s, c) in &samples {
                        total += *c as f64 * vi_distance(s, z)?;
                    }
                    let v = total / m as f64;
                    (v, v, false)
                }
            })
        })
        .collect::<Result<_>>()?;
    let mut best = 0;
    for k in 1..candidates.len() {
        if better(scored[k].0, &candidates[k], scored[best].0, &candidates[best]) {
            best = k;
        }
    }
    let mut out = SummaryResult::new(
        candidates[best].canonical(),
        format!("{}+{}", loss.name(), strategy.name()),
        loss.name(),
        scored[best].1,
        candidates.len(),
    );
    out.degenerate = scored[best].2;
    Ok(out)
}

/// `key = value` summary text with `#` header comments.
pub fn format_summary(comments: &[String], result: &SummaryResult) -> String {
    let mut out = String::new();
    for c in comments {
        for line in c.lines() {
            let _ = writeln!(out, "# {line}");
        }
    }
    let labels: Vec<String> = result.partition.labels_one_based().iter().map(|l| l.to_string()).collect();
    let _ = writeln!(out, "method = {}", result.method);
    let _ = writeln!(out, "loss = {}", result.loss);
    let _ = writeln!(out, "value = {:e}", result.value);
    let _ = writeln!(out, "degenerate = {}", result.degenerate);
    let _ = writeln!(out, "candidates = {}", result.candidates);
    let _ = writeln!(out, "num_clusters = {}", result.num_clusters);
    let _ = writeln!(out, "labels = {}", labels.join(" "));
    out
}

pub fn write_summary(path: impl AsRef<Path>, comments: &[String], result: &SummaryResult) -> Result<()> {
    fs::write(path, format_summary(comments, result))?;
    Ok(())
}
