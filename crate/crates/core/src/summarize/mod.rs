//! Posterior similarity matrices, partition losses and summary clusterings.

mod optimize;

pub use optimize::{
    format_summary, hclust, hclust_candidates, map_sample, medvedovic, optimize_summary, pam, pam_candidates,
    write_summary, Dendrogram, Linkage, Loss, PamResult, Strategy, SummaryResult, DEFAULT_EPSILON,
};

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::data::{Partition, SampleTrace};
use crate::error::{Error, Result};

const PSM_MAGIC: &[u8; 4] = b"PSM1";

/// Posterior similarity matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Psm {
    n: usize,
    values: Vec<f64>,
}

impl Psm {
    /// Checks range, unit diagonal and symmetry.
    pub fn new(n: usize, values: Vec<f64>) -> Result<Psm> {
        if n == 0 || values.len() != n * n {
            return Err(Error::Dimension {
                expected: n * n,
                got: values.len(),
            });
        }
        for i in 0..n {
            if values[i * n + i] != 1.0 {
                return Err(Error::invalid(format!("similarity diagonal entry {} is not 1", i + 1)));
            }
            for j in 0..i {
                let (a, b) = (values[i * n + j], values[j * n + i]);
                if !(0.0..=1.0).contains(&a) || (a - b).abs() > 1e-15 {
                    return Err(Error::invalid(format!(
                        "similarity entries ({}, {}) must lie in [0, 1] and be symmetric",
                        i + 1,
                        j + 1
                    )));
                }
            }
        }
        Ok(Psm { n, values })
    }

    /// Co-membership matrix of a single partition.
    pub fn from_partition(z: &Partition) -> Psm {
        let n = z.n();
        let l = z.labels();
        let values = (0..n * n).map(|k| f64::from(u8::from(l[k / n] == l[k % n]))).collect();
        Psm { n, values }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `Σ_{i<j} P_ij`.
    pub fn upper_sum(&self) -> f64 {
        (0..self.n).map(|i| self.row(i)[i + 1..].iter().sum::<f64>()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.values.len());
        out.extend_from_slice(PSM_MAGIC);
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Psm> {
        if bytes.len() < 8 || &bytes[..4] != PSM_MAGIC {
            return Err(Error::parse(origin, "missing PSM1 header"));
        }
        let n = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let body = &bytes[8..];
        if body.len() != 8 * n * n {
            return Err(Error::parse(origin, format!("expected {} matrix bytes, found {}", 8 * n * n, body.len())));
        }
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Psm::new(n, values).map_err(|e| Error::parse(origin, e.to_string()))
    }
}

pub fn write_psm(path: impl AsRef<Path>, psm: &Psm) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&psm.to_bytes())?;
    Ok(())
}

pub fn read_psm(path: impl AsRef<Path>) -> Result<Psm> {
    let path = path.as_ref();
    Psm::from_bytes(&fs::read(path)?, &path.display().to_string())
}

fn add_co_counts(counts: &mut [u32], n: usize, z: &Partition) {
    for members in z.members() {
        for (a, &i) in members.iter().enumerate() {
            let row = &mut counts[i * n..(i + 1) * n];
            for &j in &members[a + 1..] {
                row[j] += 1;
            }
        }
    }
}

/// `P_ij = (1/M) Σ_m 1[z_i = z_j]` over all retained samples of all traces.
pub fn compute_psm(traces: &[SampleTrace]) -> Result<Psm> {
    let samples: Vec<&Partition> = traces.iter().flat_map(|t| t.records.iter().map(|r| &r.partition)).collect();
    let first = samples.first().ok_or_else(|| Error::invalid("no samples to summarise"))?;
    let n = first.n();
    if let Some(bad) = samples.iter().find(|z| z.n() != n) {
        return Err(Error::Dimension {
            expected: n,
            got: bad.n(),
        });
    }
    let m = samples.len();
    let block = m.div_ceil(rayon::current_num_threads().max(1));
    let counts = samples
        .par_chunks(block)
        .map(|chunk| {
            let mut c = vec![0u32; n * n];
            for z in chunk {
                add_co_counts(&mut c, n, z);
            }
            c
        })
        .reduce_with(|mut a, b| {
            a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
            a
        })
        .expect("at least one block");
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in i + 1..n {
            let p = f64::from(counts[i * n + j]) / m as f64;
            values[i * n + j] = p;
            values[j * n + i] = p;
        }
    }
    Ok(Psm { n, values })
}

/// Joint cluster counts of two partitions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContingencyTable {
    /// `counts[k][k']`, rows indexed by the first partition.
    pub counts: Vec<Vec<usize>>,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub n: usize,
}

impl ContingencyTable {
    /// `Σ C(n_kk', 2)`, `Σ C(n_k, 2)`, `Σ C(n̂_k', 2)`, `C(N, 2)`.
    pub fn pair_counts(&self) -> (u64, u64, u64, u64) {
        let c2 = |x: usize| (x as u64) * (x as u64).saturating_sub(1) / 2;
        let joint = self.counts.iter().flatten().map(|&x| c2(x)).sum();
        let a = self.rows.iter().map(|&x| c2(x)).sum();
        let b = self.cols.iter().map(|&x| c2(x)).sum();
        (joint, a, b, c2(self.n))
    }
}

fn check_len(z: &Partition, zh: &Partition) -> Result<()> {
    if z.n() != zh.n() {
        return Err(Error::Dimension {
            expected: z.n(),
            got: zh.n(),
        });
    }
    Ok(())
}

pub fn contingency(z: &Partition, zh: &Partition) -> Result<ContingencyTable> {
    check_len(z, zh)?;
    let mut counts = vec![vec![0usize; zh.t()]; z.t()];
    for (&a, &b) in z.labels().iter().zip(zh.labels()) {
        counts[a][b] += 1;
    }
    Ok(ContingencyTable {
        counts,
        rows: z.sizes().to_vec(),
        cols: zh.sizes().to_vec(),
        n: z.n(),
    })
}

/// Number of pairs on which the two partitions disagree about co-clustering.
pub fn pair_disagreements(z: &Partition, zh: &Partition) -> Result<u64> {
    let (joint, a, b, _) = contingency(z, zh)?.pair_counts();
    Ok(a + b - 2 * joint)
}

pub fn rand_index(z: &Partition, zh: &Partition) -> Result<f64> {
    if z.n() < 2 {
        return Err(Error::invalid("the Rand index needs at least two observations"));
    }
    let (joint, a, b, total) = contingency(z, zh)?.pair_counts();
    Ok((total + 2 * joint - a - b) as f64 / total as f64)
}

/// Hubert–Arabie adjusted Rand index. Two trivial partitions with a zero
/// denominator score 1 when identical and 0 otherwise.
pub fn adjusted_rand_index(z: &Partition, zh: &Partition) -> Result<f64> {
    if z.n() < 2 {
        return Err(Error::invalid("the adjusted Rand index needs at least two observations"));
    }
    let (joint, a, b, total) = contingency(z, zh)?.pair_counts();
    let (joint, a, b, total) = (joint as f64, a as f64, b as f64, total as f64);
    let expected = a * b / total;
    let denom = 0.5 * (a + b) - expected;
    if denom == 0.0 {
        return Ok(if z.same_clusters(zh) { 1.0 } else { 0.0 });
    }
    Ok((joint - expected) / denom)
}

/// Pairwise misclassification penalties.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinderConfig {
    /// Penalty for pairs together in `z` but apart in `ẑ`.
    pub l1: f64,
    /// Penalty for pairs apart in `z` but together in `ẑ`.
    pub l2: f64,
}

impl Default for BinderConfig {
    fn default() -> Self {
        BinderConfig { l1: 1.0, l2: 1.0 }
    }
}

impl BinderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l1 > 0.0 && self.l2 > 0.0 && self.l1.is_finite() && self.l2.is_finite()) {
            return Err(Error::invalid("Binder penalties must be positive and finite"));
        }
        Ok(())
    }
}

pub fn binder_loss(z: &Partition, zh: &Partition, cfg: BinderConfig) -> Result<f64> {
    let (joint, a, b, _) = contingency(z, zh)?.pair_counts();
    Ok(cfg.l1 * (a - joint) as f64 + cfg.l2 * (b - joint) as f64)
}

fn check_psm(zh: &Partition, psm: &Psm) -> Result<()> {
    if zh.n() != psm.n() {
        return Err(Error::Dimension {
            expected: psm.n(),
            got: zh.n(),
        });
    }
    Ok(())
}

/// Per-observation sums `Σ_{j: ẑ_j = ẑ_i} P_ij`, diagonal included.
fn within_row_sums(zh: &Partition, psm: &Psm) -> Vec<f64> {
    let mut out = vec![0.0; zh.n()];
    for members in zh.members() {
        for &i in &members {
            let row = psm.row(i);
            out[i] = members.iter().map(|&j| row[j]).sum();
        }
    }
    out
}

/// `Σ_{i<j, ẑ_i = ẑ_j} P_ij`.
fn within_pair_sum(zh: &Partition, psm: &Psm) -> f64 {
    let mut total = 0.0;
    for members in zh.members() {
        for (a, &i) in members.iter().enumerate() {
            let row = psm.row(i);
            total += members[a + 1..].iter().map(|&j| row[j]).sum::<f64>();
        }
    }
    total
}

fn within_pairs(zh: &Partition) -> f64 {
    zh.sizes().iter().map(|&s| (s * s.saturating_sub(1) / 2) as f64).sum()
}

/// Posterior-expected Binder loss under the empirical PSM.
pub fn binder_expected_loss(zh: &Partition, psm: &Psm, cfg: BinderConfig) -> Result<f64> {
    check_psm(zh, psm)?;
    Ok(binder_from_sums(zh, psm.upper_sum(), within_pair_sum(zh, psm), cfg))
}

fn binder_from_sums(zh: &Partition, upper: f64, within: f64, cfg: BinderConfig) -> f64 {
    cfg.l1 * (upper - within) + cfg.l2 * (within_pairs(zh) - within)
}

/// Approximate posterior expected adjusted Rand index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PearScore {
    pub score: f64,
    /// The denominator vanished; `score` is 0 by convention.
    pub degenerate: bool,
}

/// Adjusted Rand index with `1(z_i = z_j)` replaced by `P_ij`.
pub fn pear_score(zh: &Partition, psm: &Psm) -> Result<PearScore> {
    check_psm(zh, psm)?;
    Ok(pear_from_sums(zh, psm.upper_sum(), within_pair_sum(zh, psm)))
}

fn pear_from_sums(zh: &Partition, upper: f64, within: f64) -> PearScore {
    let n = zh.n() as f64;
    let total = n * (n - 1.0) / 2.0;
    let b = within_pairs(zh);
    let expected = b * upper / total;
    let denom = 0.5 * (b + upper) - expected;
    if !(denom.abs() > 1e-12 * total) {
        return PearScore {
            score: 0.0,
            degenerate: true,
        };
    }
    PearScore {
        score: (within - expected) / denom,
        degenerate: false,
    }
}

fn sorted_sum(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs.iter().sum()
}

fn n_log2_n(x: usize) -> f64 {
    if x == 0 {
        0.0
    } else {
        let x = x as f64;
        x * x.log2()
    }
}

/// Variation of information in bits.
pub fn vi_distance(z: &Partition, zh: &Partition) -> Result<f64> {
    let table = contingency(z, zh)?;
    let n = table.n as f64;
    // sorted sums keep the result exactly symmetric
    let h_rows = sorted_sum(table.rows.iter().map(|&x| n_log2_n(x)).collect());
    let h_cols = sorted_sum(table.cols.iter().map(|&x| n_log2_n(x)).collect());
    let h_joint = sorted_sum(table.counts.iter().flatten().map(|&x| n_log2_n(x)).collect());
    Ok(((h_rows + h_cols - 2.0 * h_joint) / n).max(0.0))
}

/// Lower-bound objective for expected VI, up to a `ẑ`-independent constant.
pub fn vi_lb_expected(zh: &Partition, psm: &Psm) -> Result<f64> {
    check_psm(zh, psm)?;
    Ok(vi_lb_from_rows(zh, &within_row_sums(zh, psm)))
}

fn vi_lb_from_rows(zh: &Partition, rows: &[f64]) -> f64 {
    let sizes: f64 = zh.sizes().iter().map(|&s| n_log2_n(s)).sum();
    sizes - 2.0 * rows.iter().map(|r| r.log2()).sum::<f64>()
}

/// Monte Carlo posterior expected VI, averaging over every retained sample.
pub fn vi_expected(zh: &Partition, traces: &[SampleTrace]) -> Result<f64> {
    let mut total = 0.0;
    let mut m = 0usize;
    for tr in traces {
        for r in &tr.records {
            total += vi_distance(&r.partition, zh)?;
            m += 1;
        }
    }
    if m == 0 {
        return Err(Error::invalid("no samples to summarise"));
    }
    Ok(total / m as f64)
}
