//! Datasets, partitions and sample traces.
//!
//! Cluster labels are stored 0-based in memory (`0..t`). Every file format
//! in this crate reads and writes them 1-based.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// An `n × dim` matrix of finite observations, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    values: Vec<f64>,
    n: usize,
    dim: usize,
    standardized: bool,
}

impl Dataset {
    pub fn new(values: Vec<f64>, n: usize, dim: usize) -> Result<Self> {
        if n == 0 || dim == 0 {
            return Err(Error::invalid("dataset needs at least one row and one column"));
        }
        if values.len() != n * dim {
            return Err(Error::Dimension {
                expected: n * dim,
                got: values.len(),
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite value at row {}, column {}",
                pos / dim + 1,
                pos % dim + 1
            )));
        }
        Ok(Dataset {
            values,
            n,
            dim,
            standardized: false,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != dim) {
            return Err(Error::invalid(format!(
                "row {} has {} columns, expected {}",
                bad + 1,
                rows[bad].len(),
                dim
            )));
        }
        Self::new(rows.concat(), rows.len(), dim)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_standardized(&self) -> bool {
        self.standardized
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dim)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn column_mean(&self, d: usize) -> f64 {
        self.rows().map(|r| r[d]).sum::<f64>() / self.n as f64
    }

    /// Sample standard deviation with the `n - 1` denominator.
    pub fn column_sd(&self, d: usize) -> f64 {
        let mean = self.column_mean(d);
        let ss: f64 = self.rows().map(|r| (r[d] - mean).powi(2)).sum();
        (ss / (self.n as f64 - 1.0)).sqrt()
    }

    /// Column-wise `(x - mean) / sd` copy with the standardized flag set.
    pub fn standardize(&self) -> Result<Dataset> {
        if self.n < 2 {
            return Err(Error::invalid("standardization needs at least two observations"));
        }
        let mut values = self.values.clone();
        for d in 0..self.dim {
            let mean = self.column_mean(d);
            let sd = self.column_sd(d);
            if !(sd > 0.0) || sd <= 1e-300 {
                return Err(Error::ZeroVariance { column: d + 1 });
            }
            for row in values.chunks_exact_mut(self.dim) {
                row[d] = (row[d] - mean) / sd;
            }
        }
        Ok(Dataset {
            values,
            n: self.n,
            dim: self.dim,
            standardized: true,
        })
    }

    /// Reads a headerless CSV with one observation per line.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|field| {
                    field.trim().parse::<f64>().map_err(|e| {
                        Error::parse(format!("{}:{}", path.display(), lineno + 1), e.to_string())
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        Dataset::from_rows(&rows)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::with_capacity(self.values.len() * 20);
        for row in self.rows() {
            let fields: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }
}

/// A set partition of `0..n` with contiguous labels `0..t`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Partition {
    labels: Vec<usize>,
    sizes: Vec<usize>,
}

impl Partition {
    /// Builds a partition from labels already known to be contiguous.
    pub fn from_contiguous(labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::invalid("partition must contain at least one observation"));
        }
        let t = labels.iter().max().map_or(0, |m| m + 1);
        let mut sizes = vec![0usize; t];
        for &l in &labels {
            sizes[l] += 1;
        }
        if let Some(k) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::invalid(format!("label {} is unused; labels are not contiguous", k + 1)));
        }
        Ok(Partition { labels, sizes })
    }

    /// Single cluster containing all `n` observations.
    pub fn one_cluster(n: usize) -> Self {
        Partition {
            labels: vec![0; n],
            sizes: vec![n],
        }
    }

    pub fn singletons(n: usize) -> Self {
        Partition {
            labels: (0..n).collect(),
            sizes: vec![1; n],
        }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn t(&self) -> usize {
        self.sizes.len()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Member indices of each cluster, in ascending order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = self.sizes.iter().map(|&s| Vec::with_capacity(s)).collect();
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    /// Whether the labels are in order of first appearance.
    pub fn is_canonical(&self) -> bool {
        let mut next = 0;
        for &l in &self.labels {
            if l > next {
                return false;
            }
            if l == next {
                next += 1;
            }
        }
        true
    }

    /// Same set partition, relabelled by order of first appearance.
    pub fn canonical(&self) -> Partition {
        relabel_contiguous(&self.labels)
    }

    pub fn same_clusters(&self, other: &Partition) -> bool {
        self.n() == other.n() && self.canonical().labels == other.canonical().labels
    }

    pub fn labels_one_based(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l + 1).collect()
    }
}

/// Relabels arbitrary ids by order of first appearance.
pub fn relabel_contiguous(raw: &[usize]) -> Partition {
    let mut map: HashMap<usize, usize> = HashMap::new();
    let mut labels = Vec::with_capacity(raw.len());
    let mut sizes = Vec::new();
    for &r in raw {
        let next = map.len();
        let l = *map.entry(r).or_insert(next);
        if l == sizes.len() {
            sizes.push(0);
        }
        sizes[l] += 1;
        labels.push(l);
    }
    Partition { labels, sizes }
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Partition> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut raw = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: usize = line
            .parse()
            .map_err(|_| Error::parse(format!("{}:{}", path.display(), lineno + 1), "expected a positive integer label"))?;
        if v == 0 {
            return Err(Error::parse(format!("{}:{}", path.display(), lineno + 1), "labels are 1-based"));
        }
        raw.push(v);
    }
    if raw.is_empty() {
        return Err(Error::invalid(format!("{} contains no labels", path.display())));
    }
    Ok(relabel_contiguous(&raw))
}

pub fn write_labels(path: impl AsRef<Path>, partition: &Partition) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for l in partition.labels() {
        writeln!(f, "{}", l + 1)?;
    }
    Ok(())
}

/// Every set partition of `0..n` in canonical form, by restricted growth strings.
///
/// The count is the Bell number, so keep `n` small.
pub fn enumerate_partitions(n: usize) -> Vec<Partition> {
    fn rec(i: usize, max: usize, cur: &mut Vec<usize>, out: &mut Vec<Partition>) {
        if i == cur.len() {
            out.push(relabel_contiguous(cur));
            return;
        }
        for l in 0..=max + 1 {
            cur[i] = l;
            rec(i + 1, max.max(l), cur, out);
        }
    }
    let mut out = Vec::new();
    if n == 0 {
        return out;
    }
    let mut cur = vec![0usize; n];
    rec(1, 0, &mut cur, &mut out);
    out
}

/// One retained MCMC sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    pub partition: Partition,
    pub log_post: f64,
    pub alpha: Option<f64>,
}

impl TraceRecord {
    pub fn t(&self) -> usize {
        self.partition.t()
    }
}

/// Thinned, post-burn-in samples of one chain.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleTrace {
    pub chain_id: usize,
    pub records: Vec<TraceRecord>,
}

impl SampleTrace {
    pub fn new(chain_id: usize) -> Self {
        SampleTrace {
            chain_id,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, record: TraceRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.iter <= last.iter {
                return Err(Error::invalid(format!(
                    "iteration {} does not follow {}",
                    record.iter, last.iter
                )));
            }
            if record.partition.n() != last.partition.n() {
                return Err(Error::Dimension {
                    expected: last.partition.n(),
                    got: record.partition.n(),
                });
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn t_series(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.t() as f64).collect()
    }

    pub fn log_post_series(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.log_post).collect()
    }

    pub fn alpha_series(&self) -> Option<Vec<f64>> {
        self.records.iter().map(|r| r.alpha).collect()
    }
}

/// Total retained samples over a set of chains.
pub fn total_samples(traces: &[SampleTrace]) -> usize {
    traces.iter().map(SampleTrace::len).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_counts_are_bell_numbers() {
        let bell = [1usize, 1, 2, 5, 15, 52, 203, 877, 4140];
        for (n, &b) in bell.iter().enumerate().skip(1) {
            let all = enumerate_partitions(n);
            assert_eq!(all.len(), b);
            assert!(all.iter().all(|p| p.is_canonical() && p.n() == n));
            let distinct: std::collections::HashSet<_> = all.iter().collect();
            assert_eq!(distinct.len(), b);
        }
    }

    fn co_membership(labels: &[usize]) -> Vec<bool> {
        let n = labels.len();
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                out.push(labels[i] == labels[j]);
            }
        }
        out
    }

    #[test]
    fn relabel_examples() {
        let p = relabel_contiguous(&[5, 5, 2, 9]);
        assert_eq!(p.labels_one_based(), vec![1, 1, 2, 3]);
        assert_eq!(p.t(), 3);
        assert_eq!(p.sizes(), &[2, 1, 1]);

        assert_eq!(relabel_contiguous(&[1, 2, 3]).labels_one_based(), vec![1, 2, 3]);
        assert_eq!(relabel_contiguous(&[2, 1, 2, 1]).labels_one_based(), vec![1, 2, 1, 2]);
    }

    #[test]
    fn standardize_two_points() {
        let d = Dataset::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
        let s = d.standardize().unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((s.row(0)[0] + h).abs() < 1e-12);
        assert!((s.row(1)[0] - h).abs() < 1e-12);
        assert!(s.is_standardized());
        assert!(!d.is_standardized());
        assert_eq!(d.row(0), &[1.0]);
    }

    #[test]
    fn standardize_is_idempotent() {
        let d = Dataset::from_rows(&[
            vec![1.0, -2.0],
            vec![3.5, 0.25],
            vec![-0.5, 7.0],
            vec![2.0, 1.0],
        ])
        .unwrap();
        let once = d.standardize().unwrap();
        let twice = once.standardize().unwrap();
        for (a, b) in once.values().iter().zip(twice.values()) {
            assert!((a - b).abs() < 1e-9);
        }
        for c in 0..2 {
            assert!(once.column_mean(c).abs() < 1e-9);
            assert!((once.column_sd(c) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn standardize_constant_column_fails() {
        let d = Dataset::from_rows(&[vec![1.0, 2.0], vec![3.0, 2.0]]).unwrap();
        match d.standardize() {
            Err(Error::ZeroVariance { column }) => assert_eq!(column, 2),
            other => panic!("expected zero-variance error, got {other:?}"),
        }
    }

    #[test]
    fn dataset_rejects_non_finite() {
        assert!(Dataset::new(vec![1.0, f64::NAN], 2, 1).is_err());
        assert!(Dataset::new(vec![], 0, 1).is_err());
    }

    #[test]
    fn from_contiguous_checks_gaps() {
        assert!(Partition::from_contiguous(vec![0, 2]).is_err());
        let p = Partition::from_contiguous(vec![1, 0, 1]).unwrap();
        assert_eq!(p.sizes(), &[1, 2]);
        assert!(!p.is_canonical());
        assert!(p.canonical().is_canonical());
        assert!(p.same_clusters(&p.canonical()));
    }

    #[test]
    fn trace_rejects_non_increasing_iterations() {
        let mut tr = SampleTrace::new(0);
        let rec = |iter| TraceRecord {
            iter,
            partition: Partition::one_cluster(3),
            log_post: 0.0,
            alpha: None,
        };
        tr.push(rec(2)).unwrap();
        assert!(tr.push(rec(2)).is_err());
        tr.push(rec(4)).unwrap();
        assert_eq!(tr.len(), 2);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn relabel_idempotent_and_preserves_partition(raw in proptest::collection::vec(1usize..8, 1..30)) {
                let once = relabel_contiguous(&raw);
                let twice = relabel_contiguous(once.labels());
                prop_assert_eq!(&once, &twice);
                prop_assert_eq!(co_membership(&raw), co_membership(once.labels()));
                prop_assert_eq!(once.sizes().iter().sum::<usize>(), raw.len());
                prop_assert!(once.is_canonical());
            }
        }
    }
}
