//! The four commands as library functions. Nothing here prints; callers get
//! structured results and decide what to write.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::components::{ComponentModel, ModelKind};
use crate::data::{write_labels, Dataset, Partition, SampleTrace};
use crate::diagnostics::{gelman_rubin, geweke_z};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::sampler::trace::write_trace;
use crate::sampler::{mode_of, posterior_num_components, run, MoveStats};
use crate::summarize::{
    adjusted_rand_index, compute_psm, format_summary, map_sample, medvedovic, optimize_summary, write_psm, Psm,
    SummaryResult,
};
use crate::synth::{generate, MixtureSpec};

use super::config::{Config, Method};

pub const DATA_FILE: &str = "data.csv";
pub const LABELS_FILE: &str = "labels.txt";
pub const TRACE_FILE: &str = "trace.tsv";
pub const PSM_FILE: &str = "psm.bin";
pub const TABLE_FILE: &str = "summaries.tsv";
pub const REPLICATE_FILE: &str = "replicates.csv";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Writes `data.csv` and `labels.txt` (1-based truth) into `out`.
pub fn cmd_generate(spec: &MixtureSpec, n: usize, seed: u64, out: &Path) -> Result<(Dataset, Partition)> {
    let (data, truth) = generate(spec, n, &mut RngStream::data(seed, 0).rng())?;
    create_dir(out)?;
    data.write_csv(out.join(DATA_FILE))?;
    write_labels(out.join(LABELS_FILE), &truth)?;
    Ok((data, truth))
}

/// Chains, statistics and derived quantities of one fit.
#[derive(Debug)]
pub struct FitOutput {
    /// Traces of the chains that finished.
    pub traces: Vec<SampleTrace>,
    pub stats: MoveStats,
    /// `(chain, message)` for chains that stopped on an error.
    pub failures: Vec<(usize, String)>,
    pub standardized: bool,
    /// Posterior over the number of components, indexed by `k`.
    pub posterior_k: Vec<f64>,
    pub mode_k: usize,
    pub header: Vec<String>,
}

impl FitOutput {
    pub fn numeric_failure(&self) -> bool {
        !self.failures.is_empty()
    }
}

/// Runs the sampler under `cfg`. The diagonal model standardizes its input
/// first and records that in the header.
pub fn cmd_fit(data: &Dataset, cfg: &Config, source: &str) -> Result<FitOutput> {
    cfg.validate()?;
    let kind = cfg.model_kind()?;
    let prior = cfg.allocation_prior()?;
    let sampler = cfg.sampler_config()?;
    let mut header = vec![format!("bnpclust fit; data = {source}; n = {}; p = {}", data.n(), data.dim())];
    let standardized = kind == ModelKind::Diag && !data.is_standardized();
    let owned;
    let data = if standardized {
        owned = data.standardize()?;
        header.push("data standardized column-wise before fitting (mvn-diag)".into());
        &owned
    } else {
        data
    };
    header.push("config:".into());
    header.extend(cfg.to_toml().lines().map(str::to_string));
    let model = ComponentModel::from_dataset(kind, data)?;
    let out = run(data, &model, prior, sampler)?;
    let stats = out.stats();
    let mut traces = Vec::new();
    let mut failures = Vec::new();
    for c in out.chains {
        match c.error {
            None => traces.push(c.trace),
            Some(e) => failures.push((c.trace.chain_id, e.to_string())),
        }
    }
    if traces.is_empty() {
        let msg = failures.iter().map(|(c, m)| format!("chain {c}: {m}")).collect::<Vec<_>>().join("; ");
        return Err(Error::numeric(format!("every chain failed: {msg}")));
    }
    let posterior_k = posterior_num_components(&traces, &prior, data.n())?;
    let mode_k = mode_of(&posterior_k);
    Ok(FitOutput {
        traces,
        stats,
        failures,
        standardized,
        posterior_k,
        mode_k,
        header,
    })
}

/// Acceptance rates, Geweke scores per chain and R̂ across chains, as text.
pub fn fit_report(fit: &FitOutput) -> String {
    let fmt = |r: Result<f64>| r.map_or_else(|_| "NA".to_string(), |v| format!("{v:.3}"));
    let mut out = String::new();
    let s = &fit.stats;
    let _ = writeln!(
        out,
        "split acceptance {}/{} ({:.4}), merge acceptance {}/{} ({:.4}), non-finite ratios {}",
        s.split_accepted,
        s.split_proposed,
        s.split_rate(),
        s.merge_accepted,
        s.merge_proposed,
        s.merge_rate(),
        s.nonfinite
    );
    let _ = writeln!(out, "chain\tsamples\tgeweke_t\tgeweke_logpost");
    for tr in &fit.traces {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}",
            tr.chain_id,
            tr.len(),
            fmt(geweke_z(&tr.t_series(), 0.1, 0.5)),
            fmt(geweke_z(&tr.log_post_series(), 0.1, 0.5))
        );
    }
    let ts: Vec<Vec<f64>> = fit.traces.iter().map(|t| t.t_series()).collect();
    let lps: Vec<Vec<f64>> = fit.traces.iter().map(|t| t.log_post_series()).collect();
    let _ = writeln!(out, "rhat_t\t{}", fmt(gelman_rubin(&ts)));
    let _ = writeln!(out, "rhat_logpost\t{}", fmt(gelman_rubin(&lps)));
    let _ = writeln!(out, "posterior mode of K\t{}", fit.mode_k);
    for (c, m) in &fit.failures {
        let _ = writeln!(out, "chain {c} failed: {m}");
    }
    out
}

pub fn write_fit(fit: &FitOutput, path: &Path) -> Result<()> {
    write_trace(path, &fit.header, &fit.traces)
}

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub name: String,
    pub result: SummaryResult,
    pub ari: Option<f64>,
}

pub fn run_method(method: Method, traces: &[SampleTrace], psm: &Psm, cfg: &Config) -> Result<SummaryResult> {
    match method {
        Method::Optimize(loss, strategy) => optimize_summary(traces, psm, loss, strategy, cfg.k_max()),
        Method::Medvedovic => medvedovic(psm, cfg.summarize.epsilon),
        Method::Map => map_sample(traces),
    }
}

/// Builds the similarity matrix and runs every configured method.
pub fn cmd_summarize(traces: &[SampleTrace], cfg: &Config, truth: Option<&Partition>) -> Result<(Psm, Vec<SummaryRow>)> {
    let methods = cfg.methods()?;
    let psm = compute_psm(traces)?;
    if let Some(t) = truth {
        if t.n() != psm.n() {
            return Err(Error::Dimension {
                expected: psm.n(),
                got: t.n(),
            });
        }
    }
    let mut rows = Vec::with_capacity(methods.len());
    for (name, method) in methods {
        let result = run_method(method, traces, &psm, cfg)?;
        let ari = truth.map(|t| adjusted_rand_index(t, &result.partition)).transpose()?;
        rows.push(SummaryRow { name, result, ari });
    }
    Ok((psm, rows))
}

/// File name of a method's summary: `summary-<loss>_<strategy>.txt`.
pub fn summary_file_name(method: &str) -> String {
    format!("summary-{}.txt", method.replace('+', "_"))
}

pub fn format_table(rows: &[SummaryRow]) -> String {
    let mut out = String::from("method\tnum_clusters\tvalue\tari\n");
    for r in rows {
        let ari = r.ari.map_or_else(|| "NA".to_string(), |a| format!("{a:e}"));
        let _ = writeln!(out, "{}\t{}\t{:e}\t{}", r.name, r.result.num_clusters, r.result.value, ari);
    }
    out
}

/// Writes the PSM, one summary per method and the table into `out`.
pub fn write_summaries(out: &Path, header: &[String], psm: &Psm, rows: &[SummaryRow]) -> Result<Vec<PathBuf>> {
    create_dir(out)?;
    let mut written = vec![out.join(PSM_FILE)];
    write_psm(&written[0], psm)?;
    for r in rows {
        let path = out.join(summary_file_name(&r.name));
        fs::write(&path, format_summary(header, &r.result))?;
        written.push(path);
    }
    let table = out.join(TABLE_FILE);
    fs::write(&table, format_table(rows))?;
    written.push(table);
    Ok(written)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// Four model types on the benchmark at moderate N.
    Moderate,
    /// Dirichlet process with component hyperpriors at larger N.
    DpmLarge,
    /// Diagonal-covariance fits to the benchmark.
    Misspec,
}

impl Scenario {
    pub fn parse(s: &str) -> Result<Scenario> {
        match s {
            "moderate" => Ok(Scenario::Moderate),
            "dpm-large" => Ok(Scenario::DpmLarge),
            "misspec" => Ok(Scenario::Misspec),
            other => Err(Error::invalid(format!(
                "unknown scenario '{other}'; expected moderate, dpm-large or misspec"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Moderate => "moderate",
            Scenario::DpmLarge => "dpm-large",
            Scenario::Misspec => "misspec",
        }
    }

    /// Desk-scale default N. The full-scale study used N = 10^4 for the last two.
    pub fn default_n(&self) -> usize {
        match self {
            Scenario::Moderate => 500,
            Scenario::DpmLarge | Scenario::Misspec => 2000,
        }
    }

    /// `(label, model, prior)` fitted per replicate. Both Dirichlet process
    /// variants put an Exponential(1) hyperprior on α; the H suffix refers to
    /// hyperpriors on the component parameters.
    pub fn fits(&self) -> &'static [(&'static str, &'static str, &'static str)] {
        match self {
            Scenario::Moderate => &[
                ("MFM", "mvn-full", "mfm"),
                ("MFMH", "mvn-full-hier", "mfm"),
                ("DPM", "mvn-full", "dpm-hyper"),
                ("DPMH", "mvn-full-hier", "dpm-hyper"),
            ],
            Scenario::DpmLarge => &[("DPMH", "mvn-full-hier", "dpm-hyper")],
            Scenario::Misspec => &[("MFM-diag", "mvn-diag", "mfm"), ("DPM-diag", "mvn-diag", "dpm-hyper")],
        }
    }
}

/// One line of the replicate CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateRow {
    pub replicate: usize,
    pub model: String,
    pub method: String,
    pub num_clusters: Option<usize>,
    pub mode_k: Option<usize>,
    pub ari: Option<f64>,
    /// `ok`, or a description of failed chains or a failed fit.
    pub status: String,
}

pub const REPLICATE_COLUMNS: &str = "replicate,model,method,num_clusters,posterior_mode_k,ari,status";

impl ReplicateRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "NA".to_string());
        format!(
            "{},{},{},{},{},{},{}",
            self.replicate,
            self.model,
            self.method,
            opt(self.num_clusters.map(|k| k.to_string())),
            opt(self.mode_k.map(|k| k.to_string())),
            opt(self.ari.map(|a| format!("{a:e}"))),
            self.status.replace([',', '\n'], ";")
        )
    }
}

/// Seed of the chains for replicate `r`; data come from the data stream of `seed`.
pub fn replicate_chain_seed(seed: u64, r: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(r as u64)
}

/// Fits every model of the scenario to `replicates` fresh datasets and
/// summarises each fit. A failed fit is reported in its rows and the loop
/// continues. `on_row` sees rows as they are produced.
pub fn cmd_replicate(
    scenario: Scenario,
    replicates: usize,
    n: usize,
    seed: u64,
    base: &Config,
    mut on_row: impl FnMut(&ReplicateRow),
) -> Result<Vec<ReplicateRow>> {
    if n == 0 || replicates == 0 {
        return Err(Error::invalid("replicate needs n >= 1 and at least one replicate"));
    }
    base.validate()?;
    let spec = crate::synth::benchmark_spec();
    let mut rows = Vec::new();
    for r in 0..replicates {
        let (data, truth) = generate(&spec, n, &mut RngStream::data(seed, r).rng())?;
        for &(label, model, prior) in scenario.fits() {
            let mut cfg = base.clone();
            cfg.model.kind = model.into();
            cfg.prior.kind = prior.into();
            cfg.mcmc.seed = replicate_chain_seed(seed, r);
            let mut emit = |row: ReplicateRow| {
                on_row(&row);
                rows.push(row);
            };
            let fit = match cmd_fit(&data, &cfg, &format!("{} replicate {r}", scenario.name())) {
                Ok(f) => f,
                Err(e) => {
                    emit(ReplicateRow {
                        replicate: r,
                        model: label.into(),
                        method: "fit".into(),
                        num_clusters: None,
                        mode_k: None,
                        ari: None,
                        status: format!("failed: {e}"),
                    });
                    continue;
                }
            };
            let status = if fit.failures.is_empty() {
                "ok".to_string()
            } else {
                let f: Vec<String> = fit.failures.iter().map(|(c, m)| format!("chain {c} failed: {m}")).collect();
                f.join("; ")
            };
            match cmd_summarize(&fit.traces, &cfg, Some(&truth)) {
                Ok((_, summaries)) => {
                    for s in summaries {
                        emit(ReplicateRow {
                            replicate: r,
                            model: label.into(),
                            method: s.name,
                            num_clusters: Some(s.result.num_clusters),
                            mode_k: Some(fit.mode_k),
                            ari: s.ari,
                            status: status.clone(),
                        });
                    }
                }
                Err(e) => emit(ReplicateRow {
                    replicate: r,
                    model: label.into(),
                    method: "summarize".into(),
                    num_clusters: None,
                    mode_k: Some(fit.mode_k),
                    ari: None,
                    status: format!("failed: {e}"),
                }),
            }
        }
    }
    Ok(rows)
}
