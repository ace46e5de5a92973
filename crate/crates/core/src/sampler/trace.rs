//! Tab-separated trace files.
//!
//! Leading `#` lines carry free-form header comments. The column header is
//! `chain iter t logpost alpha labels`; labels are 1-based and space-separated,
//! `alpha` is `NA` when absent.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::{relabel_contiguous, SampleTrace, TraceRecord};
use crate::error::{Error, Result};

pub const TRACE_COLUMNS: &str = "chain\titer\tt\tlogpost\talpha\tlabels";

/// Renders traces; output depends only on the inputs.
pub fn format_trace(comments: &[String], traces: &[SampleTrace]) -> String {
    let mut out = String::new();
    for c in comments {
        for line in c.lines() {
            let _ = writeln!(out, "# {line}");
        }
    }
    out.push_str(TRACE_COLUMNS);
    out.push('\n');
    for tr in traces {
        for r in &tr.records {
            let alpha = r.alpha.map_or_else(|| "NA".to_string(), |a| format!("{a:e}"));
            let labels: Vec<String> = r.partition.labels_one_based().iter().map(|l| l.to_string()).collect();
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{:e}\t{}\t{}",
                tr.chain_id,
                r.iter,
                r.t(),
                r.log_post,
                alpha,
                labels.join(" ")
            );
        }
    }
    out
}

pub fn write_trace(path: impl AsRef<Path>, comments: &[String], traces: &[SampleTrace]) -> Result<()> {
    fs::write(path, format_trace(comments, traces))?;
    Ok(())
}

/// Parsed trace file: header comments and one trace per chain id, in order of appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub comments: Vec<String>,
    pub traces: Vec<SampleTrace>,
}

pub fn parse_trace(text: &str, origin: &str) -> Result<TraceFile> {
    let mut comments = Vec::new();
    let mut traces: Vec<SampleTrace> = Vec::new();
    let mut seen_header = false;
    for (lineno, line) in text.lines().enumerate() {
        let loc = || format!("{origin}:{}", lineno + 1);
        if let Some(c) = line.strip_prefix('#') {
            comments.push(c.strip_prefix(' ').unwrap_or(c).to_string());
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        if !seen_header {
            if line.trim_end() != TRACE_COLUMNS {
                return Err(Error::parse(loc(), format!("expected header '{TRACE_COLUMNS}'")));
            }
            seen_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(Error::parse(loc(), format!("expected 6 tab-separated fields, found {}", fields.len())));
        }
        let num = |s: &str, what: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::parse(loc(), format!("bad {what} '{s}'")))
        };
        let chain = num(fields[0], "chain")?;
        let iter = num(fields[1], "iteration")?;
        let t = num(fields[2], "cluster count")?;
        let log_post: f64 = fields[3]
            .parse()
            .map_err(|_| Error::parse(loc(), format!("bad log-posterior '{}'", fields[3])))?;
        let alpha = match fields[4] {
            "NA" => None,
            s => Some(s.parse::<f64>().map_err(|_| Error::parse(loc(), format!("bad alpha '{s}'")))?),
        };
        let raw = fields[5]
            .split_whitespace()
            .map(|s| num(s, "label"))
            .collect::<Result<Vec<usize>>>()?;
        if raw.is_empty() || raw.contains(&0) {
            return Err(Error::parse(loc(), "labels must be 1-based and non-empty"));
        }
        let partition = relabel_contiguous(&raw);
        if partition.t() != t {
            return Err(Error::parse(loc(), format!("t = {t} but labels have {} clusters", partition.t())));
        }
        let idx = match traces.iter().position(|tr| tr.chain_id == chain) {
            Some(i) => i,
            None => {
                traces.push(SampleTrace::new(chain));
                traces.len() - 1
            }
        };
        if let Some(first) = traces.iter().find_map(|tr| tr.records.first()) {
            if first.partition.n() != partition.n() {
                return Err(Error::parse(loc(), "rows have different numbers of labels"));
            }
        }
        traces[idx]
            .push(TraceRecord {
                iter,
                partition,
                log_post,
                alpha,
            })
            .map_err(|e| Error::parse(loc(), e.to_string()))?;
    }
    if !seen_header {
        return Err(Error::parse(origin.to_string(), "missing column header"));
    }
    Ok(TraceFile { comments, traces })
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<TraceFile> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_trace(&text, &path.display().to_string())
}
