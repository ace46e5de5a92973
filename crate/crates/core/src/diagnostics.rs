//! Convergence checks on scalar chain functionals.
//!
//! Geweke uses plain window variances rather than spectral density estimates,
//! and R̂ is the classic (non-rank-normalised) form.

use crate::error::{Error, Result};

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Difference of means between the first `first` and last `last` fractions of
/// the trace, in standard-error units.
pub fn geweke_z(trace: &[f64], first: f64, last: f64) -> Result<f64> {
    if trace.len() < 20 {
        return Err(Error::Diagnostic(format!("Geweke needs at least 20 values, got {}", trace.len())));
    }
    if !(first > 0.0 && last > 0.0 && first + last <= 1.0) {
        return Err(Error::invalid("Geweke window fractions must be positive and sum to at most 1"));
    }
    let n = trace.len();
    let na = ((first * n as f64).floor() as usize).max(2);
    let nb = ((last * n as f64).floor() as usize).max(2);
    let (ma, va) = mean_var(&trace[..na]);
    let (mb, vb) = mean_var(&trace[n - nb..]);
    let se2 = va / na as f64 + vb / nb as f64;
    if !(se2 > 0.0) {
        return Err(Error::Diagnostic("Geweke windows have zero variance".into()));
    }
    Ok((ma - mb) / se2.sqrt())
}

/// Potential scale reduction factor for equal-length chains.
pub fn gelman_rubin(chains: &[Vec<f64>]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::Diagnostic("R-hat needs at least two chains".into()));
    }
    let n = chains[0].len();
    if chains.iter().any(|c| c.len() != n) {
        return Err(Error::Diagnostic("R-hat chains must have equal length".into()));
    }
    if n < 10 {
        return Err(Error::Diagnostic(format!("R-hat needs at least 10 draws per chain, got {n}")));
    }
    let m = chains.len() as f64;
    let nf = n as f64;
    let stats: Vec<(f64, f64)> = chains.iter().map(|c| mean_var(c)).collect();
    let grand = stats.iter().map(|s| s.0).sum::<f64>() / m;
    let b = nf / (m - 1.0) * stats.iter().map(|s| (s.0 - grand) * (s.0 - grand)).sum::<f64>();
    let w = stats.iter().map(|s| s.1).sum::<f64>() / m;
    if !(w > 0.0) {
        return Err(Error::Diagnostic("R-hat within-chain variance is zero".into()));
    }
    Ok((((nf - 1.0) / nf * w + b / nf) / w).sqrt())
}
