//! Run configuration, read from TOML with sections `model`, `prior`, `mcmc`
//! and `summarize`. Every key is optional; missing keys take the documented
//! defaults and unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::components::ModelKind;
use crate::error::{Error, Result};
use crate::priors::{AllocationPrior, DpPrior, KPrior, MfmPrior};
use crate::sampler::SplitMergeConfig;
use crate::summarize::{BinderConfig, Loss, Strategy, DEFAULT_EPSILON};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelSection,
    pub prior: PriorSection,
    pub mcmc: McmcSection,
    pub summarize: SummarizeSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// `mvn-full`, `mvn-full-hier` or `mvn-diag`.
    pub kind: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { kind: "mvn-full".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSection {
    /// `dpm` (fixed α), `dpm-hyper` (α ~ Exponential(alpha_rate)) or `mfm`.
    pub kind: String,
    /// Fixed concentration, or the starting value is drawn from the hyperprior.
    pub alpha: f64,
    pub alpha_rate: f64,
    pub gamma: f64,
    /// `geometric`, `point-mass` or `poisson` (K - 1 ~ Poisson).
    pub k_prior: String,
    /// Success probability, point, or Poisson mean respectively.
    pub k_param: f64,
}

impl Default for PriorSection {
    fn default() -> Self {
        PriorSection {
            kind: "mfm".into(),
            alpha: 1.0,
            alpha_rate: 1.0,
            gamma: 1.0,
            k_prior: "geometric".into(),
            k_param: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcSection {
    pub iters: usize,
    pub burnin: usize,
    pub thin: usize,
    pub chains: usize,
    pub seed: u64,
    pub n_split: usize,
    pub n_merge: usize,
    pub param_refresh_per_iter: usize,
    pub allocation_scans: usize,
}

impl Default for McmcSection {
    fn default() -> Self {
        let d = SplitMergeConfig::default();
        McmcSection {
            iters: d.iters,
            burnin: d.burnin,
            thin: d.thin,
            chains: d.chains,
            seed: d.seed,
            n_split: d.n_split,
            n_merge: d.n_merge,
            param_refresh_per_iter: d.param_refresh_per_iter,
            allocation_scans: d.allocation_scans,
        }
    }
}

pub const DEFAULT_METHODS: &[&str] = &[
    "binder+average",
    "binder+complete",
    "binder+samples",
    "binder+pam",
    "pear+average",
    "pear+complete",
    "pear+samples",
    "pear+pam",
    "vilb+average",
    "vilb+complete",
    "vilb+samples",
    "vilb+pam",
    "medvedovic",
    "map",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SummarizeSection {
    /// `loss+strategy` pairs, `medvedovic` or `map`.
    pub methods: Vec<String>,
    pub epsilon: f64,
    /// Largest cluster count tried by the hierarchical and PAM strategies; 0 means N/8.
    pub k_max: usize,
    pub binder_l1: f64,
    pub binder_l2: f64,
}

impl Default for SummarizeSection {
    fn default() -> Self {
        SummarizeSection {
            methods: DEFAULT_METHODS.iter().map(|s| s.to_string()).collect(),
            epsilon: DEFAULT_EPSILON,
            k_max: 0,
            binder_l1: 1.0,
            binder_l2: 1.0,
        }
    }
}

/// One entry of the summary grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Optimize(Loss, Strategy),
    Medvedovic,
    Map,
}

impl Method {
    pub fn parse(s: &str, binder: BinderConfig) -> Result<Method> {
        match s {
            "medvedovic" => Ok(Method::Medvedovic),
            "map" => Ok(Method::Map),
            _ => {
                let (l, st) = s
                    .split_once('+')
                    .ok_or_else(|| Error::invalid(format!("unknown method '{s}'; expected loss+strategy, medvedovic or map")))?;
                let loss = match Loss::parse(l)? {
                    Loss::Binder(_) => Loss::Binder(binder),
                    other => other,
                };
                let strategy = Strategy::parse(st)?;
                if loss == Loss::Vi && strategy != Strategy::Samples {
                    return Err(Error::invalid("the vi loss is only available with the samples strategy"));
                }
                Ok(Method::Optimize(loss, strategy))
            }
        }
    }
}

impl Config {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Config> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::parse(origin, e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Config> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    /// Canonical rendering, echoed into output headers.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model_kind()?;
        self.allocation_prior()?.validate()?;
        self.sampler_config()?;
        self.binder()?;
        self.methods()?;
        if !(self.summarize.epsilon > 0.0 && self.summarize.epsilon < 1.0) {
            return Err(Error::invalid(format!("summarize.epsilon must lie in (0, 1), got {}", self.summarize.epsilon)));
        }
        Ok(())
    }

    pub fn model_kind(&self) -> Result<ModelKind> {
        ModelKind::parse(&self.model.kind)
    }

    pub fn allocation_prior(&self) -> Result<AllocationPrior> {
        let p = &self.prior;
        let prior = match p.kind.as_str() {
            "dpm" => AllocationPrior::Dp(DpPrior::fixed(p.alpha)),
            "dpm-hyper" => AllocationPrior::Dp(DpPrior::with_hyperprior(p.alpha, p.alpha_rate)),
            "mfm" => {
                let k_prior = match p.k_prior.as_str() {
                    "geometric" => KPrior::Geometric { p: p.k_param },
                    "point-mass" => {
                        if p.k_param.fract() != 0.0 || p.k_param < 1.0 {
                            return Err(Error::invalid(format!("point-mass K prior needs a positive integer, got {}", p.k_param)));
                        }
                        KPrior::PointMass { k: p.k_param as usize }
                    }
                    "poisson" => KPrior::ShiftedPoisson { lambda: p.k_param },
                    other => {
                        return Err(Error::invalid(format!(
                            "unknown K prior '{other}'; expected geometric, point-mass or poisson"
                        )))
                    }
                };
                AllocationPrior::Mfm(MfmPrior { gamma: p.gamma, k_prior })
            }
            other => return Err(Error::invalid(format!("unknown prior '{other}'; expected dpm, dpm-hyper or mfm"))),
        };
        prior.validate()?;
        Ok(prior)
    }

    pub fn sampler_config(&self) -> Result<SplitMergeConfig> {
        let m = &self.mcmc;
        let cfg = SplitMergeConfig {
            n_split: m.n_split,
            n_merge: m.n_merge,
            param_refresh_per_iter: m.param_refresh_per_iter,
            allocation_scans: m.allocation_scans,
            iters: m.iters,
            burnin: m.burnin,
            thin: m.thin,
            chains: m.chains,
            seed: m.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn binder(&self) -> Result<BinderConfig> {
        let cfg = BinderConfig {
            l1: self.summarize.binder_l1,
            l2: self.summarize.binder_l2,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn methods(&self) -> Result<Vec<(String, Method)>> {
        let binder = self.binder()?;
        if self.summarize.methods.is_empty() {
            return Err(Error::invalid("summarize.methods is empty"));
        }
        self.summarize
            .methods
            .iter()
            .map(|s| Ok((s.clone(), Method::parse(s, binder)?)))
            .collect()
    }

    pub fn k_max(&self) -> Option<usize> {
        (self.summarize.k_max > 0).then_some(self.summarize.k_max)
    }
}
