//! Subcommand implementations plus the sampler-options plumbing they share.

pub mod diagnose;
pub mod eval;
pub mod fit;
pub mod network;
pub mod select_rank;
pub mod simulate;

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use trecor::evalm;
use trecor::gibbs::{FitConfig, FitMode, PosteriorDraws};
use trecor::model::Hyper;

use crate::artifacts;

/// Sampler settings shared by `fit` and `select-rank`. Precedence, weakest
/// first: library defaults, config file, explicit flags.
#[derive(clap::Args, Debug, Clone, Serialize)]
pub struct SamplerOpts {
    /// TOML or JSON file with sampler settings; flags override its values.
    #[arg(long, value_name = "FILE")]
    #[serde(skip)]
    pub config: Option<std::path::PathBuf>,
    /// Total Gibbs sweeps per chain.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Sweeps discarded before any draw is kept.
    #[arg(long)]
    pub burn_in: Option<usize>,
    /// Keep every thin-th post-burn-in sweep.
    #[arg(long)]
    pub thin: Option<usize>,
    /// Base RNG seed; chains run on independent streams of this seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of independent chains.
    #[arg(long)]
    pub chains: Option<usize>,
    /// Treatment of the latent log-odds.
    #[arg(long, value_enum, default_value_t = ModeArg::Full)]
    pub mode: ModeArg,
    /// Pseudo-count for the fixed-phi and no-covariates modes.
    #[arg(long, default_value_t = 0.5)]
    pub pseudocount: f64,
    /// Directory holding the true latent matrix as phi.csv (the truth/
    /// subdirectory written by `simulate`); required by --mode oracle.
    #[arg(long, value_name = "DIR")]
    pub truth: Option<std::path::PathBuf>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    /// Sample the log-odds jointly with all other blocks.
    Full,
    /// Freeze the log-odds at the pseudo-count transform of the counts.
    FixedPhi,
    /// Freeze the log-odds at a supplied truth; counts are ignored.
    Oracle,
    /// Fixed-phi fit with an intercept-only design and rank zero.
    NoCovariates,
}

/// Subset of the sampler configuration accepted from a config file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerFile {
    pub iterations: Option<usize>,
    pub burn_in: Option<usize>,
    pub thin: Option<usize>,
    pub rank: Option<usize>,
    pub seed: Option<u64>,
    pub n_chains: Option<usize>,
    pub hyper: Option<Hyper>,
}

/// Parse a TOML or JSON config file by extension.
pub fn parse_config_file<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let raw =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(&raw).with_context(|| format!("parsing {}", path.display())),
        Some("json") => {
            serde_json::from_str(&raw).with_context(|| format!("parsing {}", path.display()))
        }
        _ => bail!("config file must end in .toml or .json: {}", path.display()),
    }
}

/// Resolve the effective `FitConfig` from defaults, file and flags; `rank`
/// comes from the caller because `select-rank` owns it per candidate.
pub fn resolve_fit_config(opts: &SamplerOpts, rank: Option<usize>) -> Result<FitConfig> {
    let file: SamplerFile = match &opts.config {
        Some(path) => parse_config_file(path)?,
        None => SamplerFile::default(),
    };
    let mut config = FitConfig::new(rank.or(file.rank).unwrap_or(1));
    if let Some(h) = file.hyper {
        config.hyper = h;
    }
    config.iterations = opts.iterations.or(file.iterations).unwrap_or(config.iterations);
    config.burn_in = opts.burn_in.or(file.burn_in).unwrap_or(config.burn_in);
    config.thin = opts.thin.or(file.thin).unwrap_or(config.thin);
    config.seed = opts.seed.or(file.seed).unwrap_or(config.seed);
    config.n_chains = opts.chains.or(file.n_chains).unwrap_or(config.n_chains);
    config.mode = resolve_mode(opts)?;
    Ok(config)
}

fn resolve_mode(opts: &SamplerOpts) -> Result<FitMode> {
    Ok(match opts.mode {
        ModeArg::Full => FitMode::Full,
        ModeArg::FixedPhi => FitMode::FixedPhi { pseudocount: opts.pseudocount },
        ModeArg::NoCovariates => FitMode::NoCovariates { pseudocount: opts.pseudocount },
        ModeArg::Oracle => {
            let dir = opts.truth.as_ref().ok_or_else(|| {
                anyhow::anyhow!("--mode oracle requires --truth DIR (a directory with phi.csv)")
            })?;
            let (_, phi_true) = artifacts::read_matrix_csv(&dir.join("phi.csv"))?;
            FitMode::Oracle { phi_true }
        }
    })
}

/// Per-parameter trace summaries over a set of chains, the diagnostics JSON
/// payload of `fit` and `diagnose`.
#[derive(Debug, Serialize)]
pub struct Diagnostics {
    pub n_chains: usize,
    pub n_draws_per_chain: usize,
    pub parameters: Vec<ParamDiag>,
}

#[derive(Debug, Serialize)]
pub struct ParamDiag {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub per_chain_mean: Vec<f64>,
    /// Split-chain potential scale reduction; absent when the chains are too
    /// short to split.
    pub split_rhat: Option<f64>,
}

/// Scalar traces tracked by default: the shrinkage rate, leading covariance
/// entries, and the Frobenius norm of each coefficient matrix.
pub fn chain_diagnostics(chains: &[PosteriorDraws]) -> Diagnostics {
    let first = &chains[0];
    let q = first.params.first().map_or(0, |p| p.q());
    let rank = first.config.rank;

    let mut traces: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
    let mut push = |name: String, extract: &dyn Fn(&trecor::model::ModelParams) -> f64| {
        let per_chain: Vec<Vec<f64>> =
            chains.iter().map(|c| c.params.iter().map(extract).collect()).collect();
        traces.push((name, per_chain));
    };
    push("lambda".into(), &|p| p.lambda);
    for k in 0..q.min(6) {
        push(format!("sigma_{k}_{k}"), &move |p| p.sigma[(k, k)]);
    }
    if q >= 2 {
        push("sigma_0_1".into(), &|p| p.sigma[(0, 1)]);
    }
    push("b0_fro".into(), &|p| p.b[0].norm());
    for r in 1..=rank {
        push(format!("b{r}_fro"), &move |p| p.b[r].norm());
    }

    let parameters = traces
        .into_iter()
        .map(|(name, per_chain)| {
            let pooled: Vec<f64> = per_chain.iter().flatten().copied().collect();
            let n = pooled.len() as f64;
            let mean = pooled.iter().sum::<f64>() / n;
            let sd = (pooled.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            let per_chain_mean = per_chain
                .iter()
                .map(|c| c.iter().sum::<f64>() / c.len() as f64)
                .collect();
            let split_rhat = evalm::split_rhat(&per_chain).ok();
            ParamDiag { name, mean, sd, per_chain_mean, split_rhat }
        })
        .collect();

    Diagnostics {
        n_chains: chains.len(),
        n_draws_per_chain: first.n_draws(),
        parameters,
    }
}
