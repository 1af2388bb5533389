//! `trecor diagnose`: convergence material for a finished fit. Emits trace
//! CSVs for the shrinkage rate and a seeded random selection of matrix
//! coordinates, per-covariate effect-size posterior samples, and a
//! split-chain diagnostics JSON.

use std::fs;
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use rand::seq::index::sample;
use serde_json::json;

use trecor::gibbs::{self, PosteriorDraws};
use trecor::model::ModelParams;
use trecor::randdist::RngStream;

use crate::artifacts::{self, Meta, CODE_VERSION};
use crate::stage::{stage, StageError};

#[derive(clap::Args, Debug)]
pub struct DiagnoseArgs {
    /// Fit output directory containing chain_<i> subdirectories.
    #[arg(long, value_name = "DIR")]
    pub fit_dir: PathBuf,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Number of randomly selected matrix coordinates to trace.
    #[arg(long, default_value_t = 6)]
    pub params: usize,
    /// Seed for the coordinate selection.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// A traced scalar coordinate of the parameter state.
#[derive(Clone, Copy)]
enum Coord {
    Sigma(usize, usize),
    B(usize, usize, usize),
}

impl Coord {
    fn name(&self) -> String {
        match *self {
            Coord::Sigma(i, j) => format!("sigma_{i}_{j}"),
            Coord::B(r, k, j) => format!("b{r}_{k}_{j}"),
        }
    }

    fn extract(&self, p: &ModelParams) -> f64 {
        match *self {
            Coord::Sigma(i, j) => p.sigma[(i, j)],
            Coord::B(r, k, j) => p.b[r][(k, j)],
        }
    }
}

pub fn run(args: DiagnoseArgs) -> Result<(), StageError> {
    let input_hash = artifacts::args_hash(
        &(args.fit_dir.display().to_string(), args.params, args.seed),
        None,
    );
    let chains = load_chains(&args.fit_dir).map_err(stage("load-draws", &input_hash))?;

    let first = &chains[0];
    let p0 = first
        .params
        .first()
        .ok_or_else(|| stage("load-draws", &input_hash)(anyhow!("draw store holds no draws")))?;
    let (q, d, rank) = (p0.q(), p0.d(), first.config.rank);

    // Seeded coordinate pool: upper-triangular covariance entries plus every
    // coefficient entry.
    let mut pool: Vec<Coord> = Vec::new();
    for i in 0..q {
        for j in i..q {
            pool.push(Coord::Sigma(i, j));
        }
    }
    for r in 0..=rank {
        for k in 0..q {
            for j in 0..d {
                pool.push(Coord::B(r, k, j));
            }
        }
    }
    let mut rng = RngStream::new(args.seed, 0).rng();
    let mut picked: Vec<usize> =
        sample(&mut rng, pool.len(), args.params.min(pool.len())).into_vec();
    picked.sort_unstable();

    write_outputs(&args, &chains, &pool, &picked, &input_hash)
        .map_err(stage("write-artifacts", &input_hash))?;

    println!(
        "diagnose: {} chain(s), {} draws each, {} traced coordinate(s)",
        chains.len(),
        first.n_draws(),
        picked.len() + 1
    );
    println!("wrote {}", args.out.display());
    Ok(())
}

/// Load chain_<i> draw stores in index order and insist they came from one
/// configuration.
fn load_chains(fit_dir: &PathBuf) -> Result<Vec<PosteriorDraws>> {
    let mut indexed: Vec<(usize, PathBuf)> = Vec::new();
    for entry in fs::read_dir(fit_dir).with_context(|| format!("reading {}", fit_dir.display()))? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(idx) = name.strip_prefix("chain_").and_then(|s| s.parse::<usize>().ok()) {
            indexed.push((idx, entry.path()));
        }
    }
    if indexed.is_empty() {
        bail!("no chain_<i> subdirectories under {}", fit_dir.display());
    }
    indexed.sort_by_key(|(idx, _)| *idx);
    let chains = indexed
        .iter()
        .map(|(_, path)| gibbs::load_posterior_draws(path))
        .collect::<Result<Vec<_>, _>>()?;
    let hash = &chains[0].config_hash;
    if chains.iter().any(|c| &c.config_hash != hash) {
        bail!("chains under {} come from different configurations", fit_dir.display());
    }
    if chains.iter().any(|c| c.n_draws() != chains[0].n_draws()) {
        bail!("chains under {} hold different draw counts", fit_dir.display());
    }
    Ok(chains)
}

fn write_trace_csv(path: &PathBuf, columns: &[Vec<f64>]) -> Result<()> {
    let mut out = String::new();
    let names: Vec<String> = (0..columns.len()).map(|i| format!("chain_{i}")).collect();
    out.push_str(&names.join(","));
    out.push('\n');
    let rows = columns.first().map_or(0, Vec::len);
    for row in 0..rows {
        for (c, col) in columns.iter().enumerate() {
            if c > 0 {
                out.push(',');
            }
            use std::fmt::Write;
            let _ = write!(out, "{:?}", col[row]);
        }
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_outputs(
    args: &DiagnoseArgs,
    chains: &[PosteriorDraws],
    pool: &[Coord],
    picked: &[usize],
    input_hash: &str,
) -> Result<()> {
    let traces_dir = args.out.join("traces");
    let effects_dir = args.out.join("effects");
    fs::create_dir_all(&traces_dir)?;
    fs::create_dir_all(&effects_dir)?;

    let lambda: Vec<Vec<f64>> = chains.iter().map(|c| c.lambda_draws()).collect();
    write_trace_csv(&traces_dir.join("lambda.csv"), &lambda)?;
    let mut traced = vec!["lambda".to_string()];
    for &idx in picked {
        let coord = pool[idx];
        let columns: Vec<Vec<f64>> = chains
            .iter()
            .map(|c| c.params.iter().map(|p| coord.extract(p)).collect())
            .collect();
        write_trace_csv(&traces_dir.join(format!("{}.csv", coord.name())), &columns)?;
        traced.push(coord.name());
    }

    // Effect-size posterior samples per covariate: squared norm of the mean
    // coefficient column, Frobenius norm of the stacked factor columns.
    let d = chains[0].params[0].d();
    for j in 0..d {
        let mean_cols: Vec<Vec<f64>> = chains.iter().map(|c| c.mean_effect_draws(j)).collect();
        write_trace_csv(&effects_dir.join(format!("mean_effect_{j}.csv")), &mean_cols)?;
        let cov_cols: Vec<Vec<f64>> = chains.iter().map(|c| c.cov_effect_draws(j)).collect();
        write_trace_csv(&effects_dir.join(format!("cov_effect_{j}.csv")), &cov_cols)?;
    }

    let diag = crate::cmd::chain_diagnostics(chains);
    fs::write(
        args.out.join("diagnostics.json"),
        serde_json::to_string_pretty(&diag)? + "\n",
    )?;

    let meta = Meta {
        command: "diagnose".into(),
        code_version: CODE_VERSION.into(),
        seed: chains[0].config.seed,
        config_hash: chains[0].config_hash.clone(),
        input_hash: input_hash.to_string(),
        details: Some(json!({ "traced": traced, "selection_seed": args.seed })),
    };
    artifacts::write_meta(&args.out, &meta)?;
    Ok(())
}
