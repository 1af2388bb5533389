//! `trecor fit`: run the Gibbs sampler on a dataset directory, writing one
//! draw store per chain plus a diagnostics JSON, or sweep the hyperparameter
//! sensitivity grid with `--sensitivity`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;
use serde_json::json;

use trecor::gibbs::{self, FitConfig, FitMode, PosteriorDraws};

use crate::artifacts::{self, Dataset, Meta, CODE_VERSION};
use crate::cmd::{self, SamplerOpts};
use crate::stage::{stage, StageError};

/// Hyperparameter grid swept by `--sensitivity`, as
/// (a_nu, a_omega, b_nu, b_omega); v and s stay at their configured values.
const SENSITIVITY_GRID: [(f64, f64, f64, f64); 4] =
    [(5.0, 5.0, 0.5, 0.5), (5.0, 5.0, 1.0, 1.0), (10.0, 10.0, 0.5, 0.5), (10.0, 10.0, 1.0, 1.0)];

#[derive(clap::Args, Debug)]
pub struct FitArgs {
    /// Dataset directory produced by `simulate` (or assembled with the same
    /// layout).
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Output directory; draws land in one chain_<i> subdirectory per chain.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Number of covariance factors R.
    #[arg(long)]
    pub rank: Option<usize>,
    #[command(flatten)]
    pub sampler: SamplerOpts,
    /// Instead of a single fit, run the four-point hyperparameter grid and
    /// write one subdirectory per setting plus a summary CSV.
    #[arg(long)]
    pub sensitivity: bool,
}

pub fn run(args: FitArgs) -> Result<(), StageError> {
    let input_hash = artifacts::args_hash(
        &(args.data.display().to_string(), &args.sampler, args.rank, args.sensitivity),
        args.sampler.config.as_deref(),
    );
    let config = cmd::resolve_fit_config(&args.sampler, args.rank)
        .map_err(stage("resolve-config", &input_hash))?;
    let data = artifacts::load_dataset(&args.data).map_err(stage("load-data", &input_hash))?;
    if let FitMode::Oracle { phi_true } = &config.mode {
        let want = (data.nodes.n_samples(), data.nodes.q());
        if phi_true.shape() != want {
            return Err(stage("load-data", &input_hash)(anyhow::anyhow!(
                "oracle phi is {}x{} but the dataset needs {}x{}",
                phi_true.nrows(),
                phi_true.ncols(),
                want.0,
                want.1
            )));
        }
    }

    if args.sensitivity {
        run_sensitivity(&args, &config, &data, &input_hash)
    } else {
        let chains = gibbs::run_chains(&config, &data.nodes, &data.design, &data.tree)
            .map_err(stage("fit", &input_hash))?;
        write_fit_outputs(&args.out, "fit", &config, &chains, &input_hash)
            .map_err(stage("write-artifacts", &input_hash))?;
        report(&config, &chains);
        println!("wrote {}", args.out.display());
        Ok(())
    }
}

fn run_sensitivity(
    args: &FitArgs,
    base: &FitConfig,
    data: &Dataset,
    input_hash: &str,
) -> Result<(), StageError> {
    let mut summary = String::from(
        "setting,a_nu,a_omega,b_nu,b_omega,lambda_mean,sigma_fro_mean,b0_fro_mean\n",
    );
    for (a_nu, a_omega, b_nu, b_omega) in SENSITIVITY_GRID {
        let mut config = base.clone();
        config.hyper.a_nu = a_nu;
        config.hyper.a_omega = a_omega;
        config.hyper.b_nu = b_nu;
        config.hyper.b_omega = b_omega;
        let label = format!("anu{a_nu}_aom{a_omega}_bnu{b_nu}_bom{b_omega}");
        let chains = gibbs::run_chains(&config, &data.nodes, &data.design, &data.tree)
            .map_err(stage("fit", input_hash))?;

        let pooled = |f: &dyn Fn(&trecor::model::ModelParams) -> f64| -> f64 {
            let mut sum = 0.0;
            let mut count = 0usize;
            for c in &chains {
                for p in &c.params {
                    sum += f(p);
                    count += 1;
                }
            }
            sum / count as f64
        };
        let lambda_mean = pooled(&|p| p.lambda);
        let sigma_fro_mean = pooled(&|p| p.sigma.norm());
        let b0_fro_mean = pooled(&|p| p.b[0].norm());
        {
            use std::fmt::Write;
            let _ = writeln!(
                summary,
                "{label},{a_nu},{a_omega},{b_nu},{b_omega},{lambda_mean:?},{sigma_fro_mean:?},{b0_fro_mean:?}"
            );
        }

        let dir = args.out.join("sensitivity").join(&label);
        write_fit_outputs(&dir, "fit --sensitivity", &config, &chains, input_hash)
            .map_err(stage("write-artifacts", input_hash))?;
        println!("sensitivity {label}: lambda mean {lambda_mean:.4}");
    }
    let summary_path = args.out.join("sensitivity").join("summary.csv");
    fs::write(&summary_path, summary).map_err(stage("write-artifacts", input_hash))?;
    let meta = Meta {
        command: "fit --sensitivity".into(),
        code_version: CODE_VERSION.into(),
        seed: base.seed,
        config_hash: base.config_hash(),
        input_hash: input_hash.to_string(),
        details: Some(json!({ "grid": SENSITIVITY_GRID.len() })),
    };
    artifacts::write_meta(&args.out, &meta).map_err(stage("write-artifacts", input_hash))?;
    println!("wrote {}", args.out.display());
    Ok(())
}

/// One chain_<i> directory per chain, diagnostics.json, meta.json.
fn write_fit_outputs(
    out: &Path,
    command: &str,
    config: &FitConfig,
    chains: &[PosteriorDraws],
    input_hash: &str,
) -> Result<()> {
    for (i, chain) in chains.iter().enumerate() {
        gibbs::save_posterior_draws(chain, &out.join(format!("chain_{i}")))?;
    }
    let diag = cmd::chain_diagnostics(chains);
    fs::write(
        out.join("diagnostics.json"),
        serde_json::to_string_pretty(&diag)? + "\n",
    )?;
    let meta = Meta {
        command: command.into(),
        code_version: CODE_VERSION.into(),
        seed: config.seed,
        config_hash: config.config_hash(),
        input_hash: input_hash.to_string(),
        details: None,
    };
    artifacts::write_meta(out, &meta)?;
    Ok(())
}

fn report(config: &FitConfig, chains: &[PosteriorDraws]) {
    let warnings: usize = chains.iter().map(|c| c.warnings.len()).sum();
    println!(
        "fit: {} chain(s) x {} sweeps, {} draws each, mode {}{}",
        chains.len(),
        config.iterations,
        chains.first().map_or(0, |c| c.n_draws()),
        config.mode.label(),
        if warnings > 0 { format!(", {warnings} warning(s)") } else { String::new() }
    );
}
