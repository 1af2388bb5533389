//! `trecor network`: differential-correlation network between two covariate
//! profiles (or the baseline population network), with Bayesian FDR edge
//! selection, degree analysis and a plot-ready edge overlay.

use std::fs;
use std::path::PathBuf;

use anyhow::{anyhow, Result};
use nalgebra::DVector;
use serde_json::json;

use trecor::gibbs::{self, PosteriorDraws};
use trecor::network::{self, DiffNetwork};

use crate::artifacts::{self, Dataset, Meta, CODE_VERSION};
use crate::stage::{stage, StageError};

#[derive(clap::Args, Debug)]
pub struct NetworkArgs {
    /// Draw store of one chain (a chain_<i> directory written by `fit`).
    #[arg(long, value_name = "DIR")]
    pub fit_dir: PathBuf,
    /// Dataset directory; supplies the tree and the covariate names.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Covariate to contrast against the baseline, by name or column index.
    /// The baseline profile is x0 = (1, 0, ..., 0) and the contrast is x0
    /// with the chosen entry set to 1 (categorical designs).
    #[arg(long, conflicts_with_all = ["x1", "x2"])]
    pub covariate: Option<String>,
    /// Explicit first covariate profile, comma separated (for continuous
    /// designs); use with --x2.
    #[arg(long, value_delimiter = ',', requires = "x2", allow_hyphen_values = true)]
    pub x1: Vec<f64>,
    /// Explicit second covariate profile.
    #[arg(long, value_delimiter = ',', requires = "x1", allow_hyphen_values = true)]
    pub x2: Vec<f64>,
    /// Practical-relevance threshold on the correlation scale.
    #[arg(long, default_value_t = 0.1)]
    pub rho: f64,
    /// Global Bayesian FDR level.
    #[arg(long, default_value_t = 0.05)]
    pub delta_fdr: f64,
    /// Also write the population (covariate-free) network of the baseline
    /// covariance.
    #[arg(long)]
    pub population: bool,
    /// Number of edges in the overlay JSON.
    #[arg(long, default_value_t = 10)]
    pub top_edges: usize,
}

pub fn run(args: NetworkArgs) -> Result<(), StageError> {
    let input_hash = artifacts::args_hash(
        &(
            args.fit_dir.display().to_string(),
            args.data.display().to_string(),
            &args.covariate,
            &args.x1,
            &args.x2,
            args.rho,
            args.delta_fdr,
        ),
        None,
    );
    let draws =
        gibbs::load_posterior_draws(&args.fit_dir).map_err(stage("load-draws", &input_hash))?;
    let data = artifacts::load_dataset(&args.data).map_err(stage("load-data", &input_hash))?;
    let (x1, x2) =
        resolve_profiles(&args, &draws, &data).map_err(stage("resolve-config", &input_hash))?;

    let deltas = network::differential_correlation_draws(&draws, &x1, &x2)
        .map_err(stage("network", &input_hash))?;
    let net = network::fdr_select(&deltas, args.rho, args.delta_fdr)
        .map_err(stage("network", &input_hash))?;
    let degrees = network::degree_and_differential_set(&net, &data.tree)
        .map_err(stage("network", &input_hash))?;
    let overlay = network::top_edges_overlay(&net, &data.tree, args.top_edges)
        .map_err(stage("network", &input_hash))?;

    write_outputs(&args, &draws, &net, &degrees, &overlay, &x1, &x2, &input_hash)
        .map_err(stage("write-artifacts", &input_hash))?;

    println!(
        "network: {} of {} edges selected at rho = {}, FDR {}",
        net.selected.len(),
        net.delta.nrows() * (net.delta.nrows() - 1) / 2,
        args.rho,
        args.delta_fdr
    );
    if let Some(hub) = degrees.hub {
        println!("hub node {} with degree {}", hub, degrees.degrees[hub]);
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

/// Either an explicit pair of profiles or the baseline/contrast convention
/// for a named covariate.
fn resolve_profiles(
    args: &NetworkArgs,
    draws: &PosteriorDraws,
    data: &Dataset,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let d = draws
        .params
        .first()
        .map(|p| p.d())
        .ok_or_else(|| anyhow!("draw store holds no draws"))?;
    if !args.x1.is_empty() {
        if args.x1.len() != d || args.x2.len() != d {
            anyhow::bail!(
                "profiles need {d} entries (got {} and {})",
                args.x1.len(),
                args.x2.len()
            );
        }
        return Ok((
            DVector::from_column_slice(&args.x1),
            DVector::from_column_slice(&args.x2),
        ));
    }
    let name = args
        .covariate
        .as_ref()
        .ok_or_else(|| anyhow!("provide --covariate NAME (or index), or --x1/--x2"))?;
    let j = match name.parse::<usize>() {
        Ok(idx) => idx,
        Err(_) => data
            .design
            .covariate_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| {
                anyhow!(
                    "unknown covariate {name:?}; design has {:?}",
                    data.design.covariate_names
                )
            })?,
    };
    if j == 0 {
        anyhow::bail!("column 0 is the baseline (intercept); pick a non-baseline covariate");
    }
    if j >= d {
        anyhow::bail!("covariate index {j} out of range for a {d}-column design");
    }
    let mut x1 = DVector::zeros(d);
    x1[0] = 1.0;
    let mut x2 = x1.clone();
    x2[j] = 1.0;
    Ok((x1, x2))
}

#[allow(clippy::too_many_arguments)]
fn write_outputs(
    args: &NetworkArgs,
    draws: &PosteriorDraws,
    net: &DiffNetwork,
    degrees: &network::DegreeReport,
    overlay: &[network::EdgeOverlay],
    x1: &DVector<f64>,
    x2: &DVector<f64>,
    input_hash: &str,
) -> Result<()> {
    fs::create_dir_all(&args.out)?;
    artifacts::write_matrix_csv(&args.out.join("delta.csv"), &net.delta, None)?;
    artifacts::write_matrix_csv(&args.out.join("f.csv"), &net.f, None)?;

    let mut selected = String::from("i,j,delta,f\n");
    for &(i, j) in &net.selected {
        use std::fmt::Write;
        let _ = writeln!(selected, "{i},{j},{:?},{:?}", net.delta[(i, j)], net.f[(i, j)]);
    }
    fs::write(args.out.join("selected_edges.csv"), selected)?;

    fs::write(
        args.out.join("degree.json"),
        serde_json::to_string_pretty(degrees)? + "\n",
    )?;
    fs::write(
        args.out.join("top_edges.json"),
        serde_json::to_string_pretty(overlay)? + "\n",
    )?;

    if args.population {
        let pop = network::population_network(draws, args.rho, args.delta_fdr)?;
        artifacts::write_matrix_csv(&args.out.join("population.csv"), &pop.corr, None)?;
        artifacts::write_matrix_csv(&args.out.join("population_f.csv"), &pop.f, None)?;
        let mut rows = String::from("i,j,corr,f\n");
        for &(i, j) in &pop.selected {
            use std::fmt::Write;
            let _ = writeln!(rows, "{i},{j},{:?},{:?}", pop.corr[(i, j)], pop.f[(i, j)]);
        }
        fs::write(args.out.join("population_selected.csv"), rows)?;
    }

    let meta = Meta {
        command: "network".into(),
        code_version: CODE_VERSION.into(),
        seed: draws.config.seed,
        config_hash: draws.config_hash.clone(),
        input_hash: input_hash.to_string(),
        details: Some(json!({
            "rho": args.rho,
            "delta_fdr": args.delta_fdr,
            "x1": x1.as_slice(),
            "x2": x2.as_slice(),
            "n_selected": net.selected.len(),
        })),
    };
    artifacts::write_meta(&args.out, &meta)?;
    Ok(())
}
