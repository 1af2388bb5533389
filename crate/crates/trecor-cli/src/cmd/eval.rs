//! `trecor eval`: method comparison on synthetic replicates. Defaults to a
//! desk-scale design that finishes in hours on a workstation; `--full`
//! switches to the published scale (multi-hour runtime per replicate).

use std::fs;
use std::path::PathBuf;

use anyhow::Result;
use serde::Deserialize;
use serde_json::json;

use trecor::evalm::{self, Method};
use trecor::gibbs::FitConfig;
use trecor::simgen::SimConfig;

use crate::artifacts::{self, Meta, CODE_VERSION};
use crate::cmd::simulate::{SimFile, StructureArg};
use crate::cmd::SamplerFile;
use crate::stage::{stage, StageError};

#[derive(clap::Args, Debug)]
pub struct EvalArgs {
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// TOML or JSON file with {replicates, methods, ranks, sim{..}, fit{..}};
    /// flags override its values.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Independently generated datasets per method.
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Methods to run.
    #[arg(long, value_delimiter = ',', value_enum)]
    pub methods: Vec<MethodArg>,
    /// Candidate ranks fit per method where rank selection applies.
    #[arg(long, value_delimiter = ',')]
    pub ranks: Vec<usize>,
    #[arg(long)]
    pub q: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    /// True rank of the generating covariance regression.
    #[arg(long)]
    pub r_true: Option<usize>,
    #[arg(long, value_enum)]
    pub structure: Option<StructureArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    /// Published scale: q = 100, d = 4, true rank 3, 10000 sweeps. Expect
    /// multiple hours per replicate.
    #[arg(long)]
    pub full: bool,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodArg {
    Glasso,
    Trecor,
    Oracle,
    Covreg,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Glasso => Method::Glasso,
            MethodArg::Trecor => Method::Trecor,
            MethodArg::Oracle => Method::Oracle,
            MethodArg::Covreg => Method::Covreg,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalFile {
    replicates: Option<usize>,
    methods: Option<Vec<MethodArg>>,
    ranks: Option<Vec<usize>>,
    #[serde(default)]
    sim: SimFile,
    #[serde(default)]
    fit: SamplerFile,
}

struct Resolved {
    sim: SimConfig,
    fit: FitConfig,
    replicates: usize,
    methods: Vec<Method>,
    ranks: Vec<usize>,
}

fn resolve(args: &EvalArgs) -> Result<Resolved> {
    let file: EvalFile = match &args.config {
        Some(path) => super::parse_config_file(path)?,
        None => EvalFile::default(),
    };

    // Desk-scale defaults; --full bumps them to the published design.
    let mut sim = SimConfig::new(0);
    sim.q = 30;
    sim.n = 150;
    sim.d = 4;
    sim.r_true = 2;
    let mut fit = FitConfig::new(1);
    fit.iterations = 2_000;
    fit.burn_in = 1_000;
    fit.thin = 5;
    let mut ranks = vec![1, 2, 3];
    if args.full {
        sim.q = 100;
        sim.r_true = 3;
        fit.iterations = 10_000;
        fit.burn_in = 5_000;
        ranks = vec![1, 2, 3, 4];
    }

    sim.q = args.q.or(file.sim.q).unwrap_or(sim.q);
    sim.n = args.n.or(file.sim.n).unwrap_or(sim.n);
    sim.d = args.d.or(file.sim.d).unwrap_or(sim.d);
    sim.r_true = args.r_true.or(file.sim.r_true).unwrap_or(sim.r_true);
    sim.sigma_structure = args
        .structure
        .map(Into::into)
        .or(file.sim.sigma_structure)
        .unwrap_or(sim.sigma_structure);
    if let Some(v) = file.sim.covariate_corr {
        sim.covariate_corr = v;
    }
    if file.sim.b_entry_var.is_some() {
        sim.b_entry_var = file.sim.b_entry_var;
    }
    if let Some(v) = file.sim.sparsity_threshold {
        sim.sparsity_threshold = v;
    }
    if let Some(v) = file.sim.min_total {
        sim.min_total = v;
    }
    sim.seed = args.seed.or(file.sim.seed).unwrap_or(sim.seed);
    sim.reference = file.sim.reference;
    sim.validate()?;

    fit.iterations = args.iterations.or(file.fit.iterations).unwrap_or(fit.iterations);
    fit.burn_in = args.burn_in.or(file.fit.burn_in).unwrap_or(fit.burn_in);
    fit.thin = args.thin.or(file.fit.thin).unwrap_or(fit.thin);
    fit.seed = sim.seed;
    if let Some(h) = file.fit.hyper {
        fit.hyper = h;
    }

    let methods: Vec<Method> = if !args.methods.is_empty() {
        args.methods.iter().copied().map(Into::into).collect()
    } else if let Some(ms) = file.methods {
        ms.into_iter().map(Into::into).collect()
    } else {
        vec![Method::Glasso, Method::Trecor, Method::Oracle, Method::Covreg]
    };
    let ranks = if !args.ranks.is_empty() {
        args.ranks.clone()
    } else {
        file.ranks.unwrap_or(ranks)
    };
    let replicates = args.replicates.or(file.replicates).unwrap_or(20);

    Ok(Resolved { sim, fit, replicates, methods, ranks })
}

pub fn run(args: EvalArgs) -> Result<(), StageError> {
    let boot_hash = artifacts::args_hash(
        &(&args.replicates, &args.methods, &args.ranks, &args.q, &args.n, &args.seed, args.full),
        args.config.as_deref(),
    );
    let resolved = resolve(&args).map_err(stage("resolve-config", &boot_hash))?;

    let config_view = json!({
        "sim": &resolved.sim,
        "fit": &resolved.fit,
        "replicates": resolved.replicates,
        "methods": resolved.methods.iter().map(|m| m.label()).collect::<Vec<_>>(),
        "ranks": &resolved.ranks,
    });
    let config_bytes = serde_json::to_vec(&config_view).expect("eval config serializes");
    let input_hash = artifacts::sha256_hex(&config_bytes);

    println!(
        "eval: {} replicate(s), q = {}, n = {}, methods {:?}, ranks {:?}",
        resolved.replicates,
        resolved.sim.q,
        resolved.sim.n,
        resolved.methods.iter().map(|m| m.label()).collect::<Vec<_>>(),
        resolved.ranks
    );
    let results = evalm::run_comparison(
        &resolved.sim,
        resolved.replicates,
        &resolved.methods,
        &resolved.ranks,
        &resolved.fit,
    )
    .map_err(stage("eval", &input_hash))?;

    fs::create_dir_all(&args.out).map_err(stage("write-artifacts", &input_hash))?;
    fs::write(args.out.join("rows.csv"), evalm::rows_csv(&results))
        .map_err(stage("write-artifacts", &input_hash))?;
    fs::write(args.out.join("summary.csv"), evalm::summary_csv(&results))
        .map_err(stage("write-artifacts", &input_hash))?;
    let results_json = serde_json::to_string_pretty(&results).expect("results serialize");
    fs::write(args.out.join("results.json"), results_json + "\n")
        .map_err(stage("write-artifacts", &input_hash))?;
    let meta = Meta {
        command: "eval".into(),
        code_version: CODE_VERSION.into(),
        seed: resolved.sim.seed,
        config_hash: artifacts::sha256_hex(&config_bytes),
        input_hash: input_hash.clone(),
        details: Some(config_view),
    };
    artifacts::write_meta(&args.out, &meta).map_err(stage("write-artifacts", &input_hash))?;

    for s in &results.summary {
        println!(
            "  {:<13} auc {:.3} ({:.3})  sigma err {:.3} ({:.3})",
            s.method.label(),
            s.mean_auc,
            s.sd_auc,
            s.mean_sigma_err,
            s.sd_sigma_err
        );
    }
    println!("wrote {}", args.out.display());
    Ok(())
}
