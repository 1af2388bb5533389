//! `trecor simulate`: generate a synthetic dataset (tree, node counts, leaf
//! counts, design, ground truth) into a directory that the other subcommands
//! consume.

use std::path::PathBuf;

use anyhow::Result;
use serde::Deserialize;
use serde_json::json;

use trecor::simgen::{self, ReferencePaths, SigmaStructure, SimConfig};

use crate::artifacts::{self, Meta, CODE_VERSION};
use crate::stage::{stage, StageError};

#[derive(clap::Args, Debug)]
pub struct SimulateArgs {
    /// Output directory for the dataset.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// TOML or JSON file with generator settings; flags override its values.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Number of samples.
    #[arg(long)]
    pub n: Option<usize>,
    /// Number of internal tree nodes (ignored when a reference supplies the
    /// tree).
    #[arg(long)]
    pub q: Option<usize>,
    /// Design columns including the intercept.
    #[arg(long)]
    pub d: Option<usize>,
    /// True rank of the covariance regression.
    #[arg(long)]
    pub r_true: Option<usize>,
    /// Sparsity pattern of the population covariance.
    #[arg(long, value_enum)]
    pub structure: Option<StructureArg>,
    /// Pairwise correlation of the non-intercept covariates.
    #[arg(long)]
    pub covariate_corr: Option<f64>,
    /// Variance of nonzero coefficient entries (default 0.5 / d).
    #[arg(long)]
    pub b_entry_var: Option<f64>,
    /// Drop reference genera whose zero proportion exceeds this.
    #[arg(long)]
    pub sparsity_threshold: Option<f64>,
    /// Drop reference genera with a smaller total count.
    #[arg(long)]
    pub min_total: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Calibrate abundances and library sizes from a reference count table
    /// (requires --reference-tree).
    #[arg(long, value_name = "FILE", requires = "reference_tree")]
    pub reference_counts: Option<PathBuf>,
    /// Newick tree matching the reference counts.
    #[arg(long, value_name = "FILE", requires = "reference_counts")]
    pub reference_tree: Option<PathBuf>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, serde::Serialize)]
pub enum StructureArg {
    Tridiagonal,
    ScaleFree,
    TreeBased,
}

impl From<StructureArg> for SigmaStructure {
    fn from(s: StructureArg) -> Self {
        match s {
            StructureArg::Tridiagonal => SigmaStructure::Tridiagonal,
            StructureArg::ScaleFree => SigmaStructure::ScaleFree,
            StructureArg::TreeBased => SigmaStructure::TreeBased,
        }
    }
}

/// Generator settings accepted from a config file; mirrors `SimConfig` with
/// every field optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimFile {
    pub n: Option<usize>,
    pub q: Option<usize>,
    pub d: Option<usize>,
    pub r_true: Option<usize>,
    pub sigma_structure: Option<SigmaStructure>,
    pub covariate_corr: Option<f64>,
    pub b_entry_var: Option<f64>,
    pub sparsity_threshold: Option<f64>,
    pub min_total: Option<u64>,
    pub seed: Option<u64>,
    pub reference: Option<ReferencePaths>,
}

impl SimulateArgs {
    /// Defaults, then the config file, then flags.
    fn resolve(&self) -> Result<SimConfig> {
        let file: SimFile = match &self.config {
            Some(path) => super::parse_config_file(path)?,
            None => SimFile::default(),
        };
        let mut config = SimConfig::new(0);
        config.n = self.n.or(file.n).unwrap_or(config.n);
        config.q = self.q.or(file.q).unwrap_or(config.q);
        config.d = self.d.or(file.d).unwrap_or(config.d);
        config.r_true = self.r_true.or(file.r_true).unwrap_or(config.r_true);
        config.sigma_structure = self
            .structure
            .map(SigmaStructure::from)
            .or(file.sigma_structure)
            .unwrap_or(config.sigma_structure);
        config.covariate_corr =
            self.covariate_corr.or(file.covariate_corr).unwrap_or(config.covariate_corr);
        config.b_entry_var = self.b_entry_var.or(file.b_entry_var);
        config.sparsity_threshold = self
            .sparsity_threshold
            .or(file.sparsity_threshold)
            .unwrap_or(config.sparsity_threshold);
        config.min_total = self.min_total.or(file.min_total).unwrap_or(config.min_total);
        config.seed = self.seed.or(file.seed).unwrap_or(config.seed);
        config.reference = match (&self.reference_counts, &self.reference_tree) {
            (Some(counts), Some(tree)) => {
                Some(ReferencePaths { counts: counts.clone(), tree: tree.clone() })
            }
            _ => file.reference,
        };
        Ok(config)
    }
}

pub fn run(args: SimulateArgs) -> Result<(), StageError> {
    let boot_hash = artifacts::args_hash(
        &(
            &args.n,
            &args.q,
            &args.d,
            &args.r_true,
            &args.structure,
            &args.seed,
        ),
        args.config.as_deref(),
    );
    let config = args.resolve().map_err(stage("resolve-config", &boot_hash))?;
    config.validate().map_err(stage("resolve-config", &boot_hash))?;

    // From here on the resolved generator config IS the input.
    let config_json = serde_json::to_vec(&config).expect("sim config serializes");
    let input_hash = artifacts::sha256_hex(&config_json);

    let data = simgen::gen_dataset(&config).map_err(stage("simulate", &input_hash))?;
    let zero_prop =
        simgen::leaf_zero_proportion(&data.tree, &data.nodes).map_err(stage("simulate", &input_hash))?;

    artifacts::save_dataset(&data, &args.out).map_err(stage("write-artifacts", &input_hash))?;
    let meta = Meta {
        command: "simulate".into(),
        code_version: CODE_VERSION.into(),
        seed: config.seed,
        config_hash: artifacts::sha256_hex(&config_json),
        input_hash: input_hash.clone(),
        details: Some(json!({
            "n": config.n,
            "q": data.tree.q(),
            "d": config.d,
            "r_true": config.r_true,
            "leaf_zero_proportion": zero_prop,
        })),
    };
    artifacts::write_meta(&args.out, &meta).map_err(stage("write-artifacts", &input_hash))?;

    println!(
        "simulate: n = {}, q = {}, leaf zero proportion {:.3}",
        config.n,
        data.tree.q(),
        zero_prop
    );
    println!("wrote {}", args.out.display());
    Ok(())
}
