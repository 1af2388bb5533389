//! `trecor select-rank`: fit a set of candidate ranks on the same data and
//! pick one by WAIC, writing the curve and the choice.

use std::fs;
use std::path::PathBuf;

use serde_json::json;

use trecor::selection::{self, RankRule, WaicLayer};

use crate::artifacts::{self, Meta, CODE_VERSION};
use crate::cmd::{self, SamplerOpts};
use crate::stage::{stage, StageError};

#[derive(clap::Args, Debug)]
pub struct SelectRankArgs {
    /// Dataset directory produced by `simulate`.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Candidate ranks, comma separated (e.g. --ranks 0,1,2,3).
    #[arg(long, value_delimiter = ',', conflicts_with = "rank_sweep")]
    pub ranks: Vec<usize>,
    /// Preset candidate set {3, 4, 5}.
    #[arg(long)]
    pub rank_sweep: bool,
    /// How the WAIC curve is read.
    #[arg(long, value_enum, default_value_t = RuleArg::Min)]
    pub rule: RuleArg,
    /// Likelihood layer scored by WAIC.
    #[arg(long, value_enum, default_value_t = LayerArg::Latent)]
    pub layer: LayerArg,
    #[command(flatten)]
    pub sampler: SamplerOpts,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, serde::Serialize)]
pub enum RuleArg {
    /// Smallest WAIC, ties toward the smaller rank.
    Min,
    /// Largest positive curvature of the WAIC-vs-rank polyline.
    Elbow,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, serde::Serialize)]
pub enum LayerArg {
    /// Latent Gaussian layer with the factor scores integrated out.
    Latent,
    /// Binomial count layer.
    Binomial,
}

pub fn run(args: SelectRankArgs) -> Result<(), StageError> {
    let input_hash = artifacts::args_hash(
        &(
            args.data.display().to_string(),
            &args.sampler,
            &args.ranks,
            args.rank_sweep,
            &args.rule,
            &args.layer,
        ),
        args.sampler.config.as_deref(),
    );
    let candidates: Vec<usize> = if args.rank_sweep {
        vec![3, 4, 5]
    } else if !args.ranks.is_empty() {
        args.ranks.clone()
    } else {
        return Err(stage("resolve-config", &input_hash)(anyhow::anyhow!(
            "provide candidate ranks with --ranks or --rank-sweep"
        )));
    };

    let config = cmd::resolve_fit_config(&args.sampler, None)
        .map_err(stage("resolve-config", &input_hash))?;
    let data = artifacts::load_dataset(&args.data).map_err(stage("load-data", &input_hash))?;

    let rule = match args.rule {
        RuleArg::Min => RankRule::Min,
        RuleArg::Elbow => RankRule::Elbow,
    };
    let layer = match args.layer {
        LayerArg::Latent => WaicLayer::Latent,
        LayerArg::Binomial => WaicLayer::Binomial,
    };
    let selection = selection::select_rank(
        &candidates,
        &config,
        &data.nodes,
        &data.design,
        &data.tree,
        rule,
        layer,
    )
    .map_err(stage("select-rank", &input_hash))?;

    let mut curve = String::from("rank,waic,lppd,p_waic\n");
    for (rank, waic) in &selection.curve {
        use std::fmt::Write;
        let _ = writeln!(curve, "{rank},{:?},{:?},{:?}", waic.waic, waic.lppd, waic.p_waic);
    }
    fs::create_dir_all(&args.out).map_err(stage("write-artifacts", &input_hash))?;
    fs::write(args.out.join("waic_curve.csv"), curve)
        .map_err(stage("write-artifacts", &input_hash))?;
    let selection_json =
        serde_json::to_string_pretty(&selection).expect("selection serializes");
    fs::write(args.out.join("selection.json"), selection_json + "\n")
        .map_err(stage("write-artifacts", &input_hash))?;
    let meta = Meta {
        command: "select-rank".into(),
        code_version: CODE_VERSION.into(),
        seed: config.seed,
        config_hash: config.config_hash(),
        input_hash: input_hash.clone(),
        details: Some(json!({ "candidates": candidates, "chosen": selection.chosen })),
    };
    artifacts::write_meta(&args.out, &meta).map_err(stage("write-artifacts", &input_hash))?;

    println!("select-rank: chose R = {} from {candidates:?}", selection.chosen);
    println!("wrote {}", args.out.display());
    Ok(())
}
