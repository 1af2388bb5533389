//! Evaluation metrics and the method-comparison harness: ROC/PR over edge
//! recovery, covariance error norms, sample diagnostics, and the four-way
//! baseline table.

use std::collections::HashSet;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::gibbs::{run_chain, FitConfig, FitMode, GibbsError, PosteriorDraws};
use crate::model::covariance_at;
use crate::selection::{waic, SelectionError, Waic, WaicLayer};
use crate::simgen::{gen_dataset, SimConfig, SimDataset, SimError};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("degenerate truth: {0}")]
    DegenerateTruth(String),
    #[error("invalid evaluation input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Gibbs(#[from] GibbsError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Two-sample Kolmogorov-Smirnov statistic `sup_t |F_a(t) - F_b(t)|`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "ks_two_sample on empty sample");
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < sa.len() && j < sb.len() {
        let (va, vb) = (sa[i], sb[j]);
        if va <= vb {
            i += 1;
        }
        if vb <= va {
            j += 1;
        }
        let gap = (i as f64 / sa.len() as f64 - j as f64 / sb.len() as f64).abs();
        d = d.max(gap);
    }
    d
}

/// Split-chain potential scale reduction: each chain is halved and the
/// standard between/within variance ratio is taken over the half-chains.
/// Returns 1 for identical constant chains and infinity for constant chains
/// at different levels.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<f64, EvalError> {
    if chains.is_empty() {
        return Err(EvalError::Invalid("split_rhat needs at least one chain".into()));
    }
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0) / 2;
    if n < 2 {
        return Err(EvalError::Invalid(
            "split_rhat needs at least 4 draws per chain".into(),
        ));
    }
    let halves: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| [&c[..n], &c[c.len() - n..]])
        .collect();
    let m = halves.len() as f64;
    let means: Vec<f64> = halves
        .iter()
        .map(|h| h.iter().sum::<f64>() / n as f64)
        .collect();
    let w = halves
        .iter()
        .zip(&means)
        .map(|(h, mu)| h.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n as f64 - 1.0))
        .sum::<f64>()
        / m;
    let grand = means.iter().sum::<f64>() / m;
    let b = n as f64 / (m - 1.0) * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>();
    if w == 0.0 {
        return Ok(if b == 0.0 { 1.0 } else { f64::INFINITY });
    }
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b / n as f64;
    Ok((var_plus / w).sqrt())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RocPr {
    /// `(fpr, tpr)` points from (0,0) to (1,1), tie groups collapsed.
    pub roc: Vec<(f64, f64)>,
    /// `(recall, precision)` points, anchored at recall 0.
    pub pr: Vec<(f64, f64)>,
    pub auc: f64,
    pub aupr: f64,
}

/// ROC and precision-recall curves for recovering `truth_edges` from a
/// symmetric score matrix (higher score = stronger edge claim; only the
/// upper triangle is read). Errors when the truth has no positive or no
/// negative pairs.
pub fn roc_pr_curves(
    score: &DMatrix<f64>,
    truth_edges: &[(usize, usize)],
) -> Result<RocPr, EvalError> {
    let q = score.nrows();
    if score.ncols() != q {
        return Err(EvalError::Invalid("score matrix must be square".into()));
    }
    let mut truth = HashSet::new();
    for &(i, j) in truth_edges {
        if i == j || i >= q || j >= q {
            return Err(EvalError::Invalid(format!(
                "truth edge ({i}, {j}) out of range for q = {q}"
            )));
        }
        truth.insert((i.min(j), i.max(j)));
    }
    let mut items: Vec<(f64, bool)> = Vec::with_capacity(q * (q - 1) / 2);
    for i in 0..q {
        for j in (i + 1)..q {
            items.push((score[(i, j)], truth.contains(&(i, j))));
        }
    }
    let pos = items.iter().filter(|it| it.1).count() as f64;
    let neg = items.len() as f64 - pos;
    if pos == 0.0 {
        return Err(EvalError::DegenerateTruth("no positive edges".into()));
    }
    if neg == 0.0 {
        return Err(EvalError::DegenerateTruth("every pair is an edge".into()));
    }
    items.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));

    let mut roc = vec![(0.0, 0.0)];
    let mut pr = Vec::new();
    let (mut tp, mut fp) = (0.0f64, 0.0f64);
    let (mut auc, mut aupr) = (0.0f64, 0.0f64);
    let (mut prev_fpr, mut prev_tpr) = (0.0f64, 0.0f64);
    let mut prev_recall = 0.0f64;
    let mut prev_precision = 1.0f64;
    let mut k = 0;
    while k < items.len() {
        // advance over one tie group
        let threshold = items[k].0;
        while k < items.len() && items[k].0 == threshold {
            if items[k].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            k += 1;
        }
        let tpr = tp / pos;
        let fpr = fp / neg;
        let precision = tp / (tp + fp);
        auc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        if pr.is_empty() {
            // anchor the curve at recall zero with the first precision
            pr.push((0.0, precision));
            prev_precision = precision;
        }
        aupr += (tpr - prev_recall) * (precision + prev_precision) / 2.0;
        roc.push((fpr, tpr));
        pr.push((tpr, precision));
        prev_fpr = fpr;
        prev_tpr = tpr;
        prev_recall = tpr;
        prev_precision = precision;
    }
    Ok(RocPr { roc, pr, auc, aupr })
}

/// Squared Frobenius error of the posterior-mean covariance,
/// `||mean(sigmas) - truth||_F^2`.
pub fn sigma_error_mats(sigmas: &[DMatrix<f64>], truth: &DMatrix<f64>) -> Result<f64, EvalError> {
    if sigmas.is_empty() {
        return Err(EvalError::Invalid("no covariance draws".into()));
    }
    if sigmas
        .iter()
        .any(|s| s.shape() != truth.shape())
    {
        return Err(EvalError::Invalid("covariance draw shape mismatch".into()));
    }
    let mut mean = DMatrix::zeros(truth.nrows(), truth.ncols());
    for s in sigmas {
        mean += s;
    }
    mean /= sigmas.len() as f64;
    Ok((mean - truth).norm_squared())
}

pub fn sigma_error(draws: &PosteriorDraws, truth: &DMatrix<f64>) -> Result<f64, EvalError> {
    let sigmas: Vec<DMatrix<f64>> = draws.params.iter().map(|p| p.sigma.clone()).collect();
    sigma_error_mats(&sigmas, truth)
}

/// Covariance at `x` from raw truth pieces, without a full parameter set.
fn cov_from(sigma: &DMatrix<f64>, b: &[DMatrix<f64>], x: &DVector<f64>) -> DMatrix<f64> {
    let mut cov = sigma.clone();
    for b_r in &b[1..] {
        let v = b_r * x;
        cov.ger(1.0, &v, &v, 1.0);
    }
    cov
}

/// Mean squared Frobenius error of the fitted covariance surface over the
/// design: `(1/n) sum_i ||mean_s Sigma^(s)(x_i) - Sigma*(x_i)||_F^2`.
pub fn sigma_x_error(
    draws: &PosteriorDraws,
    truth_sigma: &DMatrix<f64>,
    truth_b: &[DMatrix<f64>],
    x: &DMatrix<f64>,
) -> Result<f64, EvalError> {
    if draws.params.is_empty() {
        return Err(EvalError::Invalid("no draws".into()));
    }
    let n = x.nrows();
    if n == 0 {
        return Err(EvalError::Invalid("empty design".into()));
    }
    let s = draws.params.len() as f64;
    let mut total = 0.0;
    for i in 0..n {
        let xi = x.row(i).transpose();
        let mut mean = DMatrix::zeros(truth_sigma.nrows(), truth_sigma.ncols());
        for p in &draws.params {
            mean += covariance_at(p, &xi);
        }
        mean /= s;
        total += (mean - cov_from(truth_sigma, truth_b, &xi)).norm_squared();
    }
    Ok(total / n as f64)
}

/// The four compared fitting strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Covariance-only fit on fixed empirical log-odds, no covariates.
    Glasso,
    /// Full model on the counts.
    Trecor,
    /// Full model handed the true latent matrix.
    Oracle,
    /// Covariate covariance regression on fixed empirical log-odds.
    Covreg,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Glasso => "gLASSO",
            Method::Trecor => "TRECOR",
            Method::Oracle => "TRECOR-oracle",
            Method::Covreg => "CovReg",
        }
    }

    /// Whether the method performs rank selection at all.
    pub fn selects_rank(&self) -> bool {
        !matches!(self, Method::Glasso)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    pub replicate: usize,
    pub auc: f64,
    pub aupr: f64,
    pub sigma_err: f64,
    pub sigma_x_err: f64,
    pub chosen_rank: Option<usize>,
    pub waic_curve: Vec<(usize, f64)>,
    pub dataset_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub mean_auc: f64,
    pub sd_auc: f64,
    pub mean_aupr: f64,
    pub sd_aupr: f64,
    pub mean_sigma_err: f64,
    pub sd_sigma_err: f64,
    pub mean_sigma_x_err: f64,
    pub sd_sigma_x_err: f64,
    /// Fraction of replicates whose WAIC-chosen rank equals the true rank;
    /// `None` when the method does not select a rank.
    pub rank_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonResults {
    pub rows: Vec<MethodResult>,
    pub summary: Vec<MethodSummary>,
}

/// SHA-256 over the replicate's counts, tree, and design, so consumers can
/// assert that every method saw the same data.
pub fn dataset_hash(data: &SimDataset) -> String {
    let mut hasher = Sha256::new();
    hasher.update(data.nodes.tree_hash.as_bytes());
    for v in data.nodes.n_total.iter().chain(data.nodes.y_left.iter()) {
        hasher.update(v.to_le_bytes());
    }
    for v in data.design.x.iter() {
        hasher.update(v.to_bits().to_le_bytes());
    }
    let mut hex = String::with_capacity(64);
    for byte in hasher.finalize() {
        let _ = write!(hex, "{byte:02x}");
    }
    hex
}

const EVAL_PSEUDOCOUNT: f64 = 0.5;

fn fit_best_rank(
    method: Method,
    data: &SimDataset,
    ranks: &[usize],
    base: &FitConfig,
    replicate: usize,
) -> Result<(Option<usize>, Vec<(usize, Waic)>, PosteriorDraws), EvalError> {
    let candidates: Vec<usize> = if method.selects_rank() {
        ranks.to_vec()
    } else {
        vec![0]
    };
    if candidates.is_empty() {
        return Err(EvalError::Invalid("no candidate ranks".into()));
    }
    let mut fits = Vec::with_capacity(candidates.len());
    for &r in &candidates {
        let mut cfg = base.clone();
        cfg.rank = r;
        cfg.seed = base
            .seed
            .wrapping_add(1 + replicate as u64 * 1009)
            .wrapping_add(r as u64 * 17);
        cfg.mode = match method {
            Method::Glasso => FitMode::NoCovariates {
                pseudocount: EVAL_PSEUDOCOUNT,
            },
            Method::Trecor => FitMode::Full,
            Method::Oracle => FitMode::Oracle {
                phi_true: data.truth.phi.clone(),
            },
            Method::Covreg => FitMode::FixedPhi {
                pseudocount: EVAL_PSEUDOCOUNT,
            },
        };
        let draws = run_chain(&cfg, &data.nodes, &data.design, &data.tree, 0)?;
        let w = waic(&draws, WaicLayer::Latent)?;
        fits.push((r, w, draws));
    }
    let best = fits
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            a.1.waic
                .partial_cmp(&b.1.waic)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
        })
        .map(|(idx, _)| idx)
        .expect("nonempty fits");
    let curve = fits.iter().map(|(r, w, _)| (*r, w.clone())).collect();
    let (rank, _, draws) = fits.swap_remove(best);
    let chosen = method.selects_rank().then_some(rank);
    Ok((chosen, curve, draws))
}

fn eval_method(
    method: Method,
    data: &SimDataset,
    ranks: &[usize],
    base: &FitConfig,
    replicate: usize,
    hash: &str,
) -> Result<MethodResult, EvalError> {
    let (chosen_rank, curve, draws) = fit_best_rank(method, data, ranks, base, replicate)?;
    let mut mean_sigma = DMatrix::zeros(data.truth.sigma.nrows(), data.truth.sigma.ncols());
    for p in &draws.params {
        mean_sigma += &p.sigma;
    }
    mean_sigma /= draws.params.len() as f64;
    let mut score = mean_sigma.map(|v| v.abs());
    score.fill_diagonal(0.0);
    let rocpr = roc_pr_curves(&score, &data.truth.edges)?;
    let sigma_err = (&mean_sigma - &data.truth.sigma).norm_squared();
    let sigma_x_err = sigma_x_error(&draws, &data.truth.sigma, &data.truth.b, &data.design.x)?;
    Ok(MethodResult {
        method,
        replicate,
        auc: rocpr.auc,
        aupr: rocpr.aupr,
        sigma_err,
        sigma_x_err,
        chosen_rank,
        waic_curve: curve.into_iter().map(|(r, w)| (r, w.waic)).collect(),
        dataset_hash: hash.to_string(),
    })
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn summarize(rows: &[MethodResult], methods: &[Method], r_true: usize) -> Vec<MethodSummary> {
    methods
        .iter()
        .map(|&method| {
            let of: Vec<&MethodResult> = rows.iter().filter(|r| r.method == method).collect();
            let col = |f: fn(&MethodResult) -> f64| -> Vec<f64> { of.iter().map(|r| f(r)).collect() };
            let (mean_auc, sd_auc) = mean_sd(&col(|r| r.auc));
            let (mean_aupr, sd_aupr) = mean_sd(&col(|r| r.aupr));
            let (mean_sigma_err, sd_sigma_err) = mean_sd(&col(|r| r.sigma_err));
            let (mean_sigma_x_err, sd_sigma_x_err) = mean_sd(&col(|r| r.sigma_x_err));
            let rank_accuracy = method.selects_rank().then(|| {
                of.iter()
                    .filter(|r| r.chosen_rank == Some(r_true))
                    .count() as f64
                    / of.len().max(1) as f64
            });
            MethodSummary {
                method,
                mean_auc,
                sd_auc,
                mean_aupr,
                sd_aupr,
                mean_sigma_err,
                sd_sigma_err,
                mean_sigma_x_err,
                sd_sigma_x_err,
                rank_accuracy,
            }
        })
        .collect()
}

/// Run every method on `replicates` independently generated datasets and
/// aggregate. All methods of a replicate share the dataset (hash recorded
/// per row); candidate ranks are fit per method and chosen by WAIC.
pub fn run_comparison(
    sim: &SimConfig,
    replicates: usize,
    methods: &[Method],
    ranks: &[usize],
    base: &FitConfig,
) -> Result<ComparisonResults, EvalError> {
    if replicates == 0 || methods.is_empty() {
        return Err(EvalError::Invalid("nothing to compare".into()));
    }
    let rows: Vec<MethodResult> = (0..replicates)
        .into_par_iter()
        .map(|rep| {
            let mut sim_rep = sim.clone();
            sim_rep.seed = sim.seed.wrapping_add(rep as u64);
            let data = gen_dataset(&sim_rep)?;
            let hash = dataset_hash(&data);
            methods
                .iter()
                .map(|&m| eval_method(m, &data, ranks, base, rep, &hash))
                .collect::<Result<Vec<_>, EvalError>>()
        })
        .collect::<Result<Vec<Vec<_>>, EvalError>>()?
        .into_iter()
        .flatten()
        .collect();
    let summary = summarize(&rows, methods, sim.r_true);
    Ok(ComparisonResults { rows, summary })
}

/// Per-replicate rows as CSV.
pub fn rows_csv(results: &ComparisonResults) -> String {
    let mut out =
        String::from("replicate,method,auc,aupr,sigma_err,sigma_x_err,chosen_rank,dataset_hash\n");
    for r in &results.rows {
        let rank = r
            .chosen_rank
            .map(|v| v.to_string())
            .unwrap_or_else(|| "NA".to_string());
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.replicate,
            r.method.label(),
            r.auc,
            r.aupr,
            r.sigma_err,
            r.sigma_x_err,
            rank,
            r.dataset_hash
        );
    }
    out
}

/// Aggregated table, one row per method.
pub fn summary_csv(results: &ComparisonResults) -> String {
    let mut out = String::from(
        "method,auc_mean,auc_sd,aupr_mean,aupr_sd,sigma_err_mean,sigma_err_sd,\
         sigma_x_err_mean,sigma_x_err_sd,rank_accuracy\n",
    );
    for s in &results.summary {
        let rank = s
            .rank_accuracy
            .map(|v| v.to_string())
            .unwrap_or_else(|| "NA".to_string());
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            s.method.label(),
            s.mean_auc,
            s.sd_auc,
            s.mean_aupr,
            s.sd_aupr,
            s.mean_sigma_err,
            s.sd_sigma_err,
            s.mean_sigma_x_err,
            s.sd_sigma_x_err,
            rank
        );
    }
    out
}
