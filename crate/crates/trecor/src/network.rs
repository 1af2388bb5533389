//! Posterior network summaries: differential correlation matrices, Bayesian
//! FDR edge selection, population-network filtering, and degree analysis.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::gibbs::PosteriorDraws;
use crate::model::{covariance_at, ModelParams};
use crate::phylo::PhyloTree;

pub const DEFAULT_RHO: f64 = 0.1;
pub const DEFAULT_DELTA_FDR: f64 = 0.05;

#[derive(Debug, thiserror::Error)]
pub enum NetworkError {
    #[error("no draws to summarize")]
    NoDraws,
    #[error("invalid network input: {0}")]
    Invalid(String),
}

/// FDR-selected differential network between two covariate profiles.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffNetwork {
    /// Posterior-mean half-differences; zero where not selected and on the
    /// diagonal. Symmetric, entries in [-1, 1].
    pub delta: DMatrix<f64>,
    /// Selected off-diagonal pairs, `i < j`, lexicographic.
    pub selected: Vec<(usize, usize)>,
    /// Local FDR `f_ij = (1/L) sum_l 1{|delta^(l)_ij| <= rho}`.
    pub f: DMatrix<f64>,
    pub rho: f64,
    pub delta_fdr: f64,
}

/// FDR-filtered posterior-mean correlation of the population covariance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PopulationNetwork {
    /// Posterior-mean correlations; unit diagonal, unselected off-diagonal
    /// entries zeroed.
    pub corr: DMatrix<f64>,
    pub selected: Vec<(usize, usize)>,
    pub f: DMatrix<f64>,
    pub rho: f64,
    pub delta_fdr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DegreeReport {
    pub degrees: Vec<usize>,
    /// Highest-degree node; `None` when the network has no edges. Ties go to
    /// the smaller DFS index.
    pub hub: Option<usize>,
    /// Leaf descendants of the hub's clade (empty without a hub).
    pub differential_set: Vec<String>,
}

/// One selected edge annotated for tree overlay plotting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdgeOverlay {
    pub i: usize,
    pub j: usize,
    /// Signed posterior-mean value from the source matrix.
    pub value: f64,
    pub weight: f64,
    pub sign: i8,
    pub degree_i: usize,
    pub degree_j: usize,
    /// Internal-node path from `i` to `j` through their least common
    /// ancestor.
    pub path: Vec<usize>,
}

/// Correlation matrix of a covariance matrix, diagonal pinned to exactly 1.
pub fn correlation_from_cov(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let q = cov.nrows();
    let sd: Vec<f64> = (0..q).map(|i| cov[(i, i)].sqrt()).collect();
    let mut corr = DMatrix::zeros(q, q);
    for j in 0..q {
        for i in 0..q {
            corr[(i, j)] = cov[(i, j)] / (sd[i] * sd[j]);
        }
        corr[(j, j)] = 1.0;
    }
    corr
}

/// Half-difference of the correlation matrices of `Sigma(x1)` and
/// `Sigma(x2)` under one parameter draw.
pub fn differential_correlation_draw(
    params: &ModelParams,
    x1: &DVector<f64>,
    x2: &DVector<f64>,
) -> Result<DMatrix<f64>, NetworkError> {
    let d = params.d();
    if x1.len() != d || x2.len() != d {
        return Err(NetworkError::Invalid(format!(
            "covariate length {} / {} does not match d = {d}",
            x1.len(),
            x2.len()
        )));
    }
    let c1 = correlation_from_cov(&covariance_at(params, x1));
    let c2 = correlation_from_cov(&covariance_at(params, x2));
    Ok(0.5 * (c1 - c2))
}

/// Differential-correlation draws between two covariate profiles, one
/// matrix per retained draw.
pub fn differential_correlation_draws(
    draws: &PosteriorDraws,
    x1: &DVector<f64>,
    x2: &DVector<f64>,
) -> Result<Vec<DMatrix<f64>>, NetworkError> {
    if draws.params.is_empty() {
        return Err(NetworkError::NoDraws);
    }
    draws
        .params
        .iter()
        .map(|p| differential_correlation_draw(p, x1, x2))
        .collect()
}

fn check_draw_stack(mats: &[DMatrix<f64>]) -> Result<usize, NetworkError> {
    let first = mats.first().ok_or(NetworkError::NoDraws)?;
    let q = first.nrows();
    if first.ncols() != q {
        return Err(NetworkError::Invalid(format!(
            "draw matrices must be square, got {}x{}",
            first.nrows(),
            first.ncols()
        )));
    }
    if mats.iter().any(|m| m.nrows() != q || m.ncols() != q) {
        return Err(NetworkError::Invalid(
            "draw matrices have inconsistent shapes".into(),
        ));
    }
    Ok(q)
}

fn local_fdr(mats: &[DMatrix<f64>], rho: f64) -> DMatrix<f64> {
    let q = mats[0].nrows();
    let l = mats.len() as f64;
    let mut f = DMatrix::zeros(q, q);
    for m in mats {
        for j in 0..q {
            for i in 0..q {
                if m[(i, j)].abs() <= rho {
                    f[(i, j)] += 1.0;
                }
            }
        }
    }
    f / l
}

/// Sorted-prefix Bayesian FDR rule over the off-diagonal `f` values: take
/// the longest prefix of the increasing sort whose mean is <= delta_fdr,
/// cutting only at tie-closed positions so the selected set is exactly
/// {f <= threshold} and its mean f never exceeds delta_fdr.
fn select_by_fdr(f: &DMatrix<f64>, delta_fdr: f64) -> Vec<(usize, usize)> {
    let q = f.nrows();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(q * (q - 1) / 2);
    for i in 0..q {
        for j in (i + 1)..q {
            pairs.push((f[(i, j)], i, j));
        }
    }
    pairs.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut k_star = 0;
    let mut running = 0.0;
    for (k, p) in pairs.iter().enumerate() {
        running += p.0;
        let tie_closed = k + 1 == pairs.len() || pairs[k + 1].0 > p.0;
        if tie_closed && running / (k + 1) as f64 <= delta_fdr {
            k_star = k + 1;
        }
    }
    let mut selected: Vec<(usize, usize)> = pairs[..k_star].iter().map(|p| (p.1, p.2)).collect();
    selected.sort_unstable();
    selected
}

fn mean_of(mats: &[DMatrix<f64>]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(mats[0].nrows(), mats[0].ncols());
    for d in mats {
        m += d;
    }
    m / mats.len() as f64
}

/// Select differential edges at local-FDR level `delta_fdr`.
///
/// The reported matrix is the posterior mean over all draws, zeroed outside
/// the selected set and on the diagonal.
pub fn fdr_select(
    delta_draws: &[DMatrix<f64>],
    rho: f64,
    delta_fdr: f64,
) -> Result<DiffNetwork, NetworkError> {
    let q = check_draw_stack(delta_draws)?;
    let f = local_fdr(delta_draws, rho);
    let selected = select_by_fdr(&f, delta_fdr);
    let mean = mean_of(delta_draws);
    let mut delta = DMatrix::zeros(q, q);
    for &(i, j) in &selected {
        let v = 0.5 * (mean[(i, j)] + mean[(j, i)]);
        delta[(i, j)] = v;
        delta[(j, i)] = v;
    }
    Ok(DiffNetwork {
        delta,
        selected,
        f,
        rho,
        delta_fdr,
    })
}

/// Population network: the same FDR filter applied to the correlation draws
/// of the population covariance itself.
pub fn population_network(
    draws: &PosteriorDraws,
    rho: f64,
    delta_fdr: f64,
) -> Result<PopulationNetwork, NetworkError> {
    if draws.params.is_empty() {
        return Err(NetworkError::NoDraws);
    }
    let corr_draws: Vec<DMatrix<f64>> = draws
        .params
        .iter()
        .map(|p| correlation_from_cov(&p.sigma))
        .collect();
    let q = check_draw_stack(&corr_draws)?;
    let f = local_fdr(&corr_draws, rho);
    let selected = select_by_fdr(&f, delta_fdr);
    let mean = mean_of(&corr_draws);
    let mut corr = DMatrix::identity(q, q);
    for &(i, j) in &selected {
        let v = 0.5 * (mean[(i, j)] + mean[(j, i)]);
        corr[(i, j)] = v;
        corr[(j, i)] = v;
    }
    Ok(PopulationNetwork {
        corr,
        selected,
        f,
        rho,
        delta_fdr,
    })
}

fn degrees_of(selected: &[(usize, usize)], q: usize) -> Vec<usize> {
    let mut deg = vec![0usize; q];
    for &(i, j) in selected {
        deg[i] += 1;
        deg[j] += 1;
    }
    deg
}

/// Degrees, hub, and differential set (hub clade leaves) of a selected
/// network.
pub fn degree_and_differential_set(
    net: &DiffNetwork,
    tree: &PhyloTree,
) -> Result<DegreeReport, NetworkError> {
    let q = net.delta.nrows();
    if q != tree.q() {
        return Err(NetworkError::Invalid(format!(
            "network over {q} nodes but tree has q = {}",
            tree.q()
        )));
    }
    let degrees = degrees_of(&net.selected, q);
    if net.selected.is_empty() {
        return Ok(DegreeReport {
            degrees,
            hub: None,
            differential_set: Vec::new(),
        });
    }
    let mut dfs_rank = vec![0usize; q];
    for (rank, &node) in tree.dfs_order().iter().enumerate() {
        dfs_rank[node] = rank;
    }
    let hub = (0..q)
        .max_by(|&a, &b| {
            degrees[a]
                .cmp(&degrees[b])
                .then(dfs_rank[b].cmp(&dfs_rank[a]))
        })
        .expect("q > 0");
    Ok(DegreeReport {
        degrees,
        hub: Some(hub),
        differential_set: tree.clade_leaf_names(hub),
    })
}

fn tree_path(tree: &PhyloTree, i: usize, j: usize) -> Vec<usize> {
    let ancestors = |mut v: usize| {
        let mut out = vec![v];
        while let Some(p) = tree.parent(v) {
            out.push(p);
            v = p;
        }
        out
    };
    let ai = ancestors(i);
    let aj = ancestors(j);
    let mut common = 0;
    while common < ai.len()
        && common < aj.len()
        && ai[ai.len() - 1 - common] == aj[aj.len() - 1 - common]
    {
        common += 1;
    }
    let mut path: Vec<usize> = ai[..=ai.len() - common].to_vec();
    path.extend(aj[..aj.len() - common].iter().rev());
    path
}

/// Top-`k` selected edges by |value|, annotated for overlay on the tree.
/// Ties order by `(i, j)` lexicographic; `k` past the edge count returns
/// everything.
pub fn top_edges_overlay(
    net: &DiffNetwork,
    tree: &PhyloTree,
    k: usize,
) -> Result<Vec<EdgeOverlay>, NetworkError> {
    let q = net.delta.nrows();
    if q != tree.q() {
        return Err(NetworkError::Invalid(format!(
            "network over {q} nodes but tree has q = {}",
            tree.q()
        )));
    }
    let degrees = degrees_of(&net.selected, q);
    let mut edges = net.selected.clone();
    edges.sort_by(|&(ai, aj), &(bi, bj)| {
        let va = net.delta[(ai, aj)].abs();
        let vb = net.delta[(bi, bj)].abs();
        vb.partial_cmp(&va)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(ai.cmp(&bi))
            .then(aj.cmp(&bj))
    });
    edges.truncate(k);
    Ok(edges
        .into_iter()
        .map(|(i, j)| {
            let value = net.delta[(i, j)];
            EdgeOverlay {
                i,
                j,
                value,
                weight: value.abs(),
                sign: if value >= 0.0 { 1 } else { -1 },
                degree_i: degrees[i],
                degree_j: degrees[j],
                path: tree_path(tree, i, j),
            }
        })
        .collect())
}
