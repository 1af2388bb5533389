//! Synthetic data generation: structured covariance matrices, sparse
//! coefficient sets, and full count datasets with retained ground truth,
//! optionally calibrated against a reference count table.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Binomial, Distribution, LogNormal, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::model::{Design, ModelError};
use crate::phylo::{
    leaf_to_node_counts, node_to_leaf_counts, parse_newick, prune_to_leaves, tree_graph_distance,
    tree_hash, CountMatrix, NodeCounts, NodeRef, PhyloError, PhyloTree, ZeroRowPolicy,
};
use crate::randdist::{cholesky_pd, DistError, RngStream};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("tree_based sigma structure needs a tree")]
    TreeRequired,
    #[error("reference empty after filtering: {0}")]
    EmptyReference(String),
    #[error(transparent)]
    Phylo(#[from] PhyloError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Sparsity pattern of the population covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaStructure {
    Tridiagonal,
    ScaleFree,
    TreeBased,
}

/// Where reference counts live on disk; thresholds come from the enclosing
/// [`SimConfig`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferencePaths {
    pub counts: PathBuf,
    pub tree: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    /// Internal-node count; ignored when a reference supplies the tree.
    pub q: usize,
    /// Design columns including the intercept.
    pub d: usize,
    pub r_true: usize,
    pub sigma_structure: SigmaStructure,
    /// Pairwise correlation of the non-intercept covariates.
    pub covariate_corr: f64,
    /// Variance of nonzero coefficient entries; `None` means `0.5 / d`.
    pub b_entry_var: Option<f64>,
    /// Reference genera with a higher zero proportion are dropped.
    pub sparsity_threshold: f64,
    /// Reference genera with a smaller total count are dropped.
    pub min_total: u64,
    pub seed: u64,
    pub reference: Option<ReferencePaths>,
}

impl SimConfig {
    pub fn new(seed: u64) -> Self {
        SimConfig {
            n: 100,
            q: 100,
            d: 4,
            r_true: 3,
            sigma_structure: SigmaStructure::Tridiagonal,
            covariate_corr: 0.1,
            b_entry_var: None,
            sparsity_threshold: 0.5,
            min_total: 100,
            seed,
            reference: None,
        }
    }

    pub fn entry_var(&self) -> f64 {
        self.b_entry_var.unwrap_or(0.5 / self.d as f64)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.n == 0 || self.q == 0 || self.d == 0 {
            return Err(SimError::Config(format!(
                "n = {}, q = {}, d = {} must all be positive",
                self.n, self.q, self.d
            )));
        }
        if self.r_true > self.q {
            return Err(SimError::Config(format!(
                "r_true = {} exceeds q = {}: supports cannot be disjoint",
                self.r_true, self.q
            )));
        }
        if !(0.0..1.0).contains(&self.covariate_corr.abs()) {
            return Err(SimError::Config(format!(
                "covariate correlation {} outside (-1, 1)",
                self.covariate_corr
            )));
        }
        if !(self.entry_var() > 0.0) {
            return Err(SimError::Config("coefficient entry variance must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.sparsity_threshold) {
            return Err(SimError::Config(format!(
                "sparsity threshold {} outside [0, 1]",
                self.sparsity_threshold
            )));
        }
        Ok(())
    }
}

/// Reference quantities extracted from a real count table: the pruned tree,
/// pooled per-node intercept log-odds, and the library-size pool.
#[derive(Debug, Clone)]
pub struct ReferenceBundle {
    pub tree: PhyloTree,
    pub intercepts: DVector<f64>,
    pub library_sizes: Vec<u64>,
    pub kept_taxa: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SimTruth {
    pub sigma: DMatrix<f64>,
    /// Off-diagonal support of `sigma`, `i < j` pairs.
    pub edges: Vec<(usize, usize)>,
    /// `b[0]` is the mean block, `b[1..]` the covariance factors.
    pub b: Vec<DMatrix<f64>>,
    pub phi: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct SimDataset {
    pub nodes: NodeCounts,
    pub design: Design,
    pub tree: PhyloTree,
    pub truth: SimTruth,
}

fn signed_weight(rng: &mut impl Rng) -> f64 {
    let mag = Uniform::new(0.3, 0.9).expect("static bounds").sample(rng);
    if rng.random::<bool>() {
        mag
    } else {
        -mag
    }
}

/// Shift the diagonal of a symmetric zero-diagonal weight matrix until it is
/// positive definite, then normalize back to a unit diagonal. The shift is
/// uniform, so normalization is a single division.
fn weights_to_unit_pd(weights: DMatrix<f64>) -> Result<DMatrix<f64>, SimError> {
    let q = weights.nrows();
    let mut shift = 1.0;
    for _ in 0..200 {
        let candidate = &weights + DMatrix::identity(q, q) * shift;
        if cholesky_pd(&candidate).is_ok() {
            return Ok(candidate / shift);
        }
        shift *= 1.3;
    }
    Err(SimError::Config(
        "could not make the structured covariance positive definite".into(),
    ))
}

/// Preferential-attachment tree: node `t` joins an earlier node with
/// probability proportional to `degree^5`, seeded with the edge (0, 1).
fn scale_free_edges(q: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    if q < 2 {
        return Vec::new();
    }
    let mut edges = vec![(0usize, 1usize)];
    let mut degree = vec![1.0f64; 2];
    for t in 2..q {
        let weights: Vec<f64> = degree.iter().map(|d| d.powi(5)).collect();
        let total: f64 = weights.iter().sum();
        let mut pick = rng.random::<f64>() * total;
        let mut target = weights.len() - 1;
        for (j, w) in weights.iter().enumerate() {
            pick -= w;
            if pick <= 0.0 {
                target = j;
                break;
            }
        }
        edges.push((target, t));
        degree[target] += 1.0;
        degree.push(1.0);
    }
    edges
}

/// Structured PD covariance with unit diagonal, plus its true edge set.
pub fn gen_sigma(
    structure: SigmaStructure,
    q: usize,
    tree: Option<&PhyloTree>,
    rng: &mut impl Rng,
) -> Result<(DMatrix<f64>, Vec<(usize, usize)>), SimError> {
    if q == 0 {
        return Err(SimError::Config("q must be positive".into()));
    }
    match structure {
        SigmaStructure::Tridiagonal => {
            let mut sigma = DMatrix::identity(q, q);
            let mut edges = Vec::with_capacity(q.saturating_sub(1));
            for j in 1..q {
                sigma[(j, j - 1)] = 0.5;
                sigma[(j - 1, j)] = 0.5;
                edges.push((j - 1, j));
            }
            Ok((sigma, edges))
        }
        SigmaStructure::ScaleFree => {
            let edges = scale_free_edges(q, rng);
            let mut w = DMatrix::zeros(q, q);
            for &(i, j) in &edges {
                let v = signed_weight(rng);
                w[(i, j)] = v;
                w[(j, i)] = v;
            }
            Ok((weights_to_unit_pd(w)?, edges))
        }
        SigmaStructure::TreeBased => {
            let tree = tree.ok_or(SimError::TreeRequired)?;
            if tree.q() != q {
                return Err(SimError::Config(format!(
                    "tree has q = {} but {q} was requested",
                    tree.q()
                )));
            }
            let dist = tree_graph_distance(tree);
            let mut w = DMatrix::zeros(q, q);
            let mut edges = Vec::new();
            for i in 0..q {
                for j in (i + 1)..q {
                    let p = (-(dist[(i, j)] as f64)).exp();
                    if rng.random::<f64>() < p {
                        let v = signed_weight(rng);
                        w[(i, j)] = v;
                        w[(j, i)] = v;
                        edges.push((i, j));
                    }
                }
            }
            Ok((weights_to_unit_pd(w)?, edges))
        }
    }
}

/// Coefficient matrices with disjoint contiguous row supports across the
/// covariance factors. `B_0` carries the intercepts (given or N(0, 1.5^2))
/// in its intercept column and zeros elsewhere.
pub fn gen_coefficients(
    config: &SimConfig,
    q: usize,
    intercepts: Option<&DVector<f64>>,
    rng: &mut impl Rng,
) -> Result<Vec<DMatrix<f64>>, SimError> {
    config.validate()?;
    if config.r_true > q {
        return Err(SimError::Config(format!(
            "r_true = {} exceeds q = {q}",
            config.r_true
        )));
    }
    if let Some(ic) = intercepts {
        if ic.len() != q {
            return Err(SimError::Config(format!(
                "{} intercepts for q = {q}",
                ic.len()
            )));
        }
    }
    let d = config.d;
    let mut b0 = DMatrix::zeros(q, d);
    let fallback = Normal::new(0.0, 1.5).expect("static parameters");
    for j in 0..q {
        b0[(j, 0)] = match intercepts {
            Some(ic) => ic[j],
            None => fallback.sample(rng),
        };
    }
    let mut b = vec![b0];
    let entry = Normal::new(0.0, config.entry_var().sqrt()).expect("validated variance");
    if config.r_true > 0 {
        let block = q / config.r_true;
        for r in 0..config.r_true {
            let start = r * block;
            let end = if r + 1 == config.r_true { q } else { start + block };
            let mut b_r = DMatrix::zeros(q, d);
            for j in start..end {
                for c in 0..d {
                    b_r[(j, c)] = entry.sample(rng);
                }
            }
            b.push(b_r);
        }
    }
    Ok(b)
}

/// Uniform coalescent topology over `n_leaves` named leaves: repeatedly join
/// two uniformly chosen roots until one remains.
pub fn random_binary_tree(n_leaves: usize, rng: &mut impl Rng) -> Result<PhyloTree, PhyloError> {
    if n_leaves < 2 {
        return Err(PhyloError::TooFewLeaves);
    }
    let mut roots: Vec<NodeRef> = (0..n_leaves).map(NodeRef::Leaf).collect();
    let mut pairs = Vec::with_capacity(n_leaves - 1);
    while roots.len() > 1 {
        let a = rng.random_range(0..roots.len());
        let left = roots.swap_remove(a);
        let b = rng.random_range(0..roots.len());
        let right = roots.swap_remove(b);
        pairs.push((left, right));
        roots.push(NodeRef::Internal(pairs.len() - 1));
    }
    let names = (1..=n_leaves).map(|k| format!("t{k}")).collect();
    PhyloTree::from_parts(pairs, names, roots[0])
}

fn draw_phi_row(
    b: &[DMatrix<f64>],
    l_sigma: &DMatrix<f64>,
    x: &DVector<f64>,
    rng: &mut impl Rng,
) -> (DVector<f64>, Vec<f64>) {
    use rand_distr::StandardNormal;
    let q = l_sigma.nrows();
    let mut phi = &b[0] * x;
    let mut gamma = Vec::with_capacity(b.len() - 1);
    for b_r in &b[1..] {
        let g: f64 = rng.sample(StandardNormal);
        phi.axpy(g, &(b_r * x), 1.0);
        gamma.push(g);
    }
    let z = DVector::from_fn(q, |_, _| rng.sample(StandardNormal));
    phi += l_sigma * z;
    (phi, gamma)
}

/// Draw latent rows at a fixed covariate profile; returns `(phi, gamma)`
/// with one draw per row. Exposes the generator's latent layer so its
/// moments can be checked against `covariance_at` directly.
pub fn sample_phi_at(
    b: &[DMatrix<f64>],
    sigma: &DMatrix<f64>,
    x: &DVector<f64>,
    count: usize,
    rng: &mut impl Rng,
) -> Result<(DMatrix<f64>, DMatrix<f64>), SimError> {
    let l = cholesky_pd(sigma)?.l();
    let q = sigma.nrows();
    let rank = b.len() - 1;
    let mut phi = DMatrix::zeros(count, q);
    let mut gamma = DMatrix::zeros(count, rank);
    for i in 0..count {
        let (row, g) = draw_phi_row(b, &l, x, rng);
        phi.row_mut(i).tr_copy_from(&row);
        for (r, v) in g.into_iter().enumerate() {
            gamma[(i, r)] = v;
        }
    }
    Ok((phi, gamma))
}

/// Top-down binomial cascade: thin each root total through the tree with the
/// given log-odds. Root totals must be positive.
pub fn counts_from_phi(
    tree: &PhyloTree,
    phi: &DMatrix<f64>,
    roots: &[u64],
    rng: &mut impl Rng,
) -> Result<NodeCounts, SimError> {
    let (n, q) = (phi.nrows(), phi.ncols());
    if q != tree.q() {
        return Err(SimError::Config(format!(
            "phi has {q} columns but tree has q = {}",
            tree.q()
        )));
    }
    if roots.len() != n {
        return Err(SimError::Config(format!(
            "{} root totals for {n} samples",
            roots.len()
        )));
    }
    if let Some(i) = roots.iter().position(|&m| m == 0) {
        return Err(SimError::Config(format!("root total of sample {i} is zero")));
    }
    let mut n_total = DMatrix::<u64>::zeros(n, q);
    let mut y_left = DMatrix::<u64>::zeros(n, q);
    for i in 0..n {
        n_total[(i, tree.root())] = roots[i];
        for &j in tree.dfs_order() {
            let total = n_total[(i, j)];
            let p = 1.0 / (1.0 + (-phi[(i, j)]).exp());
            let y = Binomial::new(total, p)
                .map_err(|e| SimError::Config(format!("binomial cascade: {e}")))?
                .sample(rng);
            y_left[(i, j)] = y;
            if let NodeRef::Internal(c) = tree.left_child(j) {
                n_total[(i, c)] = y;
            }
            if let NodeRef::Internal(c) = tree.right_child(j) {
                n_total[(i, c)] = total - y;
            }
        }
    }
    Ok(NodeCounts {
        n_total,
        y_left,
        sample_ids: (1..=n).map(|i| format!("sim_{i}")).collect(),
        tree_hash: tree_hash(tree),
    })
}

fn gen_design(config: &SimConfig, rng: &mut impl Rng) -> Result<Design, SimError> {
    use rand_distr::StandardNormal;
    let (n, d) = (config.n, config.d);
    let mut x = DMatrix::zeros(n, d);
    for i in 0..n {
        x[(i, 0)] = 1.0;
    }
    if d > 1 {
        let m = d - 1;
        let rho = config.covariate_corr;
        let mut c = DMatrix::from_element(m, m, rho);
        c.fill_diagonal(1.0);
        let l = cholesky_pd(&c)?.l();
        for i in 0..n {
            let z = DVector::from_fn(m, |_, _| rng.sample(StandardNormal));
            let v = &l * z;
            for k in 0..m {
                x[(i, k + 1)] = v[k];
            }
        }
    }
    let mut names = vec!["intercept".to_string()];
    names.extend((1..d).map(|k| format!("x{k}")));
    Ok(Design::new(x, names, true)?)
}

fn draw_library_sizes(
    n: usize,
    reference: Option<&ReferenceBundle>,
    rng: &mut impl Rng,
) -> Vec<u64> {
    match reference {
        Some(r) => (0..n)
            .map(|_| r.library_sizes[rng.random_range(0..r.library_sizes.len())])
            .collect(),
        None => {
            let ln = LogNormal::new(8.5, 1.0).expect("static parameters");
            (0..n)
                .map(|_| {
                    let v: f64 = ln.sample(rng);
                    (v.round() as u64).max(1)
                })
                .collect()
        }
    }
}

/// Generate a full dataset from an already-loaded reference (or none) and an
/// explicit RNG.
pub fn gen_dataset_with(
    config: &SimConfig,
    reference: Option<&ReferenceBundle>,
    rng: &mut impl Rng,
) -> Result<SimDataset, SimError> {
    config.validate()?;
    let tree = match reference {
        Some(r) => r.tree.clone(),
        None => random_binary_tree(config.q + 1, rng)?,
    };
    let q = tree.q();
    let (sigma, edges) = gen_sigma(config.sigma_structure, q, Some(&tree), rng)?;
    let intercepts = reference.map(|r| &r.intercepts);
    let b = gen_coefficients(config, q, intercepts, rng)?;
    let design = gen_design(config, rng)?;
    let l_sigma = cholesky_pd(&sigma)?.l();
    let mut phi = DMatrix::zeros(config.n, q);
    let mut gamma = DMatrix::zeros(config.n, config.r_true);
    for i in 0..config.n {
        let (row, g) = draw_phi_row(&b, &l_sigma, &design.row(i), rng);
        phi.row_mut(i).tr_copy_from(&row);
        for (r, v) in g.into_iter().enumerate() {
            gamma[(i, r)] = v;
        }
    }
    let roots = draw_library_sizes(config.n, reference, rng);
    let nodes = counts_from_phi(&tree, &phi, &roots, rng)?;
    Ok(SimDataset {
        nodes,
        design,
        tree,
        truth: SimTruth {
            sigma,
            edges,
            b,
            phi,
            gamma,
        },
    })
}

/// Generate a dataset from the config alone: loads the reference if paths
/// are given and seeds a dedicated stream, so equal configs give
/// bit-identical datasets.
pub fn gen_dataset(config: &SimConfig) -> Result<SimDataset, SimError> {
    let reference = match &config.reference {
        Some(paths) => Some(load_reference(
            &paths.counts,
            &paths.tree,
            config.sparsity_threshold,
            config.min_total,
        )?),
        None => None,
    };
    let mut rng = RngStream::new(config.seed, 0).rng();
    gen_dataset_with(config, reference.as_ref(), &mut rng)
}

/// Load and filter a reference count table: genera with zero proportion
/// above `zero_threshold` or total count below `min_total` are dropped, the
/// tree is pruned to the survivors, and pooled per-node intercept log-odds
/// plus the library-size pool are extracted.
pub fn load_reference(
    counts_csv: &Path,
    tree_file: &Path,
    zero_threshold: f64,
    min_total: u64,
) -> Result<ReferenceBundle, SimError> {
    let counts = crate::phylo::load_counts_file(counts_csv)?;
    let tree = parse_newick(&std::fs::read_to_string(tree_file)?)?;
    reference_from_parts(&counts, &tree, zero_threshold, min_total)
}

/// [`load_reference`] over in-memory inputs.
pub fn reference_from_parts(
    counts: &CountMatrix,
    tree: &PhyloTree,
    zero_threshold: f64,
    min_total: u64,
) -> Result<ReferenceBundle, SimError> {
    let n = counts.n_samples();
    if n == 0 {
        return Err(SimError::EmptyReference("no samples".into()));
    }
    let z = counts.counts();
    let mut kept_taxa = Vec::new();
    for (c, name) in counts.taxon_names().iter().enumerate() {
        let zeros = (0..n).filter(|&i| z[(i, c)] == 0).count();
        let zero_prop = zeros as f64 / n as f64;
        let total: u64 = (0..n).map(|i| z[(i, c)]).sum();
        if zero_prop <= zero_threshold && total >= min_total {
            kept_taxa.push(name.clone());
        }
    }
    if kept_taxa.len() < 2 {
        return Err(SimError::EmptyReference(format!(
            "{} of {} genera survive zero_threshold = {zero_threshold}, min_total = {min_total}",
            kept_taxa.len(),
            counts.n_taxa()
        )));
    }
    let pruned = prune_to_leaves(tree, &kept_taxa)?;
    // Rebuild the count matrix over the kept columns, in pruned-leaf order.
    let mut zk = DMatrix::<u64>::zeros(n, pruned.n_leaves());
    for (new_c, name) in pruned.leaf_names().iter().enumerate() {
        let old_c = counts
            .taxon_names()
            .iter()
            .position(|t| t == name)
            .expect("kept taxa come from the count table");
        for i in 0..n {
            zk[(i, new_c)] = z[(i, old_c)];
        }
    }
    let filtered = CountMatrix::new(
        zk,
        pruned.leaf_names().to_vec(),
        counts.sample_ids().to_vec(),
    )?;
    let (nodes, _dropped) = leaf_to_node_counts(&pruned, &filtered, ZeroRowPolicy::Drop)?;
    if nodes.n_samples() == 0 {
        return Err(SimError::EmptyReference(
            "every sample has zero total after filtering".into(),
        ));
    }
    let q = pruned.q();
    let mut intercepts = DVector::zeros(q);
    for j in 0..q {
        let y: u64 = (0..nodes.n_samples()).map(|i| nodes.y_left[(i, j)]).sum();
        let t: u64 = (0..nodes.n_samples()).map(|i| nodes.n_total[(i, j)]).sum();
        intercepts[j] = ((y as f64 + 0.5) / ((t - y) as f64 + 0.5)).ln();
    }
    let root = pruned.root();
    let library_sizes = (0..nodes.n_samples())
        .map(|i| nodes.n_total[(i, root)])
        .collect();
    Ok(ReferenceBundle {
        tree: pruned,
        intercepts,
        library_sizes,
        kept_taxa,
    })
}

/// Fraction of zero entries in the leaf-level count table recovered from
/// node data.
pub fn leaf_zero_proportion(tree: &PhyloTree, nodes: &NodeCounts) -> Result<f64, SimError> {
    let leaves = node_to_leaf_counts(tree, nodes)?;
    let z = leaves.counts();
    let zeros = z.iter().filter(|&&v| v == 0).count();
    Ok(zeros as f64 / (z.nrows() * z.ncols()) as f64)
}
