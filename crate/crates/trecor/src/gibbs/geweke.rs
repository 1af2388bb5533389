//! Joint-distribution validation of the sampler (Geweke-style).
//!
//! Two ways of sampling the joint over parameters, latents and data must
//! agree: the forward path draws parameters from the prior and data from the
//! model; the successive-conditional path alternates one full Gibbs sweep
//! with a redraw of the data given the current latents.  Marginal statistics
//! from both paths are compared with two-sample Kolmogorov-Smirnov tests.
//!
//! The prior over `Σ` is the positive-definite truncation of the elementwise
//! normal-mixture/exponential product, so the forward draw rejects non-PD
//! proposals; the truncation event depends only on `Σ`, which keeps the
//! sampler's `τ` and collapsed `λ` conditionals exact.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Binomial, Distribution, Exp, StandardNormal};

use crate::evalm::ks_two_sample;
use crate::model::{Design, Hyper, LatentState, ModelParams};
use crate::phylo::{parse_newick, tree_hash, NodeCounts, NodeRef, PhyloTree};
use crate::randdist::{
    draw_gamma, draw_inverse_gamma, draw_matrix_normal, draw_polya_gamma, RngStream,
};

use super::{gibbs_sweep, ChainData, GibbsError, SweepScratch};

/// Dimensions and run lengths for one Geweke comparison.
#[derive(Debug, Clone)]
pub struct GewekeConfig {
    /// Internal nodes; the test tree is a caterpillar over `q + 1` leaves.
    pub q: usize,
    /// Samples per data set.
    pub n: usize,
    /// Design columns (intercept plus a linear covariate grid).
    pub d: usize,
    /// Covariance factors.
    pub rank: usize,
    /// Retained draws per side.
    pub samples: usize,
    /// Sweeps between retained successive-conditional draws.
    pub thin: usize,
    /// Successive-conditional sweeps discarded up front.
    pub burn_in: usize,
    pub seed: u64,
    pub hyper: Hyper,
}

impl Default for GewekeConfig {
    fn default() -> Self {
        GewekeConfig {
            q: 4,
            n: 8,
            d: 2,
            rank: 1,
            samples: 20_000,
            thin: 25,
            burn_in: 500,
            seed: 7,
            // A tighter rate prior than the fitting default keeps the prior
            // mass of Σ away from near-singular draws, so the PD rejection
            // step stays cheap without changing what is being tested.
            hyper: Hyper {
                v: 2.0,
                s: 2.0,
                ..Hyper::default()
            },
        }
    }
}

/// One compared statistic and its KS distance.
#[derive(Debug, Clone)]
pub struct GewekeStat {
    pub name: String,
    pub ks: f64,
}

#[derive(Debug, Clone)]
pub struct GewekeReport {
    pub stats: Vec<GewekeStat>,
    /// KS distance at the 1% level for the two sample sizes.
    pub threshold: f64,
    pub pass: bool,
}

/// Caterpillar tree over `n_leaves` named leaves, `n_leaves - 1` internal nodes.
fn test_tree(n_leaves: usize) -> PhyloTree {
    let mut s = "L0".to_string();
    for i in 1..n_leaves {
        s = format!("({s},L{i})");
    }
    parse_newick(&format!("{s};")).expect("caterpillar newick is well formed")
}

/// Deterministic design: intercept plus centered linear grids.
fn test_design(n: usize, d: usize) -> Design {
    let mut x = DMatrix::zeros(n, d);
    for i in 0..n {
        x[(i, 0)] = 1.0;
        for j in 1..d {
            let t = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
            x[(i, j)] = (2.0 * t - 1.0) * j as f64;
        }
    }
    let names = (0..d)
        .map(|j| {
            if j == 0 {
                "intercept".to_string()
            } else {
                format!("x{j}")
            }
        })
        .collect();
    Design::new(x, names, true).expect("test design is valid")
}

/// Fixed per-sample root totals, modest so every node keeps exact PG draws.
fn root_totals(n: usize) -> Vec<u64> {
    (0..n).map(|i| 24 + (i as u64 % 7) * 3).collect()
}

/// Draw `(Σ, τ)` given `λ` by rejection on positive definiteness.
fn draw_sigma_prior<R: Rng + ?Sized>(
    q: usize,
    lambda: f64,
    rng: &mut R,
) -> Result<(DMatrix<f64>, DMatrix<f64>), GibbsError> {
    let exp_tau = Exp::new(0.5 * lambda * lambda)
        .map_err(|e| GibbsError::Config(format!("bad tau rate: {e}")))?;
    let exp_diag = Exp::new(0.5 * lambda)
        .map_err(|e| GibbsError::Config(format!("bad diagonal rate: {e}")))?;
    for _ in 0..200_000 {
        let mut tau = DMatrix::zeros(q, q);
        let mut sigma = DMatrix::zeros(q, q);
        for k in 0..q {
            sigma[(k, k)] = exp_diag.sample(rng);
            for l in (k + 1)..q {
                let t: f64 = exp_tau.sample(rng);
                let z: f64 = rng.sample(StandardNormal);
                let s = t.sqrt() * z;
                tau[(k, l)] = t;
                tau[(l, k)] = t;
                sigma[(k, l)] = s;
                sigma[(l, k)] = s;
            }
        }
        if nalgebra::Cholesky::new(sigma.clone()).is_some() {
            return Ok((sigma, tau));
        }
    }
    Err(GibbsError::Numerical {
        iteration: 0,
        what: "prior rejection sampler for Σ found no PD draw".into(),
    })
}

/// Forward draw of all parameters from the prior.
fn draw_params_prior<R: Rng + ?Sized>(
    q: usize,
    d: usize,
    rank: usize,
    hyper: &Hyper,
    rng: &mut R,
) -> Result<ModelParams, GibbsError> {
    let lambda = draw_gamma(hyper.v, hyper.s, rng)?;
    let (sigma, tau) = draw_sigma_prior(q, lambda, rng)?;
    let mut nu = DVector::zeros(d);
    for v in nu.iter_mut() {
        *v = draw_inverse_gamma(hyper.a_nu, hyper.b_nu, rng)?;
    }
    let mut omega = DVector::zeros(d);
    for v in omega.iter_mut() {
        *v = draw_inverse_gamma(hyper.a_omega, hyper.b_omega, rng)?;
    }
    let zero = DMatrix::zeros(q, d);
    let mut b = Vec::with_capacity(rank + 1);
    b.push(draw_matrix_normal(
        &zero,
        &sigma,
        &DMatrix::from_diagonal(&omega),
        rng,
    )?);
    for _ in 0..rank {
        b.push(draw_matrix_normal(
            &zero,
            &sigma,
            &DMatrix::from_diagonal(&nu),
            rng,
        )?);
    }
    Ok(ModelParams {
        sigma,
        b,
        tau,
        lambda,
        nu,
        omega,
        hyper: hyper.clone(),
    })
}

/// Draw latent scores and log-odds given parameters.
fn draw_latents_prior<R: Rng + ?Sized>(
    params: &ModelParams,
    design: &Design,
    rng: &mut R,
) -> Result<(DMatrix<f64>, DMatrix<f64>), GibbsError> {
    let n = design.n();
    let q = params.q();
    let rank = params.rank();
    let mut gamma = DMatrix::zeros(n, rank);
    for v in gamma.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    let chol = crate::randdist::cholesky_pd(&params.sigma)?;
    let l = chol.l();
    let mut phi = DMatrix::zeros(n, q);
    for i in 0..n {
        let x_i = design.row(i);
        let mut mu = &params.b[0] * &x_i;
        for r in 1..=rank {
            mu += (&params.b[r] * &x_i) * gamma[(i, r - 1)];
        }
        let mut z = DVector::zeros(q);
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let draw = &mu + &l * z;
        for k in 0..q {
            phi[(i, k)] = draw[k];
        }
    }
    Ok((phi, gamma))
}

/// Redraw counts `(N, y)` top-down from the binomial cascade at `φ`, then the
/// matching auxiliaries `g ~ PG(N, φ)`; both live in one conditional because
/// `g`'s distribution depends on the totals.
fn redraw_data<R: Rng + ?Sized>(
    tree: &PhyloTree,
    phi: &DMatrix<f64>,
    roots: &[u64],
    nodes: &mut NodeCounts,
    g: &mut DMatrix<f64>,
    rng: &mut R,
) -> Result<(), GibbsError> {
    let n = phi.nrows();
    let q = phi.ncols();
    for i in 0..n {
        for &j in tree.dfs_order() {
            let n_ij = if j == tree.root() {
                roots[i]
            } else {
                nodes.n_total[(i, j)]
            };
            nodes.n_total[(i, j)] = n_ij;
            let p = 1.0 / (1.0 + (-phi[(i, j)]).exp());
            let y = if n_ij == 0 {
                0
            } else {
                Binomial::new(n_ij, p)
                    .map_err(|e| GibbsError::Config(format!("binomial cascade: {e}")))?
                    .sample(rng)
            };
            nodes.y_left[(i, j)] = y;
            if let NodeRef::Internal(c) = tree.left_child(j) {
                nodes.n_total[(i, c)] = y;
            }
            if let NodeRef::Internal(c) = tree.right_child(j) {
                nodes.n_total[(i, c)] = n_ij - y;
            }
        }
        for k in 0..q {
            let n_ik = nodes.n_total[(i, k)];
            g[(i, k)] = if n_ik > 0 {
                draw_polya_gamma(n_ik, phi[(i, k)], rng)?
            } else {
                0.0
            };
        }
    }
    Ok(())
}

fn stats_of(params: &ModelParams) -> [f64; 4] {
    [
        params.sigma[(0, 0)],
        params.lambda,
        params.b[1].norm(),
        params.nu[0],
    ]
}

/// Run both samplers and compare the marginals of `Σ_11`, `λ`, `||B_1||_F`
/// and `ν_1` at the 1% KS level.
pub fn run_geweke(cfg: &GewekeConfig) -> Result<GewekeReport, GibbsError> {
    assert!(cfg.rank >= 1, "the compared statistics include ||B_1||_F");
    let tree = test_tree(cfg.q + 1);
    let design = test_design(cfg.n, cfg.d);
    let roots = root_totals(cfg.n);

    // Forward side: iid draws from prior and model.
    let mut rng_f = RngStream::new(cfg.seed, 0).rng();
    let mut forward = vec![Vec::with_capacity(cfg.samples); 4];
    for _ in 0..cfg.samples {
        let params = draw_params_prior(cfg.q, cfg.d, cfg.rank, &cfg.hyper, &mut rng_f)?;
        let s = stats_of(&params);
        for (acc, v) in forward.iter_mut().zip(s) {
            acc.push(v);
        }
    }

    // Successive-conditional side: sweep, then redraw data.
    let mut rng_s = RngStream::new(cfg.seed, 1).rng();
    let mut params = draw_params_prior(cfg.q, cfg.d, cfg.rank, &cfg.hyper, &mut rng_s)?;
    let (phi, gamma) = draw_latents_prior(&params, &design, &mut rng_s)?;
    let mut nodes = NodeCounts {
        n_total: DMatrix::zeros(cfg.n, cfg.q),
        y_left: DMatrix::zeros(cfg.n, cfg.q),
        sample_ids: (0..cfg.n).map(|i| format!("s{i}")).collect(),
        tree_hash: tree_hash(&tree),
    };
    let mut g = DMatrix::zeros(cfg.n, cfg.q);
    redraw_data(&tree, &phi, &roots, &mut nodes, &mut g, &mut rng_s)?;
    let mut state = LatentState { phi, gamma, g };

    let mut scratch = SweepScratch::new(cfg.n, cfg.q, cfg.rank);
    let mut warnings = Vec::new();
    let mut successive = vec![Vec::with_capacity(cfg.samples); 4];
    let total = cfg.burn_in + cfg.samples * cfg.thin;
    for step in 0..total {
        let mut kappa = DMatrix::zeros(cfg.n, cfg.q);
        for i in 0..cfg.n {
            for k in 0..cfg.q {
                kappa[(i, k)] =
                    nodes.y_left[(i, k)] as f64 - 0.5 * nodes.n_total[(i, k)] as f64;
            }
        }
        {
            let data = ChainData {
                nodes: Some(&nodes),
                design: design.clone(),
                kappa,
                update_latent: true,
            };
            gibbs_sweep(&mut params, &mut state, &data, &mut scratch, &mut warnings, &mut rng_s)?;
        }
        redraw_data(&tree, &state.phi, &roots, &mut nodes, &mut state.g, &mut rng_s)?;
        if step >= cfg.burn_in && (step - cfg.burn_in) % cfg.thin == 0 {
            let s = stats_of(&params);
            for (acc, v) in successive.iter_mut().zip(s) {
                acc.push(v);
            }
        }
    }

    let names = ["sigma_11", "lambda", "b1_frobenius", "nu_1"];
    let n1 = forward[0].len() as f64;
    let n2 = successive[0].len() as f64;
    let threshold = 1.628 * ((n1 + n2) / (n1 * n2)).sqrt();
    let mut stats = Vec::with_capacity(4);
    let mut pass = true;
    for (name, (f, s)) in names.iter().zip(forward.iter().zip(successive.iter())) {
        let ks = ks_two_sample(f, s);
        pass &= ks <= threshold;
        stats.push(GewekeStat {
            name: name.to_string(),
            ks,
        });
    }
    Ok(GewekeReport {
        stats,
        threshold,
        pass,
    })
}
