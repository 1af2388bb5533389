//! Sampler tests.  Every conditional is held against an independent oracle:
//! naive minor inversion for the running-product machinery, brute-force
//! slice quadrature for the `Σ` column and `γ` conditionals, the stationary
//! law of the column scan against 3-D quadrature, closed-form moments for
//! the scale and Polya-Gamma blocks, and a joint Geweke comparison for the
//! full sweep.  Chain-driver tests pin the mode reductions, determinism and
//! the draw-store round trip.

use super::*;
use crate::phylo::parse_newick;
use crate::simgen::counts_from_phi;
use approx::assert_relative_eq;
use nalgebra::{dmatrix, dvector};
use rand_distr::StandardNormal;

// ---------------------------------------------------------------------------
// Fixtures
// ---------------------------------------------------------------------------

/// Caterpillar tree over `q + 1` leaves, so exactly `q` internal nodes.
fn caterpillar(q: usize) -> PhyloTree {
    let mut s = "t0".to_string();
    for i in 1..=q {
        s = format!("({s},t{i})");
    }
    parse_newick(&format!("{s};")).expect("caterpillar newick is well formed")
}

/// Intercept plus centered polynomial columns; Vandermonde, so full rank.
fn grid_design(n: usize, d: usize) -> Design {
    let mut x = DMatrix::zeros(n, d);
    for i in 0..n {
        let t = if n > 1 {
            2.0 * (i as f64 / (n - 1) as f64) - 1.0
        } else {
            0.0
        };
        x[(i, 0)] = 1.0;
        for j in 1..d {
            x[(i, j)] = t.powi(j as i32);
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
    Design::new(x, names, true).expect("grid design is valid")
}

fn spd_matrix(q: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = RngStream::new(seed, 0).rng();
    let a = DMatrix::from_fn(q, q, |_, _| rng.sample::<f64, _>(StandardNormal));
    &a * a.transpose() + DMatrix::identity(q, q) * 0.5
}

fn random_params(q: usize, d: usize, rank: usize, seed: u64) -> ModelParams {
    let mut rng = RngStream::new(seed, 1).rng();
    let a = DMatrix::from_fn(q, q, |_, _| rng.sample::<f64, _>(StandardNormal));
    let sigma = &a * a.transpose() + DMatrix::identity(q, q) * 0.5;
    let b = (0..=rank)
        .map(|_| DMatrix::from_fn(q, d, |_, _| rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let mut tau = DMatrix::zeros(q, q);
    for i in 0..q {
        for j in (i + 1)..q {
            let t = 0.2 + rng.random::<f64>();
            tau[(i, j)] = t;
            tau[(j, i)] = t;
        }
    }
    ModelParams {
        sigma,
        b,
        tau,
        lambda: 0.5 + rng.random::<f64>(),
        nu: DVector::from_fn(d, |_, _| 0.3 + rng.random::<f64>()),
        omega: DVector::from_fn(d, |_, _| 0.3 + rng.random::<f64>()),
        hyper: Hyper::default(),
    }
}

fn random_state(params: &ModelParams, n: usize, seed: u64) -> LatentState {
    let mut rng = RngStream::new(seed, 2).rng();
    LatentState {
        phi: DMatrix::from_fn(n, params.q(), |_, _| rng.sample::<f64, _>(StandardNormal)),
        gamma: DMatrix::from_fn(n, params.rank(), |_, _| rng.sample::<f64, _>(StandardNormal)),
        g: DMatrix::zeros(n, params.q()),
    }
}

/// Counts drawn from the binomial cascade at the given log-odds.
fn synth_counts(tree: &PhyloTree, phi: &DMatrix<f64>, seed: u64) -> NodeCounts {
    let roots: Vec<u64> = (0..phi.nrows()).map(|i| 40 + (i as u64 % 5) * 6).collect();
    let mut rng = RngStream::new(seed, 3).rng();
    counts_from_phi(tree, phi, &roots, &mut rng).expect("cascade counts")
}

fn naive_minor(m: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let q = m.nrows();
    DMatrix::from_fn(q - 1, q - 1, |i, j| {
        m[(i + usize::from(i >= k), j + usize::from(j >= k))]
    })
}

fn naive_minor_col(m: &DMatrix<f64>, k: usize) -> DVector<f64> {
    let q = m.nrows();
    DVector::from_fn(q - 1, |i, _| m[(i + usize::from(i >= k), k)])
}

// ---------------------------------------------------------------------------
// Σ block
// ---------------------------------------------------------------------------

#[test]
fn minor_views_and_embedding_agree() {
    let m = DMatrix::from_fn(4, 4, |i, j| (4 * i + j) as f64);
    let mut out = DMatrix::zeros(3, 3);
    minor_into(&m, 1, &mut out);
    assert_eq!(
        out,
        DMatrix::from_row_slice(3, 3, &[0.0, 2.0, 3.0, 8.0, 10.0, 11.0, 12.0, 14.0, 15.0])
    );
    let mut col = DVector::zeros(3);
    col_minor_into(&m, 1, &mut col);
    assert_eq!(col, DVector::from_vec(vec![1.0, 9.0, 13.0]));
    let mut full = DVector::zeros(4);
    embed(&col, 1, &mut full);
    assert_eq!(full, DVector::from_vec(vec![1.0, 0.0, 9.0, 13.0]));
}

#[test]
fn column_quantities_matches_naive_minor_inversion() {
    let q = 6;
    let sigma = spd_matrix(q, 301);
    let mut rng = RngStream::new(302, 0).rng();
    let rows = DMatrix::from_fn(12, q, |_, _| rng.sample::<f64, _>(StandardNormal));
    let s = rows.transpose() * &rows;

    let omega = sigma.clone().try_inverse().expect("sigma invertible");
    let p_run = &omega * &s;
    let t_run = &p_run * &omega;
    let mut h = DMatrix::zeros(q - 1, q - 1);
    let mut msand = DMatrix::zeros(q - 1, q - 1);
    for k in 0..q {
        let u_old = column_quantities(k, &s, &omega, &p_run, &t_run, &mut h, &mut msand);
        let h_ref = naive_minor(&sigma, k).try_inverse().expect("minor invertible");
        let msand_ref = &h_ref * naive_minor(&s, k) * &h_ref;
        assert!((&h - &h_ref).amax() < 1e-8, "H mismatch at column {k}");
        assert!((&msand - &msand_ref).amax() < 1e-8, "sandwich mismatch at column {k}");
        assert_relative_eq!(u_old, 1.0 / omega[(k, k)], epsilon = 1e-10);
        // Schur identity: u = Σ_kk - Σ_{k,-k}ᵀ H Σ_{k,-k}.
        let s_col = naive_minor_col(&sigma, k);
        assert_relative_eq!(
            u_old,
            sigma[(k, k)] - (&h_ref * &s_col).dot(&s_col),
            epsilon = 1e-8
        );
    }
}

#[test]
fn refresh_running_matches_fresh_products() {
    let q = 6;
    let s = {
        let mut rng = RngStream::new(311, 0).rng();
        let rows = DMatrix::from_fn(15, q, |_, _| rng.sample::<f64, _>(StandardNormal));
        rows.transpose() * &rows
    };
    for &k in &[0usize, 2, 5] {
        let sigma = spd_matrix(q, 312 + k as u64);
        let mut omega = sigma.clone().try_inverse().unwrap();
        let mut p_run = &omega * &s;
        let mut t_run = &p_run * &omega;
        let mut h = DMatrix::zeros(q - 1, q - 1);
        let mut msand = DMatrix::zeros(q - 1, q - 1);
        column_quantities(k, &s, &omega, &p_run, &t_run, &mut h, &mut msand);

        let mut rng = RngStream::new(313, k as u64).rng();
        let beta = DVector::from_fn(q - 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let u = 0.8;
        let h_beta = &h * &beta;
        refresh_running(k, &s, &mut omega, &mut p_run, &mut t_run, &h, &h_beta, u);

        // The column write this downdate corresponds to.
        let mut sigma_new = sigma.clone();
        for i in 0..q {
            if i == k {
                continue;
            }
            let ii = i - usize::from(i > k);
            sigma_new[(i, k)] = beta[ii];
            sigma_new[(k, i)] = beta[ii];
        }
        sigma_new[(k, k)] = u + beta.dot(&h_beta);

        let omega_ref = sigma_new.clone().try_inverse().unwrap();
        let p_ref = &omega_ref * &s;
        let t_ref = &p_ref * &omega_ref;
        assert!((&omega - &omega_ref).amax() < 1e-8, "omega drift at column {k}");
        assert!((&p_run - &p_ref).amax() < 1e-8, "P drift at column {k}");
        assert!((&t_run - &t_ref).amax() < 1e-8, "T drift at column {k}");
    }
}

#[test]
fn sigma_column_conditional_matches_slice_quadrature() {
    // q = 2, column k = 1: with Σ_00 and u = Σ_11 - Σ_01²/Σ_00 held fixed,
    // the slice of |Σ|^{-m/2} exp(-tr(Σ⁻¹S)/2) π(Σ) in β = Σ_01 is Gaussian
    // with precision S_00/(Σ_00² u) + λ/Σ_00 + 1/τ_01 and mean
    // prec⁻¹ S_01/(Σ_00 u).  Brute-force normalization of that slice must
    // agree with the moments implied by the column machinery.
    let sigma = dmatrix![1.3, 0.45; 0.45, 0.9];
    let s = dmatrix![24.0, 7.5; 7.5, 18.0];
    let (lambda, tau01) = (1.7, 0.6);

    let omega = sigma.clone().try_inverse().unwrap();
    let p_run = &omega * &s;
    let t_run = &p_run * &omega;
    let mut h = DMatrix::zeros(1, 1);
    let mut msand = DMatrix::zeros(1, 1);
    let u = column_quantities(1, &s, &omega, &p_run, &t_run, &mut h, &mut msand);
    let prec = msand[(0, 0)] / u + lambda * h[(0, 0)] + 1.0 / tau01;
    let mean = h[(0, 0)] * s[(0, 1)] / (u * prec);

    let s00 = sigma[(0, 0)];
    let log_slice = |beta: f64| {
        -0.5 * (beta * beta * s[(0, 0)] / (s00 * s00) - 2.0 * beta * s[(0, 1)] / s00) / u
            - 0.5 * lambda * beta * beta / s00
            - 0.5 * beta * beta / tau01
    };
    let sd = (1.0 / prec).sqrt();
    let steps = 48_000usize;
    let lo = mean - 12.0 * sd;
    let dx = 24.0 * sd / steps as f64;
    let (mut z0, mut z1, mut z2) = (0.0, 0.0, 0.0);
    for i in 0..=steps {
        let b = lo + i as f64 * dx;
        let w = (log_slice(b) - log_slice(mean)).exp();
        z0 += w;
        z1 += w * b;
        z2 += w * b * b;
    }
    let q_mean = z1 / z0;
    let q_var = z2 / z0 - q_mean * q_mean;
    assert_relative_eq!(q_mean, mean, epsilon = 1e-9, max_relative = 1e-6);
    assert_relative_eq!(q_var, 1.0 / prec, max_relative = 1e-6);
}

#[test]
fn sigma_column_scan_is_stationary_for_fixed_lambda_and_tau() {
    // With λ and τ held fixed, repeated column scans form a Markov chain on
    // Σ whose invariant law is
    //   p(Σ) ∝ |Σ|^{-m/2} exp(-tr(Σ⁻¹S)/2) N(Σ_01; 0, τ_01)
    //          Exp(Σ_00; λ/2) Exp(Σ_11; λ/2)    on the PD cone,
    // with m = n + d(R+1).  Chain moments must match 3-D quadrature.
    let m = 41usize; // n = 41, d = 0, R = 0
    let sigma_hat = dmatrix![1.0, 0.35; 0.35, 0.8];
    let s = &sigma_hat * m as f64;
    let (lambda, tau01) = (1.0, 0.5);
    let tau = dmatrix![0.0, tau01; tau01, 0.0];

    let logf = |s00: f64, s01: f64, s11: f64| -> f64 {
        let det = s00 * s11 - s01 * s01;
        if det <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let tr = (s11 * s[(0, 0)] - 2.0 * s01 * s[(0, 1)] + s00 * s[(1, 1)]) / det;
        -0.5 * m as f64 * det.ln() - 0.5 * tr - 0.5 * s01 * s01 / tau01
            - 0.5 * lambda * (s00 + s11)
    };
    let shift = logf(1.0, 0.35, 0.8);
    let (a_lo, a_hi, na) = (0.05, 5.0, 170usize);
    let (b_lo, b_hi, nb) = (-1.2, 1.8, 170usize);
    let (c_lo, c_hi, nc) = (0.05, 4.5, 170usize);
    let da = (a_hi - a_lo) / (na - 1) as f64;
    let db = (b_hi - b_lo) / (nb - 1) as f64;
    let dc = (c_hi - c_lo) / (nc - 1) as f64;
    let (mut z0, mut e00, mut e01, mut e11, mut e01sq, mut z_edge) =
        (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for ia in 0..na {
        let s00 = a_lo + ia as f64 * da;
        for ib in 0..nb {
            let s01 = b_lo + ib as f64 * db;
            for ic in 0..nc {
                let s11 = c_lo + ic as f64 * dc;
                let w = (logf(s00, s01, s11) - shift).exp();
                if w == 0.0 {
                    continue;
                }
                z0 += w;
                e00 += w * s00;
                e01 += w * s01;
                e11 += w * s11;
                e01sq += w * s01 * s01;
                if ia == 0 || ia == na - 1 || ib == 0 || ib == nb - 1 || ic == 0 || ic == nc - 1 {
                    z_edge += w;
                }
            }
        }
    }
    assert!(z_edge / z0 < 1e-6, "quadrature box truncates mass: {}", z_edge / z0);
    e00 /= z0;
    e01 /= z0;
    e11 /= z0;
    e01sq /= z0;

    let mut sigma = DMatrix::identity(2, 2);
    let mut scratch = SweepScratch::new(1, 2, 0);
    let mut warnings = Vec::new();
    let mut rng = RngStream::new(91, 0).rng();
    let (burn, keep) = (1_000usize, 60_000usize);
    let (mut c00, mut c01, mut c11, mut c01sq) = (0.0, 0.0, 0.0, 0.0);
    for t in 0..(burn + keep) {
        sigma_columns(&s, &mut sigma, &tau, lambda, m, 0, 0, &mut scratch, &mut warnings, &mut rng)
            .expect("column scan");
        if t >= burn {
            c00 += sigma[(0, 0)];
            c01 += sigma[(0, 1)];
            c11 += sigma[(1, 1)];
            c01sq += sigma[(0, 1)] * sigma[(0, 1)];
        }
    }
    let kf = keep as f64;
    assert!((c00 / kf - e00).abs() < 0.025, "E[Σ00]: chain {} vs quadrature {e00}", c00 / kf);
    assert!((c01 / kf - e01).abs() < 0.025, "E[Σ01]: chain {} vs quadrature {e01}", c01 / kf);
    assert!((c11 / kf - e11).abs() < 0.025, "E[Σ11]: chain {} vs quadrature {e11}", c11 / kf);
    assert!(
        (c01sq / kf - e01sq).abs() < 0.025,
        "E[Σ01²]: chain {} vs quadrature {e01sq}",
        c01sq / kf
    );
}

#[test]
fn update_sigma_block_recovers_generating_covariance() {
    // S = n Σ* at n = 4000 concentrates the conditional near Σ*: the chain
    // mean must land within 5% of Σ* entrywise, and every iterate must keep
    // both Schur complements (the u_k) positive.
    let sigma_star = dmatrix![1.0, 0.4; 0.4, 2.0];
    let n = 4000usize;
    let s = &sigma_star * n as f64;
    let mut params = ModelParams {
        sigma: DMatrix::identity(2, 2),
        b: vec![DMatrix::zeros(2, 1)],
        tau: dmatrix![0.0, 1.0; 1.0, 0.0],
        lambda: 1.0,
        nu: dvector![1.0],
        omega: dvector![1.0],
        hyper: Hyper::default(),
    };
    let mut rng = RngStream::new(92, 0).rng();
    let mut mean = DMatrix::zeros(2, 2);
    let (burn, keep) = (300usize, 1500usize);
    for t in 0..(burn + keep) {
        let (sigma, tau, lambda) = update_sigma_block(&s, &params, n, &mut rng).expect("block");
        assert_eq!(sigma, sigma.transpose());
        let u0 = sigma[(0, 0)] - sigma[(0, 1)] * sigma[(0, 1)] / sigma[(1, 1)];
        let u1 = sigma[(1, 1)] - sigma[(0, 1)] * sigma[(0, 1)] / sigma[(0, 0)];
        assert!(u0 > 0.0 && u1 > 0.0, "Schur complement nonpositive at sweep {t}");
        params.sigma = sigma;
        params.tau = tau;
        params.lambda = lambda;
        if t >= burn {
            mean += &params.sigma;
        }
    }
    mean /= keep as f64;
    for i in 0..2 {
        for j in 0..2 {
            assert!(
                (mean[(i, j)] - sigma_star[(i, j)]).abs() <= 0.05 * sigma_star[(i, j)].abs(),
                "posterior mean {} at ({i},{j}) vs {}",
                mean[(i, j)],
                sigma_star[(i, j)]
            );
        }
    }
}

#[test]
fn sigma_block_keeps_sigma_pd_across_sweeps() {
    let q = 5;
    let mut params = random_params(q, 2, 1, 621);
    let s = {
        let mut rng = RngStream::new(622, 0).rng();
        let rows = DMatrix::from_fn(30, q, |_, _| rng.sample::<f64, _>(StandardNormal));
        rows.transpose() * &rows
    };
    let mut rng = RngStream::new(623, 0).rng();
    for t in 0..300 {
        let (sigma, tau, lambda) = update_sigma_block(&s, &params, 30, &mut rng).expect("block");
        assert!(
            nalgebra::Cholesky::new(sigma.clone()).is_some(),
            "sigma lost positive definiteness at sweep {t}"
        );
        for k in 0..q {
            let h = naive_minor(&sigma, k).try_inverse().unwrap();
            let col = naive_minor_col(&sigma, k);
            let u = sigma[(k, k)] - (&h * &col).dot(&col);
            assert!(u > 0.0, "u_{k} nonpositive at sweep {t}");
        }
        params.sigma = sigma;
        params.tau = tau;
        params.lambda = lambda;
    }
}

#[test]
fn update_sigma_block_rejects_shape_mismatch() {
    let params = random_params(2, 1, 0, 631);
    let s = DMatrix::zeros(3, 3);
    let mut rng = RngStream::new(632, 0).rng();
    assert!(matches!(
        update_sigma_block(&s, &params, 5, &mut rng),
        Err(GibbsError::Dimension(_))
    ));
}

// ---------------------------------------------------------------------------
// Coefficients, scores and scales
// ---------------------------------------------------------------------------

#[test]
fn coeff_conditional_mean_structure_for_single_basis_sample() {
    // One sample with x = e_1: A = t xᵀ has a single nonzero column and the
    // posterior column precision is diagonal, so the conditional mean is
    // t/(1 + 1/ω_0) in column 0 and exactly zero elsewhere.
    let x = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    let design = Design::new(x, vec!["intercept".into(), "x1".into()], true).unwrap();
    let targets = DMatrix::from_row_slice(1, 3, &[2.0, -1.0, 3.0]);
    let weights = dvector![1.0];
    let col_var = dvector![0.5, 1.5];
    let (mean, _) = coeff_conditional(&targets, &weights, &design, &col_var).unwrap();
    let shrink = 1.0 / (1.0 + 1.0 / 0.5);
    for k in 0..3 {
        assert_relative_eq!(mean[(k, 0)], targets[(0, k)] * shrink, epsilon = 1e-12);
        assert_eq!(mean[(k, 1)], 0.0);
    }
}

#[test]
fn vanishing_prior_scales_pin_coefficient_draws_at_zero() {
    let params0 = random_params(3, 2, 1, 401);
    let design = grid_design(6, 2);
    let state = random_state(&params0, 6, 402);
    let mut tiny = params0.clone();
    tiny.omega = DVector::from_element(2, 1e-14);
    tiny.nu = DVector::from_element(2, 1e-14);
    let mut rng = RngStream::new(403, 0).rng();
    let b0 = update_b0(&state, &tiny, &design, &mut rng).unwrap();
    let b1 = update_br(1, &state, &tiny, &design, &mut rng).unwrap();
    assert!(b0.amax() < 1e-5);
    assert!(b1.amax() < 1e-5);
}

#[test]
fn update_b0_recovers_generating_coefficients() {
    // R = 0, oracle φ = X B_0*ᵀ + noise: the posterior mean of B_0 must land
    // within 3 posterior standard deviations of B_0* entrywise.
    let q = 3;
    let n = 400;
    let design = grid_design(n, 2);
    let b_star = DMatrix::from_row_slice(q, 2, &[0.8, -0.5, -0.3, 0.6, 0.2, 0.9]);
    let sigma_star = dmatrix![0.5, 0.1, 0.0; 0.1, 0.6, 0.15; 0.0, 0.15, 0.4];
    let l = cholesky_pd(&sigma_star).unwrap().l();
    let mut rng = RngStream::new(17, 0).rng();
    let mut phi = &design.x * b_star.transpose();
    for i in 0..n {
        let z = DVector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal));
        let e = &l * z;
        for k in 0..q {
            phi[(i, k)] += e[k];
        }
    }
    let tree = caterpillar(q);
    let nodes = synth_counts(&tree, &DMatrix::zeros(n, q), 611); // ignored under oracle mode
    let mut cfg = FitConfig::new(0);
    cfg.iterations = 1_500;
    cfg.burn_in = 500;
    cfg.thin = 2;
    cfg.seed = 9;
    cfg.mode = FitMode::Oracle { phi_true: phi };
    let draws = run_chain(&cfg, &nodes, &design, &tree, 0).unwrap();
    let m = draws.n_draws() as f64;
    let mut mean = DMatrix::zeros(q, 2);
    let mut sq = DMatrix::zeros(q, 2);
    for p in &draws.params {
        mean += &p.b[0];
        sq += p.b[0].component_mul(&p.b[0]);
    }
    mean /= m;
    sq /= m;
    for k in 0..q {
        for j in 0..2 {
            let sd = (sq[(k, j)] - mean[(k, j)] * mean[(k, j)]).max(0.0).sqrt();
            assert!(
                (mean[(k, j)] - b_star[(k, j)]).abs() <= 3.0 * sd + 0.01,
                "B0[{k},{j}] mean {} vs truth {} (posterior sd {sd})",
                mean[(k, j)],
                b_star[(k, j)]
            );
        }
    }
}

#[test]
fn update_br_prior_draw_when_scores_vanish() {
    // γ ≡ 0 removes the likelihood: the conditional mean is exactly zero and
    // the draw is MN(0, Σ, diag(ν)) with entry variance Σ_kk ν_j.
    let sigma = dmatrix![1.0, 0.4; 0.4, 2.0];
    let nu = dvector![0.5, 2.0];
    let design = grid_design(5, 2);
    let targets = DMatrix::from_fn(5, 2, |i, j| (i + j) as f64); // irrelevant under zero weights
    let weights = DVector::zeros(5);
    let (mean, _) = coeff_conditional(&targets, &weights, &design, &nu).unwrap();
    assert_eq!(mean, DMatrix::zeros(2, 2));

    let l_sigma = cholesky_pd(&sigma).unwrap().l();
    let mut rng = RngStream::new(411, 0).rng();
    let reps = 6000;
    let mut second = DMatrix::zeros(2, 2);
    for _ in 0..reps {
        let draw = draw_coeff_matrix(&targets, &weights, &design, &l_sigma, &nu, &mut rng).unwrap();
        for k in 0..2 {
            for j in 0..2 {
                second[(k, j)] += draw[(k, j)] * draw[(k, j)];
            }
        }
    }
    second /= reps as f64;
    for k in 0..2 {
        for j in 0..2 {
            assert_relative_eq!(second[(k, j)], sigma[(k, k)] * nu[j], max_relative = 0.12);
        }
    }
}

#[test]
fn factor_relabeling_is_invariant() {
    // Swapping (B_1, B_2) together with the γ columns relabels the factors
    // without changing the joint, so the matched conditionals coincide
    // draw for draw under a shared RNG stream.
    let params = random_params(3, 2, 2, 421);
    let design = grid_design(7, 2);
    let state = random_state(&params, 7, 422);

    let mut params_sw = params.clone();
    params_sw.b.swap(1, 2);
    let mut state_sw = state.clone();
    state_sw.gamma = DMatrix::from_fn(7, 2, |i, r| state.gamma[(i, 1 - r)]);

    let mut rng_a = RngStream::new(423, 0).rng();
    let mut rng_b = RngStream::new(423, 0).rng();
    let b_orig = update_br(2, &state, &params, &design, &mut rng_a).unwrap();
    let b_sw = update_br(1, &state_sw, &params_sw, &design, &mut rng_b).unwrap();
    assert_eq!(b_orig, b_sw);

    for i in 0..7 {
        let mut rng_a = RngStream::new(424, i as u64).rng();
        let mut rng_b = RngStream::new(424, i as u64).rng();
        let g_orig = update_gamma(i, 2, &state, &params, &design, &mut rng_a).unwrap();
        let g_sw = update_gamma(i, 1, &state_sw, &params_sw, &design, &mut rng_b).unwrap();
        assert_eq!(g_orig, g_sw);
    }
}

#[test]
fn factor_index_bounds_are_enforced() {
    let params = random_params(2, 1, 1, 431);
    let design = grid_design(3, 1);
    let state = random_state(&params, 3, 432);
    let mut rng = RngStream::new(433, 0).rng();
    assert!(matches!(
        update_br(0, &state, &params, &design, &mut rng),
        Err(GibbsError::Dimension(_))
    ));
    assert!(matches!(
        update_br(2, &state, &params, &design, &mut rng),
        Err(GibbsError::Dimension(_))
    ));
    assert!(matches!(
        update_gamma(0, 0, &state, &params, &design, &mut rng),
        Err(GibbsError::Dimension(_))
    ));
    assert!(matches!(
        update_gamma(0, 2, &state, &params, &design, &mut rng),
        Err(GibbsError::Dimension(_))
    ));
}

#[test]
fn update_gamma_reduces_to_standard_normal_prior() {
    // B_r = 0 gives s = 1 and mean 0: the draw must equal the raw z sample.
    let mut params = random_params(2, 2, 1, 441);
    params.b[1] = DMatrix::zeros(2, 2);
    let design = grid_design(4, 2);
    let state = random_state(&params, 4, 442);
    let mut probe = RngStream::new(443, 5).rng();
    let z: f64 = probe.sample(StandardNormal);
    let mut rng = RngStream::new(443, 5).rng();
    let draw = update_gamma(1, 1, &state, &params, &design, &mut rng).unwrap();
    assert_eq!(draw, z);
}

/// Recover the conditional mean and precision of `update_gamma` from two
/// draws with known normal deviates: draw = mean + z/√s.
fn probe_gamma(
    i: usize,
    r: usize,
    state: &LatentState,
    params: &ModelParams,
    design: &Design,
) -> (f64, f64) {
    let z1: f64 = RngStream::new(77, 0).rng().sample(StandardNormal);
    let z2: f64 = RngStream::new(78, 0).rng().sample(StandardNormal);
    assert!((z1 - z2).abs() > 1e-3, "probe deviates are degenerate");
    let mut rng1 = RngStream::new(77, 0).rng();
    let mut rng2 = RngStream::new(78, 0).rng();
    let d1 = update_gamma(i, r, state, params, design, &mut rng1).unwrap();
    let d2 = update_gamma(i, r, state, params, design, &mut rng2).unwrap();
    let root_s = (z1 - z2) / (d1 - d2);
    (d1 - z1 / root_s, root_s * root_s)
}

#[test]
fn update_gamma_matches_slice_quadrature() {
    // 1-D slice of the joint in γ_i1 with everything else fixed:
    // p(γ) ∝ N(φ_i; B_0 x + γ B_1 x + γ_i2 B_2 x, Σ) N(γ; 0, 1).
    let params = random_params(2, 2, 2, 451);
    let design = grid_design(3, 2);
    let state = random_state(&params, 3, 452);
    let i = 1usize;
    let (m_imp, s_imp) = probe_gamma(i, 1, &state, &params, &design);

    let x_i = design.x.row(i).transpose();
    let chol = cholesky_pd(&params.sigma).unwrap();
    let base = state.phi.row(i).transpose()
        - &params.b[0] * &x_i
        - (&params.b[2] * &x_i) * state.gamma[(i, 1)];
    let dir = &params.b[1] * &x_i;
    let log_slice = |g: f64| {
        let r = &base - &dir * g;
        let mut v = r.clone();
        chol.solve_mut(&mut v);
        -0.5 * r.dot(&v) - 0.5 * g * g
    };
    let sd = (1.0 / s_imp).sqrt();
    let steps = 40_000usize;
    let lo = m_imp - 10.0 * sd;
    let dx = 20.0 * sd / steps as f64;
    let (mut z0, mut z1, mut z2) = (0.0, 0.0, 0.0);
    for k in 0..=steps {
        let g = lo + k as f64 * dx;
        let w = (log_slice(g) - log_slice(m_imp)).exp();
        z0 += w;
        z1 += w * g;
        z2 += w * g * g;
    }
    let q_mean = z1 / z0;
    let q_var = z2 / z0 - q_mean * q_mean;
    assert_relative_eq!(q_mean, m_imp, epsilon = 1e-8, max_relative = 1e-6);
    assert_relative_eq!(q_var, 1.0 / s_imp, max_relative = 1e-6);
}

#[test]
fn update_gamma_posterior_variance_never_exceeds_prior() {
    // s = 1 + xᵀB_rᵀΣ⁻¹B_r x ≥ 1, so the recovered conditional precision can
    // never fall below the prior's.
    for seed in 0..200u64 {
        let params = random_params(3, 2, 1, 460 + seed);
        let design = grid_design(4, 2);
        let state = random_state(&params, 4, 700 + seed);
        let (_, s) = probe_gamma(2, 1, &state, &params, &design);
        assert!(s >= 1.0 - 1e-9, "posterior precision {s} below the prior's 1");
    }
}

#[test]
fn update_scales_reduces_to_prior_when_b_is_zero() {
    // Zero coefficients leave IG(a_ν + qR/2, b_ν) and IG(a_ω + q/2, b_ω);
    // an inverse gamma with shape α and scale β has mean β/(α-1).
    let q = 3usize;
    let mut params = random_params(q, 2, 2, 471);
    for b in params.b.iter_mut() {
        b.fill(0.0);
    }
    let mut rng = RngStream::new(472, 0).rng();
    let reps = 6000;
    let (mut nu_sum, mut om_sum) = (0.0, 0.0);
    for _ in 0..reps {
        let (nu, om) = update_scales(&params, &mut rng).unwrap();
        nu_sum += nu[0];
        om_sum += om[0];
    }
    let h = &params.hyper;
    let nu_mean = h.b_nu / (h.a_nu + 0.5 * (q * 2) as f64 - 1.0);
    let om_mean = h.b_omega / (h.a_omega + 0.5 * q as f64 - 1.0);
    assert_relative_eq!(nu_sum / reps as f64, nu_mean, max_relative = 0.05);
    assert_relative_eq!(om_sum / reps as f64, om_mean, max_relative = 0.05);
}

#[test]
fn update_scales_matches_quadrature_oracle() {
    // ν's conditional for one coefficient column: IG(a_ν, b_ν) prior times
    // N(b_col; 0, ν Σ) likelihood.  The Monte Carlo mean of the sampler must
    // match brute-force normalization over a ν grid.
    let sigma = dmatrix![1.0, 0.3; 0.3, 0.8];
    let b1 = DMatrix::from_column_slice(2, 1, &[0.7, -0.4]);
    let params = ModelParams {
        sigma: sigma.clone(),
        b: vec![DMatrix::zeros(2, 1), b1.clone()],
        tau: dmatrix![0.0, 1.0; 1.0, 0.0],
        lambda: 1.0,
        nu: dvector![1.0],
        omega: dvector![1.0],
        hyper: Hyper::default(),
    };
    let chol = cholesky_pd(&sigma).unwrap();
    let col = b1.column(0).clone_owned();
    let mut v = col.clone();
    chol.solve_mut(&mut v);
    let ssq = col.dot(&v);
    let h = &params.hyper;
    let (a_post, b_post) = (h.a_nu + 1.0, h.b_nu + 0.5 * ssq); // qR/2 = 1 at q = 2, R = 1
    let steps = 200_000usize;
    let dx = 3.0 / steps as f64;
    let (mut z0, mut z1) = (0.0, 0.0);
    for i in 1..=steps {
        let x = i as f64 * dx;
        let w = (-(a_post + 1.0) * x.ln() - b_post / x).exp();
        z0 += w;
        z1 += w * x;
    }
    let quad_mean = z1 / z0;
    assert_relative_eq!(quad_mean, b_post / (a_post - 1.0), max_relative = 1e-3);

    let mut rng = RngStream::new(481, 0).rng();
    let reps = 30_000;
    let mut acc = 0.0;
    for _ in 0..reps {
        let (nu, _) = update_scales(&params, &mut rng).unwrap();
        acc += nu[0];
    }
    assert_relative_eq!(acc / reps as f64, quad_mean, max_relative = 0.03);
}

#[test]
fn omega_update_is_independent_of_factor_count() {
    // ω's conditional involves only B_0 and Σ, so adding zero factor
    // matrices cannot move it.
    let sigma = dmatrix![1.0, 0.2; 0.2, 0.6];
    let b0 = DMatrix::from_column_slice(2, 1, &[0.9, 0.5]);
    let build = |rank: usize| ModelParams {
        sigma: sigma.clone(),
        b: std::iter::once(b0.clone())
            .chain((0..rank).map(|_| DMatrix::zeros(2, 1)))
            .collect(),
        tau: dmatrix![0.0, 1.0; 1.0, 0.0],
        lambda: 1.0,
        nu: dvector![1.0],
        omega: dvector![1.0],
        hyper: Hyper::default(),
    };
    let chol = cholesky_pd(&sigma).unwrap();
    let col = b0.column(0).clone_owned();
    let mut v = col.clone();
    chol.solve_mut(&mut v);
    let ssq = col.dot(&v);
    let h = Hyper::default();
    let analytic = (h.b_omega + 0.5 * ssq) / (h.a_omega + 1.0 - 1.0); // q/2 = 1
    for (rank, seed) in [(1usize, 485u64), (3, 486)] {
        let params = build(rank);
        let mut rng = RngStream::new(seed, 0).rng();
        let reps = 6000;
        let mut acc = 0.0;
        for _ in 0..reps {
            let (_, om) = update_scales(&params, &mut rng).unwrap();
            acc += om[0];
        }
        assert_relative_eq!(acc / reps as f64, analytic, max_relative = 0.05);
    }
}

// ---------------------------------------------------------------------------
// Latent layer
// ---------------------------------------------------------------------------

#[test]
fn update_phi_draws_from_the_prior_when_counts_vanish() {
    // Zero clade totals mean g = 0 and κ = 0: the conditional is N(μ_i, Σ).
    let q = 3;
    let sigma = dmatrix![1.0, 0.3, 0.1; 0.3, 0.8, -0.2; 0.1, -0.2, 0.6];
    let mut params = random_params(q, 2, 1, 491);
    params.sigma = sigma.clone();
    let design = grid_design(2, 2);
    let mut state = random_state(&params, 2, 492);
    state.g.fill(0.0);
    let nodes = NodeCounts {
        n_total: DMatrix::zeros(2, q),
        y_left: DMatrix::zeros(2, q),
        sample_ids: vec!["s0".into(), "s1".into()],
        tree_hash: String::new(),
    };
    let i = 1;
    let x_i = design.x.row(i).transpose();
    let mut mu = &params.b[0] * &x_i;
    mu += (&params.b[1] * &x_i) * state.gamma[(i, 0)];

    let mut rng = RngStream::new(493, 0).rng();
    let reps = 20_000usize;
    let mut mean = DVector::zeros(q);
    let mut second = DMatrix::zeros(q, q);
    for _ in 0..reps {
        let draw = update_phi(i, &state, &params, &design, &nodes, &mut rng).unwrap();
        mean += &draw;
        second.ger(1.0, &draw, &draw, 1.0);
    }
    mean /= reps as f64;
    second /= reps as f64;
    let cov = &second - &mean * mean.transpose();
    for k in 0..q {
        assert!(
            (mean[k] - mu[k]).abs() < 0.05,
            "mean[{k}] {} vs {}",
            mean[k],
            mu[k]
        );
    }
    for a in 0..q {
        for b in 0..q {
            assert!(
                (cov[(a, b)] - sigma[(a, b)]).abs() < 0.06,
                "cov[({a},{b})] {} vs {}",
                cov[(a, b)],
                sigma[(a, b)]
            );
        }
    }
}

#[test]
fn update_phi_concentrates_under_balanced_heavy_counts() {
    // y = N/2 at N ~ 10^6 collapses the conditional of φ onto 0.
    let sigma = dmatrix![1.0, 0.3; 0.3, 0.8];
    let params = ModelParams {
        sigma,
        b: vec![DMatrix::zeros(2, 1)],
        tau: dmatrix![0.0, 1.0; 1.0, 0.0],
        lambda: 1.0,
        nu: dvector![1.0],
        omega: dvector![1.0],
        hyper: Hyper::default(),
    };
    let design = grid_design(1, 1);
    let mut state = LatentState {
        phi: DMatrix::zeros(1, 2),
        gamma: DMatrix::zeros(1, 0),
        g: DMatrix::zeros(1, 2),
    };
    let nodes = NodeCounts {
        n_total: DMatrix::from_row_slice(1, 2, &[1_000_000, 400_000]),
        y_left: DMatrix::from_row_slice(1, 2, &[500_000, 200_000]),
        sample_ids: vec!["s0".into()],
        tree_hash: String::new(),
    };
    let mut rng = RngStream::new(494, 0).rng();
    let g = update_pg(0, &state, &nodes, &mut rng).unwrap();
    state.g.row_mut(0).copy_from(&g.transpose());
    for _ in 0..20 {
        let draw = update_phi(0, &state, &params, &design, &nodes, &mut rng).unwrap();
        assert!(draw.amax() < 0.05, "φ strayed from 0: {draw}");
    }
}

#[test]
fn polya_gamma_identity_reproduces_the_binomial_likelihood() {
    // σ(φ)^y (1-σ(φ))^{N-y} = 2^{-N} e^{(y-N/2)φ} E_{g~PG(N,0)}[e^{-gφ²/2}].
    let n_trials = 7u64;
    let y = 5.0;
    let mut rng = RngStream::new(501, 0).rng();
    let reps = 60_000usize;
    let mut gs = Vec::with_capacity(reps);
    for _ in 0..reps {
        gs.push(draw_polya_gamma(n_trials, 0.0, &mut rng).unwrap());
    }
    for &phi in &[0.6, 1.4, 2.5] {
        let vals: Vec<f64> = gs.iter().map(|g| (-0.5 * g * phi * phi).exp()).collect();
        let mc = vals.iter().sum::<f64>() / reps as f64;
        let var =
            vals.iter().map(|v| (v - mc) * (v - mc)).sum::<f64>() / (reps - 1) as f64;
        let se = (var / reps as f64).sqrt();
        let p = 1.0 / (1.0 + (-phi).exp());
        let lhs = p.powf(y) * (1.0 - p).powf(n_trials as f64 - y);
        let scale = 0.5f64.powi(n_trials as i32) * ((y - 0.5 * n_trials as f64) * phi).exp();
        assert!(
            (lhs - scale * mc).abs() <= 6.0 * scale * se + 1e-12,
            "identity off at phi {phi}: lhs {lhs}, rhs {}",
            scale * mc
        );
    }
}

#[test]
fn update_pg_matches_empty_clades_and_the_mean_formula() {
    let state = LatentState {
        phi: DMatrix::from_row_slice(1, 3, &[0.3, -1.1, 2.0]),
        gamma: DMatrix::zeros(1, 0),
        g: DMatrix::zeros(1, 3),
    };
    let nodes = NodeCounts {
        n_total: DMatrix::from_row_slice(1, 3, &[12, 0, 30]),
        y_left: DMatrix::zeros(1, 3),
        sample_ids: vec!["s0".into()],
        tree_hash: String::new(),
    };
    let mut rng = RngStream::new(502, 0).rng();
    let reps = 8000usize;
    let mut acc = 0.0;
    for _ in 0..reps {
        let g = update_pg(0, &state, &nodes, &mut rng).unwrap();
        assert_eq!(g[1], 0.0);
        assert!(g[0] > 0.0 && g[2] > 0.0);
        acc += g[2];
    }
    // E[PG(N, φ)] = (N/2φ) tanh(φ/2)
    let expect = 30.0 / (2.0 * 2.0) * 1.0f64.tanh();
    assert_relative_eq!(acc / reps as f64, expect, max_relative = 0.02);
}

// ---------------------------------------------------------------------------
// Chain driver
// ---------------------------------------------------------------------------

#[test]
fn fit_config_defaults_and_validation() {
    let cfg = FitConfig::new(3);
    assert_eq!(
        (cfg.iterations, cfg.burn_in, cfg.thin, cfg.rank),
        (10_000, 5_000, 5, 3)
    );
    assert_eq!(cfg.hyper, Hyper::default());
    assert!(matches!(cfg.mode, FitMode::Full));
    assert!(cfg.validate().is_ok());

    let mut bad = FitConfig::new(1);
    bad.burn_in = bad.iterations;
    assert!(matches!(bad.validate(), Err(GibbsError::Config(_))));
    let mut bad = FitConfig::new(1);
    bad.thin = 0;
    assert!(matches!(bad.validate(), Err(GibbsError::Config(_))));
    let mut bad = FitConfig::new(1);
    bad.n_chains = 0;
    assert!(matches!(bad.validate(), Err(GibbsError::Config(_))));
    let mut bad = FitConfig::new(1);
    bad.mode = FitMode::FixedPhi { pseudocount: 0.0 };
    assert!(matches!(bad.validate(), Err(GibbsError::Config(_))));

    let hash = FitConfig::new(1).config_hash();
    assert_eq!(hash.len(), 64);
    assert!(hash.chars().all(|c| c.is_ascii_hexdigit()));
    assert_eq!(hash, FitConfig::new(1).config_hash());
    let mut other = FitConfig::new(1);
    other.seed = 99;
    assert_ne!(hash, other.config_hash());
}

#[test]
fn run_chain_rejects_sample_count_mismatch() {
    let tree = caterpillar(3);
    let nodes = synth_counts(&tree, &DMatrix::zeros(5, 3), 511);
    let design = grid_design(4, 2);
    let mut cfg = FitConfig::new(1);
    cfg.iterations = 10;
    cfg.burn_in = 2;
    let err = run_chain(&cfg, &nodes, &design, &tree, 0).unwrap_err();
    assert!(matches!(err, GibbsError::Dimension(_)));
}

#[test]
fn nan_guard_reports_the_failing_sweep() {
    let mut params = random_params(2, 1, 1, 521);
    let state = random_state(&params, 3, 522);
    params.sigma[(0, 0)] = f64::NAN;
    let err = check_finite(&params, &state, 7).unwrap_err();
    assert!(err.to_string().contains("sweep 7"));
}

#[test]
fn identical_seeds_reproduce_chains_bit_for_bit() {
    let tree = caterpillar(3);
    let design = grid_design(5, 2);
    let phi_gen = DMatrix::from_fn(5, 3, |i, k| 0.3 * (i as f64 - 2.0) - 0.1 * k as f64);
    let nodes = synth_counts(&tree, &phi_gen, 531);
    let mut cfg = FitConfig::new(1);
    cfg.iterations = 120;
    cfg.burn_in = 40;
    cfg.thin = 2;
    cfg.seed = 8;
    let a = run_chain(&cfg, &nodes, &design, &tree, 0).unwrap();
    let b = run_chain(&cfg, &nodes, &design, &tree, 0).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.phi_mean, b.phi_mean);
    assert_eq!(a.phi_sd, b.phi_sd);
    assert_eq!(a.loglik_latent, b.loglik_latent);
    assert_eq!(a.loglik_binomial, b.loglik_binomial);
    assert_eq!(a.config_hash, b.config_hash);
    assert_eq!(a.n_draws(), (120 - 40) / 2);
    assert_eq!(a.config_hash, cfg.config_hash());
    assert!(!a.code_version.is_empty());
    assert!(a.phi_sd.iter().all(|&v| v >= 0.0));

    let c = run_chain(&cfg, &nodes, &design, &tree, 1).unwrap();
    assert_ne!(a.params, c.params);
    assert_eq!(c.stream, 1);
}

#[test]
fn oracle_mode_ignores_the_count_data() {
    // n is kept well above the free mean parameters (B_0, B_1, γ) so the
    // fixed-φ residual covariance stays away from 0, and φ* is nonlinear in
    // the design for the same reason.
    let tree = caterpillar(3);
    let design = grid_design(10, 2);
    let phi_true = DMatrix::from_fn(10, 3, |i, k| {
        0.2 * i as f64 - 0.3 * k as f64 + 0.5 * (2.1 * i as f64 + 1.3 * k as f64).sin()
    });
    let nodes_a = synth_counts(&tree, &DMatrix::zeros(10, 3), 541);
    let nodes_b = synth_counts(&tree, &phi_true, 542);
    let mut cfg = FitConfig::new(1);
    cfg.iterations = 200;
    cfg.burn_in = 50;
    cfg.thin = 5;
    cfg.mode = FitMode::Oracle {
        phi_true: phi_true.clone(),
    };
    let a = run_chain(&cfg, &nodes_a, &design, &tree, 0).unwrap();
    let b = run_chain(&cfg, &nodes_b, &design, &tree, 0).unwrap();
    assert_eq!(a.params, b.params);
    assert!((&a.phi_mean - &phi_true).amax() < 1e-12);
    assert!(a.phi_sd.amax() < 1e-7);
    assert_eq!(a.loglik_binomial.nrows(), 0);
}

#[test]
fn fixed_phi_mode_freezes_the_log_odds_transform() {
    let tree = caterpillar(3);
    let design = grid_design(5, 2);
    let nodes = synth_counts(&tree, &DMatrix::zeros(5, 3), 551);
    let mut cfg = FitConfig::new(1);
    cfg.iterations = 160;
    cfg.burn_in = 60;
    cfg.thin = 2;
    cfg.mode = FitMode::FixedPhi { pseudocount: 0.5 };
    let draws = run_chain(&cfg, &nodes, &design, &tree, 0).unwrap();
    let expected = node_log_odds(&nodes, 0.5).unwrap();
    assert!((&draws.phi_mean - &expected).amax() < 1e-12);
    assert!(draws.phi_sd.amax() < 1e-7);
    // The parameter blocks still move, and the binomial log-likelihood of
    // the frozen transform is recorded for WAIC.
    assert_ne!(
        draws.params.first().unwrap().sigma,
        draws.params.last().unwrap().sigma
    );
    assert_eq!(draws.loglik_binomial.nrows(), draws.n_draws());
}

#[test]
fn no_covariates_mode_reduces_design_and_rank() {
    let tree = caterpillar(3);
    let design = grid_design(5, 3);
    let nodes = synth_counts(&tree, &DMatrix::zeros(5, 3), 561);
    let mut cfg = FitConfig::new(2);
    cfg.iterations = 120;
    cfg.burn_in = 40;
    cfg.thin = 2;
    cfg.mode = FitMode::NoCovariates { pseudocount: 0.5 };
    let draws = run_chain(&cfg, &nodes, &design, &tree, 0).unwrap();
    assert_eq!(draws.config.rank, 0);
    assert_eq!(draws.params[0].rank(), 0);
    assert_eq!(draws.params[0].d(), 1);
    assert_eq!(draws.gamma_mean.ncols(), 0);
    assert_eq!(draws.config_hash, draws.config.config_hash());
}

#[test]
fn run_chains_assigns_independent_streams() {
    let tree = caterpillar(2);
    let design = grid_design(4, 1);
    let nodes = synth_counts(&tree, &DMatrix::zeros(4, 2), 571);
    let mut cfg = FitConfig::new(0);
    cfg.iterations = 60;
    cfg.burn_in = 20;
    cfg.thin = 2;
    cfg.n_chains = 2;
    let chains = run_chains(&cfg, &nodes, &design, &tree).unwrap();
    assert_eq!(chains.len(), 2);
    assert_eq!((chains[0].stream, chains[1].stream), (0, 1));
    assert_ne!(chains[0].params, chains[1].params);
}

#[test]
fn posterior_draw_store_round_trips() {
    let tree = caterpillar(3);
    let design = grid_design(5, 2);
    let nodes = synth_counts(&tree, &DMatrix::zeros(5, 3), 581);
    let dir = tempfile::tempdir().unwrap();

    let mut cfg = FitConfig::new(1);
    cfg.iterations = 80;
    cfg.burn_in = 30;
    cfg.thin = 2;
    let full = run_chain(&cfg, &nodes, &design, &tree, 0).unwrap();
    let full_dir = dir.path().join("full");
    save_posterior_draws(&full, &full_dir).unwrap();
    let loaded = load_posterior_draws(&full_dir).unwrap();
    assert_eq!(loaded.params, full.params);
    assert_eq!(loaded.phi_mean, full.phi_mean);
    assert_eq!(loaded.phi_sd, full.phi_sd);
    assert_eq!(loaded.gamma_mean, full.gamma_mean);
    assert_eq!(loaded.gamma_sd, full.gamma_sd);
    assert_eq!(loaded.loglik_latent, full.loglik_latent);
    assert_eq!(loaded.loglik_binomial, full.loglik_binomial);
    assert_eq!(loaded.config_hash, full.config_hash);
    assert_eq!(loaded.stream, full.stream);
    assert_eq!(loaded.code_version, full.code_version);
    assert_eq!(loaded.warnings, full.warnings);

    // Rank 0: the γ summaries have no columns and no files.
    let mut cfg0 = FitConfig::new(0);
    cfg0.iterations = 60;
    cfg0.burn_in = 20;
    cfg0.thin = 2;
    cfg0.mode = FitMode::NoCovariates { pseudocount: 0.5 };
    let flat = run_chain(&cfg0, &nodes, &design, &tree, 0).unwrap();
    let flat_dir = dir.path().join("flat");
    save_posterior_draws(&flat, &flat_dir).unwrap();
    assert!(!flat_dir.join("gamma_mean.csv").exists());
    let loaded0 = load_posterior_draws(&flat_dir).unwrap();
    assert_eq!(loaded0.gamma_mean.ncols(), 0);
    assert_eq!(loaded0.params, flat.params);

    // Oracle: no binomial log-likelihood, no file.  The fixture keeps the
    // fixed-φ residual covariance nondegenerate at rank 1: n is well above
    // the free mean parameters and the φ* columns use distinct frequencies
    // so the matrix has full column rank.
    let design_o = grid_design(12, 2);
    let phi_o = DMatrix::from_fn(12, 3, |i, k| {
        ((0.8 + 0.5 * k as f64) * i as f64 + k as f64).sin()
    });
    let nodes_o = synth_counts(&tree, &DMatrix::zeros(12, 3), 582);
    let mut cfg_o = FitConfig::new(1);
    cfg_o.iterations = 60;
    cfg_o.burn_in = 20;
    cfg_o.thin = 2;
    cfg_o.mode = FitMode::Oracle { phi_true: phi_o };
    let orc = run_chain(&cfg_o, &nodes_o, &design_o, &tree, 0).unwrap();
    let orc_dir = dir.path().join("oracle");
    save_posterior_draws(&orc, &orc_dir).unwrap();
    assert!(!orc_dir.join("loglik_binomial.csv").exists());
    let loaded_o = load_posterior_draws(&orc_dir).unwrap();
    assert_eq!(loaded_o.loglik_binomial.nrows(), 0);
}

#[test]
fn geweke_joint_distribution_smoke() {
    // Reduced-size version of the calibration run: the same four statistics
    // at the same 1% KS level, with fewer draws per side.
    let cfg = geweke::GewekeConfig {
        samples: 3_000,
        thin: 20,
        burn_in: 400,
        seed: 11,
        ..geweke::GewekeConfig::default()
    };
    let report = geweke::run_geweke(&cfg).expect("geweke run");
    assert_eq!(report.stats.len(), 4);
    for s in &report.stats {
        assert!(s.ks.is_finite());
    }
    assert!(
        report.pass,
        "KS distances {:?} exceeded threshold {}",
        report
            .stats
            .iter()
            .map(|s| (s.name.clone(), s.ks))
            .collect::<Vec<_>>(),
        report.threshold
    );
}
