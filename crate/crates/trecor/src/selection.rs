//! WAIC computation and rank selection.
//!
//! The pointwise log-likelihood matrix is produced by the sampler at either
//! the latent Gaussian layer (scores marginalized in closed form, the
//! default: the binomial layer is identical across ranks, so the layer the
//! rank actually affects should drive the comparison) or the binomial layer.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::gibbs::{run_chain, FitConfig, GibbsError, PosteriorDraws};
use crate::model::Design;
use crate::phylo::{NodeCounts, PhyloTree};

#[derive(Debug, thiserror::Error)]
pub enum SelectionError {
    #[error("waic needs at least 2 retained draws, got {0}")]
    TooFewDraws(usize),
    #[error("invalid selection input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Gibbs(#[from] GibbsError),
}

/// Which pointwise likelihood enters WAIC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WaicLayer {
    Latent,
    Binomial,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Waic {
    pub waic: f64,
    pub lppd: f64,
    pub p_waic: f64,
    /// Per-sample contribution `-2 (lppd_i - p_i)`; sums to `waic`.
    pub pointwise: Vec<f64>,
}

/// WAIC from a draws-by-samples log-likelihood matrix.
///
/// `lppd_i = log mean_s exp(l_si)` via log-sum-exp; `p_i` is the variance of
/// `l_si` over draws with the population (1/S) normalizer, which makes the
/// result invariant to exact duplication of the draw set; `waic` is
/// `-2 (lppd - p_waic)`.
pub fn waic_from_loglik(ll: &DMatrix<f64>) -> Result<Waic, SelectionError> {
    let s = ll.nrows();
    if s < 2 {
        return Err(SelectionError::TooFewDraws(s));
    }
    let n = ll.ncols();
    let mut lppd = 0.0;
    let mut p_waic = 0.0;
    let mut pointwise = Vec::with_capacity(n);
    for i in 0..n {
        let col = ll.column(i);
        let m = col.max();
        let lse = m + col.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let lppd_i = lse - (s as f64).ln();
        let mean = col.mean();
        let p_i = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s as f64;
        lppd += lppd_i;
        p_waic += p_i;
        pointwise.push(-2.0 * (lppd_i - p_i));
    }
    Ok(Waic {
        waic: -2.0 * (lppd - p_waic),
        lppd,
        p_waic,
        pointwise,
    })
}

/// WAIC of a finished fit at the requested likelihood layer.
pub fn waic(draws: &PosteriorDraws, layer: WaicLayer) -> Result<Waic, SelectionError> {
    let ll = match layer {
        WaicLayer::Latent => &draws.loglik_latent,
        WaicLayer::Binomial => {
            if draws.loglik_binomial.nrows() == 0 {
                return Err(SelectionError::Invalid(
                    "fit carries no binomial log-likelihood (oracle mode)".into(),
                ));
            }
            &draws.loglik_binomial
        }
    };
    waic_from_loglik(ll)
}

/// How the winning rank is read off the WAIC curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RankRule {
    /// Smallest WAIC; ties toward smaller rank.
    Min,
    /// Largest positive curvature (second difference) of the WAIC-vs-R
    /// polyline; interior points only, falling back to `Min` when fewer
    /// than three candidates are available. A heuristic, kept for parity
    /// with elbow-style reading of the curve.
    Elbow,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankSelection {
    pub chosen: usize,
    /// `(rank, waic)` per candidate, in the order given.
    pub curve: Vec<(usize, Waic)>,
}

fn apply_rule(curve: &[(usize, Waic)], rule: RankRule) -> usize {
    let min_choice = || {
        curve
            .iter()
            .min_by(|a, b| {
                a.1.waic
                    .partial_cmp(&b.1.waic)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.0.cmp(&b.0))
            })
            .expect("curve is nonempty")
            .0
    };
    match rule {
        RankRule::Min => min_choice(),
        RankRule::Elbow => {
            if curve.len() < 3 {
                return min_choice();
            }
            let mut sorted: Vec<&(usize, Waic)> = curve.iter().collect();
            sorted.sort_by_key(|c| c.0);
            let mut best = (f64::NEG_INFINITY, sorted[1].0);
            for w in sorted.windows(3) {
                let curv = w[0].1.waic - 2.0 * w[1].1.waic + w[2].1.waic;
                if curv > best.0 {
                    best = (curv, w[1].0);
                }
            }
            best.1
        }
    }
}

/// Fit every candidate rank on the same data and pick one by `rule`.
///
/// Candidates run in parallel, one chain each, with the seed offset by the
/// rank so the fits are independent but reproducible.
pub fn select_rank(
    candidates: &[usize],
    config: &FitConfig,
    nodes: &NodeCounts,
    design: &Design,
    tree: &PhyloTree,
    rule: RankRule,
    layer: WaicLayer,
) -> Result<RankSelection, SelectionError> {
    if candidates.is_empty() {
        return Err(SelectionError::Invalid("no candidate ranks".into()));
    }
    let curve: Vec<(usize, Waic)> = candidates
        .par_iter()
        .map(|&r| {
            let mut cfg = config.clone();
            cfg.rank = r;
            cfg.seed = config.seed.wrapping_add(r as u64);
            let draws = run_chain(&cfg, nodes, design, tree, 0)?;
            Ok((r, waic(&draws, layer)?))
        })
        .collect::<Result<_, SelectionError>>()?;
    Ok(RankSelection {
        chosen: apply_rule(&curve, rule),
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn constant_loglik_has_zero_penalty() {
        let ll = dmatrix![-1.5, -2.5; -1.5, -2.5; -1.5, -2.5];
        let w = waic_from_loglik(&ll).unwrap();
        assert!(w.p_waic.abs() < 1e-14);
        assert!((w.waic - (-2.0 * (-4.0))).abs() < 1e-12);
    }

    #[test]
    fn hand_case_two_draws() {
        let ll = dmatrix![-1.0, -1.0; -2.0, -4.0];
        let w = waic_from_loglik(&ll).unwrap();
        assert!((w.lppd - -3.0244453220279257).abs() < 1e-12);
        assert!((w.p_waic - 2.5).abs() < 1e-12);
        assert!((w.waic - 11.048890644055852).abs() < 1e-12);
        assert!((w.pointwise[0] - 3.2597709860834447).abs() < 1e-12);
        assert!((w.pointwise[1] - 7.789119657972407).abs() < 1e-12);
        assert!((w.pointwise.iter().sum::<f64>() - w.waic).abs() < 1e-12);
    }

    #[test]
    fn duplicating_the_draw_set_leaves_waic_unchanged() {
        let ll = dmatrix![-1.0, -1.0; -2.0, -4.0; -0.5, -3.0];
        let mut doubled = DMatrix::zeros(6, 2);
        doubled.view_mut((0, 0), (3, 2)).copy_from(&ll);
        doubled.view_mut((3, 0), (3, 2)).copy_from(&ll);
        let a = waic_from_loglik(&ll).unwrap();
        let b = waic_from_loglik(&doubled).unwrap();
        assert!((a.waic - b.waic).abs() < 1e-12);
        assert!((a.lppd - b.lppd).abs() < 1e-12);
        assert!((a.p_waic - b.p_waic).abs() < 1e-12);
    }

    #[test]
    fn draw_order_is_irrelevant() {
        let ll = dmatrix![-1.0, -1.0; -2.0, -4.0; -0.5, -3.0];
        let perm = dmatrix![-0.5, -3.0; -1.0, -1.0; -2.0, -4.0];
        let a = waic_from_loglik(&ll).unwrap();
        let b = waic_from_loglik(&perm).unwrap();
        assert!((a.waic - b.waic).abs() < 1e-14);
    }

    #[test]
    fn log_sum_exp_matches_naive_for_moderate_values() {
        let ll = dmatrix![-1.2, -0.3; -2.7, -1.9; -0.4, -2.2];
        let w = waic_from_loglik(&ll).unwrap();
        let naive: f64 = (0..2)
            .map(|i| {
                let c = ll.column(i);
                (c.iter().map(|v| v.exp()).sum::<f64>() / 3.0).ln()
            })
            .sum();
        assert!((w.lppd - naive).abs() < 1e-10);
    }

    #[test]
    fn too_few_draws_is_an_error() {
        let ll = dmatrix![-1.0, -2.0];
        assert!(matches!(
            waic_from_loglik(&ll),
            Err(SelectionError::TooFewDraws(1))
        ));
    }

    fn waic_of(w: f64) -> Waic {
        Waic {
            waic: w,
            lppd: 0.0,
            p_waic: 0.0,
            pointwise: vec![],
        }
    }

    #[test]
    fn min_rule_breaks_ties_toward_smaller_rank() {
        let curve = vec![(3, waic_of(10.0)), (1, waic_of(10.0)), (2, waic_of(12.0))];
        assert_eq!(apply_rule(&curve, RankRule::Min), 1);
    }

    #[test]
    fn single_candidate_is_returned() {
        let curve = vec![(4, waic_of(42.0))];
        assert_eq!(apply_rule(&curve, RankRule::Min), 4);
        assert_eq!(apply_rule(&curve, RankRule::Elbow), 4);
    }

    #[test]
    fn elbow_picks_largest_curvature() {
        // WAIC 30, 10, 8, 7: biggest kink at rank 2.
        let curve = vec![
            (1, waic_of(30.0)),
            (2, waic_of(10.0)),
            (3, waic_of(8.0)),
            (4, waic_of(7.0)),
        ];
        assert_eq!(apply_rule(&curve, RankRule::Elbow), 2);
    }
}
