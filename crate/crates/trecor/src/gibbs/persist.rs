//! Directory layout for saved draws.
//!
//! A draw set is a directory containing `manifest.json` (dimensions,
//! configuration, hashes), `draws.jsonl` (one parameter state per line, so
//! readers can stream without holding every draw), and plain CSV matrices
//! for the `φ`/`γ` summaries and the per-draw log-likelihoods.  Matrices
//! with zero columns (for example `γ` summaries of a rank-0 fit) are
//! reconstructed from the manifest instead of being written.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::model::ModelParams;

use super::{FitConfig, GibbsError, PosteriorDraws};

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    code_version: String,
    config: FitConfig,
    config_hash: String,
    stream: u64,
    n_draws: usize,
    n_samples: usize,
    q: usize,
    d: usize,
    rank: usize,
    has_binomial_loglik: bool,
    warnings: Vec<String>,
}

fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<(), GibbsError> {
    let mut out = BufWriter::new(File::create(path)?);
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:?}", m[(i, j)])).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

fn read_matrix_csv(path: &Path, nrows: usize, ncols: usize) -> Result<DMatrix<f64>, GibbsError> {
    let reader = BufReader::new(File::open(path)?);
    let mut m = DMatrix::zeros(nrows, ncols);
    let mut i = 0;
    for line in reader.lines() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        for (j, field) in line.split(',').enumerate() {
            if i >= nrows || j >= ncols {
                return Err(GibbsError::Config(format!(
                    "matrix file {} exceeds manifest shape {}x{}",
                    path.display(),
                    nrows,
                    ncols
                )));
            }
            m[(i, j)] = field.trim().parse::<f64>().map_err(|e| {
                GibbsError::Config(format!("bad float in {}: {e}", path.display()))
            })?;
        }
        i += 1;
    }
    if i != nrows {
        return Err(GibbsError::Config(format!(
            "matrix file {} has {} rows, manifest says {}",
            path.display(),
            i,
            nrows
        )));
    }
    Ok(m)
}

/// Write a draw set under `dir`, creating the directory if needed.
pub fn save_posterior_draws(draws: &PosteriorDraws, dir: &Path) -> Result<(), GibbsError> {
    fs::create_dir_all(dir)?;
    let (n, q) = draws.phi_mean.shape();
    let d = draws.params.first().map_or(0, |p| p.d());
    let manifest = Manifest {
        format_version: 1,
        code_version: draws.code_version.clone(),
        config: draws.config.clone(),
        config_hash: draws.config_hash.clone(),
        stream: draws.stream,
        n_draws: draws.params.len(),
        n_samples: n,
        q,
        d,
        rank: draws.config.rank,
        has_binomial_loglik: draws.loglik_binomial.nrows() > 0,
        warnings: draws.warnings.clone(),
    };
    let manifest_file = File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(manifest_file), &manifest)?;

    let mut jl = BufWriter::new(File::create(dir.join("draws.jsonl"))?);
    for p in &draws.params {
        serde_json::to_writer(&mut jl, p)?;
        jl.write_all(b"\n")?;
    }
    jl.flush()?;

    write_matrix_csv(&dir.join("phi_mean.csv"), &draws.phi_mean)?;
    write_matrix_csv(&dir.join("phi_sd.csv"), &draws.phi_sd)?;
    if draws.gamma_mean.ncols() > 0 {
        write_matrix_csv(&dir.join("gamma_mean.csv"), &draws.gamma_mean)?;
        write_matrix_csv(&dir.join("gamma_sd.csv"), &draws.gamma_sd)?;
    }
    write_matrix_csv(&dir.join("loglik_latent.csv"), &draws.loglik_latent)?;
    if manifest.has_binomial_loglik {
        write_matrix_csv(&dir.join("loglik_binomial.csv"), &draws.loglik_binomial)?;
    }
    Ok(())
}

/// Read a draw set written by [`save_posterior_draws`].
pub fn load_posterior_draws(dir: &Path) -> Result<PosteriorDraws, GibbsError> {
    let manifest_file = File::open(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_reader(BufReader::new(manifest_file))?;
    if manifest.format_version != 1 {
        return Err(GibbsError::Config(format!(
            "unsupported draw store format {}",
            manifest.format_version
        )));
    }
    let mut params: Vec<ModelParams> = Vec::with_capacity(manifest.n_draws);
    let reader = BufReader::new(File::open(dir.join("draws.jsonl"))?);
    for line in reader.lines() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        params.push(serde_json::from_str(&line)?);
    }
    if params.len() != manifest.n_draws {
        return Err(GibbsError::Config(format!(
            "draw store has {} draws, manifest says {}",
            params.len(),
            manifest.n_draws
        )));
    }
    let (n, q, rank) = (manifest.n_samples, manifest.q, manifest.rank);
    let gamma_mean = if rank > 0 {
        read_matrix_csv(&dir.join("gamma_mean.csv"), n, rank)?
    } else {
        DMatrix::zeros(n, 0)
    };
    let gamma_sd = if rank > 0 {
        read_matrix_csv(&dir.join("gamma_sd.csv"), n, rank)?
    } else {
        DMatrix::zeros(n, 0)
    };
    let loglik_binomial = if manifest.has_binomial_loglik {
        read_matrix_csv(&dir.join("loglik_binomial.csv"), manifest.n_draws, n)?
    } else {
        DMatrix::zeros(0, 0)
    };
    Ok(PosteriorDraws {
        params,
        phi_mean: read_matrix_csv(&dir.join("phi_mean.csv"), n, q)?,
        phi_sd: read_matrix_csv(&dir.join("phi_sd.csv"), n, q)?,
        gamma_mean,
        gamma_sd,
        loglik_latent: read_matrix_csv(&dir.join("loglik_latent.csv"), manifest.n_draws, n)?,
        loglik_binomial,
        config: manifest.config,
        stream: manifest.stream,
        config_hash: manifest.config_hash,
        code_version: manifest.code_version,
        warnings: manifest.warnings,
    })
}
