//! On-disk layout shared by the subcommands: numeric CSV matrices, the
//! dataset directory produced by `simulate`, and the `meta.json` provenance
//! stamp embedded in every output directory.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use trecor::model::Design;
use trecor::phylo::{self, NodeCounts, PhyloTree};
use trecor::simgen::SimDataset;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let mut hex = String::with_capacity(64);
    for byte in hasher.finalize() {
        use std::fmt::Write;
        let _ = write!(hex, "{byte:02x}");
    }
    hex
}

/// Hash of the invocation's inputs: a serializable view of the arguments
/// (output paths excluded, so reruns into a different directory hash alike)
/// plus the raw bytes of a referenced config file, when one exists.
pub fn args_hash<T: Serialize>(view: &T, config_file: Option<&Path>) -> String {
    let mut buf = serde_json::to_vec(view).expect("argument view serializes");
    if let Some(path) = config_file {
        if let Ok(bytes) = fs::read(path) {
            buf.extend_from_slice(&bytes);
        }
    }
    sha256_hex(&buf)
}

/// Provenance stamp written to every output directory. Deliberately free of
/// timestamps: a same-seed rerun must produce byte-identical artifacts.
#[derive(Debug, Serialize, Deserialize)]
pub struct Meta {
    pub command: String,
    pub code_version: String,
    pub seed: u64,
    pub config_hash: String,
    pub input_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub details: Option<serde_json::Value>,
}

pub fn write_meta(dir: &Path, meta: &Meta) -> Result<()> {
    fs::create_dir_all(dir)?;
    let body = serde_json::to_string_pretty(meta)?;
    fs::write(dir.join("meta.json"), body + "\n")
        .with_context(|| format!("writing {}", dir.join("meta.json").display()))?;
    Ok(())
}

/// Plain numeric CSV, one row per matrix row, `{:?}` (shortest round-trip)
/// floats, optional header row.
pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>, header: Option<&[String]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = String::new();
    if let Some(names) = header {
        out.push_str(&names.join(","));
        out.push('\n');
    }
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                out.push(',');
            }
            use std::fmt::Write;
            let _ = write!(out, "{:?}", m[(i, j)]);
        }
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Read a numeric CSV; a first line containing any alphabetic character is
/// taken as a header.
pub fn read_matrix_csv(path: &Path) -> Result<(Option<Vec<String>>, DMatrix<f64>)> {
    let raw =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = raw.lines().peekable();
    let header = match lines.peek() {
        Some(first) if first.chars().any(|c| c.is_ascii_alphabetic()) => {
            let names: Vec<String> = first.split(',').map(|s| s.trim().to_string()).collect();
            lines.next();
            Some(names)
        }
        _ => None,
    };
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<f64>()
                    .map_err(|_| anyhow!("{}: bad number {tok:?} on line {}", path.display(), idx + 1))
            })
            .collect::<Result<_>>()?;
        if let Some(prev) = rows.first() {
            if row.len() != prev.len() {
                bail!("{}: ragged row on line {}", path.display(), idx + 1);
            }
        }
        rows.push(row);
    }
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if let Some(names) = &header {
        if ncols > 0 && names.len() != ncols {
            bail!("{}: header has {} names but rows have {} columns", path.display(), names.len(), ncols);
        }
    }
    let m = DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]);
    Ok((header, m))
}

/// What `fit`, `select-rank` and `network` consume: the dataset directory
/// written by `simulate` (or assembled by hand with the same layout).
pub struct Dataset {
    pub nodes: NodeCounts,
    pub design: Design,
    pub tree: PhyloTree,
}

pub fn save_dataset(data: &SimDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("tree.nwk"), phylo::serialize_newick(&data.tree) + "\n")?;
    phylo::save_node_counts(&data.nodes, dir, "nodes")?;
    let leaves = phylo::node_to_leaf_counts(&data.tree, &data.nodes)?;
    phylo::save_counts_file(&leaves, &dir.join("leaf_counts.csv"))?;
    write_matrix_csv(
        &dir.join("design.csv"),
        &data.design.x,
        Some(&data.design.covariate_names),
    )?;

    let truth = dir.join("truth");
    write_matrix_csv(&truth.join("sigma.csv"), &data.truth.sigma, None)?;
    write_matrix_csv(&truth.join("phi.csv"), &data.truth.phi, None)?;
    if data.truth.gamma.ncols() > 0 {
        write_matrix_csv(&truth.join("gamma.csv"), &data.truth.gamma, None)?;
    }
    for (r, b) in data.truth.b.iter().enumerate() {
        write_matrix_csv(&truth.join(format!("b{r}.csv")), b, None)?;
    }
    let mut edges = String::from("i,j\n");
    for &(i, j) in &data.truth.edges {
        use std::fmt::Write;
        let _ = writeln!(edges, "{i},{j}");
    }
    fs::write(truth.join("edges.csv"), edges)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let tree_src = fs::read_to_string(dir.join("tree.nwk"))
        .with_context(|| format!("reading {}", dir.join("tree.nwk").display()))?;
    let tree = phylo::parse_newick(tree_src.trim())?;
    let nodes = phylo::load_node_counts(dir, "nodes")?;
    if nodes.tree_hash != phylo::tree_hash(&tree) {
        bail!("node counts in {} were built against a different tree", dir.display());
    }
    let (header, x) = read_matrix_csv(&dir.join("design.csv"))?;
    let names =
        header.ok_or_else(|| anyhow!("design.csv needs a header row of covariate names"))?;
    let has_intercept = names.first().is_some_and(|s| s == "intercept");
    let design = Design::new(x, names, has_intercept)?;
    if design.x.nrows() != nodes.n_samples() {
        bail!(
            "design has {} rows but the counts have {} samples",
            design.x.nrows(),
            nodes.n_samples()
        );
    }
    Ok(Dataset { nodes, design, tree })
}
