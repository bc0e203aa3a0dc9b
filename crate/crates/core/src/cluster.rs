//! DTW distances between attribution curves and agglomerative clustering.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attrib::{csv_err, AttributionGrid};
use crate::error::{Error, Result};
use crate::num::SymMatrix;

pub const DEFAULT_K: usize = 5;

/// Local cost between two aligned samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalCost {
    /// `|a − b|`
    #[default]
    Absolute,
    /// `(a − b)²`
    Squared,
}

impl LocalCost {
    #[inline]
    fn eval(self, a: f64, b: f64) -> f64 {
        match self {
            LocalCost::Absolute => (a - b).abs(),
            LocalCost::Squared => (a - b) * (a - b),
        }
    }
}

impl FromStr for LocalCost {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "abs" | "l1" | "absolute" => Ok(LocalCost::Absolute),
            "squared" | "l2" => Ok(LocalCost::Squared),
            other => Err(Error::InvalidParameter(format!("unknown DTW cost {other:?}"))),
        }
    }
}

/// Classic DTW: steps (i−1, j), (i, j−1), (i−1, j−1), total cost without
/// path-length normalization. `band` is an optional Sakoe–Chiba radius.
pub fn dtw(a: &[f64], b: &[f64], band: Option<usize>) -> Result<f64> {
    dtw_with_cost(a, b, band, LocalCost::Absolute)
}

pub fn dtw_with_cost(a: &[f64], b: &[f64], band: Option<usize>, cost: LocalCost) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySequence);
    }
    let (m, n) = (a.len(), b.len());
    let radius = match band {
        Some(r) => {
            let diff = m.abs_diff(n);
            if r < diff {
                return Err(Error::BandTooNarrow { band: r, diff });
            }
            r
        }
        None => m.max(n),
    };
    let mut prev = vec![f64::INFINITY; n];
    let mut curr = vec![f64::INFINITY; n];
    for i in 0..m {
        curr.fill(f64::INFINITY);
        let lo = i.saturating_sub(radius);
        let hi = (i + radius).min(n - 1);
        for j in lo..=hi {
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let up = if i > 0 { prev[j] } else { f64::INFINITY };
                let left = if j > 0 { curr[j - 1] } else { f64::INFINITY };
                let diag = if i > 0 && j > 0 { prev[j - 1] } else { f64::INFINITY };
                up.min(left).min(diag)
            };
            curr[j] = best + cost.eval(a[i], b[j]);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    Ok(prev[n - 1])
}

/// Symmetric pairwise distance matrix with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub labels: Vec<String>,
    pub matrix: SymMatrix,
}

#[derive(Debug, Clone, Copy)]
pub struct DistanceOptions {
    pub band: Option<usize>,
    pub cost: LocalCost,
    pub workers: usize,
}

impl Default for DistanceOptions {
    fn default() -> Self {
        DistanceOptions {
            band: None,
            cost: LocalCost::Absolute,
            workers: 1,
        }
    }
}

/// DTW between every pair of grid rows. Each unordered pair is computed
/// once; the diagonal is exactly zero.
pub fn distance_matrix(grid: &AttributionGrid, opts: &DistanceOptions) -> Result<DistanceMatrix> {
    let n = grid.n_rows();
    if n < 2 {
        return Err(Error::InvalidShape(format!("need at least 2 rows to cluster, got {n}")));
    }
    if opts.workers == 0 {
        return Err(Error::InvalidParameter("workers must be at least 1".into()));
    }
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            grid.complete_row(i)
                .ok_or_else(|| Error::MissingCells(grid.row_ids()[i].clone()))
        })
        .collect::<Result<_>>()?;
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    let dists: Vec<f64> = pool.install(|| {
        pairs
            .par_iter()
            .map(|&(i, j)| dtw_with_cost(&rows[i], &rows[j], opts.band, opts.cost))
            .collect::<Result<_>>()
    })?;
    let mut matrix = SymMatrix::zeros(n);
    for (&(i, j), d) in pairs.iter().zip(dists) {
        matrix.set(i, j, d);
    }
    Ok(DistanceMatrix {
        labels: grid.row_ids().to_vec(),
        matrix,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Linkage {
    Single,
    Complete,
    #[default]
    Average,
}

impl FromStr for Linkage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Linkage::Single),
            "complete" => Ok(Linkage::Complete),
            "average" => Ok(Linkage::Average),
            other => Err(Error::InvalidParameter(format!("unknown linkage {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub height: f64,
    pub id: usize,
}

/// Full merge history. Leaves are nodes `0..n`; the i-th merge creates
/// node `n + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dendrogram {
    leaf_labels: Vec<String>,
    merges: Vec<Merge>,
}

impl Dendrogram {
    pub fn new(leaf_labels: Vec<String>, merges: Vec<Merge>) -> Result<Self> {
        let n = leaf_labels.len();
        if n == 0 || merges.len() != n - 1 {
            return Err(Error::InvalidShape(format!(
                "{n} leaves need {} merges, got {}",
                n.saturating_sub(1),
                merges.len()
            )));
        }
        let mut used = vec![false; 2 * n - 1];
        for (i, m) in merges.iter().enumerate() {
            let id = n + i;
            if m.id != id {
                return Err(Error::InvalidShape(format!(
                    "merge {i} creates node {}, expected {id}",
                    m.id
                )));
            }
            for node in [m.a, m.b] {
                if node >= id || used[node] {
                    return Err(Error::InvalidShape(format!(
                        "node {node} merged twice or before it exists"
                    )));
                }
                used[node] = true;
            }
            if m.a == m.b || !m.height.is_finite() {
                return Err(Error::InvalidShape(format!("merge {i} is malformed")));
            }
        }
        Ok(Dendrogram { leaf_labels, merges })
    }

    pub fn n_leaves(&self) -> usize {
        self.leaf_labels.len()
    }

    pub fn leaf_labels(&self) -> &[String] {
        &self.leaf_labels
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    /// Leaves in left-to-right drawing order (depth-first, `a` before `b`).
    pub fn leaf_order(&self) -> Vec<usize> {
        let n = self.n_leaves();
        let mut out = Vec::with_capacity(n);
        let mut stack = vec![2 * n - 2];
        while let Some(node) = stack.pop() {
            if node < n {
                out.push(node);
            } else {
                let m = &self.merges[node - n];
                stack.push(m.b);
                stack.push(m.a);
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = DendrogramJson {
            leaves: self.leaf_labels.clone(),
            merges: self.merges.iter().map(|m| (m.a, m.b, m.height, m.id)).collect(),
        };
        let mut s = serde_json::to_string_pretty(&doc)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: DendrogramJson = serde_json::from_str(text)?;
        let merges = doc
            .merges
            .into_iter()
            .map(|(a, b, height, id)| Merge { a, b, height, id })
            .collect();
        Dendrogram::new(doc.leaves, merges)
    }
}

#[derive(Serialize, Deserialize)]
struct DendrogramJson {
    leaves: Vec<String>,
    merges: Vec<(usize, usize, f64, usize)>,
}

/// Agglomerative clustering over `d` with `linkage`.
///
/// Average linkage keeps exact sums of cross-cluster distances, so the
/// linkage value is always `Σ d / (|A|·|B|)` over the original entries.
/// Ties go to the lexicographically smallest `(a, b)` node pair.
pub fn agglomerate(d: &SymMatrix, linkage: Linkage, labels: Vec<String>) -> Result<Dendrogram> {
    let n = d.order();
    if n < 2 {
        return Err(Error::InvalidShape(format!("need at least 2 leaves, got {n}")));
    }
    if labels.len() != n {
        return Err(Error::DimMismatch {
            expected: n,
            got: labels.len(),
        });
    }
    for i in 0..n {
        for j in i..n {
            let v = d.get(i, j);
            if !v.is_finite() || (i == j && v != 0.0) || v < 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "invalid distance entry ({i},{j}) = {v}"
                )));
            }
        }
    }
    let total = 2 * n - 1;
    // `link[a][b]` holds min / max / sum of cross distances between nodes
    let mut link = vec![vec![0.0; total]; total];
    for i in 0..n {
        for j in 0..n {
            link[i][j] = d.get(i, j);
        }
    }
    let mut size = vec![1usize; total];
    let mut active: Vec<usize> = (0..n).collect();
    let mut merges = Vec::with_capacity(n - 1);

    let value = |link: &Vec<Vec<f64>>, size: &[usize], a: usize, b: usize| match linkage {
        Linkage::Average => link[a][b] / (size[a] * size[b]) as f64,
        _ => link[a][b],
    };

    for step in 0..n - 1 {
        let mut best: Option<(f64, usize, usize)> = None;
        for (x, &a) in active.iter().enumerate() {
            for &b in &active[x + 1..] {
                let v = value(&link, &size, a, b);
                if best.is_none_or(|(bv, _, _)| v < bv) {
                    best = Some((v, a, b));
                }
            }
        }
        let (height, a, b) = best.expect("at least two active clusters");
        let id = n + step;
        size[id] = size[a] + size[b];
        active.retain(|&c| c != a && c != b);
        for &c in &active {
            let v = match linkage {
                Linkage::Single => link[a][c].min(link[b][c]),
                Linkage::Complete => link[a][c].max(link[b][c]),
                Linkage::Average => link[a][c] + link[b][c],
            };
            link[id][c] = v;
            link[c][id] = v;
        }
        active.push(id);
        merges.push(Merge { a, b, height, id });
    }
    Dendrogram::new(labels, merges)
}

/// Undo the last `k − 1` merges. Cluster ids are assigned in order of each
/// cluster's smallest leaf index.
pub fn cluster_cut(dend: &Dendrogram, k: usize) -> Result<Vec<usize>> {
    let n = dend.n_leaves();
    if k < 1 || k > n {
        return Err(Error::KOutOfRange { k, n });
    }
    let mut parent: Vec<usize> = (0..2 * n - 1).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for m in &dend.merges[..n - k] {
        let ra = find(&mut parent, m.a);
        let rb = find(&mut parent, m.b);
        parent[ra] = m.id;
        parent[rb] = m.id;
    }
    let mut label_of_root = std::collections::HashMap::new();
    let mut out = Vec::with_capacity(n);
    for leaf in 0..n {
        let root = find(&mut parent, leaf);
        let next = label_of_root.len();
        out.push(*label_of_root.entry(root).or_insert(next));
    }
    Ok(out)
}

pub fn distance_to_csv(d: &DistanceMatrix) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![String::new()];
    header.extend(d.labels.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for (i, label) in d.labels.iter().enumerate() {
        let mut rec = vec![label.clone()];
        rec.extend((0..d.labels.len()).map(|j| d.matrix.get(i, j).to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Parse(e.to_string()))?).map_err(|e| Error::Parse(e.to_string()))
}

pub fn assignments_to_csv(labels: &[String], clusters: &[usize]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["label", "cluster"]).map_err(csv_err)?;
    for (l, c) in labels.iter().zip(clusters) {
        w.write_record([l.as_str(), &c.to_string()]).map_err(csv_err)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Parse(e.to_string()))?).map_err(|e| Error::Parse(e.to_string()))
}

pub fn read_dendrogram(path: &Path) -> Result<Dendrogram> {
    Dendrogram::from_json(&fs::read_to_string(path)?)
}
