//! Distance-based tree inference from per-specimen feature vectors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{format_err, Error, Result};
use crate::tree::{NodeId, PhyloTree};

/// Symmetric, zero-diagonal matrix of pairwise taxon distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    labels: Vec<String>,
    d: Vec<Vec<f64>>,
}

impl DistanceMatrix {
    pub fn new(labels: Vec<String>, d: Vec<Vec<f64>>) -> Result<Self> {
        let n = labels.len();
        if d.len() != n || d.iter().any(|row| row.len() != n) {
            return Err(Error::Shape(format!("distance matrix is not {n}x{n}")));
        }
        for i in 0..n {
            if d[i][i] != 0.0 {
                return Err(Error::Precondition(format!("d[{i}][{i}] = {} is not 0", d[i][i])));
            }
            for j in 0..n {
                if !d[i][j].is_finite() {
                    return Err(Error::NonFinite(format!("distance d[{i}][{j}]")));
                }
                if d[i][j] < 0.0 || d[i][j] != d[j][i] {
                    return Err(Error::Precondition(format!(
                        "d[{i}][{j}] = {} must be nonnegative and symmetric",
                        d[i][j]
                    )));
                }
            }
        }
        Ok(DistanceMatrix { labels, d })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i][j]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.d
    }

    /// PHYLIP square format: taxon count, then `label d0 d1 ...` per row.
    pub fn to_phylip(&self) -> String {
        let mut out = format!("{}\n", self.len());
        for (label, row) in self.labels.iter().zip(&self.d) {
            out.push_str(label);
            for v in row {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_phylip(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines
            .next()
            .ok_or_else(|| format_err("phylip", 1, "empty file"))?;
        let n: usize = first
            .trim()
            .parse()
            .map_err(|_| format_err("phylip", 1, "expected taxon count"))?;
        let mut labels = Vec::with_capacity(n);
        let mut d = Vec::with_capacity(n);
        for (i, line) in lines {
            let mut fields = line.split_whitespace();
            let label = fields.next().expect("nonblank line");
            let row = fields
                .map(|f| f.parse::<f64>().map_err(|e| format_err("phylip", i + 1, e.to_string())))
                .collect::<Result<Vec<f64>>>()?;
            if row.len() != n {
                return Err(format_err(
                    "phylip",
                    i + 1,
                    format!("{} distances, expected {n}", row.len()),
                ));
            }
            labels.push(label.to_string());
            d.push(row);
        }
        if labels.len() != n {
            return Err(format_err("phylip", 1, format!("{} rows, expected {n}", labels.len())));
        }
        DistanceMatrix::new(labels, d)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_phylip())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::UnreadableFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        DistanceMatrix::from_phylip(&text)
    }
}

/// Mean feature vector of each species, species in sorted order.
pub fn species_centroids(
    labels: &[String],
    rows: &[Vec<f64>],
) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    if rows.is_empty() {
        return Err(Error::Empty("embedding rows"));
    }
    if labels.len() != rows.len() {
        return Err(Error::Shape(format!(
            "{} labels for {} rows",
            labels.len(),
            rows.len()
        )));
    }
    let dim = rows[0].len();
    let mut acc: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    for (label, row) in labels.iter().zip(rows) {
        if row.len() != dim {
            return Err(Error::Shape(format!("row of length {} among {dim}", row.len())));
        }
        let entry = acc.entry(label).or_insert_with(|| (vec![0.0; dim], 0));
        for (a, v) in entry.0.iter_mut().zip(row) {
            *a += v;
        }
        entry.1 += 1;
    }
    Ok(acc
        .into_iter()
        .map(|(label, (sum, count))| {
            (
                label.to_string(),
                sum.into_iter().map(|s| s / count as f64).collect(),
            )
        })
        .unzip())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Metric {
    #[default]
    Euclidean,
    /// `1 - cos(angle)`; zero vectors are treated as orthogonal to everything.
    Cosine,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            other => Err(Error::Config(format!("unknown distance metric {other:?}"))),
        }
    }
}

pub fn distance_matrix(
    labels: &[String],
    centroids: &[Vec<f64>],
    metric: Metric,
) -> Result<DistanceMatrix> {
    let n = centroids.len();
    if n < 2 {
        return Err(Error::Precondition(format!("{n} species, need at least 2")));
    }
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = match metric {
                Metric::Euclidean => centroids[i]
                    .iter()
                    .zip(&centroids[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt(),
                Metric::Cosine => {
                    let dot: f64 = centroids[i].iter().zip(&centroids[j]).map(|(a, b)| a * b).sum();
                    let na: f64 = centroids[i].iter().map(|a| a * a).sum::<f64>().sqrt();
                    let nb: f64 = centroids[j].iter().map(|b| b * b).sum::<f64>().sqrt();
                    if na == 0.0 || nb == 0.0 {
                        1.0
                    } else {
                        (1.0 - dot / (na * nb)).max(0.0)
                    }
                }
            };
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    DistanceMatrix::new(labels.to_vec(), d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TreeMethod {
    #[default]
    Upgma,
    NeighborJoining,
}

impl std::str::FromStr for TreeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "upgma" => Ok(TreeMethod::Upgma),
            "nj" | "neighbor-joining" => Ok(TreeMethod::NeighborJoining),
            other => Err(Error::Config(format!("unknown tree method {other:?}"))),
        }
    }
}

pub fn build_tree(d: &DistanceMatrix, method: TreeMethod) -> Result<PhyloTree> {
    match method {
        TreeMethod::Upgma => upgma(d),
        TreeMethod::NeighborJoining => neighbor_joining(d),
    }
}

struct Cluster {
    /// Smallest leaf label, used for deterministic tie-breaking.
    key: String,
    size: usize,
    height: f64,
    members: ClusterNode,
}

enum ClusterNode {
    Leaf(String),
    Join(Box<Cluster>, Box<Cluster>),
}

/// Average-linkage clustering. Equal distances are resolved by the
/// lexicographically smallest pair of cluster keys (each cluster's smallest
/// leaf label); the first child of each join is the one with the smaller key.
pub fn upgma(d: &DistanceMatrix) -> Result<PhyloTree> {
    let n = d.len();
    if n < 2 {
        return Err(Error::Precondition(format!("{n} taxa, need at least 2")));
    }
    let mut dist = d.d.clone();
    let mut active: Vec<Option<Cluster>> = d
        .labels
        .iter()
        .map(|l| {
            Some(Cluster {
                key: l.clone(),
                size: 1,
                height: 0.0,
                members: ClusterNode::Leaf(l.clone()),
            })
        })
        .collect();
    for _ in 0..n - 1 {
        let mut best: Option<(usize, usize)> = None;
        for i in 0..n {
            let Some(ci) = &active[i] else { continue };
            for j in i + 1..n {
                let Some(cj) = &active[j] else { continue };
                let better = match best {
                    None => true,
                    Some((bi, bj)) => {
                        let (v, bv) = (dist[i][j], dist[bi][bj]);
                        v < bv || (v == bv && pair_key(ci, cj) < pair_key_at(&active, bi, bj))
                    }
                };
                if better {
                    best = Some((i, j));
                }
            }
        }
        let (i, j) = best.expect("at least two active clusters");
        let height = dist[i][j] / 2.0;
        let a = active[i].take().expect("active");
        let b = active[j].take().expect("active");
        for k in 0..n {
            if active[k].is_some() {
                let v = (a.size as f64 * dist[i][k] + b.size as f64 * dist[j][k])
                    / (a.size + b.size) as f64;
                dist[i][k] = v;
                dist[k][i] = v;
            }
        }
        let (first, second) = if a.key <= b.key { (a, b) } else { (b, a) };
        active[i] = Some(Cluster {
            key: first.key.clone(),
            size: first.size + second.size,
            height: height.max(first.height).max(second.height),
            members: ClusterNode::Join(Box::new(first), Box::new(second)),
        });
    }
    let root = active.into_iter().flatten().next().expect("one cluster left");
    let mut tree = PhyloTree::new();
    let root_id = tree.root();
    let mut stack: Vec<(Cluster, NodeId)> = Vec::new();
    let top_height = root.height;
    if let ClusterNode::Join(a, b) = root.members {
        stack.push((*b, root_id));
        stack.push((*a, root_id));
    }
    // node ids are handed out sequentially, so heights index by id
    let mut node_height = vec![top_height];
    while let Some((cluster, parent)) = stack.pop() {
        let length = Some((node_height[parent] - cluster.height).max(0.0));
        match cluster.members {
            ClusterNode::Leaf(label) => {
                tree.add_child(parent, Some(label), length);
                node_height.push(0.0);
            }
            ClusterNode::Join(a, b) => {
                let id = tree.add_child(parent, None, length);
                node_height.push(cluster.height);
                stack.push((*b, id));
                stack.push((*a, id));
            }
        }
    }
    Ok(tree)
}

fn pair_key<'a>(a: &'a Cluster, b: &'a Cluster) -> (&'a str, &'a str) {
    if a.key <= b.key {
        (&a.key, &b.key)
    } else {
        (&b.key, &a.key)
    }
}

fn pair_key_at(active: &[Option<Cluster>], i: usize, j: usize) -> (&str, &str) {
    pair_key(
        active[i].as_ref().expect("active"),
        active[j].as_ref().expect("active"),
    )
}

/// Saitou-Nei neighbor joining. The minimum Q is taken over index pairs in
/// row-major order, so the first (smallest) pair wins ties. Negative branch
/// lengths are clamped to zero. The result is rooted at the final three-way
/// join.
pub fn neighbor_joining(d: &DistanceMatrix) -> Result<PhyloTree> {
    let n = d.len();
    if n < 3 {
        return Err(Error::Precondition(format!(
            "neighbor joining needs at least 3 taxa, got {n}"
        )));
    }
    enum Sub {
        Leaf(String),
        Join(Vec<(usize, f64)>),
    }
    // subtrees[i] are pending nodes; children refer to other entries
    let mut subs: Vec<Sub> = d.labels.iter().map(|l| Sub::Leaf(l.clone())).collect();
    let mut active: Vec<usize> = (0..n).collect();
    let mut dist: Vec<Vec<f64>> = d.d.clone();
    let grow = |dist: &mut Vec<Vec<f64>>| {
        for row in dist.iter_mut() {
            row.push(0.0);
        }
        let len = dist.len() + 1;
        dist.push(vec![0.0; len]);
    };
    while active.len() > 3 {
        let r = active.len();
        let sums: Vec<f64> = active
            .iter()
            .map(|&i| active.iter().map(|&k| dist[i][k]).sum())
            .collect();
        let mut best = (0usize, 1usize, f64::INFINITY);
        for a in 0..r {
            for b in a + 1..r {
                let q = (r as f64 - 2.0) * dist[active[a]][active[b]] - sums[a] - sums[b];
                if q < best.2 {
                    best = (a, b, q);
                }
            }
        }
        let (a, b, _) = best;
        let (i, j) = (active[a], active[b]);
        let dij = dist[i][j];
        let li = 0.5 * dij + (sums[a] - sums[b]) / (2.0 * (r as f64 - 2.0));
        let lj = dij - li;
        let u = subs.len();
        subs.push(Sub::Join(vec![(i, li.max(0.0)), (j, lj.max(0.0))]));
        grow(&mut dist);
        for &k in &active {
            if k != i && k != j {
                let v = 0.5 * (dist[i][k] + dist[j][k] - dij);
                dist[u][k] = v;
                dist[k][u] = v;
            }
        }
        active[a] = u;
        active.remove(b);
    }
    let (x, y, z) = (active[0], active[1], active[2]);
    let (dxy, dxz, dyz) = (dist[x][y], dist[x][z], dist[y][z]);
    let lx = 0.5 * (dxy + dxz - dyz);
    let ly = 0.5 * (dxy + dyz - dxz);
    let lz = 0.5 * (dxz + dyz - dxy);

    let mut tree = PhyloTree::new();
    let root = tree.root();
    let mut stack = vec![(z, lz.max(0.0), root), (y, ly.max(0.0), root), (x, lx.max(0.0), root)];
    while let Some((s, len, parent)) = stack.pop() {
        match &subs[s] {
            Sub::Leaf(label) => {
                tree.add_child(parent, Some(label.clone()), Some(len));
            }
            Sub::Join(children) => {
                let id = tree.add_child(parent, None, Some(len));
                for &(c, l) in children.iter().rev() {
                    stack.push((c, l, id));
                }
            }
        }
    }
    Ok(tree)
}
