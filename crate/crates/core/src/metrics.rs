//! Tree-to-tree scores on unrooted topologies: normalized Robinson-Foulds and
//! a normalized Align score, plus the random-tree baseline.
//!
//! Both scores are distances in `[0, 1]` with 0 for identical topologies.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::matching::max_weight_assignment;
use crate::tree::PhyloTree;

/// Sorted leaf labels shared by the trees being compared; bit `i` of a
/// bipartition block refers to `labels[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeafUniverse {
    labels: Vec<String>,
}

impl LeafUniverse {
    pub fn of(tree: &PhyloTree) -> Result<Self> {
        tree.validate_labels()?;
        let mut labels = tree.leaf_labels();
        labels.sort();
        Ok(LeafUniverse { labels })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn index(&self, label: &str) -> Option<usize> {
        self.labels.binary_search_by(|l| l.as_str().cmp(label)).ok()
    }

    /// Errors unless `tree` has exactly this leaf set.
    pub fn check(&self, tree: &PhyloTree) -> Result<()> {
        let other = LeafUniverse::of(tree)?;
        if other == *self {
            return Ok(());
        }
        let a: BTreeSet<&String> = self.labels.iter().collect();
        let b: BTreeSet<&String> = other.labels.iter().collect();
        Err(Error::LeafSetMismatch {
            only_first: a.difference(&b).map(|s| s.to_string()).collect(),
            only_second: b.difference(&a).map(|s| s.to_string()).collect(),
        })
    }
}

/// Split of the leaf set induced by one internal edge. The stored block is
/// the side that does not contain the smallest label.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Bipartition {
    words: Vec<u64>,
    n: usize,
}

impl Bipartition {
    fn empty(n: usize) -> Self {
        Bipartition {
            words: vec![0; n.div_ceil(64)],
            n,
        }
    }

    fn insert(&mut self, i: usize) {
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn contains(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    fn union_with(&mut self, other: &Bipartition) {
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
    }

    pub fn size(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn complement(&self) -> Bipartition {
        let mut out = self.clone();
        for w in out.words.iter_mut() {
            *w = !*w;
        }
        let tail = self.n % 64;
        if tail != 0 {
            *out.words.last_mut().expect("nonempty") &= (1u64 << tail) - 1;
        }
        out
    }

    fn canonical(self) -> Bipartition {
        if self.contains(0) {
            self.complement()
        } else {
            self
        }
    }

    fn intersection_size(&self, other: &Bipartition) -> usize {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }

    fn jaccard(&self, other: &Bipartition) -> f64 {
        let inter = self.intersection_size(other);
        let union = self.size() + other.size() - inter;
        inter as f64 / union as f64
    }

    /// Labels on the stored side.
    pub fn block_labels<'a>(&self, universe: &'a LeafUniverse) -> Vec<&'a str> {
        (0..self.n)
            .filter(|&i| self.contains(i))
            .map(|i| universe.labels[i].as_str())
            .collect()
    }
}

/// Nontrivial splits of `tree` read as unrooted; leaf-pendant edges and
/// duplicate splits from a degree-two root are dropped.
pub fn bipartitions(tree: &PhyloTree, universe: &LeafUniverse) -> Result<BTreeSet<Bipartition>> {
    universe.check(tree)?;
    let n = universe.len();
    let mut below: Vec<Option<Bipartition>> = vec![None; tree.len()];
    let mut out = BTreeSet::new();
    for id in tree.postorder() {
        let node = tree.node(id);
        let mut set = Bipartition::empty(n);
        if node.children.is_empty() {
            let label = node.label.as_deref().unwrap_or_default();
            set.insert(universe.index(label).expect("checked leaf set"));
        } else {
            for &c in &node.children {
                set.union_with(below[c].as_ref().expect("postorder"));
            }
        }
        let size = set.size();
        if id != tree.root() && size >= 2 && n - size >= 2 {
            out.insert(set.clone().canonical());
        }
        below[id] = Some(set);
    }
    Ok(out)
}

/// Edge-pair score: best of the two side pairings of the smaller Jaccard
/// overlap of corresponding sides.
pub fn pair_score(a: &Bipartition, b: &Bipartition) -> f64 {
    let (ac, bc) = (a.complement(), b.complement());
    let straight = a.jaccard(b).min(ac.jaccard(&bc));
    let crossed = a.jaccard(&bc).min(ac.jaccard(b));
    straight.max(crossed)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchedEdge {
    pub edge_t1: usize,
    pub edge_t2: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreeScore {
    #[serde(rename = "nAS")]
    pub nas: f64,
    #[serde(rename = "nRF")]
    pub nrf: f64,
    pub raw_rf: usize,
    pub n_leaves: usize,
    pub edges_t1: usize,
    pub edges_t2: usize,
    #[serde(skip)]
    pub matching: Vec<MatchedEdge>,
}

/// `(|S1 xor S2|, |S1 xor S2| / (|S1| + |S2|))`; both zero when neither tree
/// has an internal edge.
pub fn rf_distance(t1: &PhyloTree, t2: &PhyloTree) -> Result<(usize, f64)> {
    let universe = LeafUniverse::of(t1)?;
    let s1 = bipartitions(t1, &universe)?;
    let s2 = bipartitions(t2, &universe)?;
    Ok(rf_from_sets(&s1, &s2))
}

fn rf_from_sets(s1: &BTreeSet<Bipartition>, s2: &BTreeSet<Bipartition>) -> (usize, f64) {
    let raw = s1.symmetric_difference(s2).count();
    let total = s1.len() + s2.len();
    let nrf = if total == 0 {
        0.0
    } else {
        raw as f64 / total as f64
    };
    (raw, nrf)
}

/// Align distance `1 - S / max(|S1|, |S2|)` where `S` is the best total
/// [`pair_score`] over one-to-one edge matchings.
pub fn align_score(t1: &PhyloTree, t2: &PhyloTree) -> Result<TreeScore> {
    let universe = LeafUniverse::of(t1)?;
    let s1: Vec<Bipartition> = bipartitions(t1, &universe)?.into_iter().collect();
    let s2: Vec<Bipartition> = bipartitions(t2, &universe)?.into_iter().collect();
    if s1.is_empty() || s2.is_empty() {
        return Err(Error::Precondition(
            "align score needs at least one internal edge in each tree".into(),
        ));
    }
    let weights: Vec<Vec<f64>> = s1
        .iter()
        .map(|a| s2.iter().map(|b| pair_score(a, b)).collect())
        .collect();
    let (pairs, total) = max_weight_assignment(&weights);
    let matching = pairs
        .into_iter()
        .map(|(i, j)| MatchedEdge {
            edge_t1: i,
            edge_t2: j,
            score: weights[i][j],
        })
        .collect();
    let nas = (1.0 - total / s1.len().max(s2.len()) as f64).clamp(0.0, 1.0);
    let set1: BTreeSet<Bipartition> = s1.iter().cloned().collect();
    let set2: BTreeSet<Bipartition> = s2.iter().cloned().collect();
    let (raw_rf, nrf) = rf_from_sets(&set1, &set2);
    Ok(TreeScore {
        nas,
        nrf,
        raw_rf,
        n_leaves: universe.len(),
        edges_t1: s1.len(),
        edges_t2: s2.len(),
        matching,
    })
}

/// Both scores in one record.
pub fn compare(t1: &PhyloTree, t2: &PhyloTree) -> Result<TreeScore> {
    align_score(t1, t2)
}

/// Matching as CSV rows `edge_t1,edge_t2,score`; edges are written as their
/// stored-side labels joined by `|`.
pub fn matching_csv(t1: &PhyloTree, t2: &PhyloTree, score: &TreeScore) -> Result<String> {
    let universe = LeafUniverse::of(t1)?;
    let s1: Vec<Bipartition> = bipartitions(t1, &universe)?.into_iter().collect();
    let s2: Vec<Bipartition> = bipartitions(t2, &universe)?.into_iter().collect();
    let mut out = String::from("edge_t1,edge_t2,score\n");
    for m in &score.matching {
        out.push_str(&format!(
            "{},{},{}\n",
            s1[m.edge_t1].block_labels(&universe).join("|"),
            s2[m.edge_t2].block_labels(&universe).join("|"),
            m.score
        ));
    }
    Ok(out)
}

/// Random topology by sequential attachment: the labels are shuffled, the
/// first two form a cherry, and each further leaf subdivides a uniformly
/// chosen existing edge. All branch lengths are 1.
pub fn random_binary_tree(labels: &[String], seed: u64) -> Result<PhyloTree> {
    if labels.len() < 2 {
        return Err(Error::Precondition(format!(
            "{} labels, need at least 2",
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<&String> = labels.iter().collect();
    order.shuffle(&mut rng);
    // parent links; node 0 is the root
    let mut parent: Vec<Option<usize>> = vec![None, Some(0), Some(0)];
    let mut label: Vec<Option<String>> = vec![None, Some(order[0].clone()), Some(order[1].clone())];
    for l in &order[2..] {
        let edge_child = rng.random_range(1..parent.len());
        let mid = parent.len();
        parent.push(parent[edge_child]);
        label.push(None);
        parent[edge_child] = Some(mid);
        parent.push(Some(mid));
        label.push(Some((*l).clone()));
    }
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); parent.len()];
    for (id, p) in parent.iter().enumerate() {
        if let Some(p) = p {
            children[*p].push(id);
        }
    }
    let mut tree = PhyloTree::new();
    let mut stack = vec![(0usize, tree.root())];
    while let Some((old, new)) = stack.pop() {
        for &c in &children[old] {
            let id = tree.add_child(new, label[c].clone(), Some(1.0));
            stack.push((c, id));
        }
    }
    Ok(tree)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineSummary {
    pub trials: usize,
    #[serde(rename = "nAS_mean")]
    pub nas_mean: f64,
    #[serde(rename = "nAS_ci95")]
    pub nas_ci95: f64,
    #[serde(rename = "nRF_mean")]
    pub nrf_mean: f64,
    #[serde(rename = "nRF_ci95")]
    pub nrf_ci95: f64,
}

/// Mean and 95% normal-approximation half-width `1.96 s / sqrt(n)`.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

/// Scores `trials` random trees (trial `i` seeded with `seed + i`) against
/// the ground truth.
pub fn random_baseline(truth: &PhyloTree, trials: usize, seed: u64) -> Result<BaselineSummary> {
    if trials < 2 {
        return Err(Error::Precondition(format!("{trials} trials, need at least 2")));
    }
    random_baseline_with_seeds(truth, (0..trials as u64).map(|i| seed.wrapping_add(i)))
}

pub fn random_baseline_with_seeds(
    truth: &PhyloTree,
    seeds: impl IntoIterator<Item = u64>,
) -> Result<BaselineSummary> {
    let labels = LeafUniverse::of(truth)?.labels;
    let mut nas = Vec::new();
    let mut nrf = Vec::new();
    for s in seeds {
        let random = random_binary_tree(&labels, s)?;
        let score = align_score(&random, truth)?;
        nas.push(score.nas);
        nrf.push(score.nrf);
    }
    let (nas_mean, nas_ci95) = mean_ci95(&nas);
    let (nrf_mean, nrf_ci95) = mean_ci95(&nrf);
    Ok(BaselineSummary {
        trials: nas.len(),
        nas_mean,
        nas_ci95,
        nrf_mean,
        nrf_ci95,
    })
}
