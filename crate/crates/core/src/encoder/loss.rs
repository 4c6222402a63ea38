//! Triplet margin loss on Euclidean embedding distances.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mining {
    /// Farthest positive and nearest negative of each anchor in the batch.
    #[default]
    BatchHard,
    /// One uniformly drawn positive and negative per anchor.
    Random,
}

impl std::str::FromStr for Mining {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch-hard" => Ok(Mining::BatchHard),
            "random" => Ok(Mining::Random),
            other => Err(Error::Config(format!("unknown mining strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletOutput {
    /// Mean hinge over anchors that have both a positive and a negative.
    pub loss: f64,
    /// `d loss / d embeddings`, same layout as the embeddings.
    pub grad: Vec<f64>,
    pub valid_anchors: usize,
    /// Anchors with a strictly positive hinge.
    pub active_anchors: usize,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Adds `scale * d|a - b| / da` to `ga` and the opposite to `gb`.
fn push_distance_grad(grad: &mut [f64], dim: usize, a: usize, b: usize, d: f64, emb: &[f64], scale: f64) {
    if d <= 0.0 {
        return;
    }
    for k in 0..dim {
        let g = scale * (emb[a * dim + k] - emb[b * dim + k]) / d;
        grad[a * dim + k] += g;
        grad[b * dim + k] -= g;
    }
}

/// Per-anchor `max(0, d(a, p) - d(a, n) + margin)`, averaged over valid
/// anchors. A batch without any valid anchor yields zero loss and gradient.
pub fn triplet_loss(
    embeddings: &[f64],
    labels: &[usize],
    dim: usize,
    margin: f64,
    mining: Mining,
    rng: &mut impl Rng,
) -> Result<TripletOutput> {
    let n = labels.len();
    if embeddings.len() != n * dim {
        return Err(Error::Shape(format!(
            "{} embedding values for {n} labels of dimension {dim}",
            embeddings.len()
        )));
    }
    let row = |i: usize| &embeddings[i * dim..(i + 1) * dim];
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = distance(row(i), row(j));
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    // (anchor, positive, negative) per valid anchor
    let mut triplets = Vec::with_capacity(n);
    for a in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&p| p != a && labels[p] == labels[a]).collect();
        let negatives: Vec<usize> = (0..n).filter(|&q| labels[q] != labels[a]).collect();
        if positives.is_empty() || negatives.is_empty() {
            continue;
        }
        let (p, q) = match mining {
            Mining::BatchHard => {
                let mut p = positives[0];
                for &c in &positives[1..] {
                    if dist[a * n + c] > dist[a * n + p] {
                        p = c;
                    }
                }
                let mut q = negatives[0];
                for &c in &negatives[1..] {
                    if dist[a * n + c] < dist[a * n + q] {
                        q = c;
                    }
                }
                (p, q)
            }
            Mining::Random => (
                positives[rng.random_range(0..positives.len())],
                negatives[rng.random_range(0..negatives.len())],
            ),
        };
        triplets.push((a, p, q));
    }
    let mut grad = vec![0.0; embeddings.len()];
    if triplets.is_empty() {
        return Ok(TripletOutput {
            loss: 0.0,
            grad,
            valid_anchors: 0,
            active_anchors: 0,
        });
    }
    let scale = 1.0 / triplets.len() as f64;
    let mut total = 0.0;
    let mut active = 0;
    for &(a, p, q) in &triplets {
        let (dap, daq) = (dist[a * n + p], dist[a * n + q]);
        let hinge = dap - daq + margin;
        if hinge > 0.0 {
            total += hinge;
            active += 1;
            push_distance_grad(&mut grad, dim, a, p, dap, embeddings, scale);
            push_distance_grad(&mut grad, dim, a, q, daq, embeddings, -scale);
        }
    }
    Ok(TripletOutput {
        loss: total * scale,
        grad,
        valid_anchors: triplets.len(),
        active_anchors: active,
    })
}

/// Projects each row onto the unit sphere; returns the normalized rows and
/// the row norms needed to map gradients back.
pub fn l2_normalize_rows(embeddings: &[f64], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut out = embeddings.to_vec();
    let mut norms = Vec::with_capacity(embeddings.len() / dim.max(1));
    for row in out.chunks_mut(dim) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|v| *v /= norm);
        norms.push(norm);
    }
    (out, norms)
}

/// Chain rule through [`l2_normalize_rows`].
pub fn l2_normalize_backward(normalized: &[f64], norms: &[f64], grad: &[f64], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; grad.len()];
    for (r, &norm) in norms.iter().enumerate() {
        let u = &normalized[r * dim..(r + 1) * dim];
        let g = &grad[r * dim..(r + 1) * dim];
        let dot: f64 = u.iter().zip(g).map(|(a, b)| a * b).sum();
        for k in 0..dim {
            out[r * dim + k] = (g[k] - u[k] * dot) / norm;
        }
    }
    out
}
