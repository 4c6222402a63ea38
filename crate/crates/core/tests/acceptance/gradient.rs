//! Central-difference gradient check of the default encoder under the
//! batch-hard triplet loss. The oracle has its own forward pass and loss and
//! only shares the flat parameter layout with the library. Perturbations are
//! evaluated incrementally: only what depends on the perturbed value is
//! recomputed, and every perturbation of one first-layer unit goes through a
//! single matrix product.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use shapephylo::encoder::model::{LayerOffsets, BN_EPS};
use shapephylo::encoder::{triplet_loss, Architecture, EncoderParams, Mining, Mode};

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Below this absolute difference a pair counts as equal; covers parameters
/// whose exact gradient is zero (biases in front of batch normalization).
pub const ABS_FLOOR: f64 = 1e-9;
const MARGIN: f64 = 0.2;
const B: usize = 8;
const LABELS: [usize; B] = [0, 0, 1, 1, 2, 2, 3, 3];
/// Smaller steps tried when a ReLU, a hinge or a mining choice switches
/// inside the `STEP` stencil.
const REFINED_STEPS: [f64; 3] = [1e-6, 1e-7, 1e-8];

type Col = [f64; B];

/// Activation pattern: ReLU signs of both hidden layers, hinge activity and
/// the negative mined for each anchor.
#[derive(Clone, PartialEq, Debug)]
struct Pattern {
    hidden: Vec<u8>,
    loss: [u8; B + 1],
}

fn bn_col(z: &Col, g: f64, be: f64) -> (Col, u8) {
    let mean = z.iter().sum::<f64>() / B as f64;
    let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / B as f64;
    let inv = 1.0 / (var + BN_EPS).sqrt();
    let mut a = [0.0; B];
    let mut mask = 0u8;
    for r in 0..B {
        let p = g * (z[r] - mean) * inv + be;
        if p > 0.0 {
            a[r] = p;
            mask |= 1 << r;
        }
    }
    (a, mask)
}

/// Batch norm plus ReLU over a row-major `B x n` block, with per-column
/// ReLU masks. Same operation order as [`bn_col`].
fn bn_rows(z: &[f64], n: usize, g: &[f64], be: &[f64], out: &mut [f64], masks: &mut [u8]) {
    let mut mean = vec![0.0; n];
    for r in 0..B {
        for (m, v) in mean.iter_mut().zip(&z[r * n..(r + 1) * n]) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= B as f64);
    let mut var = vec![0.0; n];
    for r in 0..B {
        for ((s, v), m) in var.iter_mut().zip(&z[r * n..(r + 1) * n]).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let inv: Vec<f64> = var.iter().map(|s| 1.0 / (s / B as f64 + BN_EPS).sqrt()).collect();
    masks.fill(0);
    for r in 0..B {
        let zr = &z[r * n..(r + 1) * n];
        let or = &mut out[r * n..(r + 1) * n];
        for k in 0..n {
            let p = g[k] * (zr[k] - mean[k]) * inv[k] + be[k];
            or[k] = if p > 0.0 { p } else { 0.0 };
            masks[k] |= ((p > 0.0) as u8) << r;
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    for (x, y) in a.chunks_exact(4).zip(b.chunks_exact(4)) {
        for l in 0..4 {
            let d = x[l] - y[l];
            acc[l] += d * d;
        }
    }
    let tail: f64 = a.chunks_exact(4)
        .remainder()
        .iter()
        .zip(b.chunks_exact(4).remainder())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    acc.iter().sum::<f64>() + tail
}

fn triplet(rows: [&[f64]; B]) -> (f64, [u8; B + 1]) {
    let mut dist = [[0.0; B]; B];
    for i in 0..B {
        for j in i + 1..B {
            dist[i][j] = sq_dist(rows[i], rows[j]).sqrt();
            dist[j][i] = dist[i][j];
        }
    }
    let mut total = 0.0;
    let mut pattern = [0u8; B + 1];
    for a in 0..B {
        let mut far = f64::NEG_INFINITY;
        let mut near = f64::INFINITY;
        for o in 0..B {
            if o == a {
                continue;
            }
            if LABELS[o] == LABELS[a] {
                far = far.max(dist[a][o]);
            } else if dist[a][o] < near {
                near = dist[a][o];
                pattern[a] = o as u8;
            }
        }
        let hinge = far - near + MARGIN;
        if hinge > 0.0 {
            total += hinge;
            pattern[B] |= 1 << a;
        }
    }
    (total / B as f64, pattern)
}

struct Net<'a> {
    v: &'a [f64],
    l: [LayerOffsets; 3],
}

impl Net<'_> {
    fn w(&self, layer: usize) -> ArrayView2<'_, f64> {
        let l = self.l[layer];
        ArrayView2::from_shape((l.fan_in, l.fan_out), &self.v[l.weight..l.weight + l.fan_in * l.fan_out]).unwrap()
    }

    fn bias(&self, layer: usize) -> &[f64] {
        let l = self.l[layer];
        let b = l.bias.unwrap();
        &self.v[b..b + l.fan_out]
    }

    fn gain(&self, layer: usize) -> (&[f64], &[f64]) {
        let l = self.l[layer];
        let (g, b) = l.norm.unwrap();
        (&self.v[g..g + l.fan_out], &self.v[b..b + l.fan_out])
    }
}

/// Every intermediate of one forward pass.
struct State {
    z1: Array2<f64>,
    a1: Array2<f64>,
    z2: Array2<f64>,
    a2: Array2<f64>,
    z3: Array2<f64>,
    loss: f64,
    pattern: Pattern,
}

fn forward(net: &Net, x: &Array2<f64>) -> State {
    let z1 = x.dot(&net.w(0)) + &ArrayView2::from_shape((1, net.l[0].fan_out), net.bias(0)).unwrap();
    let h1 = z1.ncols();
    let mut a1 = Array2::zeros((B, h1));
    let mut m1 = vec![0u8; h1];
    let (g, be) = net.gain(0);
    bn_rows(z1.as_slice().unwrap(), h1, g, be, a1.as_slice_mut().unwrap(), &mut m1);
    let z2 = a1.dot(&net.w(1)) + &ArrayView2::from_shape((1, net.l[1].fan_out), net.bias(1)).unwrap();
    let h2 = z2.ncols();
    let mut a2 = Array2::zeros((B, h2));
    let mut m2 = vec![0u8; h2];
    let (g, be) = net.gain(1);
    bn_rows(z2.as_slice().unwrap(), h2, g, be, a2.as_slice_mut().unwrap(), &mut m2);
    let z3 = a2.dot(&net.w(2)) + &ArrayView2::from_shape((1, net.l[2].fan_out), net.bias(2)).unwrap();
    let (loss, lp) = triplet(rows_of(z3.as_slice().unwrap(), z3.ncols()));
    m1.extend(m2);
    State {
        z1,
        a1,
        z2,
        a2,
        z3,
        loss,
        pattern: Pattern { hidden: m1, loss: lp },
    }
}

fn rows_of(e: &[f64], d: usize) -> [&[f64]; B] {
    std::array::from_fn(|r| &e[r * d..(r + 1) * d])
}

fn col(m: &Array2<f64>, j: usize) -> Col {
    std::array::from_fn(|r| m[[r, j]])
}

/// Finite differences for every parameter plus a flag where the activation
/// pattern changed inside the stencil.
struct Differences {
    fd: Vec<f64>,
    switched: Vec<bool>,
}

fn incremental(net: &Net, x: &Array2<f64>, base: &State, h: f64) -> Differences {
    let total = net.v.len();
    
    let mut out = Differences {
        fd: vec![f64::NAN; total],
        switched: vec![false; total],
    };
    let [l1, l2, l3] = net.l;
    let (h1, h2, d_out) = (l1.fan_out, l2.fan_out, l3.fan_out);
    let masks1 = &base.pattern.hidden[..h1];
    let masks2 = &base.pattern.hidden[h1..];
    let (g1, be1) = net.gain(0);
    let (g2, be2) = net.gain(1);
    let w3 = net.w(2);
    let z2 = base.z2.as_slice().unwrap();
    let z3 = base.z3.as_slice().unwrap();
    let mut record = |flat: usize, plus: (f64, bool), minus: (f64, bool)| {
        out.fd[flat] = (plus.0 - minus.0) / (2.0 * h);
        out.switched[flat] = plus.1 || minus.1;
    };
    let score = |rows: [&[f64]; B]| {
        let (loss, lp) = triplet(rows);
        (loss, lp != base.pattern.loss)
    };

    // first layer: one stacked product per unit
    let mut z2v = vec![0.0; B * h2];
    let mut m2v = vec![0u8; h2];
    for j in 0..h1 {
        let z = col(&base.z1, j);
        let mut flats = Vec::with_capacity(l1.fan_in + 3);
        let mut cols = Vec::with_capacity(2 * (l1.fan_in + 3));
        for i in 0..l1.fan_in {
            flats.push(l1.weight + i * h1 + j);
            for s in [h, -h] {
                cols.push(bn_col(&std::array::from_fn(|r| z[r] + s * x[[r, i]]), g1[j], be1[j]));
            }
        }
        flats.push(l1.bias.unwrap() + j);
        for s in [h, -h] {
            cols.push(bn_col(&std::array::from_fn(|r| z[r] + s), g1[j], be1[j]));
        }
        let (g_off, b_off) = l1.norm.unwrap();
        flats.push(g_off + j);
        for s in [h, -h] {
            cols.push(bn_col(&z, g1[j] + s, be1[j]));
        }
        flats.push(b_off + j);
        for s in [h, -h] {
            cols.push(bn_col(&z, g1[j], be1[j] + s));
        }
        let nv = cols.len();
        // rows 1.. relative to row 0; distances only see differences
        let mut stack = vec![0.0; nv * (B - 1) * h2];
        let mut a2v = vec![0.0; B * h2];
        let mut switched = vec![false; nv];
        let w2row = &net.v[l2.weight + j * h2..l2.weight + (j + 1) * h2];
        for (v, (a1c, m1)) in cols.iter().enumerate() {
            for r in 0..B {
                let d = a1c[r] - base.a1[[r, j]];
                for k in 0..h2 {
                    z2v[r * h2 + k] = z2[r * h2 + k] + d * w2row[k];
                }
            }
            bn_rows(&z2v, h2, g2, be2, &mut a2v, &mut m2v);
            let block = &mut stack[v * (B - 1) * h2..(v + 1) * (B - 1) * h2];
            for r in 1..B {
                for k in 0..h2 {
                    block[(r - 1) * h2 + k] = a2v[r * h2 + k] - a2v[k];
                }
            }
            switched[v] = *m1 != masks1[j] || m2v != masks2;
        }
        let a = ArrayView2::from_shape((nv * (B - 1), h2), &stack).unwrap();
        let e = a.dot(&w3);
        let e = e.as_slice().unwrap();
        let origin = vec![0.0; d_out];
        let evals: Vec<(f64, bool)> = (0..nv)
            .map(|v| {
                let block = &e[v * (B - 1) * d_out..(v + 1) * (B - 1) * d_out];
                let rows = std::array::from_fn(|r| {
                    if r == 0 {
                        &origin[..]
                    } else {
                        &block[(r - 1) * d_out..r * d_out]
                    }
                });
                let (loss, sw) = score(rows);
                (loss, sw || switched[v])
            })
            .collect();
        for (p, &flat) in flats.iter().enumerate() {
            record(flat, evals[2 * p], evals[2 * p + 1]);
        }
    }
    // second layer: a changed unit moves the output by a rank-one term
    let mut e = vec![0.0; B * d_out];
    for k in 0..h2 {
        let z = col(&base.z2, k);
        let mut eval = |zc: Col, g: f64, be: f64| {
            let (a2c, m) = bn_col(&zc, g, be);
            e.copy_from_slice(z3);
            for r in 0..B {
                let d = a2c[r] - base.a2[[r, k]];
                for c in 0..d_out {
                    e[r * d_out + c] += d * w3[[k, c]];
                }
            }
            let (loss, sw) = score(rows_of(&e, d_out));
            (loss, sw || m != masks2[k])
        };
        for i in 0..h1 {
            let plus = eval(std::array::from_fn(|r| z[r] + h * base.a1[[r, i]]), g2[k], be2[k]);
            let minus = eval(std::array::from_fn(|r| z[r] - h * base.a1[[r, i]]), g2[k], be2[k]);
            record(l2.weight + i * h2 + k, plus, minus);
        }
        let plus = eval(std::array::from_fn(|r| z[r] + h), g2[k], be2[k]);
        let minus = eval(std::array::from_fn(|r| z[r] - h), g2[k], be2[k]);
        record(l2.bias.unwrap() + k, plus, minus);
        let (g_off, b_off) = l2.norm.unwrap();
        let plus = eval(z, g2[k] + h, be2[k]);
        let minus = eval(z, g2[k] - h, be2[k]);
        record(g_off + k, plus, minus);
        let plus = eval(z, g2[k], be2[k] + h);
        let minus = eval(z, g2[k], be2[k] - h);
        record(b_off + k, plus, minus);
    }
    // output layer: one output column shifts
    for c in 0..d_out {
        let mut eval = |shift: &dyn Fn(usize) -> f64| {
            e.copy_from_slice(z3);
            for r in 0..B {
                e[r * d_out + c] += shift(r);
            }
            score(rows_of(&e, d_out))
        };
        for k in 0..h2 {
            let plus = eval(&|r| h * base.a2[[r, k]]);
            let minus = eval(&|r| -h * base.a2[[r, k]]);
            record(l3.weight + k * d_out + c, plus, minus);
        }
        let plus = eval(&|_| h);
        let minus = eval(&|_| -h);
        record(l3.bias.unwrap() + c, plus, minus);
    }
    out
}

#[derive(Debug, Default)]
pub struct Summary {
    pub batches: usize,
    pub params: usize,
    pub compared: usize,
    /// Largest relative difference among pairs with magnitude at least
    /// `ABS_FLOOR / REL_TOL`.
    pub max_rel: f64,
    /// Pairs that fail the relative test but differ by at most `ABS_FLOOR`.
    pub floor_pairs: usize,
    /// Pairs re-measured with a smaller step because of a switch.
    pub refined: usize,
    pub failures: usize,
    /// Oracle against library loss, worst absolute difference.
    pub loss_mismatch: f64,
    pub inactive_batches: usize,
}

fn batch_case(seed: u64) -> (Vec<f64>, EncoderParams, Array2<f64>) {
    let arch = Architecture::default();
    let mut params = EncoderParams::init(arch.clone(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
    let layout = arch.layout();
    let values = params.values_mut();
    for l in &layout.layers {
        for v in &mut values[l.bias.unwrap()..l.bias.unwrap() + l.fan_out] {
            *v = rng.random_range(-0.1..0.1);
        }
        if let Some((g, b)) = l.norm {
            for j in 0..l.fan_out {
                values[g + j] = rng.random_range(0.5..1.5);
                values[b + j] = rng.random_range(-0.3..0.3);
            }
        }
    }
    let x = Array2::from_shape_fn((B, arch.input_dim()), |_| rng.sample(StandardNormal));
    (params.values().to_vec(), params, x)
}

pub fn check(batches: usize) -> Summary {
    let mut s = Summary {
        batches,
        ..Summary::default()
    };
    for seed in 0..batches as u64 {
        let (values, params, x) = batch_case(seed);
        let layout = params.layout().clone();
        let net = Net {
            v: &values,
            l: [layout.layers[0], layout.layers[1], layout.layers[2]],
        };
        s.params = values.len();

        let flat_x = x.as_slice().unwrap();
        let (emb, cache) = params.forward(flat_x, B, Mode::Train).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = triplet_loss(&emb, &LABELS, 128, MARGIN, Mining::BatchHard, &mut rng).unwrap();
        let (analytic, _) = params.backward(&cache, &t.grad).unwrap();
        if t.active_anchors == 0 {
            s.inactive_batches += 1;
        }

        let base = forward(&net, &x);
        s.loss_mismatch = s.loss_mismatch.max((base.loss - t.loss).abs());
        let mut diff = incremental(&net, &x, &base, STEP);

        let mut shifted = values.clone();
        for flat in 0..values.len() {
            if !diff.switched[flat] {
                continue;
            }
            s.refined += 1;
            for h in REFINED_STEPS {
                let mut eval = |delta: f64| {
                    shifted[flat] = values[flat] + delta;
                    let st = forward(&Net { v: &shifted, l: net.l }, &x);
                    shifted[flat] = values[flat];
                    (st.loss, st.pattern != base.pattern)
                };
                let (lp, sp) = eval(h);
                let (lm, sm) = eval(-h);
                if !sp && !sm {
                    diff.fd[flat] = (lp - lm) / (2.0 * h);
                    diff.switched[flat] = false;
                    break;
                }
            }
        }

        for (flat, (&a, &f)) in analytic.iter().zip(&diff.fd).enumerate() {
            s.compared += 1;
            let err = (a - f).abs();
            let scale = a.abs().max(f.abs());
            if diff.switched[flat] || !f.is_finite() {
                s.failures += 1;
            } else if err <= REL_TOL * scale {
                if scale >= ABS_FLOOR / REL_TOL {
                    s.max_rel = s.max_rel.max(err / scale);
                }
            } else if err <= ABS_FLOOR {
                s.floor_pairs += 1;
            } else {
                s.failures += 1;
            }
        }
    }
    s
}
