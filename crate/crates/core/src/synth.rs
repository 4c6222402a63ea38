//! Synthetic datasets with a known phylogeny: descriptors evolve along a Yule
//! tree by Gaussian perturbation and every specimen can be rasterized.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

use crate::error::{Error, Result};
use crate::fourier::{
    assemble_descriptor, write_descriptor_csv, DescriptorRecord, FourierCoefficients, DEFAULT_HARMONICS,
};
use crate::newick::write_newick_file;
use crate::shape_io::{GrayImage, DEFAULT_RESAMPLE_POINTS};
use crate::tree::PhyloTree;

pub const RASTER_SIZE: usize = 256;
pub const RASTER_SAMPLES: usize = 512;
pub const MAX_RETRIES: usize = 25;
/// Largest self-intersection loop, in pixels, left to the raster fill.
pub const RASTER_TOLERANCE: f64 = 1.0;
/// Printed precision of the ground-truth Newick file.
pub const TRUTH_PRECISION: usize = 6;

// Offsets the species walk and the specimen draws into separate streams.
const WALK_STREAM: u64 = 0x7a1c_e5b0_3d21_9f47;
const SPECIMEN_STREAM: u64 = 0x2c6b_81d9_f04e_a713;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BaseShape {
    Ellipse,
    #[default]
    BeetleTemplate,
}

impl std::str::FromStr for BaseShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ellipse" => Ok(BaseShape::Ellipse),
            "beetle-template" => Ok(BaseShape::BeetleTemplate),
            other => Err(Error::Config(format!("unknown base shape {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvolutionConfig {
    pub n_species: usize,
    pub per_species: usize,
    /// Per-component noise scale per unit branch length, in pixels.
    pub branch_sigma: f64,
    /// Per-component specimen noise scale, in pixels.
    pub within_sigma: f64,
    pub seed: u64,
    pub base_shape: BaseShape,
    pub harmonics: usize,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        EvolutionConfig {
            n_species: 16,
            per_species: 8,
            branch_sigma: 0.3,
            within_sigma: 0.15,
            seed: 0,
            base_shape: BaseShape::BeetleTemplate,
            harmonics: DEFAULT_HARMONICS,
        }
    }
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Precondition(m));
        if self.n_species < 2 {
            return bad(format!("{} species, need at least 2", self.n_species));
        }
        if self.per_species < 2 {
            return bad(format!("{} specimens per species, need at least 2", self.per_species));
        }
        if !(self.branch_sigma >= 0.0 && self.within_sigma >= 0.0)
            || !self.branch_sigma.is_finite()
            || !self.within_sigma.is_finite()
        {
            return bad("noise scales must be finite and non-negative".into());
        }
        if self.within_sigma >= self.branch_sigma && self.branch_sigma > 0.0 {
            return bad(format!(
                "within_sigma {} must be below branch_sigma {}",
                self.within_sigma, self.branch_sigma
            ));
        }
        if self.harmonics == 0 {
            return bad("harmonics must be at least 1".into());
        }
        Ok(())
    }
}

pub fn species_label(i: usize, n: usize) -> String {
    let width = (n.saturating_sub(1)).to_string().len().max(2);
    format!("sp{i:0width$}")
}

/// Yule topology (a uniformly chosen lineage splits at every step) with
/// independent Exp(1) branch lengths. Labels are shuffled over the leaves.
pub fn generate_tree(n_species: usize, seed: u64) -> Result<PhyloTree> {
    if n_species < 2 {
        return Err(Error::Precondition(format!("{n_species} species, need at least 2")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exp = Exp::new(1.0).expect("rate 1 is valid");
    let mut tree = PhyloTree::new();
    let root = tree.root();
    let mut lineages = vec![root];
    while lineages.len() < n_species {
        let pick = rng.random_range(0..lineages.len());
        let parent = lineages.swap_remove(pick);
        for _ in 0..2 {
            lineages.push(tree.add_child(parent, None, None));
        }
    }
    for id in 0..tree.len() {
        if id != root {
            tree.node_mut(id).length = Some(exp.sample(&mut rng));
        }
    }
    let mut labels: Vec<String> = (0..n_species).map(|i| species_label(i, n_species)).collect();
    labels.shuffle(&mut rng);
    for (leaf, label) in tree.leaves().into_iter().zip(labels) {
        tree.node_mut(leaf).label = Some(label);
    }
    Ok(tree)
}

/// Root coefficients in pixel units, centred on the raster.
pub fn base_coefficients(shape: BaseShape, harmonics: usize) -> FourierCoefficients {
    let center = RASTER_SIZE as f64 / 2.0;
    let mut fc = FourierCoefficients::new(
        Complex64::new(center, center),
        vec![Complex64::new(0.0, 0.0); harmonics],
        vec![Complex64::new(0.0, 0.0); harmonics],
        DEFAULT_RESAMPLE_POINTS,
    )
    .expect("matching harmonic counts");
    // ellipse with semi-axes 40 (x) and 80 (y)
    fc.set(1, Complex64::new(60.0, 0.0));
    fc.set(-1, Complex64::new(-20.0, 0.0));
    if shape == BaseShape::BeetleTemplate {
        // narrower head end and a broader abdomen
        let bulges = [(2, 0.0, 4.0), (-2, -5.0, 0.0), (3, 1.5, 0.0), (-3, 0.0, 2.5)];
        for (k, re, im) in bulges {
            if (k as i64).unsigned_abs() as usize <= harmonics {
                fc.set(k, Complex64::new(re, im));
            }
        }
    }
    fc
}

fn damping(k: i64) -> f64 {
    1.0 / (1.0 + k.unsigned_abs() as f64)
}

/// Adds independent Gaussian noise of scale `sigma * w_k` to both parts of
/// every non-constant coefficient.
fn perturb(fc: &mut FourierCoefficients, sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma == 0.0 {
        return;
    }
    let freqs: Vec<i64> = fc.frequencies().collect();
    for k in freqs {
        let s = sigma * damping(k);
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        let v = fc.get(k) + Complex64::new(s * re, s * im);
        fc.set(k, v);
    }
}

/// Brownian walk from the root; returns leaf label to coefficients.
pub fn evolve_descriptors(tree: &PhyloTree, config: &EvolutionConfig) -> Result<BTreeMap<String, FourierCoefficients>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ WALK_STREAM);
    let mut coeffs: Vec<Option<FourierCoefficients>> = vec![None; tree.len()];
    coeffs[tree.root()] = Some(base_coefficients(config.base_shape, config.harmonics));
    let mut stack = vec![tree.root()];
    let mut out = BTreeMap::new();
    while let Some(id) = stack.pop() {
        let here = coeffs[id].clone().expect("parent visited first");
        let node = tree.node(id);
        if node.children.is_empty() {
            let label = node
                .label
                .clone()
                .ok_or_else(|| Error::Precondition("unlabeled leaf".into()))?;
            out.insert(label, here);
            continue;
        }
        for &child in &node.children {
            let length = tree.node(child).length.unwrap_or(0.0).max(0.0);
            let mut c = here.clone();
            perturb(&mut c, config.branch_sigma * length.sqrt(), &mut rng);
            coeffs[child] = Some(c);
        }
        stack.extend(node.children.iter().rev());
    }
    Ok(out)
}

/// Outline of all terms at `samples` evenly spaced parameters.
pub fn outline(fc: &FourierCoefficients, samples: usize) -> Vec<[f64; 2]> {
    let terms: Vec<i64> = fc.frequencies().collect();
    (0..samples)
        .map(|j| {
            let p = fc.evaluate(&terms, j as f64 / samples as f64);
            [p.re, p.im]
        })
        .collect()
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn segments_cross(p1: [f64; 2], p2: [f64; 2], q1: [f64; 2], q2: [f64; 2]) -> bool {
    let d1 = cross(q1, q2, p1);
    let d2 = cross(q1, q2, p2);
    let d3 = cross(p1, p2, q1);
    let d4 = cross(p1, p2, q2);
    (d1 > 0.0) != (d2 > 0.0) && (d3 > 0.0) != (d4 > 0.0) && d1 != 0.0 && d2 != 0.0 && d3 != 0.0 && d4 != 0.0
}

/// True when two non-adjacent edges of the closed polygon cross and the
/// shorter arc between them spans more than `tolerance` (bounding-box
/// diagonal). Loops below a pixel vanish in the raster fill.
pub fn self_intersects(points: &[[f64; 2]], tolerance: f64) -> bool {
    let n = points.len();
    let edge = |i: usize| (points[i], points[(i + 1) % n]);
    let extent = |arc: &mut dyn Iterator<Item = &[f64; 2]>| {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in arc {
            for t in 0..2 {
                lo[t] = lo[t].min(p[t]);
                hi[t] = hi[t].max(p[t]);
            }
        }
        (hi[0] - lo[0]).hypot(hi[1] - lo[1])
    };
    for i in 0..n {
        let (a, b) = edge(i);
        for j in i + 2..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            let (c, d) = edge(j);
            if !segments_cross(a, b, c, d) {
                continue;
            }
            let size = if j - i <= n / 2 {
                extent(&mut points[i + 1..=j].iter())
            } else {
                extent(&mut points[j + 1..].iter().chain(&points[..=i]))
            };
            if size > tolerance {
                return true;
            }
        }
    }
    false
}

/// Even-odd fill of the polygon sampled at pixel centres `(x, y)`; foreground
/// is 0 on a 255 background.
pub fn rasterize(points: &[[f64; 2]], size: usize) -> Result<GrayImage> {
    let mut img = GrayImage::filled(size, size, 255)?;
    let n = points.len();
    let mut crossings = Vec::new();
    for y in 0..size {
        let yc = y as f64;
        crossings.clear();
        for i in 0..n {
            let (a, b) = (points[i], points[(i + 1) % n]);
            if (a[1] <= yc) != (b[1] <= yc) {
                crossings.push(a[0] + (yc - a[1]) / (b[1] - a[1]) * (b[0] - a[0]));
            }
        }
        crossings.sort_by(f64::total_cmp);
        for pair in crossings.chunks_exact(2) {
            let from = pair[0].ceil().max(0.0) as usize;
            let to = pair[1].floor().min(size as f64 - 1.0);
            if to < 0.0 {
                continue;
            }
            for x in from..=to as usize {
                img.set(x, y, 0);
            }
        }
    }
    Ok(img)
}

/// One generated specimen.
#[derive(Debug, Clone, PartialEq)]
pub struct Specimen {
    pub specimen_id: String,
    pub species_id: String,
    pub coefficients: FourierCoefficients,
    pub raster: Option<GrayImage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub truth: PhyloTree,
    pub species: BTreeMap<String, FourierCoefficients>,
    pub specimens: Vec<Specimen>,
}

impl SyntheticDataset {
    pub fn records(&self) -> Vec<DescriptorRecord> {
        self.specimens
            .iter()
            .map(|s| DescriptorRecord {
                specimen_id: s.specimen_id.clone(),
                species_id: s.species_id.clone(),
                values: assemble_descriptor(&s.coefficients),
            })
            .collect()
    }

    /// Writes `ground_truth.nwk`, `descriptors.csv` and, when rasters exist,
    /// `images/train/<species>/<specimen>.png`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_newick_file(&dir.join("ground_truth.nwk"), &self.truth, TRUTH_PRECISION)?;
        write_descriptor_csv(&dir.join("descriptors.csv"), &self.records())?;
        for s in &self.specimens {
            if let Some(img) = &s.raster {
                let species_dir = dir.join("images").join("train").join(&s.species_id);
                fs::create_dir_all(&species_dir)?;
                img.save_png(&species_dir.join(format!("{}.png", s.specimen_id)))?;
            }
        }
        Ok(())
    }
}

fn fits_raster(points: &[[f64; 2]], size: usize) -> bool {
    let hi = size as f64 - 3.0;
    points.iter().all(|p| p[0] >= 2.0 && p[1] >= 2.0 && p[0] <= hi && p[1] <= hi)
}

/// Samples `per_species` specimens around every species. With `rasterize`,
/// specimens whose outline self-intersects or leaves the raster are redrawn
/// up to [`MAX_RETRIES`] times.
pub fn generate_dataset(tree: &PhyloTree, config: &EvolutionConfig, rasterize_specimens: bool) -> Result<SyntheticDataset> {
    let species = evolve_descriptors(tree, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SPECIMEN_STREAM);
    let mut specimens = Vec::with_capacity(species.len() * config.per_species);
    for (label, base) in &species {
        for s in 0..config.per_species {
            let specimen_id = format!("{label}_s{s:02}");
            let mut attempt = 0;
            let (coefficients, raster) = loop {
                let mut c = base.clone();
                perturb(&mut c, config.within_sigma, &mut rng);
                if !rasterize_specimens {
                    break (c, None);
                }
                let pts = outline(&c, RASTER_SAMPLES);
                if fits_raster(&pts, RASTER_SIZE) && !self_intersects(&pts, RASTER_TOLERANCE) {
                    let img = rasterize(&pts, RASTER_SIZE)?;
                    break (c, Some(img));
                }
                attempt += 1;
                if attempt > MAX_RETRIES {
                    return Err(Error::Precondition(format!(
                        "specimen {specimen_id} outline self-intersects or leaves the raster after {MAX_RETRIES} retries"
                    )));
                }
            };
            specimens.push(Specimen {
                specimen_id,
                species_id: label.clone(),
                coefficients,
                raster,
            });
        }
    }
    Ok(SyntheticDataset {
        truth: tree.clone(),
        species,
        specimens,
    })
}
