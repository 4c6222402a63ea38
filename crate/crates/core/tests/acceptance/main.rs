//! Acceptance suite: one PASS/FAIL line per criterion. Tolerances and
//! runtime budgets are pinned below; a criterion that overruns its budget
//! fails.

mod gradient;

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shapephylo::config::PipelineConfig;
use shapephylo::encoder::{train, Architecture, EncoderParams, TrainConfig};
use shapephylo::fourier::{contour_coefficients, DESCRIPTOR_LEN};
use shapephylo::metrics::{align_score, bipartitions, random_baseline, rf_distance, LeafUniverse};
use shapephylo::newick::{parse_newick, write_newick};
use shapephylo::phylo::{neighbor_joining, upgma, DistanceMatrix};
use shapephylo::pipeline::{describe_contour, run_pipeline, PipelinePaths, PipelineReport};
use shapephylo::shape_io::{binarize_mask, extract_contours, largest_contour, Contour};
use shapephylo::synth::{
    base_coefficients, generate_dataset, generate_tree, outline, rasterize, BaseShape, EvolutionConfig,
    RASTER_SAMPLES, RASTER_SIZE,
};

const EXPECTED_PARAMS: usize = 103_028;
const EXPECTED_EFFECTIVE_BATCH: usize = 112;
const REPORT_TERMS: [usize; 4] = [20, 50, 100, 200];
/// K = 200 reconstruction rms as a fraction of the bounding-box diagonal.
const MAX_RMS_FRACTION: f64 = 0.01;
const BASELINE_LEAVES: usize = 50;
const BASELINE_TRIALS: usize = 100;
const BASELINE_MIN_NRF: f64 = 0.9;
const BASELINE_NAS_RANGE: (f64, f64) = (0.3, 0.9);
const PIPELINE_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
/// Required gap between the baseline mean nRF and the pipeline mean nRF.
const PIPELINE_NRF_GAP: f64 = 0.2;
const PIPELINE_MIN_NAS_WINS: usize = 3;
const GRADIENT_BATCHES: usize = 10;
const DFT_CONTOURS: usize = 20;
const DFT_SAMPLES: usize = 1024;
const DFT_TOL: f64 = 1e-10;
const METRIC_MAX_LEAVES: usize = 6;
const METRIC_TOL: f64 = 1e-12;
const RECOVERY_TREES: usize = 100;
const RECOVERY_MAX_LEAVES: usize = 12;
const RECOVERY_TOL: f64 = 1e-9;
const NEWICK_TREES: usize = 1000;
const NEWICK_MAX_LEAVES: usize = 215;
const NEWICK_PRECISION: usize = 6;

type Check = Result<(bool, String), String>;

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

struct Suite {
    failed: usize,
}

impl Suite {
    fn run(&mut self, id: usize, name: &str, budget: Duration, check: impl FnOnce() -> Check) -> Duration {
        let start = Instant::now();
        let outcome = check();
        let took = start.elapsed();
        let (ok, detail) = match outcome {
            Ok((ok, detail)) => (ok, detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let in_time = took <= budget;
        let pass = ok && in_time;
        if !pass {
            self.failed += 1;
        }
        let timing = format!("{:.2}s of {:.0}s", took.as_secs_f64(), budget.as_secs_f64());
        let timing = if in_time { timing } else { format!("{timing}, over budget") };
        println!(
            "{} {id:>2} {name}: {detail} [{timing}]",
            if pass { "PASS" } else { "FAIL" }
        );
        took
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn param_count() -> Check {
    let n = EncoderParams::init(Architecture::default(), 0).param_count();
    Ok((n == EXPECTED_PARAMS, format!("{n} (expected {EXPECTED_PARAMS})")))
}

fn descriptor_length() -> Check {
    let tree = generate_tree(16, 0).map_err(err)?;
    let data = generate_dataset(&tree, &EvolutionConfig::default(), true).map_err(err)?;
    let cfg = PipelineConfig::default();
    let mut lengths = Vec::new();
    for s in &data.specimens {
        let raster = s.raster.as_ref().ok_or("specimen without raster")?;
        let mask = binarize_mask(raster, cfg.threshold).map_err(err)?;
        let contour = largest_contour(&extract_contours(&mask).map_err(err)?).map_err(err)?;
        lengths.push(describe_contour(&contour, &cfg).map_err(err)?.0.len());
    }
    lengths.extend(data.records().iter().map(|r| r.values.len()));
    let bad = lengths.iter().filter(|&&l| l != DESCRIPTOR_LEN).count();
    Ok((
        bad == 0 && !lengths.is_empty(),
        format!(
            "{} descriptors (traced and generated), {bad} not of length {DESCRIPTOR_LEN}",
            lengths.len()
        ),
    ))
}

fn effective_batch() -> Check {
    let tree = generate_tree(16, 0).map_err(err)?;
    let data = generate_dataset(&tree, &EvolutionConfig::default(), false).map_err(err)?;
    let records = data.records();
    let rows: Vec<Vec<f64>> = records.iter().map(|r| r.values.clone()).collect();
    let labels: Vec<String> = records.iter().map(|r| r.species_id.clone()).collect();
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let (_, history) = train(&cfg, Architecture::default(), &rows, &labels).map_err(err)?;
    let line = history.log.first().cloned().unwrap_or_default();
    let expected = format!("8 x 14 accumulation = {EXPECTED_EFFECTIVE_BATCH} samples per optimizer step");
    let steps_ok = !history.samples_per_step.is_empty()
        && history.samples_per_step.iter().all(|&s| s == EXPECTED_EFFECTIVE_BATCH);
    Ok((
        line.contains(&expected) && steps_ok && cfg.effective_batch() == EXPECTED_EFFECTIVE_BATCH,
        format!(
            "log {line:?}; {} optimizer steps, samples per step {:?}",
            history.samples_per_step.len(),
            history.samples_per_step
        ),
    ))
}

fn reconstruction_ladder() -> Check {
    let fc = base_coefficients(BaseShape::BeetleTemplate, 100);
    let raster = rasterize(&outline(&fc, RASTER_SAMPLES), RASTER_SIZE).map_err(err)?;
    let cfg = PipelineConfig {
        report_terms: REPORT_TERMS.to_vec(),
        ..PipelineConfig::default()
    };
    let mask = binarize_mask(&raster, cfg.threshold).map_err(err)?;
    let contour = largest_contour(&extract_contours(&mask).map_err(err)?).map_err(err)?;
    let (_, reports) = describe_contour(&contour, &cfg).map_err(err)?;
    let rms: Vec<f64> = reports.iter().map(|r| r.rms_error).collect();
    let diag = contour.bounding_box_diagonal();
    let decreasing = rms.windows(2).all(|w| w[1] < w[0]);
    let last = *rms.last().ok_or("no report")?;
    Ok((
        decreasing && last < MAX_RMS_FRACTION * diag,
        format!(
            "rms {} px at K={REPORT_TERMS:?}; K=200 is {:.3}% of diagonal {diag:.1} (limit {}%)",
            rms.iter().map(|r| format!("{r:.4}")).collect::<Vec<_>>().join(" > "),
            100.0 * last / diag,
            100.0 * MAX_RMS_FRACTION
        ),
    ))
}

fn baseline_direction() -> Check {
    let truth = generate_tree(BASELINE_LEAVES, 0).map_err(err)?;
    let b = random_baseline(&truth, BASELINE_TRIALS, 0).map_err(err)?;
    let (lo, hi) = BASELINE_NAS_RANGE;
    Ok((
        b.nrf_mean >= BASELINE_MIN_NRF && b.nas_mean > lo && b.nas_mean < hi,
        format!(
            "{BASELINE_TRIALS} random trees on {BASELINE_LEAVES} leaves: nRF {:.3} +- {:.3} (need >= {BASELINE_MIN_NRF}), nAS {:.3} +- {:.3} (need in ({lo}, {hi}))",
            b.nrf_mean, b.nrf_ci95, b.nas_mean, b.nas_ci95
        ),
    ))
}

fn pipeline_runs(work: &Path) -> Result<Vec<PipelineReport>, String> {
    PIPELINE_SEEDS
        .iter()
        .map(|&seed| {
            let cfg = PipelineConfig {
                seed,
                ..PipelineConfig::default()
            };
            run_pipeline(&work.join(format!("seed{seed}")), &cfg)
                .map(|(report, _)| report)
                .map_err(|e| format!("seed {seed}: {e}"))
        })
        .collect()
}

fn pipeline_quality(reports: &[PipelineReport]) -> Check {
    let n = reports.len() as f64;
    let mean_nrf = reports.iter().map(|r| r.nrf).sum::<f64>() / n;
    let mean_base = reports.iter().map(|r| r.baseline.nrf_mean).sum::<f64>() / n;
    let wins = reports.iter().filter(|r| r.nas <= r.descriptor_nas).count();
    let per_seed: Vec<String> = reports
        .iter()
        .map(|r| format!("s{} nRF {:.3} nAS {:.3}/{:.3}", r.seed, r.nrf, r.nas, r.descriptor_nas))
        .collect();
    Ok((
        mean_nrf <= mean_base - PIPELINE_NRF_GAP && wins >= PIPELINE_MIN_NAS_WINS,
        format!(
            "mean nRF {mean_nrf:.3} vs baseline {mean_base:.3} (need gap >= {PIPELINE_NRF_GAP}); embedding nAS <= descriptor nAS on {wins}/{} seeds (need {PIPELINE_MIN_NAS_WINS}); {}",
            reports.len(),
            per_seed.join(", ")
        ),
    ))
}

fn gradient_oracle() -> Check {
    let s = gradient::check(GRADIENT_BATCHES);
    Ok((
        s.failures == 0 && s.inactive_batches == 0 && s.params == EXPECTED_PARAMS,
        format!(
            "{} batches x {} parameters, step {:e}: {} mismatches beyond {:e} relative; max relative {:.2e}; {} pairs within absolute {:e}; {} re-measured at a smaller step after a ReLU/hinge/mining switch; oracle loss within {:.1e} of library loss",
            s.batches,
            s.params,
            gradient::STEP,
            s.failures,
            gradient::REL_TOL,
            s.max_rel,
            s.floor_pairs,
            gradient::ABS_FLOOR,
            s.refined,
            s.loss_mismatch
        ),
    ))
}

fn dft_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let table = oracles::twiddles(DFT_SAMPLES);
    let harmonics = (DFT_SAMPLES - 1) / 2;
    let mut worst: f64 = 0.0;
    for _ in 0..DFT_CONTOURS {
        // star-shaped outline with random harmonics and jittered radii
        let terms: Vec<(f64, f64, f64)> = (2..12)
            .map(|k| (k as f64, rng.random_range(0.0..8.0), rng.random_range(0.0..6.3)))
            .collect();
        let cx = rng.random_range(50.0..200.0);
        let cy = rng.random_range(50.0..200.0);
        let points: Vec<[f64; 2]> = (0..DFT_SAMPLES)
            .map(|j| {
                let t = std::f64::consts::TAU * j as f64 / DFT_SAMPLES as f64;
                let r = 60.0
                    + terms.iter().map(|&(k, a, p)| a * (k * t + p).cos()).sum::<f64>()
                    + rng.random_range(-0.5..0.5);
                [cx + r * t.cos(), cy + r * t.sin()]
            })
            .collect();
        let contour = Contour::new(points).map_err(err)?;
        let fc = contour_coefficients(&contour, harmonics).map_err(err)?;
        let z: Vec<_> = contour
            .points()
            .iter()
            .map(|p| num_complex::Complex64::new(p[0], p[1]))
            .collect();
        for k in -(harmonics as i64)..=harmonics as i64 {
            let got = if k == 0 { fc.c0() } else { fc.get(k) };
            worst = worst.max((got - oracles::direct_dft(&z, k, &table)).norm());
        }
    }
    Ok((
        worst <= DFT_TOL,
        format!(
            "{DFT_CONTOURS} contours, M={DFT_SAMPLES}, k in +-{harmonics}: max |fft - direct| {worst:.2e} (limit {DFT_TOL:e})"
        ),
    ))
}

fn metric_oracle() -> Check {
    let mut pairs = 0usize;
    let mut worst_nrf: f64 = 0.0;
    let mut worst_nas: f64 = 0.0;
    let mut raw_mismatch = 0usize;
    let mut split_mismatch = 0usize;
    for n in 3..=METRIC_MAX_LEAVES {
        let rooted = oracles::rooted_topologies(n);
        // every rooted tree against every unrooted topology covers all
        // pairs of unrooted topologies and every rooting of the first tree
        let reps = if n < METRIC_MAX_LEAVES {
            rooted.clone()
        } else {
            oracles::unrooted_topologies(n)
        };
        let prep = |ts: &[oracles::T]| -> Result<Vec<_>, String> {
            ts.iter()
                .map(|t| Ok((oracles::to_phylo(t), oracles::splits_by_quartets(t, n))))
                .collect()
        };
        let a = prep(&rooted)?;
        let b = prep(&reps)?;
        for (t1, s1) in &a {
            // library bipartitions against the quartet oracle
            let universe = LeafUniverse::of(t1).map_err(err)?;
            let lib: Vec<u32> = bipartitions(t1, &universe)
                .map_err(err)?
                .iter()
                .map(|bp| {
                    let side: u32 = (0..n)
                        .filter(|&i| bp.contains(universe.labels().iter().position(|l| *l == oracles::leaf_name(i)).unwrap()))
                        .map(|i| 1u32 << i)
                        .sum();
                    if side & 1 == 1 {
                        side
                    } else {
                        ((1u32 << n) - 1) & !side
                    }
                })
                .collect();
            if lib.len() != s1.len() || lib.iter().any(|m| !s1.contains(m)) {
                split_mismatch += 1;
            }
            for (t2, s2) in &b {
                pairs += 1;
                let (raw, nrf) = rf_distance(t1, t2).map_err(err)?;
                let (oraw, onrf) = oracles::nrf(s1, s2);
                if raw != oraw {
                    raw_mismatch += 1;
                }
                worst_nrf = worst_nrf.max((nrf - onrf).abs());
                if s1.is_empty() {
                    if align_score(t1, t2).is_ok() {
                        return Err(format!("align score accepted {n}-leaf trees without internal edges"));
                    }
                } else {
                    let score = align_score(t1, t2).map_err(err)?;
                    worst_nas = worst_nas.max((score.nas - oracles::nas(s1, s2, n)).abs());
                }
            }
        }
    }
    Ok((
        raw_mismatch == 0 && split_mismatch == 0 && worst_nrf <= METRIC_TOL && worst_nas <= METRIC_TOL,
        format!(
            "{pairs} tree pairs on 3..={METRIC_MAX_LEAVES} leaves: {split_mismatch} split-set and {raw_mismatch} raw RF mismatches, max |nRF diff| {worst_nrf:.1e}, max |nAS diff| {worst_nas:.1e} (limit {METRIC_TOL:e})"
        ),
    ))
}

fn distances_match(tree: &shapephylo::tree::PhyloTree, d: &[Vec<f64>]) -> f64 {
    let got = oracles::patristic(tree);
    let mut worst: f64 = 0.0;
    for (i, row) in d.iter().enumerate() {
        for (j, &want) in row.iter().enumerate().skip(i + 1) {
            let (a, b) = (oracles::leaf_name(i), oracles::leaf_name(j));
            let key = if a < b { (a, b) } else { (b, a) };
            worst = worst.max(got.get(&key).map_or(f64::INFINITY, |g| (g - want).abs()));
        }
    }
    worst
}

fn recovery() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut topo_fail = [0usize; 2];
    let mut worst = [0.0f64; 2];
    for i in 0..RECOVERY_TREES {
        let n = 3 + i % (RECOVERY_MAX_LEAVES - 2);
        let labels: Vec<String> = (0..n).map(oracles::leaf_name).collect();

        let (truth, d) = oracles::ultrametric_case(n, &mut rng);
        let est = upgma(&DistanceMatrix::new(labels.clone(), d.clone()).map_err(err)?).map_err(err)?;
        if rf_distance(&truth, &est).map_err(err)?.0 != 0 {
            topo_fail[0] += 1;
        }
        worst[0] = worst[0].max(distances_match(&est, &d));

        let topo = oracles::random_topology(n, &mut rng);
        let (truth, d) = oracles::additive_case(&topo, n, &mut rng);
        let est = neighbor_joining(&DistanceMatrix::new(labels, d.clone()).map_err(err)?).map_err(err)?;
        if rf_distance(&truth, &est).map_err(err)?.0 != 0 {
            topo_fail[1] += 1;
        }
        worst[1] = worst[1].max(distances_match(&est, &d));
    }
    Ok((
        topo_fail == [0, 0] && worst[0] <= RECOVERY_TOL && worst[1] <= RECOVERY_TOL,
        format!(
            "{RECOVERY_TREES} trees each, 3..={RECOVERY_MAX_LEAVES} leaves: UPGMA {} topology misses, max path error {:.1e}; NJ {} misses, max path error {:.1e} (limit {RECOVERY_TOL:e})",
            topo_fail[0], worst[0], topo_fail[1], worst[1]
        ),
    ))
}

fn newick_round_trip() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let tol = 0.5 * 10f64.powi(-(NEWICK_PRECISION as i32)) + 1e-12;
    let mut split_fail = 0;
    let mut worst: f64 = 0.0;
    let mut max_n = 0;
    for i in 0..NEWICK_TREES {
        let n = 2 + i * (NEWICK_MAX_LEAVES - 2) / (NEWICK_TREES - 1);
        max_n = max_n.max(n);
        // every tenth tree uses labels that need quoting
        let labels: Vec<String> = (0..n)
            .map(|j| if i % 10 == 0 { format!("sp {j}'x") } else { format!("sp{j}") })
            .collect();
        let mut tree = shapephylo::metrics::random_binary_tree(&labels, i as u64).map_err(err)?;
        for id in 0..tree.len() {
            if tree.node(id).parent.is_some() {
                tree.node_mut(id).length = Some(rng.random_range(0.0..3.0));
            }
        }
        let back = parse_newick(&write_newick(&tree, NEWICK_PRECISION)).map_err(err)?;
        let universe = LeafUniverse::of(&tree).map_err(err)?;
        if bipartitions(&tree, &universe).map_err(err)? != bipartitions(&back, &universe).map_err(err)? {
            split_fail += 1;
        }
        let (a, b) = (oracles::clade_lengths(&tree), oracles::clade_lengths(&back));
        if a.len() != b.len() {
            split_fail += 1;
            continue;
        }
        for (clade, len) in &a {
            match (len, b.get(clade)) {
                (Some(x), Some(Some(y))) => worst = worst.max((x - y).abs()),
                _ => worst = f64::INFINITY,
            }
        }
    }
    Ok((
        split_fail == 0 && worst <= tol,
        format!(
            "{NEWICK_TREES} trees up to {max_n} leaves: {split_fail} bipartition mismatches, max length error {worst:.1e} (limit {tol:.1e} at {NEWICK_PRECISION} decimals)"
        ),
    ))
}

fn determinism(first: &Path, work: &Path) -> Check {
    let cfg = PipelineConfig::default();
    let second = work.join("repeat");
    run_pipeline(&second, &cfg).map_err(err)?;
    let (a, b) = (PipelinePaths::new(first), PipelinePaths::new(&second));
    let mut differing = Vec::new();
    for (name, x, y) in [
        ("descriptors", &a.descriptors, &b.descriptors),
        ("embeddings", &a.embeddings, &b.embeddings),
        ("tree", &a.tree, &b.tree),
        ("score", &a.score, &b.score),
    ] {
        if fs::read(x).map_err(err)? != fs::read(y).map_err(err)? {
            differing.push(name);
        }
    }
    Ok((
        differing.is_empty(),
        format!("seed 0 run twice: descriptor, embedding, tree and score files differing: {differing:?}"),
    ))
}

fn main() -> ExitCode {
    let mut suite = Suite { failed: 0 };
    suite.run(1, "parameter count", secs(1), param_count);
    suite.run(2, "descriptor length", secs(5), descriptor_length);
    suite.run(3, "effective batch", secs(5), effective_batch);
    suite.run(4, "reconstruction ladder", secs(1), reconstruction_ladder);
    suite.run(5, "random baseline", secs(10), baseline_direction);

    let work = tempfile::tempdir().expect("temporary directory");
    let mut reports = Err(String::new());
    let pipeline_time = suite.run(6, "synthetic pipeline", secs(300), || {
        reports = pipeline_runs(work.path());
        pipeline_quality(reports.as_ref().map_err(Clone::clone)?)
    });

    suite.run(7, "gradient oracle", secs(60), gradient_oracle);
    suite.run(8, "DFT oracle", secs(5), dft_oracle);
    suite.run(9, "metric oracles", secs(10), metric_oracle);
    suite.run(10, "UPGMA/NJ recovery", secs(10), recovery);
    suite.run(11, "Newick round trip", secs(10), newick_round_trip);
    suite.run(12, "determinism", (2 * pipeline_time).max(secs(1)), || {
        reports.as_ref().map_err(|e| format!("pipeline runs failed: {e}"))?;
        determinism(&work.path().join("seed0"), work.path())
    });

    if suite.failed == 0 {
        println!("all 12 criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("{} of 12 criteria fail", suite.failed);
        ExitCode::FAILURE
    }
}
