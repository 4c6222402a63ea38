//! File-level stages: images to masks and contours, contours to descriptors,
//! training, embedding, tree building, scoring, and their chaining.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::PipelineConfig;
use crate::encoder::io::write_history;
use crate::encoder::{embed, read_checkpoint, train, write_checkpoint, Architecture, EmbeddingMatrix, TrainHistory};
use crate::error::{Error, Result};
use crate::fourier::{
    assemble_descriptor, contour_coefficients, read_descriptor_csv, reconstruction_error, write_descriptor_csv,
    DescriptorRecord, ReconstructionReport,
};
use crate::metrics::{compare, matching_csv, random_baseline, BaselineSummary, TreeScore};
use crate::newick::{read_newick_file, write_newick_file};
use crate::phylo::{build_tree, distance_matrix, species_centroids};
use crate::shape_io::{
    binarize_mask, extract_contours, largest_contour, load_grayscale, resample_contour, scan_dataset, Contour,
};
use crate::synth::{generate_dataset, generate_tree, SyntheticDataset};
use crate::tree::PhyloTree;

pub const IMAGE_EXTENSIONS: &[&str] = &["png", "pgm", "ppm", "pbm", "pnm"];
pub const CONTOUR_EXTENSION: &str = "contour";

fn create_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(())
}

#[derive(Debug, Default)]
pub struct MaskSummary {
    pub processed: usize,
    pub failures: Vec<(PathBuf, Error)>,
}

impl MaskSummary {
    pub fn line(&self) -> String {
        format!("processed {}, failed {}", self.processed, self.failures.len())
    }
}

fn mask_one(path: &Path, mask_path: &Path, contour_path: &Path, threshold: u8) -> Result<()> {
    let img = load_grayscale(path)?;
    let mask = binarize_mask(&img, threshold)?;
    mask.to_image().save_png(mask_path)?;
    let contour = largest_contour(&extract_contours(&mask)?)?;
    contour.write(contour_path)
}

/// Writes `masks/<split>/<species>/<specimen>.png` and
/// `contours/<split>/<species>/<specimen>.contour` under `out_dir` for every
/// image under `in_dir`. Per-image failures are collected, not fatal.
pub fn run_mask(in_dir: &Path, out_dir: &Path, cfg: &PipelineConfig) -> Result<MaskSummary> {
    let entries = scan_dataset(in_dir, IMAGE_EXTENSIONS)?;
    let mut summary = MaskSummary::default();
    for e in entries {
        let mask_dir = out_dir.join("masks").join(&e.split).join(&e.species);
        let contour_dir = out_dir.join("contours").join(&e.split).join(&e.species);
        fs::create_dir_all(&mask_dir)?;
        fs::create_dir_all(&contour_dir)?;
        let result = mask_one(
            &e.path,
            &mask_dir.join(format!("{}.png", e.specimen)),
            &contour_dir.join(format!("{}.{CONTOUR_EXTENSION}", e.specimen)),
            cfg.threshold,
        );
        match result {
            Ok(()) => summary.processed += 1,
            Err(err) => summary.failures.push((e.path, err)),
        }
    }
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpecimenReport {
    pub specimen_id: String,
    pub species_id: String,
    pub reports: Vec<ReconstructionReport>,
    pub suspect: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FourierOutput {
    pub records: Vec<DescriptorRecord>,
    pub reports: Vec<SpecimenReport>,
}

impl FourierOutput {
    pub fn suspects(&self) -> impl Iterator<Item = &SpecimenReport> {
        self.reports.iter().filter(|r| r.suspect)
    }

    /// `specimen_id,species_id,terms,rms_error,max_error,suspect`.
    pub fn report_csv(&self) -> String {
        let mut out = String::from("specimen_id,species_id,terms,rms_error,max_error,suspect\n");
        for s in &self.reports {
            for r in &s.reports {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    s.specimen_id, s.species_id, r.terms, r.rms_error, r.max_error, s.suspect
                ));
            }
        }
        out
    }
}

/// Descriptor of one contour after arc-length resampling, plus the
/// reconstruction reports for `report_terms`.
pub fn describe_contour(contour: &Contour, cfg: &PipelineConfig) -> Result<(Vec<f64>, Vec<ReconstructionReport>)> {
    let resampled = resample_contour(contour, cfg.resample_points)?;
    let fc = contour_coefficients(&resampled, cfg.harmonics)?;
    let reports = cfg
        .report_terms
        .iter()
        .map(|&k| reconstruction_error(&resampled, &fc, k, cfg.truncation))
        .collect::<Result<Vec<_>>>()?;
    Ok((assemble_descriptor(&fc), reports))
}

/// Descriptors for every contour file under `contour_dir`, written to
/// `out_file` as CSV.
pub fn run_fourier(contour_dir: &Path, out_file: &Path, cfg: &PipelineConfig) -> Result<FourierOutput> {
    let entries = scan_dataset(contour_dir, &[CONTOUR_EXTENSION])?;
    let mut out = FourierOutput {
        records: Vec::with_capacity(entries.len()),
        reports: Vec::new(),
    };
    for e in entries {
        let contour = Contour::read(&e.path).map_err(|err| err.context(e.path.display().to_string()))?;
        let (values, reports) =
            describe_contour(&contour, cfg).map_err(|err| err.context(e.path.display().to_string()))?;
        if !reports.is_empty() {
            let suspect = reports.iter().any(|r| r.is_suspect(cfg.suspect_threshold));
            out.reports.push(SpecimenReport {
                specimen_id: e.specimen.clone(),
                species_id: e.species.clone(),
                reports,
                suspect,
            });
        }
        out.records.push(DescriptorRecord {
            specimen_id: e.specimen,
            species_id: e.species,
            values,
        });
    }
    create_parent(out_file)?;
    write_descriptor_csv(out_file, &out.records)?;
    Ok(out)
}

pub fn history_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("history.csv")
}

fn split_records(records: Vec<DescriptorRecord>) -> (Vec<String>, Vec<String>, Vec<Vec<f64>>) {
    let mut ids = Vec::with_capacity(records.len());
    let mut species = Vec::with_capacity(records.len());
    let mut rows = Vec::with_capacity(records.len());
    for r in records {
        ids.push(r.specimen_id);
        species.push(r.species_id);
        rows.push(r.values);
    }
    (ids, species, rows)
}

/// Trains on a descriptor CSV; writes the checkpoint and its history CSV.
pub fn run_train(descriptors: &Path, checkpoint: &Path, cfg: &PipelineConfig) -> Result<TrainHistory> {
    let records = read_descriptor_csv(descriptors)?;
    if records.is_empty() {
        return Err(Error::Empty("descriptor records"));
    }
    let (_, species, rows) = split_records(records);
    let mut arch = Architecture::default();
    arch.dims[0] = rows[0].len();
    let (params, history) = train(&cfg.train_config(), arch, &rows, &species).map_err(|e| e.context("train"))?;
    create_parent(checkpoint)?;
    write_checkpoint(checkpoint, &params)?;
    write_history(&history_path(checkpoint), &history)?;
    Ok(history)
}

pub fn run_embed(checkpoint: &Path, descriptors: &Path, out_file: &Path) -> Result<EmbeddingMatrix> {
    let params = read_checkpoint(checkpoint)?;
    let (specimen_ids, species_ids, rows) = split_records(read_descriptor_csv(descriptors)?);
    let rows = embed(&params, &rows).map_err(|e| e.context("embed"))?;
    let m = EmbeddingMatrix {
        specimen_ids,
        species_ids,
        rows,
    };
    create_parent(out_file)?;
    m.write(out_file)?;
    Ok(m)
}

/// Species tree from per-specimen rows (embeddings or raw descriptors).
pub fn tree_from_rows(species: &[String], rows: &[Vec<f64>], cfg: &PipelineConfig) -> Result<PhyloTree> {
    let (labels, centroids) = species_centroids(species, rows)?;
    let d = distance_matrix(&labels, &centroids, cfg.metric)?;
    build_tree(&d, cfg.tree_method)
}

/// Reads either an embedding CSV or a descriptor CSV.
fn read_rows(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::UnreadableFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if text.starts_with("specimen_id,species_id,e0") {
        let m = EmbeddingMatrix::from_csv(&text)?;
        Ok((m.species_ids, m.rows))
    } else {
        let (_, species, rows) = split_records(read_descriptor_csv(path)?);
        Ok((species, rows))
    }
}

/// Builds the species tree of an embedding or descriptor CSV and writes it as
/// Newick.
pub fn run_tree(rows_file: &Path, out_file: &Path, cfg: &PipelineConfig) -> Result<PhyloTree> {
    let (species, rows) = read_rows(rows_file)?;
    let tree = tree_from_rows(&species, &rows, cfg).map_err(|e| e.context("tree"))?;
    create_parent(out_file)?;
    write_newick_file(out_file, &tree, cfg.newick_precision)?;
    Ok(tree)
}

pub fn run_compare(estimated: &Path, truth: &Path, matching_out: Option<&Path>) -> Result<TreeScore> {
    let t1 = read_newick_file(estimated)?;
    let t2 = read_newick_file(truth)?;
    let score = compare(&t1, &t2).map_err(|e| e.context("compare"))?;
    if let Some(path) = matching_out {
        create_parent(path)?;
        fs::write(path, matching_csv(&t1, &t2, &score)?)?;
    }
    Ok(score)
}

/// Generates and writes a rasterized synthetic dataset.
pub fn run_synth(out_dir: &Path, cfg: &PipelineConfig) -> Result<SyntheticDataset> {
    let truth = generate_tree(cfg.n_species, cfg.seed)?;
    let ds = generate_dataset(&truth, &cfg.evolution_config(), true).map_err(|e| e.context("synth"))?;
    ds.write(out_dir)?;
    Ok(ds)
}

pub fn run_baseline(truth: &Path, cfg: &PipelineConfig) -> Result<BaselineSummary> {
    let t = read_newick_file(truth)?;
    random_baseline(&t, cfg.baseline_trials, cfg.seed)
}

/// Final record of a pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineReport {
    pub seed: u64,
    pub specimens: usize,
    pub failed_images: usize,
    pub species: usize,
    #[serde(rename = "nAS")]
    pub nas: f64,
    #[serde(rename = "nRF")]
    pub nrf: f64,
    pub raw_rf: usize,
    #[serde(rename = "descriptor_nAS")]
    pub descriptor_nas: f64,
    #[serde(rename = "descriptor_nRF")]
    pub descriptor_nrf: f64,
    pub baseline: BaselineSummary,
    pub first_epoch_loss: f64,
    pub last_epoch_loss: f64,
}

impl PipelineReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain data serializes")
    }
}

/// Artifact locations inside a pipeline work directory.
pub struct PipelinePaths {
    pub synth: PathBuf,
    pub descriptors: PathBuf,
    pub reconstruction: PathBuf,
    pub checkpoint: PathBuf,
    pub embeddings: PathBuf,
    pub tree: PathBuf,
    pub descriptor_tree: PathBuf,
    pub matching: PathBuf,
    pub score: PathBuf,
}

impl PipelinePaths {
    pub fn new(work: &Path) -> Self {
        PipelinePaths {
            synth: work.join("synth"),
            descriptors: work.join("descriptors.csv"),
            reconstruction: work.join("reconstruction.csv"),
            checkpoint: work.join("encoder.dseq"),
            embeddings: work.join("embeddings.csv"),
            tree: work.join("tree.nwk"),
            descriptor_tree: work.join("descriptor_tree.nwk"),
            matching: work.join("matching.csv"),
            score: work.join("score.json"),
        }
    }
}

/// Runs every stage in `work`. Without `data_dir` a synthetic dataset is
/// generated first. Besides the embedding tree, a tree on the raw
/// descriptors is scored for reference.
pub fn run_pipeline(work: &Path, cfg: &PipelineConfig) -> Result<(PipelineReport, MaskSummary)> {
    cfg.validate()?;
    fs::create_dir_all(work)?;
    let paths = PipelinePaths::new(work);
    let (images, truth_path) = match (&cfg.data_dir, &cfg.truth) {
        (Some(dir), Some(truth)) => (dir.clone(), truth.clone()),
        _ => {
            run_synth(&paths.synth, cfg)?;
            (paths.synth.join("images"), paths.synth.join("ground_truth.nwk"))
        }
    };
    let masks = run_mask(&images, work, cfg).map_err(|e| e.context("mask"))?;
    let fourier = run_fourier(&work.join("contours"), &paths.descriptors, cfg).map_err(|e| e.context("fourier"))?;
    if !fourier.reports.is_empty() {
        fs::write(&paths.reconstruction, fourier.report_csv())?;
    }
    let history = run_train(&paths.descriptors, &paths.checkpoint, cfg)?;
    run_embed(&paths.checkpoint, &paths.descriptors, &paths.embeddings)?;
    run_tree(&paths.embeddings, &paths.tree, cfg)?;
    run_tree(&paths.descriptors, &paths.descriptor_tree, cfg)?;
    let score = run_compare(&paths.tree, &truth_path, Some(&paths.matching))?;
    let descriptor_score = run_compare(&paths.descriptor_tree, &truth_path, None)?;
    let baseline = run_baseline(&truth_path, cfg).map_err(|e| e.context("baseline"))?;
    let report = PipelineReport {
        seed: cfg.seed,
        specimens: fourier.records.len(),
        failed_images: masks.failures.len(),
        species: score.n_leaves,
        nas: score.nas,
        nrf: score.nrf,
        raw_rf: score.raw_rf,
        descriptor_nas: descriptor_score.nas,
        descriptor_nrf: descriptor_score.nrf,
        baseline,
        first_epoch_loss: history.epoch_losses[0],
        last_epoch_loss: *history.epoch_losses.last().expect("at least one epoch"),
    };
    fs::write(&paths.score, report.to_json() + "\n")?;
    Ok((report, masks))
}
