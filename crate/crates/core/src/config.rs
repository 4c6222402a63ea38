//! Flat `key = value` configuration shared by every stage.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::encoder::{Mining, TrainConfig};
use crate::error::{Error, Result};
use crate::fourier::{Truncation, DEFAULT_HARMONICS};
use crate::phylo::{Metric, TreeMethod};
use crate::shape_io::{DEFAULT_RESAMPLE_POINTS, DEFAULT_THRESHOLD};
use crate::synth::{BaseShape, EvolutionConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub threshold: u8,
    pub resample_points: usize,
    pub harmonics: usize,
    pub truncation: Truncation,
    /// Term counts of the reconstruction report; empty disables it.
    pub report_terms: Vec<usize>,
    pub suspect_threshold: f64,
    pub epochs: usize,
    pub mini_batch: usize,
    pub accumulation_steps: usize,
    pub margin: f64,
    pub learning_rate: f64,
    pub mining: Mining,
    pub normalize_embeddings: bool,
    pub standardize: bool,
    pub tree_method: TreeMethod,
    pub metric: Metric,
    pub newick_precision: usize,
    pub n_species: usize,
    pub per_species: usize,
    pub branch_sigma: f64,
    pub within_sigma: f64,
    pub base_shape: BaseShape,
    pub baseline_trials: usize,
    /// Image dataset for the pipeline; a synthetic one is generated when unset.
    pub data_dir: Option<PathBuf>,
    /// Ground truth for `data_dir`.
    pub truth: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let evo = EvolutionConfig::default();
        let train = TrainConfig::default();
        PipelineConfig {
            seed: 0,
            threshold: DEFAULT_THRESHOLD,
            resample_points: DEFAULT_RESAMPLE_POINTS,
            harmonics: DEFAULT_HARMONICS,
            truncation: Truncation::Amplitude,
            report_terms: vec![20, 50, 100, 200],
            suspect_threshold: 3.0,
            epochs: train.epochs,
            mini_batch: train.mini_batch,
            accumulation_steps: train.accumulation_steps,
            margin: train.margin,
            learning_rate: train.learning_rate,
            mining: train.mining,
            normalize_embeddings: train.normalize_embeddings,
            standardize: train.standardize,
            tree_method: TreeMethod::Upgma,
            metric: Metric::Euclidean,
            newick_precision: 6,
            n_species: evo.n_species,
            per_species: evo.per_species,
            branch_sigma: evo.branch_sigma,
            within_sigma: evo.within_sigma,
            base_shape: evo.base_shape,
            baseline_trials: 100,
            data_dir: None,
            truth: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key} = {value:?}: expected true or false"))),
    }
}

impl PipelineConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| e.context(format!("line {}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::UnreadableFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_text(&text).map_err(|e| e.context(path.display().to_string()))
    }

    /// Applies one setting; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "threshold" => self.threshold = parse(key, value)?,
            "resample_points" => self.resample_points = parse(key, value)?,
            "harmonics" => self.harmonics = parse(key, value)?,
            "truncation" => self.truncation = parse(key, value)?,
            "report_terms" => {
                self.report_terms = if value.is_empty() || value == "none" {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|v| parse(key, v.trim()))
                        .collect::<Result<Vec<usize>>>()?
                };
            }
            "suspect_threshold" => self.suspect_threshold = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "mini_batch" => self.mini_batch = parse(key, value)?,
            "accumulation_steps" => self.accumulation_steps = parse(key, value)?,
            "margin" => self.margin = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "mining" => self.mining = parse(key, value)?,
            "normalize_embeddings" => self.normalize_embeddings = parse_bool(key, value)?,
            "standardize" => self.standardize = parse_bool(key, value)?,
            "tree_method" => self.tree_method = parse(key, value)?,
            "metric" => self.metric = parse(key, value)?,
            "newick_precision" => self.newick_precision = parse(key, value)?,
            "n_species" => self.n_species = parse(key, value)?,
            "per_species" => self.per_species = parse(key, value)?,
            "branch_sigma" => self.branch_sigma = parse(key, value)?,
            "within_sigma" => self.within_sigma = parse(key, value)?,
            "base_shape" => self.base_shape = parse(key, value)?,
            "baseline_trials" => self.baseline_trials = parse(key, value)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "truth" => self.truth = Some(PathBuf::from(value)),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.harmonics == 0 {
            return bad("harmonics must be at least 1".into());
        }
        if self.resample_points <= 2 * self.harmonics {
            return bad(format!(
                "resample_points {} must exceed twice the harmonics ({})",
                self.resample_points, self.harmonics
            ));
        }
        let max_terms = 2 * self.harmonics;
        if let Some(k) = self.report_terms.iter().find(|&&k| k == 0 || k > max_terms) {
            return bad(format!("report term count {k} outside 1..={max_terms}"));
        }
        if !(self.suspect_threshold > 0.0) || !self.suspect_threshold.is_finite() {
            return bad(format!("suspect_threshold {} must be positive", self.suspect_threshold));
        }
        if !(1..=17).contains(&self.newick_precision) {
            return bad(format!("newick_precision {} outside 1..=17", self.newick_precision));
        }
        if self.baseline_trials < 2 {
            return bad(format!("baseline_trials {} must be at least 2", self.baseline_trials));
        }
        if self.truth.is_some() != self.data_dir.is_some() {
            return bad("data_dir and truth must be given together".into());
        }
        self.train_config()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.evolution_config()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn descriptor_len(&self) -> usize {
        2 + 4 * self.harmonics
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            mini_batch: self.mini_batch,
            accumulation_steps: self.accumulation_steps,
            per_class: TrainConfig::default().per_class,
            margin: self.margin,
            learning_rate: self.learning_rate,
            seed: self.seed,
            mining: self.mining,
            normalize_embeddings: self.normalize_embeddings,
            standardize: self.standardize,
        }
    }

    pub fn evolution_config(&self) -> EvolutionConfig {
        EvolutionConfig {
            n_species: self.n_species,
            per_species: self.per_species,
            branch_sigma: self.branch_sigma,
            within_sigma: self.within_sigma,
            seed: self.seed,
            base_shape: self.base_shape,
            harmonics: self.harmonics,
        }
    }
}
