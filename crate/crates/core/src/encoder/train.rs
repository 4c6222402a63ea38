//! Class-balanced triplet training with gradient accumulation.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{l2_normalize_backward, l2_normalize_rows, triplet_loss, Mining};
use super::model::{Architecture, EncoderParams, Mode};
use super::optim::AdamState;
use crate::error::{Error, Result};

// Separates the sampler stream from the initialization stream.
const SAMPLER_STREAM: u64 = 0x5eed_0f_5a_3b_1e;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub mini_batch: usize,
    pub accumulation_steps: usize,
    /// Specimens drawn per species in each mini-batch.
    pub per_class: usize,
    pub margin: f64,
    pub learning_rate: f64,
    pub seed: u64,
    pub mining: Mining,
    /// Project embeddings onto the unit sphere before the loss.
    pub normalize_embeddings: bool,
    /// Z-score every descriptor dimension before training.
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            mini_batch: 8,
            accumulation_steps: 14,
            per_class: 2,
            margin: 0.2,
            learning_rate: 1e-4,
            seed: 0,
            mining: Mining::BatchHard,
            normalize_embeddings: false,
            standardize: false,
        }
    }
}

impl TrainConfig {
    pub fn effective_batch(&self) -> usize {
        self.mini_batch * self.accumulation_steps
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Precondition(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.accumulation_steps == 0 {
            return bad("accumulation steps must be at least 1".into());
        }
        if self.per_class < 2 || self.mini_batch % self.per_class != 0 || self.mini_batch / self.per_class < 2 {
            return bad(format!(
                "mini-batch {} must hold at least two species of {} specimens",
                self.mini_batch, self.per_class
            ));
        }
        if !(self.margin > 0.0) || !self.margin.is_finite() {
            return bad(format!("margin {} must be positive", self.margin));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        Ok(())
    }

    /// Mini-batches per epoch: one pass worth of samples, rounded up to a
    /// whole number of optimizer steps.
    pub fn batches_per_epoch(&self, samples: usize) -> usize {
        let passes = samples.div_ceil(self.mini_batch).max(1);
        passes.div_ceil(self.accumulation_steps) * self.accumulation_steps
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    /// Mean mini-batch loss of every epoch.
    pub epoch_losses: Vec<f64>,
    /// Samples that contributed to each optimizer step.
    pub samples_per_step: Vec<usize>,
    /// Mini-batches without any valid triplet.
    pub empty_batches: usize,
    pub log: Vec<String>,
}

impl TrainHistory {
    pub fn optimizer_steps(&self) -> usize {
        self.samples_per_step.len()
    }

    /// `epoch,mean_loss` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss\n");
        for (i, l) in self.epoch_losses.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i + 1, l));
        }
        out
    }
}

/// Species-indexed view of the training set.
struct ClassIndex {
    members: Vec<Vec<usize>>,
}

impl ClassIndex {
    fn build(labels: &[String], per_class: usize) -> Result<(Self, Vec<usize>)> {
        let mut ids: BTreeMap<&str, usize> = BTreeMap::new();
        for l in labels {
            let next = ids.len();
            ids.entry(l).or_insert(next);
        }
        // sorted species order gives stable class ids
        let order: BTreeMap<&str, usize> = ids.keys().enumerate().map(|(i, k)| (*k, i)).collect();
        let class_of: Vec<usize> = labels.iter().map(|l| order[l.as_str()]).collect();
        let mut members = vec![Vec::new(); order.len()];
        for (i, &c) in class_of.iter().enumerate() {
            members[c].push(i);
        }
        if members.len() < 2 {
            return Err(Error::Precondition(format!(
                "{} species in the training set, need at least 2",
                members.len()
            )));
        }
        if let Some((name, m)) = order.keys().zip(&members).find(|(_, m)| m.len() < per_class) {
            return Err(Error::Precondition(format!(
                "species {name} has {} specimens, need at least {per_class}",
                m.len()
            )));
        }
        Ok((ClassIndex { members }, class_of))
    }

    fn sample(&self, classes: usize, per_class: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut chosen: Vec<usize> = (0..self.members.len()).collect();
        chosen.shuffle(rng);
        chosen.truncate(classes.min(self.members.len()));
        let mut batch = Vec::with_capacity(chosen.len() * per_class);
        for c in chosen {
            let picks: Vec<&usize> = self.members[c].choose_multiple(rng, per_class).collect();
            batch.extend(picks.into_iter().copied());
        }
        batch
    }
}

/// Per-dimension mean and standard deviation (population); zero deviations
/// are replaced by 1.
pub fn column_moments(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let dim = rows.first().map_or(0, Vec::len);
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut sd = vec![0.0; dim];
    for r in rows {
        for ((s, v), m) in sd.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    for s in &mut sd {
        *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
    }
    (mean, sd)
}

/// Trains a fresh encoder of the given architecture.
pub fn train(
    config: &TrainConfig,
    arch: Architecture,
    descriptors: &[Vec<f64>],
    labels: &[String],
) -> Result<(EncoderParams, TrainHistory)> {
    config.validate()?;
    if descriptors.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} descriptors for {} labels",
            descriptors.len(),
            labels.len()
        )));
    }
    let dim = arch.input_dim();
    if let Some(r) = descriptors.iter().find(|r| r.len() != dim) {
        return Err(Error::Shape(format!("descriptor of length {}, expected {dim}", r.len())));
    }
    let (classes, class_of) = ClassIndex::build(labels, config.per_class)?;
    let standardization = config.standardize.then(|| column_moments(descriptors));
    let inputs: Vec<Vec<f64>> = match &standardization {
        Some((mean, sd)) => descriptors
            .iter()
            .map(|r| r.iter().zip(mean).zip(sd).map(|((v, m), s)| (v - m) / s).collect())
            .collect(),
        None => descriptors.to_vec(),
    };
    let out_dim = arch.output_dim();
    let mut params = EncoderParams::init(arch, config.seed);
    let mut adam = AdamState::new(params.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SAMPLER_STREAM);
    let mut history = TrainHistory::default();
    history.log.push(format!(
        "effective batch: {} x {} accumulation = {} samples per optimizer step",
        config.mini_batch,
        config.accumulation_steps,
        config.effective_batch()
    ));
    let per_epoch = config.batches_per_epoch(inputs.len());
    let classes_per_batch = config.mini_batch / config.per_class;
    let mut accumulated = vec![0.0; params.param_count()];
    let mut pending_batches = 0usize;
    let mut pending_samples = 0usize;
    for epoch in 0..config.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..per_epoch {
            let batch = classes.sample(classes_per_batch, config.per_class, &mut rng);
            let x: Vec<f64> = batch.iter().flat_map(|&i| inputs[i].iter().copied()).collect();
            let batch_labels: Vec<usize> = batch.iter().map(|&i| class_of[i]).collect();
            let (emb, cache) = params.forward(&x, batch.len(), Mode::Train)?;
            params.update_running_stats(&cache);
            let out = if config.normalize_embeddings {
                let (unit, norms) = l2_normalize_rows(&emb, out_dim);
                let mut o = triplet_loss(&unit, &batch_labels, out_dim, config.margin, config.mining, &mut rng)?;
                o.grad = l2_normalize_backward(&unit, &norms, &o.grad, out_dim);
                o
            } else {
                triplet_loss(&emb, &batch_labels, out_dim, config.margin, config.mining, &mut rng)?
            };
            if out.valid_anchors == 0 {
                history.empty_batches += 1;
                history
                    .log
                    .push(format!("epoch {}: mini-batch without a valid triplet", epoch + 1));
            }
            epoch_loss += out.loss;
            let (grads, _) = params.backward(&cache, &out.grad)?;
            for (a, g) in accumulated.iter_mut().zip(&grads) {
                *a += g;
            }
            pending_batches += 1;
            pending_samples += batch.len();
            if pending_batches == config.accumulation_steps {
                let scale = 1.0 / pending_batches as f64;
                accumulated.iter_mut().for_each(|g| *g *= scale);
                adam.step(params.values_mut(), &accumulated, config.learning_rate)
                    .map_err(|e| e.context(format!("optimizer step {}", adam.steps() + 1)))?;
                history.samples_per_step.push(pending_samples);
                accumulated.iter_mut().for_each(|g| *g = 0.0);
                pending_batches = 0;
                pending_samples = 0;
            }
        }
        let mean = epoch_loss / per_epoch as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite(format!("epoch {} loss", epoch + 1)));
        }
        history.epoch_losses.push(mean);
    }
    if let Some((mean, sd)) = standardization {
        params.fold_input_standardization(&mean, &sd)?;
    }
    Ok((params, history))
}

/// Eval-mode embeddings of every descriptor, in input order.
pub fn embed(params: &EncoderParams, descriptors: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let dim = params.architecture().input_dim();
    let out_dim = params.architecture().output_dim();
    let mut rows = Vec::with_capacity(descriptors.len());
    for chunk in descriptors.chunks(256) {
        if let Some(r) = chunk.iter().find(|r| r.len() != dim) {
            return Err(Error::Shape(format!("descriptor of length {}, expected {dim}", r.len())));
        }
        let x: Vec<f64> = chunk.iter().flatten().copied().collect();
        let (out, _) = params.forward(&x, chunk.len(), Mode::Eval)?;
        rows.extend(out.chunks(out_dim).map(<[f64]>::to_vec));
    }
    Ok(rows)
}
