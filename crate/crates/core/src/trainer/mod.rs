//! Weakly supervised metric learning for the landmark localization network.
//!
//! Each epoch starts by embedding every training image with the current
//! model and mining, per query, the `K` closest images from other
//! locations. Tuples (query, one same-location positive, `K` negatives) are
//! then visited in seeded shuffled order; the summed triplet loss of each
//! batch drives one Adam step. Only the network parameters are trained.

mod loss;
pub mod manifest;

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lln::{aggregate, embed, lln_backward_with_trace, lln_trace, Embedding, LlnGradients, LlnParams};
use crate::tensor::{adam_step, AdamState};

pub use loss::{triplet_loss, TripletLoss};
pub use manifest::{Dataset, Manifest, ManifestEntry};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub margin: f64,
    pub num_negatives: usize,
    pub learning_rate: f64,
    /// Tuples whose losses are summed per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Fan embedding and per-tuple gradient work out over threads. Results
    /// are identical either way; reductions run in a fixed order.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.3,
            num_negatives: 4,
            learning_rate: 1e-6,
            batch_size: 10,
            epochs: 10,
            seed: 0,
            parallel: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.margin.is_finite() || self.margin <= 0.0 {
            return Err(Error::config("margin must be > 0"));
        }
        if self.num_negatives == 0 {
            return Err(Error::config("num_negatives must be >= 1"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::config("learning rate must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingTuple {
    pub query: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

impl TrainingTuple {
    pub fn describe(&self, ds: &Dataset) -> String {
        let negs: Vec<&str> = self.negatives.iter().map(|&n| ds.ids[n].as_str()).collect();
        format!(
            "q={} p={} n=[{}]",
            ds.ids[self.query],
            ds.ids[self.positive],
            negs.join(" ")
        )
    }
}

fn map_indices<T, F>(n: usize, parallel: bool, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if parallel {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

pub fn compute_embeddings(
    dataset: &Dataset,
    params: &LlnParams,
    parallel: bool,
) -> Result<Vec<Embedding>> {
    map_indices(dataset.len(), parallel, |i| embed(&dataset.features[i], params))
        .into_iter()
        .collect()
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// The `k` images from other locations closest to `query` in embedding
/// space. Equal distances are ordered by ascending image id.
pub fn mine_hard_negatives(
    query: usize,
    dataset: &Dataset,
    embeddings: &[Embedding],
    k: usize,
) -> Result<Vec<usize>> {
    if embeddings.len() != dataset.len() {
        return Err(Error::config("one embedding per dataset image required"));
    }
    let q = &embeddings[query].values;
    let mut candidates: Vec<(f64, usize)> = (0..dataset.len())
        .filter(|&j| dataset.locations[j] != dataset.locations[query])
        .map(|j| (squared_distance(q, &embeddings[j].values), j))
        .collect();
    if candidates.len() < k {
        return Err(Error::dataset(format!(
            "query {} has {} different-location images, {k} negatives requested",
            dataset.ids[query],
            candidates.len()
        )));
    }
    candidates.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then_with(|| dataset.ids[a.1].cmp(&dataset.ids[b.1]))
    });
    Ok(candidates.into_iter().take(k).map(|(_, j)| j).collect())
}

/// One tuple per mined query, ascending by query index. The positive is the
/// pinned one when present, otherwise drawn uniformly from the query's
/// location.
pub fn build_tuples<R: Rng + ?Sized>(
    dataset: &Dataset,
    mined: &BTreeMap<usize, Vec<usize>>,
    rng: &mut R,
) -> Result<Vec<TrainingTuple>> {
    let mut tuples = Vec::with_capacity(mined.len());
    for (&query, negatives) in mined {
        let positive = match dataset.positives[query] {
            Some(p) => p,
            None => *dataset.same_location(query).choose(rng).ok_or_else(|| {
                Error::dataset(format!(
                    "query {} is the only image of location {}",
                    dataset.ids[query], dataset.locations[query]
                ))
            })?,
        };
        if let Some(&bad) = negatives
            .iter()
            .find(|&&n| dataset.locations[n] == dataset.locations[query])
        {
            return Err(Error::dataset(format!(
                "negative {} shares the location of query {}",
                dataset.ids[bad], dataset.ids[query]
            )));
        }
        tuples.push(TrainingTuple {
            query,
            positive,
            negatives: negatives.clone(),
        });
    }
    Ok(tuples)
}

/// Loss of one tuple and its gradient w.r.t. the network parameters.
pub fn tuple_loss_and_gradients(
    dataset: &Dataset,
    params: &LlnParams,
    tuple: &TrainingTuple,
    margin: f64,
) -> Result<(f64, LlnGradients)> {
    let images: Vec<usize> = [tuple.query, tuple.positive]
        .into_iter()
        .chain(tuple.negatives.iter().copied())
        .collect();
    let traces = images
        .iter()
        .map(|&i| lln_trace(&dataset.features[i], params))
        .collect::<Result<Vec<_>>>()?;
    let embeddings = images
        .iter()
        .zip(&traces)
        .map(|(&i, t)| aggregate(&dataset.features[i], &t.activation))
        .collect::<Result<Vec<_>>>()?;
    let negs: Vec<&[f64]> = embeddings[2..].iter().map(|e| e.values.as_slice()).collect();
    let tl = triplet_loss(&embeddings[0].values, &embeddings[1].values, &negs, margin)?;
    let mut grads = LlnGradients::zeros_like(params);
    if tl.loss == 0.0 {
        return Ok((0.0, grads));
    }
    let grad_embs = std::iter::once(&tl.grad_query)
        .chain(std::iter::once(&tl.grad_positive))
        .chain(tl.grad_negatives.iter());
    for ((&i, trace), ge) in images.iter().zip(&traces).zip(grad_embs) {
        let g = lln_backward_with_trace(&dataset.features[i], params, trace, ge)?;
        grads.add_assign(&g);
    }
    Ok((tl.loss, grads))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    /// Summed loss of the batch.
    pub loss: f64,
    pub tuples: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossHistory {
    pub steps: Vec<StepRecord>,
}

impl LossHistory {
    /// Mean per-tuple loss of each epoch, in epoch order.
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for s in &self.steps {
            let e = acc.entry(s.epoch).or_default();
            e.0 += s.loss;
            e.1 += s.tuples;
        }
        acc.values()
            .map(|&(l, n)| if n == 0 { 0.0 } else { l / n as f64 })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "epoch,step,loss")?;
        for s in &self.steps {
            writeln!(out, "{},{},{}", s.epoch, s.step, s.loss)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: LlnParams,
    pub history: LossHistory,
}

/// Mines negatives for every query of the dataset against `params`.
pub fn mine_epoch(
    dataset: &Dataset,
    params: &LlnParams,
    k: usize,
    parallel: bool,
) -> Result<BTreeMap<usize, Vec<usize>>> {
    let embeddings = compute_embeddings(dataset, params, parallel)?;
    dataset
        .query_indices()
        .into_iter()
        .map(|q| Ok((q, mine_hard_negatives(q, dataset, &embeddings, k)?)))
        .collect()
}

pub fn train(dataset: &Dataset, config: &TrainConfig, initial: &LlnParams) -> Result<TrainOutcome> {
    config.validate()?;
    dataset.validate_for_training()?;
    initial.validate()?;
    if dataset.channels() != Some(initial.in_channels()) {
        return Err(Error::config(format!(
            "model expects {} channels, dataset has {:?}",
            initial.in_channels(),
            dataset.channels()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = initial.clone();
    let mut flat = params.flatten();
    let mut adam = AdamState::new(flat.len());
    let mut history = LossHistory::default();
    let mut step = 0usize;

    for epoch in 1..=config.epochs {
        let mined = mine_epoch(dataset, &params, config.num_negatives, config.parallel)?;
        let mut tuples = build_tuples(dataset, &mined, &mut rng)?;
        tuples.shuffle(&mut rng);

        for batch in tuples.chunks(config.batch_size) {
            step += 1;
            let results = map_indices(batch.len(), config.parallel, |t| {
                tuple_loss_and_gradients(dataset, &params, &batch[t], config.margin)
            });
            let mut loss = 0.0;
            let mut grads = LlnGradients::zeros_like(&params);
            for r in results {
                let (l, g) = r?;
                loss += l;
                grads.add_assign(&g);
            }
            if !loss.is_finite() {
                let tuples: Vec<String> = batch.iter().map(|t| t.describe(dataset)).collect();
                return Err(Error::NonFiniteLoss {
                    step,
                    loss,
                    tuples: tuples.join("; "),
                });
            }
            adam_step(&mut flat, &grads.flatten(), &mut adam, config.learning_rate)?;
            params.assign_flat(&flat)?;
            history.steps.push(StepRecord {
                epoch,
                step,
                loss,
                tuples: batch.len(),
            });
        }
    }
    Ok(TrainOutcome { params, history })
}
