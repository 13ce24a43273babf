use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::solver::train_binary;
use super::{LinearModel, TrainConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const HOLDOUT_FRACTION: f64 = 0.2;

/// Validation accuracy of every grid cost and the one kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSelection {
    pub category: String,
    pub chosen_cost: f64,
    pub validation_accuracy: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct OvrOutput<T: Scalar> {
    pub models: Vec<LinearModel<T>>,
    pub selections: Vec<CostSelection>,
    /// Categories left without a model (no positives or no negatives).
    pub skipped: Vec<String>,
}

/// Stratified validation mask: about a fifth of each class, at least one
/// sample of a class kept for training.
pub fn stratified_holdout(labels: &[bool], seed: u64) -> Vec<bool> {
    let mut mask = vec![false; labels.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let take = ((idx.len() as f64 * HOLDOUT_FRACTION).round() as usize).min(idx.len().saturating_sub(1));
        for &i in &idx[..take] {
            mask[i] = true;
        }
    }
    mask
}

/// Picks the grid cost with the best validation accuracy (earliest on ties)
/// then retrains on every sample with it.
pub fn select_cost<T: Scalar>(
    features: &[Vec<T>],
    labels: &[bool],
    validation: &[bool],
    config: &TrainConfig,
) -> Result<(LinearModel<T>, f64, Vec<(f64, f64)>)> {
    config.validate()?;
    if config.cost_grid.len() == 1 {
        let c = config.cost_grid[0];
        return Ok((train_binary(features, labels, c, config)?.model, c, Vec::new()));
    }
    let (mut fit_x, mut fit_y, mut val_x, mut val_y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for ((x, &y), &v) in features.iter().zip(labels).zip(validation) {
        if v {
            val_x.push(x.clone());
            val_y.push(y);
        } else {
            fit_x.push(x.clone());
            fit_y.push(y);
        }
    }
    let mut scores = Vec::with_capacity(config.cost_grid.len());
    let mut best: Option<(f64, f64)> = None;
    for &c in &config.cost_grid {
        let acc = match train_binary(&fit_x, &fit_y, c, config) {
            Ok(out) if !val_x.is_empty() => out.model.accuracy(&val_x, &val_y)?,
            Ok(_) => f64::NAN,
            Err(Error::DegenerateLabels(msg)) => {
                log::warn!("cost search skipped: training part degenerate ({msg})");
                scores.clear();
                best = None;
                break;
            }
            Err(e) => return Err(e),
        };
        scores.push((c, acc));
        if best.is_none_or(|(_, a)| acc > a) {
            best = Some((c, acc));
        }
    }
    let chosen = best.map_or(config.cost_grid[0], |(c, _)| c);
    Ok((train_binary(features, labels, chosen, config)?.model, chosen, scores))
}

/// One binary model per category.
///
/// `validation` marks held-out samples; when absent each category draws a
/// stratified holdout from `config.seed`.
pub fn train_ovr<T: Scalar>(
    features: &[Vec<T>],
    labels: &[Vec<bool>],
    categories: &[String],
    validation: Option<&[bool]>,
    config: &TrainConfig,
) -> Result<OvrOutput<T>> {
    config.validate()?;
    if features.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: features.len(), got: labels.len() });
    }
    if let Some(v) = validation {
        if v.len() != features.len() {
            return Err(Error::DimensionMismatch { expected: features.len(), got: v.len() });
        }
    }
    let per_category: Vec<Result<Option<(LinearModel<T>, CostSelection)>>> = categories
        .par_iter()
        .enumerate()
        .map(|(c, name)| {
            let y: Vec<bool> = labels.iter().map(|l| l.get(c).copied().unwrap_or(false)).collect();
            let pos = y.iter().filter(|v| **v).count();
            if pos == 0 || pos == y.len() {
                log::warn!("category {name}: {pos} positives among {} images, model omitted", y.len());
                return Ok(None);
            }
            let holdout;
            let mask = match validation {
                Some(v) => v,
                None => {
                    holdout = stratified_holdout(&y, config.seed.wrapping_add(c as u64));
                    &holdout
                }
            };
            let (model, chosen, scores) =
                select_cost(features, &y, mask, config).map_err(|e| e.in_category(name))?;
            let mut model = model;
            model.category = name.clone();
            Ok(Some((model, CostSelection { category: name.clone(), chosen_cost: chosen, validation_accuracy: scores })))
        })
        .collect();
    let mut out = OvrOutput { models: Vec::new(), selections: Vec::new(), skipped: Vec::new() };
    for (name, r) in categories.iter().zip(per_category) {
        match r? {
            Some((m, s)) => {
                out.models.push(m);
                out.selections.push(s);
            }
            None => out.skipped.push(name.clone()),
        }
    }
    Ok(out)
}
