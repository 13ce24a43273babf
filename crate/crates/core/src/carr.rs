//! Context-aware region refining.
//!
//! A base classifier trained on globally pooled codes scores every region of
//! an image; the best-scoring regions are re-pooled into a category-specific
//! representation on which a new classifier is trained. Stage outputs are
//! fused with boosting-style weights `ln((1 - E) / E)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::ImageRecord;
use crate::error::{Error, Result};
use crate::evalx::average_precision_from_scores;
use crate::geometry::BBox;
use crate::linclass::{select_cost, stratified_holdout, FeatureTag, LinearModel, TrainConfig};
use crate::pooling::{pool_image, pool_regions, Layout, PoolOp, PoolingSpec};
use crate::scalar::Scalar;

/// Clamp applied to stage errors before taking the log-odds.
pub const ERROR_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineLayout {
    /// Same layout as the global pooling step.
    MirrorGlobal,
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    AdaboostRule,
    /// Picks each stage weight from `alpha_grid` by validation AP.
    GridSearch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarrConfig {
    pub iterations: usize,
    /// Fraction of regions kept as context, `K = round(beta * N)`.
    pub context_ratio: f64,
    pub min_top_k: usize,
    pub refine_layer: String,
    pub refine_operator: PoolOp,
    pub refine_layout: RefineLayout,
    /// When set, keep regions scoring above it instead of the top K.
    pub score_threshold: Option<f64>,
    pub alpha_mode: AlphaMode,
    #[serde(default = "default_alpha_grid")]
    pub alpha_grid: Vec<f64>,
}

fn default_alpha_grid() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0]
}

impl Default for CarrConfig {
    fn default() -> Self {
        CarrConfig {
            iterations: 2,
            context_ratio: 0.025,
            min_top_k: 1,
            refine_layer: "fc1".to_string(),
            refine_operator: PoolOp::Average,
            refine_layout: RefineLayout::MirrorGlobal,
            score_threshold: None,
            alpha_mode: AlphaMode::AdaboostRule,
            alpha_grid: default_alpha_grid(),
        }
    }
}

impl CarrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.context_ratio > 0.0 && self.context_ratio <= 1.0) {
            return Err(Error::InvalidConfig(format!("context ratio {} not in (0, 1]", self.context_ratio)));
        }
        if self.min_top_k == 0 {
            return Err(Error::InvalidConfig("min_top_k must be positive".into()));
        }
        if self.score_threshold.is_some_and(|t| !t.is_finite()) {
            return Err(Error::InvalidConfig("score threshold must be finite".into()));
        }
        if self.alpha_mode == AlphaMode::GridSearch && self.alpha_grid.is_empty() {
            return Err(Error::InvalidConfig("alpha grid is empty".into()));
        }
        Ok(())
    }

    /// Pooling used for refined stages, derived from the global spec.
    pub fn refine_spec(&self, global: &PoolingSpec) -> PoolingSpec {
        let layout = match self.refine_layout {
            RefineLayout::MirrorGlobal => global.layout.clone(),
            RefineLayout::Single => Layout::Single,
        };
        PoolingSpec::new(self.refine_operator, layout, global.rootsift)
    }

    pub fn top_k(&self, num_regions: usize) -> usize {
        let k = (self.context_ratio * num_regions as f64).round() as usize;
        k.max(self.min_top_k).min(num_regions)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct CarrStage<T: Scalar> {
    pub model: LinearModel<T>,
    pub alpha: T,
    pub train_error: T,
    pub feature_tag: FeatureTag,
}

/// Stages of one category; stage 0 is the base classifier with weight 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct CarrEnsemble<T: Scalar> {
    pub category: String,
    pub stages: Vec<CarrStage<T>>,
    pub config: CarrConfig,
}

impl<T: Scalar> CarrEnsemble<T> {
    pub fn base_only(model: LinearModel<T>, config: CarrConfig) -> Self {
        let tag = model.feature_tag.clone();
        CarrEnsemble {
            category: model.category.clone(),
            stages: vec![CarrStage { model, alpha: T::one(), train_error: T::zero(), feature_tag: tag }],
            config,
        }
    }

    pub fn base(&self) -> Result<&CarrStage<T>> {
        self.stages.first().ok_or_else(|| Error::EmptyEnsemble(self.category.clone()))
    }
}

/// `ln((1 - E') / E')` with `E'` clamped to `[1e-6, 1 - 1e-6]`.
///
/// Errors above one half are folded onto the lower half so that
/// `alpha(E) = -alpha(1 - E)` holds to rounding.
pub fn alpha_from_error(error: f64) -> f64 {
    let lower = |e: f64| {
        let e = e.max(ERROR_CLAMP);
        ((1.0 - e) / e).ln()
    };
    if error <= 0.5 {
        lower(error)
    } else {
        -lower(1.0 - error.min(1.0))
    }
}

/// Per-region embeddings into one stage feature space, cached per image.
///
/// A region is embedded as the pooled feature of an image holding only that
/// region, so it fills its own layout block(s) and is normalized like a
/// whole image.
pub struct RegionCache<'a, T: Scalar> {
    record: &'a ImageRecord<T>,
    frame: BBox,
    entries: Vec<(String, PoolingSpec, Vec<Vec<T>>)>,
}

impl<'a, T: Scalar> RegionCache<'a, T> {
    pub fn new(record: &'a ImageRecord<T>) -> Result<Self> {
        Ok(RegionCache { record, frame: record.frame()?, entries: Vec::new() })
    }

    pub fn record(&self) -> &ImageRecord<T> {
        self.record
    }

    fn embeddings(&mut self, layer: &str, spec: &PoolingSpec) -> Result<&[Vec<T>]> {
        let pos = match self.entries.iter().position(|(l, s, _)| l == layer && s == spec) {
            Some(p) => p,
            None => {
                let codes = self.record.layer(layer)?;
                let rows = (0..codes.num_regions())
                    .map(|k| pool_regions(codes, &self.record.proposals, &self.frame, &[k], spec).map(|f| f.values))
                    .collect::<Result<Vec<_>>>()?;
                self.entries.push((layer.to_string(), spec.clone(), rows));
                self.entries.len() - 1
            }
        };
        Ok(&self.entries[pos].2)
    }

    /// `S_k = sum_s alpha_s h_s(embed(F_k, s))` over the given stages.
    pub fn region_scores(&mut self, stages: &[CarrStage<T>]) -> Result<Vec<T>> {
        let n = self.record.num_regions();
        let mut scores = vec![T::zero(); n];
        for stage in stages {
            let emb = self.embeddings(&stage.feature_tag.layer, &stage.feature_tag.spec)?;
            for (s, e) in scores.iter_mut().zip(emb) {
                *s = *s + stage.alpha * stage.model.score(e)?;
            }
        }
        Ok(scores)
    }

    /// Representation of the context regions picked by `prefix`, pooled
    /// from `tag`'s layer under `tag`'s spec.
    pub fn refined_feature(&mut self, prefix: &[CarrStage<T>], tag: &FeatureTag, config: &CarrConfig) -> Result<Vec<T>> {
        let scores = self.region_scores(prefix)?;
        let selected = select_context_regions(&scores, config);
        let codes = self.record.layer(&tag.layer)?;
        Ok(pool_regions(codes, &self.record.proposals, &self.frame, &selected, &tag.spec)?.values)
    }
}

/// Region scores of an image under a stage prefix.
pub fn region_scores<T: Scalar>(stages: &[CarrStage<T>], record: &ImageRecord<T>) -> Result<Vec<T>> {
    RegionCache::new(record)?.region_scores(stages)
}

/// Context regions, ascending by index. Threshold mode falls back to the
/// single best region when nothing clears the threshold.
pub fn select_context_regions<T: Scalar>(scores: &[T], config: &CarrConfig) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut picked: Vec<usize> = match config.score_threshold {
        Some(theta) => {
            let theta = T::from_f64_lossy(theta);
            let above: Vec<usize> = (0..scores.len()).filter(|&k| scores[k] > theta).collect();
            if above.is_empty() {
                order.into_iter().take(1).collect()
            } else {
                above
            }
        }
        None => order.into_iter().take(config.top_k(scores.len())).collect(),
    };
    picked.sort_unstable();
    picked
}

fn error_rate<T: Scalar>(model: &LinearModel<T>, features: &[Vec<T>], labels: &[bool]) -> Result<f64> {
    Ok(1.0 - model.accuracy(features, labels)?)
}

struct CategoryTask<'a, T: Scalar> {
    ensemble: CarrEnsemble<T>,
    /// Running fused image scores, one per training image.
    fused: Vec<T>,
    labels: Vec<bool>,
    validation: &'a [bool],
    active: bool,
}

/// Trains CARR ensembles from base models, one per category.
///
/// `categories` maps label columns of the records to model categories;
/// `validation` marks held-out images used for cost and stage-weight
/// selection (a stratified holdout per category otherwise).
pub fn carr_train<T: Scalar>(
    records: &[ImageRecord<T>],
    categories: &[String],
    base_models: &[LinearModel<T>],
    config: &CarrConfig,
    train: &TrainConfig,
    validation: Option<&[bool]>,
) -> Result<Vec<CarrEnsemble<T>>> {
    config.validate()?;
    train.validate()?;
    if records.is_empty() {
        return Err(Error::InvalidConfig("no training images".into()));
    }
    let label_columns: Vec<usize> = base_models
        .iter()
        .map(|m| {
            categories
                .iter()
                .position(|c| *c == m.category)
                .ok_or_else(|| Error::InvalidConfig(format!("model category {} not among dataset categories", m.category)))
        })
        .collect::<Result<_>>()?;
    let holdouts: Vec<Vec<bool>> = label_columns
        .iter()
        .map(|&c| {
            let y: Vec<bool> = records.iter().map(|r| r.labels[c]).collect();
            match validation {
                Some(v) => v.to_vec(),
                None => stratified_holdout(&y, train.seed.wrapping_add(c as u64)),
            }
        })
        .collect();

    // base features and scores
    let global: Vec<Vec<Vec<T>>> = base_models
        .iter()
        .map(|m| {
            records
                .par_iter()
                .map(|r| pool_image(r, &m.feature_tag.layer, &m.feature_tag.spec).map(|f| f.values))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut tasks = Vec::with_capacity(base_models.len());
    for (i, (model, &col)) in base_models.iter().zip(&label_columns).enumerate() {
        let labels: Vec<bool> = records.iter().map(|r| r.labels[col]).collect();
        let mut ensemble = CarrEnsemble::base_only(model.clone(), config.clone());
        ensemble.stages[0].train_error = T::from_f64_lossy(error_rate(model, &global[i], &labels)?);
        let fused = global[i].iter().map(|x| model.score(x)).collect::<Result<Vec<_>>>()?;
        tasks.push(CategoryTask { ensemble, fused, labels, validation: &holdouts[i], active: true });
    }

    for t in 1..=config.iterations {
        let stage_features: Vec<Option<Vec<Vec<T>>>> = records
            .par_iter()
            .map(|r| -> Result<Vec<Option<Vec<T>>>> {
                let mut cache = RegionCache::new(r)?;
                tasks
                    .iter()
                    .map(|task| {
                        if !task.active {
                            return Ok(None);
                        }
                        let tag = stage_tag(&task.ensemble, config, t)?;
                        cache.refined_feature(&task.ensemble.stages, &tag, config).map(Some)
                    })
                    .collect()
            })
            .collect::<Result<Vec<_>>>()
            .map(|per_image| {
                // transpose image-major to category-major
                (0..tasks.len())
                    .map(|c| per_image.iter().map(|feats| feats[c].clone()).collect::<Option<Vec<_>>>())
                    .collect()
            })?;

        let updates: Vec<Result<Option<(CarrStage<T>, Vec<T>)>>> = tasks
            .par_iter()
            .zip(stage_features.into_par_iter())
            .map(|(task, feats)| {
                let Some(feats) = feats else { return Ok(None) };
                train_stage(task, feats, config, train, t)
            })
            .collect();
        for (task, update) in tasks.iter_mut().zip(updates) {
            match update.map_err(|e| e.in_category(&task.ensemble.category))? {
                Some((stage, fused)) => {
                    task.ensemble.stages.push(stage);
                    task.fused = fused;
                }
                None if task.active => {
                    log::warn!("category {}: stage {t} skipped", task.ensemble.category);
                    task.active = false;
                }
                None => {}
            }
        }
    }
    Ok(tasks.into_iter().map(|t| t.ensemble).collect())
}

fn stage_tag<T: Scalar>(ensemble: &CarrEnsemble<T>, config: &CarrConfig, stage: usize) -> Result<FeatureTag> {
    let global = &ensemble.base()?.feature_tag.spec;
    Ok(FeatureTag { layer: config.refine_layer.clone(), spec: config.refine_spec(global), stage })
}

fn train_stage<T: Scalar>(
    task: &CategoryTask<'_, T>,
    feats: Vec<Vec<T>>,
    config: &CarrConfig,
    train: &TrainConfig,
    t: usize,
) -> Result<Option<(CarrStage<T>, Vec<T>)>> {
    let positives = task.labels.iter().filter(|l| **l).count();
    if positives == 0 || positives == task.labels.len() {
        return Ok(None);
    }
    let (mut model, _, _) = match select_cost(&feats, &task.labels, task.validation, train) {
        Ok(r) => r,
        Err(Error::DegenerateLabels(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let tag = stage_tag(&task.ensemble, config, t)?;
    model.category = task.ensemble.category.clone();
    model.feature_tag = tag.clone();
    let error = error_rate(&model, &feats, &task.labels)?;
    let stage_scores = feats.iter().map(|x| model.score(x)).collect::<Result<Vec<_>>>()?;
    let alpha = match config.alpha_mode {
        AlphaMode::AdaboostRule => alpha_from_error(error),
        AlphaMode::GridSearch => grid_search_alpha(task, &stage_scores, &config.alpha_grid)?,
    };
    let alpha_t = T::from_f64_lossy(alpha);
    let fused = task.fused.iter().zip(&stage_scores).map(|(&f, &s)| f + alpha_t * s).collect();
    let stage = CarrStage { model, alpha: alpha_t, train_error: T::from_f64_lossy(error), feature_tag: tag };
    Ok(Some((stage, fused)))
}

fn grid_search_alpha<T: Scalar>(task: &CategoryTask<'_, T>, stage_scores: &[T], grid: &[f64]) -> Result<f64> {
    let held: Vec<usize> = (0..task.labels.len()).filter(|&i| task.validation[i]).collect();
    let idx: Vec<usize> = if held.iter().any(|&i| task.labels[i]) { held } else { (0..task.labels.len()).collect() };
    let relevance: Vec<bool> = idx.iter().map(|&i| task.labels[i]).collect();
    let mut best = (grid[0], f64::NEG_INFINITY);
    for &a in grid {
        let at = T::from_f64_lossy(a);
        let fused: Vec<f64> = idx.iter().map(|&i| (task.fused[i] + at * stage_scores[i]).to_f64_lossless()).collect();
        let ap = average_precision_from_scores(&fused, &relevance)?;
        if ap > best.1 {
            best = (a, ap);
        }
    }
    Ok(best.0)
}

/// Fused per-category scores of one image and the winning category index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Prediction<T: Scalar> {
    pub scores: Vec<T>,
    pub label: usize,
}

/// Replays every ensemble on one image and fuses stage scores.
pub fn carr_predict<T: Scalar>(ensembles: &[CarrEnsemble<T>], record: &ImageRecord<T>) -> Result<Prediction<T>> {
    if ensembles.is_empty() {
        return Err(Error::EmptyEnsemble("<none>".into()));
    }
    let mut cache = RegionCache::new(record)?;
    let mut globals: Vec<(FeatureTag, Vec<T>)> = Vec::new();
    let mut scores = Vec::with_capacity(ensembles.len());
    for e in ensembles {
        let base = e.base()?;
        let tag = &base.feature_tag;
        let pos = match globals.iter().position(|(t, _)| t.layer == tag.layer && t.spec == tag.spec) {
            Some(p) => p,
            None => {
                globals.push((tag.clone(), pool_image(record, &tag.layer, &tag.spec)?.values));
                globals.len() - 1
            }
        };
        let mut s = base.alpha * base.model.score(&globals[pos].1)?;
        for t in 1..e.stages.len() {
            let stage = &e.stages[t];
            let feat = cache.refined_feature(&e.stages[..t], &stage.feature_tag, &e.config)?;
            s = s + stage.alpha * stage.model.score(&feat)?;
        }
        scores.push(s);
    }
    let label = scores
        .iter()
        .enumerate()
        .fold(0, |best, (i, s)| if *s > scores[best] { i } else { best });
    Ok(Prediction { scores, label })
}

/// Region with the highest score under the full ensemble.
pub fn most_discriminative_region<T: Scalar>(ensemble: &CarrEnsemble<T>, record: &ImageRecord<T>) -> Result<(usize, T)> {
    ensemble.base()?;
    let scores = region_scores(&ensemble.stages, record)?;
    let best = scores.iter().enumerate().fold(0, |b, (i, s)| if *s > scores[b] { i } else { b });
    Ok((best, scores[best]))
}
