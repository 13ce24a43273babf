//! Dataset-level steps shared by the command-line tool and experiments:
//! loading splits, pooling, training, prediction and evaluation.
//!
//! Every parallel step collects results in input order, so outputs do not
//! depend on the number of worker threads.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::carr::{carr_predict, carr_train, CarrConfig, CarrEnsemble, Prediction};
use crate::dataio::{Dataset, ImageRecord};
use crate::error::{Error, Result};
use crate::evalx::{mean_ap, multiclass_accuracy, Accuracy, ApVariant, MeanAp, RankedList};
use crate::geometry::{recall_at_k, BBox};
use crate::linclass::{train_ovr, FeatureTag, LinearModel, OvrOutput, TrainConfig};
use crate::pooling::{pool_image, PoolingSpec};
use crate::scalar::Scalar;

pub const TRAIN_SPLIT: &str = "train";
pub const VAL_SPLIT: &str = "val";
pub const TEST_SPLIT: &str = "test";

/// Runs `f` on a pool of `jobs` threads (all available cores when `None`).
pub fn with_jobs<R: Send>(jobs: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        if n == 0 {
            return Err(Error::InvalidConfig("--jobs must be positive".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Loads images in parallel, optionally only some layers, optionally
/// keeping the `top_k` proposals by objectness.
pub fn load_records<T: Scalar>(
    ds: &Dataset,
    ids: &[String],
    layers: Option<&[&str]>,
    top_k: Option<usize>,
) -> Result<Vec<ImageRecord<T>>> {
    ids.par_iter()
        .map(|id| {
            let r = ds.load_record_layers::<T>(id, layers)?;
            match top_k {
                Some(k) => r.truncate_top_k(k),
                None => Ok(r),
            }
        })
        .collect()
}

/// Training images: the train split plus, when present, the val split,
/// with a mask marking the val images.
pub fn training_ids(ds: &Dataset) -> Result<(Vec<String>, Option<Vec<bool>>)> {
    let train = ds.split(TRAIN_SPLIT);
    if train.is_empty() {
        return Err(Error::Manifest("train split is empty".into()));
    }
    let val = ds.split(VAL_SPLIT);
    let mut ids = train.to_vec();
    if val.is_empty() {
        return Ok((ids, None));
    }
    ids.extend_from_slice(val);
    let mask = (0..ids.len()).map(|i| i >= train.len()).collect();
    Ok((ids, Some(mask)))
}

pub fn pool_records<T: Scalar>(records: &[ImageRecord<T>], layer: &str, spec: &PoolingSpec) -> Result<Vec<Vec<T>>> {
    records.par_iter().map(|r| pool_image(r, layer, spec).map(|f| f.values)).collect()
}

/// Pooled features keyed by image id, as written by the pooling step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct FeatureFile<T: Scalar> {
    pub layer: String,
    pub spec: PoolingSpec,
    pub features: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> FeatureFile<T> {
    pub fn tag(&self) -> FeatureTag {
        FeatureTag { layer: self.layer.clone(), spec: self.spec.clone(), stage: 0 }
    }

    /// Features of `ids`, in order.
    pub fn select(&self, ids: &[String]) -> Result<Vec<Vec<T>>> {
        ids.iter()
            .map(|id| {
                self.features
                    .get(id)
                    .cloned()
                    .ok_or_else(|| Error::Manifest(format!("no pooled feature for image {id}")))
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Json { path: path.to_path_buf(), message: e.to_string() })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path: path.to_path_buf(), message: e.to_string() })
}

pub fn label_matrix<T: Scalar>(records: &[ImageRecord<T>]) -> Vec<Vec<bool>> {
    records.iter().map(|r| r.labels.clone()).collect()
}

/// One-vs-rest base models on pooled features, tagged with their feature
/// space.
pub fn train_base<T: Scalar>(
    features: &[Vec<T>],
    labels: &[Vec<bool>],
    categories: &[String],
    tag: &FeatureTag,
    validation: Option<&[bool]>,
    config: &TrainConfig,
) -> Result<OvrOutput<T>> {
    let mut out = train_ovr(features, labels, categories, validation, config)?;
    for m in &mut out.models {
        m.feature_tag = tag.clone();
    }
    Ok(out)
}

pub fn train_carr<T: Scalar>(
    records: &[ImageRecord<T>],
    categories: &[String],
    base: &[LinearModel<T>],
    config: &CarrConfig,
    train: &TrainConfig,
    validation: Option<&[bool]>,
) -> Result<Vec<CarrEnsemble<T>>> {
    carr_train(records, categories, base, config, train, validation)
}

pub fn predict_records<T: Scalar>(ensembles: &[CarrEnsemble<T>], records: &[ImageRecord<T>]) -> Result<Vec<Prediction<T>>> {
    records
        .par_iter()
        .map(|r| carr_predict(ensembles, r).map_err(|e| Error::Record { image: r.id.clone(), message: e.to_string() }))
        .collect()
}

/// Per-image, per-category scores with the arg-max label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub split: String,
    pub categories: Vec<String>,
    pub images: Vec<ImageScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub id: String,
    pub scores: Vec<f64>,
    pub label: String,
}

impl ScoreTable {
    pub fn from_predictions<T: Scalar>(
        split: &str,
        ensembles: &[CarrEnsemble<T>],
        records: &[ImageRecord<T>],
        predictions: &[Prediction<T>],
    ) -> Self {
        let categories: Vec<String> = ensembles.iter().map(|e| e.category.clone()).collect();
        let images = records
            .iter()
            .zip(predictions)
            .map(|(r, p)| ImageScores {
                id: r.id.clone(),
                scores: p.scores.iter().map(|s| s.to_f64_lossless()).collect(),
                label: categories[p.label].clone(),
            })
            .collect();
        ScoreTable { split: split.to_string(), categories, images }
    }
}

/// Per-category AP of a score table against dataset labels.
pub fn evaluate_map(table: &ScoreTable, ds: &Dataset, variant: ApVariant) -> Result<MeanAp> {
    let truth = truth_flags(table, ds)?;
    let ids: Vec<String> = table.images.iter().map(|i| i.id.clone()).collect();
    let lists = table
        .categories
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let scores: Vec<f64> = table.images.iter().map(|i| i.scores[c]).collect();
            let rel: Vec<bool> = truth.iter().map(|t| t[c]).collect();
            Ok((name.clone(), RankedList::from_scores(&ids, &scores, &rel)?))
        })
        .collect::<Result<Vec<_>>>()?;
    mean_ap(&lists, variant)
}

/// Balanced accuracy of the table's labels; images use their first label.
pub fn evaluate_accuracy(table: &ScoreTable, ds: &Dataset) -> Result<Accuracy> {
    let cats = ds.categories();
    let mut predictions = Vec::with_capacity(table.images.len());
    let mut truths = Vec::with_capacity(table.images.len());
    for img in &table.images {
        let entry = ds.manifest.images.get(&img.id).ok_or_else(|| Error::Manifest(format!("unknown image {}", img.id)))?;
        let flags = entry.labels.to_flags(cats).map_err(|m| Error::Record { image: img.id.clone(), message: m })?;
        let truth = flags.iter().position(|f| *f).ok_or_else(|| Error::Record {
            image: img.id.clone(),
            message: "image has no label".into(),
        })?;
        truths.push(truth);
        predictions.push(cats.iter().position(|c| *c == img.label).unwrap_or(cats.len()));
    }
    multiclass_accuracy(&predictions, &truths, cats.len())
}

fn truth_flags(table: &ScoreTable, ds: &Dataset) -> Result<Vec<Vec<bool>>> {
    let columns: Vec<usize> = table
        .categories
        .iter()
        .map(|c| {
            ds.categories()
                .iter()
                .position(|d| d == c)
                .ok_or_else(|| Error::Manifest(format!("score category {c} not in manifest")))
        })
        .collect::<Result<_>>()?;
    table
        .images
        .iter()
        .map(|img| {
            let entry =
                ds.manifest.images.get(&img.id).ok_or_else(|| Error::Manifest(format!("unknown image {}", img.id)))?;
            let flags = entry
                .labels
                .to_flags(ds.categories())
                .map_err(|m| Error::Record { image: img.id.clone(), message: m })?;
            if img.scores.len() != columns.len() {
                return Err(Error::DimensionMismatch { expected: columns.len(), got: img.scores.len() });
            }
            Ok(columns.iter().map(|&c| flags[c]).collect())
        })
        .collect()
}

/// Mean recall over annotated images for each `k`.
pub fn proposal_recall(
    ds: &Dataset,
    annotations: &BTreeMap<String, Vec<BBox>>,
    ks: &[usize],
    iou_threshold: f64,
) -> Result<Vec<(usize, f64)>> {
    let ids: Vec<&String> = annotations.iter().filter(|(_, b)| !b.is_empty()).map(|(id, _)| id).collect();
    if ids.is_empty() {
        return Err(Error::NoAnnotations);
    }
    let per_image: Vec<Vec<f64>> = ids
        .par_iter()
        .map(|id| {
            let r = ds.load_record_layers::<f32>(id, Some(&[]))?;
            let order = crate::geometry::rank_by_objectness(&r.proposals);
            let ranked: Vec<_> = order.iter().map(|&i| r.proposals[i]).collect();
            ks.iter().map(|&k| recall_at_k(&ranked, &annotations[*id], k, iou_threshold)).collect()
        })
        .collect::<Result<_>>()?;
    Ok(ks
        .iter()
        .enumerate()
        .map(|(j, &k)| (k, per_image.iter().map(|v| v[j]).sum::<f64>() / per_image.len() as f64))
        .collect())
}

/// Base-classifier scores as single-stage ensembles; used to compare the
/// plain pooled pipeline with refined ones.
pub fn base_ensembles<T: Scalar>(models: &[LinearModel<T>]) -> Vec<CarrEnsemble<T>> {
    let cfg = CarrConfig { iterations: 0, ..Default::default() };
    models.iter().cloned().map(|m| CarrEnsemble::base_only(m, cfg.clone())).collect()
}
