//! Classification and retrieval metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApVariant {
    #[default]
    AllPoint,
    /// VOC-2007 style: mean of interpolated precision at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub id: String,
    pub score: f64,
    pub relevant: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub is_query: bool,
}

/// Items by score descending, ties by id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    items: Vec<RankedItem>,
}

impl RankedList {
    pub fn new(mut items: Vec<RankedItem>) -> Result<Self> {
        if let Some(bad) = items.iter().find(|i| i.score.is_nan()) {
            return Err(Error::InvalidEvaluation(format!("score of {} is NaN", bad.id)));
        }
        items.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
        Ok(RankedList { items })
    }

    pub fn from_scores(ids: &[String], scores: &[f64], relevance: &[bool]) -> Result<Self> {
        if ids.len() != scores.len() || ids.len() != relevance.len() {
            return Err(Error::InvalidEvaluation("ids, scores and relevance differ in length".into()));
        }
        RankedList::new(
            ids.iter()
                .zip(scores)
                .zip(relevance)
                .map(|((id, &score), &relevant)| RankedItem { id: id.clone(), score, relevant, is_query: false })
                .collect(),
        )
    }

    pub fn items(&self) -> &[RankedItem] {
        &self.items
    }

    pub fn relevance(&self) -> Vec<bool> {
        self.items.iter().map(|i| i.relevant).collect()
    }

    pub fn without_query(&self) -> RankedList {
        RankedList { items: self.items.iter().filter(|i| !i.is_query).cloned().collect() }
    }
}

/// AP of a relevance sequence already in rank order.
pub fn average_precision_ordered(relevance: &[bool], variant: ApVariant) -> Result<f64> {
    let total = relevance.iter().filter(|r| **r).count();
    if total == 0 {
        return Err(Error::UndefinedAp);
    }
    match variant {
        ApVariant::AllPoint => {
            let mut hits = 0usize;
            let mut sum = 0.0;
            for (rank, _) in relevance.iter().enumerate().filter(|(_, r)| **r) {
                hits += 1;
                sum += hits as f64 / (rank + 1) as f64;
            }
            Ok(sum / total as f64)
        }
        ApVariant::ElevenPoint => {
            let mut points = Vec::with_capacity(relevance.len());
            let mut hits = 0usize;
            for (rank, &r) in relevance.iter().enumerate() {
                hits += usize::from(r);
                points.push((hits as f64 / total as f64, hits as f64 / (rank + 1) as f64));
            }
            let sum: f64 = (0..=10)
                .map(|t| {
                    let t = t as f64 / 10.0;
                    points.iter().filter(|(rec, _)| *rec >= t - 1e-12).map(|(_, p)| *p).fold(0.0, f64::max)
                })
                .sum();
            Ok(sum / 11.0)
        }
    }
}

pub fn average_precision(ranked: &RankedList) -> Result<f64> {
    average_precision_ordered(&ranked.relevance(), ApVariant::AllPoint)
}

pub fn average_precision_with(ranked: &RankedList, variant: ApVariant) -> Result<f64> {
    average_precision_ordered(&ranked.relevance(), variant)
}

/// All-point AP of raw scores; ties are broken by position.
pub fn average_precision_from_scores(scores: &[f64], relevance: &[bool]) -> Result<f64> {
    if scores.len() != relevance.len() {
        return Err(Error::DimensionMismatch { expected: scores.len(), got: relevance.len() });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidEvaluation("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let rel: Vec<bool> = order.iter().map(|&i| relevance[i]).collect();
    average_precision_ordered(&rel, ApVariant::AllPoint)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanAp {
    pub value: f64,
    pub per_category: BTreeMap<String, f64>,
}

/// Unweighted mean of per-category AP.
pub fn mean_ap(lists: &[(String, RankedList)], variant: ApVariant) -> Result<MeanAp> {
    if lists.is_empty() {
        return Err(Error::InvalidEvaluation("no categories".into()));
    }
    let mut per_category = BTreeMap::new();
    let mut sum = 0.0;
    for (name, list) in lists {
        let ap = average_precision_with(list, variant).map_err(|e| e.in_category(name))?;
        sum += ap;
        per_category.insert(name.clone(), ap);
    }
    Ok(MeanAp { value: sum / lists.len() as f64, per_category })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub value: f64,
    /// Per true category: fraction of its images predicted correctly.
    pub per_category: BTreeMap<usize, f64>,
}

/// Balanced accuracy: mean over true categories of per-category accuracy.
/// Predictions outside `0..num_categories` count as wrong.
pub fn multiclass_accuracy(predictions: &[usize], truths: &[usize], num_categories: usize) -> Result<Accuracy> {
    if predictions.len() != truths.len() || truths.is_empty() {
        return Err(Error::InvalidEvaluation(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    let unseen = predictions.iter().filter(|&&p| p >= num_categories).count();
    if unseen > 0 {
        log::warn!("{unseen} predictions name unknown categories, counted as wrong");
    }
    let mut tally: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&p, &t) in predictions.iter().zip(truths) {
        let e = tally.entry(t).or_default();
        e.0 += usize::from(p == t && p < num_categories);
        e.1 += 1;
    }
    let per_category: BTreeMap<usize, f64> = tally.iter().map(|(&c, &(ok, n))| (c, ok as f64 / n as f64)).collect();
    let value = per_category.values().sum::<f64>() / per_category.len() as f64;
    Ok(Accuracy { value, per_category })
}

/// Items, feature vectors and group ids for retrieval experiments.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex<T: Scalar> {
    ids: Vec<String>,
    features: Vec<Vec<T>>,
    groups: Vec<String>,
}

impl<T: Scalar> RetrievalIndex<T> {
    pub fn new(ids: Vec<String>, features: Vec<Vec<T>>, groups: Vec<String>) -> Result<Self> {
        if ids.len() != features.len() || ids.len() != groups.len() {
            return Err(Error::InvalidEvaluation("ids, features and groups differ in length".into()));
        }
        if let Some(first) = features.first() {
            if let Some(bad) = features.iter().position(|f| f.len() != first.len()) {
                return Err(Error::DimensionMismatch { expected: first.len(), got: features[bad].len() });
            }
        }
        if let Some(i) = features.iter().position(|f| f.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidEvaluation(format!("item {} has non-finite features", ids[i])));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::InvalidEvaluation(format!("duplicate item id {dup}")));
        }
        Ok(RetrievalIndex { ids, features, groups })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn groups(&self) -> &[String] {
        &self.groups
    }

    fn position(&self, id: &str) -> Result<usize> {
        self.ids
            .iter()
            .position(|i| i == id)
            .ok_or_else(|| Error::InvalidEvaluation(format!("query {id} not in index")))
    }

    fn group_size(&self, group: &str) -> usize {
        self.groups.iter().filter(|g| *g == group).count()
    }
}

/// Cosine similarity in double precision; `None` when either vector is zero.
pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> Option<f64> {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x.to_f64_lossless(), y.to_f64_lossless());
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return None;
    }
    Some((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

/// Every item ranked by cosine similarity to the query (the query included
/// and flagged). Zero vectors rank last at negative infinity.
pub fn cosine_rank<T: Scalar>(index: &RetrievalIndex<T>, query_id: &str) -> Result<RankedList> {
    let q = index.position(query_id)?;
    let qv = &index.features[q];
    if qv.iter().all(|v| v.is_zero()) {
        return Err(Error::InvalidEvaluation(format!("query {query_id} has a zero feature vector")));
    }
    let mut items = Vec::with_capacity(index.len());
    for (i, f) in index.features.iter().enumerate() {
        let score = cosine_similarity(qv, f).unwrap_or_else(|| {
            log::warn!("item {} has a zero feature vector, ranked last", index.ids[i]);
            f64::NEG_INFINITY
        });
        items.push(RankedItem {
            id: index.ids[i].clone(),
            score,
            relevant: index.groups[i] == index.groups[q],
            is_query: i == q,
        });
    }
    RankedList::new(items)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolidaysReport {
    pub map: f64,
    pub per_query: BTreeMap<String, f64>,
    pub skipped: Vec<String>,
}

/// Mean AP over queries; each query is removed from its own ranking and
/// queries without group-mates are skipped.
pub fn holidays_map<T: Scalar>(index: &RetrievalIndex<T>, query_ids: &[String]) -> Result<HolidaysReport> {
    let mut per_query = BTreeMap::new();
    let mut skipped = Vec::new();
    for q in query_ids {
        let pos = index.position(q)?;
        if index.group_size(&index.groups[pos]) < 2 {
            log::warn!("query {q} has no group-mates, skipped");
            skipped.push(q.clone());
            continue;
        }
        let ranked = cosine_rank(index, q)?.without_query();
        per_query.insert(q.clone(), average_precision(&ranked)?);
    }
    if per_query.is_empty() {
        return Err(Error::InvalidEvaluation("no evaluable queries".into()));
    }
    let map = per_query.values().sum::<f64>() / per_query.len() as f64;
    Ok(HolidaysReport { map, per_query, skipped })
}

/// One query per group: the lexicographically smallest id.
pub fn first_member_queries<T: Scalar>(index: &RetrievalIndex<T>) -> Vec<String> {
    let mut first: BTreeMap<&str, &str> = BTreeMap::new();
    for (id, g) in index.ids.iter().zip(&index.groups) {
        let e = first.entry(g.as_str()).or_insert(id.as_str());
        if id.as_str() < *e {
            *e = id.as_str();
        }
    }
    first.values().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UkbScore {
    pub mean_count: f64,
    pub percentage: f64,
}

/// Mean number of same-group items in each query's top 4 (query included).
pub fn ukb_score<T: Scalar>(index: &RetrievalIndex<T>) -> Result<UkbScore> {
    if index.is_empty() {
        return Err(Error::InvalidEvaluation("empty index".into()));
    }
    let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
    for g in &index.groups {
        *sizes.entry(g.as_str()).or_default() += 1;
    }
    let odd = sizes.values().filter(|&&n| n != 4).count();
    if odd > 0 {
        log::warn!("{odd} groups do not have exactly 4 members");
    }
    let mut total = 0usize;
    for id in &index.ids {
        let ranked = cosine_rank(index, id)?;
        total += ranked.items().iter().take(4).filter(|i| i.relevant).count();
    }
    let mean_count = total as f64 / index.len() as f64;
    Ok(UkbScore { mean_count, percentage: mean_count / 4.0 })
}
