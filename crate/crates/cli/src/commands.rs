use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use deepattr::carr::{most_discriminative_region, AlphaMode, CarrConfig, RefineLayout};
use deepattr::dataio::{
    generate_synthetic, load_ensembles, load_linear_models, load_manifest, read_annotations, save_ensembles,
    save_linear_models, Dataset, SyntheticSpec,
};
use deepattr::evalx::{first_member_queries, holidays_map, ukb_score, ApVariant, RetrievalIndex};
use deepattr::geometry::{BBox, ScaleIntervals};
use deepattr::linclass::TrainConfig;
use deepattr::pipeline::{
    load_records, pool_records, predict_records, proposal_recall, read_json, train_base, train_carr, training_ids,
    with_jobs, FeatureFile, ScoreTable,
};
use deepattr::pooling::{backtrack, pool_image, Layout, PoolOp, PoolingSpec};
use deepattr::{CarrEnsemble, ImageRecord};

use crate::output::{echo_path, table, ConfigEcho, Outputs};
use crate::{
    AlphaModeArg, BacktrackArgs, CarrTrainArgs, Cli, Command, EvalClsArgs, EvalRetrievalArgs, LayoutArg, MetricArg,
    OpArg, PoolArgs, PredictArgs, ProtocolArg, RecallArgs, RefineLayoutArg, SolverArgs, SynthArgs, TrainArgs,
};

pub fn run(cli: Cli) -> Result<()> {
    let jobs = cli.jobs;
    with_jobs(jobs, move || match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Pool(a) => pool(a),
        Command::Train(a) => train(a),
        Command::CarrTrain(a) => carr_train(a),
        Command::Predict(a) => predict(a),
        Command::EvalCls(a) => eval_cls(a),
        Command::EvalRetrieval(a) => eval_retrieval(a),
        Command::ProposalRecall(a) => recall(a),
        Command::Backtrack(a) => backtrack_cmd(a),
    })?
}

fn echo<A: Serialize>(outputs: &mut Outputs, path: &Path, command: &str, seed: Option<u64>, args: &A) -> Result<()> {
    let echo = ConfigEcho { command, version: env!("CARGO_PKG_VERSION"), seed, args };
    outputs.write_json(path, &echo)
}

fn dataset(path: &Path) -> Result<Dataset> {
    load_manifest(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn op(o: OpArg) -> PoolOp {
    match o {
        OpArg::Max => PoolOp::Max,
        OpArg::Avg => PoolOp::Average,
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.4}")
}

fn solver_config(s: &SolverArgs) -> TrainConfig {
    TrainConfig {
        cost_grid: s.c_grid.clone(),
        tolerance: s.tolerance,
        max_passes: s.max_passes,
        seed: s.seed,
        positive_weight: s.positive_weight,
    }
}

fn synth(a: &SynthArgs) -> Result<()> {
    let mut spec: SyntheticSpec = match &a.spec {
        Some(p) => read_json(p).with_context(|| format!("reading spec {}", p.display()))?,
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    let mut outputs = Outputs::default();
    outputs.dir(&a.out)?;
    for f in ["manifest.json", "annotations.json", "truth.json", "spec.json"] {
        outputs.file(&a.out.join(f))?;
    }
    outputs.dir(&a.out.join("proposals"))?;
    outputs.dir(&a.out.join("codes"))?;
    let out = generate_synthetic(&spec, &a.out)?;
    outputs.write_json(&a.out.join("spec.json"), &spec)?;
    echo(&mut outputs, &a.out.join("config.json"), "synth", Some(spec.seed), a)?;
    outputs.commit();
    print!("{}", table(&["item", "value"], &[
        vec!["images".into(), out.num_images.to_string()],
        vec!["manifest".into(), out.manifest_path.display().to_string()],
    ]));
    Ok(())
}

fn pooling_spec(a: &PoolArgs) -> Result<PoolingSpec> {
    let layout = match a.layout {
        LayoutArg::Single => Layout::Single,
        LayoutArg::Multiscale => match &a.scale_boundaries {
            Some(b) => Layout::Multiscale { intervals: ScaleIntervals::new(b.clone())? },
            None => Layout::multiscale(),
        },
        LayoutArg::Spp => Layout::SpatialPyramid { grid_sides: a.grid_sides.clone() },
    };
    layout.validate()?;
    Ok(PoolingSpec::new(op(a.op), layout, a.rootsift))
}

fn pool(a: &PoolArgs) -> Result<()> {
    let ds = dataset(&a.manifest)?;
    let spec = pooling_spec(a)?;
    let ids: Vec<String> = ds.manifest.images.keys().cloned().collect();
    let records: Vec<ImageRecord> = load_records(&ds, &ids, Some(&[a.layer.as_str()]), a.top_k)?;
    let values = pool_records(&records, &a.layer, &spec)?;
    let file = FeatureFile { layer: a.layer.clone(), spec, features: ids.iter().cloned().zip(values).collect() };
    let mut outputs = Outputs::default();
    outputs.write_json(&a.out, &file)?;
    echo(&mut outputs, &echo_path(&a.out), "pool", None, a)?;
    outputs.commit();
    let dim = file.features.values().next().map_or(0, Vec::len);
    print!("{}", table(&["images", "dim"], &[vec![ids.len().to_string(), dim.to_string()]]));
    Ok(())
}

fn manifest_labels(ds: &Dataset, ids: &[String]) -> Result<Vec<Vec<bool>>> {
    ids.iter()
        .map(|id| {
            let entry = ds.manifest.images.get(id).with_context(|| format!("unknown image {id}"))?;
            entry.labels.to_flags(ds.categories()).map_err(|m| anyhow::anyhow!("image {id}: {m}"))
        })
        .collect()
}

fn train(a: &TrainArgs) -> Result<()> {
    let ds = dataset(&a.manifest)?;
    let file: FeatureFile<f64> = FeatureFile::load(&a.features)?;
    let (ids, val) = training_ids(&ds)?;
    let features = file.select(&ids)?;
    let labels = manifest_labels(&ds, &ids)?;
    let config = solver_config(&a.solver);
    let out = train_base(&features, &labels, ds.categories(), &file.tag(), val.as_deref(), &config)?;
    if out.models.is_empty() {
        bail!("no category has both positive and negative training images");
    }
    let mut outputs = Outputs::default();
    let path = outputs.file(&a.out)?;
    save_linear_models(&path, &out.models)?;
    echo(&mut outputs, &echo_path(&a.out), "train", Some(config.seed), a)?;
    outputs.commit();
    let rows: Vec<Vec<String>> = out
        .selections
        .iter()
        .map(|s| {
            let acc = s.validation_accuracy.iter().find(|(c, _)| *c == s.chosen_cost).map_or(f64::NAN, |v| v.1);
            vec![s.category.clone(), s.chosen_cost.to_string(), fmt(acc)]
        })
        .collect();
    print!("{}", table(&["category", "C", "val_acc"], &rows));
    for s in &out.skipped {
        println!("skipped {s}");
    }
    Ok(())
}

fn carr_train(a: &CarrTrainArgs) -> Result<()> {
    let ds = dataset(&a.manifest)?;
    let base: Vec<deepattr::LinearModel> = load_linear_models(&a.base)?;
    let Some(first) = base.first() else { bail!("{} holds no models", a.base.display()) };
    let config = CarrConfig {
        iterations: a.iters,
        context_ratio: a.beta,
        min_top_k: a.min_top_k,
        refine_layer: a.refine_layer.clone(),
        refine_operator: op(a.refine_op),
        refine_layout: match a.refine_layout {
            RefineLayoutArg::MirrorGlobal => RefineLayout::MirrorGlobal,
            RefineLayoutArg::Single => RefineLayout::Single,
        },
        score_threshold: a.theta,
        alpha_mode: match a.alpha_mode {
            AlphaModeArg::Adaboost => AlphaMode::AdaboostRule,
            AlphaModeArg::GridSearch => AlphaMode::GridSearch,
        },
        ..Default::default()
    };
    config.validate()?;
    let train_cfg = solver_config(&a.solver);
    let layers: BTreeSet<&str> = base.iter().map(|m| m.feature_tag.layer.as_str()).chain([first.feature_tag.layer.as_str(), a.refine_layer.as_str()]).collect();
    let layers: Vec<&str> = layers.into_iter().collect();
    let (ids, val) = training_ids(&ds)?;
    let records: Vec<ImageRecord> = load_records(&ds, &ids, Some(&layers), a.top_k)?;
    let ensembles = train_carr(&records, ds.categories(), &base, &config, &train_cfg, val.as_deref())?;
    let mut outputs = Outputs::default();
    let path = outputs.file(&a.out)?;
    save_ensembles(&path, &ensembles)?;
    echo(&mut outputs, &echo_path(&a.out), "carr-train", Some(train_cfg.seed), a)?;
    outputs.commit();
    let rows: Vec<Vec<String>> = ensembles
        .iter()
        .flat_map(|e| {
            e.stages.iter().enumerate().map(move |(t, s)| {
                vec![e.category.clone(), t.to_string(), fmt(s.alpha), fmt(s.train_error), s.model.dim().to_string()]
            })
        })
        .collect();
    print!("{}", table(&["category", "stage", "alpha", "train_error", "dim"], &rows));
    Ok(())
}

fn ensemble_layers(ensembles: &[CarrEnsemble]) -> Vec<String> {
    let set: BTreeSet<String> =
        ensembles.iter().flat_map(|e| e.stages.iter().map(|s| s.feature_tag.layer.clone())).collect();
    set.into_iter().collect()
}

fn predict(a: &PredictArgs) -> Result<()> {
    let ds = dataset(&a.manifest)?;
    let ensembles: Vec<CarrEnsemble> = load_ensembles(&a.ensemble)?;
    if ensembles.is_empty() {
        bail!("{} holds no models", a.ensemble.display());
    }
    let ids = ds.split(&a.split).to_vec();
    if ids.is_empty() {
        bail!("split {} is empty or missing", a.split);
    }
    let layers = ensemble_layers(&ensembles);
    let layer_refs: Vec<&str> = layers.iter().map(String::as_str).collect();
    let records: Vec<ImageRecord> = load_records(&ds, &ids, Some(&layer_refs), a.top_k)?;
    let predictions = predict_records(&ensembles, &records)?;
    let scores = ScoreTable::from_predictions(&a.split, &ensembles, &records, &predictions);
    let mut outputs = Outputs::default();
    outputs.write_json(&a.out, &scores)?;
    echo(&mut outputs, &echo_path(&a.out), "predict", None, a)?;
    outputs.commit();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for img in &scores.images {
        *counts.entry(img.label.as_str()).or_default() += 1;
    }
    let rows: Vec<Vec<String>> = counts.iter().map(|(c, n)| vec![c.to_string(), n.to_string()]).collect();
    print!("{}", table(&["predicted", "images"], &rows));
    Ok(())
}

#[derive(Serialize)]
struct Report<D: Serialize> {
    metric: String,
    value: f64,
    per_category: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    details: Option<D>,
}

fn emit<D: Serialize>(report: &Report<D>, out: Option<&Path>, args: &impl Serialize, command: &str) -> Result<()> {
    match out {
        Some(p) => {
            let mut outputs = Outputs::default();
            outputs.write_json(p, report)?;
            echo(&mut outputs, &echo_path(p), command, None, args)?;
            outputs.commit();
        }
        None => println!("{}", serde_json::to_string_pretty(report)?),
    }
    Ok(())
}

fn eval_cls(a: &EvalClsArgs) -> Result<()> {
    let ds = dataset(&a.manifest)?;
    let scores: ScoreTable = read_json(&a.scores)?;
    let report: Report<()> = match a.metric {
        MetricArg::Map => {
            let variant = if a.eleven_point { ApVariant::ElevenPoint } else { ApVariant::AllPoint };
            let m = deepattr::pipeline::evaluate_map(&scores, &ds, variant)?;
            Report { metric: "map".into(), value: m.value, per_category: m.per_category, details: None }
        }
        MetricArg::Accuracy => {
            let acc = deepattr::pipeline::evaluate_accuracy(&scores, &ds)?;
            let per_category = acc.per_category.iter().map(|(c, v)| (ds.categories()[*c].clone(), *v)).collect();
            Report { metric: "accuracy".into(), value: acc.value, per_category, details: None }
        }
    };
    let mut rows: Vec<Vec<String>> = report.per_category.iter().map(|(c, v)| vec![c.clone(), fmt(*v)]).collect();
    rows.push(vec!["mean".into(), fmt(report.value)]);
    print!("{}", table(&["category", &report.metric], &rows));
    emit(&report, a.out.as_deref(), a, "eval-cls")
}

#[derive(Serialize)]
struct RetrievalDetails {
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_count: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    skipped: Vec<String>,
}

fn eval_retrieval(a: &EvalRetrievalArgs) -> Result<()> {
    let file: FeatureFile<f64> = FeatureFile::load(&a.features)?;
    let groups: BTreeMap<String, String> = read_json(&a.groups)?;
    let ids: Vec<String> = file.features.keys().cloned().collect();
    let group_ids = ids
        .iter()
        .map(|id| groups.get(id).cloned().with_context(|| format!("item {id} has no group")))
        .collect::<Result<Vec<_>>>()?;
    let index = RetrievalIndex::new(ids, file.features.values().cloned().collect(), group_ids)?;
    let report = match a.protocol {
        ProtocolArg::Holidays => {
            let queries: Vec<String> = match &a.queries {
                Some(p) => read_json(p)?,
                None => first_member_queries(&index),
            };
            let r = holidays_map(&index, &queries)?;
            Report {
                metric: "holidays_map".into(),
                value: r.map,
                per_category: r.per_query,
                details: Some(RetrievalDetails { mean_count: None, skipped: r.skipped }),
            }
        }
        ProtocolArg::Ukb => {
            let s = ukb_score(&index)?;
            Report {
                metric: "ukb_top4".into(),
                value: s.percentage,
                per_category: BTreeMap::new(),
                details: Some(RetrievalDetails { mean_count: Some(s.mean_count), skipped: Vec::new() }),
            }
        }
    };
    let mut rows = vec![vec![report.metric.clone(), fmt(report.value)]];
    if let Some(mc) = report.details.as_ref().and_then(|d| d.mean_count) {
        rows.push(vec!["mean_count".into(), fmt(mc)]);
    }
    print!("{}", table(&["metric", "value"], &rows));
    emit(&report, a.out.as_deref(), a, "eval-retrieval")
}

#[derive(Serialize)]
struct RecallReport {
    metric: &'static str,
    iou: f64,
    images: usize,
    curve: Vec<RecallPoint>,
}

#[derive(Serialize)]
struct RecallPoint {
    k: usize,
    recall: f64,
}

fn recall(a: &RecallArgs) -> Result<()> {
    if a.k_list.is_empty() || a.k_list.contains(&0) {
        bail!("--k-list needs positive values");
    }
    let ds = dataset(&a.manifest)?;
    let annotations = read_annotations(&a.annotations)?;
    let curve = proposal_recall(&ds, &annotations, &a.k_list, a.iou)?;
    let report = RecallReport {
        metric: "recall",
        iou: a.iou,
        images: annotations.values().filter(|b| !b.is_empty()).count(),
        curve: curve.iter().map(|&(k, recall)| RecallPoint { k, recall }).collect(),
    };
    let rows: Vec<Vec<String>> = curve.iter().map(|(k, r)| vec![k.to_string(), fmt(*r)]).collect();
    print!("{}", table(&["k", "recall"], &rows));
    match &a.out {
        Some(p) => {
            let mut outputs = Outputs::default();
            outputs.write_json(p, &report)?;
            echo(&mut outputs, &echo_path(p), "proposal-recall", None, a)?;
            outputs.commit();
        }
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}

#[derive(Serialize)]
struct RegionOut {
    index: usize,
    #[serde(rename = "box")]
    bbox: BBox,
    objectness: f64,
    score: f64,
}

#[derive(Serialize)]
struct AttributeOut {
    dim: usize,
    block: usize,
    code_dim: usize,
    contribution: f64,
    region: Option<usize>,
    #[serde(rename = "box")]
    bbox: Option<BBox>,
}

#[derive(Serialize)]
struct BacktrackReport {
    image: String,
    category: String,
    region: RegionOut,
    attributes: Vec<AttributeOut>,
}

fn backtrack_cmd(a: &BacktrackArgs) -> Result<()> {
    let ds = dataset(&a.manifest)?;
    let ensembles: Vec<CarrEnsemble> = load_ensembles(&a.ensemble)?;
    let ensemble = ensembles
        .iter()
        .find(|e| e.category == a.category)
        .with_context(|| format!("no model for category {}", a.category))?;
    let layers = ensemble_layers(std::slice::from_ref(ensemble));
    let layer_refs: Vec<&str> = layers.iter().map(String::as_str).collect();
    let record: ImageRecord = ds.load_record_layers(&a.image, Some(&layer_refs))?;
    let (best, score) = most_discriminative_region(ensemble, &record)?;
    let base = ensemble.base()?;
    let pooled = pool_image(&record, &base.feature_tag.layer, &base.feature_tag.spec)?;
    let code_dim = record.layer(&base.feature_tag.layer)?.dim();
    let attributes = backtrack(&pooled, &base.model)?
        .into_iter()
        .take(a.top)
        .map(|t| AttributeOut {
            dim: t.dim,
            block: t.block,
            code_dim: t.dim % code_dim,
            contribution: t.contribution,
            region: t.region,
            bbox: t.region.map(|r| record.proposals[r].bbox),
        })
        .collect::<Vec<_>>();
    let p = record.proposals[best];
    let report = BacktrackReport {
        image: a.image.clone(),
        category: a.category.clone(),
        region: RegionOut { index: best, bbox: p.bbox, objectness: p.objectness, score },
        attributes,
    };
    let b = p.bbox;
    println!(
        "most discriminative region {best}: ({}, {}, {}, {}) score {}",
        b.x_min(),
        b.y_min(),
        b.x_max(),
        b.y_max(),
        fmt(score)
    );
    let rows: Vec<Vec<String>> = report
        .attributes
        .iter()
        .map(|t| {
            vec![
                t.dim.to_string(),
                t.block.to_string(),
                t.code_dim.to_string(),
                fmt(t.contribution),
                t.region.map_or("-".into(), |r| r.to_string()),
            ]
        })
        .collect();
    print!("{}", table(&["dim", "block", "code_dim", "contribution", "region"], &rows));
    match &a.out {
        Some(p) => {
            let mut outputs = Outputs::default();
            outputs.write_json(p, &report)?;
            echo(&mut outputs, &echo_path(p), "backtrack", None, a)?;
            outputs.commit();
        }
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}
