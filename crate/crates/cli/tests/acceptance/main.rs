//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.

mod oracles;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use deepattr::carr::{alpha_from_error, carr_predict, CarrConfig, CarrEnsemble, CarrStage};
use deepattr::dataio::{
    decode_codes, encode_codes, generate_synthetic, load_ensembles, load_linear_models, load_manifest, read_codes,
    read_truth, save_ensembles, save_linear_models, write_codes, Dataset, ImageRecord, SyntheticSpec,
};
use deepattr::evalx::{
    average_precision, average_precision_ordered, first_member_queries, holidays_map, ukb_score, ApVariant,
    RankedList, RetrievalIndex,
};
use deepattr::geometry::{recall_at_k, BBox, RegionProposal};
use deepattr::linclass::{kkt_violation, train_binary, FeatureTag, LinearModel, TrainConfig};
use deepattr::pipeline::{
    base_ensembles, evaluate_map, label_matrix, load_records, pool_records, predict_records, train_base,
    train_carr, training_ids, ScoreTable, TEST_SPLIT,
};
use deepattr::pooling::{pool_image, pool_regions, rootsift_normalize, CodeMatrix, Layout, PoolOp, PoolingSpec};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn main() -> ExitCode {
    let checks: Vec<(&str, fn() -> Check)> = vec![
        ("pooling invariants", pooling_invariants),
        ("rootsift", rootsift),
        ("svm solver", svm_solver),
        ("average precision", average_precision_oracle),
        ("stage weight", stage_weight),
        ("carr degeneracy", carr_degeneracy),
        ("carr improvement", carr_improvement),
        ("multiscale vs single-scale", multiscale_vs_single),
        ("region-count saturation", region_saturation),
        ("retrieval", retrieval),
        ("determinism", determinism),
        ("format round trips", format_round_trips),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{secs:.2}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail} [{secs:.2}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

fn random_box(rng: &mut ChaCha8Rng, width: u32, height: u32) -> [u32; 4] {
    let x0 = rng.random_range(0..width);
    let x1 = rng.random_range(x0 + 1..=width);
    let y0 = rng.random_range(0..height);
    let y1 = rng.random_range(y0 + 1..=height);
    [x0, y0, x1, y1]
}

fn proposal(b: [u32; 4], objectness: f64) -> RegionProposal {
    RegionProposal::new(BBox::new(b[0], b[1], b[2], b[3]).unwrap(), objectness)
}

fn pooling_invariants() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let max_multi = PoolingSpec::new(PoolOp::Max, Layout::multiscale(), false);
    let avg_multi = PoolingSpec::new(PoolOp::Average, Layout::multiscale(), false);
    let max_single = PoolingSpec::new(PoolOp::Max, Layout::Single, false);
    let avg_single = PoolingSpec::new(PoolOp::Average, Layout::Single, false);
    for inst in 0..200 {
        let n = rng.random_range(1..=20);
        let d = rng.random_range(1..=16);
        let (w, h) = (rng.random_range(40..=400), rng.random_range(40..=400));
        let boxes: Vec<[u32; 4]> = (0..n).map(|_| random_box(&mut rng, w, h)).collect();
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random::<f64>()).collect()).collect();
        let codes = CodeMatrix::from_rows("fc1", &rows).map_err(err)?;
        let props: Vec<RegionProposal> = boxes.iter().map(|b| proposal(*b, rng.random())).collect();
        let frame = BBox::frame(w, h).map_err(err)?;
        let all: Vec<usize> = (0..n).collect();
        let pool = |spec: &PoolingSpec, c: &CodeMatrix<f64>, p: &[RegionProposal], s: &[usize]| {
            pool_regions(c, p, &frame, s, spec).map_err(err)
        };

        let multi = pool(&max_multi, &codes, &props, &all)?;
        let oracle = oracles::multiscale_max(&rows, &boxes, w, h);
        ensure!(multi.values == oracle, "instance {inst}: multiscale max differs from brute force");

        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let prow: Vec<Vec<f64>> = perm.iter().map(|&k| rows[k].clone()).collect();
        let pprops: Vec<RegionProposal> = perm.iter().map(|&k| props[k]).collect();
        let pcodes = CodeMatrix::from_rows("fc1", &prow).map_err(err)?;
        for spec in [&max_multi, &max_single] {
            let a = pool(spec, &codes, &props, &all)?;
            let b = pool(spec, &pcodes, &pprops, &all)?;
            ensure!(a.values == b.values, "instance {inst}: max pooling not permutation invariant");
            for (pa, pb) in a.provenance.iter().zip(&b.provenance) {
                ensure!(*pa == pb.map(|k| perm[k]), "instance {inst}: provenance does not follow the permutation");
            }
        }

        for (mx, av) in [(&max_multi, &avg_multi), (&max_single, &avg_single)] {
            let m = pool(mx, &codes, &props, &all)?;
            let a = pool(av, &codes, &props, &all)?;
            ensure!(m.values.iter().zip(&a.values).all(|(x, y)| x >= y), "instance {inst}: average exceeds max");
        }

        let k = rng.random_range(0..n);
        for spec in [&max_single, &avg_single] {
            let one = pool(spec, &codes, &props, &[k])?;
            ensure!(one.values == rows[k], "instance {inst}: single-region pooling is not the identity");
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}, budget 1 s");
    Ok(format!("200 instances exact, {:.0} ms", elapsed.as_secs_f64() * 1e3))
}

fn rootsift() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let d = rng.random_range(1..=128);
        let mut v: Vec<f64> = (0..d)
            .map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random::<f64>() * 10f64.powi(rng.random_range(-6..6)) })
            .collect();
        let k = rng.random_range(0..d);
        v[k] = v[k].max(1e-3);
        let r = rootsift_normalize(&v).map_err(err)?;
        let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        worst = worst.max((norm - 1.0).abs());
    }
    ensure!(worst <= 1e-9, "max |norm - 1| = {worst:e}");
    for d in 1..=64 {
        for i in 0..d {
            let mut e = vec![0.0f64; d];
            e[i] = 1.0;
            ensure!(rootsift_normalize(&e).map_err(err)? == e, "one-hot e{i} of dim {d} moved");
        }
    }
    Ok(format!("10000 vectors, max |norm - 1| = {worst:.1e}; one-hot fixed points exact"))
}

fn svm_solver() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let config = TrainConfig::default();
    let mut solver_time = Duration::ZERO;
    let mut worst_rel = 0.0f64;
    let mut worst_kkt = 0.0f64;
    let mut worst_gap = 0.0f64;
    let mut separable_count = 0;
    for inst in 0..100 {
        let separable = inst % 2 == 0;
        let (x, labels, cost) = loop {
            let m = rng.random_range(4..=60);
            let p = rng.random_range(1..=10);
            let mut x = Vec::new();
            let mut labels = Vec::new();
            let cost;
            if separable {
                let w: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
                let b: f64 = rng.random_range(-0.3..0.3);
                let norm = (w.iter().map(|v| v * v).sum::<f64>() + b * b).sqrt();
                while x.len() < m {
                    let xi: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
                    let s = w.iter().zip(&xi).map(|(a, c)| a * c).sum::<f64>() + b;
                    if s.abs() / norm >= 0.2 {
                        labels.push(s > 0.0);
                        x.push(xi);
                    }
                }
                cost = 100.0;
            } else {
                for _ in 0..m {
                    x.push((0..p).map(|_| rng.random_range(-1.0..1.0)).collect());
                    labels.push(rng.random_bool(0.5));
                }
                cost = [0.01, 0.1, 1.0, 10.0][rng.random_range(0..4)];
            }
            let pos = labels.iter().filter(|l| **l).count();
            if pos > 0 && pos < labels.len() {
                break (x, labels, cost);
            }
        };
        let start = Instant::now();
        let out = train_binary(&x, &labels, cost, &config).map_err(err)?;
        solver_time += start.elapsed();

        let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();
        let ours = oracles::svm_primal(&out.model.weights, out.model.bias, &x, &y, cost);
        let (ow, ob) = oracles::svm_dual_projected_gradient(&x, &y, cost);
        let reference = oracles::svm_primal(&ow, ob, &x, &y, cost);
        let rel = (ours - reference).abs() / reference.abs().max(1e-12);
        worst_rel = worst_rel.max(rel);
        ensure!(rel <= 1e-3, "instance {inst}: objective {ours} vs oracle {reference} (relative {rel:e})");

        let kkt = kkt_violation(&out.alphas, &x, &labels, cost, &config);
        worst_kkt = worst_kkt.max(kkt);
        ensure!(kkt <= 10.0 * config.tolerance, "instance {inst}: KKT violation {kkt:e}");
        worst_gap = worst_gap.max(out.duality_gap);
        ensure!(out.duality_gap <= 10.0 * config.tolerance, "instance {inst}: relative duality gap {:e}", out.duality_gap);

        if separable {
            separable_count += 1;
            let acc = out.model.accuracy(&x, &labels).map_err(err)?;
            ensure!(acc == 1.0, "instance {inst}: separable training accuracy {acc}");
        }
    }
    ensure!(solver_time < Duration::from_secs(30), "solver took {solver_time:?}, budget 30 s");
    Ok(format!(
        "100 instances, max relative objective gap {worst_rel:.1e}, max KKT {worst_kkt:.1e}, max relative gap {worst_gap:.1e}, \
         {separable_count} separable at 100% accuracy, solver {:.2}s",
        solver_time.as_secs_f64()
    ))
}

fn average_precision_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for inst in 0..1000 {
        let n = rng.random_range(1..=50);
        let tied = inst % 2 == 0;
        let scores: Vec<f64> = (0..n)
            .map(|_| if tied { f64::from(rng.random_range(0..6u8)) } else { rng.random::<f64>() })
            .collect();
        let mut relevant: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        let k = rng.random_range(0..n);
        relevant[k] = true;
        let ids: Vec<String> = (0..n).map(|i| format!("{i:03}")).collect();
        let list = RankedList::from_scores(&ids, &scores, &relevant).map_err(err)?;
        let ap = average_precision(&list).map_err(err)?;
        let oracle = oracles::brute_force_ap(&scores, &relevant);
        ensure!(ap.to_bits() == oracle.to_bits(), "instance {inst}: AP {ap} vs brute force {oracle}");

        let perfect: Vec<bool> = {
            let r = relevant.iter().filter(|r| **r).count();
            (0..n).map(|i| i < r).collect()
        };
        let ap = average_precision_ordered(&perfect, ApVariant::AllPoint).map_err(err)?;
        ensure!(ap == 1.0, "instance {inst}: perfect ranking gives {ap}");
    }
    let ap = average_precision_ordered(&[false, false, true, true], ApVariant::AllPoint).map_err(err)?;
    ensure!((ap - 5.0 / 12.0).abs() <= f64::EPSILON, "(0,0,1,1) gives {ap}");
    Ok(format!("1000 instances bit-identical to brute force; perfect = 1; (0,0,1,1) = {ap:.5}"))
}

fn stage_weight() -> Check {
    ensure!(alpha_from_error(0.5) == 0.0, "alpha(0.5) = {}", alpha_from_error(0.5));
    let eps = 1e-6;
    let grid: Vec<f64> = (0..1000).map(|i| eps + (1.0 - 2.0 * eps) * i as f64 / 999.0).collect();
    for w in grid.windows(2) {
        ensure!(
            alpha_from_error(w[1]) < alpha_from_error(w[0]),
            "not strictly decreasing between {} and {}",
            w[0],
            w[1]
        );
    }
    let mut worst = 0.0f64;
    for i in 0..=1000 {
        let e = i as f64 / 1000.0;
        worst = worst.max((alpha_from_error(e) + alpha_from_error(1.0 - e)).abs());
    }
    ensure!(worst <= 1e-12, "antisymmetry off by {worst:e}");
    Ok(format!("alpha(0.5) = 0; strictly decreasing on 1000 points; antisymmetry within {worst:.1e}"))
}

fn random_record(rng: &mut ChaCha8Rng, id: String, dim: usize, categories: usize) -> ImageRecord<f64> {
    let (w, h) = (rng.random_range(60..=320), rng.random_range(60..=320));
    let n = rng.random_range(1..=20);
    let proposals = (0..n).map(|_| proposal(random_box(rng, w, h), rng.random())).collect();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..dim).map(|_| rng.random::<f64>().powi(4)).collect();
            let total: f64 = raw.iter().sum();
            raw.iter().map(|v| v / total).collect()
        })
        .collect();
    let codes = BTreeMap::from([("softmax".to_string(), CodeMatrix::from_rows("softmax", &rows).unwrap())]);
    ImageRecord { id, width: w, height: h, labels: (0..categories).map(|_| rng.random_bool(0.3)).collect(), proposals, codes }
}

fn carr_degeneracy() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (dim, categories) = (8, 3);
    let spec = PoolingSpec::default();
    let tag = FeatureTag { layer: "softmax".into(), spec: spec.clone(), stage: 0 };
    let mut compared = 0;
    for i in 0..50 {
        let models: Vec<LinearModel<f64>> = (0..categories)
            .map(|c| {
                let w = (0..spec.output_dim(dim)).map(|_| rng.random_range(-2.0..2.0)).collect();
                LinearModel::new(format!("c{c}"), w, rng.random_range(-1.0..1.0)).with_tag(tag.clone())
            })
            .collect();
        let record = random_record(&mut rng, format!("r{i:02}"), dim, categories);
        let ensembles = base_ensembles(&models);
        let pred = carr_predict(&ensembles, &record).map_err(err)?;
        let pooled = pool_image(&record, "softmax", &spec).map_err(err)?;
        let direct: Vec<f64> = models.iter().map(|m| m.score(&pooled.values)).collect::<Result<_, _>>().map_err(err)?;
        for (c, (a, b)) in pred.scores.iter().zip(&direct).enumerate() {
            ensure!(a.to_bits() == b.to_bits(), "record {i} category {c}: {a} vs {b}");
            compared += 1;
        }
        let best = (0..categories).fold(0, |b, c| if direct[c] > direct[b] { c } else { b });
        ensure!(pred.label == best, "record {i}: label {} vs argmax {best}", pred.label);
    }
    Ok(format!("50 records, {compared} scores bit-identical"))
}

struct Experiment {
    _dir: tempfile::TempDir,
    ds: Dataset,
    train: Vec<ImageRecord<f64>>,
    validation: Option<Vec<bool>>,
    test: Vec<ImageRecord<f64>>,
    truth_path: PathBuf,
}

fn experiment(spec: &SyntheticSpec) -> Result<Experiment, String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let out = generate_synthetic(spec, dir.path()).map_err(err)?;
    let ds = load_manifest(&out.manifest_path).map_err(err)?;
    let (ids, validation) = training_ids(&ds).map_err(err)?;
    let train = load_records(&ds, &ids, None, None).map_err(err)?;
    let test = load_records(&ds, ds.split(TEST_SPLIT), None, None).map_err(err)?;
    Ok(Experiment { _dir: dir, ds, train, validation, test, truth_path: out.truth_path })
}

fn ensemble_map(ex: &Experiment, ensembles: &[CarrEnsemble<f64>], test: &[ImageRecord<f64>]) -> Result<f64, String> {
    let preds = predict_records(ensembles, test).map_err(err)?;
    let table = ScoreTable::from_predictions(TEST_SPLIT, ensembles, test, &preds);
    Ok(evaluate_map(&table, &ex.ds, ApVariant::AllPoint).map_err(err)?.value)
}

fn base_models(
    ex: &Experiment,
    train: &[ImageRecord<f64>],
    spec: &PoolingSpec,
) -> Result<Vec<LinearModel<f64>>, String> {
    let tag = FeatureTag { layer: "softmax".into(), spec: spec.clone(), stage: 0 };
    let features = pool_records(train, "softmax", spec).map_err(err)?;
    let out = train_base(&features, &label_matrix(train), ex.ds.categories(), &tag, ex.validation.as_deref(), &TrainConfig::default())
        .map_err(err)?;
    Ok(out.models)
}

fn carr_improvement() -> Check {
    let start = Instant::now();
    let ex = experiment(&SyntheticSpec::default())?;
    let base = base_models(&ex, &ex.train, &PoolingSpec::default())?;
    let base_map = ensemble_map(&ex, &base_ensembles(&base), &ex.test)?;
    let mut maps = Vec::new();
    for t in [1, 2] {
        let config = CarrConfig { iterations: t, context_ratio: 0.025, ..CarrConfig::default() };
        let ens = train_carr(&ex.train, ex.ds.categories(), &base, &config, &TrainConfig::default(), ex.validation.as_deref())
            .map_err(err)?;
        maps.push(ensemble_map(&ex, &ens, &ex.test)?);
    }
    let elapsed = start.elapsed();
    let detail = format!(
        "base {:.2}, T=1 {:.2}, T=2 {:.2} mAP points, {:.1}s",
        100.0 * base_map,
        100.0 * maps[0],
        100.0 * maps[1],
        elapsed.as_secs_f64()
    );
    ensure!(maps[0] >= base_map + 0.02, "T=1 gains less than 2 points: {detail}");
    ensure!(maps[1] >= maps[0] - 0.005, "T=2 degrades by more than 0.5 points: {detail}");
    ensure!(elapsed < Duration::from_secs(300), "runtime over 5 min: {detail}");
    Ok(detail)
}

fn multiscale_vs_single() -> Check {
    let spec: SyntheticSpec = serde_json::from_str(r#"{"scale_mode": "disjoint"}"#).map_err(err)?;
    let ex = experiment(&spec)?;
    let multi_spec = PoolingSpec::default();
    let single_spec = PoolingSpec::new(PoolOp::Max, Layout::Single, true);
    let multi = ensemble_map(&ex, &base_ensembles(&base_models(&ex, &ex.train, &multi_spec)?), &ex.test)?;
    let single = ensemble_map(&ex, &base_ensembles(&base_models(&ex, &ex.train, &single_spec)?), &ex.test)?;
    let detail = format!("multiscale {:.2} vs single {:.2} mAP points", 100.0 * multi, 100.0 * single);
    ensure!(multi >= single + 0.01, "gap under 1 point: {detail}");
    Ok(detail)
}

fn region_saturation() -> Check {
    let spec: SyntheticSpec = serde_json::from_str(r#"{"cross_talk": 0.0}"#).map_err(err)?;
    let ex = experiment(&spec)?;
    let truth = read_truth(&ex.truth_path).map_err(err)?;
    // proposals are stored in objectness order, so a kind's position is its rank
    let all_planted = truth
        .values()
        .map(|t| t.kinds.iter().rposition(|k| k.is_planted()).map_or(0, |p| p + 1))
        .max()
        .unwrap_or(0);
    let ks = [1usize, 2, 3, 4, 6, 8, 12, 18, 24, 30, 45, 60];
    let mut curve = Vec::new();
    for &k in &ks {
        let train: Vec<_> = ex.train.iter().map(|r| r.truncate_top_k(k)).collect::<Result<_, _>>().map_err(err)?;
        let test: Vec<_> = ex.test.iter().map(|r| r.truncate_top_k(k)).collect::<Result<_, _>>().map_err(err)?;
        let base = base_models(&ex, &train, &PoolingSpec::default())?;
        curve.push(ensemble_map(&ex, &base_ensembles(&base), &test)?);
    }
    let shown: Vec<String> = ks.iter().zip(&curve).map(|(k, m)| format!("{k}:{:.2}", 100.0 * m)).collect();
    let detail = format!("planted regions within top {all_planted}; mAP by K {}", shown.join(" "));
    for i in 1..curve.len() {
        ensure!(curve[i] >= curve[i - 1] - 0.005, "drop between K={} and K={}: {detail}", ks[i - 1], ks[i]);
    }
    let plateau = ks.iter().position(|&k| k >= all_planted).ok_or("planted regions beyond largest K")?;
    for i in plateau..curve.len() {
        ensure!((curve[i] - curve[plateau]).abs() <= 0.005, "not flat beyond K={}: {detail}", ks[plateau]);
    }
    Ok(detail)
}

fn retrieval() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut ids, mut feats, mut groups) = (Vec::new(), Vec::new(), Vec::new());
    for g in 0..6 {
        let v: Vec<f64> = (0..16).map(|_| rng.random::<f64>()).collect();
        for m in 0..4 {
            ids.push(format!("g{g}_{m}"));
            feats.push(v.clone());
            groups.push(format!("g{g}"));
        }
    }
    let index = RetrievalIndex::new(ids, feats, groups).map_err(err)?;
    let ukb = ukb_score(&index).map_err(err)?;
    ensure!(ukb.mean_count == 4.0, "ukb score {}", ukb.mean_count);

    let ids = ["a1", "a2", "a3", "b1", "b2", "c1", "c2", "c3"];
    let groups = ["a", "a", "a", "b", "b", "c", "c", "c"];
    let vectors = vec![
        vec![1.0, 0.0, 0.0],
        vec![0.9, 0.3, 0.1],
        vec![0.2, 0.9, 0.1],
        vec![0.0, 1.0, 0.0],
        vec![0.1, 0.8, 0.5],
        vec![0.0, 0.0, 1.0],
        vec![0.5, 0.1, 0.9],
        vec![0.6, 0.6, 0.2],
    ];
    let index = RetrievalIndex::new(
        ids.iter().map(|s| s.to_string()).collect(),
        vectors.clone(),
        groups.iter().map(|s| s.to_string()).collect(),
    )
    .map_err(err)?;
    let queries = first_member_queries(&index);
    let report = holidays_map(&index, &queries).map_err(err)?;
    let query_refs: Vec<&str> = queries.iter().map(String::as_str).collect();
    let oracle = oracles::holidays_exhaustive(&ids, &vectors, &groups, &query_refs);
    ensure!(report.map.to_bits() == oracle.to_bits(), "holidays mAP {} vs exhaustive {oracle}", report.map);

    for inst in 0..200 {
        let (w, h) = (rng.random_range(50..=300), rng.random_range(50..=300));
        let n = rng.random_range(1..=40);
        let mut props: Vec<RegionProposal> = (0..n).map(|_| proposal(random_box(&mut rng, w, h), rng.random())).collect();
        props.sort_by(|a, b| b.objectness.total_cmp(&a.objectness));
        let gts: Vec<BBox> = (0..rng.random_range(1..=5))
            .map(|_| {
                let b = random_box(&mut rng, w, h);
                BBox::new(b[0], b[1], b[2], b[3]).unwrap()
            })
            .collect();
        let mut last = 0.0;
        for k in 0..=n + 2 {
            let r = recall_at_k(&props, &gts, k, 0.5).map_err(err)?;
            ensure!(r >= last, "instance {inst}: recall drops at k={k}");
            last = r;
        }
    }
    Ok(format!("ukb 4.0; holidays {:.6} matches exhaustive; recall monotone on 200 instances", report.map))
}

fn run_cli(dir: &Path, jobs: usize, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_deepattr"))
        .current_dir(dir)
        .arg("--jobs")
        .arg(jobs.to_string())
        .args(args)
        .output()
        .map_err(err)?;
    ensure!(out.status.success(), "{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr));
    Ok(())
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn full_pipeline(jobs: usize) -> Result<(tempfile::TempDir, BTreeMap<PathBuf, Vec<u8>>), String> {
    let dir = tempfile::tempdir().map_err(err)?;
    fs::write(
        dir.path().join("spec.json"),
        r#"{"num_categories": 4, "images_per_split": {"train": 40, "val": 20, "test": 40}, "regions_per_image": 30, "seed": 5}"#,
    )
    .map_err(err)?;
    let m = "data/manifest.json";
    let steps: [&[&str]; 6] = [
        &["synth", "--spec", "spec.json", "--out", "data"],
        &["pool", "--manifest", m, "--out", "features.json"],
        &["train", "--manifest", m, "--features", "features.json", "--out", "models.json"],
        &["carr-train", "--manifest", m, "--base", "models.json", "--out", "ensembles.json"],
        &["predict", "--manifest", m, "--ensemble", "ensembles.json", "--out", "scores.json"],
        &["eval-cls", "--manifest", m, "--scores", "scores.json", "--out", "report.json"],
    ];
    for step in steps {
        run_cli(dir.path(), jobs, step)?;
    }
    let files = tree(dir.path());
    Ok((dir, files))
}

fn determinism() -> Check {
    let (_a, first) = full_pipeline(1)?;
    let (_b, second) = full_pipeline(1)?;
    let (_c, parallel) = full_pipeline(4)?;
    ensure!(first.contains_key(Path::new("report.json")), "no report written");
    for (name, other) in [("second run", &second), ("--jobs 4", &parallel)] {
        ensure!(first.keys().eq(other.keys()), "{name}: different file sets");
        for (path, bytes) in &first {
            ensure!(other[path] == *bytes, "{name}: {} differs", path.display());
        }
    }
    Ok(format!("{} files byte-identical across two runs and --jobs 1 vs 4", first.len()))
}

fn random_finite_f64(rng: &mut ChaCha8Rng) -> f64 {
    const SPECIAL: [f64; 6] = [0.0, -0.0, f64::MIN_POSITIVE, 5e-324, f64::MAX, -f64::MAX];
    if rng.random_bool(0.1) {
        return SPECIAL[rng.random_range(0..SPECIAL.len())];
    }
    loop {
        let v = f64::from_bits(rng.random());
        if v.is_finite() {
            return v;
        }
    }
}

fn random_finite_f32(rng: &mut ChaCha8Rng) -> f32 {
    const SPECIAL: [f32; 6] = [0.0, -0.0, f32::MIN_POSITIVE, 1e-45, f32::MAX, -f32::MAX];
    if rng.random_bool(0.1) {
        return SPECIAL[rng.random_range(0..SPECIAL.len())];
    }
    loop {
        let v = f32::from_bits(rng.random());
        if v.is_finite() {
            return v;
        }
    }
}

fn random_model(rng: &mut ChaCha8Rng, c: usize) -> LinearModel<f64> {
    let dim = rng.random_range(1..=40);
    let w = (0..dim).map(|_| random_finite_f64(rng)).collect();
    LinearModel::new(format!("cat{c}"), w, random_finite_f64(rng))
}

fn format_round_trips() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let dir = tempfile::tempdir().map_err(err)?;
    let layers = ["fc1", "fc7", "pool5"];
    for i in 0..100 {
        let rows = rng.random_range(1..=20);
        let dim = rng.random_range(1..=32);
        let values: Vec<f32> = (0..rows * dim).map(|_| random_finite_f32(&mut rng)).collect();
        let m = CodeMatrix::new(layers[i % 3], rows, dim, values.clone()).map_err(err)?;
        let path = dir.path().join(format!("{i}.rnc"));
        write_codes(&path, &m).map_err(err)?;
        let back: CodeMatrix<f32> = read_codes(&path).map_err(err)?;
        let same = back.layer() == m.layer()
            && back.num_regions() == rows
            && back.dim() == dim
            && back.values().iter().zip(&values).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure!(same, "RNC1 fixture {i} changed");
        let wide: CodeMatrix<f64> = decode_codes(&fs::read(&path).map_err(err)?, &path).map_err(err)?;
        ensure!(encode_codes(&wide).map_err(err)? == fs::read(&path).map_err(err)?, "RNC1 fixture {i} re-encodes differently");
    }

    for i in 0..100 {
        let path = dir.path().join(format!("{i}.json"));
        match i % 3 {
            0 => {
                let models: Vec<LinearModel<f64>> = (0..rng.random_range(1..=4)).map(|c| random_model(&mut rng, c)).collect();
                save_linear_models(&path, &models).map_err(err)?;
                let back: Vec<LinearModel<f64>> = load_linear_models(&path).map_err(err)?;
                ensure!(bits_equal_models(&models, &back), "model fixture {i} changed");
            }
            1 => {
                let models: Vec<LinearModel<f32>> = (0..rng.random_range(1..=4))
                    .map(|c| {
                        let w = (0..rng.random_range(1..=40)).map(|_| random_finite_f32(&mut rng)).collect();
                        LinearModel::new(format!("cat{c}"), w, random_finite_f32(&mut rng))
                    })
                    .collect();
                save_linear_models(&path, &models).map_err(err)?;
                let back: Vec<LinearModel<f32>> = load_linear_models(&path).map_err(err)?;
                let same = models.len() == back.len()
                    && models.iter().zip(&back).all(|(a, b)| {
                        a.bias.to_bits() == b.bias.to_bits()
                            && a.weights.len() == b.weights.len()
                            && a.weights.iter().zip(&b.weights).all(|(x, y)| x.to_bits() == y.to_bits())
                    });
                ensure!(same, "f32 model fixture {i} changed");
            }
            _ => {
                let ensembles: Vec<CarrEnsemble<f64>> = (0..rng.random_range(1..=3))
                    .map(|c| CarrEnsemble {
                        category: format!("cat{c}"),
                        stages: (0..rng.random_range(1..=3))
                            .map(|t| {
                                let model = random_model(&mut rng, c);
                                let tag = FeatureTag { stage: t, ..FeatureTag::default() };
                                CarrStage {
                                    model: model.with_tag(tag.clone()),
                                    alpha: random_finite_f64(&mut rng),
                                    train_error: rng.random(),
                                    feature_tag: tag,
                                }
                            })
                            .collect(),
                        config: CarrConfig::default(),
                    })
                    .collect();
                save_ensembles(&path, &ensembles).map_err(err)?;
                let back: Vec<CarrEnsemble<f64>> = load_ensembles(&path).map_err(err)?;
                let same = ensembles.len() == back.len()
                    && ensembles.iter().zip(&back).all(|(a, b)| {
                        a.stages.len() == b.stages.len()
                            && a.stages.iter().zip(&b.stages).all(|(s, u)| {
                                s.alpha.to_bits() == u.alpha.to_bits()
                                    && s.train_error.to_bits() == u.train_error.to_bits()
                                    && s.feature_tag == u.feature_tag
                                    && bits_equal_models(std::slice::from_ref(&s.model), std::slice::from_ref(&u.model))
                            })
                    });
                ensure!(same, "ensemble fixture {i} changed");
            }
        }
        let first = fs::read(&path).map_err(err)?;
        let again = dir.path().join(format!("{i}.again.json"));
        match i % 3 {
            0 => save_linear_models(&again, &load_linear_models::<f64>(&path).map_err(err)?).map_err(err)?,
            1 => save_linear_models(&again, &load_linear_models::<f32>(&path).map_err(err)?).map_err(err)?,
            _ => save_ensembles(&again, &load_ensembles::<f64>(&path).map_err(err)?).map_err(err)?,
        }
        ensure!(fs::read(&again).map_err(err)? == first, "model fixture {i} re-serializes differently");
    }
    Ok("100 RNC1 and 100 model fixtures bitwise".into())
}

fn bits_equal_models(a: &[LinearModel<f64>], b: &[LinearModel<f64>]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.category == y.category
                && x.feature_tag == y.feature_tag
                && x.bias.to_bits() == y.bias.to_bits()
                && x.weights.len() == y.weights.len()
                && x.weights.iter().zip(&y.weights).all(|(p, q)| p.to_bits() == q.to_bits())
        })
}
