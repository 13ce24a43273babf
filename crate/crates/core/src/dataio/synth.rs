//! Seeded synthetic datasets with planted target, context and clutter
//! regions.
//!
//! Softmax dimensions are split into per-category signature dimensions,
//! shared context dimensions (one small set per context group) and
//! background dimensions. Each image has one label and one distractor
//! category:
//!
//! * target rows spread their mass evenly over the label's signature dims;
//! * context rows spread it over the context dims of the label's group;
//! * with probability `cross_talk` a clutter row puts `cross_talk_strength`
//!   of its mass on one signature dim of the distractor and the rest on a
//!   background dim, otherwise it peaks on a background dim.
//!
//! Max pooling sees the distractor's signature at least as strongly as the
//! label's, while a single target row outscores any single clutter row.
//! The `fc1` layer is a fixed Gaussian expansion of the softmax row plus
//! noise. Planted regions get objectness in `[0.5, 1)`, clutter `[0, 0.5)`,
//! and every image lists its proposals by descending objectness.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{write_manifest, write_proposals, DatasetManifest, ImageEntry, Labels};
use super::rnc::write_codes;
use crate::error::{Error, Result};
use crate::geometry::{assign_scale_group, rank_by_objectness, region_scale, BBox, RegionProposal, ScaleIntervals};
use crate::pooling::{CodeMatrix, SOFTMAX_LAYER};

pub const FC_LAYER: &str = "fc1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// Every region kind draws from all five scale groups.
    #[default]
    Broad,
    /// Targets in the two largest groups, context and clutter in the three
    /// smallest.
    Disjoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_categories: usize,
    pub code_dim: usize,
    pub fc_dim: usize,
    pub images_per_split: BTreeMap<String, usize>,
    pub regions_per_image: usize,
    pub target_fraction: f64,
    pub context_fraction: f64,
    pub clutter_fraction: f64,
    /// Dirichlet mass on a row's peak dimensions.
    pub peak_concentration: f64,
    pub cross_talk: f64,
    pub cross_talk_strength: f64,
    pub signature_dims: usize,
    pub context_groups: usize,
    pub context_dims: usize,
    /// Dirichlet parameter of every non-peak dimension.
    pub background_alpha: f64,
    pub fc_noise: f64,
    pub scale_mode: ScaleMode,
    pub min_side: u32,
    pub max_side: u32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_categories: 10,
            code_dim: 64,
            fc_dim: 96,
            images_per_split: BTreeMap::from([("train".to_string(), 200), ("test".to_string(), 200)]),
            regions_per_image: 60,
            target_fraction: 0.1,
            context_fraction: 0.2,
            clutter_fraction: 0.7,
            peak_concentration: 60.0,
            cross_talk: 0.9,
            cross_talk_strength: 0.6,
            signature_dims: 4,
            context_groups: 3,
            context_dims: 2,
            background_alpha: 0.02,
            fc_noise: 0.01,
            scale_mode: ScaleMode::Broad,
            min_side: 240,
            max_side: 320,
            seed: 2016,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    Target,
    Context,
    Clutter,
    CrossTalk,
}

impl RegionKind {
    pub fn is_planted(self) -> bool {
        matches!(self, RegionKind::Target | RegionKind::Context)
    }
}

/// Generator ground truth for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTruth {
    pub label: usize,
    pub distractor: usize,
    /// Kind of each proposal, in file order.
    pub kinds: Vec<RegionKind>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub manifest_path: PathBuf,
    pub annotations_path: PathBuf,
    pub truth_path: PathBuf,
    pub num_images: usize,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSynth(m));
        let fractions = [self.target_fraction, self.context_fraction, self.clutter_fraction];
        if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("region fractions {fractions:?} must be non-negative and sum to 1"));
        }
        if self.num_categories < 2 {
            return bad("need at least two categories".into());
        }
        if self.regions_per_image == 0 {
            return bad("regions_per_image must be positive".into());
        }
        if self.signature_dims == 0 || self.context_groups == 0 || self.context_dims == 0 {
            return bad("signature_dims, context_groups and context_dims must be positive".into());
        }
        let reserved = self.num_categories * self.signature_dims + self.context_groups * self.context_dims;
        if self.code_dim <= reserved {
            return bad(format!("code_dim {} leaves no background dims after {reserved} reserved", self.code_dim));
        }
        if self.fc_dim == 0 {
            return bad("fc_dim must be positive".into());
        }
        if !(self.peak_concentration > 0.0 && self.peak_concentration.is_finite()) {
            return bad("peak_concentration must be positive".into());
        }
        if !(self.background_alpha > 0.0 && self.background_alpha.is_finite()) {
            return bad("background_alpha must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.cross_talk) || !(self.cross_talk_strength > 0.0 && self.cross_talk_strength <= 1.0) {
            return bad("cross_talk must lie in [0, 1] and cross_talk_strength in (0, 1]".into());
        }
        if !(self.fc_noise >= 0.0 && self.fc_noise.is_finite()) {
            return bad("fc_noise must be non-negative".into());
        }
        if self.min_side < 16 || self.min_side > self.max_side {
            return bad(format!("image sides [{}, {}] invalid", self.min_side, self.max_side));
        }
        if self.images_per_split.values().sum::<usize>() == 0 {
            return bad("no images requested".into());
        }
        Ok(())
    }

    /// Region counts per image (target, context, clutter); clutter takes
    /// whatever rounding leaves over.
    pub fn region_counts(&self) -> (usize, usize, usize) {
        let n = self.regions_per_image;
        let t = ((self.target_fraction * n as f64).round() as usize).min(n);
        let c = ((self.context_fraction * n as f64).round() as usize).min(n - t);
        (t, c, n - t - c)
    }

    pub fn category_names(&self) -> Vec<String> {
        (0..self.num_categories).map(|c| format!("cat{c:02}")).collect()
    }

    fn signature(&self, category: usize) -> Vec<usize> {
        (0..self.signature_dims).map(|j| category * self.signature_dims + j).collect()
    }

    fn context_group(&self, category: usize) -> usize {
        category % self.context_groups
    }

    fn context(&self, group: usize) -> Vec<usize> {
        let base = self.num_categories * self.signature_dims;
        (0..self.context_dims).map(|j| base + group * self.context_dims + j).collect()
    }

    fn background(&self) -> std::ops::Range<usize> {
        self.num_categories * self.signature_dims + self.context_groups * self.context_dims..self.code_dim
    }
}

/// Writes a synthetic dataset under `out` and returns the paths written.
pub fn generate_synthetic(spec: &SyntheticSpec, out: &Path) -> Result<SynthOutput> {
    spec.validate()?;
    for sub in ["proposals", "codes"] {
        let dir = out.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let projection: Vec<f64> = (0..spec.fc_dim * spec.code_dim).map(|_| normal.sample(&mut rng)).collect();

    let categories = spec.category_names();
    let mut manifest = DatasetManifest { categories, splits: BTreeMap::new(), images: BTreeMap::new() };
    let mut annotations: BTreeMap<String, Vec<BBox>> = BTreeMap::new();
    let mut truths: BTreeMap<String, ImageTruth> = BTreeMap::new();
    for (split, &count) in &spec.images_per_split {
        if count == 0 {
            continue;
        }
        let mut ids = Vec::with_capacity(count);
        for i in 0..count {
            let id = format!("{split}_{i:05}");
            let label = i % spec.num_categories;
            let image = generate_image(spec, label, &projection, &mut rng)?;
            let proposals_path = PathBuf::from("proposals").join(format!("{id}.json"));
            write_proposals(&out.join(&proposals_path), &image.proposals)?;
            let mut codes = BTreeMap::new();
            for m in [&image.softmax, &image.fc] {
                let rel = PathBuf::from("codes").join(format!("{id}.{}.rnc", m.layer()));
                write_codes(&out.join(&rel), m)?;
                codes.insert(m.layer().to_string(), rel);
            }
            manifest.images.insert(
                id.clone(),
                ImageEntry {
                    width: image.width,
                    height: image.height,
                    labels: Labels::Index(label),
                    proposals_path,
                    codes,
                },
            );
            annotations.insert(
                id.clone(),
                image
                    .truth
                    .kinds
                    .iter()
                    .zip(&image.proposals)
                    .filter(|(k, _)| **k == RegionKind::Target)
                    .map(|(_, p)| p.bbox)
                    .collect(),
            );
            truths.insert(id.clone(), image.truth);
            ids.push(id);
        }
        manifest.splits.insert(split.clone(), ids);
    }
    let manifest_path = out.join("manifest.json");
    write_manifest(&manifest_path, &manifest)?;
    let annotations_path = out.join("annotations.json");
    write_json(&annotations_path, &annotations)?;
    let truth_path = out.join("truth.json");
    write_json(&truth_path, &truths)?;
    Ok(SynthOutput { manifest_path, annotations_path, truth_path, num_images: manifest.images.len() })
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Reads the per-image generator truth written next to a manifest.
pub fn read_truth(path: &Path) -> Result<BTreeMap<String, ImageTruth>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path: path.to_path_buf(), message: e.to_string() })
}

/// Reads `{"image id": [box, ...]}` annotation files.
pub fn read_annotations(path: &Path) -> Result<BTreeMap<String, Vec<BBox>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path: path.to_path_buf(), message: e.to_string() })
}

struct SynthImage {
    width: u32,
    height: u32,
    proposals: Vec<RegionProposal>,
    softmax: CodeMatrix<f32>,
    fc: CodeMatrix<f32>,
    truth: ImageTruth,
}

fn generate_image(spec: &SyntheticSpec, label: usize, projection: &[f64], rng: &mut ChaCha8Rng) -> Result<SynthImage> {
    let width = rng.random_range(spec.min_side..=spec.max_side);
    let height = rng.random_range(spec.min_side..=spec.max_side);
    let frame = BBox::frame(width, height)?;
    let mut distractor = rng.random_range(0..spec.num_categories - 1);
    if distractor >= label {
        distractor += 1;
    }
    let (n_target, n_context, n_clutter) = spec.region_counts();
    let mut kinds = vec![RegionKind::Target; n_target];
    kinds.extend(std::iter::repeat_n(RegionKind::Context, n_context));
    for _ in 0..n_clutter {
        kinds.push(if rng.random::<f64>() < spec.cross_talk { RegionKind::CrossTalk } else { RegionKind::Clutter });
    }

    let intervals = ScaleIntervals::default();
    let background = spec.background();
    let mut proposals = Vec::with_capacity(kinds.len());
    let mut rows = Vec::with_capacity(kinds.len());
    for &kind in &kinds {
        let groups: &[usize] = match (spec.scale_mode, kind) {
            (ScaleMode::Broad, _) => &[1, 2, 3, 4, 5],
            (ScaleMode::Disjoint, RegionKind::Target) => &[4, 5],
            (ScaleMode::Disjoint, _) => &[1, 2, 3],
        };
        let bbox = sample_box(&frame, groups, &intervals, rng)?;
        let objectness = if kind.is_planted() { 0.5 + 0.5 * rng.random::<f64>() } else { 0.5 * rng.random::<f64>() };
        proposals.push(RegionProposal::new(bbox, objectness));
        let peaks: Vec<(usize, f64)> = match kind {
            RegionKind::Target => even(&spec.signature(label)),
            RegionKind::Context => even(&spec.context(spec.context_group(label))),
            RegionKind::CrossTalk => {
                let sig = spec.signature(distractor);
                let dim = sig[rng.random_range(0..sig.len())];
                let bg = rng.random_range(background.clone());
                vec![(dim, spec.cross_talk_strength), (bg, 1.0 - spec.cross_talk_strength)]
            }
            RegionKind::Clutter => vec![(rng.random_range(background.clone()), 1.0)],
        };
        rows.push(dirichlet_row(spec, &peaks, rng)?);
    }

    // file order is objectness rank
    let order = rank_by_objectness(&proposals);
    let proposals: Vec<RegionProposal> = order.iter().map(|&i| proposals[i]).collect();
    let kinds: Vec<RegionKind> = order.iter().map(|&i| kinds[i]).collect();
    let rows: Vec<Vec<f32>> = order.iter().map(|&i| rows[i].clone()).collect();

    let noise = Normal::new(0.0, spec.fc_noise.max(f64::MIN_POSITIVE)).expect("finite noise");
    let fc_rows: Vec<Vec<f32>> = rows
        .iter()
        .map(|s| {
            (0..spec.fc_dim)
                .map(|j| {
                    let w = &projection[j * spec.code_dim..(j + 1) * spec.code_dim];
                    let v: f64 = w.iter().zip(s).map(|(a, b)| a * f64::from(*b)).sum();
                    let n = if spec.fc_noise > 0.0 { noise.sample(rng) } else { 0.0 };
                    (v + n) as f32
                })
                .collect()
        })
        .collect();
    Ok(SynthImage {
        width,
        height,
        proposals,
        softmax: CodeMatrix::from_rows(SOFTMAX_LAYER, &rows)?,
        fc: CodeMatrix::from_rows(FC_LAYER, &fc_rows)?,
        truth: ImageTruth { label, distractor, kinds },
    })
}

fn even(dims: &[usize]) -> Vec<(usize, f64)> {
    dims.iter().map(|&d| (d, 1.0 / dims.len() as f64)).collect()
}

/// Dirichlet draw with `peak_concentration * share` on peak dims and
/// `background_alpha` elsewhere, rounded to `f32` and renormalized so the
/// row sums to 1 within single-precision rounding.
fn dirichlet_row(spec: &SyntheticSpec, peaks: &[(usize, f64)], rng: &mut ChaCha8Rng) -> Result<Vec<f32>> {
    let mut alpha = vec![spec.background_alpha; spec.code_dim];
    for &(d, share) in peaks {
        alpha[d] += spec.peak_concentration * share;
    }
    let draws: Vec<f64> = alpha
        .iter()
        .map(|&a| Gamma::new(a, 1.0).map(|g| g.sample(rng)).map_err(|e| Error::InvalidSynth(e.to_string())))
        .collect::<Result<_>>()?;
    let total: f64 = draws.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidSynth("degenerate Dirichlet draw".into()));
    }
    let mut row: Vec<f32> = draws.iter().map(|v| (v / total) as f32).collect();
    let sum: f64 = row.iter().map(|v| f64::from(*v)).sum();
    let top = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
    row[top] = (f64::from(row[top]) + 1.0 - sum).max(0.0) as f32;
    Ok(row)
}

/// A box whose scale group is one of `groups`, retrying a bounded number of
/// times before accepting the last candidate.
fn sample_box(frame: &BBox, groups: &[usize], intervals: &ScaleIntervals, rng: &mut ChaCha8Rng) -> Result<BBox> {
    let (fw, fh) = (frame.width() as f64, frame.height() as f64);
    let mut last = None;
    for _ in 0..64 {
        let g = groups[rng.random_range(0..groups.len())];
        let (lo, hi) = intervals.group_bounds(g);
        let lo = lo.max(hi / 4.0);
        let ratio = (lo.ln() + (hi.ln() - lo.ln()) * rng.random::<f64>()).exp();
        let aspect = (rng.random::<f64>() * 2.0 - 1.0) * std::f64::consts::LN_2;
        let aspect = aspect.exp();
        let area = ratio * fw * fh;
        let w = ((area * aspect).sqrt().round() as u32).clamp(1, frame.width());
        let h = ((area / aspect).sqrt().round() as u32).clamp(1, frame.height());
        let x = rng.random_range(0..=frame.width() - w);
        let y = rng.random_range(0..=frame.height() - h);
        let bbox = BBox::new(x, y, x + w, y + h)?;
        let got = assign_scale_group(region_scale(&bbox, frame)?, intervals)?;
        if groups.contains(&got) {
            return Ok(bbox);
        }
        last = Some(bbox);
    }
    Ok(last.expect("at least one candidate"))
}
