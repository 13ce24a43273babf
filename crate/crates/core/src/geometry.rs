//! Boxes, overlap, region scale groups, grid proposals and proposal recall.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned pixel box, half-open: `[x_min, x_max) x [y_min, y_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawBox")]
pub struct BBox {
    x_min: u32,
    y_min: u32,
    x_max: u32,
    y_max: u32,
}

#[derive(Deserialize)]
struct RawBox {
    x_min: i64,
    y_min: i64,
    x_max: i64,
    y_max: i64,
}

impl TryFrom<RawBox> for BBox {
    type Error = Error;

    fn try_from(r: RawBox) -> Result<Self> {
        let invalid = || Error::InvalidBox { x_min: r.x_min, y_min: r.y_min, x_max: r.x_max, y_max: r.y_max };
        let conv = |v: i64| u32::try_from(v).map_err(|_| invalid());
        BBox::new(conv(r.x_min)?, conv(r.y_min)?, conv(r.x_max)?, conv(r.y_max)?)
    }
}

impl BBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Result<Self> {
        if x_min >= x_max || y_min >= y_max {
            return Err(Error::InvalidBox {
                x_min: x_min.into(),
                y_min: y_min.into(),
                x_max: x_max.into(),
                y_max: y_max.into(),
            });
        }
        Ok(BBox { x_min, y_min, x_max, y_max })
    }

    /// The whole-image frame `[0, width) x [0, height)`.
    pub fn frame(width: u32, height: u32) -> Result<Self> {
        BBox::new(0, 0, width, height)
    }

    pub fn x_min(&self) -> u32 {
        self.x_min
    }
    pub fn y_min(&self) -> u32 {
        self.y_min
    }
    pub fn x_max(&self) -> u32 {
        self.x_max
    }
    pub fn y_max(&self) -> u32 {
        self.y_max
    }
    pub fn width(&self) -> u32 {
        self.x_max - self.x_min
    }
    pub fn height(&self) -> u32 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width()) * u64::from(self.height())
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (f64::from(self.x_min) + f64::from(self.x_max)) / 2.0,
            (f64::from(self.y_min) + f64::from(self.y_max)) / 2.0,
        )
    }

    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let x_min = self.x_min.max(other.x_min);
        let y_min = self.y_min.max(other.y_min);
        let x_max = self.x_max.min(other.x_max);
        let y_max = self.y_max.min(other.y_max);
        BBox::new(x_min, y_min, x_max, y_max).ok()
    }

    fn intersection_area(&self, other: &BBox) -> u64 {
        self.intersection(other).map_or(0, |b| b.area())
    }
}

/// A candidate box with a generator-assigned objectness score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawProposal")]
pub struct RegionProposal {
    #[serde(flatten)]
    pub bbox: BBox,
    pub objectness: f64,
}

#[derive(Deserialize)]
struct RawProposal {
    #[serde(flatten)]
    bbox: BBox,
    objectness: f64,
}

impl TryFrom<RawProposal> for RegionProposal {
    type Error = String;

    fn try_from(r: RawProposal) -> std::result::Result<Self, String> {
        if !r.objectness.is_finite() {
            return Err(format!("non-finite objectness {}", r.objectness));
        }
        Ok(RegionProposal { bbox: r.bbox, objectness: r.objectness })
    }
}

impl RegionProposal {
    pub fn new(bbox: BBox, objectness: f64) -> Self {
        debug_assert!(objectness.is_finite());
        RegionProposal { bbox, objectness }
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Area of `region` clipped to `frame`, as a fraction of the frame area.
pub fn region_scale(region: &BBox, frame: &BBox) -> Result<f64> {
    match region.intersection_area(frame) {
        0 => Err(Error::RegionOutsideFrame),
        inter => Ok(inter as f64 / frame.area() as f64),
    }
}

/// Ascending boundaries splitting `(0, 1]` into half-open-left groups
/// `(b[g-1], b[g]]`, with implicit `b = 0` below and `b = 1` on top.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ScaleIntervals {
    boundaries: Vec<f64>,
}

impl Default for ScaleIntervals {
    /// Five groups: (0,1/16], (1/16,1/8], (1/8,1/4], (1/4,1/2], (1/2,1].
    fn default() -> Self {
        ScaleIntervals { boundaries: vec![1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0, 1.0 / 2.0] }
    }
}

impl TryFrom<Vec<f64>> for ScaleIntervals {
    type Error = Error;

    fn try_from(boundaries: Vec<f64>) -> Result<Self> {
        ScaleIntervals::new(boundaries)
    }
}

impl From<ScaleIntervals> for Vec<f64> {
    fn from(s: ScaleIntervals) -> Self {
        s.boundaries
    }
}

impl ScaleIntervals {
    pub fn new(boundaries: Vec<f64>) -> Result<Self> {
        if let Some(b) = boundaries.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidIntervals(format!("boundary {b} not in (0, 1)")));
        }
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidIntervals("boundaries not strictly ascending".into()));
        }
        Ok(ScaleIntervals { boundaries })
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn num_groups(&self) -> usize {
        self.boundaries.len() + 1
    }

    /// Lower and upper edge of a 1-based group.
    pub fn group_bounds(&self, group: usize) -> (f64, f64) {
        let lo = if group <= 1 { 0.0 } else { self.boundaries[group - 2] };
        let hi = self.boundaries.get(group - 1).copied().unwrap_or(1.0);
        (lo, hi)
    }
}

/// 1-based index of the group whose interval `(lo, hi]` contains `ratio`.
pub fn assign_scale_group(ratio: f64, intervals: &ScaleIntervals) -> Result<usize> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::RatioOutOfRange(ratio));
    }
    // number of boundaries strictly below ratio
    Ok(intervals.boundaries.partition_point(|&b| b < ratio) + 1)
}

/// Deterministic sliding windows over `frame`.
///
/// Window sides are `scale * frame side`, stretched by `sqrt(aspect)` in x
/// and shrunk by it in y, then clipped to the frame. Windows step by
/// `stride_fraction` of the frame side and must fit inside the frame.
/// Objectness is the window's area ratio to the frame.
pub fn grid_proposals(
    frame: &BBox,
    scales: &[f64],
    aspect_ratios: &[f64],
    stride_fraction: f64,
) -> Result<Vec<RegionProposal>> {
    if scales.iter().chain(aspect_ratios).any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidConfig("scales and aspect ratios must be positive".into()));
    }
    if !(stride_fraction > 0.0 && stride_fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!("stride fraction {stride_fraction} not in (0, 1]")));
    }
    let fw = frame.width();
    let fh = frame.height();
    let mut out: Vec<RegionProposal> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for &scale in scales {
        for &ar in aspect_ratios {
            let w = (scale * f64::from(fw) * ar.sqrt()).round().clamp(0.0, f64::from(fw)) as u32;
            let h = (scale * f64::from(fh) / ar.sqrt()).round().clamp(0.0, f64::from(fh)) as u32;
            if w == 0 || h == 0 {
                continue;
            }
            let sx = ((stride_fraction * f64::from(fw)).round() as u32).max(1);
            let sy = ((stride_fraction * f64::from(fh)).round() as u32).max(1);
            let mut y = 0;
            while y + h <= fh {
                let mut x = 0;
                while x + w <= fw {
                    let bbox = BBox::new(frame.x_min + x, frame.y_min + y, frame.x_min + x + w, frame.y_min + y + h)?;
                    if seen.insert(bbox) {
                        out.push(RegionProposal::new(bbox, bbox.area() as f64 / frame.area() as f64));
                    }
                    x += sx;
                }
                y += sy;
            }
        }
    }
    if out.is_empty() {
        return Err(Error::DegenerateFrame);
    }
    Ok(out)
}

/// Stable ordering by objectness descending, ties by original index.
pub fn rank_by_objectness(proposals: &[RegionProposal]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| proposals[b].objectness.total_cmp(&proposals[a].objectness).then(a.cmp(&b)));
    order
}

/// Fraction of ground-truth boxes covered (IoU strictly above the threshold)
/// by the top `k` proposals, matching greedily one-to-one in rank order.
pub fn recall_at_k(
    proposals: &[RegionProposal],
    ground_truth: &[BBox],
    k: usize,
    iou_threshold: f64,
) -> Result<f64> {
    if ground_truth.is_empty() {
        return Err(Error::NoAnnotations);
    }
    if let Some(rank) = proposals.windows(2).position(|w| w[0].objectness < w[1].objectness) {
        return Err(Error::UnsortedProposals { rank: rank + 1 });
    }
    let mut matched = vec![false; ground_truth.len()];
    for p in proposals.iter().take(k) {
        let best = ground_truth
            .iter()
            .enumerate()
            .filter(|(g, _)| !matched[*g])
            .map(|(g, gt)| (g, iou(&p.bbox, gt)))
            .filter(|(_, o)| *o > iou_threshold)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((g, _)) = best {
            matched[g] = true;
        }
    }
    Ok(matched.iter().filter(|m| **m).count() as f64 / ground_truth.len() as f64)
}
