//! Cross-region pooling of regional code matrices.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::dataio::ImageRecord;
use crate::error::{Error, Result};
use crate::geometry::{assign_scale_group, region_scale, BBox, RegionProposal, ScaleIntervals};
use crate::linclass::LinearModel;
use crate::scalar::Scalar;

/// Layer whose rows are probability vectors.
pub const SOFTMAX_LAYER: &str = "softmax";
const SOFTMAX_ROW_TOLERANCE: f64 = 1e-4;

/// `N x D` neural codes of one layer for one image, row-major; row `k`
/// belongs to region proposal `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeMatrix<T> {
    layer: String,
    rows: usize,
    dim: usize,
    values: Vec<T>,
}

impl<T: Scalar> CodeMatrix<T> {
    pub fn new(layer: impl Into<String>, rows: usize, dim: usize, values: Vec<T>) -> Result<Self> {
        let layer = layer.into();
        if rows == 0 || dim == 0 {
            return Err(Error::InvalidCodes(format!("layer {layer}: empty matrix {rows}x{dim}")));
        }
        if values.len() != rows * dim {
            return Err(Error::InvalidCodes(format!(
                "layer {layer}: {} values for a {rows}x{dim} matrix",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidCodes(format!(
                "layer {layer}: non-finite entry at row {} dim {}",
                i / dim,
                i % dim
            )));
        }
        let m = CodeMatrix { layer, rows, dim, values };
        if m.layer == SOFTMAX_LAYER {
            m.check_probability_rows()?;
        }
        Ok(m)
    }

    pub fn from_rows(layer: impl Into<String>, rows: &[Vec<T>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().position(|r| r.len() != dim) {
            return Err(Error::InvalidCodes(format!("row {r} has {} entries, expected {dim}", rows[r].len())));
        }
        Self::new(layer, rows.len(), dim, rows.concat())
    }

    fn check_probability_rows(&self) -> Result<()> {
        for (k, row) in self.rows().enumerate() {
            if let Some(d) = row.iter().position(|v| *v < T::zero()) {
                return Err(Error::InvalidCodes(format!("softmax row {k} has negative entry at dim {d}")));
            }
            let sum: f64 = row.iter().map(|v| v.to_f64_lossless()).sum();
            if (sum - 1.0).abs() > SOFTMAX_ROW_TOLERANCE {
                return Err(Error::InvalidCodes(format!("softmax row {k} sums to {sum}")));
            }
        }
        Ok(())
    }

    pub fn layer(&self) -> &str {
        &self.layer
    }
    pub fn num_regions(&self) -> usize {
        self.rows
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn row(&self, k: usize) -> &[T] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.values.chunks_exact(self.dim)
    }

    /// Sub-matrix of the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(indices.len() * self.dim);
        for &k in indices {
            values.extend_from_slice(self.row(k));
        }
        Self::new(self.layer.clone(), indices.len(), self.dim, values)
    }

    pub fn cast<U: Scalar>(&self) -> CodeMatrix<U> {
        CodeMatrix {
            layer: self.layer.clone(),
            rows: self.rows,
            dim: self.dim,
            values: self.values.iter().map(|v| U::from_f64_lossy(v.to_f64_lossless())).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolOp {
    Max,
    #[serde(alias = "avg")]
    Average,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layout {
    Single,
    Multiscale { intervals: ScaleIntervals },
    SpatialPyramid { grid_sides: Vec<u32> },
}

impl Layout {
    pub fn multiscale() -> Self {
        Layout::Multiscale { intervals: ScaleIntervals::default() }
    }

    /// 1x1, 2x2 and 4x4 grids.
    pub fn spatial_pyramid() -> Self {
        Layout::SpatialPyramid { grid_sides: vec![1, 2, 4] }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Layout::SpatialPyramid { grid_sides } if grid_sides.is_empty() || grid_sides.contains(&0) => {
                Err(Error::InvalidConfig("spatial pyramid grid sides must be non-empty and positive".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn num_blocks(&self) -> usize {
        match self {
            Layout::Single => 1,
            Layout::Multiscale { intervals } => intervals.num_groups(),
            Layout::SpatialPyramid { grid_sides } => grid_sides.iter().map(|&s| (s * s) as usize).sum(),
        }
    }

    /// Blocks a region contributes to: its scale group, or the cell holding
    /// its center at every pyramid level.
    pub fn region_blocks(&self, region: &BBox, frame: &BBox) -> Result<Vec<usize>> {
        match self {
            Layout::Single => Ok(vec![0]),
            Layout::Multiscale { intervals } => {
                let ratio = region_scale(region, frame)?;
                Ok(vec![assign_scale_group(ratio, intervals)? - 1])
            }
            Layout::SpatialPyramid { grid_sides } => {
                let (cx, cy) = region.center();
                let fx = (cx - f64::from(frame.x_min())) / f64::from(frame.width());
                let fy = (cy - f64::from(frame.y_min())) / f64::from(frame.height());
                if !(0.0..1.0).contains(&fx) || !(0.0..1.0).contains(&fy) {
                    return Err(Error::RegionOutsideFrame);
                }
                let mut offset = 0;
                let mut blocks = Vec::with_capacity(grid_sides.len());
                for &s in grid_sides {
                    let s = s as usize;
                    let col = ((fx * s as f64) as usize).min(s - 1);
                    let row = ((fy * s as f64) as usize).min(s - 1);
                    blocks.push(offset + row * s + col);
                    offset += s * s;
                }
                Ok(blocks)
            }
        }
    }

    /// Region indices per block, each list ascending.
    pub fn membership(&self, proposals: &[RegionProposal], subset: &[usize], frame: &BBox) -> Result<Vec<Vec<usize>>> {
        let mut blocks = vec![Vec::new(); self.num_blocks()];
        let mut sorted = subset.to_vec();
        sorted.sort_unstable();
        for k in sorted {
            for b in self.region_blocks(&proposals[k].bbox, frame)? {
                blocks[b].push(k);
            }
        }
        Ok(blocks)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolingSpec {
    pub operator: PoolOp,
    pub layout: Layout,
    pub rootsift: bool,
}

impl Default for PoolingSpec {
    /// Max over five scale groups, RootSIFT on.
    fn default() -> Self {
        PoolingSpec { operator: PoolOp::Max, layout: Layout::multiscale(), rootsift: true }
    }
}

impl PoolingSpec {
    pub fn new(operator: PoolOp, layout: Layout, rootsift: bool) -> Self {
        PoolingSpec { operator, layout, rootsift }
    }

    pub fn output_dim(&self, code_dim: usize) -> usize {
        code_dim * self.layout.num_blocks()
    }
}

/// Holistic image vector: concatenated per-block pooled codes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledFeature<T> {
    pub values: Vec<T>,
    /// Index range of each layout block within `values`.
    pub blocks: Vec<Range<usize>>,
    /// Region that produced each max-pooled dimension; `None` for average
    /// pooling and for empty blocks.
    pub provenance: Vec<Option<usize>>,
    pub operator: PoolOp,
}

/// Pools the selected rows of `codes` per dimension.
///
/// Max ties resolve to the lowest region index.
pub fn crp<T: Scalar>(codes: &CodeMatrix<T>, indices: &[usize], op: PoolOp) -> Result<(Vec<T>, Vec<Option<usize>>)> {
    if indices.is_empty() {
        return Err(Error::EmptySelection);
    }
    if let Some(&k) = indices.iter().find(|&&k| k >= codes.num_regions()) {
        return Err(Error::InvalidCodes(format!("region {k} out of range for {} rows", codes.num_regions())));
    }
    let dim = codes.dim();
    match op {
        PoolOp::Max => {
            let mut values = vec![T::neg_infinity(); dim];
            let mut prov = vec![usize::MAX; dim];
            for &k in indices {
                for (d, &v) in codes.row(k).iter().enumerate() {
                    if v > values[d] || (v == values[d] && k < prov[d]) {
                        values[d] = v;
                        prov[d] = k;
                    }
                }
            }
            Ok((values, prov.into_iter().map(Some).collect()))
        }
        PoolOp::Average => {
            let mut sums = vec![T::zero(); dim];
            for &k in indices {
                for (s, &v) in sums.iter_mut().zip(codes.row(k)) {
                    *s = *s + v;
                }
            }
            let n = T::from_usize_lossy(indices.len());
            Ok((sums.into_iter().map(|s| s / n).collect(), vec![None; dim]))
        }
    }
}

/// L1-normalize then take element-wise square roots. Zero stays zero.
pub fn rootsift_normalize<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    if let Some(i) = v.iter().position(|x| *x < T::zero()) {
        return Err(Error::NegativeRootSift { index: i, value: v[i].to_f64_lossless() });
    }
    let total: T = v.iter().copied().sum();
    if total <= T::zero() {
        return Ok(vec![T::zero(); v.len()]);
    }
    Ok(v.iter().map(|x| (*x / total).sqrt()).collect())
}

/// RootSIFT after clamping negative entries to zero; returns the number of
/// clamped entries.
pub fn rootsift_clamped<T: Scalar>(v: &[T]) -> (Vec<T>, usize) {
    let mut clamped = 0;
    let nonneg: Vec<T> = v
        .iter()
        .map(|&x| {
            if x < T::zero() {
                clamped += 1;
                T::zero()
            } else {
                x
            }
        })
        .collect();
    (rootsift_normalize(&nonneg).expect("entries clamped to non-negative"), clamped)
}

/// Pools a subset of regions under `spec`. Empty blocks give zero vectors.
pub fn pool_regions<T: Scalar>(
    codes: &CodeMatrix<T>,
    proposals: &[RegionProposal],
    frame: &BBox,
    subset: &[usize],
    spec: &PoolingSpec,
) -> Result<PooledFeature<T>> {
    spec.layout.validate()?;
    if proposals.len() != codes.num_regions() {
        return Err(Error::InvalidCodes(format!(
            "layer {}: {} code rows for {} proposals",
            codes.layer(),
            codes.num_regions(),
            proposals.len()
        )));
    }
    let dim = codes.dim();
    let membership = spec.layout.membership(proposals, subset, frame)?;
    let mut values = Vec::with_capacity(dim * membership.len());
    let mut provenance = Vec::with_capacity(dim * membership.len());
    let mut blocks = Vec::with_capacity(membership.len());
    for members in &membership {
        let start = values.len();
        if members.is_empty() {
            values.extend(std::iter::repeat_n(T::zero(), dim));
            provenance.extend(std::iter::repeat_n(None, dim));
        } else {
            let (v, p) = crp(codes, members, spec.operator)?;
            values.extend(v);
            provenance.extend(p);
        }
        blocks.push(start..values.len());
    }
    if spec.rootsift {
        let (normed, clamped) = rootsift_clamped(&values);
        if clamped > 0 {
            log::debug!("rootsift: clamped {clamped} negative entries of layer {}", codes.layer());
        }
        values = normed;
    }
    Ok(PooledFeature { values, blocks, provenance, operator: spec.operator })
}

/// Pools every region of one layer of an image.
pub fn pool_image<T: Scalar>(record: &ImageRecord<T>, layer: &str, spec: &PoolingSpec) -> Result<PooledFeature<T>> {
    let codes = record.layer(layer)?;
    if record.proposals.is_empty() {
        return Err(Error::NoRegions(record.id.clone()));
    }
    let all: Vec<usize> = (0..codes.num_regions()).collect();
    pool_regions(codes, &record.proposals, &record.frame()?, &all, spec)
        .map_err(|e| Error::Record { image: record.id.clone(), message: e.to_string() })
}

/// One attribute dimension's share of a linear score.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Attribution<T> {
    pub dim: usize,
    pub block: usize,
    pub contribution: T,
    pub region: Option<usize>,
}

/// Dimensions ranked by `weight * value`, descending, each mapped back to
/// the region that produced it. Ties keep dimension order.
pub fn backtrack<T: Scalar>(pooled: &PooledFeature<T>, model: &LinearModel<T>) -> Result<Vec<Attribution<T>>> {
    if pooled.operator != PoolOp::Max {
        return Err(Error::NoProvenance);
    }
    if model.weights.len() != pooled.values.len() {
        return Err(Error::DimensionMismatch { expected: model.weights.len(), got: pooled.values.len() });
    }
    let block_of = |d: usize| pooled.blocks.iter().position(|r| r.contains(&d)).unwrap_or(0);
    let mut out: Vec<Attribution<T>> = pooled
        .values
        .iter()
        .zip(&model.weights)
        .enumerate()
        .map(|(d, (&v, &w))| Attribution { dim: d, block: block_of(d), contribution: w * v, region: pooled.provenance[d] })
        .collect();
    out.sort_by(|a, b| b.contribution.partial_cmp(&a.contribution).unwrap_or(std::cmp::Ordering::Equal).then(a.dim.cmp(&b.dim)));
    Ok(out)
}
