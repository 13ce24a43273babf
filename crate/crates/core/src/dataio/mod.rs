//! Dataset manifests, regional code files, model persistence and the seeded
//! synthetic dataset generator.

mod manifest;
mod models;
mod rnc;
pub mod synth;

use std::collections::BTreeMap;

pub use manifest::{
    load_manifest, read_proposals, write_manifest, write_proposals, Dataset, DatasetManifest, ImageEntry, Labels,
};
pub use models::{
    load_ensembles, load_linear_models, load_models, save_ensembles, save_linear_models, save_models, ModelEntry,
    MODEL_FORMAT_VERSION,
};
pub use rnc::{decode_codes, encode_codes, read_codes, write_codes, RNC_MAGIC};
pub use synth::{
    generate_synthetic, read_annotations, read_truth, ImageTruth, RegionKind, ScaleMode, SynthOutput, SyntheticSpec, FC_LAYER,
};

use crate::error::{Error, Result};
use crate::geometry::{rank_by_objectness, BBox, RegionProposal};
use crate::pooling::CodeMatrix;
use crate::scalar::Scalar;

/// One image: labels, proposals and per-layer code matrices whose row `k`
/// belongs to proposal `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord<T: Scalar> {
    pub id: String,
    pub width: u32,
    pub height: u32,
    /// One flag per manifest category.
    pub labels: Vec<bool>,
    pub proposals: Vec<RegionProposal>,
    pub codes: BTreeMap<String, CodeMatrix<T>>,
}

impl<T: Scalar> ImageRecord<T> {
    pub fn frame(&self) -> Result<BBox> {
        BBox::frame(self.width, self.height)
    }

    pub fn layer(&self, name: &str) -> Result<&CodeMatrix<T>> {
        self.codes
            .get(name)
            .ok_or_else(|| Error::LayerAbsent { image: self.id.clone(), layer: name.to_string() })
    }

    pub fn num_regions(&self) -> usize {
        self.proposals.len()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| Error::Record { image: self.id.clone(), message };
        if self.proposals.is_empty() {
            return Err(Error::NoRegions(self.id.clone()));
        }
        for (name, m) in &self.codes {
            if m.num_regions() != self.proposals.len() {
                return Err(fail(format!(
                    "layer {name} has {} rows for {} proposals",
                    m.num_regions(),
                    self.proposals.len()
                )));
            }
        }
        let frame = self.frame()?;
        if let Some(k) = self.proposals.iter().position(|p| p.bbox.intersection(&frame).is_none()) {
            return Err(fail(format!("proposal {k} lies outside the {}x{} image", self.width, self.height)));
        }
        Ok(())
    }

    /// Keeps the `k` proposals with the highest objectness, in rank order,
    /// together with their code rows.
    pub fn truncate_top_k(&self, k: usize) -> Result<Self> {
        let mut keep = rank_by_objectness(&self.proposals);
        keep.truncate(k.max(1));
        let mut codes = BTreeMap::new();
        for (name, m) in &self.codes {
            codes.insert(name.clone(), m.select_rows(&keep)?);
        }
        Ok(ImageRecord {
            id: self.id.clone(),
            width: self.width,
            height: self.height,
            labels: self.labels.clone(),
            proposals: keep.iter().map(|&i| self.proposals[i]).collect(),
            codes,
        })
    }

    /// Index of the first set label, for single-label datasets.
    pub fn primary_label(&self) -> Option<usize> {
        self.labels.iter().position(|l| *l)
    }
}
