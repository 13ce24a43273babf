use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::rnc::read_codes;
use super::ImageRecord;
use crate::error::{Error, Result};
use crate::geometry::RegionProposal;
use crate::scalar::Scalar;

/// Image labels as written in a manifest: category names, a 0/1 vector over
/// the categories, or a single category index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Labels {
    Names(Vec<String>),
    Binary(Vec<u8>),
    Index(usize),
}

impl Labels {
    pub fn to_flags(&self, categories: &[String]) -> std::result::Result<Vec<bool>, String> {
        let mut flags = vec![false; categories.len()];
        match self {
            Labels::Names(names) => {
                for n in names {
                    let i = categories.iter().position(|c| c == n).ok_or_else(|| format!("unknown category {n}"))?;
                    flags[i] = true;
                }
            }
            Labels::Binary(bits) => {
                if bits.len() != categories.len() || bits.iter().any(|b| *b > 1) {
                    return Err(format!("label vector {bits:?} does not match {} categories", categories.len()));
                }
                for (f, b) in flags.iter_mut().zip(bits) {
                    *f = *b == 1;
                }
            }
            Labels::Index(i) => *flags.get_mut(*i).ok_or_else(|| format!("category index {i} out of range"))? = true,
        }
        Ok(flags)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub width: u32,
    pub height: u32,
    pub labels: Labels,
    pub proposals_path: PathBuf,
    /// Layer name to RNC1 path.
    pub codes: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub categories: Vec<String>,
    pub splits: BTreeMap<String, Vec<String>>,
    pub images: BTreeMap<String, ImageEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let m = |s: String| Error::Manifest(s);
        let mut seen = BTreeSet::new();
        if self.categories.iter().any(|c| !seen.insert(c)) {
            return Err(m("duplicate category names".into()));
        }
        let mut assigned: BTreeMap<&str, &str> = BTreeMap::new();
        for (split, ids) in &self.splits {
            for id in ids {
                if !self.images.contains_key(id) {
                    return Err(m(format!("split {split} references unknown image {id}")));
                }
                if let Some(prev) = assigned.insert(id, split) {
                    return Err(m(format!("image {id} appears in splits {prev} and {split}")));
                }
            }
        }
        for (id, entry) in &self.images {
            entry.labels.to_flags(&self.categories).map_err(|e| m(format!("image {id}: {e}")))?;
            if entry.width == 0 || entry.height == 0 {
                return Err(m(format!("image {id}: zero size")));
            }
        }
        Ok(())
    }
}

/// A manifest together with the directory its relative paths resolve from.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
}

impl Dataset {
    pub fn categories(&self) -> &[String] {
        &self.manifest.categories
    }

    pub fn split(&self, name: &str) -> &[String] {
        self.manifest.splits.get(name).map_or(&[], Vec::as_slice)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    fn entry(&self, id: &str) -> Result<&ImageEntry> {
        self.manifest.images.get(id).ok_or_else(|| Error::Manifest(format!("unknown image {id}")))
    }

    /// Loads proposals and every code layer of one image, validating that
    /// each matrix has one row per proposal.
    pub fn load_record<T: Scalar>(&self, id: &str) -> Result<ImageRecord<T>> {
        self.load_record_layers(id, None)
    }

    /// Like [`Dataset::load_record`], restricted to the named layers.
    pub fn load_record_layers<T: Scalar>(&self, id: &str, layers: Option<&[&str]>) -> Result<ImageRecord<T>> {
        let entry = self.entry(id)?;
        let rec = |message: String| Error::Record { image: id.to_string(), message };
        let labels = entry.labels.to_flags(&self.manifest.categories).map_err(rec)?;
        let proposals_path = self.resolve(&entry.proposals_path);
        let proposals = read_proposals(&proposals_path).map_err(|e| rec(e.to_string()))?;
        let mut codes = BTreeMap::new();
        for (layer, path) in &entry.codes {
            if layers.is_some_and(|l| !l.contains(&layer.as_str())) {
                continue;
            }
            let path = self.resolve(path);
            let m = read_codes::<T>(&path).map_err(|e| rec(e.to_string()))?;
            if m.layer() != layer {
                return Err(rec(format!("{} holds layer {} but manifest says {layer}", path.display(), m.layer())));
            }
            if m.num_regions() != proposals.len() {
                return Err(rec(format!(
                    "{}: {} code rows but {} has {} proposals",
                    path.display(),
                    m.num_regions(),
                    proposals_path.display(),
                    proposals.len()
                )));
            }
            codes.insert(layer.clone(), m);
        }
        if let Some(wanted) = layers {
            if let Some(missing) = wanted.iter().find(|l| !codes.contains_key(**l)) {
                return Err(Error::LayerAbsent { image: id.to_string(), layer: missing.to_string() });
            }
        }
        let record = ImageRecord { id: id.to_string(), width: entry.width, height: entry.height, labels, proposals, codes };
        record.validate()?;
        Ok(record)
    }
}

pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Json { path: path.to_path_buf(), message: e.to_string() })?;
    manifest.validate()?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let dataset = Dataset { manifest, root };
    for (id, entry) in &dataset.manifest.images {
        for p in std::iter::once(&entry.proposals_path).chain(entry.codes.values()) {
            let full = dataset.resolve(p);
            if !full.is_file() {
                return Err(Error::Manifest(format!("image {id}: missing file {}", full.display())));
            }
        }
    }
    Ok(dataset)
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    manifest.validate()?;
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_proposals(path: &Path) -> Result<Vec<RegionProposal>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path: path.to_path_buf(), message: e.to_string() })
}

pub fn write_proposals(path: &Path, proposals: &[RegionProposal]) -> Result<()> {
    let text = serde_json::to_string(proposals).expect("proposals serialize");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
