//! On-disk dataset and anomaly-map directories.
//!
//! A dataset directory holds:
//!
//! ```text
//! manifest.json             params, geometry, one entry per subject
//! images/<id>.agrd          the subject's image as generated
//! healthy/<id>.agrd         training subjects only: the abnormality-free image
//! brain/<id>.agrd           brain mask
//! masks/<id>.agrd           validation/test lesion mask (may be empty)
//! annotations.csv           merged reference points
//! annotations_rater_a.csv   raw clicks of each simulated rater
//! annotations_rater_b.csv
//! ```
//!
//! A map directory holds `<id>.agrd` anomaly maps plus `index.csv` with the
//! split and kind of every subject, which is all threshold calibration needs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agrd::{read_image, read_mask, write_grid};
use crate::annotations::{read_annotations, write_annotations, AnnotationSet};
use crate::error::{Error, Result};
use crate::grid::{BinaryMask, Image2D};
use crate::phantom::{Dataset, DatasetParams, Split, Subject, SubjectKind};

pub const MANIFEST: &str = "manifest.json";
pub const ANNOTATIONS: &str = "annotations.csv";
pub const RATER_A: &str = "annotations_rater_a.csv";
pub const RATER_B: &str = "annotations_rater_b.csv";
pub const MAP_INDEX: &str = "index.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub kind: SubjectKind,
    pub contaminated: bool,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub healthy: Option<String>,
    pub brain: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub width: usize,
    pub height: usize,
    pub spacing: f64,
    pub annotations: String,
    pub rater_a: String,
    pub rater_b: String,
    pub params: DatasetParams,
    pub subjects: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.subjects.iter().filter(move |e| e.split == split)
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes every subject, the annotation files and the manifest under `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, dataset: &Dataset) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    for sub in ["images", "healthy", "brain", "masks"] {
        create_dir(&dir.join(sub))?;
    }
    let mut entries = Vec::new();
    let mut put = |subject: &Subject, split: Split, healthy: Option<&Image2D>| -> Result<()> {
        let image = format!("images/{}.agrd", subject.id);
        write_grid(dir.join(&image), &subject.image.clone().into())?;
        let brain = format!("brain/{}.agrd", subject.id);
        write_grid(dir.join(&brain), &subject.brain.clone().into())?;
        let healthy = match healthy {
            Some(h) => {
                let rel = format!("healthy/{}.agrd", subject.id);
                write_grid(dir.join(&rel), &h.clone().into())?;
                Some(rel)
            }
            None => None,
        };
        let mask = if split == Split::Train {
            None
        } else {
            let rel = format!("masks/{}.agrd", subject.id);
            write_grid(dir.join(&rel), &subject.lesion_mask_or_empty().into())?;
            Some(rel)
        };
        entries.push(ManifestEntry {
            id: subject.id.clone(),
            split,
            kind: subject.kind,
            contaminated: subject.kind == SubjectKind::Contaminated,
            image,
            healthy,
            brain,
            mask,
        });
        Ok(())
    };
    for t in &dataset.train {
        put(&t.subject, Split::Train, Some(&t.healthy))?;
    }
    for s in &dataset.val {
        put(s, Split::Val, None)?;
    }
    for s in &dataset.test {
        put(s, Split::Test, None)?;
    }

    let merged: AnnotationSet = dataset
        .train
        .iter()
        .map(|t| &t.subject)
        .chain(&dataset.val)
        .chain(&dataset.test)
        .filter(|s| !s.annotations.is_empty())
        .map(|s| (s.id.clone(), s.annotations.clone()))
        .collect();
    write_annotations(dir.join(ANNOTATIONS), &merged)?;
    write_annotations(dir.join(RATER_A), &dataset.rater_a)?;
    write_annotations(dir.join(RATER_B), &dataset.rater_b)?;

    let geometry = dataset
        .val
        .first()
        .map(|s| *s.image.geometry())
        .or_else(|| dataset.train.first().map(|t| *t.healthy.geometry()))
        .ok_or_else(|| Error::Param("dataset has no subjects".into()))?;
    let manifest = DatasetManifest {
        width: geometry.width(),
        height: geometry.height(),
        spacing: geometry.spacing(),
        annotations: ANNOTATIONS.into(),
        rater_a: RATER_A.into(),
        rater_b: RATER_B.into(),
        params: dataset.params.clone(),
        subjects: entries,
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = dir.as_ref().join(MANIFEST);
    read_json(&path)
}

/// Training images of the chosen variant with their brain masks.
///
/// `contaminated = false` reads the abnormality-free copy of every training
/// subject; `true` reads each image as generated, so the configured fraction
/// carries subtle abnormalities.
pub fn load_training_images(
    dir: impl AsRef<Path>,
    manifest: &DatasetManifest,
    contaminated: bool,
) -> Result<Vec<(Image2D, BinaryMask)>> {
    let dir = dir.as_ref();
    manifest
        .entries(Split::Train)
        .map(|e| {
            let rel = if contaminated {
                &e.image
            } else {
                e.healthy.as_ref().unwrap_or(&e.image)
            };
            Ok((read_image(dir.join(rel))?, read_mask(dir.join(&e.brain))?))
        })
        .collect()
}

pub fn load_annotations(dir: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<AnnotationSet> {
    read_annotations(dir.as_ref().join(&manifest.annotations))
}

/// One row of a map directory's `index.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapIndexRow {
    pub subject_id: String,
    pub split: Split,
    pub kind: SubjectKind,
}

pub fn write_map_index(dir: impl AsRef<Path>, rows: &[MapIndexRow]) -> Result<()> {
    let path = dir.as_ref().join(MAP_INDEX);
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::format(&path, e.to_string()))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::format(&path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn read_map_index(dir: impl AsRef<Path>) -> Result<Vec<MapIndexRow>> {
    let path = dir.as_ref().join(MAP_INDEX);
    let mut r = csv::Reader::from_path(&path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(&path, io),
        other => Error::format(&path, format!("{other:?}")),
    })?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::format(&path, e.to_string())))
        .collect()
}

pub fn map_path(dir: impl AsRef<Path>, subject_id: &str) -> PathBuf {
    dir.as_ref().join(format!("{subject_id}.agrd"))
}
