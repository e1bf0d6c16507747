//! Point annotations ("clicks") and the dual-rater merge.
//!
//! Annotation CSV files have the header `subject_id,x,y,label,rater` with
//! `label` one of `lesion` / `nonlesion`. Coordinates are pixel units with
//! the origin at the top-left pixel centre (`x` = column, `y` = row).

use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::grid::Geometry;

pub const CSV_HEADER: [&str; 5] = ["subject_id", "x", "y", "label", "rater"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Lesion,
    NonLesional,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Lesion => "lesion",
            Label::NonLesional => "nonlesion",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lesion" => Ok(Label::Lesion),
            "nonlesion" => Ok(Label::NonLesional),
            other => Err(format!("unknown label `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointAnnotation {
    pub x: f64,
    pub y: f64,
    pub label: Label,
    pub rater: Option<String>,
}

impl PointAnnotation {
    pub fn new(x: f64, y: f64, label: Label) -> Self {
        Self {
            x,
            y,
            label,
            rater: None,
        }
    }

    pub fn with_rater(mut self, rater: impl Into<String>) -> Self {
        self.rater = Some(rater.into());
        self
    }

    pub fn distance_to(&self, other: &PointAnnotation) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Checks `0 <= x < width` and `0 <= y < height`.
    pub fn check_inside(&self, geometry: &Geometry) -> Result<()> {
        let inside = self.x >= 0.0
            && self.y >= 0.0
            && self.x < geometry.width() as f64
            && self.y < geometry.height() as f64;
        if inside {
            Ok(())
        } else {
            Err(Error::Param(format!(
                "annotation ({}, {}) lies outside a {}x{} grid",
                self.x,
                self.y,
                geometry.width(),
                geometry.height()
            )))
        }
    }
}

/// Annotations of one subject by one rater (or an already merged set).
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectAnnotations {
    pub subject_id: String,
    pub points: Vec<PointAnnotation>,
}

/// Annotations grouped by subject id, in order of first appearance.
pub type AnnotationSet = IndexMap<String, Vec<PointAnnotation>>;

pub fn parse_annotations<R: Read>(reader: R) -> Result<AnnotationSet> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header_err = |message: String| Error::Parse { line: 1, message };
    let headers = rdr
        .headers()
        .map_err(|e| header_err(e.to_string()))?
        .clone();
    if headers.iter().ne(CSV_HEADER) {
        // An empty file has no header record at all.
        if headers.is_empty() {
            return Ok(AnnotationSet::new());
        }
        return Err(header_err(format!(
            "expected header `{}`",
            CSV_HEADER.join(",")
        )));
    }

    let mut set = AnnotationSet::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let perr = |message: String| Error::Parse { line, message };
        let coord = |i: usize, name: &str| -> Result<f64> {
            let v: f64 = record[i]
                .parse()
                .map_err(|_| perr(format!("non-numeric {name} `{}`", &record[i])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(perr(format!("non-finite {name}")))
            }
        };
        let x = coord(1, "x")?;
        let y = coord(2, "y")?;
        let label: Label = record[3].parse().map_err(perr)?;
        let rater = match &record[4] {
            "" => None,
            r => Some(r.to_string()),
        };
        set.entry(record[0].to_string())
            .or_default()
            .push(PointAnnotation { x, y, label, rater });
    }
    Ok(set)
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<AnnotationSet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(file)
}

pub fn format_annotations<W: Write>(writer: W, set: &AnnotationSet) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER)?;
    for (id, points) in set {
        for p in points {
            w.write_record([
                id.as_str(),
                &format_coord(p.x),
                &format_coord(p.y),
                p.label.as_str(),
                p.rater.as_deref().unwrap_or(""),
            ])?;
        }
    }
    w.flush()
}

pub fn write_annotations(path: impl AsRef<Path>, set: &AnnotationSet) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    format_annotations(file, set).map_err(|e| Error::io(path, e))
}

// Shortest representation that parses back to the same f64.
fn format_coord(v: f64) -> String {
    format!("{v:?}")
}

/// Merges the clicks of two raters on one subject.
///
/// Same-label points from different raters closer than `radius` (strictly)
/// are paired greedily in ascending distance order; each pair is replaced by
/// its coordinate average. A point takes part in at most one merge and
/// unmatched points are kept unchanged. Output order: rater `a`'s points
/// (merged or not) in their original order, then unmatched points of `b`.
pub fn merge_raters(
    a: &SubjectAnnotations,
    b: &SubjectAnnotations,
    radius: f64,
) -> Result<SubjectAnnotations> {
    if a.subject_id != b.subject_id {
        return Err(Error::Param(format!(
            "cannot merge annotations of different subjects `{}` and `{}`",
            a.subject_id, b.subject_id
        )));
    }
    if !(radius >= 0.0) {
        return Err(Error::Param(format!("merge radius must be >= 0, got {radius}")));
    }

    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (i, pa) in a.points.iter().enumerate() {
        for (j, pb) in b.points.iter().enumerate() {
            if pa.label != pb.label {
                continue;
            }
            let d = pa.distance_to(pb);
            if d < radius {
                candidates.push((d, i, j));
            }
        }
    }
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));

    let mut partner_of_a: Vec<Option<usize>> = vec![None; a.points.len()];
    let mut b_used = vec![false; b.points.len()];
    for (_, i, j) in candidates {
        if partner_of_a[i].is_none() && !b_used[j] {
            partner_of_a[i] = Some(j);
            b_used[j] = true;
        }
    }

    let mut points = Vec::with_capacity(a.points.len() + b.points.len());
    for (pa, partner) in a.points.iter().zip(&partner_of_a) {
        match partner {
            Some(j) => {
                let pb = &b.points[*j];
                let rater = match (&pa.rater, &pb.rater) {
                    (Some(ra), Some(rb)) if ra != rb => Some(format!("{ra}+{rb}")),
                    (Some(r), _) | (None, Some(r)) => Some(r.clone()),
                    (None, None) => None,
                };
                points.push(PointAnnotation {
                    x: (pa.x + pb.x) / 2.0,
                    y: (pa.y + pb.y) / 2.0,
                    label: pa.label,
                    rater,
                });
            }
            None => points.push(pa.clone()),
        }
    }
    points.extend(
        b.points
            .iter()
            .zip(&b_used)
            .filter(|(_, used)| !**used)
            .map(|(p, _)| p.clone()),
    );
    Ok(SubjectAnnotations {
        subject_id: a.subject_id.clone(),
        points,
    })
}

/// Merges two whole annotation files subject by subject. Subjects present in
/// only one file pass through unchanged.
pub fn merge_annotation_sets(a: &AnnotationSet, b: &AnnotationSet, radius: f64) -> Result<AnnotationSet> {
    let mut out = AnnotationSet::new();
    let empty = Vec::new();
    for id in a.keys().chain(b.keys()) {
        if out.contains_key(id) {
            continue;
        }
        let sa = SubjectAnnotations {
            subject_id: id.clone(),
            points: a.get(id).unwrap_or(&empty).clone(),
        };
        let sb = SubjectAnnotations {
            subject_id: id.clone(),
            points: b.get(id).unwrap_or(&empty).clone(),
        };
        out.insert(id.clone(), merge_raters(&sa, &sb, radius)?.points);
    }
    Ok(out)
}
