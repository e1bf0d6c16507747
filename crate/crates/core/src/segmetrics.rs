//! Pixel- and lesion-level segmentation metrics.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::components::label;
use crate::error::{Error, Result};
use crate::grid::{AnomalyMap, BinaryMask};

/// `2|P ∩ G| / (|P| + |G|)`, defined as 1 when both masks are empty.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let inter = pred.intersection_area(gt)?;
    let total = pred.area() + gt.area();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Linear-interpolation percentile of an ascending slice, `p` in `[0, 100]`.
///
/// Uses rank `p/100 * (n - 1)` and interpolates between the neighbouring
/// order statistics.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty slice");
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Mask pixels with at least one 4-neighbour outside the mask (or on the
/// grid edge).
pub fn border_pixels(mask: &BinaryMask) -> Vec<usize> {
    let g = mask.geometry();
    let (w, h) = (g.width(), g.height());
    let px = mask.pixels();
    (0..px.len())
        .filter(|&i| {
            if !px[i] {
                return false;
            }
            let (x, y) = (i % w, i / w);
            x == 0
                || y == 0
                || x + 1 == w
                || y + 1 == h
                || !px[i - 1]
                || !px[i + 1]
                || !px[i - w]
                || !px[i + w]
        })
        .collect()
}

const FAR: f64 = 1e30;

/// Squared Euclidean distance transform in 1D (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared distance (in pixels²) from every pixel to the nearest site.
fn squared_distance_transform(width: usize, height: usize, sites: &[usize]) -> Vec<f64> {
    let mut grid = vec![FAR; width * height];
    for &s in sites {
        grid[s] = 0.0;
    }
    let n = width.max(height);
    let mut f = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    for x in 0..width {
        for y in 0..height {
            f[y] = grid[y * width + x];
        }
        edt_1d(&f[..height], &mut out[..height], &mut v, &mut z);
        for y in 0..height {
            grid[y * width + x] = out[y];
        }
    }
    for y in 0..height {
        let row = &mut grid[y * width..(y + 1) * width];
        f[..width].copy_from_slice(row);
        edt_1d(&f[..width], &mut out[..width], &mut v, &mut z);
        row.copy_from_slice(&out[..width]);
    }
    // Entries that never met a site stay huge; callers always have sites.
    grid
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDistances {
    /// 95th percentile of the pooled two-direction border distances (mm).
    pub hd95: f64,
    /// Mean of the pooled border distances (mm).
    pub asd: f64,
}

/// Pooled border-to-border distances in mm, both directions. Empty when
/// either mask is empty.
pub fn pooled_border_distances(pred: &BinaryMask, gt: &BinaryMask) -> Result<Vec<f64>> {
    let g = pred.geometry();
    g.ensure_same(gt.geometry(), "surface distances")?;
    let bp = border_pixels(pred);
    let bg = border_pixels(gt);
    if bp.is_empty() || bg.is_empty() {
        return Ok(Vec::new());
    }
    let (w, h) = (g.width(), g.height());
    let to_gt = squared_distance_transform(w, h, &bg);
    let to_pred = squared_distance_transform(w, h, &bp);
    let spacing = g.spacing();
    let mut pooled: Vec<f64> = bp.iter().map(|&i| to_gt[i].sqrt() * spacing).collect();
    pooled.extend(bg.iter().map(|&i| to_pred[i].sqrt() * spacing));
    Ok(pooled)
}

/// HD95 and ASD in mm, `None` ("undefined") when either mask is empty.
pub fn surface_distances(pred: &BinaryMask, gt: &BinaryMask) -> Result<Option<SurfaceDistances>> {
    let mut pooled = pooled_border_distances(pred, gt)?;
    if pooled.is_empty() {
        return Ok(None);
    }
    pooled.sort_by(f64::total_cmp);
    let asd = pooled.iter().sum::<f64>() / pooled.len() as f64;
    Ok(Some(SurfaceDistances {
        hd95: percentile_sorted(&pooled, 95.0),
        asd,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LesionF1 {
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl LesionF1 {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let denom = 2 * tp + fp + fn_;
        let f1 = if denom == 0 {
            1.0
        } else {
            2.0 * tp as f64 / denom as f64
        };
        Self { f1, tp, fp, fn_ }
    }
}

/// Lesion-wise detection F1 with an overlap criterion relative to the
/// ground-truth component area.
///
/// A GT component is detected when some predicted component covers at least
/// `overlap` of its area. A predicted component is a false positive when it
/// reaches that coverage for no GT component.
pub fn lesion_f1(pred: &BinaryMask, gt: &BinaryMask, overlap: f64) -> Result<LesionF1> {
    pred.geometry().ensure_same(gt.geometry(), "lesion F1")?;
    if !(overlap > 0.0 && overlap <= 1.0) {
        return Err(Error::Param(format!("overlap must lie in (0, 1], got {overlap}")));
    }
    let pl = label(pred);
    let gl = label(gt);
    // intersections[p][g]
    let mut inter = vec![vec![0usize; gl.len()]; pl.len()];
    for (a, b) in pl.labels.iter().zip(&gl.labels) {
        if let (Some(p), Some(g)) = (a, b) {
            inter[*p][*g] += 1;
        }
    }
    let covers = |p: usize, g: usize| inter[p][g] as f64 + 1e-9 >= overlap * gl.members[g].len() as f64;
    let tp = (0..gl.len()).filter(|&g| (0..pl.len()).any(|p| covers(p, g))).count();
    let fp = (0..pl.len()).filter(|&p| !(0..gl.len()).any(|g| covers(p, g))).count();
    Ok(LesionF1::from_counts(tp, fp, gl.len() - tp))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stratum {
    S,
    M,
    L,
}

impl Stratum {
    pub fn as_str(self) -> &'static str {
        match self {
            Stratum::S => "S",
            Stratum::M => "M",
            Stratum::L => "L",
        }
    }
}

impl fmt::Display for Stratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrataThresholds {
    pub q25: f64,
    pub q75: f64,
}

impl StrataThresholds {
    /// S below q25, L above q75, M in between (both bounds inclusive).
    pub fn classify(&self, area: f64) -> Stratum {
        if area < self.q25 {
            Stratum::S
        } else if area > self.q75 {
            Stratum::L
        } else {
            Stratum::M
        }
    }
}

/// Quartile cut points of the per-subject lesion areas.
pub fn size_strata(areas: &[f64]) -> Result<StrataThresholds> {
    if areas.is_empty() {
        return Err(Error::Param("size strata need at least one lesion area".into()));
    }
    let mut sorted = areas.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(StrataThresholds {
        q25: percentile_sorted(&sorted, 25.0),
        q75: percentile_sorted(&sorted, 75.0),
    })
}

/// Grid threshold maximising mean Dice of the binarised validation maps.
/// Ties go to the smaller threshold.
pub fn select_threshold(maps: &[AnomalyMap], gts: &[BinaryMask], grid: &[f64]) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::Param("threshold grid is empty".into()));
    }
    if maps.is_empty() {
        return Err(Error::Param("validation set is empty".into()));
    }
    if maps.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} validation maps vs {} masks",
            maps.len(),
            gts.len()
        )));
    }
    let mut candidates = grid.to_vec();
    candidates.sort_by(f64::total_cmp);
    let mut best: Option<(f64, f64)> = None;
    for &t in &candidates {
        let mut total = 0.0;
        for (map, gt) in maps.iter().zip(gts) {
            total += dice(&map.binarize(t), gt)?;
        }
        let mean = total / maps.len() as f64;
        if best.is_none_or(|(_, d)| mean > d) {
            best = Some((t, mean));
        }
    }
    Ok(best.unwrap().0)
}

/// Dice-maximising threshold candidates used when none are configured.
pub fn default_threshold_grid() -> Vec<f64> {
    (1..=80).map(|k| k as f64 * 5.0 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectSeg {
    pub subject_id: String,
    pub area: usize,
    pub stratum: Stratum,
    pub dice: f64,
    pub surface: Option<SurfaceDistances>,
    pub detection: LesionF1,
}

/// Aggregate row shaped like one line of a Dice/HD95/ASD/F1 table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    pub n: usize,
    pub dice: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    /// Subjects whose HD95/ASD were undefined (empty prediction).
    pub distance_excluded: usize,
    /// Lesion-wise F1 pooled over the group's TP/FP/FN counts.
    pub f1: LesionF1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegReport {
    pub threshold: f64,
    pub overlap: f64,
    pub strata: StrataThresholds,
    pub subjects: Vec<SubjectSeg>,
    pub groups: Vec<GroupSummary>,
}

pub const F1_OVERLAP: f64 = 0.10;

/// Evaluates binarised maps against lesion masks. Subjects with an empty
/// ground-truth mask are skipped.
pub fn evaluate_segmentation(
    items: &[(String, &AnomalyMap, &BinaryMask)],
    threshold: f64,
    overlap: f64,
) -> Result<SegReport> {
    let lesioned: Vec<_> = items.iter().filter(|(_, _, gt)| !gt.is_empty()).collect();
    let areas: Vec<f64> = lesioned.iter().map(|(_, _, gt)| gt.area() as f64).collect();
    let strata = size_strata(&areas)?;
    let mut subjects = Vec::with_capacity(lesioned.len());
    for (id, map, gt) in lesioned {
        map.geometry().ensure_same(gt.geometry(), id)?;
        let pred = map.binarize(threshold);
        subjects.push(SubjectSeg {
            subject_id: id.clone(),
            area: gt.area(),
            stratum: strata.classify(gt.area() as f64),
            dice: dice(&pred, gt)?,
            surface: surface_distances(&pred, gt)?,
            detection: lesion_f1(&pred, gt, overlap)?,
        });
    }
    let mut groups = vec![summarize("All", subjects.iter())];
    for s in [Stratum::S, Stratum::M, Stratum::L] {
        groups.push(summarize(s.as_str(), subjects.iter().filter(|r| r.stratum == s)));
    }
    Ok(SegReport {
        threshold,
        overlap,
        strata,
        subjects,
        groups,
    })
}

fn summarize<'a>(group: &str, rows: impl Iterator<Item = &'a SubjectSeg>) -> GroupSummary {
    let rows: Vec<_> = rows.collect();
    let n = rows.len();
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let dices: Vec<f64> = rows.iter().map(|r| r.dice).collect();
    let hd: Vec<f64> = rows.iter().filter_map(|r| r.surface.map(|s| s.hd95)).collect();
    let asd: Vec<f64> = rows.iter().filter_map(|r| r.surface.map(|s| s.asd)).collect();
    let (tp, fp, fn_) = rows.iter().fold((0, 0, 0), |acc, r| {
        (acc.0 + r.detection.tp, acc.1 + r.detection.fp, acc.2 + r.detection.fn_)
    });
    GroupSummary {
        group: group.to_string(),
        n,
        dice: mean(&dices).unwrap_or(f64::NAN),
        hd95: mean(&hd),
        asd: mean(&asd),
        distance_excluded: n - hd.len(),
        f1: LesionF1::from_counts(tp, fp, fn_),
    }
}

fn fmt_f(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:.6}")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f).unwrap_or_default()
}

pub const SUBJECT_HEADER: [&str; 9] = [
    "subject_id", "area", "stratum", "dice", "hd95", "asd", "tp", "fp", "fn",
];

pub const SUMMARY_HEADER: [&str; 10] = [
    "group", "n", "dice", "hd95", "asd", "distance_excluded", "tp", "fp", "fn", "f1",
];

impl SegReport {
    pub fn write_subjects<W: Write>(&self, writer: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(SUBJECT_HEADER)?;
        for r in &self.subjects {
            w.write_record([
                r.subject_id.clone(),
                r.area.to_string(),
                r.stratum.to_string(),
                fmt_f(r.dice),
                fmt_opt(r.surface.map(|s| s.hd95)),
                fmt_opt(r.surface.map(|s| s.asd)),
                r.detection.tp.to_string(),
                r.detection.fp.to_string(),
                r.detection.fn_.to_string(),
            ])?;
        }
        w.flush()
    }

    pub fn write_summary<W: Write>(&self, writer: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(SUMMARY_HEADER)?;
        for g in &self.groups {
            w.write_record([
                g.group.clone(),
                g.n.to_string(),
                fmt_f(g.dice),
                fmt_opt(g.hd95),
                fmt_opt(g.asd),
                g.distance_excluded.to_string(),
                g.f1.tp.to_string(),
                g.f1.fp.to_string(),
                g.f1.fn_.to_string(),
                fmt_f(g.f1.f1),
            ])?;
        }
        w.flush()
    }
}

/// One per-subject row read back from a segmentation report CSV. Metric
/// columns that were left empty (undefined) are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRow {
    pub subject_id: String,
    pub stratum: Stratum,
    pub values: Vec<(String, Option<f64>)>,
}

impl SubjectRow {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.values
            .iter()
            .find(|(k, _)| k == name)
            .and_then(|(_, v)| *v)
    }
}

pub fn parse_subject_rows<R: Read>(reader: R) -> Result<Vec<SubjectRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let id_col = headers.iter().position(|h| h == "subject_id");
    let stratum_col = headers.iter().position(|h| h == "stratum");
    let (Some(id_col), Some(stratum_col)) = (id_col, stratum_col) else {
        return Err(Error::Parse {
            line: 1,
            message: "report needs `subject_id` and `stratum` columns".into(),
        });
    };
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let stratum = match &rec[stratum_col] {
            "S" => Stratum::S,
            "M" => Stratum::M,
            "L" => Stratum::L,
            other => {
                return Err(Error::Parse {
                    line,
                    message: format!("unknown stratum `{other}`"),
                })
            }
        };
        let mut values = Vec::new();
        for (k, v) in headers.iter().zip(rec.iter()) {
            if k == "subject_id" || k == "stratum" {
                continue;
            }
            let parsed = if v.is_empty() {
                None
            } else {
                Some(v.parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    message: format!("column `{k}`: non-numeric `{v}`"),
                })?)
            };
            values.push((k.to_string(), parsed));
        }
        rows.push(SubjectRow {
            subject_id: rec[id_col].to_string(),
            stratum,
            values,
        });
    }
    Ok(rows)
}

pub fn read_subject_rows(path: impl AsRef<Path>) -> Result<Vec<SubjectRow>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_subject_rows(file)
}
