//! Object-level anomaly detection: connected components scored by their
//! peak anomaly value, matched to point annotations, and summarised as FROC
//! curves (sensitivity vs. false positives per image).

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::annotations::{Label, PointAnnotation};
use crate::components::label;
use crate::error::{Error, Result};
use crate::grid::{AnomalyMap, BinaryMask};

/// An 8-connected blob of a binarised anomaly map.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    /// Member pixels as `(x, y)`, in row-major order.
    pub pixels: Vec<(usize, usize)>,
    /// Maximum anomaly score over the members.
    pub confidence: f64,
}

impl Component {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    /// Euclidean distance from `(x, y)` to the nearest member pixel centre.
    pub fn distance_to(&self, x: f64, y: f64) -> f64 {
        self.pixels
            .iter()
            .map(|&(px, py)| (px as f64 - x).hypot(py as f64 - y))
            .fold(f64::INFINITY, f64::min)
    }

    /// True when the point rounds to one of the member pixels.
    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        let (rx, ry) = (x.round(), y.round());
        if rx < 0.0 || ry < 0.0 {
            return false;
        }
        self.pixels.contains(&(rx as usize, ry as usize))
    }

    pub fn matches(&self, p: &PointAnnotation, tolerance: f64) -> bool {
        self.contains_point(p.x, p.y) || self.distance_to(p.x, p.y) <= tolerance
    }
}

/// Components of `mask`, ordered by their first row-major pixel, each scored
/// with the maximum of `map` over its pixels.
pub fn connected_components(mask: &BinaryMask, map: &AnomalyMap) -> Result<Vec<Component>> {
    mask.geometry().ensure_same(map.geometry(), "connected components")?;
    let g = mask.geometry();
    let labeling = label(mask);
    Ok(labeling
        .members
        .iter()
        .map(|members| Component {
            pixels: members.iter().map(|&i| g.coords(i)).collect(),
            confidence: members
                .iter()
                .map(|&i| map.scores()[i])
                .fold(f64::NEG_INFINITY, f64::max),
        })
        .collect())
}

/// Mean plus three population standard deviations of all pooled pixels.
pub fn calibrate_threshold<M: AsRef<[f64]>>(normal_maps: &[M]) -> Result<f64> {
    let all = || normal_maps.iter().flat_map(|m| m.as_ref().iter().copied());
    let n = all().count();
    if n == 0 {
        return Err(Error::Param("threshold calibration needs at least one normal map".into()));
    }
    if let Some(v) = all().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite score {v} in calibration maps")));
    }
    let mean = all().sum::<f64>() / n as f64;
    let var = all().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    Ok(mean + 3.0 * var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    pub point_detected: Vec<bool>,
    pub component_tp: Vec<bool>,
}

impl MatchResult {
    pub fn false_positives(&self) -> usize {
        self.component_tp.iter().filter(|&&tp| !tp).count()
    }

    pub fn detected(&self) -> usize {
        self.point_detected.iter().filter(|&&d| d).count()
    }
}

/// Many-to-many matching: a component is a TP when it matches any point, a
/// point is detected when any component matches it.
pub fn match_components(
    components: &[Component],
    points: &[PointAnnotation],
    tolerance: f64,
) -> Result<MatchResult> {
    if !(tolerance >= 0.0) {
        return Err(Error::Param(format!("match tolerance must be >= 0, got {tolerance}")));
    }
    let mut point_detected = vec![false; points.len()];
    let mut component_tp = vec![false; components.len()];
    for (c, comp) in components.iter().enumerate() {
        for (k, p) in points.iter().enumerate() {
            if comp.matches(p, tolerance) {
                component_tp[c] = true;
                point_detected[k] = true;
            }
        }
    }
    Ok(MatchResult {
        point_detected,
        component_tp,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    pub fppi: f64,
    pub sensitivity: f64,
}

/// Operating points sorted by FPPI with non-decreasing sensitivity.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FrocCurve {
    pub points: Vec<FrocPoint>,
}

/// Detections and reference points of one evaluated image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDetections {
    pub components: Vec<Component>,
    pub points: Vec<PointAnnotation>,
}

/// Sweeps confidence cutoffs over every distinct component confidence (high
/// to low). At each cutoff, components at or above it are matched; the
/// operating point is (FP components / images, detected points / points).
pub fn froc_curve(images: &[ImageDetections], tolerance: f64) -> Result<FrocCurve> {
    if images.is_empty() {
        return Err(Error::Param("FROC needs at least one image".into()));
    }
    let total_points: usize = images.iter().map(|im| im.points.len()).sum();
    if total_points == 0 {
        return Err(Error::Param("FROC needs at least one annotated point".into()));
    }
    let n_images = images.len() as f64;

    // Per image, which points each component matches.
    let matches: Vec<Vec<Vec<usize>>> = images
        .iter()
        .map(|im| {
            im.components
                .iter()
                .map(|c| {
                    (0..im.points.len())
                        .filter(|&k| c.matches(&im.points[k], tolerance))
                        .collect()
                })
                .collect()
        })
        .collect();

    let mut order: Vec<(f64, usize, usize)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, im)| im.components.iter().enumerate().map(move |(c, comp)| (comp.confidence, i, c)))
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut detected: Vec<Vec<bool>> = images.iter().map(|im| vec![false; im.points.len()]).collect();
    let mut n_detected = 0usize;
    let mut n_fp = 0usize;
    let mut points: Vec<FrocPoint> = Vec::new();
    let mut idx = 0;
    while idx < order.len() {
        let cutoff = order[idx].0;
        // Admit every component tied at this confidence.
        while idx < order.len() && order[idx].0 == cutoff {
            let (_, i, c) = order[idx];
            let hits = &matches[i][c];
            if hits.is_empty() {
                n_fp += 1;
            }
            for &k in hits {
                if !detected[i][k] {
                    detected[i][k] = true;
                    n_detected += 1;
                }
            }
            idx += 1;
        }
        let p = FrocPoint {
            fppi: n_fp as f64 / n_images,
            sensitivity: n_detected as f64 / total_points as f64,
        };
        match points.last_mut() {
            Some(last) if last.fppi == p.fppi => last.sensitivity = last.sensitivity.max(p.sensitivity),
            _ => points.push(p),
        }
    }
    let mut running = 0.0f64;
    for p in &mut points {
        running = running.max(p.sensitivity);
        p.sensitivity = running;
    }
    Ok(FrocCurve { points })
}

/// Best sensitivity reachable at FPPI ≤ `level` (0 when none).
pub fn sensitivity_at(curve: &FrocCurve, level: f64) -> f64 {
    curve
        .points
        .iter()
        .filter(|p| p.fppi <= level)
        .map(|p| p.sensitivity)
        .fold(0.0, f64::max)
}

/// Mean of [`sensitivity_at`] over `levels`. An empty curve (nothing was
/// detected at all) scores 0.
pub fn froc_score(curve: &FrocCurve, levels: &[f64]) -> Result<f64> {
    if levels.is_empty() {
        return Err(Error::Param("FROC score needs at least one FPPI level".into()));
    }
    Ok(levels.iter().map(|&l| sensitivity_at(curve, l)).sum::<f64>() / levels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelFilter {
    All,
    LesionOnly,
    NonLesionalOnly,
}

impl LabelFilter {
    pub const ALL: [LabelFilter; 3] = [
        LabelFilter::LesionOnly,
        LabelFilter::NonLesionalOnly,
        LabelFilter::All,
    ];

    pub fn keeps(self, label: Label) -> bool {
        match self {
            LabelFilter::All => true,
            LabelFilter::LesionOnly => label == Label::Lesion,
            LabelFilter::NonLesionalOnly => label == Label::NonLesional,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LabelFilter::All => "all",
            LabelFilter::LesionOnly => "lesion",
            LabelFilter::NonLesionalOnly => "nonlesion",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            LabelFilter::All => "All anomalies",
            LabelFilter::LesionOnly => "Lesions only",
            LabelFilter::NonLesionalOnly => "Non-lesion anomalies",
        }
    }
}

impl fmt::Display for LabelFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LabelFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(LabelFilter::All),
            "lesion" => Ok(LabelFilter::LesionOnly),
            "nonlesion" => Ok(LabelFilter::NonLesionalOnly),
            other => Err(Error::Param(format!("unknown label filter `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionConfig {
    pub binarize_thresholds: Vec<f64>,
    pub match_tolerance: f64,
    pub fppi_levels: Vec<f64>,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            binarize_thresholds: vec![0.036, 0.1, 0.5],
            match_tolerance: crate::MATCH_TOLERANCE,
            fppi_levels: vec![0.25, 0.5, 1.0, 1.5],
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.binarize_thresholds.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::Param("binarisation thresholds must be > 0".into()));
        }
        if !(self.match_tolerance >= 0.0) {
            return Err(Error::Param("match tolerance must be >= 0".into()));
        }
        if self.fppi_levels.is_empty() {
            return Err(Error::Param("at least one FPPI level is required".into()));
        }
        if self.fppi_levels.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Param("FPPI levels must be sorted ascending".into()));
        }
        Ok(())
    }
}

/// One line of the FROC score table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub threshold: f64,
    pub filter: LabelFilter,
    pub score: f64,
    pub sensitivities: Vec<f64>,
    pub n_images: usize,
    pub n_excluded: usize,
    pub n_points: usize,
    pub curve: FrocCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionTable {
    pub fppi_levels: Vec<f64>,
    pub rows: Vec<DetectionRow>,
}

impl DetectionTable {
    pub fn row(&self, threshold: f64, filter: LabelFilter) -> Option<&DetectionRow> {
        self.rows
            .iter()
            .find(|r| r.threshold == threshold && r.filter == filter)
    }
}

/// One evaluated subject: its anomaly map and reference points.
#[derive(Debug, Clone, Copy)]
pub struct DetectionInput<'a> {
    pub subject_id: &'a str,
    pub map: &'a AnomalyMap,
    pub points: &'a [PointAnnotation],
}

/// FROC scores for every (threshold, filter) pair. Subjects without points
/// under a filter are excluded from that filter's curve and counted in
/// `n_excluded`.
pub fn evaluate_detection(
    inputs: &[DetectionInput<'_>],
    cfg: &DetectionConfig,
    filters: &[LabelFilter],
) -> Result<DetectionTable> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &t in &cfg.binarize_thresholds {
        let components: Vec<Vec<Component>> = inputs
            .iter()
            .map(|inp| connected_components(&inp.map.binarize(t), inp.map))
            .collect::<Result<_>>()?;
        for &filter in filters {
            let mut images = Vec::new();
            for (inp, comps) in inputs.iter().zip(&components) {
                let points: Vec<PointAnnotation> = inp
                    .points
                    .iter()
                    .filter(|p| filter.keeps(p.label))
                    .cloned()
                    .collect();
                if !points.is_empty() {
                    images.push(ImageDetections {
                        components: comps.clone(),
                        points,
                    });
                }
            }
            if images.is_empty() {
                return Err(Error::Param(format!(
                    "no subject has `{filter}` annotations; nothing to evaluate"
                )));
            }
            let curve = froc_curve(&images, cfg.match_tolerance)?;
            let sensitivities: Vec<f64> = cfg
                .fppi_levels
                .iter()
                .map(|&l| sensitivity_at(&curve, l))
                .collect();
            rows.push(DetectionRow {
                threshold: t,
                filter,
                score: froc_score(&curve, &cfg.fppi_levels)?,
                sensitivities,
                n_images: images.len(),
                n_excluded: inputs.len() - images.len(),
                n_points: images.iter().map(|im| im.points.len()).sum(),
                curve,
            });
        }
    }
    Ok(DetectionTable {
        fppi_levels: cfg.fppi_levels.clone(),
        rows,
    })
}

impl DetectionTable {
    /// `threshold,filter,score,n_images,n_excluded,n_points,sens@<level>...`
    pub fn write_scores<W: Write>(&self, writer: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = ["threshold", "filter", "score", "n_images", "n_excluded", "n_points"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend(self.fppi_levels.iter().map(|l| format!("sens@{l}")));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                format!("{:.6}", r.threshold),
                r.filter.to_string(),
                format!("{:.6}", r.score),
                r.n_images.to_string(),
                r.n_excluded.to_string(),
                r.n_points.to_string(),
            ];
            rec.extend(r.sensitivities.iter().map(|s| format!("{s:.6}")));
            w.write_record(&rec)?;
        }
        w.flush()
    }

    /// Raw curves, `threshold,filter,fppi,sensitivity`, for plotting.
    pub fn write_curves<W: Write>(&self, writer: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["threshold", "filter", "fppi", "sensitivity"])?;
        for r in &self.rows {
            for p in &r.curve.points {
                w.write_record([
                    format!("{:.6}", r.threshold),
                    r.filter.to_string(),
                    format!("{:.6}", p.fppi),
                    format!("{:.6}", p.sensitivity),
                ])?;
            }
        }
        w.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Geometry;

    fn comp(pixels: &[(usize, usize)], confidence: f64) -> Component {
        Component {
            pixels: pixels.to_vec(),
            confidence,
        }
    }

    fn lesion(x: f64, y: f64) -> PointAnnotation {
        PointAnnotation::new(x, y, Label::Lesion)
    }

    #[test]
    fn components_take_max_score() {
        let g = Geometry::new(4, 2, 1.0).unwrap();
        let map = AnomalyMap::new(g, vec![0.2, 0.7, 0.0, 0.9, 0.0, 0.0, 0.0, 0.4]).unwrap();
        let comps = connected_components(&map.binarize(0.1), &map).unwrap();
        assert_eq!(comps.len(), 2);
        assert_eq!(comps[0].pixels, vec![(0, 0), (1, 0)]);
        assert_eq!(comps[0].confidence, 0.7);
        // (3,0) and (3,1) are vertically adjacent.
        assert_eq!(comps[1].confidence, 0.9);
        assert_eq!(comps[1].area(), 2);
    }

    #[test]
    fn empty_mask_has_no_components() {
        let g = Geometry::square(3).unwrap();
        let map = AnomalyMap::zeros(g);
        assert!(connected_components(&BinaryMask::empty(g), &map).unwrap().is_empty());
    }

    #[test]
    fn calibration_matches_hand_value() {
        let g = Geometry::new(4, 1, 1.0).unwrap();
        let map = AnomalyMap::new(g, vec![0.0, 0.0, 0.0, 4.0]).unwrap();
        let t = calibrate_threshold(&[map]).unwrap();
        assert!((t - (1.0 + 3.0 * 3f64.sqrt())).abs() < 1e-12);
        assert_eq!(calibrate_threshold(&[AnomalyMap::zeros(g)]).unwrap(), 0.0);
        assert!(calibrate_threshold::<Vec<f64>>(&[]).is_err());
    }

    #[test]
    fn match_distance_is_inclusive() {
        let c = [comp(&[(10, 10)], 1.0)];
        let at5 = match_components(&c, &[lesion(15.0, 10.0)], 5.0).unwrap();
        assert_eq!(at5.component_tp, vec![true]);
        let at55 = match_components(&c, &[lesion(15.5, 10.0)], 5.0).unwrap();
        assert_eq!(at55.component_tp, vec![false]);
        assert_eq!(at55.point_detected, vec![false]);
    }

    #[test]
    fn zero_tolerance_is_containment_after_rounding() {
        let c = [comp(&[(3, 4)], 1.0)];
        assert!(match_components(&c, &[lesion(3.4, 3.6)], 0.0).unwrap().component_tp[0]);
        assert!(!match_components(&c, &[lesion(3.6, 3.6)], 0.0).unwrap().component_tp[0]);
    }

    #[test]
    fn single_perfect_detection() {
        let images = [ImageDetections {
            components: vec![comp(&[(1, 1)], 0.5)],
            points: vec![lesion(1.0, 1.0)],
        }];
        let curve = froc_curve(&images, 5.0).unwrap();
        assert_eq!(
            curve.points,
            vec![FrocPoint {
                fppi: 0.0,
                sensitivity: 1.0
            }]
        );
        assert_eq!(froc_score(&curve, &[0.25, 0.5, 1.0, 1.5]).unwrap(), 1.0);
    }

    #[test]
    fn tp_then_fp() {
        let images = [ImageDetections {
            components: vec![comp(&[(1, 1)], 0.9), comp(&[(20, 20)], 0.8)],
            points: vec![lesion(1.0, 1.0)],
        }];
        let curve = froc_curve(&images, 5.0).unwrap();
        let pts: Vec<_> = curve.points.iter().map(|p| (p.fppi, p.sensitivity)).collect();
        assert_eq!(pts, vec![(0.0, 1.0), (1.0, 1.0)]);
    }

    #[test]
    fn froc_errors() {
        let no_points = [ImageDetections {
            components: vec![],
            points: vec![],
        }];
        assert!(froc_curve(&no_points, 5.0).is_err());
        assert!(froc_curve(&[], 5.0).is_err());
        assert!(froc_score(&FrocCurve::default(), &[]).is_err());
    }

    #[test]
    fn score_averages_levels() {
        let curve = FrocCurve {
            points: [(0.25, 0.5), (0.5, 0.6), (1.0, 0.7), (1.5, 0.8)]
                .iter()
                .map(|&(fppi, sensitivity)| FrocPoint { fppi, sensitivity })
                .collect(),
        };
        let s = froc_score(&curve, &[0.25, 0.5, 1.0, 1.5]).unwrap();
        assert!((s - 0.65).abs() < 1e-12);
    }

    #[test]
    fn filter_excludes_subjects_without_matching_labels() {
        let g = Geometry::square(8).unwrap();
        let map = AnomalyMap::new(g, (0..64).map(|i| if i == 9 { 1.0 } else { 0.0 }).collect()).unwrap();
        let lesion_only = vec![lesion(1.0, 1.0)];
        let both = vec![lesion(1.0, 1.0), PointAnnotation::new(6.0, 6.0, Label::NonLesional)];
        let inputs = [
            DetectionInput {
                subject_id: "a",
                map: &map,
                points: &lesion_only,
            },
            DetectionInput {
                subject_id: "b",
                map: &map,
                points: &both,
            },
        ];
        let cfg = DetectionConfig {
            binarize_thresholds: vec![0.5],
            ..DetectionConfig::default()
        };
        let table = evaluate_detection(&inputs, &cfg, &LabelFilter::ALL).unwrap();
        assert_eq!(table.rows.len(), 3);
        let non = table.row(0.5, LabelFilter::NonLesionalOnly).unwrap();
        assert_eq!((non.n_images, non.n_excluded), (1, 1));
        let les = table.row(0.5, LabelFilter::LesionOnly).unwrap();
        assert_eq!(les.score, 1.0);
    }
}
