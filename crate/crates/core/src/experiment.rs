//! End-to-end two-variant experiment.
//!
//! One dataset is generated; a "clean" model trains on the abnormality-free
//! copy of every training subject and a "contaminated" model on the images
//! as generated, where the configured fraction carries subtle abnormalities.
//! Both share architecture, initial weights, epochs and augmentation seed, so
//! the training pool is the only difference between them.
//!
//! Output tree:
//!
//! ```text
//! manifest.json            config, seeds, thresholds, creation time
//! data/                    the dataset (see `dataset_io`)
//! <variant>/model.aflw
//! <variant>/loss.csv
//! <variant>/maps/          validation and test anomaly maps + index.csv
//! <variant>/seg_subjects.csv, seg_summary.csv
//! <variant>/froc.csv, froc_curves.csv
//! comparison.csv           paired signed-rank tests, clean vs contaminated
//! summary.md
//! ```
//!
//! Thresholds are chosen from validation subjects only. Test ground truth is
//! read after both thresholds are fixed.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::agrd::write_grid;
use crate::annotations::PointAnnotation;
use crate::dataset_io::{map_path, write_dataset, write_json, write_map_index, MapIndexRow};
use crate::detection::{
    calibrate_threshold, evaluate_detection, DetectionConfig, DetectionInput, DetectionTable, LabelFilter,
};
use crate::error::{Error, Result};
use crate::flow::{
    save_model, train_with, FlowModel, SyntheticLesionPairs, TrainConfig, DEFAULT_HIDDEN, DEFAULT_TIME_PAIRS,
};
use crate::grid::{AnomalyMap, BinaryMask};
use crate::rng::derive_seed;
use crate::phantom::{make_dataset, DatasetParams, Split, Subject, SubjectKind};
use crate::segmetrics::{
    default_threshold_grid, evaluate_segmentation, parse_subject_rows, select_threshold, SegReport, Stratum,
    SubjectRow, F1_OVERLAP,
};
use crate::stats::{wilcoxon_signed_rank, Method, WilcoxonResult};
use crate::transport::{score_image, TransportConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub time_pairs: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![DEFAULT_HIDDEN],
            time_pairs: DEFAULT_TIME_PAIRS,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VariantTraining {
    pub clean: TrainConfig,
    pub contaminated: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub model_init: u64,
    pub augmentation: u64,
}

impl Default for StageSeeds {
    fn default() -> Self {
        Self {
            model_init: 1,
            augmentation: 2,
        }
    }
}

/// A whole run as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    /// `contamination_fraction` applies to the contaminated variant; the
    /// clean variant always trains on abnormality-free images.
    pub dataset: DatasetParams,
    pub model: ModelConfig,
    pub train: VariantTraining,
    pub transport: TransportConfig,
    /// Thresholds listed here are evaluated after the calibrated one.
    pub detection: DetectionConfig,
    pub seg_threshold_grid: Vec<f64>,
    pub seeds: StageSeeds,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("experiment"),
            dataset: DatasetParams {
                n_subjects: 200,
                contamination_fraction: 0.5,
                ..DatasetParams::default()
            },
            model: ModelConfig::default(),
            train: VariantTraining::default(),
            transport: TransportConfig::default(),
            detection: DetectionConfig::default(),
            seg_threshold_grid: default_threshold_grid(),
            seeds: StageSeeds::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Derives every stage seed from one master seed.
    pub fn with_seed(mut self, master: u64) -> Self {
        self.dataset.seed = derive_seed(master, 0, 0);
        self.seeds = StageSeeds {
            model_init: derive_seed(master, 1, 0),
            augmentation: derive_seed(master, 2, 0),
        };
        // Both variants see the same t draws and batch order.
        let train_seed = derive_seed(master, 3, 0);
        self.train.clean.seed = train_seed;
        self.train.contaminated.seed = train_seed;
        self
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        crate::dataset_io::read_json(path.as_ref())
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.clean.validate()?;
        self.train.contaminated.validate()?;
        self.detection.validate()?;
        if self.transport.steps == 0 {
            return Err(Error::Param("transport needs at least one step".into()));
        }
        if self.seg_threshold_grid.is_empty() {
            return Err(Error::Param("segmentation threshold grid is empty".into()));
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::Param("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Clean,
    Contaminated,
}

impl Variant {
    pub const BOTH: [Variant; 2] = [Variant::Clean, Variant::Contaminated];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Clean => "clean",
            Variant::Contaminated => "contaminated",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantReport {
    pub variant: Variant,
    pub loss_history: Vec<f64>,
    /// `μ + 3σ` over validation normal maps.
    pub calibrated_threshold: f64,
    /// Dice-optimal threshold over validation lesion subjects.
    pub seg_threshold: f64,
    pub seg: SegReport,
    pub detection: DetectionTable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub output_dir: PathBuf,
    pub variants: Vec<VariantReport>,
    pub comparison: Vec<ComparisonRow>,
}

impl ExperimentReport {
    pub fn variant(&self, v: Variant) -> &VariantReport {
        self.variants.iter().find(|r| r.variant == v).expect("both variants are always run")
    }
}

fn stage<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| Error::Stage {
        stage: name.to_string(),
        source: Box::new(e),
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_with(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct RunManifest<'a> {
    created_unix: u64,
    config: &'a ExperimentConfig,
    dataset_seed: u64,
    model_init_seed: u64,
    augmentation_seed: u64,
    train_seeds: [u64; 2],
    thresholds: Vec<ManifestThresholds>,
}

#[derive(Serialize)]
struct ManifestThresholds {
    variant: Variant,
    calibrated: f64,
    segmentation: f64,
}

/// Runs every stage and writes the output tree. A failing stage aborts the
/// run with its name; files from earlier stages stay on disk.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    stage("config", || config.validate())?;
    let out = config.output_dir.clone();
    stage("setup", || create_dir(&out))?;

    let dataset = stage("generate", || {
        let ds = make_dataset(&config.dataset)?;
        write_dataset(out.join("data"), &ds)?;
        Ok(ds)
    })?;

    let geometry = *dataset.val.first().map(|s| s.image.geometry()).unwrap_or(dataset.train[0].healthy.geometry());
    let init = stage("init", || {
        FlowModel::new(
            geometry.len(),
            &config.model.hidden,
            config.model.time_pairs,
            config.seeds.model_init,
        )
    })?;

    // The two variants are independent; train them side by side.
    let trained: Vec<Result<(FlowModel, Vec<f64>)>> = std::thread::scope(|s| {
        let handles: Vec<_> = Variant::BOTH
            .into_iter()
            .map(|variant| {
                let init = init.clone();
                let dataset = &dataset;
                s.spawn(move || {
                    let cfg = match variant {
                        Variant::Clean => &config.train.clean,
                        Variant::Contaminated => &config.train.contaminated,
                    };
                    let source = SyntheticLesionPairs {
                        images: dataset
                            .train
                            .iter()
                            .map(|t| (t.image(variant == Variant::Contaminated).clone(), t.subject.brain.clone()))
                            .collect(),
                        lesion: config.dataset.lesion.clone(),
                        seed: config.seeds.augmentation,
                    };
                    train_with(init, &source, cfg).map(|o| (o.model, o.loss_history))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
    });

    let eval: Vec<(Split, &Subject)> = dataset
        .val
        .iter()
        .map(|s| (Split::Val, s))
        .chain(dataset.test.iter().map(|s| (Split::Test, s)))
        .collect();

    let mut variants = Vec::new();
    let mut thresholds = Vec::new();
    for (variant, result) in Variant::BOTH.into_iter().zip(trained) {
        let name = variant.as_str();
        let dir = out.join(name);
        let (model, history) = stage(&format!("train:{name}"), || {
            let (model, history) = result?;
            create_dir(&dir)?;
            save_model(dir.join("model.aflw"), &model)?;
            write_with(&dir.join("loss.csv"), |w| {
                writeln!(w, "epoch,loss")?;
                for (i, l) in history.iter().enumerate() {
                    writeln!(w, "{i},{l}")?;
                }
                Ok(())
            })?;
            Ok((model, history))
        })?;

        let maps = stage(&format!("reconstruct:{name}"), || {
            let maps_dir = dir.join("maps");
            create_dir(&maps_dir)?;
            let maps = eval
                .iter()
                .map(|(_, s)| score_image(&model, &s.image, &config.transport))
                .collect::<Result<Vec<_>>>()?;
            for ((_, s), m) in eval.iter().zip(&maps) {
                write_grid(map_path(&maps_dir, &s.id), &m.clone().into())?;
            }
            let index: Vec<MapIndexRow> = eval
                .iter()
                .map(|(split, s)| MapIndexRow {
                    subject_id: s.id.clone(),
                    split: *split,
                    kind: s.kind,
                })
                .collect();
            write_map_index(&maps_dir, &index)?;
            Ok(maps)
        })?;

        let (calibrated, seg_threshold) = stage(&format!("calibrate:{name}"), || {
            let normal: Vec<AnomalyMap> = eval
                .iter()
                .zip(&maps)
                .filter(|((split, s), _)| *split == Split::Val && s.kind == SubjectKind::Normal)
                .map(|(_, m)| m.clone())
                .collect();
            let calibrated = calibrate_threshold(&normal)?;
            let (val_maps, val_gts): (Vec<AnomalyMap>, Vec<BinaryMask>) = eval
                .iter()
                .zip(&maps)
                .filter(|((split, s), _)| *split == Split::Val && s.kind.has_lesion())
                .map(|((_, s), m)| (m.clone(), s.lesion_mask_or_empty()))
                .unzip();
            let seg_threshold = if val_maps.is_empty() {
                calibrated
            } else {
                select_threshold(&val_maps, &val_gts, &config.seg_threshold_grid)?
            };
            Ok((calibrated, seg_threshold))
        })?;

        let test: Vec<(&Subject, &AnomalyMap)> = eval
            .iter()
            .zip(&maps)
            .filter(|((split, _), _)| *split == Split::Test)
            .map(|((_, s), m)| (*s, m))
            .collect();

        let seg = stage(&format!("evaluate-seg:{name}"), || {
            let gts: Vec<BinaryMask> = test.iter().map(|(s, _)| s.lesion_mask_or_empty()).collect();
            let items: Vec<(String, &AnomalyMap, &BinaryMask)> = test
                .iter()
                .zip(&gts)
                .map(|((s, m), gt)| (s.id.clone(), *m, gt))
                .collect();
            let report = evaluate_segmentation(&items, seg_threshold, F1_OVERLAP)?;
            write_with(&dir.join("seg_subjects.csv"), |w| report.write_subjects(w))?;
            write_with(&dir.join("seg_summary.csv"), |w| report.write_summary(w))?;
            Ok(report)
        })?;

        let detection = stage(&format!("evaluate-froc:{name}"), || {
            let mut cfg = config.detection.clone();
            cfg.binarize_thresholds.insert(0, calibrated);
            let inputs: Vec<DetectionInput> = test
                .iter()
                .map(|(s, m)| DetectionInput {
                    subject_id: &s.id,
                    map: m,
                    points: &s.annotations,
                })
                .collect();
            let filters = available_filters(test.iter().flat_map(|(s, _)| &s.annotations));
            let table = evaluate_detection(&inputs, &cfg, &filters)?;
            write_with(&dir.join("froc.csv"), |w| table.write_scores(w))?;
            write_with(&dir.join("froc_curves.csv"), |w| table.write_curves(w))?;
            Ok(table)
        })?;

        thresholds.push(ManifestThresholds {
            variant,
            calibrated,
            segmentation: seg_threshold,
        });
        variants.push(VariantReport {
            variant,
            loss_history: history,
            calibrated_threshold: calibrated,
            seg_threshold,
            seg,
            detection,
        });
    }

    let comparison = stage("compare", || {
        let rows = |v: &VariantReport| -> Result<Vec<SubjectRow>> {
            let mut buf = Vec::new();
            v.seg.write_subjects(&mut buf).map_err(|e| Error::io(&out, e))?;
            parse_subject_rows(buf.as_slice())
        };
        let (a, b) = (rows(&variants[0])?, rows(&variants[1])?);
        let mut all = Vec::new();
        for metric in ["dice", "hd95", "asd"] {
            all.extend(compare_subject_rows(&a, &b, metric)?);
        }
        let path = out.join("comparison.csv");
        write_with(&path, |w| write_comparison(w, "clean", "contaminated", &all, true))?;
        Ok(all)
    })?;

    let report = ExperimentReport {
        output_dir: out.clone(),
        variants,
        comparison,
    };
    stage("report", || {
        let path = out.join("summary.md");
        fs::write(&path, render_summary(config, &report)).map_err(|e| Error::io(&path, e))?;
        let created_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        write_json(
            &out.join("manifest.json"),
            &RunManifest {
                created_unix,
                config,
                dataset_seed: config.dataset.seed,
                model_init_seed: config.seeds.model_init,
                augmentation_seed: config.seeds.augmentation,
                train_seeds: [config.train.clean.seed, config.train.contaminated.seed],
                thresholds,
            },
        )
    })?;
    Ok(report)
}

fn available_filters<'a>(points: impl Iterator<Item = &'a PointAnnotation>) -> Vec<LabelFilter> {
    let points: Vec<_> = points.collect();
    LabelFilter::ALL
        .into_iter()
        .filter(|f| points.iter().any(|p| f.keeps(p.label)))
        .collect()
}

/// Paired test of one metric between two per-subject reports.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub group: String,
    pub metric: String,
    pub n: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    pub test: WilcoxonResult,
}

/// Pairs subjects by id (stratum taken from `a`) and tests `metric` overall
/// and per stratum. Subjects where either value is undefined are dropped;
/// groups left without pairs are omitted.
pub fn compare_subject_rows(a: &[SubjectRow], b: &[SubjectRow], metric: &str) -> Result<Vec<ComparisonRow>> {
    if a.iter().all(|r| !r.values.iter().any(|(k, _)| k == metric)) {
        return Err(Error::Param(format!("metric `{metric}` is not a report column")));
    }
    let pairs: Vec<(Stratum, f64, f64)> = a
        .iter()
        .filter_map(|ra| {
            let rb = b.iter().find(|rb| rb.subject_id == ra.subject_id)?;
            Some((ra.stratum, ra.metric(metric)?, rb.metric(metric)?))
        })
        .collect();
    let mut out = Vec::new();
    let groups: [(&str, Option<Stratum>); 4] = [
        ("All", None),
        ("S", Some(Stratum::S)),
        ("M", Some(Stratum::M)),
        ("L", Some(Stratum::L)),
    ];
    for (name, stratum) in groups {
        let (x, y): (Vec<f64>, Vec<f64>) = pairs
            .iter()
            .filter(|(s, _, _)| stratum.is_none_or(|want| *s == want))
            .map(|&(_, p, q)| (p, q))
            .unzip();
        if x.is_empty() {
            continue;
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        out.push(ComparisonRow {
            group: name.to_string(),
            metric: metric.to_string(),
            n: x.len(),
            mean_a: mean(&x),
            mean_b: mean(&y),
            test: wilcoxon_signed_rank(&x, &y)?,
        });
    }
    Ok(out)
}

pub const COMPARISON_HEADER: [&str; 11] = [
    "a", "b", "group", "metric", "n", "mean_a", "mean_b", "w_plus", "w_minus", "p", "method",
];

pub fn write_comparison<W: Write>(
    writer: W,
    a: &str,
    b: &str,
    rows: &[ComparisonRow],
    header: bool,
) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    if header {
        w.write_record(COMPARISON_HEADER)?;
    }
    for r in rows {
        w.write_record([
            a.to_string(),
            b.to_string(),
            r.group.clone(),
            r.metric.clone(),
            r.n.to_string(),
            format!("{:.6}", r.mean_a),
            format!("{:.6}", r.mean_b),
            format!("{:.1}", r.test.w_plus),
            format!("{:.1}", r.test.w_minus),
            format!("{:.6}", r.test.p),
            match r.test.method {
                Method::Exact => "exact".to_string(),
                Method::NormalApprox => "normal".to_string(),
            },
        ])?;
    }
    w.flush()
}

fn cell(v: Option<f64>, star: bool) -> String {
    match v {
        Some(v) if v.is_finite() => format!("{v:.3}{}", if star { "*" } else { "" }),
        _ => "–".to_string(),
    }
}

fn significant(report: &ExperimentReport, group: &str, metric: &str) -> bool {
    report
        .comparison
        .iter()
        .any(|r| r.group == group && r.metric == metric && r.test.p < 0.05)
}

/// Markdown summary: a segmentation table per variant and a FROC table.
/// Clean-variant cells carry `*` where the paired test gives p < 0.05.
pub fn render_summary(config: &ExperimentConfig, report: &ExperimentReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Clean vs contaminated training\n");
    let _ = writeln!(
        s,
        "{} subjects, contamination fraction {}, dataset seed {}.\n",
        config.dataset.n_subjects, config.dataset.contamination_fraction, config.dataset.seed
    );
    let _ = writeln!(s, "## Segmentation (test split)\n");
    for v in &report.variants {
        let _ = writeln!(
            s,
            "### {} (threshold {:.3})\n",
            v.variant.as_str(),
            v.seg_threshold
        );
        let _ = writeln!(s, "| Group | n | Dice | HD95 (mm) | ASD (mm) | F1 10% |");
        let _ = writeln!(s, "|---|---|---|---|---|---|");
        for g in &v.seg.groups {
            let star = |m| v.variant == Variant::Clean && significant(report, &g.group, m);
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} |",
                g.group,
                g.n,
                cell(Some(g.dice), star("dice")),
                cell(g.hd95, star("hd95")),
                cell(g.asd, star("asd")),
                cell(Some(g.f1.f1), false),
            );
        }
        let _ = writeln!(s);
    }
    let _ = writeln!(s, "`*` p < 0.05, paired signed-rank test against the contaminated model.\n");

    let _ = writeln!(s, "## FROC score (test split)\n");
    let _ = writeln!(s, "| Threshold | Annotations | clean | contaminated |");
    let _ = writeln!(s, "|---|---|---|---|");
    let clean = &report.variant(Variant::Clean).detection;
    let dirty = &report.variant(Variant::Contaminated).detection;
    // Rows are threshold-major; the first threshold is each model's own
    // calibrated one.
    let per_threshold = clean
        .rows
        .iter()
        .take_while(|r| r.threshold == clean.rows[0].threshold)
        .count()
        .max(1);
    for (i, (rc, rd)) in clean.rows.iter().zip(&dirty.rows).enumerate() {
        let t = if i < per_threshold {
            format!("μ+3σ ({:.3} / {:.3})", rc.threshold, rd.threshold)
        } else {
            format!("{:.3}", rc.threshold)
        };
        let _ = writeln!(s, "| {t} | {} | {:.3} | {:.3} |", rc.filter.title(), rc.score, rd.score);
    }
    let _ = writeln!(s, "\nCurves for plotting: `<variant>/froc_curves.csv`.");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, stratum: Stratum, dice: Option<f64>) -> SubjectRow {
        SubjectRow {
            subject_id: id.into(),
            stratum,
            values: vec![("dice".into(), dice)],
        }
    }

    #[test]
    fn comparison_pairs_by_id_and_skips_undefined() {
        let a = vec![
            row("s1", Stratum::S, Some(0.9)),
            row("s2", Stratum::L, Some(0.5)),
            row("s3", Stratum::L, None),
        ];
        let b = vec![
            row("s2", Stratum::L, Some(0.4)),
            row("s1", Stratum::S, Some(0.7)),
            row("s3", Stratum::L, Some(0.1)),
        ];
        let rows = compare_subject_rows(&a, &b, "dice").unwrap();
        let groups: Vec<(&str, usize)> = rows.iter().map(|r| (r.group.as_str(), r.n)).collect();
        assert_eq!(groups, vec![("All", 2), ("S", 1), ("L", 1)]);
        assert!((rows[0].mean_a - 0.7).abs() < 1e-12);
        assert!(compare_subject_rows(&a, &b, "sensitivity").is_err());
    }

    #[test]
    fn config_json_round_trips_and_fills_defaults() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
        let partial = ExperimentConfig::from_json(r#"{"output_dir": "x"}"#).unwrap();
        assert_eq!(partial.output_dir, PathBuf::from("x"));
        assert_eq!(partial.transport.steps, 5);
    }

    #[test]
    fn invalid_config_fails_in_config_stage() {
        let cfg = ExperimentConfig {
            seg_threshold_grid: vec![],
            ..ExperimentConfig::default()
        };
        match run_experiment(&cfg) {
            Err(Error::Stage { stage, .. }) => assert_eq!(stage, "config"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
