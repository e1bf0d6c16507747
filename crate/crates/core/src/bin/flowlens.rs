use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};

use flowlens::agrd::{read_anomaly_map, read_image, read_mask, write_grid};
use flowlens::annotations::{merge_annotation_sets, read_annotations, write_annotations};
use flowlens::dataset_io::{
    load_training_images, map_path, read_manifest, read_map_index, write_dataset, write_map_index, MapIndexRow,
    MAP_INDEX,
};
use flowlens::detection::{calibrate_threshold, evaluate_detection, DetectionConfig, DetectionInput, LabelFilter};
use flowlens::experiment::{compare_subject_rows, run_experiment, write_comparison, ExperimentConfig};
use flowlens::flow::{load_model, save_model, train_with, FlowModel, Optimizer, SyntheticLesionPairs, TrainConfig};
use flowlens::phantom::{make_dataset, DatasetParams, PhantomParams, Split, SubjectKind};
use flowlens::rng::derive_seed;
use flowlens::segmetrics::{default_threshold_grid, evaluate_segmentation, read_subject_rows, select_threshold, F1_OVERLAP};
use flowlens::transport::{score_image, TransportConfig};
use flowlens::{AnomalyMap, BinaryMask, Error};

#[derive(Parser)]
#[command(name = "flowlens", version, about = "Rectified-flow anomaly detection on synthetic brain phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset.
    Generate {
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// Fraction of training subjects carrying a subtle abnormality.
        #[arg(long, default_value_t = 0.0)]
        contamination: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a velocity field on a dataset's training split.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Defaults to `<data>/model.aflw`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Train on the images as generated instead of their clean copies.
        #[arg(long, default_value_t = false, action = ArgAction::Set)]
        contaminated: bool,
        #[arg(long, value_delimiter = ',', default_value = "128")]
        hidden: Vec<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// 0 selects plain SGD.
        #[arg(long)]
        momentum: Option<f64>,
        /// Optional per-epoch loss CSV.
        #[arg(long)]
        loss_out: Option<PathBuf>,
    },
    /// Write anomaly maps for validation and test subjects.
    Reconstruct {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also score the training split.
        #[arg(long)]
        include_train: bool,
    },
    /// Dice, HD95, ASD and lesion-wise F1 per subject and per size stratum.
    EvaluateSeg {
        #[arg(long)]
        maps: PathBuf,
        /// Dataset directory or a directory of `<id>.agrd` masks.
        #[arg(long)]
        gt: PathBuf,
        /// A number, or `auto` to pick the Dice-optimal value on validation maps.
        #[arg(long)]
        threshold: String,
        #[arg(long, default_value_t = F1_OVERLAP)]
        overlap: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// FROC scores per binarisation threshold and annotation filter.
    EvaluateFroc {
        #[arg(long)]
        maps: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        /// `auto` stands for μ+3σ over validation normal maps.
        #[arg(long, value_delimiter = ',', default_value = "0.036,0.1,0.5")]
        thresholds: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,1.0,1.5")]
        levels: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "lesion,nonlesion,all")]
        filter: Vec<LabelFilter>,
        #[arg(long, default_value_t = flowlens::MATCH_TOLERANCE)]
        tolerance: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge two raters' point annotations.
    MergeAnnotations {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = flowlens::MERGE_RADIUS)]
        radius: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Paired signed-rank test between two per-subject segmentation reports.
    Report {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Metric column to compare.
        #[arg(long, default_value = "dice")]
        test: String,
        /// Comparison CSV to append to; defaults to `comparison.csv` next to `--a`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full clean-vs-contaminated experiment from a JSON config.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Derive every stage seed from this master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the default config and exit.
        #[arg(long)]
        print_default: bool,
    },
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn require_exists(path: &Path, flag: &str) -> CliResult {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("{flag}: `{}` does not exist", path.display())))
    }
}

fn write_file(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> CliResult {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| Error::Io { path: path.into(), source: e })?;
    fs::write(path, buf).map_err(|e| Error::Io { path: path.into(), source: e })?;
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    path.with_file_name(format!("{stem}_{suffix}.csv"))
}

fn create_dir(path: &Path) -> CliResult {
    fs::create_dir_all(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> CliResult {
    match command {
        Command::Generate {
            n,
            contamination,
            seed,
            size,
            out,
        } => {
            let params = DatasetParams {
                n_subjects: n,
                contamination_fraction: contamination,
                seed,
                phantom: PhantomParams {
                    size,
                    ..PhantomParams::default()
                },
                ..DatasetParams::default()
            };
            let ds = make_dataset(&params)?;
            let manifest = write_dataset(&out, &ds)?;
            println!(
                "wrote {} subjects ({} train, {} val, {} test) to {}",
                manifest.subjects.len(),
                ds.train.len(),
                ds.val.len(),
                ds.test.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train {
            data,
            out,
            epochs,
            lr,
            seed,
            contaminated,
            hidden,
            batch_size,
            momentum,
            loss_out,
        } => {
            require_exists(&data, "--data")?;
            let manifest = read_manifest(&data)?;
            let images = load_training_images(&data, &manifest, contaminated)?;
            let defaults = TrainConfig::default();
            let optimizer = match momentum {
                Some(0.0) => Optimizer::Sgd,
                Some(beta) => Optimizer::Momentum { beta },
                None => defaults.optimizer,
            };
            let cfg = TrainConfig {
                learning_rate: lr.unwrap_or(defaults.learning_rate),
                epochs: epochs.unwrap_or(defaults.epochs),
                batch_size: batch_size.unwrap_or(defaults.batch_size),
                seed: derive_seed(seed, 0, 0),
                optimizer,
                ..defaults
            };
            let pixels = manifest.width * manifest.height;
            let model = FlowModel::new(pixels, &hidden, flowlens::flow::DEFAULT_TIME_PAIRS, derive_seed(seed, 1, 0))?;
            let source = SyntheticLesionPairs {
                images,
                lesion: manifest.params.lesion.clone(),
                seed: derive_seed(seed, 2, 0),
            };
            let outcome = train_with(model, &source, &cfg)?;
            let out = out.unwrap_or_else(|| data.join("model.aflw"));
            save_model(&out, &outcome.model)?;
            if let Some(path) = loss_out {
                write_file(&path, |w| {
                    writeln!(w, "epoch,loss")?;
                    for (i, l) in outcome.loss_history.iter().enumerate() {
                        writeln!(w, "{i},{l}")?;
                    }
                    Ok(())
                })?;
            }
            match (outcome.loss_history.first(), outcome.loss_history.last()) {
                (Some(a), Some(b)) => println!("trained {} epochs, loss {a:.4} -> {b:.4}; saved {}", cfg.epochs, out.display()),
                _ => println!("no epochs run; saved {}", out.display()),
            }
            Ok(())
        }
        Command::Reconstruct {
            model,
            data,
            steps,
            out,
            include_train,
        } => {
            require_exists(&model, "--model")?;
            require_exists(&data, "--data")?;
            let model = load_model(&model)?;
            let manifest = read_manifest(&data)?;
            let cfg = TransportConfig { steps };
            create_dir(&out)?;
            let mut index = Vec::new();
            for e in &manifest.subjects {
                if e.split == Split::Train && !include_train {
                    continue;
                }
                let image = read_image(data.join(&e.image))?;
                let map = score_image(&model, &image, &cfg)?;
                write_grid(map_path(&out, &e.id), &map.into())?;
                index.push(MapIndexRow {
                    subject_id: e.id.clone(),
                    split: e.split,
                    kind: e.kind,
                });
            }
            write_map_index(&out, &index)?;
            println!("wrote {} anomaly maps to {}", index.len(), out.display());
            Ok(())
        }
        Command::EvaluateSeg {
            maps,
            gt,
            threshold,
            overlap,
            out,
        } => {
            require_exists(&maps, "--maps")?;
            require_exists(&gt, "--gt")?;
            let gt_dir = if gt.join("masks").is_dir() { gt.join("masks") } else { gt };
            let index = read_index_or_scan(&maps)?;
            let load = |split: Option<Split>| -> CliResult<Vec<(String, AnomalyMap, BinaryMask)>> {
                let mut items = Vec::new();
                for row in index.iter().filter(|r| split.is_none_or(|s| r.split == s)) {
                    let gt_path = gt_dir.join(format!("{}.agrd", row.subject_id));
                    if !gt_path.exists() {
                        continue;
                    }
                    items.push((
                        row.subject_id.clone(),
                        read_anomaly_map(map_path(&maps, &row.subject_id))?,
                        read_mask(gt_path)?,
                    ));
                }
                Ok(items)
            };
            let has_splits = index.iter().any(|r| r.split != Split::Train);
            let eval_split = has_splits.then_some(Split::Test);
            let t = if threshold == "auto" {
                if !has_splits {
                    return Err(usage("--threshold auto needs a map directory written by `reconstruct`"));
                }
                let val: Vec<_> = load(Some(Split::Val))?
                    .into_iter()
                    .filter(|(_, _, g)| !g.is_empty())
                    .collect();
                if val.is_empty() {
                    return Err(usage("--threshold auto: no validation subject has a lesion mask"));
                }
                let (m, g): (Vec<_>, Vec<_>) = val.into_iter().map(|(_, m, g)| (m, g)).unzip();
                select_threshold(&m, &g, &default_threshold_grid())?
            } else {
                threshold
                    .parse::<f64>()
                    .map_err(|_| usage(format!("--threshold: expected a number or `auto`, got `{threshold}`")))?
            };
            let items = load(eval_split)?;
            let refs: Vec<(String, &AnomalyMap, &BinaryMask)> =
                items.iter().map(|(id, m, g)| (id.clone(), m, g)).collect();
            let report = evaluate_segmentation(&refs, t, overlap)?;
            write_file(&out, |w| report.write_subjects(w))?;
            write_file(&sibling(&out, "summary"), |w| report.write_summary(w))?;
            println!("threshold {t:.3}");
            println!("{:<6}{:>4}{:>8}{:>10}{:>10}{:>8}", "group", "n", "dice", "hd95", "asd", "f1");
            for g in &report.groups {
                let f = |v: Option<f64>| v.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
                println!(
                    "{:<6}{:>4}{:>8.3}{:>10}{:>10}{:>8.3}",
                    g.group, g.n, g.dice, f(g.hd95), f(g.asd), g.f1.f1
                );
            }
            Ok(())
        }
        Command::EvaluateFroc {
            maps,
            annotations,
            thresholds,
            levels,
            filter,
            tolerance,
            out,
        } => {
            require_exists(&maps, "--maps")?;
            require_exists(&annotations, "--annotations")?;
            let index = read_index_or_scan(&maps)?;
            let points = read_annotations(&annotations)?;
            let has_splits = index.iter().any(|r| r.split != Split::Train);
            let mut resolved = Vec::new();
            for t in &thresholds {
                if t == "auto" {
                    let normal: Vec<AnomalyMap> = index
                        .iter()
                        .filter(|r| r.split == Split::Val && r.kind == SubjectKind::Normal)
                        .map(|r| read_anomaly_map(map_path(&maps, &r.subject_id)))
                        .collect::<Result<_, _>>()?;
                    if normal.is_empty() {
                        return Err(usage("threshold `auto` needs validation normal maps listed in index.csv"));
                    }
                    resolved.push(calibrate_threshold(&normal)?);
                } else {
                    resolved.push(
                        t.parse::<f64>()
                            .map_err(|_| usage(format!("--thresholds: `{t}` is not a number or `auto`")))?,
                    );
                }
            }
            let rows: Vec<&MapIndexRow> = index
                .iter()
                .filter(|r| !has_splits || r.split == Split::Test)
                .collect();
            let loaded: Vec<AnomalyMap> = rows
                .iter()
                .map(|r| read_anomaly_map(map_path(&maps, &r.subject_id)))
                .collect::<Result<_, _>>()?;
            let empty = Vec::new();
            let inputs: Vec<DetectionInput> = rows
                .iter()
                .zip(&loaded)
                .map(|(r, m)| DetectionInput {
                    subject_id: &r.subject_id,
                    map: m,
                    points: points.get(&r.subject_id).unwrap_or(&empty),
                })
                .collect();
            let cfg = DetectionConfig {
                binarize_thresholds: resolved,
                match_tolerance: tolerance,
                fppi_levels: levels,
            };
            let table = evaluate_detection(&inputs, &cfg, &filter)?;
            write_file(&out, |w| table.write_scores(w))?;
            write_file(&sibling(&out, "curves"), |w| table.write_curves(w))?;
            for r in &table.rows {
                println!("T={:.3} {:<10} FROC {:.3}", r.threshold, r.filter.as_str(), r.score);
            }
            Ok(())
        }
        Command::MergeAnnotations { a, b, radius, out } => {
            require_exists(&a, "--a")?;
            require_exists(&b, "--b")?;
            let merged = merge_annotation_sets(&read_annotations(&a)?, &read_annotations(&b)?, radius)?;
            write_annotations(&out, &merged)?;
            println!(
                "merged {} points over {} subjects into {}",
                merged.values().map(Vec::len).sum::<usize>(),
                merged.len(),
                out.display()
            );
            Ok(())
        }
        Command::Report { a, b, test, out } => {
            require_exists(&a, "--a")?;
            require_exists(&b, "--b")?;
            let rows = compare_subject_rows(&read_subject_rows(&a)?, &read_subject_rows(&b)?, &test)?;
            let out = out.unwrap_or_else(|| a.with_file_name("comparison.csv"));
            let fresh = fs::metadata(&out).map(|m| m.len() == 0).unwrap_or(true);
            let mut buf = Vec::new();
            write_comparison(&mut buf, &a.display().to_string(), &b.display().to_string(), &rows, fresh)
                .map_err(|e| Error::Io { path: out.clone(), source: e })?;
            let mut file = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&out)
                .map_err(|e| Error::Io { path: out.clone(), source: e })?;
            file.write_all(&buf).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            for r in &rows {
                println!(
                    "{:<4} {} n={} mean {:.4} vs {:.4} p={:.4}{}",
                    r.group,
                    r.metric,
                    r.n,
                    r.mean_a,
                    r.mean_b,
                    r.test.p,
                    if r.test.p < 0.05 { " *" } else { "" }
                );
            }
            Ok(())
        }
        Command::Run {
            config,
            seed,
            out,
            print_default,
        } => {
            if print_default {
                println!("{}", serde_json::to_string_pretty(&ExperimentConfig::default()).expect("config serialises"));
                return Ok(());
            }
            let mut cfg = match config {
                Some(path) => {
                    require_exists(&path, "--config")?;
                    ExperimentConfig::read(&path)?
                }
                None => ExperimentConfig::default(),
            };
            if let Some(seed) = seed {
                cfg = cfg.with_seed(seed);
            }
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            let report = run_experiment(&cfg)?;
            println!("experiment written to {}", report.output_dir.display());
            Ok(())
        }
    }
}

/// `index.csv` if present, otherwise every `.agrd` file as an unsplit map.
fn read_index_or_scan(maps: &Path) -> CliResult<Vec<MapIndexRow>> {
    if maps.join(MAP_INDEX).exists() {
        return Ok(read_map_index(maps)?);
    }
    let entries = fs::read_dir(maps).map_err(|e| Error::Io { path: maps.into(), source: e })?;
    let mut ids: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            (p.extension().and_then(|x| x.to_str()) == Some("agrd"))
                .then(|| p.file_stem().and_then(|s| s.to_str()).map(str::to_string))
                .flatten()
        })
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(usage(format!("--maps: no .agrd files in `{}`", maps.display())));
    }
    Ok(ids
        .into_iter()
        .map(|subject_id| MapIndexRow {
            subject_id,
            split: Split::Train,
            kind: SubjectKind::Healthy,
        })
        .collect())
}
