//! Runs the whole clean-vs-contaminated comparison with a reduced budget and
//! prints where the artefacts went.
//!
//! Pass `--full` for the default configuration (several minutes).

use flowlens::detection::LabelFilter;
use flowlens::experiment::{run_experiment, ExperimentConfig, Variant};

fn main() -> flowlens::Result<()> {
    let full = std::env::args().any(|a| a == "--full");
    let mut cfg = ExperimentConfig::default().with_seed(0);
    cfg.output_dir = std::env::temp_dir().join("flowlens-experiment");
    if !full {
        cfg.dataset.n_subjects = 60;
        cfg.train.clean.epochs = 80;
        cfg.train.contaminated.epochs = 80;
    }
    let report = run_experiment(&cfg)?;

    for v in Variant::BOTH {
        let r = report.variant(v);
        let nonlesion = r
            .detection
            .row(r.calibrated_threshold, LabelFilter::NonLesionalOnly)
            .map(|row| row.score);
        println!(
            "{:<13} final loss {:.4}  T {:.4}  seg threshold {:.2}  non-lesional FROC {:?}",
            v.as_str(),
            r.loss_history.last().copied().unwrap_or(f64::NAN),
            r.calibrated_threshold,
            r.seg_threshold,
            nonlesion
        );
    }
    println!("artefacts in {}", report.output_dir.display());
    println!("{}", std::fs::read_to_string(report.output_dir.join("summary.md")).unwrap_or_default());
    Ok(())
}
