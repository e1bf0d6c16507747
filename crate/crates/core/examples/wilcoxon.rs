//! Paired signed-rank test on per-subject Dice of two hypothetical models.

use flowlens::stats::wilcoxon_signed_rank;

fn main() -> flowlens::Result<()> {
    let clean = [0.71, 0.64, 0.80, 0.55, 0.62, 0.77, 0.69, 0.58, 0.74, 0.66];
    let contaminated = [0.65, 0.60, 0.78, 0.55, 0.57, 0.70, 0.70, 0.51, 0.69, 0.61];
    let r = wilcoxon_signed_rank(&clean, &contaminated)?;
    println!(
        "W+ {} W- {} n {} p {:.4} ({:?})",
        r.w_plus, r.w_minus, r.n_effective, r.p, r.method
    );

    // Above twenty non-zero pairs the normal approximation takes over.
    let a: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin() + 0.2).collect();
    let b: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).map(|v| v + if v > 0.0 { 0.3 } else { -0.1 }).collect();
    let r = wilcoxon_signed_rank(&a, &b)?;
    println!("n {} p {:.4} ({:?})", r.n_effective, r.p, r.method);
    Ok(())
}
