//! Dice, HD95, ASD and lesion-wise F1 for a prediction against a reference.

use flowlens::components::label;
use flowlens::segmetrics::{dice, lesion_f1, surface_distances, F1_OVERLAP};
use flowlens::{BinaryMask, Geometry};

fn disk(cx: f64, cy: f64, r: f64) -> impl Fn(usize, usize) -> bool {
    move |x, y| (x as f64 - cx).hypot(y as f64 - cy) <= r
}

fn main() -> flowlens::Result<()> {
    let g = Geometry::new(24, 24, 1.0)?;
    let (a, b) = (disk(6.0, 6.0, 3.0), disk(17.0, 15.0, 2.5));
    let gt = BinaryMask::from_fn(g, |x, y| a(x, y) || b(x, y));

    // Shifted copy of the first lesion, misses the second, adds a spurious blob.
    let (a2, spur) = (disk(7.0, 6.0, 3.0), disk(3.0, 20.0, 1.0));
    let pred = BinaryMask::from_fn(g, |x, y| a2(x, y) || spur(x, y));

    println!("reference components  {}", label(&gt).len());
    println!("predicted components  {}", label(&pred).len());
    println!("dice                  {:.4}", dice(&pred, &gt)?);
    match surface_distances(&pred, &gt)? {
        Some(s) => println!("hd95 / asd            {:.3} / {:.3}", s.hd95, s.asd),
        None => println!("hd95 / asd            undefined"),
    }
    let f1 = lesion_f1(&pred, &gt, F1_OVERLAP)?;
    println!("lesion F1             {:.3} (tp {}, fp {}, fn {})", f1.f1, f1.tp, f1.fp, f1.fn_);
    Ok(())
}
