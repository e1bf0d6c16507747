//! Thresholds two anomaly maps, matches components to clicks and prints the
//! FROC curve with its score.

use flowlens::annotations::{Label, PointAnnotation};
use flowlens::detection::{
    calibrate_threshold, connected_components, froc_curve, froc_score, match_components, ImageDetections,
};
use flowlens::{AnomalyMap, Geometry, MATCH_TOLERANCE};

fn bump(g: Geometry, peaks: &[(f64, f64, f64)]) -> flowlens::Result<AnomalyMap> {
    let scores = (0..g.len())
        .map(|i| {
            let (x, y) = g.coords(i);
            peaks
                .iter()
                .map(|&(cx, cy, h)| h * (-((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)) / 4.0).exp())
                .sum::<f64>()
                + 0.01
        })
        .collect();
    AnomalyMap::new(g, scores)
}

fn main() -> flowlens::Result<()> {
    let g = Geometry::square(32)?;
    let normal = bump(g, &[(16.0, 16.0, 0.05)])?;
    let threshold = calibrate_threshold(&[normal])?;
    println!("calibrated threshold {threshold:.4}");

    let maps = [
        bump(g, &[(8.0, 8.0, 0.9), (24.0, 20.0, 0.4)])?,
        bump(g, &[(12.0, 25.0, 0.7), (4.0, 4.0, 0.3)])?,
    ];
    let clicks = [
        vec![PointAnnotation::new(8.0, 9.0, Label::Lesion)],
        vec![
            PointAnnotation::new(12.0, 24.0, Label::NonLesional),
            PointAnnotation::new(28.0, 28.0, Label::Lesion),
        ],
    ];

    let mut images = Vec::new();
    for (map, points) in maps.iter().zip(&clicks) {
        let components = connected_components(&map.binarize(threshold), map)?;
        let m = match_components(&components, points, MATCH_TOLERANCE)?;
        println!(
            "{} components, {} false positives, {}/{} clicks found",
            components.len(),
            m.false_positives(),
            m.detected(),
            points.len()
        );
        images.push(ImageDetections {
            components,
            points: points.clone(),
        });
    }

    let curve = froc_curve(&images, MATCH_TOLERANCE)?;
    for p in &curve.points {
        println!("fppi {:.2}  sensitivity {:.2}", p.fppi, p.sensitivity);
    }
    println!("FROC score {:.3}", froc_score(&curve, &[0.25, 0.5, 1.0, 1.5])?);
    Ok(())
}
