//! Merges the clicks of two raters: close same-label pairs collapse to their
//! midpoint, everything else is kept.

use flowlens::annotations::{format_annotations, merge_raters, Label, PointAnnotation, SubjectAnnotations};
use flowlens::MERGE_RADIUS;

fn main() -> flowlens::Result<()> {
    let a = SubjectAnnotations {
        subject_id: "sub-0001".into(),
        points: vec![
            PointAnnotation::new(10.0, 10.0, Label::Lesion).with_rater("a"),
            PointAnnotation::new(20.0, 5.0, Label::NonLesional).with_rater("a"),
        ],
    };
    let b = SubjectAnnotations {
        subject_id: "sub-0001".into(),
        points: vec![
            PointAnnotation::new(12.0, 11.0, Label::Lesion).with_rater("b"),
            // Close to a's non-lesional click but labelled differently: kept apart.
            PointAnnotation::new(21.0, 5.0, Label::Lesion).with_rater("b"),
            PointAnnotation::new(2.0, 30.0, Label::NonLesional).with_rater("b"),
        ],
    };
    let merged = merge_raters(&a, &b, MERGE_RADIUS)?;
    println!("{} + {} clicks -> {}", a.points.len(), b.points.len(), merged.points.len());

    let set = [(merged.subject_id.clone(), merged.points)].into_iter().collect();
    format_annotations(std::io::stdout(), &set).expect("stdout");
    Ok(())
}
