//! Renders a healthy phantom, a lesioned copy and each subtle abnormality as
//! ASCII art.

use flowlens::phantom::{gen_healthy, inject_lesion, inject_subtle, LesionParams, PhantomParams, SubtleKind, SubtleParams};
use flowlens::Image2D;

fn show(title: &str, img: &Image2D) {
    const RAMP: &[u8] = b" .:-=+*#%@";
    println!("{title}");
    let g = img.geometry();
    for y in 0..g.height() {
        let row: String = (0..g.width())
            .map(|x| {
                let v = ((img.get(x, y) + 2.0) / 5.0).clamp(0.0, 0.999);
                RAMP[(v * RAMP.len() as f64) as usize] as char
            })
            .collect();
        println!("  {row}");
    }
}

fn main() -> flowlens::Result<()> {
    let phantom = gen_healthy(&PhantomParams::default().with_seed(7))?;
    show("healthy", &phantom.image);

    let lesioned = inject_lesion(&phantom.image, &phantom.brain, &LesionParams::default(), 1)?;
    show(&format!("lesioned ({} blobs, {} px)", lesioned.blobs.len(), lesioned.mask.area()), &lesioned.image);

    for kind in SubtleKind::ALL {
        let s = inject_subtle(&phantom.image, &phantom, &SubtleParams::new(kind), 3)?;
        show(
            &format!(
                "{kind}: {} px altered, mean |change| {:.3}, click at ({:.0}, {:.0})",
                s.region.area(),
                s.mean_abs_change(&phantom.image),
                s.annotation.x,
                s.annotation.y
            ),
            &s.image,
        );
    }
    Ok(())
}
