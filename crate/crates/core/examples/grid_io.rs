//! Writes the three grid kinds to AGRD files and reads them back.

use flowlens::agrd::{read_anomaly_map, read_grid, read_image, read_mask, write_grid};
use flowlens::{AnomalyMap, BinaryMask, Geometry, Image2D};

fn main() -> flowlens::Result<()> {
    let dir = std::env::temp_dir().join("flowlens-grid-io");
    std::fs::create_dir_all(&dir).expect("temp dir");
    let g = Geometry::new(6, 4, 0.5)?;

    let image = Image2D::from_fn(g, |x, y| x as f64 - 0.5 * y as f64)?;
    let mask = BinaryMask::from_fn(g, |x, y| x > 1 && y < 3);
    let map = AnomalyMap::new(g, image.pixels().iter().map(|v| v.abs()).collect())?;

    write_grid(dir.join("image.agrd"), &image.clone().into())?;
    write_grid(dir.join("mask.agrd"), &mask.clone().into())?;
    write_grid(dir.join("map.agrd"), &map.clone().into())?;

    assert_eq!(read_image(dir.join("image.agrd"))?, image);
    assert_eq!(read_mask(dir.join("mask.agrd"))?, mask);
    assert_eq!(read_anomaly_map(dir.join("map.agrd"))?, map);

    for name in ["image", "mask", "map"] {
        let path = dir.join(format!("{name}.agrd"));
        let grid = read_grid(&path)?;
        let bytes = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
        println!("{name:>5}: {} {}x{} spacing {} ({bytes} bytes)", grid.kind_name(), g.width(), g.height(), g.spacing());
    }

    // Reading with the wrong kind is a format error naming the file.
    match read_mask(dir.join("image.agrd")) {
        Err(e) => println!("expected error: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
