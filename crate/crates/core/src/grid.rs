//! Rectangular scalar grids shared by every stage of the pipeline.
//!
//! All grids are row-major with the origin at the top-left corner: `x` is the
//! column index and `y` the row index. `spacing` is the physical pixel size in
//! millimetres and only enters distance metrics.

use crate::error::{Error, Result};

/// Width, height and pixel spacing of a grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    width: usize,
    height: usize,
    spacing: f64,
}

impl Geometry {
    pub fn new(width: usize, height: usize, spacing: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Param(format!(
                "grid dimensions must be positive, got {width}x{height}"
            )));
        }
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(Error::Param(format!("spacing must be > 0, got {spacing}")));
        }
        if width > u32::MAX as usize || height > u32::MAX as usize {
            return Err(Error::Param("grid dimensions exceed u32".into()));
        }
        Ok(Self {
            width,
            height,
            spacing,
        })
    }

    /// Square grid with 1 mm pixels.
    pub fn square(side: usize) -> Result<Self> {
        Self::new(side, side, 1.0)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y * self.width + x
    }

    #[inline]
    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index % self.width, index / self.width)
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
    }

    /// Returns an error unless `other` has exactly the same geometry.
    pub fn ensure_same(&self, other: &Geometry, what: &str) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {}x{} @ {} mm vs {}x{} @ {} mm",
                self.width, self.height, self.spacing, other.width, other.height, other.spacing
            )))
        }
    }
}

/// Z-score normalised intensity image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    geometry: Geometry,
    pixels: Vec<f64>,
}

impl Image2D {
    pub fn new(geometry: Geometry, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != geometry.len() {
            return Err(Error::Shape(format!(
                "image expects {} pixels, got {}",
                geometry.len(),
                pixels.len()
            )));
        }
        if let Some(i) = pixels.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite pixel at index {i}")));
        }
        Ok(Self { geometry, pixels })
    }

    pub fn zeros(geometry: Geometry) -> Self {
        Self {
            geometry,
            pixels: vec![0.0; geometry.len()],
        }
    }

    pub fn from_fn(geometry: Geometry, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut pixels = Vec::with_capacity(geometry.len());
        for y in 0..geometry.height() {
            for x in 0..geometry.width() {
                pixels.push(f(x, y));
            }
        }
        Self::new(geometry, pixels)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[self.geometry.index(x, y)]
    }
}

/// Boolean label grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    geometry: Geometry,
    pixels: Vec<bool>,
}

// Geometry holds an f64 but never NaN (validated), so Eq is sound.
impl Eq for Geometry {}

impl BinaryMask {
    pub fn new(geometry: Geometry, pixels: Vec<bool>) -> Result<Self> {
        if pixels.len() != geometry.len() {
            return Err(Error::Shape(format!(
                "mask expects {} pixels, got {}",
                geometry.len(),
                pixels.len()
            )));
        }
        Ok(Self { geometry, pixels })
    }

    pub fn empty(geometry: Geometry) -> Self {
        Self {
            geometry,
            pixels: vec![false; geometry.len()],
        }
    }

    pub fn from_fn(geometry: Geometry, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut pixels = Vec::with_capacity(geometry.len());
        for y in 0..geometry.height() {
            for x in 0..geometry.width() {
                pixels.push(f(x, y));
            }
        }
        Self { geometry, pixels }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn pixels(&self) -> &[bool] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.pixels[self.geometry.index(x, y)]
    }

    /// Number of true pixels.
    pub fn area(&self) -> usize {
        self.pixels.iter().filter(|&&p| p).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.pixels.iter().any(|&p| p)
    }

    pub fn intersection_area(&self, other: &BinaryMask) -> Result<usize> {
        self.geometry.ensure_same(&other.geometry, "mask intersection")?;
        Ok(self
            .pixels
            .iter()
            .zip(&other.pixels)
            .filter(|(a, b)| **a && **b)
            .count())
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.geometry.ensure_same(&other.geometry, "mask union")?;
        let pixels = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| *a || *b)
            .collect();
        Ok(BinaryMask {
            geometry: self.geometry,
            pixels,
        })
    }

    /// Centroid `(x, y)` of the true pixels, `None` when empty.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for (i, _) in self.pixels.iter().enumerate().filter(|(_, &p)| p) {
            let (x, y) = self.geometry.coords(i);
            sx += x as f64;
            sy += y as f64;
            n += 1;
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }
}

/// Non-negative per-pixel anomaly scores.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    geometry: Geometry,
    scores: Vec<f64>,
}

impl AnomalyMap {
    pub fn new(geometry: Geometry, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != geometry.len() {
            return Err(Error::Shape(format!(
                "anomaly map expects {} scores, got {}",
                geometry.len(),
                scores.len()
            )));
        }
        if let Some(i) = scores.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Numeric(format!(
                "anomaly score at index {i} is negative or non-finite"
            )));
        }
        Ok(Self { geometry, scores })
    }

    pub fn zeros(geometry: Geometry) -> Self {
        Self {
            geometry,
            scores: vec![0.0; geometry.len()],
        }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.scores[self.geometry.index(x, y)]
    }

    /// Pixels scoring at or above `threshold`.
    pub fn binarize(&self, threshold: f64) -> BinaryMask {
        BinaryMask {
            geometry: self.geometry,
            pixels: self.scores.iter().map(|&s| s >= threshold).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.scores.iter().sum::<f64>() / self.scores.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.scores.iter().copied().fold(0.0, f64::max)
    }
}

/// Any of the three grid kinds, as stored in an AGRD1 file.
#[derive(Debug, Clone, PartialEq)]
pub enum Grid {
    Image(Image2D),
    Mask(BinaryMask),
    Anomaly(AnomalyMap),
}

impl AsRef<[f64]> for AnomalyMap {
    fn as_ref(&self) -> &[f64] {
        &self.scores
    }
}

impl Grid {
    pub fn geometry(&self) -> &Geometry {
        match self {
            Grid::Image(g) => g.geometry(),
            Grid::Mask(g) => g.geometry(),
            Grid::Anomaly(g) => g.geometry(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Grid::Image(_) => "image",
            Grid::Mask(_) => "mask",
            Grid::Anomaly(_) => "anomaly map",
        }
    }
}

impl From<Image2D> for Grid {
    fn from(g: Image2D) -> Self {
        Grid::Image(g)
    }
}

impl From<BinaryMask> for Grid {
    fn from(g: BinaryMask) -> Self {
        Grid::Mask(g)
    }
}

impl From<AnomalyMap> for Grid {
    fn from(g: AnomalyMap) -> Self {
        Grid::Anomaly(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_geometry() {
        assert!(Geometry::new(0, 4, 1.0).is_err());
        assert!(Geometry::new(4, 4, 0.0).is_err());
        assert!(Geometry::new(4, 4, f64::NAN).is_err());
    }

    #[test]
    fn image_rejects_non_finite_and_wrong_length() {
        let g = Geometry::square(2).unwrap();
        assert!(Image2D::new(g, vec![0.0; 3]).is_err());
        assert!(Image2D::new(g, vec![0.0, 1.0, f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn anomaly_map_rejects_negative() {
        let g = Geometry::square(1).unwrap();
        assert!(AnomalyMap::new(g, vec![-0.1]).is_err());
    }

    #[test]
    fn mask_area_counts_true_pixels() {
        let g = Geometry::new(3, 2, 1.0).unwrap();
        let m = BinaryMask::new(g, vec![true, false, true, false, false, true]).unwrap();
        assert_eq!(m.area(), 3);
        assert_eq!(m.centroid(), Some((4.0 / 3.0, 1.0 / 3.0)));
    }

    #[test]
    fn cross_grid_ops_reject_mismatch() {
        let a = BinaryMask::empty(Geometry::square(2).unwrap());
        let b = BinaryMask::empty(Geometry::new(2, 2, 0.5).unwrap());
        assert!(matches!(a.intersection_area(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn binarize_is_inclusive() {
        let g = Geometry::new(3, 1, 1.0).unwrap();
        let m = AnomalyMap::new(g, vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(m.binarize(0.5).pixels(), &[false, true, true]);
    }
}
