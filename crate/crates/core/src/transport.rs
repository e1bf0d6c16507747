//! Pseudo-healthy reconstruction by integrating the learned field from `t = 0`
//! to `t = 1`, and the resulting anomaly maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::grid::{AnomalyMap, Image2D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransportConfig {
    /// Explicit Euler steps on `[0, 1]`.
    pub steps: usize,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self { steps: 5 }
    }
}

/// Euler integration `x ← x + Δt · v(x, t_k)` with `t_k = k / steps`.
pub fn reconstruct(model: &FlowModel, image: &Image2D, config: &TransportConfig) -> Result<Image2D> {
    if config.steps == 0 {
        return Err(Error::Param("transport needs at least one step".into()));
    }
    if image.geometry().len() != model.pixels() {
        return Err(Error::Shape(format!(
            "image has {} pixels, model expects {}",
            image.geometry().len(),
            model.pixels()
        )));
    }
    let dt = 1.0 / config.steps as f64;
    let mut x = image.pixels().to_vec();
    for k in 0..config.steps {
        let t = k as f64 * dt;
        let v = model
            .forward(&x, t)
            .map_err(|e| Error::Numeric(format!("transport step {k}: {e}")))?;
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi += dt * vi;
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("transport step {k}: pixel {i} is not finite")));
        }
    }
    Image2D::new(*image.geometry(), x)
}

/// Pixel-wise `|input - reconstruction|`.
pub fn anomaly_map(input: &Image2D, reconstruction: &Image2D) -> Result<AnomalyMap> {
    input
        .geometry()
        .ensure_same(reconstruction.geometry(), "anomaly map")?;
    let scores = input
        .pixels()
        .iter()
        .zip(reconstruction.pixels())
        .map(|(a, b)| (a - b).abs())
        .collect();
    AnomalyMap::new(*input.geometry(), scores)
}

/// Reconstruction followed by the anomaly map.
pub fn score_image(model: &FlowModel, image: &Image2D, config: &TransportConfig) -> Result<AnomalyMap> {
    let recon = reconstruct(model, image, config)?;
    anomaly_map(image, &recon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Geometry;

    fn img(values: Vec<f64>) -> Image2D {
        Image2D::new(Geometry::square(2).unwrap(), values).unwrap()
    }

    #[test]
    fn zero_field_reconstructs_identity() {
        let m = FlowModel::zeros(4, &[3], 2).unwrap();
        let x = img(vec![0.5, -1.0, 2.0, 0.0]);
        let r = reconstruct(&m, &x, &TransportConfig::default()).unwrap();
        assert_eq!(r, x);
        assert_eq!(anomaly_map(&x, &r).unwrap().scores(), &[0.0; 4]);
    }

    #[test]
    fn constant_bias_field_moves_by_bias() {
        // widths [4, 1, 4]: zero weights, output bias 0.25 everywhere.
        let mut m = FlowModel::zeros(4, &[1], 0).unwrap();
        let n = m.num_params();
        for p in &mut m.params_mut()[n - 4..] {
            *p = 0.25;
        }
        let x = img(vec![0.0; 4]);
        let r = reconstruct(&m, &x, &TransportConfig { steps: 4 }).unwrap();
        for v in r.pixels() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let m = FlowModel::zeros(9, &[3], 1).unwrap();
        let x = img(vec![0.0; 4]);
        assert!(matches!(
            reconstruct(&m, &x, &TransportConfig::default()),
            Err(Error::Shape(_))
        ));
        let other = Image2D::zeros(Geometry::square(3).unwrap());
        assert!(anomaly_map(&x, &other).is_err());
    }
}
