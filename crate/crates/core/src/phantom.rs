//! Synthetic brain-like phantoms, focal lesions and subtle non-lesional
//! abnormalities, plus train/validation/test dataset assembly.
//!
//! A phantom is a set of nested axis-aligned ellipses (brain outline, a
//! brighter "white matter" core, a dark ventricle) with additive Gaussian
//! noise. Brain pixels are z-scored; the background is exactly zero.
//!
//! Lesions are soft-edged discs of strong intensity change placed fully
//! inside the brain. Subtle abnormalities (ventricle enlargement, a widened
//! sulcus, a periventricular hyposignal) change intensity by a fixed
//! amplitude that must stay below the weakest lesion contrast.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::annotations::{merge_raters, Label, PointAnnotation, SubjectAnnotations};
use crate::error::{Error, Result};
use crate::grid::{BinaryMask, Geometry, Image2D};
use crate::rng::{derive_seed, rng, Rng};

pub type Interval = (f64, f64);

fn uniform(r: &mut Rng, (lo, hi): Interval) -> f64 {
    lo + (hi - lo) * r.random::<f64>()
}

fn check_interval(name: &str, (lo, hi): Interval) -> Result<()> {
    if lo.is_finite() && hi.is_finite() && lo <= hi {
        Ok(())
    } else {
        Err(Error::Param(format!("{name}: invalid interval [{lo}, {hi}]")))
    }
}

/// Axis-aligned ellipse in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub ax: f64,
    pub ay: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let u = (x - self.cx) / self.ax;
        let v = (y - self.cy) / self.ay;
        u * u + v * v <= 1.0
    }

    pub fn scaled(&self, factor: f64) -> Ellipse {
        Ellipse {
            ax: self.ax * factor,
            ay: self.ay * factor,
            ..*self
        }
    }

    /// Point on the outline at polar angle `theta`.
    pub fn boundary_point(&self, theta: f64) -> (f64, f64) {
        (self.cx + self.ax * theta.cos(), self.cy + self.ay * theta.sin())
    }

    fn validate(&self, geometry: &Geometry, name: &str) -> Result<()> {
        if !(self.ax > 0.0 && self.ay > 0.0) {
            return Err(Error::Param(format!("{name}: degenerate ellipse {self:?}")));
        }
        let fits = self.cx - self.ax >= -0.5
            && self.cy - self.ay >= -0.5
            && self.cx + self.ax <= geometry.width() as f64 - 0.5
            && self.cy + self.ay <= geometry.height() as f64 - 0.5;
        if !fits {
            return Err(Error::Param(format!("{name}: ellipse {self:?} leaves the grid")));
        }
        Ok(())
    }
}

/// Inner tissue ellipse drawn relative to the brain outline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TissueSpec {
    /// Semi-axes as a fraction of the brain semi-axes.
    pub scale: Interval,
    /// Raw intensity before z-scoring.
    pub intensity: Interval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub size: usize,
    pub spacing: f64,
    /// Brain semi-axes as a fraction of half the grid side.
    pub brain_axes: Interval,
    pub center_jitter: f64,
    pub brain_intensity: Interval,
    pub tissues: Vec<TissueSpec>,
    pub ventricle: TissueSpec,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            size: 32,
            spacing: 1.0,
            brain_axes: (0.72, 0.86),
            center_jitter: 1.0,
            brain_intensity: (0.9, 1.1),
            tissues: vec![TissueSpec {
                scale: (0.6, 0.72),
                intensity: (1.35, 1.5),
            }],
            ventricle: TissueSpec {
                scale: (0.2, 0.28),
                intensity: (0.2, 0.35),
            },
            noise_sigma: 0.03,
            seed: 0,
        }
    }
}

impl PhantomParams {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 4 {
            return Err(Error::Param(format!("phantom size must be >= 4, got {}", self.size)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Param(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        check_interval("brain_axes", self.brain_axes)?;
        check_interval("brain_intensity", self.brain_intensity)?;
        for t in self.tissues.iter().chain(std::iter::once(&self.ventricle)) {
            check_interval("tissue scale", t.scale)?;
            check_interval("tissue intensity", t.intensity)?;
        }
        Ok(())
    }
}

/// Drawn anatomy of one phantom, kept so later perturbations can refer to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anatomy {
    pub brain: Ellipse,
    pub tissues: Vec<(Ellipse, f64)>,
    pub ventricle: Ellipse,
    pub ventricle_intensity: f64,
}

/// A healthy phantom: the image plus its brain mask and anatomy.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub image: Image2D,
    pub brain: BinaryMask,
    pub anatomy: Anatomy,
}

/// Renders a healthy phantom. Deterministic in `params` (including the seed).
pub fn gen_healthy(params: &PhantomParams) -> Result<Phantom> {
    params.validate()?;
    let geometry = Geometry::new(params.size, params.size, params.spacing)?;
    let mut r = rng(params.seed);
    let half = params.size as f64 / 2.0;
    let mid = half - 0.5;

    let brain = Ellipse {
        cx: mid + params.center_jitter * (2.0 * r.random::<f64>() - 1.0),
        cy: mid + params.center_jitter * (2.0 * r.random::<f64>() - 1.0),
        ax: half * uniform(&mut r, params.brain_axes),
        ay: half * uniform(&mut r, params.brain_axes),
    };
    brain.validate(&geometry, "brain")?;
    let brain_level = uniform(&mut r, params.brain_intensity);

    let mut tissues = Vec::with_capacity(params.tissues.len());
    for spec in &params.tissues {
        let s = uniform(&mut r, spec.scale);
        let e = Ellipse {
            cx: brain.cx,
            cy: brain.cy,
            ax: brain.ax * s,
            ay: brain.ay * uniform(&mut r, spec.scale).max(s * 0.8),
        };
        e.validate(&geometry, "tissue")?;
        tissues.push((e, uniform(&mut r, spec.intensity)));
    }
    let vs = uniform(&mut r, params.ventricle.scale);
    let ventricle = Ellipse {
        cx: brain.cx + 0.5 * (2.0 * r.random::<f64>() - 1.0),
        cy: brain.cy + 0.5 * (2.0 * r.random::<f64>() - 1.0),
        ax: brain.ax * vs,
        ay: brain.ay * vs * 0.75,
    };
    ventricle.validate(&geometry, "ventricle")?;
    let ventricle_level = uniform(&mut r, params.ventricle.intensity);

    let brain_mask = BinaryMask::from_fn(geometry, |x, y| brain.contains(x as f64, y as f64));
    let mut raw = vec![0.0; geometry.len()];
    for (i, v) in raw.iter_mut().enumerate() {
        let (x, y) = geometry.coords(i);
        let (x, y) = (x as f64, y as f64);
        if !brain.contains(x, y) {
            continue;
        }
        let mut level = brain_level;
        for (e, t) in &tissues {
            if e.contains(x, y) {
                level = *t;
            }
        }
        if ventricle.contains(x, y) {
            level = ventricle_level;
        }
        let noise: f64 = StandardNormal.sample(&mut r);
        *v = level + params.noise_sigma * noise;
    }

    let (mean, std) = masked_mean_std(&raw, brain_mask.pixels());
    let scale = if std > 0.0 { 1.0 / std } else { 1.0 };
    let pixels: Vec<f64> = raw
        .iter()
        .zip(brain_mask.pixels())
        .map(|(&v, &inside)| if inside { (v - mean) * scale } else { 0.0 })
        .collect();
    let anatomy = Anatomy {
        brain,
        tissues: tissues
            .into_iter()
            .map(|(e, t)| (e, (t - mean) * scale))
            .collect(),
        ventricle,
        ventricle_intensity: (ventricle_level - mean) * scale,
    };
    Ok(Phantom {
        image: Image2D::new(geometry, pixels)?,
        brain: brain_mask,
        anatomy,
    })
}

fn masked_mean_std(values: &[f64], mask: &[bool]) -> (f64, f64) {
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let inside = || values.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v);
    let mean = inside().sum::<f64>() / n as f64;
    let var = inside().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionParams {
    /// Number of blobs, inclusive range.
    pub count: (usize, usize),
    /// Blob radius in pixels.
    pub radius: Interval,
    /// Magnitude of the intensity change at the blob core (z units).
    pub delta: Interval,
    /// Width of the linear edge fall-off in pixels.
    pub softness: f64,
    /// Probability that a blob is hypointense rather than hyperintense.
    pub hypo_probability: f64,
}

impl Default for LesionParams {
    fn default() -> Self {
        Self {
            count: (1, 2),
            radius: (1.5, 3.5),
            delta: (1.6, 2.6),
            softness: 1.0,
            hypo_probability: 0.5,
        }
    }
}

impl LesionParams {
    pub fn validate(&self) -> Result<()> {
        if self.count.0 > self.count.1 {
            return Err(Error::Param(format!("lesion count range {:?} is empty", self.count)));
        }
        check_interval("lesion radius", self.radius)?;
        check_interval("lesion delta", self.delta)?;
        if self.radius.0 < 1.0 {
            return Err(Error::Param(format!(
                "lesion radius must be >= 1 pixel, got {}",
                self.radius.0
            )));
        }
        if self.delta.0 < 0.0 {
            return Err(Error::Param("lesion delta magnitudes must be >= 0".into()));
        }
        if !(self.softness >= 0.0) {
            return Err(Error::Param(format!("softness must be >= 0, got {}", self.softness)));
        }
        if !(0.0..=1.0).contains(&self.hypo_probability) {
            return Err(Error::Param("hypo_probability must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LesionBlob {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    /// Signed intensity change at the core.
    pub delta: f64,
}

impl LesionBlob {
    /// Fraction of `delta` applied at distance `r` from the centre.
    fn weight(&self, r: f64, softness: f64) -> f64 {
        if softness == 0.0 {
            return if r <= self.radius { 1.0 } else { 0.0 };
        }
        ((self.radius - r) / softness + 0.5).clamp(0.0, 1.0)
    }

    fn support_radius(&self, softness: f64) -> f64 {
        self.radius + softness / 2.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LesionedImage {
    pub image: Image2D,
    pub mask: BinaryMask,
    pub blobs: Vec<LesionBlob>,
}

const PLACEMENT_ATTEMPTS: usize = 100;

/// Adds soft-edged lesion blobs inside the brain of `phantom`.
///
/// The returned mask holds exactly the pixels whose intensity changed by more
/// than half of the minimum configured delta.
pub fn inject_lesion(
    image: &Image2D,
    brain: &BinaryMask,
    params: &LesionParams,
    seed: u64,
) -> Result<LesionedImage> {
    params.validate()?;
    let geometry = *image.geometry();
    geometry.ensure_same(brain.geometry(), "lesion brain mask")?;
    let mut r = rng(seed);
    let count = r.random_range(params.count.0..=params.count.1);

    let brain_idx: Vec<usize> = (0..geometry.len()).filter(|&i| brain.pixels()[i]).collect();
    if brain_idx.is_empty() && count > 0 {
        return Err(Error::Generation("image has no brain pixels".into()));
    }

    let mut blobs = Vec::with_capacity(count);
    for _ in 0..count {
        let radius = uniform(&mut r, params.radius);
        let magnitude = uniform(&mut r, params.delta);
        let sign = if r.random::<f64>() < params.hypo_probability { -1.0 } else { 1.0 };
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let (bx, by) = geometry.coords(brain_idx[r.random_range(0..brain_idx.len())]);
            let blob = LesionBlob {
                cx: bx as f64 + r.random::<f64>() - 0.5,
                cy: by as f64 + r.random::<f64>() - 0.5,
                radius,
                delta: sign * magnitude,
            };
            if support_inside(&blob, params.softness, brain) {
                placed = Some(blob);
                break;
            }
        }
        match placed {
            Some(b) => blobs.push(b),
            None => {
                return Err(Error::Generation(format!(
                    "no in-brain placement for a radius {radius:.2} lesion after {PLACEMENT_ATTEMPTS} attempts"
                )))
            }
        }
    }

    let mut change = vec![0.0; geometry.len()];
    for blob in &blobs {
        let reach = blob.support_radius(params.softness);
        for_each_in_disc(&geometry, blob.cx, blob.cy, reach, |i, d| {
            change[i] += blob.delta * blob.weight(d, params.softness);
        });
    }
    let cutoff = params.delta.0 / 2.0;
    let mask_pixels: Vec<bool> = change.iter().map(|c| c.abs() > cutoff).collect();
    let pixels: Vec<f64> = image
        .pixels()
        .iter()
        .zip(&change)
        .map(|(v, c)| v + c)
        .collect();
    Ok(LesionedImage {
        image: Image2D::new(geometry, pixels)?,
        mask: BinaryMask::new(geometry, mask_pixels)?,
        blobs,
    })
}

fn support_inside(blob: &LesionBlob, softness: f64, brain: &BinaryMask) -> bool {
    let geometry = brain.geometry();
    let reach = blob.support_radius(softness);
    let mut ok = true;
    for_each_in_disc(geometry, blob.cx, blob.cy, reach, |i, d| {
        if blob.weight(d, softness) > 0.0 && !brain.pixels()[i] {
            ok = false;
        }
    });
    // The disc may also poke out of the grid entirely.
    let x0 = (blob.cx - reach).floor();
    let y0 = (blob.cy - reach).floor();
    let x1 = (blob.cx + reach).ceil();
    let y1 = (blob.cy + reach).ceil();
    for y in y0 as i64..=y1 as i64 {
        for x in x0 as i64..=x1 as i64 {
            if !geometry.contains(x, y) {
                let d = (x as f64 - blob.cx).hypot(y as f64 - blob.cy);
                if blob.weight(d, softness) > 0.0 {
                    ok = false;
                }
            }
        }
    }
    ok
}

/// Calls `f(index, distance)` for every grid pixel centre within `radius`.
fn for_each_in_disc(geometry: &Geometry, cx: f64, cy: f64, radius: f64, mut f: impl FnMut(usize, f64)) {
    let x0 = (cx - radius).floor().max(0.0) as usize;
    let y0 = (cy - radius).floor().max(0.0) as usize;
    let x1 = ((cx + radius).ceil() as i64).min(geometry.width() as i64 - 1);
    let y1 = ((cy + radius).ceil() as i64).min(geometry.height() as i64 - 1);
    if x1 < 0 || y1 < 0 {
        return;
    }
    for y in y0..=y1 as usize {
        for x in x0..=x1 as usize {
            let d = (x as f64 - cx).hypot(y as f64 - cy);
            if d <= radius {
                f(geometry.index(x, y), d);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubtleKind {
    VentricleEnlargement,
    SulcalWidening,
    PeriventricularHypo,
}

impl SubtleKind {
    pub const ALL: [SubtleKind; 3] = [
        SubtleKind::VentricleEnlargement,
        SubtleKind::SulcalWidening,
        SubtleKind::PeriventricularHypo,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SubtleKind::VentricleEnlargement => "ventricle_enlargement",
            SubtleKind::SulcalWidening => "sulcal_widening",
            SubtleKind::PeriventricularHypo => "periventricular_hypo",
        }
    }
}

impl fmt::Display for SubtleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SubtleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SubtleKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Param(format!("unknown subtle abnormality kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtleParams {
    pub kind: SubtleKind,
    /// Geometric magnitude: relative ventricle growth, or sulcus/hyposignal
    /// size in units of 2 and 3 pixels respectively.
    pub magnitude: Interval,
    /// Intensity decrease applied over the altered region (z units).
    pub amplitude: f64,
}

impl SubtleParams {
    pub fn new(kind: SubtleKind) -> Self {
        let magnitude = match kind {
            SubtleKind::VentricleEnlargement => (0.35, 0.6),
            SubtleKind::SulcalWidening => (0.5, 0.9),
            SubtleKind::PeriventricularHypo => (0.5, 0.8),
        };
        Self {
            kind,
            magnitude,
            amplitude: 0.9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_interval("subtle magnitude", self.magnitude)?;
        if self.magnitude.0 < 0.0 {
            return Err(Error::Param("subtle magnitude must be >= 0".into()));
        }
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return Err(Error::Param(format!("subtle amplitude must be >= 0, got {}", self.amplitude)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubtleAbnormality {
    pub image: Image2D,
    pub region: BinaryMask,
    pub annotation: PointAnnotation,
    pub kind: SubtleKind,
    pub magnitude: f64,
}

impl SubtleAbnormality {
    /// Mean absolute intensity change over the altered region (0 if empty).
    pub fn mean_abs_change(&self, original: &Image2D) -> f64 {
        let n = self.region.area();
        if n == 0 {
            return 0.0;
        }
        self.image
            .pixels()
            .iter()
            .zip(original.pixels())
            .zip(self.region.pixels())
            .filter(|(_, &m)| m)
            .map(|((a, b), _)| (a - b).abs())
            .sum::<f64>()
            / n as f64
    }
}

/// Adds one subtle abnormality with a magnitude drawn from `params`.
pub fn inject_subtle(
    image: &Image2D,
    phantom: &Phantom,
    params: &SubtleParams,
    seed: u64,
) -> Result<SubtleAbnormality> {
    params.validate()?;
    let mut r = rng(seed);
    let magnitude = uniform(&mut r, params.magnitude);
    let angle = r.random::<f64>() * std::f64::consts::TAU;
    inject_subtle_exact(image, phantom, params.kind, magnitude, params.amplitude, angle)
}

/// Adds a subtle abnormality of the given `kind` and `magnitude`.
///
/// `angle` places sulcal and periventricular changes around the brain and
/// ventricle. The annotation sits on the altered pixel closest to the region
/// centroid; an empty region (magnitude 0) is annotated at the ventricle
/// centre for ventricle enlargement and at the would-be site otherwise.
pub fn inject_subtle_exact(
    image: &Image2D,
    phantom: &Phantom,
    kind: SubtleKind,
    magnitude: f64,
    amplitude: f64,
    angle: f64,
) -> Result<SubtleAbnormality> {
    let geometry = *image.geometry();
    geometry.ensure_same(phantom.brain.geometry(), "subtle abnormality")?;
    if !(magnitude >= 0.0 && magnitude.is_finite()) {
        return Err(Error::Param(format!("subtle magnitude must be >= 0, got {magnitude}")));
    }
    let a = &phantom.anatomy;
    let brain = &phantom.brain;
    let at = |x: usize, y: usize| (x as f64, y as f64);

    let (region, site) = match kind {
        SubtleKind::VentricleEnlargement => {
            let grown = a.ventricle.scaled(1.0 + magnitude);
            let region = BinaryMask::from_fn(geometry, |x, y| {
                let (px, py) = at(x, y);
                brain.get(x, y) && grown.contains(px, py) && !a.ventricle.contains(px, py)
            });
            (region, (a.ventricle.cx, a.ventricle.cy))
        }
        SubtleKind::SulcalWidening => {
            let (ox, oy) = a.brain.boundary_point(angle);
            let (ix, iy) = (
                a.brain.cx + 0.55 * (ox - a.brain.cx),
                a.brain.cy + 0.55 * (oy - a.brain.cy),
            );
            let half_width = 2.0 * magnitude;
            let region = BinaryMask::from_fn(geometry, |x, y| {
                let (px, py) = at(x, y);
                brain.get(x, y) && segment_distance((px, py), (ix, iy), (ox, oy)) < half_width
            });
            (region, ((ix + ox) / 2.0, (iy + oy) / 2.0))
        }
        SubtleKind::PeriventricularHypo => {
            let (vx, vy) = a.ventricle.boundary_point(angle);
            let (dx, dy) = (vx - a.ventricle.cx, vy - a.ventricle.cy);
            let norm = dx.hypot(dy).max(1e-12);
            let (cx, cy) = (vx + 1.5 * dx / norm, vy + 1.5 * dy / norm);
            let radius = 3.0 * magnitude;
            let region = BinaryMask::from_fn(geometry, |x, y| {
                let (px, py) = at(x, y);
                brain.get(x, y)
                    && !a.ventricle.contains(px, py)
                    && (px - cx).hypot(py - cy) < radius
            });
            (region, (cx, cy))
        }
    };

    let pixels: Vec<f64> = image
        .pixels()
        .iter()
        .zip(region.pixels())
        .map(|(&v, &m)| if m { v - amplitude } else { v })
        .collect();

    let (ax, ay) = match region.centroid() {
        Some((mx, my)) => nearest_member(&region, mx, my),
        None => site,
    };
    let clamp = |v: f64, hi: usize| v.clamp(0.0, hi as f64 - 1.0);
    let annotation = PointAnnotation::new(
        clamp(ax, geometry.width()),
        clamp(ay, geometry.height()),
        Label::NonLesional,
    );
    Ok(SubtleAbnormality {
        image: Image2D::new(geometry, pixels)?,
        region,
        annotation,
        kind,
        magnitude,
    })
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p.0 - (a.0 + t * vx)).hypot(p.1 - (a.1 + t * vy))
}

fn nearest_member(mask: &BinaryMask, x: f64, y: f64) -> (f64, f64) {
    let g = mask.geometry();
    let mut best = (f64::INFINITY, (x, y));
    for (i, _) in mask.pixels().iter().enumerate().filter(|(_, &m)| m) {
        let (px, py) = g.coords(i);
        let d = (px as f64 - x).hypot(py as f64 - y);
        if d < best.0 {
            best = (d, (px as f64, py as f64));
        }
    }
    best.1
}

/// Role of a validation/test subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubjectKind {
    Healthy,
    Contaminated,
    Normal,
    Lesion,
    Subtle,
    LesionAndSubtle,
}

impl SubjectKind {
    /// Evaluation subjects cycle through these kinds by position in the split.
    pub const EVAL_CYCLE: [SubjectKind; 4] = [
        SubjectKind::Normal,
        SubjectKind::Lesion,
        SubjectKind::Subtle,
        SubjectKind::LesionAndSubtle,
    ];

    pub fn has_lesion(self) -> bool {
        matches!(self, SubjectKind::Lesion | SubjectKind::LesionAndSubtle)
    }

    pub fn has_subtle(self) -> bool {
        matches!(
            self,
            SubjectKind::Contaminated | SubjectKind::Subtle | SubjectKind::LesionAndSubtle
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One slice with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub kind: SubjectKind,
    pub image: Image2D,
    pub brain: BinaryMask,
    pub lesion_mask: Option<BinaryMask>,
    pub annotations: Vec<PointAnnotation>,
}

impl Subject {
    pub fn new(
        id: impl Into<String>,
        kind: SubjectKind,
        image: Image2D,
        brain: BinaryMask,
        lesion_mask: Option<BinaryMask>,
        annotations: Vec<PointAnnotation>,
    ) -> Result<Self> {
        let g = image.geometry();
        g.ensure_same(brain.geometry(), "subject brain mask")?;
        if let Some(m) = &lesion_mask {
            g.ensure_same(m.geometry(), "subject lesion mask")?;
        }
        for p in &annotations {
            p.check_inside(g)?;
        }
        Ok(Self {
            id: id.into(),
            kind,
            image,
            brain,
            lesion_mask,
            annotations,
        })
    }

    /// Lesion mask, or an empty mask when the subject has no lesion.
    pub fn lesion_mask_or_empty(&self) -> BinaryMask {
        self.lesion_mask
            .clone()
            .unwrap_or_else(|| BinaryMask::empty(*self.image.geometry()))
    }
}

/// Training slice: the (possibly contaminated) subject and its clean original.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSubject {
    pub subject: Subject,
    pub healthy: Image2D,
}

impl TrainingSubject {
    pub fn is_contaminated(&self) -> bool {
        self.subject.kind == SubjectKind::Contaminated
    }

    /// The image a model of the given variant trains on.
    pub fn image(&self, contaminated: bool) -> &Image2D {
        if contaminated {
            &self.subject.image
        } else {
            &self.healthy
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetParams {
    pub n_subjects: usize,
    pub phantom: PhantomParams,
    pub lesion: LesionParams,
    pub subtle: Vec<SubtleParams>,
    pub contamination_fraction: f64,
    /// Uniform jitter (pixels) applied independently to each simulated
    /// rater's click before merging.
    pub rater_jitter: f64,
    pub seed: u64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            n_subjects: 100,
            phantom: PhantomParams::default(),
            lesion: LesionParams::default(),
            subtle: SubtleKind::ALL.into_iter().map(SubtleParams::new).collect(),
            contamination_fraction: 0.0,
            rater_jitter: 1.0,
            seed: 0,
        }
    }
}

impl DatasetParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 10 {
            return Err(Error::Param(format!(
                "need at least 10 subjects, got {}",
                self.n_subjects
            )));
        }
        if !(0.0..=1.0).contains(&self.contamination_fraction) {
            return Err(Error::Param(format!(
                "contamination_fraction must lie in [0, 1], got {}",
                self.contamination_fraction
            )));
        }
        if self.subtle.is_empty() {
            return Err(Error::Param("at least one subtle abnormality kind is required".into()));
        }
        if !(self.rater_jitter >= 0.0) {
            return Err(Error::Param("rater_jitter must be >= 0".into()));
        }
        self.phantom.validate()?;
        self.lesion.validate()?;
        for s in &self.subtle {
            s.validate()?;
            if s.amplitude >= self.lesion.delta.0 && self.lesion.delta.0 > 0.0 {
                return Err(Error::Param(format!(
                    "subtle amplitude {} must stay below the minimum lesion delta {}",
                    s.amplitude, self.lesion.delta.0
                )));
            }
        }
        Ok(())
    }

    /// `(train, val, test)` sizes under the 80/10/10 rule.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        split_sizes(self.n_subjects)
    }
}

pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 8 / 10;
    let val = n / 10;
    (train, val, n - train - val)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub params: DatasetParams,
    pub train: Vec<TrainingSubject>,
    pub val: Vec<Subject>,
    pub test: Vec<Subject>,
    /// Raw clicks of the two simulated raters, keyed by subject id.
    pub rater_a: crate::annotations::AnnotationSet,
    pub rater_b: crate::annotations::AnnotationSet,
}

impl Dataset {
    pub fn split_of(&self, id: &str) -> Option<Split> {
        if self.train.iter().any(|s| s.subject.id == id) {
            Some(Split::Train)
        } else if self.val.iter().any(|s| s.id == id) {
            Some(Split::Val)
        } else if self.test.iter().any(|s| s.id == id) {
            Some(Split::Test)
        } else {
            None
        }
    }
}

const STREAM_PHANTOM: u64 = 1;
const STREAM_LESION: u64 = 2;
const STREAM_SUBTLE: u64 = 3;
const STREAM_CONTAMINATION: u64 = 4;
const STREAM_RATERS: u64 = 5;

pub fn subject_id(index: usize) -> String {
    format!("sub-{:04}", index + 1)
}

/// Builds the train/validation/test pools.
///
/// Subject `i` always receives the same healthy phantom, lesions and subtle
/// abnormality for a given master seed; `contamination_fraction` only decides
/// which training subjects carry their subtle abnormality.
pub fn make_dataset(params: &DatasetParams) -> Result<Dataset> {
    params.validate()?;
    let (n_train, n_val, _) = params.split_sizes();
    let master = params.seed;

    let n_contaminated = ((params.contamination_fraction * n_train as f64).round() as usize).min(n_train);
    let mut order: Vec<usize> = (0..n_train).collect();
    order.shuffle(&mut rng(derive_seed(master, STREAM_CONTAMINATION, 0)));
    let mut contaminated = vec![false; n_train];
    for &i in &order[..n_contaminated] {
        contaminated[i] = true;
    }

    let mut rater_a = crate::annotations::AnnotationSet::new();
    let mut rater_b = crate::annotations::AnnotationSet::new();
    let mut train = Vec::with_capacity(n_train);
    let mut val = Vec::with_capacity(n_val);
    let mut test = Vec::new();

    for index in 0..params.n_subjects {
        let id = subject_id(index);
        let phantom = gen_healthy(&params.phantom.with_seed(derive_seed(master, STREAM_PHANTOM, index as u64)))?;
        let subtle_seed = derive_seed(master, STREAM_SUBTLE, index as u64);
        let subtle_for = |image: &Image2D| -> Result<SubtleAbnormality> {
            let mut r = rng(subtle_seed);
            let spec = &params.subtle[r.random_range(0..params.subtle.len())];
            inject_subtle(image, &phantom, spec, r.random())
        };

        if index < n_train {
            let kind = if contaminated[index] {
                SubjectKind::Contaminated
            } else {
                SubjectKind::Healthy
            };
            let (image, clicks) = if contaminated[index] {
                let s = subtle_for(&phantom.image)?;
                (s.image, vec![s.annotation])
            } else {
                (phantom.image.clone(), vec![])
            };
            let annotations = simulate_raters(
                &id,
                &clicks,
                params.rater_jitter,
                derive_seed(master, STREAM_RATERS, index as u64),
                phantom.image.geometry(),
                &mut rater_a,
                &mut rater_b,
            )?;
            train.push(TrainingSubject {
                subject: Subject::new(id, kind, image, phantom.brain.clone(), None, annotations)?,
                healthy: phantom.image,
            });
            continue;
        }

        let position = if index < n_train + n_val {
            index - n_train
        } else {
            index - n_train - n_val
        };
        let kind = SubjectKind::EVAL_CYCLE[position % SubjectKind::EVAL_CYCLE.len()];
        let mut image = phantom.image.clone();
        let mut clicks = Vec::new();
        let mut lesion_mask = None;
        if kind.has_subtle() {
            let s = subtle_for(&image)?;
            image = s.image;
            clicks.push(s.annotation);
        }
        if kind.has_lesion() {
            let les = inject_lesion(
                &image,
                &phantom.brain,
                &params.lesion,
                derive_seed(master, STREAM_LESION, index as u64),
            )?;
            image = les.image;
            for b in &les.blobs {
                clicks.push(PointAnnotation::new(b.cx, b.cy, Label::Lesion));
            }
            lesion_mask = Some(les.mask);
        }
        let annotations = simulate_raters(
            &id,
            &clicks,
            params.rater_jitter,
            derive_seed(master, STREAM_RATERS, index as u64),
            phantom.image.geometry(),
            &mut rater_a,
            &mut rater_b,
        )?;
        let subject = Subject::new(id, kind, image, phantom.brain, lesion_mask, annotations)?;
        if index < n_train + n_val {
            val.push(subject);
        } else {
            test.push(subject);
        }
    }

    Ok(Dataset {
        params: params.clone(),
        train,
        val,
        test,
        rater_a,
        rater_b,
    })
}

/// Two raters click near each true finding; their clicks are merged into the
/// reference set with the 5-pixel rule.
fn simulate_raters(
    id: &str,
    truth: &[PointAnnotation],
    jitter: f64,
    seed: u64,
    geometry: &Geometry,
    rater_a: &mut crate::annotations::AnnotationSet,
    rater_b: &mut crate::annotations::AnnotationSet,
) -> Result<Vec<PointAnnotation>> {
    if truth.is_empty() {
        return Ok(Vec::new());
    }
    let mut r = rng(seed);
    let click = |p: &PointAnnotation, rater: &str, r: &mut Rng| {
        let jx = jitter * (2.0 * r.random::<f64>() - 1.0);
        let jy = jitter * (2.0 * r.random::<f64>() - 1.0);
        let max_x = geometry.width() as f64 - 1.0;
        let max_y = geometry.height() as f64 - 1.0;
        PointAnnotation::new((p.x + jx).clamp(0.0, max_x), (p.y + jy).clamp(0.0, max_y), p.label)
            .with_rater(rater)
    };
    let a: Vec<_> = truth.iter().map(|p| click(p, "A", &mut r)).collect();
    let b: Vec<_> = truth.iter().map(|p| click(p, "B", &mut r)).collect();
    let sa = SubjectAnnotations {
        subject_id: id.to_string(),
        points: a,
    };
    let sb = SubjectAnnotations {
        subject_id: id.to_string(),
        points: b,
    };
    let merged = merge_raters(&sa, &sb, crate::MERGE_RADIUS)?;
    rater_a.insert(id.to_string(), sa.points);
    rater_b.insert(id.to_string(), sb.points);
    Ok(merged.points)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn phantom(seed: u64) -> Phantom {
        gen_healthy(&PhantomParams::default().with_seed(seed)).unwrap()
    }

    #[test]
    fn healthy_is_deterministic() {
        assert_eq!(phantom(3), phantom(3));
        assert_ne!(phantom(3).image, phantom(4).image);
    }

    #[test]
    fn brain_pixels_are_z_scored() {
        for seed in 0..10 {
            let p = phantom(seed);
            let (mean, std) = masked_mean_std(p.image.pixels(), p.brain.pixels());
            assert!(mean.abs() < 1e-9, "mean {mean}");
            assert!((std - 1.0).abs() < 1e-9, "std {std}");
            for (v, inside) in p.image.pixels().iter().zip(p.brain.pixels()) {
                if !inside {
                    assert_eq!(*v, 0.0);
                }
            }
        }
    }

    #[test]
    fn zero_noise_is_piecewise_constant() {
        let params = PhantomParams {
            noise_sigma: 0.0,
            ..PhantomParams::default()
        };
        let p = gen_healthy(&params).unwrap();
        let mut levels: Vec<f64> = p.image.pixels().to_vec();
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        // background, brain, one tissue layer, ventricle
        assert_eq!(levels.len(), 4);
    }

    #[test]
    fn degenerate_ellipse_is_rejected() {
        let params = PhantomParams {
            brain_axes: (0.0, 0.0),
            ..PhantomParams::default()
        };
        assert!(matches!(gen_healthy(&params), Err(Error::Param(_))));
    }

    #[test]
    fn zero_delta_lesion_changes_nothing() {
        let p = phantom(1);
        let params = LesionParams {
            delta: (0.0, 0.0),
            ..LesionParams::default()
        };
        let les = inject_lesion(&p.image, &p.brain, &params, 9).unwrap();
        assert_eq!(les.image, p.image);
        assert!(les.mask.is_empty());
    }

    #[test]
    fn lesion_mask_marks_changed_pixels_inside_brain() {
        let params = LesionParams::default();
        for seed in 0..100 {
            let p = phantom(seed);
            let les = inject_lesion(&p.image, &p.brain, &params, seed + 1000).unwrap();
            assert!(!les.mask.is_empty());
            for i in 0..p.image.pixels().len() {
                let changed = (les.image.pixels()[i] - p.image.pixels()[i]).abs();
                assert_eq!(les.mask.pixels()[i], changed > params.delta.0 / 2.0);
                if changed > 0.0 {
                    assert!(p.brain.pixels()[i], "seed {seed}: change outside brain");
                }
            }
        }
    }

    #[test]
    fn impossible_lesion_placement_fails() {
        let p = phantom(0);
        let params = LesionParams {
            radius: (30.0, 30.0),
            ..LesionParams::default()
        };
        assert!(matches!(
            inject_lesion(&p.image, &p.brain, &params, 0),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn zero_magnitude_ventricle_change_is_identity() {
        let p = phantom(2);
        let s = inject_subtle_exact(&p.image, &p, SubtleKind::VentricleEnlargement, 0.0, 0.9, 0.0).unwrap();
        assert_eq!(s.image, p.image);
        assert_eq!(
            (s.annotation.x, s.annotation.y),
            (p.anatomy.ventricle.cx, p.anatomy.ventricle.cy)
        );
    }

    #[test]
    fn ventricle_growth_is_monotone() {
        let p = phantom(5);
        let counts: Vec<usize> = [0.1, 0.2, 0.3]
            .iter()
            .map(|&m| {
                inject_subtle_exact(&p.image, &p, SubtleKind::VentricleEnlargement, m, 0.9, 0.0)
                    .unwrap()
                    .region
                    .area()
            })
            .collect();
        assert!(counts[0] <= counts[1] && counts[1] <= counts[2], "{counts:?}");
        assert!(counts[2] > counts[0]);
    }

    #[test]
    fn subtle_annotation_lies_in_region() {
        for seed in 0..30 {
            let p = phantom(seed);
            for kind in SubtleKind::ALL {
                let s = inject_subtle(&p.image, &p, &SubtleParams::new(kind), seed).unwrap();
                let (x, y) = (s.annotation.x.round() as usize, s.annotation.y.round() as usize);
                assert!(s.region.get(x, y), "{kind} seed {seed}");
                assert!(s.mean_abs_change(&p.image) < LesionParams::default().delta.0);
            }
        }
    }

    #[test]
    fn unknown_kind_is_param_error() {
        assert!(matches!("cortical_gyrus".parse::<SubtleKind>(), Err(Error::Param(_))));
        assert_eq!("sulcal_widening".parse::<SubtleKind>().unwrap(), SubtleKind::SulcalWidening);
    }

    #[test]
    fn split_sizes_follow_80_10_10() {
        assert_eq!(split_sizes(10), (8, 1, 1));
        assert_eq!(split_sizes(100), (80, 10, 10));
        assert_eq!(split_sizes(55), (44, 5, 6));
    }

    #[test]
    fn contamination_bounds_checked() {
        let params = DatasetParams {
            n_subjects: 10,
            contamination_fraction: 1.5,
            ..DatasetParams::default()
        };
        assert!(matches!(make_dataset(&params), Err(Error::Param(_))));
    }

    #[test]
    fn clean_training_pool_has_no_annotations() {
        let params = DatasetParams {
            n_subjects: 20,
            ..DatasetParams::default()
        };
        let ds = make_dataset(&params).unwrap();
        assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (16, 2, 2));
        assert!(ds.train.iter().all(|t| t.subject.annotations.is_empty()));
        assert!(ds.train.iter().all(|t| t.subject.image == t.healthy));
    }

    #[test]
    fn eval_splits_do_not_depend_on_contamination() {
        let base = DatasetParams {
            n_subjects: 20,
            seed: 4,
            ..DatasetParams::default()
        };
        let clean = make_dataset(&base).unwrap();
        let dirty = make_dataset(&DatasetParams {
            contamination_fraction: 0.5,
            ..base
        })
        .unwrap();
        assert_eq!(clean.test, dirty.test);
        assert_eq!(clean.val, dirty.val);
        assert_eq!(dirty.train.iter().filter(|t| t.is_contaminated()).count(), 8);
    }
}
