//! Procedural ultrasound-like images with exact lesion masks.
//!
//! * benign: a smooth, uniformly hypoechoic rotated ellipse
//! * malignant: a jagged star-shaped polygon whose core is darker than its rim
//! * normal: background only, empty mask
//!
//! The background is a linear intensity ramp in a random direction, and the
//! whole image is multiplied by clamped Gaussian speckle.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Label, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_SIZE: usize = 32;
pub const MIN_SAMPLES: usize = 3;

const SPECKLE_STD: f64 = 0.25;
const BENIGN_CONTRAST: f64 = 0.35;
const MALIGNANT_CORE: f64 = 0.08;
const MALIGNANT_RIM: f64 = 0.3;

enum Lesion {
    Ellipse {
        cx: f64,
        cy: f64,
        a: f64,
        b: f64,
        cos: f64,
        sin: f64,
    },
    Star {
        cx: f64,
        cy: f64,
        /// Vertex angles and radii, angles increasing.
        vertices: Vec<(f64, f64)>,
    },
}

impl Lesion {
    /// Relative intensity at `(x, y)` if inside the lesion.
    fn factor(&self, x: f64, y: f64) -> Option<f64> {
        match self {
            Lesion::Ellipse { cx, cy, a, b, cos, sin } => {
                let (dx, dy) = (x - cx, y - cy);
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                ((u / a).powi(2) + (v / b).powi(2) <= 1.0).then_some(BENIGN_CONTRAST)
            }
            Lesion::Star { cx, cy, vertices } => {
                let (dx, dy) = (x - cx, y - cy);
                let r = dx.hypot(dy);
                let boundary = star_radius(vertices, dy.atan2(dx).rem_euclid(2.0 * PI));
                (r <= boundary).then(|| MALIGNANT_CORE + (MALIGNANT_RIM - MALIGNANT_CORE) * (r / boundary))
            }
        }
    }
}

/// Radius of the polygon boundary along `angle` (polygon is star-shaped
/// around its centre, so each ray crosses one edge).
fn star_radius(vertices: &[(f64, f64)], angle: f64) -> f64 {
    let m = vertices.len();
    for k in 0..m {
        let (a0, r0) = vertices[k];
        let (mut a1, r1) = vertices[(k + 1) % m];
        if k + 1 == m {
            a1 += 2.0 * PI;
        }
        let mut theta = angle;
        if theta < a0 {
            theta += 2.0 * PI;
        }
        if theta >= a0 && theta <= a1 {
            // Intersect the ray with the edge between the two vertices.
            let (x0, y0) = (r0 * a0.cos(), r0 * a0.sin());
            let (x1, y1) = (r1 * a1.cos(), r1 * a1.sin());
            let (ux, uy) = (theta.cos(), theta.sin());
            let (ex, ey) = (x1 - x0, y1 - y0);
            let denom = ux * ey - uy * ex;
            if denom.abs() < 1e-12 {
                return r0.min(r1);
            }
            return (x0 * ey - y0 * ex) / denom;
        }
    }
    vertices[0].1
}

fn sample_lesion(label: Label, size: f64, rng: &mut ChaCha8Rng) -> Option<Lesion> {
    let cx = rng.random_range(0.3..0.7) * size;
    let cy = rng.random_range(0.3..0.7) * size;
    match label {
        Label::Normal => None,
        Label::Benign => {
            let a = rng.random_range(0.1..0.3) * size;
            let b = rng.random_range(0.1..0.3) * size;
            let rot = rng.random_range(0.0..PI);
            Some(Lesion::Ellipse { cx, cy, a, b, cos: rot.cos(), sin: rot.sin() })
        }
        Label::Malignant => {
            let base = rng.random_range(0.1..0.2) * size;
            let m = rng.random_range(10..=16);
            let offset = rng.random_range(0.0..2.0 * PI / m as f64);
            let vertices = (0..m)
                .map(|k| {
                    let angle = offset + 2.0 * PI * k as f64 / m as f64;
                    (angle, base * (1.0 + rng.random_range(-0.4..=0.4)))
                })
                .collect();
            Some(Lesion::Star { cx, cy, vertices })
        }
    }
}

fn render(label: Label, size: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let s = size as f64;
    let level = rng.random_range(0.45..0.65);
    let ramp = rng.random_range(0.05..0.2);
    let dir = rng.random_range(0.0..2.0 * PI);
    let lesion = sample_lesion(label, s, rng);
    let speckle = Normal::new(1.0, SPECKLE_STD).expect("valid std");
    let mut image = Vec::with_capacity(size * size);
    let mut mask = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let background = level + ramp * ((px / s - 0.5) * dir.cos() + (py / s - 0.5) * dir.sin());
            let inside = lesion.as_ref().and_then(|l| l.factor(px, py));
            let clean = background * inside.unwrap_or(1.0);
            let noisy = clean * speckle.sample(rng).max(0.0);
            image.push(noisy.clamp(0.0, 1.0));
            mask.push(if inside.is_some() { 1.0 } else { 0.0 });
        }
    }
    (image, mask)
}

/// `n` samples of side `size`, classes drawn uniformly. Fully determined by
/// `(n, size, seed)`.
pub fn generate_synthetic(n: usize, size: usize, seed: u64) -> Result<Vec<Sample>> {
    if size < MIN_SIZE {
        return Err(Error::param(format!("synthetic image size {size} is below {MIN_SIZE}")));
    }
    if n < MIN_SAMPLES {
        return Err(Error::param(format!("need at least {MIN_SAMPLES} synthetic samples, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = Label::ALL[rng.random_range(0..3)];
            let (image, mask) = render(label, size, &mut rng);
            Ok(Sample {
                id: format!("{}/syn_{i:05}", label.name()),
                image: Tensor::new(&[1, size, size], image)?,
                mask: Tensor::new(&[1, size, size], mask)?,
                label,
            })
        })
        .collect()
}
