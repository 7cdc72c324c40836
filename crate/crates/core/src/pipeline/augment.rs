//! Random in-plane rotation and scaling shared by every slice of a sample.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::ConditioningSample;
use crate::error::{Error, Result};
use crate::qspace::{norm, normalize, Vec3};
use crate::volume::DwiSlice;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Angles are drawn uniformly from `[-max_angle_deg, max_angle_deg]`.
    pub max_angle_deg: f64,
    /// Scale factors are drawn uniformly from this closed range.
    pub scale_range: [f64; 2],
    /// Rotate the in-plane components of the gradient rows with the image.
    pub rotate_bvecs: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { enabled: true, max_angle_deg: 15.0, scale_range: [0.9, 1.1], rotate_bvecs: true }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale_range;
        if !(self.max_angle_deg.is_finite() && self.max_angle_deg >= 0.0) {
            return Err(Error::Config(format!("augment.max_angle_deg must be >= 0, got {}", self.max_angle_deg)));
        }
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Config(format!("augment.scale_range must satisfy 0 < lo <= hi, got [{lo}, {hi}]")));
        }
        Ok(())
    }
}

/// One drawn transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub angle_deg: f64,
    pub scale: f64,
}

impl Transform {
    pub const IDENTITY: Transform = Transform { angle_deg: 0.0, scale: 1.0 };

    pub fn draw<R: Rng + ?Sized>(config: &AugmentConfig, rng: &mut R) -> Self {
        let angle_deg = if config.max_angle_deg > 0.0 {
            rng.random_range(-config.max_angle_deg..=config.max_angle_deg)
        } else {
            0.0
        };
        let [lo, hi] = config.scale_range;
        let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        Self { angle_deg, scale }
    }
}

/// Resamples a slice rotated by the transform angle and scaled about its
/// centre, with bilinear interpolation and zero fill outside the image.
pub fn transform_slice(slice: &DwiSlice, t: Transform) -> DwiSlice {
    if t == Transform::IDENTITY {
        return slice.clone();
    }
    let (h, w) = (slice.height, slice.width);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = t.angle_deg.to_radians().sin_cos();
    let at = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            slice.pixels[y as usize * w + x as usize]
        }
    };
    let mut pixels = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            // Inverse map: undo the scale, then rotate by the negative angle.
            let sx = (cos * dx + sin * dy) / t.scale + cx;
            let sy = (-sin * dx + cos * dy) / t.scale + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
            pixels[y * w + x] = v.max(0.0);
        }
    }
    DwiSlice { pixels, ..slice.clone() }
}

/// Rotates the `(x, y)` components of a gradient row by the transform angle
/// and renormalises. A zero row is returned unchanged.
pub fn rotate_row(row: &Vec3, angle_deg: f64) -> Vec3 {
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let r = [cos * row[0] - sin * row[1], sin * row[0] + cos * row[1], row[2]];
    if norm(&r) > 0.0 {
        normalize(&r)
    } else {
        *row
    }
}

/// Applies one drawn transform to the target, every reference and, when
/// configured, the gradient matrix.
pub fn augment<R: Rng + ?Sized>(sample: &ConditioningSample, config: &AugmentConfig, rng: &mut R) -> (ConditioningSample, Transform) {
    if !config.enabled {
        return (sample.clone(), Transform::IDENTITY);
    }
    let t = Transform::draw(config, rng);
    (apply(sample, t, config.rotate_bvecs), t)
}

pub fn apply(sample: &ConditioningSample, t: Transform, rotate_bvecs: bool) -> ConditioningSample {
    let bmatrix = if rotate_bvecs {
        sample.bmatrix.iter().map(|r| rotate_row(r, t.angle_deg)).collect()
    } else {
        sample.bmatrix.clone()
    };
    ConditioningSample {
        target: transform_slice(&sample.target, t),
        references: sample.references.iter().map(|r| transform_slice(r, t)).collect(),
        bmatrix,
    }
}
