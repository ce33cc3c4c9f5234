//! Perturbation regions: L-infinity balls around a center image, optionally
//! clipped to valid pixel range, and the plain coordinate boxes the
//! branch-and-bound search subdivides.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum RegionError {
    #[error("radius shape {radius:?} does not match center shape {center:?}")]
    ShapeMismatch {
        center: Vec<usize>,
        radius: Vec<usize>,
    },
    #[error("radius must be nonnegative and finite, element {index} is {value}")]
    BadRadius { index: usize, value: f64 },
    #[error("center element {index} is {value}, outside [0,1] with clipping enabled")]
    CenterOutsideClip { index: usize, value: f64 },
    #[error("pixel index {index} outside input of {len} elements")]
    PixelOutOfRange { index: usize, len: usize },
}

/// `{ I : |I - center| <= radius elementwise }`, intersected with `[0,1]`
/// when `clip01` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRegion {
    center: Tensor,
    radius: Tensor,
    clip01: bool,
}

impl InputRegion {
    pub fn new(center: Tensor, radius: Tensor, clip01: bool) -> Result<Self, RegionError> {
        if center.shape() != radius.shape() {
            return Err(RegionError::ShapeMismatch {
                center: center.shape().to_vec(),
                radius: radius.shape().to_vec(),
            });
        }
        for (index, &value) in radius.data().iter().enumerate() {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(RegionError::BadRadius { index, value });
            }
        }
        if clip01 {
            for (index, &value) in center.data().iter().enumerate() {
                if !(0.0..=1.0).contains(&value) {
                    return Err(RegionError::CenterOutsideClip { index, value });
                }
            }
        }
        Ok(Self {
            center,
            radius,
            clip01,
        })
    }

    /// Same radius `epsilon` on every element.
    pub fn uniform(center: Tensor, epsilon: f64, clip01: bool) -> Result<Self, RegionError> {
        let radius = Tensor::filled(center.shape().to_vec(), epsilon);
        Self::new(center, radius, clip01)
    }

    /// Radius `epsilon` on the listed elements only; everything else is
    /// pinned to the center value.
    pub fn on_pixels(
        center: Tensor,
        epsilon: f64,
        pixels: &[usize],
        clip01: bool,
    ) -> Result<Self, RegionError> {
        let len = center.numel();
        let mut radius = vec![0.0; len];
        for &index in pixels {
            if index >= len {
                return Err(RegionError::PixelOutOfRange { index, len });
            }
            radius[index] = epsilon;
        }
        let radius = Tensor::new(center.shape().to_vec(), radius).expect("shape fits");
        Self::new(center, radius, clip01)
    }

    pub fn center(&self) -> &Tensor {
        &self.center
    }

    pub fn radius(&self) -> &Tensor {
        &self.radius
    }

    pub fn clip01(&self) -> bool {
        self.clip01
    }

    pub fn shape(&self) -> &[usize] {
        self.center.shape()
    }

    /// Concrete elementwise lower/upper endpoints of the region.
    pub fn bounds(&self) -> BoxBounds {
        let c = self.center.data();
        let r = self.radius.data();
        let mut lo = Vec::with_capacity(c.len());
        let mut hi = Vec::with_capacity(c.len());
        for i in 0..c.len() {
            let (mut l, mut u) = (c[i] - r[i], c[i] + r[i]);
            if self.clip01 {
                l = l.max(0.0);
                u = u.min(1.0);
            }
            lo.push(l);
            hi.push(u);
        }
        BoxBounds { lo, hi }
    }

    /// Exact membership against the computed endpoints; no tolerance.
    pub fn contains(&self, point: &Tensor) -> bool {
        if point.shape() != self.center.shape() {
            return false;
        }
        self.bounds().contains(point.data())
    }

    /// Indices whose radius is nonzero, i.e. the dimensions an attacker may move.
    pub fn perturbed_dims(&self) -> Vec<usize> {
        self.radius
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &r)| r > 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// A coordinate box `[lo_i, hi_i]` per input element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxBounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxBounds {
    pub fn len(&self) -> usize {
        self.lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lo.is_empty()
    }

    pub fn width(&self, dim: usize) -> f64 {
        self.hi[dim] - self.lo[dim]
    }

    /// Widest dimension; ties go to the lowest index.
    pub fn widest_dim(&self) -> usize {
        let mut best = 0;
        for dim in 1..self.len() {
            if self.width(dim) > self.width(best) {
                best = dim;
            }
        }
        best
    }

    pub fn max_width(&self) -> f64 {
        (0..self.len()).map(|d| self.width(d)).fold(0.0, f64::max)
    }

    /// Bisect `dim`; the children share the midpoint endpoint exactly.
    pub fn split(&self, dim: usize) -> (BoxBounds, BoxBounds) {
        let mid = self.lo[dim] + 0.5 * (self.hi[dim] - self.lo[dim]);
        let mut left = self.clone();
        let mut right = self.clone();
        left.hi[dim] = mid;
        right.lo[dim] = mid;
        (left, right)
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&l, &u)| l + 0.5 * (u - l))
            .collect()
    }

    pub fn contains(&self, point: &[f64]) -> bool {
        point.len() == self.len()
            && point
                .iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(&p, (&l, &u))| l <= p && p <= u)
    }

    /// Clamp a point into the box, coordinate by coordinate.
    pub fn clamp(&self, point: &mut [f64]) {
        for (p, (&l, &u)) in point.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *p = p.clamp(l, u);
        }
    }
}
