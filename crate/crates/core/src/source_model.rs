//! Weight functions `u_fn(Y)` for the majorized separation cost.
//!
//! Each model is the majorization of a concave contrast `G` of the frame
//! energy `r = sum_f |y_fn|^2`: the weight is `dG/dr` at the current
//! estimate, so the weighted quadratic upper-bounds `G` and touches it there.
//! Below the floor the contrast is continued linearly, which keeps it concave
//! and the bound valid.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelVariant {
    /// Time-varying Gaussian: variance per frame shared across frequency.
    Gauss,
    /// Spherical Laplace over frequencies.
    Laplace,
    /// Unit weights (stationary Gaussian).
    Unit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceModelKind {
    pub variant: ModelVariant,
    pub floor: f64,
}

impl SourceModelKind {
    pub fn new(variant: ModelVariant) -> Self {
        SourceModelKind {
            variant,
            floor: DEFAULT_FLOOR,
        }
    }

    pub fn gauss() -> Self {
        Self::new(ModelVariant::Gauss)
    }

    pub fn laplace() -> Self {
        Self::new(ModelVariant::Laplace)
    }

    pub fn unit() -> Self {
        Self::new(ModelVariant::Unit)
    }

    pub fn with_floor(mut self, floor: f64) -> Result<Self> {
        if !(floor > 0.0 && floor.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "weight floor must be positive, got {floor}"
            )));
        }
        self.floor = floor;
        Ok(self)
    }

    /// Weight for a frame with energy `r = sum_f |y_fn|^2` over `bins` bins.
    pub fn frame_weight(&self, r: f64, bins: usize) -> f64 {
        match self.variant {
            ModelVariant::Gauss => 1.0 / (r / bins as f64).max(self.floor),
            ModelVariant::Laplace => 1.0 / (2.0 * r.sqrt()).max(self.floor),
            ModelVariant::Unit => 1.0,
        }
    }

    /// Contrast `G(r)` whose derivative is [`frame_weight`](Self::frame_weight).
    pub fn contrast(&self, r: f64, bins: usize) -> f64 {
        let fl = self.floor;
        match self.variant {
            ModelVariant::Gauss => {
                let b = bins as f64;
                let s = r / b;
                if s >= fl {
                    b * s.ln()
                } else {
                    b * (fl.ln() + s / fl - 1.0)
                }
            }
            ModelVariant::Laplace => {
                let root = r.sqrt();
                if 2.0 * root >= fl {
                    root
                } else {
                    r / fl + fl / 4.0
                }
            }
            ModelVariant::Unit => r,
        }
    }
}

impl Default for SourceModelKind {
    fn default() -> Self {
        Self::laplace()
    }
}

impl FromStr for SourceModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gauss" => Ok(Self::gauss()),
            "laplace" => Ok(Self::laplace()),
            "unit" => Ok(Self::unit()),
            other => Err(Error::InvalidConfig(format!(
                "unknown source model '{other}' (expected gauss, laplace or unit)"
            ))),
        }
    }
}

impl fmt::Display for SourceModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self.variant {
            ModelVariant::Gauss => "gauss",
            ModelVariant::Laplace => "laplace",
            ModelVariant::Unit => "unit",
        })
    }
}

/// Strictly positive weights, `F x N`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMask {
    pub u: Array2<f64>,
}

/// Per-frame energies `sum_f |y_fn|^2` of one source, `F x N` input.
pub fn frame_energy(y: ArrayView2<'_, Complex64>) -> Vec<f64> {
    let mut r = vec![0.0; y.len_of(Axis(1))];
    for row in y.outer_iter() {
        for (acc, v) in r.iter_mut().zip(row.iter()) {
            *acc += v.norm_sqr();
        }
    }
    r
}

pub fn weights(kind: &SourceModelKind, y: ArrayView2<'_, Complex64>) -> Result<WeightMask> {
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("source estimate"));
    }
    let bins = y.nrows();
    let per_frame: Vec<f64> = frame_energy(y)
        .into_iter()
        .map(|r| kind.frame_weight(r, bins))
        .collect();
    let u = Array2::from_shape_fn(y.dim(), |(_, n)| per_frame[n]);
    Ok(WeightMask { u })
}
