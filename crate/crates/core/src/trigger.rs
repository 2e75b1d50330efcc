//! Trigger operators that mark victim inputs: a corner patch and a
//! sinusoidal overlay.
//!
//! Inputs are flat vectors in [0, 1]. A vector of length D is viewed as a
//! row-major H x W (x channels) grid; for non-square lengths the grid is the
//! smallest enclosing square and the tail cells are virtual padding that no
//! trigger touches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Corner {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

pub const ALL_CORNERS: [Corner; 4] = [
    Corner::TopLeft,
    Corner::TopRight,
    Corner::BottomLeft,
    Corner::BottomRight,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TriggerKind {
    /// Squares of side ceil(fraction * min(H, W)) set to `fill` at each
    /// listed corner.
    Patch {
        fraction: f64,
        corners: Vec<Corner>,
        fill: f64,
    },
    /// Adds amplitude * sin(2*pi*frequency*j/W) to every column j, then
    /// clamps to [0, 1].
    Sig { frequency: u32, amplitude: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Logical vector length; cells at flat index >= dim are padding.
    pub dim: usize,
}

impl Geometry {
    /// Smallest square grid (single channel) holding a length-`dim` vector.
    pub fn square_for(dim: usize) -> Geometry {
        let side = (dim as f64).sqrt().ceil() as usize;
        Geometry {
            height: side,
            width: side,
            channels: 1,
            dim,
        }
    }

    pub fn cells(&self) -> usize {
        self.height * self.width * self.channels
    }

    fn flat(&self, r: usize, c: usize, ch: usize) -> usize {
        (r * self.width + c) * self.channels + ch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerSpec {
    pub kind: TriggerKind,
    pub geometry: Geometry,
}

impl TriggerSpec {
    pub fn patch(geometry: Geometry, fraction: f64, fill: f64) -> TriggerSpec {
        TriggerSpec {
            kind: TriggerKind::Patch {
                fraction,
                corners: ALL_CORNERS.to_vec(),
                fill,
            },
            geometry,
        }
    }

    pub fn sig(geometry: Geometry, frequency: u32, amplitude: f64) -> TriggerSpec {
        TriggerSpec {
            kind: TriggerKind::Sig {
                frequency,
                amplitude,
            },
            geometry,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.geometry.cells() < self.geometry.dim || self.geometry.dim == 0 {
            return Err(Error::invalid(
                "TriggerSpec",
                "geometry does not cover the input length",
            ));
        }
        match &self.kind {
            TriggerKind::Patch {
                fraction,
                corners,
                fill,
            } => {
                if !(*fraction > 0.0 && *fraction <= 0.5) {
                    return Err(Error::invalid(
                        "TriggerSpec",
                        format!("patch fraction {fraction} outside (0, 0.5]"),
                    ));
                }
                if corners.is_empty() {
                    return Err(Error::invalid(
                        "TriggerSpec",
                        "patch needs at least one corner",
                    ));
                }
                if !fill.is_finite() {
                    return Err(Error::invalid("TriggerSpec", "patch fill must be finite"));
                }
            }
            TriggerKind::Sig {
                frequency,
                amplitude,
            } => {
                if *frequency == 0 {
                    return Err(Error::invalid(
                        "TriggerSpec",
                        "sig frequency must be positive",
                    ));
                }
                if !(*amplitude >= 0.0) {
                    return Err(Error::invalid("TriggerSpec", "sig amplitude must be >= 0"));
                }
            }
        }
        Ok(())
    }

    /// Side length in pixels of the patch square.
    pub fn patch_side(&self) -> Option<usize> {
        match &self.kind {
            TriggerKind::Patch { fraction, .. } => {
                let m = self.geometry.height.min(self.geometry.width) as f64;
                Some((fraction * m).ceil() as usize)
            }
            TriggerKind::Sig { .. } => None,
        }
    }
}

fn apply_row(row: &mut [f64], spec: &TriggerSpec) {
    let geo = &spec.geometry;
    match &spec.kind {
        TriggerKind::Patch { corners, fill, .. } => {
            let side = spec.patch_side().unwrap().min(geo.height).min(geo.width);
            for corner in corners {
                let (r0, c0) = match corner {
                    Corner::TopLeft => (0, 0),
                    Corner::TopRight => (0, geo.width - side),
                    Corner::BottomLeft => (geo.height - side, 0),
                    Corner::BottomRight => (geo.height - side, geo.width - side),
                };
                for r in r0..r0 + side {
                    for c in c0..c0 + side {
                        for ch in 0..geo.channels {
                            let idx = geo.flat(r, c, ch);
                            if idx < geo.dim {
                                row[idx] = *fill;
                            }
                        }
                    }
                }
            }
        }
        TriggerKind::Sig {
            frequency,
            amplitude,
        } => {
            for r in 0..geo.height {
                for c in 0..geo.width {
                    let wave = amplitude
                        * (2.0 * std::f64::consts::PI * *frequency as f64 * c as f64
                            / geo.width as f64)
                            .sin();
                    for ch in 0..geo.channels {
                        let idx = geo.flat(r, c, ch);
                        if idx < geo.dim {
                            row[idx] = (row[idx] + wave).clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
    }
}

/// Apply the trigger to every row of `x` (or to a single row vector).
pub fn apply_trigger(x: &Tensor, spec: &TriggerSpec) -> Result<Tensor> {
    spec.validate()?;
    if x.cols() != spec.geometry.dim {
        return Err(Error::ShapeMismatch {
            op: "apply_trigger",
            lhs: x.shape().to_vec(),
            rhs: vec![spec.geometry.dim],
        });
    }
    let mut out = x.clone();
    let cols = out.cols();
    for r in 0..out.rows() {
        apply_row(&mut out.data_mut()[r * cols..(r + 1) * cols], spec);
    }
    Ok(out)
}
