//! Fields sampled on uniform 2D grids.

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{MnoError, Result};

/// Physical rectangle `[x0, x1] × [y0, y1]` covered by a grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Extent {
    pub const UNIT: Extent = Extent { x0: 0.0, x1: 1.0, y0: 0.0, y1: 1.0 };

    pub fn square(lo: f64, hi: f64) -> Self {
        Extent { x0: lo, x1: hi, y0: lo, y1: hi }
    }
}

impl Default for Extent {
    fn default() -> Self {
        Extent::UNIT
    }
}

/// A multi-channel field on an `H × W` grid. `data[[i, j, c]]` is row `i`
/// (the y index), column `j` (the x index), channel `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridField {
    pub data: Array3<f64>,
    pub extent: Extent,
    /// Time spacing between stacked temporal channels, if any.
    pub dt: Option<f64>,
}

impl GridField {
    pub fn new(data: Array3<f64>, extent: Extent, dt: Option<f64>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(MnoError::invalid(format!("empty grid field {h}x{w}x{c}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(MnoError::invalid("grid field contains non-finite values"));
        }
        Ok(GridField { data, extent, dt })
    }

    /// Build from a single-channel 2D array.
    pub fn scalar(values: Array2<f64>, extent: Extent) -> Result<Self> {
        Self::new(values.insert_axis(Axis(2)), extent, None)
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        GridField { data: Array3::zeros((height, width, channels)), extent: Extent::UNIT, dt: None }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn cells(&self) -> usize {
        self.height() * self.width()
    }

    /// Row-major token matrix: row `i * W + j` holds the channel vector of
    /// cell `(i, j)`.
    pub fn to_tokens(&self) -> Array2<f64> {
        let (h, w, c) = self.data.dim();
        self.data
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((h * w, c))
            .expect("standard layout reshape")
    }

    pub fn from_tokens(tokens: Array2<f64>, height: usize, width: usize, extent: Extent) -> Result<Self> {
        let (l, c) = tokens.dim();
        if l != height * width {
            return Err(MnoError::invalid(format!(
                "token count {l} does not match grid {height}x{width}"
            )));
        }
        let data = tokens
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((height, width, c))
            .expect("standard layout reshape");
        Self::new(data, extent, None)
    }

    /// Channel `c` as a 2D array.
    pub fn channel(&self, c: usize) -> Array2<f64> {
        self.data.index_axis(Axis(2), c).to_owned()
    }

    /// Normalised cell coordinates in `[0, 1]²`, channel 0 = x, channel 1 = y.
    pub fn unit_coordinates(height: usize, width: usize) -> GridField {
        let mut data = Array3::zeros((height, width, 2));
        let sx = if width > 1 { 1.0 / (width - 1) as f64 } else { 0.0 };
        let sy = if height > 1 { 1.0 / (height - 1) as f64 } else { 0.0 };
        for i in 0..height {
            for j in 0..width {
                data[[i, j, 0]] = j as f64 * sx;
                data[[i, j, 1]] = i as f64 * sy;
            }
        }
        GridField { data, extent: Extent::UNIT, dt: None }
    }

    pub fn same_shape(&self, other: &GridField) -> bool {
        self.data.dim() == other.data.dim()
    }
}
