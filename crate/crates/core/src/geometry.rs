//! Shared domain types and bounding-box geometry.
//!
//! All boxes live in normalized frame coordinates (`[0, 1]` on both axes,
//! origin top-left). Pixel coordinates only appear inside raster code.

use serde::{Deserialize, Serialize};

use crate::error::{MocError, Result};

/// Default number of frames per sequence.
pub const DEFAULT_SEQUENCE_LEN: usize = 4;

/// An RGB raster with intensities in `[0, 1]`, stored row-major as
/// `(y, x, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Frame {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * Self::CHANNELS {
            return Err(MocError::Dimension(format!(
                "frame {}x{} needs {} values, got {}",
                height,
                width,
                height * width * Self::CHANNELS,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(MocError::Dimension(format!(
                "intensity {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// A frame filled with one color.
    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_dims(&self, other: &Frame) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// An ordered run of frames sharing one size.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Vec<Frame>,
}

impl FrameSequence {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        if let Some(first) = frames.first() {
            if frames.iter().any(|f| !f.same_dims(first)) {
                return Err(MocError::Dimension(
                    "frames in a sequence must share dimensions".into(),
                ));
            }
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Axis-aligned box in normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    /// Builds a box, clamping every coordinate into `[0, 1]` and ordering
    /// the extremes.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        let c = |v: f64| v.clamp(0.0, 1.0);
        let (x0, x1) = (c(x_min.min(x_max)), c(x_min.max(x_max)));
        let (y0, y1) = (c(y_min.min(y_max)), c(y_min.max(y_max)));
        Self {
            x_min: x0,
            y_min: y0,
            x_max: x1,
            y_max: y1,
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn diagonal(&self) -> f64 {
        self.width().hypot(self.height())
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn full_frame() -> Self {
        Self::new(0.0, 0.0, 1.0, 1.0)
    }
}

/// Box parameters in the detector's latent layout: extents in `(0, 1]`,
/// centers in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZWhere {
    pub width: f64,
    pub height: f64,
    pub center_x: f64,
    pub center_y: f64,
}

impl ZWhere {
    pub fn new(width: f64, height: f64, center_x: f64, center_y: f64) -> Self {
        Self {
            width,
            height,
            center_x,
            center_y,
        }
    }

    /// `[width, height, center_x, center_y]`
    pub fn as_array(&self) -> [f64; 4] {
        [self.width, self.height, self.center_x, self.center_y]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn is_valid(&self) -> bool {
        self.width > 0.0
            && self.width <= 1.0
            && self.height > 0.0
            && self.height <= 1.0
            && (-1.0..=1.0).contains(&self.center_x)
            && (-1.0..=1.0).contains(&self.center_y)
    }
}

/// Unclamped box bounds of a [`ZWhere`], returned in the ordering used by
/// the reference converter: `[y_min, y_max, x_min, x_max]`.
///
/// Everything else in this crate uses `(x_min, y_min, x_max, y_max)`;
/// [`zwhere_to_box`] performs the reordering and the clamp.
pub fn zwhere_to_listing_pos(z: &ZWhere) -> [f64; 4] {
    let center_x = (z.center_x + 1.0) / 2.0;
    let center_y = (z.center_y + 1.0) / 2.0;
    let x_min = center_x - z.width / 2.0;
    let x_max = center_x + z.width / 2.0;
    let y_min = center_y - z.height / 2.0;
    let y_max = center_y + z.height / 2.0;
    [y_min, y_max, x_min, x_max]
}

/// Converts latent box parameters to a normalized box clamped to the frame.
pub fn zwhere_to_box(z: &ZWhere) -> BoundingBox {
    let [y_min, y_max, x_min, x_max] = zwhere_to_listing_pos(z);
    BoundingBox::new(x_min, y_min, x_max, y_max)
}

/// Inverse of [`zwhere_to_box`] for boxes inside the frame.
pub fn box_to_zwhere(b: &BoundingBox) -> ZWhere {
    let (cx, cy) = b.center();
    ZWhere::new(b.width(), b.height(), 2.0 * cx - 1.0, 2.0 * cy - 1.0)
}

/// Intersection over union. Returns 0 when the union has no area.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Distance between box centers divided by the ground-truth diagonal.
pub fn center_divergence(pred: &BoundingBox, gt: &BoundingBox) -> Result<f64> {
    let diag = gt.diagonal();
    if diag <= 0.0 {
        return Err(MocError::InvalidGroundTruth(format!(
            "ground-truth box {:?} has zero diagonal",
            gt.as_array()
        )));
    }
    let (px, py) = pred.center();
    let (gx, gy) = gt.center();
    Ok((px - gx).hypot(py - gy) / diag)
}

/// Per-cell detector latents for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GridState {
    pub grid_h: usize,
    pub grid_w: usize,
    pub enc_dim: usize,
    pub pres: Vec<f64>,
    pub loc: Vec<ZWhere>,
    /// Row-major `cells x enc_dim`.
    pub enc: Vec<f64>,
}

impl GridState {
    pub fn new(
        grid_h: usize,
        grid_w: usize,
        enc_dim: usize,
        pres: Vec<f64>,
        loc: Vec<ZWhere>,
        enc: Vec<f64>,
    ) -> Result<Self> {
        let n = grid_h * grid_w;
        if pres.len() != n || loc.len() != n || enc.len() != n * enc_dim {
            return Err(MocError::Dimension(format!(
                "grid {grid_h}x{grid_w} with enc dim {enc_dim}: got {} pres, {} loc, {} enc values",
                pres.len(),
                loc.len(),
                enc.len()
            )));
        }
        Ok(Self {
            grid_h,
            grid_w,
            enc_dim,
            pres,
            loc,
            enc,
        })
    }

    pub fn num_cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn enc_of(&self, cell: usize) -> &[f64] {
        &self.enc[cell * self.enc_dim..(cell + 1) * self.enc_dim]
    }

    /// Cells with `pres > 0.5`, in cell order.
    pub fn detections(&self) -> Vec<DetectedObject> {
        (0..self.num_cells())
            .filter(|&i| self.pres[i] > 0.5)
            .map(|i| DetectedObject {
                cell: i,
                bbox: zwhere_to_box(&self.loc[i]),
                enc: self.enc_of(i).to_vec(),
                pres: self.pres[i],
            })
            .collect()
    }
}

/// A grid cell the detector considers occupied.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectedObject {
    pub cell: usize,
    pub bbox: BoundingBox,
    pub enc: Vec<f64>,
    pub pres: f64,
}
