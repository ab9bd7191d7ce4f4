//! Motion priors from background differencing.
//!
//! A per-pixel mode image stands in for the static scene; pixels deviating
//! from it by more than `eta` form the motion mask, whose 8-connected
//! components give the prior boxes. Each box is assigned to the grid cell
//! containing its center.

use serde::{Deserialize, Serialize};

use crate::error::{MocError, Result};
use crate::geometry::{box_to_zwhere, BoundingBox, Frame, ZWhere};

pub const DEFAULT_ETA: f64 = 0.5;
pub const DEFAULT_MIN_AREA: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModeScope {
    /// One mode image over a batch drawn from the whole dataset.
    #[default]
    Global,
    /// Mode over the frames of a single sequence.
    Local,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeBackground {
    pub image: Frame,
    pub scope: ModeScope,
}

/// Per-pixel, per-channel mode after quantizing to 8-bit bins. Ties go to
/// the lower bin.
pub fn compute_mode_background(frames: &[&Frame], scope: ModeScope) -> Result<ModeBackground> {
    let first = frames
        .first()
        .ok_or_else(|| MocError::Empty("mode background needs at least one frame".into()))?;
    if frames.iter().any(|f| !f.same_dims(first)) {
        return Err(MocError::Dimension("mode batch frames differ in size".into()));
    }
    let n = first.data().len();
    let mut out = vec![0f32; n];
    let mut hist = [0u32; 256];
    let mut touched: Vec<u8> = Vec::with_capacity(frames.len());
    for (i, slot) in out.iter_mut().enumerate() {
        touched.clear();
        for f in frames {
            let b = (f.data()[i].clamp(0.0, 1.0) * 255.0).round() as u8;
            if hist[b as usize] == 0 {
                touched.push(b);
            }
            hist[b as usize] += 1;
        }
        let mut best = (0u32, 0u8);
        for &b in &touched {
            let c = hist[b as usize];
            if c > best.0 || (c == best.0 && b < best.1) {
                best = (c, b);
            }
            hist[b as usize] = 0;
        }
        *slot = best.1 as f32 / 255.0;
    }
    Ok(ModeBackground {
        image: Frame::new(first.height(), first.width(), out)?,
        scope,
    })
}

/// Binary raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
    }
}

/// `mask = 1` where the largest per-channel absolute difference to the
/// background exceeds `eta`.
pub fn extract_motion_mask(frame: &Frame, bg: &ModeBackground, eta: f64) -> Result<Mask> {
    if !frame.same_dims(&bg.image) {
        return Err(MocError::Dimension(format!(
            "frame {}x{} vs background {}x{}",
            frame.height(),
            frame.width(),
            bg.image.height(),
            bg.image.width()
        )));
    }
    let data = frame
        .data()
        .chunks_exact(3)
        .zip(bg.image.data().chunks_exact(3))
        .map(|(p, q)| {
            let d = (0..3)
                .map(|c| (p[c] as f64 - q[c] as f64).abs())
                .fold(0.0, f64::max);
            d > eta
        })
        .collect();
    Ok(Mask {
        height: frame.height(),
        width: frame.width(),
        data,
    })
}

/// Pixel-space extent of one connected component (inclusive bounds).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Component {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub area: usize,
}

impl Component {
    pub fn normalized_box(&self, height: usize, width: usize) -> BoundingBox {
        BoundingBox::new(
            self.x0 as f64 / width as f64,
            self.y0 as f64 / height as f64,
            (self.x1 + 1) as f64 / width as f64,
            (self.y1 + 1) as f64 / height as f64,
        )
    }
}

/// 8-connected components in raster order of their first pixel.
pub fn connected_components(mask: &[bool], height: usize, width: usize) -> Vec<Component> {
    let mut seen = vec![false; mask.len()];
    let mut stack = Vec::new();
    let mut out = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (sy, sx) = (start / width, start % width);
        let mut comp = Component {
            x0: sx,
            y0: sy,
            x1: sx,
            y1: sy,
            area: 0,
        };
        while let Some(i) = stack.pop() {
            let (y, x) = (i / width, i % width);
            comp.area += 1;
            comp.x0 = comp.x0.min(x);
            comp.x1 = comp.x1.max(x);
            comp.y0 = comp.y0.min(y);
            comp.y1 = comp.y1.max(y);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= height as i64 || nx >= width as i64 {
                        continue;
                    }
                    let j = ny as usize * width + nx as usize;
                    if mask[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        out.push(comp);
    }
    out
}

/// Tight normalized boxes of components with at least `min_area` pixels.
pub fn mask_to_boxes(mask: &Mask, min_area: usize) -> Vec<BoundingBox> {
    connected_components(&mask.data, mask.height, mask.width)
        .into_iter()
        .filter(|c| c.area >= min_area)
        .map(|c| c.normalized_box(mask.height, mask.width))
        .collect()
}

/// Index of the cell containing a normalized point.
pub fn cell_of(x: f64, y: f64, grid_h: usize, grid_w: usize) -> usize {
    let col = ((x * grid_w as f64).floor() as usize).min(grid_w - 1);
    let row = ((y * grid_h as f64).floor() as usize).min(grid_h - 1);
    row * grid_w + col
}

/// Assigns each box to the cell holding its center; the largest box wins
/// contested cells.
pub fn boxes_to_grid(
    boxes: &[BoundingBox],
    grid_h: usize,
    grid_w: usize,
) -> (Vec<f64>, Vec<Option<ZWhere>>) {
    let n = grid_h * grid_w;
    let mut winner: Vec<Option<&BoundingBox>> = vec![None; n];
    for b in boxes {
        let (cx, cy) = b.center();
        let cell = cell_of(cx, cy, grid_h, grid_w);
        match winner[cell] {
            Some(cur) if cur.area() >= b.area() => {}
            _ => winner[cell] = Some(b),
        }
    }
    let pres = winner.iter().map(|w| if w.is_some() { 1.0 } else { 0.0 }).collect();
    let loc = winner.iter().map(|w| w.map(box_to_zwhere)).collect();
    (pres, loc)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionParams {
    pub eta: f64,
    pub min_area: usize,
}

impl Default for MotionParams {
    fn default() -> Self {
        Self {
            eta: DEFAULT_ETA,
            min_area: DEFAULT_MIN_AREA,
        }
    }
}

/// Motion-derived targets for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionPrior {
    pub alpha_hat: Mask,
    pub pres_hat: Vec<f64>,
    pub loc_hat: Vec<Option<ZWhere>>,
    pub boxes: Vec<BoundingBox>,
    pub count: usize,
}

impl MotionPrior {
    /// Boxes of the cells that won a motion box, in cell order.
    pub fn cell_boxes(&self) -> Vec<BoundingBox> {
        self.loc_hat
            .iter()
            .flatten()
            .map(crate::geometry::zwhere_to_box)
            .collect()
    }
}

pub fn extract_motion_prior(
    frame: &Frame,
    bg: &ModeBackground,
    params: &MotionParams,
    grid_h: usize,
    grid_w: usize,
) -> Result<MotionPrior> {
    if grid_h == 0 || grid_w == 0 {
        return Err(MocError::Config("grid dimensions must be positive".into()));
    }
    let alpha_hat = extract_motion_mask(frame, bg, params.eta)?;
    let boxes = mask_to_boxes(&alpha_hat, params.min_area);
    let (pres_hat, loc_hat) = boxes_to_grid(&boxes, grid_h, grid_w);
    let count = pres_hat.iter().filter(|&&p| p > 0.5).count();
    Ok(MotionPrior {
        alpha_hat,
        pres_hat,
        loc_hat,
        boxes,
        count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{center_divergence, zwhere_to_box};
    use crate::synthgen::{generate_dataset, render_background, GeneratorConfig};

    fn mask_from(rows: &[&str]) -> Mask {
        let height = rows.len();
        let width = rows[0].len();
        let data = rows.iter().flat_map(|r| r.chars().map(|c| c == '#')).collect();
        Mask { height, width, data }
    }

    #[test]
    fn mode_of_identical_frames() {
        let f = Frame::filled(3, 3, [0.2, 0.4, 0.6]);
        let bg = compute_mode_background(&[&f, &f, &f], ModeScope::Global).unwrap();
        for (a, b) in bg.image.data().iter().zip(f.data()) {
            assert_eq!(crate::raster::to_byte(*a), crate::raster::to_byte(*b));
        }
    }

    #[test]
    fn mode_tie_breaks_low() {
        let a = Frame::filled(1, 1, [0.2, 0.2, 0.2]);
        let b = Frame::filled(1, 1, [0.8, 0.1, 0.2]);
        let bg = compute_mode_background(&[&a, &b], ModeScope::Global).unwrap();
        let p = bg.image.pixel(0, 0);
        assert_eq!(crate::raster::to_byte(p[0]), crate::raster::to_byte(0.2));
        assert_eq!(crate::raster::to_byte(p[1]), crate::raster::to_byte(0.1));
    }

    #[test]
    fn empty_batch_errors() {
        assert!(compute_mode_background(&[], ModeScope::Global).is_err());
    }

    #[test]
    fn mode_recovers_generator_background() {
        let cfg = GeneratorConfig {
            train_sequences: 32,
            test_sequences: 0,
            ..GeneratorConfig::default()
        };
        let d = generate_dataset(&cfg, 4).unwrap();
        let frames: Vec<&Frame> = d.train.iter().map(|s| &s.sequence.frames()[0]).collect();
        let bg = compute_mode_background(&frames, ModeScope::Global).unwrap();
        assert_eq!(bg.image, render_background(&cfg));
    }

    #[test]
    fn identical_frame_gives_empty_mask() {
        let f = Frame::filled(4, 4, [0.1, 0.1, 0.1]);
        let bg = ModeBackground { image: f.clone(), scope: ModeScope::Global };
        assert_eq!(extract_motion_mask(&f, &bg, 0.5).unwrap().count(), 0);
    }

    #[test]
    fn white_sprite_silhouette() {
        let bg = ModeBackground { image: Frame::filled(8, 8, [0.0; 3]), scope: ModeScope::Global };
        let mut f = bg.image.clone();
        let mut expected = Mask::zeros(8, 8);
        for (y, x) in [(2, 2), (2, 3), (3, 2), (3, 3), (4, 3)] {
            f.set_pixel(y, x, [1.0; 3]);
            expected.data[y * 8 + x] = true;
        }
        assert_eq!(extract_motion_mask(&f, &bg, 0.5).unwrap(), expected);
    }

    #[test]
    fn high_eta_suppresses_weak_contrast() {
        let bg = ModeBackground { image: Frame::filled(4, 4, [0.0; 3]), scope: ModeScope::Global };
        let f = Frame::filled(4, 4, [0.6, 0.6, 0.6]);
        assert_eq!(extract_motion_mask(&f, &bg, 0.999).unwrap().count(), 0);
    }

    #[test]
    fn diagonal_blobs_merge() {
        let m = mask_from(&[
            "##....", //
            "##....",
            "..##..",
            "..##..",
            "......",
        ]);
        let boxes = mask_to_boxes(&m, 1);
        assert_eq!(boxes.len(), 1);
        assert!(mask_to_boxes(&Mask::zeros(4, 4), 1).is_empty());
    }

    #[test]
    fn min_area_drops_specks() {
        let m = mask_from(&[
            "#.....", //
            "......",
            "..##..",
            "..##..",
        ]);
        assert_eq!(mask_to_boxes(&m, 4).len(), 1);
        assert_eq!(mask_to_boxes(&m, 1).len(), 2);
    }

    #[test]
    fn largest_box_wins_a_cell() {
        let small = BoundingBox::new(0.1, 0.1, 0.2, 0.2); // area 0.01
        let big = BoundingBox::new(0.05, 0.05, 0.25, 0.25); // area 0.04
        let (pres, loc) = boxes_to_grid(&[small, big], 2, 2);
        assert_eq!(pres, vec![1.0, 0.0, 0.0, 0.0]);
        let back = zwhere_to_box(&loc[0].unwrap());
        for (a, b) in back.as_array().iter().zip(big.as_array()) {
            assert!((a - b).abs() < 1e-9);
        }
        let (pres, _) = boxes_to_grid(&[], 3, 3);
        assert!(pres.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn prior_counts_moving_sprites() {
        let cfg = GeneratorConfig {
            train_sequences: 16,
            test_sequences: 0,
            ..GeneratorConfig::default()
        };
        let d = generate_dataset(&cfg, 21).unwrap();
        let bg = ModeBackground { image: render_background(&cfg), scope: ModeScope::Global };
        let params = MotionParams::default();
        let static_prior = extract_motion_prior(&bg.image, &bg, &params, 16, 16).unwrap();
        assert_eq!(static_prior.count, 0);

        let mut checked = 0;
        for seq in &d.train {
            let frame = &seq.sequence.frames()[0];
            let gt: Vec<_> = seq.labels[0].iter().filter(|o| o.relevant).collect();
            // only frames whose sprites keep a clear gap
            let separated = gt.iter().enumerate().all(|(i, a)| {
                gt[i + 1..].iter().all(|b| {
                    a.bbox.x_max + 0.02 < b.bbox.x_min
                        || b.bbox.x_max + 0.02 < a.bbox.x_min
                        || a.bbox.y_max + 0.02 < b.bbox.y_min
                        || b.bbox.y_max + 0.02 < a.bbox.y_min
                })
            });
            if !separated {
                continue;
            }
            let prior = extract_motion_prior(frame, &bg, &params, 16, 16).unwrap();
            assert_eq!(prior.boxes.len(), gt.len());
            for g in &gt {
                assert!(prior
                    .boxes
                    .iter()
                    .any(|b| center_divergence(b, &g.bbox).unwrap() <= 0.1));
            }
            let alpha_pixels = prior.alpha_hat.count();
            assert!(prior.count <= prior.boxes.len() && prior.boxes.len() <= alpha_pixels);
            checked += 1;
        }
        assert!(checked > 8);
    }

    #[test]
    fn static_sprite_in_background_batch_is_invisible() {
        let mut base = Frame::filled(16, 16, [0.0; 3]);
        for y in 4..8 {
            for x in 4..8 {
                base.set_pixel(y, x, [0.0, 1.0, 0.0]);
            }
        }
        let bg = compute_mode_background(&[&base, &base, &base], ModeScope::Local).unwrap();
        let prior = extract_motion_prior(&base, &bg, &MotionParams::default(), 4, 4).unwrap();
        assert_eq!(prior.count, 0);
        assert!(prior.boxes.is_empty());
    }
}
