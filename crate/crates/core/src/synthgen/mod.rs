//! Deterministic moving-sprite sequences with exact labels.
//!
//! Every sequence draws from its own ChaCha stream derived from the master
//! seed, the split and the sequence index, so generation order never
//! changes the output.

mod io;
mod label;

pub use io::{load_dataset, save_dataset, Manifest};
pub use label::{color_label, relevance_filter, Condition, PaletteEntry, RelevanceRule};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MocError, Result};
use crate::geometry::{BoundingBox, Frame, FrameSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Rectangle,
    Disc,
    Cross,
}

/// One sprite class as configured: the per-instance velocity is sampled
/// from `speed` at spawn time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpriteClass {
    pub name: String,
    pub shape: Shape,
    pub color: [u8; 3],
    /// `[width, height]` in normalized units.
    pub size: [f64; 2],
    /// `[min, max]` speed in normalized units per frame.
    pub speed: [f64; 2],
    pub moving: bool,
}

/// A static overlay drawn at the same place in every frame and labeled
/// irrelevant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HudObject {
    pub name: String,
    pub color: [u8; 3],
    /// `[x_min, y_min, x_max, y_max]`, must lie inside the HUD band.
    pub rect: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    pub seq_len: usize,
    pub train_sequences: usize,
    pub test_sequences: usize,
    pub background: [u8; 3],
    /// Static separator line drawn at the bottom of the HUD band.
    pub separator: [u8; 3],
    /// Height of the top margin band reserved for HUD objects.
    pub hud_band: f64,
    pub classes: Vec<SpriteClass>,
    pub hud: Vec<HudObject>,
    /// Inclusive range of sprites spawned per sequence.
    pub sprites_per_sequence: [usize; 2],
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            seq_len: crate::geometry::DEFAULT_SEQUENCE_LEN,
            train_sequences: 256,
            test_sequences: 64,
            background: [20, 20, 30],
            separator: [90, 90, 90],
            hud_band: 0.1,
            classes: vec![
                SpriteClass {
                    name: "disc".into(),
                    shape: Shape::Disc,
                    color: [230, 40, 40],
                    size: [0.1, 0.1],
                    speed: [0.02, 0.035],
                    moving: true,
                },
                SpriteClass {
                    name: "block".into(),
                    shape: Shape::Rectangle,
                    color: [40, 220, 60],
                    size: [0.08, 0.12],
                    speed: [0.02, 0.035],
                    moving: true,
                },
                SpriteClass {
                    name: "cross".into(),
                    shape: Shape::Cross,
                    color: [60, 120, 255],
                    size: [0.12, 0.12],
                    speed: [0.02, 0.035],
                    moving: true,
                },
                SpriteClass {
                    name: "bar".into(),
                    shape: Shape::Rectangle,
                    color: [240, 220, 40],
                    size: [0.14, 0.06],
                    speed: [0.02, 0.035],
                    moving: true,
                },
            ],
            hud: vec![
                HudObject {
                    name: "score".into(),
                    color: [230, 230, 230],
                    rect: [0.05, 0.02, 0.25, 0.07],
                },
                HudObject {
                    name: "lives".into(),
                    color: [200, 100, 220],
                    rect: [0.8, 0.02, 0.95, 0.07],
                },
            ],
            sprites_per_sequence: [2, 4],
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(MocError::Config("frame size must be positive".into()));
        }
        if self.seq_len == 0 {
            return Err(MocError::Config("seq_len must be positive".into()));
        }
        if self.classes.len() < 2 {
            return Err(MocError::Config("need at least two sprite classes".into()));
        }
        if !self.classes.iter().any(|c| c.moving) {
            return Err(MocError::Config("need at least one moving class".into()));
        }
        if !(0.0..1.0).contains(&self.hud_band) {
            return Err(MocError::Config("hud_band must lie in [0, 1)".into()));
        }
        let field_h = 1.0 - self.hud_band;
        for c in &self.classes {
            let [w, h] = c.size;
            if !(w > 0.0 && h > 0.0) {
                return Err(MocError::Config(format!("class {}: size must be positive", c.name)));
            }
            if w >= 1.0 || h >= field_h {
                return Err(MocError::Config(format!(
                    "class {}: sprite size {w}x{h} exceeds the frame",
                    c.name
                )));
            }
            let [lo, hi] = c.speed;
            if c.moving && !(lo > 0.0 && hi >= lo) {
                return Err(MocError::Config(format!(
                    "class {}: moving classes need 0 < speed[0] <= speed[1]",
                    c.name
                )));
            }
        }
        let mut colors: Vec<[u8; 3]> = self.classes.iter().map(|c| c.color).collect();
        colors.extend(self.hud.iter().map(|h| h.color));
        for (i, a) in colors.iter().enumerate() {
            if *a == self.background || *a == self.separator {
                return Err(MocError::Config(format!("color {a:?} collides with the background palette")));
            }
            if colors[..i].contains(a) {
                return Err(MocError::Config(format!("color {a:?} used twice")));
            }
        }
        for h in &self.hud {
            let [x0, y0, x1, y1] = h.rect;
            if !(0.0 <= x0 && x0 < x1 && x1 <= 1.0 && 0.0 <= y0 && y0 < y1 && y1 <= self.hud_band) {
                return Err(MocError::Config(format!("hud {} must lie inside the HUD band", h.name)));
            }
        }
        let [lo, hi] = self.sprites_per_sequence;
        if lo > hi {
            return Err(MocError::Config("sprites_per_sequence must be [min, max]".into()));
        }
        Ok(())
    }

    /// Class id of the first HUD object; HUD ids follow the sprite classes.
    pub fn hud_class(&self, hud_index: usize) -> usize {
        self.classes.len() + hud_index
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len() + self.hud.len()
    }

    /// Palette covering every sprite and HUD class, with size bounds that
    /// tolerate one pixel of rasterization slack.
    pub fn palette(&self) -> Vec<PaletteEntry> {
        let px = 1.0 / self.width.min(self.height) as f64;
        let mut out: Vec<PaletteEntry> = self
            .classes
            .iter()
            .enumerate()
            .map(|(i, c)| PaletteEntry {
                class: i,
                color: c.color,
                min_size: [c.size[0] * 0.5, c.size[1] * 0.5],
                max_size: [c.size[0] + 2.0 * px, c.size[1] + 2.0 * px],
            })
            .collect();
        out.extend(self.hud.iter().enumerate().map(|(i, h)| PaletteEntry {
            class: self.hud_class(i),
            color: h.color,
            min_size: [0.0, 0.0],
            max_size: [1.0, 1.0],
        }));
        out
    }

    /// Relevance rule keeping objects below the HUD band.
    pub fn relevance_rule(&self) -> RelevanceRule {
        RelevanceRule::uniform(Condition::YMinAbove(self.hud_band * 0.5))
    }
}

/// A spawned sprite instance.
#[derive(Debug, Clone, PartialEq)]
pub struct SpriteSpec {
    pub class: usize,
    pub shape: Shape,
    pub color: [u8; 3],
    pub size: [f64; 2],
    pub velocity: [f64; 2],
    pub moving: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    #[serde(flatten)]
    pub bbox: BoundingBox,
    pub class: usize,
    pub relevant: bool,
}

/// A rendered sequence with per-frame labels. Within each frame, sprites
/// are listed in spawn order followed by HUD objects, so an object keeps
/// its list index across frames.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSequence {
    pub sequence: FrameSequence,
    pub labels: Vec<Vec<GroundTruthObject>>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: GeneratorConfig,
    pub seed: u64,
    pub train: Vec<LabeledSequence>,
    pub test: Vec<LabeledSequence>,
}

impl Dataset {
    pub fn all_sequences(&self) -> impl Iterator<Item = &LabeledSequence> {
        self.train.iter().chain(self.test.iter())
    }
}

#[derive(Debug, Clone, Copy)]
enum Split {
    Train,
    Test,
}

/// Per-sequence seed: distinct streams for every (seed, split, index).
fn sequence_seed(master: u64, split: Split, index: usize) -> u64 {
    let tag = match split {
        Split::Train => 0x7472_6169_6e00_0000u64,
        Split::Test => 0x7465_7374_0000_0000u64,
    };
    // splitmix64 finalizer
    let mut z = master ^ tag ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn generate_dataset(config: &GeneratorConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let background = render_background(config);
    let train = (0..config.train_sequences)
        .map(|k| generate_sequence(config, &background, sequence_seed(seed, Split::Train, k)))
        .collect();
    let test = (0..config.test_sequences)
        .map(|k| generate_sequence(config, &background, sequence_seed(seed, Split::Test, k)))
        .collect();
    Ok(Dataset {
        config: config.clone(),
        seed,
        train,
        test,
    })
}

/// The static scene every sequence is drawn on: background color, HUD band
/// separator and HUD objects.
pub fn render_background(config: &GeneratorConfig) -> Frame {
    let (h, w) = (config.height, config.width);
    let mut frame = Frame::filled(h, w, rgb(config.background));
    if config.hud_band > 0.0 {
        let y = ((config.hud_band * h as f64).round() as usize).min(h - 1);
        for x in 0..w {
            frame.set_pixel(y, x, rgb(config.separator));
        }
    }
    for hud in &config.hud {
        let [x0, y0, x1, y1] = hud.rect;
        let b = BoundingBox::new(x0, y0, x1, y1);
        paint(&mut frame, Shape::Rectangle, &b, rgb(hud.color));
    }
    frame
}

fn rgb(c: [u8; 3]) -> [f32; 3] {
    [c[0] as f32 / 255.0, c[1] as f32 / 255.0, c[2] as f32 / 255.0]
}

/// Rounds a label coordinate to the 6-decimal precision used on disk.
fn micro(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

/// Advances a sprite center one frame, reflecting off the field edges.
/// Returns the new center and velocity.
pub fn step_sprite(
    center: [f64; 2],
    velocity: [f64; 2],
    size: [f64; 2],
    field: [f64; 4],
) -> ([f64; 2], [f64; 2]) {
    let mut c = center;
    let mut v = velocity;
    for axis in 0..2 {
        let half = size[axis] / 2.0;
        let (lo, hi) = (field[axis] + half, field[axis + 2] - half);
        c[axis] += v[axis];
        if c[axis] < lo {
            c[axis] = 2.0 * lo - c[axis];
            v[axis] = -v[axis];
        } else if c[axis] > hi {
            c[axis] = 2.0 * hi - c[axis];
            v[axis] = -v[axis];
        }
        c[axis] = c[axis].clamp(lo, hi);
    }
    (c, v)
}

fn generate_sequence(config: &GeneratorConfig, background: &Frame, seed: u64) -> LabeledSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let field = [0.0, config.hud_band, 1.0, 1.0];
    let px = 1.0 / config.width.min(config.height) as f64;

    let [lo, hi] = config.sprites_per_sequence;
    let count = rng.gen_range(lo..=hi);
    let mut sprites: Vec<(SpriteSpec, [f64; 2])> = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.gen_range(0..config.classes.len());
        let c = &config.classes[class];
        let velocity = if c.moving {
            let speed = rng.gen_range(c.speed[0]..=c.speed[1]);
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            [speed * angle.cos(), speed * angle.sin()]
        } else {
            [0.0, 0.0]
        };
        let spec = SpriteSpec {
            class,
            shape: c.shape,
            color: c.color,
            size: c.size,
            velocity,
            moving: c.moving,
        };
        // rejection-sample a spawn point that keeps a two-pixel gap to
        // earlier sprites; give up after a bounded number of tries
        let mut center = None;
        for _ in 0..64 {
            let cx = rng.gen_range(field[0] + c.size[0] / 2.0..=field[2] - c.size[0] / 2.0);
            let cy = rng.gen_range(field[1] + c.size[1] / 2.0..=field[3] - c.size[1] / 2.0);
            let clear = sprites.iter().all(|(o, oc)| {
                (cx - oc[0]).abs() > (c.size[0] + o.size[0]) / 2.0 + 2.0 * px
                    || (cy - oc[1]).abs() > (c.size[1] + o.size[1]) / 2.0 + 2.0 * px
            });
            if clear {
                center = Some([cx, cy]);
                break;
            }
        }
        if let Some(center) = center {
            sprites.push((spec, center));
        }
    }

    let mut frames = Vec::with_capacity(config.seq_len);
    let mut labels = Vec::with_capacity(config.seq_len);
    for t in 0..config.seq_len {
        if t > 0 {
            for (spec, center) in sprites.iter_mut() {
                let (c, v) = step_sprite(*center, spec.velocity, spec.size, field);
                *center = c;
                spec.velocity = v;
            }
        }
        let mut frame = background.clone();
        let mut objects = Vec::with_capacity(sprites.len() + config.hud.len());
        for (spec, center) in &sprites {
            let b = BoundingBox::new(
                micro(center[0] - spec.size[0] / 2.0),
                micro(center[1] - spec.size[1] / 2.0),
                micro(center[0] + spec.size[0] / 2.0),
                micro(center[1] + spec.size[1] / 2.0),
            );
            paint(&mut frame, spec.shape, &b, rgb(spec.color));
            objects.push(GroundTruthObject {
                bbox: b,
                class: spec.class,
                relevant: true,
            });
        }
        for (i, hud) in config.hud.iter().enumerate() {
            let [x0, y0, x1, y1] = hud.rect;
            objects.push(GroundTruthObject {
                bbox: BoundingBox::new(micro(x0), micro(y0), micro(x1), micro(y1)),
                class: config.hud_class(i),
                relevant: false,
            });
        }
        frames.push(frame);
        labels.push(objects);
    }
    LabeledSequence {
        sequence: FrameSequence::new(frames).expect("frames share the background size"),
        labels,
        seed,
    }
}

/// Hard-edged rasterization: a pixel is painted when its center falls
/// inside the shape.
fn paint(frame: &mut Frame, shape: Shape, b: &BoundingBox, color: [f32; 3]) {
    let (h, w) = (frame.height(), frame.width());
    let (cx, cy) = b.center();
    let (hw, hh) = (b.width() / 2.0, b.height() / 2.0);
    let y0 = ((b.y_min * h as f64).floor() as usize).min(h);
    let y1 = ((b.y_max * h as f64).ceil() as usize).min(h);
    let x0 = ((b.x_min * w as f64).floor() as usize).min(w);
    let x1 = ((b.x_max * w as f64).ceil() as usize).min(w);
    for y in y0..y1 {
        let py = (y as f64 + 0.5) / h as f64;
        for x in x0..x1 {
            let px = (x as f64 + 0.5) / w as f64;
            let (dx, dy) = (px - cx, py - cy);
            let inside_box = dx.abs() <= hw && dy.abs() <= hh;
            let inside = match shape {
                Shape::Rectangle => inside_box,
                Shape::Disc => (dx / hw).powi(2) + (dy / hh).powi(2) <= 1.0,
                Shape::Cross => inside_box && (dx.abs() <= hw / 3.0 || dy.abs() <= hh / 3.0),
            };
            if inside {
                frame.set_pixel(y, x, color);
            }
        }
    }
}
