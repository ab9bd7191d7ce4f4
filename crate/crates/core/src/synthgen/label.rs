use serde::{Deserialize, Serialize};

use super::GroundTruthObject;
use crate::error::{MocError, Result};
use crate::geometry::{BoundingBox, Frame};
use crate::motion::connected_components;
use crate::raster::to_byte;

/// Maps a class to the exact color it is drawn with, plus the box size
/// range used to tell apart classes that share a color.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub class: usize,
    pub color: [u8; 3],
    /// Minimum `[width, height]`, normalized.
    pub min_size: [f64; 2],
    /// Maximum `[width, height]`, normalized.
    pub max_size: [f64; 2],
}

impl PaletteEntry {
    fn admits(&self, b: &BoundingBox) -> bool {
        let (w, h) = (b.width(), b.height());
        w >= self.min_size[0] && h >= self.min_size[1] && w <= self.max_size[0] && h <= self.max_size[1]
    }
}

/// Extracts labeled boxes from exact color matches: each 8-connected blob
/// of a palette color becomes one object, assigned to the first palette
/// entry of that color whose size range admits it.
pub fn color_label(frame: &Frame, palette: &[PaletteEntry]) -> Result<Vec<GroundTruthObject>> {
    if palette.is_empty() {
        return Err(MocError::Empty("palette".into()));
    }
    let (h, w) = (frame.height(), frame.width());
    let bytes: Vec<u8> = frame.data().iter().map(|&v| to_byte(v)).collect();

    let mut colors: Vec<[u8; 3]> = Vec::new();
    for e in palette {
        if !colors.contains(&e.color) {
            colors.push(e.color);
        }
    }

    let mut out = Vec::new();
    for color in colors {
        let mask: Vec<bool> = bytes.chunks_exact(3).map(|p| p == color).collect();
        for comp in connected_components(&mask, h, w) {
            let b = comp.normalized_box(h, w);
            if let Some(entry) = palette.iter().find(|e| e.color == color && e.admits(&b)) {
                out.push(GroundTruthObject {
                    bbox: b,
                    class: entry.class,
                    relevant: true,
                });
            }
        }
    }
    Ok(out)
}

/// Box predicate over `y = y_min` and `y_max`, as used to restrict labels
/// to the playing field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Always,
    /// `threshold < y_min`
    YMinAbove(f64),
    /// `y_min < threshold`
    YMinBelow(f64),
    /// `y_max < threshold`
    YMaxBelow(f64),
    And(Vec<Condition>),
    Or(Vec<Condition>),
}

impl Condition {
    pub fn holds(&self, b: &BoundingBox) -> bool {
        match self {
            Condition::Always => true,
            Condition::YMinAbove(t) => *t < b.y_min,
            Condition::YMinBelow(t) => b.y_min < *t,
            Condition::YMaxBelow(t) => b.y_max < *t,
            Condition::And(cs) => cs.iter().all(|c| c.holds(b)),
            Condition::Or(cs) => cs.iter().any(|c| c.holds(b)),
        }
    }
}

/// Per-class relevance conditions with a fallback for unlisted classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceRule {
    pub default: Condition,
    #[serde(default)]
    pub per_class: Vec<(usize, Condition)>,
}

impl RelevanceRule {
    pub fn uniform(condition: Condition) -> Self {
        Self {
            default: condition,
            per_class: Vec::new(),
        }
    }

    pub fn condition_for(&self, class: usize) -> &Condition {
        self.per_class
            .iter()
            .find(|(c, _)| *c == class)
            .map(|(_, cond)| cond)
            .unwrap_or(&self.default)
    }
}

/// Marks objects failing their class condition as irrelevant. Objects that
/// pass keep their current flag, so the filter is idempotent.
pub fn relevance_filter(objects: &[GroundTruthObject], rule: &RelevanceRule) -> Vec<GroundTruthObject> {
    objects
        .iter()
        .map(|o| GroundTruthObject {
            relevant: o.relevant && rule.condition_for(o.class).holds(&o.bbox),
            ..*o
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::center_divergence;
    use crate::synthgen::{generate_dataset, GeneratorConfig};

    fn obj(y0: f64, y1: f64) -> GroundTruthObject {
        GroundTruthObject {
            bbox: BoundingBox::new(0.4, y0, 0.5, y1),
            class: 0,
            relevant: true,
        }
    }

    #[test]
    fn single_threshold_condition() {
        let rule = RelevanceRule::uniform(Condition::YMinAbove(0.063));
        let out = relevance_filter(&[obj(0.05, 0.1)], &rule);
        assert!(!out[0].relevant);
        let out = relevance_filter(&[obj(0.07, 0.1)], &rule);
        assert!(out[0].relevant);
    }

    #[test]
    fn two_band_condition_rejects_straddling_object() {
        let cond = Condition::Or(vec![
            Condition::And(vec![Condition::YMinAbove(0.063), Condition::YMaxBelow(0.469)]),
            Condition::And(vec![Condition::YMinAbove(0.531), Condition::YMaxBelow(0.906)]),
        ]);
        let rule = RelevanceRule::uniform(cond);
        let out = relevance_filter(&[obj(0.4, 0.6), obj(0.1, 0.3), obj(0.6, 0.8)], &rule);
        assert_eq!(
            out.iter().map(|o| o.relevant).collect::<Vec<_>>(),
            vec![false, true, true]
        );
    }

    #[test]
    fn always_is_identity_and_filter_is_idempotent() {
        let objs = vec![obj(0.05, 0.1), obj(0.3, 0.4)];
        assert_eq!(relevance_filter(&objs, &RelevanceRule::uniform(Condition::Always)), objs);
        let rule = RelevanceRule::uniform(Condition::YMinAbove(0.1));
        let once = relevance_filter(&objs, &rule);
        assert_eq!(relevance_filter(&once, &rule), once);
    }

    #[test]
    fn per_class_condition_overrides_default() {
        let rule = RelevanceRule {
            default: Condition::Always,
            per_class: vec![(0, Condition::YMinBelow(0.2))],
        };
        let mut o = obj(0.3, 0.4);
        assert!(!relevance_filter(&[o], &rule)[0].relevant);
        o.class = 1;
        assert!(relevance_filter(&[o], &rule)[0].relevant);
    }

    #[test]
    fn empty_palette_is_an_error() {
        let f = Frame::filled(4, 4, [0.0; 3]);
        assert!(color_label(&f, &[]).is_err());
    }

    #[test]
    fn uniform_frame_has_no_objects() {
        let cfg = GeneratorConfig::default();
        let f = Frame::filled(16, 16, [20.0 / 255.0, 20.0 / 255.0, 30.0 / 255.0]);
        assert!(color_label(&f, &cfg.palette()).unwrap().is_empty());
    }

    #[test]
    fn separated_same_color_blobs_are_two_objects() {
        let mut f = Frame::filled(10, 10, [0.0; 3]);
        for y in 2..5 {
            for x in 1..4 {
                f.set_pixel(y, x, [1.0, 0.0, 0.0]);
            }
            for x in 5..8 {
                f.set_pixel(y, x, [1.0, 0.0, 0.0]);
            }
        }
        let palette = [PaletteEntry {
            class: 3,
            color: [255, 0, 0],
            min_size: [0.0, 0.0],
            max_size: [1.0, 1.0],
        }];
        let objs = color_label(&f, &palette).unwrap();
        assert_eq!(objs.len(), 2);
        assert!(objs.iter().all(|o| o.class == 3));
    }

    #[test]
    fn shared_color_disambiguated_by_size() {
        let mut f = Frame::filled(20, 20, [0.0; 3]);
        for y in 1..3 {
            for x in 1..3 {
                f.set_pixel(y, x, [1.0, 1.0, 1.0]);
            }
        }
        for y in 8..18 {
            for x in 8..18 {
                f.set_pixel(y, x, [1.0, 1.0, 1.0]);
            }
        }
        let palette = [
            PaletteEntry { class: 0, color: [255; 3], min_size: [0.0, 0.0], max_size: [0.2, 0.2] },
            PaletteEntry { class: 1, color: [255; 3], min_size: [0.3, 0.3], max_size: [1.0, 1.0] },
        ];
        let mut objs = color_label(&f, &palette).unwrap();
        objs.sort_by(|a, b| a.class.cmp(&b.class));
        assert_eq!(objs.len(), 2);
        assert_eq!(objs[0].bbox.as_array(), [0.05, 0.05, 0.15, 0.15]);
        assert_eq!(objs[1].class, 1);
    }

    #[test]
    fn labels_reproduce_generator_ground_truth() {
        let cfg = GeneratorConfig {
            train_sequences: 20,
            test_sequences: 0,
            ..GeneratorConfig::default()
        };
        let d = generate_dataset(&cfg, 11).unwrap();
        let palette = cfg.palette();
        let px = 1.0 / cfg.width as f64;
        let (mut total, mut hits) = (0, 0);
        for seq in &d.train {
            for (frame, gt) in seq.sequence.frames().iter().zip(&seq.labels) {
                let found = color_label(frame, &palette).unwrap();
                for g in gt {
                    total += 1;
                    let ok = found.iter().any(|f| {
                        f.class == g.class
                            && f.bbox
                                .as_array()
                                .iter()
                                .zip(g.bbox.as_array())
                                .all(|(a, b)| (a - b).abs() <= px + 1e-9)
                            && center_divergence(&f.bbox, &g.bbox).unwrap() <= 0.1
                    });
                    hits += ok as usize;
                }
            }
        }
        assert!(hits as f64 >= 0.99 * total as f64, "{hits}/{total}");
    }
}
