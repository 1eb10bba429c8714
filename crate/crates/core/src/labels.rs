//! Semantic-vector labeling of feature positions from ground-truth boxes.
//!
//! A class is present in a feature's receptive field when the overlap with
//! one of its boxes covers at least `zeta` of the smaller of the two areas.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rf::{ConvStackSpec, FieldRect, Taps};
use crate::scene::{sanitize_boxes, BoxAnnotation};

pub const DEFAULT_ZETA: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelingConfig {
    pub zeta: f64,
    pub num_classes: usize,
}

impl LabelingConfig {
    pub fn new(zeta: f64, num_classes: usize) -> Result<Self> {
        let cfg = Self { zeta, num_classes };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.zeta > 0.0 && self.zeta <= 1.0) {
            return Err(Error::InvalidConfig(format!("zeta must lie in (0, 1], got {}", self.zeta)));
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidConfig("num_classes must be >= 1".into()));
        }
        Ok(())
    }
}

/// K-dimensional 0/1 class indicator for one receptive field.
pub fn label_semantic_vector(boxes: &[BoxAnnotation], num_classes: usize, zeta: f64, field: &FieldRect) -> Result<Vec<u8>> {
    let field_area = field.area();
    if field_area <= 0 {
        return Err(Error::ZeroAreaField);
    }
    let mut vector = vec![0u8; num_classes];
    for b in boxes {
        if b.class_id >= num_classes {
            return Err(Error::OutOfRange {
                what: "class id",
                index: b.class_id as i64,
                valid: format!("0..{num_classes}"),
            });
        }
        let rect = b.rect();
        let box_area = rect.area();
        if box_area <= 0 {
            continue;
        }
        let expected = field_area.min(box_area);
        let overlap = rect.intersection_area(field);
        if overlap as f64 / expected as f64 >= zeta {
            vector[b.class_id] = 1;
        }
    }
    Ok(vector)
}

/// Row-major `rows × cols` 0/1 map.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMap {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u8>,
}

impl BinaryMap {
    pub fn get(&self, u: usize, v: usize) -> u8 {
        self.data[u * self.cols + v]
    }
}

/// `K × rows × cols` 0/1 map, class-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMap {
    pub classes: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u8>,
}

impl ClassMap {
    pub fn get(&self, c: usize, u: usize, v: usize) -> u8 {
        self.data[(c * self.rows + u) * self.cols + v]
    }

    /// Any-class OR over the channel axis.
    pub fn collapse(&self) -> BinaryMap {
        let plane = self.rows * self.cols;
        let data = (0..plane)
            .map(|p| (0..self.classes).any(|c| self.data[c * plane + p] == 1) as u8)
            .collect();
        BinaryMap {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticLabelMaps {
    pub local: BinaryMap,
    pub mid: ClassMap,
    pub global_vec: Vec<u8>,
}

fn label_grid(
    boxes: &[BoxAnnotation],
    image: (usize, usize),
    stack: &ConvStackSpec,
    layer: usize,
    cfg: &LabelingConfig,
) -> Result<(usize, usize, Vec<Vec<u8>>)> {
    cfg.validate()?;
    let boxes = sanitize_boxes(boxes, image.0, image.1);
    let (rows, cols) = stack.grid_size(layer, image)?;
    let mut vectors = Vec::with_capacity(rows * cols);
    for u in 0..rows {
        for v in 0..cols {
            let field = stack.project_field(layer, u, v, image)?;
            vectors.push(label_semantic_vector(&boxes, cfg.num_classes, cfg.zeta, &field)?);
        }
    }
    Ok((rows, cols, vectors))
}

/// Foreground/background map at layer `layer`.
pub fn label_map_local(
    boxes: &[BoxAnnotation],
    image: (usize, usize),
    stack: &ConvStackSpec,
    layer: usize,
    cfg: &LabelingConfig,
) -> Result<BinaryMap> {
    let (rows, cols, vectors) = label_grid(boxes, image, stack, layer, cfg)?;
    Ok(BinaryMap {
        rows,
        cols,
        data: vectors.iter().map(|v| v.iter().any(|&x| x == 1) as u8).collect(),
    })
}

/// Per-position semantic vectors at layer `layer`.
pub fn label_map_mid(
    boxes: &[BoxAnnotation],
    image: (usize, usize),
    stack: &ConvStackSpec,
    layer: usize,
    cfg: &LabelingConfig,
) -> Result<ClassMap> {
    let (rows, cols, vectors) = label_grid(boxes, image, stack, layer, cfg)?;
    let k = cfg.num_classes;
    let plane = rows * cols;
    let mut data = vec![0u8; k * plane];
    for (p, vec) in vectors.iter().enumerate() {
        for (c, &bit) in vec.iter().enumerate() {
            data[c * plane + p] = bit;
        }
    }
    Ok(ClassMap {
        classes: k,
        rows,
        cols,
        data,
    })
}

/// Classes present anywhere in the scene.
pub fn label_global(boxes: &[BoxAnnotation], num_classes: usize) -> Vec<u8> {
    let mut out = vec![0u8; num_classes];
    for b in boxes {
        if b.class_id < num_classes && b.rect().area() > 0 {
            out[b.class_id] = 1;
        }
    }
    out
}

/// All three target maps for a scene, with the local map at tap F1 and the
/// mid map at tap F2.
pub fn label_scene(
    boxes: &[BoxAnnotation],
    image: (usize, usize),
    stack: &ConvStackSpec,
    taps: &Taps,
    cfg: &LabelingConfig,
) -> Result<SemanticLabelMaps> {
    taps.validate(stack)?;
    let clipped = sanitize_boxes(boxes, image.0, image.1);
    Ok(SemanticLabelMaps {
        local: label_map_local(&clipped, image, stack, taps.f1, cfg)?,
        mid: label_map_mid(&clipped, image, stack, taps.f2, cfg)?,
        global_vec: label_global(&clipped, cfg.num_classes),
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::rf::LayerSpec;

    /// Counts covered pixels one by one and applies the presence rule.
    fn raster_vector(boxes: &[BoxAnnotation], k: usize, zeta: f64, field: &FieldRect) -> Vec<u8> {
        let inside = |r: &FieldRect, x: i64, y: i64| x >= r.x0 && x < r.x1 && y >= r.y0 && y < r.y1;
        let count = |r: &FieldRect| (r.y0..r.y1).flat_map(|y| (r.x0..r.x1).map(move |x| (x, y))).count() as i64;
        let sw = count(field);
        let mut out = vec![0u8; k];
        for b in boxes {
            let r = b.rect();
            let sg = count(&r);
            if sg == 0 {
                continue;
            }
            let mut inter = 0i64;
            for y in r.y0..r.y1 {
                for x in r.x0..r.x1 {
                    if inside(field, x, y) {
                        inter += 1;
                    }
                }
            }
            if inter as f64 / sw.min(sg) as f64 >= zeta {
                out[b.class_id] = 1;
            }
        }
        out
    }

    fn field10() -> FieldRect {
        FieldRect::new(0, 0, 10, 10)
    }

    #[test]
    fn box_fully_inside_field() {
        let boxes = [BoxAnnotation::new(2, 2, 4, 4, 3)];
        assert_eq!(label_semantic_vector(&boxes, 5, 0.6, &field10()).unwrap(), vec![0, 0, 0, 1, 0]);
    }

    #[test]
    fn disjoint_box_gives_zero_vector() {
        let boxes = [BoxAnnotation::new(20, 20, 30, 30, 1)];
        for zeta in [0.01, 0.6, 1.0] {
            assert_eq!(label_semantic_vector(&boxes, 3, zeta, &field10()).unwrap(), vec![0, 0, 0]);
        }
    }

    #[test]
    fn partial_overlap_below_threshold() {
        let boxes = [BoxAnnotation::new(8, 0, 18, 10, 0)];
        let v = label_semantic_vector(&boxes, 2, 0.6, &field10()).unwrap();
        assert_eq!(v, vec![0, 0]);
        assert_eq!(raster_vector(&boxes, 2, 0.6, &field10()), v);
        // ratio is exactly 0.2: at the boundary it counts as present
        assert_eq!(label_semantic_vector(&boxes, 2, 0.2, &field10()).unwrap(), vec![1, 0]);
    }

    #[test]
    fn zero_area_field_and_empty_boxes() {
        assert!(matches!(
            label_semantic_vector(&[], 3, 0.6, &FieldRect::new(0, 0, 0, 5)),
            Err(Error::ZeroAreaField)
        ));
        assert_eq!(label_semantic_vector(&[], 3, 0.6, &field10()).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn zeta_validation() {
        assert!(LabelingConfig::new(0.0, 3).is_err());
        assert!(LabelingConfig::new(1.2, 3).is_err());
        assert!(LabelingConfig::new(1.0, 3).is_ok());
    }

    fn stack() -> ConvStackSpec {
        ConvStackSpec::new(vec![
            LayerSpec::new(3, 2, 1),
            LayerSpec::new(3, 1, 1),
            LayerSpec::new(3, 2, 1),
            LayerSpec::new(3, 1, 1),
        ])
        .unwrap()
    }

    #[test]
    fn empty_scene_maps_are_zero() {
        let cfg = LabelingConfig::new(0.6, 3).unwrap();
        let taps = Taps { f1: 2, f2: 3, f3: 4 };
        let maps = label_scene(&[], (32, 32), &stack(), &taps, &cfg).unwrap();
        assert!(maps.local.data.iter().all(|&x| x == 0));
        assert!(maps.mid.data.iter().all(|&x| x == 0));
        assert_eq!(maps.global_vec, vec![0, 0, 0]);
    }

    #[test]
    fn full_image_box_lights_everything() {
        let cfg = LabelingConfig::new(1.0, 3).unwrap();
        let boxes = [BoxAnnotation::new(0, 0, 32, 32, 1)];
        let local = label_map_local(&boxes, (32, 32), &stack(), 2, &cfg).unwrap();
        assert!(local.data.iter().all(|&x| x == 1));
        let mid = label_map_mid(&boxes, (32, 32), &stack(), 4, &cfg).unwrap();
        let plane = mid.rows * mid.cols;
        assert!(mid.data[plane..2 * plane].iter().all(|&x| x == 1));
        assert!(mid.data[..plane].iter().all(|&x| x == 0));
        assert!(mid.data[2 * plane..].iter().all(|&x| x == 0));
    }

    #[test]
    fn small_centered_box_matches_oracle() {
        let cfg = LabelingConfig::new(0.6, 2).unwrap();
        let boxes = [BoxAnnotation::new(13, 14, 19, 18, 0)];
        let s = stack();
        let local = label_map_local(&boxes, (32, 32), &s, 2, &cfg).unwrap();
        let mut ones = 0;
        for u in 0..local.rows {
            for v in 0..local.cols {
                let field = s.project_field(2, u, v, (32, 32)).unwrap();
                let expect = raster_vector(&boxes, 2, 0.6, &field).iter().any(|&x| x == 1) as u8;
                assert_eq!(local.get(u, v), expect);
                ones += expect as usize;
                if expect == 1 {
                    // ones stay near the box center
                    assert!((5..=10).contains(&u) && (5..=10).contains(&v), "({u},{v})");
                }
            }
        }
        assert!(ones > 0);
    }

    #[test]
    fn opposite_corners_and_mixed_overlap() {
        let cfg = LabelingConfig::new(0.6, 2).unwrap();
        let boxes = [BoxAnnotation::new(0, 0, 8, 8, 0), BoxAnnotation::new(24, 24, 32, 32, 1)];
        let s = stack();
        let mid = label_map_mid(&boxes, (32, 32), &s, 4, &cfg).unwrap();
        assert_eq!((mid.get(0, 0, 0), mid.get(1, 0, 0)), (1, 0));
        let last = mid.rows - 1;
        assert_eq!((mid.get(0, last, last), mid.get(1, last, last)), (0, 1));

        // overlapping boxes of two classes: the shared field carries both
        let boxes = [BoxAnnotation::new(8, 8, 16, 16, 0), BoxAnnotation::new(12, 12, 20, 20, 1)];
        let mid = label_map_mid(&boxes, (32, 32), &s, 4, &cfg).unwrap();
        let both = (0..mid.rows)
            .flat_map(|u| (0..mid.cols).map(move |v| (u, v)))
            .filter(|&(u, v)| mid.get(0, u, v) == 1 && mid.get(1, u, v) == 1)
            .count();
        assert!(both > 0);
        for u in 0..mid.rows {
            for v in 0..mid.cols {
                let field = s.project_field(4, u, v, (32, 32)).unwrap();
                let expect = raster_vector(&boxes, 2, 0.6, &field);
                assert_eq!(vec![mid.get(0, u, v), mid.get(1, u, v)], expect);
            }
        }
    }

    #[test]
    fn global_union() {
        assert_eq!(label_global(&[], 3), vec![0, 0, 0]);
        let boxes = [BoxAnnotation::new(0, 0, 2, 2, 1), BoxAnnotation::new(3, 3, 6, 6, 4)];
        assert_eq!(label_global(&boxes, 5), vec![0, 1, 0, 0, 1]);
        let dup = [boxes[0], boxes[0]];
        assert_eq!(label_global(&dup, 5), label_global(&boxes[..1], 5));
    }

    fn arb_boxes() -> impl Strategy<Value = Vec<BoxAnnotation>> {
        prop::collection::vec((0i64..30, 0i64..30, 1i64..14, 1i64..14, 0usize..3), 0..5)
            .prop_map(|v| v.into_iter().map(|(x, y, w, h, c)| BoxAnnotation::new(x, y, x + w, y + h, c)).collect())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn raising_zeta_never_adds_ones(boxes in arb_boxes(), lo in 0.05f64..1.0, delta in 0.0f64..0.5) {
            let hi = (lo + delta).min(1.0);
            let s = stack();
            let a = label_map_mid(&boxes, (32, 32), &s, 3, &LabelingConfig::new(lo, 3).unwrap()).unwrap();
            let b = label_map_mid(&boxes, (32, 32), &s, 3, &LabelingConfig::new(hi, 3).unwrap()).unwrap();
            prop_assert!(a.data.iter().zip(&b.data).all(|(x, y)| y <= x));
        }

        #[test]
        fn mid_collapse_equals_local_on_same_layer(boxes in arb_boxes(), zeta in 0.05f64..1.0) {
            let s = stack();
            let cfg = LabelingConfig::new(zeta, 3).unwrap();
            for layer in 1..=4 {
                let mid = label_map_mid(&boxes, (32, 32), &s, layer, &cfg).unwrap();
                let local = label_map_local(&boxes, (32, 32), &s, layer, &cfg).unwrap();
                prop_assert_eq!(mid.collapse(), local);
            }
        }

        #[test]
        fn maps_invariant_under_box_reordering(mut boxes in arb_boxes(), zeta in 0.05f64..1.0) {
            let s = stack();
            let cfg = LabelingConfig::new(zeta, 3).unwrap();
            let taps = Taps { f1: 2, f2: 3, f3: 4 };
            let a = label_scene(&boxes, (32, 32), &s, &taps, &cfg).unwrap();
            boxes.reverse();
            let b = label_scene(&boxes, (32, 32), &s, &taps, &cfg).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
