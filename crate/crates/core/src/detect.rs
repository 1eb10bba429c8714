//! Dense surrogate detector on the F3 grid: per-cell objectness, multi-label
//! class scores and a box regression, plus the ranking metrics used to score
//! it. This stands in for a full two-stage detector and its numbers are not
//! comparable to detection mAP.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::net::DetOutputs;
use crate::scene::BoxAnnotation;

/// Per-cell training targets for a batch, all NCHW on the detection grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DetTargets {
    /// (N,1,H,W): 1 where some box center falls in the cell.
    pub objectness: Tensor,
    /// (N,K,H,W): classes of the boxes centered in the cell.
    pub classes: Tensor,
    /// (N,4,H,W): center offset within the cell and size relative to the
    /// image, for the largest box centered in the cell.
    pub boxes: Tensor,
}

/// Cell containing the center of `b` on a `rows × cols` grid over an
/// `(h, w)` image, plus the center in cell units.
pub fn center_cell(b: &BoxAnnotation, image: (usize, usize), grid: (usize, usize)) -> (usize, usize, f64, f64) {
    let cx = (b.x0 + b.x1) as f64 / 2.0 * grid.1 as f64 / image.1 as f64;
    let cy = (b.y0 + b.y1) as f64 / 2.0 * grid.0 as f64 / image.0 as f64;
    let col = (cx.floor() as usize).min(grid.1 - 1);
    let row = (cy.floor() as usize).min(grid.0 - 1);
    (row, col, cx, cy)
}

pub fn build_targets(batch: &[&[BoxAnnotation]], image: (usize, usize), grid: (usize, usize), num_classes: usize) -> Result<DetTargets> {
    let n = batch.len();
    let (rows, cols) = grid;
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidConfig("empty detection grid".into()));
    }
    let plane = rows * cols;
    let mut obj = vec![0.0; n * plane];
    let mut cls = vec![0.0; n * num_classes * plane];
    let mut bx = vec![0.0; n * 4 * plane];
    let mut best_area = vec![0i64; n * plane];
    for (i, boxes) in batch.iter().enumerate() {
        for b in boxes.iter() {
            if b.class_id >= num_classes {
                return Err(Error::OutOfRange {
                    what: "class id",
                    index: b.class_id as i64,
                    valid: format!("0..{num_classes}"),
                });
            }
            let (row, col, cx, cy) = center_cell(b, image, grid);
            let p = row * cols + col;
            obj[i * plane + p] = 1.0;
            cls[(i * num_classes + b.class_id) * plane + p] = 1.0;
            let area = b.rect().area();
            if area > best_area[i * plane + p] {
                best_area[i * plane + p] = area;
                let vals = [
                    cx - col as f64,
                    cy - row as f64,
                    (b.x1 - b.x0) as f64 / image.1 as f64,
                    (b.y1 - b.y0) as f64 / image.0 as f64,
                ];
                for (j, v) in vals.into_iter().enumerate() {
                    bx[(i * 4 + j) * plane + p] = v;
                }
            }
        }
    }
    Ok(DetTargets {
        objectness: Tensor::new(&[n, 1, rows, cols], obj)?,
        classes: Tensor::new(&[n, num_classes, rows, cols], cls)?,
        boxes: Tensor::new(&[n, 4, rows, cols], bx)?,
    })
}

/// Objectness BCE averaged over cells, plus class BCE (summed over classes)
/// and squared box error (summed over coordinates), both averaged over
/// positive cells.
pub fn loss_det(tape: &mut Tape, out: &DetOutputs, t: &DetTargets, eps: f64) -> Result<Var> {
    for (v, target) in [(out.objectness, &t.objectness), (out.classes, &t.classes), (out.boxes, &t.boxes)] {
        if tape.shape(v) != target.shape() {
            return Err(Error::shape("loss_det", tape.shape(v), target.shape()));
        }
    }
    let (n, k, h, w) = t.classes.dims4().expect("4-d targets");
    let npos = t.objectness.data().iter().filter(|&&x| x > 0.5).count().max(1) as f64;

    let to = tape.constant(t.objectness.clone());
    let lo = tape.bce(out.objectness, to, eps)?;
    let lo = tape.mean(lo)?;

    let plane = h * w;
    let mask_k = Tensor::from_fn(&[n, k, h, w], |i| t.objectness.data()[(i / (k * plane)) * plane + i % plane]);
    let mask_4 = Tensor::from_fn(&[n, 4, h, w], |i| t.objectness.data()[(i / (4 * plane)) * plane + i % plane]);

    let tc = tape.constant(t.classes.clone());
    let lc = tape.bce(out.classes, tc, eps)?;
    let mk = tape.constant(mask_k);
    let lc = tape.mul(lc, mk)?;
    let lc = tape.sum(lc)?;
    let lc = tape.scale(lc, 1.0 / npos)?;

    let tb = tape.constant(t.boxes.clone());
    let d = tape.sub(out.boxes, tb)?;
    let d = tape.square(d)?;
    let m4 = tape.constant(mask_4);
    let d = tape.mul(d, m4)?;
    let lb = tape.sum(d)?;
    let lb = tape.scale(lb, 1.0 / npos)?;

    let s = tape.add(lo, lc)?;
    tape.add(s, lb)
}

/// Non-interpolated average precision: the mean of the precision at the rank
/// of each positive, scores sorted descending with ties broken by index.
/// `None` when there are no positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let npos = labels.iter().filter(|&&l| l).count();
    if npos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            acc += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(acc / npos as f64)
}

/// Area under the ROC curve by the rank-sum statistic, ties counted half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(s, _)| *s).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // average ranks over tie groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += avg_rank * all[i..=j].iter().filter(|x| x.1).count() as f64;
        i = j + 1;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    Some((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::grad_check;

    #[test]
    fn targets_place_centers_in_cells() {
        let boxes = [BoxAnnotation::new(0, 0, 10, 10, 1), BoxAnnotation::new(40, 8, 64, 30, 0)];
        let t = build_targets(&[&boxes], (64, 64), (8, 8), 3).unwrap();
        // centers (5,5) -> cell (0,0); (52,19) -> cell (2,6)
        let at = |c: usize, r: usize, col: usize| (c * 8 + r) * 8 + col;
        assert_eq!(t.objectness.data()[at(0, 0, 0)], 1.0);
        assert_eq!(t.objectness.data()[at(0, 2, 6)], 1.0);
        assert_eq!(t.objectness.data().iter().sum::<f64>(), 2.0);
        assert_eq!(t.classes.data()[at(1, 0, 0)], 1.0);
        assert_eq!(t.classes.data()[at(0, 2, 6)], 1.0);
        assert_eq!(t.classes.data().iter().sum::<f64>(), 2.0);
        let b = |j: usize| t.boxes.data()[at(j, 2, 6)];
        assert!((b(0) - 0.5).abs() < 1e-12 && (b(1) - 0.375).abs() < 1e-12);
        assert!((b(2) - 24.0 / 64.0).abs() < 1e-12 && (b(3) - 22.0 / 64.0).abs() < 1e-12);
        assert!(build_targets(&[&[BoxAnnotation::new(0, 0, 4, 4, 5)]], (64, 64), (8, 8), 3).is_err());
    }

    #[test]
    fn ranking_metrics() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[true, true, false]), Some(1.0));
        // ranks 1 and 3 positive: (1/1 + 2/3) / 2
        let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(average_precision(&[0.1], &[false]), None);
        assert_eq!(roc_auc(&[0.9, 0.8, 0.1], &[true, true, false]), Some(1.0));
        assert_eq!(roc_auc(&[0.1, 0.8, 0.9], &[true, true, false]), Some(0.0));
        assert_eq!(roc_auc(&[0.5, 0.5], &[true, false]), Some(0.5));
    }

    #[test]
    fn auc_matches_pairwise_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scores: Vec<f64> = (0..60).map(|_| (rng.random_range(0..10) as f64) / 10.0).collect();
        let labels: Vec<bool> = (0..60).map(|_| rng.random_bool(0.3)).collect();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..60 {
            for j in 0..60 {
                if labels[i] && !labels[j] {
                    den += 1.0;
                    num += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
                }
            }
        }
        assert!((roc_auc(&scores, &labels).unwrap() - num / den).abs() < 1e-12);
    }

    #[test]
    fn det_loss_grad_check() {
        let boxes = [BoxAnnotation::new(2, 2, 9, 12, 1)];
        let t = build_targets(&[&boxes], (16, 16), (2, 2), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let raw = Tensor::from_fn(&[1, 7, 2, 2], |_| rng.random_range(-1.0..1.0));
        let r = grad_check(
            |tape, x| {
                let obj = tape.slice_channels(x, 0, 1)?;
                let obj = tape.sigmoid(obj)?;
                let cls = tape.slice_channels(x, 1, 2)?;
                let cls = tape.sigmoid(cls)?;
                let boxes = tape.slice_channels(x, 3, 4)?;
                let out = DetOutputs {
                    objectness: obj,
                    classes: cls,
                    boxes,
                };
                loss_det(tape, &out, &t, 1e-7)
            },
            &raw,
            1e-6,
            1e-4,
            false,
        )
        .unwrap();
        assert!(r.passed, "{}", r.max_rel_error);
    }
}
