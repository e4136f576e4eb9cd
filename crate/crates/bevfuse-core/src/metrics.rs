//! IoU metric and the evaluation protocol: sigmoid threshold 0.5, ignore
//! mask for low-visibility vehicles, dataset-level accumulation of global
//! intersection and union.

use crate::diff::{sigmoid, Tensor};

/// Intersection over union of thresholded predictions against a binary
/// target. Cells flagged in `ignore` count toward neither intersection nor
/// union. Both-empty is defined as 1.
pub fn iou(
    pred_logits: &Tensor,
    target: &Tensor,
    threshold: f64,
    ignore: Option<&Tensor>,
) -> f64 {
    let mut acc = IouAccumulator::default();
    acc.add(pred_logits, target, threshold, ignore);
    acc.value()
}

/// Running global intersection and union over a dataset.
#[derive(Clone, Copy, Debug, Default)]
pub struct IouAccumulator {
    pub intersection: u64,
    pub union: u64,
}

impl IouAccumulator {
    pub fn add(
        &mut self,
        pred_logits: &Tensor,
        target: &Tensor,
        threshold: f64,
        ignore: Option<&Tensor>,
    ) {
        debug_assert_eq!(pred_logits.shape(), target.shape());
        for (i, (&s, &y)) in pred_logits.data().iter().zip(target.data()).enumerate() {
            if let Some(mask) = ignore {
                if mask.data()[i] != 0.0 {
                    continue;
                }
            }
            let p = sigmoid(s) >= threshold;
            let t = y >= 0.5;
            if p && t {
                self.intersection += 1;
            }
            if p || t {
                self.union += 1;
            }
        }
    }

    pub fn value(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;

    fn logits_from_mask(mask: &[f64]) -> Tensor {
        let data: Vec<f64> = mask.iter().map(|&m| if m > 0.5 { 9.0 } else { -9.0 }).collect();
        Tensor::from_vec(&[mask.len()], data).unwrap()
    }

    #[test]
    fn identical_masks_score_one() {
        let y = vec![1.0, 0.0, 1.0, 1.0, 0.0];
        let t = Tensor::from_vec(&[5], y.clone()).unwrap();
        assert_eq!(iou(&logits_from_mask(&y), &t, 0.5, None), 1.0);
    }

    #[test]
    fn disjoint_masks_score_zero() {
        let p = vec![1.0, 1.0, 0.0, 0.0];
        let y = vec![0.0, 0.0, 1.0, 1.0];
        let t = Tensor::from_vec(&[4], y).unwrap();
        assert_eq!(iou(&logits_from_mask(&p), &t, 0.5, None), 0.0);
    }

    #[test]
    fn half_overlap_of_equal_areas_scores_one_third() {
        // both areas 2, overlap 1: 1 / (2 + 2 - 1) = 1/3
        let p = vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let y = vec![0.0, 1.0, 1.0, 0.0, 0.0, 0.0];
        let t = Tensor::from_vec(&[6], y).unwrap();
        let got = iou(&logits_from_mask(&p), &t, 0.5, None);
        assert_eq!(got, 1.0 / 3.0);
    }

    #[test]
    fn both_empty_defined_as_one() {
        let z = Tensor::zeros(&[8]);
        assert_eq!(iou(&logits_from_mask(&[0.0; 8]), &z, 0.5, None), 1.0);
    }

    #[test]
    fn ignore_mask_excludes_cells_from_both_counts() {
        // prediction hits an ignored vehicle: no penalty either way
        let p = vec![1.0, 1.0, 0.0, 0.0];
        let y = vec![1.0, 0.0, 0.0, 0.0];
        let ignore = Tensor::from_vec(&[4], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let t = Tensor::from_vec(&[4], y).unwrap();
        assert_eq!(iou(&logits_from_mask(&p), &t, 0.5, Some(&ignore)), 1.0);
    }

    #[test]
    fn threshold_is_applied_to_sigmoid_probabilities() {
        // logit 0 -> probability 0.5, included at threshold 0.5
        let s = Tensor::from_vec(&[2], vec![0.0, -1.0]).unwrap();
        let t = Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap();
        assert_eq!(iou(&s, &t, 0.5, None), 1.0);
        // raising the threshold excludes it
        assert_eq!(iou(&s, &t, 0.6, None), 0.0);
    }

    #[test]
    fn symmetric_and_monotone() {
        let p = vec![1.0, 1.0, 1.0, 0.0, 0.0];
        let y = vec![0.0, 1.0, 1.0, 1.0, 0.0];
        let tp = Tensor::from_vec(&[5], p.clone()).unwrap();
        let ty = Tensor::from_vec(&[5], y.clone()).unwrap();
        let a = iou(&logits_from_mask(&p), &ty, 0.5, None);
        let b = iou(&logits_from_mask(&y), &tp, 0.5, None);
        assert_eq!(a, b);

        // growing intersection with fixed union does not decrease the score
        let p2 = vec![1.0, 1.0, 1.0, 1.0, 0.0]; // now covers all of y's cells
        let c = iou(&logits_from_mask(&p2), &ty, 0.5, None);
        assert!(c >= a);
    }

    #[test]
    fn accumulator_is_dataset_level_not_mean_of_scenes() {
        let mut acc = IouAccumulator::default();
        // scene 1: perfect on 2 cells; scene 2: half overlap
        let y1 = vec![1.0, 1.0];
        acc.add(
            &logits_from_mask(&y1),
            &Tensor::from_vec(&[2], y1.clone()).unwrap(),
            0.5,
            None,
        );
        let p2 = vec![1.0, 0.0];
        let y2 = vec![1.0, 1.0];
        acc.add(
            &logits_from_mask(&p2),
            &Tensor::from_vec(&[2], y2).unwrap(),
            0.5,
            None,
        );
        // global I = 3, U = 4, not mean(1.0, 0.5)
        assert_eq!(acc.value(), 0.75);
    }
}
