//! Segmentation and saliency metrics: confusion matrix / mIoU, MAE and
//! max F-measure.

use crate::data::IGNORE_INDEX;
use crate::error::{Error, Result};

/// Per-class pixel counts, rows = target, cols = prediction. Merging is
/// plain integer addition, so evaluation can fan out and combine in any
/// order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
    ignore: usize,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            n: num_classes,
            counts: vec![0; num_classes * num_classes],
            ignore: IGNORE_INDEX,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.n
    }

    pub fn update(&mut self, pred: &[usize], target: &[usize]) {
        debug_assert_eq!(pred.len(), target.len());
        for (&p, &t) in pred.iter().zip(target.iter()) {
            if t == self.ignore {
                continue;
            }
            self.counts[t * self.n + p] += 1;
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        debug_assert_eq!(self.n, other.n);
        for (a, b) in self.counts.iter_mut().zip(other.counts.iter()) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn count(&self, target: usize, pred: usize) -> u64 {
        self.counts[target * self.n + pred]
    }

    /// Mean IoU and per-class IoUs. Classes whose union is zero are
    /// excluded from the mean (reported as None).
    pub fn miou(&self) -> Result<(f64, Vec<Option<f64>>)> {
        if self.total() == 0 {
            return Err(Error::InvalidArg("miou: empty confusion matrix".into()));
        }
        let mut per_class = Vec::with_capacity(self.n);
        let mut sum = 0.0;
        let mut used = 0usize;
        for c in 0..self.n {
            let tp = self.counts[c * self.n + c];
            let fn_: u64 = (0..self.n)
                .filter(|&p| p != c)
                .map(|p| self.counts[c * self.n + p])
                .sum();
            let fp: u64 = (0..self.n)
                .filter(|&t| t != c)
                .map(|t| self.counts[t * self.n + c])
                .sum();
            let union = tp + fp + fn_;
            if union == 0 {
                per_class.push(None);
            } else {
                let iou = tp as f64 / union as f64;
                per_class.push(Some(iou));
                sum += iou;
                used += 1;
            }
        }
        Ok((sum / used.max(1) as f64, per_class))
    }
}

/// Argmax over a class axis with stride `stride`; ties break toward the
/// lowest class index.
pub fn argmax_strided<T: PartialOrd + Copy>(data: &[T], base: usize, classes: usize, stride: usize) -> usize {
    let mut best = 0usize;
    let mut best_v = data[base];
    for c in 1..classes {
        let v = data[base + c * stride];
        if v > best_v {
            best_v = v;
            best = c;
        }
    }
    best
}

pub const F_MEASURE_BETA2: f64 = 0.3;

/// Mean absolute error and max F-measure over 256 thresholds i/255,
/// i = 0..=255, binarizing with pred >= threshold. F uses beta^2 = 0.3 and
/// is 0 whenever its denominator vanishes.
pub fn saliency_metrics(pred: &[f64], gt: &[bool]) -> Result<(f64, f64)> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "saliency_metrics: pred len {} vs gt len {}",
            pred.len(),
            gt.len()
        )));
    }
    let n = pred.len() as f64;
    let mae = pred
        .iter()
        .zip(gt.iter())
        .map(|(&p, &g)| (p - if g { 1.0 } else { 0.0 }).abs())
        .sum::<f64>()
        / n;

    // Sort predictions descending and prefix-sum the positives; each
    // threshold then reads TP/FP via a partition point with the same
    // `>=` comparison an elementwise sweep would use.
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by(|&a, &b| pred[b].partial_cmp(&pred[a]).unwrap());
    let sorted: Vec<f64> = order.iter().map(|&i| pred[i]).collect();
    let mut pos_prefix = vec![0u64; pred.len() + 1];
    for (k, &i) in order.iter().enumerate() {
        pos_prefix[k + 1] = pos_prefix[k] + u64::from(gt[i]);
    }
    let total_pos = pos_prefix[pred.len()];
    let mut max_f = 0.0f64;
    for i in 0..=255u32 {
        let t = i as f64 / 255.0;
        let idx = sorted.partition_point(|&p| p >= t);
        let tp = pos_prefix[idx] as f64;
        let fp = idx as f64 - tp;
        let fn_ = (total_pos as f64) - tp;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let denom = F_MEASURE_BETA2 * precision + recall;
        let f = if denom > 0.0 {
            (1.0 + F_MEASURE_BETA2) * precision * recall / denom
        } else {
            0.0
        };
        if f > max_f {
            max_f = f;
        }
    }
    Ok((mae, max_f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_is_miou_one() {
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&[0, 1, 2, 1], &[0, 1, 2, 1]);
        let (miou, per) = cm.miou().unwrap();
        assert_eq!(miou, 1.0);
        assert_eq!(per, vec![Some(1.0); 3]);
    }

    #[test]
    fn hand_counted_case_matches() {
        // 4x4 map, 2 classes; class 0: TP=6, FP=2, FN=2 -> IoU0 = 0.6.
        let target = [0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1];
        let pred = [0, 0, 0, 0, 0, 0, 1, 1, 0, 0, 1, 1, 1, 1, 1, 1];
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&pred, &target);
        let (_, per) = cm.miou().unwrap();
        assert!((per[0].unwrap() - 0.6).abs() < 1e-12);
        // class 1: TP=6, FP=2, FN=2 as well
        assert!((per[1].unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn all_one_class_prediction_on_two_class_target() {
        // 8 pixels of each class, prediction everywhere class 0:
        // IoU0 = 8/16, IoU1 = 0 -> mIoU = 0.5 * IoU0.
        let target = [vec![0usize; 8], vec![1usize; 8]].concat();
        let pred = vec![0usize; 16];
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&pred, &target);
        let (miou, per) = cm.miou().unwrap();
        assert!((per[0].unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(per[1], Some(0.0));
        assert!((miou - 0.5 * per[0].unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ignored_pixels_do_not_count() {
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&[0, 1, 0], &[0, IGNORE_INDEX, 1]);
        assert_eq!(cm.total(), 2);
    }

    #[test]
    fn incremental_updates_equal_concatenated() {
        let mut a = ConfusionMatrix::new(3);
        a.update(&[0, 1], &[0, 2]);
        a.update(&[2, 2], &[2, 1]);
        let mut b = ConfusionMatrix::new(3);
        b.update(&[0, 1, 2, 2], &[0, 2, 2, 1]);
        assert_eq!(a, b);
        let mut c = ConfusionMatrix::new(3);
        c.merge(&a);
        assert_eq!(c, b);
    }

    #[test]
    fn saliency_perfect_and_constant_cases() {
        let gt: Vec<bool> = (0..16).map(|i| i < 8).collect();
        let pred: Vec<f64> = gt.iter().map(|&g| if g { 1.0 } else { 0.0 }).collect();
        let (mae, max_f) = saliency_metrics(&pred, &gt).unwrap();
        assert_eq!(mae, 0.0);
        assert!((max_f - 1.0).abs() < 1e-12);

        let half = vec![0.5f64; 16];
        let (mae, _) = saliency_metrics(&half, &gt).unwrap();
        assert!((mae - 0.5).abs() < 1e-12);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let v = [1.0f32, 3.0, 3.0, 2.0];
        assert_eq!(argmax_strided(&v, 0, 4, 1), 1);
    }
}
