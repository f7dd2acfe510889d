//! Confusion-matrix segmentation metrics: per-class IoU / Acc / Dice and
//! the mIoU / mAcc / mDice / aAcc aggregates. All counts are exact
//! integers; division happens once, at the end.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    ignore: Option<u8>,
    /// counts[gt * classes + pred]
    counts: Vec<u64>,
}

#[derive(Debug, Clone, Copy)]
pub struct ClassMetrics {
    pub iou: f64,
    pub acc: f64,
    pub dice: f64,
}

#[derive(Debug, Clone)]
pub struct Summary {
    pub per_class: Vec<ClassMetrics>,
    pub miou: f64,
    pub macc: f64,
    pub mdice: f64,
    pub aacc: f64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize, ignore: Option<u8>) -> Self {
        ConfusionMatrix {
            classes,
            ignore,
            counts: vec![0u64; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Tally one prediction/ground-truth mask pair. Ignore-labelled pixels
    /// are skipped; any other out-of-range label is a data error naming the
    /// offending value and position.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::dim(format!(
                "mask length mismatch: pred {} vs gt {}",
                pred.len(),
                gt.len()
            )));
        }
        for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
            if Some(g) == self.ignore {
                continue;
            }
            if usize::from(g) >= self.classes {
                return Err(Error::data(format!(
                    "ground-truth label {} out of range (C = {}) at pixel {}",
                    g, self.classes, i
                )));
            }
            if usize::from(p) >= self.classes {
                return Err(Error::data(format!(
                    "predicted label {} out of range (C = {}) at pixel {}",
                    p, self.classes, i
                )));
            }
            self.counts[usize::from(g) * self.classes + usize::from(p)] += 1;
        }
        Ok(())
    }

    /// Commutative, associative merge; per-image matrices can be reduced in
    /// any order.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.classes != other.classes {
            return Err(Error::dim(format!(
                "cannot merge {}-class and {}-class matrices",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn tallies(&self, class: usize) -> (u64, u64, u64, u64) {
        let c = self.classes;
        let tp = self.counts[class * c + class];
        let fp: u64 = (0..c).map(|g| self.counts[g * c + class]).sum::<u64>() - tp;
        let fn_: u64 = self.counts[class * c..(class + 1) * c].iter().sum::<u64>() - tp;
        let tn = self.total() - tp - fp - fn_;
        (tp, fp, fn_, tn)
    }

    fn has_support(&self, class: usize) -> bool {
        let (tp, fp, fn_, _) = self.tallies(class);
        tp + fp + fn_ > 0
    }

    /// IoU_i = TP / (TP + FP + FN). NaN when the class is absent from both
    /// prediction and ground truth; such classes are excluded from means.
    pub fn iou(&self, class: usize) -> f64 {
        let (tp, fp, fn_, _) = self.tallies(class);
        if tp + fp + fn_ == 0 {
            return f64::NAN;
        }
        tp as f64 / (tp + fp + fn_) as f64
    }

    /// Acc_i = (TP + TN) / total scored pixels.
    pub fn acc(&self, class: usize) -> f64 {
        if !self.has_support(class) {
            return f64::NAN;
        }
        let (tp, fp, fn_, tn) = self.tallies(class);
        (tp + tn) as f64 / (tp + tn + fp + fn_) as f64
    }

    /// Dice_i = 2TP / (2TP + FP + FN).
    pub fn dice(&self, class: usize) -> f64 {
        let (tp, fp, fn_, _) = self.tallies(class);
        if tp + fp + fn_ == 0 {
            return f64::NAN;
        }
        (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
    }

    /// Per-class metrics plus class-mean and overall-accuracy aggregates.
    pub fn summarize(&self) -> Result<Summary> {
        let total = self.total();
        if total == 0 {
            return Err(Error::data(
                "summarize on an empty confusion matrix".to_string(),
            ));
        }
        let per_class: Vec<ClassMetrics> = (0..self.classes)
            .map(|i| ClassMetrics {
                iou: self.iou(i),
                acc: self.acc(i),
                dice: self.dice(i),
            })
            .collect();
        let mean = |f: &dyn Fn(&ClassMetrics) -> f64| {
            let vals: Vec<f64> = per_class.iter().map(f).filter(|v| !v.is_nan()).collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        let trace: u64 = (0..self.classes)
            .map(|i| self.counts[i * self.classes + i])
            .sum();
        Ok(Summary {
            miou: mean(&|m| m.iou),
            macc: mean(&|m| m.acc),
            mdice: mean(&|m| m.dice),
            aacc: trace as f64 / total as f64,
            per_class,
        })
    }
}

/// Formats a fraction as a two-decimal percentage, the reporting
/// convention of all emitted tables. NaN renders as "nan".
pub fn pct(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{:.2}", 100.0 * v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// The worked 2x2 example: pred = [0,1;1,1], gt = [0,1;0,1].
    fn worked_example() -> ConfusionMatrix {
        let mut cm = ConfusionMatrix::new(2, None);
        cm.accumulate(&[0, 1, 1, 1], &[0, 1, 0, 1]).unwrap();
        cm
    }

    #[test]
    fn accumulate_tallies_pixels() {
        let cm = worked_example();
        assert_eq!(cm.counts(), &[1, 1, 0, 2]);

        let mut diag = ConfusionMatrix::new(3, None);
        diag.accumulate(&[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap();
        assert_eq!(diag.counts(), &[1, 0, 0, 0, 1, 0, 0, 0, 2]);

        let mut ignored = ConfusionMatrix::new(2, Some(255));
        ignored.accumulate(&[0, 1], &[255, 255]).unwrap();
        assert_eq!(ignored.total(), 0);
    }

    #[test]
    fn accumulate_rejects_out_of_range() {
        let mut cm = ConfusionMatrix::new(2, None);
        let err = cm.accumulate(&[0, 3], &[0, 0]).unwrap_err();
        assert!(err.to_string().contains("3"), "{err}");
        assert!(err.to_string().contains("pixel 1"), "{err}");
    }

    #[test]
    fn worked_example_metrics() {
        let cm = worked_example();
        // class 1: TP=2, FP=1, FN=0
        assert!((cm.iou(1) - 2.0 / 3.0).abs() < 1e-12);
        // class 0: TP=1, TN=2, FP=0, FN=1
        assert!((cm.acc(0) - 3.0 / 4.0).abs() < 1e-12);
        assert!((cm.dice(1) - 4.0 / 5.0).abs() < 1e-12);
        let s = cm.summarize().unwrap();
        assert!((s.aacc - 3.0 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_disjoint_predictions() {
        let mut cm = ConfusionMatrix::new(3, None);
        cm.accumulate(&[0, 1, 2], &[0, 1, 2]).unwrap();
        let s = cm.summarize().unwrap();
        assert_eq!(s.miou, 1.0);
        assert_eq!(s.macc, 1.0);
        assert_eq!(s.mdice, 1.0);
        assert_eq!(s.aacc, 1.0);

        let mut cm = ConfusionMatrix::new(2, None);
        cm.accumulate(&[1, 1], &[0, 0]).unwrap();
        assert_eq!(cm.iou(0), 0.0);
        assert_eq!(cm.iou(1), 0.0);
        assert_eq!(cm.acc(0), 0.0);
    }

    #[test]
    fn absent_class_is_nan_and_excluded() {
        let mut cm = ConfusionMatrix::new(4, None);
        cm.accumulate(&[0, 1], &[0, 1]).unwrap();
        assert!(cm.iou(3).is_nan());
        assert!(cm.acc(3).is_nan());
        assert!(cm.dice(3).is_nan());
        let s = cm.summarize().unwrap();
        assert_eq!(s.miou, 1.0);
    }

    #[test]
    fn empty_matrix_summarize_is_data_error() {
        let cm = ConfusionMatrix::new(2, None);
        assert!(matches!(cm.summarize(), Err(Error::Data(_))));
    }

    #[test]
    fn pct_formats_two_decimals() {
        assert_eq!(pct(0.7418), "74.18");
        assert_eq!(pct(1.0), "100.00");
        assert_eq!(pct(f64::NAN), "nan");
    }

    proptest! {
        /// Dice = 2*IoU/(1+IoU) exactly, checked in integer rational
        /// arithmetic: dice_num/dice_den == 2*tp / (den + tp).
        #[test]
        fn dice_iou_identity(seed in 0u64..500) {
            let mut rng_state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
            let mut next = || {
                rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (rng_state >> 33) as usize
            };
            let c = 4usize;
            let n = 64usize;
            let pred: Vec<u8> = (0..n).map(|_| (next() % c) as u8).collect();
            let gt: Vec<u8> = (0..n).map(|_| (next() % c) as u8).collect();
            let mut cm = ConfusionMatrix::new(c, None);
            cm.accumulate(&pred, &gt).unwrap();
            for class in 0..c {
                let (tp, fp, fn_, _) = cm.tallies(class);
                if tp + fp + fn_ == 0 { continue; }
                // rational identity in u128
                let lhs_num = 2u128 * tp as u128;
                let lhs_den = (2 * tp + fp + fn_) as u128;
                let rhs_num = 2u128 * tp as u128;
                let rhs_den = (tp + fp + fn_) as u128 + tp as u128;
                prop_assert_eq!(lhs_num * rhs_den, rhs_num * lhs_den);
                // and the float side is the same computation
                let iou = cm.iou(class);
                let dice = cm.dice(class);
                prop_assert!((dice - 2.0 * iou / (1.0 + iou)).abs() < 1e-12);
                prop_assert!(iou <= dice + 1e-12 && dice <= 1.0);
            }
        }

        /// Accumulation order is irrelevant, and merge agrees with a single
        /// combined accumulate.
        #[test]
        fn accumulate_is_associative(seed in 0u64..200) {
            let mut s = seed.wrapping_mul(2862933555777941757).wrapping_add(3037000493);
            let mut next = || {
                s = s.wrapping_mul(2862933555777941757).wrapping_add(3037000493);
                (s >> 33) as usize
            };
            let c = 3usize;
            let a: (Vec<u8>, Vec<u8>) = (
                (0..32).map(|_| (next() % c) as u8).collect(),
                (0..32).map(|_| (next() % c) as u8).collect(),
            );
            let b: (Vec<u8>, Vec<u8>) = (
                (0..48).map(|_| (next() % c) as u8).collect(),
                (0..48).map(|_| (next() % c) as u8).collect(),
            );
            let mut ab = ConfusionMatrix::new(c, None);
            ab.accumulate(&a.0, &a.1).unwrap();
            ab.accumulate(&b.0, &b.1).unwrap();
            let mut ba = ConfusionMatrix::new(c, None);
            ba.accumulate(&b.0, &b.1).unwrap();
            ba.accumulate(&a.0, &a.1).unwrap();
            prop_assert_eq!(&ab, &ba);

            let mut ma = ConfusionMatrix::new(c, None);
            ma.accumulate(&a.0, &a.1).unwrap();
            let mut mb = ConfusionMatrix::new(c, None);
            mb.accumulate(&b.0, &b.1).unwrap();
            ma.merge(&mb).unwrap();
            prop_assert_eq!(&ma, &ab);
        }

        /// Relabeling classes by a permutation permutes per-class metrics
        /// and leaves the means unchanged.
        #[test]
        fn summarize_is_permutation_invariant(seed in 0u64..200) {
            let mut s = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
            let mut next = || {
                s = s.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(0xBF58476D1CE4E5B9);
                (s >> 33) as usize
            };
            let c = 4usize;
            let pred: Vec<u8> = (0..64).map(|_| (next() % c) as u8).collect();
            let gt: Vec<u8> = (0..64).map(|_| (next() % c) as u8).collect();
            let perm = [2u8, 0, 3, 1];
            let mut cm = ConfusionMatrix::new(c, None);
            cm.accumulate(&pred, &gt).unwrap();
            let relabel = |m: &[u8]| -> Vec<u8> { m.iter().map(|&v| perm[v as usize]).collect() };
            let mut cmp = ConfusionMatrix::new(c, None);
            cmp.accumulate(&relabel(&pred), &relabel(&gt)).unwrap();
            let s1 = cm.summarize().unwrap();
            let s2 = cmp.summarize().unwrap();
            prop_assert!((s1.miou - s2.miou).abs() < 1e-12);
            prop_assert!((s1.macc - s2.macc).abs() < 1e-12);
            prop_assert!((s1.mdice - s2.mdice).abs() < 1e-12);
            prop_assert!((s1.aacc - s2.aacc).abs() < 1e-12);
            for i in 0..c {
                let j = perm[i] as usize;
                let (a, b) = (s1.per_class[i].iou, s2.per_class[j].iou);
                prop_assert!(a.is_nan() == b.is_nan() && (a.is_nan() || (a - b).abs() < 1e-12));
            }
        }
    }
}
