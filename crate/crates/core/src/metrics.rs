//! Binary verification scores on rain masks.
//!
//! `iou` and `csi` share one formula, `tp / (tp + fp + fn)`; `f1` is
//! `2tp / (2tp + fp + fn)`. A zero denominator (both masks empty) scores 0
//! and sets the `degenerate` flag.

use serde::{Deserialize, Serialize};
use wfn_tensor::{Float, Tensor};

use crate::error::{invalid, Result};

/// Boolean array with a shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<bool>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(invalid(format!("mask shape {shape:?} does not hold {} values", data.len())));
        }
        Ok(Self { shape, data })
    }

    /// `x >= threshold` elementwise.
    pub fn threshold<T: Float>(x: &Tensor<T>, threshold: f64) -> Self {
        Self {
            shape: x.shape().to_vec(),
            data: x.data().iter().map(|v| v.as_f64() >= threshold).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Slice `i` along the leading axis.
    pub fn index(&self, i: usize) -> Result<Self> {
        let (&n, rest) = self.shape.split_first().ok_or_else(|| invalid("cannot index a scalar mask"))?;
        if i >= n {
            return Err(invalid(format!("index {i} out of range for leading axis {n}")));
        }
        let step: usize = rest.iter().product();
        Ok(Self {
            shape: rest.to_vec(),
            data: self.data[i * step..(i + 1) * step].to_vec(),
        })
    }

    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        Tensor::new(
            self.shape.clone(),
            self.data.iter().map(|&b| if b { T::one() } else { T::zero() }).collect(),
        )
        .expect("mask shape")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

/// A score and whether its denominator was zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    pub degenerate: bool,
}

fn ratio(num: u64, den: u64) -> Score {
    if den == 0 {
        Score {
            value: 0.0,
            degenerate: true,
        }
    } else {
        Score {
            value: num as f64 / den as f64,
            degenerate: false,
        }
    }
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn accumulate(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    pub fn iou_score(&self) -> Score {
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    pub fn f1_score(&self) -> Score {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

pub fn confusion(pred: &Mask, target: &Mask) -> Result<ConfusionCounts> {
    if pred.shape() != target.shape() {
        return Err(invalid(format!(
            "prediction mask {:?} and target mask {:?} differ in shape",
            pred.shape(),
            target.shape()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn iou(c: &ConfusionCounts) -> f64 {
    c.iou_score().value
}

pub fn csi(c: &ConfusionCounts) -> f64 {
    c.iou_score().value
}

pub fn f1(c: &ConfusionCounts) -> f64 {
    c.f1_score().value
}

/// Pooled and per-sample-averaged scores over an evaluation set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub confusion: ConfusionCounts,
    pub iou: f64,
    pub csi: f64,
    pub f1: f64,
    /// One pooled IoU per lead time.
    pub iou_per_lead: Vec<f64>,
    /// Mean of per-sample scores over samples with a nonzero denominator.
    pub sample_mean_iou: f64,
    pub sample_mean_f1: f64,
    pub samples: usize,
    pub degenerate_samples: usize,
}

/// Accumulates `[L, H, W]` prediction/target pairs, one per sample.
#[derive(Clone, Debug)]
pub struct LeadTimeAccumulator {
    per_lead: Vec<ConfusionCounts>,
    iou_sum: f64,
    f1_sum: f64,
    samples: usize,
    degenerate: usize,
}

impl LeadTimeAccumulator {
    pub fn new(leads: usize) -> Self {
        Self {
            per_lead: vec![ConfusionCounts::default(); leads],
            iou_sum: 0.0,
            f1_sum: 0.0,
            samples: 0,
            degenerate: 0,
        }
    }

    pub fn add(&mut self, pred: &Mask, target: &Mask) -> Result<()> {
        if pred.shape().len() != 3 || pred.shape()[0] != self.per_lead.len() {
            return Err(invalid(format!(
                "expected [{}, H, W] masks, got {:?}",
                self.per_lead.len(),
                pred.shape()
            )));
        }
        let mut sample = ConfusionCounts::default();
        for (l, acc) in self.per_lead.iter_mut().enumerate() {
            let c = confusion(&pred.index(l)?, &target.index(l)?)?;
            acc.accumulate(&c);
            sample.accumulate(&c);
        }
        self.samples += 1;
        let s = sample.iou_score();
        if s.degenerate {
            self.degenerate += 1;
        } else {
            self.iou_sum += s.value;
            self.f1_sum += sample.f1_score().value;
        }
        Ok(())
    }

    pub fn iou_over_time(&self) -> Vec<f64> {
        self.per_lead.iter().map(iou).collect()
    }

    pub fn report(&self) -> MetricsReport {
        let mut pooled = ConfusionCounts::default();
        for c in &self.per_lead {
            pooled.accumulate(c);
        }
        let valid = (self.samples - self.degenerate) as f64;
        let mean = |s: f64| if valid > 0.0 { s / valid } else { 0.0 };
        MetricsReport {
            confusion: pooled,
            iou: iou(&pooled),
            csi: csi(&pooled),
            f1: f1(&pooled),
            iou_per_lead: self.iou_over_time(),
            sample_mean_iou: mean(self.iou_sum),
            sample_mean_f1: mean(self.f1_sum),
            samples: self.samples,
            degenerate_samples: self.degenerate,
        }
    }
}

/// Per-lead pooled IoU for `[L, H, W]` or `[S, L, H, W]` stacks.
pub fn iou_over_time(pred: &Mask, target: &Mask) -> Result<Vec<f64>> {
    if pred.shape() != target.shape() {
        return Err(invalid("prediction and target stacks differ in shape"));
    }
    match pred.shape().len() {
        3 => {
            let mut acc = LeadTimeAccumulator::new(pred.shape()[0]);
            acc.add(pred, target)?;
            Ok(acc.iou_over_time())
        }
        4 => {
            let mut acc = LeadTimeAccumulator::new(pred.shape()[1]);
            for s in 0..pred.shape()[0] {
                acc.add(&pred.index(s)?, &target.index(s)?)?;
            }
            Ok(acc.iou_over_time())
        }
        _ => Err(invalid(format!("expected [L,H,W] or [S,L,H,W], got {:?}", pred.shape()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> ConfusionCounts {
        ConfusionCounts { tp, fp, fn_, tn }
    }

    fn random_mask(shape: &[usize], p: f64, rng: &mut ChaCha8Rng) -> Mask {
        let n = shape.iter().product();
        Mask::new(shape, (0..n).map(|_| rng.random_bool(p)).collect()).unwrap()
    }

    #[test]
    fn formula_cases() {
        let c = counts(1, 1, 2, 0);
        assert_eq!(iou(&c), 0.25);
        assert_eq!(f1(&c), 0.4);
        let perfect = counts(5, 0, 0, 3);
        assert_eq!((iou(&perfect), csi(&perfect), f1(&perfect)), (1.0, 1.0, 1.0));
        let empty = counts(0, 0, 0, 9);
        assert_eq!(empty.iou_score(), Score { value: 0.0, degenerate: true });
        assert!(empty.f1_score().degenerate);
    }

    #[test]
    fn confusion_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_mask(&[6, 7], 0.4, &mut rng);
        let same = confusion(&m, &m).unwrap();
        assert_eq!((same.fp, same.fn_), (0, 0));
        let inv = Mask::new(m.shape(), m.data().iter().map(|b| !b).collect()).unwrap();
        let comp = confusion(&m, &inv).unwrap();
        assert_eq!((comp.tp, comp.tn), (0, 0));
        assert_eq!(comp.total(), 42);
        assert!(confusion(&m, &random_mask(&[7, 6], 0.5, &mut rng)).is_err());
    }

    #[test]
    fn lead_time_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_mask(&[32, 5, 5], 0.5, &mut rng);
        assert_eq!(iou_over_time(&t, &t).unwrap(), vec![1.0; 32]);

        let mut target = vec![true; 32 * 25];
        let mut pred = vec![false; 32 * 25];
        pred[..25].fill(true);
        target[..25].fill(true);
        let curve = iou_over_time(&Mask::new([32, 5, 5], pred).unwrap(), &Mask::new([32, 5, 5], target).unwrap()).unwrap();
        let mut want = vec![0.0; 32];
        want[0] = 1.0;
        assert_eq!(curve, want);

        let p = random_mask(&[3, 4, 6, 6], 0.3, &mut rng);
        let q = random_mask(&[3, 4, 6, 6], 0.3, &mut rng);
        let got = iou_over_time(&p, &q).unwrap();
        for l in 0..4 {
            let (mut tp, mut den) = (0, 0);
            for s in 0..3 {
                for i in 0..36 {
                    let idx = (s * 4 + l) * 36 + i;
                    let (a, b) = (p.data()[idx], q.data()[idx]);
                    tp += (a && b) as u64;
                    den += (a || b) as u64;
                }
            }
            assert_eq!(got[l], tp as f64 / den as f64);
        }
    }

    #[test]
    fn pooled_differs_from_sample_mean() {
        let mut acc = LeadTimeAccumulator::new(1);
        // sample A: 1 tp, 0 errors; sample B: 1 tp, 3 fp
        acc.add(&Mask::new([1, 1, 4], vec![true, false, false, false]).unwrap(), &Mask::new([1, 1, 4], vec![true, false, false, false]).unwrap())
            .unwrap();
        acc.add(&Mask::new([1, 1, 4], vec![true; 4]).unwrap(), &Mask::new([1, 1, 4], vec![true, false, false, false]).unwrap())
            .unwrap();
        acc.add(&Mask::new([1, 1, 4], vec![false; 4]).unwrap(), &Mask::new([1, 1, 4], vec![false; 4]).unwrap())
            .unwrap();
        let r = acc.report();
        assert_eq!(r.iou, 2.0 / 5.0);
        assert_eq!(r.sample_mean_iou, (1.0 + 0.25) / 2.0);
        assert_eq!(r.degenerate_samples, 1);
        assert_eq!(r.iou, r.csi);
    }

    proptest! {
        #[test]
        fn score_relations(tp in 0u64..1000, fp in 0u64..1000, fn_ in 0u64..1000, tn in 0u64..10) {
            let c = counts(tp, fp, fn_, tn);
            prop_assert_eq!(iou(&c).to_bits(), csi(&c).to_bits());
            if tp + fp + fn_ > 0 {
                let (i, f) = (iou(&c), f1(&c));
                prop_assert!(f >= i);
                prop_assert_eq!(f == i, i == 0.0 || i == 1.0);
            }
        }
    }
}
