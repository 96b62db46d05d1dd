//! Confusion accumulation and the SCD/BCD read-outs: OA, mIoU, SeK, F_scd,
//! binary IoU, the 0.3/0.7 composite, and evaluation-map rendering.
//!
//! mIoU and SeK follow the SECOND evaluation convention, F_scd the Bi-SRNet
//! one. Counts are exact integers; read-outs are computed in `f64`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::domain::{BinaryChangeMap, RasterImage, SemanticLabelMap};
use crate::error::{validation, RcdError, Result};

/// Weight of mIoU in the composite score; SeK carries the rest.
pub const COMPOSITE_MIOU_WEIGHT: f64 = 0.3;
pub const COMPOSITE_SEK_WEIGHT: f64 = 0.7;

/// `(C+1)×(C+1)` confusion counts plus the F_scd accumulators.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionState {
    num_classes: usize,
    /// Row-major; `hist[g * (C+1) + p]`.
    hist: Vec<u64>,
    tp_sem: u64,
    n_pred_change: u64,
    n_gt_change: u64,
}

impl ConfusionState {
    pub fn new(num_classes: usize) -> Self {
        let k = num_classes + 1;
        Self {
            num_classes,
            hist: vec![0; k * k],
            tp_sem: 0,
            n_pred_change: 0,
            n_gt_change: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Count with ground truth `g` and prediction `p`.
    pub fn count(&self, g: usize, p: usize) -> u64 {
        self.hist[g * (self.num_classes + 1) + p]
    }

    pub fn tp_sem(&self) -> u64 {
        self.tp_sem
    }

    pub fn n_pred_change(&self) -> u64 {
        self.n_pred_change
    }

    pub fn n_gt_change(&self) -> u64 {
        self.n_gt_change
    }

    pub fn total(&self) -> u64 {
        self.hist.iter().sum()
    }

    pub fn accumulate(&mut self, gt: &SemanticLabelMap, pred: &SemanticLabelMap) -> Result<()> {
        if gt.height() != pred.height() || gt.width() != pred.width() {
            return Err(validation(format!(
                "ground truth {}x{} and prediction {}x{} differ in shape",
                gt.height(),
                gt.width(),
                pred.height(),
                pred.width()
            )));
        }
        if gt.num_classes() != self.num_classes || pred.num_classes() != self.num_classes {
            return Err(validation(format!(
                "vocabulary sizes {} / {} do not match confusion state with {} classes",
                gt.num_classes(),
                pred.num_classes(),
                self.num_classes
            )));
        }
        self.accumulate_raw(gt.labels(), pred.labels());
        Ok(())
    }

    /// Label slices are assumed validated against `num_classes`.
    pub(crate) fn accumulate_raw(&mut self, gt: &[u16], pred: &[u16]) {
        let k = self.num_classes + 1;
        for (&g, &p) in gt.iter().zip(pred) {
            let (g, p) = (usize::from(g), usize::from(p));
            self.hist[g * k + p] += 1;
            if p > 0 {
                self.n_pred_change += 1;
                if p == g {
                    self.tp_sem += 1;
                }
            }
            if g > 0 {
                self.n_gt_change += 1;
            }
        }
    }

    /// Entrywise sum.
    pub fn merge(&mut self, other: &ConfusionState) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(validation("cannot merge confusion states of different sizes"));
        }
        for (a, b) in self.hist.iter_mut().zip(&other.hist) {
            *a += b;
        }
        self.tp_sem += other.tp_sem;
        self.n_pred_change += other.n_pred_change;
        self.n_gt_change += other.n_gt_change;
        Ok(())
    }

    fn ensure_nonempty(&self) -> Result<u64> {
        match self.total() {
            0 => Err(RcdError::Degenerate("confusion state holds no pixels".into())),
            n => Ok(n),
        }
    }

    /// 2×2 change/no-change collapse `(c00, c01, c10, c11)`.
    fn collapsed(&self) -> (u64, u64, u64, u64) {
        let k = self.num_classes + 1;
        let (mut c01, mut c10, mut c11) = (0, 0, 0);
        for g in 0..k {
            for p in 0..k {
                let v = self.hist[g * k + p];
                match (g > 0, p > 0) {
                    (false, true) => c01 += v,
                    (true, false) => c10 += v,
                    (true, true) => c11 += v,
                    (false, false) => {}
                }
            }
        }
        (self.hist[0], c01, c10, c11)
    }

    fn iou_pair(&self) -> (f64, f64) {
        let (c00, c01, c10, c11) = self.collapsed();
        (ratio_or_one(c00, c00 + c01 + c10), ratio_or_one(c11, c11 + c01 + c10))
    }

    pub fn overall_accuracy(&self) -> Result<f64> {
        let n = self.ensure_nonempty()?;
        let k = self.num_classes + 1;
        let trace: u64 = (0..k).map(|i| self.hist[i * k + i]).sum();
        Ok(trace as f64 / n as f64)
    }

    /// Mean of the no-change IoU and the change IoU.
    pub fn scd_miou(&self) -> Result<f64> {
        self.ensure_nonempty()?;
        let (bg, fg) = self.iou_pair();
        Ok((bg + fg) / 2.0)
    }

    /// Separated kappa: Cohen's kappa on the histogram with the
    /// no-change/no-change cell zeroed, scaled by `exp(IoU_fg - 1)`.
    pub fn sek(&self) -> Result<f64> {
        self.ensure_nonempty()?;
        let k = self.num_classes + 1;
        let mut h = self.hist.clone();
        h[0] = 0;
        let n: u64 = h.iter().sum();
        if n == 0 {
            return Ok(0.0);
        }
        let trace: u64 = (0..k).map(|i| h[i * k + i]).sum();
        // Row/column sums fit in u128 products without overflow.
        let mut chance: u128 = 0;
        for i in 0..k {
            let row: u64 = (0..k).map(|j| h[i * k + j]).sum();
            let col: u64 = (0..k).map(|j| h[j * k + i]).sum();
            chance += u128::from(row) * u128::from(col);
        }
        let nf = n as f64;
        let rho = trace as f64 / nf;
        let eta = chance as f64 / (nf * nf);
        let kappa = if chance == u128::from(n) * u128::from(n) {
            0.0
        } else {
            (rho - eta) / (1.0 - eta)
        };
        let (_, iou_fg) = self.iou_pair();
        Ok((iou_fg - 1.0).exp() * kappa)
    }

    pub fn fscd(&self) -> Result<f64> {
        self.ensure_nonempty()?;
        if self.n_pred_change == 0 && self.n_gt_change == 0 {
            return Ok(1.0);
        }
        if self.tp_sem == 0 {
            return Ok(0.0);
        }
        let p = self.tp_sem as f64 / self.n_pred_change as f64;
        let r = self.tp_sem as f64 / self.n_gt_change as f64;
        Ok(2.0 * p * r / (p + r))
    }

    /// IoU of the collapsed change class.
    pub fn change_iou(&self) -> Result<f64> {
        self.ensure_nonempty()?;
        Ok(self.iou_pair().1)
    }

    pub fn report(&self) -> Result<MetricReport> {
        let miou = self.scd_miou()?;
        let sek = self.sek()?;
        Ok(MetricReport {
            oa: self.overall_accuracy()?,
            miou,
            sek,
            fscd: self.fscd()?,
            binary_iou: self.change_iou()?,
            composite: composite_score(miou, sek),
            pixel_count: self.total(),
        })
    }
}

fn ratio_or_one(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// `|gt ∧ pred| / |gt ∨ pred|`, 1 when both are empty.
pub fn binary_iou(gt: &BinaryChangeMap, pred: &BinaryChangeMap) -> Result<f64> {
    check_same_shape(gt, pred)?;
    let (mut inter, mut union) = (0u64, 0u64);
    for (&g, &p) in gt.mask().iter().zip(pred.mask()) {
        inter += u64::from(g & p);
        union += u64::from(g | p);
    }
    Ok(ratio_or_one(inter, union))
}

/// Pixel accuracy of two binary masks.
pub fn binary_accuracy(gt: &BinaryChangeMap, pred: &BinaryChangeMap) -> Result<f64> {
    check_same_shape(gt, pred)?;
    let hits = gt.mask().iter().zip(pred.mask()).filter(|(g, p)| g == p).count();
    Ok(hits as f64 / gt.mask().len() as f64)
}

pub fn composite_score(miou: f64, sek: f64) -> f64 {
    COMPOSITE_MIOU_WEIGHT * miou + COMPOSITE_SEK_WEIGHT * sek
}

fn check_same_shape(a: &BinaryChangeMap, b: &BinaryChangeMap) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(validation(format!(
            "masks {}x{} and {}x{} differ in shape",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

pub const TP_RGB: [u8; 3] = [255, 255, 255];
pub const TN_RGB: [u8; 3] = [0, 0, 0];
pub const FP_RGB: [u8; 3] = [0, 255, 0];
pub const FN_RGB: [u8; 3] = [255, 0, 0];

/// Error-coded evaluation map: TP white, TN black, FP green, FN red.
pub fn render_eval_map(gt: &BinaryChangeMap, pred: &BinaryChangeMap) -> Result<RasterImage> {
    check_same_shape(gt, pred)?;
    let bytes: Vec<u8> = gt
        .mask()
        .iter()
        .zip(pred.mask())
        .flat_map(|(&g, &p)| match (g, p) {
            (1, 1) => TP_RGB,
            (0, 1) => FP_RGB,
            (1, 0) => FN_RGB,
            _ => TN_RGB,
        })
        .collect();
    RasterImage::from_rgb8(gt.height(), gt.width(), &bytes)
}

/// Scalar evaluation record. Serializes as `key=value` lines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub oa: f64,
    pub miou: f64,
    pub sek: f64,
    pub fscd: f64,
    pub binary_iou: f64,
    pub composite: f64,
    pub pixel_count: u64,
}

impl MetricReport {
    pub const KEYS: [&'static str; 7] =
        ["oa", "miou", "sek", "fscd", "binary_iou", "composite", "pixel_count"];

    pub fn to_record(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("oa", self.oa),
            ("miou", self.miou),
            ("sek", self.sek),
            ("fscd", self.fscd),
            ("binary_iou", self.binary_iou),
            ("composite", self.composite),
        ] {
            let _ = writeln!(s, "{k}={v}");
        }
        let _ = writeln!(s, "pixel_count={}", self.pixel_count);
        s
    }

    pub fn from_record(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| validation(format!("malformed metric line `{line}`")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let real = |k: &str| -> Result<f64> {
            kv.get(k)
                .ok_or_else(|| validation(format!("metric record lacks `{k}`")))?
                .parse()
                .map_err(|_| validation(format!("metric `{k}` is not a number")))
        };
        Ok(Self {
            oa: real("oa")?,
            miou: real("miou")?,
            sek: real("sek")?,
            fscd: real("fscd")?,
            binary_iou: real("binary_iou")?,
            composite: real("composite")?,
            pixel_count: kv
                .get("pixel_count")
                .ok_or_else(|| validation("metric record lacks `pixel_count`"))?
                .parse()
                .map_err(|_| validation("metric `pixel_count` is not an integer"))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::domain::ClassVocabulary;

    fn map(labels: &[u16], h: usize, w: usize, c: usize) -> SemanticLabelMap {
        let v = Arc::new(ClassVocabulary::new((1..=c).map(|i| format!("c{i}"))).unwrap());
        SemanticLabelMap::new(h, w, labels.to_vec(), v).unwrap()
    }

    fn worked() -> ConfusionState {
        let mut s = ConfusionState::new(2);
        s.accumulate(&map(&[0, 1, 2, 0], 2, 2, 2), &map(&[0, 1, 1, 0], 2, 2, 2))
            .unwrap();
        s
    }

    #[test]
    fn worked_example_counts() {
        let s = worked();
        assert_eq!(s.count(0, 0), 2);
        assert_eq!(s.count(1, 1), 1);
        assert_eq!(s.count(2, 1), 1);
        assert_eq!(s.total(), 4);
        assert_eq!((s.tp_sem(), s.n_pred_change(), s.n_gt_change()), (1, 2, 2));
    }

    #[test]
    fn worked_example_metrics() {
        let s = worked();
        assert_eq!(s.overall_accuracy().unwrap(), 0.75);
        assert_eq!(s.scd_miou().unwrap(), 1.0);
        assert_eq!(s.sek().unwrap(), 0.0);
        assert_eq!(s.fscd().unwrap(), 0.5);
    }

    #[test]
    fn perfect_prediction() {
        let m = map(&[0, 1, 2, 0, 2, 2, 1, 0, 0], 3, 3, 2);
        let mut s = ConfusionState::new(2);
        s.accumulate(&m, &m).unwrap();
        for g in 0..3 {
            for p in 0..3 {
                if g != p {
                    assert_eq!(s.count(g, p), 0);
                }
            }
        }
        let r = s.report().unwrap();
        assert_eq!((r.oa, r.miou, r.sek, r.fscd, r.composite), (1.0, 1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn degenerate_conventions() {
        let m = map(&[0; 4], 2, 2, 2);
        let mut s = ConfusionState::new(2);
        s.accumulate(&m, &m).unwrap();
        assert_eq!(s.fscd().unwrap(), 1.0);
        assert_eq!(s.scd_miou().unwrap(), 1.0);
        // every pixel is the zeroed no-change cell
        assert_eq!(s.sek().unwrap(), 0.0);

        // all change, all one class: eta == 1 so kappa is pinned to 0
        let m = map(&[1; 4], 2, 2, 2);
        let mut s = ConfusionState::new(2);
        s.accumulate(&m, &m).unwrap();
        assert_eq!(s.sek().unwrap(), 0.0);

        let e = ConfusionState::new(2);
        assert!(matches!(e.overall_accuracy(), Err(RcdError::Degenerate(_))));
        assert!(matches!(e.sek(), Err(RcdError::Degenerate(_))));
    }

    #[test]
    fn accumulate_rejects_mismatch() {
        let mut s = ConfusionState::new(2);
        assert!(s.accumulate(&map(&[0; 4], 2, 2, 2), &map(&[0; 2], 1, 2, 2)).is_err());
        assert!(s.accumulate(&map(&[0; 4], 2, 2, 2), &map(&[0; 4], 2, 2, 3)).is_err());
    }

    #[test]
    fn composite_values() {
        assert_eq!(composite_score(1.0, 1.0), 1.0);
        assert!((composite_score(0.5, 0.0) - 0.15).abs() < 1e-15);
        assert!((composite_score(0.7347, 0.2525) - 0.39716).abs() < 1e-9);
    }

    #[test]
    fn binary_iou_cases() {
        let a = BinaryChangeMap::new(1, 4, vec![1, 1, 0, 0]).unwrap();
        let b = BinaryChangeMap::new(1, 4, vec![0, 0, 1, 1]).unwrap();
        assert_eq!(binary_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(binary_iou(&a, &b).unwrap(), 0.0);
        let z = BinaryChangeMap::zeros(1, 4);
        assert_eq!(binary_iou(&z, &z).unwrap(), 1.0);
        assert!(binary_iou(&a, &BinaryChangeMap::zeros(2, 2)).is_err());
    }

    #[test]
    fn render_colors() {
        let gt = BinaryChangeMap::new(1, 4, vec![1, 0, 1, 0]).unwrap();
        let pred = BinaryChangeMap::new(1, 4, vec![1, 1, 0, 0]).unwrap();
        let img = render_eval_map(&gt, &pred).unwrap().to_rgb8();
        assert_eq!(&img[0..3], &TP_RGB);
        assert_eq!(&img[3..6], &FP_RGB);
        assert_eq!(&img[6..9], &FN_RGB);
        assert_eq!(&img[9..12], &TN_RGB);
    }

    #[test]
    fn record_round_trip() {
        let r = worked().report().unwrap();
        let text = r.to_record();
        for k in MetricReport::KEYS {
            assert!(text.contains(&format!("{k}=")));
        }
        assert_eq!(MetricReport::from_record(&text).unwrap(), r);
    }
}
