//! Confusion matrix, IoU / mIoU and boundary-band accuracy.

use std::fmt::Write as _;

use crate::data::LabelMap;
use crate::error::{Error, Result};

/// `counts[t·n + p]` = pixels of target class `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, target: usize, predicted: usize) -> u64 {
        self.counts[target * self.num_classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, pred: &LabelMap, target: &LabelMap) -> Result<()> {
        if (pred.height(), pred.width()) != (target.height(), target.width()) {
            return Err(Error::invalid(
                "confusion_matrix",
                format!(
                    "prediction {}×{} vs target {}×{}",
                    pred.height(),
                    pred.width(),
                    target.height(),
                    target.width()
                ),
            ));
        }
        pred.check_classes(self.num_classes)?;
        target.check_classes(self.num_classes)?;
        for (&p, &t) in pred.values().iter().zip(target.values()) {
            self.counts[t * self.num_classes + p] += 1;
        }
        Ok(())
    }

    /// `(TP, TP+FP+FN)` of one class, `None` when the union is empty.
    fn fraction(&self, c: usize) -> Option<(u64, u64)> {
        let n = self.num_classes;
        let tp = self.count(c, c);
        let fn_: u64 = (0..n).map(|p| self.count(c, p)).sum::<u64>() - tp;
        let fp: u64 = (0..n).map(|t| self.count(t, c)).sum::<u64>() - tp;
        let union = tp + fp + fn_;
        (union > 0).then_some((tp, union))
    }

    /// `TP/(TP+FP+FN)` per class; `None` for classes absent from both
    /// prediction and target.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|c| self.fraction(c).map(|(tp, u)| tp as f64 / u as f64))
            .collect()
    }

    /// Mean IoU over present classes; `None` if no pixel was counted.
    ///
    /// The class fractions are summed exactly, so the result is the
    /// correctly rounded mean whenever the reduced sum fits in 128 bits.
    pub fn miou(&self) -> Option<f64> {
        let fractions: Vec<(u64, u64)> = (0..self.num_classes)
            .filter_map(|c| self.fraction(c))
            .collect();
        if fractions.is_empty() {
            return None;
        }
        let k = fractions.len() as u128;
        let exact = fractions
            .iter()
            .try_fold((0u128, 1u128), |(num, den), &(a, b)| {
                let (a, b) = (u128::from(a), u128::from(b));
                let num = num.checked_mul(b)?.checked_add(a.checked_mul(den)?)?;
                let den = den.checked_mul(b)?;
                let g = gcd(num, den);
                Some((num / g, den / g))
            });
        Some(
            match exact.and_then(|(num, den)| Some((num, den.checked_mul(k)?))) {
                Some((num, den)) if num < 1 << 53 && den < 1 << 53 => num as f64 / den as f64,
                _ => {
                    fractions
                        .iter()
                        .map(|&(a, b)| a as f64 / b as f64)
                        .sum::<f64>()
                        / k as f64
                }
            },
        )
    }

    pub fn pixel_accuracy(&self) -> Option<f64> {
        let total = self.total();
        let hits: u64 = (0..self.num_classes).map(|c| self.count(c, c)).sum();
        (total > 0).then(|| hits as f64 / total as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub confusion: ConfusionMatrix,
}

impl MiouReport {
    /// CSV with header `class_id,iou`; absent classes are written as `nan`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class_id,iou\n");
        for (c, iou) in self.per_class.iter().enumerate() {
            match iou {
                Some(v) => writeln!(out, "{c},{v}").unwrap(),
                None => writeln!(out, "{c},nan").unwrap(),
            }
        }
        out
    }
}

/// mIoU over `(prediction, target)` pairs accumulated into one confusion matrix.
pub fn miou_from_pairs<'a>(
    pairs: impl IntoIterator<Item = (&'a LabelMap, &'a LabelMap)>,
    num_classes: usize,
) -> Result<MiouReport> {
    let mut confusion = ConfusionMatrix::new(num_classes);
    for (p, t) in pairs {
        confusion.add(p, t)?;
    }
    let (Some(miou), Some(pixel_accuracy)) = (confusion.miou(), confusion.pixel_accuracy()) else {
        return Err(Error::EmptyDataset);
    };
    Ok(MiouReport {
        per_class: confusion.iou(),
        miou,
        pixel_accuracy,
        confusion,
    })
}

/// Pixels within Chebyshev distance `band` of a target class boundary, i.e.
/// whose `(2·band+1)²` neighbourhood contains another target class.
pub fn boundary_band(target: &LabelMap, band: usize) -> Vec<bool> {
    let (h, w) = (target.height(), target.width());
    let mut out = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            let here = target.at(r, c);
            let rows = r.saturating_sub(band)..(r + band + 1).min(h);
            out[r * w + c] = rows
                .flat_map(|y| (c.saturating_sub(band)..(c + band + 1).min(w)).map(move |x| (y, x)))
                .any(|(y, x)| target.at(y, x) != here);
        }
    }
    out
}

/// Hit and total counts of pixel accuracy inside the boundary band.
pub fn boundary_band_counts(pred: &LabelMap, target: &LabelMap, band: usize) -> Result<(u64, u64)> {
    if band == 0 {
        return Err(Error::invalid(
            "boundary_band_accuracy",
            "band must be at least 1",
        ));
    }
    if (pred.height(), pred.width()) != (target.height(), target.width()) {
        return Err(Error::invalid(
            "boundary_band_accuracy",
            "prediction and target sizes differ",
        ));
    }
    let mask = boundary_band(target, band);
    let mut hits = 0;
    let mut total = 0;
    for ((&m, &p), &t) in mask.iter().zip(pred.values()).zip(target.values()) {
        if m {
            total += 1;
            hits += u64::from(p == t);
        }
    }
    Ok((hits, total))
}

/// Pixel accuracy restricted to the boundary band; `Ok(None)` signals an
/// empty band (uniform target).
pub fn boundary_band_accuracy(
    pred: &LabelMap,
    target: &LabelMap,
    band: usize,
) -> Result<Option<f64>> {
    let (hits, total) = boundary_band_counts(pred, target, band)?;
    Ok((total > 0).then(|| hits as f64 / total as f64))
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(rows: &[&[usize]]) -> LabelMap {
        LabelMap::new(rows.len(), rows[0].len(), rows.concat()).unwrap()
    }

    #[test]
    fn hand_confusion_matrix() {
        let t = map(&[&[0, 0], &[1, 1]]);
        let p = map(&[&[0, 1], &[1, 1]]);
        let r = miou_from_pairs([(&p, &t)], 2).unwrap();
        assert_eq!(r.per_class, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert_eq!(r.miou, 7.0 / 12.0);
        assert_eq!(
            r.to_csv(),
            format!("class_id,iou\n0,0.5\n1,{}\n", 2.0 / 3.0)
        );
    }

    #[test]
    fn absent_class_is_excluded() {
        let t = map(&[&[0, 1]]);
        let r = miou_from_pairs([(&t, &t)], 3).unwrap();
        assert_eq!(r.per_class[2], None);
        assert_eq!(r.miou, 1.0);
        assert!(r.to_csv().ends_with("2,nan\n"));
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(miou_from_pairs([], 2), Err(Error::EmptyDataset)));
    }

    #[test]
    fn uniform_target_has_empty_band() {
        let t = map(&[&[1, 1], &[1, 1]]);
        assert_eq!(boundary_band_accuracy(&t, &t, 1).unwrap(), None);
        assert!(boundary_band_accuracy(&t, &t, 0).is_err());
    }
}
