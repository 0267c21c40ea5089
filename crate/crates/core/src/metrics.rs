//! Overlap, boundary and area metrics with mean ± std aggregation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::loss::extract_contour;
use crate::mask::{BinaryMask, Pixel};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Both masks empty counts as perfect agreement.
    pub fn dice(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }

    pub fn jaccard(&self) -> f64 {
        let denom = self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            self.tp as f64 / denom as f64
        }
    }

    /// Undefined when the ground truth has no foreground.
    pub fn sensitivity(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// Undefined when the ground truth has no background.
    pub fn specificity(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fp)
    }

    /// Undefined when the prediction has no foreground.
    pub fn ppv(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }
}

fn ratio(num: u64, denom: u64) -> Option<f64> {
    (denom > 0).then(|| num as f64 / denom as f64)
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Symmetric Hausdorff distance between two point sets. `spacing` is
/// (row, col) size of a pixel; without it the result is in pixels.
/// Returns `None` if either set is empty.
pub fn hausdorff(a: &[Pixel], b: &[Pixel], spacing: Option<(f64, f64)>) -> Option<f64> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let (sy, sx) = spacing.unwrap_or((1.0, 1.0));
    let dist2 = |p: &Pixel, q: &Pixel| {
        let dy = p.0.abs_diff(q.0) as f64 * sy;
        let dx = p.1.abs_diff(q.1) as f64 * sx;
        dy * dy + dx * dx
    };
    let directed = |from: &[Pixel], to: &[Pixel]| {
        from.iter()
            .map(|p| to.iter().map(|q| dist2(p, q)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    Some(directed(a, b).max(directed(b, a)).sqrt())
}

/// `|area(pred) - area(gt)| / area(gt)`, undefined for an empty ground truth.
pub fn pad(pred: &BinaryMask, gt: &BinaryMask) -> Option<f64> {
    let g = gt.area();
    (g > 0).then(|| pred.area().abs_diff(g) as f64 / g as f64)
}

/// Identifies one evaluated frame.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FrameKey {
    pub fold: usize,
    pub patient: String,
    pub frame: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameMetrics {
    pub key: FrameKey,
    pub dice: f64,
    pub jaccard: f64,
    pub hausdorff_px: Option<f64>,
    pub hausdorff_mm: Option<f64>,
    pub pad: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub ppv: Option<f64>,
}

pub const METRIC_NAMES: [&str; 8] = [
    "dice",
    "jaccard",
    "hausdorff_px",
    "hausdorff_mm",
    "pad",
    "sensitivity",
    "specificity",
    "ppv",
];

impl FrameMetrics {
    pub fn values(&self) -> [Option<f64>; 8] {
        [
            Some(self.dice),
            Some(self.jaccard),
            self.hausdorff_px,
            self.hausdorff_mm,
            self.pad,
            self.sensitivity,
            self.specificity,
            self.ppv,
        ]
    }
}

/// All metrics for one predicted/ground-truth pair. Hausdorff is taken
/// between the two masks' contours.
pub fn evaluate_frame(key: FrameKey, pred: &BinaryMask, gt: &BinaryMask, spacing: Option<(f64, f64)>) -> Result<FrameMetrics> {
    let c = confusion(pred, gt)?;
    let (cp, cg) = (extract_contour(pred), extract_contour(gt));
    Ok(FrameMetrics {
        key,
        dice: c.dice(),
        jaccard: c.jaccard(),
        hausdorff_px: hausdorff(&cp, &cg, None),
        hausdorff_mm: spacing.and_then(|s| hausdorff(&cp, &cg, Some(s))),
        pad: pad(pred, gt),
        sensitivity: c.sensitivity(),
        specificity: c.specificity(),
        ppv: c.ppv(),
    })
}

/// Mean and population standard deviation over the defined values.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
    pub excluded: usize,
}

impl Summary {
    pub fn from_values(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let mut defined = Vec::new();
        let mut excluded = 0;
        for v in values {
            match v {
                Some(v) => defined.push(v),
                None => excluded += 1,
            }
        }
        if defined.is_empty() {
            return Summary { mean: f64::NAN, std: f64::NAN, count: 0, excluded };
        }
        let n = defined.len() as f64;
        let mean = defined.iter().sum::<f64>() / n;
        let var = defined.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Summary { mean, std: var.sqrt(), count: defined.len(), excluded }
    }

    /// "0.9500 ± 0.0300", or "-" with nothing to summarise.
    pub fn display(&self) -> String {
        if self.count == 0 {
            "-".into()
        } else {
            format!("{:.4} ± {:.4}", self.mean, self.std)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupBy {
    Fold,
    Patient,
    All,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub group: String,
    pub frames: usize,
    pub metrics: [Summary; 8],
}

fn aggregate_rows(label: String, rows: &[&FrameMetrics]) -> AggregateRow {
    let metrics = std::array::from_fn(|i| Summary::from_values(rows.iter().map(|r| r.values()[i])));
    AggregateRow { group: label, frames: rows.len(), metrics }
}

/// Mean ± std per group, groups in sorted order.
pub fn aggregate(records: &[FrameMetrics], group_by: GroupBy) -> Result<Vec<AggregateRow>> {
    if records.is_empty() {
        return Err(Error::invalid("nothing to aggregate"));
    }
    let mut groups: BTreeMap<String, Vec<&FrameMetrics>> = BTreeMap::new();
    for r in records {
        let label = match group_by {
            GroupBy::Fold => format!("fold{:02}", r.key.fold),
            GroupBy::Patient => r.key.patient.clone(),
            GroupBy::All => "all".into(),
        };
        groups.entry(label).or_default().push(r);
    }
    Ok(groups.into_iter().map(|(label, rows)| aggregate_rows(label, &rows)).collect())
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v}"))
}

/// One row per frame: fold, patient, frame, then every metric. Missing
/// values are left empty.
pub fn write_frame_csv<W: Write>(out: W, records: &[FrameMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["fold", "patient", "frame"];
    header.extend(METRIC_NAMES);
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![r.key.fold.to_string(), r.key.patient.clone(), r.key.frame.to_string()];
        row.extend(r.values().iter().map(|&v| cell(v)));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Mean ± std table, one row per group, plus the exclusion count of each
/// metric with undefined frames.
pub fn write_aggregate_csv<W: Write>(out: W, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["group".to_string(), "frames".to_string()];
    header.extend(METRIC_NAMES.iter().map(|s| s.to_string()));
    header.extend(METRIC_NAMES.iter().map(|s| format!("{s}_excluded")));
    w.write_record(&header)?;
    for r in rows {
        let mut row = vec![r.group.clone(), r.frames.to_string()];
        row.extend(r.metrics.iter().map(Summary::display));
        row.extend(r.metrics.iter().map(|m| m.excluded.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn write_frame_csv_file(path: &Path, records: &[FrameMetrics]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_frame_csv(f, records)
}

pub fn write_aggregate_csv_file(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_aggregate_csv(f, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_4x4(fg: &[usize]) -> BinaryMask {
        BinaryMask::from_fn(4, 4, |y, x| fg.contains(&(y * 4 + x)))
    }

    #[test]
    fn confusion_examples() {
        let gt = mask_4x4(&[0, 1, 2, 5, 9]);
        assert_eq!(confusion(&gt, &gt).unwrap(), ConfusionCounts { tp: 5, fp: 0, tn: 11, fn_: 0 });
        let none = mask_4x4(&[]);
        assert_eq!(confusion(&none, &gt).unwrap(), ConfusionCounts { tp: 0, fp: 0, tn: 11, fn_: 5 });
        assert!(confusion(&BinaryMask::empty(4, 5), &gt).is_err());
    }

    #[test]
    fn rate_examples() {
        let gt = mask_4x4(&[0, 1, 2]);
        let same = confusion(&gt, &gt).unwrap();
        assert_eq!((same.dice(), same.jaccard()), (1.0, 1.0));
        assert_eq!((same.sensitivity(), same.specificity(), same.ppv()), (Some(1.0), Some(1.0), Some(1.0)));

        let disjoint = confusion(&mask_4x4(&[10, 11]), &gt).unwrap();
        assert_eq!((disjoint.dice(), disjoint.jaccard()), (0.0, 0.0));
        assert_eq!((disjoint.sensitivity(), disjoint.ppv()), (Some(0.0), Some(0.0)));

        let c = ConfusionCounts { tp: 1, fp: 1, tn: 0, fn_: 2 };
        assert_eq!(c.dice(), 2.0 / 5.0);
        assert_eq!(c.jaccard(), 0.25);
    }

    #[test]
    fn degenerate_denominators() {
        let empty = confusion(&mask_4x4(&[]), &mask_4x4(&[])).unwrap();
        assert_eq!((empty.dice(), empty.jaccard()), (1.0, 1.0));
        assert_eq!(empty.ppv(), None);
        assert_eq!(empty.sensitivity(), None);
        assert_eq!(empty.specificity(), Some(1.0));
    }

    #[test]
    fn hausdorff_examples() {
        let a = vec![(0, 0), (2, 3)];
        assert_eq!(hausdorff(&a, &a, None), Some(0.0));
        assert_eq!(hausdorff(&[(0, 0)], &[(3, 4)], None), Some(5.0));
        assert_eq!(hausdorff(&[(0, 0)], &[(3, 4)], Some((0.5, 0.25))), Some((2.25f64 + 1.0).sqrt()));
        assert_eq!(hausdorff(&[], &a, None), None);
    }

    #[test]
    fn pad_examples() {
        let gt = BinaryMask::from_fn(20, 20, |y, x| y < 10 && x < 10);
        assert_eq!(pad(&gt, &gt), Some(0.0));
        let bigger = BinaryMask::from_fn(20, 20, |y, x| (y < 10 && x < 10) || (y == 15 && x < 10));
        assert!((pad(&bigger, &gt).unwrap() - 0.10).abs() < 1e-15);
        assert_eq!(pad(&BinaryMask::empty(20, 20), &gt), Some(1.0));
        assert_eq!(pad(&gt, &BinaryMask::empty(20, 20)), None);
    }

    fn record(fold: usize, patient: &str, dice: f64, ppv: Option<f64>) -> FrameMetrics {
        FrameMetrics {
            key: FrameKey { fold, patient: patient.into(), frame: 0 },
            dice,
            jaccard: dice / (2.0 - dice),
            hausdorff_px: Some(1.0),
            hausdorff_mm: None,
            pad: Some(0.0),
            sensitivity: Some(1.0),
            specificity: Some(1.0),
            ppv,
        }
    }

    #[test]
    fn aggregate_examples() {
        let single = aggregate(&[record(0, "a", 0.9, Some(1.0))], GroupBy::All).unwrap();
        assert_eq!(single[0].metrics[0].std, 0.0);

        let pair = aggregate(&[record(0, "a", 0.9, Some(1.0)), record(1, "b", 1.0, None)], GroupBy::All).unwrap();
        let dice = pair[0].metrics[0];
        assert!((dice.mean - 0.95).abs() < 1e-15 && (dice.std - 0.05).abs() < 1e-15);
        assert_eq!(pair[0].metrics[7].excluded, 1);
        assert_eq!(pair[0].metrics[3].count, 0);

        let by_fold = aggregate(&[record(1, "b", 1.0, None), record(0, "a", 0.9, None)], GroupBy::Fold).unwrap();
        assert_eq!(by_fold.iter().map(|r| r.group.as_str()).collect::<Vec<_>>(), ["fold00", "fold01"]);
        assert!(aggregate(&[], GroupBy::All).is_err());
    }

    #[test]
    fn csv_layout() {
        let rows = vec![record(0, "p1", 0.9, None), record(0, "p1", 1.0, Some(0.5))];
        let mut frames = Vec::new();
        write_frame_csv(&mut frames, &rows).unwrap();
        let text = String::from_utf8(frames).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "fold,patient,frame,dice,jaccard,hausdorff_px,hausdorff_mm,pad,sensitivity,specificity,ppv");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].ends_with(",1,1,"));

        let mut agg = Vec::new();
        write_aggregate_csv(&mut agg, &aggregate(&rows, GroupBy::All).unwrap()).unwrap();
        let text = String::from_utf8(agg).unwrap();
        assert!(text.lines().nth(1).unwrap().starts_with("all,2,0.9500 ± 0.0500,"));
    }
}
