//! Saliency evaluation: PR and ROC curves over 256 thresholds, AUC,
//! maximum and adaptive F-measure, and mean absolute error.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{quantize, BinaryMask, SaliencyMap};

pub const THRESHOLDS: usize = 256;
pub const BETA2: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub precision: f64,
    pub recall: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// Point `t` treats a pixel as salient when its 8-bit value is at least `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    pub points: Vec<CurvePoint>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio_or(self.tp, self.tp + self.fp, 1.0)
    }

    pub fn recall(&self) -> f64 {
        ratio_or(self.tp, self.tp + self.fn_, 1.0)
    }

    pub fn fpr(&self) -> f64 {
        ratio_or(self.fp, self.fp + self.tn, 0.0)
    }

    fn point(&self) -> CurvePoint {
        let recall = self.recall();
        CurvePoint {
            precision: self.precision(),
            recall,
            tpr: recall,
            fpr: self.fpr(),
        }
    }
}

fn ratio_or(num: u64, den: u64, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

fn check_pair(map: &SaliencyMap, gt: &BinaryMask) -> Result<()> {
    if !gt.same_size(map.width(), map.height()) {
        return Err(Error::size_mismatch(
            "map vs ground truth",
            (gt.width(), gt.height()),
            (map.width(), map.height()),
        ));
    }
    Ok(())
}

/// Confusion counts at every threshold.
pub fn threshold_counts(map: &SaliencyMap, gt: &BinaryMask) -> Result<Vec<Counts>> {
    check_pair(map, gt)?;
    let mut pos = [0u64; THRESHOLDS];
    let mut neg = [0u64; THRESHOLDS];
    for (&v, &g) in map.values().iter().zip(gt.values()) {
        let q = quantize(v) as usize;
        if g {
            pos[q] += 1;
        } else {
            neg[q] += 1;
        }
    }
    let (p_total, n_total): (u64, u64) = (pos.iter().sum(), neg.iter().sum());
    let mut out = vec![
        Counts {
            tp: 0,
            fp: 0,
            fn_: 0,
            tn: 0
        };
        THRESHOLDS
    ];
    let (mut tp, mut fp) = (0, 0);
    for t in (0..THRESHOLDS).rev() {
        tp += pos[t];
        fp += neg[t];
        out[t] = Counts {
            tp,
            fp,
            fn_: p_total - tp,
            tn: n_total - fp,
        };
    }
    Ok(out)
}

pub fn image_curve(map: &SaliencyMap, gt: &BinaryMask) -> Result<PrCurve> {
    Ok(PrCurve {
        points: threshold_counts(map, gt)?.iter().map(Counts::point).collect(),
    })
}

/// Per-threshold average of the per-image curves.
pub fn pr_roc(maps: &[SaliencyMap], gts: &[BinaryMask]) -> Result<PrCurve> {
    if maps.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    if maps.len() != gts.len() {
        return Err(Error::len_mismatch("ground truths", maps.len(), gts.len()));
    }
    let curves = maps
        .iter()
        .zip(gts)
        .map(|(m, g)| image_curve(m, g))
        .collect::<Result<Vec<_>>>()?;
    Ok(average_curves(&curves))
}

pub fn average_curves(curves: &[PrCurve]) -> PrCurve {
    let n = curves.len() as f64;
    let points = (0..THRESHOLDS)
        .map(|t| {
            let mut acc = CurvePoint {
                precision: 0.0,
                recall: 0.0,
                tpr: 0.0,
                fpr: 0.0,
            };
            for c in curves {
                let p = c.points[t];
                acc.precision += p.precision;
                acc.recall += p.recall;
                acc.tpr += p.tpr;
                acc.fpr += p.fpr;
            }
            CurvePoint {
                precision: acc.precision / n,
                recall: acc.recall / n,
                tpr: acc.tpr / n,
                fpr: acc.fpr / n,
            }
        })
        .collect();
    PrCurve { points }
}

/// Trapezoidal area under `(fpr, tpr)` sorted by fpr, with `(0,0)` and
/// `(1,1)` added.
pub fn auc(curve: &PrCurve) -> f64 {
    let mut pts: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.fpr, p.tpr)).collect();
    pts.push((0.0, 0.0));
    pts.push((1.0, 1.0));
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

pub fn f_measure(precision: f64, recall: f64, beta2: f64) -> f64 {
    let den = beta2 * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + beta2) * precision * recall / den
    }
}

pub fn max_f(curve: &PrCurve, beta2: f64) -> f64 {
    curve
        .points
        .iter()
        .map(|p| f_measure(p.precision, p.recall, beta2))
        .fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

/// Binarizes at twice the mean saliency (capped at 1).
pub fn adaptive_prf(map: &SaliencyMap, gt: &BinaryMask) -> Result<Prf> {
    check_pair(map, gt)?;
    let threshold = (2.0 * map.mean()).min(1.0);
    let mut c = Counts {
        tp: 0,
        fp: 0,
        fn_: 0,
        tn: 0,
    };
    for (&v, &g) in map.values().iter().zip(gt.values()) {
        match (v >= threshold, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    let (precision, recall) = (c.precision(), c.recall());
    Ok(Prf {
        precision,
        recall,
        f: f_measure(precision, recall, BETA2),
    })
}

pub fn mae(map: &SaliencyMap, gt: &BinaryMask) -> Result<f64> {
    check_pair(map, gt)?;
    let total: f64 = map
        .values()
        .iter()
        .zip(gt.values())
        .map(|(&v, &g)| (v - g as u8 as f64).abs())
        .sum();
    Ok(total / map.values().len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auc: f64,
    pub max_f: f64,
    pub adaptive: Prf,
    pub mae: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub per_image: Vec<MetricReport>,
    /// AUC and max-F from the averaged curve; adaptive precision, recall and
    /// MAE averaged over images, with F recomputed from the averages.
    pub summary: MetricReport,
    pub curve: PrCurve,
}

pub fn evaluate(maps: &[SaliencyMap], gts: &[BinaryMask]) -> Result<Evaluation> {
    if maps.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    if maps.len() != gts.len() {
        return Err(Error::len_mismatch("ground truths", maps.len(), gts.len()));
    }
    let mut curves = Vec::with_capacity(maps.len());
    let mut per_image = Vec::with_capacity(maps.len());
    for (m, g) in maps.iter().zip(gts) {
        let curve = image_curve(m, g)?;
        per_image.push(MetricReport {
            auc: auc(&curve),
            max_f: max_f(&curve, BETA2),
            adaptive: adaptive_prf(m, g)?,
            mae: mae(m, g)?,
        });
        curves.push(curve);
    }
    let curve = average_curves(&curves);
    let n = per_image.len() as f64;
    let precision = per_image.iter().map(|r| r.adaptive.precision).sum::<f64>() / n;
    let recall = per_image.iter().map(|r| r.adaptive.recall).sum::<f64>() / n;
    let summary = MetricReport {
        auc: auc(&curve),
        max_f: max_f(&curve, BETA2),
        adaptive: Prf {
            precision,
            recall,
            f: f_measure(precision, recall, BETA2),
        },
        mae: per_image.iter().map(|r| r.mae).sum::<f64>() / n,
    };
    Ok(Evaluation {
        per_image,
        summary,
        curve,
    })
}

fn report_row(name: &str, r: &MetricReport) -> String {
    format!(
        "{name},{},{},{},{},{},{}",
        r.auc, r.max_f, r.adaptive.precision, r.adaptive.recall, r.adaptive.f, r.mae
    )
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    Ok(std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

/// One row per image followed by a `dataset` summary row.
pub fn write_report_csv(path: impl AsRef<Path>, ids: &[String], eval: &Evaluation) -> Result<()> {
    let path = path.as_ref();
    if ids.len() != eval.per_image.len() {
        return Err(Error::len_mismatch("report ids", eval.per_image.len(), ids.len()));
    }
    let io = |e| Error::io(path, e);
    let mut out = create(path)?;
    writeln!(out, "image,auc,max_f,adaptive_precision,adaptive_recall,adaptive_f,mae").map_err(io)?;
    for (id, r) in ids.iter().zip(&eval.per_image) {
        writeln!(out, "{}", report_row(id, r)).map_err(io)?;
    }
    writeln!(out, "{}", report_row("dataset", &eval.summary)).map_err(io)?;
    out.flush().map_err(io)
}

pub fn write_summary_json(path: impl AsRef<Path>, eval: &Evaluation) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::json!({
        "images": eval.per_image.len(),
        "summary": eval.summary,
    });
    std::fs::write(path, serde_json::to_vec_pretty(&json).expect("json")).map_err(|e| Error::io(path, e))
}

pub fn write_curve_csv(path: impl AsRef<Path>, curve: &PrCurve) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut out = create(path)?;
    writeln!(out, "threshold,precision,recall,tpr,fpr").map_err(io)?;
    for (t, p) in curve.points.iter().enumerate() {
        writeln!(out, "{t},{},{},{},{}", p.precision, p.recall, p.tpr, p.fpr).map_err(io)?;
    }
    out.flush().map_err(io)
}
