//! Center-distance AP, true-positive errors and the composite detection
//! score over a test set.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::loss::softmax_row;
use crate::model::DetectionOutput;
use crate::world::{GtBox, CLASSES};

pub const THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
pub const TP_THRESHOLD: f64 = 2.0;
const RECALL_POINTS: usize = 101;

/// One scored box, as produced by a detector for one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub frame: usize,
    pub query: usize,
    pub class: usize,
    pub score: f64,
    pub bbox: [f64; 6],
    pub velocity: [f64; 2],
}

/// Every query becomes a prediction with its most likely foreground class.
pub fn decode(out: &DetectionOutput, frame: usize) -> Vec<Prediction> {
    (0..out.queries())
        .map(|q| {
            let p = softmax_row(out.logits.row(q));
            let (class, &score) = p[..p.len() - 1]
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .expect("at least one class");
            let b = out.boxes.row(q);
            let v = out.velocity.row(q);
            Prediction {
                frame,
                query: q,
                class,
                score,
                bbox: std::array::from_fn(|i| b[i] as f64),
                velocity: [v[0] as f64, v[1] as f64],
            }
        })
        .collect()
}

fn center_dist(p: &Prediction, g: &GtBox) -> f64 {
    (p.bbox[0] - g.bbox[0]).hypot(p.bbox[1] - g.bbox[1])
}

/// Greedy matching of one class: predictions in descending confidence (ties
/// by frame, then query) take the nearest unmatched ground truth of the same
/// frame within `threshold`. Returns the TP flag per visited prediction and
/// the matched pairs.
fn greedy_match(
    preds: &[&Prediction],
    gts: &[Vec<&GtBox>],
    threshold: f64,
) -> (Vec<bool>, Vec<(usize, usize, usize)>) {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        let (p, q) = (preds[a], preds[b]);
        q.score
            .total_cmp(&p.score)
            .then(p.frame.cmp(&q.frame))
            .then(p.query.cmp(&q.query))
    });
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = Vec::with_capacity(order.len());
    let mut pairs = Vec::new();
    for i in order {
        let p = preds[i];
        let mut best: Option<(usize, f64)> = None;
        if let Some(frame_gts) = gts.get(p.frame) {
            for (j, g) in frame_gts.iter().enumerate() {
                let d = center_dist(p, g);
                if !taken[p.frame][j] && d < threshold && best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((j, d));
                }
            }
        }
        match best {
            Some((j, _)) => {
                taken[p.frame][j] = true;
                tp.push(true);
                pairs.push((i, p.frame, j));
            }
            None => tp.push(false),
        }
    }
    (tp, pairs)
}

/// 101-point interpolated area under the precision-recall curve.
pub fn interpolated_ap(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 || tp.is_empty() {
        return 0.0;
    }
    let mut prec = Vec::with_capacity(tp.len());
    let mut rec = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        prec.push(hits as f64 / (k + 1) as f64);
        rec.push(hits as f64 / n_gt as f64);
    }
    // running max from the right makes precision monotone
    for k in (0..prec.len().saturating_sub(1)).rev() {
        prec[k] = prec[k].max(prec[k + 1]);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for r in 0..RECALL_POINTS {
        let target = r as f64 / (RECALL_POINTS - 1) as f64;
        while k < rec.len() && rec[k] < target - 1e-12 {
            k += 1;
        }
        if k == rec.len() {
            break;
        }
        sum += prec[k];
    }
    sum / RECALL_POINTS as f64
}

fn split_class<'a>(
    preds: &'a [Prediction],
    gts: &'a [Vec<GtBox>],
    class: usize,
) -> (Vec<&'a Prediction>, Vec<Vec<&'a GtBox>>, usize) {
    let p: Vec<&Prediction> = preds.iter().filter(|p| p.class == class).collect();
    let g: Vec<Vec<&GtBox>> = gts
        .iter()
        .map(|f| f.iter().filter(|g| g.class == class).collect())
        .collect();
    let n = g.iter().map(Vec::len).sum();
    (p, g, n)
}

/// AP of one class at one threshold; `gts[frame]` lists that frame's boxes.
pub fn center_distance_ap(preds: &[Prediction], gts: &[Vec<GtBox>], class: usize, threshold: f64) -> f64 {
    let (p, g, n) = split_class(preds, gts, class);
    let (tp, _) = greedy_match(&p, &g, threshold);
    interpolated_ap(&tp, n)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TpErrors {
    pub ate: f64,
    pub ase: f64,
    pub ave: f64,
}

/// `1 − IoU` of two boxes sharing a centre and orientation.
pub fn scale_error(a: &[f64; 6], b: &[f64; 6]) -> f64 {
    let inter: f64 = (3..6).map(|i| a[i].min(b[i])).product();
    let (va, vb): (f64, f64) = ((3..6).map(|i| a[i]).product(), (3..6).map(|i| b[i]).product());
    1.0 - inter / (va + vb - inter)
}

/// Mean errors of matched pairs; an empty set yields 1.0 for each.
pub fn tp_errors(pairs: &[(&Prediction, &GtBox)]) -> TpErrors {
    if pairs.is_empty() {
        return TpErrors {
            ate: 1.0,
            ase: 1.0,
            ave: 1.0,
        };
    }
    let n = pairs.len() as f64;
    let mut e = TpErrors::default();
    for (p, g) in pairs {
        e.ate += center_dist(p, g);
        e.ase += scale_error(&p.bbox, &g.bbox);
        e.ave += (p.velocity[0] - g.velocity[0]).hypot(p.velocity[1] - g.velocity[1]);
    }
    TpErrors {
        ate: e.ate / n,
        ase: e.ase / n,
        ave: e.ave / n,
    }
}

/// `(5·mAP + Σ (1 − min(1, e)))/8` over ATE/2 m, ASE and AVE/(2 m/s).
pub fn detection_score(map: f64, e: &TpErrors) -> f64 {
    let terms = [e.ate / 2.0, e.ase, e.ave / 2.0];
    (5.0 * map + terms.iter().map(|t| 1.0 - t.min(1.0)).sum::<f64>()) / 8.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "DS")]
    pub ds: f64,
    #[serde(rename = "mATE")]
    pub mate: f64,
    #[serde(rename = "mASE")]
    pub mase: f64,
    #[serde(rename = "mAVE")]
    pub mave: f64,
    /// Per class, AP averaged over thresholds; `None` when the class has no
    /// ground truth.
    pub class_ap: Vec<Option<f64>>,
}

/// Full evaluation of a test set. mAP averages over classes present in the
/// ground truth, then thresholds; TP errors are averaged per class at 2 m.
pub fn evaluate_predictions(preds: &[Prediction], gts: &[Vec<GtBox>]) -> Metrics {
    let mut class_ap = vec![None; CLASSES];
    let mut errs = Vec::new();
    for (c, slot) in class_ap.iter_mut().enumerate() {
        let (p, g, n) = split_class(preds, gts, c);
        if n == 0 {
            continue;
        }
        let ap: f64 = THRESHOLDS
            .iter()
            .map(|&t| interpolated_ap(&greedy_match(&p, &g, t).0, n))
            .sum::<f64>()
            / THRESHOLDS.len() as f64;
        *slot = Some(ap);
        let (_, pairs) = greedy_match(&p, &g, TP_THRESHOLD);
        let matched: Vec<(&Prediction, &GtBox)> = pairs.iter().map(|&(i, f, j)| (p[i], g[f][j])).collect();
        errs.push(tp_errors(&matched));
    }
    let present: Vec<f64> = class_ap.iter().flatten().copied().collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    let e = if errs.is_empty() {
        tp_errors(&[])
    } else {
        let n = errs.len() as f64;
        TpErrors {
            ate: errs.iter().map(|e| e.ate).sum::<f64>() / n,
            ase: errs.iter().map(|e| e.ase).sum::<f64>() / n,
            ave: errs.iter().map(|e| e.ave).sum::<f64>() / n,
        }
    };
    Metrics {
        map,
        ds: detection_score(map, &e),
        mate: e.ate,
        mase: e.ase,
        mave: e.ave,
        class_ap,
    }
}

/// One row of a comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub method: String,
    #[serde(flatten)]
    pub metrics: Metrics,
    /// `MML − Baseline` for the same model; absent on baseline rows.
    #[serde(rename = "dmAP")]
    pub d_map: Option<f64>,
    #[serde(rename = "dDS")]
    pub d_ds: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

pub const BASELINE: &str = "Baseline";

impl EvalReport {
    pub fn push(&mut self, model: &str, method: &str, metrics: Metrics) {
        self.rows.push(ReportRow {
            model: model.to_string(),
            method: method.to_string(),
            metrics,
            d_map: None,
            d_ds: None,
        });
    }

    /// Fills the Δ columns of every non-baseline row that has a baseline
    /// row for the same model.
    pub fn fill_deltas(&mut self) {
        let base: Vec<(String, f64, f64)> = self
            .rows
            .iter()
            .filter(|r| r.method == BASELINE)
            .map(|r| (r.model.clone(), r.metrics.map, r.metrics.ds))
            .collect();
        for r in &mut self.rows {
            if r.method == BASELINE {
                continue;
            }
            if let Some((_, m, d)) = base.iter().find(|b| b.0 == r.model) {
                r.d_map = Some(r.metrics.map - m);
                r.d_ds = Some(r.metrics.ds - d);
            }
        }
    }

    pub fn row(&self, model: &str, method: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.model == model && r.method == method)
    }

    pub const CSV_HEADER: &'static str = "model,method,mAP,DS,mATE,mASE,mAVE,dmAP,dDS";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        let opt = |x: Option<f64>| x.map(|v| format!("{v}")).unwrap_or_default();
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.model,
                r.method,
                m.map,
                m.ds,
                m.mate,
                m.mase,
                m.mave,
                opt(r.d_map),
                opt(r.d_ds)
            );
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| model | method | mAP | DS | mATE | mASE | mAVE | ΔmAP | ΔDS |\n");
        s.push_str("|---|---|---|---|---|---|---|---|---|\n");
        let opt = |x: Option<f64>| x.map(|v| format!("{v:+.4}")).unwrap_or_default();
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                s,
                "| {} | {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {} | {} |",
                r.model,
                r.method,
                m.map,
                m.ds,
                m.mate,
                m.mase,
                m.mave,
                opt(r.d_map),
                opt(r.d_ds)
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(frame: usize, query: usize, class: usize, score: f64, x: f64, y: f64) -> Prediction {
        Prediction {
            frame,
            query,
            class,
            score,
            bbox: [x, y, 0.5, 1.0, 1.0, 1.0],
            velocity: [0.0, 0.0],
        }
    }

    fn gt(class: usize, x: f64, y: f64) -> GtBox {
        GtBox {
            class,
            bbox: [x, y, 0.5, 1.0, 1.0, 1.0],
            velocity: [0.0, 0.0],
        }
    }

    #[test]
    fn perfect_and_empty_detectors() {
        let gts = vec![vec![gt(0, 1.0, 1.0), gt(1, -2.0, 3.0)], vec![gt(0, 4.0, 0.0)]];
        let perfect = vec![
            pred(0, 0, 0, 0.9, 1.0, 1.0),
            pred(0, 1, 1, 0.8, -2.0, 3.0),
            pred(1, 0, 0, 0.7, 4.0, 0.0),
        ];
        for t in THRESHOLDS {
            assert_eq!(center_distance_ap(&perfect, &gts, 0, t), 1.0);
        }
        let m = evaluate_predictions(&perfect, &gts);
        assert_eq!(m.map, 1.0);
        assert_eq!(m.ds, 1.0);
        assert_eq!(m.class_ap, vec![Some(1.0), Some(1.0), None]);
        assert_eq!(center_distance_ap(&[], &gts, 0, 2.0), 0.0);
        let none = evaluate_predictions(&[], &gts);
        assert_eq!((none.map, none.mate), (0.0, 1.0));
    }

    #[test]
    fn tp_at_seven_tenths_of_a_metre() {
        let gts = vec![vec![gt(2, 0.0, 0.0)]];
        let p = vec![pred(0, 0, 2, 0.5, 0.7, 0.0)];
        let aps: Vec<f64> = THRESHOLDS.iter().map(|&t| center_distance_ap(&p, &gts, 2, t)).collect();
        assert_eq!(aps, vec![0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn tp_error_examples() {
        let g = gt(0, 0.0, 0.0);
        let same = pred(0, 0, 0, 1.0, 0.0, 0.0);
        assert_eq!(tp_errors(&[(&same, &g)]), TpErrors::default());
        let moved = pred(0, 0, 0, 1.0, 0.3, 0.4);
        assert!((tp_errors(&[(&moved, &g)]).ate - 0.5).abs() < 1e-12);
        let mut half = same.clone();
        for e in &mut half.bbox[3..] {
            *e = 0.5;
        }
        assert!((tp_errors(&[(&half, &g)]).ase - 7.0 / 8.0).abs() < 1e-12);
        assert_eq!(tp_errors(&[]), TpErrors { ate: 1.0, ase: 1.0, ave: 1.0 });
    }

    #[test]
    fn detection_score_examples() {
        assert_eq!(detection_score(1.0, &TpErrors::default()), 1.0);
        let sat = TpErrors { ate: 5.0, ase: 1.0, ave: 9.0 };
        assert_eq!(detection_score(0.0, &sat), 0.0);
        let e = TpErrors { ate: 1.0, ase: 0.25, ave: 1.0 };
        assert!((detection_score(0.4, &e) - 0.46875).abs() < 1e-12);
    }

    #[test]
    fn interpolation_of_a_half_recall_curve() {
        // one TP then one FP with two gts: recall reaches 0.5 at precision 1
        assert!((interpolated_ap(&[true, false], 2) - 51.0 / 101.0).abs() < 1e-12);
    }

    #[test]
    fn report_formats_agree() {
        let gts = vec![vec![gt(0, 1.0, 1.0)]];
        let m = evaluate_predictions(&[pred(0, 0, 0, 0.9, 1.2, 1.0)], &gts);
        let mut r = EvalReport::default();
        r.push("enc-a+sca+tsa+det-head", BASELINE, m.clone());
        let mut better = m.clone();
        better.map += 0.1;
        r.push("enc-a+sca+tsa+det-head", "MML-Average", better);
        r.fill_deltas();
        assert!((r.rows[1].d_map.unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(r.rows[1].d_ds, Some(0.0));
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with(EvalReport::CSV_HEADER));
        let json: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert_eq!(json["rows"][1]["dmAP"].as_f64(), r.rows[1].d_map);
        assert_eq!(json["rows"][0]["mAP"].as_f64(), Some(m.map));
    }
}
