//! Set-matching detection loss: Hungarian assignment of queries to ground
//! truth, softmax focal classification and L1 regression.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::model::{DetectionOutput, DetectionVars};
use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};
use crate::world::GtBox;

pub const COST_CLASS: f64 = 2.0;
pub const COST_L1: f64 = 5.0;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;

// stand-in for non-finite costs, which would stall the potential updates
const COST_CAP: f64 = 1e15;

/// Minimum-cost assignment of every row to a distinct column. Requires
/// `rows ≤ cols`; returns the column of each row. Non-finite costs are
/// treated as a large finite cost.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "hungarian needs rows ≤ cols");
    // potentials and matching over 1-based indices, column 0 is a sentinel
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let c = cost[i0 - 1][j - 1];
                let c = if c.is_finite() { c.clamp(-COST_CAP, COST_CAP) } else { COST_CAP };
                let cur = c - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(query, gt)` pairs sorted by query.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
    pub cost: f64,
}

pub fn softmax_row(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let e: Vec<f64> = logits.iter().map(|&x| (x as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `cost[q][g] = 2·(1 − p_q(class_g)) + 5·‖box_q − box_g‖₁`.
pub fn match_cost(pred: &DetectionOutput, gt: &[GtBox]) -> Vec<Vec<f64>> {
    (0..pred.queries())
        .map(|q| {
            let p = softmax_row(pred.logits.row(q));
            let b = pred.boxes.row(q);
            gt.iter()
                .map(|g| {
                    let l1: f64 = b.iter().zip(&g.bbox).map(|(&x, y)| (x as f64 - y).abs()).sum();
                    COST_CLASS * (1.0 - p[g.class]) + COST_L1 * l1
                })
                .collect()
        })
        .collect()
}

pub fn match_predictions(pred: &DetectionOutput, gt: &[GtBox]) -> MatchResult {
    let cost = match_cost(pred, gt);
    let nq = pred.queries();
    let mut pairs: Vec<(usize, usize)> = if gt.len() <= nq {
        let t: Vec<Vec<f64>> = (0..gt.len()).map(|g| (0..nq).map(|q| cost[q][g]).collect()).collect();
        hungarian(&t).into_iter().enumerate().map(|(g, q)| (q, g)).collect()
    } else {
        hungarian(&cost).into_iter().enumerate().collect()
    };
    pairs.sort_unstable();
    let total = pairs.iter().map(|&(q, g)| cost[q][g]).sum();
    let unmatched = (0..nq).filter(|q| pairs.binary_search_by_key(q, |p| p.0).is_err()).collect();
    MatchResult {
        pairs,
        unmatched,
        cost: total,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub cls: Var,
    pub reg: Option<Var>,
}

/// `L = L_cls + L_reg`. Classification is a softmax focal loss over every
/// query, background being the last class; α weights matched queries and
/// `1 − α` background ones. Regression sums the L1 error of the six box and
/// two velocity components per matched query. Both are normalized by the
/// number of ground-truth objects.
pub fn detection_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred: &DetectionVars,
    gt: &[GtBox],
    m: &MatchResult,
) -> Result<LossVars, TensorError> {
    let shape = tape.shape(pred.logits).to_vec();
    let (nq, k1) = (shape[0], shape[1]);
    let mut target = vec![k1 - 1; nq];
    let mut alpha = vec![T::of(-(1.0 - FOCAL_ALPHA)); nq];
    for &(q, g) in &m.pairs {
        target[q] = gt[g].class;
        alpha[q] = T::of(-FOCAL_ALPHA);
    }
    let norm = 1.0 / (gt.len().max(1) as f64);

    let lp = tape.log_softmax(pred.logits);
    let logp = tape.pick_cols(lp, Arc::new(target))?;
    let pt = tape.exp(logp);
    let neg = tape.scale(pt, T::of(-1.0));
    let om = tape.add_scalar(neg, T::one());
    let om2 = tape.mul(om, om)?;
    let f = tape.mul(om2, logp)?;
    let f = tape.reshape(f, vec![nq, 1])?;
    let f = tape.scale_rows(f, Arc::new(alpha))?;
    let cls = tape.sum(f);
    let cls = tape.scale(cls, T::of(norm));

    if m.pairs.is_empty() {
        return Ok(LossVars {
            total: cls,
            cls,
            reg: None,
        });
    }
    let qs = Arc::new(m.pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    let b = tape.gather_rows(pred.boxes, qs.clone())?;
    let v = tape.gather_rows(pred.velocity, qs)?;
    let bv = tape.concat_cols(b, v)?;
    let mut tgt = Vec::with_capacity(m.pairs.len() * 8);
    for &(_, g) in &m.pairs {
        tgt.extend(gt[g].bbox.iter().chain(&gt[g].velocity).map(|&x| T::of(-x)));
    }
    let d = tape.add_const(bv, &Tensor::matrix(m.pairs.len(), 8, tgt)?)?;
    let d = tape.abs(d);
    let reg = tape.sum(d);
    let reg = tape.scale(reg, T::of(norm));
    let total = tape.add(cls, reg)?;
    Ok(LossVars {
        total,
        cls,
        reg: Some(reg),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn brute(cost: &[Vec<f64>]) -> f64 {
        fn rec(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
            if row == cost.len() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..used.len() {
                if !used[j] {
                    used[j] = true;
                    best = best.min(cost[row][j] + rec(cost, row + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        rec(cost, 0, &mut vec![false; cost[0].len()])
    }

    #[test]
    fn hungarian_beats_greedy_trap() {
        // greedy takes (0,0)=1 then is forced into 10s
        let c = vec![vec![1.0, 2.0, 10.0], vec![2.0, 10.0, 10.0], vec![10.0, 3.0, 10.0]];
        let a = hungarian(&c);
        let total: f64 = a.iter().enumerate().map(|(i, &j)| c[i][j]).sum();
        assert_eq!(total, brute(&c));
        assert_eq!(total, 14.0);
    }

    #[test]
    fn hungarian_terminates_on_non_finite_costs() {
        let c = vec![vec![f64::NAN, 1.0, f64::INFINITY], vec![f64::NAN, f64::NAN, 0.0]];
        let a = hungarian(&c);
        assert_eq!(a, vec![1, 2]);
        let all_nan = vec![vec![f64::NAN; 3]; 3];
        let mut a = hungarian(&all_nan);
        a.sort_unstable();
        assert_eq!(a, vec![0, 1, 2]);
    }

    #[test]
    fn hungarian_matches_brute_force_rectangular() {
        let mut r = Rng::seed_from_u64(3);
        for _ in 0..300 {
            let n = 1 + r.below(5);
            let m = n + r.below(3);
            let c: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| r.uniform(0.0, 5.0)).collect()).collect();
            let a = hungarian(&c);
            let mut seen = a.clone();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), n);
            let total: f64 = a.iter().enumerate().map(|(i, &j)| c[i][j]).sum();
            assert!((total - brute(&c)).abs() < 1e-9);
        }
    }

    fn output(rows: &[([f32; 4], [f32; 6])]) -> DetectionOutput {
        DetectionOutput {
            logits: Tensor::matrix(rows.len(), 4, rows.iter().flat_map(|r| r.0).collect()).unwrap(),
            boxes: Tensor::matrix(rows.len(), 6, rows.iter().flat_map(|r| r.1).collect()).unwrap(),
            velocity: Tensor::zeros(vec![rows.len(), 2]),
        }
    }

    fn gt(class: usize, bbox: [f64; 6]) -> GtBox {
        GtBox {
            class,
            bbox,
            velocity: [0.0, 0.0],
        }
    }

    #[test]
    fn identical_predictions_match_with_zero_box_cost() {
        let b0 = [1.0, 2.0, 0.5, 1.0, 2.0, 1.5];
        let b1 = [-3.0, 0.0, 0.5, 2.0, 4.0, 1.5];
        let hot = |c: usize| {
            let mut l = [-30.0f32; 4];
            l[c] = 30.0;
            l
        };
        let p = output(&[(hot(3), [0.0; 6]), (hot(1), b1.map(|x| x as f32)), (hot(0), b0.map(|x| x as f32))]);
        let g = vec![gt(0, b0), gt(1, b1)];
        let m = match_predictions(&p, &g);
        assert_eq!(m.pairs, vec![(1, 1), (2, 0)]);
        assert_eq!(m.unmatched, vec![0]);
        assert!(m.cost < 1e-9);
        let none = match_predictions(&p, &[]);
        assert!(none.pairs.is_empty());
        assert_eq!(none.unmatched, vec![0, 1, 2]);
    }

    fn loss_of(p: &DetectionOutput, g: &[GtBox], m: &MatchResult) -> (f64, f64, Option<f64>) {
        let mut tape = Tape::<f64>::new();
        let vars = DetectionVars {
            logits: tape.param("l", p.logits.cast()),
            boxes: tape.param("b", p.boxes.cast()),
            velocity: tape.param("v", p.velocity.cast()),
        };
        let l = detection_loss(&mut tape, &vars, g, m).unwrap();
        (
            tape.value(l.total).item(),
            tape.value(l.cls).item(),
            l.reg.map(|r| tape.value(r).item()),
        )
    }

    #[test]
    fn focal_half_probability_closed_form() {
        // two equal logits on class 0 and background: p = 0.5 for the true class
        let p = output(&[([0.0, -1e4, -1e4, 0.0], [1.0, 1.0, 0.5, 1.0, 1.0, 1.0])]);
        let g = vec![gt(0, [1.0, 1.0, 0.5, 1.0, 1.0, 1.0])];
        let m = MatchResult {
            pairs: vec![(0, 0)],
            unmatched: vec![],
            cost: 0.0,
        };
        let (total, cls, reg) = loss_of(&p, &g, &m);
        let expect = 0.25 * 0.25 * std::f64::consts::LN_2;
        assert!((cls - expect).abs() < 1e-9, "{cls}");
        assert!((expect - 0.04332).abs() < 1e-5);
        assert_eq!(reg, Some(0.0));
        assert_eq!(total, cls);
    }

    #[test]
    fn confident_correct_predictions_have_near_zero_loss() {
        let b = [1.0, 1.0, 0.5, 1.0, 1.0, 1.0];
        let p = output(&[([40.0, 0.0, 0.0, 0.0], b.map(|x| x as f32)), ([0.0, 0.0, 0.0, 40.0], [0.0; 6])]);
        let g = vec![gt(0, b)];
        let m = match_predictions(&p, &g);
        let (total, _, _) = loss_of(&p, &g, &m);
        assert!(total < 1e-12, "{total}");
    }

    #[test]
    fn l1_counts_boxes_and_velocity() {
        let p = output(&[([0.0; 4], [1.5, 1.0, 0.5, 1.0, 1.0, 1.0])]);
        let mut g = gt(2, [1.0, 1.0, 0.5, 1.0, 1.0, 1.0]);
        g.velocity = [0.25, 0.0];
        let m = MatchResult {
            pairs: vec![(0, 0)],
            unmatched: vec![],
            cost: 0.0,
        };
        let (_, _, reg) = loss_of(&p, &[g], &m);
        assert!((reg.unwrap() - 0.75).abs() < 1e-7);
    }
}
