//! Matching and contrastive losses with analytic gradients.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::synth::rng_for;

const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the `1 - cos` term.
    pub cosine: f64,
    /// Weight of the SmoothL1 term.
    pub smooth_l1: f64,
    pub smooth_l1_beta: f64,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cosine: 1.0,
            smooth_l1: 1.0,
            smooth_l1_beta: 1.0,
            temperature: 0.1,
        }
    }
}

/// A scalar loss and its gradient with respect to the prediction rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: DMatrix<f64>,
    /// Set when the loss was defined as zero because its precondition failed
    /// (empty mask, fewer than two eligible groups).
    pub degenerate: bool,
}

impl LossOutput {
    fn zero(rows: usize, cols: usize) -> Self {
        Self {
            value: 0.0,
            grad: DMatrix::zeros(rows, cols),
            degenerate: true,
        }
    }
}

fn smooth_l1(x: f64, beta: f64) -> (f64, f64) {
    let a = x.abs();
    if beta > 0.0 && a < beta {
        (0.5 * x * x / beta, x / beta)
    } else {
        (a - 0.5 * beta, x.signum())
    }
}

/// Per-row `cos(p, t)` and its gradient with respect to `p`.
fn cosine_and_grad(p: &[f64], t: &[f64], grad: &mut [f64]) -> f64 {
    let pn = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    let tn = t.iter().map(|v| v * v).sum::<f64>().sqrt();
    if pn < NORM_FLOOR || tn < NORM_FLOOR {
        grad.iter_mut().for_each(|g| *g = 0.0);
        return 0.0;
    }
    let cos = p.iter().zip(t).map(|(a, b)| a * b).sum::<f64>() / (pn * tn);
    for k in 0..p.len() {
        grad[k] = t[k] / (pn * tn) - cos * p[k] / (pn * pn);
    }
    cos
}

/// Mean over masked rows of `cosine (1 - cos) + smooth_l1 * mean_k SmoothL1(p_k - t_k)`.
pub fn loss_match(
    pred: &DMatrix<f64>,
    target: &DMatrix<f64>,
    mask: &[bool],
    w: &LossWeights,
) -> LossOutput {
    assert_eq!(
        pred.shape(),
        target.shape(),
        "prediction/target shape mismatch"
    );
    assert_eq!(mask.len(), pred.nrows(), "mask length mismatch");
    let (n, d) = pred.shape();
    let m = mask.iter().filter(|&&b| b).count();
    if m == 0 {
        return LossOutput::zero(n, d);
    }
    let inv_m = 1.0 / m as f64;
    let inv_d = 1.0 / d.max(1) as f64;
    let mut grad = DMatrix::zeros(n, d);
    let mut total = 0.0;
    let mut p = vec![0.0; d];
    let mut t = vec![0.0; d];
    let mut g = vec![0.0; d];
    for i in (0..n).filter(|&i| mask[i]) {
        for k in 0..d {
            p[k] = pred[(i, k)];
            t[k] = target[(i, k)];
        }
        let mut row_loss = 0.0;
        if w.cosine != 0.0 {
            let cos = cosine_and_grad(&p, &t, &mut g);
            row_loss += w.cosine * (1.0 - cos);
            for k in 0..d {
                grad[(i, k)] -= inv_m * w.cosine * g[k];
            }
        }
        if w.smooth_l1 != 0.0 {
            let mut s = 0.0;
            for k in 0..d {
                let (v, dv) = smooth_l1(p[k] - t[k], w.smooth_l1_beta);
                s += v;
                grad[(i, k)] += inv_m * w.smooth_l1 * inv_d * dv;
            }
            row_loss += w.smooth_l1 * s * inv_d;
        }
        total += row_loss;
    }
    LossOutput {
        value: total * inv_m,
        grad,
        degenerate: false,
    }
}

/// Which label structure a teacher's contrastive term pools over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveKind {
    None,
    Semantic,
    Instance,
}

/// Bidirectional InfoNCE over group-mean embeddings.
///
/// Masked rows are grouped by label; each group with at least two members is
/// split into seeded random halves A and B whose means are l2-normalized.
/// Logits are cosine similarities over `temperature`; the loss averages the
/// cross-entropies A->B and B->A with the same group as the positive.
pub fn info_nce(
    pred: &DMatrix<f64>,
    labels: &[u32],
    mask: &[bool],
    temperature: f64,
    seed: u64,
) -> LossOutput {
    let (n, d) = pred.shape();
    assert_eq!(labels.len(), n, "label length mismatch");
    assert_eq!(mask.len(), n, "mask length mismatch");
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for i in (0..n).filter(|&i| mask[i]) {
        groups.entry(labels[i]).or_default().push(i);
    }
    let mut rng = rng_for(seed, 0xc0);
    let halves: Vec<(Vec<usize>, Vec<usize>)> = groups
        .into_values()
        .filter(|g| g.len() >= 2)
        .map(|mut g| {
            g.shuffle(&mut rng);
            let b = g.split_off(g.len() / 2);
            (g, b)
        })
        .collect();
    let c = halves.len();
    if c < 2 {
        return LossOutput::zero(n, d);
    }

    let mean_of = |rows: &[usize]| {
        let mut v = DVector::zeros(d);
        for &i in rows {
            v += pred.row(i).transpose();
        }
        v / rows.len() as f64
    };
    let pooled_a: Vec<DVector<f64>> = halves.iter().map(|h| mean_of(&h.0)).collect();
    let pooled_b: Vec<DVector<f64>> = halves.iter().map(|h| mean_of(&h.1)).collect();
    let unit = |v: &DVector<f64>| v / v.norm().max(NORM_FLOOR);
    let ua: Vec<DVector<f64>> = pooled_a.iter().map(unit).collect();
    let ub: Vec<DVector<f64>> = pooled_b.iter().map(unit).collect();

    let s = DMatrix::from_fn(c, c, |x, y| ua[x].dot(&ub[y]) / temperature);
    // cross-entropy with the diagonal as target, row-wise (A->B) and column-wise (B->A)
    let softmax_rows = |m: &DMatrix<f64>| {
        let mut out = m.clone();
        for mut row in out.row_iter_mut() {
            let mx = row.max();
            row.apply(|v| *v = (*v - mx).exp());
            let z = row.sum();
            row /= z;
        }
        out
    };
    let pr = softmax_rows(&s);
    let pc = softmax_rows(&s.transpose()).transpose();
    let ce = |m: &DMatrix<f64>| {
        (0..c)
            .map(|x| {
                let row = m.row(x);
                let mx = row.max();
                mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() - m[(x, x)]
            })
            .sum::<f64>()
            / c as f64
    };
    let value = 0.5 * (ce(&s) + ce(&s.transpose()));

    let eye = DMatrix::<f64>::identity(c, c);
    let ds = ((pr - &eye) + (pc - &eye)) * (0.5 / c as f64);
    let mut grad = DMatrix::zeros(n, d);
    for x in 0..c {
        let mut dua = DVector::zeros(d);
        let mut dub = DVector::zeros(d);
        for y in 0..c {
            dua += &ub[y] * (ds[(x, y)] / temperature);
            dub += &ua[y] * (ds[(y, x)] / temperature);
        }
        for (pooled, u, du, rows) in [
            (&pooled_a[x], &ua[x], dua, &halves[x].0),
            (&pooled_b[x], &ub[x], dub, &halves[x].1),
        ] {
            let norm = pooled.norm().max(NORM_FLOOR);
            let dp = (&du - u * u.dot(&du)) / norm;
            let share = dp / rows.len() as f64;
            for &i in rows {
                for k in 0..d {
                    grad[(i, k)] += share[k];
                }
            }
        }
    }
    LossOutput {
        value,
        grad,
        degenerate: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_prediction_has_zero_loss() {
        let p = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 0.0]);
        let out = loss_match(&p, &p, &[true, true], &LossWeights::default());
        assert!(out.value.abs() < 1e-15);
        assert!(out.grad.norm() < 1e-12);
    }

    #[test]
    fn orthogonal_rows_cost_one() {
        let p = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let t = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        let w = LossWeights {
            smooth_l1: 0.0,
            ..LossWeights::default()
        };
        assert!((loss_match(&p, &t, &[true], &w).value - 1.0).abs() < 1e-15);
    }

    #[test]
    fn quadratic_smooth_l1_branch() {
        let p = DMatrix::from_element(3, 4, 0.5);
        let t = DMatrix::zeros(3, 4);
        let w = LossWeights {
            cosine: 0.0,
            ..LossWeights::default()
        };
        assert!((loss_match(&p, &t, &[true; 3], &w).value - 0.125).abs() < 1e-15);
    }

    #[test]
    fn empty_mask_is_flagged() {
        let p = DMatrix::from_element(2, 2, 1.0);
        let out = loss_match(&p, &p, &[false, false], &LossWeights::default());
        assert!(out.degenerate && out.value == 0.0);
    }

    #[test]
    fn separated_classes_closed_form() {
        let mut p = DMatrix::zeros(8, 2);
        for i in 0..4 {
            p[(i, 0)] = 1.0;
            p[(i + 4, 1)] = 1.0;
        }
        let labels = [0, 0, 0, 0, 1, 1, 1, 1];
        let out = info_nce(&p, &labels, &[true; 8], 0.1, 1);
        let want = (1.0 + (-10.0f64).exp()).ln();
        assert!((out.value - want).abs() < 1e-12);
    }

    #[test]
    fn shared_embedding_gives_log_c() {
        let p = DMatrix::from_element(9, 3, 0.7);
        let labels = [0, 0, 0, 1, 1, 1, 2, 2, 2];
        let out = info_nce(&p, &labels, &[true; 9], 0.1, 4);
        assert!((out.value - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_group_is_degenerate() {
        let p = DMatrix::from_element(4, 3, 0.7);
        let out = info_nce(&p, &[0, 0, 0, 1], &[true; 4], 0.1, 4);
        assert!(out.degenerate);
    }
}
