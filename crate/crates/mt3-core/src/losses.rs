//! Loss functions: normalized pair distance, the symmetric self-supervised
//! loss over two augmented views, cross-entropy, and the weighted total.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Weight of the self-supervised term in the total objective.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { gamma: 0.1 }
    }
}

/// 2 - 2 * cos(a, b) for two nonzero vectors: the squared euclidean distance
/// of their l2-normalized versions. Range [0, 4].
pub fn byol_pair_distance<T: Scalar>(g: &Graph<T>, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa.len() != 1 || sa != sb {
        return Err(Error::ShapeMismatch {
            op: "byol-pair-distance",
            lhs: sa,
            rhs: sb,
        });
    }
    let a2 = g.reshape(a, &[1, sa[0]])?;
    let b2 = g.reshape(b, &[1, sa[0]])?;
    let rows = pair_distance_rows(g, a2, b2)?;
    g.sum_all(rows)
}

/// Row-wise 2 - 2 * cos over two [N, D] batches -> [N].
pub fn pair_distance_rows<T: Scalar>(g: &Graph<T>, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa.len() != 2 || sa != sb {
        return Err(Error::ShapeMismatch {
            op: "byol-pair-distance",
            lhs: sa,
            rhs: sb,
        });
    }
    let an = g.l2_normalize(a, 1)?;
    let bn = g.l2_normalize(b, 1)?;
    let prod = g.mul(an, bn)?;
    let cos = g.reduce_sum(prod, &[1], false)?;
    Ok(g.affine(cos, -2.0, 2.0))
}

/// Symmetric two-view loss: pair(r, z_t) + pair(r_t, z), where r / r_t are
/// the task-specific model's predictions of the two views and z / z_t the
/// meta-model's projections of the same views. Range [0, 8].
pub fn byol_loss<T: Scalar>(g: &Graph<T>, r: Var, r_t: Var, z: Var, z_t: Var) -> Result<Var> {
    let first = byol_pair_distance(g, r, z_t)?;
    let second = byol_pair_distance(g, r_t, z)?;
    g.add(first, second)
}

/// Batched mean of the symmetric two-view loss over [N, D] rows.
pub fn byol_loss_mean<T: Scalar>(g: &Graph<T>, r: Var, r_t: Var, z: Var, z_t: Var) -> Result<Var> {
    let first = pair_distance_rows(g, r, z_t)?;
    let second = pair_distance_rows(g, r_t, z)?;
    let per_row = g.add(first, second)?;
    g.mean_all(per_row)
}

fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Tensor<T> {
    Tensor::from_fn(&[labels.len(), classes], |i| {
        if i % classes == labels[i / classes] {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// Mean negative log-softmax at the true labels, max-shift stabilized.
pub fn cross_entropy_mean<T: Scalar>(g: &Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = g.shape(logits);
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::InvalidArgument {
            op: "cross-entropy",
            msg: format!("logits {:?} vs {} labels", s, labels.len()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
        return Err(Error::InvalidArgument {
            op: "cross-entropy",
            msg: format!("label {bad} out of range for {} classes", s[1]),
        });
    }
    let ls = g.log_softmax(logits, 1)?;
    let oh = g.constant(one_hot::<T>(labels, s[1]));
    let picked = g.mul(ls, oh)?;
    let per_row = g.reduce_sum(picked, &[1], false)?;
    let mean = g.mean_all(per_row)?;
    Ok(g.neg(mean))
}

/// Single-sample cross-entropy over a [C] logit vector.
pub fn cross_entropy<T: Scalar>(g: &Graph<T>, logits: Var, label: usize) -> Result<Var> {
    let s = g.shape(logits);
    if s.len() != 1 {
        return Err(Error::InvalidArgument {
            op: "cross-entropy",
            msg: format!("expected rank-1 logits, got {:?}", s),
        });
    }
    let row = g.reshape(logits, &[1, s[0]])?;
    cross_entropy_mean(g, row, &[label])
}

/// ce + gamma * byol.
pub fn total_loss<T: Scalar>(g: &Graph<T>, ce: Var, byol: Var, w: &LossWeights) -> Result<Var> {
    let weighted = g.affine(byol, w.gamma, 0.0);
    g.add(ce, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn pair_distance_cosine_anchors() {
        let g = Graph::<f64>::new();
        let a = g.constant(t(&[1.0, 2.0, -0.5]));
        let same = byol_pair_distance(&g, a, a).unwrap();
        assert!(g.value(same).item().abs() < 1e-12);

        let b = g.neg(a);
        let anti = byol_pair_distance(&g, a, b).unwrap();
        assert!((g.value(anti).item() - 4.0).abs() < 1e-12);

        let x = g.constant(t(&[1.0, 0.0]));
        let y = g.constant(t(&[0.0, 3.0]));
        let orth = byol_pair_distance(&g, x, y).unwrap();
        assert!((g.value(orth).item() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_is_an_error() {
        let g = Graph::<f64>::new();
        let a = g.constant(t(&[0.0, 0.0]));
        let b = g.constant(t(&[1.0, 0.0]));
        assert!(matches!(
            byol_pair_distance(&g, a, b),
            Err(Error::ZeroNorm { .. })
        ));
    }

    #[test]
    fn byol_loss_minimum_and_scale_invariance() {
        let g = Graph::<f64>::new();
        let z = g.constant(t(&[0.3, -0.7, 1.1]));
        let z_t = g.constant(t(&[1.0, 0.2, -0.4]));
        // predictions proportional to the opposite-view projections -> 0
        let r = g.affine(z_t, 2.5, 0.0);
        let r_t = g.affine(z, 0.3, 0.0);
        let loss = byol_loss(&g, r, r_t, z, z_t).unwrap();
        assert!(g.value(loss).item().abs() < 1e-12);

        // rescaling one input leaves the value unchanged
        let r2 = g.constant(t(&[0.9, 0.1, 0.5]));
        let base = byol_loss(&g, r2, r_t, z, z_t).unwrap();
        let r2s = g.affine(r2, 37.0, 0.0);
        let scaled = byol_loss(&g, r2s, r_t, z, z_t).unwrap();
        assert!((g.value(base).item() - g.value(scaled).item()).abs() < 1e-12);
    }

    #[test]
    fn view_swap_symmetry() {
        let g = Graph::<f64>::new();
        let r = g.constant(t(&[0.9, 0.1, 0.5]));
        let r_t = g.constant(t(&[-0.2, 0.8, 0.3]));
        let z = g.constant(t(&[0.4, 0.4, -0.1]));
        let z_t = g.constant(t(&[1.2, -0.3, 0.6]));
        let a = byol_loss(&g, r, r_t, z, z_t).unwrap();
        let b = byol_loss(&g, r_t, r, z_t, z).unwrap();
        assert!((g.value(a).item() - g.value(b).item()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_and_shift_invariance() {
        let g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros(&[10]));
        let ce = cross_entropy(&g, logits, 3).unwrap();
        assert!((g.value(ce).item() - (10.0f64).ln()).abs() < 1e-12);

        let raw = g.constant(t(&[2.0, -1.0, 0.5, 3.0]));
        let base = cross_entropy(&g, raw, 2).unwrap();
        let shifted = g.affine(raw, 1.0, 41.0);
        let moved = cross_entropy(&g, shifted, 2).unwrap();
        assert!((g.value(base).item() - g.value(moved).item()).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_decreases_toward_confident_truth() {
        let g = Graph::<f64>::new();
        let mut last = f64::INFINITY;
        for scale in [0.0, 1.0, 3.0, 10.0, 40.0] {
            let logits = g.constant(t(&[scale, 0.0, 0.0]));
            let ce = cross_entropy(&g, logits, 0).unwrap();
            let v = g.value(ce).item();
            assert!(v <= last);
            last = v;
        }
        assert!(last < 1e-10);
    }

    #[test]
    fn total_loss_weighting() {
        let g = Graph::<f64>::new();
        let ce = g.constant(Tensor::scalar(2.0));
        let byol = g.constant(Tensor::scalar(1.0));
        let w = LossWeights::default();
        assert!((w.gamma - 0.1).abs() < 1e-15);
        let total = total_loss(&g, ce, byol, &w).unwrap();
        assert!((g.value(total).item() - 2.1).abs() < 1e-12);
        let zero = total_loss(&g, ce, byol, &LossWeights { gamma: 0.0 }).unwrap();
        assert!((g.value(zero).item() - 2.0).abs() < 1e-12);
    }
}
