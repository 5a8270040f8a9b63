//! Training objectives: batch-hard triplet, softmax cross-entropy and their sum
//! with the weighted inter-frame regularizer.

use std::collections::BTreeMap;

use crate::error::{Result, StaError};
use crate::numerics::Tensor;

/// How per-row terms are reduced to a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

impl Reduction {
    fn factor(self, rows: usize) -> f64 {
        match self {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / rows as f64,
        }
    }
}

/// Embeddings and logits for a `P×K` identity batch.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    /// `rows×E`
    pub embeddings: Tensor,
    /// Class index per row.
    pub labels: Vec<usize>,
    /// `rows×C`
    pub logits: Tensor,
}

impl LabeledBatch {
    /// Builds a batch, checking that every identity has the same number of rows.
    pub fn new(embeddings: Tensor, labels: Vec<usize>, logits: Tensor) -> Result<Self> {
        let rows = labels.len();
        if embeddings.rank() != 2 || embeddings.shape()[0] != rows {
            return Err(StaError::dim("embedding rows", rows, embeddings.shape()[0]));
        }
        if logits.rank() != 2 || logits.shape()[0] != rows {
            return Err(StaError::dim("logit rows", rows, logits.shape()[0]));
        }
        let counts = identity_counts(&labels);
        let per_id = counts.values().next().copied().unwrap_or(0);
        if let Some((id, &c)) = counts.iter().find(|(_, &c)| c != per_id) {
            return Err(StaError::arg(format!(
                "identity {id} has {c} rows but the batch uses {per_id} per identity"
            )));
        }
        Ok(Self { embeddings, labels, logits })
    }

    pub fn identities(&self) -> usize {
        identity_counts(&self.labels).len()
    }
}

fn identity_counts(labels: &[usize]) -> BTreeMap<usize, usize> {
    let mut m = BTreeMap::new();
    for &l in labels {
        *m.entry(l).or_insert(0) += 1;
    }
    m
}

/// Value and gradient of one loss over a batch.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Tensor,
    /// Number of rows whose term was non-zero.
    pub active: usize,
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Batch-hard triplet loss over `rows×E` embeddings.
///
/// Each anchor takes its farthest same-identity row and nearest other-identity
/// row; ties go to the lowest row index.
pub fn batch_hard_triplet(embeddings: &Tensor, labels: &[usize], margin: f64, reduction: Reduction) -> Result<LossGrad> {
    if embeddings.rank() != 2 || embeddings.shape()[0] != labels.len() {
        return Err(StaError::dim("triplet rows", labels.len(), embeddings.shape()[0]));
    }
    if let Some((id, _)) = identity_counts(labels).iter().find(|(_, &c)| c < 2) {
        return Err(StaError::arg(format!("identity {id} has fewer than 2 rows; no positive exists")));
    }
    let rows = labels.len();
    let e = embeddings.shape()[1];
    let row = |i: usize| &embeddings.data()[i * e..(i + 1) * e];
    let scale = reduction.factor(rows);
    let mut grad = Tensor::zeros(embeddings.shape());
    let mut value = 0.0;
    let mut active = 0;
    for a in 0..rows {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for j in 0..rows {
            if j == a {
                continue;
            }
            let d = euclidean(row(a), row(j));
            if labels[j] == labels[a] {
                if pos.is_none_or(|(_, best)| d > best) {
                    pos = Some((j, d));
                }
            } else if neg.is_none_or(|(_, best)| d < best) {
                neg = Some((j, d));
            }
        }
        let (p, dp) = pos.expect("at least two rows per identity");
        let Some((n, dn)) = neg else {
            return Err(StaError::arg("triplet loss needs at least two identities"));
        };
        let term = margin + dp - dn;
        if term <= 0.0 {
            continue;
        }
        active += 1;
        value += term;
        let g = grad.data_mut();
        if dp > 0.0 {
            for c in 0..e {
                let u = (row(a)[c] - row(p)[c]) / dp * scale;
                g[a * e + c] += u;
                g[p * e + c] -= u;
            }
        }
        if dn > 0.0 {
            for c in 0..e {
                let u = (row(a)[c] - row(n)[c]) / dn * scale;
                g[a * e + c] -= u;
                g[n * e + c] += u;
            }
        }
    }
    Ok(LossGrad {
        value: value * scale,
        grad,
        active,
    })
}

/// Softmax cross-entropy of `rows×C` logits against class labels.
pub fn softmax_xent(logits: &Tensor, labels: &[usize], reduction: Reduction) -> Result<LossGrad> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(StaError::dim("logit rows", labels.len(), logits.shape()[0]));
    }
    let c = logits.shape()[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(StaError::arg(format!("label {bad} out of range for {c} classes")));
    }
    let scale = reduction.factor(labels.len());
    let mut grad = Tensor::zeros(logits.shape());
    let mut value = 0.0;
    let mut active = 0;
    for (r, (z, &y)) in logits.data().chunks_exact(c).zip(labels).enumerate() {
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let loss = total.ln() - (z[y] - max);
        if loss > 0.0 {
            active += 1;
        }
        value += loss;
        let g = &mut grad.data_mut()[r * c..(r + 1) * c];
        for (k, (gv, ev)) in g.iter_mut().zip(&exps).enumerate() {
            let p = ev / total;
            *gv = (p - if k == y { 1.0 } else { 0.0 }) * scale;
        }
    }
    Ok(LossGrad {
        value: value * scale,
        grad,
        active,
    })
}

/// `l_softmax + l_triplet + λ·reg`.
pub fn total_objective(l_softmax: f64, l_triplet: f64, reg: f64, lambda: f64) -> f64 {
    l_softmax + l_triplet + lambda * reg
}

/// Scalar breakdown of one training step's objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub l_triplet: f64,
    pub l_softmax: f64,
    pub reg: f64,
    pub total: f64,
    pub active_triplets: usize,
}

impl LossReport {
    pub fn new(l_softmax: f64, l_triplet: f64, reg: f64, lambda: f64, active_triplets: usize) -> Self {
        Self {
            l_triplet,
            l_softmax,
            reg,
            total: total_objective(l_softmax, l_triplet, reg, lambda),
            active_triplets,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn col(values: &[f64]) -> Tensor {
        Tensor::new(vec![values.len(), 1], values.to_vec()).unwrap()
    }

    #[test]
    fn identical_embeddings_pay_full_margin() {
        let e = Tensor::full(&[4, 3], 0.7);
        let l = batch_hard_triplet(&e, &[0, 0, 1, 1], 0.3, Reduction::Sum).unwrap();
        assert!((l.value - 1.2).abs() < 1e-12);
        assert_eq!(l.active, 4);
    }

    #[test]
    fn well_separated_is_zero() {
        let l = batch_hard_triplet(&col(&[0.0, 1.0, 10.0, 12.0]), &[0, 0, 1, 1], 0.3, Reduction::Sum).unwrap();
        assert_eq!(l.value, 0.0);
        assert_eq!(l.active, 0);
    }

    #[test]
    fn hand_enumerated_terms() {
        let l = batch_hard_triplet(&col(&[0.0, 5.0, 6.0, 7.0]), &[0, 0, 1, 1], 1.0, Reduction::Sum).unwrap();
        assert!((l.value - 6.0).abs() < 1e-12);
        assert_eq!(l.active, 2);
        let m = batch_hard_triplet(&col(&[0.0, 5.0, 6.0, 7.0]), &[0, 0, 1, 1], 1.0, Reduction::Mean).unwrap();
        assert!((m.value - 1.5).abs() < 1e-12);
    }

    #[test]
    fn lone_identity_is_rejected() {
        let r = batch_hard_triplet(&col(&[0.0, 1.0, 2.0]), &[0, 0, 1], 0.3, Reduction::Sum);
        assert!(matches!(r, Err(StaError::Argument(_))));
    }

    #[test]
    fn softmax_examples() {
        let l = softmax_xent(&Tensor::zeros(&[1, 4]), &[2], Reduction::Sum).unwrap();
        assert!((l.value - 4f64.ln()).abs() < 1e-12);
        let z = Tensor::new(vec![1, 3], vec![0.0, 1000.0, 0.0]).unwrap();
        assert!(softmax_xent(&z, &[1], Reduction::Sum).unwrap().value.abs() < 1e-12);
        assert!(matches!(softmax_xent(&z, &[3], Reduction::Sum), Err(StaError::Argument(_))));
    }

    #[test]
    fn softmax_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let z = Tensor::from_fn(&[3, 5], |_| rng.random_range(-3.0..3.0));
        let labels = [4, 0, 2];
        let l = softmax_xent(&z, &labels, Reduction::Sum).unwrap();
        let mut naive = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = &z.data()[r * 5..r * 5 + 5];
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            naive -= (row[y].exp() / denom).ln();
        }
        assert!((l.value - naive).abs() < 1e-10);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let labels = [0, 0, 1, 1, 2, 2];
        for reduction in [Reduction::Sum, Reduction::Mean] {
            let e = Tensor::from_fn(&[6, 3], |_| rng.random_range(-1.0..1.0));
            let err = gradcheck(
                |t| batch_hard_triplet(t, &labels, 0.5, reduction).map(|l| (l.value, l.grad)),
                &e,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-6, "triplet {reduction:?}: {err}");
            let z = Tensor::from_fn(&[6, 4], |_| rng.random_range(-2.0..2.0));
            let err = gradcheck(|t| softmax_xent(t, &labels, reduction).map(|l| (l.value, l.grad)), &z, 1e-6).unwrap();
            assert!(err < 1e-6, "softmax {reduction:?}: {err}");
        }
    }

    #[test]
    fn total_examples() {
        assert_eq!(total_objective(1.0, 2.0, 0.5, 2.0), 4.0);
        assert_eq!(total_objective(1.5, 2.5, 9.0, 0.0), 4.0);
        assert_eq!(total_objective(0.0, 0.0, 0.0, 0.1), 0.0);
        let r = LossReport::new(1.0, 2.0, 0.5, 0.1, 3);
        assert!((r.total - (r.l_softmax + r.l_triplet + 0.1 * r.reg)).abs() < 1e-12);
    }

    #[test]
    fn batch_requires_uniform_counts() {
        let e = Tensor::zeros(&[3, 2]);
        let z = Tensor::zeros(&[3, 2]);
        assert!(LabeledBatch::new(e, vec![0, 0, 1], z).is_err());
        let b = LabeledBatch::new(Tensor::zeros(&[4, 2]), vec![1, 0, 0, 1], Tensor::zeros(&[4, 2])).unwrap();
        assert_eq!(b.identities(), 2);
    }
}
