use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over an `N x Cls` batch of logits.
///
/// Returns the loss and its gradient w.r.t. the logits. Uses the
/// log-sum-exp shift by the row maximum.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::Dimension {
            op: "cross entropy",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let (n, classes) = (logits.shape()[0], logits.shape()[1]);
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Label { label, classes });
    }
    if n == 0 {
        return Ok((T::zero(), Tensor::zeros(logits.shape())));
    }
    let inv_n = T::one() / T::from_usize_lossy(n);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); n * classes];
    for ((row, grow), &label) in logits.data().chunks_exact(classes).zip(grad.chunks_exact_mut(classes)).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (g, &v) in grow.iter_mut().zip(row) {
            *g = (v - max).exp();
            z += *g;
        }
        loss += z.ln() + max - row[label];
        for g in grow.iter_mut() {
            *g = *g / z * inv_n;
        }
        grow[label] -= inv_n;
    }
    Ok((loss * inv_n, Tensor::new(logits.shape(), grad)?))
}

/// Top-1 and top-5 hit counts for a batch of logits.
pub fn topk_hits<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> (usize, usize) {
    let classes = logits.shape()[1];
    let mut top1 = 0;
    let mut top5 = 0;
    for (row, &label) in logits.data().chunks_exact(classes).zip(labels) {
        let target = row[label];
        // ties count against the label so constant logits are not a hit
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(j, &v)| j != label && v >= target)
            .count();
        top1 += usize::from(rank == 0);
        top5 += usize::from(rank < 5);
    }
    (top1, top5)
}
