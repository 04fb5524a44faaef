use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Chain, ForwardTrace, GradientVector, Matrix};
use crate::error::{shape, Error, Result};
use crate::scalar::{Real, Ring};

pub fn softmax_rows<T: Real>(logits: &Matrix<T>) -> Matrix<T> {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(shape(format!("{} labels for a batch of {rows}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Precondition(format!(
            "label {bad} out of range for {classes} outputs"
        )));
    }
    Ok(())
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn xent_logit_grad<T: Real>(logits: &Matrix<T>, labels: &[usize]) -> Result<(T, Matrix<T>)> {
    let b = logits.rows();
    check_labels(labels, b, logits.cols())?;
    if b == 0 {
        return Ok((T::zero(), logits.clone()));
    }
    let inv_b = T::one() / T::from_count(b);
    let mut grad = softmax_rows(logits);
    let mut loss = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
        loss += lse - row[y];
        let g = grad.row_mut(i);
        g[y] -= T::one();
        for v in g.iter_mut() {
            *v *= inv_b;
        }
    }
    Ok((loss * inv_b, grad))
}

pub fn xent_loss_grad<T: Real>(
    chain: &Chain<'_, T>,
    trace: &ForwardTrace<T>,
    labels: &[usize],
) -> Result<(T, GradientVector<T>)> {
    let (loss, dlogits) = xent_logit_grad(trace.logits(), labels)?;
    let mut grads = trace.zero_output_grads();
    *grads.last_mut().expect("nonempty") = dlogits;
    Ok((loss, chain.backward(trace, &grads)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DrlConfig {
    /// Weight on the representation loss; must be >= 0.
    pub lambda: f64,
    /// Whether the logit layer enters the sums alongside the hidden layers.
    pub include_logits: bool,
}

impl Default for DrlConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            include_logits: false,
        }
    }
}

impl DrlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("DRL lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Between-class and within-class representation similarity terms.
///
/// Pair counts are over ordered pairs `(i, j)`; an empty pair set makes its
/// term zero.
#[derive(Debug, Clone, PartialEq)]
pub struct DrlTerms<T> {
    pub between: T,
    pub within: T,
    pub between_pairs: usize,
    pub within_pairs: usize,
    /// `d(between + within) / d h_l` for each supplied layer.
    pub grads: Vec<Matrix<T>>,
}

impl<T: Ring> DrlTerms<T> {
    pub fn total(&self) -> T {
        self.between + self.within
    }
}

/// Similarity terms over the given layer outputs (all `batch x width_l`).
pub fn drl_terms<T: Ring>(layers: &[&Matrix<T>], labels: &[usize]) -> Result<DrlTerms<T>> {
    let b = labels.len();
    for m in layers {
        if m.rows() != b {
            return Err(shape(format!("layer has {} rows for {b} labels", m.rows())));
        }
    }
    let mut class_count: BTreeMap<usize, usize> = BTreeMap::new();
    for &y in labels {
        *class_count.entry(y).or_default() += 1;
    }
    let within_pairs: usize = class_count.values().map(|&n| n * (n - 1)).sum();
    let between_pairs = b * b - class_count.values().map(|&n| n * n).sum::<usize>();
    let two = T::one() + T::one();
    let coef = |pairs: usize| {
        if pairs == 0 {
            T::zero()
        } else {
            T::one() / T::from_count(pairs)
        }
    };
    let (cb, cw) = (coef(between_pairs), coef(within_pairs));

    let mut between_sum = T::zero();
    let mut within_sum = T::zero();
    let mut grads = Vec::with_capacity(layers.len());
    for h in layers {
        let width = h.cols();
        let mut total = vec![T::zero(); width];
        let mut by_class: BTreeMap<usize, Vec<T>> = BTreeMap::new();
        for (i, &y) in labels.iter().enumerate() {
            let s = by_class.entry(y).or_insert_with(|| vec![T::zero(); width]);
            for ((t, c), &v) in total.iter_mut().zip(s.iter_mut()).zip(h.row(i)) {
                *t += v;
                *c += v;
            }
        }
        let mut g = Matrix::zeros(b, width);
        for (i, &y) in labels.iter().enumerate() {
            let hi = h.row(i);
            let same = &by_class[&y];
            let gi = g.row_mut(i);
            for k in 0..width {
                let other = total[k] - same[k];
                let peer = same[k] - hi[k];
                between_sum += hi[k] * other;
                within_sum += hi[k] * peer;
                gi[k] = two * (cb * other + cw * peer);
            }
        }
        grads.push(g);
    }
    Ok(DrlTerms {
        between: between_sum * cb,
        within: within_sum * cw,
        between_pairs,
        within_pairs,
        grads,
    })
}

fn drl_layer_indices<T: Ring>(trace: &ForwardTrace<T>, cfg: &DrlConfig) -> Vec<usize> {
    let n = trace.layer_count();
    let hidden = n - 1;
    (0..if cfg.include_logits { n } else { hidden }).collect()
}

/// Unweighted representation loss over the configured layers of a trace and
/// its gradient with respect to the chain's parameters.
pub fn drl_loss_grad<T: Ring>(
    chain: &Chain<'_, T>,
    trace: &ForwardTrace<T>,
    labels: &[usize],
    cfg: &DrlConfig,
) -> Result<(T, GradientVector<T>)> {
    if labels.is_empty() {
        return Err(Error::Precondition("DRL needs a nonempty batch".into()));
    }
    let idx = drl_layer_indices(trace, cfg);
    let layers: Vec<&Matrix<T>> = idx.iter().map(|&l| &trace.outputs[l]).collect();
    let terms = drl_terms(&layers, labels)?;
    let mut grads = trace.zero_output_grads();
    for (l, g) in idx.into_iter().zip(terms.grads.iter()) {
        grads[l] = g.clone();
    }
    Ok((terms.total(), chain.backward(trace, &grads)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts<T> {
    pub xent: T,
    pub drl: T,
}

/// Cross-entropy plus `lambda * L_DR` with one backward pass.
pub fn combined_loss_grad<T: Real>(
    chain: &Chain<'_, T>,
    trace: &ForwardTrace<T>,
    labels: &[usize],
    drl: Option<&DrlConfig>,
) -> Result<(LossParts<T>, GradientVector<T>)> {
    let (xent, dlogits) = xent_logit_grad(trace.logits(), labels)?;
    let mut grads = trace.zero_output_grads();
    let last = grads.len() - 1;
    grads[last] = dlogits;
    let mut drl_value = T::zero();
    if let Some(cfg) = drl {
        cfg.validate()?;
        let lambda = T::lit(cfg.lambda);
        let idx = drl_layer_indices(trace, cfg);
        let layers: Vec<&Matrix<T>> = idx.iter().map(|&l| &trace.outputs[l]).collect();
        let terms = drl_terms(&layers, labels)?;
        drl_value = terms.total();
        for (l, g) in idx.into_iter().zip(terms.grads) {
            for (a, b) in grads[l].as_mut_slice().iter_mut().zip(g.as_slice()) {
                *a += lambda * *b;
            }
        }
    }
    let grad = chain.backward(trace, &grads)?;
    Ok((
        LossParts {
            xent,
            drl: drl_value,
        },
        grad,
    ))
}

/// Raw inner product and cosine of two gradients (cosine is 0 when either
/// norm is 0).
pub fn grad_alignment<T: Real>(g_t: &GradientVector<T>, g_k: &GradientVector<T>) -> Result<(T, T)> {
    if g_t.len() != g_k.len() {
        return Err(shape(format!(
            "gradient lengths differ: {} vs {}",
            g_t.len(),
            g_k.len()
        )));
    }
    let inner = g_t.dot(g_k);
    let denom = g_t.dot(g_t).sqrt() * g_k.dot(g_k).sqrt();
    let cosine = if denom > T::zero() { inner / denom } else { T::zero() };
    Ok((inner, cosine))
}

/// `score_c = prob_c / prior_c`.
pub fn prior_corrected_scores<T: Real>(probs: &[T], priors: &[T]) -> Result<Vec<T>> {
    if probs.len() != priors.len() {
        return Err(shape("probabilities and priors differ in length"));
    }
    if let Some(i) = priors.iter().position(|&p| !(p > T::zero())) {
        return Err(Error::Precondition(format!("prior of class {i} is not positive")));
    }
    if probs.iter().any(|&p| p < T::zero()) {
        return Err(Error::Precondition("negative probability".into()));
    }
    Ok(probs.iter().zip(priors).map(|(&p, &q)| p / q).collect())
}

/// Class with the largest `prob / prior`. Ties on the corrected score go to
/// the larger raw probability, then to the lowest index, so equal priors
/// always pick the same class as `argmax(probs)` even when division rounds
/// two distinct probabilities together.
pub fn prior_corrected_argmax<T: Real>(probs: &[T], priors: &[T]) -> Result<usize> {
    let scores = prior_corrected_scores(probs, priors)?;
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i] > scores[best] || (scores[i] == scores[best] && probs[i] > probs[best]) {
            best = i;
        }
    }
    Ok(best)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}
