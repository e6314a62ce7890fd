//! Logistic mixtures and categorical distributions.
//!
//! Heads emit unconstrained parameters. Each scalar attribute dimension owns a
//! block of `3K` raw values laid out as `[weight logits; means; raw scales]`
//! and is mapped to a mixture by `pi = softmax(logits)`,
//! `sigma = softplus(raw) + SCALE_FLOOR`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{logsumexp, sigmoid, softmax_in_place, softplus, CustomBackward, Graph, Var};
use crate::error::{DistributionError, TensorError};
use crate::tensor::{Real, Tensor};

/// Lower bound added to every mixture scale.
pub const SCALE_FLOOR: f64 = 1e-3;

/// Log-density of a single logistic at `x`.
pub fn logistic_log_density(x: f64, mean: f64, scale: f64) -> f64 {
    let z = (x - mean) / scale;
    -z - scale.ln() - 2.0 * softplus(-z)
}

/// One-dimensional mixture of logistic distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticMixture1D {
    weights: Vec<f64>,
    means: Vec<f64>,
    scales: Vec<f64>,
}

impl LogisticMixture1D {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, scales: Vec<f64>) -> Result<Self, DistributionError> {
        Self::with_floor(weights, means, scales, SCALE_FLOOR)
    }

    /// Validates against a custom scale floor.
    pub fn with_floor(
        weights: Vec<f64>,
        means: Vec<f64>,
        scales: Vec<f64>,
        floor: f64,
    ) -> Result<Self, DistributionError> {
        if weights.is_empty() {
            return Err(DistributionError::Empty);
        }
        if weights.len() != means.len() || weights.len() != scales.len() {
            return Err(DistributionError::LengthMismatch {
                weights: weights.len(),
                means: means.len(),
                scales: scales.len(),
            });
        }
        if weights.iter().chain(&means).chain(&scales).any(|v| !v.is_finite()) {
            return Err(DistributionError::NonFinite);
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-6 || weights.iter().any(|&w| w < 0.0) {
            return Err(DistributionError::WeightsNotNormalized(total));
        }
        if let Some(&scale) = scales.iter().find(|&&s| s < floor || s <= 0.0) {
            return Err(DistributionError::ScaleBelowFloor { scale, floor });
        }
        Ok(Self { weights, means, scales })
    }

    pub fn single(mean: f64, scale: f64) -> Result<Self, DistributionError> {
        Self::new(vec![1.0], vec![mean], vec![scale])
    }

    /// Maps one raw `[logits; means; raw scales]` block to a mixture.
    pub fn from_raw(raw: &[f64]) -> Result<Self, DistributionError> {
        if raw.is_empty() || !raw.len().is_multiple_of(3) {
            return Err(DistributionError::RawLength {
                got: raw.len(),
                expected: 3,
            });
        }
        let k = raw.len() / 3;
        let mut weights = raw[..k].to_vec();
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(DistributionError::NonFinite);
        }
        softmax_in_place(&mut weights);
        let means = raw[k..2 * k].to_vec();
        let scales = raw[2 * k..].iter().map(|&r| softplus(r) + SCALE_FLOOR).collect();
        Self::new(weights, means, scales)
    }

    /// Splits a head output row of `dims * 3K` values into per-dim mixtures.
    pub fn from_raw_row(raw: &[f64], dims: usize) -> Result<Vec<Self>, DistributionError> {
        if dims == 0 || !raw.len().is_multiple_of(3 * dims) {
            return Err(DistributionError::RawLength {
                got: raw.len(),
                expected: 3 * dims,
            });
        }
        raw.chunks(raw.len() / dims).map(Self::from_raw).collect()
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn log_prob(&self, x: f64) -> f64 {
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.means)
            .zip(&self.scales)
            .map(|((&w, &m), &s)| w.ln() + logistic_log_density(x, m, s))
            .collect();
        logsumexp(&terms)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.scales)
            .map(|((&w, &m), &s)| w * sigmoid((x - m) / s))
            .sum()
    }

    /// Weighted mean of the component means.
    pub fn mean(&self) -> f64 {
        self.weights.iter().zip(&self.means).map(|(w, m)| w * m).sum()
    }

    /// Draws a component by weight, then inverts the logistic CDF; the
    /// spread is multiplied by `temperature`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, temperature: f64) -> f64 {
        let k = sample_index(&self.weights, rng);
        let u: f64 = open_unit(rng);
        self.means[k] + self.scales[k] * temperature * (u / (1.0 - u)).ln()
    }
}

fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 && u < 1.0 {
            return u;
        }
    }
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left u above the cumulative total.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Categorical distribution over object classes plus the end symbol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalDist {
    logits: Vec<f64>,
}

impl CategoricalDist {
    pub fn new(logits: Vec<f64>) -> Result<Self, DistributionError> {
        if logits.is_empty() {
            return Err(DistributionError::Empty);
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(DistributionError::NonFinite);
        }
        Ok(Self { logits })
    }

    pub fn classes(&self) -> usize {
        self.logits.len()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn probs(&self) -> Vec<f64> {
        let mut p = self.logits.clone();
        softmax_in_place(&mut p);
        p
    }

    pub fn log_prob(&self, index: usize) -> Result<f64, DistributionError> {
        if index >= self.logits.len() {
            return Err(DistributionError::ClassOutOfRange {
                index,
                classes: self.logits.len(),
            });
        }
        Ok(self.logits[index] - logsumexp(&self.logits))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_index(&self.probs(), rng)
    }
}

/// Graph op: per-row log-density of `targets` (`[B, dims]`) under mixtures
/// parameterized by `raw` (`[B, dims * 3K]`), summed over dims. Output `[B]`.
/// Differentiable with respect to both inputs.
pub fn mixture_log_prob<S: Real>(g: &Graph<S>, raw: Var, targets: Var, components: usize) -> Result<Var, TensorError> {
    let (vr, vt) = (g.value(raw), g.value(targets));
    let (rows, dims) = vt.rows_cols();
    if vr.shape() != [rows, dims * 3 * components] || vt.shape().len() != 2 {
        return Err(TensorError::Shape {
            op: "mixture_log_prob",
            lhs: vr.shape().to_vec(),
            rhs: vt.shape().to_vec(),
        });
    }
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let mut total = 0.0;
        for d in 0..dims {
            let block = block_f64(vr.data(), r, d, dims, components);
            total += mixture_terms(&block, vt.data()[r * dims + d].f64(), components).0;
        }
        out.push(S::of(total));
    }
    let value = Tensor::new(vec![rows], out)?;
    Ok(g.custom(&[raw, targets], value, Box::new(MixtureLogProbRule { components })))
}

fn block_f64<S: Real>(raw: &[S], row: usize, dim: usize, dims: usize, k: usize) -> Vec<f64> {
    let start = (row * dims + dim) * 3 * k;
    raw[start..start + 3 * k].iter().map(|v| v.f64()).collect()
}

/// Log-density plus per-component `(responsibility, z, sigma, log pi)`.
fn mixture_terms(raw: &[f64], x: f64, k: usize) -> (f64, Vec<(f64, f64, f64, f64)>) {
    let log_w_norm = logsumexp(&raw[..k]);
    let mut parts = Vec::with_capacity(k);
    let mut terms = Vec::with_capacity(k);
    for c in 0..k {
        let log_pi = raw[c] - log_w_norm;
        let sigma = softplus(raw[2 * k + c]) + SCALE_FLOOR;
        let z = (x - raw[k + c]) / sigma;
        terms.push(log_pi + logistic_log_density(x, raw[k + c], sigma));
        parts.push((0.0, z, sigma, log_pi));
    }
    let lp = logsumexp(&terms);
    for (p, t) in parts.iter_mut().zip(&terms) {
        p.0 = (t - lp).exp();
    }
    (lp, parts)
}

struct MixtureLogProbRule {
    components: usize,
}

impl<S: Real> CustomBackward<S> for MixtureLogProbRule {
    fn backward(&self, grad_out: &Tensor<S>, inputs: &[&Tensor<S>], _output: &Tensor<S>) -> Vec<Option<Tensor<S>>> {
        let (raw, targets) = (inputs[0], inputs[1]);
        let k = self.components;
        let (rows, dims) = targets.rows_cols();
        let mut d_raw = vec![S::zero(); raw.len()];
        let mut d_x = vec![S::zero(); targets.len()];
        for r in 0..rows {
            let go = grad_out.data()[r].f64();
            for d in 0..dims {
                let block = block_f64(raw.data(), r, d, dims, k);
                let x = targets.data()[r * dims + d].f64();
                let (_, parts) = mixture_terms(&block, x, k);
                let base = (r * dims + d) * 3 * k;
                let mut dx = 0.0;
                for (c, &(resp, z, sigma, log_pi)) in parts.iter().enumerate() {
                    let th = (0.5 * z).tanh();
                    d_raw[base + c] = S::of(go * (resp - log_pi.exp()));
                    d_raw[base + k + c] = S::of(go * resp * th / sigma);
                    let d_sigma = resp * (z * th - 1.0) / sigma;
                    d_raw[base + 2 * k + c] = S::of(go * d_sigma * sigmoid(block[2 * k + c]));
                    dx -= resp * th / sigma;
                }
                d_x[r * dims + d] = S::of(go * dx);
            }
        }
        vec![
            Tensor::new(raw.shape().to_vec(), d_raw).ok(),
            Tensor::new(targets.shape().to_vec(), d_x).ok(),
        ]
    }
}
