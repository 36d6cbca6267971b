//! Dimension-checked vector primitives shared by every other module.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms at or below this are treated as zero.
pub const MIN_NORM: f64 = 1e-12;

/// Tolerance on `Σp = 1` for a [`ProbVector`].
pub const PROB_SUM_TOL: f64 = 1e-9;

/// Dense row-major matrix. Only the shapes this crate needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>], cols: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::invalid(format!(
                    "row {i} has length {}, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "buffer of {} values cannot be shaped {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    /// `self · v` for a vector of length `cols`.
    pub fn mat_vec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.cols);
        self.iter_rows().map(|r| dot(r, v)).collect()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// A probability vector over `C` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("empty probability vector"));
        }
        let mut sum = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("probability {i} = {p} outside [0,1]")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::invalid(format!("probabilities sum to {sum}")));
        }
        Ok(Self(probs))
    }

    pub fn uniform(classes: usize) -> Self {
        Self(vec![1.0 / classes as f64; classes])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn entropy(&self) -> f64 {
        entropy_unchecked(&self.0)
    }
}

/// Scalar and size parameters of the adaptation engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Zero-shot softmax temperature.
    pub tau: f64,
    /// Affinity scale.
    pub alpha: f64,
    /// Affinity sharpness.
    pub beta: f64,
    /// Visual weight in the prototype center.
    pub w: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub lambda: f64,
    pub gamma: f64,
    /// Fraction of views kept by the entropy loss.
    pub rho_delta: f64,
    pub eps: f64,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub h_low_frac: f64,
    pub h_high_frac: f64,
    /// Zero-shot entropy (fraction of ln C) above which a sample skips
    /// entropy-cache admission and goes straight to reflection.
    pub e_gate_frac: f64,
    /// Probability threshold of the negative mask.
    pub p_mask: f64,
    pub m_entropy: usize,
    pub m_align: usize,
    pub m_negative: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            tau: 0.01,
            alpha: 1.0,
            beta: 5.5,
            w: 0.8,
            alpha1: 1.0,
            alpha2: 1.0,
            alpha3: 1.0,
            lambda: 0.5,
            gamma: 0.2,
            rho_delta: 0.1,
            eps: 1e-6,
            lr: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            h_low_frac: 0.2,
            h_high_frac: 0.5,
            e_gate_frac: 0.1,
            p_mask: 0.03,
            m_entropy: 10,
            m_align: 10,
            m_negative: 3,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::invalid(what.to_string()))
            }
        };
        let all_finite = [
            self.tau,
            self.alpha,
            self.beta,
            self.w,
            self.alpha1,
            self.alpha2,
            self.alpha3,
            self.lambda,
            self.gamma,
            self.rho_delta,
            self.eps,
            self.lr,
            self.adam_beta1,
            self.adam_beta2,
            self.adam_eps,
            self.weight_decay,
            self.h_low_frac,
            self.h_high_frac,
            self.e_gate_frac,
            self.p_mask,
        ]
        .iter()
        .all(|v| v.is_finite());
        check(all_finite, "hyperparameters must be finite")?;
        check(self.tau > 0.0, "tau must be > 0")?;
        check(self.alpha > 0.0 && self.beta > 0.0, "alpha and beta must be > 0")?;
        check((0.0..=1.0).contains(&self.w), "w must lie in [0,1]")?;
        check((0.0..=1.0).contains(&self.rho_delta), "rho_delta must lie in [0,1]")?;
        check(
            0.0 <= self.h_low_frac && self.h_low_frac < self.h_high_frac && self.h_high_frac <= 1.0,
            "need 0 <= h_low_frac < h_high_frac <= 1",
        )?;
        check(
            self.alpha1 >= 0.0 && self.alpha2 >= 0.0 && self.alpha3 >= 0.0,
            "fusion weights must be >= 0",
        )?;
        check(self.lambda >= 0.0 && self.gamma >= 0.0, "loss weights must be >= 0")?;
        check(self.eps > 0.0, "eps must be > 0")?;
        check(self.lr >= 0.0, "lr must be >= 0")?;
        check(
            (0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2),
            "adam decay rates must lie in [0,1)",
        )?;
        check(self.adam_eps > 0.0, "adam_eps must be > 0")?;
        check(self.weight_decay >= 0.0, "weight_decay must be >= 0")?;
        check(self.e_gate_frac >= 0.0, "e_gate_frac must be >= 0")?;
        check((0.0..=1.0).contains(&self.p_mask), "p_mask must lie in [0,1]")?;
        check(
            self.m_entropy >= 1 && self.m_align >= 1 && self.m_negative >= 1,
            "cache sizes must be >= 1",
        )?;
        Ok(())
    }

    pub fn affinity(&self, x: f64) -> f64 {
        affinity(x, self.alpha, self.beta)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Temperature softmax, `exp(z_c/τ) / Σ_j exp(z_j/τ)` with max subtraction.
pub fn softmax(logits: &[f64], tau: f64) -> Result<ProbVector> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!("softmax temperature {tau} must be > 0")));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("softmax input is not finite"));
    }
    Ok(ProbVector(softmax_unchecked(logits, tau)))
}

pub(crate) fn softmax_unchecked(logits: &[f64], tau: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|z| z / tau).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

/// Shannon entropy in nats with `0·ln 0 = 0`.
pub fn entropy(p: &ProbVector) -> f64 {
    entropy_unchecked(p.as_slice())
}

/// Entropy of an arbitrary slice; the caller guarantees it is a distribution.
pub fn entropy_unchecked(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

/// Validated entropy for raw slices.
pub fn entropy_of(p: &[f64]) -> Result<f64> {
    Ok(entropy(&ProbVector::new(p.to_vec())?))
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na <= MIN_NORM || nb <= MIN_NORM {
        return Err(Error::invalid("cosine of a zero vector"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `A(x) = α·exp(−β(1 − x))`.
#[inline]
pub fn affinity(x: f64, alpha: f64, beta: f64) -> f64 {
    alpha * (-beta * (1.0 - x)).exp()
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > MIN_NORM) {
        return Err(Error::degenerate(format!("cannot normalize vector with norm {n:e}")));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

pub fn mean_rows<'a>(rows: impl IntoIterator<Item = &'a [f64]>, dim: usize) -> Option<Vec<f64>> {
    let mut acc = vec![0.0; dim];
    let mut count = 0usize;
    for r in rows {
        for (a, x) in acc.iter_mut().zip(r) {
            *a += x;
        }
        count += 1;
    }
    if count == 0 {
        return None;
    }
    for a in &mut acc {
        *a /= count as f64;
    }
    Some(acc)
}

pub fn is_unit(v: &[f64], tol: f64) -> bool {
    (norm(v) - 1.0).abs() <= tol
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_uniform_and_analytic() {
        let p = softmax(&[0.0, 0.0, 0.0], 1.0).unwrap();
        for &x in p.as_slice() {
            assert!(close(x, 1.0 / 3.0, 1e-15));
        }
        let p = softmax(&[2f64.ln(), 0.0], 1.0).unwrap();
        assert!(close(p.as_slice()[0], 2.0 / 3.0, 1e-15));
        assert!(close(p.as_slice()[1], 1.0 / 3.0, 1e-15));
    }

    #[test]
    fn softmax_low_temperature_matches_exact_value() {
        // logits [3.1, -0.7, 0.2] at tau 0.01 are [310, -70, 20] after scaling.
        // Frozen from a 50-digit mpmath evaluation of the direct formula.
        let p = softmax(&[3.1, -0.7, 0.2], 0.01).unwrap();
        let p = p.as_slice();
        assert_eq!(p[0], 1.0);
        let expect1 = 9.2917363163263981e-166_f64;
        let expect2 = 1.1339665610377455e-126_f64;
        assert!(((p[1] - expect1) / expect1).abs() < 1e-9, "{}", p[1]);
        assert!(((p[2] - expect2) / expect2).abs() < 1e-9, "{}", p[2]);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(softmax(&[0.0, f64::NAN], 1.0).is_err());
        assert!(softmax(&[0.0, 1.0], 0.0).is_err());
        assert!(softmax(&[0.0, 1.0], -1.0).is_err());
        assert!(softmax(&[], 1.0).is_err());
    }

    #[test]
    fn entropy_examples() {
        let u = ProbVector::uniform(10);
        assert!(close(entropy(&u), 10f64.ln(), 1e-12));
        let one_hot = ProbVector::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(entropy(&one_hot), 0.0);
        let p = ProbVector::new(vec![0.7, 0.2, 0.1]).unwrap();
        let expect = -(0.7 * 0.7f64.ln() + 0.2 * 0.2f64.ln() + 0.1 * 0.1f64.ln());
        assert!(close(entropy(&p), expect, 1e-15));
        assert!(close(entropy(&p), 0.8018185525433372, 1e-15));
        assert!(entropy_of(&[0.5, 0.6]).is_err());
        assert!(entropy_of(&[1.5, -0.5]).is_err());
    }

    #[test]
    fn cosine_examples() {
        let a = [0.6, 0.8];
        assert!(close(cosine(&a, &a).unwrap(), 1.0, 1e-15));
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine(&[1.0], &[1.0, 0.0]).is_err());

        let a = [0.3, -1.2, 2.5, 0.01, -0.7];
        let b = [1.1, 0.4, -0.3, 2.2, 0.9];
        let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
        for i in 0..a.len() {
            ab += a[i] * b[i];
            aa += a[i] * a[i];
            bb += b[i] * b[i];
        }
        let naive = ab / (aa.sqrt() * bb.sqrt());
        assert!(close(cosine(&a, &b).unwrap(), naive, 1e-12));
    }

    #[test]
    fn affinity_examples() {
        assert_eq!(affinity(1.0, 2.5, 5.5), 2.5);
        let beta = 4.0;
        assert!(close(affinity(1.0 - 1.0 / beta, 1.0, beta), (-1.0f64).exp(), 1e-15));
        assert!(close(affinity(0.3, 1.0, 5.5), (-3.85f64).exp(), 1e-15));
    }

    #[test]
    fn normalize_examples() {
        let v = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!(close(v[0], 0.6, 1e-15) && close(v[1], 0.8, 1e-15));
        let u = [1.0, 0.0, 0.0];
        assert_eq!(l2_normalize(&u).unwrap(), u.to_vec());
        assert!(matches!(l2_normalize(&[0.0, 1e-13]), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn hyperparams_validation() {
        HyperParams::default().validate().unwrap();
        let bad = HyperParams {
            h_low_frac: 0.6,
            ..HyperParams::default()
        };
        assert!(bad.validate().is_err());
        let bad = HyperParams {
            m_negative: 0,
            ..HyperParams::default()
        };
        assert!(bad.validate().is_err());
    }

    fn vec_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-50.0f64..50.0, 1..12)
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(z in vec_strategy(), log_tau in -3.0f64..3.0) {
            let tau = 10f64.powf(log_tau);
            let p = softmax(&z, tau).unwrap();
            prop_assert!(ProbVector::new(p.clone().into_inner()).is_ok());
        }

        #[test]
        fn entropy_bounded_by_log_c(z in vec_strategy(), log_tau in -3.0f64..3.0) {
            let tau = 10f64.powf(log_tau);
            let p = softmax(&z, tau).unwrap();
            let c = z.len() as f64;
            prop_assert!(entropy(&p) <= c.ln() + 1e-9);
            let constant = vec![z[0]; z.len()];
            let pu = softmax(&constant, tau).unwrap();
            prop_assert!((entropy(&pu) - c.ln()).abs() < 1e-9);
        }

        #[test]
        fn affinity_increasing(x in -1.0f64..0.999, dx in 1e-6f64..0.5, beta in 0.1f64..20.0) {
            let y = (x + dx).min(1.0);
            prop_assert!(affinity(y, 1.0, beta) > affinity(x, 1.0, beta));
        }

        #[test]
        fn cosine_symmetric_and_bounded(
            a in prop::collection::vec(-5.0f64..5.0, 6),
            b in prop::collection::vec(-5.0f64..5.0, 6),
        ) {
            prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
            let ab = cosine(&a, &b).unwrap();
            prop_assert_eq!(ab, cosine(&b, &a).unwrap());
            prop_assert!(ab.abs() <= 1.0);
        }

        #[test]
        fn normalize_idempotent(v in prop::collection::vec(-5.0f64..5.0, 1..16)) {
            prop_assume!(norm(&v) > 1e-3);
            let once = l2_normalize(&v).unwrap();
            let twice = l2_normalize(&once).unwrap();
            prop_assert!((norm(&once) - 1.0).abs() < 1e-9);
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
