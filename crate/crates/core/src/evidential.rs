//! Subjective-logic opinions over Dirichlet distributions and the evidential
//! classification loss.
//!
//! A classifier head emits a nonnegative evidence vector `e`. The Dirichlet
//! parameters are `alpha = e + 1` and the strength is `S = sum(alpha)`, so a
//! prediction with no evidence at all has uncertainty exactly one.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{invalid, Result};

const SIMPLEX_TOL: f64 = 1e-9;

/// Belief masses and uncertainty derived from one evidence vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirichletOpinion {
    pub evidence: Vec<f64>,
    pub alpha: Vec<f64>,
    pub strength: f64,
    pub beliefs: Vec<f64>,
    pub uncertainty: f64,
    pub mean: Vec<f64>,
}

impl DirichletOpinion {
    pub fn class_count(&self) -> usize {
        self.alpha.len()
    }

    /// Index of the largest expected probability; ties go to the lowest index.
    pub fn predicted_class(&self) -> usize {
        argmax(&self.mean)
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn opinion_from_evidence(evidence: &[f64]) -> Result<DirichletOpinion> {
    let k = evidence.len();
    if k < 2 {
        return Err(invalid!("need at least 2 classes, got {k}"));
    }
    if let Some(bad) = evidence.iter().find(|e| !(**e >= 0.0) || !e.is_finite()) {
        return Err(invalid!("evidence must be finite and nonnegative, got {bad}"));
    }
    let alpha: Vec<f64> = evidence.iter().map(|e| e + 1.0).collect();
    let strength: f64 = alpha.iter().sum();
    let beliefs = evidence.iter().map(|e| e / strength).collect();
    let mean = alpha.iter().map(|a| a / strength).collect();
    Ok(DirichletOpinion {
        evidence: evidence.to_vec(),
        alpha,
        strength,
        beliefs,
        uncertainty: k as f64 / strength,
        mean,
    })
}

/// Log of the multinomial Beta function `B(alpha)`.
pub fn ln_multivariate_beta(alpha: &[f64]) -> f64 {
    alpha.iter().map(|&a| ln_gamma(a)).sum::<f64>() - ln_gamma(alpha.iter().sum())
}

/// Log density of `Dir(alpha)` at an interior simplex point `p`.
pub fn dirichlet_log_density(p: &[f64], alpha: &[f64]) -> Result<f64> {
    if p.len() != alpha.len() || p.len() < 2 {
        return Err(invalid!(
            "point has {} coordinates, alpha has {}",
            p.len(),
            alpha.len()
        ));
    }
    if alpha.iter().any(|a| !(*a > 0.0)) {
        return Err(invalid!("Dirichlet parameters must be positive"));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOL || p.iter().any(|x| !(*x > 0.0 && *x < 1.0)) {
        return Err(invalid!("point is not strictly inside the simplex (sum {total})"));
    }
    let kernel: f64 = p
        .iter()
        .zip(alpha)
        .map(|(&pi, &ai)| if ai == 1.0 { 0.0 } else { (ai - 1.0) * pi.ln() })
        .sum();
    Ok(kernel - ln_multivariate_beta(alpha))
}

/// Returns the hot index of a one-hot vector.
pub fn one_hot_index(y: &[f64]) -> Result<usize> {
    let mut hot = None;
    for (i, &v) in y.iter().enumerate() {
        if v == 1.0 {
            if hot.is_some() {
                return Err(invalid!("target has more than one hot entry"));
            }
            hot = Some(i);
        } else if v != 0.0 {
            return Err(invalid!("target entry {i} is {v}, expected 0 or 1"));
        }
    }
    hot.ok_or_else(|| invalid!("target has no hot entry"))
}

pub fn one_hot(class: usize, k: usize) -> Vec<f64> {
    let mut y = vec![0.0; k];
    y[class] = 1.0;
    y
}

fn check_alpha_target(alpha: &[f64], y: &[f64]) -> Result<()> {
    if alpha.len() != y.len() {
        return Err(invalid!("alpha has {} entries, target {}", alpha.len(), y.len()));
    }
    if alpha.len() < 2 {
        return Err(invalid!("need at least 2 classes"));
    }
    if alpha.iter().any(|a| !(*a >= 1.0) || !a.is_finite()) {
        return Err(invalid!("evidence-derived alpha must be finite and >= 1"));
    }
    one_hot_index(y).map(|_| ())
}

/// Expected squared error `E_{p ~ Dir(alpha)} ||y - p||^2` in closed form.
pub fn evidential_mse_loss(alpha: &[f64], y: &[f64]) -> Result<f64> {
    check_alpha_target(alpha, y)?;
    Ok(mse_value_and_grad(alpha, y, None))
}

/// Same as [`evidential_mse_loss`], also writing `dL/dalpha` into `grad`.
pub fn evidential_mse_loss_grad(alpha: &[f64], y: &[f64], grad: &mut [f64]) -> Result<f64> {
    check_alpha_target(alpha, y)?;
    Ok(mse_value_and_grad(alpha, y, Some(grad)))
}

fn mse_value_and_grad(alpha: &[f64], y: &[f64], grad: Option<&mut [f64]>) -> f64 {
    let s: f64 = alpha.iter().sum();
    let p: Vec<f64> = alpha.iter().map(|a| a / s).collect();
    let err: f64 = p.iter().zip(y).map(|(pj, yj)| (yj - pj).powi(2)).sum();
    let spread: f64 = p.iter().map(|pj| pj * (1.0 - pj)).sum();
    let loss = err + spread / (s + 1.0);
    if let Some(grad) = grad {
        // dL/dp_j with S held fixed, then chain through p_j = alpha_j / S.
        let g: Vec<f64> = p
            .iter()
            .zip(y)
            .map(|(pj, yj)| -2.0 * (yj - pj) - 2.0 * pj / (s + 1.0))
            .collect();
        let gp: f64 = g.iter().zip(&p).map(|(a, b)| a * b).sum();
        let ds = spread / (s + 1.0).powi(2);
        for (out, gj) in grad.iter_mut().zip(&g) {
            *out = (gj - gp) / s - ds;
        }
    }
    loss
}

/// Keeps only the evidence placed on wrong classes: the true-class
/// parameter is reset to one.
pub fn misleading_alpha(alpha: &[f64], y: &[f64]) -> Vec<f64> {
    alpha
        .iter()
        .zip(y)
        .map(|(a, yj)| yj + (1.0 - yj) * a)
        .collect()
}

/// `KL[Dir(alpha) || Dir(1, ..., 1)]`.
pub fn kl_to_uniform(alpha: &[f64]) -> Result<f64> {
    check_kl_input(alpha)?;
    Ok(kl_value(alpha))
}

/// KL value plus `dKL/dalpha` written into `grad`.
pub fn kl_to_uniform_grad(alpha: &[f64], grad: &mut [f64]) -> Result<f64> {
    check_kl_input(alpha)?;
    let k = alpha.len() as f64;
    let s: f64 = alpha.iter().sum();
    let tri_s = trigamma(s);
    for (out, &a) in grad.iter_mut().zip(alpha) {
        *out = (a - 1.0) * trigamma(a) - (s - k) * tri_s;
    }
    Ok(kl_value(alpha))
}

fn check_kl_input(alpha: &[f64]) -> Result<()> {
    if alpha.len() < 2 {
        return Err(invalid!("need at least 2 classes"));
    }
    if alpha.iter().any(|a| !(*a >= 1.0) || !a.is_finite()) {
        return Err(invalid!("KL input parameters must be finite and >= 1"));
    }
    Ok(())
}

fn kl_value(alpha: &[f64]) -> f64 {
    let k = alpha.len() as f64;
    let s: f64 = alpha.iter().sum();
    // Entries equal to one contribute exactly zero; skipping them keeps the
    // all-ones case at an exact 0.0.
    let mut acc = ln_gamma(s) - ln_gamma(k);
    let psi_s = digamma(s);
    for &a in alpha.iter().filter(|&&a| a != 1.0) {
        acc += -ln_gamma(a) + (a - 1.0) * (digamma(a) - psi_s);
    }
    acc
}

/// Trigamma function `psi'(x)` for `x > 0`.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    acc + inv
        + inv2 / 2.0
        + inv
            * inv2
            * (1.0 / 6.0
                + inv2 * (-1.0 / 30.0 + inv2 * (1.0 / 42.0 + inv2 * (-1.0 / 30.0 + inv2 * 5.0 / 66.0))))
}

/// KL annealing weight `min(1, t / denominator)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub denominator: f64,
    /// Index of the first training epoch (1 means the first epoch has t = 1).
    pub epoch_index_base: u32,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self {
            denominator: 10.0,
            epoch_index_base: 1,
        }
    }
}

impl AnnealSchedule {
    pub fn lambda(&self, t: u32) -> f64 {
        (f64::from(t) / self.denominator).clamp(0.0, 1.0)
    }

    /// Weight for the `i`-th epoch counted from zero.
    pub fn lambda_for_epoch(&self, zero_based_epoch: u32) -> f64 {
        self.lambda(zero_based_epoch + self.epoch_index_base)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

/// Batch loss: Bayes-risk MSE plus annealed KL on the misleading evidence.
pub fn total_evidential_loss(
    batch: &[(Vec<f64>, Vec<f64>)],
    t: u32,
    schedule: &AnnealSchedule,
    reduction: Reduction,
) -> Result<f64> {
    let mut scratch = Vec::new();
    total_loss_impl(batch.iter().map(|(a, y)| (a.as_slice(), y.as_slice())), t, schedule, reduction, &mut scratch, false)
}

/// Batch loss together with `dL/dalpha_i` for each item.
pub fn total_evidential_loss_grad(
    batch: &[(Vec<f64>, Vec<f64>)],
    t: u32,
    schedule: &AnnealSchedule,
    reduction: Reduction,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut grads = Vec::with_capacity(batch.len());
    let loss = total_loss_impl(
        batch.iter().map(|(a, y)| (a.as_slice(), y.as_slice())),
        t,
        schedule,
        reduction,
        &mut grads,
        true,
    )?;
    Ok((loss, grads))
}

fn total_loss_impl<'a>(
    batch: impl ExactSizeIterator<Item = (&'a [f64], &'a [f64])>,
    t: u32,
    schedule: &AnnealSchedule,
    reduction: Reduction,
    grads: &mut Vec<Vec<f64>>,
    want_grad: bool,
) -> Result<f64> {
    if t < schedule.epoch_index_base {
        return Err(invalid!(
            "epoch {t} precedes the first epoch index {}",
            schedule.epoch_index_base
        ));
    }
    let n = batch.len();
    let scale = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean if n > 0 => 1.0 / n as f64,
        Reduction::Mean => 1.0,
    };
    let lambda = schedule.lambda(t);
    let mut total = 0.0;
    for (alpha, y) in batch {
        check_alpha_target(alpha, y)?;
        let tilde = misleading_alpha(alpha, y);
        if want_grad {
            let mut g_mse = vec![0.0; alpha.len()];
            let mut g_kl = vec![0.0; alpha.len()];
            let mse = mse_value_and_grad(alpha, y, Some(&mut g_mse));
            let kl = kl_to_uniform_grad(&tilde, &mut g_kl)?;
            total += mse + lambda * kl;
            let g = g_mse
                .iter()
                .zip(&g_kl)
                .zip(y)
                .map(|((gm, gk), yj)| scale * (gm + lambda * (1.0 - yj) * gk))
                .collect();
            grads.push(g);
        } else {
            total += mse_value_and_grad(alpha, y, None) + lambda * kl_value(&tilde);
        }
    }
    Ok(total * scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_evidence_is_fully_uncertain() {
        let op = opinion_from_evidence(&[0.0, 0.0]).unwrap();
        assert_eq!(op.beliefs, vec![0.0, 0.0]);
        assert_eq!(op.uncertainty, 1.0);
    }

    #[test]
    fn opinion_hand_values() {
        let op = opinion_from_evidence(&[8.0, 0.0]).unwrap();
        assert_eq!(op.strength, 10.0);
        assert_abs_diff_eq!(op.beliefs[0], 0.8, epsilon = 1e-15);
        assert_eq!(op.beliefs[1], 0.0);
        assert_abs_diff_eq!(op.uncertainty, 0.2, epsilon = 1e-15);

        let op = opinion_from_evidence(&[1.0, 1.0, 1.0]).unwrap();
        for b in &op.beliefs {
            assert_abs_diff_eq!(*b, 1.0 / 6.0, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(op.uncertainty, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn opinion_rejects_bad_input() {
        assert!(opinion_from_evidence(&[1.0]).is_err());
        assert!(opinion_from_evidence(&[1.0, -0.5]).is_err());
        assert!(opinion_from_evidence(&[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn log_density_fixtures() {
        for k in 2..6 {
            let ones = vec![1.0; k];
            let p = vec![1.0 / k as f64; k];
            let expected = ln_gamma(k as f64);
            assert_abs_diff_eq!(dirichlet_log_density(&p, &ones).unwrap(), expected, epsilon = 1e-12);
        }
        let v = dirichlet_log_density(&[0.5, 0.5], &[2.0, 1.0]).unwrap();
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
        assert!(dirichlet_log_density(&[0.5, 0.6], &[2.0, 1.0]).is_err());
    }

    #[test]
    fn mse_fixtures() {
        let l = evidential_mse_loss(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(l, 0.5 + 2.0 * 0.25 / 3.0, epsilon = 1e-15);
        let l = evidential_mse_loss(&[101.0, 1.0], &[1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(l, 3.807e-4, epsilon = 1e-6);
        let l = evidential_mse_loss(&[1e12, 1.0, 1.0], &[1.0, 0.0, 0.0]).unwrap();
        assert!(l < 1e-11);
        assert!(evidential_mse_loss(&[1.0, 1.0], &[0.5, 0.5]).is_err());
        assert!(evidential_mse_loss(&[0.5, 1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn misleading_alpha_cases() {
        let y = [1.0, 0.0, 0.0];
        let t = misleading_alpha(&[5.0, 3.0, 2.0], &y);
        assert_eq!(t, vec![1.0, 3.0, 2.0]);
        assert_eq!(misleading_alpha(&t, &y), t);
        assert_eq!(misleading_alpha(&[7.0, 1.0, 1.0], &y), vec![1.0; 3]);
    }

    #[test]
    fn kl_fixtures() {
        assert_eq!(kl_to_uniform(&[1.0, 1.0, 1.0]).unwrap(), 0.0);
        let v = kl_to_uniform(&[2.0, 1.0]).unwrap();
        assert_abs_diff_eq!(v, std::f64::consts::LN_2 - 0.5, epsilon = 1e-12);
        assert!(kl_to_uniform(&[0.5, 1.0]).is_err());
        let mut prev = 0.0;
        for a2 in 2..=10 {
            let v = kl_to_uniform(&[1.0, a2 as f64]).unwrap();
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn trigamma_reference_values() {
        // psi'(1) = pi^2 / 6, psi'(1/2) = pi^2 / 2
        let pi2 = std::f64::consts::PI.powi(2);
        assert_abs_diff_eq!(trigamma(1.0), pi2 / 6.0, epsilon = 1e-13);
        assert_abs_diff_eq!(trigamma(0.5), pi2 / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(trigamma(100.0), 0.010050166663333571, epsilon = 1e-15);
    }

    #[test]
    fn anneal_schedule() {
        let s = AnnealSchedule::default();
        assert_abs_diff_eq!(s.lambda(1), 0.1, epsilon = 1e-15);
        assert_eq!(s.lambda(10), 1.0);
        assert_eq!(s.lambda(25), 1.0);
        assert_eq!(s.lambda_for_epoch(0), s.lambda(1));
        let mut prev = 0.0;
        for t in 0..40 {
            let l = s.lambda(t);
            assert!((0.0..=1.0).contains(&l) && l >= prev);
            prev = l;
        }
    }

    #[test]
    fn total_loss_composition() {
        let s = AnnealSchedule::default();
        let batch = vec![
            (vec![1.0, 1.0], vec![1.0, 0.0]),
            (vec![1.0, 1.0, 1.0], vec![0.0, 0.0, 1.0]),
        ];
        let mse: f64 = batch.iter().map(|(a, y)| evidential_mse_loss(a, y).unwrap()).sum();
        assert_abs_diff_eq!(total_evidential_loss(&batch, 12, &s, Reduction::Sum).unwrap(), mse, epsilon = 1e-15);

        let batch = vec![(vec![1.0, 4.0], vec![1.0, 0.0])];
        let mse = evidential_mse_loss(&batch[0].0, &batch[0].1).unwrap();
        let kl = kl_to_uniform(&[1.0, 4.0]).unwrap();
        let l1 = total_evidential_loss(&batch, 1, &s, Reduction::Sum).unwrap();
        assert_abs_diff_eq!(l1, mse + 0.1 * kl, epsilon = 1e-14);
        let l10 = total_evidential_loss(&batch, 10, &s, Reduction::Sum).unwrap();
        assert_abs_diff_eq!(l10, mse + kl, epsilon = 1e-14);
        assert!(total_evidential_loss(&batch, 0, &s, Reduction::Sum).is_err());
    }

    #[test]
    fn mean_reduction_scales_sum() {
        let s = AnnealSchedule::default();
        let batch = vec![
            (vec![3.0, 1.0], vec![1.0, 0.0]),
            (vec![2.0, 5.0], vec![1.0, 0.0]),
        ];
        let sum = total_evidential_loss(&batch, 4, &s, Reduction::Sum).unwrap();
        let mean = total_evidential_loss(&batch, 4, &s, Reduction::Mean).unwrap();
        assert_abs_diff_eq!(mean * 2.0, sum, epsilon = 1e-14);
    }
}
