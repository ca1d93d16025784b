//! Rényi-DP accounting for the subsampled Gaussian mechanism.
//!
//! The per-step RDP of one Poisson-subsampled Gaussian invocation is the
//! integer-order bound
//!
//! ```text
//! RDP(α) = 1/(α−1) · ln( Σ_{k=0}^{α} C(α,k) (1−q)^{α−k} q^k e^{k(k−1)/(2σ²)} )
//! ```
//!
//! evaluated in log space (the summand spans hundreds of orders of magnitude
//! at large α). For `q = 1` the mechanism is a plain Gaussian and the step
//! cost is exactly `α/(2σ²)`. RDP composes additively over steps and converts
//! to (ε, δ) by minimizing `rdp(α) + ln(1/δ)/(α−1)` over the tracked orders.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::compensated_sum;

#[derive(Debug, Error)]
pub enum AccountantError {
    #[error("sampling rate q must be in (0, 1], got {0}")]
    InvalidQ(f64),
    #[error("noise multiplier must be nonnegative, got {0}")]
    InvalidSigma(f64),
    #[error("Rényi order must be an integer >= 2, got {0}")]
    InvalidOrder(u64),
    #[error("delta must be in (0, 1), got {0}")]
    InvalidDelta(f64),
    #[error("epsilon is infinite at every tracked order (sigma = 0?)")]
    InfiniteEpsilon,
    #[error("group size must be >= 1")]
    InvalidGroupSize,
}

/// Default tracked orders: all integers 2..=64 plus selected large orders
/// (small sampling rates push the optimum far out).
pub fn default_orders() -> Vec<u64> {
    let mut orders: Vec<u64> = (2..=64).collect();
    orders.extend_from_slice(&[128, 256, 512, 1024]);
    orders
}

/// Natural log of the factorial table up to `n`, accumulated with
/// compensated summation so binomial log-coefficients stay accurate at
/// α = 1024.
fn ln_factorials(n: usize) -> Vec<f64> {
    let mut table = Vec::with_capacity(n + 1);
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    table.push(0.0);
    for i in 1..=n {
        let x = (i as f64).ln();
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
        table.push(sum + comp);
    }
    table
}

/// RDP (in nats) of a single subsampled-Gaussian step at integer order `alpha`.
///
/// `q = 1` returns exactly `alpha / (2 sigma^2)`; `sigma = 0` returns `+inf`.
pub fn rdp_step_subsampled_gaussian(
    q: f64,
    sigma: f64,
    alpha: u64,
) -> Result<f64, AccountantError> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(AccountantError::InvalidQ(q));
    }
    if sigma < 0.0 {
        return Err(AccountantError::InvalidSigma(sigma));
    }
    if alpha < 2 {
        return Err(AccountantError::InvalidOrder(alpha));
    }
    if sigma == 0.0 {
        return Ok(f64::INFINITY);
    }
    let a = alpha as f64;
    if q == 1.0 {
        return Ok(a / (2.0 * sigma * sigma));
    }
    let n = alpha as usize;
    let lf = ln_factorials(n);
    let ln_q = q.ln();
    let ln_1mq = (-q).ln_1p();
    let two_sigma_sq = 2.0 * sigma * sigma;
    // ln of term k: ln C(α,k) + (α−k) ln(1−q) + k ln q + k(k−1)/(2σ²)
    let ln_terms: Vec<f64> = (0..=n)
        .map(|k| {
            let kf = k as f64;
            lf[n] - lf[k] - lf[n - k]
                + (a - kf) * ln_1mq
                + kf * ln_q
                + kf * (kf - 1.0) / two_sigma_sq
        })
        .collect();
    let max = ln_terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum = compensated_sum(ln_terms.iter().map(|&lt| (lt - max).exp()));
    Ok((max + sum.ln()) / (a - 1.0))
}

/// Accumulated RDP for a fixed mechanism `(q, sigma)` over a number of steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccountantState {
    pub orders: Vec<u64>,
    /// Accumulated RDP per order, aligned with `orders` (nats).
    pub rdp: Vec<f64>,
    pub q: f64,
    pub sigma: f64,
    pub steps: u64,
    /// Per-step RDP per order, cached so composition is O(orders).
    step_rdp: Vec<f64>,
}

impl AccountantState {
    pub fn new(q: f64, sigma: f64) -> Result<Self, AccountantError> {
        Self::with_orders(q, sigma, default_orders())
    }

    pub fn with_orders(q: f64, sigma: f64, orders: Vec<u64>) -> Result<Self, AccountantError> {
        let step_rdp = orders
            .iter()
            .map(|&a| rdp_step_subsampled_gaussian(q, sigma, a))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            rdp: vec![0.0; orders.len()],
            orders,
            q,
            sigma,
            steps: 0,
            step_rdp,
        })
    }

    /// Advances the accountant by `n_steps` mechanism invocations.
    pub fn compose(&mut self, n_steps: u64) {
        for (r, s) in self.rdp.iter_mut().zip(&self.step_rdp) {
            *r += n_steps as f64 * s;
        }
        self.steps += n_steps;
    }

    /// Converts accumulated RDP to an (ε, δ) budget, reporting the minimizing order.
    pub fn to_epsilon(&self, delta: f64) -> Result<PrivacyBudget, AccountantError> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(AccountantError::InvalidDelta(delta));
        }
        let ln_inv_delta = (1.0 / delta).ln();
        let mut best: Option<(f64, u64)> = None;
        for (&alpha, &rdp) in self.orders.iter().zip(&self.rdp) {
            let eps = rdp + ln_inv_delta / (alpha as f64 - 1.0);
            if eps.is_finite() && best.map_or(true, |(b, _)| eps < b) {
                best = Some((eps, alpha));
            }
        }
        let (epsilon, optimal_order) = best.ok_or(AccountantError::InfiniteEpsilon)?;
        Ok(PrivacyBudget {
            epsilon,
            delta,
            optimal_order,
        })
    }
}

/// An (ε, δ) guarantee with the Rényi order that attained it.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
    pub optimal_order: u64,
}

/// Group-DP degradation for `k` correlated records.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GroupBudget {
    pub epsilon: f64,
    pub delta: f64,
    /// True when the δ formula exceeded 1 and was capped.
    pub delta_capped: bool,
}

/// (ε, δ)-DP for one record degrades to (kε, k e^{(k−1)ε} δ) for a group of
/// `k` records; δ is capped at 1 (with a flag) where the formula exceeds it.
pub fn group_dp(epsilon: f64, delta: f64, k: u64) -> Result<GroupBudget, AccountantError> {
    if k < 1 {
        return Err(AccountantError::InvalidGroupSize);
    }
    let kf = k as f64;
    let eps_g = kf * epsilon;
    let delta_raw = kf * ((kf - 1.0) * epsilon).exp() * delta;
    let capped = delta_raw.is_nan() || delta_raw > 1.0;
    Ok(GroupBudget {
        epsilon: eps_g,
        delta: if capped { 1.0 } else { delta_raw },
        delta_capped: capped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn q1_closed_form_is_exact() {
        assert_eq!(rdp_step_subsampled_gaussian(1.0, 1.0, 2).unwrap(), 1.0);
        assert_eq!(rdp_step_subsampled_gaussian(1.0, 0.5, 8).unwrap(), 16.0);
        assert_eq!(
            rdp_step_subsampled_gaussian(1.0, 2.0, 1024).unwrap(),
            1024.0 / 8.0
        );
    }

    #[test]
    fn rdp_vanishes_as_q_to_zero() {
        let tiny = rdp_step_subsampled_gaussian(1e-12, 1.0, 8).unwrap();
        assert!(tiny > 0.0 && tiny < 1e-9, "rdp at q->0 was {tiny}");
    }

    #[test]
    fn sigma_zero_is_infinite_and_reported() {
        assert!(rdp_step_subsampled_gaussian(0.5, 0.0, 2)
            .unwrap()
            .is_infinite());
        let mut st = AccountantState::new(0.5, 0.0).unwrap();
        st.compose(10);
        assert!(matches!(
            st.to_epsilon(1e-6),
            Err(AccountantError::InfiniteEpsilon)
        ));
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        assert!(rdp_step_subsampled_gaussian(0.0, 1.0, 2).is_err());
        assert!(rdp_step_subsampled_gaussian(1.5, 1.0, 2).is_err());
        assert!(rdp_step_subsampled_gaussian(0.5, -1.0, 2).is_err());
        assert!(rdp_step_subsampled_gaussian(0.5, 1.0, 1).is_err());
        assert!(group_dp(0.1, 1e-6, 0).is_err());
    }

    #[test]
    fn compose_is_linear_and_additive() {
        let mut s = AccountantState::new(0.01, 1.0).unwrap();
        let base = s.rdp.clone();
        s.compose(0);
        assert_eq!(s.rdp, base);
        let mut a = AccountantState::new(0.01, 1.0).unwrap();
        a.compose(3);
        a.compose(5);
        let mut b = AccountantState::new(0.01, 1.0).unwrap();
        b.compose(8);
        for (x, y) in a.rdp.iter().zip(&b.rdp) {
            assert!((x - y).abs() <= 1e-15 * y.abs());
        }
        let mut c = AccountantState::new(0.01, 1.0).unwrap();
        c.compose(16);
        for (x, y) in b.rdp.iter().zip(&c.rdp) {
            assert!((2.0 * x - y).abs() <= 1e-12 * y.abs());
        }
        assert_eq!(c.steps, 16);
    }

    #[test]
    fn epsilon_formula_single_order() {
        let mut s = AccountantState::with_orders(1.0, 1.0, vec![2]).unwrap();
        s.compose(1); // rdp = 1.0 at alpha = 2
        let b = s.to_epsilon(1e-6).unwrap();
        let expect = 1.0 + (1e6f64).ln();
        assert!((b.epsilon - expect).abs() < 1e-12);
        assert_eq!(b.optimal_order, 2);
    }

    #[test]
    fn zero_rdp_epsilon_attained_at_largest_order() {
        let s = AccountantState::new(0.01, 1.0).unwrap(); // steps = 0
        let b = s.to_epsilon(1e-6).unwrap();
        let largest = *s.orders.last().unwrap();
        assert_eq!(b.optimal_order, largest);
        let expect = (1e6f64).ln() / (largest as f64 - 1.0);
        assert!((b.epsilon - expect).abs() < 1e-12);
    }

    #[test]
    fn epsilon_monotone_in_sigma_and_steps() {
        let eps = |sigma: f64, steps: u64| {
            let mut s = AccountantState::new(0.02, sigma).unwrap();
            s.compose(steps);
            s.to_epsilon(1e-6).unwrap().epsilon
        };
        assert!(eps(2.0, 100) < eps(1.0, 100));
        assert!(eps(1.0, 100) < eps(0.5, 100));
        assert!(eps(1.0, 100) < eps(1.0, 200));
        assert!(eps(1.0, 200) < eps(1.0, 400));
    }

    #[test]
    fn group_dp_identity_and_reference_point() {
        let g = group_dp(0.37, 1e-5, 1).unwrap();
        assert_eq!(g.epsilon, 0.37);
        assert_eq!(g.delta, 1e-5);
        assert!(!g.delta_capped);

        // k=50, eps=0.1: eps_g = 5.0, delta_g = 50 e^{4.9} 1e-6.
        let g = group_dp(0.1, 1e-6, 50).unwrap();
        assert!((g.epsilon - 5.0).abs() < 1e-12);
        let expect = 50.0 * (4.9f64).exp() * 1e-6;
        assert!((g.delta - expect).abs() <= 1e-12 * expect);
        assert!(!g.delta_capped);

        let g = group_dp(1.0, 1e-6, 50).unwrap();
        assert_eq!(g.delta, 1.0);
        assert!(g.delta_capped);
    }
}
