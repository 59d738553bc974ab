//! The weighted multi-task loss: holistic cross-entropy over the class set,
//! two digit-wise cross-entropies, and their convex combination
//! `total = alpha*holistic + beta*digit1 + gamma*digit2`.
//!
//! These are the verification-grade scalar forms, computed at f64. Training
//! uses the tape's fused log-softmax cross-entropy, which these functions
//! serve as oracles for.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("loss weights must be non-negative and sum to 1; got ({alpha}, {beta}, {gamma}) with sum {sum}")]
    WeightSimplex {
        alpha: f64,
        beta: f64,
        gamma: f64,
        sum: f64,
    },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
}

/// Probabilities below this are clamped before the log so a zero target
/// probability yields a large finite loss, never NaN.
pub const LOG_CLAMP: f64 = 1e-12;

const SIMPLEX_TOL: f64 = 1e-9;

/// A point on the loss-weight simplex: `(alpha, beta, gamma)` with all
/// components non-negative and summing to 1. Construct via
/// [`LossWeights::validate`]; out-of-simplex triples are rejected outright
/// rather than renormalized, so ablation grids test exactly the intended
/// points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "(f64, f64, f64)", into = "(f64, f64, f64)")]
pub struct LossWeights {
    alpha: f64,
    beta: f64,
    gamma: f64,
}

impl LossWeights {
    pub fn validate(alpha: f64, beta: f64, gamma: f64) -> Result<Self, LossError> {
        let sum = alpha + beta + gamma;
        if alpha < 0.0 || beta < 0.0 || gamma < 0.0 || (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(LossError::WeightSimplex {
                alpha,
                beta,
                gamma,
                sum,
            });
        }
        Ok(LossWeights { alpha, beta, gamma })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn beta(&self) -> f64 {
        self.beta
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Holistic-only setting (1, 0, 0).
    pub fn holistic_only() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 0.0,
            gamma: 0.0,
        }
    }

    /// Digit-wise-only setting (0, 0.5, 0.5).
    pub fn digitwise_only() -> Self {
        LossWeights {
            alpha: 0.0,
            beta: 0.5,
            gamma: 0.5,
        }
    }

    /// The best multi-task setting from the reference ablation, (0.3, 0.35, 0.35).
    pub fn multitask_best() -> Self {
        LossWeights {
            alpha: 0.3,
            beta: 0.35,
            gamma: 0.35,
        }
    }
}

impl TryFrom<(f64, f64, f64)> for LossWeights {
    type Error = LossError;
    fn try_from(t: (f64, f64, f64)) -> Result<Self, Self::Error> {
        LossWeights::validate(t.0, t.1, t.2)
    }
}

impl From<LossWeights> for (f64, f64, f64) {
    fn from(w: LossWeights) -> Self {
        (w.alpha, w.beta, w.gamma)
    }
}

impl std::fmt::Display for LossWeights {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {})", self.alpha, self.beta, self.gamma)
    }
}

/// Per-head losses of one forward pass plus their weighted combination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub holistic: f64,
    pub digit1: f64,
    pub digit2: f64,
    /// `beta*digit1 + gamma*digit2`, the overall digit-wise portion.
    pub digitwise: f64,
    pub total: f64,
}

/// Cross-entropy of a predicted distribution against a one-hot target,
/// evaluated as `-ln p[target]` with the probability clamped to
/// `[LOG_CLAMP, 1]`.
pub fn cross_entropy_onehot(p: &[f64], target_idx: usize) -> f64 {
    -p[target_idx].clamp(LOG_CLAMP, 1.0).ln()
}

/// Holistic loss over the class-set distribution.
pub fn holistic_loss(p: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), y.len());
    let target = one_hot_index(y);
    cross_entropy_onehot(p, target)
}

/// Digit loss over one 11-way digit distribution.
pub fn digit_loss(p_i: &[f64], y_i: &[f64]) -> f64 {
    debug_assert_eq!(p_i.len(), y_i.len());
    let target = one_hot_index(y_i);
    cross_entropy_onehot(p_i, target)
}

fn one_hot_index(y: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in y.iter().enumerate() {
        if v > y[best] {
            best = i;
        }
    }
    best
}

/// Combines per-head losses into the weighted total.
pub fn total_loss(holistic: f64, digit1: f64, digit2: f64, w: LossWeights) -> LossBreakdown {
    LossBreakdown {
        holistic,
        digit1,
        digit2,
        digitwise: w.beta * digit1 + w.gamma * digit2,
        total: w.alpha * holistic + w.beta * digit1 + w.gamma * digit2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_distribution(k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / sum).collect()
    }

    fn one_hot(k: usize, i: usize) -> Vec<f64> {
        let mut y = vec![0.0; k];
        y[i] = 1.0;
        y
    }

    #[test]
    fn uniform_holistic_loss_is_ln_81() {
        let p = vec![1.0 / 81.0; 81];
        for target in [0, 40, 80] {
            let y = one_hot(81, target);
            assert!((holistic_loss(&p, &y) - 81f64.ln()).abs() < 1e-12);
        }
        assert!((81f64.ln() - 4.394449).abs() < 1e-6);
    }

    #[test]
    fn certain_prediction_has_zero_loss() {
        let mut p = vec![0.0; 81];
        p[7] = 1.0;
        assert_eq!(holistic_loss(&p, &one_hot(81, 7)), 0.0);
    }

    #[test]
    fn holistic_loss_matches_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let p = random_distribution(81, &mut rng);
            let target = rng.gen_range(0..81);
            let y = one_hot(81, target);
            // Direct -sum(y_i * ln p_i) form.
            let oracle: f64 = -y
                .iter()
                .zip(&p)
                .map(|(&yi, &pi)| yi * pi.ln())
                .sum::<f64>();
            assert!((holistic_loss(&p, &y) - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_digit_loss_is_ln_11() {
        let p = vec![1.0 / 11.0; 11];
        let y = one_hot(11, 10);
        assert!((digit_loss(&p, &y) - 11f64.ln()).abs() < 1e-12);
        assert!((11f64.ln() - 2.397895).abs() < 1e-6);
    }

    #[test]
    fn digit_loss_on_target_is_near_zero() {
        let y = one_hot(11, 4);
        assert!(digit_loss(&y, &y).abs() < 1e-10);
    }

    #[test]
    fn digit_loss_matches_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let p = random_distribution(11, &mut rng);
            let target = rng.gen_range(0..11);
            let y = one_hot(11, target);
            let oracle: f64 = -y.iter().zip(&p).map(|(&yi, &pi)| yi * pi.ln()).sum::<f64>();
            assert!((digit_loss(&p, &y) - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_probability_is_clamped_not_nan() {
        let mut p = vec![0.5; 2];
        p[0] = 0.0;
        let loss = cross_entropy_onehot(&p, 0);
        assert!(loss.is_finite());
        assert!((loss - (-LOG_CLAMP.ln())).abs() < 1e-9);
    }

    #[test]
    fn total_loss_trivial_rows() {
        // Holistic-only reduces to the holistic loss.
        let b = total_loss(3.7, 9.0, 9.0, LossWeights::holistic_only());
        assert_eq!(b.total, 3.7);
        assert_eq!(b.digitwise, 0.0);

        // Best multi-task row.
        let b = total_loss(1.0, 2.0, 2.0, LossWeights::multitask_best());
        assert!((b.total - 1.7).abs() < 1e-15);

        // Digit-wise-only.
        let b = total_loss(5.0, 2.0, 4.0, LossWeights::digitwise_only());
        assert_eq!(b.total, 3.0);
        assert_eq!(b.digitwise, b.total);
    }

    #[test]
    fn weight_validation() {
        assert!(LossWeights::validate(0.33, 0.33, 0.33).is_err()); // sums to 0.99
        assert!(LossWeights::validate(1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0).is_ok());
        assert!(LossWeights::validate(0.2, 0.4, 0.4).is_ok());
        assert!(LossWeights::validate(0.5, 0.5, 0.5).is_err());
        assert!(LossWeights::validate(-0.2, 0.6, 0.6).is_err());
        match LossWeights::validate(0.4, 0.4, 0.4) {
            Err(LossError::WeightSimplex { sum, .. }) => {
                assert!((sum - 1.2).abs() < 1e-12)
            }
            other => panic!("expected simplex error, got {other:?}"),
        }
    }

    #[test]
    fn total_is_linear_in_each_component() {
        // Dyadic weights and integer losses keep every product and sum exact
        // in f64, so linearity holds bit for bit.
        let w = LossWeights::validate(0.25, 0.5, 0.25).unwrap();
        let base = total_loss(1.0, 2.0, 3.0, w);
        let bumped = total_loss(2.0, 2.0, 3.0, w);
        assert_eq!(bumped.total - base.total, w.alpha());

        let bumped = total_loss(1.0, 4.0, 3.0, w);
        assert_eq!(bumped.total - base.total, w.beta() * 2.0);

        // General weights: linear to floating-point roundoff.
        let w = LossWeights::validate(0.2, 0.4, 0.4).unwrap();
        let base = total_loss(1.0, 2.0, 3.0, w);
        let bumped = total_loss(2.0, 2.0, 3.0, w);
        assert!((bumped.total - base.total - w.alpha()).abs() < 1e-12);
    }

    #[test]
    fn exact_reductions_at_simplex_corners() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let l: f64 = rng.gen_range(0.0..5.0);
            let l1: f64 = rng.gen_range(0.0..5.0);
            let l2: f64 = rng.gen_range(0.0..5.0);
            let h = total_loss(l, l1, l2, LossWeights::holistic_only());
            assert_eq!(h.total, l);
            let d = total_loss(l, l1, l2, LossWeights::digitwise_only());
            assert_eq!(d.total, d.digitwise);
        }
    }
}
