//! Training objective: log-MSE density loss on source samples, binary
//! cross-entropy domain loss on the whole batch, their unweighted sum, and the
//! ramp schedule for the gradient-reversal coefficient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::types::DomainTag;

/// Added to the mean squared error before the logarithm.
pub const LOG_MSE_EPS: f64 = 1e-12;
/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before the logarithms.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub density_loss: f64,
    pub domain_loss: f64,
    pub total: f64,
}

fn check_pair<T>(pred: &[T], target: &[T]) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::Shape("density loss needs a nonempty batch".into()));
    }
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "prediction has {} values, target has {}",
            pred.len(),
            target.len()
        )));
    }
    Ok(())
}

fn mse<T: Scalar>(pred: &[T], target: &[T]) -> T {
    let sum: T = pred.iter().zip(target).map(|(&p, &t)| (p - t) * (p - t)).sum();
    sum / T::of(pred.len() as f64)
}

/// `log(eps + mean((pred - target)^2))` over every pixel of every map.
///
/// `pred` and `target` are flattened batches of identically shaped maps.
pub fn density_loss<T: Scalar>(pred: &[T], target: &[T]) -> Result<T> {
    check_pair(pred, target)?;
    Ok((T::of(LOG_MSE_EPS) + mse(pred, target)).ln())
}

/// Loss value and its gradient with respect to every predicted pixel.
pub fn density_loss_grad<T: Scalar>(pred: &[T], target: &[T]) -> Result<(T, Vec<T>)> {
    check_pair(pred, target)?;
    let denom = T::of(LOG_MSE_EPS) + mse(pred, target);
    let k = T::of(2.0) / (T::of(pred.len() as f64) * denom);
    let grad = pred.iter().zip(target).map(|(&p, &t)| k * (p - t)).collect();
    Ok((denom.ln(), grad))
}

fn clamp_prob<T: Scalar>(p: T) -> T {
    let lo = T::of(PROB_CLAMP);
    let hi = T::one() - lo;
    p.max(lo).min(hi)
}

/// Mean binary cross-entropy with source labelled 1 and target 0.
pub fn domain_loss<T: Scalar>(prob: &[T], tags: &[DomainTag]) -> Result<T> {
    if prob.is_empty() || prob.len() != tags.len() {
        return Err(Error::Shape(format!(
            "domain loss needs matching nonempty batches, got {} probabilities and {} tags",
            prob.len(),
            tags.len()
        )));
    }
    let total: T = prob
        .iter()
        .zip(tags)
        .map(|(&p, &tag)| {
            let p = clamp_prob(p);
            match tag {
                DomainTag::Source => -p.ln(),
                DomainTag::Target => -(T::one() - p).ln(),
            }
        })
        .sum();
    Ok(total / T::of(prob.len() as f64))
}

/// Loss and its gradient with respect to the (clamped) probabilities.
pub fn domain_loss_grad<T: Scalar>(prob: &[T], tags: &[DomainTag]) -> Result<(T, Vec<T>)> {
    let loss = domain_loss(prob, tags)?;
    let n = T::of(prob.len() as f64);
    let lo = T::of(PROB_CLAMP);
    let grad = prob
        .iter()
        .zip(tags)
        .map(|(&p, &tag)| {
            if p < lo || p > T::one() - lo {
                return T::zero();
            }
            match tag {
                DomainTag::Source => -T::one() / (p * n),
                DomainTag::Target => T::one() / ((T::one() - p) * n),
            }
        })
        .collect();
    Ok((loss, grad))
}

/// Gradient of the mean cross-entropy with respect to the pre-sigmoid logits,
/// `(p - label) / n`. Unlike [`domain_loss_grad`] it does not vanish when the
/// sigmoid saturates on the wrong side.
pub fn domain_logit_grad<T: Scalar>(prob: &[T], tags: &[DomainTag]) -> Vec<T> {
    let n = T::of(prob.len() as f64);
    prob.iter()
        .zip(tags)
        .map(|(&p, &tag)| (p - T::of(tag.label())) / n)
        .collect()
}

/// Unweighted sum of the two terms. A non-finite term means training diverged.
pub fn total_loss(density: f64, domain: f64) -> Result<LossBreakdown> {
    if !density.is_finite() || !domain.is_finite() {
        return Err(Error::Divergence {
            iteration: 0,
            density,
            domain,
        });
    }
    Ok(LossBreakdown {
        density_loss: density,
        domain_loss: domain,
        total: density + domain,
    })
}

/// `lambda(p) = 2 / (1 + exp(-gamma * p)) - 1` with `p = iteration / total_iterations`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaSchedule {
    pub gamma: f64,
    pub total_iterations: u64,
}

impl LambdaSchedule {
    pub fn new(gamma: f64, total_iterations: u64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::invalid(format!("gamma must be positive, got {gamma}")));
        }
        if total_iterations == 0 {
            return Err(Error::invalid("lambda schedule needs at least one iteration"));
        }
        Ok(Self {
            gamma,
            total_iterations,
        })
    }
}

pub fn lambda_at(s: &LambdaSchedule, iteration: u64) -> Result<f64> {
    if iteration > s.total_iterations {
        return Err(Error::invalid(format!(
            "iteration {iteration} is past the schedule horizon {}",
            s.total_iterations
        )));
    }
    let p = iteration as f64 / s.total_iterations as f64;
    Ok(2.0 / (1.0 + (-s.gamma * p).exp()) - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use DomainTag::{Source, Target};

    #[test]
    fn density_loss_examples() {
        let t = vec![0.3f64, 0.1, 0.0, 0.7];
        let exact = density_loss(&t, &t).unwrap();
        assert!((exact - (1e-12f64).ln()).abs() < 1e-9);
        assert!((exact + 27.631021).abs() < 1e-6);

        let p: Vec<f64> = t.iter().map(|v| v + 0.1).collect();
        let l1 = density_loss(&p, &t).unwrap();
        assert!((l1 - (1e-12 + 0.01f64).ln()).abs() < 1e-12);
        assert!((l1 + 4.605170).abs() < 1e-6);

        let p2: Vec<f64> = t.iter().map(|v| v + 0.2).collect();
        let l2 = density_loss(&p2, &t).unwrap();
        assert!((l2 - l1 - 4f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn density_loss_rejects_shape_mismatch() {
        assert!(density_loss(&[0.0f64; 3], &[0.0; 4]).is_err());
        assert!(density_loss::<f64>(&[], &[]).is_err());
    }

    #[test]
    fn domain_loss_examples() {
        let perfect = domain_loss(&[1.0f64, 0.0, 1.0], &[Source, Target, Source]).unwrap();
        assert!((perfect + (1.0f64 - 1e-7).ln()).abs() < 1e-15);
        let confused = domain_loss(&[0.5f64; 4], &[Source, Target, Target, Source]).unwrap();
        assert!((confused - 2f64.ln()).abs() < 1e-12);
        let one = domain_loss(&[0.9f64], &[Source]).unwrap();
        assert!((one - 0.105360516).abs() < 1e-8);
    }

    #[test]
    fn total_loss_examples() {
        let b = total_loss(-4.0, 0.7).unwrap();
        assert!((b.total + 3.3).abs() < 1e-12);
        assert_eq!(total_loss(0.0, 0.0).unwrap().total, 0.0);
        assert!(matches!(total_loss(f64::NAN, 0.7), Err(Error::Divergence { .. })));
        assert!(total_loss(0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn lambda_examples() {
        let s = LambdaSchedule::new(10.0, 1000).unwrap();
        assert_eq!(lambda_at(&s, 0).unwrap(), 0.0);
        let half = lambda_at(&s, 500).unwrap();
        assert!((half - (2.0 / (1.0 + (-5.0f64).exp()) - 1.0)).abs() < 1e-15);
        assert!((half - 0.9866).abs() < 1e-4);
        let end = lambda_at(&s, 1000).unwrap();
        assert!((end - 0.99991).abs() < 1e-5);
        assert!(end < 1.0);
        assert!(lambda_at(&s, 1001).is_err());
    }

    #[test]
    fn logit_gradient_matches_chain_rule_where_unclamped() {
        let p = [0.3f64, 0.8, 0.55];
        let tags = [Source, Target, Target];
        let (_, dp) = domain_loss_grad(&p, &tags).unwrap();
        let dz = domain_logit_grad(&p, &tags);
        for i in 0..3 {
            assert!((dp[i] * p[i] * (1.0 - p[i]) - dz[i]).abs() < 1e-15);
        }
    }

    fn tags_strategy(n: usize) -> impl Strategy<Value = Vec<DomainTag>> {
        prop::collection::vec(prop::bool::ANY.prop_map(|b| if b { Source } else { Target }), n)
    }

    proptest! {
        #[test]
        fn domain_loss_flip_symmetry(
            (p, tags) in (1usize..12).prop_flat_map(|n| (prop::collection::vec(0.001f64..0.999, n), tags_strategy(n)))
        ) {
            let q: Vec<f64> = p.iter().map(|v| 1.0 - v).collect();
            let flipped: Vec<_> = tags.iter().map(|t| t.flipped()).collect();
            let a = domain_loss(&p, &tags).unwrap();
            let b = domain_loss(&q, &flipped).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn density_loss_permutation_invariant_and_monotone(
            t in prop::collection::vec(0.0f64..1.0, 2..40),
            e in 0.001f64..1.0,
            rot in 0usize..40,
        ) {
            let p: Vec<f64> = t.iter().map(|v| v + e).collect();
            let base = density_loss(&p, &t).unwrap();
            let k = rot % t.len();
            let (mut pr, mut tr) = (p.clone(), t.clone());
            pr.rotate_left(k);
            tr.rotate_left(k);
            prop_assert!((density_loss(&pr, &tr).unwrap() - base).abs() < 1e-12);
            let bigger: Vec<f64> = t.iter().map(|v| v + 1.5 * e).collect();
            prop_assert!(density_loss(&bigger, &t).unwrap() > base);
        }

        #[test]
        fn lambda_monotone_and_bounded(gamma in 0.5f64..20.0, total in 1u64..5000, a in 0u64..5000, b in 0u64..5000) {
            let s = LambdaSchedule::new(gamma, total).unwrap();
            let (i, j) = (a.min(b).min(total), a.max(b).min(total));
            let (li, lj) = (lambda_at(&s, i).unwrap(), lambda_at(&s, j).unwrap());
            prop_assert!(li <= lj);
            prop_assert!((0.0..1.0).contains(&li) && (0.0..1.0).contains(&lj));
        }
    }
}
