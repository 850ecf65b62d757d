//! Training objectives: action / camera / BEV losses and their weighted
//! total, the rectified-flow interpolation and velocity objective, and a
//! central-difference gradient checker.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Weights of the camera and BEV terms in the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights<T> {
    pub alpha: T,
    pub beta: T,
}

impl<T: Real> Default for LossWeights<T> {
    fn default() -> Self {
        LossWeights {
            alpha: T::from_f64_c(1.0),
            beta: T::from_f64_c(0.5),
        }
    }
}

impl<T: Real> LossWeights<T> {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < T::zero() || self.beta < T::zero() {
            return Err(Error::config("loss weights must be >= 0"));
        }
        Ok(())
    }
}

/// Which norm the camera/BEV losses apply per (step, view) pair. The
/// unsquared Euclidean norm is the default reading of the objective; the
/// squared variant is selectable by config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum NormKind {
    #[default]
    Euclidean,
    SquaredEuclidean,
}

fn norm<T: Real>(diff_sq_sum: T, kind: NormKind) -> T {
    match kind {
        NormKind::Euclidean => diff_sq_sum.sqrt(),
        NormKind::SquaredEuclidean => diff_sq_sum,
    }
}

fn check_rows<T>(pred: &[Vec<T>], gt: &[Vec<T>], what: &str) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!(
            "{what}: horizon lengths differ ({} vs {})",
            pred.len(),
            gt.len()
        )));
    }
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        if p.len() != g.len() {
            return Err(Error::shape(format!(
                "{what}: dims differ at index {i} ({} vs {})",
                p.len(),
                g.len()
            )));
        }
    }
    Ok(())
}

/// Mean absolute error over the horizon: `(1/H) sum_i ||pred_i - gt_i||_1`.
pub fn action_loss<T: Real>(pred: &[Vec<T>], gt: &[Vec<T>]) -> Result<T> {
    check_rows(pred, gt, "action_loss")?;
    if pred.is_empty() {
        return Err(Error::shape("action_loss: empty horizon"));
    }
    let mut total = T::zero();
    for (p, g) in pred.iter().zip(gt) {
        for (&a, &b) in p.iter().zip(g) {
            total = total + (a - b).abs();
        }
    }
    Ok(total / T::from_f64_c(pred.len() as f64))
}

/// Mean per-(step, view) norm: `(1/(H V)) sum_{i,v} ||pred_i^v - gt_i^v||`.
pub fn camera_loss_with<T: Real>(
    pred: &[Vec<Vec<T>>],
    gt: &[Vec<Vec<T>>],
    kind: NormKind,
) -> Result<T> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::shape(format!(
            "camera_loss: horizon lengths differ or empty ({} vs {})",
            pred.len(),
            gt.len()
        )));
    }
    let views = pred[0].len();
    if views == 0 {
        return Err(Error::shape("camera_loss: zero views"));
    }
    let mut total = T::zero();
    for (i, (p_row, g_row)) in pred.iter().zip(gt).enumerate() {
        if p_row.len() != views || g_row.len() != views {
            return Err(Error::shape(format!(
                "camera_loss: view count differs at step {i}"
            )));
        }
        for (p, g) in p_row.iter().zip(g_row) {
            if p.len() != g.len() {
                return Err(Error::shape(format!(
                    "camera_loss: latent dims differ at step {i}"
                )));
            }
            let mut sq = T::zero();
            for (&a, &b) in p.iter().zip(g) {
                let d = a - b;
                sq = sq + d * d;
            }
            total = total + norm(sq, kind);
        }
    }
    Ok(total / T::from_f64_c((pred.len() * views) as f64))
}

pub fn camera_loss<T: Real>(pred: &[Vec<Vec<T>>], gt: &[Vec<Vec<T>>]) -> Result<T> {
    camera_loss_with(pred, gt, NormKind::Euclidean)
}

/// Single-view variant of the camera loss over BEV latents.
pub fn bev_loss_with<T: Real>(pred: &[Vec<T>], gt: &[Vec<T>], kind: NormKind) -> Result<T> {
    check_rows(pred, gt, "bev_loss")?;
    if pred.is_empty() {
        return Err(Error::shape("bev_loss: empty horizon"));
    }
    let mut total = T::zero();
    for (p, g) in pred.iter().zip(gt) {
        let mut sq = T::zero();
        for (&a, &b) in p.iter().zip(g) {
            let d = a - b;
            sq = sq + d * d;
        }
        total = total + norm(sq, kind);
    }
    Ok(total / T::from_f64_c(pred.len() as f64))
}

pub fn bev_loss<T: Real>(pred: &[Vec<T>], gt: &[Vec<T>]) -> Result<T> {
    bev_loss_with(pred, gt, NormKind::Euclidean)
}

/// `l_act + alpha * l_cam + beta * l_bev`.
pub fn total_loss<T: Real>(l_act: T, l_cam: T, l_bev: T, w: &LossWeights<T>) -> T {
    l_act + w.alpha * l_cam + w.beta * l_bev
}

/// Straight interpolation path: `(1 - t) y0 + t y1` for `t` in `[0, 1]`.
pub fn rf_interpolate<T: Real>(y0: &[T], y1: &[T], t: T) -> Result<Vec<T>> {
    if y0.len() != y1.len() {
        return Err(Error::shape(format!(
            "rf_interpolate: dims differ ({} vs {})",
            y0.len(),
            y1.len()
        )));
    }
    if t < T::zero() || t > T::one() {
        return Err(Error::domain(format!(
            "interpolation time must lie in [0, 1], got {:?}",
            t
        )));
    }
    Ok(y0
        .iter()
        .zip(y1)
        .map(|(&a, &b)| (T::one() - t) * a + t * b)
        .collect())
}

/// Velocity-matching objective: `||v_pred - (y1 - y0)||_2^2`.
pub fn rf_velocity_loss<T: Real>(v_pred: &[T], y0: &[T], y1: &[T]) -> Result<T> {
    if v_pred.len() != y0.len() || y0.len() != y1.len() {
        return Err(Error::shape("rf_velocity_loss: dims differ"));
    }
    let mut sq = T::zero();
    for ((&v, &a), &b) in v_pred.iter().zip(y0).zip(y1) {
        let d = v - (b - a);
        sq = sq + d * d;
    }
    Ok(sq)
}

/// A data/noise pair with its interpolant; `yt` is recomputable from the
/// other fields.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample<T> {
    pub y0: Vec<T>,
    pub y1: Vec<T>,
    pub t: T,
    pub conditioning: Vec<T>,
    pub yt: Vec<T>,
}

impl<T: Real> FlowSample<T> {
    pub fn new(y0: Vec<T>, y1: Vec<T>, t: T, conditioning: Vec<T>) -> Result<Self> {
        let yt = rf_interpolate(&y0, &y1, t)?;
        Ok(FlowSample {
            y0,
            y1,
            t,
            conditioning,
            yt,
        })
    }

    /// The regression target of the velocity field.
    pub fn velocity_target(&self) -> Vec<T> {
        self.y1
            .iter()
            .zip(&self.y0)
            .map(|(&b, &a)| b - a)
            .collect()
    }
}

/// Central-difference gradient check: perturbs each coordinate of `params`
/// by `epsilon`, compares `(f(p+e) - f(p-e)) / 2e` against `analytic`, and
/// returns the worst `|difference| / max(1, |analytic|)`. The max over an
/// empty parameter vector is 0.
pub fn finite_diff_check<T: Real>(
    mut loss_fn: impl FnMut(&[T]) -> Result<T>,
    params: &[T],
    analytic: &[T],
    epsilon: T,
) -> Result<f64> {
    if params.len() != analytic.len() {
        return Err(Error::shape(format!(
            "finite_diff_check: {} params vs {} gradient entries",
            params.len(),
            analytic.len()
        )));
    }
    let eps_f = epsilon.to_f64_c();
    if !(1e-7..=1e-3).contains(&eps_f) {
        return Err(Error::domain(format!(
            "epsilon must lie in [1e-7, 1e-3], got {eps_f}"
        )));
    }
    let base = loss_fn(params)?;
    if !base.is_finite() {
        return Err(Error::numeric("loss is not finite at the base point"));
    }
    let mut worst = 0.0f64;
    let mut work = params.to_vec();
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + epsilon;
        let hi = loss_fn(&work)?;
        work[i] = orig - epsilon;
        let lo = loss_fn(&work)?;
        work[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::numeric(format!(
                "loss is not finite near coordinate {i}"
            )));
        }
        let fd = (hi.to_f64_c() - lo.to_f64_c()) / (2.0 * eps_f);
        let g = analytic[i].to_f64_c();
        let rel = (fd - g).abs() / g.abs().max(1.0);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn action_loss_on_equal_inputs_is_zero() {
        let x = vec![vec![1.0, -2.0], vec![0.5, 3.0]];
        assert_eq!(action_loss(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn action_loss_hand_example() {
        let pred: Vec<Vec<f64>> = vec![vec![1.0], vec![2.0]];
        let gt = vec![vec![0.0], vec![0.0]];
        assert!((action_loss(&pred, &gt).unwrap() - 1.5).abs() < 1e-15);
    }

    #[test]
    fn action_loss_is_homogeneous_in_the_residual() {
        let gt = vec![vec![0.2, -0.4], vec![1.0, 0.0]];
        let pred = vec![vec![1.2, 0.1], vec![-0.3, 0.7]];
        let base = action_loss(&pred, &gt).unwrap();
        let c = 3.25;
        let scaled: Vec<Vec<f64>> = pred
            .iter()
            .zip(&gt)
            .map(|(p, g)| p.iter().zip(g).map(|(&a, &b)| b + c * (a - b)).collect())
            .collect();
        assert!((action_loss(&scaled, &gt).unwrap() - c * base).abs() < 1e-12);
    }

    #[test]
    fn action_loss_shape_mismatch_errors() {
        let a = vec![vec![1.0]];
        let b = vec![vec![1.0], vec![2.0]];
        assert!(action_loss(&a, &b).is_err());
        let c = vec![vec![1.0, 2.0]];
        assert!(action_loss(&a, &c).is_err());
    }

    #[test]
    fn camera_loss_euclidean_example() {
        let pred: Vec<Vec<Vec<f64>>> = vec![vec![vec![3.0, 4.0]]];
        let gt = vec![vec![vec![0.0, 0.0]]];
        assert!((camera_loss(&pred, &gt).unwrap() - 5.0).abs() < 1e-15);
        assert!(
            (camera_loss_with(&pred, &gt, NormKind::SquaredEuclidean).unwrap() - 25.0).abs()
                < 1e-15
        );
    }

    #[test]
    fn camera_loss_invariant_under_consistent_index_permutation() {
        let pred = vec![
            vec![vec![1.0, 0.0], vec![0.0, 2.0]],
            vec![vec![0.5, 0.5], vec![-1.0, 1.0]],
        ];
        let gt = vec![
            vec![vec![0.0, 0.0], vec![1.0, 1.0]],
            vec![vec![0.25, 0.0], vec![0.0, 0.0]],
        ];
        let base = camera_loss(&pred, &gt).unwrap();
        // Swap steps and views consistently in both tensors.
        let perm =
            |x: &Vec<Vec<Vec<f64>>>| vec![
                vec![x[1][1].clone(), x[1][0].clone()],
                vec![x[0][1].clone(), x[0][0].clone()],
            ];
        let permuted = camera_loss(&perm(&pred), &perm(&gt)).unwrap();
        assert!((base - permuted).abs() < 1e-15);
    }

    #[test]
    fn bev_loss_mean_of_unit_norms() {
        let pred: Vec<Vec<f64>> = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let gt = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
        assert!((bev_loss(&pred, &gt).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn bev_loss_decomposes_over_horizon_halves() {
        let pred: Vec<Vec<f64>> = vec![vec![1.0, 2.0], vec![0.0, -1.0], vec![3.0, 0.0], vec![0.5, 0.5]];
        let gt = vec![vec![0.0; 2]; 4];
        let whole = bev_loss(&pred, &gt).unwrap();
        let first = bev_loss(&pred[..2], &gt[..2]).unwrap();
        let second = bev_loss(&pred[2..], &gt[2..]).unwrap();
        assert!((whole - (2.0 * first + 2.0 * second) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn total_loss_weighting() {
        let w0 = LossWeights::<f64> { alpha: 0.0, beta: 0.0 };
        assert_eq!(total_loss(0.7, 9.0, 9.0, &w0), 0.7);
        let w = LossWeights::<f64> { alpha: 0.5, beta: 0.1 };
        assert!((total_loss(1.0, 2.0, 3.0, &w) - 2.3).abs() < 1e-15);
        // Linearity in each component.
        let base = total_loss(1.0, 2.0, 3.0, &w);
        assert!((total_loss(2.0, 2.0, 3.0, &w) - base - 1.0).abs() < 1e-15);
        assert!((total_loss(1.0, 4.0, 3.0, &w) - base - 2.0 * 0.5).abs() < 1e-15);
    }

    #[test]
    fn rf_interpolate_endpoints_and_midpoint() {
        let y0: Vec<f64> = vec![0.0, 0.0];
        let y1: Vec<f64> = vec![2.0, 4.0];
        assert_eq!(rf_interpolate(&y0, &y1, 0.0).unwrap(), y0);
        assert_eq!(rf_interpolate(&y0, &y1, 1.0).unwrap(), y1);
        assert_eq!(rf_interpolate(&y0, &y1, 0.5).unwrap(), vec![1.0, 2.0]);
        assert!(rf_interpolate(&y0, &y1, 1.5).is_err());
    }

    #[test]
    fn rf_interpolate_swap_symmetry() {
        let y0: Vec<f64> = vec![0.3, -1.2, 4.0];
        let y1 = vec![2.0, 0.1, -0.5];
        let t = 0.37;
        let a = rf_interpolate(&y0, &y1, t).unwrap();
        let b = rf_interpolate(&y1, &y0, t).unwrap();
        for i in 0..3 {
            assert!((a[i] + b[i] - (y0[i] + y1[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn interpolant_time_derivative_is_the_velocity_target() {
        let y0: Vec<f64> = vec![1.0, -2.0];
        let y1: Vec<f64> = vec![0.5, 3.0];
        let h = 1e-6;
        for t in [0.2, 0.5, 0.8] {
            let hi = rf_interpolate(&y0, &y1, t + h).unwrap();
            let lo = rf_interpolate(&y0, &y1, t - h).unwrap();
            for i in 0..2 {
                let fd = (hi[i] - lo[i]) / (2.0 * h);
                assert!((fd - (y1[i] - y0[i])).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rf_velocity_loss_examples() {
        let y0: Vec<f64> = vec![0.0];
        let y1: Vec<f64> = vec![2.0];
        assert_eq!(rf_velocity_loss(&[2.0], &y0, &y1).unwrap(), 0.0);
        assert_eq!(rf_velocity_loss(&[0.0], &y0, &y1).unwrap(), 4.0);
        // Translation invariance.
        let v = vec![1.0, -1.0];
        let a0 = vec![0.5, 0.2];
        let a1 = vec![-0.3, 1.0];
        let shift = 7.3;
        let b0: Vec<f64> = a0.iter().map(|x| x + shift).collect();
        let b1: Vec<f64> = a1.iter().map(|x| x + shift).collect();
        let l0 = rf_velocity_loss(&v, &a0, &a1).unwrap();
        let l1 = rf_velocity_loss(&v, &b0, &b1).unwrap();
        assert!((l0 - l1).abs() < 1e-12);
    }

    #[test]
    fn flow_sample_interpolant_recomputable() {
        let s = FlowSample::<f64>::new(vec![1.0, 0.0], vec![0.0, 2.0], 0.25, vec![]).unwrap();
        let again = rf_interpolate(&s.y0, &s.y1, s.t).unwrap();
        assert_eq!(s.yt, again);
        assert_eq!(s.velocity_target(), vec![-1.0, 2.0]);
    }

    #[test]
    fn gradient_check_on_a_quadratic() {
        let f = |p: &[f64]| Ok(p.iter().map(|x| x * x).sum());
        let params = vec![1.0, 2.0];
        let grad = vec![2.0, 4.0];
        let err = finite_diff_check(f, &params, &grad, 1e-5).unwrap();
        assert!(err <= 1e-9, "err {err}");
    }

    #[test]
    fn gradient_check_empty_params_is_zero() {
        let f = |_: &[f64]| Ok(3.0);
        assert_eq!(finite_diff_check(f, &[], &[], 1e-5).unwrap(), 0.0);
    }

    #[test]
    fn gradient_check_rejects_non_finite_loss() {
        let f = |_: &[f64]| Ok(f64::NAN);
        assert!(finite_diff_check(f, &[1.0], &[0.0], 1e-5).is_err());
    }

    #[test]
    fn gradient_check_rejects_out_of_range_epsilon() {
        let f = |p: &[f64]| Ok(p[0]);
        assert!(finite_diff_check(f, &[1.0], &[1.0], 1e-2).is_err());
    }

    #[test]
    fn losses_are_non_negative_and_zero_only_at_the_target() {
        let pred: Vec<Vec<f64>> = vec![vec![0.1, 0.0]];
        let gt = vec![vec![0.0, 0.0]];
        assert!(action_loss(&pred, &gt).unwrap() > 0.0);
        assert!(bev_loss(&pred, &gt).unwrap() > 0.0);
        assert_eq!(action_loss(&gt, &gt).unwrap(), 0.0);
        assert_eq!(bev_loss(&gt, &gt).unwrap(), 0.0);
    }
}
