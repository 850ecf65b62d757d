//! Temporal importance sampling: acceleration-derived per-step scores, the
//! temperature-scaled distribution over candidate steps, and gap-constrained
//! step selection. A uniform baseline sampler is included for ablations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Half-open window of step offsets relative to the candidate step `k`:
/// `[k + start_offset, k + end_offset)`, clipped to the trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub start_offset: i64,
    pub end_offset: i64,
}

impl WindowSpec {
    pub fn new(start_offset: i64, end_offset: i64) -> Self {
        WindowSpec {
            start_offset,
            end_offset,
        }
    }

    fn clipped(&self, k: usize, len: usize) -> std::ops::Range<usize> {
        let lo = (k as i64 + self.start_offset).clamp(0, len as i64) as usize;
        let hi = (k as i64 + self.end_offset).clamp(0, len as i64) as usize;
        lo..hi.max(lo)
    }
}

/// Scoring and sampling parameters. Windows default to 1 s near-future,
/// 2 s mid-horizon, and 1 s recent-history spans at the 4 Hz control
/// cadence; the weights favor lateral events.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImportanceConfig<T> {
    pub lambda_x: T,
    pub lambda_y: T,
    /// Near-future, mid-horizon, recent-history.
    pub windows: [WindowSpec; 3],
    pub tau: T,
    pub max_gap: usize,
    pub epsilon_floor: T,
}

impl<T: Real> Default for ImportanceConfig<T> {
    fn default() -> Self {
        ImportanceConfig {
            lambda_x: T::from_f64_c(1.0),
            lambda_y: T::from_f64_c(2.0),
            windows: [
                WindowSpec::new(0, 4),
                WindowSpec::new(4, 12),
                WindowSpec::new(-4, 0),
            ],
            tau: T::from_f64_c(0.7),
            max_gap: 8,
            epsilon_floor: T::from_f64_c(1e-3),
        }
    }
}

impl<T: Real> ImportanceConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_x < T::zero() || self.lambda_y < T::zero() {
            return Err(Error::config("lambda_x and lambda_y must be >= 0"));
        }
        if self.tau <= T::zero() {
            return Err(Error::config("tau must be > 0"));
        }
        if self.max_gap == 0 {
            return Err(Error::config("max_gap must be >= 1"));
        }
        if self.epsilon_floor < T::zero() {
            return Err(Error::config("epsilon_floor must be >= 0"));
        }
        Ok(())
    }
}

/// Acceleration series with their derived scores and probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTrajectory<T> {
    pub a_x: Vec<T>,
    pub a_y: Vec<T>,
    pub w: Vec<T>,
    pub p: Vec<T>,
}

/// Per-step importance: for each window, the maximum weighted acceleration
/// magnitude inside the clipped window; summed over the three windows, then
/// floored by `epsilon_floor`. Empty clipped windows contribute zero.
pub fn importance_scores<T: Real>(
    a_x: &[T],
    a_y: &[T],
    cfg: &ImportanceConfig<T>,
) -> Result<Vec<T>> {
    cfg.validate()?;
    if a_x.len() != a_y.len() {
        return Err(Error::shape(format!(
            "acceleration series lengths differ: {} vs {}",
            a_x.len(),
            a_y.len()
        )));
    }
    let len = a_x.len();
    let weighted: Vec<T> = a_x
        .iter()
        .zip(a_y)
        .map(|(&ax, &ay)| cfg.lambda_x * ax.abs() + cfg.lambda_y * ay.abs())
        .collect();
    let mut w = Vec::with_capacity(len);
    for k in 0..len {
        let mut score = T::zero();
        for win in &cfg.windows {
            let range = win.clipped(k, len);
            if range.is_empty() {
                continue;
            }
            let m = weighted[range].iter().fold(T::zero(), |acc, &v| acc.max(v));
            score = score + m;
        }
        w.push(score + cfg.epsilon_floor);
    }
    Ok(w)
}

/// Temperature-scaled distribution: `p_k = w_k^(1/tau) / sum_j w_j^(1/tau)`.
pub fn sampling_distribution<T: Real>(w: &[T], tau: T) -> Result<Vec<T>> {
    if tau <= T::zero() {
        return Err(Error::config("tau must be > 0"));
    }
    let inv_tau = T::one() / tau;
    // Scale by the max before exponentiating so sharp temperatures do not
    // overflow; the ratio is unchanged.
    let m = w.iter().fold(T::zero(), |acc, &v| acc.max(v));
    if m <= T::zero() {
        return Err(Error::numeric(
            "all importance scores are zero; set epsilon_floor > 0",
        ));
    }
    let powed: Vec<T> = w
        .iter()
        .map(|&v| {
            if v < T::zero() {
                return Err(Error::domain("importance scores must be >= 0"));
            }
            Ok((v / m).powf(inv_tau))
        })
        .collect::<Result<_>>()?;
    let z: T = powed.iter().copied().sum();
    if !(z > T::zero()) || !z.is_finite() {
        return Err(Error::numeric(
            "temperature-scaled mass is not positive and finite; set epsilon_floor > 0",
        ));
    }
    Ok(powed.into_iter().map(|v| v / z).collect())
}

/// Draws one index from `p` restricted to `range`, renormalized over it.
fn draw_in_range<T: Real, R: Rng>(
    p: &[T],
    range: std::ops::Range<usize>,
    rng: &mut R,
) -> Result<usize> {
    let total: T = p[range.clone()].iter().copied().sum();
    if !(total > T::zero()) {
        return Err(Error::numeric(
            "zero probability mass in the feasible window; set epsilon_floor > 0",
        ));
    }
    let u = T::from_f64_c(rng.random_range(0.0..1.0)) * total;
    let mut acc = T::zero();
    let mut last = range.start;
    for j in range.clone() {
        acc = acc + p[j];
        last = j;
        if u < acc {
            return Ok(j);
        }
    }
    Ok(last)
}

/// Gap-constrained sequential sampling: indices are strictly ascending with
/// consecutive differences at most `max_gap`. Each draw renormalizes `p`
/// over its feasible window; every window reserves room for the selections
/// still to come, so a feasible request never strands mid-sequence.
pub fn sample_steps<T: Real, R: Rng>(
    p: &[T],
    n_steps: usize,
    max_gap: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let len = p.len();
    if n_steps == 0 {
        return Err(Error::config("n_steps must be >= 1"));
    }
    if max_gap == 0 {
        return Err(Error::config("max_gap must be >= 1"));
    }
    if n_steps > len {
        return Err(Error::infeasible(format!(
            "cannot place {n_steps} ascending steps in a length-{len} trajectory"
        )));
    }
    let mut out = Vec::with_capacity(n_steps);
    // First draw leaves room for n_steps - 1 later indices.
    let first_hi = len - (n_steps - 1);
    let mut prev = draw_in_range(p, 0..first_hi, rng)?;
    out.push(prev);
    for m in 1..n_steps {
        let remaining_after = n_steps - 1 - m;
        let hi = (prev + max_gap + 1).min(len - remaining_after);
        let lo = prev + 1;
        debug_assert!(lo < hi, "window invariant violated");
        prev = draw_in_range(p, lo..hi, rng)?;
        out.push(prev);
    }
    Ok(out)
}

/// Uniform sample of `n_steps` distinct indices from `[0, len)`, sorted.
pub fn uniform_baseline<R: Rng>(len: usize, n_steps: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n_steps == 0 {
        return Err(Error::config("n_steps must be >= 1"));
    }
    if n_steps > len {
        return Err(Error::infeasible(format!(
            "cannot sample {n_steps} distinct steps from {len}"
        )));
    }
    // Partial Fisher-Yates.
    let mut idx: Vec<usize> = (0..len).collect();
    for i in 0..n_steps {
        let j = rng.random_range(i..len);
        idx.swap(i, j);
    }
    let mut out = idx[..n_steps].to_vec();
    out.sort_unstable();
    Ok(out)
}

/// Convenience: scores and distribution for one trajectory.
pub fn score_trajectory<T: Real>(
    a_x: &[T],
    a_y: &[T],
    cfg: &ImportanceConfig<T>,
) -> Result<ScoredTrajectory<T>> {
    let w = importance_scores(a_x, a_y, cfg)?;
    let p = sampling_distribution(&w, cfg.tau)?;
    Ok(ScoredTrajectory {
        a_x: a_x.to_vec(),
        a_y: a_y.to_vec(),
        w,
        p,
    })
}

/// CSV for plotting scores against the acceleration profile.
pub fn stats_csv<T: Real>(scored: &ScoredTrajectory<T>) -> String {
    let mut out = String::from("step,a_x,a_y,w,p\n");
    for k in 0..scored.w.len() {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            k,
            scored.a_x[k].to_f64_c(),
            scored.a_y[k].to_f64_c(),
            scored.w[k].to_f64_c(),
            scored.p[k].to_f64_c()
        ));
    }
    out
}
