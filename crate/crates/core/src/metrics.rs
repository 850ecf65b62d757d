//! Trajectory metrics (lateral/longitudinal ADE/FDE), the CCES
//! ratio-aggregation arithmetic, and rollout drift curves.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Predicted and ground-truth ego (x, y) sequences at the control cadence.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPair {
    pub pred: Vec<(f64, f64)>,
    pub gt: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdeFde {
    pub lat_ade: f64,
    pub long_ade: f64,
    pub lat_fde: f64,
    pub long_fde: f64,
}

/// Displacement errors decomposed in the ground-truth heading frame. The
/// heading is the forward-difference tangent of the ground-truth track; at
/// zero-velocity steps the previous heading is reused (initially +x).
pub fn ade_fde(pair: &TrajectoryPair) -> Result<AdeFde> {
    if pair.pred.len() != pair.gt.len() {
        return Err(Error::shape(format!(
            "trajectory lengths differ: {} vs {}",
            pair.pred.len(),
            pair.gt.len()
        )));
    }
    let n = pair.gt.len();
    if n == 0 {
        return Err(Error::shape("empty trajectory"));
    }
    let mut heading = (1.0f64, 0.0f64);
    let mut lat_sum = 0.0;
    let mut long_sum = 0.0;
    let mut lat_last = 0.0;
    let mut long_last = 0.0;
    for t in 0..n {
        if t + 1 < n {
            let dx = pair.gt[t + 1].0 - pair.gt[t].0;
            let dy = pair.gt[t + 1].1 - pair.gt[t].1;
            let norm = (dx * dx + dy * dy).sqrt();
            if norm > 1e-12 {
                heading = (dx / norm, dy / norm);
            }
        }
        let ex = pair.pred[t].0 - pair.gt[t].0;
        let ey = pair.pred[t].1 - pair.gt[t].1;
        let long = ex * heading.0 + ey * heading.1;
        let lat = -ex * heading.1 + ey * heading.0;
        lat_sum += lat.abs();
        long_sum += long.abs();
        lat_last = lat.abs();
        long_last = long.abs();
    }
    Ok(AdeFde {
        lat_ade: lat_sum / n as f64,
        long_ade: long_sum / n as f64,
        lat_fde: lat_last,
        long_fde: long_last,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CcesCategory {
    Compliance,
    Comfort,
    Efficiency,
    Safety,
}

impl CcesCategory {
    pub const ALL: [CcesCategory; 4] = [
        CcesCategory::Compliance,
        CcesCategory::Comfort,
        CcesCategory::Efficiency,
        CcesCategory::Safety,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CcesCategory::Compliance => "Compliance",
            CcesCategory::Comfort => "Comfort",
            CcesCategory::Efficiency => "Efficiency",
            CcesCategory::Safety => "Safety",
        }
    }

    pub fn parse(s: &str) -> Result<CcesCategory> {
        match s.trim().to_ascii_lowercase().as_str() {
            "compliance" => Ok(CcesCategory::Compliance),
            "comfort" => Ok(CcesCategory::Comfort),
            "efficiency" => Ok(CcesCategory::Efficiency),
            "safety" => Ok(CcesCategory::Safety),
            _ => Err(Error::format(format!("unknown CCES category '{s}'"))),
        }
    }
}

/// One underlying metric: a per-frame fail-rate proportion per method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcesMetric {
    pub name: String,
    pub category: CcesCategory,
    /// Raw fail rates, one per method (aligned with `CcesTable::methods`).
    pub rates: Vec<f64>,
}

/// Raw fail-rate table plus the reference method all ratios normalize to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcesTable {
    pub methods: Vec<String>,
    pub metrics: Vec<CcesMetric>,
    /// Index into `methods`.
    pub reference: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcesScore {
    pub method: String,
    /// Category means in [Compliance, Comfort, Efficiency, Safety] order.
    pub category_means: [f64; 4],
    pub total: f64,
}

/// Reference-normalized aggregation: each metric becomes its ratio to the
/// reference method, each category the unweighted mean of its metrics'
/// ratios, and Total the sum of the four category means. The reference row
/// is (1, 1, 1, 1; 4) by construction.
pub fn cces_aggregate(table: &CcesTable) -> Result<Vec<CcesScore>> {
    if table.reference >= table.methods.len() {
        return Err(Error::config(format!(
            "reference index {} out of range for {} methods",
            table.reference,
            table.methods.len()
        )));
    }
    if table.metrics.is_empty() {
        return Err(Error::config("CCES table has no metrics"));
    }
    for m in &table.metrics {
        if m.rates.len() != table.methods.len() {
            return Err(Error::shape(format!(
                "metric '{}' has {} rates for {} methods",
                m.name,
                m.rates.len(),
                table.methods.len()
            )));
        }
        if m.rates.iter().any(|&r| r < 0.0 || !r.is_finite()) {
            return Err(Error::domain(format!(
                "metric '{}' has a negative or non-finite rate",
                m.name
            )));
        }
        if m.rates[table.reference] <= 0.0 {
            return Err(Error::domain(format!(
                "reference fail rate for metric '{}' must be strictly positive",
                m.name
            )));
        }
    }
    for cat in CcesCategory::ALL {
        if !table.metrics.iter().any(|m| m.category == cat) {
            return Err(Error::config(format!(
                "CCES table has no metric in category {}",
                cat.name()
            )));
        }
    }
    let mut out = Vec::with_capacity(table.methods.len());
    for (mi, method) in table.methods.iter().enumerate() {
        let mut means = [0.0f64; 4];
        for (ci, cat) in CcesCategory::ALL.iter().enumerate() {
            let ratios: Vec<f64> = table
                .metrics
                .iter()
                .filter(|m| m.category == *cat)
                .map(|m| m.rates[mi] / m.rates[table.reference])
                .collect();
            means[ci] = ratios.iter().sum::<f64>() / ratios.len() as f64;
        }
        out.push(CcesScore {
            method: method.clone(),
            category_means: means,
            total: means.iter().sum(),
        });
    }
    Ok(out)
}

/// Parses a raw fail-rate table from CSV with header
/// `metric,category,<method1>,<method2>,...`.
pub fn cces_table_from_csv(csv: &str, reference: &str) -> Result<CcesTable> {
    let mut lines = csv.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::format("empty CCES CSV"))?;
    let cols: Vec<&str> = header.split(',').map(|c| c.trim()).collect();
    if cols.len() < 3 || cols[0] != "metric" || cols[1] != "category" {
        return Err(Error::format(
            "CCES CSV header must be 'metric,category,<methods...>'",
        ));
    }
    let methods: Vec<String> = cols[2..].iter().map(|s| s.to_string()).collect();
    let reference = methods
        .iter()
        .position(|m| m == reference)
        .ok_or_else(|| Error::config(format!("reference method '{reference}' not in table")))?;
    let mut metrics = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').map(|f| f.trim()).collect();
        if fields.len() != cols.len() {
            return Err(Error::format(format!(
                "CCES CSV row has {} fields, expected {}",
                fields.len(),
                cols.len()
            )));
        }
        let rates = fields[2..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::format(format!("bad rate '{f}'")))
            })
            .collect::<Result<Vec<f64>>>()?;
        metrics.push(CcesMetric {
            name: fields[0].to_string(),
            category: CcesCategory::parse(fields[1])?,
            rates,
        });
    }
    Ok(CcesTable {
        methods,
        metrics,
        reference,
    })
}

pub fn cces_scores_to_csv(scores: &[CcesScore]) -> String {
    let mut out = String::from("method,compliance,comfort,efficiency,safety,total\n");
    for s in scores {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            s.method,
            s.category_means[0],
            s.category_means[1],
            s.category_means[2],
            s.category_means[3],
            s.total
        ));
    }
    out
}

/// Per-step latent rollout error with event-restricted summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftCurve {
    /// (control step, mean-over-views L2 latent error).
    pub per_step: Vec<(usize, f64)>,
    pub event_mean: f64,
    pub non_event_mean: f64,
}

impl DriftCurve {
    pub fn overall_mean(&self) -> f64 {
        if self.per_step.is_empty() {
            return 0.0;
        }
        self.per_step.iter().map(|&(_, e)| e).sum::<f64>() / self.per_step.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,latent_error\n");
        for &(s, e) in &self.per_step {
            out.push_str(&format!("{s},{e:.9}\n"));
        }
        out
    }
}

/// Computes a drift curve from per-step predicted latents: `predicted[i]`
/// holds per-view latents for control step `steps[i]`, compared against the
/// episode's ground truth; events split the summary.
pub fn rollout_drift(
    steps: &[usize],
    predicted: &[Vec<Vec<f64>>],
    episode: &crate::world::Episode,
) -> Result<DriftCurve> {
    if steps.len() != predicted.len() {
        return Err(Error::shape(format!(
            "{} steps vs {} predictions",
            steps.len(),
            predicted.len()
        )));
    }
    let segments = crate::world::event_segments(episode);
    let in_event = |t: usize| segments.iter().any(|&(s, e, _)| t >= s && t < e);
    let mut per_step = Vec::with_capacity(steps.len());
    let mut event_acc = (0.0, 0usize);
    let mut non_event_acc = (0.0, 0usize);
    for (&t, views) in steps.iter().zip(predicted) {
        if t >= episode.n_steps() {
            return Err(Error::domain(format!(
                "rollout step {t} lies beyond the episode ({} steps)",
                episode.n_steps()
            )));
        }
        if views.len() != episode.config.n_views {
            return Err(Error::shape(format!(
                "prediction at step {t} has {} views, episode has {}",
                views.len(),
                episode.config.n_views
            )));
        }
        let mut err_sum = 0.0;
        for (v, z) in views.iter().enumerate() {
            let gt = &episode.obs_latents[t][v];
            if z.len() != gt.len() {
                return Err(Error::shape(format!(
                    "latent dim {} vs {} at step {t} view {v}",
                    z.len(),
                    gt.len()
                )));
            }
            let sq: f64 = z.iter().zip(gt).map(|(a, b)| (a - b) * (a - b)).sum();
            err_sum += sq.sqrt();
        }
        let err = err_sum / views.len() as f64;
        per_step.push((t, err));
        if in_event(t) {
            event_acc = (event_acc.0 + err, event_acc.1 + 1);
        } else {
            non_event_acc = (non_event_acc.0 + err, non_event_acc.1 + 1);
        }
    }
    let mean = |acc: (f64, usize)| if acc.1 == 0 { 0.0 } else { acc.0 / acc.1 as f64 };
    Ok(DriftCurve {
        per_step,
        event_mean: mean(event_acc),
        non_event_mean: mean(non_event_acc),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_episode, Event, EventKind, WorldConfig};

    #[test]
    fn perfect_prediction_has_zero_errors() {
        let gt: Vec<(f64, f64)> = (0..8).map(|t| (t as f64, 0.5 * t as f64)).collect();
        let pair = TrajectoryPair {
            pred: gt.clone(),
            gt,
        };
        let m = ade_fde(&pair).unwrap();
        assert_eq!(
            (m.lat_ade, m.long_ade, m.lat_fde, m.long_fde),
            (0.0, 0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn constant_lateral_offset_decomposes_cleanly() {
        let gt: Vec<(f64, f64)> = (0..10).map(|t| (t as f64, 0.0)).collect();
        let pred: Vec<(f64, f64)> = gt.iter().map(|&(x, y)| (x, y + 0.5)).collect();
        let m = ade_fde(&TrajectoryPair { pred, gt }).unwrap();
        assert!((m.lat_ade - 0.5).abs() < 1e-12);
        assert!((m.lat_fde - 0.5).abs() < 1e-12);
        assert_eq!(m.long_ade, 0.0);
        assert_eq!(m.long_fde, 0.0);
    }

    #[test]
    fn matches_naive_projection_oracle() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let gt: Vec<(f64, f64)> = (0..8)
                .map(|t| {
                    (
                        t as f64 + rng.random_range(-0.1..0.1),
                        0.3 * t as f64 + rng.random_range(-0.1..0.1),
                    )
                })
                .collect();
            let pred: Vec<(f64, f64)> = gt
                .iter()
                .map(|&(x, y)| (x + rng.random_range(-1.0..1.0), y + rng.random_range(-1.0..1.0)))
                .collect();
            let m = ade_fde(&TrajectoryPair {
                pred: pred.clone(),
                gt: gt.clone(),
            })
            .unwrap();
            // Naive per-step projection.
            let mut lat = Vec::new();
            let mut long = Vec::new();
            let mut h = (1.0, 0.0);
            for t in 0..8 {
                if t + 1 < 8 {
                    let d = (gt[t + 1].0 - gt[t].0, gt[t + 1].1 - gt[t].1);
                    let n = (d.0 * d.0 + d.1 * d.1).sqrt();
                    if n > 1e-12 {
                        h = (d.0 / n, d.1 / n);
                    }
                }
                let e = (pred[t].0 - gt[t].0, pred[t].1 - gt[t].1);
                long.push((e.0 * h.0 + e.1 * h.1).abs());
                lat.push((-e.0 * h.1 + e.1 * h.0).abs());
            }
            let lat_ade: f64 = lat.iter().sum::<f64>() / 8.0;
            let long_ade: f64 = long.iter().sum::<f64>() / 8.0;
            assert!((m.lat_ade - lat_ade).abs() < 1e-12);
            assert!((m.long_ade - long_ade).abs() < 1e-12);
            assert!((m.lat_fde - lat[7]).abs() < 1e-12);
            assert!((m.long_fde - long[7]).abs() < 1e-12);
            // ADE is bounded by the max per-step error; FDE equals the last.
            assert!(m.lat_ade <= lat.iter().cloned().fold(0.0, f64::max) + 1e-12);
        }
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let pair = TrajectoryPair {
            pred: vec![(0.0, 0.0)],
            gt: vec![(0.0, 0.0), (1.0, 0.0)],
        };
        assert!(ade_fde(&pair).is_err());
    }

    fn table_with_categories(values: [f64; 4]) -> CcesTable {
        // One metric per category; reference rates are all 1.0, so the
        // non-reference method's ratios equal `values`.
        CcesTable {
            methods: vec!["reference".into(), "candidate".into()],
            metrics: CcesCategory::ALL
                .iter()
                .zip(values)
                .map(|(&cat, v)| CcesMetric {
                    name: format!("{}_metric", cat.name().to_ascii_lowercase()),
                    category: cat,
                    rates: vec![1.0, v],
                })
                .collect(),
            reference: 0,
        }
    }

    #[test]
    fn reference_row_scores_exactly_four() {
        let t = table_with_categories([0.9, 1.1, 1.0, 0.95]);
        let scores = cces_aggregate(&t).unwrap();
        let r = &scores[0];
        for c in r.category_means {
            assert!((c - 1.0).abs() <= 1e-12);
        }
        assert!((r.total - 4.0).abs() <= 1e-12);
    }

    #[test]
    fn published_category_values_reproduce_published_totals() {
        let h6 = table_with_categories([0.9756, 0.9880, 0.9833, 0.9927]);
        let s = cces_aggregate(&h6).unwrap();
        assert!((s[1].total - 3.9396).abs() <= 1e-4, "total {}", s[1].total);
        let h21 = table_with_categories([0.9533, 1.0416, 1.0094, 0.9481]);
        let s = cces_aggregate(&h21).unwrap();
        assert!((s[1].total - 3.9524).abs() <= 1e-4, "total {}", s[1].total);
    }

    #[test]
    fn scale_invariance_per_metric() {
        let mut t = table_with_categories([0.9, 1.1, 1.0, 0.95]);
        let base = cces_aggregate(&t).unwrap();
        for r in &mut t.metrics[2].rates {
            *r *= 37.5;
        }
        let scaled = cces_aggregate(&t).unwrap();
        for (a, b) in base.iter().zip(&scaled) {
            for (x, y) in a.category_means.iter().zip(&b.category_means) {
                assert!((x - y).abs() <= 1e-12);
            }
            assert!((a.total - b.total).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_reference_rate_names_the_metric() {
        let mut t = table_with_categories([0.9, 1.1, 1.0, 0.95]);
        t.metrics[1].rates[0] = 0.0;
        let err = cces_aggregate(&t).unwrap_err();
        assert!(err.to_string().contains("comfort_metric"));
    }

    #[test]
    fn missing_category_is_rejected() {
        let mut t = table_with_categories([0.9, 1.1, 1.0, 0.95]);
        t.metrics.remove(3);
        assert!(cces_aggregate(&t).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let csv = "metric,category,base,ours\n\
                   lane_centering,compliance,0.02,0.018\n\
                   steering_jerk,comfort,0.05,0.049\n\
                   under_accel,efficiency,0.04,0.041\n\
                   collisions,safety,0.003,0.0025\n";
        let table = cces_table_from_csv(csv, "base").unwrap();
        assert_eq!(table.methods, vec!["base", "ours"]);
        assert_eq!(table.reference, 0);
        let scores = cces_aggregate(&table).unwrap();
        assert!((scores[0].total - 4.0).abs() < 1e-12);
        assert!(scores[1].total < 4.0);
        let out = cces_scores_to_csv(&scores);
        assert!(out.lines().count() == 3);
        assert!(cces_table_from_csv(csv, "missing").is_err());
    }

    #[test]
    fn drift_curve_zero_for_oracle_and_splits_events() {
        let cfg = WorldConfig {
            episode_len_s: 20,
            event_script: vec![Event {
                start_s: 5.0,
                duration_s: 2.0,
                kind: EventKind::Brake,
                magnitude: 2.0,
            }],
            ..WorldConfig::default()
        };
        let ep = generate_episode(3, &cfg).unwrap();
        let steps: Vec<usize> = (10..40).collect();
        let perfect: Vec<Vec<Vec<f64>>> = steps
            .iter()
            .map(|&t| ep.obs_latents[t].clone())
            .collect();
        let curve = rollout_drift(&steps, &perfect, &ep).unwrap();
        assert!(curve.per_step.iter().all(|&(_, e)| e == 0.0));
        assert_eq!(curve.event_mean, 0.0);

        // Constant (frozen) prediction drifts as the scene moves.
        let frozen: Vec<Vec<Vec<f64>>> = steps.iter().map(|_| ep.obs_latents[10].clone()).collect();
        let curve = rollout_drift(&steps, &frozen, &ep).unwrap();
        assert!(curve.event_mean > 0.0);
        assert!(curve.non_event_mean >= 0.0);
        assert!(curve.event_mean.is_finite());
        // Braking changes the scene faster than cruising, so the frozen
        // prediction is worse inside the event span.
        assert!(curve.event_mean > curve.non_event_mean);
    }

    #[test]
    fn drift_errors_on_misalignment() {
        let ep = generate_episode(
            1,
            &WorldConfig {
                episode_len_s: 2,
                ..WorldConfig::default()
            },
        )
        .unwrap();
        let bad_step = ep.n_steps();
        assert!(rollout_drift(&[bad_step], &[ep.obs_latents[0].clone()], &ep).is_err());
        assert!(rollout_drift(&[0], &[], &ep).is_err());
    }
}
