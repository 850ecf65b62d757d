//! Runnable acceptance criteria. Each criterion builds its own fixtures,
//! runs the check at the pinned tolerances, and reports pass/fail with
//! details; the integration suite and the CLI `check` subcommand both drive
//! these functions.

use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    benchmark, block_sparse_attention, dense_attention, expand_block_mask, max_rel_deviation,
    BenchSpec,
};
use crate::curriculum::PlanId;
use crate::error::Result;
use crate::experiment::{
    desk_arms, run_ablation, EvalProtocol, ExperimentPlan, TrainParams, METRIC_COLUMNS,
};
use crate::layout::{block_partition, build_prompt_layout, LayoutConfig};
use crate::mask::{build_mask, total_active_pairs, HeadGroup, MaskConfig};
use crate::mat::Mat;
use crate::metrics::{cces_aggregate, CcesCategory, CcesMetric, CcesTable};
use crate::model::{Model, ModelConfig, RolloutOptions};
use crate::objectives::{rf_interpolate, rf_velocity_loss};
use crate::sampler::{
    importance_scores, sample_steps, sampling_distribution, ImportanceConfig, WindowSpec,
};
use crate::world::{generate_episode, scripted_events, WorldConfig, CONTROL_HZ};

#[derive(Debug, Clone)]
pub struct CriterionReport {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub details: String,
    pub seconds: f64,
}

impl CriterionReport {
    pub fn line(&self) -> String {
        format!(
            "criterion {} [{}] {} ({:.1}s): {}",
            self.id,
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.seconds,
            self.details
        )
    }
}

fn finish(
    id: u8,
    name: &'static str,
    started: Instant,
    outcome: Result<(bool, String)>,
) -> CriterionReport {
    let seconds = started.elapsed().as_secs_f64();
    match outcome {
        Ok((passed, details)) => CriterionReport {
            id,
            name,
            passed,
            details,
            seconds,
        },
        Err(e) => CriterionReport {
            id,
            name,
            passed: false,
            details: format!("errored: {e}"),
            seconds,
        },
    }
}

/// Process CPU time (user + system) in seconds; falls back to f64::NAN when
/// unavailable.
pub fn process_cpu_seconds() -> f64 {
    let Ok(stat) = std::fs::read_to_string("/proc/self/stat") else {
        return f64::NAN;
    };
    // utime and stime are fields 14 and 15 (1-based); the comm field may
    // contain spaces, so split past its closing paren first.
    let Some((_, rest)) = stat.rsplit_once(')') else {
        return f64::NAN;
    };
    let fields: Vec<&str> = rest.split_whitespace().collect();
    let (Some(utime), Some(stime)) = (fields.get(11), fields.get(12)) else {
        return f64::NAN;
    };
    let ticks: f64 = match (utime.parse::<f64>(), stime.parse::<f64>()) {
        (Ok(u), Ok(s)) => u + s,
        _ => return f64::NAN,
    };
    ticks / 100.0
}

// ---------------------------------------------------------------------------
// 1. Sparse/dense oracle equivalence
// ---------------------------------------------------------------------------

pub fn criterion_1_oracle_equivalence() -> CriterionReport {
    let t0 = Instant::now();
    let run = || -> Result<(bool, String)> {
        let mut worst = 0.0f64;
        let mut total_tokens = 0usize;
        for seed in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let layout_cfg = LayoutConfig {
                system_prompt_len: rng.random_range(1..=4),
                text_len_per_chunk: rng.random_range(1..=3),
                obs_frames_per_chunk: rng.random_range(1..=4),
                tokens_per_frame_per_view: rng.random_range(1..=4),
                n_views: rng.random_range(1..=3),
                action_len_per_chunk: rng.random_range(1..=4),
                query_len_per_chunk: rng.random_range(1..=4),
                block_size: rng.random_range(1..=8),
            };
            let n_chunks = rng.random_range(1..=5);
            let layout = build_prompt_layout(&layout_cfg, n_chunks)?;
            let grid = block_partition(&layout, layout_cfg.block_size)?;
            if grid.padded_len > 512 {
                continue;
            }
            total_tokens += grid.padded_len;
            let mask_cfg = MaskConfig {
                neighborhood_base_radius: rng.random_range(0..=4),
                ..MaskConfig::default()
            };
            let mask = build_mask(&grid, &mask_cfg)?;
            let d = rng.random_range(1..=64);
            let n = grid.padded_len;
            let mk = |rng: &mut ChaCha8Rng| {
                let mut m = Mat::<f64>::zeros(n, d);
                for (i, v) in m.data_mut().iter_mut().enumerate() {
                    if grid.token_is_real(i / d) {
                        *v = rng.random_range(-1.0..1.0);
                    }
                }
                m
            };
            let q = mk(&mut rng);
            let k = mk(&mut rng);
            let v = mk(&mut rng);
            for g in HeadGroup::ALL {
                let (sparse, _) = block_sparse_attention(&q, &k, &v, &mask, &grid, g)?;
                let tm = expand_block_mask(&mask, &grid, g);
                let dense = dense_attention(&q, &k, &v, Some(&tm))?;
                worst = worst.max(max_rel_deviation(&sparse, &dense));
            }
        }
        let secs = t0.elapsed().as_secs_f64();
        let pass = worst <= 1e-6 && secs < 60.0;
        Ok((
            pass,
            format!(
                "max relative deviation {worst:.3e} over 50 seeded instances \
                 ({total_tokens} total tokens), tolerance 1e-6, {secs:.1}s < 60s"
            ),
        ))
    };
    finish(1, "sparse/dense oracle equivalence", t0, run())
}

// ---------------------------------------------------------------------------
// 2. Linear block growth
// ---------------------------------------------------------------------------

pub fn criterion_2_linear_growth() -> CriterionReport {
    let t0 = Instant::now();
    let run = || -> Result<(bool, String)> {
        // Prompt-heavy per-chunk layout: OBS dominates with one query block.
        let layout_cfg = LayoutConfig {
            system_prompt_len: 4,
            text_len_per_chunk: 4,
            obs_frames_per_chunk: 8,
            tokens_per_frame_per_view: 8,
            n_views: 7,
            action_len_per_chunk: 4,
            query_len_per_chunk: 4,
            block_size: 4,
        };
        let mask_cfg = MaskConfig::default();
        let chunk_counts = [4usize, 8, 16, 32];
        let mut active = Vec::new();
        let mut dense_chunk = Vec::new();
        for &n in &chunk_counts {
            let layout = build_prompt_layout(&layout_cfg, n)?;
            let grid = block_partition(&layout, layout_cfg.block_size)?;
            let mask = build_mask(&grid, &mask_cfg)?;
            active.push(total_active_pairs(&mask));
            let chunk_blocks = grid
                .blocks
                .iter()
                .filter(|b| matches!(b.chunk, crate::layout::ChunkId::Chunk(_)))
                .count();
            dense_chunk.push(chunk_blocks * chunk_blocks);
        }
        let mut ratios = Vec::new();
        let mut ok = true;
        for w in active.windows(2) {
            let r = w[1] as f64 / w[0] as f64;
            ratios.push(r);
            ok &= r <= 2.5;
        }
        for w in dense_chunk.windows(2) {
            ok &= w[1] == 4 * w[0];
        }
        // Module invariant: bounded by c * n with c measured at n=4 and
        // 1.25x slack.
        let c = 1.25 * active[0] as f64 / 4.0;
        let mut linear_ok = true;
        for (&n, &a) in chunk_counts.iter().zip(&active) {
            linear_ok &= (a as f64) <= c * n as f64;
        }
        ok &= linear_ok;
        let secs = t0.elapsed().as_secs_f64();
        ok &= secs < 10.0;
        Ok((
            ok,
            format!(
                "active pairs {active:?}, doubling ratios {:?} (<= 2.5), dense chunk-part \
                 grows exactly 4x, c*n bound with 1.25 slack {}, {secs:.1}s < 10s",
                ratios
                    .iter()
                    .map(|r| (r * 1000.0).round() / 1000.0)
                    .collect::<Vec<_>>(),
                if linear_ok { "holds" } else { "violated" }
            ),
        ))
    };
    finish(2, "linear block growth", t0, run())
}

// ---------------------------------------------------------------------------
// 3. Qualitative speedup
// ---------------------------------------------------------------------------

pub fn criterion_3_speedup() -> CriterionReport {
    let t0 = Instant::now();
    let run = || -> Result<(bool, String)> {
        let spec = BenchSpec {
            n_chunks_list: vec![32],
            repeats: 5,
            d: 64,
            ..BenchSpec::default()
        };
        // Benchmark mode runs single precision per the engine contract.
        let reports = benchmark::<f32>(&spec)?;
        let r = &reports[0];
        let speedup = r.speedup();
        let flop_ratio_exact =
            r.estimated_flops_sparse * r.dense_pairs as u128
                == r.estimated_flops_dense * r.active_pairs as u128;
        let pass = speedup >= 1.2 && flop_ratio_exact;
        Ok((
            pass,
            format!(
                "speedup {speedup:.2}x (>= 1.2x required; the end-to-end 1.59x reference point \
                 is not a desk-scale target), sparse {:.0} ms vs dense {:.0} ms, active/dense \
                 pairs {}/{}, flop ratio == pair ratio exactly: {flop_ratio_exact}",
                r.wall_time_sparse * 1e3,
                r.wall_time_dense * 1e3,
                r.active_pairs,
                r.dense_pairs
            ),
        ))
    };
    finish(3, "qualitative block-sparse speedup", t0, run())
}

// ---------------------------------------------------------------------------
// 4. Sampler correctness
// ---------------------------------------------------------------------------

/// Literal evaluation of the importance-score formula, kept independent of
/// the production implementation.
fn brute_force_scores(a_x: &[f64], a_y: &[f64], cfg: &ImportanceConfig<f64>) -> Vec<f64> {
    let len = a_x.len();
    (0..len)
        .map(|k| {
            let mut total = 0.0;
            for win in &cfg.windows {
                let mut best = 0.0f64;
                for t in 0..len {
                    let ti = t as i64;
                    if ti >= k as i64 + win.start_offset && ti < k as i64 + win.end_offset {
                        best = best.max(cfg.lambda_x * a_x[t].abs() + cfg.lambda_y * a_y[t].abs());
                    }
                }
                total += best;
            }
            total + cfg.epsilon_floor
        })
        .collect()
}

pub fn criterion_4_sampler() -> CriterionReport {
    let t0 = Instant::now();
    let run = || -> Result<(bool, String)> {
        // (a) brute-force score oracle over 100 random trajectories.
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let mut worst_score_dev = 0.0f64;
        for _ in 0..100 {
            let len = rng.random_range(5..60);
            let a_x: Vec<f64> = (0..len).map(|_| rng.random_range(-4.0..4.0)).collect();
            let a_y: Vec<f64> = (0..len).map(|_| rng.random_range(-4.0..4.0)).collect();
            let cfg = ImportanceConfig {
                lambda_x: rng.random_range(0.0..2.0),
                lambda_y: rng.random_range(0.0..3.0),
                windows: [
                    WindowSpec::new(0, rng.random_range(1..6)),
                    WindowSpec::new(4, 4 + rng.random_range(1..8)),
                    WindowSpec::new(-rng.random_range(1..5), 0),
                ],
                epsilon_floor: 0.01,
                ..ImportanceConfig::default()
            };
            let got = importance_scores(&a_x, &a_y, &cfg)?;
            let want = brute_force_scores(&a_x, &a_y, &cfg);
            for (g, w) in got.iter().zip(&want) {
                worst_score_dev = worst_score_dev.max((g - w).abs());
            }
        }
        let scores_exact = worst_score_dev == 0.0;

        // (b) first-draw marginal vs p over 100k seeds (single-step draws
        // sample the full distribution).
        let w = vec![1.0, 3.0, 0.5, 2.0, 1.5, 0.2, 0.8, 1.0, 0.6, 2.5];
        let p = sampling_distribution(&w, 0.7)?;
        let n_seeds = 100_000u64;
        let mut counts = vec![0usize; p.len()];
        for seed in 0..n_seeds {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            counts[sample_steps(&p, 1, 4, &mut r)?[0]] += 1;
        }
        let tvd: f64 = counts
            .iter()
            .zip(&p)
            .map(|(&c, &q)| (c as f64 / n_seeds as f64 - q).abs())
            .sum::<f64>()
            / 2.0;

        // (c) gap safety over 1000 constrained runs.
        let mut spiky = vec![1e-6; 48];
        spiky[7] = 1.0;
        spiky[30] = 0.5;
        let z: f64 = spiky.iter().sum();
        for v in &mut spiky {
            *v /= z;
        }
        let max_gap = 5;
        let mut violations = 0usize;
        for seed in 0..1000u64 {
            let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
            let steps = sample_steps(&spiky, 6, max_gap, &mut r)?;
            for wpair in steps.windows(2) {
                if wpair[1] <= wpair[0] || wpair[1] - wpair[0] > max_gap {
                    violations += 1;
                }
            }
        }
        let secs = t0.elapsed().as_secs_f64();
        let pass = scores_exact && tvd <= 0.01 && violations == 0 && secs < 60.0;
        Ok((
            pass,
            format!(
                "score oracle max deviation {worst_score_dev:.1e} (exact required), \
                 first-draw TVD {tvd:.4} <= 0.01 over 100k seeds, gap violations \
                 {violations}/1000 runs, {secs:.1}s < 60s"
            ),
        ))
    };
    finish(4, "temporal sampler correctness", t0, run())
}

// ---------------------------------------------------------------------------
// 5. CCES arithmetic
// ---------------------------------------------------------------------------

fn cces_from_category_values(values: [f64; 4]) -> CcesTable {
    CcesTable {
        methods: vec!["reference".into(), "candidate".into()],
        metrics: CcesCategory::ALL
            .iter()
            .zip(values)
            .map(|(&cat, v)| CcesMetric {
                name: cat.name().to_ascii_lowercase(),
                category: cat,
                rates: vec![1.0, v],
            })
            .collect(),
        reference: 0,
    }
}

pub fn criterion_5_cces() -> CriterionReport {
    let t0 = Instant::now();
    let run = || -> Result<(bool, String)> {
        let cases = [
            ([0.9756, 0.9880, 0.9833, 0.9927], 3.9396),
            ([0.9533, 1.0416, 1.0094, 0.9481], 3.9524),
        ];
        let mut details = Vec::new();
        let mut pass = true;
        for (values, expect) in cases {
            let scores = cces_aggregate(&cces_from_category_values(values))?;
            let got = scores[1].total;
            let ok = (got - expect).abs() <= 1e-4;
            pass &= ok;
            details.push(format!("{values:?} -> {got:.4} (expect {expect})"));
        }
        let reference = cces_aggregate(&cces_from_category_values([0.9, 1.1, 1.0, 0.95]))?;
        let ref_total = reference[0].total;
        let ref_ok = (ref_total - 4.0).abs() <= 1e-12
            && reference[0]
                .category_means
                .iter()
                .all(|c| (c - 1.0).abs() <= 1e-12);
        pass &= ref_ok;
        details.push(format!("reference row -> {ref_total:.12} (expect 4 exactly)"));
        Ok((pass, details.join("; ")))
    };
    finish(5, "CCES ratio aggregation", t0, run())
}

// ---------------------------------------------------------------------------
// 6. Gradient integrity
// ---------------------------------------------------------------------------

pub fn criterion_6_gradient() -> CriterionReport {
    let t0 = Instant::now();
    let run = || -> Result<(bool, String)> {
        let plan = acceptance_plan(8, 1); // only the model/train sections matter
        let err = crate::experiment::gradient_sanity_check(&plan)?;
        let secs = t0.elapsed().as_secs_f64();
        let pass = err <= 1e-4 && secs < 120.0;
        Ok((
            pass,
            format!(
                "finite differences vs analytic gradients through the 2-layer micro model: \
                 max relative error {err:.3e} <= 1e-4, {secs:.1}s < 120s"
            ),
        ))
    };
    finish(6, "gradient integrity", t0, run())
}

// ---------------------------------------------------------------------------
// 7. Directional ablation
// ---------------------------------------------------------------------------

/// The desk-scale ablation plan the acceptance gate trains.
pub fn acceptance_plan(budget: usize, seeds: u64) -> ExperimentPlan {
    ExperimentPlan {
        plan_id: "acceptance_matrix".into(),
        world: WorldConfig {
            episode_len_s: 60,
            n_views: 2,
            latent_dim: 8,
            frame_dim: 16,
            event_script: vec![],
            ..WorldConfig::default()
        },
        model: ModelConfig {
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            ff_dim: 64,
            max_window_chunks: 7,
            max_stride_s: 3,
            action_dim: 2,
            latent_dim: 8,
            layout: LayoutConfig {
                system_prompt_len: 4,
                text_len_per_chunk: 1,
                obs_frames_per_chunk: CONTROL_HZ,
                tokens_per_frame_per_view: 2,
                n_views: 2,
                action_len_per_chunk: 4,
                query_len_per_chunk: 4,
                block_size: 4,
            },
            mask: MaskConfig::default(),
            seed: 0,
        },
        train: TrainParams::default(),
        eval: EvalProtocol::default(),
        world_seeds: (1..=seeds).collect(),
        train_episodes_per_seed: 3,
        eval_seeds: vec![101, 102],
        arms: desk_arms(&PlanId::ALL, budget).expect("matrix arms build"),
    }
}

pub struct DirectionalCheck {
    pub name: &'static str,
    pub worse_arm: &'static str,
    pub better_arm: &'static str,
    pub metric: &'static str,
    pub worse: f64,
    pub better: f64,
}

impl DirectionalCheck {
    pub fn margin(&self) -> f64 {
        (self.worse - self.better) / self.worse
    }

    pub fn passed(&self) -> bool {
        self.worse.is_finite() && self.better.is_finite() && self.margin() >= 0.05
    }
}

pub fn directional_checks(table: &crate::experiment::ResultTable) -> Vec<DirectionalCheck> {
    let get = |arm: &str, col: &str| -> f64 {
        let idx = METRIC_COLUMNS.iter().position(|c| *c == col).unwrap();
        table
            .medians
            .iter()
            .find(|m| m.arm == arm)
            .map(|m| m.values[idx])
            .unwrap_or(f64::NAN)
    };
    vec![
        DirectionalCheck {
            name: "chunk horizon 6 beats horizon 1 on 6 s closed-loop latent error",
            worse_arm: "framewise_h1",
            better_arm: "chunk_h21_cl",
            metric: "rollout_err",
            worse: get("framewise_h1", "rollout_err"),
            better: get("chunk_h21_cl", "rollout_err"),
        },
        DirectionalCheck {
            name: "extended-stride curriculum beats fixed stride on longest-horizon obs error",
            worse_arm: "chunk_h21_cl",
            better_arm: "chunk_h21_clef",
            metric: "far_obs_err",
            worse: get("chunk_h21_cl", "far_obs_err"),
            better: get("chunk_h21_clef", "far_obs_err"),
        },
        DirectionalCheck {
            name: "importance sampling beats uniform on event-restricted rollout error",
            worse_arm: "chunk_h21_clef",
            better_arm: "chunk_h21_clef_tis",
            metric: "event_err",
            worse: get("chunk_h21_clef", "event_err"),
            better: get("chunk_h21_clef_tis", "event_err"),
        },
    ]
}

pub fn criterion_7_directional_ablation(out_dir: &Path) -> CriterionReport {
    let t0 = Instant::now();
    let cpu0 = process_cpu_seconds();
    let run = || -> Result<(bool, String)> {
        let plan = acceptance_plan(2400, 3);
        let table = run_ablation(&plan, out_dir, false)?;
        let checks = directional_checks(&table);
        let cpu = process_cpu_seconds() - cpu0;
        let mut pass = true;
        let mut lines = Vec::new();
        for c in &checks {
            pass &= c.passed();
            lines.push(format!(
                "{}: {}={:.4} vs {}={:.4}, margin {:+.1}% (need >= +5%) [{}]",
                c.name,
                c.worse_arm,
                c.worse,
                c.better_arm,
                c.better,
                c.margin() * 100.0,
                if c.passed() { "ok" } else { "FAIL" }
            ));
        }
        let cpu_ok = !cpu.is_finite() || cpu < 1800.0;
        pass &= cpu_ok;
        lines.push(format!(
            "cpu time {:.0}s (< 1800s required), results in {}",
            cpu,
            out_dir.display()
        ));
        Ok((pass, lines.join(" | ")))
    };
    finish(7, "directional ablation", t0, run())
}

// ---------------------------------------------------------------------------
// 8. Rollout consistency
// ---------------------------------------------------------------------------

pub fn criterion_8_rollout_consistency(out_dir: &Path) -> CriterionReport {
    let t0 = Instant::now();
    let run = || -> Result<(bool, String)> {
        std::fs::create_dir_all(out_dir)?;
        let plan = acceptance_plan(8, 1);
        let world = WorldConfig {
            event_script: scripted_events(5, plan.world.episode_len_s),
            ..plan.world.clone()
        };
        let episode = generate_episode(5, &world)?;
        let model = Model::init(&ModelConfig {
            seed: 5,
            ..plan.model.clone()
        })?;
        let anchor = 8;

        // Teacher-forced step-1 vs closed-loop step-1 on identical context.
        let trace =
            model.closed_loop_rollout(&episode, anchor, 1.0, &RolloutOptions::default())?;
        let chunks = crate::model::prompt::sample_chunks(&episode, anchor, 1, 1)?;
        let fwd = model.forward(&chunks, 1, crate::model::MaskMode::BlockSparse)?;
        let d = plan.model.latent_dim;
        let mut worst = 0.0f64;
        for v in 0..plan.model.layout.n_views {
            for f in 0..CONTROL_HZ {
                for (a, b) in trace.steps[0].frame_latents[f][v]
                    .iter()
                    .zip(&fwd.obs[0][v][f * d..(f + 1) * d])
                {
                    worst = worst.max((a - b).abs());
                }
            }
        }
        for (a, b) in trace.steps[0]
            .actions
            .iter()
            .flatten()
            .zip(fwd.actions.iter().flatten())
        {
            worst = worst.max((a - b).abs());
        }
        let consistent = worst <= 1e-10;

        // Identity-copier rollout holds the last context chunk constant.
        let copier = Model::copy_last_chunk(&plan.model)?;
        let copier_trace =
            copier.closed_loop_rollout(&episode, anchor, 4.0, &RolloutOptions::default())?;
        let initial = crate::model::prompt::chunk_from_episode(&episode, anchor, 1)?;
        let mut copier_dev = 0.0f64;
        for step in &copier_trace.steps {
            for f in 0..CONTROL_HZ {
                for v in 0..plan.model.layout.n_views {
                    for (a, b) in step.frame_latents[f][v].iter().zip(&initial.frame_latents[f][v])
                    {
                        copier_dev = copier_dev.max((a - b).abs());
                    }
                }
            }
        }
        let copier_ok = copier_dev <= 1e-10;

        // Paired toggle CSVs must both materialize.
        let base = RolloutOptions::default();
        let sink_csv = crate::experiment::paired_toggle_csv(
            &model,
            &episode,
            anchor,
            6.0,
            &base,
            &RolloutOptions {
                use_latent_sink: true,
                ..base
            },
            "sink_off",
            "sink_on",
        )?;
        std::fs::write(out_dir.join("sink_comparison.csv"), &sink_csv)?;
        let aug_csv = crate::experiment::paired_toggle_csv(
            &model,
            &episode,
            anchor,
            6.0,
            &RolloutOptions {
                training_mode: true,
                latent_aug_sigma: 0.0,
                ..base
            },
            &RolloutOptions {
                training_mode: true,
                latent_aug_sigma: 0.05,
                rng_seed: 9,
                ..base
            },
            "aug_off",
            "aug_on",
        )?;
        std::fs::write(out_dir.join("augmentation_comparison.csv"), &aug_csv)?;
        let csv_ok = sink_csv.lines().count() > 1 && aug_csv.lines().count() > 1;

        let pass = consistent && copier_ok && csv_ok;
        Ok((
            pass,
            format!(
                "teacher-forced vs rollout step-1 max deviation {worst:.1e} <= 1e-10, \
                 copy-last-chunk rollout constant to {copier_dev:.1e}, paired sink/augmentation \
                 CSVs written to {}",
                out_dir.display()
            ),
        ))
    };
    finish(8, "rollout consistency", t0, run())
}

// ---------------------------------------------------------------------------
// 9. Rectified flow
// ---------------------------------------------------------------------------

/// Solves the 4x4 normal equations by Gaussian elimination (test oracle).
fn solve4(a: [[f64; 4]; 4], b: [f64; 4]) -> [f64; 4] {
    let mut m = [[0.0f64; 5]; 4];
    for i in 0..4 {
        m[i][..4].copy_from_slice(&a[i]);
        m[i][4] = b[i];
    }
    for col in 0..4 {
        let pivot = (col..4)
            .max_by(|&i, &j| m[i][col].abs().partial_cmp(&m[j][col].abs()).unwrap())
            .unwrap();
        m.swap(col, pivot);
        let p = m[col][col];
        for j in col..5 {
            m[col][j] /= p;
        }
        for i in 0..4 {
            if i != col {
                let f = m[i][col];
                for j in col..5 {
                    m[i][j] -= f * m[col][j];
                }
            }
        }
    }
    [m[0][4], m[1][4], m[2][4], m[3][4]]
}

pub fn criterion_9_rectified_flow() -> CriterionReport {
    let t0 = Instant::now();
    let run = || -> Result<(bool, String)> {
        // Endpoint identities and the zero of the velocity loss.
        let y0 = vec![0.4, -1.3];
        let y1 = vec![2.0, 0.7];
        let endpoints_exact = rf_interpolate(&y0, &y1, 0.0)? == y0
            && rf_interpolate(&y0, &y1, 1.0)? == y1;
        let v_star: Vec<f64> = y1.iter().zip(&y0).map(|(b, a)| b - a).collect();
        let zero_loss = rf_velocity_loss(&v_star, &y0, &y1)? == 0.0;

        // Linear velocity model on a 2-D Gaussian toy: gradient descent on
        // the velocity objective vs the closed-form least-squares solution.
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        let n = 4096usize;
        let mut gauss = move || {
            let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        };
        let mut feats = Vec::with_capacity(n); // [yt0, yt1, t, 1]
        let mut targets = Vec::with_capacity(n); // y1 - y0
        let mut rng2 = ChaCha8Rng::seed_from_u64(91);
        for _ in 0..n {
            let y0s = [1.5 + 0.8 * gauss(), -0.5 + 0.5 * gauss()];
            let y1s = [gauss(), gauss()];
            let t: f64 = rng2.random_range(0.0..1.0);
            let yt = rf_interpolate(&y0s, &y1s, t)?;
            feats.push([yt[0], yt[1], t, 1.0]);
            targets.push([y1s[0] - y0s[0], y1s[1] - y0s[1]]);
        }
        // Closed form per output dim: A w = b with A = (1/n) X^T X.
        let mut a = [[0.0f64; 4]; 4];
        let mut b0 = [0.0f64; 4];
        let mut b1 = [0.0f64; 4];
        for (f, t) in feats.iter().zip(&targets) {
            for i in 0..4 {
                for j in 0..4 {
                    a[i][j] += f[i] * f[j] / n as f64;
                }
                b0[i] += f[i] * t[0] / n as f64;
                b1[i] += f[i] * t[1] / n as f64;
            }
        }
        let w_star = [solve4(a, b0), solve4(a, b1)];

        // Full-batch gradient descent on the mean velocity loss.
        let mut w = [[0.0f64; 4]; 2];
        let lr = 0.2;
        let iters = 4000;
        let mut final_loss = f64::NAN;
        for _ in 0..iters {
            let mut grad = [[0.0f64; 4]; 2];
            let mut loss = 0.0;
            for (f, t) in feats.iter().zip(&targets) {
                for (o, row) in w.iter().enumerate() {
                    let pred: f64 = row.iter().zip(f).map(|(wi, fi)| wi * fi).sum();
                    let r = pred - t[o];
                    loss += r * r / n as f64;
                    for j in 0..4 {
                        grad[o][j] += 2.0 * r * f[j] / n as f64;
                    }
                }
            }
            final_loss = loss;
            for o in 0..2 {
                for j in 0..4 {
                    w[o][j] -= lr * grad[o][j];
                }
            }
        }
        let mut worst = 0.0f64;
        for o in 0..2 {
            for j in 0..4 {
                worst = worst.max((w[o][j] - w_star[o][j]).abs());
            }
        }
        let secs = t0.elapsed().as_secs_f64();
        let pass = endpoints_exact && zero_loss && worst <= 1e-3 && secs < 30.0;
        Ok((
            pass,
            format!(
                "endpoints exact: {endpoints_exact}, zero velocity loss at y1-y0: {zero_loss}, \
                 trained weights vs closed-form least squares max |dw| {worst:.2e} <= 1e-3 \
                 (final loss {final_loss:.4}), {secs:.1}s < 30s"
            ),
        ))
    };
    finish(9, "rectified flow objective", t0, run())
}

/// Runs every criterion; heavyweight training (criterion 7) lands in
/// `out_dir/ablation`, rollout CSVs in `out_dir/rollout`.
pub fn run_all(out_dir: &Path, skip_slow: bool) -> Vec<CriterionReport> {
    let mut reports = vec![
        criterion_1_oracle_equivalence(),
        criterion_2_linear_growth(),
        criterion_3_speedup(),
        criterion_4_sampler(),
        criterion_5_cces(),
        criterion_6_gradient(),
    ];
    if !skip_slow {
        reports.push(criterion_7_directional_ablation(&out_dir.join("ablation")));
    }
    reports.push(criterion_8_rollout_consistency(&out_dir.join("rollout")));
    reports.push(criterion_9_rectified_flow());
    reports.sort_by_key(|r| r.id);
    reports
}
