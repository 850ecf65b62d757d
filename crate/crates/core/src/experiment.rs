//! Ablation orchestration: trains the plan's arms on the synthetic world,
//! evaluates teacher-forced and closed-loop protocols, persists per-arm
//! results with config fingerprints, and merges comparison tables.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curriculum::{stage_schedule_with, CurriculumStage, PlanId, SamplerKind};
use crate::error::{Error, Result};
use crate::metrics::{ade_fde, rollout_drift, AdeFde, TrajectoryPair};
use crate::model::{Model, ModelConfig, RolloutOptions};
use crate::objectives::LossWeights;
use crate::sampler::{
    sample_steps, sampling_distribution, uniform_baseline, ImportanceConfig, WindowSpec,
};
use crate::world::{generate_episode, scripted_events, Episode, WorldConfig, CONTROL_DT, CONTROL_HZ};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Paper horizons {1, 6, 21} map to desk analogs {1, 3, 6} so the full
/// matrix trains in CPU-minutes.
pub fn desk_horizon(paper_h: usize) -> usize {
    match paper_h {
        1 => 1,
        6 => 3,
        21 => 6,
        other => other.min(6),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub lr0: f64,
    /// lr_t = lr0 / (1 + lr_decay * t) over the arm's global step t.
    pub lr_decay: f64,
    pub batch_size: usize,
    /// Anchors drawn per sampling chain.
    pub anchors_per_chain: usize,
    /// Scripted events per training episode; kept low so events stay rare.
    pub train_events_per_episode: usize,
    /// Learning-rate multiplier for the action head. The L1 action loss
    /// has unit-magnitude gradients, so the head needs larger steps to
    /// track multi-m/s^2 maneuvers within the step budget.
    pub action_head_lr_mult: f64,
    pub importance: ImportanceConfig<f64>,
    pub loss_weights: LossWeights<f64>,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            lr0: 0.02,
            lr_decay: 0.002,
            batch_size: 1,
            anchors_per_chain: 16,
            train_events_per_episode: 2,
            action_head_lr_mult: 6.0,
            importance: ImportanceConfig {
                tau: 0.25,
                ..ImportanceConfig::default()
            },
            loss_weights: LossWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub rollout_horizon_s: f64,
    /// Evaluation anchors every this many control steps.
    pub anchor_stride_steps: usize,
    /// Stride and horizon of the extended-foresight observation probe.
    pub far_stride_s: usize,
    pub far_horizon: usize,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            rollout_horizon_s: 6.0,
            anchor_stride_steps: 12,
            far_stride_s: 3,
            far_horizon: 6,
        }
    }
}

/// One training arm: a named desk-scale stage schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSpec {
    pub name: String,
    pub plan: PlanId,
    pub stages: Vec<CurriculumStage>,
}

impl ArmSpec {
    pub fn total_steps(&self) -> usize {
        self.stages.iter().map(|s| s.train_steps).sum()
    }

    /// Largest context window any stage needs.
    pub fn window_chunks(&self) -> usize {
        self.stages.iter().map(|s| s.horizon + 1).max().unwrap_or(2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub plan_id: String,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub train: TrainParams,
    pub eval: EvalProtocol,
    /// Training replica seeds (one trained model per seed per arm).
    pub world_seeds: Vec<u64>,
    pub train_episodes_per_seed: usize,
    /// Held-out evaluation episode seeds, shared by every arm.
    pub eval_seeds: Vec<u64>,
    pub arms: Vec<ArmSpec>,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.world_seeds.is_empty() || self.eval_seeds.is_empty() {
            return Err(Error::config("seed sets must be nonempty"));
        }
        if self.arms.is_empty() {
            return Err(Error::config("plan has no arms"));
        }
        if self.eval.rollout_horizon_s.fract() != 0.0 || self.eval.rollout_horizon_s < 1.0 {
            return Err(Error::config(
                "eval rollout horizon must be a whole number of seconds",
            ));
        }
        // Fairness: every arm shares the step budget and the model config.
        let budget = self.arms[0].total_steps();
        for arm in &self.arms {
            if arm.total_steps() != budget {
                return Err(Error::config(format!(
                    "arm '{}' has {} train steps, others have {budget}; arms must share budgets",
                    arm.name,
                    arm.total_steps()
                )));
            }
            if arm.window_chunks() > self.model.max_window_chunks {
                return Err(Error::config(format!(
                    "arm '{}' needs a {}-chunk window, model allows {}",
                    arm.name,
                    arm.window_chunks(),
                    self.model.max_window_chunks
                )));
            }
        }
        self.model.validate()?;
        self.world.validate()?;
        self.train.loss_weights.validate()?;
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(self).expect("plan serializes"));
        hasher.update(CODE_VERSION.as_bytes());
        hex_digest(hasher)
    }
}

fn hex_digest(hasher: Sha256) -> String {
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Desk-scale stage schedules for the named plans, scaled from the paper
/// protocol and padded at the final stage so every arm consumes exactly
/// `total_budget` steps.
pub fn desk_arms(plans: &[PlanId], total_budget: usize) -> Result<Vec<ArmSpec>> {
    if total_budget == 0 {
        return Err(Error::config("total_budget must be >= 1"));
    }
    let mut arms = Vec::with_capacity(plans.len());
    for &plan in plans {
        let full = stage_schedule_with(plan, &[1])?;
        let n = full.len();
        // Early stages share a flat split of half the budget; the final
        // stage takes the rest.
        let early = if n > 1 {
            (total_budget / 2) / (n - 1)
        } else {
            0
        };
        let mut stages: Vec<CurriculumStage> = full
            .iter()
            .enumerate()
            .map(|(i, s)| CurriculumStage {
                horizon: desk_horizon(s.horizon),
                stride_s: s.stride_s,
                train_steps: if i + 1 < n { early.max(1) } else { 1 },
                sampler: s.sampler,
            })
            .collect();
        let used: usize = stages[..n - 1].iter().map(|s| s.train_steps).sum();
        if used + 1 > total_budget {
            return Err(Error::config(format!(
                "budget {total_budget} too small for {n} stages"
            )));
        }
        stages[n - 1].train_steps = total_budget - used;
        arms.push(ArmSpec {
            name: plan.name().to_string(),
            plan,
            stages,
        });
    }
    Ok(arms)
}

/// Evaluation metrics of one trained replica.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub arm: String,
    pub seed: u64,
    pub ade_lat: f64,
    pub ade_long: f64,
    pub fde_lat: f64,
    pub fde_long: f64,
    pub rollout_err: f64,
    pub event_err: f64,
    pub far_obs_err: f64,
    pub final_train_loss: f64,
}

pub const METRIC_COLUMNS: [&str; 8] = [
    "ade_lat",
    "ade_long",
    "fde_lat",
    "fde_long",
    "rollout_err",
    "event_err",
    "far_obs_err",
    "final_train_loss",
];

impl MetricsRow {
    pub fn values(&self) -> [f64; 8] {
        [
            self.ade_lat,
            self.ade_long,
            self.fde_lat,
            self.fde_long,
            self.rollout_err,
            self.event_err,
            self.far_obs_err,
            self.final_train_loss,
        ]
    }
}

/// Median per arm over its seed replicas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianRow {
    pub arm: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub fingerprint: String,
    pub rows: Vec<MetricsRow>,
    pub medians: Vec<MedianRow>,
}

fn median_of(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

// ---------------------------------------------------------------------------
// Anchor sampling
// ---------------------------------------------------------------------------

/// Feasible anchor range of a stage within an episode.
fn anchor_range(episode: &Episode, stage: &CurriculumStage) -> Result<(usize, usize)> {
    let lo = CONTROL_HZ - 1;
    let span = stage.horizon * stage.stride_steps();
    let t_len = episode.n_steps();
    if lo + span >= t_len {
        return Err(Error::domain(format!(
            "episode of {t_len} steps too short for horizon {} at stride {} s",
            stage.horizon, stage.stride_s
        )));
    }
    Ok((lo, t_len - 1 - span))
}

/// Draws one chain of training anchors for an episode, uniform or
/// importance-weighted per the stage's sampler.
fn draw_anchor_chain(
    episode: &Episode,
    stage: &CurriculumStage,
    params: &TrainParams,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let (lo, hi) = anchor_range(episode, stage)?;
    let len = hi - lo + 1;
    let n = n.min(len);
    match stage.sampler {
        SamplerKind::Uniform => Ok(uniform_baseline(len, n, rng)?
            .into_iter()
            .map(|k| k + lo)
            .collect()),
        SamplerKind::Tis => {
            let w = crate::sampler::importance_scores(
                &episode.a_x,
                &episode.a_y,
                &params.importance,
            )?;
            let p_full = sampling_distribution(&w, params.importance.tau)?;
            // Restrict to the feasible anchor window and renormalize.
            let slice = &p_full[lo..=hi];
            let mass: f64 = slice.iter().sum();
            let p: Vec<f64> = slice.iter().map(|v| v / mass).collect();
            Ok(sample_steps(&p, n, params.importance.max_gap, rng)?
                .into_iter()
                .map(|k| k + lo)
                .collect())
        }
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Per-step loss history of one trained replica.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub losses: Vec<f64>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,total_loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            out.push_str(&format!("{i},{l:.9}\n"));
        }
        out
    }
}

fn train_replica(
    plan: &ExperimentPlan,
    arm: &ArmSpec,
    seed: u64,
    checkpoint_dir: &Path,
) -> Result<(Model, TrainHistory)> {
    let episodes: Vec<Episode> = (0..plan.train_episodes_per_seed)
        .map(|i| {
            let ep_seed = seed.wrapping_mul(1009).wrapping_add(i as u64);
            let cfg = WorldConfig {
                event_script: crate::world::scripted_events_n(
                    ep_seed,
                    plan.world.episode_len_s,
                    plan.train.train_events_per_episode,
                ),
                ..plan.world.clone()
            };
            generate_episode(ep_seed, &cfg)
        })
        .collect::<Result<_>>()?;

    std::fs::create_dir_all(checkpoint_dir)?;
    let model_cfg = ModelConfig {
        seed,
        ..plan.model.clone()
    };

    // Resume from the last completed stage checkpoint when present.
    let mut start_stage = 0;
    let mut model = Model::init(&model_cfg)?;
    for (i, _) in arm.stages.iter().enumerate().rev() {
        let path = checkpoint_dir.join(format!("stage{i}.fscp"));
        if path.exists() {
            model = crate::model::load_checkpoint(&path)?;
            start_stage = i + 1;
            break;
        }
    }

    let mut history = TrainHistory::default();
    let mut global_step: usize = arm.stages[..start_stage].iter().map(|s| s.train_steps).sum();
    for (stage_idx, stage) in arm.stages.iter().enumerate().skip(start_stage) {
        let mut rng = ChaCha8Rng::seed_from_u64(
            seed ^ (stage_idx as u64) << 32 ^ 0xA11C_E5EED,
        );
        let mut queues: Vec<Vec<usize>> = vec![Vec::new(); episodes.len()];
        for step in 0..stage.train_steps {
            let ep_idx = step % episodes.len();
            if queues[ep_idx].is_empty() {
                let mut chain = draw_anchor_chain(
                    &episodes[ep_idx],
                    stage,
                    &plan.train,
                    plan.train.anchors_per_chain,
                    &mut rng,
                )?;
                // The chain's temporal structure satisfies the gap bound;
                // consumption order is shuffled so clustered anchors do not
                // resonate with the optimizer's momentum.
                for i in (1..chain.len()).rev() {
                    let j = rand::Rng::random_range(&mut rng, 0..=i);
                    chain.swap(i, j);
                }
                queues[ep_idx] = chain;
            }
            let anchor = queues[ep_idx].pop().expect("chain refilled above");
            let mut batch = Vec::with_capacity(plan.train.batch_size);
            batch.push(model.make_sample(
                &episodes[ep_idx],
                anchor,
                stage,
                format!("{}:s{stage_idx}:t{step}:e{ep_idx}:a{anchor}", arm.name),
            )?);
            for extra in 1..plan.train.batch_size {
                let ep2 = (ep_idx + extra) % episodes.len();
                if queues[ep2].is_empty() {
                    let mut chain = draw_anchor_chain(
                        &episodes[ep2],
                        stage,
                        &plan.train,
                        plan.train.anchors_per_chain,
                        &mut rng,
                    )?;
                    for i in (1..chain.len()).rev() {
                        let j = rand::Rng::random_range(&mut rng, 0..=i);
                        chain.swap(i, j);
                    }
                    queues[ep2] = chain;
                }
                let a2 = queues[ep2].pop().unwrap();
                batch.push(model.make_sample(&episodes[ep2], a2, stage, "extra")?);
            }
            let lr = plan.train.lr0 / (1.0 + plan.train.lr_decay * global_step as f64);
            let breakdown = model.train_step_scaled(
                &batch,
                &plan.train.loss_weights,
                lr,
                plan.train.action_head_lr_mult,
            )?;
            history.losses.push(breakdown.total);
            global_step += 1;
        }
        crate::model::save_checkpoint(&model, &checkpoint_dir.join(format!("stage{stage_idx}.fscp")))?;
    }
    Ok((model, history))
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

fn eval_episodes(plan: &ExperimentPlan) -> Result<Vec<Episode>> {
    plan.eval_seeds
        .iter()
        .map(|&s| {
            let cfg = WorldConfig {
                event_script: scripted_events(s.wrapping_mul(7919).wrapping_add(3), plan.world.episode_len_s),
                ..plan.world.clone()
            };
            generate_episode(s.wrapping_mul(7919).wrapping_add(3), &cfg)
        })
        .collect()
}

/// Integrates predicted accelerations into positions with the episode's
/// kinematics convention, starting from the anchor's ground-truth state.
fn integrate_actions(
    episode: &Episode,
    anchor: usize,
    actions: &[Vec<f64>],
) -> Vec<(f64, f64)> {
    let mut v = episode.velocities[anchor];
    let mut p = episode.positions[anchor];
    let mut out = Vec::with_capacity(actions.len());
    for a in actions {
        p = (p.0 + v.0 * CONTROL_DT, p.1 + v.1 * CONTROL_DT);
        v = (v.0 + a[0] * CONTROL_DT, v.1 + a[1] * CONTROL_DT);
        out.push(p);
    }
    out
}

fn eval_anchor_grid(episode: &Episode, span_steps: usize, stride: usize) -> Vec<usize> {
    let lo = CONTROL_HZ - 1;
    let hi = episode.n_steps().saturating_sub(1 + span_steps);
    (lo..=hi).step_by(stride.max(1)).collect()
}

/// Full evaluation protocol of one trained replica over the shared eval
/// episodes: teacher-forced single-step ADE/FDE, 6 s closed-loop latent
/// drift (overall and event-restricted), and the extended-stride
/// observation probe.
pub fn evaluate_replica(
    model: &Model,
    episodes: &[Episode],
    eval: &EvalProtocol,
) -> Result<MetricsRow> {
    let single = CurriculumStage {
        horizon: 1,
        stride_s: 1,
        train_steps: 1,
        sampler: SamplerKind::Uniform,
    };
    let mut ade_acc = AdeFde {
        lat_ade: 0.0,
        long_ade: 0.0,
        lat_fde: 0.0,
        long_fde: 0.0,
    };
    let mut n_traj = 0usize;
    let mut rollout_sum = 0.0;
    let mut rollout_n = 0usize;
    let mut event_sum = 0.0;
    let mut event_n = 0usize;
    let mut far_sum = 0.0;
    let mut far_n = 0usize;

    let rollout_span = eval.rollout_horizon_s as usize * CONTROL_HZ;
    for episode in episodes {
        // Teacher-forced single-step trajectories.
        for &anchor in &eval_anchor_grid(episode, CONTROL_HZ, eval.anchor_stride_steps) {
            let sample = model.make_sample(episode, anchor, &single, "eval")?;
            let out = model.forward(&sample.chunks, 1, crate::model::MaskMode::BlockSparse)?;
            let pred = integrate_actions(episode, anchor, &out.actions);
            let gt: Vec<(f64, f64)> = (1..=CONTROL_HZ)
                .map(|j| episode.positions[anchor + j])
                .collect();
            let m = ade_fde(&TrajectoryPair { pred, gt })?;
            ade_acc.lat_ade += m.lat_ade;
            ade_acc.long_ade += m.long_ade;
            ade_acc.lat_fde += m.lat_fde;
            ade_acc.long_fde += m.long_fde;
            n_traj += 1;
        }
        // Closed-loop drift over the anchor grid.
        for &anchor in &eval_anchor_grid(episode, rollout_span, eval.anchor_stride_steps) {
            let trace = model.closed_loop_rollout(
                episode,
                anchor,
                eval.rollout_horizon_s,
                &RolloutOptions::default(),
            )?;
            let (steps, latents) = trace.per_step_latents();
            let curve = rollout_drift(&steps, &latents, episode)?;
            for &(_, e) in &curve.per_step {
                rollout_sum += e;
                rollout_n += 1;
            }
        }
        // Event-restricted error from event-anchored rollouts: the context
        // is ground truth at the event's approach, so in-event steps
        // measure event handling rather than drift accumulated while
        // cruising toward the event.
        let max_anchor = episode.n_steps().saturating_sub(1 + rollout_span);
        for (start, _, _) in crate::world::event_segments(episode) {
            // Anchors at onset and mid-event: the context already shows the
            // event, so in-event steps measure continuation skill at
            // shallow depth rather than drift accumulated on approach.
            let mut anchors = vec![start, start + CONTROL_HZ];
            anchors.dedup();
            for anchor in anchors {
                let anchor = anchor.clamp(CONTROL_HZ - 1, max_anchor);
                let trace = model.closed_loop_rollout(
                    episode,
                    anchor,
                    eval.rollout_horizon_s,
                    &RolloutOptions::default(),
                )?;
                let pred = integrate_actions(episode, anchor, &trace.all_actions());
                for (j, &(px, py)) in pred.iter().enumerate() {
                    let t = anchor + 1 + j;
                    if t >= episode.n_steps() {
                        break;
                    }
                    let in_event = crate::world::event_segments(episode)
                        .iter()
                        .any(|&(s, end, _)| t >= s && t < end);
                    if in_event {
                        let (gx, gy) = episode.positions[t];
                        event_sum += ((px - gx).powi(2) + (py - gy).powi(2)).sqrt();
                        event_n += 1;
                    }
                }
            }
        }
        // Extended-stride observation probe (arms whose window allows it).
        if model.config.max_window_chunks > eval.far_horizon {
            let far = CurriculumStage {
                horizon: eval.far_horizon,
                stride_s: eval.far_stride_s,
                train_steps: 1,
                sampler: SamplerKind::Uniform,
            };
            let span = far.horizon * far.stride_steps();
            for &anchor in &eval_anchor_grid(episode, span, eval.anchor_stride_steps * 2) {
                let sample = model.make_sample(episode, anchor, &far, "far")?;
                let out =
                    model.forward(&sample.chunks, far.stride_s, crate::model::MaskMode::BlockSparse)?;
                // Error of the deepest transition only.
                let last = far.horizon - 1;
                let target = &sample.targets.obs[last];
                let mut err = 0.0;
                for (v, t_view) in target.per_view.iter().enumerate() {
                    let p_view = &out.obs[last][v];
                    let sq: f64 = p_view
                        .iter()
                        .zip(t_view)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    err += sq.sqrt();
                }
                far_sum += err / target.per_view.len() as f64;
                far_n += 1;
            }
        }
    }
    let n = n_traj.max(1) as f64;
    Ok(MetricsRow {
        arm: String::new(),
        seed: 0,
        ade_lat: ade_acc.lat_ade / n,
        ade_long: ade_acc.long_ade / n,
        fde_lat: ade_acc.lat_fde / n,
        fde_long: ade_acc.long_fde / n,
        rollout_err: rollout_sum / rollout_n.max(1) as f64,
        event_err: event_sum / event_n.max(1) as f64,
        far_obs_err: if far_n > 0 {
            far_sum / far_n as f64
        } else {
            f64::NAN
        },
        final_train_loss: f64::NAN,
    })
}

/// Paired drift curves with a rollout option toggled; used by the
/// sink/augmentation comparisons.
pub fn paired_toggle_csv(
    model: &Model,
    episode: &Episode,
    anchor: usize,
    horizon_s: f64,
    base: &RolloutOptions,
    toggled: &RolloutOptions,
    label_a: &str,
    label_b: &str,
) -> Result<String> {
    let curve = |opts: &RolloutOptions| -> Result<Vec<(usize, f64)>> {
        let trace = model.closed_loop_rollout(episode, anchor, horizon_s, opts)?;
        let (steps, latents) = trace.per_step_latents();
        Ok(rollout_drift(&steps, &latents, episode)?.per_step)
    };
    let a = curve(base)?;
    let b = curve(toggled)?;
    let mut out = format!("step,{label_a},{label_b}\n");
    for (&(s, ea), &(_, eb)) in a.iter().zip(&b) {
        out.push_str(&format!("{s},{ea:.9},{eb:.9}\n"));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Run orchestration and persistence
// ---------------------------------------------------------------------------

fn metrics_csv_header() -> String {
    format!("arm,seed,{}\n", METRIC_COLUMNS.join(","))
}

fn row_to_csv(row: &MetricsRow) -> String {
    let vals: Vec<String> = row.values().iter().map(|v| format!("{v:.9}")).collect();
    format!("{},{},{}\n", row.arm, row.seed, vals.join(","))
}

pub fn result_table_csv(table: &ResultTable) -> String {
    let mut out = metrics_csv_header();
    for row in &table.rows {
        out.push_str(&row_to_csv(row));
    }
    out
}

pub fn median_table_csv(table: &ResultTable) -> String {
    let mut out = format!("arm,{}\n", METRIC_COLUMNS.join(","));
    for m in &table.medians {
        let vals: Vec<String> = m.values.iter().map(|v| format!("{v:.9}")).collect();
        out.push_str(&format!("{},{}\n", m.arm, vals.join(",")));
    }
    out
}

/// Gradient sanity gate: finite-difference check on a reduced model before
/// any arm trains. Aborts the run with diagnostics when it fails.
pub fn gradient_sanity_check(plan: &ExperimentPlan) -> Result<f64> {
    let cfg = ModelConfig {
        d_model: 8,
        n_layers: plan.model.n_layers.min(2),
        n_heads: 2,
        ff_dim: 8,
        max_window_chunks: 3,
        latent_dim: 4,
        layout: crate::layout::LayoutConfig {
            system_prompt_len: 2,
            text_len_per_chunk: 1,
            obs_frames_per_chunk: CONTROL_HZ,
            tokens_per_frame_per_view: 2,
            n_views: 1,
            action_len_per_chunk: 2,
            query_len_per_chunk: 2,
            block_size: 2,
        },
        mask: plan.model.mask,
        max_stride_s: plan.model.max_stride_s,
        action_dim: plan.model.action_dim,
        seed: 5,
    };
    let model = Model::init(&cfg)?;
    let world = WorldConfig {
        episode_len_s: 15,
        n_views: 1,
        latent_dim: 4,
        frame_dim: 8,
        event_script: vec![],
        ..plan.world.clone()
    };
    let ep = generate_episode(5, &world)?;
    let stage = CurriculumStage {
        horizon: 2,
        stride_s: 1,
        train_steps: 1,
        sampler: SamplerKind::Uniform,
    };
    let sample = model.make_sample(&ep, 6, &stage, "sanity")?;
    let weights = plan.train.loss_weights;
    let analytic = model.loss_gradient(&sample, &weights)?;
    let flat = model.flat_params();
    let mut eval_model = Model::init(&cfg)?;
    let f = move |p: &[f64]| {
        eval_model.set_flat_params(p)?;
        Ok(eval_model.eval_losses(&sample, &weights)?.total)
    };
    let err = crate::objectives::finite_diff_check(f, &flat, &analytic, 1e-5)?;
    if err > 1e-4 {
        return Err(Error::numeric(format!(
            "gradient sanity check failed: max relative error {err:.3e} > 1e-4"
        )));
    }
    Ok(err)
}

/// Trains and evaluates every (arm, seed) replica, skipping completed ones,
/// and writes the merged tables. `force` clears previous outputs first.
pub fn run_ablation(plan: &ExperimentPlan, out_dir: &Path, force: bool) -> Result<ResultTable> {
    plan.validate()?;
    let fingerprint = plan.fingerprint();
    let plan_path = out_dir.join("plan.json");
    if plan_path.exists() {
        let existing: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&plan_path)?)
                .map_err(|e| Error::format(format!("bad plan.json: {e}")))?;
        let old_fp = existing["fingerprint"].as_str().unwrap_or_default();
        if old_fp != fingerprint && !force {
            return Err(Error::config(format!(
                "output dir holds a different plan (fingerprint {old_fp}); use --force to overwrite"
            )));
        }
        if old_fp == fingerprint && out_dir.join("merged.csv").exists() && !force {
            return Err(Error::config(
                "run already complete with this fingerprint; use --force to rerun",
            ));
        }
        if force {
            std::fs::remove_dir_all(out_dir)?;
        }
    }
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        &plan_path,
        serde_json::to_string_pretty(&serde_json::json!({
            "fingerprint": fingerprint,
            "code_version": CODE_VERSION,
            "plan": plan,
        }))
        .expect("plan serializes"),
    )?;

    let sanity_err = gradient_sanity_check(plan)?;
    let episodes = Arc::new(eval_episodes(plan)?);

    // Every (arm, seed) replica is an independent job.
    let jobs: Vec<(ArmSpec, u64)> = plan
        .arms
        .iter()
        .flat_map(|arm| plan.world_seeds.iter().map(move |&s| (arm.clone(), s)))
        .collect();
    let rows: Vec<MetricsRow> = jobs
        .par_iter()
        .map(|(arm, seed)| -> Result<MetricsRow> {
            let replica_dir = out_dir.join(&arm.name).join(format!("seed{seed}"));
            let row_path = replica_dir.join("metrics_row.json");
            if row_path.exists() {
                let row: MetricsRow =
                    serde_json::from_str(&std::fs::read_to_string(&row_path)?)
                        .map_err(|e| Error::format(format!("bad metrics row: {e}")))?;
                return Ok(row);
            }
            let (model, history) =
                train_replica(plan, arm, *seed, &replica_dir.join("checkpoints")).map_err(
                    |e| Error::domain(format!("arm '{}' seed {seed}: {e}", arm.name)),
                )?;
            std::fs::write(replica_dir.join("loss_curve.csv"), history.to_csv())?;
            let mut row = evaluate_replica(&model, &episodes, &plan.eval)
                .map_err(|e| Error::domain(format!("arm '{}' seed {seed} eval: {e}", arm.name)))?;
            row.arm = arm.name.clone();
            row.seed = *seed;
            row.final_train_loss = history
                .losses
                .iter()
                .rev()
                .take(50)
                .sum::<f64>()
                / history.losses.len().min(50).max(1) as f64;
            // Drift curve of the first eval episode for plotting.
            let trace = model.closed_loop_rollout(
                &episodes[0],
                CONTROL_HZ - 1 + 8,
                plan.eval.rollout_horizon_s,
                &RolloutOptions::default(),
            )?;
            let (steps, latents) = trace.per_step_latents();
            let curve = rollout_drift(&steps, &latents, &episodes[0])?;
            std::fs::write(replica_dir.join("drift.csv"), curve.to_csv())?;
            std::fs::write(&row_path, serde_json::to_string_pretty(&row).unwrap())?;
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;

    // Merge: per-arm CSV plus medians.
    let mut by_arm: BTreeMap<String, Vec<&MetricsRow>> = BTreeMap::new();
    for row in &rows {
        by_arm.entry(row.arm.clone()).or_default().push(row);
    }
    let mut medians = Vec::new();
    for arm in &plan.arms {
        let group = by_arm
            .get(&arm.name)
            .ok_or_else(|| Error::domain(format!("no rows for arm '{}'", arm.name)))?;
        let mut arm_csv = metrics_csv_header();
        for row in group {
            arm_csv.push_str(&row_to_csv(row));
        }
        std::fs::write(out_dir.join(&arm.name).join("metrics.csv"), arm_csv)?;
        let values = (0..METRIC_COLUMNS.len())
            .map(|c| median_of(group.iter().map(|r| r.values()[c]).collect()))
            .collect();
        medians.push(MedianRow {
            arm: arm.name.clone(),
            values,
        });
    }
    let table = ResultTable {
        fingerprint,
        rows,
        medians,
    };
    std::fs::write(out_dir.join("metrics.csv"), result_table_csv(&table))?;
    std::fs::write(out_dir.join("merged.csv"), median_table_csv(&table))?;
    std::fs::write(
        out_dir.join("sanity.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "gradient_check_max_rel_err": sanity_err,
        }))
        .unwrap(),
    )?;
    Ok(table)
}

/// Loads a run's median table and eval protocol.
fn load_run(dir: &Path) -> Result<(String, EvalProtocol, Vec<MedianRow>)> {
    let plan_json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("plan.json"))?)
            .map_err(|e| Error::format(format!("bad plan.json in {}: {e}", dir.display())))?;
    let eval: EvalProtocol = serde_json::from_value(plan_json["plan"]["eval"].clone())
        .map_err(|e| Error::format(format!("bad eval protocol: {e}")))?;
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    let csv = std::fs::read_to_string(dir.join("merged.csv"))?;
    let mut lines = csv.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format("empty merged.csv"))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() != METRIC_COLUMNS.len() + 1 || cols[0] != "arm" {
        return Err(Error::format(format!(
            "merged.csv in {} is missing expected metric columns",
            dir.display()
        )));
    }
    for (have, want) in cols[1..].iter().zip(METRIC_COLUMNS) {
        if *have != want {
            return Err(Error::format(format!(
                "metric column '{have}' does not match expected '{want}'"
            )));
        }
    }
    let mut rows = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != METRIC_COLUMNS.len() + 1 {
            return Err(Error::format(format!("short row in merged.csv: '{line}'")));
        }
        let values = fields[1..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::format(format!("bad value '{f}'")))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(MedianRow {
            arm: fields[0].to_string(),
            values,
        });
    }
    Ok((name, eval, rows))
}

/// Merges several runs' median tables and reports every row's metrics as
/// ratios to a chosen reference row. The reference may be `arm` (first
/// match) or `run:arm`.
pub fn compare(run_dirs: &[PathBuf], reference: &str) -> Result<String> {
    if run_dirs.is_empty() {
        return Err(Error::config("compare needs at least one run dir"));
    }
    let mut runs = Vec::new();
    for dir in run_dirs {
        runs.push(load_run(dir)?);
    }
    let proto = runs[0].1.clone();
    for (name, eval, _) in &runs {
        if *eval != proto {
            return Err(Error::config(format!(
                "run '{name}' uses a different eval protocol; comparison would be unsound"
            )));
        }
    }
    let mut labeled: Vec<(String, Vec<f64>)> = Vec::new();
    for (name, _, rows) in &runs {
        for row in rows {
            labeled.push((format!("{name}:{}", row.arm), row.values.clone()));
        }
    }
    let ref_row = labeled
        .iter()
        .find(|(label, _)| label == reference || label.ends_with(&format!(":{reference}")))
        .ok_or_else(|| Error::config(format!("reference '{reference}' not found")))?
        .clone();
    let mut out = String::from("row");
    for c in METRIC_COLUMNS {
        out.push_str(&format!(",{c},{c}_ratio"));
    }
    out.push('\n');
    for (label, values) in &labeled {
        out.push_str(label);
        for (v, r) in values.iter().zip(&ref_row.1) {
            let ratio = if *r != 0.0 && r.is_finite() && v.is_finite() {
                v / r
            } else {
                f64::NAN
            };
            out.push_str(&format!(",{v:.9},{ratio:.6}"));
        }
        out.push('\n');
    }
    Ok(out)
}
