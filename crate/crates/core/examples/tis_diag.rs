//! Diagnostic for the importance-sampling arm: trains the shared curriculum
//! prefix once, forks the final stage into uniform vs TIS, and reports
//! where the two forks differ — anchor event exposure, teacher-forced
//! stride-3 observation error on event vs cruise windows, and
//! event-anchored stride-1 rollout error.

use foresight_core::curriculum::{CurriculumStage, SamplerKind};
use foresight_core::experiment::*;
use foresight_core::model::{Model, ModelConfig, RolloutOptions};
use foresight_core::world::{event_segments, generate_episode, scripted_events_n, WorldConfig, CONTROL_HZ};

fn env_usize(k: &str, d: usize) -> usize {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}
fn env_f64(k: &str, d: f64) -> f64 {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}

fn main() {
    let budget = env_usize("DIAG_BUDGET", 2400);
    let tau = env_f64("DIAG_TAU", 0.5);
    let train_eps = env_usize("DIAG_TRAINEPS", 6);
    let train_events = env_usize("DIAG_TRAINEVENTS", 2);
    let seed = env_usize("DIAG_SEED", 1) as u64;

    let mut plan = foresight_core::acceptance::acceptance_plan(budget, 1);
    plan.train.lr_decay = env_f64("DIAG_DECAY", 0.01);
    plan.train.importance.tau = tau;
    plan.train.train_events_per_episode = train_events;
    if std::env::var("DIAG_WIDE").is_ok() {
        plan.train.importance.windows = [
            foresight_core::sampler::WindowSpec::new(0, 16),
            foresight_core::sampler::WindowSpec::new(16, 48),
            foresight_core::sampler::WindowSpec::new(-8, 0),
        ];
    }
    plan.train_episodes_per_seed = train_eps;

    // Train the shared prefix (stages of the CLEF plan except the last).
    let clef_arm = plan
        .arms
        .iter()
        .find(|a| a.name == "chunk_h21_clef")
        .unwrap()
        .clone();
    let train_episodes: Vec<_> = (0..train_eps)
        .map(|i| {
            let s = seed.wrapping_mul(1009).wrapping_add(i as u64);
            let cfg = WorldConfig {
                event_script: scripted_events_n(s, plan.world.episode_len_s, train_events),
                ..plan.world.clone()
            };
            generate_episode(s, &cfg).unwrap()
        })
        .collect();
    let eval_episodes: Vec<_> = [101u64, 102]
        .iter()
        .map(|&s| {
            let cfg = WorldConfig {
                event_script: scripted_events_n(
                    s.wrapping_mul(7919).wrapping_add(3),
                    plan.world.episode_len_s,
                    3,
                ),
                ..plan.world.clone()
            };
            generate_episode(s.wrapping_mul(7919).wrapping_add(3), &cfg).unwrap()
        })
        .collect();

    let mut model = Model::init(&ModelConfig {
        seed,
        ..plan.model.clone()
    })
    .unwrap();
    let mut global_step = 0usize;
    let prefix: Vec<CurriculumStage> = clef_arm.stages[..clef_arm.stages.len() - 1].to_vec();
    use rand::SeedableRng;
    for (si, stage) in prefix.iter().enumerate() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ (si as u64) << 32);
        for step in 0..stage.train_steps {
            let ep = &train_episodes[step % train_episodes.len()];
            let lo = CONTROL_HZ - 1;
            let hi = ep.n_steps() - 1 - stage.horizon * stage.stride_steps();
            let anchor = lo + foresight_core::sampler::uniform_baseline(hi - lo + 1, 1, &mut rng)
                .unwrap()[0];
            let sample = model.make_sample(ep, anchor, stage, "p").unwrap();
            let lr = plan.train.lr0 / (1.0 + plan.train.lr_decay * global_step as f64);
            model.train_step(&[sample], &plan.train.loss_weights, lr).unwrap();
            global_step += 1;
        }
    }

    // Fork.
    let final_stage = *clef_arm.stages.last().unwrap();
    let in_window = |ep: &foresight_core::world::Episode, k: usize| {
        event_segments(ep).iter().any(|&(s, e, _)| {
            let lo = k.saturating_sub(4);
            let hi = k + 12;
            s < hi && e > lo
        })
    };
    for sampler in [SamplerKind::Uniform, SamplerKind::Tis] {
        let mut fork = foresight_core::model::checkpoint_from_bytes(&foresight_core::model::checkpoint_bytes(&model)).unwrap();
        let stage = CurriculumStage {
            sampler,
            ..final_stage
        };
        let mut exposure = 0usize;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xF0F0);
        let mut gstep = global_step;
        let mut queues: Vec<Vec<usize>> = vec![Vec::new(); train_episodes.len()];
        for step in 0..stage.train_steps {
            let ei = step % train_episodes.len();
            let ep = &train_episodes[ei];
            if queues[ei].is_empty() {
                queues[ei] = draw_chain_for_diag(ep, &stage, &plan.train, 16, &mut rng)
                    .into_iter()
                    .rev()
                    .collect();
            }
            let anchor = queues[ei].pop().unwrap();
            if in_window(ep, anchor) {
                exposure += 1;
            }
            let sample = fork.make_sample(ep, anchor, &stage, "f").unwrap();
            let lr = plan.train.lr0 / (1.0 + plan.train.lr_decay * gstep as f64);
            fork.train_step(&[sample], &plan.train.loss_weights, lr).unwrap();
            gstep += 1;
        }

        // Teacher-forced per-target obs error on eval episodes, split by
        // whether the individual target chunk touches an event or its
        // 4 s approach ramp; measured at both training stride 3 and
        // rollout stride 1.
        let mut stats = Vec::new();
        for stride_probe in [3usize, 1] {
            let probe = CurriculumStage {
                stride_s: stride_probe,
                ..stage
            };
            let (mut ev_err, mut ev_n, mut cr_err, mut cr_n) = (0.0, 0usize, 0.0, 0usize);
            for ep in &eval_episodes {
                let lo = CONTROL_HZ - 1;
                let hi = ep.n_steps() - 1 - probe.horizon * probe.stride_steps();
                for anchor in (lo..=hi).step_by(6) {
                    let sample = fork.make_sample(ep, anchor, &probe, "e").unwrap();
                    let out = fork
                        .forward(&sample.chunks, probe.stride_s, foresight_core::model::MaskMode::BlockSparse)
                        .unwrap();
                    for (i, obs_t) in sample.targets.obs.iter().enumerate() {
                        let t_ref = anchor + (i + 1) * probe.stride_steps();
                        let chunk_lo = t_ref.saturating_sub(3);
                        let near_event = event_segments(ep).iter().any(|&(s, e, _)| {
                            s.saturating_sub(16) < t_ref + 1 && e > chunk_lo
                        });
                        let mut err = 0.0;
                        for (v, tv) in obs_t.per_view.iter().enumerate() {
                            let pv = &out.obs[i][v];
                            let sq: f64 =
                                pv.iter().zip(tv).map(|(a, b)| (a - b) * (a - b)).sum();
                            err += sq.sqrt();
                        }
                        err /= obs_t.per_view.len() as f64;
                        if near_event {
                            ev_err += err;
                            ev_n += 1;
                        } else {
                            cr_err += err;
                            cr_n += 1;
                        }
                    }
                }
            }
            stats.push(format!(
                "s{stride_probe}: event-tgt {:.4} (n={ev_n}) cruise-tgt {:.4} (n={cr_n})",
                ev_err / ev_n.max(1) as f64,
                cr_err / cr_n.max(1) as f64
            ));
        }
        let (ev_err, ev_n, cr_err, cr_n) = (0.0f64, 0usize, 0.0f64, 0usize);
        let _ = (ev_err, ev_n, cr_err, cr_n);

        // Event-anchored stride-1 rollouts.
        let (mut roll_ev, mut roll_ev_n) = (0.0, 0usize);
        for ep in &eval_episodes {
            let max_anchor = ep.n_steps() - 1 - 24;
            for (start, _, _) in event_segments(ep) {
                for anchor in [start.saturating_sub(4), start] {
                    let anchor = anchor.clamp(3, max_anchor);
                    let trace = fork
                        .closed_loop_rollout(ep, anchor, 6.0, &RolloutOptions::default())
                        .unwrap();
                    let (steps, latents) = trace.per_step_latents();
                    let curve = foresight_core::metrics::rollout_drift(&steps, &latents, ep).unwrap();
                    for &(t, e) in &curve.per_step {
                        if event_segments(ep).iter().any(|&(s, en, _)| t >= s && t < en) {
                            roll_ev += e;
                            roll_ev_n += 1;
                        }
                    }
                }
            }
        }
        println!(
            "{sampler:?}: exposure {}/{} ({:.0}%) | {} | event-anchored rollout {:.4} (n={roll_ev_n})",
            exposure,
            stage.train_steps,
            100.0 * exposure as f64 / stage.train_steps as f64,
            stats.join(" | "),
            roll_ev / roll_ev_n.max(1) as f64,
        );
    }
}

fn draw_chain_for_diag(
    ep: &foresight_core::world::Episode,
    stage: &CurriculumStage,
    params: &TrainParams,
    n: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<usize> {
    let lo = CONTROL_HZ - 1;
    let hi = ep.n_steps() - 1 - stage.horizon * stage.stride_steps();
    let len = hi - lo + 1;
    match stage.sampler {
        SamplerKind::Uniform => foresight_core::sampler::uniform_baseline(len, n.min(len), rng)
            .unwrap()
            .into_iter()
            .map(|k| k + lo)
            .collect(),
        SamplerKind::Tis => {
            let w = foresight_core::sampler::importance_scores(&ep.a_x, &ep.a_y, &params.importance)
                .unwrap();
            let p_full =
                foresight_core::sampler::sampling_distribution(&w, params.importance.tau).unwrap();
            let slice = &p_full[lo..=hi];
            let mass: f64 = slice.iter().sum();
            let p: Vec<f64> = slice.iter().map(|v| v / mass).collect();
            foresight_core::sampler::sample_steps(&p, n.min(len), params.importance.max_gap, rng)
                .unwrap()
                .into_iter()
                .map(|k| k + lo)
                .collect()
        }
    }
}
