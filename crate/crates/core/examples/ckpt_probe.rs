//! Loads trained checkpoints from a probe run and reports teacher-forced
//! stride-1 per-target observation errors on event vs cruise chunks, per
//! arm and seed.

use foresight_core::curriculum::{CurriculumStage, SamplerKind};
use foresight_core::model::{MaskMode, RolloutOptions};
use foresight_core::world::{event_segments, generate_episode, scripted_events_n, WorldConfig, CONTROL_HZ};

fn main() {
    let dir = std::env::args().nth(1).expect("usage: ckpt_probe <run_dir>");
    let plan_json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(format!("{dir}/plan.json")).unwrap())
            .unwrap();
    let world: WorldConfig =
        serde_json::from_value(plan_json["plan"]["world"].clone()).unwrap();
    let eval_episodes: Vec<_> = [101u64, 102]
        .iter()
        .map(|&s| {
            let cfg = WorldConfig {
                event_script: scripted_events_n(s.wrapping_mul(7919).wrapping_add(3), world.episode_len_s, 3),
                ..world.clone()
            };
            generate_episode(s.wrapping_mul(7919).wrapping_add(3), &cfg).unwrap()
        })
        .collect();
    let probe = CurriculumStage {
        horizon: 6,
        stride_s: 1,
        train_steps: 1,
        sampler: SamplerKind::Uniform,
    };
    for arm in ["chunk_h21_clef", "chunk_h21_clef_tis"] {
        for seed in 1..=5u64 {
            let path = format!("{dir}/{arm}/seed{seed}/checkpoints/stage3.fscp");
            if !std::path::Path::new(&path).exists() {
                continue;
            }
            let model = foresight_core::model::load_checkpoint(std::path::Path::new(&path)).unwrap();
            let (mut ev, mut evn, mut cr, mut crn) = (0.0, 0usize, 0.0, 0usize);
            for ep in &eval_episodes {
                let lo = CONTROL_HZ - 1;
                let hi = ep.n_steps() - 1 - probe.horizon * probe.stride_steps();
                for anchor in (lo..=hi).step_by(5) {
                    let sample = model.make_sample(ep, anchor, &probe, "p").unwrap();
                    let out = model.forward(&sample.chunks, 1, MaskMode::BlockSparse).unwrap();
                    for (i, t) in sample.targets.obs.iter().enumerate() {
                        let t_ref = anchor + (i + 1) * probe.stride_steps();
                        let near = event_segments(ep)
                            .iter()
                            .any(|&(s, e, _)| s.saturating_sub(4) < t_ref + 1 && e > t_ref.saturating_sub(3));
                        let mut err = 0.0;
                        for (v, tv) in t.per_view.iter().enumerate() {
                            let sq: f64 = out.obs[i][v]
                                .iter()
                                .zip(tv)
                                .map(|(a, b)| (a - b) * (a - b))
                                .sum();
                            err += sq.sqrt();
                        }
                        err /= t.per_view.len() as f64;
                        if near {
                            ev += err;
                            evn += 1;
                        } else {
                            cr += err;
                            crn += 1;
                        }
                    }
                }
            }
            // Teacher-forced immediate-action error (transition 0, 4
            // steps) with the anchor in-event vs cruising.
            let s1 = CurriculumStage { horizon: 1, stride_s: 1, train_steps: 1, sampler: SamplerKind::Uniform };
            let (mut a_ev, mut a_evn, mut a_cr, mut a_crn) = (0.0, 0usize, 0.0, 0usize);
            for ep in &eval_episodes {
                let hi = ep.n_steps() - 1 - 4;
                for anchor in (3..=hi).step_by(2) {
                    let sample = model.make_sample(ep, anchor, &s1, "a").unwrap();
                    let out = model.forward(&sample.chunks, 1, MaskMode::BlockSparse).unwrap();
                    let mut err = 0.0;
                    for (j, t) in sample.targets.actions.iter().enumerate() {
                        err += (out.actions[j][0] - t.action[0]).abs()
                            + (out.actions[j][1] - t.action[1]).abs();
                    }
                    err /= 4.0;
                    let in_ev = event_segments(ep)
                        .iter()
                        .any(|&(st, en, _)| anchor + 4 > st && anchor < en + 2);
                    if in_ev {
                        a_ev += err;
                        a_evn += 1;
                    } else {
                        a_cr += err;
                        a_crn += 1;
                    }
                }
            }
            println!(
                "{arm} seed{seed}: tf act event {:.4} (n={a_evn}) cruise {:.4} (n={a_crn})",
                a_ev / a_evn.max(1) as f64,
                a_cr / a_crn.max(1) as f64
            );
            // Event-anchored rollouts: in-event latent error and in-event
            // action (acceleration) error.
            let (mut lat, mut act, mut n_ev) = (0.0, 0.0, 0usize);
            for ep in &eval_episodes {
                let max_anchor = ep.n_steps() - 1 - 24;
                for (start, _, _) in event_segments(ep) {
                    for anchor in [start, start + CONTROL_HZ] {
                        let anchor = anchor.clamp(3, max_anchor);
                        let trace = model
                            .closed_loop_rollout(ep, anchor, 6.0, &RolloutOptions::default())
                            .unwrap();
                        let (steps, latents) = trace.per_step_latents();
                        let actions = trace.all_actions();
                        for ((&t, views), a) in steps.iter().zip(&latents).zip(&actions) {
                            let in_event = event_segments(ep)
                                .iter()
                                .any(|&(s, e, _)| t >= s && t < e);
                            if !in_event {
                                continue;
                            }
                            let mut err = 0.0;
                            for (v, z) in views.iter().enumerate() {
                                let sq: f64 = z
                                    .iter()
                                    .zip(&ep.obs_latents[t][v])
                                    .map(|(x, y)| (x - y) * (x - y))
                                    .sum();
                                err += sq.sqrt();
                            }
                            lat += err / views.len() as f64;
                            let da = (a[0] - ep.a_x[t]).abs() + (a[1] - ep.a_y[t]).abs();
                            act += da;
                            n_ev += 1;
                        }
                    }
                }
            }
            println!(
                "{arm} seed{seed}: s1 tf event {:.4} cruise {:.4} | roll-ev latent {:.4} action {:.4} (n={n_ev})",
                ev / evn.max(1) as f64,
                cr / crn.max(1) as f64,
                lat / n_ev.max(1) as f64,
                act / n_ev.max(1) as f64,
            );
        }
    }
}
