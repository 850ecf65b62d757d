//! Exploratory driver for the desk ablation: runs the full arm matrix at a
//! configurable budget and prints the median table plus the directional
//! margins. Used to size the acceptance configuration.

use std::time::Instant;

use foresight_core::curriculum::PlanId;
use foresight_core::experiment::{
    desk_arms, run_ablation, EvalProtocol, ExperimentPlan, TrainParams,
};
use foresight_core::layout::LayoutConfig;
use foresight_core::mask::MaskConfig;
use foresight_core::model::ModelConfig;
use foresight_core::world::WorldConfig;

fn main() {
    let budget: usize = std::env::var("PROBE_BUDGET")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(600);
    let seeds: u64 = std::env::var("PROBE_SEEDS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(3);
    let lr0: f64 = std::env::var("PROBE_LR")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0.02);
    let decay: f64 = std::env::var("PROBE_DECAY")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0.002);
    let tau: f64 = std::env::var("PROBE_TAU")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0.35);
    let ep_len: usize = std::env::var("PROBE_EPLEN")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(60);
    let train_eps: usize = std::env::var("PROBE_TRAINEPS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(3);
    let train_events: usize = std::env::var("PROBE_TRAINEVENTS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1);
    let batch: usize = std::env::var("PROBE_BATCH")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1);
    let threads: usize = std::env::var("PROBE_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(2);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .ok();

    let plan = ExperimentPlan {
        plan_id: "probe".into(),
        world: WorldConfig {
            episode_len_s: ep_len,
            n_views: 2,
            latent_dim: 8,
            frame_dim: 16,
            event_script: vec![],
            ..WorldConfig::default()
        },
        model: ModelConfig {
            d_model: std::env::var("PROBE_DMODEL").ok().and_then(|v| v.parse().ok()).unwrap_or(32),
            n_layers: 2,
            n_heads: 2,
            ff_dim: std::env::var("PROBE_FF").ok().and_then(|v| v.parse().ok()).unwrap_or(64),
            max_window_chunks: 7,
            max_stride_s: 3,
            action_dim: 2,
            latent_dim: 8,
            layout: LayoutConfig {
                system_prompt_len: 4,
                text_len_per_chunk: 1,
                obs_frames_per_chunk: 4,
                tokens_per_frame_per_view: 2,
                n_views: 2,
                action_len_per_chunk: 4,
                query_len_per_chunk: 4,
                block_size: 4,
            },
            mask: MaskConfig::default(),
            seed: 0,
        },
        train: {
            let mut t = TrainParams {
                lr0,
                lr_decay: decay,
                train_events_per_episode: train_events,
                batch_size: batch,
                ..TrainParams::default()
            };
            t.importance.tau = tau;
            t
        },
        eval: EvalProtocol::default(),
        world_seeds: (1..=seeds).collect(),
        train_episodes_per_seed: train_eps,
        eval_seeds: vec![101, 102],
        arms: desk_arms(&PlanId::ALL, budget).unwrap(),
    };

    let dir = std::env::temp_dir().join(format!(
        "foresight_probe_{budget}_{seeds}_{lr0}_{decay}_{tau}_{ep_len}_{train_eps}_{train_events}_{batch}"
    ));
    let _ = std::fs::remove_dir_all(&dir);
    let t0 = Instant::now();
    let table = run_ablation(&plan, &dir, false).unwrap();
    let wall = t0.elapsed().as_secs_f64();

    println!("budget={budget} seeds={seeds} lr0={lr0} wall={wall:.1}s");
    println!("{}", foresight_core::experiment::median_table_csv(&table));

    let get = |arm: &str, col: &str| -> f64 {
        let idx = foresight_core::experiment::METRIC_COLUMNS
            .iter()
            .position(|c| *c == col)
            .unwrap();
        table
            .medians
            .iter()
            .find(|m| m.arm == arm)
            .map(|m| m.values[idx])
            .unwrap_or(f64::NAN)
    };
    let margin = |worse: f64, better: f64| (worse - better) / worse * 100.0;
    let a = (get("framewise_h1", "rollout_err"), get("chunk_h21_cl", "rollout_err"));
    let b = (get("chunk_h21_cl", "far_obs_err"), get("chunk_h21_clef", "far_obs_err"));
    let c = (
        get("chunk_h21_clef", "event_err"),
        get("chunk_h21_clef_tis", "event_err"),
    );
    println!(
        "(a) rollout: h1={:.4} h6={:.4} margin={:+.1}%",
        a.0,
        a.1,
        margin(a.0, a.1)
    );
    println!(
        "(b) far obs: cl={:.4} clef={:.4} margin={:+.1}%",
        b.0,
        b.1,
        margin(b.0, b.1)
    );
    println!(
        "(c) event err: clef={:.4} tis={:.4} margin={:+.1}%",
        c.0,
        c.1,
        margin(c.0, c.1)
    );
}
