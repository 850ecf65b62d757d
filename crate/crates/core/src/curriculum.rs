//! Horizon/stride curriculum schedules and supervision-target assignment.
//!
//! CL plans grow the chunk horizon at a fixed 1 s inter-chunk stride; CLEF
//! plans additionally widen the stride to 3 s in the final stage; TIS plans
//! switch the step sampler in the final stage. Observation and BEV targets
//! follow the stride; action targets always stay at the dense 4 Hz control
//! cadence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{Episode, CONTROL_HZ};

pub const CHUNK_DURATION_S: usize = 1;

/// Which anchor sampler a stage trains with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplerKind {
    Uniform,
    Tis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumStage {
    /// Foresight horizon: future chunks supervised per sample.
    pub horizon: usize,
    /// Inter-chunk stride in whole seconds.
    pub stride_s: usize,
    pub train_steps: usize,
    pub sampler: SamplerKind,
}

impl CurriculumStage {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::config("horizon must be >= 1 chunk"));
        }
        if self.stride_s < CHUNK_DURATION_S {
            return Err(Error::config(format!(
                "stride must be >= the {CHUNK_DURATION_S} s chunk duration"
            )));
        }
        if self.train_steps == 0 {
            return Err(Error::config("train_steps must be >= 1"));
        }
        Ok(())
    }

    pub fn stride_steps(&self) -> usize {
        self.stride_s * CONTROL_HZ
    }
}

/// The named training plans of the ablation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PlanId {
    FramewiseH1,
    ChunkH6,
    ChunkH21Cl,
    ChunkH21Clef,
    ChunkH21ClefTis,
}

impl PlanId {
    pub const ALL: [PlanId; 5] = [
        PlanId::FramewiseH1,
        PlanId::ChunkH6,
        PlanId::ChunkH21Cl,
        PlanId::ChunkH21Clef,
        PlanId::ChunkH21ClefTis,
    ];

    pub fn parse(s: &str) -> Result<PlanId> {
        match s {
            "framewise_h1" => Ok(PlanId::FramewiseH1),
            "chunk_h6" => Ok(PlanId::ChunkH6),
            "chunk_h21_cl" => Ok(PlanId::ChunkH21Cl),
            "chunk_h21_clef" => Ok(PlanId::ChunkH21Clef),
            "chunk_h21_clef_tis" => Ok(PlanId::ChunkH21ClefTis),
            _ => Err(Error::config(format!("unknown plan id '{s}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PlanId::FramewiseH1 => "framewise_h1",
            PlanId::ChunkH6 => "chunk_h6",
            PlanId::ChunkH21Cl => "chunk_h21_cl",
            PlanId::ChunkH21Clef => "chunk_h21_clef",
            PlanId::ChunkH21ClefTis => "chunk_h21_clef_tis",
        }
    }
}

/// Per-stage step budgets used when none are supplied.
pub const DEFAULT_STAGE_STEPS: [usize; 4] = [2000, 4000, 4000, 4000];

/// Short-to-long schedule of a plan at full (paper-protocol) horizons. Step
/// counts come from `steps`, cycled positionally; missing entries reuse the
/// last value.
pub fn stage_schedule_with(plan: PlanId, steps: &[usize]) -> Result<Vec<CurriculumStage>> {
    if steps.is_empty() {
        return Err(Error::config("stage step list must be nonempty"));
    }
    let shape: Vec<(usize, usize, SamplerKind)> = match plan {
        PlanId::FramewiseH1 => vec![(1, 1, SamplerKind::Uniform)],
        PlanId::ChunkH6 => vec![(1, 1, SamplerKind::Uniform), (6, 1, SamplerKind::Uniform)],
        PlanId::ChunkH21Cl => vec![
            (1, 1, SamplerKind::Uniform),
            (6, 1, SamplerKind::Uniform),
            (21, 1, SamplerKind::Uniform),
        ],
        PlanId::ChunkH21Clef => vec![
            (1, 1, SamplerKind::Uniform),
            (6, 1, SamplerKind::Uniform),
            (21, 1, SamplerKind::Uniform),
            (21, 3, SamplerKind::Uniform),
        ],
        PlanId::ChunkH21ClefTis => vec![
            (1, 1, SamplerKind::Uniform),
            (6, 1, SamplerKind::Uniform),
            (21, 1, SamplerKind::Uniform),
            (21, 3, SamplerKind::Tis),
        ],
    };
    let stages: Vec<CurriculumStage> = shape
        .into_iter()
        .enumerate()
        .map(|(i, (horizon, stride_s, sampler))| CurriculumStage {
            horizon,
            stride_s,
            train_steps: *steps.get(i).unwrap_or(steps.last().unwrap()),
            sampler,
        })
        .collect();
    for s in &stages {
        s.validate()?;
    }
    Ok(stages)
}

pub fn stage_schedule(plan: PlanId) -> Vec<CurriculumStage> {
    stage_schedule_with(plan, &DEFAULT_STAGE_STEPS).expect("default schedule is valid")
}

/// One supervised observation target: the chunk's per-view latent
/// concatenation over its frames, referenced at the chunk's end time.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsTarget {
    /// 1-based future chunk index within the sample.
    pub chunk_index: usize,
    pub time_s: f64,
    /// Per view: latents of the chunk's frames, concatenated frame-major.
    pub per_view: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionTarget {
    pub time_s: f64,
    /// (a_x, a_y) at the control step.
    pub action: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BevTarget {
    pub chunk_index: usize,
    pub latent: Vec<f64>,
}

/// Asymmetric target set of one training sample: strided observations and
/// BEV, dense actions.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionTargets {
    pub obs: Vec<ObsTarget>,
    pub actions: Vec<ActionTarget>,
    pub bev: Vec<BevTarget>,
}

/// Number of frames one chunk carries (1 s at the control cadence).
pub fn frames_per_chunk() -> usize {
    CHUNK_DURATION_S * CONTROL_HZ
}

/// Targets for a sample anchored at `anchor_step`: observation/BEV targets
/// at `anchor + i * stride` for `i = 1..=H`, action targets at every control
/// step through `anchor + H * stride`.
pub fn assign_targets(
    episode: &Episode,
    anchor_step: usize,
    stage: &CurriculumStage,
) -> Result<SupervisionTargets> {
    stage.validate()?;
    let stride = stage.stride_steps();
    let last_needed = anchor_step + stage.horizon * stride;
    let t_len = episode.n_steps();
    if last_needed >= t_len {
        return Err(Error::domain(format!(
            "episode too short: targets need step {last_needed} but the episode ends at step {} \
             ({} more steps required)",
            t_len - 1,
            last_needed + 1 - t_len
        )));
    }
    let frames = frames_per_chunk();
    let mut obs = Vec::with_capacity(stage.horizon);
    let mut bev = Vec::with_capacity(stage.horizon);
    for i in 1..=stage.horizon {
        let t_ref = anchor_step + i * stride;
        let mut per_view = Vec::with_capacity(episode.config.n_views);
        for v in 0..episode.config.n_views {
            let mut concat = Vec::with_capacity(frames * episode.config.latent_dim);
            for f in 0..frames {
                let step = t_ref + 1 + f - frames;
                concat.extend_from_slice(&episode.obs_latents[step][v]);
            }
            per_view.push(concat);
        }
        obs.push(ObsTarget {
            chunk_index: i,
            time_s: episode.time_of_step(t_ref),
            per_view,
        });
        bev.push(BevTarget {
            chunk_index: i,
            latent: episode.bev_latents[t_ref].clone(),
        });
    }
    let actions = (1..=stage.horizon * stride)
        .map(|j| {
            let step = anchor_step + j;
            ActionTarget {
                time_s: episode.time_of_step(step),
                action: vec![episode.a_x[step], episode.a_y[step]],
            }
        })
        .collect();
    Ok(SupervisionTargets { obs, actions, bev })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_episode, WorldConfig, CONTROL_DT};

    fn episode(len_s: usize) -> Episode {
        generate_episode(
            1,
            &WorldConfig {
                episode_len_s: len_s,
                ..WorldConfig::default()
            },
        )
        .unwrap()
    }

    fn stage(h: usize, s: usize) -> CurriculumStage {
        CurriculumStage {
            horizon: h,
            stride_s: s,
            train_steps: 100,
            sampler: SamplerKind::Uniform,
        }
    }

    #[test]
    fn plan_shapes_follow_the_protocol() {
        let clef = stage_schedule(PlanId::ChunkH21Clef);
        let hs: Vec<_> = clef.iter().map(|s| (s.horizon, s.stride_s)).collect();
        assert_eq!(hs, vec![(1, 1), (6, 1), (21, 1), (21, 3)]);
        assert_eq!(
            clef.iter().map(|s| s.train_steps).collect::<Vec<_>>(),
            DEFAULT_STAGE_STEPS.to_vec()
        );

        assert_eq!(stage_schedule(PlanId::FramewiseH1).len(), 1);
        assert_eq!(stage_schedule(PlanId::FramewiseH1)[0].horizon, 1);

        // CL holds stride at 1 s while growing H.
        let cl = stage_schedule(PlanId::ChunkH21Cl);
        assert!(cl.iter().all(|s| s.stride_s == 1));
        assert_eq!(cl.last().unwrap().horizon, 21);

        // TIS differs from CLEF only in the final stage's sampler.
        let tis = stage_schedule(PlanId::ChunkH21ClefTis);
        assert_eq!(tis.len(), clef.len());
        for (a, b) in tis.iter().zip(&clef).take(clef.len() - 1) {
            assert_eq!(a, b);
        }
        let (last_t, last_c) = (tis.last().unwrap(), clef.last().unwrap());
        assert_eq!(
            (last_t.horizon, last_t.stride_s, last_t.train_steps),
            (last_c.horizon, last_c.stride_s, last_c.train_steps)
        );
        assert_eq!(last_t.sampler, SamplerKind::Tis);
        assert_eq!(last_c.sampler, SamplerKind::Uniform);
    }

    #[test]
    fn unknown_plan_errors() {
        assert!(PlanId::parse("chunk_h99").is_err());
        assert_eq!(PlanId::parse("chunk_h21_clef").unwrap(), PlanId::ChunkH21Clef);
    }

    #[test]
    fn schedules_are_monotone_in_horizon_and_stride() {
        for plan in PlanId::ALL {
            let stages = stage_schedule(plan);
            for w in stages.windows(2) {
                assert!(w[1].horizon >= w[0].horizon);
                assert!(w[1].stride_s >= w[0].stride_s);
            }
        }
    }

    #[test]
    fn target_times_match_the_arithmetic() {
        let ep = episode(20);
        let t = assign_targets(&ep, 0, &stage(3, 1)).unwrap();
        let obs_times: Vec<f64> = t.obs.iter().map(|o| o.time_s).collect();
        assert_eq!(obs_times, vec![1.0, 2.0, 3.0]);
        let action_times: Vec<f64> = t.actions.iter().map(|a| a.time_s).collect();
        let expect: Vec<f64> = (1..=12).map(|j| j as f64 * CONTROL_DT).collect();
        assert_eq!(action_times, expect);
        assert_eq!(t.bev.len(), 3);
    }

    #[test]
    fn extended_stride_keeps_actions_dense() {
        let ep = episode(20);
        let t = assign_targets(&ep, 0, &stage(2, 3)).unwrap();
        let obs_times: Vec<f64> = t.obs.iter().map(|o| o.time_s).collect();
        assert_eq!(obs_times, vec![3.0, 6.0]);
        assert_eq!(t.actions.len(), 24);
        assert_eq!(t.actions[0].time_s, 0.25);
        assert_eq!(t.actions.last().unwrap().time_s, 6.0);
        // Asymmetry: obs spacing follows the stride, action spacing stays
        // at the control cadence.
        for w in t.obs.windows(2) {
            assert_eq!(w[1].time_s - w[0].time_s, 3.0);
        }
        for w in t.actions.windows(2) {
            assert!((w[1].time_s - w[0].time_s - CONTROL_DT).abs() < 1e-12);
        }
    }

    #[test]
    fn boundary_anchor_and_truncation() {
        let ep = episode(10);
        let last_anchor = ep.n_steps() - 1 - CONTROL_HZ;
        let t = assign_targets(&ep, last_anchor, &stage(1, 1)).unwrap();
        assert_eq!(t.obs.len(), 1);
        let err = assign_targets(&ep, last_anchor + 1, &stage(1, 1)).unwrap_err();
        assert!(err.to_string().contains("1 more step"));
    }

    #[test]
    fn obs_targets_concatenate_the_chunk_frames() {
        let ep = episode(12);
        let t = assign_targets(&ep, 4, &stage(1, 2)).unwrap();
        let target_step = 4 + 2 * CONTROL_HZ;
        let d = ep.config.latent_dim;
        for v in 0..ep.config.n_views {
            let got = &t.obs[0].per_view[v];
            assert_eq!(got.len(), frames_per_chunk() * d);
            for f in 0..frames_per_chunk() {
                let step = target_step + 1 + f - frames_per_chunk();
                assert_eq!(&got[f * d..(f + 1) * d], ep.obs_latents[step][v].as_slice());
            }
        }
        assert_eq!(t.bev[0].latent, ep.bev_latents[target_step]);
    }

    #[test]
    fn stage_validation_errors() {
        assert!(stage(0, 1).validate().is_err());
        assert!(stage(1, 0).validate().is_err());
        assert!(CurriculumStage {
            train_steps: 0,
            ..stage(1, 1)
        }
        .validate()
        .is_err());
    }
}
