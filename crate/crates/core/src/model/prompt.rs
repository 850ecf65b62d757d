//! Prompt assembly: turns episode windows (or rollout context) into the
//! chunk-structured token features the model consumes, and precomputes the
//! per-chunk-count structural data (grid, masks, visibility, index lists)
//! shared by every sample of that shape.

use std::sync::Arc;

use crate::attention::token_visibility;
use crate::error::{Error, Result};
use crate::layout::{
    block_partition, build_prompt_layout, BlockGrid, ChunkId, LayoutConfig, SegmentKind,
};
use crate::mask::{build_mask, BlockMask, HeadGroup, MaskConfig};
use crate::mat::Mat;
use crate::world::{Episode, CONTROL_DT, CONTROL_HZ};

/// Feature widths per segment kind. TEXT carries a one-hot stride code.
pub const TEXT_FEATURES: usize = 4;
pub const ACT_FEATURES: usize = 4;

/// Normalization scales keeping token features O(1).
pub const VEL_X_SCALE: f64 = 10.0;
pub const VEL_Y_SCALE: f64 = 5.0;
pub const ACC_SCALE: f64 = 3.0;
pub const STRIDE_SCALE: f64 = 3.0;

/// Chunk-slot table row used by SYS (and padding) tokens.
pub fn sys_slot(max_window_chunks: usize) -> usize {
    max_window_chunks
}

/// The content of one temporal chunk, in raw (unnormalized) units.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkFeatures {
    /// Inter-chunk stride this chunk was sampled at, seconds.
    pub stride_s: usize,
    /// [frame][view][latent_dim]; frames ordered oldest to newest, the last
    /// frame sits at the chunk's reference time.
    pub frame_latents: Vec<Vec<Vec<f64>>>,
    /// Per ACT token: (vx, vy, a_x, a_y) at the token's control step.
    pub act_states: Vec<[f64; 4]>,
}

/// Extracts the chunk whose last frame sits at `t_ref`.
pub fn chunk_from_episode(episode: &Episode, t_ref: usize, stride_s: usize) -> Result<ChunkFeatures> {
    let frames = CONTROL_HZ; // one second of frames per chunk
    if t_ref + 1 < frames {
        return Err(Error::domain(format!(
            "chunk at step {t_ref} needs {frames} frames of history"
        )));
    }
    if t_ref >= episode.n_steps() {
        return Err(Error::domain(format!(
            "chunk reference step {t_ref} beyond episode ({} steps)",
            episode.n_steps()
        )));
    }
    let mut frame_latents = Vec::with_capacity(frames);
    let mut act_states = Vec::with_capacity(frames);
    for f in 0..frames {
        let step = t_ref + 1 + f - frames;
        frame_latents.push(episode.obs_latents[step].clone());
        let (vx, vy) = episode.velocities[step];
        act_states.push([vx, vy, episode.a_x[step], episode.a_y[step]]);
    }
    Ok(ChunkFeatures {
        stride_s,
        frame_latents,
        act_states,
    })
}

/// Teacher-forcing window: chunks at `anchor + i * stride` for `i = 0..=H`.
pub fn sample_chunks(
    episode: &Episode,
    anchor_step: usize,
    horizon: usize,
    stride_s: usize,
) -> Result<Vec<ChunkFeatures>> {
    let stride = stride_s * CONTROL_HZ;
    (0..=horizon)
        .map(|i| chunk_from_episode(episode, anchor_step + i * stride, stride_s))
        .collect()
}

/// Per-sample token features, aligned with a [`PromptStructure`]'s token
/// index lists.
#[derive(Debug, Clone)]
pub struct PromptFeatures {
    pub n_chunks: usize,
    pub text: Mat<f64>,
    pub obs: Mat<f64>,
    pub act: Mat<f64>,
}

/// Builds normalized feature matrices from chunk contents. OBS tokens carry
/// consecutive slices of their frame's latent; ACT tokens carry normalized
/// kinematic state; TEXT tokens encode the stride.
pub fn build_features(
    chunks: &[ChunkFeatures],
    layout_cfg: &LayoutConfig,
    latent_dim: usize,
) -> Result<PromptFeatures> {
    if chunks.is_empty() {
        return Err(Error::domain("prompt needs at least one chunk"));
    }
    let tpf = layout_cfg.tokens_per_frame_per_view;
    if latent_dim % tpf != 0 {
        return Err(Error::config(format!(
            "latent_dim {latent_dim} not divisible by tokens_per_frame_per_view {tpf}"
        )));
    }
    let part = latent_dim / tpf;
    let n = chunks.len();
    let l = layout_cfg.text_len_per_chunk;
    let obs_len = layout_cfg.obs_len();
    let a_len = layout_cfg.action_len_per_chunk;
    let frames = layout_cfg.obs_frames_per_chunk;
    let views = layout_cfg.n_views;

    let mut text = Mat::zeros(n * l, TEXT_FEATURES);
    let mut obs = Mat::zeros(n * obs_len, part);
    let mut act = Mat::zeros(n * a_len, ACT_FEATURES);
    for (c, chunk) in chunks.iter().enumerate() {
        if chunk.frame_latents.len() != frames {
            return Err(Error::shape(format!(
                "chunk {c} has {} frames, layout expects {frames}",
                chunk.frame_latents.len()
            )));
        }
        for t in 0..l {
            let row = text.row_mut(c * l + t);
            let s = chunk.stride_s.clamp(1, 3);
            row[s - 1] = 1.0;
            row[3] = 1.0;
        }
        for f in 0..frames {
            if chunk.frame_latents[f].len() != views {
                return Err(Error::shape(format!(
                    "chunk {c} frame {f} has {} views, layout expects {views}",
                    chunk.frame_latents[f].len()
                )));
            }
            for v in 0..views {
                let z = &chunk.frame_latents[f][v];
                if z.len() != latent_dim {
                    return Err(Error::shape(format!(
                        "latent dim {} at chunk {c}, expected {latent_dim}",
                        z.len()
                    )));
                }
                for p in 0..tpf {
                    let token = (f * views + v) * tpf + p;
                    obs.row_mut(c * obs_len + token)
                        .copy_from_slice(&z[p * part..(p + 1) * part]);
                }
            }
        }
        if chunk.act_states.len() < a_len {
            return Err(Error::shape(format!(
                "chunk {c} has {} act states, layout expects at least {a_len}",
                chunk.act_states.len()
            )));
        }
        // The last `a_len` states fill the ACT tokens oldest-first.
        let offset = chunk.act_states.len() - a_len;
        for j in 0..a_len {
            let [vx, vy, ax, ay] = chunk.act_states[offset + j];
            let row = act.row_mut(c * a_len + j);
            row[0] = vx / VEL_X_SCALE;
            row[1] = vy / VEL_Y_SCALE;
            row[2] = ax / ACC_SCALE;
            row[3] = ay / ACC_SCALE;
        }
    }
    Ok(PromptFeatures {
        n_chunks: n,
        text,
        obs,
        act,
    })
}

/// Structure shared by every prompt with the same chunk count: block grid,
/// compiled masks, per-group token visibility, and the token/position index
/// lists the embedding assembly gathers with.
#[derive(Debug)]
pub struct PromptStructure {
    pub n_chunks: usize,
    pub grid: Arc<BlockGrid>,
    pub mask: Arc<BlockMask>,
    /// Per head group, per padded token row: visible key rows.
    pub visibility: [Arc<Vec<Vec<u32>>>; 2],
    /// Padded positions of real tokens per kind, chunk-major.
    pub sys_tokens: Arc<Vec<u32>>,
    pub text_tokens: Arc<Vec<u32>>,
    pub obs_tokens: Arc<Vec<u32>>,
    pub act_tokens: Arc<Vec<u32>>,
    pub query_tokens: Arc<Vec<u32>>,
    /// Row indices into the per-kind positional tables, aligned with the
    /// token lists above.
    pub sys_pos: Arc<Vec<u32>>,
    pub text_pos: Arc<Vec<u32>>,
    pub obs_pos: Arc<Vec<u32>>,
    pub act_pos: Arc<Vec<u32>>,
    pub query_pos: Arc<Vec<u32>>,
    /// Chunk-slot row per padded token (SYS and padding use the extra
    /// `sys_slot` row).
    pub chunk_slots: Arc<Vec<u32>>,
}

pub fn build_structure(
    layout_cfg: &LayoutConfig,
    mask_cfg: &MaskConfig,
    n_chunks: usize,
    max_window_chunks: usize,
) -> Result<PromptStructure> {
    if n_chunks > max_window_chunks {
        return Err(Error::config(format!(
            "{n_chunks} chunks exceed the model window of {max_window_chunks}"
        )));
    }
    let layout = build_prompt_layout(layout_cfg, n_chunks)?;
    let grid = block_partition(&layout, layout_cfg.block_size)?;
    let mask = build_mask(&grid, mask_cfg)?;
    let vis0 = token_visibility(&mask, &grid, HeadGroup::G0);
    let vis1 = token_visibility(&mask, &grid, HeadGroup::G1);

    let mut lists: [(Vec<u32>, Vec<u32>); 5] = Default::default();
    for seg in &layout.segments {
        let slot = match seg.kind {
            SegmentKind::Sys => 0,
            SegmentKind::Text => 1,
            SegmentKind::Obs => 2,
            SegmentKind::Act => 3,
            SegmentKind::Query => 4,
        };
        for offset in 0..seg.len() {
            let padded = grid.padded_token_index(seg.chunk, seg.kind, offset)?;
            lists[slot].0.push(padded as u32);
            lists[slot].1.push(offset as u32);
        }
    }
    let mut chunk_slots = vec![sys_slot(max_window_chunks) as u32; grid.padded_len];
    for block in &grid.blocks {
        if let ChunkId::Chunk(c) = block.chunk {
            for t in 0..block.real_tokens {
                chunk_slots[block.token_start + t] = c as u32;
            }
        }
    }
    let [(sys_t, sys_p), (text_t, text_p), (obs_t, obs_p), (act_t, act_p), (query_t, query_p)] =
        lists;
    Ok(PromptStructure {
        n_chunks,
        grid: Arc::new(grid),
        mask: Arc::new(mask),
        visibility: [Arc::new(vis0), Arc::new(vis1)],
        sys_tokens: Arc::new(sys_t),
        text_tokens: Arc::new(text_t),
        obs_tokens: Arc::new(obs_t),
        act_tokens: Arc::new(act_t),
        query_tokens: Arc::new(query_t),
        sys_pos: Arc::new(sys_p),
        text_pos: Arc::new(text_p),
        obs_pos: Arc::new(obs_p),
        act_pos: Arc::new(act_p),
        query_pos: Arc::new(query_p),
        chunk_slots: Arc::new(chunk_slots),
    })
}

impl PromptStructure {
    /// Padded row indices of one chunk's OBS tokens, in (frame, view, part)
    /// order.
    pub fn obs_rows_of_chunk(&self, layout_cfg: &LayoutConfig, chunk: usize) -> Vec<u32> {
        let obs_len = layout_cfg.obs_len();
        self.obs_tokens[chunk * obs_len..(chunk + 1) * obs_len].to_vec()
    }

    /// Padded row indices of one chunk's QUERY tokens.
    pub fn query_rows_of_chunk(&self, layout_cfg: &LayoutConfig, chunk: usize) -> Vec<u32> {
        let q = layout_cfg.query_len_per_chunk;
        self.query_tokens[chunk * q..(chunk + 1) * q].to_vec()
    }
}

/// Control steps covered by the chunk predicted after `t_ref` at a 1 s
/// rollout stride.
pub fn predicted_chunk_steps(t_ref: usize) -> Vec<usize> {
    (1..=CONTROL_HZ).map(|j| t_ref + j).collect()
}

/// Seconds spanned by one control step.
pub fn control_dt() -> f64 {
    CONTROL_DT
}
