//! Chunk-structured prompt layout and its block partition.
//!
//! A prompt is a global system segment followed by `n_chunks` temporal
//! chunks, each laid out as TEXT, OBS, ACT, QUERY. Every chunk shares an
//! identical internal layout, which is what makes the positional-counterpart
//! rule of the sparse mask well defined. [`block_partition`] pads each
//! segment independently to a block-size multiple so that no block ever
//! mixes segment kinds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token role within the prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SegmentKind {
    Sys,
    Text,
    Obs,
    Act,
    Query,
}

impl SegmentKind {
    /// TEXT/OBS/ACT tokens form the prompt side of a chunk; QUERY and SYS
    /// are excluded from the counterpart rule.
    pub fn is_prompt_side(self) -> bool {
        matches!(self, SegmentKind::Text | SegmentKind::Obs | SegmentKind::Act)
    }

    pub const CHUNK_ORDER: [SegmentKind; 4] = [
        SegmentKind::Text,
        SegmentKind::Obs,
        SegmentKind::Act,
        SegmentKind::Query,
    ];
}

/// Which chunk a segment or block belongs to; the system prompt sits outside
/// the chunk sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ChunkId {
    System,
    Chunk(usize),
}

impl ChunkId {
    pub fn index(self) -> Option<usize> {
        match self {
            ChunkId::System => None,
            ChunkId::Chunk(i) => Some(i),
        }
    }
}

/// Static description of the per-chunk token budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutConfig {
    pub system_prompt_len: usize,
    pub text_len_per_chunk: usize,
    pub obs_frames_per_chunk: usize,
    pub tokens_per_frame_per_view: usize,
    pub n_views: usize,
    pub action_len_per_chunk: usize,
    pub query_len_per_chunk: usize,
    pub block_size: usize,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        LayoutConfig {
            system_prompt_len: 4,
            text_len_per_chunk: 1,
            obs_frames_per_chunk: 4,
            tokens_per_frame_per_view: 4,
            n_views: 3,
            action_len_per_chunk: 4,
            query_len_per_chunk: 4,
            block_size: 4,
        }
    }
}

impl LayoutConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("system_prompt_len", self.system_prompt_len),
            ("text_len_per_chunk", self.text_len_per_chunk),
            ("obs_frames_per_chunk", self.obs_frames_per_chunk),
            ("tokens_per_frame_per_view", self.tokens_per_frame_per_view),
            ("n_views", self.n_views),
            ("action_len_per_chunk", self.action_len_per_chunk),
            ("query_len_per_chunk", self.query_len_per_chunk),
            ("block_size", self.block_size),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::config(format!("{name} must be >= 1, got 0")));
            }
        }
        Ok(())
    }

    /// Number of OBS tokens in one chunk.
    pub fn obs_len(&self) -> usize {
        self.obs_frames_per_chunk * self.tokens_per_frame_per_view * self.n_views
    }

    /// Unpadded token length of one segment of the given kind.
    pub fn segment_len(&self, kind: SegmentKind) -> usize {
        match kind {
            SegmentKind::Sys => self.system_prompt_len,
            SegmentKind::Text => self.text_len_per_chunk,
            SegmentKind::Obs => self.obs_len(),
            SegmentKind::Act => self.action_len_per_chunk,
            SegmentKind::Query => self.query_len_per_chunk,
        }
    }

    /// Unpadded token length of one full chunk.
    pub fn chunk_len(&self) -> usize {
        SegmentKind::CHUNK_ORDER
            .iter()
            .map(|&k| self.segment_len(k))
            .sum()
    }
}

/// One contiguous run of same-kind tokens in the unpadded prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub chunk: ChunkId,
    pub kind: SegmentKind,
    /// Half-open token span in the unpadded sequence.
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }
}

/// Ordered segment list covering the whole unpadded prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptLayout {
    pub config: LayoutConfig,
    pub n_chunks: usize,
    pub segments: Vec<Segment>,
    pub total_tokens: usize,
}

impl PromptLayout {
    /// Segment for (chunk, kind); panics on a kind/chunk combination that
    /// cannot exist (SYS inside a chunk).
    pub fn segment(&self, chunk: ChunkId, kind: SegmentKind) -> Option<&Segment> {
        self.segments
            .iter()
            .find(|s| s.chunk == chunk && s.kind == kind)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("layout serializes")
    }
}

/// Builds the canonical prompt layout: one SYS segment then, per chunk,
/// TEXT, OBS, ACT, QUERY.
pub fn build_prompt_layout(config: &LayoutConfig, n_chunks: usize) -> Result<PromptLayout> {
    config.validate()?;
    if n_chunks == 0 {
        return Err(Error::config("n_chunks must be >= 1, got 0"));
    }
    let mut segments = Vec::with_capacity(1 + 4 * n_chunks);
    let mut cursor = 0usize;
    let mut push = |segments: &mut Vec<Segment>, chunk, kind, len: usize| {
        segments.push(Segment {
            chunk,
            kind,
            start: cursor,
            end: cursor + len,
        });
        cursor += len;
    };
    push(
        &mut segments,
        ChunkId::System,
        SegmentKind::Sys,
        config.system_prompt_len,
    );
    for c in 0..n_chunks {
        for kind in SegmentKind::CHUNK_ORDER {
            push(&mut segments, ChunkId::Chunk(c), kind, config.segment_len(kind));
        }
    }
    Ok(PromptLayout {
        config: *config,
        n_chunks,
        segments,
        total_tokens: cursor,
    })
}

/// One block of the padded sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub index: usize,
    pub chunk: ChunkId,
    pub kind: SegmentKind,
    /// Block offset within its chunk (0-based over the chunk's blocks);
    /// for SYS blocks this is the offset within the system segment.
    pub intra_chunk_offset: usize,
    /// Block offset within its (chunk, kind) segment.
    pub intra_segment_offset: usize,
    /// True when the block holds no real tokens at all.
    pub is_padding: bool,
    /// Padded-sequence token span of the block.
    pub token_start: usize,
    /// Number of real (non-padding) tokens at the front of the block.
    pub real_tokens: usize,
}

/// Padded, block-partitioned prompt. Each segment is padded independently to
/// a multiple of `block_size`, so every block holds tokens of a single
/// (chunk, kind) pair; padding slots sit at the tail of their segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockGrid {
    pub block_size: usize,
    pub blocks: Vec<BlockInfo>,
    pub padded_len: usize,
    pub total_tokens_unpadded: usize,
    pub n_chunks: usize,
    /// Per padded token: true when the slot carries a real token.
    token_real: Vec<bool>,
    /// Per segment in layout order: padded start offset.
    segment_padded_starts: Vec<usize>,
    layout: PromptLayout,
}

impl BlockGrid {
    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn layout(&self) -> &PromptLayout {
        &self.layout
    }

    #[inline]
    pub fn token_is_real(&self, padded_index: usize) -> bool {
        self.token_real[padded_index]
    }

    #[inline]
    pub fn block_of_token(&self, padded_index: usize) -> usize {
        padded_index / self.block_size
    }

    /// Padded position of the `offset`-th real token of segment
    /// (chunk, kind).
    pub fn padded_token_index(
        &self,
        chunk: ChunkId,
        kind: SegmentKind,
        offset: usize,
    ) -> Result<usize> {
        let (seg_idx, seg) = self
            .layout
            .segments
            .iter()
            .enumerate()
            .find(|(_, s)| s.chunk == chunk && s.kind == kind)
            .ok_or_else(|| Error::domain(format!("no segment ({chunk:?}, {kind:?})")))?;
        if offset >= seg.len() {
            return Err(Error::domain(format!(
                "offset {offset} out of range for segment of {} tokens",
                seg.len()
            )));
        }
        Ok(self.segment_padded_starts[seg_idx] + offset)
    }

    /// Blocks belonging to the given chunk, in order.
    pub fn chunk_blocks(&self, chunk: ChunkId) -> impl Iterator<Item = &BlockInfo> {
        self.blocks.iter().filter(move |b| b.chunk == chunk)
    }
}

/// Pads each segment of `layout` to a block-size multiple and emits the
/// block grid. Single-kind blocks are guaranteed by construction.
pub fn block_partition(layout: &PromptLayout, block_size: usize) -> Result<BlockGrid> {
    if block_size == 0 {
        return Err(Error::config("block_size must be >= 1, got 0"));
    }
    if layout.segments.is_empty() {
        return Err(Error::config("layout has no segments"));
    }
    let mut blocks = Vec::new();
    let mut token_real = Vec::new();
    let mut segment_padded_starts = Vec::with_capacity(layout.segments.len());
    let mut chunk_block_counters: Vec<usize> = vec![0; layout.n_chunks];
    let mut sys_block_counter = 0usize;
    let mut cursor = 0usize;

    for seg in &layout.segments {
        segment_padded_starts.push(cursor);
        let real = seg.len();
        let n_seg_blocks = real.div_ceil(block_size);
        let padded = n_seg_blocks * block_size;
        for b in 0..n_seg_blocks {
            let block_start_in_seg = b * block_size;
            let real_here = real.saturating_sub(block_start_in_seg).min(block_size);
            let intra_chunk = match seg.chunk {
                ChunkId::System => {
                    let v = sys_block_counter;
                    sys_block_counter += 1;
                    v
                }
                ChunkId::Chunk(c) => {
                    let v = chunk_block_counters[c];
                    chunk_block_counters[c] += 1;
                    v
                }
            };
            blocks.push(BlockInfo {
                index: blocks.len(),
                chunk: seg.chunk,
                kind: seg.kind,
                intra_chunk_offset: intra_chunk,
                intra_segment_offset: b,
                is_padding: real_here == 0,
                token_start: cursor + block_start_in_seg,
                real_tokens: real_here,
            });
        }
        for i in 0..padded {
            token_real.push(i < real);
        }
        cursor += padded;
    }

    Ok(BlockGrid {
        block_size,
        blocks,
        padded_len: cursor,
        total_tokens_unpadded: layout.total_tokens,
        n_chunks: layout.n_chunks,
        token_real,
        segment_padded_starts,
        layout: layout.clone(),
    })
}

/// Same-kind, same-offset block of an earlier chunk. Only prompt-side blocks
/// (TEXT/OBS/ACT) have counterparts.
pub fn counterpart_block(
    block: usize,
    earlier_chunk: usize,
    grid: &BlockGrid,
) -> Result<usize> {
    let info = grid
        .blocks
        .get(block)
        .ok_or_else(|| Error::domain(format!("block {block} out of range")))?;
    if !info.kind.is_prompt_side() {
        return Err(Error::domain(format!(
            "block {block} has kind {:?}; only prompt-side blocks have counterparts",
            info.kind
        )));
    }
    let chunk = match info.chunk {
        ChunkId::Chunk(c) => c,
        ChunkId::System => {
            return Err(Error::domain("system blocks have no counterpart".to_string()))
        }
    };
    if earlier_chunk > chunk {
        return Err(Error::domain(format!(
            "counterpart chunk {earlier_chunk} is later than block's chunk {chunk}"
        )));
    }
    grid.blocks
        .iter()
        .find(|b| {
            b.chunk == ChunkId::Chunk(earlier_chunk)
                && b.kind == info.kind
                && b.intra_chunk_offset == info.intra_chunk_offset
        })
        .map(|b| b.index)
        .ok_or_else(|| {
            Error::domain(format!(
                "no counterpart for block {block} in chunk {earlier_chunk}"
            ))
        })
}
