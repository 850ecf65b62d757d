//! Semi-causal block-sparse attention mask.
//!
//! The mask is compiled per head group over a [`BlockGrid`]. Rules, in the
//! order they are checked:
//!
//! * R1 — every non-padding block attends every SYS block (global sinks);
//!   SYS rows attend only SYS blocks.
//! * R2 — all block pairs within one chunk are active (bidirectional).
//! * R3 — a prompt-side block of chunk `j` attends, in earlier chunk `i`,
//!   the neighborhood of its positional counterpart. The neighborhood
//!   radius halves with chunk distance and the link set is split between
//!   the two head groups by the parity of `j - i`.
//! * R4 — QUERY blocks of chunk `j` attend all prompt-side blocks of
//!   chunks `<= j` (parity-exempt by default) and never QUERY blocks of
//!   earlier chunks.
//! * R5 — padding blocks attend nothing and are attended by nothing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{BlockGrid, ChunkId, SegmentKind};

/// How the cross-chunk neighborhood narrows with temporal distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ShrinkRule {
    /// radius(delta) = floor(r0 / 2^(delta-1)); once the radius reaches
    /// zero the link set at that distance is empty, which keeps the total
    /// number of prompt-side cross links linear in the chunk count.
    #[default]
    Halving,
}

impl ShrinkRule {
    pub fn radius(self, base: usize, delta: usize) -> usize {
        debug_assert!(delta >= 1);
        match self {
            ShrinkRule::Halving => {
                let shift = (delta - 1).min(usize::BITS as usize - 1);
                base >> shift
            }
        }
    }
}

/// Attention-head parity group. Group 0 carries even chunk distances,
/// group 1 odd ones; distance 0 (intra-chunk) is visible to both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeadGroup {
    G0,
    G1,
}

impl HeadGroup {
    pub const ALL: [HeadGroup; 2] = [HeadGroup::G0, HeadGroup::G1];

    pub fn index(self) -> usize {
        match self {
            HeadGroup::G0 => 0,
            HeadGroup::G1 => 1,
        }
    }

    pub fn from_index(i: usize) -> Result<HeadGroup> {
        match i {
            0 => Ok(HeadGroup::G0),
            1 => Ok(HeadGroup::G1),
            _ => Err(Error::domain(format!("head group must be 0 or 1, got {i}"))),
        }
    }

    fn matches_distance(self, delta: usize) -> bool {
        delta % 2 == self.index()
    }
}

/// Mask compilation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub neighborhood_base_radius: usize,
    pub neighborhood_shrink: ShrinkRule,
    /// Fixed at 2; kept explicit so configs self-describe.
    pub parity_groups: usize,
    pub query_exempt_from_parity: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            neighborhood_base_radius: 4,
            neighborhood_shrink: ShrinkRule::Halving,
            parity_groups: 2,
            query_exempt_from_parity: true,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.parity_groups != 2 {
            return Err(Error::config(format!(
                "parity_groups is fixed at 2, got {}",
                self.parity_groups
            )));
        }
        Ok(())
    }
}

/// Active (query-block, key-block) pairs for both head groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockMask {
    pub n_blocks: usize,
    /// Sorted pair lists, one per head group.
    groups: [Vec<(u32, u32)>; 2],
}

impl BlockMask {
    pub fn from_pairs(n_blocks: usize, mut g0: Vec<(u32, u32)>, mut g1: Vec<(u32, u32)>) -> Self {
        g0.sort_unstable();
        g0.dedup();
        g1.sort_unstable();
        g1.dedup();
        BlockMask {
            n_blocks,
            groups: [g0, g1],
        }
    }

    pub fn pairs(&self, group: HeadGroup) -> &[(u32, u32)] {
        &self.groups[group.index()]
    }

    pub fn is_active(&self, group: HeadGroup, q: usize, k: usize) -> bool {
        self.groups[group.index()]
            .binary_search(&(q as u32, k as u32))
            .is_ok()
    }

    /// Active key blocks of query block `q`, ascending.
    pub fn row(&self, group: HeadGroup, q: usize) -> impl Iterator<Item = usize> + '_ {
        let pairs = &self.groups[group.index()];
        let start = pairs.partition_point(|&(pq, _)| (pq as usize) < q);
        pairs[start..]
            .iter()
            .take_while(move |&&(pq, _)| pq as usize == q)
            .map(|&(_, k)| k as usize)
    }
}

/// Per-group pair counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskStats {
    pub total_active_pairs: usize,
    pub per_query_row_counts: Vec<usize>,
}

/// Exact active-pair counts for one head group.
pub fn active_block_stats(mask: &BlockMask, group: HeadGroup) -> MaskStats {
    let mut rows = vec![0usize; mask.n_blocks];
    for &(q, _) in mask.pairs(group) {
        rows[q as usize] += 1;
    }
    MaskStats {
        total_active_pairs: mask.pairs(group).len(),
        per_query_row_counts: rows,
    }
}

/// Sum of both groups' active pairs (the work a parity-split head set does).
pub fn total_active_pairs(mask: &BlockMask) -> usize {
    mask.pairs(HeadGroup::G0).len() + mask.pairs(HeadGroup::G1).len()
}

/// Single source of truth for the mask rules. `group = None` evaluates the
/// parity-free rule set (used by the complementarity property and the
/// validator's attribution logic).
fn rule_active(grid: &BlockGrid, cfg: &MaskConfig, group: Option<HeadGroup>, q: usize, k: usize) -> bool {
    let qb = &grid.blocks[q];
    let kb = &grid.blocks[k];
    // R5
    if qb.is_padding || kb.is_padding {
        return false;
    }
    // R1: sink keys visible to everyone, including other sink blocks.
    if kb.kind == SegmentKind::Sys {
        return true;
    }
    let qc = match qb.chunk {
        ChunkId::System => return false, // SYS rows see only SYS keys
        ChunkId::Chunk(c) => c,
    };
    let kc = match kb.chunk {
        ChunkId::System => unreachable!("non-sys kind in system chunk"),
        ChunkId::Chunk(c) => c,
    };
    // R2
    if qc == kc {
        return true;
    }
    // Semi-causality: keys in later chunks are never visible.
    if kc > qc {
        return false;
    }
    let delta = qc - kc;
    if qb.kind == SegmentKind::Query {
        // R4: full access to earlier prompt-side blocks, never to earlier
        // queries.
        if kb.kind == SegmentKind::Query {
            return false;
        }
        return cfg.query_exempt_from_parity
            || group.is_none_or(|g| g.matches_distance(delta));
    }
    // R3: prompt-side cross-chunk counterpart neighborhood.
    if !kb.kind.is_prompt_side() {
        return false;
    }
    if let Some(g) = group {
        if !g.matches_distance(delta) {
            return false;
        }
    }
    let radius = cfg.neighborhood_shrink.radius(cfg.neighborhood_base_radius, delta);
    if radius == 0 {
        return false;
    }
    // Counterpart = same kind and same intra-chunk offset in chunk kc.
    // Identical per-chunk layouts mean the counterpart sits at a fixed
    // index shift from the query block.
    let counterpart_offset = qb.intra_chunk_offset;
    if kb.intra_chunk_offset.abs_diff(counterpart_offset) <= radius {
        return true;
    }
    false
}

/// Compiles both head groups' masks for a grid.
pub fn build_mask(grid: &BlockGrid, cfg: &MaskConfig) -> Result<BlockMask> {
    cfg.validate()?;
    let n = grid.n_blocks();
    let mut groups: [Vec<(u32, u32)>; 2] = [Vec::new(), Vec::new()];
    for g in HeadGroup::ALL {
        let out = &mut groups[g.index()];
        for q in 0..n {
            for k in 0..n {
                if rule_active(grid, cfg, Some(g), q, k) {
                    out.push((q as u32, k as u32));
                }
            }
        }
    }
    let [g0, g1] = groups;
    Ok(BlockMask {
        n_blocks: n,
        groups: [g0, g1],
    })
}

/// Single-group compilation (same rules as [`build_mask`]).
pub fn build_mask_group(
    grid: &BlockGrid,
    cfg: &MaskConfig,
    group: HeadGroup,
) -> Result<Vec<(u32, u32)>> {
    Ok(build_mask(grid, cfg)?.groups[group.index()].clone())
}

/// Parity-free cross-rule set used by the complementarity property: pair
/// lists produced with the parity test disabled.
pub fn build_mask_parity_free(grid: &BlockGrid, cfg: &MaskConfig) -> Result<Vec<(u32, u32)>> {
    cfg.validate()?;
    let n = grid.n_blocks();
    let mut out = Vec::new();
    for q in 0..n {
        for k in 0..n {
            if rule_active(grid, cfg, None, q, k) {
                out.push((q as u32, k as u32));
            }
        }
    }
    Ok(out)
}

/// Which mask rule a violation is charged to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RuleId {
    R1Sink,
    R2IntraChunk,
    R3CounterpartNeighborhood,
    R4QueryAccess,
    R5Padding,
}

/// One disagreement between a mask and the rule-generated reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub group: HeadGroup,
    pub q: u32,
    pub k: u32,
    /// True when the reference requires the pair but the mask lacks it;
    /// false when the mask holds a pair the rules forbid.
    pub missing: bool,
    pub rule: RuleId,
}

/// Re-derives the reference mask and reports every differing pair together
/// with the violated rule. Empty iff the mask is exactly rule-conformant.
pub fn validate_mask(mask: &BlockMask, grid: &BlockGrid, cfg: &MaskConfig) -> Result<Vec<Violation>> {
    let reference = build_mask(grid, cfg)?;
    let mut report = Vec::new();
    for g in HeadGroup::ALL {
        let have: &[(u32, u32)] = mask.pairs(g);
        let want: &[(u32, u32)] = reference.pairs(g);
        let mut i = 0;
        let mut j = 0;
        while i < have.len() || j < want.len() {
            let take_have = match (have.get(i), want.get(j)) {
                (Some(&h), Some(&w)) if h == w => {
                    i += 1;
                    j += 1;
                    continue;
                }
                (Some(&h), Some(&w)) => h < w,
                (Some(_), None) => true,
                (None, _) => false,
            };
            if take_have {
                let h = have[i];
                report.push(Violation {
                    group: g,
                    q: h.0,
                    k: h.1,
                    missing: false,
                    rule: classify_extra(grid, h.0 as usize, h.1 as usize),
                });
                i += 1;
            } else {
                let w = want[j];
                report.push(Violation {
                    group: g,
                    q: w.0,
                    k: w.1,
                    missing: true,
                    rule: classify_missing(grid, w.0 as usize, w.1 as usize),
                });
                j += 1;
            }
        }
    }
    Ok(report)
}

fn classify_extra(grid: &BlockGrid, q: usize, k: usize) -> RuleId {
    let qb = &grid.blocks[q];
    let kb = &grid.blocks[k];
    if qb.is_padding || kb.is_padding {
        return RuleId::R5Padding;
    }
    if qb.kind == SegmentKind::Query {
        return RuleId::R4QueryAccess;
    }
    if qb.chunk == ChunkId::System {
        return RuleId::R1Sink;
    }
    RuleId::R3CounterpartNeighborhood
}

fn classify_missing(grid: &BlockGrid, q: usize, k: usize) -> RuleId {
    let qb = &grid.blocks[q];
    let kb = &grid.blocks[k];
    if kb.kind == SegmentKind::Sys {
        return RuleId::R1Sink;
    }
    if qb.chunk == kb.chunk {
        return RuleId::R2IntraChunk;
    }
    if qb.kind == SegmentKind::Query {
        return RuleId::R4QueryAccess;
    }
    RuleId::R3CounterpartNeighborhood
}

/// Binary export: little-endian u32 pair count, then (q, k) u32 pairs in
/// sorted order.
pub fn export_pairs_binary(mask: &BlockMask, group: HeadGroup) -> Vec<u8> {
    let pairs = mask.pairs(group);
    let mut out = Vec::with_capacity(4 + pairs.len() * 8);
    out.extend_from_slice(&(pairs.len() as u32).to_le_bytes());
    for &(q, k) in pairs {
        out.extend_from_slice(&q.to_le_bytes());
        out.extend_from_slice(&k.to_le_bytes());
    }
    out
}

/// Parses the binary pair-list format back into a sorted pair vector.
pub fn import_pairs_binary(bytes: &[u8]) -> Result<Vec<(u32, u32)>> {
    if bytes.len() < 4 {
        return Err(Error::format("pair list shorter than its count field"));
    }
    let count = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    if bytes.len() != 4 + count * 8 {
        return Err(Error::format(format!(
            "pair list length {} does not match count {count}",
            bytes.len()
        )));
    }
    let mut pairs = Vec::with_capacity(count);
    for i in 0..count {
        let off = 4 + i * 8;
        let q = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        let k = u32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap());
        pairs.push((q, k));
    }
    Ok(pairs)
}

/// PGM (P5) bitmap of the block mask: one pixel per block pair, active =
/// white. Row = query block, column = key block.
pub fn to_pgm(mask: &BlockMask, group: HeadGroup) -> Vec<u8> {
    let n = mask.n_blocks;
    let mut img = vec![0u8; n * n];
    for &(q, k) in mask.pairs(group) {
        img[q as usize * n + k as usize] = 255;
    }
    let mut out = format!("P5\n{n} {n}\n255\n").into_bytes();
    out.extend_from_slice(&img);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{
        block_partition, build_prompt_layout, BlockGrid, LayoutConfig, PromptLayout, Segment,
    };
    use std::collections::BTreeSet;

    /// Independent re-derivation of the rule set, organized rule-by-rule
    /// (construct each rule's pair set, then union) rather than by pair
    /// scan. Used as the brute-force oracle for build_mask.
    fn oracle_pairs(grid: &BlockGrid, cfg: &MaskConfig, g: HeadGroup) -> BTreeSet<(u32, u32)> {
        let mut set = BTreeSet::new();
        let blocks = &grid.blocks;
        let non_pad: Vec<_> = blocks.iter().filter(|b| !b.is_padding).collect();
        // R1: everyone -> sys.
        for q in &non_pad {
            for k in &non_pad {
                if k.kind == SegmentKind::Sys {
                    set.insert((q.index as u32, k.index as u32));
                }
            }
        }
        // R2: intra-chunk full.
        for q in &non_pad {
            for k in &non_pad {
                if q.chunk != ChunkId::System && q.chunk == k.chunk {
                    set.insert((q.index as u32, k.index as u32));
                }
            }
        }
        // R3: prompt-side counterpart neighborhoods at parity-matching
        // distances.
        for q in &non_pad {
            let (ChunkId::Chunk(qc), true) = (q.chunk, q.kind.is_prompt_side()) else {
                continue;
            };
            for k in &non_pad {
                let (ChunkId::Chunk(kc), true) = (k.chunk, k.kind.is_prompt_side()) else {
                    continue;
                };
                if kc >= qc {
                    continue;
                }
                let delta = qc - kc;
                if delta % 2 != g.index() {
                    continue;
                }
                let r = cfg.neighborhood_shrink.radius(cfg.neighborhood_base_radius, delta);
                if r == 0 {
                    continue;
                }
                let cp = crate::layout::counterpart_block(q.index, kc, grid).unwrap();
                let cp_off = grid.blocks[cp].intra_chunk_offset;
                if k.intra_chunk_offset.abs_diff(cp_off) <= r {
                    set.insert((q.index as u32, k.index as u32));
                }
            }
        }
        // R4: queries see all earlier prompt-side blocks, never earlier
        // queries.
        for q in &non_pad {
            let (ChunkId::Chunk(qc), SegmentKind::Query) = (q.chunk, q.kind) else {
                continue;
            };
            for k in &non_pad {
                let ChunkId::Chunk(kc) = k.chunk else { continue };
                if kc >= qc || !k.kind.is_prompt_side() {
                    continue;
                }
                if cfg.query_exempt_from_parity || (qc - kc) % 2 == g.index() {
                    set.insert((q.index as u32, k.index as u32));
                }
            }
        }
        set
    }

    fn grid(cfg: &LayoutConfig, n_chunks: usize) -> BlockGrid {
        let layout = build_prompt_layout(cfg, n_chunks).unwrap();
        block_partition(&layout, cfg.block_size).unwrap()
    }

    /// Layout with one block per segment kind at block_size 2.
    fn four_block_chunks() -> LayoutConfig {
        LayoutConfig {
            system_prompt_len: 2,
            text_len_per_chunk: 2,
            obs_frames_per_chunk: 1,
            tokens_per_frame_per_view: 2,
            n_views: 1,
            action_len_per_chunk: 2,
            query_len_per_chunk: 2,
            block_size: 2,
        }
    }

    #[test]
    fn single_chunk_without_sys_is_fully_bidirectional() {
        // Hand-built layout with no SYS segment and one chunk of 4 blocks.
        let cfg = four_block_chunks();
        let mut segments = Vec::new();
        let mut cursor = 0;
        for kind in SegmentKind::CHUNK_ORDER {
            let len = cfg.segment_len(kind);
            segments.push(Segment {
                chunk: ChunkId::Chunk(0),
                kind,
                start: cursor,
                end: cursor + len,
            });
            cursor += len;
        }
        let layout = PromptLayout {
            config: cfg,
            n_chunks: 1,
            segments,
            total_tokens: cursor,
        };
        let grid = block_partition(&layout, 2).unwrap();
        assert_eq!(grid.n_blocks(), 4);
        let mask = build_mask(&grid, &MaskConfig::default()).unwrap();
        for g in HeadGroup::ALL {
            assert_eq!(mask.pairs(g).len(), 16, "full 4x4 pair set in group {g:?}");
        }
    }

    /// Per-chunk shape of TEXT:1, OBS:2, ACT:1, Q:1 blocks.
    fn five_block_chunks() -> LayoutConfig {
        LayoutConfig {
            n_views: 2,
            ..four_block_chunks()
        }
    }

    #[test]
    fn matches_rule_by_rule_oracle() {
        let cfg = MaskConfig {
            neighborhood_base_radius: 1,
            ..MaskConfig::default()
        };
        let g = grid(&five_block_chunks(), 3);
        let mask = build_mask(&g, &cfg).unwrap();
        for hg in HeadGroup::ALL {
            let got: BTreeSet<_> = mask.pairs(hg).iter().copied().collect();
            let want = oracle_pairs(&g, &cfg, hg);
            assert_eq!(got, want, "group {hg:?}");
        }
    }

    #[test]
    fn oracle_agreement_across_configs() {
        for r0 in [0, 1, 2, 4] {
            for exempt in [true, false] {
                for n_chunks in [1, 2, 4, 5] {
                    let cfg = MaskConfig {
                        neighborhood_base_radius: r0,
                        query_exempt_from_parity: exempt,
                        ..MaskConfig::default()
                    };
                    let g = grid(&LayoutConfig::default(), n_chunks);
                    let mask = build_mask(&g, &cfg).unwrap();
                    for hg in HeadGroup::ALL {
                        let got: BTreeSet<_> = mask.pairs(hg).iter().copied().collect();
                        assert_eq!(got, oracle_pairs(&g, &cfg, hg));
                    }
                }
            }
        }
    }

    #[test]
    fn semi_causality_and_query_isolation() {
        let g = grid(&LayoutConfig::default(), 5);
        let mask = build_mask(&g, &MaskConfig::default()).unwrap();
        for hg in HeadGroup::ALL {
            for &(q, k) in mask.pairs(hg) {
                let qb = &g.blocks[q as usize];
                let kb = &g.blocks[k as usize];
                if let (ChunkId::Chunk(qc), ChunkId::Chunk(kc)) = (qb.chunk, kb.chunk) {
                    assert!(kc <= qc, "key chunk after query chunk");
                    if qb.kind == SegmentKind::Query && kb.kind == SegmentKind::Query {
                        assert_eq!(qc, kc, "query attends earlier query");
                    }
                }
            }
        }
    }

    #[test]
    fn sink_completeness_in_both_groups() {
        let g = grid(&LayoutConfig::default(), 4);
        let mask = build_mask(&g, &MaskConfig::default()).unwrap();
        let sys_blocks: Vec<_> = g
            .blocks
            .iter()
            .filter(|b| b.kind == SegmentKind::Sys)
            .map(|b| b.index)
            .collect();
        for hg in HeadGroup::ALL {
            for b in g.blocks.iter().filter(|b| !b.is_padding) {
                for &s in &sys_blocks {
                    assert!(mask.is_active(hg, b.index, s));
                }
            }
        }
    }

    #[test]
    fn parity_groups_partition_the_cross_chunk_rule_set() {
        let cfg = MaskConfig {
            neighborhood_base_radius: 4,
            query_exempt_from_parity: false,
            ..MaskConfig::default()
        };
        let g = grid(&LayoutConfig::default(), 5);
        let mask = build_mask(&g, &cfg).unwrap();
        let cross = |pairs: &[(u32, u32)]| -> BTreeSet<(u32, u32)> {
            pairs
                .iter()
                .copied()
                .filter(|&(q, k)| {
                    let qb = &g.blocks[q as usize];
                    let kb = &g.blocks[k as usize];
                    matches!((qb.chunk, kb.chunk), (ChunkId::Chunk(a), ChunkId::Chunk(b)) if a != b)
                        && kb.kind != SegmentKind::Sys
                })
                .collect()
        };
        let c0 = cross(mask.pairs(HeadGroup::G0));
        let c1 = cross(mask.pairs(HeadGroup::G1));
        assert!(c0.is_disjoint(&c1), "groups overlap on cross-chunk links");
        let union: BTreeSet<_> = c0.union(&c1).copied().collect();
        let free = cross(&build_mask_parity_free(&g, &cfg).unwrap());
        assert_eq!(union, free, "union restores the parity-free rule set");
    }

    #[test]
    fn stats_on_empty_and_dense_masks() {
        let empty = BlockMask::from_pairs(3, vec![], vec![]);
        let s = active_block_stats(&empty, HeadGroup::G0);
        assert_eq!(s.total_active_pairs, 0);
        assert_eq!(s.per_query_row_counts, vec![0, 0, 0]);

        let b = 4u32;
        let dense: Vec<(u32, u32)> = (0..b).flat_map(|q| (0..b).map(move |k| (q, k))).collect();
        let mask = BlockMask::from_pairs(b as usize, dense.clone(), dense);
        let s = active_block_stats(&mask, HeadGroup::G1);
        assert_eq!(s.total_active_pairs, 16);
        assert_eq!(s.per_query_row_counts, vec![4; 4]);
    }

    /// Linear-growth check on a prompt-heavy layout (OBS dominates; one
    /// query block per chunk): active pairs grow ~linearly per doubling
    /// while the dense chunk-part count grows exactly 4x.
    #[test]
    fn active_pair_growth_stays_subquadratic() {
        let layout_cfg = LayoutConfig {
            system_prompt_len: 4,
            text_len_per_chunk: 4,
            obs_frames_per_chunk: 4,
            tokens_per_frame_per_view: 6,
            n_views: 7,
            action_len_per_chunk: 4,
            query_len_per_chunk: 4,
            block_size: 4,
        };
        let cfg = MaskConfig::default();
        let mut active = Vec::new();
        let mut dense_chunk_part = Vec::new();
        for n in [4usize, 8, 16, 32] {
            let g = grid(&layout_cfg, n);
            let mask = build_mask(&g, &cfg).unwrap();
            active.push(total_active_pairs(&mask));
            let chunk_blocks = g
                .blocks
                .iter()
                .filter(|b| matches!(b.chunk, ChunkId::Chunk(_)))
                .count();
            dense_chunk_part.push(chunk_blocks * chunk_blocks);
        }
        for w in active.windows(2) {
            let ratio = w[1] as f64 / w[0] as f64;
            assert!(ratio <= 2.5, "active-pair doubling ratio {ratio} > 2.5");
        }
        for w in dense_chunk_part.windows(2) {
            assert_eq!(w[1], 4 * w[0], "dense chunk-part count must grow 4x");
        }
    }

    #[test]
    fn validator_accepts_build_output_and_flags_seeded_faults() {
        let g = grid(&LayoutConfig::default(), 3);
        let cfg = MaskConfig::default();
        let mask = build_mask(&g, &cfg).unwrap();
        assert!(validate_mask(&mask, &g, &cfg).unwrap().is_empty());

        // Inject a query -> earlier-query pair.
        let q2 = g
            .blocks
            .iter()
            .find(|b| b.kind == SegmentKind::Query && b.chunk == ChunkId::Chunk(2))
            .unwrap()
            .index as u32;
        let q0 = g
            .blocks
            .iter()
            .find(|b| b.kind == SegmentKind::Query && b.chunk == ChunkId::Chunk(0))
            .unwrap()
            .index as u32;
        let mut g0: Vec<_> = mask.pairs(HeadGroup::G0).to_vec();
        g0.push((q2, q0));
        let bad = BlockMask::from_pairs(g.n_blocks(), g0, mask.pairs(HeadGroup::G1).to_vec());
        let report = validate_mask(&bad, &g, &cfg).unwrap();
        assert_eq!(report.len(), 1);
        assert_eq!(report[0].rule, RuleId::R4QueryAccess);
        assert!(!report[0].missing);

        // Remove a sink pair.
        let sys = g
            .blocks
            .iter()
            .find(|b| b.kind == SegmentKind::Sys)
            .unwrap()
            .index as u32;
        let g1: Vec<_> = mask
            .pairs(HeadGroup::G1)
            .iter()
            .copied()
            .filter(|&(q, k)| !(q == q2 && k == sys))
            .collect();
        let bad = BlockMask::from_pairs(g.n_blocks(), mask.pairs(HeadGroup::G0).to_vec(), g1);
        let report = validate_mask(&bad, &g, &cfg).unwrap();
        assert_eq!(report.len(), 1);
        assert_eq!(report[0].rule, RuleId::R1Sink);
        assert!(report[0].missing);
    }

    #[test]
    fn binary_export_round_trips() {
        let g = grid(&LayoutConfig::default(), 3);
        let mask = build_mask(&g, &MaskConfig::default()).unwrap();
        let bytes = export_pairs_binary(&mask, HeadGroup::G1);
        let back = import_pairs_binary(&bytes).unwrap();
        assert_eq!(back.as_slice(), mask.pairs(HeadGroup::G1));
    }

    #[test]
    fn pgm_has_expected_dimensions() {
        let g = grid(&LayoutConfig::default(), 2);
        let mask = build_mask(&g, &MaskConfig::default()).unwrap();
        let pgm = to_pgm(&mask, HeadGroup::G0);
        let header = format!("P5\n{} {}\n255\n", g.n_blocks(), g.n_blocks());
        assert!(pgm.starts_with(header.as_bytes()));
        assert_eq!(pgm.len(), header.len() + g.n_blocks() * g.n_blocks());
    }
}
