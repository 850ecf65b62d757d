//! Masked attention, two ways: a dense token-level reference and a
//! block-sparse executor that only visits active block pairs. Both use
//! max-subtraction softmax and fixed per-row accumulation order, so results
//! are deterministic under any worker count.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{block_partition, build_prompt_layout, BlockGrid, LayoutConfig};
use crate::mask::{build_mask, BlockMask, HeadGroup, MaskConfig};
use crate::mat::{axpy, dot, Mat};
use crate::scalar::Real;

/// Boolean token-level visibility matrix (query row x key column).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMask {
    n: usize,
    bits: Vec<bool>,
}

impl TokenMask {
    pub fn all_visible(n: usize) -> Self {
        TokenMask {
            n,
            bits: vec![true; n * n],
        }
    }

    pub fn all_hidden(n: usize) -> Self {
        TokenMask {
            n,
            bits: vec![false; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn visible(&self, q: usize, k: usize) -> bool {
        self.bits[q * self.n + k]
    }

    pub fn set(&mut self, q: usize, k: usize, v: bool) {
        self.bits[q * self.n + k] = v;
    }

    /// Pairs present in `self` but not in `other`, and vice versa.
    pub fn diff(&self, other: &TokenMask) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
        let mut only_self = Vec::new();
        let mut only_other = Vec::new();
        for q in 0..self.n {
            for k in 0..self.n {
                match (self.visible(q, k), other.visible(q, k)) {
                    (true, false) => only_self.push((q, k)),
                    (false, true) => only_other.push((q, k)),
                    _ => {}
                }
            }
        }
        (only_self, only_other)
    }
}

fn check_shapes<T: Real>(q: &Mat<T>, k: &Mat<T>, v: &Mat<T>) -> Result<(usize, usize)> {
    let n = q.rows();
    let d = q.cols();
    if d == 0 {
        return Err(Error::shape("head dimension must be >= 1"));
    }
    if k.rows() != n || v.rows() != n || k.cols() != d || v.cols() != d {
        return Err(Error::shape(format!(
            "attention shapes disagree: q {}x{}, k {}x{}, v {}x{}",
            q.rows(),
            q.cols(),
            k.rows(),
            k.cols(),
            v.rows(),
            v.cols()
        )));
    }
    Ok((n, d))
}

/// Softmax-attention over one query row given a logit/value visitor.
/// `keys` yields visible key indices in a fixed order.
#[inline]
fn attend_row<T: Real>(
    q_row: &[T],
    k: &Mat<T>,
    v: &Mat<T>,
    scale: T,
    keys: impl Iterator<Item = usize> + Clone,
    out: &mut [T],
) {
    // Pass 1: max logit for stability.
    let mut m = T::neg_infinity();
    for j in keys.clone() {
        let s = dot(q_row, k.row(j)) * scale;
        if s > m {
            m = s;
        }
    }
    if m == T::neg_infinity() {
        // Fully masked row: defined fallback is the zero vector.
        for o in out.iter_mut() {
            *o = T::zero();
        }
        return;
    }
    // Pass 2: accumulate exp-weighted values in key order.
    let mut z = T::zero();
    for o in out.iter_mut() {
        *o = T::zero();
    }
    for j in keys {
        let s = dot(q_row, k.row(j)) * scale;
        let w = (s - m).exp();
        z = z + w;
        axpy(out, w, v.row(j));
    }
    let inv = T::one() / z;
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

/// Dense token-level reference: `out[i] = softmax_j(q_i . k_j / sqrt(d))
/// v_j` over visible keys. `mask = None` means every key is visible.
/// Fully-masked rows yield the zero vector.
pub fn dense_attention<T: Real>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    mask: Option<&TokenMask>,
) -> Result<Mat<T>> {
    let (n, d) = check_shapes(q, k, v)?;
    if let Some(m) = mask {
        if m.n() != n {
            return Err(Error::shape(format!(
                "token mask is {}x{}, inputs have {n} rows",
                m.n(),
                m.n()
            )));
        }
    }
    let scale = T::one() / T::from_f64_c((d as f64).sqrt());
    let mut out = Mat::zeros(n, d);
    out.data_mut()
        .par_chunks_mut(d)
        .enumerate()
        .for_each(|(i, out_row)| match mask {
            None => attend_row(q.row(i), k, v, scale, 0..n, out_row),
            Some(m) => {
                let keys = (0..n).filter(|&j| m.visible(i, j));
                attend_row(q.row(i), k, v, scale, keys, out_row)
            }
        });
    Ok(out)
}

/// Work counter for the sparse executor: token-pair touches, accumulated as
/// `block_size^2` per visited active block pair (the tile cost model).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TouchStats {
    pub token_pair_touches: u64,
}

/// Block-sparse executor: visits only the active (query-block, key-block)
/// pairs of `group`. Padding key slots are skipped inside a tile; padding
/// query rows output zero. Numerically equal to
/// `dense_attention(expand_block_mask(...))` up to float reassociation.
pub fn block_sparse_attention<T: Real>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    mask: &BlockMask,
    grid: &BlockGrid,
    group: HeadGroup,
) -> Result<(Mat<T>, TouchStats)> {
    let (n, d) = check_shapes(q, k, v)?;
    if n != grid.padded_len {
        return Err(Error::shape(format!(
            "inputs have {n} rows but grid padded length is {}",
            grid.padded_len
        )));
    }
    if mask.n_blocks != grid.n_blocks() {
        return Err(Error::shape(format!(
            "mask has {} blocks, grid has {}",
            mask.n_blocks,
            grid.n_blocks()
        )));
    }
    let bs = grid.block_size;
    let scale = T::one() / T::from_f64_c((d as f64).sqrt());
    let touches = AtomicU64::new(0);
    let mut out = Mat::zeros(n, d);

    // Row ranges per query block, processed in parallel; each block owns a
    // contiguous slice of the output.
    out.data_mut()
        .par_chunks_mut(bs * d)
        .enumerate()
        .for_each(|(qb, out_tile)| {
            let key_blocks: Vec<usize> = mask.row(group, qb).collect();
            touches.fetch_add((key_blocks.len() * bs * bs) as u64, Ordering::Relaxed);
            let q_block = &grid.blocks[qb];
            for r in 0..bs {
                let row_idx = qb * bs + r;
                let out_row = &mut out_tile[r * d..(r + 1) * d];
                if r >= q_block.real_tokens {
                    for o in out_row.iter_mut() {
                        *o = T::zero();
                    }
                    continue;
                }
                let keys = key_blocks.iter().flat_map(|&kb| {
                    let info = &grid.blocks[kb];
                    info.token_start..info.token_start + info.real_tokens
                });
                attend_row(q.row(row_idx), k, v, scale, keys, out_row);
            }
        });

    Ok((
        out,
        TouchStats {
            token_pair_touches: touches.load(Ordering::Relaxed),
        },
    ))
}

/// Token-level expansion of one head group's block mask: token (i, j) is
/// visible iff the block pair is active and neither token is padding.
pub fn expand_block_mask(mask: &BlockMask, grid: &BlockGrid, group: HeadGroup) -> TokenMask {
    let n = grid.padded_len;
    let bs = grid.block_size;
    let mut tm = TokenMask::all_hidden(n);
    for &(qb, kb) in mask.pairs(group) {
        let qi = &grid.blocks[qb as usize];
        let ki = &grid.blocks[kb as usize];
        for i in 0..qi.real_tokens {
            let row = (qb as usize * bs + i) * n;
            for j in 0..ki.real_tokens {
                tm.bits[row + kb as usize * bs + j] = true;
            }
        }
    }
    tm
}

/// Per-token row visibility lists for one head group: for every padded row,
/// the ascending list of visible real key indices (empty for padding rows).
/// Shared by the autodiff attention op.
pub fn token_visibility(mask: &BlockMask, grid: &BlockGrid, group: HeadGroup) -> Vec<Vec<u32>> {
    let bs = grid.block_size;
    let mut rows = vec![Vec::new(); grid.padded_len];
    for qb in 0..grid.n_blocks() {
        let q_info = &grid.blocks[qb];
        let mut keys: Vec<u32> = Vec::new();
        for kb in mask.row(group, qb) {
            let info = &grid.blocks[kb];
            keys.extend((info.token_start..info.token_start + info.real_tokens).map(|t| t as u32));
        }
        keys.sort_unstable();
        for r in 0..q_info.real_tokens {
            rows[qb * bs + r] = keys.clone();
        }
    }
    rows
}

/// Worst per-element deviation of `a` from `b`, relative to
/// `max(1, |b|)` so near-zero entries compare absolutely.
pub fn max_rel_deviation<T: Real>(a: &Mat<T>, b: &Mat<T>) -> f64 {
    assert_eq!(a.rows(), b.rows());
    assert_eq!(a.cols(), b.cols());
    let mut worst = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let xf = x.to_f64_c();
        let yf = y.to_f64_c();
        let rel = (xf - yf).abs() / yf.abs().max(1.0);
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

/// Cost/latency comparison row for one sequence size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub n_chunks: usize,
    /// Sum over both head groups.
    pub active_pairs: u64,
    /// Sum over both head groups of the full block-pair count.
    pub dense_pairs: u64,
    pub estimated_flops_sparse: u128,
    pub estimated_flops_dense: u128,
    /// Median seconds per pass (both groups).
    pub wall_time_sparse: f64,
    pub wall_time_dense: f64,
}

impl FlopReport {
    pub fn speedup(&self) -> f64 {
        self.wall_time_dense / self.wall_time_sparse
    }
}

/// Benchmark request: one report row per entry of `n_chunks_list`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchSpec {
    pub n_chunks_list: Vec<usize>,
    pub layout: LayoutConfig,
    pub mask: MaskConfig,
    /// Per-head feature dimension of the Q/K/V matrices.
    pub d: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            n_chunks_list: vec![4, 8, 16, 32],
            // Segment lengths are multiples of the block size so tiles are
            // fully populated.
            layout: LayoutConfig {
                system_prompt_len: 32,
                text_len_per_chunk: 32,
                obs_frames_per_chunk: 4,
                tokens_per_frame_per_view: 8,
                n_views: 4,
                action_len_per_chunk: 32,
                query_len_per_chunk: 32,
                block_size: 32,
            },
            mask: MaskConfig::default(),
            d: 64,
            repeats: 5,
        seed: 7,
        }
    }
}

/// Uniform per-token-pair flop model: `2d` for the score, `2d` for the
/// weighted accumulate, plus a softmax constant. The same model prices dense
/// and sparse, so the flop ratio equals the pair ratio exactly.
pub const SOFTMAX_FLOPS_PER_PAIR: u128 = 8;

pub fn flops_per_token_pair(d: usize) -> u128 {
    4 * d as u128 + SOFTMAX_FLOPS_PER_PAIR
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

/// Times sparse vs dense attention for each requested chunk count. One pass
/// runs both head groups (a parity-split head pair); the dense baseline runs
/// the same two heads unmasked.
pub fn benchmark<T: Real>(spec: &BenchSpec) -> Result<Vec<FlopReport>> {
    if spec.repeats < 3 {
        return Err(Error::config(format!(
            "medians need repeats >= 3, got {}",
            spec.repeats
        )));
    }
    use rand::Rng;
    use rand::SeedableRng;
    let mut reports = Vec::new();
    for &n_chunks in &spec.n_chunks_list {
        let layout = build_prompt_layout(&spec.layout, n_chunks)?;
        let grid = block_partition(&layout, spec.layout.block_size)?;
        let mask = build_mask(&grid, &spec.mask)?;
        let n = grid.padded_len;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.seed ^ n_chunks as u64);
        let mut rand_mat = |rows: usize| {
            let mut m = Mat::<T>::zeros(rows, spec.d);
            for (idx, val) in m.data_mut().iter_mut().enumerate() {
                let row = idx / spec.d;
                *val = if grid.token_is_real(row) {
                    T::from_f64_c(rng.random_range(-1.0..1.0))
                } else {
                    T::zero()
                };
            }
            m
        };
        let q = rand_mat(n);
        let k = rand_mat(n);
        let v = rand_mat(n);

        // Warmup, then timed repeats.
        for g in HeadGroup::ALL {
            block_sparse_attention(&q, &k, &v, &mask, &grid, g)?;
        }
        dense_attention(&q, &k, &v, None)?;

        let mut sparse_times = Vec::with_capacity(spec.repeats);
        let mut dense_times = Vec::with_capacity(spec.repeats);
        for _ in 0..spec.repeats {
            let t0 = Instant::now();
            for g in HeadGroup::ALL {
                std::hint::black_box(block_sparse_attention(&q, &k, &v, &mask, &grid, g)?);
            }
            sparse_times.push(t0.elapsed().as_secs_f64());

            let t1 = Instant::now();
            for _ in 0..2 {
                std::hint::black_box(dense_attention(&q, &k, &v, None)?);
            }
            dense_times.push(t1.elapsed().as_secs_f64());
        }

        let active: u64 = HeadGroup::ALL
            .iter()
            .map(|&g| mask.pairs(g).len() as u64)
            .sum();
        let b = grid.n_blocks() as u64;
        let dense_pairs = 2 * b * b;
        let tile = (grid.block_size * grid.block_size) as u128;
        let per_pair = flops_per_token_pair(spec.d);
        reports.push(FlopReport {
            n_chunks,
            active_pairs: active,
            dense_pairs,
            estimated_flops_sparse: active as u128 * tile * per_pair,
            estimated_flops_dense: dense_pairs as u128 * tile * per_pair,
            wall_time_sparse: median(sparse_times),
            wall_time_dense: median(dense_times),
        });
    }
    Ok(reports)
}

/// CSV rows matching the documented header.
pub const BENCH_CSV_HEADER: &str = "n_chunks,active_pairs,dense_pairs,t_sparse_ms,t_dense_ms,speedup";

pub fn bench_csv(reports: &[FlopReport]) -> String {
    let mut out = String::from(BENCH_CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{:.3},{:.3},{:.3}\n",
            r.n_chunks,
            r.active_pairs,
            r.dense_pairs,
            r.wall_time_sparse * 1e3,
            r.wall_time_dense * 1e3,
            r.speedup()
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::BlockMask;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat<f64> {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0) * scale)
            .collect();
        Mat::from_vec(rows, cols, data).unwrap()
    }

    /// Straightforward two-loop reference, written independently of the
    /// production kernel.
    fn naive_attention(q: &Mat<f64>, k: &Mat<f64>, v: &Mat<f64>, mask: &TokenMask) -> Mat<f64> {
        let n = q.rows();
        let d = q.cols();
        let mut out = Mat::zeros(n, d);
        for i in 0..n {
            let mut logits = Vec::new();
            for j in 0..n {
                if mask.visible(i, j) {
                    let mut s = 0.0;
                    for c in 0..d {
                        s += q.get(i, c) * k.get(j, c);
                    }
                    logits.push((j, s / (d as f64).sqrt()));
                }
            }
            if logits.is_empty() {
                continue;
            }
            let m = logits.iter().map(|&(_, s)| s).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|&(_, s)| (s - m).exp()).sum();
            for &(j, s) in &logits {
                let w = (s - m).exp() / z;
                for c in 0..d {
                    out.set(i, c, out.get(i, c) + w * v.get(j, c));
                }
            }
        }
        out
    }

    #[test]
    fn single_token_identity() {
        let one = Mat::from_vec(1, 1, vec![1.0]).unwrap();
        let out = dense_attention(&one, &one, &one, None).unwrap();
        assert_eq!(out.data(), &[1.0]);
    }

    #[test]
    fn identical_keys_give_column_mean_of_values() {
        let n = 6;
        let d = 3;
        let k = Mat::from_vec(n, d, vec![0.5; n * d]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = rand_mat(&mut rng, n, d, 1.0);
        let v = rand_mat(&mut rng, n, d, 1.0);
        let out = dense_attention(&q, &k, &v, None).unwrap();
        for i in 0..n {
            for c in 0..d {
                let mean: f64 = (0..n).map(|r| v.get(r, c)).sum::<f64>() / n as f64;
                assert!((out.get(i, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_naive_two_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 8;
        let d = 4;
        for _ in 0..20 {
            let q = rand_mat(&mut rng, n, d, 1.0);
            let k = rand_mat(&mut rng, n, d, 1.0);
            let v = rand_mat(&mut rng, n, d, 1.0);
            let mut mask = TokenMask::all_hidden(n);
            for i in 0..n {
                for j in 0..n {
                    mask.set(i, j, rng.random_range(0.0..1.0) < 0.6);
                }
            }
            let got = dense_attention(&q, &k, &v, Some(&mask)).unwrap();
            let want = naive_attention(&q, &k, &v, &mask);
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fully_masked_row_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = rand_mat(&mut rng, 3, 2, 1.0);
        let k = rand_mat(&mut rng, 3, 2, 1.0);
        let v = rand_mat(&mut rng, 3, 2, 1.0);
        let mut mask = TokenMask::all_visible(3);
        for j in 0..3 {
            mask.set(1, j, false);
        }
        let out = dense_attention(&q, &k, &v, Some(&mask)).unwrap();
        assert_eq!(out.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn stable_for_large_logits() {
        let n = 4;
        let d = 2;
        // Logit magnitudes around 1e3 after the sqrt(d) scale.
        let big = 40.0;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = rand_mat(&mut rng, n, d, big);
        let k = rand_mat(&mut rng, n, d, big);
        let v = rand_mat(&mut rng, n, d, 1.0);
        let out = dense_attention(&q, &k, &v, None).unwrap();
        assert!(out.data().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let q = Mat::<f64>::zeros(4, 2);
        let k = Mat::<f64>::zeros(3, 2);
        let v = Mat::<f64>::zeros(4, 2);
        assert!(dense_attention(&q, &k, &v, None).is_err());
    }

    fn default_grid(n_chunks: usize) -> BlockGrid {
        let layout = build_prompt_layout(&LayoutConfig::default(), n_chunks).unwrap();
        block_partition(&layout, 4).unwrap()
    }

    #[test]
    fn sparse_equals_dense_under_expanded_mask() {
        let grid = default_grid(3);
        let mask = build_mask(&grid, &MaskConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = grid.padded_len;
        let d = 8;
        for g in HeadGroup::ALL {
            let mut q = rand_mat(&mut rng, n, d, 1.0);
            let mut k = rand_mat(&mut rng, n, d, 1.0);
            let mut v = rand_mat(&mut rng, n, d, 1.0);
            for m in [&mut q, &mut k, &mut v] {
                for row in 0..n {
                    if !grid.token_is_real(row) {
                        for c in 0..d {
                            m.set(row, c, 0.0);
                        }
                    }
                }
            }
            let (sparse, _) = block_sparse_attention(&q, &k, &v, &mask, &grid, g).unwrap();
            let token_mask = expand_block_mask(&mask, &grid, g);
            let dense = dense_attention(&q, &k, &v, Some(&token_mask)).unwrap();
            assert!(max_rel_deviation(&sparse, &dense) <= 1e-12);
        }
    }

    #[test]
    fn fully_dense_block_mask_matches_unmasked_dense() {
        // One chunk with no padding: unit block size over the default
        // layout gives real tokens everywhere.
        let layout = build_prompt_layout(&LayoutConfig::default(), 1).unwrap();
        let grid = block_partition(&layout, 1).unwrap();
        let b = grid.n_blocks() as u32;
        let pairs: Vec<(u32, u32)> = (0..b).flat_map(|q| (0..b).map(move |k| (q, k))).collect();
        let mask = BlockMask::from_pairs(b as usize, pairs.clone(), pairs);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = rand_mat(&mut rng, grid.padded_len, 4, 1.0);
        let k = rand_mat(&mut rng, grid.padded_len, 4, 1.0);
        let v = rand_mat(&mut rng, grid.padded_len, 4, 1.0);
        let (sparse, _) = block_sparse_attention(&q, &k, &v, &mask, &grid, HeadGroup::G0).unwrap();
        let dense = dense_attention(&q, &k, &v, None).unwrap();
        assert!(max_rel_deviation(&sparse, &dense) <= 1e-12);
    }

    #[test]
    fn touch_counter_matches_pair_count_times_tile() {
        let grid = default_grid(2);
        let mask = build_mask(&grid, &MaskConfig::default()).unwrap();
        let n = grid.padded_len;
        let q = Mat::<f64>::zeros(n, 4);
        for g in HeadGroup::ALL {
            let (_, stats) = block_sparse_attention(&q, &q, &q, &mask, &grid, g).unwrap();
            let expect = mask.pairs(g).len() as u64 * (grid.block_size * grid.block_size) as u64;
            assert_eq!(stats.token_pair_touches, expect);
        }
    }

    #[test]
    fn touch_counter_is_monotone_in_the_pair_set() {
        let grid = default_grid(2);
        let mask = build_mask(&grid, &MaskConfig::default()).unwrap();
        let n = grid.padded_len;
        let q = Mat::<f64>::zeros(n, 4);
        let (_, base) = block_sparse_attention(&q, &q, &q, &mask, &grid, HeadGroup::G0).unwrap();
        // Add every missing pair one superset at a time.
        let b = grid.n_blocks() as u32;
        let all: Vec<(u32, u32)> = (0..b).flat_map(|qb| (0..b).map(move |kb| (qb, kb))).collect();
        let superset = BlockMask::from_pairs(b as usize, all, mask.pairs(HeadGroup::G1).to_vec());
        let (_, more) = block_sparse_attention(&q, &q, &q, &superset, &grid, HeadGroup::G0).unwrap();
        assert!(more.token_pair_touches >= base.token_pair_touches);
    }

    #[test]
    fn expansion_with_unit_blocks_equals_pair_set() {
        let layout = build_prompt_layout(&LayoutConfig::default(), 1).unwrap();
        let grid = block_partition(&layout, 1).unwrap();
        let mask = build_mask(&grid, &MaskConfig::default()).unwrap();
        let tm = expand_block_mask(&mask, &grid, HeadGroup::G0);
        for q in 0..grid.n_blocks() {
            for k in 0..grid.n_blocks() {
                assert_eq!(tm.visible(q, k), mask.is_active(HeadGroup::G0, q, k));
            }
        }
    }

    #[test]
    fn padding_tokens_are_invisible_both_ways() {
        // Default layout has TEXT len 1 under block size 4, so TEXT blocks
        // carry 3 padding slots.
        let grid = default_grid(2);
        let mask = build_mask(&grid, &MaskConfig::default()).unwrap();
        let tm = expand_block_mask(&mask, &grid, HeadGroup::G0);
        for t in 0..grid.padded_len {
            if !grid.token_is_real(t) {
                for o in 0..grid.padded_len {
                    assert!(!tm.visible(t, o));
                    assert!(!tm.visible(o, t));
                }
            }
        }
    }

    #[test]
    fn fault_injected_mask_differs_exactly_at_the_injected_block() {
        let grid = default_grid(2);
        let mask = build_mask(&grid, &MaskConfig::default()).unwrap();
        let reference = expand_block_mask(&mask, &grid, HeadGroup::G0);
        // Remove one active pair.
        let victim = mask.pairs(HeadGroup::G0)[10];
        let g0: Vec<_> = mask
            .pairs(HeadGroup::G0)
            .iter()
            .copied()
            .filter(|&p| p != victim)
            .collect();
        let faulty = BlockMask::from_pairs(grid.n_blocks(), g0, mask.pairs(HeadGroup::G1).to_vec());
        let expanded = expand_block_mask(&faulty, &grid, HeadGroup::G0);
        let (extra, missing) = expanded.diff(&reference);
        assert!(extra.is_empty());
        let qi = &grid.blocks[victim.0 as usize];
        let ki = &grid.blocks[victim.1 as usize];
        assert_eq!(missing.len(), qi.real_tokens * ki.real_tokens);
        for (i, j) in missing {
            assert_eq!(grid.block_of_token(i), victim.0 as usize);
            assert_eq!(grid.block_of_token(j), victim.1 as usize);
        }
    }

    #[test]
    fn flop_ratio_equals_pair_ratio_exactly() {
        let spec = BenchSpec {
            n_chunks_list: vec![2, 3],
            layout: LayoutConfig {
                system_prompt_len: 4,
                text_len_per_chunk: 4,
                obs_frames_per_chunk: 2,
                tokens_per_frame_per_view: 2,
                n_views: 2,
                action_len_per_chunk: 4,
                query_len_per_chunk: 4,
                block_size: 4,
            },
            d: 8,
            repeats: 3,
            ..BenchSpec::default()
        };
        let reports = benchmark::<f32>(&spec).unwrap();
        for r in &reports {
            // Cross-multiplied exact equality of the two ratios.
            assert_eq!(
                r.estimated_flops_sparse * r.dense_pairs as u128,
                r.estimated_flops_dense * r.active_pairs as u128
            );
            assert!(r.active_pairs <= r.dense_pairs);
            assert!(r.estimated_flops_sparse <= r.estimated_flops_dense);
        }
    }

    #[test]
    fn repeats_below_three_is_an_error() {
        let spec = BenchSpec {
            repeats: 1,
            n_chunks_list: vec![1],
            ..BenchSpec::default()
        };
        assert!(benchmark::<f32>(&spec).is_err());
    }
}
