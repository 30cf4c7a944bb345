//! Image-token reduction: random, block, and grid masking over the patch
//! grid, plus keep-count arithmetic and text truncation.
//!
//! All masks are pure functions of their arguments. Random and block masks
//! draw from [`SplitMix64`] keyed on `(seed, sample_index)`, so a given
//! sample always sees the same mask regardless of batch composition.

use serde::{Deserialize, Serialize};

use crate::error::MaskError;
use crate::rng::SplitMix64;
use crate::tensor::{Graph, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskStrategy {
    Random,
    Block,
    Grid,
    None,
}

/// How to reduce image tokens for one training stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub strategy: MaskStrategy,
    pub mask_ratio: f64,
    pub seed: u64,
}

impl MaskSpec {
    pub fn new(strategy: MaskStrategy, mask_ratio: f64, seed: u64) -> Result<Self, MaskError> {
        if !(0.0..1.0).contains(&mask_ratio) {
            return Err(MaskError::InvalidRatio(mask_ratio));
        }
        if strategy == MaskStrategy::None && mask_ratio != 0.0 {
            return Err(MaskError::InvalidRatio(mask_ratio));
        }
        Ok(Self {
            strategy,
            mask_ratio,
            seed,
        })
    }

    pub fn none(seed: u64) -> Self {
        Self {
            strategy: MaskStrategy::None,
            mask_ratio: 0.0,
            seed,
        }
    }

    /// Build the mask for one sample. `sample_index` is the global sample
    /// counter, not the position within a batch.
    pub fn make(&self, grid_h: usize, grid_w: usize, sample_index: u64) -> Result<TokenMask, MaskError> {
        match self.strategy {
            MaskStrategy::Random => {
                make_random_mask(grid_h, grid_w, self.mask_ratio, self.seed, sample_index)
            }
            MaskStrategy::Block => {
                make_block_mask(grid_h, grid_w, self.mask_ratio, self.seed, sample_index)
            }
            MaskStrategy::Grid => make_grid_mask(grid_h, grid_w, self.mask_ratio),
            MaskStrategy::None => make_random_mask(grid_h, grid_w, 0.0, self.seed, sample_index),
        }
    }
}

/// Kept patch indices over a `grid_h × grid_w` grid, ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMask {
    pub grid_h: usize,
    pub grid_w: usize,
    pub kept: Vec<usize>,
}

impl TokenMask {
    pub fn n_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn n_kept(&self) -> usize {
        self.kept.len()
    }

    /// Check the structural invariants (ascending, in range).
    pub fn validate(&self) -> Result<(), MaskError> {
        let n = self.n_tokens();
        let ascending = self.kept.windows(2).all(|w| w[0] < w[1]);
        let in_range = self.kept.iter().all(|&i| i < n);
        if !ascending || !in_range || self.kept.is_empty() {
            return Err(MaskError::GridMismatch {
                tokens: self.kept.len(),
                h: self.grid_h,
                w: self.grid_w,
            });
        }
        Ok(())
    }
}

/// Tokens surviving a mask of ratio `r` over `n_tokens`: `max(1, round((1−r)·n))`,
/// rounding half away from zero.
pub fn keep_count(n_tokens: usize, mask_ratio: f64) -> Result<usize, MaskError> {
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(MaskError::InvalidRatio(mask_ratio));
    }
    let kept = ((1.0 - mask_ratio) * n_tokens as f64).round() as usize;
    Ok(kept.max(1))
}

fn check_grid(grid_h: usize, grid_w: usize) -> Result<usize, MaskError> {
    if grid_h == 0 || grid_w == 0 {
        return Err(MaskError::EmptyGrid {
            h: grid_h,
            w: grid_w,
        });
    }
    Ok(grid_h * grid_w)
}

/// Uniformly random keep-subset: Fisher–Yates over all indices, first
/// `keep_count` taken, sorted ascending.
pub fn make_random_mask(
    grid_h: usize,
    grid_w: usize,
    mask_ratio: f64,
    seed: u64,
    sample_index: u64,
) -> Result<TokenMask, MaskError> {
    let n = check_grid(grid_h, grid_w)?;
    let k = keep_count(n, mask_ratio)?;
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = SplitMix64::keyed(seed, sample_index);
    rng.shuffle(&mut indices);
    indices.truncate(k);
    indices.sort_unstable();
    Ok(TokenMask {
        grid_h,
        grid_w,
        kept: indices,
    })
}

/// Fixed periodic pattern per 2×2 window: ratio 0.25 keeps {TL,TR,BL},
/// 0.5 keeps {TL,BR}, 0.75 keeps {TL}. Requires even extents.
pub fn make_grid_mask(grid_h: usize, grid_w: usize, mask_ratio: f64) -> Result<TokenMask, MaskError> {
    check_grid(grid_h, grid_w)?;
    let supported = mask_ratio == 0.25 || mask_ratio == 0.5 || mask_ratio == 0.75;
    if !supported || grid_h % 2 != 0 || grid_w % 2 != 0 {
        return Err(MaskError::UnsupportedPattern {
            ratio: mask_ratio,
            h: grid_h,
            w: grid_w,
        });
    }
    let keep = |i: usize, j: usize| -> bool {
        match () {
            _ if mask_ratio == 0.25 => !(i % 2 == 1 && j % 2 == 1),
            _ if mask_ratio == 0.5 => i % 2 == j % 2,
            _ => i % 2 == 0 && j % 2 == 0,
        }
    };
    let kept: Vec<usize> = (0..grid_h)
        .flat_map(|i| (0..grid_w).map(move |j| (i, j)))
        .filter(|&(i, j)| keep(i, j))
        .map(|(i, j)| i * grid_w + j)
        .collect();
    Ok(TokenMask {
        grid_h,
        grid_w,
        kept,
    })
}

/// Remove one axis-aligned rectangle whose area is nearest to `r·n`
/// (ties break toward the smaller area), placed uniformly at random over
/// every (shape, position) pair of that area. If the nearest achievable
/// area does not leave exactly `keep_count` tokens, the grid/ratio pair is
/// infeasible.
pub fn make_block_mask(
    grid_h: usize,
    grid_w: usize,
    mask_ratio: f64,
    seed: u64,
    sample_index: u64,
) -> Result<TokenMask, MaskError> {
    let n = check_grid(grid_h, grid_w)?;
    if mask_ratio <= 0.0 || mask_ratio >= 1.0 {
        return Err(MaskError::InvalidRatio(mask_ratio));
    }
    let k = keep_count(n, mask_ratio)?;
    let target = mask_ratio * n as f64;

    let mut best_area = 0usize;
    let mut best_dist = f64::INFINITY;
    for h in 1..=grid_h {
        for w in 1..=grid_w {
            let area = h * w;
            let dist = (area as f64 - target).abs();
            if dist < best_dist || (dist == best_dist && area < best_area) {
                best_dist = dist;
                best_area = area;
            }
        }
    }
    if n - best_area != k {
        return Err(MaskError::InfeasibleMask {
            h: grid_h,
            w: grid_w,
            ratio: mask_ratio,
            need: n - k,
            nearest: best_area,
        });
    }

    let mut placements: Vec<(usize, usize, usize, usize)> = Vec::new();
    for h in 1..=grid_h {
        for w in 1..=grid_w {
            if h * w != best_area {
                continue;
            }
            for top in 0..=(grid_h - h) {
                for left in 0..=(grid_w - w) {
                    placements.push((h, w, top, left));
                }
            }
        }
    }
    let mut rng = SplitMix64::keyed(seed, sample_index);
    let (h, w, top, left) = placements[rng.next_below(placements.len())];

    let kept: Vec<usize> = (0..grid_h)
        .flat_map(|i| (0..grid_w).map(move |j| (i, j)))
        .filter(|&(i, j)| !(i >= top && i < top + h && j >= left && j < left + w))
        .map(|(i, j)| i * grid_w + j)
        .collect();
    Ok(TokenMask {
        grid_h,
        grid_w,
        kept,
    })
}

/// Gather the kept rows of `[n,d]` token matrix `tokens`, in ascending kept
/// order. Differentiable; masked rows receive zero gradient.
pub fn apply_mask(g: &mut Graph, tokens: NodeId, mask: &TokenMask) -> Result<NodeId, MaskError> {
    let rows = g.shape(tokens)[0];
    if rows != mask.n_tokens() {
        return Err(MaskError::GridMismatch {
            tokens: rows,
            h: mask.grid_h,
            w: mask.grid_w,
        });
    }
    Ok(g.gather_rows(tokens, &mask.kept)?)
}

/// First `max_len` ids, right-padded with `pad_id`; the bool vector marks
/// real (non-pad) positions.
pub fn truncate_text(token_ids: &[u32], max_len: usize, pad_id: u32) -> (Vec<u32>, Vec<bool>) {
    assert!(max_len >= 1, "max_len must be >= 1");
    let real = token_ids.len().min(max_len);
    let mut ids = Vec::with_capacity(max_len);
    ids.extend_from_slice(&token_ids[..real]);
    ids.resize(max_len, pad_id);
    let mut mask = vec![true; real];
    mask.resize(max_len, false);
    (ids, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Precision, Tensor};

    #[test]
    fn keep_count_examples() {
        assert_eq!(keep_count(256, 0.0).unwrap(), 256);
        assert_eq!(keep_count(256, 0.30).unwrap(), 179);
        assert_eq!(keep_count(196, 0.75).unwrap(), 49);
        assert_eq!(keep_count(256, 0.86).unwrap(), 36);
        assert_eq!(keep_count(36, 0.78).unwrap(), 8);
        assert_eq!(keep_count(4, 0.999).unwrap(), 1);
        assert!(keep_count(16, 1.0).is_err());
        assert!(keep_count(16, -0.1).is_err());
    }

    #[test]
    fn random_mask_zero_ratio_keeps_all() {
        let m = make_random_mask(2, 2, 0.0, 7, 0).unwrap();
        assert_eq!(m.kept, vec![0, 1, 2, 3]);
    }

    #[test]
    fn random_mask_reproducible_and_index_sensitive() {
        let a = make_random_mask(14, 14, 0.5, 1, 0).unwrap();
        let b = make_random_mask(14, 14, 0.5, 1, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_kept(), 98);
        a.validate().unwrap();

        let distinct = (0..1000)
            .map(|idx| make_random_mask(14, 14, 0.5, 1, idx).unwrap())
            .any(|m| m != a);
        assert!(distinct, "1000 sample indices produced identical masks");
    }

    #[test]
    fn random_mask_per_index_frequency() {
        let mut hits = [0u32; 16];
        let draws = 10_000;
        for idx in 0..draws {
            let m = make_random_mask(4, 4, 0.5, 42, idx).unwrap();
            for &i in &m.kept {
                hits[i] += 1;
            }
        }
        for (i, &h) in hits.iter().enumerate() {
            let freq = h as f64 / draws as f64;
            assert!(
                (freq - 0.5).abs() <= 0.03,
                "index {i} kept with frequency {freq}"
            );
        }
    }

    #[test]
    fn grid_mask_patterns() {
        assert_eq!(make_grid_mask(2, 2, 0.75).unwrap().kept, vec![0]);
        assert_eq!(make_grid_mask(2, 2, 0.5).unwrap().kept, vec![0, 3]);
        let m = make_grid_mask(4, 4, 0.25).unwrap();
        assert_eq!(m.n_kept(), 12);
        // exactly 3 kept per 2x2 window
        for wi in 0..2 {
            for wj in 0..2 {
                let count = m
                    .kept
                    .iter()
                    .filter(|&&f| {
                        let (i, j) = (f / 4, f % 4);
                        i / 2 == wi && j / 2 == wj
                    })
                    .count();
                assert_eq!(count, 3);
            }
        }
    }

    #[test]
    fn grid_mask_rejects_odd_or_unsupported() {
        assert!(matches!(
            make_grid_mask(3, 4, 0.5),
            Err(MaskError::UnsupportedPattern { .. })
        ));
        assert!(matches!(
            make_grid_mask(4, 4, 0.3),
            Err(MaskError::UnsupportedPattern { .. })
        ));
    }

    #[test]
    fn grid_mask_periodic() {
        let m = make_grid_mask(8, 6, 0.5).unwrap();
        let kept: std::collections::HashSet<usize> = m.kept.iter().copied().collect();
        for i in 0..6 {
            for j in 0..4 {
                let here = kept.contains(&(i * 6 + j));
                assert_eq!(here, kept.contains(&((i + 2) * 6 + j)));
                assert_eq!(here, kept.contains(&(i * 6 + j + 2)));
            }
        }
    }

    #[test]
    fn block_mask_removes_one_rectangle() {
        let m = make_block_mask(4, 4, 0.25, 3, 0).unwrap();
        assert_eq!(m.n_kept(), 12);
        let removed: Vec<(usize, usize)> = (0..16)
            .filter(|f| !m.kept.contains(f))
            .map(|f| (f / 4, f % 4))
            .collect();
        let (min_i, max_i) = (
            removed.iter().map(|p| p.0).min().unwrap(),
            removed.iter().map(|p| p.0).max().unwrap(),
        );
        let (min_j, max_j) = (
            removed.iter().map(|p| p.1).min().unwrap(),
            removed.iter().map(|p| p.1).max().unwrap(),
        );
        assert_eq!((max_i - min_i + 1) * (max_j - min_j + 1), removed.len());
    }

    #[test]
    fn block_mask_infeasible_case() {
        let err = make_block_mask(2, 2, 0.75, 0, 0).unwrap_err();
        match err {
            MaskError::InfeasibleMask { need, nearest, .. } => {
                assert_eq!(need, 3);
                assert_eq!(nearest, 2);
            }
            other => panic!("expected InfeasibleMask, got {other:?}"),
        }
    }

    #[test]
    fn block_mask_half_on_even_grid() {
        let m = make_block_mask(14, 14, 0.5, 9, 4).unwrap();
        assert_eq!(m.n_kept(), 98);
        m.validate().unwrap();
    }

    #[test]
    fn apply_mask_gathers_and_routes_gradient() {
        let mut g = Graph::new(Precision::F64);
        let x = g.leaf(
            Tensor::from_vec(vec![3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0])
                .unwrap()
                .tracked(),
        );
        let mask = TokenMask {
            grid_h: 3,
            grid_w: 1,
            kept: vec![0, 2],
        };
        let y = apply_mask(&mut g, x, &mask).unwrap();
        assert_eq!(g.data(y), &[0.0, 1.0, 4.0, 5.0]);
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);

        let full = TokenMask {
            grid_h: 3,
            grid_w: 1,
            kept: vec![0, 1, 2],
        };
        let id = apply_mask(&mut g, x, &full).unwrap();
        assert_eq!(g.data(id), g.data(x));

        let wrong = TokenMask {
            grid_h: 2,
            grid_w: 2,
            kept: vec![0],
        };
        assert!(matches!(
            apply_mask(&mut g, x, &wrong),
            Err(MaskError::GridMismatch { .. })
        ));
    }

    #[test]
    fn truncate_text_examples() {
        assert_eq!(
            truncate_text(&[5, 6, 7], 8, 0).0,
            vec![5, 6, 7, 0, 0, 0, 0, 0]
        );
        let (ids, mask) = truncate_text(&(1..=12).collect::<Vec<u32>>(), 8, 0);
        assert_eq!(ids, (1..=8).collect::<Vec<u32>>());
        assert!(mask.iter().all(|&m| m));
        let (ids, mask) = truncate_text(&[], 4, 0);
        assert_eq!(ids, vec![0, 0, 0, 0]);
        assert!(mask.iter().all(|&m| !m));
    }

    #[test]
    fn spec_none_strategy_forces_zero_ratio() {
        assert!(MaskSpec::new(MaskStrategy::None, 0.2, 0).is_err());
        assert!(MaskSpec::new(MaskStrategy::Random, 0.2, 0).is_ok());
        assert!(MaskSpec::new(MaskStrategy::Random, 1.0, 0).is_err());
    }
}
