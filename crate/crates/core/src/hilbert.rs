//! Locality-preserving serialization of sparse tile coordinates.
//!
//! Raw tile coordinates are densified to per-axis ordinal ranks, indexed
//! along a space-filling curve, and sorted; training then samples a random
//! contiguous window of the sorted sequence. Z-order, row-major and random
//! orderings are provided as ablation baselines.

use rand::Rng;

use crate::data::TileBag;
use crate::error::{Error, Result};

/// Ordering strategy over a bag's tiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderStrategy {
    Hilbert,
    ZOrder,
    RowMajor,
    Random { seed: u64 },
}

impl OrderStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            OrderStrategy::Hilbert => "hilbert",
            OrderStrategy::ZOrder => "zorder",
            OrderStrategy::RowMajor => "rowmajor",
            OrderStrategy::Random { .. } => "random",
        }
    }

    /// Parse a CLI name; `seed` feeds the random baseline.
    pub fn parse(name: &str, seed: u64) -> Result<Self> {
        match name {
            "hilbert" => Ok(OrderStrategy::Hilbert),
            "zorder" => Ok(OrderStrategy::ZOrder),
            "rowmajor" => Ok(OrderStrategy::RowMajor),
            "random" => Ok(OrderStrategy::Random { seed }),
            other => Err(Error::Config(format!(
                "unknown ordering '{other}' (expected hilbert|zorder|rowmajor|random)"
            ))),
        }
    }
}

/// Per-tile curve indices and the sorting permutation over a bag.
#[derive(Debug, Clone)]
pub struct HilbertOrder {
    /// Densified coordinates, one per tile.
    pub dense: Vec<(u32, u32)>,
    /// Grid order: the curve covers a 2^k x 2^k grid.
    pub order_k: u32,
    /// Curve index per tile (original tile order).
    pub indices: Vec<u64>,
    /// Permutation sorting tiles by ascending index.
    pub perm: Vec<usize>,
}

/// Map raw coordinates to per-axis ordinal ranks among the unique values,
/// independently per axis. Order-preserving and idempotent.
pub fn densify(coords: &[(i64, i64)]) -> Vec<(u32, u32)> {
    let rank_of = |vals: Vec<i64>| -> Vec<u32> {
        let mut uniq = vals.clone();
        uniq.sort_unstable();
        uniq.dedup();
        vals.iter().map(|v| uniq.binary_search(v).unwrap() as u32).collect()
    };
    let xs = rank_of(coords.iter().map(|c| c.0).collect());
    let ys = rank_of(coords.iter().map(|c| c.1).collect());
    xs.into_iter().zip(ys).collect()
}

/// Smallest `k` such that a 2^k grid covers coordinates up to `max_coord`.
pub fn grid_order(max_coord: u32) -> u32 {
    let side = max_coord as u64 + 1;
    let mut k = 0;
    while (1u64 << k) < side {
        k += 1;
    }
    k
}

/// Hilbert index of a cell on the 2^k x 2^k grid.
///
/// Recursive quadrant traversal, iterated from the top level down: at each
/// level the quadrant bit pair is scored, then the coordinate frame is
/// rotated/reflected to keep the curve continuous into the next level.
/// Base orientation is the standard "U" entered at (0, 0).
pub fn hilbert_index(x: u32, y: u32, k: u32) -> Result<u64> {
    let side = 1u64 << k;
    if (x as u64) >= side || (y as u64) >= side {
        return Err(Error::Range(format!("({x}, {y}) outside 2^{k} grid")));
    }
    let (mut x, mut y) = (x as u64, y as u64);
    let mut h: u64 = 0;
    let mut s = side >> 1;
    while s > 0 {
        let rx = u64::from(x & s > 0);
        let ry = u64::from(y & s > 0);
        h += s * s * ((3 * rx) ^ ry);
        // Rotate/reflect the sub-cell into canonical orientation; only the
        // bits below `s` matter from here on.
        if ry == 0 {
            if rx == 1 {
                x = (s - 1) - (x & (s - 1));
                y = (s - 1) - (y & (s - 1));
            }
            std::mem::swap(&mut x, &mut y);
        }
        x &= s - 1;
        y &= s - 1;
        s >>= 1;
    }
    Ok(h)
}

/// Morton (Z-order) index: interleave coordinate bits.
pub fn zorder_index(x: u32, y: u32) -> u64 {
    fn spread(v: u32) -> u64 {
        let mut v = v as u64;
        v = (v | (v << 16)) & 0x0000_FFFF_0000_FFFF;
        v = (v | (v << 8)) & 0x00FF_00FF_00FF_00FF;
        v = (v | (v << 4)) & 0x0F0F_0F0F_0F0F_0F0F;
        v = (v | (v << 2)) & 0x3333_3333_3333_3333;
        v = (v | (v << 1)) & 0x5555_5555_5555_5555;
        v
    }
    spread(x) | (spread(y) << 1)
}

/// Serialize a bag's tiles under the given strategy.
pub fn order_bag(bag: &TileBag, strategy: OrderStrategy) -> Result<HilbertOrder> {
    let dense = densify(&bag.coords);
    let max_coord = dense.iter().map(|&(x, y)| x.max(y)).max().unwrap_or(0);
    let k = grid_order(max_coord);
    let n = dense.len();

    let indices: Vec<u64> = match strategy {
        OrderStrategy::Hilbert => dense
            .iter()
            .map(|&(x, y)| hilbert_index(x, y, k))
            .collect::<Result<_>>()?,
        OrderStrategy::ZOrder => dense.iter().map(|&(x, y)| zorder_index(x, y)).collect(),
        OrderStrategy::RowMajor => {
            let side = 1u64 << k;
            dense.iter().map(|&(x, y)| y as u64 * side + x as u64).collect()
        }
        OrderStrategy::Random { seed } => {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut positions: Vec<u64> = (0..n as u64).collect();
            positions.shuffle(&mut rng);
            positions
        }
    };

    // Stable on the original tile index for deterministic tie handling.
    let mut perm: Vec<usize> = (0..n).collect();
    perm.sort_by_key(|&i| (indices[i], i));
    Ok(HilbertOrder { dense, order_k: k, indices, perm })
}

/// A contiguous window of `window` tiles from the sorted sequence, with a
/// uniformly random start. Bags shorter than the window pass through whole.
pub fn contiguous_chunk(order: &HilbertOrder, window: usize, rng: &mut impl Rng) -> Vec<usize> {
    let n = order.perm.len();
    if n <= window || window == 0 {
        return order.perm.clone();
    }
    let start = rng.gen_range(0..=n - window);
    order.perm[start..start + window].to_vec()
}

/// Mean Manhattan distance between consecutive tiles of the permutation,
/// in densified coordinates. Lower means better preserved locality.
pub fn locality_score(order: &HilbertOrder) -> Result<f64> {
    let n = order.perm.len();
    if n < 2 {
        return Err(Error::Usage("locality score needs at least two tiles".into()));
    }
    let mut total = 0u64;
    for w in order.perm.windows(2) {
        let a = order.dense[w[0]];
        let b = order.dense[w[1]];
        total += (a.0.abs_diff(b.0) + a.1.abs_diff(b.1)) as u64;
    }
    Ok(total as f64 / (n - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BagLabel;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid_bag(side: usize) -> TileBag {
        let coords: Vec<(i64, i64)> = (0..side as i64)
            .flat_map(|y| (0..side as i64).map(move |x| (x, y)))
            .collect();
        let n = coords.len();
        TileBag::new(Tensor::zeros(&[n, 1]), coords, BagLabel::Class(0)).unwrap()
    }

    #[test]
    fn densify_ranks_unique_values() {
        let coords = vec![(10, 0), (30, 0), (10, 5), (50, 2)];
        let dense = densify(&coords);
        let xs: Vec<u32> = dense.iter().map(|d| d.0).collect();
        assert_eq!(xs, vec![0, 1, 0, 2]);
    }

    #[test]
    fn densify_identity_on_dense_input() {
        let coords: Vec<(i64, i64)> = (0..5).map(|i| (i, 4 - i)).collect();
        let dense = densify(&coords);
        for (raw, d) in coords.iter().zip(&dense) {
            assert_eq!((raw.0 as u32, raw.1 as u32), *d);
        }
    }

    #[test]
    fn densify_single_tile_maps_to_origin() {
        assert_eq!(densify(&[(123, -45)]), vec![(0, 0)]);
    }

    #[test]
    fn densify_is_idempotent() {
        let coords = vec![(7, 2), (100, 2), (7, 90), (-3, 5)];
        let once = densify(&coords);
        let as_raw: Vec<(i64, i64)> = once.iter().map(|&(x, y)| (x as i64, y as i64)).collect();
        assert_eq!(densify(&as_raw), once);
    }

    #[test]
    fn hilbert_k0_single_cell() {
        assert_eq!(hilbert_index(0, 0, 0).unwrap(), 0);
    }

    #[test]
    fn hilbert_k1_unit_steps() {
        let mut cells = [(0u32, 0u32); 4];
        for x in 0..2u32 {
            for y in 0..2u32 {
                let h = hilbert_index(x, y, 1).unwrap();
                cells[h as usize] = (x, y);
            }
        }
        for w in cells.windows(2) {
            let d = w[0].0.abs_diff(w[1].0) + w[0].1.abs_diff(w[1].1);
            assert_eq!(d, 1, "cells {:?} not adjacent", w);
        }
        assert_eq!(cells[0], (0, 0));
    }

    #[test]
    fn hilbert_bijective_with_unit_steps_small_orders() {
        for k in 1..=6u32 {
            let side = 1u32 << k;
            let mut seen = vec![false; (side as usize) * (side as usize)];
            let mut by_index = vec![(0u32, 0u32); seen.len()];
            for x in 0..side {
                for y in 0..side {
                    let h = hilbert_index(x, y, k).unwrap() as usize;
                    assert!(!seen[h], "k={k}: duplicate index {h}");
                    seen[h] = true;
                    by_index[h] = (x, y);
                }
            }
            for w in by_index.windows(2) {
                let d = w[0].0.abs_diff(w[1].0) + w[0].1.abs_diff(w[1].1);
                assert_eq!(d, 1, "k={k}: {:?} -> {:?} is not a unit step", w[0], w[1]);
            }
        }
    }

    #[test]
    fn hilbert_out_of_grid_is_range_error() {
        assert!(matches!(hilbert_index(2, 0, 1), Err(Error::Range(_))));
    }

    #[test]
    fn order_single_tile_every_strategy() {
        let bag = TileBag::new(Tensor::zeros(&[1, 2]), vec![(9, 9)], BagLabel::Class(0)).unwrap();
        for s in [
            OrderStrategy::Hilbert,
            OrderStrategy::ZOrder,
            OrderStrategy::RowMajor,
            OrderStrategy::Random { seed: 3 },
        ] {
            let order = order_bag(&bag, s).unwrap();
            assert_eq!(order.perm, vec![0]);
        }
    }

    #[test]
    fn rowmajor_full_grid_is_lexicographic() {
        let bag = grid_bag(4);
        let order = order_bag(&bag, OrderStrategy::RowMajor).unwrap();
        let visited: Vec<(u32, u32)> = order.perm.iter().map(|&i| order.dense[i]).collect();
        let mut expected = Vec::new();
        for y in 0..4u32 {
            for x in 0..4u32 {
                expected.push((x, y));
            }
        }
        assert_eq!(visited, expected);
    }

    #[test]
    fn hilbert_full_grid_walks_unit_steps() {
        let bag = grid_bag(2);
        let order = order_bag(&bag, OrderStrategy::Hilbert).unwrap();
        let visited: Vec<(u32, u32)> = order.perm.iter().map(|&i| order.dense[i]).collect();
        for w in visited.windows(2) {
            assert_eq!(w[0].0.abs_diff(w[1].0) + w[0].1.abs_diff(w[1].1), 1);
        }
    }

    #[test]
    fn chunk_window_semantics() {
        let bag = grid_bag(4); // 16 tiles
        let order = order_bag(&bag, OrderStrategy::Hilbert).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);

        // N == window: whole sequence.
        assert_eq!(contiguous_chunk(&order, 16, &mut rng), order.perm);
        // N < window: whole sequence.
        assert_eq!(contiguous_chunk(&order, 30, &mut rng), order.perm);
        // N > window: contiguous slice of the permutation.
        for _ in 0..50 {
            let w = contiguous_chunk(&order, 5, &mut rng);
            assert_eq!(w.len(), 5);
            let start = order.perm.iter().position(|&p| p == w[0]).unwrap();
            assert_eq!(&order.perm[start..start + 5], &w[..]);
        }
    }

    #[test]
    fn chunk_start_is_uniform() {
        // N=10, window=4: starts 0..=6, 10k draws, each within 3 sigma.
        let coords: Vec<(i64, i64)> = (0..10).map(|i| (i, 0)).collect();
        let bag = TileBag::new(Tensor::zeros(&[10, 1]), coords, BagLabel::Class(0)).unwrap();
        let order = order_bag(&bag, OrderStrategy::RowMajor).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0u32; 7];
        let draws = 10_000;
        for _ in 0..draws {
            let w = contiguous_chunk(&order, 4, &mut rng);
            counts[w[0]] += 1; // rowmajor perm is identity here
        }
        let p = 1.0 / 7.0;
        let mean = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for (start, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - mean).abs() < 3.0 * sigma,
                "start {start} count {c} outside 3 sigma of {mean}"
            );
        }
    }

    #[test]
    fn locality_full_grid_hilbert_is_one() {
        for k in 1..=5u32 {
            let bag = grid_bag(1 << k);
            let order = order_bag(&bag, OrderStrategy::Hilbert).unwrap();
            assert_eq!(locality_score(&order).unwrap(), 1.0, "k={k}");
        }
    }

    #[test]
    fn locality_full_grid_rowmajor_matches_closed_form() {
        for w in [2usize, 4, 8, 16] {
            let bag = grid_bag(w);
            let order = order_bag(&bag, OrderStrategy::RowMajor).unwrap();
            let got = locality_score(&order).unwrap();
            let expected = (2 * w * (w - 1)) as f64 / (w * w - 1) as f64;
            assert!((got - expected).abs() < 1e-12, "w={w}: {got} vs {expected}");
        }
    }

    #[test]
    fn locality_two_tiles_is_their_distance() {
        let bag = TileBag::new(Tensor::zeros(&[2, 1]), vec![(0, 0), (7, 3)], BagLabel::Class(0)).unwrap();
        let order = order_bag(&bag, OrderStrategy::Hilbert).unwrap();
        // Densified distance: ranks are (0,0) and (1,1).
        assert_eq!(locality_score(&order).unwrap(), 2.0);
    }

    #[test]
    fn locality_needs_two_tiles() {
        let bag = TileBag::new(Tensor::zeros(&[1, 1]), vec![(0, 0)], BagLabel::Class(0)).unwrap();
        let order = order_bag(&bag, OrderStrategy::Hilbert).unwrap();
        assert!(locality_score(&order).is_err());
    }

    #[test]
    fn sparse_bags_hilbert_beats_rowmajor_and_random() {
        // 100 seeded sparse bags, N=256 on a 64x64 grid.
        let mut sums = [0.0f64; 3];
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut cells = std::collections::HashSet::new();
            while cells.len() < 256 {
                cells.insert((rand::Rng::gen_range(&mut rng, 0..64i64), rand::Rng::gen_range(&mut rng, 0..64i64)));
            }
            let coords: Vec<_> = {
                let mut v: Vec<_> = cells.into_iter().collect();
                v.sort_unstable();
                v
            };
            let bag = TileBag::new(Tensor::zeros(&[256, 1]), coords, BagLabel::Class(0)).unwrap();
            for (i, s) in [
                OrderStrategy::Hilbert,
                OrderStrategy::RowMajor,
                OrderStrategy::Random { seed },
            ]
            .into_iter()
            .enumerate()
            {
                sums[i] += locality_score(&order_bag(&bag, s).unwrap()).unwrap();
            }
        }
        let [hilbert, rowmajor, random] = sums.map(|s| s / 100.0);
        assert!(hilbert < rowmajor, "hilbert {hilbert} !< rowmajor {rowmajor}");
        assert!(hilbert < random, "hilbert {hilbert} !< random {random}");
    }

    proptest! {
        #[test]
        fn perm_is_always_a_bijection(
            raw in proptest::collection::hash_set((-50i64..50, -50i64..50), 1..80),
            strategy_pick in 0usize..4,
            seed in 0u64..1000,
        ) {
            let coords: Vec<(i64, i64)> = raw.into_iter().collect();
            let n = coords.len();
            let bag = TileBag::new(Tensor::zeros(&[n, 1]), coords, BagLabel::Class(0)).unwrap();
            let strategy = match strategy_pick {
                0 => OrderStrategy::Hilbert,
                1 => OrderStrategy::ZOrder,
                2 => OrderStrategy::RowMajor,
                _ => OrderStrategy::Random { seed },
            };
            let order = order_bag(&bag, strategy).unwrap();
            let mut seen = vec![false; n];
            for &p in &order.perm {
                prop_assert!(!seen[p]);
                seen[p] = true;
            }
            // Indices strictly increase along the permutation (unique coords).
            if strategy_pick != 3 {
                for w in order.perm.windows(2) {
                    prop_assert!(order.indices[w[0]] < order.indices[w[1]]);
                }
            }
            // Every index fits the 4^k budget.
            for &h in &order.indices {
                if strategy_pick == 0 {
                    prop_assert!((h as u128) < (1u128 << (2 * order.order_k)));
                }
            }
        }
    }
}
