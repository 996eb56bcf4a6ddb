//! Discrete-step machinery for one coordinate at observation rate gamma:
//! uniformized transition blocks, the up/down coupling matrix, rate
//! diagonals, and the threshold-indicator block assemblies consumed by the
//! first-return recursion.

use ndarray::Array2;
use thiserror::Error;

use crate::model::{gamma_zero_coord, partition_signs, CoordinateModel, SignPartition};

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("gamma {gamma} too small; must exceed {minimal}")]
    GammaTooSmall { gamma: f64, minimal: f64 },
    #[error("bridge length n must be at least 2, got {0}")]
    BadBridgeLength(i64),
    #[error("decomposition index w={w} out of range 1..={max}")]
    BadDecompositionIndex { w: i64, max: i64 },
}

/// All per-coordinate discrete-step data at rate `gamma`.
///
/// Row space of the +/- blocks is the positive-rate states in order
/// (pre-plus then post-plus); column space is the negative-rate states
/// (pre-minus then post-minus).
#[derive(Debug, Clone)]
pub struct UniformizedKernel {
    pub gamma: f64,
    pub partition: SignPartition,
    /// I + pre_generator/gamma.
    pub b_pre: Array2<f64>,
    /// I + post_generator/gamma.
    pub b_post: Array2<f64>,
    /// The switch matrix; transitions from pre to post space.
    pub b_switch: Array2<f64>,
    /// 1/(rate_i + |rate_j|) over (plus rows, minus cols); the post-plus x
    /// pre-minus block is zero (no path returns from post to pre).
    pub h_plus_minus: Array2<f64>,
    /// Positive rates along the plus rows.
    pub r_plus: Vec<f64>,
    /// Absolute rates along the minus columns.
    pub r_minus: Vec<f64>,
    /// Number of pre-regime plus rows (the rest are post-regime).
    pub n_plus_pre: usize,
    /// Number of pre-regime minus columns.
    pub n_minus_pre: usize,
}

/// Threshold-selected sub-block assemblies for one (ell, n, w) query.
/// In each matrix exactly one of the two upper sub-blocks is active and the
/// lower-left sub-block is zero.
#[derive(Debug, Clone)]
pub struct IndicatorBlocks {
    /// plus x plus, threshold 1.
    pub b_pp: Array2<f64>,
    /// minus x minus, threshold n-1.
    pub b_mm: Array2<f64>,
    /// minus x plus, threshold w.
    pub b_mp: Array2<f64>,
    /// plus x minus, threshold 1 (base case n=2).
    pub b_pm: Array2<f64>,
}

fn select(m: &Array2<f64>, rows: &[usize], cols: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), cols.len()), |(i, j)| m[(rows[i], cols[j])])
}

/// Build the kernel for one coordinate. Requires strict dominance
/// `gamma > gamma_zero` so uniformized diagonals keep positive mass.
pub fn build_kernel(coord: &CoordinateModel, gamma: f64) -> Result<UniformizedKernel, KernelError> {
    let minimal = gamma_zero_coord(coord);
    if !(gamma > minimal) {
        return Err(KernelError::GammaTooSmall { gamma, minimal });
    }
    let partition = partition_signs(coord);
    let uniformize = |a: &Array2<f64>| {
        let mut b = a / gamma;
        for i in 0..b.nrows() {
            b[(i, i)] += 1.0;
        }
        b
    };
    let plus_rates: Vec<f64> = partition
        .plus_pre
        .iter()
        .map(|&i| coord.pre_rewards[i])
        .chain(partition.plus_post.iter().map(|&i| coord.post_rewards[i]))
        .collect();
    let minus_rates: Vec<f64> = partition
        .minus_pre
        .iter()
        .map(|&i| coord.pre_rewards[i].abs())
        .chain(partition.minus_post.iter().map(|&i| coord.post_rewards[i].abs()))
        .collect();
    let n_plus_pre = partition.plus_pre.len();
    let n_minus_pre = partition.minus_pre.len();
    let h = Array2::from_shape_fn((plus_rates.len(), minus_rates.len()), |(i, j)| {
        if i >= n_plus_pre && j < n_minus_pre {
            0.0
        } else {
            1.0 / (plus_rates[i] + minus_rates[j])
        }
    });
    Ok(UniformizedKernel {
        gamma,
        b_pre: uniformize(&coord.pre_generator),
        b_post: uniformize(&coord.post_generator),
        b_switch: coord.switch_matrix.clone(),
        h_plus_minus: h,
        r_plus: plus_rates,
        r_minus: minus_rates,
        n_plus_pre,
        n_minus_pre,
        partition,
    })
}

#[derive(Clone, Copy)]
enum Sign {
    Plus,
    Minus,
}

impl UniformizedKernel {
    pub fn n_plus(&self) -> usize {
        self.r_plus.len()
    }

    pub fn n_minus(&self) -> usize {
        self.r_minus.len()
    }

    fn pre_indices(&self, s: Sign) -> &[usize] {
        match s {
            Sign::Plus => &self.partition.plus_pre,
            Sign::Minus => &self.partition.minus_pre,
        }
    }

    fn post_indices(&self, s: Sign) -> &[usize] {
        match s {
            Sign::Plus => &self.partition.plus_post,
            Sign::Minus => &self.partition.minus_post,
        }
    }

    /// Assemble a 2x2-of-blocks matrix over signed spaces: the upper-left
    /// sub-block (pre x pre) is active iff `ell > threshold`, the upper-right
    /// (pre x post, through the switch) iff `ell == threshold`, the lower-right
    /// (post x post) iff `ell < threshold`; the lower-left is always zero.
    fn assemble(&self, row_sign: Sign, col_sign: Sign, ell: i64, threshold: i64) -> Array2<f64> {
        let (rows_pre, rows_post) = (self.pre_indices(row_sign), self.post_indices(row_sign));
        let (cols_pre, cols_post) = (self.pre_indices(col_sign), self.post_indices(col_sign));
        let nr = rows_pre.len() + rows_post.len();
        let nc = cols_pre.len() + cols_post.len();
        let mut out = Array2::zeros((nr, nc));
        use std::cmp::Ordering::*;
        match ell.cmp(&threshold) {
            Greater => {
                let block = select(&self.b_pre, rows_pre, cols_pre);
                out.slice_mut(ndarray::s![..rows_pre.len(), ..cols_pre.len()])
                    .assign(&block);
            }
            Equal => {
                let block = select(&self.b_switch, rows_pre, cols_post);
                out.slice_mut(ndarray::s![..rows_pre.len(), cols_pre.len()..])
                    .assign(&block);
            }
            Less => {
                let block = select(&self.b_post, rows_post, cols_post);
                out.slice_mut(ndarray::s![rows_pre.len().., cols_pre.len()..])
                    .assign(&block);
            }
        }
        out
    }
}

/// The indicator-selected blocks for the recursion at (ell, n, w).
/// `w` only affects the minus-to-plus block; the others use thresholds 1
/// and n-1.
pub fn indicator_blocks(
    kernel: &UniformizedKernel,
    ell: i64,
    n: i64,
    w: i64,
) -> Result<IndicatorBlocks, KernelError> {
    if n < 2 {
        return Err(KernelError::BadBridgeLength(n));
    }
    if !(1..n).contains(&w) {
        return Err(KernelError::BadDecompositionIndex { w, max: n - 1 });
    }
    Ok(IndicatorBlocks {
        b_pp: kernel.assemble(Sign::Plus, Sign::Plus, ell, 1),
        b_mm: kernel.assemble(Sign::Minus, Sign::Minus, ell, n - 1),
        b_mp: kernel.assemble(Sign::Minus, Sign::Plus, ell, w),
        b_pm: kernel.assemble(Sign::Plus, Sign::Minus, ell, 1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_models::tm1_spec;
    use proptest::prelude::*;

    fn tm1_kernel(gamma: f64) -> UniformizedKernel {
        build_kernel(&tm1_spec().coord[0], gamma).unwrap()
    }

    #[test]
    fn tm1_blocks_at_gamma_10() {
        let k = tm1_kernel(10.0);
        assert_eq!(k.b_pre, ndarray::arr2(&[[0.9, 0.1], [0.1, 0.9]]));
        assert_eq!(k.b_post, ndarray::arr2(&[[0.8, 0.2], [0.2, 0.8]]));
        let h = &k.h_plus_minus;
        assert!((h[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((h[(0, 1)] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(h[(1, 0)], 0.0);
        assert!((h[(1, 1)] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(k.r_plus, vec![1.0, 1.0]);
        assert_eq!(k.r_minus, vec![1.0, 2.0]);
    }

    #[test]
    fn gamma_at_bound_rejected() {
        let err = build_kernel(&tm1_spec().coord[0], 2.0).unwrap_err();
        match err {
            KernelError::GammaTooSmall { minimal, .. } => assert_eq!(minimal, 2.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn uniformized_rows_are_stochastic() {
        let k = tm1_kernel(3.0);
        for m in [&k.b_pre, &k.b_post] {
            for row in m.outer_iter() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn indicator_selection_by_threshold() {
        let k = tm1_kernel(10.0);
        // ell well above every threshold: pre blocks only.
        let b = indicator_blocks(&k, 5, 3, 1).unwrap();
        assert_eq!(b.b_pp[(0, 0)], 0.9);
        assert_eq!(b.b_pp[(0, 1)], 0.0);
        assert_eq!(b.b_pp[(1, 1)], 0.0);
        // ell == 1: switch block active in b_pm.
        let b = indicator_blocks(&k, 1, 2, 1).unwrap();
        assert_eq!(b.b_pm[(0, 0)], 0.0);
        assert_eq!(b.b_pm[(0, 1)], 0.5);
        assert_eq!(b.b_pm[(1, 1)], 0.0);
        // ell <= 0: post blocks only.
        let b = indicator_blocks(&k, 0, 4, 2).unwrap();
        assert_eq!(b.b_pp[(0, 0)], 0.0);
        assert_eq!(b.b_pp[(1, 1)], 0.8);
        assert_eq!(b.b_mm[(1, 1)], 0.8);
        assert_eq!(b.b_mp[(1, 1)], 0.2);
    }

    #[test]
    fn bad_indices_rejected() {
        let k = tm1_kernel(10.0);
        assert!(indicator_blocks(&k, 0, 1, 1).is_err());
        assert!(indicator_blocks(&k, 0, 4, 0).is_err());
        assert!(indicator_blocks(&k, 0, 4, 4).is_err());
    }

    #[test]
    fn b_pre_approaches_identity_at_rate_one_over_gamma() {
        let coord = &tm1_spec().coord[0];
        for gamma in [5.0, 50.0, 500.0] {
            let k = build_kernel(coord, gamma).unwrap();
            let mut dist: f64 = 0.0;
            for i in 0..k.b_pre.nrows() {
                for j in 0..k.b_pre.ncols() {
                    dist = dist.max((k.b_pre[(i, j)] - if i == j { 1.0 } else { 0.0 }).abs());
                }
            }
            // Entrywise distance to I is exactly max|A_ii|/gamma.
            assert!((dist - 1.0 / gamma).abs() < 1e-15);
        }
    }

    #[test]
    fn permutation_equivariance() {
        // Swap the two pre states (and fix rewards/rows accordingly); the
        // kernel blocks must be the permuted versions of the original.
        let spec = tm1_spec();
        let orig = build_kernel(&spec.coord[0], 10.0).unwrap();
        let mut swapped = spec.coord[0].clone();
        swapped.pre_states.swap(0, 1);
        swapped.pre_rewards.swap(0, 1);
        let g = &spec.coord[0].pre_generator;
        swapped.pre_generator =
            ndarray::arr2(&[[g[(1, 1)], g[(1, 0)]], [g[(0, 1)], g[(0, 0)]]]);
        let p = &spec.coord[0].switch_matrix;
        swapped.switch_matrix = ndarray::arr2(&[[p[(1, 0)], p[(1, 1)]], [p[(0, 0)], p[(0, 1)]]]);
        let perm = build_kernel(&swapped, 10.0).unwrap();
        // Sign partition ordering makes the signed blocks identical again.
        assert_eq!(orig.h_plus_minus, perm.h_plus_minus);
        assert_eq!(orig.r_plus, perm.r_plus);
        assert_eq!(orig.r_minus, perm.r_minus);
        let a = indicator_blocks(&orig, 3, 4, 2).unwrap();
        let b = indicator_blocks(&perm, 3, 4, 2).unwrap();
        assert_eq!(a.b_pp, b.b_pp);
        assert_eq!(a.b_mm, b.b_mm);
        assert_eq!(a.b_mp, b.b_mp);
        assert_eq!(a.b_pm, b.b_pm);
    }

    proptest! {
        #[test]
        fn exactly_one_subblock_active(ell in -6i64..12, n in 2i64..9) {
            let k = tm1_kernel(10.0);
            for w in 1..n {
                let b = indicator_blocks(&k, ell, n, w).unwrap();
                for (m, threshold) in [(&b.b_pp, 1), (&b.b_mm, n - 1), (&b.b_mp, w), (&b.b_pm, 1)] {
                    // TM1 has one state per sign class, so each assembled
                    // matrix is 2x2 with sub-blocks at the four corners.
                    let active = [
                        (m[(0, 0)] != 0.0, ell > threshold),
                        (m[(0, 1)] != 0.0, ell == threshold),
                        (m[(1, 1)] != 0.0, ell < threshold),
                    ];
                    for (nonzero, indicator) in active {
                        prop_assert_eq!(nonzero, indicator);
                    }
                    prop_assert_eq!(m[(1, 0)], 0.0);
                }
            }
        }
    }
}
