//! Memoized recursion for the first-return block matrices Q and Psi of the
//! uniformized process, plus the bridge level densities used for integral
//! consistency checks.
//!
//! The table is filled bottom-up over the bridge length n; within a level,
//! only the canonical switch indices 0..=n are stored, since every other
//! switch index collapses onto one of them.

use std::cmp::Ordering;
use std::sync::{Arc, RwLock};

use ndarray::Array2;
use thiserror::Error;

use crate::uniformization::{indicator_blocks, KernelError, UniformizedKernel};

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("bridge length n must be at least 2, got {0}")]
    BadBridgeLength(i64),
    #[error("non-finite value produced at (ell={ell}, n={n})")]
    NumericalFailure { ell: i64, n: usize },
}

/// First-return probability block matrix at a given switch step and bridge
/// length. Rows are positive-rate states, columns negative-rate states.
#[derive(Debug, Clone)]
pub struct PsiMatrix {
    pub ell: i64,
    pub n: usize,
    pub values: Array2<f64>,
}

/// Level density of an n-bridge at terminal level `s`, in 1/fluid-units.
#[derive(Debug, Clone)]
pub struct LevelDensity {
    pub ell: i64,
    pub n: usize,
    pub s: f64,
    pub values: Array2<f64>,
}

/// One stored Q matrix together with its row- and column-scaled copies in
/// flat row-major form, which the recursion reuses across every longer
/// bridge length.
struct StoredQ {
    q: Arc<Array2<f64>>,
    // diag(r_plus) . q
    row_scaled: Vec<f64>,
    // q . diag(r_minus)
    col_scaled: Vec<f64>,
}

/// The three realizations of an indicator-selected block in flat row-major
/// form: the block depends on the switch index only through its ordering
/// against the threshold.
struct BlockVariants {
    above: Vec<f64>,
    at: Vec<f64>,
    below: Vec<f64>,
}

impl BlockVariants {
    fn new(above: Array2<f64>, at: Array2<f64>, below: Array2<f64>) -> Self {
        BlockVariants {
            above: above.into_raw_vec(),
            at: at.into_raw_vec(),
            below: below.into_raw_vec(),
        }
    }

    fn get(&self, ord: Ordering) -> &[f64] {
        match ord {
            Ordering::Greater => &self.above,
            Ordering::Equal => &self.at,
            Ordering::Less => &self.below,
        }
    }
}

/// Memoized cache of the Q block matrices for one kernel.
///
/// Levels are filled in order under a single writer; completed levels are
/// read concurrently without copying.
pub struct QTable {
    kernel: UniformizedKernel,
    b_pp: BlockVariants,
    b_mm: BlockVariants,
    b_mp: BlockVariants,
    // levels[n - 2][ell'] holds Q at canonical switch index ell' in 0..=n.
    levels: RwLock<Vec<Vec<StoredQ>>>,
}

/// Collapse a switch index onto its canonical representative in 0..=n.
/// Switches at or beyond n (and at or below 0) leave the bridge's interior
/// untouched, so they share one matrix.
pub fn canonical_switch_index(ell: i64, n: i64) -> Result<i64, BridgeError> {
    if n < 2 {
        return Err(BridgeError::BadBridgeLength(n));
    }
    Ok(ell.clamp(0, n))
}

fn scale_cols(m: &Array2<f64>, d: &[f64]) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.outer_iter_mut() {
        for (v, &s) in row.iter_mut().zip(d) {
            *v *= s;
        }
    }
    out
}

fn scale_rows(m: &Array2<f64>, d: &[f64]) -> Array2<f64> {
    let mut out = m.clone();
    for (mut row, &s) in out.outer_iter_mut().zip(d) {
        row.mapv_inplace(|v| v * s);
    }
    out
}

/// out = a . b for small flat row-major matrices: a is n x k, b is k x m.
fn mat_mul_into(a: &[f64], n: usize, k: usize, b: &[f64], m: usize, out: &mut [f64]) {
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * m + j];
            }
            out[i * m + j] = acc;
        }
    }
}

impl QTable {
    pub fn new(kernel: UniformizedKernel) -> Self {
        // Each indicator block takes one of three values depending on how the
        // switch index compares to its threshold; realize all three once.
        let above = indicator_blocks(&kernel, 5, 3, 2).expect("valid fixed indices");
        let at = indicator_blocks(&kernel, 1, 2, 1).expect("valid fixed indices");
        let below = indicator_blocks(&kernel, 0, 3, 2).expect("valid fixed indices");
        QTable {
            b_pp: BlockVariants::new(above.b_pp, at.b_pp, below.b_pp),
            b_mm: BlockVariants::new(above.b_mm, at.b_mm, below.b_mm),
            b_mp: BlockVariants::new(above.b_mp, at.b_mp, below.b_mp),
            kernel,
            levels: RwLock::new(Vec::new()),
        }
    }

    pub fn kernel(&self) -> &UniformizedKernel {
        &self.kernel
    }

    /// Q at the base length n=2: the indicator-selected one-up-one-down
    /// block Hadamard the coupling matrix.
    fn base_case(&self, ell: i64) -> Result<Array2<f64>, BridgeError> {
        let blocks = indicator_blocks(&self.kernel, ell, 2, 1)?;
        Ok(&blocks.b_pm * &self.kernel.h_plus_minus)
    }

    /// One recursion step: level n from completed levels 2..n-1. `t1`
    /// (plus x plus) and `t2` (plus x minus) are caller-provided flat scratch.
    fn recurse(
        &self,
        done: &[Vec<StoredQ>],
        ell: i64,
        n: usize,
        t1: &mut [f64],
        t2: &mut [f64],
    ) -> Array2<f64> {
        let at = |ell_sub: i64, n_sub: usize| -> &StoredQ {
            let canon = ell_sub.clamp(0, n_sub as i64) as usize;
            &done[n_sub - 2][canon]
        };
        let (p, m) = self.kernel.h_plus_minus.dim();
        let h = self.kernel.h_plus_minus.as_slice().expect("owned row-major matrix");

        // Down-move straight after the first observation.
        let mut q = vec![0.0; p * m];
        mat_mul_into(self.b_pp.get(ell.cmp(&1)), p, p, &at(ell - 1, n - 1).col_scaled, m, &mut q);
        for (v, &hv) in q.iter_mut().zip(h) {
            *v *= hv;
        }
        // Interior minimum at observation w, splitting into two bridges.
        for w in 2..=n.saturating_sub(2) {
            let b_mp = self.b_mp.get(ell.cmp(&(w as i64)));
            mat_mul_into(&at(ell, w).row_scaled, p, m, b_mp, p, t1);
            mat_mul_into(t1, p, p, &at(ell - w as i64, n - w).col_scaled, m, t2);
            for ((qv, &tv), &hv) in q.iter_mut().zip(t2.iter()).zip(h) {
                *qv += tv * hv;
            }
        }
        // Interior minimum at the last interior observation.
        let b_mm = self.b_mm.get(ell.cmp(&(n as i64 - 1)));
        mat_mul_into(&at(ell, n - 1).row_scaled, p, m, b_mm, m, t2);
        for ((qv, &tv), &hv) in q.iter_mut().zip(t2.iter()).zip(h) {
            *qv += tv * hv;
        }
        Array2::from_shape_vec((p, m), q).expect("accumulator matches the Q shape")
    }

    fn store(&self, q: Array2<f64>) -> StoredQ {
        let (p, m) = q.dim();
        let mut row_scaled = vec![0.0; p * m];
        let mut col_scaled = vec![0.0; p * m];
        for i in 0..p {
            for j in 0..m {
                row_scaled[i * m + j] = q[(i, j)] * self.kernel.r_plus[i];
                col_scaled[i * m + j] = q[(i, j)] * self.kernel.r_minus[j];
            }
        }
        StoredQ { row_scaled, col_scaled, q: Arc::new(q) }
    }

    /// Fill all levels up to `n`. Single writer; no-op if already present.
    fn ensure_level(&self, n: usize) -> Result<(), BridgeError> {
        {
            let levels = self.levels.read().unwrap();
            if levels.len() + 1 >= n {
                return Ok(());
            }
        }
        let mut levels = self.levels.write().unwrap();
        let (n_plus, n_minus) = self.kernel.h_plus_minus.dim();
        let mut t1 = vec![0.0; n_plus * n_plus];
        let mut t2 = vec![0.0; n_plus * n_minus];
        while levels.len() + 1 < n {
            let next = levels.len() + 2;
            let mut level = Vec::with_capacity(next + 1);
            for ell in 0..=next as i64 {
                let q = if next == 2 {
                    self.base_case(ell)?
                } else {
                    self.recurse(&levels, ell, next, &mut t1, &mut t2)
                };
                if q.iter().any(|v| !v.is_finite()) {
                    return Err(BridgeError::NumericalFailure { ell, n: next });
                }
                level.push(self.store(q));
            }
            levels.push(level);
        }
        Ok(())
    }

    /// The Q block matrix for switch step `ell` and bridge length `n`.
    pub fn q_matrix(&self, ell: i64, n: usize) -> Result<Arc<Array2<f64>>, BridgeError> {
        let canon = canonical_switch_index(ell, n as i64)? as usize;
        self.ensure_level(n)?;
        let levels = self.levels.read().unwrap();
        Ok(Arc::clone(&levels[n - 2][canon].q))
    }

    /// Psi = Q R_-: first-return probabilities by terminal state.
    pub fn psi_matrix(&self, ell: i64, n: usize) -> Result<PsiMatrix, BridgeError> {
        let q = self.q_matrix(ell, n)?;
        Ok(PsiMatrix {
            ell,
            n,
            values: scale_cols(&q, &self.kernel.r_minus),
        })
    }

    /// Level density of the n-bridge at terminal level `s`. Negative levels
    /// scale Q by the column diagonal, nonnegative levels by the row
    /// diagonal; the two branches agree at s=0.
    pub fn level_density(&self, ell: i64, n: usize, s: f64) -> Result<LevelDensity, BridgeError> {
        let q = self.q_matrix(ell, n)?;
        let gamma = self.kernel.gamma;
        let values = if s < 0.0 {
            let diag: Vec<f64> = self
                .kernel
                .r_minus
                .iter()
                .map(|&r| gamma * (gamma * s / r).exp())
                .collect();
            scale_cols(&q, &diag)
        } else {
            let diag: Vec<f64> = self
                .kernel
                .r_plus
                .iter()
                .map(|&r| gamma * (-gamma * s / r).exp())
                .collect();
            scale_rows(&q, &diag)
        };
        Ok(LevelDensity { ell, n, s, values })
    }

    /// Probability that ruin is confirmed exactly at step `n` starting from
    /// the positive-rate row `row`, given the switch occurs at step `ell`.
    ///
    /// A switch at or after the confirmation step ends the bridge in a
    /// pre-regime down state; otherwise confirmation happens in the post
    /// regime.
    pub fn ruin_step_pmf(&self, row: usize, ell: i64, n: usize) -> Result<f64, BridgeError> {
        if n < 2 {
            return Err(BridgeError::BadBridgeLength(n as i64));
        }
        let split = self.kernel.n_minus_pre;
        let psi = if ell >= n as i64 {
            self.psi_matrix(n as i64, n)?
        } else {
            self.psi_matrix(ell.max(0), n)?
        };
        let r = psi.values.row(row);
        let sum = if ell >= n as i64 {
            r.iter().take(split).sum()
        } else {
            r.iter().skip(split).sum()
        };
        Ok(sum)
    }
}
