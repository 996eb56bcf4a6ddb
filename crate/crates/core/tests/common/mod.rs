//! Shared helpers for integration tests: an independent discrete-path Monte
//! Carlo oracle for the first-return recursion, and adaptive quadrature.

use fluidruin::model::{partition_signs, CoordinateModel};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Starting configuration for a bridge draw: a positive-rate state in either
/// the pre- or post-switch regime.
#[derive(Debug, Clone, Copy)]
pub struct BridgeStart {
    pub state: usize,
    pub post: bool,
}

/// All positive-rate starts of a coordinate, ordered pre states first —
/// matching the recursion's row ordering.
pub fn plus_starts(coord: &CoordinateModel) -> Vec<BridgeStart> {
    let p = partition_signs(coord);
    p.plus_pre
        .iter()
        .map(|&s| BridgeStart { state: s, post: false })
        .chain(p.plus_post.iter().map(|&s| BridgeStart { state: s, post: true }))
        .collect()
}

fn transition_matrix(generator: &Array2<f64>, gamma: f64) -> Array2<f64> {
    let mut b = generator / gamma;
    for i in 0..b.nrows() {
        b[(i, i)] += 1.0;
    }
    b
}

fn pick(rng: &mut ChaCha8Rng, row: ndarray::ArrayView1<f64>) -> usize {
    let u = rng.gen::<f64>();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in row.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Estimate by direct simulation the probability that an n-step observation
/// bridge starting level 0 in `start` confirms ruin exactly at step n, with
/// the regime switch at step `ell`: observations 1..n-1 positive, observation
/// n negative. Level increments are signed exponentials (state rate times an
/// Exp(gamma) interarrival); transitions at interior observation m use the
/// active regime's uniformized matrix, except the switch matrix at m = ell.
///
/// A pre-regime start needs ell >= 1 and a post-regime start needs ell <= 0;
/// other combinations are impossible events with probability 0.
pub fn bridge_frequency(
    coord: &CoordinateModel,
    gamma: f64,
    start: BridgeStart,
    ell: i64,
    n: usize,
    draws: usize,
    seed: u64,
) -> f64 {
    if (start.post && ell >= 1) || (!start.post && ell <= 0) {
        return 0.0;
    }
    let b_pre = transition_matrix(&coord.pre_generator, gamma);
    let b_post = transition_matrix(&coord.post_generator, gamma);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..draws {
        let mut state = start.state;
        let mut post = start.post;
        let mut level = 0.0;
        let mut confirmed = false;
        for m in 1..=n as i64 {
            let rate = if post { coord.post_rewards[state] } else { coord.pre_rewards[state] };
            level += rate * -(1.0 - rng.gen::<f64>()).ln() / gamma;
            if m < n as i64 {
                if level <= 0.0 {
                    break;
                }
                if m == ell {
                    state = pick(&mut rng, coord.switch_matrix.row(state));
                    post = true;
                } else {
                    let b = if post { &b_post } else { &b_pre };
                    state = pick(&mut rng, b.row(state));
                }
            } else {
                confirmed = level < 0.0;
            }
        }
        if confirmed {
            hits += 1;
        }
    }
    hits as f64 / draws as f64
}

/// Adaptive Simpson quadrature with interval-halving error control.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                + recurse(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
    }
    let m = 0.5 * (a + b);
    let fa = f(a);
    let fm = f(m);
    let fb = f(b);
    recurse(f, a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), tol, 40)
}
