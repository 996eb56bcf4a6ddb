//! Seeded Monte Carlo engine: exact bivariate paths and their ruin times,
//! pasting approximations on a high-frequency Poisson observation grid, and
//! empirical distributions / convergence diagnostics built on top of them.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::model::{gamma_zero, ModelSpec};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("gamma {gamma} must exceed the uniformization floor {minimal}")]
    GammaTooSmall { gamma: f64, minimal: f64 },
    #[error("horizon must be positive and finite, got {0}")]
    BadHorizon(f64),
    #[error("at least one sample is required")]
    EmptySamples,
    #[error("sample count must be positive")]
    BadSampleCount,
    #[error("budget requires epsilon in (0,1), q > 0, and an ascending gamma list on which the error scale decreases")]
    BadBudget,
    #[error("grid must be nonempty, strictly ascending and positive")]
    BadGrid,
}

/// 64-bit finalizer used to derive independent per-sample seeds.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// seed_i = mix(root XOR i); distinct indices give distinct streams.
pub fn sample_seed(root: u64, index: u64) -> u64 {
    splitmix64(root ^ index)
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn exp_draw(rng: &mut ChaCha8Rng, rate: f64) -> f64 {
    if rate > 0.0 {
        -(1.0 - rng.gen::<f64>()).ln() / rate
    } else {
        f64::INFINITY
    }
}

/// Sample an index with probability weights[i]/total.
fn pick_weighted(rng: &mut ChaCha8Rng, weights: impl Iterator<Item = f64>, total: f64) -> usize {
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, w) in weights.enumerate() {
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

/// One linear piece of a level trajectory, valid from `t` until the next
/// segment starts.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSegment {
    pub t: f64,
    pub level: f64,
    pub state: usize,
    pub slope: f64,
    pub post_regime: bool,
}

/// Level at time `t` of a piecewise-linear trajectory; extrapolates the last
/// segment, which is valid up to the sampler's stopping time.
pub fn level_at(path: &[PathSegment], t: f64) -> f64 {
    let idx = path.partition_point(|s| s.t <= t);
    let seg = &path[idx.saturating_sub(1)];
    seg.level + seg.slope * (t - seg.t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub seed: u64,
    pub horizon: f64,
    /// Per-coordinate trajectories, recorded up to each coordinate's own ruin
    /// (first coordinate) resp. the second ruin or the horizon.
    pub paths: [Vec<PathSegment>; 2],
    /// First ruin time; infinite when censored before it.
    pub tau1: f64,
    /// Second ruin time; infinite when censored before it.
    pub tau2: f64,
    pub first_ruiner: Option<usize>,
    /// States occupied just before the switch, per coordinate.
    pub pre_switch_states: Option<[usize; 2]>,
    /// States entered via the switch matrices, per coordinate.
    pub post_switch_states: Option<[usize; 2]>,
    pub censored: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PastingSample {
    pub base: PathSample,
    pub gamma: f64,
    /// Index in the first ruiner's rate-gamma grid of the first arrival past
    /// tau1.
    pub ell_star: Option<u64>,
    /// Index in the survivor's rate-gamma grid at which the pasted level is
    /// first negative.
    pub n_star: Option<u64>,
    pub sigma1_star: f64,
    pub sigma2_star: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub tilde_tau1: f64,
    pub tilde_tau2: f64,
    /// Whether (sigma1_star, sigma2_star) landed in the admissible base-grid
    /// intervals; otherwise both switch times fall back to tau1.
    pub compat_ok: bool,
    /// Exact sup-norm gap between original and pasted level, indexed by ruin
    /// order (0 = first ruiner, 1 = survivor).
    pub sup_distance: [f64; 2],
}

impl PastingSample {
    /// Drop the trajectories, keeping the scalar summary; used by the bulk
    /// driver to bound memory.
    pub fn slim(mut self) -> PastingSample {
        self.base.paths = [Vec::new(), Vec::new()];
        self
    }
}

fn check_horizon(horizon: f64) -> Result<(), SimError> {
    if horizon > 0.0 && horizon.is_finite() {
        Ok(())
    } else {
        Err(SimError::BadHorizon(horizon))
    }
}

/// Default censoring horizon: time to drain 50 level units at the
/// pre-regime's stationary drift, falling back to the stationary mean
/// absolute rate for drift-free regimes; maximum over coordinates.
pub fn default_horizon(spec: &ModelSpec) -> f64 {
    spec.coord
        .iter()
        .map(|c| {
            let pi = stationary_distribution(&c.pre_generator);
            let drift: f64 = pi.iter().zip(&c.pre_rewards).map(|(p, r)| p * r).sum();
            let mean_abs: f64 = pi.iter().zip(&c.pre_rewards).map(|(p, r)| p * r.abs()).sum();
            let denom = if drift.abs() > 1e-9 * mean_abs {
                drift.abs()
            } else {
                mean_abs
            };
            50.0 / denom
        })
        .fold(0.0, f64::max)
}

/// Stationary distribution of a conservative generator by power iteration on
/// an aperiodic uniformization.
fn stationary_distribution(generator: &Array2<f64>) -> Vec<f64> {
    let m = generator.nrows();
    let g0 = (0..m).map(|i| -generator[(i, i)]).fold(0.0, f64::max);
    let mut pi = vec![1.0 / m as f64; m];
    if g0 <= 0.0 {
        return pi;
    }
    // Half the admissible rate keeps the chain aperiodic.
    let step = 1.0 / (2.0 * g0);
    let mut next = vec![0.0; m];
    for _ in 0..20_000 {
        for j in 0..m {
            next[j] = (0..m)
                .map(|i| pi[i] * (if i == j { 1.0 } else { 0.0 } + step * generator[(i, j)]))
                .sum();
        }
        let diff: f64 = pi.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut pi, &mut next);
        if diff < 1e-14 {
            break;
        }
    }
    pi
}

/// State of one coordinate during competing-exponential simulation.
struct CtmcCoord {
    state: usize,
    slope: f64,
    seg_t: f64,
    seg_level: f64,
    next_jump: f64,
}

impl CtmcCoord {
    fn crossing(&self) -> f64 {
        if self.slope < 0.0 && self.seg_level > 0.0 {
            self.seg_t + self.seg_level / (-self.slope)
        } else {
            f64::INFINITY
        }
    }

    fn level(&self, t: f64) -> f64 {
        self.seg_level + self.slope * (t - self.seg_t)
    }
}

fn ctmc_jump(
    coord: &mut CtmcCoord,
    generator: &Array2<f64>,
    rewards: &[f64],
    post: bool,
    path: &mut Vec<PathSegment>,
    rng: &mut ChaCha8Rng,
) {
    let t = coord.next_jump;
    let lvl = coord.level(t);
    let s = coord.state;
    let total = -generator[(s, s)];
    let row = generator.row(s);
    let next = pick_weighted(
        rng,
        row.iter().enumerate().map(|(j, &v)| if j == s { 0.0 } else { v }),
        total,
    );
    coord.state = next;
    coord.slope = rewards[next];
    coord.seg_t = t;
    coord.seg_level = lvl;
    coord.next_jump = t + exp_draw(rng, -generator[(next, next)]);
    path.push(PathSegment {
        t,
        level: lvl,
        state: next,
        slope: coord.slope,
        post_regime: post,
    });
}

/// Exact bivariate path via competing exponential clocks; zero crossings are
/// solved in closed form on each linear segment.
pub fn sample_exact_path(spec: &ModelSpec, seed: u64, horizon: f64) -> Result<PathSample, SimError> {
    check_horizon(horizon)?;
    let mut rng = rng_for(seed);
    let mut paths: [Vec<PathSegment>; 2] = [Vec::new(), Vec::new()];
    let mut coords: Vec<CtmcCoord> = Vec::with_capacity(2);
    for (k, c) in spec.coord.iter().enumerate() {
        let s = c.initial_index();
        coords.push(CtmcCoord {
            state: s,
            slope: c.pre_rewards[s],
            seg_t: 0.0,
            seg_level: 0.0,
            next_jump: 0.0,
        });
        paths[k].push(PathSegment {
            t: 0.0,
            level: 0.0,
            state: s,
            slope: c.pre_rewards[s],
            post_regime: false,
        });
    }
    for (k, c) in spec.coord.iter().enumerate() {
        let s = coords[k].state;
        coords[k].next_jump = exp_draw(&mut rng, -c.pre_generator[(s, s)]);
    }

    // Pre-switch phase: both coordinates race their jump clocks against
    // their zero crossings.
    let (tau1, ruiner) = loop {
        let crossings = [coords[0].crossing(), coords[1].crossing()];
        let jumps = [coords[0].next_jump, coords[1].next_jump];
        let t_cross = crossings[0].min(crossings[1]);
        let t_jump = jumps[0].min(jumps[1]);
        if t_cross.min(t_jump) > horizon {
            return Ok(PathSample {
                seed,
                horizon,
                paths,
                tau1: f64::INFINITY,
                tau2: f64::INFINITY,
                first_ruiner: None,
                pre_switch_states: None,
                post_switch_states: None,
                censored: true,
            });
        }
        if t_cross <= t_jump {
            if crossings[0] == crossings[1] {
                eprintln!("warning: simultaneous ruin at t={t_cross} (seed {seed})");
            }
            let r = if crossings[0] <= crossings[1] { 0 } else { 1 };
            break (t_cross, r);
        }
        let k = if jumps[0] <= jumps[1] { 0 } else { 1 };
        ctmc_jump(
            &mut coords[k],
            &spec.coord[k].pre_generator,
            &spec.coord[k].pre_rewards,
            false,
            &mut paths[k],
            &mut rng,
        );
    };

    // Behavioral switch of both coordinates at tau1.
    let pre_states = [coords[0].state, coords[1].state];
    let mut post_states = [0usize; 2];
    for k in 0..2 {
        let c = &spec.coord[k];
        let row = c.switch_matrix.row(pre_states[k]);
        post_states[k] = pick_weighted(&mut rng, row.iter().copied(), 1.0);
        let lvl = if k == ruiner { 0.0 } else { coords[k].level(tau1) };
        coords[k].state = post_states[k];
        coords[k].slope = c.post_rewards[post_states[k]];
        coords[k].seg_t = tau1;
        coords[k].seg_level = lvl;
        paths[k].push(PathSegment {
            t: tau1,
            level: lvl,
            state: post_states[k],
            slope: coords[k].slope,
            post_regime: true,
        });
    }

    // Post-switch phase: only the survivor's descent to zero matters.
    let survivor = 1 - ruiner;
    let c = &spec.coord[survivor];
    coords[survivor].next_jump =
        tau1 + exp_draw(&mut rng, -c.post_generator[(post_states[survivor], post_states[survivor])]);
    let tau2 = loop {
        let cross = coords[survivor].crossing();
        let jump = coords[survivor].next_jump;
        if cross.min(jump) > horizon {
            break f64::INFINITY;
        }
        if cross <= jump {
            break cross;
        }
        ctmc_jump(
            &mut coords[survivor],
            &c.post_generator,
            &c.post_rewards,
            true,
            &mut paths[survivor],
            &mut rng,
        );
    };

    Ok(PathSample {
        seed,
        horizon,
        paths,
        tau1,
        tau2,
        first_ruiner: Some(ruiner),
        pre_switch_states: Some(pre_states),
        post_switch_states: Some(post_states),
        censored: !tau2.is_finite(),
    })
}

/// State of one coordinate simulated on the rate-gamma0 uniformized grid.
struct UnifCoord {
    state: usize,
    slope: f64,
    seg_t: f64,
    seg_level: f64,
    next_epoch: f64,
    /// Arrival times of the coordinate's base Poisson grid (index 1, 2, ...).
    epochs: Vec<f64>,
    segs: Vec<PathSegment>,
    post: bool,
    /// First post-switch zero crossing, once seen.
    ruin: Option<f64>,
}

impl UnifCoord {
    fn crossing(&self) -> f64 {
        if self.slope < 0.0 && self.seg_level > 0.0 {
            self.seg_t + self.seg_level / (-self.slope)
        } else {
            f64::INFINITY
        }
    }

    fn level(&self, t: f64) -> f64 {
        self.seg_level + self.slope * (t - self.seg_t)
    }

    fn note_ruin_up_to(&mut self, t: f64) {
        if self.post && self.ruin.is_none() {
            let c = self.crossing();
            if c <= t {
                self.ruin = Some(c);
            }
        }
    }

    /// Process the pending epoch: record it, transition by `b0`, and draw the
    /// next arrival.
    fn advance_epoch(
        &mut self,
        b0: &Array2<f64>,
        rewards: &[f64],
        gamma0: f64,
        rng: &mut ChaCha8Rng,
    ) {
        let t = self.next_epoch;
        self.note_ruin_up_to(t);
        let lvl = self.level(t);
        self.epochs.push(t);
        let next = pick_weighted(rng, b0.row(self.state).iter().copied(), 1.0);
        if next != self.state {
            self.state = next;
            self.slope = rewards[next];
            self.seg_t = t;
            self.seg_level = lvl;
            self.segs.push(PathSegment {
                t,
                level: lvl,
                state: next,
                slope: self.slope,
                post_regime: self.post,
            });
        }
        self.next_epoch = t + exp_draw(rng, gamma0);
    }

    /// Extend the post-switch walk so the trajectory covers [0, t].
    fn extend_to(
        &mut self,
        t: f64,
        b0: &Array2<f64>,
        rewards: &[f64],
        gamma0: f64,
        rng: &mut ChaCha8Rng,
    ) {
        while self.next_epoch <= t {
            self.advance_epoch(b0, rewards, gamma0, rng);
        }
        self.note_ruin_up_to(t);
    }
}

fn uniformized_transition(generator: &Array2<f64>, gamma0: f64) -> Array2<f64> {
    let mut b = generator / gamma0;
    for i in 0..b.nrows() {
        b[(i, i)] += 1.0;
    }
    b
}

fn censored_pasting(seed: u64, horizon: f64, gamma: f64, paths: [Vec<PathSegment>; 2]) -> PastingSample {
    PastingSample {
        base: PathSample {
            seed,
            horizon,
            paths,
            tau1: f64::INFINITY,
            tau2: f64::INFINITY,
            first_ruiner: None,
            pre_switch_states: None,
            post_switch_states: None,
            censored: true,
        },
        gamma,
        ell_star: None,
        n_star: None,
        sigma1_star: f64::INFINITY,
        sigma2_star: f64::INFINITY,
        sigma1: f64::INFINITY,
        sigma2: f64::INFINITY,
        tilde_tau1: f64::INFINITY,
        tilde_tau2: f64::INFINITY,
        compat_ok: false,
        sup_distance: [0.0, 0.0],
    }
}

/// Pasting approximation: the path is realized on its rate-gamma0 uniformized
/// grid, a rate gamma−gamma0 grid is superposed per coordinate, and the
/// behavioral switch is moved to the superposed arrival just after the first
/// ruin (same arrival index on the survivor's grid).
pub fn sample_pasting(
    spec: &ModelSpec,
    gamma: f64,
    seed: u64,
    horizon: f64,
) -> Result<PastingSample, SimError> {
    check_horizon(horizon)?;
    let gamma0 = gamma_zero(spec);
    if !(gamma > gamma0) {
        return Err(SimError::GammaTooSmall { gamma, minimal: gamma0 });
    }
    let mut rng = rng_for(seed);
    let b0_pre: Vec<Array2<f64>> = spec
        .coord
        .iter()
        .map(|c| uniformized_transition(&c.pre_generator, gamma0))
        .collect();

    let mut coords: Vec<UnifCoord> = spec
        .coord
        .iter()
        .map(|c| {
            let s = c.initial_index();
            UnifCoord {
                state: s,
                slope: c.pre_rewards[s],
                seg_t: 0.0,
                seg_level: 0.0,
                next_epoch: 0.0,
                epochs: Vec::new(),
                segs: vec![PathSegment {
                    t: 0.0,
                    level: 0.0,
                    state: s,
                    slope: c.pre_rewards[s],
                    post_regime: false,
                }],
                post: false,
                ruin: None,
            }
        })
        .collect();
    for k in 0..2 {
        coords[k].next_epoch = exp_draw(&mut rng, gamma0);
    }

    // Pre-switch phase on the two base grids.
    let (tau1, ruiner) = loop {
        let crossings = [coords[0].crossing(), coords[1].crossing()];
        let epochs = [coords[0].next_epoch, coords[1].next_epoch];
        let t_cross = crossings[0].min(crossings[1]);
        let t_epoch = epochs[0].min(epochs[1]);
        if t_cross.min(t_epoch) > horizon {
            let paths = [std::mem::take(&mut coords[0].segs), std::mem::take(&mut coords[1].segs)];
            return Ok(censored_pasting(seed, horizon, gamma, paths));
        }
        if t_cross <= t_epoch {
            let r = if crossings[0] <= crossings[1] { 0 } else { 1 };
            break (t_cross, r);
        }
        let k = if epochs[0] <= epochs[1] { 0 } else { 1 };
        coords[k].advance_epoch(&b0_pre[k], &spec.coord[k].pre_rewards, gamma0, &mut rng);
    };
    let survivor = 1 - ruiner;

    // Base-grid intervals containing tau1, needed for the compatibility check.
    let interval_start = [
        coords[0].epochs.last().copied().unwrap_or(0.0),
        coords[1].epochs.last().copied().unwrap_or(0.0),
    ];
    let interval_end = [coords[0].next_epoch, coords[1].next_epoch];
    let base_arrivals_before_tau1 = coords[ruiner].epochs.len() as u64;

    // Behavioral switch at tau1 (mid-interval, not a grid point).
    let pre_states = [coords[0].state, coords[1].state];
    let mut post_states = [0usize; 2];
    for k in 0..2 {
        let c = &spec.coord[k];
        post_states[k] = pick_weighted(&mut rng, c.switch_matrix.row(pre_states[k]).iter().copied(), 1.0);
        let lvl = if k == ruiner { 0.0 } else { coords[k].level(tau1) };
        let slope = c.post_rewards[post_states[k]];
        coords[k].state = post_states[k];
        coords[k].slope = slope;
        coords[k].seg_t = tau1;
        coords[k].seg_level = lvl;
        coords[k].post = true;
        coords[k].segs.push(PathSegment {
            t: tau1,
            level: lvl,
            state: post_states[k],
            slope,
            post_regime: true,
        });
    }
    let b0_post_s = uniformized_transition(&spec.coord[survivor].post_generator, gamma0);
    let post_rewards_s = spec.coord[survivor].post_rewards.clone();

    // ell_star: first superposed arrival of the ruiner's grid past tau1.
    let hat_rate = gamma - gamma0;
    let mut hat1 = 0.0;
    let mut hat1_before = 0u64;
    loop {
        hat1 += exp_draw(&mut rng, hat_rate);
        if hat1 > tau1 {
            break;
        }
        hat1_before += 1;
    }
    let ell_star = base_arrivals_before_tau1 + hat1_before + 1;
    let sigma1_star = hat1.min(interval_end[ruiner]);

    // sigma2_star: arrival number ell_star on the survivor's superposed grid.
    // The survivor's base grid is extended lazily as superposed points are
    // consumed, first up to ell_star and later through the ruin scan.
    let mut tilde2: Vec<f64> = Vec::new();
    let mut base_idx = 0usize;
    let mut hat2 = exp_draw(&mut rng, hat_rate);
    let push_tilde2 = |coords: &mut Vec<UnifCoord>, rng: &mut ChaCha8Rng, tilde2: &mut Vec<f64>, hat2: &mut f64, base_idx: &mut usize| {
        while *base_idx >= coords[survivor].epochs.len() {
            let target = coords[survivor].next_epoch;
            coords[survivor].extend_to(target, &b0_post_s, &post_rewards_s, gamma0, rng);
        }
        let base_next = coords[survivor].epochs[*base_idx];
        if base_next <= *hat2 {
            tilde2.push(base_next);
            *base_idx += 1;
        } else {
            tilde2.push(*hat2);
            *hat2 += exp_draw(rng, hat_rate);
        }
    };
    while (tilde2.len() as u64) < ell_star {
        push_tilde2(&mut coords, &mut rng, &mut tilde2, &mut hat2, &mut base_idx);
    }
    let sigma2_star = tilde2[ell_star as usize - 1];

    let compat_ok = sigma1_star < interval_end[ruiner]
        && sigma2_star >= interval_start[survivor]
        && sigma2_star < interval_end[survivor];
    let (sigma1, sigma2) = if compat_ok {
        (sigma1_star, sigma2_star)
    } else {
        (tau1, tau1)
    };

    let rate_gap = |k: usize| -> f64 {
        (spec.coord[k].pre_rewards[pre_states[k]] - spec.coord[k].post_rewards[post_states[k]]).abs()
    };
    let sup_distance = [
        (sigma1 - tau1).abs() * rate_gap(ruiner),
        (sigma2 - tau1).abs() * rate_gap(survivor),
    ];

    // Pasted survivor level: original before min(tau1, sigma2), the delayed
    // (or advanced) slope on the middle interval, then the original shifted
    // by a constant gap.
    let lo = tau1.min(sigma2);
    let hi = tau1.max(sigma2);
    let mid_slope = if sigma2 >= tau1 {
        spec.coord[survivor].pre_rewards[pre_states[survivor]]
    } else {
        spec.coord[survivor].post_rewards[post_states[survivor]]
    };
    let gap = (sigma2 - tau1)
        * (spec.coord[survivor].pre_rewards[pre_states[survivor]]
            - spec.coord[survivor].post_rewards[post_states[survivor]]);

    // n_star: first superposed survivor arrival with negative pasted level.
    let mut n_star = None;
    let mut tilde_tau2 = f64::INFINITY;
    let mut n = 0usize;
    loop {
        if n >= tilde2.len() {
            push_tilde2(&mut coords, &mut rng, &mut tilde2, &mut hat2, &mut base_idx);
        }
        let t = tilde2[n];
        n += 1;
        if t > horizon {
            break;
        }
        coords[survivor].extend_to(t, &b0_post_s, &post_rewards_s, gamma0, &mut rng);
        let pasted = if t < lo {
            level_at(&coords[survivor].segs, t)
        } else if t < hi {
            level_at(&coords[survivor].segs, lo) + mid_slope * (t - lo)
        } else {
            level_at(&coords[survivor].segs, t) + gap
        };
        if pasted < 0.0 {
            n_star = Some(n as u64);
            tilde_tau2 = t;
            break;
        }
    }

    // Resolve the survivor's exact second ruin time up to the horizon.
    while coords[survivor].ruin.is_none() && coords[survivor].next_epoch <= horizon {
        let target = coords[survivor].next_epoch;
        coords[survivor].extend_to(target, &b0_post_s, &post_rewards_s, gamma0, &mut rng);
    }
    coords[survivor].note_ruin_up_to(horizon);
    let tau2 = coords[survivor].ruin.unwrap_or(f64::INFINITY);

    let paths = [std::mem::take(&mut coords[0].segs), std::mem::take(&mut coords[1].segs)];
    Ok(PastingSample {
        base: PathSample {
            seed,
            horizon,
            paths,
            tau1,
            tau2,
            first_ruiner: Some(ruiner),
            pre_switch_states: Some(pre_states),
            post_switch_states: Some(post_states),
            censored: !tau2.is_finite(),
        },
        gamma,
        ell_star: Some(ell_star),
        n_star,
        sigma1_star,
        sigma2_star,
        sigma1,
        sigma2,
        tilde_tau1: sigma1,
        tilde_tau2,
        compat_ok,
        sup_distance,
    })
}

/// Draw `m` independent exact paths in parallel, seeded per index from the
/// root; output order is independent of the worker count.
pub fn sample_exact_many(
    spec: &ModelSpec,
    m: usize,
    root_seed: u64,
    horizon: f64,
) -> Result<Vec<PathSample>, SimError> {
    if m == 0 {
        return Err(SimError::BadSampleCount);
    }
    check_horizon(horizon)?;
    (0..m as u64)
        .into_par_iter()
        .map(|i| sample_exact_path(spec, sample_seed(root_seed, i), horizon))
        .collect()
}

/// Parallel pasting samples with trajectories dropped (scalar summaries only).
pub fn sample_pasting_many(
    spec: &ModelSpec,
    gamma: f64,
    m: usize,
    root_seed: u64,
    horizon: f64,
) -> Result<Vec<PastingSample>, SimError> {
    if m == 0 {
        return Err(SimError::BadSampleCount);
    }
    check_horizon(horizon)?;
    let gamma0 = gamma_zero(spec);
    if !(gamma > gamma0) {
        return Err(SimError::GammaTooSmall { gamma, minimal: gamma0 });
    }
    (0..m as u64)
        .into_par_iter()
        .map(|i| sample_pasting(spec, gamma, sample_seed(root_seed, i), horizon).map(PastingSample::slim))
        .collect()
}

#[derive(Debug, Clone)]
pub struct EmpiricalCdf {
    pub x_grid: Vec<f64>,
    pub y_grid: Vec<f64>,
    pub order1: Array2<f64>,
    pub order2: Array2<f64>,
    pub total: Array2<f64>,
    /// Binomial standard error of `total` per cell.
    pub se: Array2<f64>,
    pub samples: usize,
    pub censoring_fraction: f64,
}

/// Empirical joint CDF of (first ruin, second ruin), split by which
/// coordinate ruined first; censored samples count as non-events.
pub fn empirical_joint_cdf(
    samples: &[PathSample],
    x_grid: &[f64],
    y_grid: &[f64],
) -> Result<EmpiricalCdf, SimError> {
    if samples.is_empty() {
        return Err(SimError::EmptySamples);
    }
    let ascending =
        |g: &[f64]| !g.is_empty() && g.iter().all(|&v| v > 0.0) && g.windows(2).all(|w| w[0] < w[1]);
    if !ascending(x_grid) || !ascending(y_grid) {
        return Err(SimError::BadGrid);
    }
    let m = samples.len();
    let shape = (x_grid.len(), y_grid.len());
    let mut order1 = Array2::zeros(shape);
    let mut order2 = Array2::zeros(shape);
    let mut censored = 0usize;
    for s in samples {
        if s.censored {
            censored += 1;
        }
        let Some(ruiner) = s.first_ruiner else { continue };
        if !s.tau2.is_finite() {
            continue;
        }
        for (xi, &x) in x_grid.iter().enumerate() {
            if s.tau1 > x {
                continue;
            }
            for (yi, &y) in y_grid.iter().enumerate() {
                if s.tau2 <= y {
                    let out = if ruiner == 0 { &mut order1 } else { &mut order2 };
                    out[(xi, yi)] += 1.0;
                }
            }
        }
    }
    let mf = m as f64;
    order1.mapv_inplace(|v| v / mf);
    order2.mapv_inplace(|v| v / mf);
    let total = &order1 + &order2;
    let se = total.mapv(|p: f64| (p * (1.0 - p) / mf).sqrt());
    Ok(EmpiricalCdf {
        x_grid: x_grid.to_vec(),
        y_grid: y_grid.to_vec(),
        order1,
        order2,
        total,
        se,
        samples: m,
        censoring_fraction: censored as f64 / mf,
    })
}

#[derive(Debug, Clone)]
pub struct ConvergenceBudget {
    pub epsilon: f64,
    pub q: f64,
    pub gammas: Vec<f64>,
}

impl ConvergenceBudget {
    /// Error-scale shape (log gamma) * gamma^(-1/2 + epsilon/2), unit constant.
    pub fn delta(&self, gamma: f64) -> f64 {
        gamma.ln() * gamma.powf(-0.5 + self.epsilon / 2.0)
    }

    /// Admissible-horizon shape gamma^epsilon, unit constant.
    pub fn kappa(&self, gamma: f64) -> f64 {
        gamma.powf(self.epsilon)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let ok = self.epsilon > 0.0
            && self.epsilon < 1.0
            && self.q > 0.0
            && !self.gammas.is_empty()
            && self.gammas.windows(2).all(|w| w[0] < w[1])
            && self.gammas[0] > 1.0
            && self
                .gammas
                .windows(2)
                .all(|w| self.delta(w[1]) < self.delta(w[0]) && self.kappa(w[1]) > self.kappa(w[0]));
        if ok {
            Ok(())
        } else {
            Err(SimError::BadBudget)
        }
    }
}

#[derive(Debug, Clone)]
pub struct GammaReport {
    pub gamma: f64,
    pub samples: usize,
    /// Samples with both exact and pasted ruin times observed.
    pub used: usize,
    pub censored_fraction: f64,
    pub incompat_fraction: f64,
    pub median_tau1_sigma1: f64,
    pub median_tau1_sigma2: f64,
    pub median_tilde_tau1_err: f64,
    pub median_tilde_tau2_err: f64,
    pub median_ell_scaled_err: f64,
    pub median_n_scaled_err: f64,
    pub mean_tau1_sigma1: f64,
    /// Sup-gap bound violations among compatible samples, with the bound
    /// constant taken as (max pre rate + max post rate) as printed.
    pub bound_violations_signed: usize,
    /// Same with absolute values of the rates (the provable constant).
    pub bound_violations_abs: usize,
}

fn median_of(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-gamma convergence diagnostics over paired seed sets.
pub fn convergence_report(
    spec: &ModelSpec,
    budget: &ConvergenceBudget,
    m: usize,
    root_seed: u64,
    horizon: f64,
) -> Result<Vec<GammaReport>, SimError> {
    budget.validate()?;
    if m < 100 {
        return Err(SimError::BadSampleCount);
    }
    let bound_consts = |k: usize, absolute: bool| -> f64 {
        let f = |v: f64| if absolute { v.abs() } else { v };
        let max_pre = spec.coord[k].pre_rewards.iter().copied().map(f).fold(f64::NEG_INFINITY, f64::max);
        let max_post = spec.coord[k].post_rewards.iter().copied().map(f).fold(f64::NEG_INFINITY, f64::max);
        max_pre + max_post
    };
    budget
        .gammas
        .iter()
        .map(|&gamma| {
            let samples = sample_pasting_many(spec, gamma, m, root_seed, horizon)?;
            let mut d_sigma1 = Vec::new();
            let mut d_sigma2 = Vec::new();
            let mut d_ttau1 = Vec::new();
            let mut d_ttau2 = Vec::new();
            let mut d_ell = Vec::new();
            let mut d_n = Vec::new();
            let mut censored = 0usize;
            let mut incompat = 0usize;
            let mut with_tau1 = 0usize;
            let mut used = 0usize;
            let mut viol_signed = 0usize;
            let mut viol_abs = 0usize;
            for s in &samples {
                if s.base.censored {
                    censored += 1;
                }
                if !s.base.tau1.is_finite() {
                    continue;
                }
                with_tau1 += 1;
                if !s.compat_ok {
                    incompat += 1;
                }
                if s.compat_ok {
                    let ruiner = s.base.first_ruiner.unwrap();
                    let pairs = [(0usize, ruiner, s.sigma1), (1, 1 - ruiner, s.sigma2)];
                    for (slot, coord, sigma) in pairs {
                        let dist = (sigma - s.base.tau1).abs();
                        if s.sup_distance[slot] > dist * bound_consts(coord, false) + 1e-9 {
                            viol_signed += 1;
                        }
                        if s.sup_distance[slot] > dist * bound_consts(coord, true) + 1e-9 {
                            viol_abs += 1;
                        }
                    }
                }
                // Distance medians are conditional on the pasting actually
                // engaging: incompatible samples fall back to sigma = tau1,
                // which pins their tilde distances at exactly zero and would
                // deflate the medians most at low rates.
                if !s.compat_ok || !(s.base.tau2.is_finite() && s.tilde_tau2.is_finite()) {
                    continue;
                }
                used += 1;
                d_sigma1.push((s.base.tau1 - s.sigma1_star).abs());
                d_sigma2.push((s.base.tau1 - s.sigma2_star).abs());
                d_ttau1.push((s.tilde_tau1 - s.base.tau1).abs());
                d_ttau2.push((s.tilde_tau2 - s.base.tau2).abs());
                d_ell.push((s.ell_star.unwrap() as f64 / gamma - s.base.tau1).abs());
                d_n.push((s.n_star.unwrap() as f64 / gamma - s.base.tau2).abs());
            }
            let mean_sigma1 = if d_sigma1.is_empty() {
                f64::NAN
            } else {
                d_sigma1.iter().sum::<f64>() / d_sigma1.len() as f64
            };
            Ok(GammaReport {
                gamma,
                samples: samples.len(),
                used,
                censored_fraction: censored as f64 / samples.len() as f64,
                incompat_fraction: if with_tau1 > 0 {
                    incompat as f64 / with_tau1 as f64
                } else {
                    f64::NAN
                },
                median_tau1_sigma1: median_of(d_sigma1),
                median_tau1_sigma2: median_of(d_sigma2),
                median_tilde_tau1_err: median_of(d_ttau1),
                median_tilde_tau2_err: median_of(d_ttau2),
                median_ell_scaled_err: median_of(d_ell),
                median_n_scaled_err: median_of(d_n),
                mean_tau1_sigma1: mean_sigma1,
                bound_violations_signed: viol_signed,
                bound_violations_abs: viol_abs,
            })
        })
        .collect()
}

/// Two-sided Kolmogorov–Smirnov distance against Exp(rate).
pub fn ks_distance_exponential(values: &[f64], rate: f64) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let cdf = 1.0 - (-rate * x).exp();
            let hi = ((i + 1) as f64 / n - cdf).abs();
            let lo = (cdf - i as f64 / n).abs();
            hi.max(lo)
        })
        .fold(0.0, f64::max)
}

/// Sample dump rows for pasting samples (see the CLI's `simulate`).
pub fn pasting_samples_to_csv(samples: &[PastingSample]) -> String {
    use crate::joint::fmt_g12 as g;
    let mut out = String::from(
        "seed,tau1,tau2,first_ruiner,censored,ell_star,n_star,sigma1,sigma2,sup_dist1,sup_dist2,compat_ok\n",
    );
    for s in samples {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            s.base.seed,
            g(s.base.tau1),
            g(s.base.tau2),
            s.base.first_ruiner.map_or(0, |r| r + 1),
            u8::from(s.base.censored),
            s.ell_star.map_or_else(|| "0".into(), |v| v.to_string()),
            s.n_star.map_or_else(|| "0".into(), |v| v.to_string()),
            g(s.sigma1),
            g(s.sigma2),
            g(s.sup_distance[0]),
            g(s.sup_distance[1]),
            u8::from(s.compat_ok),
        ));
    }
    out
}

pub fn convergence_reports_to_csv(reports: &[GammaReport]) -> String {
    use crate::joint::fmt_g12 as g;
    let mut out = String::from(
        "gamma,samples,used,censored_fraction,incompat_fraction,median_tau1_sigma1,median_tau1_sigma2,median_tilde_tau1_err,median_tilde_tau2_err,median_ell_scaled_err,median_n_scaled_err,mean_tau1_sigma1,bound_violations_signed,bound_violations_abs\n",
    );
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            g(r.gamma),
            r.samples,
            r.used,
            g(r.censored_fraction),
            g(r.incompat_fraction),
            g(r.median_tau1_sigma1),
            g(r.median_tau1_sigma2),
            g(r.median_tilde_tau1_err),
            g(r.median_tilde_tau2_err),
            g(r.median_ell_scaled_err),
            g(r.median_n_scaled_err),
            g(r.mean_tau1_sigma1),
            r.bound_violations_signed,
            r.bound_violations_abs,
        ));
    }
    out
}
