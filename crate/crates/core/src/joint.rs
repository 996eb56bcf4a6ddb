//! Assembly of the approximate joint distribution of the two ruin times
//! from per-coordinate step probabilities, on a user time grid.

use ndarray::Array2;
use thiserror::Error;

use crate::bridge::{BridgeError, QTable};
use crate::model::{gamma_zero, partition_signs, ModelSpec};
use crate::uniformization::build_kernel;

#[derive(Debug, Error)]
pub enum JointError {
    #[error(transparent)]
    Bridge(#[from] BridgeError),
    #[error("grid must be nonempty, strictly ascending and positive")]
    BadGrid,
    #[error("n_max {n_max} truncates the step sums (need {needed}); pass allow_truncation to accept the reported defect")]
    Truncated { n_max: usize, needed: usize },
    #[error("n_max must be at least 2, got {0}")]
    BadNMax(usize),
    #[error("gamma {gamma} must exceed {minimal}")]
    GammaTooSmall { gamma: f64, minimal: f64 },
}

#[derive(Debug, Clone)]
pub struct JointLawRequest {
    pub spec: ModelSpec,
    pub gamma: f64,
    pub x_grid: Vec<f64>,
    pub y_grid: Vec<f64>,
    pub n_max: usize,
    pub allow_truncation: bool,
}

#[derive(Debug, Clone)]
pub struct JointLawResult {
    pub x_grid: Vec<f64>,
    pub y_grid: Vec<f64>,
    /// P(first ruin <= x, second ruin <= y, coordinate 1 ruins first).
    pub order1: Array2<f64>,
    /// Same with coordinate 2 ruining first.
    pub order2: Array2<f64>,
    /// order1 + order2.
    pub total: Array2<f64>,
    /// Approximate CDF of the first ruin time at each x.
    pub marginal_tau1: Vec<f64>,
    /// Conservative bound on mass ignored beyond n_max, per cell.
    pub truncation_defect: Array2<f64>,
}

/// Per-coordinate step probabilities up to n_max.
///
/// `p1[k][l-2]` is the probability that coordinate k's ruin is confirmed
/// exactly at step l with no earlier behavioral switch; `p2[k][l-1][n-l]`
/// the probability that its ruin is confirmed at step n given a switch at
/// step l.
#[derive(Debug, Clone)]
pub struct StepPmfTables {
    pub n_max: usize,
    pub p1: [Vec<f64>; 2],
    pub p2: [Vec<Vec<f64>>; 2],
}

impl StepPmfTables {
    pub fn p1(&self, coord: usize, ell: usize) -> f64 {
        if (2..=self.n_max).contains(&ell) {
            self.p1[coord][ell - 2]
        } else {
            0.0
        }
    }

    pub fn p2(&self, coord: usize, ell: usize, n: usize) -> f64 {
        if ell >= 1 && n >= ell && n <= self.n_max {
            self.p2[coord][ell - 1][n - ell]
        } else {
            0.0
        }
    }
}

/// Row index of a coordinate's initial state within the positive-rate
/// ordering used by the recursion.
fn initial_row(spec: &ModelSpec, coord: usize) -> usize {
    let c = &spec.coord[coord];
    let p = partition_signs(c);
    let idx = c.initial_index();
    p.plus_pre
        .iter()
        .position(|&i| i == idx)
        .expect("initial state has positive reward")
}

/// Build both coordinates' step-probability tables by the recursion.
pub fn step_pmf_table(spec: &ModelSpec, gamma: f64, n_max: usize) -> Result<StepPmfTables, JointError> {
    if n_max < 2 {
        return Err(JointError::BadNMax(n_max));
    }
    let minimal = gamma_zero(spec);
    if !(gamma > minimal) {
        return Err(JointError::GammaTooSmall { gamma, minimal });
    }
    let mut p1: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    let mut p2: [Vec<Vec<f64>>; 2] = [Vec::new(), Vec::new()];
    for k in 0..2 {
        let table = QTable::new(build_kernel(&spec.coord[k], gamma).map_err(BridgeError::from)?);
        let row = initial_row(spec, k);
        for ell in 2..=n_max {
            p1[k].push(table.ruin_step_pmf(row, ell as i64, ell)?);
        }
        for ell in 1..=n_max {
            let mut per_n = Vec::with_capacity(n_max - ell + 1);
            for n in ell..=n_max {
                // n == ell uses the coincident-step convention: confirmation
                // at the switch step itself, still in the pre regime.
                let v = if n < 2 {
                    0.0
                } else {
                    table.ruin_step_pmf(row, ell as i64, n)?
                };
                per_n.push(v);
            }
            p2[k].push(per_n);
        }
    }
    Ok(StepPmfTables { n_max, p1, p2 })
}

/// Evaluate the joint CDF approximation on the request grid.
pub fn joint_cdf(req: &JointLawRequest) -> Result<JointLawResult, JointError> {
    let ascending = |g: &[f64]| {
        !g.is_empty() && g.iter().all(|&v| v > 0.0) && g.windows(2).all(|w| w[0] < w[1])
    };
    if !ascending(&req.x_grid) || !ascending(&req.y_grid) {
        return Err(JointError::BadGrid);
    }
    let max_grid = req
        .x_grid
        .last()
        .unwrap()
        .max(*req.y_grid.last().unwrap());
    let needed = (req.gamma * max_grid).floor() as usize;
    if req.n_max < needed && !req.allow_truncation {
        return Err(JointError::Truncated {
            n_max: req.n_max,
            needed,
        });
    }
    let tables = step_pmf_table(&req.spec, req.gamma, req.n_max)?;
    let n_max = req.n_max;

    // Cumulative-in-n sums of p2 so each cell is a single pass over ell.
    // cum_p2[k][ell-1][m] = sum over n in ell..=ell+m of p2(ell, n).
    let cum_p2: Vec<Vec<Vec<f64>>> = (0..2)
        .map(|k| {
            tables.p2[k]
                .iter()
                .map(|per_n| {
                    let mut acc = 0.0;
                    per_n
                        .iter()
                        .map(|&v| {
                            acc += v;
                            acc
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let p2_cum_up_to = |k: usize, ell: usize, n_cap: usize| -> f64 {
        if n_cap < ell {
            0.0
        } else {
            cum_p2[k][ell - 1][n_cap.min(n_max) - ell]
        }
    };

    let nx = req.x_grid.len();
    let ny = req.y_grid.len();
    let mut order1 = Array2::zeros((nx, ny));
    let mut order2 = Array2::zeros((nx, ny));
    let mut defect = Array2::zeros((nx, ny));
    // Total mass retained per coordinate, for defect accounting.
    let p1_total: [f64; 2] = [tables.p1[0].iter().sum(), tables.p1[1].iter().sum()];

    for (xi, &x) in req.x_grid.iter().enumerate() {
        let l_cap_full = (req.gamma * x).floor() as usize;
        let l_cap = l_cap_full.min(n_max);
        for (yi, &y) in req.y_grid.iter().enumerate() {
            let n_cap_full = (req.gamma * y).floor() as usize;
            let n_cap = n_cap_full.min(n_max);
            for (first, second, out) in [(0usize, 1usize, &mut order1), (1, 0, &mut order2)] {
                let mut cell = 0.0;
                for ell in 2..=l_cap {
                    cell += tables.p1(first, ell) * p2_cum_up_to(second, ell, n_cap);
                }
                out[(xi, yi)] += cell;
                // Mass the truncation may have dropped for this ordering.
                let mut d = 0.0;
                if l_cap_full > n_max {
                    d += 1.0 - p1_total[first];
                }
                if n_cap_full > n_max {
                    for ell in 2..=l_cap {
                        d += tables.p1(first, ell) * (1.0 - p2_cum_up_to(second, ell, n_max));
                    }
                }
                defect[(xi, yi)] += d;
            }
        }
    }
    let total = &order1 + &order2;

    // Marginal of the first ruin time from per-coordinate survival.
    let marginal_tau1 = req
        .x_grid
        .iter()
        .map(|&x| {
            let l_cap = ((req.gamma * x).floor() as usize).min(n_max);
            let s: [f64; 2] = [0, 1].map(|k| (2..=l_cap).map(|l| tables.p1(k, l)).sum());
            1.0 - (1.0 - s[0]) * (1.0 - s[1])
        })
        .collect();

    Ok(JointLawResult {
        x_grid: req.x_grid.clone(),
        y_grid: req.y_grid.clone(),
        order1,
        order2,
        total,
        marginal_tau1,
        truncation_defect: defect,
    })
}

/// Format a value like C's %.12g.
pub fn fmt_g12(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let exp = v.abs().log10().floor() as i32;
    if (-4..12).contains(&exp) {
        let decimals = (11 - exp).max(0) as usize;
        let s = format!("{:.*}", decimals, v);
        let s = s.trim_end_matches('0').trim_end_matches('.').to_string();
        if s == "-0" {
            "0".to_string()
        } else {
            s
        }
    } else {
        let s = format!("{:.11e}", v);
        // Normalize the exponent to printf style (e+05 / e-05).
        let (mantissa, e) = s.split_once('e').unwrap();
        let mantissa = mantissa.trim_end_matches('0').trim_end_matches('.');
        let exp_val: i32 = e.parse().unwrap();
        format!("{}e{}{:02}", mantissa, if exp_val < 0 { '-' } else { '+' }, exp_val.abs())
    }
}

/// The documented per-cell CSV of a joint-law result.
pub fn result_to_csv(r: &JointLawResult) -> String {
    let mut out = String::from("x,y,order1,order2,total,defect\n");
    for (xi, &x) in r.x_grid.iter().enumerate() {
        for (yi, &y) in r.y_grid.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                fmt_g12(x),
                fmt_g12(y),
                fmt_g12(r.order1[(xi, yi)]),
                fmt_g12(r.order2[(xi, yi)]),
                fmt_g12(r.total[(xi, yi)]),
                fmt_g12(r.truncation_defect[(xi, yi)]),
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_models::tm1_spec;

    fn request(gamma: f64, x: Vec<f64>, y: Vec<f64>, n_max: usize) -> JointLawRequest {
        JointLawRequest {
            spec: tm1_spec(),
            gamma,
            x_grid: x,
            y_grid: y,
            n_max,
            allow_truncation: false,
        }
    }

    #[test]
    fn tm1_step_tables() {
        let t = step_pmf_table(&tm1_spec(), 10.0, 2).unwrap();
        assert!((t.p1(0, 2) - 0.05).abs() < 1e-15);
        assert!((t.p1(1, 2) - 0.05).abs() < 1e-15);
        assert!((t.p2(0, 1, 2) - 1.0 / 3.0).abs() < 1e-15);
        // Shapes: p1 one entry, p2 entries (1,2),(2,2) only.
        assert_eq!(t.p1[0].len(), 1);
        assert_eq!(t.p2[0].len(), 2);
        assert_eq!(t.p2[0][0].len(), 2);
        assert_eq!(t.p2[0][1].len(), 1);
        // p2(1,1) is the impossible one-step confirmation.
        assert_eq!(t.p2(0, 1, 1), 0.0);
    }

    #[test]
    fn two_term_cell_hand_check() {
        let r = joint_cdf(&request(10.0, vec![0.2], vec![0.2], 2)).unwrap();
        let t = step_pmf_table(&tm1_spec(), 10.0, 2).unwrap();
        let expected = t.p1(0, 2) * t.p2(1, 2, 2);
        assert!((r.order1[(0, 0)] - expected).abs() < 1e-15);
        // Symmetric model: both orderings identical.
        assert!((r.order1[(0, 0)] - r.order2[(0, 0)]).abs() < 1e-14);
        assert!((r.total[(0, 0)] - 2.0 * expected).abs() < 1e-14);
        assert_eq!(r.truncation_defect[(0, 0)], 0.0);
    }

    #[test]
    fn empty_range_cells_are_zero() {
        // floor(gamma * y) < 2 leaves no admissible steps.
        let r = joint_cdf(&request(10.0, vec![0.5], vec![0.1], 5)).unwrap();
        assert_eq!(r.order1[(0, 0)], 0.0);
        assert_eq!(r.total[(0, 0)], 0.0);
    }

    #[test]
    fn floor_dependence() {
        let a = joint_cdf(&request(10.0, vec![0.21], vec![0.35], 4)).unwrap();
        let b = joint_cdf(&request(10.0, vec![0.29], vec![0.39], 4)).unwrap();
        assert_eq!(a.total[(0, 0)], b.total[(0, 0)]);
        assert_eq!(a.marginal_tau1[0], b.marginal_tau1[0]);
    }

    #[test]
    fn refinement_consistency_and_monotonicity() {
        let coarse = joint_cdf(&request(10.0, vec![0.5, 1.0], vec![0.5, 1.0], 10)).unwrap();
        let fine = joint_cdf(&request(10.0, vec![0.3, 0.5, 0.8, 1.0], vec![0.5, 0.7, 1.0], 10)).unwrap();
        assert_eq!(coarse.total[(0, 0)], fine.total[(1, 0)]);
        assert_eq!(coarse.total[(1, 1)], fine.total[(3, 2)]);
        for xi in 0..4 {
            for yi in 0..3 {
                if xi > 0 {
                    assert!(fine.total[(xi, yi)] >= fine.total[(xi - 1, yi)]);
                }
                if yi > 0 {
                    assert!(fine.total[(xi, yi)] >= fine.total[(xi, yi - 1)]);
                }
                assert!((0.0..=1.0).contains(&fine.total[(xi, yi)]));
            }
        }
    }

    #[test]
    fn truncation_refused_then_allowed() {
        let mut req = request(10.0, vec![1.0], vec![2.0], 5);
        match joint_cdf(&req) {
            Err(JointError::Truncated { needed, .. }) => assert_eq!(needed, 20),
            other => panic!("expected truncation refusal, got {other:?}"),
        }
        req.allow_truncation = true;
        let r = joint_cdf(&req).unwrap();
        assert!(r.truncation_defect[(0, 0)] > 0.0);
    }

    #[test]
    fn defect_bracket_tightens_with_n_max() {
        // total is nondecreasing and total + defect is a nonincreasing upper
        // bound; both collapse onto the exact value once nothing is truncated.
        let exact = joint_cdf(&request(10.0, vec![1.0], vec![2.0], 25)).unwrap().total[(0, 0)];
        let mut prev_total = 0.0;
        let mut prev_cover = f64::INFINITY;
        for n_max in [3, 5, 8, 12, 20] {
            let mut req = request(10.0, vec![1.0], vec![2.0], n_max);
            req.allow_truncation = true;
            let r = joint_cdf(&req).unwrap();
            let total = r.total[(0, 0)];
            let cover = total + r.truncation_defect[(0, 0)];
            assert!(total >= prev_total - 1e-12, "n_max={n_max}");
            assert!(cover <= prev_cover + 1e-12, "n_max={n_max}");
            assert!(cover >= exact - 1e-12, "n_max={n_max}");
            prev_total = total;
            prev_cover = cover;
        }
        let r = joint_cdf(&request(10.0, vec![1.0], vec![2.0], 20)).unwrap();
        assert_eq!(r.truncation_defect[(0, 0)], 0.0);
    }

    #[test]
    fn bad_grids_rejected() {
        assert!(matches!(
            joint_cdf(&request(10.0, vec![0.5, 0.4], vec![0.5], 6)),
            Err(JointError::BadGrid)
        ));
        assert!(matches!(
            joint_cdf(&request(10.0, vec![], vec![0.5], 6)),
            Err(JointError::BadGrid)
        ));
        assert!(matches!(
            joint_cdf(&request(10.0, vec![-0.5, 0.5], vec![0.5], 6)),
            Err(JointError::BadGrid)
        ));
    }

    #[test]
    fn fmt_g12_cases() {
        assert_eq!(fmt_g12(0.0), "0");
        assert_eq!(fmt_g12(0.05), "0.05");
        assert_eq!(fmt_g12(1.0 / 3.0), "0.333333333333");
        assert_eq!(fmt_g12(2.0), "2");
        assert_eq!(fmt_g12(1.5e-7), "1.5e-07");
        assert_eq!(fmt_g12(-0.25), "-0.25");
    }

    #[test]
    fn csv_shape() {
        let r = joint_cdf(&request(10.0, vec![0.2, 0.4], vec![0.2], 4)).unwrap();
        let csv = result_to_csv(&r);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "x,y,order1,order2,total,defect");
        assert_eq!(lines.len(), 3);
    }
}
