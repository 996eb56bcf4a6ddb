//! Bivariate fluid model specification: parsing, validation, and derived
//! structural data (sign partitions, minimal observation rate).

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for generator row sums and switch-matrix stochasticity checks.
pub const ROW_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("dimension mismatch in {field}: expected {expected}, got {got}")]
    Dimension {
        field: String,
        expected: String,
        got: String,
    },
}

/// One coordinate of the bivariate model: a pre-ruin regime, a post-ruin
/// regime, and the switch matrix that connects them at the first ruin time.
#[derive(Debug, Clone)]
pub struct CoordinateModel {
    pub pre_states: Vec<String>,
    pub post_states: Vec<String>,
    /// Intensity matrix over `pre_states`, 1/time.
    pub pre_generator: Array2<f64>,
    /// Intensity matrix over `post_states`, 1/time.
    pub post_generator: Array2<f64>,
    /// Fluid rates in the pre regime; no entry may be zero.
    pub pre_rewards: Vec<f64>,
    /// Fluid rates in the post regime; no entry may be zero.
    pub post_rewards: Vec<f64>,
    /// Row-stochastic `pre_states x post_states` matrix applied at the switch.
    pub switch_matrix: Array2<f64>,
    pub initial_state: String,
}

/// The full bivariate specification (coordinates k = 1, 2).
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub coord: [CoordinateModel; 2],
}

/// Index partition of a coordinate's states by strict reward sign.
/// Relative order within each list follows the declared state order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignPartition {
    pub plus_pre: Vec<usize>,
    pub minus_pre: Vec<usize>,
    pub plus_post: Vec<usize>,
    pub minus_post: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

impl std::fmt::Display for Severity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Severity::Error => write!(f, "error"),
            Severity::Warning => write!(f, "warning"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Issue {
    pub severity: Severity,
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.issues.iter().all(|i| i.severity != Severity::Error)
    }

    fn error(&mut self, field: &str, message: String) {
        self.issues.push(Issue {
            severity: Severity::Error,
            field: field.to_string(),
            message,
        });
    }
}

/// Raw JSON document shape. Matrices are row-major arrays of arrays.
#[derive(Debug, Serialize, Deserialize)]
struct CoordinateDoc {
    pre_states: Vec<String>,
    post_states: Vec<String>,
    pre_generator: Vec<Vec<f64>>,
    post_generator: Vec<Vec<f64>>,
    pre_rewards: Vec<f64>,
    post_rewards: Vec<f64>,
    switch_matrix: Vec<Vec<f64>>,
    initial_state: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelDoc {
    coord1: CoordinateDoc,
    coord2: CoordinateDoc,
}

fn to_matrix(rows: &[Vec<f64>], field: &str, nrows: usize, ncols: usize) -> Result<Array2<f64>, ModelError> {
    if rows.len() != nrows {
        return Err(ModelError::Dimension {
            field: field.to_string(),
            expected: format!("{nrows} rows"),
            got: format!("{} rows", rows.len()),
        });
    }
    let mut m = Array2::zeros((nrows, ncols));
    for (i, row) in rows.iter().enumerate() {
        if row.len() != ncols {
            return Err(ModelError::Dimension {
                field: field.to_string(),
                expected: format!("{ncols} columns in row {i}"),
                got: format!("{} columns", row.len()),
            });
        }
        for (j, &v) in row.iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    Ok(m)
}

fn coord_from_doc(doc: CoordinateDoc, prefix: &str) -> Result<CoordinateModel, ModelError> {
    let ne = doc.pre_states.len();
    let ns = doc.post_states.len();
    let dim = |field: &str, expected: usize, got: usize| -> Result<(), ModelError> {
        if got != expected {
            Err(ModelError::Dimension {
                field: format!("{prefix}.{field}"),
                expected: expected.to_string(),
                got: got.to_string(),
            })
        } else {
            Ok(())
        }
    };
    dim("pre_rewards", ne, doc.pre_rewards.len())?;
    dim("post_rewards", ns, doc.post_rewards.len())?;
    Ok(CoordinateModel {
        pre_generator: to_matrix(&doc.pre_generator, &format!("{prefix}.pre_generator"), ne, ne)?,
        post_generator: to_matrix(&doc.post_generator, &format!("{prefix}.post_generator"), ns, ns)?,
        switch_matrix: to_matrix(&doc.switch_matrix, &format!("{prefix}.switch_matrix"), ne, ns)?,
        pre_states: doc.pre_states,
        post_states: doc.post_states,
        pre_rewards: doc.pre_rewards,
        post_rewards: doc.post_rewards,
        initial_state: doc.initial_state,
    })
}

fn coord_to_doc(c: &CoordinateModel) -> CoordinateDoc {
    let rows = |m: &Array2<f64>| m.outer_iter().map(|r| r.to_vec()).collect();
    CoordinateDoc {
        pre_states: c.pre_states.clone(),
        post_states: c.post_states.clone(),
        pre_generator: rows(&c.pre_generator),
        post_generator: rows(&c.post_generator),
        pre_rewards: c.pre_rewards.clone(),
        post_rewards: c.post_rewards.clone(),
        switch_matrix: rows(&c.switch_matrix),
        initial_state: c.initial_state.clone(),
    }
}

/// Parse the JSON model format. Parsing checks shape only; structural
/// constraints (row sums, signs) are left to [`validate`].
pub fn parse_model(document: &str) -> Result<ModelSpec, ModelError> {
    let doc: ModelDoc = serde_json::from_str(document).map_err(|e| {
        if e.is_syntax() || e.is_eof() {
            ModelError::Syntax {
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            }
        } else {
            ModelError::Schema(e.to_string())
        }
    })?;
    Ok(ModelSpec {
        coord: [
            coord_from_doc(doc.coord1, "coord1")?,
            coord_from_doc(doc.coord2, "coord2")?,
        ],
    })
}

/// Serialize back to the documented JSON format.
pub fn serialize_model(spec: &ModelSpec) -> String {
    let doc = ModelDoc {
        coord1: coord_to_doc(&spec.coord[0]),
        coord2: coord_to_doc(&spec.coord[1]),
    };
    serde_json::to_string_pretty(&doc).expect("model serialization cannot fail")
}

fn validate_generator(report: &mut ValidationReport, field: &str, m: &Array2<f64>) {
    for (i, row) in m.outer_iter().enumerate() {
        let sum: f64 = row.sum();
        if sum.abs() > ROW_TOL {
            report.error(field, format!("row {i} sums to {sum} (must be 0)"));
        }
        for (j, &v) in row.iter().enumerate() {
            if i == j && v > 0.0 {
                report.error(field, format!("diagonal entry ({i},{i}) is {v} > 0"));
            }
            if i != j && v < 0.0 {
                report.error(field, format!("off-diagonal entry ({i},{j}) is {v} < 0"));
            }
        }
    }
}

fn validate_coord(report: &mut ValidationReport, c: &CoordinateModel, prefix: &str) {
    validate_generator(report, &format!("{prefix}.pre_generator"), &c.pre_generator);
    validate_generator(report, &format!("{prefix}.post_generator"), &c.post_generator);
    for (i, row) in c.switch_matrix.outer_iter().enumerate() {
        let sum: f64 = row.sum();
        if (sum - 1.0).abs() > ROW_TOL {
            report.error(
                &format!("{prefix}.switch_matrix"),
                format!("row {i} sums to {sum} (must be 1)"),
            );
        }
        for (j, &v) in row.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                report.error(
                    &format!("{prefix}.switch_matrix"),
                    format!("entry ({i},{j}) is {v}, outside [0,1]"),
                );
            }
        }
    }
    for (name, rewards) in [("pre_rewards", &c.pre_rewards), ("post_rewards", &c.post_rewards)] {
        for (i, &r) in rewards.iter().enumerate() {
            if r == 0.0 {
                report.error(&format!("{prefix}.{name}"), format!("zero reward at index {i}"));
            }
            if !r.is_finite() {
                report.error(&format!("{prefix}.{name}"), format!("non-finite reward at index {i}"));
            }
        }
    }
    match c.pre_states.iter().position(|s| s == &c.initial_state) {
        None => report.error(
            &format!("{prefix}.initial_state"),
            format!("'{}' is not a pre-regime state", c.initial_state),
        ),
        Some(idx) => {
            if c.pre_rewards[idx] <= 0.0 {
                report.error(
                    &format!("{prefix}.initial_state"),
                    format!("initial reward must be positive, got {}", c.pre_rewards[idx]),
                );
            }
        }
    }
    let mut seen = std::collections::HashSet::new();
    for (name, states) in [("pre_states", &c.pre_states), ("post_states", &c.post_states)] {
        for s in states {
            if !seen.insert(s) {
                report.error(
                    &format!("{prefix}.{name}"),
                    format!("state label '{s}' reused within the coordinate"),
                );
            }
        }
    }
}

/// Check every structural invariant of the model. Violations become report
/// entries; this function never fails.
pub fn validate(spec: &ModelSpec) -> ValidationReport {
    let mut report = ValidationReport::default();
    validate_coord(&mut report, &spec.coord[0], "coord1");
    validate_coord(&mut report, &spec.coord[1], "coord2");
    // A label shared across coordinates is legal but makes per-state
    // reporting ambiguous; flag it without rejecting the model.
    let labels = |c: &CoordinateModel| -> Vec<String> {
        c.pre_states.iter().chain(&c.post_states).cloned().collect()
    };
    let first: std::collections::HashSet<String> = labels(&spec.coord[0]).into_iter().collect();
    for s in labels(&spec.coord[1]) {
        if first.contains(&s) {
            report.issues.push(Issue {
                severity: Severity::Warning,
                field: "coord2".to_string(),
                message: format!("state label '{s}' also appears in coord1"),
            });
        }
    }
    report
}

/// Partition a coordinate's state indices by the strict sign of the reward.
pub fn partition_signs(coord: &CoordinateModel) -> SignPartition {
    let split = |rewards: &[f64]| -> (Vec<usize>, Vec<usize>) {
        let plus = rewards
            .iter()
            .enumerate()
            .filter(|(_, &r)| r > 0.0)
            .map(|(i, _)| i)
            .collect();
        let minus = rewards
            .iter()
            .enumerate()
            .filter(|(_, &r)| r < 0.0)
            .map(|(i, _)| i)
            .collect();
        (plus, minus)
    };
    let (plus_pre, minus_pre) = split(&coord.pre_rewards);
    let (plus_post, minus_post) = split(&coord.post_rewards);
    SignPartition {
        plus_pre,
        minus_pre,
        plus_post,
        minus_post,
    }
}

fn max_abs_diagonal(m: &Array2<f64>) -> f64 {
    m.diag().iter().fold(0.0, |acc, d| acc.max(d.abs()))
}

/// Smallest admissible observation-rate bound for one coordinate.
pub fn gamma_zero_coord(coord: &CoordinateModel) -> f64 {
    max_abs_diagonal(&coord.pre_generator).max(max_abs_diagonal(&coord.post_generator))
}

/// Smallest admissible jump-rate bound over both coordinates and both
/// regimes; a uniformization rate must dominate every generator, so this is
/// the maximum of the per-coordinate bounds.
pub fn gamma_zero(spec: &ModelSpec) -> f64 {
    gamma_zero_coord(&spec.coord[0]).max(gamma_zero_coord(&spec.coord[1]))
}

/// Renormalize generator rows to sum 0 (adjusting diagonals) and switch rows
/// to sum 1. Applied only on explicit request, never silently.
pub fn renormalize(spec: &mut ModelSpec) {
    for c in spec.coord.iter_mut() {
        for m in [&mut c.pre_generator, &mut c.post_generator] {
            for i in 0..m.nrows() {
                let off: f64 = (0..m.ncols()).filter(|&j| j != i).map(|j| m[(i, j)]).sum();
                m[(i, i)] = -off;
            }
        }
        for mut row in c.switch_matrix.outer_iter_mut() {
            let sum: f64 = row.sum();
            if sum > 0.0 {
                row.mapv_inplace(|v| v / sum);
            }
        }
    }
}

impl CoordinateModel {
    pub fn initial_index(&self) -> usize {
        self.pre_states
            .iter()
            .position(|s| s == &self.initial_state)
            .expect("validated model has a known initial state")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_models::tm1_json;
    use proptest::prelude::*;

    #[test]
    fn parse_tm1_round_trip() {
        let spec = parse_model(&tm1_json()).unwrap();
        assert_eq!(spec.coord[0].pre_states.len(), 2);
        assert_eq!(spec.coord[0].post_states.len(), 2);
        assert_eq!(spec.coord[1].pre_states.len(), 2);
        let report = validate(&spec);
        assert!(report.ok(), "issues: {:?}", report.issues);
        // Round-trip through serialization keeps validity.
        let again = parse_model(&serialize_model(&spec)).unwrap();
        assert!(validate(&again).ok());
    }

    #[test]
    fn parse_accepts_bad_row_sum_validate_flags_it() {
        let doc = tm1_json().replace("[-1.0, 1.0]", "[-0.9, 1.0]");
        let spec = parse_model(&doc).unwrap();
        let report = validate(&spec);
        assert!(!report.ok());
        assert!(report.issues.iter().any(|i| i.field.contains("pre_generator")));
    }

    #[test]
    fn missing_switch_matrix_is_schema_error() {
        let doc = tm1_json().replace("switch_matrix", "switch_matrixx");
        match parse_model(&doc) {
            Err(ModelError::Schema(msg)) => assert!(msg.contains("switch_matrix"), "{msg}"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn zero_reward_flagged() {
        let doc = tm1_json().replacen("\"pre_rewards\": [1.0, -1.0]", "\"pre_rewards\": [0.0, -1.0]", 1);
        let spec = parse_model(&doc).unwrap();
        let report = validate(&spec);
        assert!(report
            .issues
            .iter()
            .any(|i| i.severity == Severity::Error && i.message.contains("zero reward")));
    }

    #[test]
    fn negative_initial_reward_flagged() {
        let doc = tm1_json().replacen("\"initial_state\": \"e+\"", "\"initial_state\": \"e-\"", 1);
        let spec = parse_model(&doc).unwrap();
        let report = validate(&spec);
        assert!(report
            .issues
            .iter()
            .any(|i| i.message.contains("initial reward must be positive")));
    }

    #[test]
    fn tm1_partition() {
        let spec = parse_model(&tm1_json()).unwrap();
        let p = partition_signs(&spec.coord[0]);
        assert_eq!(p.plus_pre, vec![0]);
        assert_eq!(p.minus_pre, vec![1]);
        assert_eq!(p.plus_post, vec![0]);
        assert_eq!(p.minus_post, vec![1]);
    }

    #[test]
    fn partition_degenerate_and_order() {
        let mut spec = parse_model(&tm1_json()).unwrap();
        spec.coord[0].pre_rewards = vec![1.0, 2.0];
        let p = partition_signs(&spec.coord[0]);
        assert_eq!(p.plus_pre, vec![0, 1]);
        assert!(p.minus_pre.is_empty());
        spec.coord[0].pre_rewards = vec![-1.0, 1.0];
        let p = partition_signs(&spec.coord[0]);
        assert_eq!(p.plus_pre, vec![1]);
        assert_eq!(p.minus_pre, vec![0]);
    }

    #[test]
    fn gamma_zero_tm1() {
        let spec = parse_model(&tm1_json()).unwrap();
        assert_eq!(gamma_zero(&spec), 2.0);
    }

    #[test]
    fn gamma_zero_absorbing_generator() {
        let mut spec = parse_model(&tm1_json()).unwrap();
        spec.coord[0].pre_generator.fill(0.0);
        // Remaining diagonals are -1 (pre of coord 2) and -2 (posts).
        assert_eq!(gamma_zero(&spec), 2.0);
        spec.coord[0].post_generator.fill(0.0);
        spec.coord[1].pre_generator.fill(0.0);
        spec.coord[1].post_generator.fill(0.0);
        assert_eq!(gamma_zero(&spec), 0.0);
    }

    fn arb_rates(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(prop_oneof![0.1f64..5.0, -5.0f64..-0.1], n)
    }

    fn arb_generator(n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(0.0f64..3.0, n), n).prop_map(move |mut rows| {
            for (i, row) in rows.iter_mut().enumerate() {
                row[i] = 0.0;
                let s: f64 = row.iter().sum();
                row[i] = -s;
            }
            rows
        })
    }

    fn arb_spec() -> impl Strategy<Value = ModelSpec> {
        let coord = |tag: &'static str| {
            (arb_generator(3), arb_generator(2), arb_rates(3), arb_rates(2)).prop_map(
                move |(pre_g, post_g, mut pre_r, post_r)| {
                    pre_r[0] = pre_r[0].abs();
                    CoordinateModel {
                        pre_states: (0..3).map(|i| format!("{tag}e{i}")).collect(),
                        post_states: (0..2).map(|i| format!("{tag}s{i}")).collect(),
                        pre_generator: to_matrix(&pre_g, "g", 3, 3).unwrap(),
                        post_generator: to_matrix(&post_g, "g", 2, 2).unwrap(),
                        pre_rewards: pre_r,
                        post_rewards: post_r,
                        switch_matrix: Array2::from_elem((3, 2), 0.5),
                        initial_state: format!("{tag}e0"),
                    }
                },
            )
        };
        (coord("a"), coord("b")).prop_map(|(c1, c2)| ModelSpec { coord: [c1, c2] })
    }

    proptest! {
        #[test]
        fn round_trip_preserves_validity(spec in arb_spec()) {
            let ok = validate(&spec).ok();
            let parsed = parse_model(&serialize_model(&spec)).unwrap();
            prop_assert_eq!(validate(&parsed).ok(), ok);
        }

        #[test]
        fn gamma_zero_dominates_all_diagonals(spec in arb_spec()) {
            let g0 = gamma_zero(&spec);
            for c in &spec.coord {
                for m in [&c.pre_generator, &c.post_generator] {
                    for d in m.diag() {
                        prop_assert!(g0 >= d.abs());
                    }
                }
            }
        }

        #[test]
        fn partition_is_a_partition(spec in arb_spec()) {
            for c in &spec.coord {
                let p = partition_signs(c);
                let mut pre: Vec<usize> = p.plus_pre.iter().chain(&p.minus_pre).copied().collect();
                pre.sort_unstable();
                prop_assert_eq!(pre, (0..c.pre_states.len()).collect::<Vec<_>>());
                let mut post: Vec<usize> = p.plus_post.iter().chain(&p.minus_post).copied().collect();
                post.sort_unstable();
                prop_assert_eq!(post, (0..c.post_states.len()).collect::<Vec<_>>());
            }
        }
    }
}
