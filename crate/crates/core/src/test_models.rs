//! Small reference models shared by unit, integration, and acceptance tests.

use crate::model::{parse_model, ModelSpec};

/// Symmetric two-coordinate toy model: per coordinate, two pre states with
/// rewards (+1, -1) and generator rate 1, two post states with rewards
/// (+1, -2) and generator rate 2, uniform switch matrix.
pub fn tm1_json() -> String {
    let coord = r#"{
    "pre_states": ["e+", "e-"],
    "post_states": ["s+", "s-"],
    "pre_generator": [[-1.0, 1.0], [1.0, -1.0]],
    "post_generator": [[-2.0, 2.0], [2.0, -2.0]],
    "pre_rewards": [1.0, -1.0],
    "post_rewards": [1.0, -2.0],
    "switch_matrix": [[0.5, 0.5], [0.5, 0.5]],
    "initial_state": "e+"
  }"#;
    format!("{{\n  \"coord1\": {coord},\n  \"coord2\": {coord}\n}}")
}

pub fn tm1_spec() -> ModelSpec {
    parse_model(&tm1_json()).expect("TM1 is well-formed")
}
