//! Scenarios shipped with the crate.

use super::{parse_scenario_str, Scenario};

pub const NAMES: &[&str] = &[
    "av_plastic_bag",
    "av_missed_obstacle",
    "assistant_vetting",
    "swarm_formation",
    "common_mode_breach",
    "voter_thresholds_2oo3",
];

pub fn source(name: &str) -> Option<&'static str> {
    Some(match name {
        "av_plastic_bag" => include_str!("../../scenarios/av_plastic_bag.toml"),
        "av_missed_obstacle" => include_str!("../../scenarios/av_missed_obstacle.toml"),
        "assistant_vetting" => include_str!("../../scenarios/assistant_vetting.toml"),
        "swarm_formation" => include_str!("../../scenarios/swarm_formation.toml"),
        "common_mode_breach" => include_str!("../../scenarios/common_mode_breach.toml"),
        "voter_thresholds_2oo3" => include_str!("../../scenarios/voter_thresholds_2oo3.toml"),
        _ => return None,
    })
}

/// Parses a bundled scenario. Panics only if a shipped file is broken,
/// which the test suite rules out.
pub fn load(name: &str) -> Option<Scenario> {
    source(name).map(|text| {
        parse_scenario_str(text).unwrap_or_else(|e| panic!("bundled scenario {name}: {e}"))
    })
}
