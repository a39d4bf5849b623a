mod common;

use common::fixture_path;
use teleop_core::fixtures;
use teleop_io::config::SessionConfig;
use teleop_io::openxr::JointMap;
use teleop_io::synth::demo_stream_text;

#[test]
fn tracking_fixture_matches_generator() {
    let committed = std::fs::read_to_string(fixture_path("tracking_3s.stream")).unwrap();
    assert!(committed == demo_stream_text(&fixtures::hand12_generic()), "run the ignored `regenerate_tracking_fixture` test");
}

#[test]
#[ignore = "rewrites fixtures/tracking_3s.stream"]
fn regenerate_tracking_fixture() {
    std::fs::write(fixture_path("tracking_3s.stream"), demo_stream_text(&fixtures::hand12_generic())).unwrap();
}

#[test]
fn shipped_configs_load() {
    SessionConfig::load(fixture_path("session.toml")).unwrap();
    JointMap::load(fixture_path("openxr26_to_mediapipe21.toml")).unwrap();
}
