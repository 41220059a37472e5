//! Fixture loading shared by the benchmarks.

use std::path::{Path, PathBuf};

use hybridsync_core::{load_cluster_spec, load_graph_spec, ClusterSpec, GraphSpec};

pub fn fixture_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

pub fn graph(name: &str) -> GraphSpec {
    let text = std::fs::read_to_string(fixture_path(name)).expect("fixture exists");
    load_graph_spec(&text).expect("fixture parses")
}

pub fn cluster() -> ClusterSpec {
    let text = std::fs::read_to_string(fixture_path("cluster8x6.json")).expect("fixture exists");
    load_cluster_spec(&text).expect("fixture parses")
}
