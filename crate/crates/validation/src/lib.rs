//! Hosts the end-to-end acceptance suite in `tests/acceptance.rs`, run
//! after every other test target in the workspace.
