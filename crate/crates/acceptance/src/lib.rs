//! Acceptance-test host crate; see tests/acceptance.rs.
