//! Acceptance suite for `netfolio-core`; see `tests/acceptance.rs`.
