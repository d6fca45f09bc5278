//! Holds the acceptance suite in `tests/acceptance.rs`; it runs after the other workspace tests.
