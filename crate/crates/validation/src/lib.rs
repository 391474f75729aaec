//! Holds the `acceptance` test target, which checks the model, data and
//! evaluation code end to end. See `tests/acceptance.rs`.
