//! Holds the `acceptance` test target; run it with
//! `cargo test -p metric-regions-validation --test acceptance`.
