//! Holds the `acceptance` integration target, which exercises
//! `ncdlab-core` end to end: gradient and metric oracles, the separability
//! counterexample, the severity sweep and the optimizer contracts.
//!
//! Run it alone with `cargo test -p ncdlab-validation --test acceptance -- --nocapture`.
