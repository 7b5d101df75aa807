//! Certificate synthesis for dynamical systems.
//!
//! A counterexample-guided loop trains a small neural certificate (and
//! optionally a feedback controller) against rule-violation losses, while a
//! sound interval branch-and-bound verifier either certifies the compiled
//! verification conditions or returns counterexamples for further training.

pub mod cegis;
pub mod expr;
pub mod learner;
pub mod model;
pub mod net;
pub mod rules;
pub mod sim;
pub mod verifier;
