//! A desk-scale laboratory for studying how distillation changes what small
//! models learn from sequence data.
//!
//! The pieces fit together like this: [`markov`] builds trigger-augmented
//! bigram chains and samples token sequences from them; [`tabular`] fits
//! closed-form bigram students to those sequences and measures sample
//! complexity; [`model`] is a from-scratch micro-transformer with exact
//! hand-written gradients; [`loss`] implements the blended hard/soft training
//! objective along with entropy-based token routing and sparsified teacher
//! labels; [`passk`] analyzes best-of-k selection both in closed form and by
//! Monte Carlo; [`eval`] scores trained students for in-context copying and
//! per-row distributional fit; [`harness`] ties the stages into a resumable,
//! content-addressed experiment pipeline.
//!
//! Every stochastic step draws from an explicit `(seed, domain, index)`
//! stream (see [`rng`]), so any artifact can be regenerated bit-for-bit.
//!
//! The `examples/` directory is the guided tour: each example is a runnable
//! demonstration of one capability, ordered from data generation through the
//! full pipeline.

pub mod error;
pub mod eval;
pub mod harness;
pub mod loss;
pub mod markov;
pub mod model;
pub mod passk;
pub mod rng;
pub mod tabular;

pub use error::{Error, Result};
