//! Random walks on the strip `ℤ × {1, …, d}` in a random environment.
//!
//! The crate computes and cross-checks the quantities that govern a walk
//! transient to the right: exit matrices and their fixed-point recursion,
//! the top Lyapunov exponent of the `a_n` products, the asymptotic speed,
//! first and second moments of crossing times, the hitting-time CLT
//! variance, renewal times, and the law of the environment seen from the
//! walker.
//!
//! Module map:
//! - [`smallmat`]: dense `d × d` kernel, resolvents, log-scaled products.
//! - [`strip_env`]: letters, environment laws, windows, embeddings.
//! - [`exitprob`]: exit matrices `η_n`, `π`, left-exit matrices, and an
//!   absorbing-chain oracle on finite strips.
//! - [`asymptotics`]: Lyapunov exponent, speed, crossing moments, CLT
//!   variance, decay diagnostics.
//! - [`walker`]: quenched simulation, renewals, environment seen from the
//!   particle.
//! - [`experiments`]: scenario configuration, reports, validation battery.

pub mod asymptotics;
pub mod exitprob;
pub mod experiments;
pub mod seeding;
pub mod smallmat;
pub mod stats;
pub mod strip_env;
pub mod walker;

pub use seeding::derive_seed;
pub use smallmat::{SquareMat, ScaledProduct};
pub use strip_env::{EnvironmentModel, EnvironmentWindow, LayerTriple};
