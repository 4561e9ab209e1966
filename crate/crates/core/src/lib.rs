//! Linear-quadratic mean-field control, team and game problems.
//!
//! Riccati-based synthesis of decentralized feedback laws, Monte Carlo
//! simulation of the weakly coupled N-agent system with common noise, and
//! experiments comparing the resulting costs.

pub mod analysis;
pub mod cli;
pub mod error;
pub mod export;
pub mod linalg;
pub mod model;
pub mod riccati;
pub mod simulate;
pub mod strategy;

pub use error::{Error, Result};
pub use model::{parse_problem_json, validate_spec, ProblemCandidate, ProblemSpec};
pub use riccati::{solve_re1, solve_re2, solve_re3, RiccatiSolution, RiccatiTag, TimeGrid};
pub use strategy::{synthesize_mc_mt, synthesize_mg, FeedbackLaw, LawTag};
