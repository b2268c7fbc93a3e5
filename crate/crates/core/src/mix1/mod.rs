//! The two-input, one-output mix: per-packet anonymity under a strict delay.

pub mod policy;
pub mod solver;

pub use policy::{
    anonymity_t0, optimal_policy_t1, reward, step, step_t0, transition_row, MixStep,
    ParametricPolicy,
};
pub use solver::{
    coordinate_ascent, evaluate_policy, f_func, g_func, solve, solve_fixed_point, solve_symmetric,
    verify_kkt, KktReport, SolveResult, StationaryDistribution4,
};
