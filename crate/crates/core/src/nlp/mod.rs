//! Smooth nonlinear programs assembled from named blocks, and a sparse
//! primal-dual interior-point solver for them.

pub mod problem;
pub mod solver;
pub mod sparse;

pub use problem::{
    assemble, check_derivatives, check_hessians, AffineMap, Block, ConstraintKind, FunctionBlock, NlProblem,
    SmoothMap, VarBlock, VarInfo,
};
pub use solver::{solve, NlSolution, SolveStatus, Solver, SolverOptions};
