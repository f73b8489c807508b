pub mod asil;
pub mod editing;
pub mod error;
pub mod eval;
pub mod grid;
pub mod inverse;
pub mod neural;
pub mod parallel;
pub mod replay;
pub mod scenario;
pub mod study;
pub mod subgoal;
pub mod trainer;
