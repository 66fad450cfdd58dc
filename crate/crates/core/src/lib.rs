pub mod certificates;
pub mod diffusion;
pub mod evaluation;
pub mod experiments;
pub mod graphs;
pub mod inference;
pub mod linalg;
pub mod par;
pub mod solver;
