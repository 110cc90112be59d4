pub mod frames;
pub mod toyworld;
pub mod predictor;
pub mod checkpoint;
pub mod flow;
pub mod gradcheck;
pub mod losses;
pub mod trainer;
pub mod scorer;
pub mod evaluator;
