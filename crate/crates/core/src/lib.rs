pub mod autodiff;
pub mod tensor;
pub mod config;
pub mod image;
pub mod synthgen;
pub mod data;
pub mod nets;
pub mod losses;
pub mod optim;
pub mod checkpoint;
pub mod trainer;
pub mod eval;
pub mod diagnostic;
