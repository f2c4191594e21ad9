pub mod basis;
pub mod error;
pub mod field;
pub mod geometry;
pub mod kernels;
pub mod similarity;
pub mod svf;
pub mod tape;
pub mod volume;
