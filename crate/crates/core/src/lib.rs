pub mod corpus;
pub mod curation;
pub mod denoise;
pub mod eval;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod trainer;
