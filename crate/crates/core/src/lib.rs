pub mod classifier;
pub mod corpus;
pub mod decode;
pub mod encoder;
pub mod eval;
pub mod generator;
pub mod gradcheck;
pub mod kb;
pub mod lm;
pub mod params;
pub mod system;
pub mod taxonomy;
pub mod text;
pub mod weak;
