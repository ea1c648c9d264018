pub mod audio;
pub mod autograd;
pub mod encoder;
pub mod eval;
pub mod experiment;
pub mod human;
pub mod losses;
pub mod optim;
pub mod params;
pub mod probe;
pub mod tensor;
pub mod trainer;
