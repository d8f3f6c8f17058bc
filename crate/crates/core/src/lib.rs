pub mod active;
pub mod cli;
pub mod data;
pub mod featurize;
pub mod io;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod smiles;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod transfer;
