pub mod dataset;
pub mod encoder;
pub mod graph;
pub mod model;
pub mod rgcn;
pub mod synthetic;
pub mod tensor;
