pub mod attention;
pub mod events;
pub mod network;
pub mod neuron;
pub mod tensor;
pub mod training;
pub mod harness;
