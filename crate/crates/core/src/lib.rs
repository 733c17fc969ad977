pub mod control;
pub mod integrate;
pub mod models;
pub mod nnet;
pub mod plant;
pub mod types;
