pub mod action;
pub mod agent;
pub mod canon;
pub mod eval;
pub mod executor;
pub mod geo;
pub mod reasoner;
pub mod recorder;
pub mod state;
pub mod synth;
