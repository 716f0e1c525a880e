pub mod audio;
pub mod metrics;
pub mod mixgen;
pub mod model;
pub mod nn;
pub mod signals;
pub mod train;
