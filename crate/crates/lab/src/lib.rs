pub use rdpc_core;

pub mod checkpoint;
pub mod config;
pub mod images;
pub mod mnist;
pub mod networks;
pub mod nn;
pub mod oracle_io;
pub mod plot;
pub mod results;
pub mod sweep;
pub mod trainer;
