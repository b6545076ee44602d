pub mod dataset;
pub mod decoder;
pub mod diffcore;
pub mod encoder;
pub mod geom;
pub mod harness;
pub mod histquery;
pub mod model;
pub mod nn;
pub mod objective;
pub mod occupancy;
pub mod par;
pub mod plot;
pub mod scenario;
pub mod trainkit;
