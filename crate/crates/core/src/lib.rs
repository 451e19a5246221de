pub mod blockworld;
pub mod datastore;
pub mod diffusion;
pub mod numcore;
pub mod padnet;
pub mod runtime;
pub mod trainkit;
