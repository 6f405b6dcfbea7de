pub mod datastore;
pub mod executor;
pub mod expert;
pub mod gridworld;
pub mod jsonfmt;
pub mod nn;
pub mod policy;
pub mod seed;
pub mod training;
