pub mod access;
pub mod config;
pub mod deploy;
pub mod fabric;
pub mod optimizer;
pub mod quant;
pub mod run;
pub mod scenario;
pub mod switch;
pub mod transport;
pub mod wire;
pub mod worker;
