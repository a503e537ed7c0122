pub mod config;
pub mod diagnostics;
pub mod dynamics;
pub mod error;
pub mod kernels;
pub mod mesh;
pub mod scenario;
pub mod transforms;
