pub mod dd;
pub mod error;
pub mod hp;
pub mod quad;
pub mod rk;
pub mod special;
pub mod stats;
pub mod potential;
pub mod mat2;
pub mod turning;
pub mod phase;
pub mod oscillatory;
pub mod ode;
pub mod discrete;
pub mod model;
pub mod cli;
