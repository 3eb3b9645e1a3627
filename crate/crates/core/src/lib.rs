//! Continuum battle-flow simulation: unit densities advected over terrain,
//! close-in and ranged fire, orders and morale, and seeded ensembles.

pub mod combat;
pub mod command;
pub mod ensemble;
pub mod files;
pub mod geom;
pub mod kinematics;
pub mod output;
pub mod scenario;
pub mod solver;
pub mod terrain;
pub mod units;
