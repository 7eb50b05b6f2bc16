//! Numerical analysis of periodic travelling waves that bifurcate from a
//! heteroclinic loop of the FitzHugh–Nagumo system.

pub mod banded;
pub mod bvp;
pub mod eig3;
pub mod evans;
pub mod melnikov;
pub mod model;
pub mod orbits;
pub mod spectral;
pub mod wave;
pub mod bloch;
pub mod pde;
