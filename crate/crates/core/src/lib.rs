pub mod error;
pub mod network;
pub mod quadratics;
pub mod problem;
pub mod conic;
pub mod convexify;
pub mod driver;
pub mod case;
pub mod analysis;
