pub mod adaptation;
pub mod check;
pub mod contact;
pub mod controller;
pub mod error;
pub mod export;
pub mod flex;
pub mod kinematics;
pub mod lyapunov;
pub mod plant;
pub mod scenario;
pub mod sim;

pub use error::{Error, Result};
