pub mod analysis;
pub mod autodiff;
pub mod cli;
pub mod error;
pub mod experiment;
pub mod game;
pub mod io;
pub mod losses;
pub mod models;
pub mod perturb;
pub mod sweep;
pub mod synthdata;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
