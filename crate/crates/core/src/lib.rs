pub mod cli;
pub mod curriculum;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod irt;
pub mod optim;
pub mod sim;
pub mod stats;
pub mod vi;
